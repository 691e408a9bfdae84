//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them.
//!
//! Run with `cargo test -p cfnet-core --test acceptance -- --nocapture` to
//! see the report.

mod support;

use std::path::Path;
use std::time::{Duration, Instant};

use cfnet::features::{har_aggregate, HogConfig, RadarCube};
use cfnet::losses::LossWeights;
use cfnet::metrics::{report, ConfusionMatrix};
use cfnet::model::{ClassifierConfig, EncoderConfig};
use cfnet::ndgrad::{AdamWConfig, ParamSet, Tensor};
use cfnet::pipeline::*;
use cfnet::rng;
use cfnet::sarsim::{
    image_formation, quantize_1bit, range_compress, reference_chirp, simulate_echo, ComplexMatrix, RadarParams,
    ReflectivityMap,
};
use num_complex::{Complex32, Complex64};
use rand::Rng;
use support::gradsuite;

struct Line {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn line(id: &'static str, passed: bool, detail: String) -> Line {
    println!("criterion {id}: {} — {detail}", if passed { "PASS" } else { "FAIL" });
    Line { id, passed, detail }
}

fn metric_oracle() -> Line {
    let t = Instant::now();
    let rows: Vec<Vec<u64>> = vec![
        vec![3, 1, 2, 1, 1, 0],
        vec![0, 5, 0, 1, 1, 0],
        vec![1, 1, 3, 2, 1, 0],
        vec![0, 3, 2, 108, 4, 1],
        vec![0, 2, 0, 2, 18, 0],
        vec![0, 0, 0, 4, 3, 2],
    ];
    let r = report(&ConfusionMatrix::from_rows(&rows).unwrap()).unwrap();
    let (acc, f1) = (100.0 * r.accuracy, 100.0 * r.macro_f1);
    let el = t.elapsed();
    let ok = (acc - 80.81).abs() <= 0.01 && (f1 - 56.58).abs() <= 0.01 && el < Duration::from_secs(1);
    line("1", ok, format!("accuracy {acc:.4}%, macro-F1 {f1:.4}% in {el:?}"))
}

fn split_arithmetic() -> Line {
    let mut cfg = SynthConfig::new(6, 785, 64, 0);
    cfg.imbalance = Imbalance::Table1;
    cfg.split = SplitSpec::parse("70/30").unwrap();
    let counts = cfg.class_counts().unwrap();
    let (mut train, mut test) = (0, 0);
    for (c, &n) in counts.iter().enumerate() {
        let (a, v, b) = cfg.split.counts(n, c);
        assert_eq!(v, 0);
        train += a;
        test += b;
    }
    line("2", train == 801 && test == 342, format!("class totals {counts:?} -> {train} train / {test} test"))
}

fn gradient_suite() -> Line {
    let t = Instant::now();
    let res = gradsuite::run_all(7);
    let el = t.elapsed();
    let failed: Vec<_> = res.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let worst32 = res.iter().map(|r| r.err_f32).fold(0.0, f64::max);
    let worst64 = res.iter().map(|r| r.err_f64).fold(0.0, f64::max);
    line(
        "3",
        failed.is_empty() && el < Duration::from_secs(30),
        format!(
            "{} cases x {} points, worst rel. error f32 {worst32:.1e} / f64 {worst64:.1e}, failures {failed:?}, {el:?}",
            res.len(),
            gradsuite::POINTS
        ),
    )
}

fn quantizer_invariants() -> Line {
    let mags = [0.0f32, f32::from_bits(1), f32::MIN_POSITIVE / 2.0, f32::MIN_POSITIVE, 1e-20, 0.5, 1.0, 3.0, 1e30, f32::MAX, f32::INFINITY];
    let vals: Vec<f32> = mags.iter().flat_map(|&m| [m, -m]).collect();
    let mut cols = vec![];
    for &re in &vals {
        for &im in &vals {
            cols.push(vec![Complex32::new(re, im)]);
        }
    }
    let m = ComplexMatrix::from_columns(1, cols);
    let q = quantize_1bit(&m);
    let mut bad = 0;
    for (x, y) in m.samples().iter().zip(q.samples()) {
        let want = |v: f32| if v > 0.0 || v == 0.0 { 1.0 } else { -1.0 };
        if y.re != want(x.re) || y.im != want(x.im) || (y.norm() - 2f32.sqrt()).abs() > 1e-6 {
            bad += 1;
        }
    }
    let idem = quantize_1bit(&q) == q;
    let zero = quantize_1bit(&ComplexMatrix::from_columns(1, vec![vec![Complex32::new(-0.0, 0.0)]])).get(0, 0);
    let ok = bad == 0 && idem && zero == Complex32::new(1.0, 1.0);
    line("4", ok, format!("{} grid points, {bad} mismatches, idempotent {idem}, sign(±0) = +1: {}", m.samples().len(), zero == Complex32::new(1.0, 1.0)))
}

/// O(N^2) circular cross-correlation of `x` with `r`.
fn direct_correlation(x: &[Complex32], r: &[Complex32]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|m| {
            (0..n)
                .map(|k| {
                    let a = x[(k + m) % n];
                    Complex64::new(a.re as f64, a.im as f64) * Complex64::new(r[k].re as f64, -r[k].im as f64)
                })
                .sum()
        })
        .collect()
}

fn argmax(t: &Tensor<f32>) -> usize {
    t.data().iter().enumerate().fold((0, f32::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0
}

fn rda_correctness() -> Line {
    let t = Instant::now();
    let p = RadarParams::default();

    let mut scene = Tensor::<f32>::zeros(&[64, 64]);
    let mut r = rng::stream(5, &[]);
    for _ in 0..12 {
        scene.data_mut()[r.random_range(4..56) * 64 + r.random_range(4..60)] = r.random_range(0.2..1.0);
    }
    let echo = simulate_echo(&ReflectivityMap::new(scene).unwrap(), &p).unwrap();
    let rc = range_compress(&echo, &p).unwrap();
    let chirp = reference_chirp(&p);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..p.n_azimuth {
        let want = direct_correlation(echo.column(k), &chirp);
        for (a, b) in rc.column(k).iter().zip(&want) {
            num += (Complex64::new(a.re as f64, a.im as f64) - b).norm_sqr();
            den += b.norm_sqr();
        }
    }
    let corr_err = (num / den).sqrt();

    let mut worst = 0usize;
    for row in [16, 32, 47] {
        for col in [16, 32, 47] {
            let e = simulate_echo(&ReflectivityMap::point(64, 64, row, col, 1.0), &p).unwrap();
            let img = image_formation(&e, &p).unwrap();
            let i = argmax(&img);
            worst = worst.max((i / 64).abs_diff(row)).max((i % 64).abs_diff(col));
        }
    }

    // Range impulse response of a centred point: the compressed column at
    // the zero-Doppler pulse, zero-padded 16x in frequency for a fine grid.
    let e = simulate_echo(&ReflectivityMap::point(64, 64, 32, 32, 1.0), &p).unwrap();
    let rc = range_compress(&e, &p).unwrap();
    let col: Vec<Complex32> = rc.column(p.n_azimuth / 2).to_vec();
    let width = minus3db_width(&col, 16);
    let expect = p.sample_rate / (p.chirp_rate.abs() * p.pulse_duration);
    let el = t.elapsed();
    let ok = corr_err < 1e-3 && worst <= 1 && (width - expect).abs() <= 1.0 && el < Duration::from_secs(60);
    line(
        "5",
        ok,
        format!(
            "FFT vs direct correlation {corr_err:.1e}; 3x3 grid max peak offset {worst} px; -3 dB width {width:.2} samples (expected {expect:.2}); {el:?}"
        ),
    )
}

/// Width in samples of the -3 dB mainlobe around the peak, measured on a
/// band-limited interpolation with `up` points per sample.
fn minus3db_width(x: &[Complex32], up: usize) -> f64 {
    use rustfft::FftPlanner;
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex64> = x.iter().map(|c| Complex64::new(c.re as f64, c.im as f64)).collect();
    planner.plan_fft_forward(n).process(&mut spec);
    let m = n * up;
    let mut padded = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n / 2 {
        padded[k] = spec[k];
        padded[m - n / 2 + k] = spec[n / 2 + k];
    }
    planner.plan_fft_inverse(m).process(&mut padded);
    let mag: Vec<f64> = padded.iter().map(|c| c.norm()).collect();
    let (peak_i, peak) = mag.iter().enumerate().fold((0, 0.0), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    let thr = peak / 2f64.sqrt();
    let mut lo = 0;
    while lo < m && mag[(peak_i + m - lo - 1) % m] >= thr {
        lo += 1;
    }
    let mut hi = 0;
    while hi < m && mag[(peak_i + hi + 1) % m] >= thr {
        hi += 1;
    }
    (lo + hi + 1) as f64 / up as f64
}

fn har_aggregation() -> Line {
    let dims = [4, 128, 32, 32];
    let n: usize = dims.iter().product();
    let mut r = rng::stream(8, &[]);
    let data: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let cube = RadarCube::new(dims, data.clone()).unwrap();
    let got = har_aggregate(&cube);
    let [c, t, h, w] = dims;
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0f64;
            for ci in 0..c {
                for ti in 0..t {
                    s += data[((ci * t + ti) * h + y) * w + x] as f64;
                }
            }
            worst = worst.max((s / (c * t) as f64 - got.data()[y * w + x] as f64).abs());
        }
    }
    let ones = har_aggregate(&RadarCube::new(dims, vec![1.0; n]).unwrap());
    let ones_ok = ones.data().iter().all(|&v| v == 1.0);
    line("8", worst < 1e-6 && ones_ok, format!("max deviation from loop oracle {worst:.1e}; all-ones -> all-ones: {ones_ok}"))
}

// Criteria 6 and 7 train real models on a synthetic 6-class set.

const SEEDS: u64 = 5;

/// Desk-scale schedule: 144 training images and no oversampling, so each
/// epoch is ~30x smaller than the reference schedule. The learning rates
/// are raised to compensate, and the second fine-tuning phase decays its
/// rate so the final epoch reflects a settled model. Everything else keeps
/// its default.
fn pretrain_config(weights: LossWeights) -> PretrainConfig {
    PretrainConfig {
        epochs: 30,
        optim: AdamWConfig { lr: 1e-3, ..Default::default() },
        oversample_target: 0,
        weights,
        seed: 1,
        ..Default::default()
    }
}

fn finetune_config(hog: &HogFeatures, scales_used: usize, seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        classifier: ClassifierConfig { hog_dim: Some(hog.dim()), scales_used, ..Default::default() },
        optim: AdamWConfig { lr: 1e-3, ..Default::default() },
        lr_schedule: LrSchedule::Cosine,
        oversample_target: 0,
        seed,
        ..Default::default()
    }
}

/// (best validation accuracy, final-epoch validation accuracy) per seed.
fn arm(ds: &Dataset, hog: &HogFeatures, backbone: Option<&ParamSet<f32>>, scales_used: usize) -> Vec<(f64, f64)> {
    (0..SEEDS)
        .map(|seed| {
            let o = finetune(ds, Some(hog), backbone, &finetune_config(hog, scales_used, seed), None).unwrap();
            (o.best_val_acc, o.curves.last().unwrap().val_acc)
        })
        .collect()
}

fn fmt_accs(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
}

/// Seeds on which `a >= b`.
fn wins(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x >= y).count()
}

fn learning_criteria() -> Vec<Line> {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    // 6 classes x 34 pairs, split 70/15/15 -> 144 / 30 / 30.
    synth_dataset(&SynthConfig::new(6, 34, 64, 1), dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let hc = HogConfig::default();

    let full = pretrain(&ds, &pretrain_config(LossWeights::default()), None).unwrap();
    let first = full.curves.first().unwrap().l_rec;
    let (halved_at, min_rec) = full
        .curves
        .iter()
        .map(|r| (r.epoch, r.l_rec))
        .fold((None, f64::MAX), |(h, m), (e, l)| (h.or((l <= 0.5 * first).then_some(e)), m.min(l)));

    let test = ds.manifest.indices(Split::Test);
    let psnr = reconstruction_psnr(&full.net, &ds, &test).unwrap();
    let better = psnr.iter().filter(|(rec, raw)| rec > raw).count();
    let mean = |f: fn(&(f64, f64)) -> f64| psnr.iter().map(f).sum::<f64>() / psnr.len() as f64;
    let (mean_rec, mean_raw) = (mean(|p| p.0), mean(|p| p.1));

    let hog = compute_hog(&ds, Some(&full.net), HogSource::Reconstructed, &hc).unwrap().unwrap();
    let pre = arm(&ds, &hog, Some(&full.best), 5);
    let scratch = arm(&ds, &hog, None, 5);
    let el6 = t.elapsed();

    let best = |v: &[(f64, f64)]| v.iter().map(|p| p.0).collect::<Vec<_>>();
    let last = |v: &[(f64, f64)]| v.iter().map(|p| p.1).collect::<Vec<_>>();
    let (pre_b, scr_b) = (best(&pre), best(&scratch));
    let chance = 3.0 / ds.manifest.num_classes() as f64;
    let above = pre_b.iter().chain(&scr_b).all(|&a| a >= chance - 1e-9);
    let mut out = vec![
        line("6a", halved_at.is_some(), format!("epoch-mean L_rec {first:.4} -> min {min_rec:.4}, halved at epoch {halved_at:?}")),
        line(
            "6b",
            better * 5 >= psnr.len() * 4,
            format!("reconstruction beats 1-bit PSNR on {better}/{} test pairs (mean {mean_rec:.2} vs {mean_raw:.2} dB)", psnr.len()),
        ),
        line(
            "6c",
            wins(&pre_b, &scr_b) >= 4 && above && el6 < Duration::from_secs(15 * 60),
            format!(
                "best val acc pretrained [{}] vs scratch [{}]: pretrained >= scratch on {}/5, all >= {chance:.3}: {above}; stage runtime {el6:.0?}",
                fmt_accs(&pre_b),
                fmt_accs(&scr_b),
                wins(&pre_b, &scr_b)
            ),
        ),
    ];

    // Ablations compare final-epoch validation accuracy with matched seeds.
    let pre_l = last(&pre);
    let rec_only = pretrain(&ds, &pretrain_config(LossWeights::rec_only()), None).unwrap();
    let hog_r = compute_hog(&ds, Some(&rec_only.net), HogSource::Reconstructed, &hc).unwrap().unwrap();
    let rec_l = last(&arm(&ds, &hog_r, Some(&rec_only.best), 5));
    let s1_l = last(&arm(&ds, &hog, Some(&full.best), 1));
    let hog_raw = compute_hog(&ds, None, HogSource::Raw1bit, &hc).unwrap().unwrap();
    let raw_l = last(&arm(&ds, &hog_raw, Some(&full.best), 5));
    for (id, what, other) in [
        ("7a", "full loss vs L_rec only", &rec_l),
        ("7b", "5 scales vs 1 scale", &s1_l),
        ("7c", "reconstructed vs raw 1-bit HOG", &raw_l),
    ] {
        let w = wins(&pre_l, other);
        out.push(line(id, w >= 4, format!("{what}: final val acc [{}] vs [{}], >= on {w}/5", fmt_accs(&pre_l), fmt_accs(other))));
    }
    println!("criteria 6-7 total runtime {:.0?}", t.elapsed());
    out
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.strip_prefix(dir).unwrap().display().to_string();
                // The HOG-stage manifest records absolute image paths.
                let bytes = String::from_utf8(std::fs::read(&p).unwrap())
                    .map(|s| s.replace(&dir.display().to_string(), "<run>").into_bytes())
                    .unwrap_or_else(|e| e.into_bytes());
                out.push((name, bytes));
            }
        }
    }
    out.sort();
    out
}

/// Synthesis through evaluation into `dir`, on one worker thread.
fn full_pipeline(dir: &Path) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let data = dir.join("data");
        synth_dataset(&SynthConfig::new(3, 8, 64, 21), &data).unwrap();
        let ds = Dataset::load(&data).unwrap();
        let enc = EncoderConfig { channels: [4, 8, 16, 32, 64] };
        let pc = PretrainConfig { encoder: enc.clone(), epochs: 2, p: 2, k: 2, oversample_target: 0, seed: 21, ..Default::default() };
        let pre = pretrain(&ds, &pc, Some(&dir.join("pretrain"))).unwrap();
        let hc = HogConfig::default();
        extract_hog_stage(&ds, Some(&pre.net), HogSource::Reconstructed, &hc, &dir.join("hog")).unwrap();
        let ds_hog = Dataset::load(&dir.join("hog")).unwrap();
        let hog = HogFeatures::load(&ds_hog, hc).unwrap().unwrap();
        let fc = FinetuneConfig {
            encoder: enc,
            classifier: ClassifierConfig { num_classes: 3, hog_dim: Some(hog.dim()), embed_dim: 16, hog_hidden: 16, ..Default::default() },
            head_epochs: 1,
            full_epochs: 1,
            batch_size: 4,
            oversample_target: 0,
            seed: 21,
            ..Default::default()
        };
        let ft = finetune(&ds_hog, Some(&hog), Some(&pre.best), &fc, Some(&dir.join("finetune"))).unwrap();
        let (cm, _) = evaluate(&ft.model, &ds_hog, Some(&hog), Split::Test).unwrap();
        let names = ds_hog.manifest.classes.clone();
        std::fs::write(dir.join("metrics.csv"), report(&cm).unwrap().to_csv(&names)).unwrap();
        std::fs::write(dir.join("confusion.csv"), cm.to_csv(&names)).unwrap();
    });
}

fn reproducibility() -> Line {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full_pipeline(a.path());
    full_pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<_> = ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| x.0.clone()).collect();
    let same = ta.len() == tb.len() && differing.is_empty();
    let ck_path = a.path().join("pretrain").join(train::CKPT_FINAL);
    let bytes = std::fs::read(&ck_path).unwrap();
    let round = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap() == bytes;
    let kinds = ["ckpt_best.cfck", "pretrain_curves.csv", "finetune_curves.csv", "classifier_best.cfck", "metrics.csv"];
    let covered = kinds.iter().all(|k| ta.iter().any(|(n, _)| n.ends_with(k)));
    line(
        "9",
        same && round && covered,
        format!("{} files compared, differing {differing:?}; checkpoint round-trip byte-exact: {round}", ta.len()),
    )
}

#[test]
fn acceptance() {
    let mut lines = vec![metric_oracle(), split_arithmetic(), gradient_suite(), quantizer_invariants(), rda_correctness()];
    lines.extend(learning_criteria());
    lines.push(har_aggregation());
    lines.push(reproducibility());
    lines.sort_by_key(|l| l.id.split(['a', 'b', 'c']).next().unwrap().parse::<u32>().unwrap());
    println!("\nsummary:");
    for l in &lines {
        println!("  {:<3} {}", l.id, if l.passed { "PASS" } else { "FAIL" });
    }
    let failed: Vec<_> = lines.iter().filter(|l| !l.passed).map(|l| format!("{} ({})", l.id, l.detail)).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
