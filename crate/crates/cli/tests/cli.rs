use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfnet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).to_string_lossy().into_owned()
}

fn metric(csv: &str, row: &str, col: usize) -> f64 {
    let line = csv.lines().find(|l| l.starts_with(&format!("{row},"))).expect("row present");
    line.split(',').nth(col).unwrap().parse().unwrap()
}

#[test]
fn matrix_only_scores_reference_table() {
    let out = tempfile::tempdir().unwrap();
    let o = cfnet(&["eval", "--matrix-only", &fixture("reference_confusion.csv"), "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.path().join("metrics.csv")).unwrap();
    assert!((metric(&csv, "accuracy", 3) - 139.0 / 172.0).abs() < 1e-6);
    assert!((metric(&csv, "macro", 3) - 0.5658).abs() < 1e-4);
    assert!((metric(&csv, "C1", 1) - 0.75).abs() < 1e-9);
    assert!(stdout(&o).contains("0.8081"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(cfnet(&["pretrain", "--bogus"]).status.code(), Some(2));
    assert_eq!(cfnet(&["frobnicate"]).status.code(), Some(2));
    let o = cfnet(&["config", "--set", "no.such.key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no.such.key"));
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        vec!["--help"],
        vec!["dataset", "synth", "--help"],
        vec!["dataset", "preview", "--help"],
        vec!["pretrain", "--help"],
        vec!["hog", "--help"],
        vec!["finetune", "--help"],
        vec!["eval", "--help"],
        vec!["run", "--help"],
        vec!["config", "--help"],
    ] {
        let o = cfnet(&sub);
        assert_eq!(o.status.code(), Some(0), "{sub:?}");
        assert!(stdout(&o).contains("Usage"), "{sub:?}");
    }
    let o = cfnet(&["config"]);
    assert!(stdout(&o).contains("train.pretrain_epochs = 30"));
}

#[test]
fn synth_is_byte_reproducible_and_previews() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let args = ["dataset", "synth", "--classes", "6", "--per-class", "10", "--size", "64", "--seed", "7", "--out"];
        let o = cfnet(&[&args[..], &[d.path().to_str().unwrap()]].concat());
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("wrote 60 pairs"));
    }
    let m = fs::read(a.path().join("manifest.csv")).unwrap();
    assert_eq!(m, fs::read(b.path().join("manifest.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&m).lines().count(), 61);
    for f in ["c0_0000_1bit.cft", "c5_0009_16bit.cft"] {
        assert_eq!(fs::read(a.path().join("images").join(f)).unwrap(), fs::read(b.path().join("images").join(f)).unwrap());
    }
    let prev = a.path().join("preview");
    let o = cfnet(&["dataset", "preview", "--manifest", a.path().to_str().unwrap(), "--out", prev.to_str().unwrap(), "--limit", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = fs::read(prev.join("c0_0000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n129 64\n255\n"));
    assert_eq!(pgm.len(), b"P5\n129 64\n255\n".len() + 129 * 64);
}

#[test]
fn missing_prerequisites_name_the_stage() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().to_str().unwrap();
    let o = cfnet(&["pretrain", "--manifest", p, "--out", p]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset synth"), "{}", stderr(&o));
    let o = cfnet(&["dataset", "synth", "--classes", "2", "--per-class", "4", "--out", p]);
    assert!(o.status.success());
    let o = cfnet(&["hog", "--manifest", p, "--out", p]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pretrain"), "{}", stderr(&o));
    let missing = d.path().join("nope.cfck");
    let o = cfnet(&["finetune", "--manifest", p, "--init", missing.to_str().unwrap(), "--out", p]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.cfck"), "{}", stderr(&o));
}

#[test]
fn end_to_end_run_writes_every_report() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "seed = 3\ndataset.classes = 3\ndataset.per_class = 8\nmodel.channels = 2,4,8,16,32\nmodel.embed_dim = 16\n\
         model.hog_hidden = 16\ntrain.pretrain_epochs = 2\ntrain.head_epochs = 1\ntrain.full_epochs = 1\n\
         train.pk_p = 2\ntrain.pk_k = 2\naugment.oversample_target = 0\neval.triptychs = 2\n",
    )
    .unwrap();
    let out = d.path().join("run");
    let o = cfnet(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "config.resolved",
        "data/manifest.csv",
        "pretrain/ckpt_best.cfck",
        "pretrain/ckpt_final.cfck",
        "hog/manifest.csv",
        "finetune/finetune_curves.csv",
        "finetune/classifier_best.cfck",
        "eval/metrics.csv",
        "eval/confusion.csv",
        "eval/predictions.csv",
        "eval/psnr.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let curves = fs::read_to_string(out.join("pretrain/pretrain_curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "epoch,l_rec,l_con,l_align,l_sep,l_total");
    assert!(curves.lines().skip(1).all(|l| l.split(',').count() == 6));
    assert_eq!(fs::read_dir(out.join("eval/triptychs")).unwrap().count(), 2);

    // confusion rows sum to the test-split class counts
    let manifest = fs::read_to_string(out.join("data/manifest.csv")).unwrap();
    let conf = fs::read_to_string(out.join("eval/confusion.csv")).unwrap();
    for (c, line) in conf.lines().skip(1).enumerate() {
        let sum: u64 = line.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).sum();
        let expect = manifest.lines().skip(1).filter(|l| l.ends_with(&format!(",{c},test,"))).count();
        assert_eq!(sum as usize, expect);
    }

    // a prediction file equal to the labels scores 1.0
    let preds = fs::read_to_string(out.join("eval/predictions.csv")).unwrap();
    let perfect: String = preds
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("{l}\n")
            } else {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{},{}\n", f[0], f[1], f[1])
            }
        })
        .collect();
    let pf = d.path().join("perfect.csv");
    fs::write(&pf, perfect).unwrap();
    let sc = d.path().join("scored");
    let o = cfnet(&["eval", "--predictions", pf.to_str().unwrap(), "--out", sc.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(sc.join("metrics.csv")).unwrap();
    assert_eq!(metric(&csv, "accuracy", 3), 1.0);

    // rerunning the evaluation rewrites identical outputs
    let before = fs::read(out.join("eval/metrics.csv")).unwrap();
    let hog = out.join("hog");
    let o = cfnet(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        hog.to_str().unwrap(),
        "--model",
        out.join("finetune/classifier_best.cfck").to_str().unwrap(),
        "--out",
        out.join("eval").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("eval/metrics.csv")).unwrap(), before);
}
