use std::fs;
use std::path::Path;

use rand::Rng as _;

use super::manifest::{Manifest, SamplePair, Split};
use crate::error::{Error, Result};
use crate::ndgrad::{io, Tensor};
use crate::par;
use crate::rng::{self, purpose, Rng};
use crate::sarsim::{generate_pair, GroundTruth, RadarParams, ReflectivityMap};

/// Target families, one per class index.
pub const FAMILIES: [&str; 10] = ["bar", "l_shape", "twin_blob", "ring", "cross", "wedge", "t_shape", "dot_grid", "parallel", "disc"];

/// Class sizes of the imbalanced six-class reference profile.
pub const TABLE1_COUNTS: [usize; 6] = [50, 50, 54, 785, 148, 56];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Imbalance {
    Balanced,
    /// The six-class reference ratios, scaled so the largest class has
    /// `per_class` samples.
    Table1,
}

/// Integer percentages, summing to 100.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 70, val: 15, test: 15 }
    }
}

impl SplitSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split('/')
            .map(|p| p.trim().parse().map_err(|_| Error::InvalidParam(format!("bad split {s:?}"))))
            .collect::<Result<_>>()?;
        let spec = match parts[..] {
            [train, test] => SplitSpec { train, val: 0, test },
            [train, val, test] => SplitSpec { train, val, test },
            _ => return Err(Error::InvalidParam(format!("split must be a/b or a/b/c, got {s:?}"))),
        };
        if spec.train + spec.val + spec.test != 100 {
            return Err(Error::InvalidParam(format!("split {s:?} does not sum to 100")));
        }
        Ok(spec)
    }

    /// `(train, val, test)` counts for a class of `n` rows. Train takes
    /// `round(n * train%)`; the rest is divided between val and test in
    /// proportion, with an exact half going to val on even classes and to
    /// test on odd ones so totals balance across classes.
    pub fn counts(&self, n: usize, class: usize) -> (usize, usize, usize) {
        let train = (n * self.train as usize + 50) / 100;
        let rest = n - train;
        let held = (self.val + self.test) as usize;
        if held == 0 || self.val == 0 {
            return (train, 0, rest);
        }
        let num = rest * self.val as usize;
        let (mut val, frac) = (num / held, num % held);
        if 2 * frac > held || (2 * frac == held && class % 2 == 0) {
            val += 1;
        }
        (train, val, rest - val)
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub imbalance: Imbalance,
    pub split: SplitSpec,
    pub gt_source: GroundTruth,
    pub radar: RadarParams,
}

impl SynthConfig {
    pub fn new(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        SynthConfig {
            num_classes,
            per_class,
            size,
            seed,
            imbalance: Imbalance::Balanced,
            split: SplitSpec::default(),
            gt_source: GroundTruth::Rda,
            radar: RadarParams::for_grid(size, size),
        }
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        if !(2..=FAMILIES.len()).contains(&self.num_classes) {
            return Err(Error::InvalidParam(format!("class count must be in 2..=10, got {}", self.num_classes)));
        }
        if self.per_class == 0 {
            return Err(Error::InvalidParam("per-class count must be positive".into()));
        }
        Ok(match self.imbalance {
            Imbalance::Balanced => vec![self.per_class; self.num_classes],
            Imbalance::Table1 => {
                if self.num_classes != TABLE1_COUNTS.len() {
                    return Err(Error::InvalidParam(format!(
                        "the table1 imbalance profile has 6 classes, requested {}",
                        self.num_classes
                    )));
                }
                let max = *TABLE1_COUNTS.iter().max().unwrap();
                TABLE1_COUNTS.iter().map(|&c| ((c * self.per_class + max / 2) / max).max(1)).collect()
            }
        })
    }
}

/// Deterministic stratified split tags for `counts[c]` rows per class.
pub fn assign_splits(counts: &[usize], spec: &SplitSpec, seed: u64) -> Vec<Vec<Split>> {
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let (tr, va, _) = spec.counts(n, c);
            let mut tags: Vec<Split> = (0..n)
                .map(|i| if i < tr { Split::Train } else if i < tr + va { Split::Val } else { Split::Test })
                .collect();
            let mut r = rng::stream(seed, &[purpose::SPLIT, c as u64]);
            fisher_yates(&mut tags, &mut r);
            tags
        })
        .collect()
}

pub(crate) fn fisher_yates<T>(v: &mut [T], r: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = r.random_range(0..=i);
        v.swap(i, j);
    }
}

fn inside(family: usize, u: f64, v: f64) -> Option<usize> {
    let r = (u * u + v * v).sqrt();
    let in_box = |u0: f64, u1: f64, v0: f64, v1: f64| u >= u0 && u <= u1 && v >= v0 && v <= v1;
    let disc = |cu: f64, cv: f64, rad: f64| (u - cu).powi(2) + (v - cv).powi(2) <= rad * rad;
    // The returned index selects a per-part amplitude.
    match family {
        0 => in_box(-1.0, 1.0, -0.22, 0.22).then_some(0),
        1 => {
            if in_box(-1.0, 1.0, -1.0, -0.6) {
                Some(0)
            } else if in_box(-1.0, -0.6, -0.6, 1.0) {
                Some(1)
            } else {
                None
            }
        }
        2 => {
            if disc(-0.6, 0.0, 0.38) {
                Some(0)
            } else if disc(0.6, 0.0, 0.38) {
                Some(1)
            } else {
                None
            }
        }
        3 => (0.6..=0.9).contains(&r).then_some(0),
        4 => {
            if in_box(-1.0, 1.0, -0.18, 0.18) {
                Some(0)
            } else if in_box(-0.18, 0.18, -1.0, 1.0) {
                Some(1)
            } else {
                None
            }
        }
        5 => (v >= -0.8 && v <= 0.9 && u.abs() <= (v + 0.8) / 1.7 * 0.9).then_some(0),
        6 => {
            if in_box(-1.0, 1.0, 0.65, 1.0) {
                Some(0)
            } else if in_box(-0.18, 0.18, -1.0, 0.65) {
                Some(1)
            } else {
                None
            }
        }
        7 => {
            let near = |x: f64| [-0.7, 0.0, 0.7].iter().position(|&c| (x - c).abs() <= 0.16);
            match (near(u), near(v)) {
                (Some(a), Some(b)) if disc([-0.7, 0.0, 0.7][a], [-0.7, 0.0, 0.7][b], 0.16) => Some(a * 3 + b),
                _ => None,
            }
        }
        8 => {
            if in_box(-1.0, 1.0, 0.35, 0.6) {
                Some(0)
            } else if in_box(-1.0, 1.0, -0.6, -0.35) {
                Some(1)
            } else {
                None
            }
        }
        9 => (r <= 0.7).then_some(0),
        _ => None,
    }
}

/// Renders one randomised target of `family` on a `size x size` grid.
///
/// Pose (centre jitter, rotation), scale, per-part amplitude and per-pixel
/// texture are random; a few weak clutter points are added. Rows stay clear
/// of the last two range bins so every pulse fits the receive window.
pub fn render_target(family: usize, size: usize, r: &mut Rng) -> ReflectivityMap {
    let s = size as f64;
    let scale = s * r.random_range(0.15..0.22);
    let (cy, cx) = (s / 2.0 + r.random_range(-0.08..0.08) * s, s / 2.0 + r.random_range(-0.08..0.08) * s);
    let theta = r.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let parts: Vec<f64> = (0..9).map(|_| r.random_range(0.55..1.0)).collect();
    let mut img = vec![0.0f32; size * size];
    for y in 2..size - 2 {
        for x in 2..size - 2 {
            let (dy, dx) = ((y as f64 - cy) / scale, (x as f64 - cx) / scale);
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if let Some(p) = inside(family, u, v) {
                img[y * size + x] = (parts[p] * r.random_range(0.6..1.0)) as f32;
            }
        }
    }
    for _ in 0..r.random_range(3..7) {
        let (y, x) = (r.random_range(2..size - 2), r.random_range(2..size - 2));
        let w = r.random_range(0.05..0.3);
        let px = &mut img[y * size + x];
        *px = px.max(w);
    }
    ReflectivityMap::new(Tensor::new(&[size, size], img).expect("square grid")).expect("values in [0, 1]")
}

pub(crate) fn image_paths(id: &str) -> (String, String, String) {
    (format!("images/{id}_1bit.cft"), format!("images/{id}_16bit.cft"), format!("images/{id}_target.cft"))
}

/// Generates targets, images them through the simulator, writes the CFT
/// files and the manifest into `out`, and returns the manifest.
pub fn synth_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    let counts = cfg.class_counts()?;
    if cfg.size % 32 != 0 || cfg.radar.n_range != cfg.size || cfg.radar.n_azimuth != cfg.size {
        return Err(Error::InvalidParam(format!(
            "image size {} must be a multiple of 32 and match the radar grid {}x{}",
            cfg.size, cfg.radar.n_range, cfg.radar.n_azimuth
        )));
    }
    cfg.radar.validate()?;
    let tags = assign_splits(&counts, &cfg.split, cfg.seed);
    let jobs: Vec<(usize, usize)> = counts.iter().enumerate().flat_map(|(c, &n)| (0..n).map(move |k| (c, k))).collect();
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let results = par::map_slice(&jobs, |&(c, k)| -> Result<SamplePair> {
        let id = format!("c{c}_{k:04}");
        let mut r = rng::stream(cfg.seed, &[purpose::SYNTH, c as u64, k as u64]);
        let target = render_target(c, cfg.size, &mut r);
        let pair = generate_pair(&target, &cfg.radar, cfg.gt_source)?;
        let (p1, p16, pt) = image_paths(&id);
        io::save_f32(&out.join(&p1), &pair.img_1bit)?;
        io::save_f32(&out.join(&p16), &pair.img_16bit)?;
        io::save_f32(&out.join(&pt), target.image())?;
        Ok(SamplePair { id, path_1bit: p1, path_16bit: p16, label: c, split: tags[c][k], path_hog: None })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let classes = (0..cfg.num_classes).map(|c| FAMILIES[c].to_string()).collect();
    let manifest = Manifest { rows, classes };
    manifest.save(out)?;
    Ok(manifest)
}
