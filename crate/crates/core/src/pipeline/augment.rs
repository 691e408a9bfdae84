use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::Rng;

/// Training-time augmentation. Geometric transforms hit both images of a
/// pair identically; photometric transforms and random erasing hit only
/// the 1-bit input, so the reconstruction target stays clean.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Probability of drawing a random quarter-turn count (0..=3).
    pub rotate_p: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub speckle_p: f64,
    /// Variance range of the multiplicative `1 + N(0, var)` speckle.
    pub speckle_var: (f64, f64),
    pub gamma_p: f64,
    pub gamma: (f64, f64),
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub brightness_p: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub erase_p: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub erase_fill: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_p: 1.0,
            hflip_p: 0.5,
            vflip_p: 0.5,
            speckle_p: 0.3,
            speckle_var: (0.01, 0.05),
            gamma_p: 0.3,
            gamma: (0.8, 1.25),
            blur_p: 0.2,
            blur_sigma: (0.4, 0.8),
            brightness_p: 0.3,
            brightness: (-0.05, 0.05),
            contrast: (0.85, 1.15),
            erase_p: 0.3,
            erase_area: (0.02, 0.1),
            erase_aspect: (0.3, 3.3),
            erase_fill: 0.0,
        }
    }
}

impl AugmentConfig {
    /// All probabilities zero: augmentation is the identity.
    pub fn none() -> Self {
        AugmentConfig {
            rotate_p: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            speckle_p: 0.0,
            gamma_p: 0.0,
            blur_p: 0.0,
            brightness_p: 0.0,
            erase_p: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in [
            ("rotate_p", self.rotate_p),
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("speckle_p", self.speckle_p),
            ("gamma_p", self.gamma_p),
            ("blur_p", self.blur_p),
            ("brightness_p", self.brightness_p),
            ("erase_p", self.erase_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParam(format!("augment.{k} must be in [0, 1], got {p}")));
            }
        }
        for (k, (lo, hi)) in [
            ("speckle_var", self.speckle_var),
            ("gamma", self.gamma),
            ("blur_sigma", self.blur_sigma),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("erase_area", self.erase_area),
            ("erase_aspect", self.erase_aspect),
        ] {
            if !(lo <= hi) {
                return Err(Error::InvalidParam(format!("augment.{k} range is empty: {lo}..{hi}")));
            }
        }
        if self.erase_area.0 < 0.0 || self.erase_area.1 > 1.0 || self.erase_aspect.0 <= 0.0 {
            return Err(Error::InvalidParam("augment erase area must be in [0, 1] and aspect positive".into()));
        }
        Ok(())
    }
}

/// Quarter turns followed by optional flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GeomOp {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl GeomOp {
    /// Where pixel `(y, x)` of an `n x n` image lands.
    pub fn map_point(&self, n: usize, (mut y, mut x): (usize, usize)) -> (usize, usize) {
        for _ in 0..self.quarter_turns % 4 {
            (y, x) = (n - 1 - x, y);
        }
        if self.hflip {
            x = n - 1 - x;
        }
        if self.vflip {
            y = n - 1 - y;
        }
        (y, x)
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        if *self == GeomOp::default() {
            return img.clone();
        }
        let n = img.shape()[0];
        assert_eq!(img.shape(), &[n, n], "geometric augmentation needs square images");
        let src = img.data();
        let mut out = vec![0.0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let (ty, tx) = self.map_point(n, (y, x));
                out[ty * n + tx] = src[y * n + x];
            }
        }
        Tensor::new(img.shape(), out).expect("same shape")
    }
}

fn uniform(r: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..hi)
    }
}

fn gaussian_blur(img: &mut [f32], h: usize, w: usize, sigma: f64) {
    let rad = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-rad..=rad).map(|i| k[(i + rad) as usize] * img[y * w + clamp(x as isize + i, w)] as f64).sum();
            tmp[y * w + x] = (s / ks) as f32;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-rad..=rad).map(|i| k[(i + rad) as usize] * tmp[clamp(y as isize + i, h) * w + x] as f64).sum();
            img[y * w + x] = (s / ks) as f32;
        }
    }
}

/// Rectangle side lengths for an erased area fraction and aspect `h / w`.
pub fn erase_dims(area: f64, aspect: f64, h: usize, w: usize) -> (usize, usize) {
    let px = area * (h * w) as f64;
    let eh = ((px * aspect).sqrt().round() as usize).clamp(1, h);
    let ew = ((px / eh as f64).round() as usize).clamp(1, w);
    (eh, ew)
}

pub fn erase(img: &mut Tensor<f32>, top: usize, left: usize, eh: usize, ew: usize, fill: f32) {
    let w = img.shape()[1];
    let d = img.data_mut();
    for y in top..top + eh {
        d[y * w + left..y * w + left + ew].fill(fill);
    }
}

/// Augments a `(1-bit, 16-bit)` pair; returns the pair and the geometric op.
pub fn augment(x1: &Tensor<f32>, x16: &Tensor<f32>, cfg: &AugmentConfig, r: &mut Rng) -> (Tensor<f32>, Tensor<f32>, GeomOp) {
    let (h, w) = (x1.shape()[0], x1.shape()[1]);
    let square = h == w;
    let mut op = GeomOp::default();
    if square && cfg.rotate_p > 0.0 && r.random_bool(cfg.rotate_p) {
        op.quarter_turns = r.random_range(0..4);
    }
    if square && cfg.hflip_p > 0.0 {
        op.hflip = r.random_bool(cfg.hflip_p);
    }
    if square && cfg.vflip_p > 0.0 {
        op.vflip = r.random_bool(cfg.vflip_p);
    }
    let mut a = op.apply(x1);
    let b = op.apply(x16);

    let hit = |r: &mut Rng, p: f64| p > 0.0 && r.random_bool(p);
    if hit(r, cfg.speckle_p) {
        let sd = uniform(r, cfg.speckle_var).sqrt();
        let n = Normal::new(0.0, sd).expect("finite sd");
        for v in a.data_mut() {
            *v *= (1.0 + n.sample(r)) as f32;
        }
    }
    if hit(r, cfg.gamma_p) {
        let g = uniform(r, cfg.gamma) as f32;
        for v in a.data_mut() {
            *v = v.clamp(0.0, 1.0).powf(g);
        }
    }
    if hit(r, cfg.blur_p) {
        let s = uniform(r, cfg.blur_sigma);
        if s > 0.0 {
            gaussian_blur(a.data_mut(), h, w, s);
        }
    }
    if hit(r, cfg.brightness_p) {
        let (bshift, c) = (uniform(r, cfg.brightness) as f32, uniform(r, cfg.contrast) as f32);
        let mean = a.data().iter().sum::<f32>() / a.len() as f32;
        for v in a.data_mut() {
            *v = (*v - mean) * c + mean + bshift;
        }
    }
    if hit(r, cfg.erase_p) {
        let (eh, ew) = erase_dims(uniform(r, cfg.erase_area), uniform(r, cfg.erase_aspect), h, w);
        let (top, left) = (r.random_range(0..=h - eh), r.random_range(0..=w - ew));
        erase(&mut a, top, left, eh, ew, cfg.erase_fill);
    }
    for v in a.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    (a, b, op)
}
