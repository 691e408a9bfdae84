//! Handcrafted features: HOG descriptors and radar-cube mean aggregation.
//!
//! Orientation convention: bins index the *gradient* orientation, unsigned,
//! with bin `k` centred at `k * 180 / bins` degrees. A horizontal intensity
//! ramp (gradient along +x, i.e. vertical edges at 90 degrees) therefore
//! votes entirely into bin 0. Votes are split linearly between the two
//! nearest bin centres, wrapping at 180 degrees.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct HogConfig {
    /// Cell side in pixels.
    pub cell: usize,
    pub bins: usize,
    /// Block side in cells.
    pub block: usize,
    /// Block stride in cells.
    pub stride: usize,
    /// L2-Hys clipping threshold.
    pub clip: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig { cell: 8, bins: 9, block: 2, stride: 1, clip: 0.2 }
    }
}

impl HogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell == 0 || self.block == 0 || self.stride == 0 {
            return Err(Error::InvalidParam("hog cell, block and stride must be positive".into()));
        }
        if self.bins < 2 {
            return Err(Error::InvalidParam(format!("hog.bins must be >= 2, got {}", self.bins)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::InvalidParam(format!("hog clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }

    /// Descriptor length for an `h x w` image.
    pub fn descriptor_len(&self, h: usize, w: usize) -> Result<usize> {
        self.validate()?;
        if h % self.cell != 0 || w % self.cell != 0 {
            return Err(Error::shape("hog", format!("{h}x{w} image not divisible by cell size {}", self.cell)));
        }
        let (cy, cx) = (h / self.cell, w / self.cell);
        if cy < self.block || cx < self.block {
            return Err(Error::shape("hog", format!("{cy}x{cx} cells smaller than one {0}x{0} block", self.block)));
        }
        let by = (cy - self.block) / self.stride + 1;
        let bx = (cx - self.block) / self.stride + 1;
        Ok(by * bx * self.block * self.block * self.bins)
    }
}

/// HOG descriptor of a rank-2 image.
pub fn hog_extract(image: &Tensor<f32>, cfg: &HogConfig) -> Result<Vec<f32>> {
    if image.rank() != 2 {
        return Err(Error::shape("hog", format!("expected rank-2 image, got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let len = cfg.descriptor_len(h, w)?;
    let px = |y: usize, x: usize| image.data()[y * w + x] as f64;

    let (cy, cx) = (h / cfg.cell, w / cfg.cell);
    let mut hist = vec![0.0f64; cy * cx * cfg.bins];
    let bin_width = 180.0 / cfg.bins as f64;
    for y in 0..h {
        for x in 0..w {
            let gx = if x == 0 || x + 1 == w { 0.0 } else { px(y, x + 1) - px(y, x - 1) };
            let gy = if y == 0 || y + 1 == h { 0.0 } else { px(y + 1, x) - px(y - 1, x) };
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            let pos = angle / bin_width;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo = lo as usize % cfg.bins;
            let hi = (lo + 1) % cfg.bins;
            let base = ((y / cfg.cell) * cx + x / cfg.cell) * cfg.bins;
            hist[base + lo] += mag * (1.0 - frac);
            hist[base + hi] += mag * frac;
        }
    }

    let mut out = Vec::with_capacity(len);
    let mut block = Vec::with_capacity(cfg.block * cfg.block * cfg.bins);
    let mut by = 0;
    while by + cfg.block <= cy {
        let mut bx = 0;
        while bx + cfg.block <= cx {
            block.clear();
            for dy in 0..cfg.block {
                for dx in 0..cfg.block {
                    let base = ((by + dy) * cx + bx + dx) * cfg.bins;
                    block.extend_from_slice(&hist[base..base + cfg.bins]);
                }
            }
            l2_hys(&mut block, cfg.clip);
            out.extend(block.iter().map(|&v| v as f32));
            bx += cfg.stride;
        }
        by += cfg.stride;
    }
    debug_assert_eq!(out.len(), len);
    Ok(out)
}

fn l2_normalize(v: &mut [f64]) {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + EPS * EPS).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn l2_hys(v: &mut [f64], clip: f64) {
    l2_normalize(v);
    v.iter_mut().for_each(|x| *x = x.min(clip));
    l2_normalize(v);
}

/// Multi-channel radar frames, `(C, T, H, W)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarCube {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl RadarCube {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape("radar-cube", format!("zero dim in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape("radar-cube", format!("{dims:?} needs {n} values, got {}", data.len())));
        }
        Ok(RadarCube { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Mean over channels and frames: an `H x W` map.
pub fn har_aggregate(cube: &RadarCube) -> Tensor<f32> {
    let [c, t, h, w] = cube.dims;
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    for frame in cube.data.chunks(plane) {
        for (a, &v) in acc.iter_mut().zip(frame) {
            *a += v as f64;
        }
    }
    let n = (c * t) as f64;
    Tensor::new(&[h, w], acc.into_iter().map(|v| (v / n) as f32).collect()).expect("nonzero dims")
}
