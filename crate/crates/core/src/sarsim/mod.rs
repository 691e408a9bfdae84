//! Paired 1-bit / full-precision SAR image generation.
//!
//! A reflectivity map is turned into a baseband raw echo by exact
//! superposition of point-target responses, optionally sign-quantized, and
//! focused with the Range-Doppler chain: range matched filtering, range cell
//! migration correction in the range-Doppler domain, and azimuth matched
//! filtering. All matched filtering is circular.
//!
//! Matrices are indexed `(range bin, pulse)`; the image row axis is range and
//! the column axis is azimuth.

mod echo;
mod params;
mod rda;

use num_complex::Complex32;

pub use echo::{quantize_1bit, simulate_echo};
pub use params::{RadarParams, SPEED_OF_LIGHT};
pub use rda::{
    azimuth_compress, azimuth_compress_complex, focus_complex, generate_pair, image_formation,
    range_compress, rcmc, reference_chirp, sinc_shift, GroundTruth, ImagePair,
};

use crate::error::{Error, Result};
use crate::ndgrad::io::AnyTensor;
use crate::ndgrad::Tensor;

/// Complex samples, `n_range x n_azimuth`, stored pulse-major so each
/// fast-time column is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    n_range: usize,
    n_azimuth: usize,
    data: Vec<Complex32>,
}

impl ComplexMatrix {
    pub fn zeros(n_range: usize, n_azimuth: usize) -> Self {
        ComplexMatrix {
            n_range,
            n_azimuth,
            data: vec![Complex32::new(0.0, 0.0); n_range * n_azimuth],
        }
    }

    /// Builds a matrix from pulse columns (each `n_range` long).
    pub fn from_columns(n_range: usize, columns: Vec<Vec<Complex32>>) -> Self {
        let n_azimuth = columns.len();
        let mut data = Vec::with_capacity(n_range * n_azimuth);
        for c in columns {
            assert_eq!(c.len(), n_range);
            data.extend(c);
        }
        ComplexMatrix {
            n_range,
            n_azimuth,
            data,
        }
    }

    /// Builds a matrix from range lines (each `n_azimuth` long).
    pub fn from_lines(n_azimuth: usize, lines: Vec<Vec<Complex32>>) -> Self {
        let n_range = lines.len();
        let mut m = ComplexMatrix::zeros(n_range, n_azimuth);
        for (r, line) in lines.into_iter().enumerate() {
            assert_eq!(line.len(), n_azimuth);
            for (k, v) in line.into_iter().enumerate() {
                m.data[k * n_range + r] = v;
            }
        }
        m
    }

    pub fn n_range(&self) -> usize {
        self.n_range
    }

    pub fn n_azimuth(&self) -> usize {
        self.n_azimuth
    }

    pub fn get(&self, range: usize, pulse: usize) -> Complex32 {
        self.data[pulse * self.n_range + range]
    }

    pub fn set(&mut self, range: usize, pulse: usize, v: Complex32) {
        self.data[pulse * self.n_range + range] = v;
    }

    pub fn column(&self, pulse: usize) -> &[Complex32] {
        &self.data[pulse * self.n_range..(pulse + 1) * self.n_range]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[Complex32]> {
        self.data.chunks(self.n_range)
    }

    /// Copy of range line `range` (all pulses).
    pub fn line(&self, range: usize) -> Vec<Complex32> {
        (0..self.n_azimuth).map(|k| self.get(range, k)).collect()
    }

    pub fn samples(&self) -> &[Complex32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|c| c.norm_sqr() as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f32, other: &ComplexMatrix, b: f32) -> ComplexMatrix {
        assert_eq!(
            (self.n_range, self.n_azimuth),
            (other.n_range, other.n_azimuth)
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| x * a + y * b)
            .collect();
        ComplexMatrix {
            n_range: self.n_range,
            n_azimuth: self.n_azimuth,
            data,
        }
    }

    /// CFT complex64 tensor of shape `[n_range, n_azimuth]`.
    pub fn to_tensor(&self) -> AnyTensor {
        let mut data = Vec::with_capacity(self.data.len() * 2);
        for r in 0..self.n_range {
            for k in 0..self.n_azimuth {
                let v = self.get(r, k);
                data.push(v.re);
                data.push(v.im);
            }
        }
        AnyTensor::Complex64 {
            shape: vec![self.n_range, self.n_azimuth],
            data,
        }
    }
}

/// Scene reflectivity in `[0, 1]`, `height` range rows by `width` azimuth columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectivityMap(Tensor<f32>);

impl ReflectivityMap {
    pub fn new(image: Tensor<f32>) -> Result<Self> {
        if image.rank() != 2 {
            return Err(Error::shape(
                "reflectivity",
                format!("expected rank 2, got {:?}", image.shape()),
            ));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParam(format!(
                "reflectivity value {v} outside [0, 1]"
            )));
        }
        Ok(ReflectivityMap(image))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ReflectivityMap(Tensor::zeros(&[height, width]))
    }

    /// A single point of weight `w` at `(row, col)`.
    pub fn point(height: usize, width: usize, row: usize, col: usize, w: f32) -> Self {
        let mut t = Tensor::zeros(&[height, width]);
        t.data_mut()[row * width + col] = w;
        ReflectivityMap(t)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.0.data()[row * self.width() + col]
    }

    pub fn image(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_image(self) -> Tensor<f32> {
        self.0
    }
}
