use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::{Complex32, Complex64};
use rustfft::{Fft, FftPlanner};

use super::echo::{quantize_1bit, simulate_echo};
use super::{ComplexMatrix, RadarParams, ReflectivityMap};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::par;

struct Plans {
    fwd: Arc<dyn Fft<f32>>,
    inv: Arc<dyn Fft<f32>>,
    n: usize,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Plans {
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            n,
        }
    }

    fn forward(&self, buf: &mut [Complex32]) {
        self.fwd.process(buf);
    }

    fn inverse(&self, buf: &mut [Complex32]) {
        self.inv.process(buf);
        let s = 1.0 / self.n as f32;
        buf.iter_mut().for_each(|v| *v *= s);
    }

    /// Circular correlation of `x` with the reference whose spectrum is `spec`.
    fn correlate(&self, x: &[Complex32], conj_spec: &[Complex32]) -> Vec<Complex32> {
        let mut buf = x.to_vec();
        self.forward(&mut buf);
        buf.iter_mut().zip(conj_spec).for_each(|(a, b)| *a *= b);
        self.inverse(&mut buf);
        buf
    }
}

/// Replica of the transmitted pulse, `n_range` long and zero after the pulse.
pub fn reference_chirp(p: &RadarParams) -> Vec<Complex32> {
    let mut r = vec![Complex32::new(0.0, 0.0); p.n_range];
    for (n, v) in r.iter_mut().enumerate().take(p.pulse_samples()) {
        let tau = n as f64 / p.sample_rate - p.pulse_duration / 2.0;
        let c = Complex64::from_polar(1.0, PI * p.chirp_rate * tau * tau);
        *v = Complex32::new(c.re as f32, c.im as f32);
    }
    r
}

/// Circular range matched filtering of every pulse.
pub fn range_compress(echo: &ComplexMatrix, p: &RadarParams) -> Result<ComplexMatrix> {
    if echo.n_range() != p.n_range || !p.n_range.is_power_of_two() {
        return Err(Error::shape(
            "range_compress",
            format!(
                "echo has {} range bins, params expect power-of-two {}",
                echo.n_range(),
                p.n_range
            ),
        ));
    }
    let plans = Plans::new(p.n_range);
    let mut spec = reference_chirp(p);
    plans.forward(&mut spec);
    spec.iter_mut().for_each(|v| *v = v.conj());
    let cols: Vec<&[Complex32]> = echo.columns().collect();
    let out = par::map_slice(&cols, |c| plans.correlate(c, &spec));
    Ok(ComplexMatrix::from_columns(p.n_range, out))
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Circularly resamples `line` at `n + shift` with an 8-tap sinc kernel
/// (taps at offsets -3..=4). The kernel is Hann-tapered over its span and
/// normalised to unit sum; the bare truncated sinc has several percent of
/// passband error. Integer shifts reduce to an exact rotation.
pub fn sinc_shift(line: &[Complex32], shift: f64) -> Vec<Complex32> {
    let n = line.len() as isize;
    (0..line.len())
        .map(|i| {
            let pos = i as f64 + shift;
            let base = pos.floor();
            let frac = pos - base;
            let base = base as isize;
            if frac == 0.0 {
                return line[base.rem_euclid(n) as usize];
            }
            let mut acc = Complex64::new(0.0, 0.0);
            let mut wsum = 0.0;
            for tap in -3isize..=4 {
                let x = frac - tap as f64;
                let w = sinc(x) * (0.5 + 0.5 * (PI * x / 4.0).cos());
                let v = line[(base + tap).rem_euclid(n) as usize];
                acc += Complex64::new(v.re as f64, v.im as f64) * w;
                wsum += w;
            }
            let v = acc / wsum;
            Complex32::new(v.re as f32, v.im as f32)
        })
        .collect()
}

/// Azimuth FFT followed by per-Doppler-bin range migration correction.
/// The result stays in the range-Doppler domain.
pub fn rcmc(rc: &ComplexMatrix, p: &RadarParams) -> Result<ComplexMatrix> {
    if rc.n_range() != p.n_range || rc.n_azimuth() != p.n_azimuth {
        return Err(Error::shape("rcmc", "matrix dims differ from radar grid"));
    }
    let az = Plans::new(p.n_azimuth);
    let lines = par::map_range(p.n_range, |r| {
        let mut line = rc.line(r);
        az.forward(&mut line);
        line
    });
    let rd = ComplexMatrix::from_lines(p.n_azimuth, lines);
    let limit = (p.n_range / 4) as f64;
    let mut shifts = Vec::with_capacity(p.n_azimuth);
    for q in 0..p.n_azimuth {
        let s = p.migration_samples(p.doppler(q));
        if s.abs() > limit {
            return Err(Error::InvalidParam(format!(
                "range migration {s:.2} samples at Doppler bin {q} exceeds n_range/4 = {limit}"
            )));
        }
        shifts.push(s);
    }
    let cols = par::map_range(p.n_azimuth, |q| {
        if shifts[q] == 0.0 {
            rd.column(q).to_vec()
        } else {
            sinc_shift(rd.column(q), shifts[q])
        }
    });
    Ok(ComplexMatrix::from_columns(p.n_range, cols))
}

/// Azimuth matched filtering of a range-Doppler matrix; returns the complex
/// focused image with zero azimuth lag at column `n_azimuth / 2`.
///
/// Each range line uses the FM rate `2 v^2 / (lambda R)` of its own slant
/// range, which equals the scene-centre rate on the middle line.
pub fn azimuth_compress_complex(rd: &ComplexMatrix, p: &RadarParams) -> Result<ComplexMatrix> {
    if rd.n_range() != p.n_range || rd.n_azimuth() != p.n_azimuth {
        return Err(Error::shape(
            "azimuth_compress",
            "matrix dims differ from radar grid",
        ));
    }
    let plans = Plans::new(p.n_azimuth);
    let half = p.n_azimuth / 2;
    let lines = par::map_range(p.n_range, |r| {
        let ka = p.azimuth_rate(p.bin_range(r));
        let mut spec: Vec<Complex32> = (0..p.n_azimuth)
            .map(|k| {
                let t = p.pulse_time(k);
                let c = Complex64::from_polar(1.0, -PI * ka * t * t);
                Complex32::new(c.re as f32, c.im as f32)
            })
            .collect();
        plans.forward(&mut spec);
        let mut line = rd.line(r);
        line.iter_mut().zip(&spec).for_each(|(a, b)| *a *= b.conj());
        plans.inverse(&mut line);
        line.rotate_right(half);
        line
    });
    Ok(ComplexMatrix::from_lines(p.n_azimuth, lines))
}

/// Magnitude image in `[0, 1]`, normalised by its maximum.
fn normalized_magnitude(m: &ComplexMatrix) -> Tensor<f32> {
    let (nr, na) = (m.n_range(), m.n_azimuth());
    let mut img = vec![0.0f32; nr * na];
    for r in 0..nr {
        for k in 0..na {
            img[r * na + k] = m.get(r, k).norm();
        }
    }
    let max = img.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        img.iter_mut().for_each(|v| *v = (*v / max).min(1.0));
    }
    Tensor::new(&[nr, na], img).expect("grid dims are nonzero")
}

/// Azimuth compression to a normalised magnitude image (`n_range x n_azimuth`).
pub fn azimuth_compress(rd: &ComplexMatrix, p: &RadarParams) -> Result<Tensor<f32>> {
    Ok(normalized_magnitude(&azimuth_compress_complex(rd, p)?))
}

/// Full complex Range-Doppler chain.
pub fn focus_complex(echo: &ComplexMatrix, p: &RadarParams) -> Result<ComplexMatrix> {
    let rc = range_compress(echo, p)?;
    let rd = rcmc(&rc, p)?;
    azimuth_compress_complex(&rd, p)
}

/// Range-Doppler chain to a normalised magnitude image.
pub fn image_formation(echo: &ComplexMatrix, p: &RadarParams) -> Result<Tensor<f32>> {
    Ok(normalized_magnitude(&focus_complex(echo, p)?))
}

/// Which image serves as the full-precision ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GroundTruth {
    /// The full-precision echo through the same imaging chain.
    #[default]
    Rda,
    /// The reflectivity map itself.
    Original,
}

#[derive(Clone, Debug)]
pub struct ImagePair {
    pub img_16bit: Tensor<f32>,
    pub img_1bit: Tensor<f32>,
}

/// Images the scene from its full-precision and its sign-quantized echo.
pub fn generate_pair(
    target: &ReflectivityMap,
    p: &RadarParams,
    gt: GroundTruth,
) -> Result<ImagePair> {
    let echo = simulate_echo(target, p)?;
    let img_1bit = image_formation(&quantize_1bit(&echo), p)?;
    let img_16bit = match gt {
        GroundTruth::Rda => image_formation(&echo, p)?,
        GroundTruth::Original => {
            if target.height() != p.n_range || target.width() != p.n_azimuth {
                return Err(Error::InvalidParam(format!(
                    "original ground truth needs a {}x{} target",
                    p.n_range, p.n_azimuth
                )));
            }
            target.image().clone()
        }
    };
    Ok(ImagePair {
        img_16bit,
        img_1bit,
    })
}
