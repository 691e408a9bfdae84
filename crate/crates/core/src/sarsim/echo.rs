use std::f64::consts::PI;

use num_complex::Complex32;

use super::{ComplexMatrix, RadarParams, ReflectivityMap};
use crate::error::{Error, Result};
use crate::par;

/// Raw baseband echo of `psf` by exact superposition of point responses.
///
/// Scene pixel `(row, col)` sits at range `R_0 + dr * (row - H/2)` and along-
/// track position `da * (col - W/2)`. Under stop-and-go, pulse `k` sees it at
/// `R = sqrt((R_0 + dr*row')^2 + (v t_k - da*col')^2)` and records an LFM
/// pulse delayed by `2R/c` with carrier phase `exp(-j 4 pi R / lambda)`.
/// Pulse edges snap to the nearest fast-time sample; the chirp phase is
/// evaluated at the exact sub-sample offset.
pub fn simulate_echo(psf: &ReflectivityMap, p: &RadarParams) -> Result<ComplexMatrix> {
    p.validate()?;
    let (h, w) = (psf.height(), psf.width());
    if h > p.n_range || w > p.n_azimuth {
        return Err(Error::InvalidParam(format!(
            "scene {h}x{w} larger than grid {}x{}",
            p.n_range, p.n_azimuth
        )));
    }
    let points: Vec<(f64, f64, f64)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter_map(|(r, c)| {
            let a = psf.get(r, c) as f64;
            (a != 0.0).then(|| {
                let range = p.ref_range + p.range_spacing * (r as f64 - (h / 2) as f64);
                let along = p.azimuth_spacing * (c as f64 - (w / 2) as f64);
                (range, along, a)
            })
        })
        .collect();

    let pulse_samples = p.pulse_samples();
    let half = (p.n_range / 2) as f64;
    let delay_samples = |r: f64| 2.0 * (r - p.ref_range) / p.c * p.sample_rate + half;
    let slant = |k: usize, range: f64, along: f64| {
        let x = p.velocity * p.pulse_time(k) - along;
        (range * range + x * x).sqrt()
    };

    // Every pulse of every scatterer must land inside the receive window.
    for &(range, along, _) in &points {
        for k in 0..p.n_azimuth {
            let d = delay_samples(slant(k, range, along));
            let first = d.round();
            let last = first + pulse_samples as f64 - 1.0;
            if first < 0.0 || last >= p.n_range as f64 {
                return Err(Error::InvalidParam(format!(
                    "scene exceeds unambiguous range window: scatterer at {range:.1} m spans samples \
                     {first}..={last} of {}",
                    p.n_range
                )));
            }
        }
    }

    let columns = par::map_range(p.n_azimuth, |k| {
        let mut col = vec![num_complex::Complex64::new(0.0, 0.0); p.n_range];
        for &(range, along, amp) in &points {
            let r = slant(k, range, along);
            let d = delay_samples(r);
            let carrier = -4.0 * PI * (r / p.wavelength).fract();
            let first = d.round() as usize;
            for n in first..first + pulse_samples {
                let tau = (n as f64 - d) / p.sample_rate - p.pulse_duration / 2.0;
                let phase = PI * p.chirp_rate * tau * tau + carrier;
                col[n] += num_complex::Complex64::from_polar(amp, phase);
            }
        }
        col.into_iter()
            .map(|c| Complex32::new(c.re as f32, c.im as f32))
            .collect()
    });
    Ok(ComplexMatrix::from_columns(p.n_range, columns))
}

fn sign(x: f32) -> f32 {
    // -0.0 >= 0.0, so both zeros map to +1.
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `sign(Re) + i sign(Im)` per sample, with `sign(0) = +1`.
pub fn quantize_1bit(echo: &ComplexMatrix) -> ComplexMatrix {
    let data = echo
        .samples()
        .iter()
        .map(|c| Complex32::new(sign(c.re), sign(c.im)))
        .collect();
    ComplexMatrix {
        n_range: echo.n_range(),
        n_azimuth: echo.n_azimuth(),
        data,
    }
}
