use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Strip-map geometry and waveform parameters.
///
/// Pixel spacings default to one range sample (`c / 2f_s`) and one pulse
/// (`v / PRF`), so each scene pixel maps onto one image cell. The default PRF
/// is `sqrt(N_az * K_a)`: the sampled azimuth chirp then spans exactly one
/// PRF of Doppler bandwidth over the aperture.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarParams {
    /// Carrier wavelength (m).
    pub wavelength: f64,
    /// Range chirp rate K_r (Hz/s).
    pub chirp_rate: f64,
    /// Pulse duration T_p (s).
    pub pulse_duration: f64,
    /// Range sampling rate f_s (Hz).
    pub sample_rate: f64,
    /// Pulse repetition frequency (Hz).
    pub prf: f64,
    /// Platform velocity (m/s).
    pub velocity: f64,
    /// Slant range of the scene centre R_0 (m).
    pub ref_range: f64,
    /// Scene pixel spacing along range (m).
    pub range_spacing: f64,
    /// Scene pixel spacing along azimuth (m).
    pub azimuth_spacing: f64,
    pub n_range: usize,
    pub n_azimuth: usize,
    pub c: f64,
    /// Apply range cell migration correction; off means zero shift.
    pub rcmc: bool,
}

impl Default for RadarParams {
    fn default() -> Self {
        let (wavelength, velocity, ref_range) = (0.055, 150.0, 10_000.0);
        let sample_rate = 2e6;
        let n_azimuth = 64;
        let ka = 2.0 * velocity * velocity / (wavelength * ref_range);
        let prf = (n_azimuth as f64 * ka).sqrt();
        RadarParams {
            wavelength,
            chirp_rate: 1.5e12,
            pulse_duration: 1e-6,
            sample_rate,
            prf,
            velocity,
            ref_range,
            range_spacing: SPEED_OF_LIGHT / (2.0 * sample_rate),
            azimuth_spacing: velocity / prf,
            n_range: 64,
            n_azimuth,
            c: SPEED_OF_LIGHT,
            rcmc: true,
        }
    }
}

impl RadarParams {
    /// Default parameters resized to an `n x n` grid, keeping one pixel per cell.
    pub fn for_grid(n_range: usize, n_azimuth: usize) -> Self {
        let mut p = RadarParams {
            n_range,
            n_azimuth,
            ..Default::default()
        };
        p.prf = (n_azimuth as f64 * p.azimuth_rate(p.ref_range)).sqrt();
        p.azimuth_spacing = p.velocity / p.prf;
        p
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("pulse_duration", self.pulse_duration),
            ("sample_rate", self.sample_rate),
            ("prf", self.prf),
            ("velocity", self.velocity),
            ("ref_range", self.ref_range),
            ("range_spacing", self.range_spacing),
            ("azimuth_spacing", self.azimuth_spacing),
            ("c", self.c),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("radar.{name} must be positive, got {v}"));
            }
        }
        if !self.chirp_rate.is_finite() || self.chirp_rate == 0.0 {
            return bad(format!(
                "radar.chirp_rate must be nonzero, got {}",
                self.chirp_rate
            ));
        }
        if self.sample_rate < self.bandwidth() * (1.0 - 1e-12) {
            return bad(format!(
                "sample rate {} Hz below chirp bandwidth {} Hz",
                self.sample_rate,
                self.bandwidth()
            ));
        }
        for (name, n) in [("n_range", self.n_range), ("n_azimuth", self.n_azimuth)] {
            if n < 2 || !n.is_power_of_two() {
                return bad(format!("radar.{name} must be a power of two >= 2, got {n}"));
            }
        }
        if self.pulse_samples() >= self.n_range {
            return bad(format!(
                "pulse spans {} samples, window only {}",
                self.pulse_samples(),
                self.n_range
            ));
        }
        Ok(())
    }

    /// Chirp bandwidth |K_r| T_p (Hz).
    pub fn bandwidth(&self) -> f64 {
        self.chirp_rate.abs() * self.pulse_duration
    }

    /// Number of fast-time samples covered by one pulse.
    pub fn pulse_samples(&self) -> usize {
        let span = self.pulse_duration * self.sample_rate;
        (span - 1e-9).ceil().max(1.0) as usize
    }

    /// Expected -3 dB width of the compressed range response, in samples.
    pub fn range_resolution_samples(&self) -> f64 {
        self.sample_rate / self.bandwidth()
    }

    /// Azimuth FM rate `2 v^2 / (lambda R)` at slant range `r`.
    pub fn azimuth_rate(&self, r: f64) -> f64 {
        2.0 * self.velocity * self.velocity / (self.wavelength * r)
    }

    /// Slow time of pulse `k`, zero at the aperture centre.
    pub fn pulse_time(&self, k: usize) -> f64 {
        (k as f64 - (self.n_azimuth / 2) as f64) / self.prf
    }

    /// Slant range of fast-time bin `n`; bin `n_range / 2` sits at `R_0`.
    pub fn bin_range(&self, n: usize) -> f64 {
        self.ref_range + (n as f64 - (self.n_range / 2) as f64) * self.c / (2.0 * self.sample_rate)
    }

    /// Signed Doppler frequency of azimuth FFT bin `q`.
    pub fn doppler(&self, q: usize) -> f64 {
        let n = self.n_azimuth;
        let signed = if q < n / 2 {
            q as f64
        } else {
            q as f64 - n as f64
        };
        signed * self.prf / n as f64
    }

    /// Range migration `lambda^2 R_0 f_a^2 / (8 v^2)` in range samples.
    pub fn migration_samples(&self, fa: f64) -> f64 {
        if !self.rcmc {
            return 0.0;
        }
        let dr = self.wavelength.powi(2) * self.ref_range * fa * fa / (8.0 * self.velocity.powi(2));
        dr * 2.0 * self.sample_rate / self.c
    }
}
