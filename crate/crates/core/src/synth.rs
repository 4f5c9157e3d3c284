//! Synthetic AR(1) Gaussian-field forecasts with a closed-form error law.
//!
//! Each variable evolves independently on the `nx × ny` grid:
//!
//! ```text
//! X⁰      ~ σ_step / sqrt(1 − a²) · ξ⁰            (stationary start)
//! Xᵗ      = a · Xᵗ⁻¹ + σ_step · ξᵗ,  t = 1..=t_out
//! truth   = Xᵗ + offset
//! mean    = aᵗ · X⁰ + offset                       (conditional mean)
//! sigma   = c · σ_step · sqrt((1 − a²ᵗ) / (1 − a²))
//! ```
//!
//! where `ξᵗ` is a spatially smoothed standard normal field and `c` is the
//! miscalibration factor. Lead index `t` in the output tensors (0-based) is
//! `t + 1` AR steps past the initial state.
//!
//! # Random streams
//!
//! Sample `i` draws from its own SplitMix64 stream whose initial state is
//! `mix(seed ^ mix(i ^ STREAM_SALT))`, where `mix` is the SplitMix64 output
//! function. Uniforms take the top 53 bits: `(x >> 11) · 2⁻⁵³`. Normals use
//! the Marsaglia polar method and return both variates of each accepted pair
//! (first `u·f`, then `v·f`).
//!
//! Draw order per sample: the heteroscedastic phase (one uniform, only when
//! enabled); then for each step `0..=t_out` and each variable, a padded
//! `(nx + 2r) × (ny + 2r)` white-noise grid in row-major order.
//!
//! # Spatial correlation
//!
//! The white noise is box-filtered with radius `r = round(spatial_corr_len)`
//! along x and then y, and scaled by `1 / (2r + 1)`, so every cell is
//! exactly standard normal.
//!
//! # Heteroscedastic mode
//!
//! `σ_step(x, y) = noise_sd · 2^{sin(2π(x/nx + y/ny) + φ)}` with a phase `φ`
//! drawn per sample, so the step sd spans a 4× range across the grid and the
//! pattern moves from forecast to forecast.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::validate_alpha;
use crate::error::{Error, Result};
use crate::normal;
use crate::tensor::{FieldTensor, GridSpec};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 with a cached second polar-method normal.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare: Option<f64>,
}

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        SplitMix64 { state, spare: None }
    }

    /// Independent stream `id` of a seed.
    pub fn stream(seed: u64, id: u64) -> Self {
        Self::new(mix64(seed ^ mix64(id ^ STREAM_SALT)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub spec: GridSpec,
    /// AR(1) persistence `a`, in `(−1, 1)`.
    pub ar_coeff: f64,
    /// Per-step innovation sd.
    pub noise_sd: f64,
    /// Smoothing radius in cells.
    pub spatial_corr_len: f64,
    /// Ratio of reported to true sd.
    pub miscalibration: f64,
    pub heteroscedastic: bool,
    /// Known additive forcing, predicted exactly by the model.
    pub forcing_offset: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(spec: GridSpec, seed: u64) -> Self {
        SynthConfig {
            spec,
            ar_coeff: 0.8,
            noise_sd: 1.0,
            spatial_corr_len: 2.0,
            miscalibration: 1.0,
            heteroscedastic: false,
            forcing_offset: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.ar_coeff > -1.0 && self.ar_coeff < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ar_coeff must lie in (-1, 1), got {}",
                self.ar_coeff
            )));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sd must be positive, got {}",
                self.noise_sd
            )));
        }
        if !(self.miscalibration > 0.0 && self.miscalibration.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "miscalibration must be positive, got {}",
                self.miscalibration
            )));
        }
        if !(self.spatial_corr_len >= 0.0 && self.spatial_corr_len.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "spatial_corr_len must be >= 0, got {}",
                self.spatial_corr_len
            )));
        }
        if !self.forcing_offset.is_finite() {
            return Err(Error::InvalidConfig("forcing_offset must be finite".into()));
        }
        Ok(())
    }

    fn radius(&self) -> usize {
        self.spatial_corr_len.round() as usize
    }
}

/// `(1 − a^{2·steps}) / (1 − a²)`: error variance after `steps` AR steps
/// per unit innovation variance.
pub fn ar_variance_factor(a: f64, steps: usize) -> f64 {
    (1.0 - a.powi(2 * steps as i32)) / (1.0 - a * a)
}

/// True error sd at 0-based lead index `lead`, for a cell with step sd `noise_sd`.
pub fn sigma_true(cfg: &SynthConfig, lead: usize) -> f64 {
    cfg.noise_sd * ar_variance_factor(cfg.ar_coeff, lead + 1).sqrt()
}

/// Half-width `z_{1−α/2} · σ_true(lead)` of the ideal central interval.
///
/// Only defined for homoscedastic configs, where `σ_true` does not depend
/// on the sample.
pub fn true_quantile(cfg: &SynthConfig, lead: usize, alpha: f64) -> Result<f64> {
    cfg.validate()?;
    validate_alpha(alpha)?;
    if lead >= cfg.spec.t_out {
        return Err(Error::InvalidConfig(format!(
            "lead {lead} out of range for t_out = {}",
            cfg.spec.t_out
        )));
    }
    if cfg.heteroscedastic {
        return Err(Error::InvalidConfig(
            "true quantile varies per sample in heteroscedastic mode".into(),
        ));
    }
    Ok(normal::two_sided_z(alpha) * sigma_true(cfg, lead))
}

/// One synthetic forecast with its truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub truth: FieldTensor,
    /// Deterministic forecast (the conditional mean).
    pub prediction: FieldTensor,
    pub mean: FieldTensor,
    /// Model-reported sd, `c · σ_true`.
    pub sigma: FieldTensor,
}

/// Standard normal field with box-filter correlation, written into `out`
/// (length `nx · ny`, row-major).
fn correlated_noise(rng: &mut SplitMix64, nx: usize, ny: usize, r: usize, out: &mut [f64]) {
    let (px, py) = (nx + 2 * r, ny + 2 * r);
    let white: Vec<f64> = (0..px * py).map(|_| rng.next_normal()).collect();
    if r == 0 {
        out.copy_from_slice(&white);
        return;
    }
    let width = 2 * r + 1;
    // Sum along x: padded rows → nx rows, still py columns.
    let mut along_x = vec![0.0; nx * py];
    for x in 0..nx {
        for k in 0..width {
            let src = &white[(x + k) * py..(x + k + 1) * py];
            for (acc, w) in along_x[x * py..(x + 1) * py].iter_mut().zip(src) {
                *acc += w;
            }
        }
    }
    let scale = 1.0 / width as f64;
    for x in 0..nx {
        let row = &along_x[x * py..(x + 1) * py];
        for y in 0..ny {
            out[x * ny + y] = row[y..y + width].iter().sum::<f64>() * scale;
        }
    }
}

/// Step sd for each `(x, y)` of one sample.
fn step_sd_field(cfg: &SynthConfig, rng: &mut SplitMix64) -> Vec<f64> {
    let (nx, ny) = (cfg.spec.nx, cfg.spec.ny);
    if !cfg.heteroscedastic {
        return vec![cfg.noise_sd; nx * ny];
    }
    let phase = TAU * rng.next_f64();
    let mut sd = Vec::with_capacity(nx * ny);
    for x in 0..nx {
        for y in 0..ny {
            let arg = TAU * (x as f64 / nx as f64 + y as f64 / ny as f64) + phase;
            sd.push(cfg.noise_sd * arg.sin().exp2());
        }
    }
    sd
}

/// Generates sample `index` of the dataset described by `cfg`.
pub fn generate_pair(cfg: &SynthConfig, index: u64) -> Result<SynthSample> {
    cfg.validate()?;
    let spec = &cfg.spec;
    let (nx, ny, nvar, t_out) = (spec.nx, spec.ny, spec.nvar, spec.t_out);
    let plane = nx * ny;
    let a = cfg.ar_coeff;
    let r = cfg.radius();
    let mut rng = SplitMix64::stream(cfg.seed, index);

    let step_sd = step_sd_field(cfg, &mut rng);
    let stationary = 1.0 / (1.0 - a * a).sqrt();

    let mut noise = vec![0.0; plane];
    // state[v][xy]
    let mut initial = vec![vec![0.0; plane]; nvar];
    for init in initial.iter_mut() {
        correlated_noise(&mut rng, nx, ny, r, &mut noise);
        for ((s, z), sd) in init.iter_mut().zip(&noise).zip(&step_sd) {
            *s = sd * stationary * z;
        }
    }

    let n = spec.len();
    let mut truth = vec![0.0; n];
    let mut mean = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    let mut state = initial.clone();
    for t in 0..t_out {
        let steps = t + 1;
        let decay = a.powi(steps as i32);
        let spread = cfg.miscalibration * ar_variance_factor(a, steps).sqrt();
        for v in 0..nvar {
            correlated_noise(&mut rng, nx, ny, r, &mut noise);
            for xy in 0..plane {
                let x_next = a * state[v][xy] + step_sd[xy] * noise[xy];
                state[v][xy] = x_next;
                let c = (t * plane + xy) * nvar + v;
                truth[c] = x_next + cfg.forcing_offset;
                mean[c] = decay * initial[v][xy] + cfg.forcing_offset;
                sigma[c] = spread * step_sd[xy];
            }
        }
    }

    let mean = FieldTensor::new(spec.clone(), mean)?;
    Ok(SynthSample {
        truth: FieldTensor::new(spec.clone(), truth)?,
        prediction: mean.clone(),
        mean,
        sigma: FieldTensor::new(spec.clone(), sigma)?,
    })
}

/// Generates samples `indices` in parallel; output order follows `indices`.
pub fn generate_many(cfg: &SynthConfig, indices: std::ops::Range<u64>) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    indices
        .into_par_iter()
        .map(|i| generate_pair(cfg, i))
        .collect()
}
