//! Thick-slice degradation simulator.
//!
//! Takes 1 mm isotropic thin volumes and produces simulated thick-slice
//! acquisitions: Gaussian smoothing along z (the slice-thickness
//! surrogate), decimation to 1/4 or 1/8, spline re-interpolation back to
//! the 1 mm grid, and additive Gaussian noise. Also builds the 8-channel
//! condition vector the discriminator is conditioned on.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtsError};
use crate::phantom::BodyPart;
use crate::spline::spline_z_upsample;
use crate::trilinear::affine_resample;
use crate::volume::{ValueDomain, Volume};
use crate::zfilter::{gaussian_z, mirror_index, subsample_z};

/// Upper bound of the sampled Gaussian sigma, in voxels.
pub const SIGMA_MAX: f64 = 3.2;
/// Boundary between the two sigma condition classes (midpoint of the range).
pub const SIGMA_CLASS_SPLIT: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    /// Slice decimation factor, 4 or 8.
    pub factor: usize,
    /// Gaussian sigma in voxels, in [0, 3.2].
    pub sigma_vox: f64,
    /// Additive noise stdev in normalized units.
    pub noise_std: f64,
    /// Rotation (rz, ry, rx) in degrees, each in [-5, 5].
    pub rot_deg: [f64; 3],
    /// Uniform scale in [0.95, 1.05].
    pub scale: f64,
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        if self.factor != 4 && self.factor != 8 {
            return Err(VtsError::InvalidInput(format!(
                "degrade factor must be 4 or 8, got {}",
                self.factor
            )));
        }
        if !(0.0..=SIGMA_MAX).contains(&self.sigma_vox) {
            return Err(VtsError::InvalidInput(format!(
                "sigma_vox {} outside [0, {SIGMA_MAX}]",
                self.sigma_vox
            )));
        }
        if self.noise_std < 0.0 {
            return Err(VtsError::InvalidInput("noise_std must be >= 0".into()));
        }
        if self.rot_deg.iter().any(|r| r.abs() > 5.0) {
            return Err(VtsError::InvalidInput("rotations must be within ±5°".into()));
        }
        if !(0.95..=1.05).contains(&self.scale) {
            return Err(VtsError::InvalidInput("scale must be in [0.95, 1.05]".into()));
        }
        Ok(())
    }

    /// Identity augmentation at a given factor/sigma; used by the CLI and
    /// deterministic evaluation.
    pub fn deterministic(factor: usize, sigma_vox: f64, noise_std: f64) -> Self {
        DegradeParams {
            factor,
            sigma_vox,
            noise_std,
            rot_deg: [0.0; 3],
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum additive noise stdev (normalized units). Default 0.02 ≈ 41 HU.
    pub noise_max: f64,
    /// Restrict sampling to one factor, or draw uniformly from {4, 8}.
    pub fixed_factor: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_max: 0.02,
            fixed_factor: None,
        }
    }
}

/// Draw one degradation configuration. Factor uniform over {4, 8},
/// sigma ~ U(0, 3.2), rotations ~ U(-5, 5)°, scale ~ U(0.95, 1.05),
/// noise ~ U(0, noise_max).
pub fn sample_params(rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> DegradeParams {
    let factor = match cfg.fixed_factor {
        Some(f) => f,
        None => {
            if rng.random_bool(0.5) {
                4
            } else {
                8
            }
        }
    };
    DegradeParams {
        factor,
        sigma_vox: rng.random_range(0.0..SIGMA_MAX),
        noise_std: rng.random_range(0.0..cfg.noise_max.max(f64::MIN_POSITIVE)),
        rot_deg: [
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        ],
        scale: rng.random_range(0.95..1.05),
    }
}

/// Interval and sigma condition classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalClass {
    I4mm,
    I8mm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaClass {
    Low,
    High,
}

/// Condition label fed to the discriminator: three one-hot blocks,
/// body part (4) + slice interval (2) + sigma scale (2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionLabel {
    pub body_part: BodyPart,
    pub interval_class: IntervalClass,
    pub sigma_class: SigmaClass,
}

/// Fixed layout string recorded in checkpoints.
pub const CONDITION_LAYOUT: &str = "head,chest,abdomen,leg|4mm,8mm|low_sigma,high_sigma";

impl ConditionLabel {
    /// The 8-value encoding: [head, chest, abdomen, leg | 4mm, 8mm | lowσ, highσ].
    pub fn encode(&self) -> [f32; 8] {
        let mut w = [0.0f32; 8];
        w[self.body_part.index()] = 1.0;
        w[4 + match self.interval_class {
            IntervalClass::I4mm => 0,
            IntervalClass::I8mm => 1,
        }] = 1.0;
        w[6 + match self.sigma_class {
            SigmaClass::Low => 0,
            SigmaClass::High => 1,
        }] = 1.0;
        w
    }
}

pub fn make_condition(p: &DegradeParams, body_part: BodyPart) -> ConditionLabel {
    ConditionLabel {
        body_part,
        interval_class: if p.factor == 4 {
            IntervalClass::I4mm
        } else {
            IntervalClass::I8mm
        },
        sigma_class: if p.sigma_vox < SIGMA_CLASS_SPLIT {
            SigmaClass::Low
        } else {
            SigmaClass::High
        },
    }
}

/// Mirror-pad z so (nz - 1) is a multiple of `factor`; the subsample →
/// spline round trip then lands back on the original grid.
fn pad_z_to_knots(vol: &Volume, factor: usize) -> (Volume, usize) {
    let (nz, ny, nx) = vol.dims();
    let pad = (factor - (nz - 1) % factor) % factor;
    if pad == 0 {
        return (vol.clone(), 0);
    }
    let mut data = ndarray::Array3::<f32>::zeros((nz + pad, ny, nx));
    for z in 0..nz + pad {
        let src = mirror_index(z as isize, nz);
        data.index_axis_mut(ndarray::Axis(0), z)
            .assign(&vol.data.index_axis(ndarray::Axis(0), src));
    }
    (
        Volume {
            data,
            spacing: vol.spacing,
            domain: vol.domain,
        },
        pad,
    )
}

/// Simulate a thick-slice acquisition of a thin volume, back on the thin
/// grid: gaussian_z(σ) → subsample_z(factor) → spline_z_upsample(factor)
/// → additive Gaussian noise → clip to [-1, 1].
pub fn degrade(thin: &Volume, p: &DegradeParams, rng: &mut ChaCha8Rng) -> Result<Volume> {
    p.validate()?;
    if thin.domain != ValueDomain::Normalized {
        return Err(VtsError::InvalidInput(
            "degrade expects a normalized volume".into(),
        ));
    }
    let (nz, ..) = thin.dims();
    if nz <= p.factor {
        return Err(VtsError::InvalidInput(format!(
            "degrade: z-dim {nz} must exceed factor {}",
            p.factor
        )));
    }
    let (padded, _pad) = pad_z_to_knots(thin, p.factor);
    let blurred = gaussian_z(&padded, p.sigma_vox)?;
    let thick = subsample_z(&blurred, p.factor)?;
    let up = spline_z_upsample(&thick, p.factor)?;
    let mut data = up.data.slice(ndarray::s![..nz, .., ..]).to_owned();
    if p.noise_std > 0.0 {
        let normal = Normal::new(0.0f64, p.noise_std).map_err(|e| {
            VtsError::Numeric(format!("bad noise distribution: {e}"))
        })?;
        for v in data.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }
    data.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(Volume {
        data,
        spacing: thin.spacing,
        domain: ValueDomain::Normalized,
    })
}

/// Apply the affine augmentation, crop a random patch-sized cube, and
/// degrade it. Returns (thin_patch, thick_patch) on the same grid.
pub fn make_patch_pair(
    thin: &Volume,
    p: &DegradeParams,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Volume)> {
    if patch % 16 != 0 {
        return Err(VtsError::InvalidInput(format!(
            "patch size {patch} must be a multiple of 16 (generator stride constraint)"
        )));
    }
    let (nz, ny, nx) = thin.dims();
    if nz < patch || ny < patch || nx < patch {
        return Err(VtsError::InvalidInput(format!(
            "volume dims {:?} smaller than patch {patch}",
            thin.dims()
        )));
    }
    // Out-of-bounds affine samples are filled with -1 (air).
    let transformed = affine_resample(thin, p.rot_deg, p.scale, -1.0)?;
    let oz = rng.random_range(0..=nz - patch);
    let oy = rng.random_range(0..=ny - patch);
    let ox = rng.random_range(0..=nx - patch);
    let thin_patch = Volume {
        data: transformed
            .data
            .slice(ndarray::s![oz..oz + patch, oy..oy + patch, ox..ox + patch])
            .to_owned(),
        spacing: thin.spacing,
        domain: ValueDomain::Normalized,
    };
    let thick_patch = degrade(&thin_patch, p, rng)?;
    Ok((thin_patch, thick_patch))
}

/// Deterministic stream derivation: one independent ChaCha stream per
/// (global seed, worker, step). Replay needs no mutable RNG state.
pub fn stream_rng(global_seed: u64, worker: u64, step: u64) -> ChaCha8Rng {
    // splitmix64-style mixing of the three coordinates
    let mut h = global_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(worker.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(step.wrapping_mul(0x94d049bb133111eb));
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^= h >> 31;
    ChaCha8Rng::seed_from_u64(h)
}
