//! Deterministic synthetic CT phantoms.
//!
//! These stand in for clinical training data: not anatomically accurate,
//! but built around sharp z-axis structure (vertebra stacks, vessels) so
//! slice-interval restoration is a non-trivial task. HU values follow the
//! usual tissue ranges: air -1000, soft tissue ~40, trabecular bone ~700.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtsError};
use crate::volume::{ValueDomain, Volume, HU_CLIP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Head,
    Chest,
    Abdomen,
    Leg,
}

impl BodyPart {
    pub const ALL: [BodyPart; 4] = [
        BodyPart::Head,
        BodyPart::Chest,
        BodyPart::Abdomen,
        BodyPart::Leg,
    ];

    /// Index into the 4-wide one-hot condition block.
    pub fn index(self) -> usize {
        match self {
            BodyPart::Head => 0,
            BodyPart::Chest => 1,
            BodyPart::Abdomen => 2,
            BodyPart::Leg => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::Chest => "chest",
            BodyPart::Abdomen => "abdomen",
            BodyPart::Leg => "leg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "head" => Ok(BodyPart::Head),
            "chest" => Ok(BodyPart::Chest),
            "abdomen" => Ok(BodyPart::Abdomen),
            "leg" | "legs" => Ok(BodyPart::Leg),
            other => Err(VtsError::Data(format!("unknown body part '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// (z, y, x) voxel counts, each >= 32. Output spacing is 1 mm isotropic.
    pub dims: (usize, usize, usize),
    pub seed: u64,
    pub body_part: BodyPart,
    pub vertebra_period_mm: f64,
    pub vessel_count: usize,
}

impl PhantomSpec {
    pub fn new(dims: (usize, usize, usize), seed: u64, body_part: BodyPart) -> Self {
        PhantomSpec {
            dims,
            seed,
            body_part,
            vertebra_period_mm: 8.0,
            vessel_count: 3,
        }
    }
}

/// Smooth low-frequency jitter field: a short sum of random-phase cosines.
struct Jitter {
    waves: Vec<([f64; 3], f64, f64)>, // (freq per axis, phase, amplitude)
}

impl Jitter {
    fn sample(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let f = [
                    rng.random_range(0.01..0.06),
                    rng.random_range(0.01..0.06),
                    rng.random_range(0.01..0.06),
                ];
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = amplitude * rng.random_range(0.5..1.0);
                (f, phase, amp)
            })
            .collect();
        Jitter { waves }
    }

    fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.waves
            .iter()
            .map(|(f, phase, amp)| {
                amp * (std::f64::consts::TAU
                    * (f[0] * z as f64 + f[1] * y as f64 + f[2] * x as f64)
                    + phase)
                    .cos()
            })
            .sum()
    }
}

struct Vessel {
    y0: f64,
    x0: f64,
    dy: f64,
    dx: f64,
    radius: f64,
}

/// Generate a phantom volume at 1 mm isotropic spacing. Pure function of
/// the spec: identical specs give bit-identical volumes.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    let (nz, ny, nx) = spec.dims;
    if nz < 32 || ny < 32 || nx < 32 {
        return Err(VtsError::InvalidInput(format!(
            "phantom dims must each be >= 32, got {:?}",
            spec.dims
        )));
    }
    if !(spec.vertebra_period_mm > 2.0) {
        return Err(VtsError::InvalidInput(
            "vertebra period must be > 2 mm".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((spec.body_part.index() as u64) << 32));

    let tissue_jitter = Jitter::sample(&mut rng, 25.0);
    let bone_jitter = Jitter::sample(&mut rng, 60.0);

    let cz = (nz as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let cx = (nx as f64 - 1.0) / 2.0;

    let vessels: Vec<Vessel> = (0..spec.vessel_count)
        .map(|_| Vessel {
            y0: cy + rng.random_range(-0.2..0.2) * ny as f64,
            x0: cx + rng.random_range(-0.25..0.25) * nx as f64,
            dy: rng.random_range(-0.15..0.15),
            dx: rng.random_range(-0.15..0.15),
            radius: rng.random_range(1.2..2.2),
        })
        .collect();

    let period = spec.vertebra_period_mm; // spacing is 1 mm, so mm == voxels
    let duty = 0.6;
    let part = spec.body_part;

    // Per-part layout parameters.
    let (body_ry, body_rx) = match part {
        BodyPart::Head => (0.32 * ny as f64, 0.32 * nx as f64),
        BodyPart::Leg => (0.40 * ny as f64, 0.42 * nx as f64),
        _ => (0.42 * ny as f64, 0.44 * nx as f64),
    };
    let spine_y = match part {
        BodyPart::Head => cy + 0.10 * ny as f64,
        _ => cy + 0.18 * ny as f64,
    };
    let spine_r = match part {
        BodyPart::Head => 0.05 * nx as f64,
        _ => 0.07 * nx as f64,
    }
    .max(2.0);

    let mut data = Array3::<f32>::zeros((nz, ny, nx));
    for z in 0..nz {
        let zb = z as f64;
        let vertebra_on = (zb % period) < duty * period;
        for y in 0..ny {
            let dy = y as f64 - cy;
            for x in 0..nx {
                let dx = x as f64 - cx;
                let inside_body = match part {
                    BodyPart::Leg => {
                        // Two leg cylinders.
                        let left = ((dy / (0.32 * ny as f64)).powi(2)
                            + ((dx + 0.22 * nx as f64) / (0.17 * nx as f64)).powi(2))
                            <= 1.0;
                        let right = ((dy / (0.32 * ny as f64)).powi(2)
                            + ((dx - 0.22 * nx as f64) / (0.17 * nx as f64)).powi(2))
                            <= 1.0;
                        left || right
                    }
                    _ => (dy / body_ry).powi(2) + (dx / body_rx).powi(2) <= 1.0,
                };
                let mut hu = -1000.0f64;
                if inside_body {
                    hu = 40.0 + tissue_jitter.at(z, y, x);

                    match part {
                        BodyPart::Head => {
                            // Skull shell.
                            let r = (dy / body_ry).powi(2) + (dx / body_rx).powi(2);
                            if r > 0.78 {
                                hu = 900.0 + bone_jitter.at(z, y, x);
                            }
                        }
                        BodyPart::Chest => {
                            for side in [-1.0, 1.0] {
                                let lx = dx - side * 0.20 * nx as f64;
                                let ly = dy + 0.05 * ny as f64;
                                if (ly / (0.22 * ny as f64)).powi(2)
                                    + (lx / (0.15 * nx as f64)).powi(2)
                                    <= 1.0
                                {
                                    hu = -800.0 + tissue_jitter.at(z, y, x);
                                }
                            }
                        }
                        BodyPart::Abdomen => {
                            // A liver-like blob.
                            let ly = dy + 0.10 * ny as f64;
                            let lx = dx - 0.15 * nx as f64;
                            if (ly / (0.20 * ny as f64)).powi(2)
                                + (lx / (0.22 * nx as f64)).powi(2)
                                + ((zb - cz) / (0.7 * nz as f64)).powi(2)
                                <= 1.0
                            {
                                hu = 90.0 + tissue_jitter.at(z, y, x);
                            }
                        }
                        BodyPart::Leg => {
                            // Continuous femur cores.
                            for side in [-1.0, 1.0] {
                                let lx = dx - side * 0.22 * nx as f64;
                                if (dy * dy + lx * lx).sqrt() <= 0.05 * nx as f64 {
                                    hu = 650.0 + bone_jitter.at(z, y, x);
                                }
                            }
                        }
                    }

                    // Vessels: thin bright tubes drifting along z.
                    for v in &vessels {
                        let vy = v.y0 + v.dy * zb;
                        let vx = v.x0 + v.dx * zb;
                        let d2 = (y as f64 - vy).powi(2) + (x as f64 - vx).powi(2);
                        if d2 <= v.radius * v.radius {
                            hu = 300.0 + tissue_jitter.at(z, y, x);
                        }
                    }

                    // Vertebral column: bright disks with gaps along z.
                    if part != BodyPart::Leg {
                        let sy = y as f64 - spine_y;
                        let sx = x as f64 - cx;
                        if (sy * sy + sx * sx).sqrt() <= spine_r {
                            hu = if vertebra_on {
                                700.0 + bone_jitter.at(z, y, x)
                            } else {
                                40.0 + tissue_jitter.at(z, y, x)
                            };
                        }
                    }
                }
                data[[z, y, x]] = (hu as f32).clamp(-HU_CLIP, HU_CLIP);
            }
        }
    }

    Volume::new(data, [1.0; 3], ValueDomain::Hu)
}

/// Column used by z-structure checks: the spine center for parts with a
/// vertebral column, a femur core for legs.
pub fn spine_column_center(spec: &PhantomSpec) -> (usize, usize) {
    let (_, ny, nx) = spec.dims;
    let cy = (ny as f64 - 1.0) / 2.0;
    let cx = (nx as f64 - 1.0) / 2.0;
    match spec.body_part {
        BodyPart::Head => ((cy + 0.10 * ny as f64).round() as usize, cx.round() as usize),
        BodyPart::Leg => (
            cy.round() as usize,
            (cx - 0.22 * nx as f64).round() as usize,
        ),
        _ => ((cy + 0.18 * ny as f64).round() as usize, cx.round() as usize),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(part: BodyPart) -> PhantomSpec {
        PhantomSpec::new((64, 64, 64), 42, part)
    }

    #[test]
    fn deterministic_for_identical_spec() {
        let a = generate_phantom(&spec(BodyPart::Chest)).unwrap();
        let b = generate_phantom(&spec(BodyPart::Chest)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn values_within_hu_clip() {
        for part in BodyPart::ALL {
            let v = generate_phantom(&spec(part)).unwrap();
            for &x in v.data.iter() {
                assert!((-2048.0..=2048.0).contains(&x));
            }
        }
    }

    #[test]
    fn parts_differ_for_fixed_seed() {
        let vols: Vec<_> = BodyPart::ALL
            .iter()
            .map(|&p| generate_phantom(&spec(p)).unwrap())
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(vols[i].data, vols[j].data, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn rejects_small_dims() {
        let mut s = spec(BodyPart::Head);
        s.dims = (31, 64, 64);
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn spine_profile_dominant_frequency_matches_period() {
        for part in [BodyPart::Chest, BodyPart::Abdomen] {
            let s = spec(part);
            let v = generate_phantom(&s).unwrap();
            let (sy, sx) = spine_column_center(&s);
            let nz = v.dims().0;
            let profile: Vec<f64> = (0..nz).map(|z| v.data[[z, sy, sx]] as f64).collect();
            let mean = profile.iter().sum::<f64>() / nz as f64;
            // Discrete Fourier analysis of the centered profile.
            let mut best_k = 0;
            let mut best_mag = 0.0;
            for k in 1..nz / 2 {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (z, &p) in profile.iter().enumerate() {
                    let ang = std::f64::consts::TAU * (k * z) as f64 / nz as f64;
                    re += (p - mean) * ang.cos();
                    im -= (p - mean) * ang.sin();
                }
                let mag = (re * re + im * im).sqrt();
                if mag > best_mag {
                    best_mag = mag;
                    best_k = k;
                }
            }
            let freq = best_k as f64 / nz as f64;
            let expected = 1.0 / s.vertebra_period_mm;
            assert!(
                (freq - expected).abs() <= 0.1 * expected,
                "{part:?}: dominant {freq} vs expected {expected}"
            );
        }
    }

    #[test]
    fn spine_column_has_high_z_contrast() {
        for part in [BodyPart::Head, BodyPart::Chest, BodyPart::Abdomen] {
            let s = spec(part);
            let v = generate_phantom(&s).unwrap();
            let (sy, sx) = spine_column_center(&s);
            let nz = v.dims().0;
            let col: Vec<f64> = (0..nz).map(|z| v.data[[z, sy, sx]] as f64).collect();
            let mean = col.iter().sum::<f64>() / nz as f64;
            let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / nz as f64;
            assert!(var.sqrt() > 100.0, "{part:?}: stdev {}", var.sqrt());
        }
    }
}
