//! Volume representation: a 3D scalar grid in (z, y, x) order with per-axis
//! spacing in millimetres, plus the HU <-> normalized value mappings.
//!
//! CT values are clipped to [-2048, 2048] on ingestion and mapped linearly
//! to [-1, 1] for all model-facing code.

use ndarray::Array3;

use crate::error::{Result, VtsError};

/// HU clipping bound; normalization divides by this.
pub const HU_CLIP: f32 = 2048.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    /// Hounsfield units, clipped to [-2048, 2048].
    Hu,
    /// Linearly mapped to [-1, 1].
    Normalized,
}

/// A 3D scalar volume. Data is indexed (z, y, x); spacing is (sz, sy, sx)
/// in mm per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f64; 3],
    pub domain: ValueDomain,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], domain: ValueDomain) -> Result<Self> {
        let dims = data.dim();
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(VtsError::InvalidInput(format!(
                "volume dims must all be >= 1, got {:?}",
                dims
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VtsError::InvalidInput(format!(
                "spacings must be positive and finite, got {:?}",
                spacing
            )));
        }
        Ok(Volume {
            data,
            spacing,
            domain,
        })
    }

    /// (z, y, x) voxel counts.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_isotropic(&self, target_mm: f64, tol: f64) -> bool {
        self.spacing.iter().all(|&s| (s - target_mm).abs() <= tol)
    }

    /// Validates the value-domain invariant over every voxel.
    pub fn check_values(&self) -> Result<()> {
        let (lo, hi) = match self.domain {
            ValueDomain::Hu => (-HU_CLIP, HU_CLIP),
            ValueDomain::Normalized => (-1.0, 1.0),
        };
        for &v in self.data.iter() {
            if !v.is_finite() {
                return Err(VtsError::Numeric("non-finite voxel value".into()));
            }
            if v < lo || v > hi {
                return Err(VtsError::Data(format!(
                    "voxel value {v} outside [{lo}, {hi}] for {:?} domain",
                    self.domain
                )));
            }
        }
        Ok(())
    }
}

/// Clip HU to [-2048, 2048] and map linearly onto [-1, 1].
///
/// Rejects non-finite input values; shape and spacing are unchanged.
pub fn normalize_hu(vol: &Volume) -> Result<Volume> {
    if vol.domain != ValueDomain::Hu {
        return Err(VtsError::InvalidInput(
            "normalize_hu expects an HU-domain volume".into(),
        ));
    }
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(VtsError::Numeric(
            "normalize_hu: non-finite input value".into(),
        ));
    }
    let data = vol.data.mapv(|v| v.clamp(-HU_CLIP, HU_CLIP) / HU_CLIP);
    Ok(Volume {
        data,
        spacing: vol.spacing,
        domain: ValueDomain::Normalized,
    })
}

/// Inverse of [`normalize_hu`]: multiply by 2048.
///
/// Values outside [-1, 1] by more than 1e-6 are rejected.
pub fn denormalize(vol: &Volume) -> Result<Volume> {
    if vol.domain != ValueDomain::Normalized {
        return Err(VtsError::InvalidInput(
            "denormalize expects a normalized volume".into(),
        ));
    }
    const TOL: f32 = 1e-6;
    for &v in vol.data.iter() {
        if !v.is_finite() || v < -1.0 - TOL || v > 1.0 + TOL {
            return Err(VtsError::Data(format!(
                "denormalize: value {v} outside [-1, 1]"
            )));
        }
    }
    let data = vol.data.mapv(|v| v.clamp(-1.0, 1.0) * HU_CLIP);
    Ok(Volume {
        data,
        spacing: vol.spacing,
        domain: ValueDomain::Hu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    fn hu_vol(vals: &[f32]) -> Volume {
        let n = vals.len();
        Volume::new(
            Array3::from_shape_vec((n, 1, 1), vals.to_vec()).unwrap(),
            [1.0, 1.0, 1.0],
            ValueDomain::Hu,
        )
        .unwrap()
    }

    #[test]
    fn normalize_maps_endpoints() {
        let v = hu_vol(&[2048.0, 0.0, -4096.0]);
        let n = normalize_hu(&v).unwrap();
        assert_eq!(n.data[[0, 0, 0]], 1.0);
        assert_eq!(n.data[[1, 0, 0]], 0.0);
        assert_eq!(n.data[[2, 0, 0]], -1.0);
        assert_eq!(n.domain, ValueDomain::Normalized);
    }

    #[test]
    fn normalize_rejects_nan() {
        let v = hu_vol(&[f32::NAN]);
        assert!(normalize_hu(&v).is_err());
    }

    #[test]
    fn denormalize_endpoints_and_range_check() {
        let n = Volume::new(
            arr3(&[[[1.0f32, 0.0]]]),
            [1.0, 1.0, 1.0],
            ValueDomain::Normalized,
        )
        .unwrap();
        let h = denormalize(&n).unwrap();
        assert_eq!(h.data[[0, 0, 0]], 2048.0);
        assert_eq!(h.data[[0, 0, 1]], 0.0);

        let bad = Volume::new(
            arr3(&[[[1.5f32]]]),
            [1.0, 1.0, 1.0],
            ValueDomain::Normalized,
        )
        .unwrap();
        assert!(denormalize(&bad).is_err());
    }

    #[test]
    fn round_trip_within_tolerance() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f32> = (0..256)
            .map(|_| rng.random_range(-2048.0f32..=2048.0))
            .collect();
        let v = Volume::new(
            Array3::from_shape_vec((4, 8, 8), vals.clone()).unwrap(),
            [1.0, 1.0, 1.0],
            ValueDomain::Hu,
        )
        .unwrap();
        let rt = denormalize(&normalize_hu(&v).unwrap()).unwrap();
        for (a, b) in v.data.iter().zip(rt.data.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_zero_spacing() {
        assert!(Volume::new(arr3(&[[[0.0f32]]]), [0.0, 1.0, 1.0], ValueDomain::Hu).is_err());
    }
}
