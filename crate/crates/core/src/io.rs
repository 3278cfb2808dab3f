//! The "vvol" on-disk volume format.
//!
//! A `.vvol` file is the raw voxel payload in z-major (z, y, x) order,
//! little-endian, either int16 (HU) or float32. A JSON sidecar at
//! `<path>.json` carries dims, spacing and the value domain.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtsError};
use crate::volume::{ValueDomain, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VvolDtype {
    Int16,
    Float32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VvolSidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: VvolDtype,
    pub value_domain: ValueDomain,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Round half to even, as used when exporting HU output as int16.
pub fn round_half_even(v: f32) -> i16 {
    let r = (v as f64).round_ties_even();
    r.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn save_vvol(vol: &Volume, path: &Path, dtype: VvolDtype) -> Result<()> {
    let (nz, ny, nx) = vol.dims();
    let mut bytes: Vec<u8> = Vec::with_capacity(nz * ny * nx * 4);
    match dtype {
        VvolDtype::Int16 => {
            for &v in vol.data.iter() {
                bytes.extend_from_slice(&round_half_even(v).to_le_bytes());
            }
        }
        VvolDtype::Float32 => {
            for &v in vol.data.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, &bytes).map_err(|e| VtsError::io(path, e))?;
    let sidecar = VvolSidecar {
        dims: [nz, ny, nx],
        spacing_mm: vol.spacing,
        dtype,
        value_domain: vol.domain,
    };
    let sc_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&sc_path, json).map_err(|e| VtsError::io(&sc_path, e))?;
    Ok(())
}

/// Save with the natural dtype for the domain: HU → int16, normalized → f32.
pub fn save_vvol_default(vol: &Volume, path: &Path) -> Result<()> {
    let dtype = match vol.domain {
        ValueDomain::Hu => VvolDtype::Int16,
        ValueDomain::Normalized => VvolDtype::Float32,
    };
    save_vvol(vol, path, dtype)
}

pub fn load_vvol(path: &Path) -> Result<Volume> {
    let sc_path = sidecar_path(path);
    let sc_text = fs::read_to_string(&sc_path).map_err(|e| {
        VtsError::Data(format!(
            "missing or unreadable sidecar {}: {e}",
            sc_path.display()
        ))
    })?;
    let sc: VvolSidecar = serde_json::from_str(&sc_text)
        .map_err(|e| VtsError::Data(format!("malformed sidecar {}: {e}", sc_path.display())))?;
    let [nz, ny, nx] = sc.dims;
    let n = nz * ny * nx;
    let bytes = fs::read(path).map_err(|e| VtsError::io(path, e))?;
    let elem = match sc.dtype {
        VvolDtype::Int16 => 2,
        VvolDtype::Float32 => 4,
    };
    if bytes.len() != n * elem {
        return Err(VtsError::Data(format!(
            "payload size {} does not match dims {:?} ({} bytes expected)",
            bytes.len(),
            sc.dims,
            n * elem
        )));
    }
    let mut vals = Vec::with_capacity(n);
    match sc.dtype {
        VvolDtype::Int16 => {
            for c in bytes.chunks_exact(2) {
                vals.push(i16::from_le_bytes([c[0], c[1]]) as f32);
            }
        }
        VvolDtype::Float32 => {
            for c in bytes.chunks_exact(4) {
                vals.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            }
        }
    }
    let data = Array3::from_shape_vec((nz, ny, nx), vals)
        .map_err(|e| VtsError::Data(format!("bad vvol shape: {e}")))?;
    Volume::new(data, sc.spacing_mm, sc.value_domain)
}
