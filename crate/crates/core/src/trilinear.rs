//! Trilinear grid resampling: anisotropic → isotropic rescaling, affine
//! augmentation resampling, and mirror padding.

use ndarray::Array3;

use crate::error::{Result, VtsError};
use crate::volume::Volume;
use crate::zfilter::mirror_index;

/// Sample `data` at fractional index (z, y, x) with trilinear weights,
/// clamped to the grid. Computed in f64.
#[inline]
fn sample_clamped(data: &Array3<f32>, z: f64, y: f64, x: f64) -> f64 {
    let (nz, ny, nx) = data.dim();
    let cz = z.clamp(0.0, (nz - 1) as f64);
    let cy = y.clamp(0.0, (ny - 1) as f64);
    let cx = x.clamp(0.0, (nx - 1) as f64);
    let z0 = (cz.floor() as usize).min(nz - 1);
    let y0 = (cy.floor() as usize).min(ny - 1);
    let x0 = (cx.floor() as usize).min(nx - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let x1 = (x0 + 1).min(nx - 1);
    let fz = cz - z0 as f64;
    let fy = cy - y0 as f64;
    let fx = cx - x0 as f64;
    let c000 = data[[z0, y0, x0]] as f64;
    let c001 = data[[z0, y0, x1]] as f64;
    let c010 = data[[z0, y1, x0]] as f64;
    let c011 = data[[z0, y1, x1]] as f64;
    let c100 = data[[z1, y0, x0]] as f64;
    let c101 = data[[z1, y0, x1]] as f64;
    let c110 = data[[z1, y1, x0]] as f64;
    let c111 = data[[z1, y1, x1]] as f64;
    let c00 = c000 * (1.0 - fx) + c001 * fx;
    let c01 = c010 * (1.0 - fx) + c011 * fx;
    let c10 = c100 * (1.0 - fx) + c101 * fx;
    let c11 = c110 * (1.0 - fx) + c111 * fx;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Resample onto per-axis target spacings. Output dim per axis is
/// round(in_dim · in_spacing / target), at least 1; values by trilinear
/// interpolation at the new grid positions (anchored at index 0).
pub fn resample_to(vol: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|&t| !(t > 0.0)) {
        return Err(VtsError::InvalidInput(format!(
            "resample_to: target spacings must be > 0, got {target:?}"
        )));
    }
    if vol.spacing == target {
        return Ok(vol.clone());
    }
    let (nz, ny, nx) = vol.dims();
    let dims_in = [nz, ny, nx];
    let mut dims_out = [0usize; 3];
    for a in 0..3 {
        dims_out[a] = ((dims_in[a] as f64 * vol.spacing[a] / target[a]).round() as usize).max(1);
    }
    let mut out = Array3::<f32>::zeros((dims_out[0], dims_out[1], dims_out[2]));
    let rz = target[0] / vol.spacing[0];
    let ry = target[1] / vol.spacing[1];
    let rx = target[2] / vol.spacing[2];
    for z in 0..dims_out[0] {
        for y in 0..dims_out[1] {
            for x in 0..dims_out[2] {
                out[[z, y, x]] =
                    sample_clamped(&vol.data, z as f64 * rz, y as f64 * ry, x as f64 * rx) as f32;
            }
        }
    }
    Volume::new(out, target, vol.domain)
}

/// Rescale to isotropic voxels of `target_mm` (default 1.0).
pub fn resample_isotropic(vol: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm > 0.0) {
        return Err(VtsError::InvalidInput(format!(
            "resample_isotropic: target must be > 0, got {target_mm}"
        )));
    }
    resample_to(vol, [target_mm; 3])
}

/// Rotation matrix Rz(rz)·Ry(ry)·Rx(rx) for angles in degrees, acting on
/// (z, y, x) coordinate vectors.
fn rotation_matrix(rot_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [az, ay, ax] = [
        rot_deg[0].to_radians(),
        rot_deg[1].to_radians(),
        rot_deg[2].to_radians(),
    ];
    // Each elemental rotation mixes the two axes orthogonal to its own.
    let rz = [
        [1.0, 0.0, 0.0],
        [0.0, az.cos(), -az.sin()],
        [0.0, az.sin(), az.cos()],
    ];
    let ry = [
        [ay.cos(), 0.0, ay.sin()],
        [0.0, 1.0, 0.0],
        [-ay.sin(), 0.0, ay.cos()],
    ];
    let rx = [
        [ax.cos(), -ax.sin(), 0.0],
        [ax.sin(), ax.cos(), 0.0],
        [0.0, 0.0, 1.0],
    ];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut c = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    };
    mul(rz, mul(ry, rx))
}

/// Resample through a rotation (degrees, about the volume center) and a
/// uniform scale. Out-of-bounds samples take `fill`. Assumes isotropic
/// voxels; output grid equals the input grid.
pub fn affine_resample(vol: &Volume, rot_deg: [f64; 3], scale: f64, fill: f32) -> Result<Volume> {
    if !(scale > 0.0) {
        return Err(VtsError::InvalidInput("affine scale must be > 0".into()));
    }
    if rot_deg == [0.0; 3] && scale == 1.0 {
        return Ok(vol.clone());
    }
    let (nz, ny, nx) = vol.dims();
    let r = rotation_matrix(rot_deg);
    let c = [
        (nz as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nx as f64 - 1.0) / 2.0,
    ];
    let mut out = Array3::<f32>::zeros((nz, ny, nx));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                // Inverse map: transpose of R, divided by the scale.
                let mut q = [0.0f64; 3];
                for i in 0..3 {
                    q[i] = (r[0][i] * p[0] + r[1][i] * p[1] + r[2][i] * p[2]) / scale + c[i];
                }
                out[[z, y, x]] = if q[0] < 0.0
                    || q[0] > (nz - 1) as f64
                    || q[1] < 0.0
                    || q[1] > (ny - 1) as f64
                    || q[2] < 0.0
                    || q[2] > (nx - 1) as f64
                {
                    fill
                } else {
                    sample_clamped(&vol.data, q[0], q[1], q[2]) as f32
                };
            }
        }
    }
    Ok(Volume {
        data: out,
        spacing: vol.spacing,
        domain: vol.domain,
    })
}

/// Mirror-pad an array by `pad` voxels on each side of every axis.
pub fn pad_mirror3(data: &Array3<f32>, pad: [usize; 3]) -> Array3<f32> {
    let (nz, ny, nx) = data.dim();
    let mut out = Array3::<f32>::zeros((nz + 2 * pad[0], ny + 2 * pad[1], nx + 2 * pad[2]));
    for z in 0..out.dim().0 {
        let sz = mirror_index(z as isize - pad[0] as isize, nz);
        for y in 0..out.dim().1 {
            let sy = mirror_index(y as isize - pad[1] as isize, ny);
            for x in 0..out.dim().2 {
                let sx = mirror_index(x as isize - pad[2] as isize, nx);
                out[[z, y, x]] = data[[sz, sy, sx]];
            }
        }
    }
    out
}
