//! 1D filtering and decimation along the z axis.

use ndarray::Array3;

use crate::error::{Result, VtsError};
use crate::volume::Volume;

/// Mirror an index into [0, n) without repeating the edge sample
/// (index -1 maps to 1, index n maps to n-2).
pub(crate) fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Discrete Gaussian kernel with radius ceil(3σ), renormalized to sum 1.
pub fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma_vox).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Gaussian smoothing along z only, with mirror boundary handling.
/// σ = 0 is the identity.
pub fn gaussian_z(vol: &Volume, sigma_vox: f64) -> Result<Volume> {
    if sigma_vox < 0.0 || !sigma_vox.is_finite() {
        return Err(VtsError::InvalidInput(format!(
            "gaussian_z: sigma must be finite and >= 0, got {sigma_vox}"
        )));
    }
    if sigma_vox == 0.0 {
        return Ok(vol.clone());
    }
    let kernel = gaussian_kernel(sigma_vox);
    let radius = (kernel.len() / 2) as isize;
    let (nz, ny, nx) = vol.dims();
    let mut out = Array3::<f32>::zeros((nz, ny, nx));
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                let mut acc = 0.0f64;
                for (j, &w) in kernel.iter().enumerate() {
                    let src = mirror_index(z as isize + j as isize - radius, nz);
                    acc += w * vol.data[[src, y, x]] as f64;
                }
                out[[z, y, x]] = acc as f32;
            }
        }
    }
    Ok(Volume {
        data: out,
        spacing: vol.spacing,
        domain: vol.domain,
    })
}

/// Keep slices at z = 0, factor, 2·factor, …; z-spacing scales by factor.
pub fn subsample_z(vol: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(VtsError::InvalidInput("subsample_z: factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let (nz, ny, nx) = vol.dims();
    let out_z = (nz - 1) / factor + 1;
    let mut out = Array3::<f32>::zeros((out_z, ny, nx));
    for zo in 0..out_z {
        out.index_axis_mut(ndarray::Axis(0), zo)
            .assign(&vol.data.index_axis(ndarray::Axis(0), zo * factor));
    }
    Ok(Volume {
        data: out,
        spacing: [vol.spacing[0] * factor as f64, vol.spacing[1], vol.spacing[2]],
        domain: vol.domain,
    })
}
