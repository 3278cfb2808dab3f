//! Natural cubic spline interpolation along z, applied independently to
//! every (y, x) column.
//!
//! Knots sit at the input slice positions. End conditions are natural
//! (zero second derivative). Column solves run in f64; values at the
//! original knots are copied through bit-exactly.

use ndarray::Array3;

use crate::error::{Result, VtsError};
use crate::volume::Volume;

/// Second derivatives of the natural cubic spline through `y` at unit
/// knot spacing, via the Thomas tridiagonal algorithm.
pub(crate) fn natural_spline_m(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0f64; n];
    if n < 3 {
        return m;
    }
    // Interior system: m[i-1] + 4 m[i] + m[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1])
    let k = n - 2;
    let mut diag = vec![4.0f64; k];
    let mut rhs: Vec<f64> = (1..n - 1)
        .map(|i| 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]))
        .collect();
    for i in 1..k {
        let w = 1.0 / diag[i - 1];
        diag[i] -= w;
        rhs[i] -= w * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for i in (0..k - 1).rev() {
        m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
    }
    m
}

/// Evaluate the spline at knot-relative position t ∈ [0, n-1].
pub(crate) fn spline_eval(y: &[f64], m: &[f64], t: f64) -> f64 {
    let n = y.len();
    let i = (t.floor() as usize).min(n - 2);
    let u = t - i as f64;
    let a = 1.0 - u;
    m[i] * a * a * a / 6.0
        + m[i + 1] * u * u * u / 6.0
        + (y[i] - m[i] / 6.0) * a
        + (y[i + 1] - m[i + 1] / 6.0) * u
}

/// Sampling plan shared by every column: for each output slice either an
/// exact knot copy or an (interval, offset) evaluation.
enum ZSample {
    Knot(usize),
    At(f64),
}

fn resample_columns(vol: &Volume, plan: &[ZSample], out_spacing_z: f64) -> Volume {
    let (nz, ny, nx) = vol.dims();
    let out_z = plan.len();
    let mut out = Array3::<f32>::zeros((out_z, ny, nx));
    let mut col = vec![0.0f64; nz];
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                col[z] = vol.data[[z, y, x]] as f64;
            }
            let m = natural_spline_m(&col);
            for (zo, s) in plan.iter().enumerate() {
                out[[zo, y, x]] = match *s {
                    ZSample::Knot(k) => vol.data[[k, y, x]],
                    ZSample::At(t) => spline_eval(&col, &m, t) as f32,
                };
            }
        }
    }
    Volume {
        data: out,
        spacing: [out_spacing_z, vol.spacing[1], vol.spacing[2]],
        domain: vol.domain,
    }
}

/// Insert `factor - 1` spline-interpolated slices between every pair of
/// input slices. Output z-dim = (in_z - 1) * factor + 1; original slices
/// are preserved exactly.
pub fn spline_z_upsample(vol: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(VtsError::InvalidInput(
            "spline_z_upsample: factor must be >= 1".into(),
        ));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let (nz, ..) = vol.dims();
    if nz < 2 {
        return Err(VtsError::InvalidInput(
            "spline_z_upsample: z-dim must be >= 2 for factor > 1".into(),
        ));
    }
    let out_z = (nz - 1) * factor + 1;
    let plan: Vec<ZSample> = (0..out_z)
        .map(|zo| {
            if zo % factor == 0 {
                ZSample::Knot(zo / factor)
            } else {
                ZSample::At(zo as f64 / factor as f64)
            }
        })
        .collect();
    Ok(resample_columns(
        vol,
        &plan,
        vol.spacing[0] / factor as f64,
    ))
}

/// Spline-resample z onto a grid with `target_mm` spacing, anchored at
/// slice 0. Output covers the original extent: round((nz-1)·sz/target)+1
/// samples. Output slices landing exactly on input slices copy through.
pub fn spline_z_to_spacing(vol: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm > 0.0) {
        return Err(VtsError::InvalidInput(
            "spline_z_to_spacing: target spacing must be > 0".into(),
        ));
    }
    let (nz, ..) = vol.dims();
    let sz = vol.spacing[0];
    if (sz - target_mm).abs() < 1e-12 {
        return Ok(vol.clone());
    }
    if nz < 2 {
        return Err(VtsError::InvalidInput(
            "spline_z_to_spacing: z-dim must be >= 2".into(),
        ));
    }
    let out_z = (((nz - 1) as f64 * sz) / target_mm).round() as usize + 1;
    let last_t = (nz - 1) as f64;
    let plan: Vec<ZSample> = (0..out_z)
        .map(|zo| {
            let t = (zo as f64 * target_mm / sz).min(last_t);
            let nearest = t.round();
            if (t - nearest).abs() < 1e-9 {
                ZSample::Knot(nearest as usize)
            } else {
                ZSample::At(t)
            }
        })
        .collect();
    Ok(resample_columns(vol, &plan, target_mm))
}
