//! Image-quality evaluation: PSNR and 3D SSIM metrics, the tricubic
//! non-learned baseline, and the report harness that degrades held-out
//! volumes deterministically, reconstructs them with each method and
//! writes metric tables plus orthogonal-slice montages.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use serde::Serialize;

use crate::degrade::{degrade, stream_rng, DegradeParams};
use crate::error::{Result, VtsError};
use crate::inference::{infer_tiled, load_model, margin_auto, LoadedModel};
use crate::manifest::{Manifest, Split};
use crate::nets::{from_ncdhw, to_ncdhw};
use crate::train::load_split_volumes;
use crate::volume::{ValueDomain, Volume, HU_CLIP};

/// One row of the metric table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_volumes: usize,
}

/// Full-scale reference scores for this method family, recorded in
/// reports for orientation; desk-scale runs are not expected to match.
pub const REFERENCE_SCORES: &[(&str, f64, f64)] = &[
    ("tricubic", 32.34, 0.878),
    ("srcnn", 33.73, 0.904),
    ("pix2pix", 35.14, 0.925),
    ("vts", 35.73, 0.933),
    ("vts-nocond", 35.17, 0.924),
    ("vts-nohf", 33.70, 0.905),
];

pub const METRICS_CSV_HEADER: &str = "method,psnr_db,ssim,n_volumes";

/// Peak signal-to-noise ratio in dB; identical volumes report +∞.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(VtsError::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mse = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// SSIM window: 11 taps, σ = 1.5.
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of normalized volumes.
const SSIM_L: f64 = 2.0;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Valid-mode 1D convolution along `axis` with the SSIM kernel.
fn filter_valid(a: &Array3<f64>, axis: usize) -> Array3<f64> {
    let k = ssim_kernel();
    let dims = [a.dim().0, a.dim().1, a.dim().2];
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] - SSIM_WINDOW + 1;
    let mut out = Array3::<f64>::zeros((out_dims[0], out_dims[1], out_dims[2]));
    for ((z, y, x), v) in out.indexed_iter_mut() {
        let mut idx = [z, y, x];
        let mut s = 0.0;
        for (j, &w) in k.iter().enumerate() {
            idx[axis] = [z, y, x][axis] + j;
            s += w * a[(idx[0], idx[1], idx[2])];
        }
        *v = s;
    }
    out
}

fn gauss_valid(a: &Array3<f64>) -> Array3<f64> {
    let a = filter_valid(a, 0);
    let a = filter_valid(&a, 1);
    filter_valid(&a, 2)
}

/// Mean local SSIM over all fully contained 11³ Gaussian windows.
pub fn ssim3d(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(VtsError::ShapeMismatch(format!(
            "ssim3d: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (nz, ny, nx) = a.dims();
    if nz < SSIM_WINDOW || ny < SSIM_WINDOW || nx < SSIM_WINDOW {
        return Err(VtsError::InvalidInput(format!(
            "ssim3d requires dims >= {SSIM_WINDOW}, got {:?}",
            a.dims()
        )));
    }
    let af = a.data.mapv(|v| v as f64);
    let bf = b.data.mapv(|v| v as f64);
    let mu_a = gauss_valid(&af);
    let mu_b = gauss_valid(&bf);
    let e_aa = gauss_valid(&(&af * &af));
    let e_bb = gauss_valid(&(&bf * &bf));
    let e_ab = gauss_valid(&(&af * &bf));
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let mut sum = 0.0;
    for ((z, y, x), &ma) in mu_a.indexed_iter() {
        let mb = mu_b[(z, y, x)];
        let va = e_aa[(z, y, x)] - ma * ma;
        let vb = e_bb[(z, y, x)] - mb * mb;
        let cov = e_ab[(z, y, x)] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / mu_a.len() as f64)
}

/// Catmull-Rom value between p1 and p2 at local position t ∈ [0, 1).
fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    0.5 * (2.0 * p1
        + (p2 - p0) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t * t * t)
}

fn mirror(i: isize, n: usize) -> usize {
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

/// Non-learned reference reconstruction: cubic (Catmull-Rom) z-interpolation
/// from the retained slices at z ∈ {0, factor, 2·factor, …} of a volume
/// already on the 1 mm grid. Knot slices pass through unchanged.
pub fn baseline_tricubic(thick_1mm: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(VtsError::InvalidInput(
            "baseline_tricubic: factor must be >= 1".into(),
        ));
    }
    if factor == 1 {
        return Ok(thick_1mm.clone());
    }
    let (nz, ny, nx) = thick_1mm.dims();
    // knot count; a virtual top knot past nz-1 reads the mirrored slice
    let n_knots = (nz - 1).div_ceil(factor) + 1;
    // in-range knot value; out-of-range indices extrapolate linearly
    // (odd reflection), which keeps cubic interpolation exact on ramps
    let knot = |k: isize, y: usize, x: usize| -> f64 {
        let kv = |k: usize| -> f64 {
            let z = mirror((k * factor) as isize, nz);
            thick_1mm.data[[z, y, x]] as f64
        };
        if k < 0 {
            2.0 * kv(0) - kv((-k) as usize)
        } else if k as usize >= n_knots {
            let last = n_knots - 1;
            2.0 * kv(last) - kv(2 * last - k as usize)
        } else {
            kv(k as usize)
        }
    };
    let mut out = Array3::<f32>::zeros((nz, ny, nx));
    for z in 0..nz {
        let i = (z / factor) as isize;
        let t = (z % factor) as f64 / factor as f64;
        let mut plane = out.index_axis_mut(Axis(0), z);
        for y in 0..ny {
            for x in 0..nx {
                let p: [f64; 4] = [
                    knot(i - 1, y, x),
                    knot(i, y, x),
                    knot(i + 1, y, x),
                    knot(i + 2, y, x),
                ];
                plane[[y, x]] = catmull_rom(p[0], p[1], p[2], p[3], t) as f32;
            }
        }
    }
    Volume::new(out, thick_1mm.spacing, thick_1mm.domain)
}

/// Method names the report harness understands.
pub const METHODS: &[&str] = &[
    "input",
    "tricubic",
    "srcnn",
    "pix2pix",
    "vts",
    "vts-nocond",
    "vts-nohf",
    "ground-truth",
];

fn is_learned(method: &str) -> bool {
    matches!(method, "srcnn" | "pix2pix" | "vts" | "vts-nocond" | "vts-nohf")
}

/// Degradation and reconstruction settings for one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub methods: Vec<String>,
    /// Directory holding `<method>.ckpt` for the learned methods.
    pub ckpt_dir: Option<PathBuf>,
    pub params: DegradeParams,
    pub seed: u64,
    pub tile: usize,
    pub montages: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            methods: vec!["input".into(), "tricubic".into()],
            ckpt_dir: None,
            params: DegradeParams::deterministic(4, 1.0, 0.01),
            seed: 0,
            tile: 64,
            montages: true,
        }
    }
}

fn reconstruct(
    method: &str,
    model: Option<&LoadedModel>,
    gt: &Volume,
    degraded: &Volume,
    factor: usize,
    tile: usize,
) -> Result<Volume> {
    match method {
        "ground-truth" => Ok(gt.clone()),
        "input" => Ok(degraded.clone()),
        "tricubic" => baseline_tricubic(degraded, factor),
        _ => {
            let m = model.expect("learned method requires a loaded model");
            // whole-volume forward when the dims allow it; tiled otherwise
            if m.gen.check_input_dims(degraded.dims()).is_ok() {
                let y = m.gen.forward_eval(&m.store, &to_ncdhw(&degraded.data));
                Volume::new(from_ncdhw(&y), degraded.spacing, ValueDomain::Normalized)
            } else {
                let margin = margin_auto(m.gen.receptive_field());
                infer_tiled(degraded, &m.gen, &m.store, tile, margin)
            }
        }
    }
}

/// Per-volume metric line used by the recomputation checks.
#[derive(Debug, Clone, Serialize)]
pub struct CaseRecord {
    pub method: String,
    pub volume: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Evaluate each method on the test split: deterministic degradation per
/// volume, reconstruction, PSNR/SSIM. Writes `metrics.csv`,
/// `per_volume.csv`, `reference_scores.csv` and (optionally) per-case
/// montage PNGs under `out_dir`. Returns the averaged records.
pub fn run_eval(manifest: &Manifest, cfg: &EvalConfig, out_dir: &Path) -> Result<Vec<EvalRecord>> {
    for m in &cfg.methods {
        if !METHODS.contains(&m.as_str()) {
            return Err(VtsError::InvalidInput(format!(
                "unknown eval method {m:?}; expected one of {METHODS:?}"
            )));
        }
    }
    let volumes = load_split_volumes(manifest, Split::Test)?;
    if volumes.is_empty() {
        return Err(VtsError::Data("manifest has no test-split entries".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| VtsError::io(out_dir, e))?;

    // load learned models once
    let mut models: Vec<Option<LoadedModel>> = Vec::new();
    for m in &cfg.methods {
        if is_learned(m) {
            let dir = cfg.ckpt_dir.as_ref().ok_or_else(|| {
                VtsError::InvalidInput(format!("method {m:?} requires --ckpt-dir"))
            })?;
            let path = dir.join(format!("{m}.ckpt"));
            if !path.exists() {
                return Err(VtsError::Data(format!(
                    "missing checkpoint for method {m:?}: {}",
                    path.display()
                )));
            }
            models.push(Some(load_model(&path)?));
        } else {
            models.push(None);
        }
    }

    let mut cases: Vec<CaseRecord> = Vec::new();
    let mut records = Vec::new();
    for (mi, method) in cfg.methods.iter().enumerate() {
        let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
        for (vi, (gt, _part)) in volumes.iter().enumerate() {
            let mut rng = stream_rng(cfg.seed, 1, vi as u64);
            let degraded = degrade(gt, &cfg.params, &mut rng)?;
            let recon = reconstruct(
                method,
                models[mi].as_ref(),
                gt,
                &degraded,
                cfg.params.factor,
                cfg.tile,
            )?;
            let p = psnr(&recon, gt, SSIM_L)?;
            let s = ssim3d(&recon, gt)?;
            cases.push(CaseRecord {
                method: method.clone(),
                volume: vi,
                psnr_db: p,
                ssim: s,
            });
            psnr_sum += p;
            ssim_sum += s;
            if cfg.montages {
                let cases_dir = out_dir.join("cases");
                std::fs::create_dir_all(&cases_dir).map_err(|e| VtsError::io(&cases_dir, e))?;
                write_montage(&recon, &cases_dir.join(format!("vol{vi:03}_{method}.png")))?;
            }
        }
        let n = volumes.len();
        records.push(EvalRecord {
            method: method.clone(),
            psnr_db: psnr_sum / n as f64,
            ssim: ssim_sum / n as f64,
            n_volumes: n,
        });
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut f = std::fs::File::create(&metrics_path).map_err(|e| VtsError::io(&metrics_path, e))?;
    writeln!(f, "{METRICS_CSV_HEADER}").map_err(|e| VtsError::io(&metrics_path, e))?;
    for r in &records {
        writeln!(f, "{},{},{},{}", r.method, r.psnr_db, r.ssim, r.n_volumes)
            .map_err(|e| VtsError::io(&metrics_path, e))?;
    }

    let per_path = out_dir.join("per_volume.csv");
    let mut f = std::fs::File::create(&per_path).map_err(|e| VtsError::io(&per_path, e))?;
    writeln!(f, "method,volume,psnr_db,ssim").map_err(|e| VtsError::io(&per_path, e))?;
    for c in &cases {
        writeln!(f, "{},{},{},{}", c.method, c.volume, c.psnr_db, c.ssim)
            .map_err(|e| VtsError::io(&per_path, e))?;
    }

    let ref_path = out_dir.join("reference_scores.csv");
    let mut f = std::fs::File::create(&ref_path).map_err(|e| VtsError::io(&ref_path, e))?;
    writeln!(f, "method,psnr_db,ssim").map_err(|e| VtsError::io(&ref_path, e))?;
    for (m, p, s) in REFERENCE_SCORES {
        writeln!(f, "{m},{p},{s}").map_err(|e| VtsError::io(&ref_path, e))?;
    }

    Ok(records)
}

/// Display windows in HU: soft tissue and bone.
const WINDOWS: [(f32, f32); 2] = [(-150.0, 250.0), (-1000.0, 1500.0)];

fn window_u8(hu: f32, lo: f32, hi: f32) -> u8 {
    (((hu - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Center axial / coronal / sagittal slices at two HU display windows,
/// laid out as a 2-row grid, written as an 8-bit grayscale PNG.
pub fn write_montage(vol: &Volume, path: &Path) -> Result<()> {
    let (nz, ny, nx) = vol.dims();
    let hu = |z: usize, y: usize, x: usize| -> f32 {
        let v = vol.data[[z, y, x]];
        match vol.domain {
            ValueDomain::Hu => v,
            ValueDomain::Normalized => v * HU_CLIP,
        }
    };
    // views: (height, width, sampler)
    let views: [(usize, usize, Box<dyn Fn(usize, usize) -> f32>); 3] = [
        (ny, nx, Box::new(move |r, c| hu(nz / 2, r, c))),
        (nz, nx, Box::new(move |r, c| hu(r, ny / 2, c))),
        (nz, ny, Box::new(move |r, c| hu(r, c, nx / 2))),
    ];
    let gap = 2usize;
    let cell_h = views.iter().map(|v| v.0).max().unwrap();
    let total_w: usize = views.iter().map(|v| v.1 + gap).sum::<usize>() - gap;
    let total_h = cell_h * WINDOWS.len() + gap * (WINDOWS.len() - 1);
    let mut img = image::GrayImage::new(total_w as u32, total_h as u32);
    for (wi, &(lo, hi)) in WINDOWS.iter().enumerate() {
        let oy = wi * (cell_h + gap);
        let mut ox = 0usize;
        for (h, w, sample) in &views {
            for r in 0..*h {
                for c in 0..*w {
                    let v = window_u8(sample(r, c), lo, hi);
                    img.put_pixel((ox + c) as u32, (oy + r) as u32, image::Luma([v]));
                }
            }
            ox += w + gap;
        }
    }
    img.save(path)
        .map_err(|e| VtsError::Data(format!("montage write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests;
