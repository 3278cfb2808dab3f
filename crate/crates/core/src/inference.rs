//! Arbitrary-FOV inference: spline pre-upsampling of a thick-slice
//! volume onto the 1 mm grid, then sliding-window generator application
//! with a receptive-field margin so tile seams are invisible.

use std::path::Path;

use ndarray::{s, Array3};
use serde::Serialize;

use crate::error::{Result, VtsError};
use crate::nets::{from_ncdhw, to_ncdhw, Checkpoint, GenModel};
use crate::nn::params::ParamStore;
use crate::spline::spline_z_to_spacing;
use crate::trilinear::{pad_mirror3, resample_to};
use crate::volume::{normalize_hu, ValueDomain, Volume};

/// Generator weights restored from a checkpoint, ready for evaluation.
pub struct LoadedModel {
    pub kind: String,
    pub gen: GenModel,
    pub store: ParamStore,
    /// SHA-256 of the checkpoint file, recorded in output provenance.
    pub checkpoint_sha256: String,
}

/// Restore the generator of a training checkpoint; discriminator and
/// optimizer tensors are dropped.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let sha = crate::nets::checkpoint::file_sha256(path)?;
    let ckpt = Checkpoint::load(path)?;
    let gen = if let Some(s) = ckpt.gen_spec {
        GenModel::Vts(s)
    } else if let Some(s) = ckpt.p2p_spec {
        GenModel::Pix2Pix(s)
    } else if let Some(s) = ckpt.srcnn_spec {
        GenModel::Srcnn(s)
    } else {
        return Err(VtsError::Data(format!(
            "{}: checkpoint carries no generator spec",
            path.display()
        )));
    };
    let mut store = ParamStore::new();
    for (name, p) in ckpt.params.iter() {
        if name.starts_with("g.") || name.starts_with("p.") || name.starts_with("s.") {
            store.insert(name, p.value.clone(), p.trainable);
        }
    }
    Ok(LoadedModel {
        kind: ckpt.kind,
        gen,
        store,
        checkpoint_sha256: sha,
    })
}

/// Default tile margin: receptive-field radius rounded up to a multiple
/// of 16, so any window satisfies the stride-divisibility constraint.
pub fn margin_auto(receptive_field: usize) -> usize {
    receptive_field.div_ceil(16) * 16
}

/// Clip/normalize a thick-slice volume and resample it onto the 1 mm
/// isotropic grid: trilinear in-plane, spline along z.
pub fn preprocess_thick(vol: &Volume) -> Result<Volume> {
    let [sz, sy, sx] = vol.spacing;
    if sz + 1e-9 < sy.max(sx) {
        return Err(VtsError::InvalidInput(format!(
            "thick-slice geometry requires z-spacing >= xy-spacing, got {:?}",
            vol.spacing
        )));
    }
    let norm = match vol.domain {
        ValueDomain::Hu => normalize_hu(vol)?,
        ValueDomain::Normalized => vol.clone(),
    };
    let xy = resample_to(&norm, [sz, 1.0, 1.0])?;
    spline_z_to_spacing(&xy, 1.0)
}

/// Run the generator over `vol` in overlapping windows of
/// `tile + 2·margin` voxels, keeping only each window's central `tile`
/// core. The volume border is reflect-padded. `margin` is rounded up
/// internally so every window satisfies the generator's divisibility
/// constraint; enlarging it never changes interior values.
pub fn infer_tiled(
    vol: &Volume,
    gen: &GenModel,
    store: &ParamStore,
    tile: usize,
    margin: usize,
) -> Result<Volume> {
    if vol.domain != ValueDomain::Normalized {
        return Err(VtsError::InvalidInput(
            "infer_tiled expects a normalized volume".into(),
        ));
    }
    if tile == 0 || tile % 16 != 0 {
        return Err(VtsError::InvalidInput(format!(
            "tile {tile} must be a positive multiple of 16"
        )));
    }
    let rf = gen.receptive_field();
    if margin < rf {
        return Err(VtsError::InvalidInput(format!(
            "margin {margin} is below the receptive-field minimum {rf}"
        )));
    }
    // bump the margin until the window passes the divisibility check
    let mut m = margin;
    loop {
        let w = tile + 2 * m;
        if gen.check_input_dims((w, w, w)).is_ok() {
            break;
        }
        m += 1;
        if m > margin + 64 {
            return Err(VtsError::InvalidInput(format!(
                "no window size near tile {tile} + 2·margin {margin} satisfies \
                 the generator's divisibility constraint"
            )));
        }
    }

    let (nz, ny, nx) = vol.dims();
    let dims = [nz, ny, nx];
    let tiles: Vec<usize> = dims.iter().map(|&n| n.div_ceil(tile)).collect();
    // symmetric mirror pad large enough for margin + last-tile overhang,
    // then slice the asymmetric region the tiling actually needs
    let mut pad = [0usize; 3];
    for a in 0..3 {
        pad[a] = m + (tiles[a] * tile - dims[a]);
    }
    let padded = pad_mirror3(&vol.data, pad);
    let off = [pad[0] - m, pad[1] - m, pad[2] - m];

    let mut out = Array3::<f32>::zeros((nz, ny, nx));
    let w = tile + 2 * m;
    for tz in 0..tiles[0] {
        for ty in 0..tiles[1] {
            for tx in 0..tiles[2] {
                let o = [tz * tile, ty * tile, tx * tile];
                let window = padded
                    .slice(s![
                        off[0] + o[0]..off[0] + o[0] + w,
                        off[1] + o[1]..off[1] + o[1] + w,
                        off[2] + o[2]..off[2] + o[2] + w,
                    ])
                    .to_owned();
                let y = gen.forward_eval(store, &to_ncdhw(&window));
                let y = from_ncdhw(&y);
                // core region, clipped to the true volume extent
                let ez = (o[0] + tile).min(nz);
                let ey = (o[1] + tile).min(ny);
                let ex = (o[2] + tile).min(nx);
                out.slice_mut(s![o[0]..ez, o[1]..ey, o[2]..ex]).assign(
                    &y.slice(s![m..m + ez - o[0], m..m + ey - o[1], m..m + ex - o[2]]),
                );
            }
        }
    }
    Volume::new(out, vol.spacing, ValueDomain::Normalized)
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool_version: &'a str,
    checkpoint_sha256: &'a str,
    model_kind: &'a str,
    tile: usize,
    margin: usize,
}

/// End-to-end file path: load thick vvol, preprocess, run the tiled
/// generator, denormalize and write int16 HU output plus a provenance
/// sidecar. `margin = None` selects the receptive-field default.
pub fn run_inference(
    in_path: &Path,
    ckpt_path: &Path,
    out_path: &Path,
    tile: usize,
    margin: Option<usize>,
) -> Result<()> {
    let thick = crate::io::load_vvol(in_path)?;
    let model = load_model(ckpt_path)?;
    let margin = margin.unwrap_or_else(|| margin_auto(model.gen.receptive_field()));
    let pre = preprocess_thick(&thick)?;
    let thin = infer_tiled(&pre, &model.gen, &model.store, tile, margin)?;
    let hu = crate::volume::denormalize(&thin)?;
    crate::io::save_vvol(&hu, out_path, crate::io::VvolDtype::Int16)?;
    let prov = Provenance {
        tool_version: crate::VERSION,
        checkpoint_sha256: &model.checkpoint_sha256,
        model_kind: &model.kind,
        tile,
        margin,
    };
    let prov_path = out_path.with_extension("provenance.json");
    std::fs::write(&prov_path, serde_json::to_string_pretty(&prov)? + "\n")
        .map_err(|e| VtsError::io(&prov_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::GeneratorSpec;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> (GenModel, ParamStore) {
        let spec = GeneratorSpec {
            base_channels: 2,
            levels: 2,
            norm: true,
            ..GeneratorSpec::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.init_params(&mut store, &mut rng);
        // perturb the zero head so the net is not the identity
        store.get_mut("g.out.w").value.mapv_inplace(|_| 0.01);
        (GenModel::Vts(spec), store)
    }

    fn rand_volume(dims: (usize, usize, usize), seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn(dims, |_| rand::Rng::random_range(&mut rng, -0.9..0.9));
        Volume::new(data, [1.0; 3], ValueDomain::Normalized).unwrap()
    }

    #[test]
    fn preprocess_identity_on_isotropic_normalized() {
        let v = rand_volume((8, 8, 8), 1);
        let out = preprocess_thick(&v).unwrap();
        assert_eq!(out.data, v.data);
        assert_eq!(out.spacing, [1.0; 3]);
    }

    #[test]
    fn preprocess_grid_arithmetic_and_knot_preservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data =
            Array3::from_shape_fn((10, 6, 6), |_| rand::Rng::random_range(&mut rng, -900.0..900.0));
        let v = Volume::new(data, [8.0, 1.0, 1.0], ValueDomain::Hu).unwrap();
        let out = preprocess_thick(&v).unwrap();
        assert_eq!(out.dims(), (73, 6, 6), "(10-1)*8+1 slices at 1 mm");
        assert_eq!(out.domain, ValueDomain::Normalized);
        // original slice positions reproduce the normalized originals
        let norm = normalize_hu(&v).unwrap();
        for z in 0..10 {
            for y in 0..6 {
                for x in 0..6 {
                    let a = out.data[[z * 8, y, x]];
                    let b = norm.data[[z, y, x]];
                    assert!((a - b).abs() < 1e-6, "knot mismatch at z={z}");
                }
            }
        }
    }

    #[test]
    fn preprocess_rejects_thin_z_geometry() {
        let v = Volume::new(
            Array3::zeros((4, 4, 4)),
            [0.5, 1.0, 1.0],
            ValueDomain::Normalized,
        )
        .unwrap();
        let err = preprocess_thick(&v).unwrap_err();
        assert!(err.to_string().contains("z-spacing"));
    }

    #[test]
    fn margin_below_receptive_field_rejected_with_minimum() {
        let (gen, store) = small_model(3);
        let rf = gen.receptive_field();
        let v = rand_volume((16, 16, 16), 4);
        let err = infer_tiled(&v, &gen, &store, 16, rf - 1).unwrap_err();
        assert!(
            err.to_string().contains(&rf.to_string()),
            "error must name the minimum: {err}"
        );
    }

    #[test]
    fn single_tile_path_matches_whole_volume_interior() {
        let (gen, store) = small_model(5);
        let rf = gen.receptive_field();
        let v = rand_volume((32, 32, 32), 6);
        let tiled = infer_tiled(&v, &gen, &store, 32, margin_auto(rf)).unwrap();
        assert_eq!(tiled.dims(), v.dims());
        let whole = from_ncdhw(&gen.forward_eval(&store, &to_ncdhw(&v.data)));
        let m = rf;
        let mut max_diff = 0.0f32;
        for z in m..32 - m {
            for y in m..32 - m {
                for x in m..32 - m {
                    max_diff = max_diff.max((tiled.data[[z, y, x]] - whole[[z, y, x]]).abs());
                }
            }
        }
        assert!(max_diff < 1e-4, "interior disagreement {max_diff}");
    }

    #[test]
    fn tiled_matches_whole_volume_on_interior() {
        let (gen, store) = small_model(7);
        let rf = gen.receptive_field();
        let v = rand_volume((64, 64, 64), 8);
        let tiled = infer_tiled(&v, &gen, &store, 32, margin_auto(rf)).unwrap();
        let whole = from_ncdhw(&gen.forward_eval(&store, &to_ncdhw(&v.data)));
        let m = rf;
        let mut max_diff = 0.0f32;
        for z in m..64 - m {
            for y in m..64 - m {
                for x in m..64 - m {
                    max_diff = max_diff.max((tiled.data[[z, y, x]] - whole[[z, y, x]]).abs());
                }
            }
        }
        assert!(max_diff < 1e-4, "interior disagreement {max_diff}");
    }

    #[test]
    fn seams_are_no_worse_than_interior_planes() {
        let (gen, store) = small_model(9);
        let rf = gen.receptive_field();
        let v = rand_volume((64, 48, 48), 10);
        let out = infer_tiled(&v, &gen, &store, 32, margin_auto(rf)).unwrap();
        // max |Δ| across the z = 31/32 tile boundary vs all other planes
        let plane_jump = |z: usize| -> f32 {
            let mut m = 0.0f32;
            for y in 0..48 {
                for x in 0..48 {
                    m = m.max((out.data[[z + 1, y, x]] - out.data[[z, y, x]]).abs());
                }
            }
            m
        };
        let seam = plane_jump(31);
        let interior_max = (16..48).filter(|&z| z != 31).map(plane_jump).fold(0.0, f32::max);
        assert!(
            seam <= interior_max + 1e-3,
            "boundary jump {seam} vs interior max {interior_max}"
        );
    }

    #[test]
    fn output_shape_preserved_for_awkward_dims() {
        let (gen, store) = small_model(11);
        let rf = gen.receptive_field();
        let v = rand_volume((24, 40, 33), 12);
        let out = infer_tiled(&v, &gen, &store, 32, margin_auto(rf)).unwrap();
        assert_eq!(out.dims(), (24, 40, 33));
        assert!(out.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn run_inference_end_to_end_with_provenance() {
        use crate::phantom::{generate_phantom, BodyPart, PhantomSpec};
        let dir = tempfile::tempdir().unwrap();
        // thick input: every 4th slice of a 1 mm phantom, 4 mm z-spacing
        let spec = PhantomSpec::new((32, 32, 32), 21, BodyPart::Head);
        let iso = generate_phantom(&spec).unwrap();
        let data = Array3::from_shape_fn((8, 32, 32), |(z, y, x)| iso.data[[z * 4, y, x]]);
        let hu = Volume::new(data, [4.0, 1.0, 1.0], ValueDomain::Hu).unwrap();
        let in_path = dir.path().join("thick.vvol");
        crate::io::save_vvol(&hu, &in_path, crate::io::VvolDtype::Int16).unwrap();

        let cfg = crate::train::TrainConfig {
            base_channels: 2,
            patch: 32,
            seed: 13,
            ..crate::train::TrainConfig::default()
        };
        let trainer = crate::train::Trainer::new(cfg).unwrap();
        let ckpt_path = dir.path().join("model.ckpt");
        trainer.save_checkpoint(&ckpt_path).unwrap();

        let out_path = dir.path().join("thin.vvol");
        run_inference(&in_path, &ckpt_path, &out_path, 32, None).unwrap();
        let out = crate::io::load_vvol(&out_path).unwrap();
        assert_eq!(out.dims(), (29, 32, 32), "(8-1)*4+1 slices");
        assert_eq!(out.domain, ValueDomain::Hu);
        let prov: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("thin.provenance.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(prov["tool_version"], crate::VERSION);
        assert_eq!(
            prov["checkpoint_sha256"],
            crate::nets::checkpoint::file_sha256(&ckpt_path).unwrap()
        );

        // determinism: a second run writes bit-identical payloads
        let out2_path = dir.path().join("thin2.vvol");
        run_inference(&in_path, &ckpt_path, &out2_path, 32, None).unwrap();
        assert_eq!(
            std::fs::read(&out_path).unwrap(),
            std::fs::read(&out2_path).unwrap()
        );
    }

    #[test]
    fn load_model_drops_discriminator_and_optimizer_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::train::TrainConfig {
            base_channels: 2,
            patch: 32,
            ..crate::train::TrainConfig::default()
        };
        let trainer = crate::train::Trainer::new(cfg).unwrap();
        let p = dir.path().join("m.ckpt");
        trainer.save_checkpoint(&p).unwrap();
        let model = load_model(&p).unwrap();
        assert!(model.store.names().all(|n| n.starts_with("g.")));
        assert!(matches!(model.gen, GenModel::Vts(_)));
        assert_eq!(model.kind, "vts");
    }

    #[test]
    fn margin_auto_rounds_up_to_16() {
        assert_eq!(margin_auto(53), 64);
        assert_eq!(margin_auto(16), 16);
        assert_eq!(margin_auto(1), 16);
        let _ = IxDyn(&[1]);
    }
}
