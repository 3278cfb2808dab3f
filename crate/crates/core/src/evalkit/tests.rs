use super::*;
use crate::manifest::ManifestEntry;
use crate::phantom::{generate_phantom, BodyPart, PhantomSpec};
use crate::volume::normalize_hu;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vol(data: Array3<f32>) -> Volume {
    Volume::new(data, [1.0; 3], ValueDomain::Normalized).unwrap()
}

fn rand_vol(n: usize, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vol(Array3::from_shape_fn((n, n, n), |_| {
        rng.random_range(-0.9..0.9)
    }))
}

#[test]
fn psnr_closed_forms() {
    let a = rand_vol(16, 1);
    assert_eq!(psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
    let mut b = a.clone();
    b.data.mapv_inplace(|v| v + 0.2);
    let p = psnr(&a, &b, 2.0).unwrap();
    assert!((p - 20.0).abs() < 1e-5, "uniform +0.2 at range 2 → 20 dB, got {p}");
}

#[test]
fn psnr_matches_brute_force_oracle_and_is_symmetric() {
    let a = rand_vol(16, 2);
    let b = rand_vol(16, 3);
    // independent elementwise accumulation
    let mut se = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        se += (*x as f64 - *y as f64).powi(2);
    }
    let oracle = 10.0 * (4.0 / (se / 16.0f64.powi(3))).log10();
    assert!((psnr(&a, &b, 2.0).unwrap() - oracle).abs() < 1e-9);
    assert_eq!(psnr(&a, &b, 2.0).unwrap(), psnr(&b, &a, 2.0).unwrap());
    let c = rand_vol(12, 4);
    assert!(psnr(&a, &c, 2.0).is_err());
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let a = rand_vol(16, 5);
    let mut prev = f64::INFINITY;
    for (i, amp) in [0.01f32, 0.05, 0.2].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + i as u64);
        let mut b = a.clone();
        b.data.mapv_inplace(|v| v + rng.random_range(-*amp..*amp));
        let p = psnr(&a, &b, 2.0).unwrap();
        assert!(p < prev, "noise amp {amp}: psnr {p} should drop below {prev}");
        prev = p;
    }
}

#[test]
fn ssim_identity_is_one() {
    let a = rand_vol(16, 6);
    assert_eq!(ssim3d(&a, &a).unwrap(), 1.0);
}

#[test]
fn ssim_constant_pair_luminance_closed_form() {
    let c = 0.3f64;
    let d = 0.2f64;
    let a = vol(Array3::from_elem((12, 12, 12), c as f32));
    let b = vol(Array3::from_elem((12, 12, 12), (c + d) as f32));
    let c1 = (0.01f64 * 2.0).powi(2);
    // zero variances: the structure term is exactly 1
    let cf = c as f32 as f64;
    let cdf = (c + d) as f32 as f64;
    let expected = (2.0 * cf * cdf + c1) / (cf * cf + cdf * cdf + c1);
    let got = ssim3d(&a, &b).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn ssim_matches_naive_sliding_window_oracle() {
    let a = rand_vol(16, 7);
    let b = rand_vol(16, 8);
    // independent naive implementation with explicit 3D window weights
    let k = ssim_kernel();
    let c1 = (0.01f64 * 2.0).powi(2);
    let c2 = (0.03f64 * 2.0).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for cz in 5..11 {
        for cy in 5..11 {
            for cx in 5..11 {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut eaa, mut ebb, mut eab) = (0.0f64, 0.0f64, 0.0f64);
                for dz in 0..11 {
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let w = k[dz] * k[dy] * k[dx];
                            let av = a.data[[cz + dz - 5, cy + dy - 5, cx + dx - 5]] as f64;
                            let bv = b.data[[cz + dz - 5, cy + dy - 5, cx + dx - 5]] as f64;
                            ma += w * av;
                            mb += w * bv;
                            eaa += w * av * av;
                            ebb += w * bv * bv;
                            eab += w * av * bv;
                        }
                    }
                }
                let (va, vb, cov) = (eaa - ma * ma, ebb - mb * mb, eab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    let oracle = sum / count as f64;
    let got = ssim3d(&a, &b).unwrap();
    assert!((got - oracle).abs() < 1e-6, "{got} vs naive {oracle}");
}

#[test]
fn ssim_rejects_small_volumes() {
    let a = rand_vol(8, 9);
    assert!(ssim3d(&a, &a).is_err());
}

#[test]
fn tricubic_reproduces_linear_ramps_and_knots() {
    // linear in z: cubic interpolation is exact everywhere
    let ramp = vol(Array3::from_shape_fn((17, 4, 4), |(z, _, _)| {
        z as f32 * 0.05 - 0.4
    }));
    let out = baseline_tricubic(&ramp, 4).unwrap();
    for (ix, v) in out.data.indexed_iter() {
        let want = ramp.data[ix];
        assert!((v - want).abs() < 1e-6, "ramp mismatch at {ix:?}");
    }
    // arbitrary values: knot slices pass through exactly
    let arb = rand_vol(16, 10);
    let out = baseline_tricubic(&arb, 4).unwrap();
    for z in (0..16).step_by(4) {
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(out.data[[z, y, x]], arb.data[[z, y, x]]);
            }
        }
    }
}

#[test]
fn tricubic_step_edge_matches_1d_oracle() {
    // step profile constant in-plane; compare against a basis-matrix
    // Catmull-Rom evaluation
    let profile: Vec<f32> = (0..21).map(|z| if z < 8 { -0.5 } else { 0.5 }).collect();
    let v = vol(Array3::from_shape_fn((21, 4, 4), |(z, _, _)| profile[z]));
    let factor = 4usize;
    let out = baseline_tricubic(&v, factor).unwrap();
    let n_knots = 6usize; // ceil(20/4)+1
    let kv = |k: usize| profile[k * factor] as f64;
    let knot = |k: isize| -> f64 {
        if k < 0 {
            2.0 * kv(0) - kv((-k) as usize)
        } else if k as usize >= n_knots {
            2.0 * kv(n_knots - 1) - kv(2 * (n_knots - 1) - k as usize)
        } else {
            kv(k as usize)
        }
    };
    for z in 0..21 {
        let i = (z / factor) as isize;
        let t = (z % factor) as f64 / factor as f64;
        let (p0, p1, p2, p3) = (knot(i - 1), knot(i), knot(i + 1), knot(i + 2));
        // basis-matrix form: [1 t t² t³] · M · p with M the Catmull-Rom matrix
        let ts = [1.0, t, t * t, t * t * t];
        let m = [
            [0.0, 1.0, 0.0, 0.0],
            [-0.5, 0.0, 0.5, 0.0],
            [1.0, -2.5, 2.0, -0.5],
            [-0.5, 1.5, -1.5, 0.5],
        ];
        let p = [p0, p1, p2, p3];
        let mut want = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                want += ts[r] * m[r][c] * p[c];
            }
        }
        let got = out.data[[z, 0, 0]] as f64;
        assert!((got - want).abs() < 1e-6, "z={z}: {got} vs {want}");
        // overshoot is the cubic's, bounded by the oracle itself
        assert!(got >= -0.7 && got <= 0.7);
    }
}

#[test]
fn ablation_architecture_diffs() {
    use crate::nets::GeneratorSpec;
    use crate::train::{TrainConfig, Trainer};
    let vts = GeneratorSpec::default();
    let nohf = GeneratorSpec {
        residual: false,
        ..GeneratorSpec::default()
    };
    let a: Vec<String> = vts.layers().iter().map(|l| l.kind.clone()).collect();
    let b: Vec<String> = nohf.layers().iter().map(|l| l.kind.clone()).collect();
    // only difference: the residual add is gone
    let a_filtered: Vec<&String> = a.iter().filter(|k| *k != "residual_add").collect();
    assert!(a.contains(&"residual_add".to_string()));
    assert!(!b.contains(&"residual_add".to_string()));
    assert_eq!(a_filtered, b.iter().collect::<Vec<_>>());

    // the condition ablation changes only the discriminator input handling
    let cfg = |model: &str| TrainConfig {
        model: model.into(),
        base_channels: 2,
        patch: 32,
        ..TrainConfig::default()
    };
    let t_full = Trainer::new(cfg("vts")).unwrap();
    let t_nocond = Trainer::new(cfg("vts-nocond")).unwrap();
    assert!(!t_full.zero_condition);
    assert!(t_nocond.zero_condition);
    assert_eq!(t_full.disc, t_nocond.disc, "discriminator spec unchanged");
    assert_eq!(t_full.gen, t_nocond.gen, "generator unchanged");
}

fn test_manifest(dir: &Path, n_vols: usize) -> Manifest {
    let mut entries = Vec::new();
    for i in 0..n_vols {
        let spec = PhantomSpec::new((32, 32, 32), 40 + i as u64, BodyPart::Chest);
        let hu = generate_phantom(&spec).unwrap();
        let v = normalize_hu(&hu).unwrap();
        let p = dir.join(format!("t{i}.vvol"));
        crate::io::save_vvol_default(&v, &p).unwrap();
        entries.push(ManifestEntry {
            path: p,
            body_part: BodyPart::Chest,
            split: Split::Test,
        });
    }
    Manifest { entries }
}

#[test]
fn run_eval_writes_reports_and_recomputes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = test_manifest(dir.path(), 2);

    // one learned method: an untrained tiny vts checkpoint
    let tc = crate::train::TrainConfig {
        base_channels: 2,
        patch: 32,
        ..crate::train::TrainConfig::default()
    };
    let trainer = crate::train::Trainer::new(tc).unwrap();
    let ckpt_dir = dir.path().join("ckpts");
    std::fs::create_dir_all(&ckpt_dir).unwrap();
    trainer.save_checkpoint(&ckpt_dir.join("vts.ckpt")).unwrap();

    let out = dir.path().join("report");
    let cfg = EvalConfig {
        methods: vec![
            "input".into(),
            "tricubic".into(),
            "vts".into(),
            "ground-truth".into(),
        ],
        ckpt_dir: Some(ckpt_dir),
        params: DegradeParams::deterministic(4, 1.0, 0.01),
        seed: 3,
        tile: 32,
        montages: true,
    };
    let records = run_eval(&manifest, &cfg, &out).unwrap();
    assert_eq!(records.len(), 4);
    let gt = records.iter().find(|r| r.method == "ground-truth").unwrap();
    assert_eq!(gt.psnr_db, f64::INFINITY);
    assert!((gt.ssim - 1.0).abs() < 1e-12);
    for r in &records {
        assert_eq!(r.n_volumes, 2);
        assert!(r.ssim <= 1.0);
        assert!(r.psnr_db > 0.0);
    }

    // per-volume scores re-average to the reported means
    let per = std::fs::read_to_string(out.join("per_volume.csv")).unwrap();
    for r in &records {
        let (mut ps, mut ss, mut n) = (0.0f64, 0.0f64, 0);
        for line in per.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols[0] == r.method {
                ps += cols[2].parse::<f64>().unwrap();
                ss += cols[3].parse::<f64>().unwrap();
                n += 1;
            }
        }
        assert_eq!(n, r.n_volumes);
        if r.psnr_db.is_finite() {
            assert!((ps / n as f64 - r.psnr_db).abs() < 1e-9);
        }
        assert!((ss / n as f64 - r.ssim).abs() < 1e-9);
    }

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(METRICS_CSV_HEADER));
    assert_eq!(metrics.trim().lines().count(), 5);
    assert!(out.join("reference_scores.csv").exists());
    assert!(out.join("cases").join("vol000_tricubic.png").exists());
    assert!(out.join("cases").join("vol001_vts.png").exists());
}

#[test]
fn run_eval_single_method_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = test_manifest(dir.path(), 1);
    let cfg = EvalConfig {
        methods: vec!["tricubic".into()],
        montages: false,
        ..EvalConfig::default()
    };
    let records = run_eval(&manifest, &cfg, &dir.path().join("r")).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].method, "tricubic");
}

#[test]
fn run_eval_rejects_missing_checkpoint_and_unknown_method() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = test_manifest(dir.path(), 1);
    let cfg = EvalConfig {
        methods: vec!["vts".into()],
        ckpt_dir: Some(dir.path().to_path_buf()),
        montages: false,
        ..EvalConfig::default()
    };
    let err = run_eval(&manifest, &cfg, &dir.path().join("r")).unwrap_err();
    assert!(err.to_string().contains("vts.ckpt"));

    let cfg = EvalConfig {
        methods: vec!["bogus".into()],
        montages: false,
        ..EvalConfig::default()
    };
    assert!(run_eval(&manifest, &cfg, &dir.path().join("r2")).is_err());
}
