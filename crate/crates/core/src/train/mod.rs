//! Adversarial training loop: alternating discriminator/generator Adam
//! updates on randomly degraded phantom or CT patches, CSV loss
//! logging, periodic checkpoints, and bit-exact interrupt/resume.

pub mod adam;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{
    make_condition, make_patch_pair, sample_params, stream_rng, AugmentConfig, CONDITION_LAYOUT,
};
use crate::error::{Result, VtsError};
use crate::manifest::{Manifest, Split};
use crate::nets::{
    apply_bn_updates, to_ncdhw, Checkpoint, DiscriminatorSpec, GenModel, GeneratorSpec,
    Pix2PixGeneratorSpec, SrcnnSpec,
};
use crate::nn::params::{Bindings, ParamStore};
use crate::nn::{Graph, NodeId};
use crate::phantom::BodyPart;
use crate::volume::{normalize_hu, ValueDomain, Volume};

pub use adam::Adam;

/// Probability clamp used by the scalar loss helpers (the graph ops
/// apply the same constant internally).
pub const PROB_EPS: f64 = crate::nn::graph::PROB_EPS;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// "vts" | "vts-nocond" | "vts-nohf" | "pix2pix" | "srcnn"
    pub model: String,
    pub base_channels: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_l1: f64,
    pub epochs: usize,
    pub patch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Degrader augmentation: max additive noise stdev.
    pub noise_max: f64,
    /// Restrict the slice-decimation factor, or sample from {4, 8}.
    pub fixed_factor: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: "vts".into(),
            base_channels: 64,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_l1: 100.0,
            epochs: 100,
            patch: 160,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 100,
            noise_max: 0.02,
            fixed_factor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(VtsError::InvalidInput("lr must be positive".into()));
        }
        if self.lambda_l1 < 0.0 {
            return Err(VtsError::InvalidInput("lambda_l1 must be >= 0".into()));
        }
        if self.patch % 16 != 0 || self.patch == 0 {
            return Err(VtsError::InvalidInput(format!(
                "patch {} must be a positive multiple of 16",
                self.patch
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(VtsError::InvalidInput(
                "batch_size and epochs must be positive".into(),
            ));
        }
        match self.model.as_str() {
            "vts" | "vts-nocond" | "vts-nohf" | "pix2pix" | "srcnn" => Ok(()),
            other => Err(VtsError::InvalidInput(format!(
                "unknown model kind {other:?}"
            ))),
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            noise_max: self.noise_max,
            fixed_factor: self.fixed_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_g_l1: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

impl LossReport {
    pub fn check_finite(&self) -> Result<()> {
        let vals = [
            self.loss_d,
            self.loss_g_adv,
            self.loss_g_l1,
            self.d_real_mean,
            self.d_fake_mean,
        ];
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(VtsError::Numeric(format!(
                "non-finite loss at step {}: {self:?}",
                self.step
            )))
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.loss_d,
            self.loss_g_adv,
            self.loss_g_l1,
            self.d_real_mean,
            self.d_fake_mean
        )
    }
}

pub const LOSS_CSV_HEADER: &str = "step,loss_d,loss_g_adv,loss_g_l1,d_real_mean,d_fake_mean";

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// −[log p_real + log(1 − p_fake)], the negated conditional-GAN
/// discriminator objective.
pub fn loss_discriminator(p_real: f64, p_fake: f64) -> Result<f64> {
    if !p_real.is_finite() || !p_fake.is_finite() {
        return Err(VtsError::Numeric(
            "non-finite discriminator probability".into(),
        ));
    }
    Ok(-(clamp_prob(p_real).ln() + (1.0 - clamp_prob(p_fake)).ln()))
}

/// −log p_fake + λ · mean|ŷ − y| (non-saturating adversarial term).
pub fn loss_generator(
    p_fake: f64,
    y_hat: &ArrayD<f32>,
    y: &ArrayD<f32>,
    lambda_l1: f64,
) -> Result<f64> {
    if !p_fake.is_finite() {
        return Err(VtsError::Numeric("non-finite generator probability".into()));
    }
    if y_hat.shape() != y.shape() {
        return Err(VtsError::ShapeMismatch(format!(
            "loss_generator: {:?} vs {:?}",
            y_hat.shape(),
            y.shape()
        )));
    }
    let l1 = y_hat
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a - b).abs() as f64)
        .sum::<f64>()
        / y.len() as f64;
    Ok(-clamp_prob(p_fake).ln() + lambda_l1 * l1)
}

/// One training example: degraded thick patch, matching thin patch,
/// and the condition vector describing the degradation.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub thick: ArrayD<f32>,
    pub thin: ArrayD<f32>,
    pub w: [f32; 8],
}

/// Draw one batch for `step`. Deterministic given (seed, step) alone,
/// independent of any earlier sampling, which makes resume exact.
pub fn sample_batch(
    volumes: &[(Volume, BodyPart)],
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<TrainSample>> {
    if volumes.is_empty() {
        return Err(VtsError::Data("empty training set".into()));
    }
    let aug = cfg.augment();
    let mut rng = stream_rng(cfg.seed, 0, step);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = rand::Rng::random_range(&mut rng, 0..volumes.len());
        let (vol, part) = &volumes[idx];
        let params = sample_params(&mut rng, &aug);
        let (thin, thick) = make_patch_pair(vol, &params, cfg.patch, &mut rng)?;
        let w = make_condition(&params, *part).encode();
        batch.push(TrainSample {
            thick: to_ncdhw(&thick.data),
            thin: to_ncdhw(&thin.data),
            w,
        });
    }
    Ok(batch)
}

/// Model family, parameter store and optimizer state for one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: GenModel,
    pub disc: Option<DiscriminatorSpec>,
    /// Ablation: zero the condition channels at the discriminator input.
    pub zero_condition: bool,
    pub store: ParamStore,
    pub step: u64,
    adam_g: Adam,
    adam_d: Adam,
}

/// Deepest stride-2 conv stack a cubic `patch` supports (capped at the
/// default depth of 6).
pub fn disc_levels_for(patch: usize) -> usize {
    let mut n = patch;
    let mut levels = 0;
    while n >= 2 && levels < 6 {
        n = (n - 2) / 2 + 1;
        levels += 1;
    }
    levels
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d_levels = disc_levels_for(cfg.patch);
        let (gen, disc, zero_condition) = match cfg.model.as_str() {
            "vts" | "vts-nocond" | "vts-nohf" => {
                let gen = GenModel::Vts(GeneratorSpec {
                    base_channels: cfg.base_channels,
                    residual: cfg.model != "vts-nohf",
                    ..GeneratorSpec::default()
                });
                let disc = DiscriminatorSpec {
                    base_channels: cfg.base_channels,
                    levels: d_levels,
                    ..DiscriminatorSpec::default()
                };
                (gen, Some(disc), cfg.model == "vts-nocond")
            }
            "pix2pix" => {
                let gen = GenModel::Pix2Pix(Pix2PixGeneratorSpec {
                    base_channels: cfg.base_channels,
                    levels: (cfg.patch.trailing_zeros() as usize).min(6),
                    ..Pix2PixGeneratorSpec::default()
                });
                let disc = DiscriminatorSpec {
                    base_channels: cfg.base_channels,
                    levels: d_levels,
                    input_channels: 2,
                    ..DiscriminatorSpec::default()
                };
                (gen, Some(disc), false)
            }
            "srcnn" => {
                let c1 = cfg.base_channels.max(2);
                let gen = GenModel::Srcnn(SrcnnSpec {
                    c1,
                    c2: (c1 / 2).max(1),
                });
                (gen, None, false)
            }
            _ => unreachable!("validated above"),
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        gen.init_params(&mut store, &mut rng);
        if let Some(d) = &disc {
            d.validate()?;
            d.init_params(&mut store, &mut rng);
        }
        let adam_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
        let adam_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
        Ok(Trainer {
            cfg,
            gen,
            disc,
            zero_condition,
            store,
            step: 0,
            adam_g,
            adam_d,
        })
    }

    /// Resume from a checkpoint written by `save_checkpoint`.
    pub fn resume(cfg: TrainConfig, path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != cfg.model {
            return Err(VtsError::Data(format!(
                "checkpoint model {:?} does not match config model {:?}",
                ckpt.kind, cfg.model
            )));
        }
        let mut trainer = Trainer::new(cfg)?;
        // split the stored tensors into model params and optimizer state
        let mut params = ParamStore::new();
        for (name, p) in ckpt.params.iter() {
            if !name.starts_with("opt_g.") && !name.starts_with("opt_d.") {
                params.insert(name, p.value.clone(), p.trainable);
            }
        }
        if params.len() != trainer.store.len() {
            return Err(VtsError::Data(format!(
                "checkpoint has {} model tensors, expected {}",
                params.len(),
                trainer.store.len()
            )));
        }
        trainer.store = params;
        trainer.step = ckpt.step;
        trainer.adam_g.import_state(&ckpt.params, "opt_g", ckpt.step);
        trainer.adam_d.import_state(&ckpt.params, "opt_d", ckpt.step);
        Ok(trainer)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut params = self.store.clone();
        self.adam_g.export_state(&mut params, "opt_g");
        self.adam_d.export_state(&mut params, "opt_d");
        let ckpt = Checkpoint {
            kind: self.cfg.model.clone(),
            step: self.step,
            condition_layout: CONDITION_LAYOUT.into(),
            gen_spec: match &self.gen {
                GenModel::Vts(s) => Some(s.clone()),
                _ => None,
            },
            disc_spec: self.disc.clone(),
            p2p_spec: match &self.gen {
                GenModel::Pix2Pix(s) => Some(s.clone()),
                _ => None,
            },
            srcnn_spec: match &self.gen {
                GenModel::Srcnn(s) => Some(s.clone()),
                _ => None,
            },
            params,
        };
        ckpt.save(path)
    }

    /// Collect per-parameter gradients from one backward sweep into a
    /// running sum (multiple bindings of the same tensor accumulate).
    fn collect_grads(
        binds: &Bindings,
        grads: &[Option<ArrayD<f32>>],
        acc: &mut IndexMap<String, ArrayD<f32>>,
    ) {
        for (name, node) in binds.iter() {
            if let Some(g) = &grads[node.0] {
                match acc.get_mut(name) {
                    Some(sum) => *sum = &*sum + g,
                    None => {
                        acc.insert(name.to_string(), g.clone());
                    }
                }
            }
        }
    }

    fn scale_grads(acc: &mut IndexMap<String, ArrayD<f32>>, k: f32) {
        for (_, g) in acc.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }

    /// Generator output for one sample with batch statistics, detached
    /// from any tape (used as the fake input of the D update).
    fn fake_detached(&self, s: &TrainSample) -> ArrayD<f32> {
        let mut g = Graph::<f32>::new();
        let mut binds = Bindings::new();
        let x = g.constant(s.thick.clone());
        let mut upd = Vec::new();
        let y = self
            .gen
            .forward_graph(&mut g, &self.store, &mut binds, x, false, true, &mut upd);
        g.value(y).clone()
    }

    /// Build the discriminator input inside the graph from a thick
    /// constant and a thin node (real constant or live generator head).
    fn disc_input(
        &self,
        g: &mut Graph<f32>,
        disc: &DiscriminatorSpec,
        thick: NodeId,
        thin: NodeId,
        w: &[f32; 8],
    ) -> NodeId {
        let mut x = g.concat_ch(thick, thin);
        if disc.input_channels == 10 {
            let sh = g.shape(thick).to_vec();
            let wv = if self.zero_condition { [0.0f32; 8] } else { *w };
            let cond = crate::nets::broadcast_condition(&wv, (sh[2], sh[3], sh[4]))
                .into_shape_with_order(ndarray::IxDyn(&[1, 8, sh[2], sh[3], sh[4]]))
                .unwrap();
            let c = g.constant(cond);
            x = g.concat_ch(x, c);
        }
        x
    }

    /// Discriminator half-step: one Adam update on the real pair vs the
    /// detached fake pair. Returns (loss_d, d_real_mean, d_fake_mean).
    pub fn step_discriminator(&mut self, batch: &[TrainSample]) -> Result<(f64, f64, f64)> {
        let disc = self
            .disc
            .clone()
            .expect("step_discriminator requires an adversarial model");
        let n = batch.len() as f64;
        let mut d_grads: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        let mut d_updates = Vec::new();
        let (mut loss_sum, mut real_sum, mut fake_sum) = (0.0, 0.0, 0.0);
        for s in batch {
            let fake = self.fake_detached(s);
            let mut g = Graph::<f32>::new();
            let mut binds = Bindings::new();
            let thick = g.constant(s.thick.clone());
            let real = g.constant(s.thin.clone());
            let fake_n = g.constant(fake);
            let x_real = self.disc_input(&mut g, &disc, thick, real, &s.w);
            let x_fake = self.disc_input(&mut g, &disc, thick, fake_n, &s.w);
            let p_real = disc
                .forward_graph(&mut g, &self.store, &mut binds, x_real, true, true, &mut d_updates);
            let p_fake = disc
                .forward_graph(&mut g, &self.store, &mut binds, x_fake, true, true, &mut d_updates);
            let l_real = g.neg_log_mean(p_real);
            let l_fake = g.neg_log1m_mean(p_fake);
            let loss = g.add(l_real, l_fake);
            let grads = g.backward(loss);
            Self::collect_grads(&binds, &grads, &mut d_grads);
            loss_sum += g.value(loss)[[0]] as f64 / n;
            real_sum += g.value(p_real)[[0, 0]] as f64 / n;
            fake_sum += g.value(p_fake)[[0, 0]] as f64 / n;
        }
        Self::scale_grads(&mut d_grads, 1.0 / n as f32);
        self.adam_d.step(&mut self.store, &d_grads);
        apply_bn_updates(&mut self.store, &d_updates);
        Ok((loss_sum, real_sum, fake_sum))
    }

    /// Generator half-step: one Adam update on the adversarial + λ·L1
    /// objective. Returns (loss_g_adv, loss_g_l1).
    pub fn step_generator(&mut self, batch: &[TrainSample]) -> Result<(f64, f64)> {
        let disc = self
            .disc
            .clone()
            .expect("step_generator requires an adversarial model");
        let n = batch.len() as f64;
        let mut g_grads: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        let mut g_updates = Vec::new();
        let (mut adv_sum, mut l1_sum) = (0.0, 0.0);
        for s in batch {
            let mut g = Graph::<f32>::new();
            let mut binds = Bindings::new();
            let thick = g.constant(s.thick.clone());
            let target = g.constant(s.thin.clone());
            let mut discard = Vec::new();
            let y_hat = self
                .gen
                .forward_graph(&mut g, &self.store, &mut binds, thick, true, true, &mut g_updates);
            let x_fake = self.disc_input(&mut g, &disc, thick, y_hat, &s.w);
            let p_fake = disc.forward_graph(
                &mut g, &self.store, &mut binds, x_fake, false, true, &mut discard,
            );
            let adv = g.neg_log_mean(p_fake);
            let l1 = g.l1_mean(y_hat, target);
            let loss = g.add_scaled(adv, l1, self.cfg.lambda_l1);
            let grads = g.backward(loss);
            Self::collect_grads(&binds, &grads, &mut g_grads);
            adv_sum += g.value(adv)[[0]] as f64 / n;
            l1_sum += g.value(l1)[[0]] as f64 / n;
        }
        Self::scale_grads(&mut g_grads, 1.0 / n as f32);
        self.adam_g.step(&mut self.store, &g_grads);
        apply_bn_updates(&mut self.store, &g_updates);
        Ok((adv_sum, l1_sum))
    }

    /// Plain-MSE regression step for the SRCNN baseline.
    fn step_mse(&mut self, batch: &[TrainSample]) -> Result<f64> {
        let n = batch.len() as f64;
        let mut g_grads: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        let mut discard = Vec::new();
        let mut mse_sum = 0.0;
        for s in batch {
            let mut g = Graph::<f32>::new();
            let mut binds = Bindings::new();
            let thick = g.constant(s.thick.clone());
            let target = g.constant(s.thin.clone());
            let y_hat = self
                .gen
                .forward_graph(&mut g, &self.store, &mut binds, thick, true, false, &mut discard);
            let loss = g.mse_mean(y_hat, target);
            let grads = g.backward(loss);
            Self::collect_grads(&binds, &grads, &mut g_grads);
            mse_sum += g.value(loss)[[0]] as f64 / n;
        }
        Self::scale_grads(&mut g_grads, 1.0 / n as f32);
        self.adam_g.step(&mut self.store, &g_grads);
        Ok(mse_sum)
    }

    /// One optimization step on `batch`: a discriminator update (real
    /// pair vs detached fake pair) followed by a generator update.
    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<LossReport> {
        assert!(!batch.is_empty());
        self.step += 1;
        let mut report = LossReport {
            step: self.step,
            loss_d: 0.0,
            loss_g_adv: 0.0,
            loss_g_l1: 0.0,
            d_real_mean: 0.5,
            d_fake_mean: 0.5,
        };
        if self.disc.is_some() {
            let (loss_d, real, fake) = self.step_discriminator(batch)?;
            report.loss_d = loss_d;
            report.d_real_mean = real;
            report.d_fake_mean = fake;
            let (adv, l1) = self.step_generator(batch)?;
            report.loss_g_adv = adv;
            report.loss_g_l1 = l1;
        } else {
            report.loss_g_l1 = self.step_mse(batch)?;
        }
        report.check_finite()?;
        Ok(report)
    }
}

/// Load the training-split volumes of a manifest as normalized 1 mm
/// isotropic data.
pub fn load_split_volumes(manifest: &Manifest, split: Split) -> Result<Vec<(Volume, BodyPart)>> {
    let mut out = Vec::new();
    for e in manifest.split(split) {
        let vol = crate::io::load_vvol(&e.path)?;
        let vol = match vol.domain {
            ValueDomain::Hu => normalize_hu(&vol)?,
            ValueDomain::Normalized => vol,
        };
        if !vol.is_isotropic(1.0, 1e-6) {
            return Err(VtsError::Data(format!(
                "{}: training volumes must be 1 mm isotropic, got spacing {:?}",
                e.path.display(),
                vol.spacing
            )));
        }
        out.push((vol, e.body_part));
    }
    Ok(out)
}

/// Full training run: `epochs` passes of one step per training volume,
/// loss CSV, periodic checkpoints, resolved-config provenance. Returns
/// the path of the final checkpoint.
pub fn train_loop(
    manifest: &Manifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let volumes = load_split_volumes(manifest, Split::Train)?;
    if volumes.is_empty() {
        return Err(VtsError::Data("manifest has no train-split entries".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| VtsError::io(out_dir, e))?;

    let mut trainer = match resume_from {
        Some(p) => Trainer::resume(cfg.clone(), p)?,
        None => Trainer::new(cfg.clone())?,
    };

    let resolved = serde_json::json!({
        "config": cfg,
        "seed": cfg.seed,
        "tool_version": crate::VERSION,
        "n_train_volumes": volumes.len(),
    });
    let cfg_path = out_dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&resolved)? + "\n")
        .map_err(|e| VtsError::io(&cfg_path, e))?;

    let csv_path = out_dir.join("losses.csv");
    let mut csv = if resume_from.is_some() && csv_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&csv_path)
            .map_err(|e| VtsError::io(&csv_path, e))?
    } else {
        let mut f = std::fs::File::create(&csv_path).map_err(|e| VtsError::io(&csv_path, e))?;
        writeln!(f, "{LOSS_CSV_HEADER}").map_err(|e| VtsError::io(&csv_path, e))?;
        f
    };

    let total_steps = (cfg.epochs * volumes.len()) as u64;
    let final_path = out_dir.join("final.ckpt");
    while trainer.step < total_steps {
        let batch = sample_batch(&volumes, cfg, trainer.step + 1)?;
        let report = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                // diagnostic state dump for post-mortem
                let _ = trainer.save_checkpoint(&out_dir.join("diagnostic.ckpt"));
                return Err(e);
            }
        };
        writeln!(csv, "{}", report.csv_line()).map_err(|e| VtsError::io(&csv_path, e))?;
        if trainer.step % cfg.checkpoint_every as u64 == 0 || trainer.step == total_steps {
            let p = out_dir.join(format!("ckpt_{:06}.ckpt", trainer.step));
            trainer.save_checkpoint(&p)?;
        }
    }
    trainer.save_checkpoint(&final_path)?;
    Ok(final_path)
}

#[cfg(test)]
mod tests;
