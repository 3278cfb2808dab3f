//! Residual 3D U-Net generator: strided 4³ conv encoder, trilinear
//! upsampling decoder with skip concatenation, and a zero-initialized
//! final layer so the net starts as the identity and learns only the
//! high-frequency correction on top of the spline-interpolated input.

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtsError};
use crate::nn::params::{Bindings, ParamStore};
use crate::nn::{Element, Graph, NodeId};

use super::{
    concat_ch_eval, conv_block_eval, conv_block_graph, init_conv_block, upsample2x_eval,
    BnUpdate, LayerInfo, RfLayer,
};

/// Widest layer; encoder channels are base·2^level capped here.
pub const MAX_CHANNELS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    pub levels: usize,
    pub leaky_slope: f64,
    /// Batch-statistics normalization per conv (off for gradient checks).
    pub norm: bool,
    /// Predict high-frequency residual added to the input. Turned off
    /// for the direct-prediction ablation.
    pub residual: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            base_channels: 64,
            levels: 4,
            leaky_slope: 0.2,
            norm: true,
            residual: true,
        }
    }
}

impl GeneratorSpec {
    /// Small configuration used by the desk-scale end-to-end runs.
    pub fn desk() -> Self {
        GeneratorSpec {
            base_channels: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.levels == 0 {
            return Err(VtsError::InvalidInput(
                "generator base_channels and levels must be positive".into(),
            ));
        }
        Ok(())
    }

    fn ch(&self, level: usize) -> usize {
        (self.base_channels << level).min(MAX_CHANNELS)
    }

    /// Spatial dims must be divisible by 2^levels (16 at the default
    /// depth) so the bottleneck grid is exact.
    pub fn check_input_dims(&self, dims: (usize, usize, usize)) -> Result<()> {
        let m = 1usize << self.levels;
        for d in [dims.0, dims.1, dims.2] {
            if d % m != 0 || d == 0 {
                return Err(VtsError::InvalidInput(format!(
                    "generator input dims {dims:?} must be divisible by {m} \
                     (2^levels with levels={})",
                    self.levels
                )));
            }
        }
        Ok(())
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in 0..self.levels {
            let in_ch = if l == 0 { 1 } else { self.ch(l - 1) };
            init_conv_block(
                store,
                &format!("g.enc{l}"),
                in_ch,
                self.ch(l),
                4,
                self.norm,
                false,
                rng,
            );
        }
        for l in (1..self.levels).rev() {
            // input: upsampled ch(l) + skip ch(l-1)
            init_conv_block(
                store,
                &format!("g.dec{l}"),
                self.ch(l) + self.ch(l - 1),
                self.ch(l - 1),
                3,
                self.norm,
                false,
                rng,
            );
        }
        // full-resolution head: upsampled ch(0) + the input itself
        init_conv_block(store, "g.out", self.ch(0) + 1, 1, 3, false, true, rng);
    }

    /// Graph forward on a [N,1,D,H,W] node. `train_stats` selects batch
    /// vs running normalization statistics; `trainable` controls which
    /// pass the parameters bind gradients in.
    pub fn forward_graph<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore,
        binds: &mut Bindings,
        x: NodeId,
        trainable: bool,
        train_stats: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> NodeId {
        let slope = Some(self.leaky_slope);
        let mut skips = Vec::with_capacity(self.levels);
        let mut cur = x;
        for l in 0..self.levels {
            cur = conv_block_graph(
                g,
                store,
                binds,
                &format!("g.enc{l}"),
                cur,
                2,
                1,
                self.norm,
                slope,
                trainable,
                train_stats,
                updates,
            );
            skips.push(cur);
        }
        for l in (1..self.levels).rev() {
            let up = g.upsample2x(cur);
            let cat = g.concat_ch(up, skips[l - 1]);
            cur = conv_block_graph(
                g,
                store,
                binds,
                &format!("g.dec{l}"),
                cat,
                1,
                1,
                self.norm,
                slope,
                trainable,
                train_stats,
                updates,
            );
        }
        let up = g.upsample2x(cur);
        let cat = g.concat_ch(up, x);
        let hf = conv_block_graph(
            g, store, binds, "g.out", cat, 1, 1, false, None, trainable, train_stats, updates,
        );
        let y = if self.residual { g.add(x, hf) } else { hf };
        g.clamp(y, -1.0, 1.0)
    }

    /// Inference forward on plain arrays (running statistics, no tape);
    /// memory stays bounded by a few activations even on large windows.
    pub fn forward_eval(&self, store: &ParamStore, x: &ArrayD<f32>) -> ArrayD<f32> {
        let sh = x.shape();
        self.check_input_dims((sh[2], sh[3], sh[4]))
            .expect("forward_eval caller must validate dims");
        let slope = Some(self.leaky_slope);
        let mut skips: Vec<ArrayD<f32>> = Vec::with_capacity(self.levels);
        let mut cur = x.clone();
        for l in 0..self.levels {
            cur = conv_block_eval(store, &format!("g.enc{l}"), &cur, 2, 1, self.norm, slope);
            skips.push(cur.clone());
        }
        for l in (1..self.levels).rev() {
            let up = upsample2x_eval(&cur);
            let cat = concat_ch_eval(&up, &skips[l - 1]);
            skips[l - 1] = ArrayD::zeros(ndarray::IxDyn(&[0])); // release skip
            cur = conv_block_eval(store, &format!("g.dec{l}"), &cat, 1, 1, self.norm, slope);
        }
        let up = upsample2x_eval(&cur);
        let cat = concat_ch_eval(&up, x);
        let mut y = conv_block_eval(store, "g.out", &cat, 1, 1, false, None);
        if self.residual {
            y = &y + x;
        }
        y.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        y
    }

    /// Layer sequence for receptive-field composition.
    pub fn rf_layers(&self) -> Vec<RfLayer> {
        let mut layers = Vec::new();
        for _ in 0..self.levels {
            layers.push(RfLayer::conv(4, 2));
        }
        for _ in 1..self.levels {
            layers.push(RfLayer::upsample2x());
            layers.push(RfLayer::conv(3, 1));
        }
        layers.push(RfLayer::upsample2x());
        layers.push(RfLayer::conv(3, 1));
        layers
    }

    pub fn receptive_field(&self) -> usize {
        super::receptive_field_radius(&self.rf_layers())
    }

    /// Architecture introspection for the invariant and ablation tests.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let act = format!("leaky_relu({})", self.leaky_slope);
        for l in 0..self.levels {
            let in_ch = if l == 0 { 1 } else { self.ch(l - 1) };
            out.push(LayerInfo::conv(
                &format!("g.enc{l}"),
                in_ch,
                self.ch(l),
                4,
                2,
                self.norm,
                &act,
            ));
        }
        for l in (1..self.levels).rev() {
            out.push(LayerInfo::marker(&format!("g.up{l}"), "upsample2x"));
            out.push(LayerInfo::conv(
                &format!("g.dec{l}"),
                self.ch(l) + self.ch(l - 1),
                self.ch(l - 1),
                3,
                1,
                self.norm,
                &act,
            ));
        }
        out.push(LayerInfo::marker("g.up0", "upsample2x"));
        out.push(LayerInfo::conv(
            "g.out",
            self.ch(0) + 1,
            1,
            3,
            1,
            false,
            "none",
        ));
        if self.residual {
            out.push(LayerInfo::marker("g.residual_add", "residual_add"));
        }
        out.push(LayerInfo::marker("g.clamp", "clamp[-1,1]"));
        out
    }
}
