//! Conditional discriminator: 10-channel input (thick + thin candidate
//! + 8 broadcast condition channels), strided 4³ conv stack with a
//! self-attention block after the fourth layer, global average pooling
//! and a sigmoid probability head.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtsError};
use crate::nn::params::{Bindings, ParamStore};
use crate::nn::{Element, Graph, NodeId};

use super::{broadcast_condition, conv_block_graph, init_conv_block, BnUpdate, LayerInfo};

pub const CONDITION_CHANNELS: usize = 8;
/// thick (1) + thin (1) + condition (8)
pub const INPUT_CHANNELS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    /// Number of stride-2 conv layers; 6 shrinks a 64³ patch to 1³.
    pub levels: usize,
    /// 1-based index of the conv layer whose output gets self-attention.
    pub attention_layer_index: usize,
    pub leaky_slope: f64,
    pub norm: bool,
    /// Thick+thin only (2 channels), for the unconditional baseline.
    pub input_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            base_channels: 64,
            levels: 6,
            attention_layer_index: 4,
            leaky_slope: 0.2,
            norm: true,
            input_channels: INPUT_CHANNELS,
        }
    }
}

impl DiscriminatorSpec {
    pub fn desk() -> Self {
        DiscriminatorSpec {
            base_channels: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.levels == 0 {
            return Err(VtsError::InvalidInput(
                "discriminator base_channels and levels must be positive".into(),
            ));
        }
        if self.input_channels != INPUT_CHANNELS && self.input_channels != 2 {
            return Err(VtsError::InvalidInput(
                "discriminator input_channels must be 10 (conditional) or 2".into(),
            ));
        }
        Ok(())
    }

    fn ch(&self, layer: usize) -> usize {
        // 1-based layer index; widths double and cap at 8·base
        (self.base_channels << (layer - 1).min(3)).min(super::generator::MAX_CHANNELS)
    }

    fn has_attention(&self) -> bool {
        self.attention_layer_index >= 1 && self.attention_layer_index <= self.levels
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in 1..=self.levels {
            let in_ch = if l == 1 {
                self.input_channels
            } else {
                self.ch(l - 1)
            };
            // no normalization on the first conv (raw-intensity layer)
            let norm = self.norm && l > 1 && l < self.levels;
            init_conv_block(store, &format!("d.conv{l}"), in_ch, self.ch(l), 4, norm, false, rng);
        }
        if self.has_attention() {
            let c = self.ch(self.attention_layer_index);
            let cr = (c / 8).max(1);
            init_conv_block(store, "d.attn.q", c, cr, 1, false, false, rng);
            init_conv_block(store, "d.attn.k", c, cr, 1, false, false, rng);
            init_conv_block(store, "d.attn.v", c, c, 1, false, false, rng);
            store.insert_zeros("d.attn.gamma", &[1], true);
        }
        let c_last = self.ch(self.levels);
        store.insert_normal("d.fc.w", &[1, c_last], super::INIT_STD, rng);
        store.insert_zeros("d.fc.b", &[1], true);
    }

    /// Self-attention block: out = x + γ · attend(x) with query/key
    /// channel reduction C/8 and softmax over flattened positions.
    fn attention_graph<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore,
        binds: &mut Bindings,
        x: NodeId,
        trainable: bool,
    ) -> NodeId {
        let sh = g.shape(x).to_vec();
        let (n, c, s) = (sh[0], sh[1], sh[2] * sh[3] * sh[4]);
        let cr = (c / 8).max(1);
        let qw = binds.bind(g, store, "d.attn.q.w", trainable);
        let qb = binds.bind(g, store, "d.attn.q.b", trainable);
        let kw = binds.bind(g, store, "d.attn.k.w", trainable);
        let kb = binds.bind(g, store, "d.attn.k.b", trainable);
        let vw = binds.bind(g, store, "d.attn.v.w", trainable);
        let vb = binds.bind(g, store, "d.attn.v.b", trainable);
        let q = g.conv3d(x, qw, Some(qb), 1, 0);
        let k = g.conv3d(x, kw, Some(kb), 1, 0);
        let v = g.conv3d(x, vw, Some(vb), 1, 0);
        let q = g.reshape(q, &[n, cr, s]);
        let k = g.reshape(k, &[n, cr, s]);
        let v = g.reshape(v, &[n, c, s]);
        let qt = g.transpose_last2(q);
        let energy = g.bmm(qt, k); // [n, s, s]; row i = query position i
        let attn = g.softmax_last(energy);
        let attn_t = g.transpose_last2(attn);
        let out = g.bmm(v, attn_t); // out[.,c,i] = Σ_j v[.,c,j]·attn[i,j]
        let out = g.reshape(out, &sh);
        let gamma = binds.bind(g, store, "d.attn.gamma", trainable);
        let gated = g.mul_scalar_node(out, gamma);
        g.add(x, gated)
    }

    /// Forward from an already concatenated [N,input_channels,D,H,W]
    /// node to a [N,1] probability node.
    #[allow(clippy::too_many_arguments)]
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
        assert_eq!(
            g.shape(x)[1],
            self.input_channels,
            "discriminator expects {} input channels",
            self.input_channels
        );
        let mut cur = x;
        for l in 1..=self.levels {
            let norm = self.norm && l > 1 && l < self.levels;
            cur = conv_block_graph(
                g,
                store,
                binds,
                &format!("d.conv{l}"),
                cur,
                2,
                1,
                norm,
                Some(self.leaky_slope),
                trainable,
                train_stats,
                updates,
            );
            if self.has_attention() && l == self.attention_layer_index {
                cur = self.attention_graph(g, store, binds, cur, trainable);
            }
        }
        let pooled = g.global_avg_pool(cur);
        let fw = binds.bind(g, store, "d.fc.w", trainable);
        let fb = binds.bind(g, store, "d.fc.b", trainable);
        let logit = g.linear(pooled, fw, fb);
        g.sigmoid(logit)
    }

    /// Stack thick, thin and (for 10-channel specs) the broadcast
    /// condition vector into the discriminator input tensor. The
    /// condition-free ablation passes `zero_condition = true`.
    pub fn assemble_input(
        &self,
        thick: &ArrayD<f32>,
        thin: &ArrayD<f32>,
        w: &[f32; 8],
        zero_condition: bool,
    ) -> Result<ArrayD<f32>> {
        if thick.shape() != thin.shape() {
            return Err(VtsError::ShapeMismatch(format!(
                "thick {:?} vs thin {:?}",
                thick.shape(),
                thin.shape()
            )));
        }
        let sh = thick.shape();
        assert_eq!(sh[1], 1, "thick/thin are single-channel");
        let mut x = super::concat_ch_eval(thick, thin);
        if self.input_channels == INPUT_CHANNELS {
            let wv = if zero_condition { [0.0f32; 8] } else { *w };
            let cond = broadcast_condition(&wv, (sh[2], sh[3], sh[4]));
            let cond = cond
                .into_shape_with_order(IxDyn(&[1, 8, sh[2], sh[3], sh[4]]))
                .unwrap();
            assert_eq!(sh[0], 1, "condition broadcast assumes batch 1");
            x = super::concat_ch_eval(&x, &cond);
        }
        Ok(x)
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let act = format!("leaky_relu({})", self.leaky_slope);
        for l in 1..=self.levels {
            let in_ch = if l == 1 {
                self.input_channels
            } else {
                self.ch(l - 1)
            };
            out.push(LayerInfo::conv(
                &format!("d.conv{l}"),
                in_ch,
                self.ch(l),
                4,
                2,
                self.norm && l > 1 && l < self.levels,
                &act,
            ));
            if self.has_attention() && l == self.attention_layer_index {
                out.push(LayerInfo::marker("d.attn", "self_attention"));
            }
        }
        out.push(LayerInfo::marker("d.pool", "global_avg_pool"));
        let mut fc = LayerInfo::marker("d.fc", "linear");
        fc.in_ch = self.ch(self.levels);
        fc.out_ch = 1;
        fc.activation = "sigmoid".to_string();
        out.push(fc);
        out
    }
}
