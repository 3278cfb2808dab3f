//! Encoder-decoder pix2pix baseline generator: downsamples until the
//! feature map reaches one voxel, then decodes with trilinear
//! upsampling and skip connections. No condition vector and no
//! residual high-frequency prediction.

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtsError};
use crate::nn::params::{Bindings, ParamStore};
use crate::nn::{Element, Graph, NodeId};

use super::{
    concat_ch_eval, conv_block_eval, conv_block_graph, init_conv_block, upsample2x_eval,
    BnUpdate, LayerInfo,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pix2PixGeneratorSpec {
    pub base_channels: usize,
    /// Stride-2 encoder depth; 6 reduces a 64³ input to a 1³ bottleneck.
    pub levels: usize,
    pub leaky_slope: f64,
    pub norm: bool,
}

impl Default for Pix2PixGeneratorSpec {
    fn default() -> Self {
        Pix2PixGeneratorSpec {
            base_channels: 64,
            levels: 6,
            leaky_slope: 0.2,
            norm: true,
        }
    }
}

impl Pix2PixGeneratorSpec {
    pub fn desk() -> Self {
        Pix2PixGeneratorSpec {
            base_channels: 16,
            ..Default::default()
        }
    }

    fn ch(&self, level: usize) -> usize {
        (self.base_channels << level.min(3)).min(super::generator::MAX_CHANNELS)
    }

    /// Spatial size of the bottleneck for a cubic input.
    pub fn bottleneck_size(&self, dim: usize) -> usize {
        dim >> self.levels
    }

    pub fn check_input_dims(&self, dims: (usize, usize, usize)) -> Result<()> {
        let m = 1usize << self.levels;
        for d in [dims.0, dims.1, dims.2] {
            if d % m != 0 || d == 0 {
                return Err(VtsError::InvalidInput(format!(
                    "pix2pix input dims {dims:?} must be divisible by {m}",

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
                &format!("p.enc{l}"),
                in_ch,
                self.ch(l),
                4,
                self.norm,
                false,
                rng,
            );
        }
        for l in (1..self.levels).rev() {
            init_conv_block(
                store,
                &format!("p.dec{l}"),
                self.ch(l) + self.ch(l - 1),
                self.ch(l - 1),
                3,
                self.norm,
                false,
                rng,
            );
        }
        init_conv_block(store, "p.out", self.ch(0), 1, 3, false, false, rng);
    }

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
                &format!("p.enc{l}"),
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
                &format!("p.dec{l}"),
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
        let y = conv_block_graph(
            g, store, binds, "p.out", up, 1, 1, false, None, trainable, train_stats, updates,
        );
        g.clamp(y, -1.0, 1.0)
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &ArrayD<f32>) -> ArrayD<f32> {
        let sh = x.shape();
        self.check_input_dims((sh[2], sh[3], sh[4]))
            .expect("forward_eval caller must validate dims");
        let slope = Some(self.leaky_slope);
        let mut skips: Vec<ArrayD<f32>> = Vec::with_capacity(self.levels);
        let mut cur = x.clone();
        for l in 0..self.levels {
            cur = conv_block_eval(store, &format!("p.enc{l}"), &cur, 2, 1, self.norm, slope);
            skips.push(cur.clone());
        }
        for l in (1..self.levels).rev() {
            let up = upsample2x_eval(&cur);
            let cat = concat_ch_eval(&up, &skips[l - 1]);
            cur = conv_block_eval(store, &format!("p.dec{l}"), &cat, 1, 1, self.norm, slope);
        }
        let up = upsample2x_eval(&cur);
        let mut y = conv_block_eval(store, "p.out", &up, 1, 1, false, None);
        y.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        y
    }

    /// Layer sequence for receptive-field composition.
    pub fn rf_layers(&self) -> Vec<super::RfLayer> {
        let mut layers = Vec::new();
        for _ in 0..self.levels {
            layers.push(super::RfLayer::conv(4, 2));
        }
        for _ in 0..self.levels {
            layers.push(super::RfLayer::upsample2x());
            layers.push(super::RfLayer::conv(3, 1));
        }
        layers
    }

    pub fn receptive_field(&self) -> usize {
        super::receptive_field_radius(&self.rf_layers())
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let act = format!("leaky_relu({})", self.leaky_slope);
        for l in 0..self.levels {
            let in_ch = if l == 0 { 1 } else { self.ch(l - 1) };
            out.push(LayerInfo::conv(
                &format!("p.enc{l}"),
                in_ch,
                self.ch(l),
                4,
                2,
                self.norm,
                &act,
            ));
        }
        for l in (1..self.levels).rev() {
            out.push(LayerInfo::marker(&format!("p.up{l}"), "upsample2x"));
            out.push(LayerInfo::conv(
                &format!("p.dec{l}"),
                self.ch(l) + self.ch(l - 1),
                self.ch(l - 1),
                3,
                1,
                self.norm,
                &act,
            ));
        }
        out.push(LayerInfo::marker("p.up0", "upsample2x"));
        out.push(LayerInfo::conv("p.out", self.ch(0), 1, 3, 1, false, "none"));
        out.push(LayerInfo::marker("p.clamp", "clamp[-1,1]"));
        out
    }
}
