//! 3D SRCNN baseline: the classic 3-layer 9-1-5 super-resolution CNN
//! with every kernel expanded to 3D, trained with plain MSE.

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::params::{Bindings, ParamStore};
use crate::nn::{Element, Graph, NodeId};

use super::{conv_block_eval, conv_block_graph, init_conv_block, BnUpdate, LayerInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrcnnSpec {
    /// Feature-extraction width (layer 1).
    pub c1: usize,
    /// Mapping width (layer 2).
    pub c2: usize,
}

impl Default for SrcnnSpec {
    fn default() -> Self {
        SrcnnSpec { c1: 64, c2: 32 }
    }
}

impl SrcnnSpec {
    /// Narrow configuration for CPU-budget desk runs.
    pub fn desk() -> Self {
        SrcnnSpec { c1: 8, c2: 4 }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        init_conv_block(store, "s.conv1", 1, self.c1, 9, false, false, rng);
        init_conv_block(store, "s.conv2", self.c1, self.c2, 1, false, false, rng);
        init_conv_block(store, "s.conv3", self.c2, 1, 5, false, false, rng);
    }

    pub fn forward_graph<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore,
        binds: &mut Bindings,
        x: NodeId,
        trainable: bool,
        _train_stats: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> NodeId {
        // slope 0 = plain ReLU, per the original formulation
        let h = conv_block_graph(
            g, store, binds, "s.conv1", x, 1, 4, false, Some(0.0), trainable, false, updates,
        );
        let h = conv_block_graph(
            g, store, binds, "s.conv2", h, 1, 0, false, Some(0.0), trainable, false, updates,
        );
        conv_block_graph(
            g, store, binds, "s.conv3", h, 1, 2, false, None, trainable, false, updates,
        )
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &ArrayD<f32>) -> ArrayD<f32> {
        let h = conv_block_eval(store, "s.conv1", x, 1, 4, false, Some(0.0));
        let h = conv_block_eval(store, "s.conv2", &h, 1, 0, false, Some(0.0));
        conv_block_eval(store, "s.conv3", &h, 1, 2, false, None)
    }

    /// Receptive-field radius: three stride-1 convs, (9−1)/2 + 0 + (5−1)/2.
    pub fn receptive_field(&self) -> usize {
        super::receptive_field_radius(&[
            super::RfLayer::conv(9, 1),
            super::RfLayer::conv(1, 1),
            super::RfLayer::conv(5, 1),
        ])
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        vec![
            LayerInfo::conv("s.conv1", 1, self.c1, 9, 1, false, "relu"),
            LayerInfo::conv("s.conv2", self.c1, self.c2, 1, 1, false, "relu"),
            LayerInfo::conv("s.conv3", self.c2, 1, 5, 1, false, "none"),
        ]
    }
}
