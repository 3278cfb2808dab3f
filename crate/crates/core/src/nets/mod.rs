//! Network definitions: the thin-slice generator (residual 3D U-Net),
//! the conditional discriminator with self-attention, and the baseline
//! nets (SRCNN-3D, encoder-decoder pix2pix). All are built from the
//! autodiff primitives in `nn` and share one parameter-naming scheme.

pub mod checkpoint;
pub mod discriminator;
pub mod generator;
pub mod pix2pix;
pub mod srcnn;

use ndarray::{Array4, ArrayD, IxDyn, s};
use rand::Rng;

use crate::nn::params::{Bindings, ParamStore};
use crate::nn::{Element, Graph, NodeId};

pub use checkpoint::Checkpoint;
pub use discriminator::DiscriminatorSpec;
pub use generator::GeneratorSpec;
pub use pix2pix::Pix2PixGeneratorSpec;
pub use srcnn::SrcnnSpec;

/// Any of the three generator families behind one dispatch point, so
/// the training loop and the evaluation harness stay model-agnostic.
#[derive(Debug, Clone, PartialEq)]
pub enum GenModel {
    Vts(GeneratorSpec),
    Pix2Pix(Pix2PixGeneratorSpec),
    Srcnn(SrcnnSpec),
}

impl GenModel {
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        match self {
            GenModel::Vts(s) => s.init_params(store, rng),
            GenModel::Pix2Pix(s) => s.init_params(store, rng),
            GenModel::Srcnn(s) => s.init_params(store, rng),
        }
    }

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
        match self {
            GenModel::Vts(s) => {
                s.forward_graph(g, store, binds, x, trainable, train_stats, updates)
            }
            GenModel::Pix2Pix(s) => {
                s.forward_graph(g, store, binds, x, trainable, train_stats, updates)
            }
            GenModel::Srcnn(s) => {
                s.forward_graph(g, store, binds, x, trainable, train_stats, updates)
            }
        }
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &ArrayD<f32>) -> ArrayD<f32> {
        match self {
            GenModel::Vts(s) => s.forward_eval(store, x),
            GenModel::Pix2Pix(s) => s.forward_eval(store, x),
            GenModel::Srcnn(s) => s.forward_eval(store, x),
        }
    }

    pub fn check_input_dims(&self, dims: (usize, usize, usize)) -> crate::error::Result<()> {
        match self {
            GenModel::Vts(s) => s.check_input_dims(dims),
            GenModel::Pix2Pix(s) => s.check_input_dims(dims),
            GenModel::Srcnn(_) => Ok(()),
        }
    }

    /// Receptive-field radius of one output voxel.
    pub fn receptive_field(&self) -> usize {
        match self {
            GenModel::Vts(s) => s.receptive_field(),
            GenModel::Pix2Pix(s) => s.receptive_field(),
            GenModel::Srcnn(s) => s.receptive_field(),
        }
    }
}

/// Std-dev for conv weight init (DCGAN convention).
pub const INIT_STD: f64 = 0.02;
/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum.
pub const BN_MOMENTUM: f32 = 0.1;

/// One entry of the architecture introspection listing.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub norm: bool,
    pub activation: String,
}

impl LayerInfo {
    fn conv(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
        activation: &str,
    ) -> Self {
        LayerInfo {
            name: name.to_string(),
            kind: "conv3d".to_string(),
            in_ch,
            out_ch,
            kernel,
            stride,
            norm,
            activation: activation.to_string(),
        }
    }

    fn marker(name: &str, kind: &str) -> Self {
        LayerInfo {
            name: name.to_string(),
            kind: kind.to_string(),
            in_ch: 0,
            out_ch: 0,
            kernel: 0,
            stride: 0,
            norm: false,
            activation: "none".to_string(),
        }
    }
}

/// Geometry of one layer for receptive-field composition. Stride is a
/// rational (num/den) so trilinear ×2 upsampling (kernel 2, stride 1/2)
/// composes with the strided convolutions.
#[derive(Debug, Clone, Copy)]
pub struct RfLayer {
    pub kernel: f64,
    pub stride_num: f64,
    pub stride_den: f64,
}

impl RfLayer {
    pub fn conv(kernel: usize, stride: usize) -> Self {
        RfLayer {
            kernel: kernel as f64,
            stride_num: stride as f64,
            stride_den: 1.0,
        }
    }

    pub fn upsample2x() -> Self {
        RfLayer {
            kernel: 2.0,
            stride_num: 1.0,
            stride_den: 2.0,
        }
    }
}

/// Receptive-field radius (in input voxels around one output voxel) of
/// a layer sequence, by the standard jump/extent composition.
pub fn receptive_field_radius(layers: &[RfLayer]) -> usize {
    let mut jump = 1.0f64;
    let mut rf = 1.0f64;
    for l in layers {
        rf += (l.kernel - 1.0) * jump;
        jump = jump * l.stride_num / l.stride_den;
    }
    ((rf - 1.0) / 2.0).ceil() as usize
}

/// Fill 8 constant channels of shape `dims` with the condition vector.
pub fn broadcast_condition(w: &[f32; 8], dims: (usize, usize, usize)) -> Array4<f32> {
    let (d, h, wd) = dims;
    let mut out = Array4::<f32>::zeros((8, d, h, wd));
    for (c, &v) in w.iter().enumerate() {
        out.slice_mut(s![c, .., .., ..]).fill(v);
    }
    out
}

/// Batch-statistics pulled out of a training forward pass, applied to
/// the running buffers after the step.
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let rm = &mut store.get_mut(&format!("{}.rm", u.name)).value;
        for (r, &m) in rm.iter_mut().zip(u.mean.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = &mut store.get_mut(&format!("{}.rv", u.name)).value;
        for (r, &v) in rv.iter_mut().zip(u.var.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Register the parameters of one conv block under `name`.
pub fn init_conv_block(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    norm: bool,
    zero_weights: bool,
    rng: &mut impl Rng,
) {
    let wshape = [out_ch, in_ch, kernel, kernel, kernel];
    if zero_weights {
        store.insert_zeros(&format!("{name}.w"), &wshape, true);
    } else {
        store.insert_normal(&format!("{name}.w"), &wshape, INIT_STD, rng);
    }
    store.insert_zeros(&format!("{name}.b"), &[out_ch], true);
    if norm {
        store.insert_full(&format!("{name}.g"), &[out_ch], 1.0, true);
        store.insert_zeros(&format!("{name}.beta"), &[out_ch], true);
        store.insert_zeros(&format!("{name}.rm"), &[out_ch], false);
        store.insert_full(&format!("{name}.rv"), &[out_ch], 1.0, false);
    }
}

/// Conv → optional batch norm → optional LeakyReLU, on the graph.
/// In train mode the normalization uses batch statistics and records a
/// `BnUpdate`; otherwise the stored running statistics enter as
/// constants (required for the tiling-consistency property).
#[allow(clippy::too_many_arguments)]
pub fn conv_block_graph<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore,
    binds: &mut Bindings,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
    norm: bool,
    leaky: Option<f64>,
    trainable: bool,
    train_stats: bool,
    updates: &mut Vec<BnUpdate>,
) -> NodeId {
    let w = binds.bind(g, store, &format!("{name}.w"), trainable);
    let b = binds.bind(g, store, &format!("{name}.b"), trainable);
    let mut y = g.conv3d(x, w, Some(b), stride, pad);
    if norm {
        let gamma = binds.bind(g, store, &format!("{name}.g"), trainable);
        let beta = binds.bind(g, store, &format!("{name}.beta"), trainable);
        y = if train_stats {
            let m = g.channel_mean(y);
            let xc = g.sub_channel(y, m);
            let sq = g.mul(xc, xc);
            let var = g.channel_mean(sq);
            updates.push(BnUpdate {
                name: name.to_string(),
                mean: g.value(m).iter().map(|&v| Element::to_f64(v) as f32).collect(),
                var: g.value(var).iter().map(|&v| Element::to_f64(v) as f32).collect(),
            });
            let rs = g.rsqrt_eps(var, BN_EPS);
            let xn = g.mul_channel(xc, rs);
            let scaled = g.mul_channel(xn, gamma);
            g.add_channel(scaled, beta)
        } else {
            let rm = store.get(&format!("{name}.rm")).value.mapv(E::from_f32);
            let rv = store.get(&format!("{name}.rv")).value.mapv(E::from_f32);
            let m = g.constant(rm);
            let v = g.constant(rv);
            let xc = g.sub_channel(y, m);
            let rs = g.rsqrt_eps(v, BN_EPS);
            let xn = g.mul_channel(xc, rs);
            let scaled = g.mul_channel(xn, gamma);
            g.add_channel(scaled, beta)
        };
    }
    if let Some(slope) = leaky {
        y = g.leaky_relu(y, slope);
    }
    y
}

/// Plain-array (no graph) version of `conv_block_graph` in inference
/// mode; keeps only the output alive, for large tiled windows.
pub fn conv_block_eval(
    store: &ParamStore,
    name: &str,
    x: &ArrayD<f32>,
    stride: usize,
    pad: usize,
    norm: bool,
    leaky: Option<f64>,
) -> ArrayD<f32> {
    let w = &store.get(&format!("{name}.w")).value;
    let b = &store.get(&format!("{name}.b")).value;
    let mut y = crate::nn::conv::conv3d_forward(x, w, Some(b), stride, pad);
    if norm {
        let gamma = &store.get(&format!("{name}.g")).value;
        let beta = &store.get(&format!("{name}.beta")).value;
        let rm = &store.get(&format!("{name}.rm")).value;
        let rv = &store.get(&format!("{name}.rv")).value;
        let ch = y.shape()[1];
        for c in 0..ch {
            let scale = gamma[[c]] / (rv[[c]] + BN_EPS as f32).sqrt();
            let shift = beta[[c]] - rm[[c]] * scale;
            let mut lane = y.slice_mut(s![.., c, .., .., ..]);
            lane.mapv_inplace(|v| v * scale + shift);
        }
    }
    if let Some(slope) = leaky {
        let k = slope as f32;
        y.mapv_inplace(|v| if v > 0.0 { v } else { v * k });
    }
    y
}

/// Trilinear ×2 upsampling of the spatial axes, plain arrays.
pub fn upsample2x_eval(x: &ArrayD<f32>) -> ArrayD<f32> {
    let mut g = Graph::<f32>::new();
    let n = g.constant(x.clone());
    let u = g.upsample2x(n);
    g.value(u).clone()
}

/// Concatenate plain arrays along the channel axis.
pub fn concat_ch_eval(a: &ArrayD<f32>, b: &ArrayD<f32>) -> ArrayD<f32> {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()])
        .expect("channel concat shape mismatch")
        .into_dyn()
}

/// Wrap a (D,H,W) volume as a [1,1,D,H,W] tensor.
pub fn to_ncdhw(v: &ndarray::Array3<f32>) -> ArrayD<f32> {
    let (d, h, w) = v.dim();
    v.to_owned()
        .into_shape_with_order(IxDyn(&[1, 1, d, h, w]))
        .unwrap()
}

/// Unwrap a [1,1,D,H,W] tensor back to (D,H,W).
pub fn from_ncdhw(t: &ArrayD<f32>) -> ndarray::Array3<f32> {
    let sh = t.shape();
    assert_eq!(sh[0], 1);
    assert_eq!(sh[1], 1);
    t.to_owned()
        .into_shape_with_order((sh[2], sh[3], sh[4]))
        .unwrap()
}
