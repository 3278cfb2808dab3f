//! Tape-style computation graph. Nodes are created in topological order;
//! backward walks the tape in reverse and accumulates gradients for
//! every node flagged as requiring them.

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, Axis, IxDyn, s};

use super::conv::{conv3d_backward, conv3d_forward};
use super::Element;

/// Probability clamp applied inside the log-loss ops.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    MulScalarNode {
        x: NodeId,
        scalar: NodeId,
    },
    AddChannel {
        x: NodeId,
        b: NodeId,
    },
    SubChannel {
        x: NodeId,
        m: NodeId,
    },
    MulChannel {
        x: NodeId,
        c: NodeId,
    },
    ChannelMean {
        x: NodeId,
    },
    RsqrtEps {
        v: NodeId,
        eps: f64,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Upsample2x {
        x: NodeId,
    },
    ConcatCh {
        a: NodeId,
        b: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
    },
    TransposeLast2 {
        x: NodeId,
    },
    SoftmaxLast {
        x: NodeId,
    },
    NegLogMean {
        p: NodeId,
    },
    NegLog1mMean {
        p: NodeId,
    },
    L1Mean {
        a: NodeId,
        b: NodeId,
    },
    MseMean {
        a: NodeId,
        b: NodeId,
    },
    AddScaled {
        a: NodeId,
        b: NodeId,
        k: f64,
    },
}

struct Node<E: Element> {
    value: ArrayD<E>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// 1D trilinear doubling along `axis` (align-corners-false convention):
/// output sample i reads input position i/2 - 1/4, clamped at the ends.
fn upsample_axis<E: Element>(x: &ArrayD<E>, axis: usize) -> ArrayD<E> {
    let n = x.shape()[axis];
    let mut shape = x.shape().to_vec();
    shape[axis] = 2 * n;
    let mut out = ArrayD::<E>::zeros(IxDyn(&shape));
    let q = E::from_f64(0.25);
    let t = E::from_f64(0.75);
    for i in 0..2 * n {
        let (lo, hi, w_hi) = if i == 0 {
            (0usize, 0usize, E::zero())
        } else if i == 2 * n - 1 {
            (n - 1, n - 1, E::zero())
        } else if i % 2 == 0 {
            (i / 2 - 1, i / 2, t)
        } else {
            (i / 2, i / 2 + 1, q)
        };
        let w_lo = E::one() - w_hi;
        let src_lo = x.index_axis(Axis(axis), lo);
        let src_hi = x.index_axis(Axis(axis), hi);
        let mut dst = out.index_axis_mut(Axis(axis), i);
        ndarray::Zip::from(&mut dst)
            .and(&src_lo)
            .and(&src_hi)
            .for_each(|d, &a, &b| *d = a * w_lo + b * w_hi);
    }
    out
}

/// Adjoint of `upsample_axis`.
fn upsample_axis_adjoint<E: Element>(dy: &ArrayD<E>, axis: usize, n_in: usize) -> ArrayD<E> {
    let mut shape = dy.shape().to_vec();
    shape[axis] = n_in;
    let mut dx = ArrayD::<E>::zeros(IxDyn(&shape));
    let q = E::from_f64(0.25);
    let t = E::from_f64(0.75);
    let n = n_in;
    for i in 0..2 * n {
        let (lo, hi, w_hi) = if i == 0 {
            (0usize, 0usize, E::zero())
        } else if i == 2 * n - 1 {
            (n - 1, n - 1, E::zero())
        } else if i % 2 == 0 {
            (i / 2 - 1, i / 2, t)
        } else {
            (i / 2, i / 2 + 1, q)
        };
        let w_lo = E::one() - w_hi;
        let g = dy.index_axis(Axis(axis), i);
        {
            let mut d_lo = dx.index_axis_mut(Axis(axis), lo);
            ndarray::Zip::from(&mut d_lo).and(&g).for_each(|d, &v| *d = *d + v * w_lo);
        }
        if w_hi != E::zero() {
            let mut d_hi = dx.index_axis_mut(Axis(axis), hi);
            ndarray::Zip::from(&mut d_hi).and(&g).for_each(|d, &v| *d = *d + v * w_hi);
        }
    }
    dx
}

fn spatial_len(shape: &[usize]) -> usize {
    shape[2..].iter().product::<usize>() * shape[0]
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<E>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: ArrayD<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: ArrayD<E>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let v = conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let needs = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        self.push(v, Op::Conv3d { x, w, b, stride, pad }, needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let k = E::from_f64(slope);
        let v = self.value(x).mapv(|v| if v > E::zero() { v } else { v * k });
        let needs = self.ng(x);
        self.push(v, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self
            .value(x)
            .mapv(|v| E::one() / (E::one() + (-v).exp()));
        let needs = self.ng(x);
        self.push(v, Op::Sigmoid { x }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let kk = E::from_f64(k);
        let v = self.value(x).mapv(|v| v * kk);
        let needs = self.ng(x);
        self.push(v, Op::Scale { x, k }, needs)
    }

    /// y = s · x, with s a learned scalar of shape [1].
    pub fn mul_scalar_node(&mut self, x: NodeId, scalar: NodeId) -> NodeId {
        assert_eq!(self.shape(scalar), &[1], "scalar node must have shape [1]");
        let k = self.value(scalar)[[0]];
        let v = self.value(x).mapv(|v| v * k);
        let needs = self.ng(x) || self.ng(scalar);
        self.push(v, Op::MulScalarNode { x, scalar }, needs)
    }

    fn channel_map(
        &mut self,
        x: NodeId,
        c: NodeId,
        op: Op,
        f: impl Fn(E, E) -> E,
    ) -> NodeId {
        let ch = self.shape(x)[1];
        assert_eq!(self.value(c).len(), ch, "channel vector length mismatch");
        let cvals: Vec<E> = self.value(c).iter().cloned().collect();
        let mut v = self.value(x).clone();
        for (ci, &cv) in cvals.iter().enumerate() {
            let mut lane = v.slice_mut(s![.., ci, .., .., ..]);
            lane.mapv_inplace(|xv| f(xv, cv));
        }
        let needs = self.ng(x) || self.ng(c);
        self.push(v, op, needs)
    }

    pub fn add_channel(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.channel_map(x, b, Op::AddChannel { x, b }, |a, c| a + c)
    }

    pub fn sub_channel(&mut self, x: NodeId, m: NodeId) -> NodeId {
        self.channel_map(x, m, Op::SubChannel { x, m }, |a, c| a - c)
    }

    pub fn mul_channel(&mut self, x: NodeId, c: NodeId) -> NodeId {
        self.channel_map(x, c, Op::MulChannel { x, c }, |a, s| a * s)
    }

    /// Mean over batch and spatial dims → [C].
    pub fn channel_mean(&mut self, x: NodeId) -> NodeId {
        let ch = self.shape(x)[1];
        let m = E::from_f64(spatial_len(self.shape(x)) as f64);
        let mut v = ArrayD::<E>::zeros(IxDyn(&[ch]));
        for c in 0..ch {
            let lane = self.value(x).slice(s![.., c, .., .., ..]);
            let mut acc = E::zero();
            for &e in lane.iter() {
                acc = acc + e;
            }
            v[[c]] = acc / m;
        }
        let needs = self.ng(x);
        self.push(v, Op::ChannelMean { x }, needs)
    }

    pub fn rsqrt_eps(&mut self, v: NodeId, eps: f64) -> NodeId {
        let e = E::from_f64(eps);
        let out = self.value(v).mapv(|x| E::one() / (x + e).sqrt());
        let needs = self.ng(v);
        self.push(out, Op::RsqrtEps { v, eps }, needs)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        let v = self.value(x).mapv(|v| v.max(l).min(h));
        let needs = self.ng(x);
        self.push(v, Op::Clamp { x, lo, hi }, needs)
    }

    /// Trilinear ×2 upsampling of the three spatial axes of [N,C,D,H,W].
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        assert_eq!(self.shape(x).len(), 5);
        let mut v = upsample_axis(self.value(x), 2);
        v = upsample_axis(&v, 3);
        v = upsample_axis(&v, 4);
        let needs = self.ng(x);
        self.push(v, Op::Upsample2x { x }, needs)
    }

    /// Concatenate along the channel axis.
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::concatenate(
            Axis(1),
            &[self.value(a).view(), self.value(b).view()],
        )
        .expect("concat_ch shape mismatch");
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::ConcatCh { a, b }, needs)
    }

    /// [N,C,D,H,W] → [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let sh = self.shape(x).to_vec();
        let (n, c) = (sh[0], sh[1]);
        let m = E::from_f64((sh[2] * sh[3] * sh[4]) as f64);
        let mut v = ArrayD::<E>::zeros(IxDyn(&[n, c]));
        for ni in 0..n {
            for ci in 0..c {
                let lane = self.value(x).slice(s![ni, ci, .., .., ..]);
                let mut acc = E::zero();
                for &e in lane.iter() {
                    acc = acc + e;
                }
                v[[ni, ci]] = acc / m;
            }
        }
        let needs = self.ng(x);
        self.push(v, Op::GlobalAvgPool { x }, needs)
    }

    /// x[N,F] · wᵀ[F,O] + b[O].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[1], "linear feature mismatch");
        let x2 = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let w2 = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut out = Array2::<E>::zeros((xs[0], ws[0]));
        general_mat_mul(E::one(), &x2, &w2.t(), E::zero(), &mut out);
        let bvals: Vec<E> = self.value(b).iter().cloned().collect();
        for mut row in out.rows_mut() {
            for (o, &bv) in row.iter_mut().zip(bvals.iter()) {
                *o = *o + bv;
            }
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape")
            .to_owned();
        let needs = self.ng(x);
        self.push(v, Op::Reshape { x }, needs)
    }

    /// Batched matmul: [N,P,Q] × [N,Q,R] → [N,P,R].
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2], sb[1], "bmm inner dim mismatch");
        let mut out = ArrayD::<E>::zeros(IxDyn(&[sa[0], sa[1], sb[2]]));
        for n in 0..sa[0] {
            let an = self
                .value(a)
                .index_axis(Axis(0), n)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let bn = self
                .value(b)
                .index_axis(Axis(0), n)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let mut on = out
                .index_axis_mut(Axis(0), n)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            general_mat_mul(E::one(), &an, &bn, E::zero(), &mut on);
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Bmm { a, b }, needs)
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> NodeId {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 3);
        let mut v = ArrayD::<E>::zeros(IxDyn(&[sh[0], sh[2], sh[1]]));
        for n in 0..sh[0] {
            for p in 0..sh[1] {
                for q in 0..sh[2] {
                    v[[n, q, p]] = self.value(x)[[n, p, q]];
                }
            }
        }
        let needs = self.ng(x);
        self.push(v, Op::TransposeLast2 { x }, needs)
    }

    /// Softmax over the last axis of a [N,P,Q] tensor.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 3);
        let mut v = self.value(x).clone();
        for n in 0..sh[0] {
            for p in 0..sh[1] {
                let mut row = v.slice_mut(s![n, p, ..]);
                let mx = row.iter().cloned().fold(E::neg_infinity(), |a, b| a.max(b));
                let mut sum = E::zero();
                for e in row.iter_mut() {
                    *e = (*e - mx).exp();
                    sum = sum + *e;
                }
                for e in row.iter_mut() {
                    *e = *e / sum;
                }
            }
        }
        let needs = self.ng(x);
        self.push(v, Op::SoftmaxLast { x }, needs)
    }

    fn clamp_prob(p: E) -> E {
        let eps = E::from_f64(PROB_EPS);
        p.max(eps).min(E::one() - eps)
    }

    /// −mean(log p̂), p̂ clamped to [ε, 1−ε]. Output shape [1].
    pub fn neg_log_mean(&mut self, p: NodeId) -> NodeId {
        let m = E::from_f64(self.value(p).len() as f64);
        let mut acc = E::zero();
        for &v in self.value(p).iter() {
            acc = acc - Self::clamp_prob(v).ln();
        }
        let v = ArrayD::from_elem(IxDyn(&[1]), acc / m);
        let needs = self.ng(p);
        self.push(v, Op::NegLogMean { p }, needs)
    }

    /// −mean(log(1 − p̂)).
    pub fn neg_log1m_mean(&mut self, p: NodeId) -> NodeId {
        let m = E::from_f64(self.value(p).len() as f64);
        let mut acc = E::zero();
        for &v in self.value(p).iter() {
            acc = acc - (E::one() - Self::clamp_prob(v)).ln();
        }
        let v = ArrayD::from_elem(IxDyn(&[1]), acc / m);
        let needs = self.ng(p);
        self.push(v, Op::NegLog1mMean { p }, needs)
    }

    /// mean(|a − b|), shape [1].
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "l1_mean shape mismatch");
        let m = E::from_f64(self.value(a).len() as f64);
        let mut acc = E::zero();
        for (&x, &y) in self.value(a).iter().zip(self.value(b).iter()) {
            acc = acc + (x - y).abs();
        }
        let v = ArrayD::from_elem(IxDyn(&[1]), acc / m);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::L1Mean { a, b }, needs)
    }

    /// mean((a − b)²), shape [1].
    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mse_mean shape mismatch");
        let m = E::from_f64(self.value(a).len() as f64);
        let mut acc = E::zero();
        for (&x, &y) in self.value(a).iter().zip(self.value(b).iter()) {
            acc = acc + (x - y) * (x - y);
        }
        let v = ArrayD::from_elem(IxDyn(&[1]), acc / m);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::MseMean { a, b }, needs)
    }

    /// a + k·b on [1]-shaped scalars.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, k: f64) -> NodeId {
        assert_eq!(self.shape(a), &[1]);
        assert_eq!(self.shape(b), &[1]);
        let v = ArrayD::from_elem(
            IxDyn(&[1]),
            self.value(a)[[0]] + E::from_f64(k) * self.value(b)[[0]],
        );
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::AddScaled { a, b, k }, needs)
    }

    /// Reverse-mode sweep from a [1]-shaped loss node. Returns per-node
    /// gradients (None where not needed).
    pub fn backward(&self, loss: NodeId) -> Vec<Option<ArrayD<E>>> {
        assert_eq!(self.shape(loss), &[1], "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), E::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<ArrayD<E>>], id: NodeId, contribution: ArrayD<E>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => *existing = &*existing + &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<E>, grads: &mut [Option<ArrayD<E>>]) {
        match self.nodes[i].op.clone() {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, stride, pad } => {
                let need_dx = self.ng(x);
                let (dx, dw, db) =
                    conv3d_backward(self.value(x), self.value(w), g, stride, pad, need_dx);
                if let Some(dx) = dx {
                    self.acc(grads, x, dx);
                }
                self.acc(grads, w, dw);
                if let Some(b) = b {
                    let db = db
                        .into_shape_with_order(self.value(b).raw_dim())
                        .unwrap();
                    self.acc(grads, b, db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let k = E::from_f64(slope);
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx)
                    .and(self.value(x))
                    .for_each(|d, &v| {
                        if v <= E::zero() {
                            *d = *d * k;
                        }
                    });
                self.acc(grads, x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(y).for_each(|d, &s| {
                    *d = *d * s * (E::one() - s);
                });
                self.acc(grads, x, dx);
            }
            Op::Add { a, b } => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            Op::Mul { a, b } => {
                if self.ng(a) {
                    self.acc(grads, a, g * self.value(b));
                }
                if self.ng(b) {
                    self.acc(grads, b, g * self.value(a));
                }
            }
            Op::Scale { x, k } => {
                let kk = E::from_f64(k);
                self.acc(grads, x, g.mapv(|v| v * kk));
            }
            Op::MulScalarNode { x, scalar } => {
                if self.ng(x) {
                    let k = self.value(scalar)[[0]];
                    self.acc(grads, x, g.mapv(|v| v * k));
                }
                if self.ng(scalar) {
                    let mut acc = E::zero();
                    for (&gv, &xv) in g.iter().zip(self.value(x).iter()) {
                        acc = acc + gv * xv;
                    }
                    self.acc(grads, scalar, ArrayD::from_elem(IxDyn(&[1]), acc));
                }
            }
            Op::AddChannel { x, b } => {
                self.acc(grads, x, g.clone());
                if self.ng(b) {
                    let ch = self.value(b).len();
                    let mut db = ArrayD::<E>::zeros(IxDyn(&[ch]));
                    for c in 0..ch {
                        let lane = g.slice(s![.., c, .., .., ..]);
                        let mut a = E::zero();
                        for &e in lane.iter() {
                            a = a + e;
                        }
                        db[[c]] = a;
                    }
                    let db = db.into_shape_with_order(self.value(b).raw_dim()).unwrap();
                    self.acc(grads, b, db);
                }
            }
            Op::SubChannel { x, m } => {
                self.acc(grads, x, g.clone());
                if self.ng(m) {
                    let ch = self.value(m).len();
                    let mut dm = ArrayD::<E>::zeros(IxDyn(&[ch]));
                    for c in 0..ch {
                        let lane = g.slice(s![.., c, .., .., ..]);
                        let mut a = E::zero();
                        for &e in lane.iter() {
                            a = a + e;
                        }
                        dm[[c]] = -a;
                    }
                    let dm = dm.into_shape_with_order(self.value(m).raw_dim()).unwrap();
                    self.acc(grads, m, dm);
                }
            }
            Op::MulChannel { x, c } => {
                let ch = self.value(c).len();
                let cvals: Vec<E> = self.value(c).iter().cloned().collect();
                if self.ng(x) {
                    let mut dx = g.clone();
                    for (ci, &cv) in cvals.iter().enumerate() {
                        let mut lane = dx.slice_mut(s![.., ci, .., .., ..]);
                        lane.mapv_inplace(|v| v * cv);
                    }
                    self.acc(grads, x, dx);
                }
                if self.ng(c) {
                    let mut dc = ArrayD::<E>::zeros(IxDyn(&[ch]));
                    for ci in 0..ch {
                        let gl = g.slice(s![.., ci, .., .., ..]);
                        let xl = self.value(x).slice(s![.., ci, .., .., ..]);
                        let mut a = E::zero();
                        for (&gv, &xv) in gl.iter().zip(xl.iter()) {
                            a = a + gv * xv;
                        }
                        dc[[ci]] = a;
                    }
                    let dc = dc.into_shape_with_order(self.value(c).raw_dim()).unwrap();
                    self.acc(grads, c, dc);
                }
            }
            Op::ChannelMean { x } => {
                let m = E::from_f64(spatial_len(self.shape(x)) as f64);
                let mut dx = ArrayD::<E>::zeros(self.value(x).raw_dim());
                for (c, &gv) in g.iter().enumerate() {
                    let mut lane = dx.slice_mut(s![.., c, .., .., ..]);
                    lane.fill(gv / m);
                }
                self.acc(grads, x, dx);
            }
            Op::RsqrtEps { v, eps } => {
                let e = E::from_f64(eps);
                let half = E::from_f64(0.5);
                let mut dv = g.clone();
                ndarray::Zip::from(&mut dv)
                    .and(self.value(v))
                    .for_each(|d, &x| {
                        let t = x + e;
                        *d = -*d * half / (t * t.sqrt());
                    });
                self.acc(grads, v, dv);
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (E::from_f64(lo), E::from_f64(hi));
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx)
                    .and(self.value(x))
                    .for_each(|d, &v| {
                        if v < l || v > h {
                            *d = E::zero();
                        }
                    });
                self.acc(grads, x, dx);
            }
            Op::Upsample2x { x } => {
                let sh = self.shape(x).to_vec();
                let mut dx = upsample_axis_adjoint(g, 4, sh[4]);
                dx = upsample_axis_adjoint(&dx, 3, sh[3]);
                dx = upsample_axis_adjoint(&dx, 2, sh[2]);
                self.acc(grads, x, dx);
            }
            Op::ConcatCh { a, b } => {
                let ca = self.shape(a)[1];
                if self.ng(a) {
                    self.acc(grads, a, g.slice(s![.., ..ca, .., .., ..]).to_owned().into_dyn());
                }
                if self.ng(b) {
                    self.acc(grads, b, g.slice(s![.., ca.., .., .., ..]).to_owned().into_dyn());
                }
            }
            Op::GlobalAvgPool { x } => {
                let sh = self.shape(x).to_vec();
                let m = E::from_f64((sh[2] * sh[3] * sh[4]) as f64);
                let mut dx = ArrayD::<E>::zeros(self.value(x).raw_dim());
                for n in 0..sh[0] {
                    for c in 0..sh[1] {
                        let gv = g[[n, c]] / m;
                        let mut lane = dx.slice_mut(s![n, c, .., .., ..]);
                        lane.fill(gv);
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::Linear { x, w, b } => {
                let x2 = self
                    .value(x)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                let w2 = self
                    .value(w)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                let g2 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                if self.ng(x) {
                    let mut dx = Array2::<E>::zeros(x2.raw_dim());
                    general_mat_mul(E::one(), &g2, &w2, E::zero(), &mut dx);
                    self.acc(grads, x, dx.into_dyn());
                }
                if self.ng(w) {
                    let mut dw = Array2::<E>::zeros(w2.raw_dim());
                    general_mat_mul(E::one(), &g2.t(), &x2, E::zero(), &mut dw);
                    self.acc(grads, w, dw.into_dyn());
                }
                if self.ng(b) {
                    let db = g2.sum_axis(Axis(0));
                    let db = db
                        .into_dyn()
                        .into_shape_with_order(self.value(b).raw_dim())
                        .unwrap();
                    self.acc(grads, b, db);
                }
            }
            Op::Reshape { x } => {
                let dx = g
                    .view()
                    .into_shape_with_order(self.value(x).raw_dim())
                    .unwrap()
                    .to_owned();
                self.acc(grads, x, dx);
            }
            Op::Bmm { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                if self.ng(a) {
                    let mut da = ArrayD::<E>::zeros(self.value(a).raw_dim());
                    for n in 0..sa[0] {
                        let gn = g
                            .index_axis(Axis(0), n)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let bn = self
                            .value(b)
                            .index_axis(Axis(0), n)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let mut dan = da
                            .index_axis_mut(Axis(0), n)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        general_mat_mul(E::one(), &gn, &bn.t(), E::zero(), &mut dan);
                    }
                    self.acc(grads, a, da);
                }
                if self.ng(b) {
                    let mut db = ArrayD::<E>::zeros(self.value(b).raw_dim());
                    for n in 0..sb[0] {
                        let gn = g
                            .index_axis(Axis(0), n)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let an = self
                            .value(a)
                            .index_axis(Axis(0), n)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let mut dbn = db
                            .index_axis_mut(Axis(0), n)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        general_mat_mul(E::one(), &an.t(), &gn, E::zero(), &mut dbn);
                    }
                    self.acc(grads, b, db);
                }
            }
            Op::TransposeLast2 { x } => {
                let sh = self.shape(x).to_vec();
                let mut dx = ArrayD::<E>::zeros(self.value(x).raw_dim());
                for n in 0..sh[0] {
                    for p in 0..sh[1] {
                        for q in 0..sh[2] {
                            dx[[n, p, q]] = g[[n, q, p]];
                        }
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::SoftmaxLast { x } => {
                let y = &self.nodes[i].value;
                let sh = y.shape().to_vec();
                let mut dx = ArrayD::<E>::zeros(y.raw_dim());
                for n in 0..sh[0] {
                    for p in 0..sh[1] {
                        let yrow = y.slice(s![n, p, ..]);
                        let grow = g.slice(s![n, p, ..]);
                        let mut dot = E::zero();
                        for (&yv, &gv) in yrow.iter().zip(grow.iter()) {
                            dot = dot + yv * gv;
                        }
                        let mut drow = dx.slice_mut(s![n, p, ..]);
                        for ((dv, &yv), &gv) in
                            drow.iter_mut().zip(yrow.iter()).zip(grow.iter())
                        {
                            *dv = yv * (gv - dot);
                        }
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::NegLogMean { p } => {
                let m = E::from_f64(self.value(p).len() as f64);
                let g0 = g[[0]];
                let eps = E::from_f64(PROB_EPS);
                let dp = self.value(p).mapv(|v| {
                    if v > eps && v < E::one() - eps {
                        -g0 / (m * v)
                    } else {
                        E::zero()
                    }
                });
                self.acc(grads, p, dp);
            }
            Op::NegLog1mMean { p } => {
                let m = E::from_f64(self.value(p).len() as f64);
                let g0 = g[[0]];
                let eps = E::from_f64(PROB_EPS);
                let dp = self.value(p).mapv(|v| {
                    if v > eps && v < E::one() - eps {
                        g0 / (m * (E::one() - v))
                    } else {
                        E::zero()
                    }
                });
                self.acc(grads, p, dp);
            }
            Op::L1Mean { a, b } => {
                let m = E::from_f64(self.value(a).len() as f64);
                let g0 = g[[0]];
                let mut da = ArrayD::<E>::zeros(self.value(a).raw_dim());
                ndarray::Zip::from(&mut da)
                    .and(self.value(a))
                    .and(self.value(b))
                    .for_each(|d, &x, &y| {
                        *d = if x > y {
                            g0 / m
                        } else if x < y {
                            -g0 / m
                        } else {
                            E::zero()
                        };
                    });
                if self.ng(b) {
                    self.acc(grads, b, da.mapv(|v| -v));
                }
                if self.ng(a) {
                    self.acc(grads, a, da);
                }
            }
            Op::MseMean { a, b } => {
                let m = E::from_f64(self.value(a).len() as f64);
                let two = E::from_f64(2.0);
                let g0 = g[[0]];
                let da = (self.value(a) - self.value(b)).mapv(|d| two * d * g0 / m);
                if self.ng(b) {
                    self.acc(grads, b, da.mapv(|v| -v));
                }
                if self.ng(a) {
                    self.acc(grads, a, da);
                }
            }
            Op::AddScaled { a, b, k } => {
                self.acc(grads, a, g.clone());
                if self.ng(b) {
                    self.acc(grads, b, g.mapv(|v| v * E::from_f64(k)));
                }
            }
        }
    }
}
