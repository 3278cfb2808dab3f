//! 3D convolution with cubic kernels via blocked im2col + GEMM.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, s};
#[cfg(test)]
use ndarray::Ix5;

use super::Element;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn from_shapes(x: &[usize], w: &[usize], stride: usize, pad: usize) -> ConvGeom {
        assert_eq!(x.len(), 5, "conv3d input must be [N,C,D,H,W]");
        assert_eq!(w.len(), 5, "conv3d weight must be [Co,Ci,k,k,k]");
        assert_eq!(x[1], w[1], "conv3d channel mismatch");
        assert!(w[2] == w[3] && w[3] == w[4], "conv3d kernels are cubic");
        let k = w[2];
        let out = |d: usize| {
            assert!(d + 2 * pad >= k, "conv3d input smaller than kernel");
            (d + 2 * pad - k) / stride + 1
        };
        ConvGeom {
            n: x[0],
            ci: x[1],
            co: w[0],
            k,
            stride,
            pad,
            in_dims: [x[2], x[3], x[4]],
            out_dims: [out(x[2]), out(x[3]), out(x[4])],
        }
    }

    pub fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k * self.k
    }

    /// Output-voxel block size keeping the gather buffer around 8 MB.
    fn block(&self) -> usize {
        (1_000_000 / self.rows()).clamp(64, 16384).min(self.out_voxels().max(1))
    }
}

/// Gather the im2col block for output voxels [v0, v0+bs) of one sample.
fn fill_col<E: Element>(
    x: &ArrayViewD<E>, // [Ci, D, H, W] of one sample
    g: &ConvGeom,
    v0: usize,
    bs: usize,
    col: &mut Array2<E>,
) {
    let [d, h, w] = g.in_dims;
    let [_, ho, wo] = g.out_dims;
    let k = g.k;
    col.fill(E::zero());
    for j in 0..bs {
        let v = v0 + j;
        let od = v / (ho * wo);
        let oh = (v / wo) % ho;
        let ow = v % wo;
        let z0 = (od * g.stride) as isize - g.pad as isize;
        let y0 = (oh * g.stride) as isize - g.pad as isize;
        let x0 = (ow * g.stride) as isize - g.pad as isize;
        for ci in 0..g.ci {
            for kz in 0..k {
                let zi = z0 + kz as isize;
                if zi < 0 || zi >= d as isize {
                    continue;
                }
                for ky in 0..k {
                    let yi = y0 + ky as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let row0 = ((ci * k + kz) * k + ky) * k;
                    for kx in 0..k {
                        let xi = x0 + kx as isize;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        col[[row0 + kx, j]] =
                            x[[ci, zi as usize, yi as usize, xi as usize]];
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of `fill_col`.
fn scatter_col<E: Element>(
    dx: &mut ndarray::ArrayViewMut4<E>, // [Ci, D, H, W]
    g: &ConvGeom,
    v0: usize,
    bs: usize,
    dcol: &Array2<E>,
) {
    let [d, h, w] = g.in_dims;
    let [_, ho, wo] = g.out_dims;
    let k = g.k;
    for j in 0..bs {
        let v = v0 + j;
        let od = v / (ho * wo);
        let oh = (v / wo) % ho;
        let ow = v % wo;
        let z0 = (od * g.stride) as isize - g.pad as isize;
        let y0 = (oh * g.stride) as isize - g.pad as isize;
        let x0 = (ow * g.stride) as isize - g.pad as isize;
        for ci in 0..g.ci {
            for kz in 0..k {
                let zi = z0 + kz as isize;
                if zi < 0 || zi >= d as isize {
                    continue;
                }
                for ky in 0..k {
                    let yi = y0 + ky as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let row0 = ((ci * k + kz) * k + ky) * k;
                    for kx in 0..k {
                        let xi = x0 + kx as isize;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        dx[[ci, zi as usize, yi as usize, xi as usize]] =
                            dx[[ci, zi as usize, yi as usize, xi as usize]]
                                + dcol[[row0 + kx, j]];
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<E: Element>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    b: Option<&ArrayD<E>>,
    stride: usize,
    pad: usize,
) -> ArrayD<E> {
    let g = ConvGeom::from_shapes(x.shape(), w.shape(), stride, pad);
    let dv = g.out_voxels();
    let wmat_owned;
    let wmat: ArrayView2<E> = {
        let view = w.view().into_shape_with_order((g.co, g.rows())).unwrap();
        wmat_owned = view.to_owned();
        wmat_owned.view()
    };
    let mut out = ArrayD::<E>::zeros(ndarray::IxDyn(&[
        g.n,
        g.co,
        g.out_dims[0],
        g.out_dims[1],
        g.out_dims[2],
    ]));
    let bs_max = g.block();
    let mut col = Array2::<E>::zeros((g.rows(), bs_max));
    for n in 0..g.n {
        let xn = x.index_axis(Axis(0), n);
        let mut out_mat = out
            .index_axis_mut(Axis(0), n)
            .into_shape_with_order((g.co, dv))
            .unwrap();
        let mut v0 = 0;
        while v0 < dv {
            let bs = bs_max.min(dv - v0);
            fill_col(&xn, &g, v0, bs, &mut col);
            let mut dst = out_mat.slice_mut(s![.., v0..v0 + bs]);
            general_mat_mul(
                E::one(),
                &wmat,
                &col.slice(s![.., ..bs]),
                E::zero(),
                &mut dst,
            );
            v0 += bs;
        }
    }
    if let Some(b) = b {
        assert_eq!(b.len(), g.co, "conv3d bias length");
        let b1 = b.view().into_shape_with_order(g.co).unwrap();
        for n in 0..g.n {
            for c in 0..g.co {
                let mut ch = out.slice_mut(s![n, c, .., .., ..]);
                ch.mapv_inplace(|v| v + b1[c]);
            }
        }
    }
    out
}

/// Gradients of conv3d. Returns (dx if requested, dw, db).
pub fn conv3d_backward<E: Element>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    dout: &ArrayD<E>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<ArrayD<E>>, ArrayD<E>, ArrayD<E>) {
    let g = ConvGeom::from_shapes(x.shape(), w.shape(), stride, pad);
    let dv = g.out_voxels();
    let wmat = w
        .view()
        .into_shape_with_order((g.co, g.rows()))
        .unwrap()
        .to_owned();
    let mut dwmat = Array2::<E>::zeros((g.co, g.rows()));
    let mut db = Array1::<E>::zeros(g.co);
    let mut dx = if need_dx {
        Some(ArrayD::<E>::zeros(x.raw_dim()))
    } else {
        None
    };
    let bs_max = g.block();
    let mut col = Array2::<E>::zeros((g.rows(), bs_max));
    let mut dcol = Array2::<E>::zeros((g.rows(), bs_max));
    for n in 0..g.n {
        let xn = x.index_axis(Axis(0), n);
        let dout_mat = dout
            .index_axis(Axis(0), n)
            .into_shape_with_order((g.co, dv))
            .unwrap()
            .to_owned();
        for c in 0..g.co {
            let mut s = E::zero();
            for &v in dout_mat.row(c) {
                s = s + v;
            }
            db[c] = db[c] + s;
        }
        let mut v0 = 0;
        while v0 < dv {
            let bs = bs_max.min(dv - v0);
            fill_col(&xn, &g, v0, bs, &mut col);
            let dout_blk = dout_mat.slice(s![.., v0..v0 + bs]);
            // dW += dOut_blk · colᵀ
            {
                let colv = col.slice(s![.., ..bs]);
                general_mat_mul(E::one(), &dout_blk, &colv.t(), E::one(), &mut dwmat);
            }
            if let Some(dx) = dx.as_mut() {
                let mut dcol_v = dcol.slice_mut(s![.., ..bs]);
                general_mat_mul(E::one(), &wmat.t(), &dout_blk, E::zero(), &mut dcol_v);
                let mut dxn = dx
                    .index_axis_mut(Axis(0), n)
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                scatter_col(&mut dxn, &g, v0, bs, &dcol);
            }
            v0 += bs;
        }
    }
    let dw = dwmat
        .into_shape_with_order(ndarray::IxDyn(&[g.co, g.ci, g.k, g.k, g.k]))
        .unwrap();
    (dx, dw, db.into_dyn())
}

/// Direct (naive) conv3d used as a test oracle.
#[cfg(test)]
pub fn conv3d_naive<E: Element>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    b: Option<&ArrayD<E>>,
    stride: usize,
    pad: usize,
) -> ArrayD<E> {
    let g = ConvGeom::from_shapes(x.shape(), w.shape(), stride, pad);
    let x5 = x.view().into_dimensionality::<Ix5>().unwrap();
    let w5 = w.view().into_dimensionality::<Ix5>().unwrap();
    let mut out = ArrayD::<E>::zeros(ndarray::IxDyn(&[
        g.n,
        g.co,
        g.out_dims[0],
        g.out_dims[1],
        g.out_dims[2],
    ]));
    for n in 0..g.n {
        for co in 0..g.co {
            for od in 0..g.out_dims[0] {
                for oh in 0..g.out_dims[1] {
                    for ow in 0..g.out_dims[2] {
                        let mut acc = E::zero();
                        for ci in 0..g.ci {
                            for kz in 0..g.k {
                                for ky in 0..g.k {
                                    for kx in 0..g.k {
                                        let zi = (od * stride + kz) as isize - pad as isize;
                                        let yi = (oh * stride + ky) as isize - pad as isize;
                                        let xi = (ow * stride + kx) as isize - pad as isize;
                                        if zi < 0
                                            || yi < 0
                                            || xi < 0
                                            || zi >= g.in_dims[0] as isize
                                            || yi >= g.in_dims[1] as isize
                                            || xi >= g.in_dims[2] as isize
                                        {
                                            continue;
                                        }
                                        acc = acc
                                            + x5[[n, ci, zi as usize, yi as usize, xi as usize]]
                                                * w5[[co, ci, kz, ky, kx]];
                                    }
                                }
                            }
                        }
                        if let Some(b) = b {
                            acc = acc + b[co];
                        }
                        out[[n, co, od, oh, ow]] = acc;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::prelude::*;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_naive() {
        for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 4), (1, 0, 1)] {
            let x = randn(&[2, 3, 6, 6, 6], 1);
            let w = randn(&[4, 3, k, k, k], 2);
            let b = randn(&[4], 3);
            let got = conv3d_forward(&x, &w, Some(&b), stride, pad);
            let want = conv3d_naive(&x, &w, Some(&b), stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.iter().zip(want.iter()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = randn(&[1, 2, 5, 5, 5], 4);
        let w = randn(&[3, 2, 3, 3, 3], 5);
        let b = randn(&[3], 6);
        let stride = 2;
        let pad = 1;
        let out = conv3d_forward(&x, &w, Some(&b), stride, pad);
        // Loss = sum(out * m) for a fixed random mask m.
        let m = randn(out.shape(), 7);
        let dout = m.clone();
        let (dx, dw, db) = conv3d_backward(&x, &w, &dout, stride, pad, true);
        let dx = dx.unwrap();
        let eps = 1e-6;
        let loss = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            let o = conv3d_forward(x, w, Some(b), stride, pad);
            o.iter().zip(m.iter()).map(|(a, b)| a * b).sum()
        };
        let check = |analytic: &ArrayD<f64>,
                         base: &ArrayD<f64>,
                         which: usize,
                         idxs: &[usize]| {
            for &i in idxs {
                let mut p = base.clone();
                p.as_slice_mut().unwrap()[i] += eps;
                let mut q = base.clone();
                q.as_slice_mut().unwrap()[i] -= eps;
                let (lp, lq) = match which {
                    0 => (loss(&p, &w, &b), loss(&q, &w, &b)),
                    1 => (loss(&x, &p, &b), loss(&x, &q, &b)),
                    _ => (loss(&x, &w, &p), loss(&x, &w, &q)),
                };
                let fd = (lp - lq) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[i];
                assert!(
                    (fd - an).abs() < 1e-6 * (1.0 + fd.abs()),
                    "which={which} i={i}: fd {fd} vs analytic {an}"
                );
            }
        };
        check(&dx, &x, 0, &[0, 17, 63, 200, 249]);
        check(&dw, &w, 1, &[0, 31, 80, 161]);
        check(&db, &b, 2, &[0, 1, 2]);
    }
}
