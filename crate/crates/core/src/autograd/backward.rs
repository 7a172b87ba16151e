//! Vector-Jacobian products for every recorded op.

use super::conv::{col2im_add, im2col};
use super::ops::{gelu_grad, permute_tensor, sigmoid};
use super::{accumulate, Graph, Op, Var};
use crate::error::Result;
use crate::tensor::{self, axis_split, broadcast_index_map, Tensor};

/// Sums `g` (shaped `out_shape`) down to `in_shape` under broadcasting.
fn reduce_to(g: &Tensor, in_shape: &[usize]) -> Tensor {
    if g.shape() == in_shape {
        return g.clone();
    }
    let map = broadcast_index_map(in_shape, g.shape());
    let mut out = Tensor::zeros(in_shape);
    let od = out.data_mut();
    for (&j, &v) in map.iter().zip(g.data()) {
        od[j] += v;
    }
    out
}

impl Graph {
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.needs(v) {
            accumulate(grads, v, g);
        }
    }

    pub(super) fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, reduce_to(g, self.shape(*a)));
                self.send(grads, *b, reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, reduce_to(g, self.shape(*a)));
                if self.needs(*b) {
                    self.send(grads, *b, reduce_to(&g.map(|v| -v), self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.needs(this) {
                        continue;
                    }
                    let ov = self.value(other);
                    let map = broadcast_index_map(ov.shape(), g.shape());
                    let od = ov.data();
                    let prod = Tensor::new(
                        g.shape(),
                        g.data().iter().zip(&map).map(|(&gv, &j)| gv * od[j]).collect(),
                    )?;
                    self.send(grads, this, reduce_to(&prod, self.shape(this)));
                }
            }
            Op::Scale(x, c) => self.send(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => self.send(grads, *x, g.clone()),
            Op::Sigmoid(x) => {
                let d = zip_map(g, out, |gv, s| gv * s * (1.0 - s));
                self.send(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = zip_map(g, self.value(*x), |gv, xv| gv * gelu_grad(xv));
                self.send(grads, *x, d);
            }
            Op::Log(x) => {
                let d = zip_map(g, self.value(*x), |gv, xv| gv / xv);
                self.send(grads, *x, d);
            }
            Op::Exp(x) => self.send(grads, *x, zip_map(g, out, |gv, e| gv * e)),
            Op::Clamp(x, lo, hi) => {
                let d = zip_map(g, self.value(*x), |gv, xv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                self.send(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.send(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.send(grads, *x, Tensor::full(self.shape(*x), g.item() / n));
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let gd = g.data();
                let d = Tensor::from_fn(shape, |flat| {
                    let o = flat / (len * inner);
                    let i = flat % inner;
                    gd[o * inner + i]
                });
                debug_assert_eq!(d.numel(), outer * len * inner);
                self.send(grads, *x, d);
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                self.send(grads, *x, Tensor::new(out.shape(), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dim = self.shape(*gamma)[0];
                let rows = xhat.len() / dim;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; dim];
                    let mut db = vec![0.0; dim];
                    for r in 0..rows {
                        for j in 0..dim {
                            dg[j] += gd[r * dim + j] * xhat[r * dim + j];
                            db[j] += gd[r * dim + j];
                        }
                    }
                    self.send(grads, *gamma, Tensor::new(&[dim], dg)?);
                    self.send(grads, *beta, Tensor::new(&[dim], db)?);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    let nd = dim as f64;
                    for r in 0..rows {
                        let row = r * dim..(r + 1) * dim;
                        let dxh: Vec<f64> = row.clone().map(|k| gd[k] * gam[k - r * dim]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                        for (j, k) in row.enumerate() {
                            dx[k] = inv_std[r] / nd * (nd * dxh[j] - s1 - xhat[k] * s2);
                        }
                    }
                    self.send(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm_nt(g.data(), self.value(*b).data(), &mut da, m, n, k);
                    self.send(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm_tn(self.value(*a).data(), g.data(), &mut db, k, m, n);
                    self.send(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.needs(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for s in 0..bs {
                        tensor::gemm_nt(
                            &gd[s * m * n..(s + 1) * m * n],
                            &bd[s * k * n..(s + 1) * k * n],
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.send(grads, *a, Tensor::new(&[bs, m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for s in 0..bs {
                        tensor::gemm_tn(
                            &ad[s * m * k..(s + 1) * m * k],
                            &gd[s * m * n..(s + 1) * m * n],
                            &mut db[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.send(grads, *b, Tensor::new(&[bs, k, n], db)?);
                }
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.send(grads, *x, permute_tensor(g, &inv));
            }
            Op::Reshape(x) => self.send(grads, *x, g.reshape(self.shape(*x))?),
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.needs(x) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.send(grads, x, Tensor::new(self.shape(x), d)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = axis_split(xs, *axis);
                let len = out.shape()[*axis];
                let mut d = Tensor::zeros(xs);
                let dd = d.data_mut();
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    dd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.send(grads, *x, d);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let geom = self.conv_geom(*x, *w, *stride, *padding)?;
                let k = geom.c_in * geom.kh * geom.kw;
                let p = geom.oh * geom.ow;
                let plane = geom.c_in * geom.h * geom.w;
                let (xd, wd, gd) = (self.value(*x).data(), self.value(*w).data(), g.data());
                let mut cols = vec![0.0; k * p];
                let mut dw = vec![0.0; geom.c_out * k];
                let mut dx = vec![0.0; if self.needs(*x) { xd.len() } else { 0 }];
                let mut dcols = vec![0.0; k * p];
                for n in 0..geom.batch {
                    let go = &gd[n * geom.c_out * p..(n + 1) * geom.c_out * p];
                    if self.needs(*w) {
                        im2col(&xd[n * plane..(n + 1) * plane], &geom, &mut cols);
                        tensor::gemm_nt(go, &cols, &mut dw, geom.c_out, p, k);
                    }
                    if self.needs(*x) {
                        dcols.fill(0.0);
                        tensor::gemm_tn(wd, go, &mut dcols, k, geom.c_out, p);
                        col2im_add(&dcols, &geom, &mut dx[n * plane..(n + 1) * plane]);
                    }
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; geom.c_out];
                        for n in 0..geom.batch {
                            for (co, acc) in db.iter_mut().enumerate() {
                                let base = (n * geom.c_out + co) * p;
                                *acc += gd[base..base + p].iter().sum::<f64>();
                            }
                        }
                        self.send(grads, *b, Tensor::new(&[geom.c_out], db)?);
                    }
                }
                if self.needs(*w) {
                    self.send(grads, *w, Tensor::new(self.shape(*w), dw)?);
                }
                if self.needs(*x) {
                    self.send(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dd[src] += gv;
                }
                self.send(grads, *x, d);
            }
            Op::TopKSum { x, k, selected } => {
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (chunk, &gv) in selected.chunks(*k).zip(g.data()) {
                    for &src in chunk {
                        dd[src] += gv;
                    }
                }
                self.send(grads, *x, d);
            }
            Op::TopKMask { x, keep } => {
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(keep)
                        .map(|(&gv, &kp)| if kp { gv } else { 0.0 })
                        .collect(),
                )?;
                self.send(grads, *x, d);
            }
            Op::SteBinarize(x) => {
                let d = zip_map(g, self.value(*x), |gv, l| {
                    let s = sigmoid(l);
                    gv * s * (1.0 - s)
                });
                self.send(grads, *x, d);
            }
            Op::Custom { x, backward } => {
                let d = backward(self.value(*x), g);
                self.send(grads, *x, d);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}
