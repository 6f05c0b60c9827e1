use alloc::vec;
use alloc::vec::Vec;

use super::ops::{batch_pairs, Broadcast, GELU_A, GELU_C};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, split_axis, Tensor};

/// Gradients of leaf nodes produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, contrib: Vec<F>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
        None => *slot = Some(contrib),
    }
}

/// Sums a gradient of the broadcast output shape back to `src` shape.
fn reduce_to<F: Scalar>(
    bc: &Broadcast,
    g: &[F],
    src_len: usize,
    src_is_a: bool,
    weight: Option<(&[F], bool)>,
) -> Vec<F> {
    let mut out = vec![F::zero(); src_len];
    bc.rows(|o, ao, bo, len, sa, sb| {
        let (off, step) = if src_is_a { (ao, sa) } else { (bo, sb) };
        match weight {
            None => {
                for j in 0..len {
                    out[off + j * step] += g[o + j];
                }
            }
            Some((w, w_is_a)) => {
                let (woff, wstep) = if w_is_a { (ao, sa) } else { (bo, sb) };
                for j in 0..len {
                    out[off + j * step] += g[o + j] * w[woff + j * wstep];
                }
            }
        }
    });
    out
}

impl<F: Scalar> Graph<F> {
    /// Reverse pass from a single-element `loss`. Only leaves created with
    /// [`Graph::param`] keep their gradients in the result.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(loss).to_vec(),
                reason: "backward needs a single-element loss".into(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.len()];
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaves: Vec<Option<Tensor<F>>> = vec![None; self.len()];

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g)? {
                if self.nodes[input.0].needs_grad {
                    accumulate(&mut grads[input.0], contrib);
                }
            }
        }
        Ok(Grads { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, id: usize, g: &[F]) -> Result<Vec<(Var, Vec<F>)>> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                let (sa, sb) = (self.shape(a), self.shape(b));
                if sa == sb {
                    if self.wants(a) {
                        out.push((a, g.to_vec()));
                    }
                    if self.wants(b) {
                        let gb = if neg { g.iter().map(|&v| -v).collect() } else { g.to_vec() };
                        out.push((b, gb));
                    }
                } else {
                    let bc = Broadcast::new("add", sa, sb)?;
                    if self.wants(a) {
                        out.push((a, reduce_to(&bc, g, numel(sa), true, None)));
                    }
                    if self.wants(b) {
                        let mut gb = reduce_to(&bc, g, numel(sb), false, None);
                        if neg {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        out.push((b, gb));
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if va.shape() == vb.shape() {
                    if self.wants(a) {
                        out.push((a, g.iter().zip(vb.data()).map(|(&g, &w)| g * w).collect()));
                    }
                    if self.wants(b) {
                        out.push((b, g.iter().zip(va.data()).map(|(&g, &w)| g * w).collect()));
                    }
                } else {
                    let bc = Broadcast::new("mul", va.shape(), vb.shape())?;
                    if self.wants(a) {
                        let ga = reduce_to(&bc, g, va.numel(), true, Some((vb.data(), false)));
                        out.push((a, ga));
                    }
                    if self.wants(b) {
                        let gb = reduce_to(&bc, g, vb.numel(), false, Some((va.data(), true)));
                        out.push((b, gb));
                    }
                }
            }
            &Op::Scale(x, c) => out.push((x, g.iter().map(|&v| v * c).collect())),
            &Op::AddScalar(x) | &Op::Reshape(x) => out.push((x, g.to_vec())),
            &Op::SumAll(x) => out.push((x, vec![g[0]; self.value(x).numel()])),
            &Op::MatMul { a, b, trans_b } => self.matmul_grads(a, b, trans_b, g, &mut out)?,
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                out.push((*x, gt.permute(&inv)?.into_data()));
            }
            Op::IndexSelect { x, axis, indices } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis)?;
                let m = indices.len();
                let mut gx = vec![F::zero(); outer * n * inner];
                for o in 0..outer {
                    for (i, &src) in indices.iter().enumerate() {
                        let s = (o * m + i) * inner;
                        let d = (o * n + src) * inner;
                        for j in 0..inner {
                            gx[d + j] += g[s + j];
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::IndexScatter { x, axis, indices } => {
                let (outer, m, inner) = split_axis(self.shape(*x), *axis)?;
                let size = node.value.shape()[*axis];
                let mut gx = Vec::with_capacity(outer * m * inner);
                for o in 0..outer {
                    for &t in indices {
                        let s = (o * size + t) * inner;
                        gx.extend_from_slice(&g[s..s + inner]);
                    }
                }
                out.push((*x, gx));
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), axis)?;
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = F::zero();
                        for j in 0..n {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            gx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                out.push((x, gx));
            }
            Op::LayerNorm { x, axis, rstd } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis)?;
                let nf = F::of(n as f64);
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let (mut mg, mut mgy) = (F::zero(), F::zero());
                        for j in 0..n {
                            let k = base + j * inner;
                            mg += g[k];
                            mgy += g[k] * y[k];
                        }
                        mg /= nf;
                        mgy /= nf;
                        let r = rstd[o * inner + i];
                        for j in 0..n {
                            let k = base + j * inner;
                            gx[k] = r * (g[k] - mg - y[k] * mgy);
                        }
                    }
                }
                out.push((*x, gx));
            }
            &Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(x), axis)?;
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((x, gx));
            }
            &Op::Gelu(x) => {
                let xs = self.value(x).data();
                let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
                let three = F::of(3.0);
                let gx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| {
                        let t = super::ops::tanh_via_exp(c * (v + a * v * v * v));
                        let d = half * (F::one() + t)
                            + half * v * (F::one() - t * t) * c * (F::one() + three * a * v * v);
                        g * d
                    })
                    .collect();
                out.push((x, gx));
            }
            &Op::Sigmoid(x) => {
                let gx = y
                    .iter()
                    .zip(g)
                    .map(|(&s, &g)| g * s * (F::one() - s))
                    .collect();
                out.push((x, gx));
            }
            &Op::Silu(x) => {
                let xs = self.value(x).data();
                let gx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| {
                        let s = F::one() / (F::one() + (-v).exp());
                        g * s * (F::one() + v * (F::one() - s))
                    })
                    .collect();
                out.push((x, gx));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis)?;
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[s..s + n * inner]);
                        }
                        out.push((v, gv));
                    }
                    offset += n;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(x), axis)?;
                let len = node.value.shape()[axis];
                let mut gx = vec![F::zero(); outer * n * inner];
                for o in 0..outer {
                    let d = (o * n + start) * inner;
                    gx[d..d + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((x, gx));
            }
        }
        Ok(out)
    }

    fn matmul_grads(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &[F],
        out: &mut Vec<(Var, Vec<F>)>,
    ) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        let (da, db) = (va.data(), vb.data());
        let (want_a, want_b) = (self.wants(a), self.wants(b));
        let mut ga = if want_a { vec![F::zero(); da.len()] } else { Vec::new() };
        let mut gb = if want_b { vec![F::zero(); db.len()] } else { Vec::new() };

        let mut one = |pa: usize, pb: usize, pc: usize, rows: usize| {
            let gm = &g[pc * rows * n..(pc + 1) * rows * n];
            let am = &da[pa * rows * k..(pa + 1) * rows * k];
            let bm = &db[pb * k * n..(pb + 1) * k * n];
            if want_a {
                // dA = G * op(B)^T
                let dst = &mut ga[pa * rows * k..(pa + 1) * rows * k];
                gemm(rows, n, k, gm, false, bm, !trans_b, dst, true);
            }
            if want_b {
                let dst = &mut gb[pb * k * n..(pb + 1) * k * n];
                if trans_b {
                    // dB (n x k) = G^T * A
                    gemm(n, rows, k, gm, true, am, false, dst, true);
                } else {
                    // dB (k x n) = A^T * G
                    gemm(k, rows, n, am, true, gm, false, dst, true);
                }
            }
        };

        if sb.len() == 2 {
            one(0, 0, 0, numel(&sa[..sa.len() - 1]));
        } else {
            let (_, pairs) = batch_pairs(&sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
            for (i, &(pa, pb)) in pairs.iter().enumerate() {
                one(pa, pb, i, m);
            }
        }
        if want_a {
            out.push((a, ga));
        }
        if want_b {
            out.push((b, gb));
        }
        Ok(())
    }
}
