use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, split_axis, strides, Tensor};

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Numpy-style broadcast of two shapes, visited one innermost row at a time.
pub(crate) struct Broadcast {
    pub(crate) out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    pub(crate) fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let (sa, sb) = (strides(&pa), strides(&pb));
        let mut out_shape = Vec::with_capacity(rank);
        let mut a_strides = Vec::with_capacity(rank);
        let mut b_strides = Vec::with_capacity(rank);
        for i in 0..rank {
            let (da, db) = (pa[i], pb[i]);
            let d = if da == db || db == 1 {
                da
            } else if da == 1 {
                db
            } else {
                return Err(Error::shape(op, a, b));
            };
            out_shape.push(d);
            a_strides.push(if da == 1 { 0 } else { sa[i] });
            b_strides.push(if db == 1 { 0 } else { sb[i] });
        }
        Ok(Self {
            out_shape,
            a_strides,
            b_strides,
        })
    }

    /// Calls `f(out_offset, a_offset, b_offset, len, a_step, b_step)` for
    /// every innermost row of the output.
    pub(crate) fn rows(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let rank = self.out_shape.len();
        if rank == 0 {
            f(0, 0, 0, 1, 0, 0);
            return;
        }
        if numel(&self.out_shape) == 0 {
            return;
        }
        let last = rank - 1;
        let len = self.out_shape[last];
        let (sa, sb) = (self.a_strides[last], self.b_strides[last]);
        let mut idx = vec![0usize; last];
        let (mut ao, mut bo, mut oo) = (0usize, 0usize, 0usize);
        loop {
            f(oo, ao, bo, len, sa, sb);
            oo += len;
            let mut ax = last;
            loop {
                if ax == 0 {
                    return;
                }
                ax -= 1;
                idx[ax] += 1;
                ao += self.a_strides[ax];
                bo += self.b_strides[ax];
                if idx[ax] < self.out_shape[ax] {
                    break;
                }
                ao -= self.a_strides[ax] * self.out_shape[ax];
                bo -= self.b_strides[ax] * self.out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
}

/// Offsets (in matrices) of each broadcast batch element of a batched matmul.
pub(crate) fn batch_pairs(
    ba: &[usize],
    bb: &[usize],
) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    let bc = Broadcast::new("matmul", ba, bb)?;
    let mut pairs = Vec::with_capacity(numel(&bc.out_shape).max(1));
    bc.rows(|_, a, b, len, sa, sb| {
        for j in 0..len {
            pairs.push((a + j * sa, b + j * sb));
        }
    });
    Ok((bc.out_shape, pairs))
}

/// `tanh` through a single `exp`, noticeably cheaper than libm's `tanhf`.
pub(crate) fn tanh_via_exp<F: Scalar>(u: F) -> F {
    let two = F::of(2.0);
    two / (F::one() + (-two * u).exp()) - F::one()
}

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + tanh_via_exp(c * (x + a * x * x * x)))
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Scalar> Graph<F> {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let bc = Broadcast::new(name, va.shape(), vb.shape())?;
            let (da, db) = (va.data(), vb.data());
            let mut data = vec![F::zero(); numel(&bc.out_shape)];
            bc.rows(|o, ao, bo, len, sa, sb| {
                for j in 0..len {
                    data[o + j] = f(da[ao + j * sa], db[bo + j * sb]);
                }
            });
            Tensor::new(bc.out_shape, data)?
        };
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, op, ng))
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let out = self.value(x).map(f);
        let ng = self.requires_grad(x);
        self.push(out, op, ng)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// Matrix product over the two trailing axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` over the two trailing axes without materializing `b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (out_shape, data) = if sb.len() == 2 {
            // fold every leading axis of `a` into the row count
            let rows = numel(&sa[..sa.len() - 1]);
            let mut c = vec![F::zero(); rows * n];
            gemm(rows, k, n, da, false, db, trans_b, &mut c, false);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (shape, c)
        } else {
            let (batch, pairs) = batch_pairs(&sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
            let mut c = vec![F::zero(); pairs.len() * m * n];
            for (i, &(pa, pb)) in pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &da[pa * m * k..(pa + 1) * m * k],
                    false,
                    &db[pb * k * n..(pb + 1) * k * n],
                    trans_b,
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            let mut shape = batch;
            shape.push(m);
            shape.push(n);
            (shape, c)
        };
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::MatMul { a, b, trans_b },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        let ng = self.requires_grad(x);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), ng))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        self.check_axis(x, a0.max(a1))?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    /// Gathers slabs along `axis`: `out[.., i, ..] = x[.., indices[i], ..]`.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: n,
            });
        }
        let src = self.value(x).data();
        let m = indices.len();
        let mut data = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * n + i) * inner;
                data.extend_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = m;
        let ng = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Scatter-add along `axis` into a zero tensor of extent `size`:
    /// `out[.., indices[i], ..] += x[.., i, ..]`.
    pub fn index_scatter(
        &mut self,
        x: Var,
        axis: usize,
        indices: &[usize],
        size: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, m, inner) = split_axis(&shape, axis)?;
        if m != indices.len() {
            return Err(Error::shape("index_scatter", &shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: size,
            });
        }
        let src = self.value(x).data();
        let mut data = vec![F::zero(); outer * size * inner];
        for o in 0..outer {
            for (i, &t) in indices.iter().enumerate() {
                let s = (o * m + i) * inner;
                let d = (o * size + t) * inner;
                for j in 0..inner {
                    data[d + j] += src[s + j];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = size;
        let ng = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::IndexScatter {
                x,
                axis,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return Err(Error::shape("embedding", self.shape(table), &[ids.len()]));
        }
        self.index_select(table, 0, ids)
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = split_axis(self.shape(x), axis)?;
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..n {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = F::zero();
                for j in 0..n {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                let inv = F::one() / sum;
                for j in 0..n {
                    data[base + j * inner] *= inv;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis }, ng))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance.
    /// No affine parameters.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if n < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "layer_norm needs an axis of length >= 2".into(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(outer * inner);
        let nf = F::of(n as f64);
        let eps = F::of(eps);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mean = F::zero();
                for j in 0..n {
                    mean += data[base + j * inner];
                }
                mean /= nf;
                let mut var = F::zero();
                for j in 0..n {
                    let d = data[base + j * inner] - mean;
                    var += d * d;
                }
                var /= nf;
                let r = F::one() / (var + eps).sqrt();
                for j in 0..n {
                    let v = &mut data[base + j * inner];
                    *v = (*v - mean) * r;
                }
                rstd.push(r);
            }
        }
        let ng = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::LayerNorm { x, axis, rstd }, ng))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let s = (o * n + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[s + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let ng = self.requires_grad(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SumAxis { x, axis }, ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or(Error::InvalidAxis {
                axis,
                rank: self.shape(x).len(),
            })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let ng = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::config("concat of an empty list"))?;
        let base_shape = self.shape(first).to_vec();
        split_axis(&base_shape, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rank = s.len() == base_shape.len();
            if !same_rank
                || s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis)?;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let ng = xs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                extent: n,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.requires_grad(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Narrow { x, axis, start }, ng))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let n = *self.shape(x).get(axis).ok_or(Error::InvalidAxis {
            axis,
            rank: self.shape(x).len(),
        })?;
        if sizes.iter().sum::<usize>() != n {
            return Err(Error::shape("split", self.shape(x), sizes));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }
}
