//! Multi-head global, window, plane and cross attention over a 3D token
//! grid.
//!
//! Tokens are laid out as `x * (Y * Z) + y * Z + z` for patch coordinate
//! `(x, y, z)`. Window and plane attention regroup tokens with an index
//! permutation so that each group is contiguous, run batched attention on
//! `[B * groups, group_len, D]`, and scatter the result back.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::Axis;
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `B × L × D` tokens on an `X × Y × Z` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Var,
    pub grid: [usize; 3],
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sequence position of patch coordinate `(x, y, z)`.
#[inline]
pub fn token_index(grid: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * grid[1] + y) * grid[2] + z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Global,
    /// Non-overlapping `w × w × w` windows.
    Window(usize),
    /// Tokens sharing their coordinate along the axis.
    Plane(Axis),
}

/// Query/key/value/output projections (`D × D` each, with bias).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(alloc::format!(
                "hidden size {dim} is not divisible by {heads} heads"
            )));
        }
        let mut lin = |n: &str| {
            Linear::new(store, &alloc::format!("{name}.{n}"), dim, dim, Init::Xavier, true, rng)
        };
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Token groups for `mode`: `perm[g * group_len + j]` is the sequence
/// position of member `j` of group `g`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    pub perm: Vec<usize>,
    pub groups: usize,
    pub group_len: usize,
}

impl Grouping {
    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Group id of every sequence position.
    pub fn membership(&self) -> Vec<usize> {
        let mut m = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            m[p] = i / self.group_len;
        }
        m
    }
}

pub fn grouping(grid: [usize; 3], mode: AttentionMode) -> Result<Grouping> {
    let [gx, gy, gz] = grid;
    let l = gx * gy * gz;
    if l == 0 {
        return Err(Error::config("empty token grid"));
    }
    match mode {
        AttentionMode::Global => Ok(Grouping {
            perm: (0..l).collect(),
            groups: 1,
            group_len: l,
        }),
        AttentionMode::Window(w) => {
            if w == 0 || grid.iter().any(|&e| e % w != 0) {
                return Err(Error::config(alloc::format!(
                    "token grid {grid:?} is not divisible by window {w}"
                )));
            }
            let mut perm = Vec::with_capacity(l);
            for bx in 0..gx / w {
                for by in 0..gy / w {
                    for bz in 0..gz / w {
                        for lx in 0..w {
                            for ly in 0..w {
                                for lz in 0..w {
                                    perm.push(token_index(grid, bx * w + lx, by * w + ly, bz * w + lz));
                                }
                            }
                        }
                    }
                }
            }
            Ok(Grouping {
                perm,
                groups: l / (w * w * w),
                group_len: w * w * w,
            })
        }
        AttentionMode::Plane(axis) => {
            let a = axis.index();
            let (f1, f2) = axis.face();
            let mut perm = Vec::with_capacity(l);
            let mut pos = [0usize; 3];
            for i in 0..grid[a] {
                pos[a] = i;
                for j in 0..grid[f1] {
                    pos[f1] = j;
                    for k in 0..grid[f2] {
                        pos[f2] = k;
                        perm.push(token_index(grid, pos[0], pos[1], pos[2]));
                    }
                }
            }
            Ok(Grouping {
                perm,
                groups: grid[a],
                group_len: grid[f1] * grid[f2],
            })
        }
    }
}

/// `L × L` boolean mask: `true` where query and key share a group.
pub fn group_mask(grid: [usize; 3], mode: AttentionMode) -> Result<Vec<bool>> {
    let m = grouping(grid, mode)?.membership();
    let l = m.len();
    let mut mask = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            mask.push(m[i] == m[j]);
        }
    }
    Ok(mask)
}

/// Scaled dot-product multi-head attention followed by the output
/// projection. `queries` is `[G, Lq, D]`, `context` is `[G, Lk, D]`;
/// `mask` is an additive `[Lq, Lk]` bias.
pub fn multi_head<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    params: &AttentionParams,
    queries: Var,
    context: Var,
    mask: Option<&Tensor<F>>,
) -> Result<Var> {
    let qs = g.shape(queries).to_vec();
    let ks = g.shape(context).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != params.dim || ks[2] != params.dim {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let (groups, lq, lk) = (qs[0], qs[1], ks[1]);
    let (h, dh) = (params.heads, params.head_dim());

    let split_heads = |g: &mut Graph<F>, x: Var, len: usize| -> Result<Var> {
        let x = g.reshape(x, &[groups, len, h, dh])?;
        g.permute(x, &[0, 2, 1, 3])
    };
    let q = params.q.forward(g, p, queries)?;
    let k = params.k.forward(g, p, context)?;
    let v = params.v.forward(g, p, context)?;
    let q = split_heads(g, q, lq)?;
    let k = split_heads(g, k, lk)?;
    let v = split_heads(g, v, lk)?;

    // scaling q instead of the scores avoids one L×L temporary
    let q = g.scale(q, 1.0 / libm::sqrt(dh as f64));
    let mut scores = g.matmul_nt(q, k)?;
    if let Some(m) = mask {
        if m.shape() != [lq, lk] {
            return Err(Error::shape("attention mask", m.shape(), &[lq, lk]));
        }
        let mv = g.constant(m.clone());
        scores = g.add(scores, mv)?;
    }
    let attn = g.softmax(scores, 3)?;
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[groups, lq, params.dim])?;
    params.o.forward(g, p, out)
}

fn check_tokens<F: Scalar>(g: &Graph<F>, x: Var, grid: [usize; 3], dim: usize) -> Result<usize> {
    let s = g.shape(x);
    let l: usize = grid.iter().product();
    if s.len() != 3 || s[1] != l || s[2] != dim {
        return Err(Error::shape("token grid", s, &[0, l, dim]));
    }
    Ok(s[0])
}

/// Self-attention restricted by `mode`, without the residual connection.
pub fn self_attention_branch<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    params: &AttentionParams,
    x: Var,
    grid: [usize; 3],
    mode: AttentionMode,
) -> Result<Var> {
    let b = check_tokens(g, x, grid, params.dim)?;
    let groups = grouping(grid, mode)?;
    let l = groups.perm.len();
    if groups.groups == 1 && groups.is_identity() {
        return multi_head(g, p, params, x, x, None);
    }
    let identity = groups.is_identity();
    let gathered = if identity {
        x
    } else {
        g.index_select(x, 1, &groups.perm)?
    };
    let grouped = g.reshape(gathered, &[b * groups.groups, groups.group_len, params.dim])?;
    let out = multi_head(g, p, params, grouped, grouped, None)?;
    let out = g.reshape(out, &[b, l, params.dim])?;
    if identity {
        Ok(out)
    } else {
        g.index_scatter(out, 1, &groups.perm, l)
    }
}

fn with_residual<F: Scalar>(g: &mut Graph<F>, tg: &TokenGrid, branch: Var) -> Result<TokenGrid> {
    Ok(TokenGrid {
        tokens: g.add(branch, tg.tokens)?,
        grid: tg.grid,
    })
}

/// `Linear(attention(x)) + x` over all tokens.
pub fn global_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    params: &AttentionParams,
    tg: &TokenGrid,
) -> Result<TokenGrid> {
    let br = self_attention_branch(g, p, params, tg.tokens, tg.grid, AttentionMode::Global)?;
    with_residual(g, tg, br)
}

/// Attention inside non-overlapping `w³` windows, plus residual.
pub fn window_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    params: &AttentionParams,
    tg: &TokenGrid,
    w: usize,
) -> Result<TokenGrid> {
    let br = self_attention_branch(g, p, params, tg.tokens, tg.grid, AttentionMode::Window(w))?;
    with_residual(g, tg, br)
}

/// Attention among tokens with equal coordinate along `axis`, plus residual.
pub fn plane_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    params: &AttentionParams,
    tg: &TokenGrid,
    axis: Axis,
) -> Result<TokenGrid> {
    let br = self_attention_branch(g, p, params, tg.tokens, tg.grid, AttentionMode::Plane(axis))?;
    with_residual(g, tg, br)
}

/// Global attention where query `i` may only attend to key `j` when
/// `allowed[i * L + j]`; every row needs at least one allowed key.
pub fn masked_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    params: &AttentionParams,
    tg: &TokenGrid,
    allowed: &[bool],
) -> Result<TokenGrid> {
    check_tokens(g, tg.tokens, tg.grid, params.dim)?;
    let l = tg.len();
    if allowed.len() != l * l {
        return Err(Error::shape("attention mask", &[allowed.len()], &[l, l]));
    }
    if (0..l).any(|i| !allowed[i * l..(i + 1) * l].iter().any(|&a| a)) {
        return Err(Error::config("attention mask has a fully masked row"));
    }
    let bias = Tensor::new(
        vec![l, l],
        allowed
            .iter()
            .map(|&a| if a { F::zero() } else { F::neg_infinity() })
            .collect(),
    )?;
    let br = multi_head(g, p, params, tg.tokens, tg.tokens, Some(&bias))?;
    with_residual(g, tg, br)
}

/// Queries from the tokens, keys and values from `context` (`B × K × D`),
/// without the residual. An empty context contributes `None`.
pub fn cross_attention_branch<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    params: &AttentionParams,
    x: Var,
    context: Var,
) -> Result<Option<Var>> {
    let (xs, cs) = (g.shape(x).to_vec(), g.shape(context).to_vec());
    if cs.len() != 3 || xs.len() != 3 || cs[0] != xs[0] || cs[2] != xs[2] {
        return Err(Error::shape("cross attention", &xs, &cs));
    }
    if cs[1] == 0 {
        return Ok(None);
    }
    multi_head(g, p, params, x, context, None).map(Some)
}

pub fn cross_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    params: &AttentionParams,
    tg: &TokenGrid,
    context: Var,
) -> Result<TokenGrid> {
    match cross_attention_branch(g, p, params, tg.tokens, context)? {
        Some(br) => with_residual(g, tg, br),
        None => Ok(*tg),
    }
}

/// Multiply-accumulate count of the `Q Kᵀ` and `softmax · V` stages for one
/// sequence (projections excluded).
pub fn attention_flops(mode: AttentionMode, grid: [usize; 3], dim: usize) -> Result<u64> {
    let gr = grouping(grid, mode)?;
    let (groups, len, d) = (gr.groups as u64, gr.group_len as u64, dim as u64);
    Ok(2 * groups * len * len * d)
}
