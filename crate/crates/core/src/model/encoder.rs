//! Small trainable slice encoder: 2D patchify, a learned class token and a
//! few pre-norm global-attention layers.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::embed::positional_embedding_2d;
use crate::attention::{multi_head, AttentionParams};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 4 * dim, Init::Xavier, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * dim, dim, Init::Xavier, true, rng)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: AttentionParams,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct SliceEncoder {
    pub patch: usize,
    pub dim: usize,
    pub channels: usize,
    embed: Linear,
    cls: ParamId,
    layers: Vec<EncoderLayer>,
}

/// `[G, d1, d2, c]` → `[G, (d1/p)(d2/p), p·p·c]`, patches row-major.
pub fn patchify_2d<F: Scalar>(g: &mut Graph<F>, x: Var, patch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("slice stack must be [G, d1, d2, c] with sides divisible by {patch}"),
        });
    }
    let (n1, n2) = (s[1] / patch, s[2] / patch);
    let x = g.reshape(x, &[s[0], n1, patch, n2, patch, s[3]])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, &[s[0], n1 * n2, patch * patch * s[3]])
}

impl SliceEncoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        patch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = Linear::new(
            store,
            &format!("{name}.patch"),
            patch * patch * channels,
            dim,
            Init::Xavier,
            true,
            rng,
        )?;
        let cls = store.register(
            format!("{name}.cls"),
            Tensor::from_fn(&[dim], |_| F::of(rng.random_range(-0.02..0.02))),
        )?;
        let layers = (0..layers)
            .map(|i| {
                Ok(EncoderLayer {
                    attn: AttentionParams::new(store, &format!("{name}.layers.{i}.attn"), dim, heads, rng)?,
                    ffn: FeedForward::new(store, &format!("{name}.layers.{i}.ffn"), dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            patch,
            dim,
            channels,
            embed,
            cls,
            layers,
        })
    }

    /// Encodes `[G, d1, d2, c]` slices into class tokens `[G, D]` and patch
    /// tokens `[G, K, D]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, slices: Var) -> Result<(Var, Var)> {
        let s = g.shape(slices).to_vec();
        if s.len() != 4 || s[3] != self.channels {
            return Err(Error::shape("slice encoder", &s, &[0, 0, 0, self.channels]));
        }
        let n = s[0];
        let grid = [s[1] / self.patch.max(1), s[2] / self.patch.max(1)];
        let k = grid[0] * grid[1];

        let x = patchify_2d(g, slices, self.patch)?;
        let x = self.embed.forward(g, p, x)?;
        let pos = g.constant(positional_embedding_2d(grid, self.dim));
        let x = g.add(x, pos)?;
        let ones = g.constant(Tensor::full(&[n, 1, 1], F::one()));
        let cls = g.reshape(p[self.cls], &[1, 1, self.dim])?;
        let cls = g.mul(ones, cls)?;
        let mut x = g.concat(&[cls, x], 1)?;

        for layer in &self.layers {
            let h = g.layer_norm(x, 2, LN_EPS)?;
            let a = multi_head(g, p, &layer.attn, h, h, None)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, 2, LN_EPS)?;
            let f = layer.ffn.forward(g, p, h)?;
            x = g.add(x, f)?;
        }
        let x = g.layer_norm(x, 2, LN_EPS)?;
        let cls = g.narrow(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[n, self.dim])?;
        let tokens = g.narrow(x, 1, 1, k)?;
        Ok((cls, tokens))
    }
}
