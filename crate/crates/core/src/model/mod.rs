//! The conditional diffusion transformer: 3D patch embedding, adaLN/gate
//! modulated layers with self-, cross- and feed-forward sub-layers, a slice
//! encoder and the plane-position conditioning stream.

mod config;
pub mod embed;
pub mod encoder;

pub use config::{parse_bool, parse_list, parse_num, parse_pairs, LayerKind, ModelConfig};
pub use encoder::{patchify_2d, FeedForward, SliceEncoder};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_attention_branch, self_attention_branch, AttentionMode, AttentionParams};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{build_plane_embedding, pad_slices_to_volume, Axis, PlaneSlice};
use crate::nn::{Bound, Init, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use embed::{positional_embedding_3d, timestep_embedding};
use encoder::LN_EPS;

/// `[B, dx, dy, dz, C]` → `[B, L, px·py·pz·C]` with token order
/// `x·(Y·Z) + y·Z + z`.
pub fn patchify<F: Scalar>(g: &mut Graph<F>, x: Var, patch: [usize; 3]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 || (0..3).any(|a| patch[a] == 0 || s[a + 1] % patch[a] != 0) {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("voxel batch must be [B, dx, dy, dz, C] divisible by patch {patch:?}"),
        });
    }
    let [px, py, pz] = patch;
    let (gx, gy, gz) = (s[1] / px, s[2] / py, s[3] / pz);
    let x = g.reshape(x, &[s[0], gx, px, gy, py, gz, pz, s[4]])?;
    let x = g.permute(x, &[0, 1, 3, 5, 2, 4, 6, 7])?;
    g.reshape(x, &[s[0], gx * gy * gz, px * py * pz * s[4]])
}

/// Inverse of [`patchify`] for `[B, L, px·py·pz·C]` tokens.
pub fn unpatchify<F: Scalar>(
    g: &mut Graph<F>,
    tokens: Var,
    grid: [usize; 3],
    patch: [usize; 3],
    channels: usize,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let pv: usize = patch.iter().product();
    let l: usize = grid.iter().product();
    if s.len() != 3 || s[1] != l || s[2] != pv * channels {
        return Err(Error::shape("unpatchify", &s, &[0, l, pv * channels]));
    }
    let [gx, gy, gz] = grid;
    let [px, py, pz] = patch;
    let x = g.reshape(tokens, &[s[0], gx, gy, gz, px, py, pz, channels])?;
    let x = g.permute(x, &[0, 1, 4, 2, 5, 3, 6, 7])?;
    g.reshape(x, &[s[0], gx * px, gy * py, gz * pz, channels])
}

/// `(1 + γ) · LN(x) + β` where `modulation` is `[B, 2D]` holding `γ` then
/// `β`, broadcast over the tokens of `x` (`[B, L, D]`).
pub fn adaln_modulate<F: Scalar>(g: &mut Graph<F>, x: Var, modulation: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, d) = (s[0], s[2]);
    let parts = g.split(modulation, 1, &[d, d])?;
    let gamma = g.reshape(parts[0], &[b, 1, d])?;
    let beta = g.reshape(parts[1], &[b, 1, d])?;
    let ln = g.layer_norm(x, 2, LN_EPS)?;
    let scale = g.add_scalar(gamma, 1.0);
    let y = g.mul(ln, scale)?;
    g.add(y, beta)
}

/// `α · branch` with `α` (`[B, D]`) broadcast over tokens.
pub fn residual_scale<F: Scalar>(g: &mut Graph<F>, branch: Var, alpha: Var) -> Result<Var> {
    let s = g.shape(alpha).to_vec();
    let a = g.reshape(alpha, &[s[0], 1, s[1]])?;
    g.mul(branch, a)
}

/// Shift/scale and gate producers of one sub-layer, both zero-initialized.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub adaln: Linear,
    pub gate: Linear,
}

impl Modulation {
    fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            adaln: Linear::new(store, &format!("{name}.adaln"), dim, 2 * dim, Init::Zero, true, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), dim, dim, Init::Zero, true, rng)?,
        })
    }

    /// Runs `x + α · op(adaLN(x))`.
    fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        silu_c: Var,
        op: impl FnOnce(&mut Graph<F>, Var) -> Result<Option<Var>>,
    ) -> Result<Var> {
        let m = self.adaln.forward(g, p, silu_c)?;
        let h = adaln_modulate(g, x, m)?;
        match op(g, h)? {
            Some(branch) => {
                let alpha = self.gate.forward(g, p, silu_c)?;
                let scaled = residual_scale(g, branch, alpha)?;
                g.add(x, scaled)
            }
            None => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DitLayer {
    pub kind: LayerKind,
    /// One parameter set, or one per axis for unshared plane attention.
    pub self_attn: Vec<AttentionParams>,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForward,
    pub modulation: [Modulation; 3],
}

impl DitLayer {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &ModelConfig,
        index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let name = format!("layers.{index}");
        let (d, h) = (cfg.hidden, cfg.heads);
        let kind = cfg.layer_kind(index);
        let self_attn = if kind == LayerKind::Plane && !cfg.shared_plane_weights {
            Axis::ALL
                .iter()
                .map(|a| AttentionParams::new(store, &format!("{name}.self_attn.{a}"), d, h, rng))
                .collect::<Result<_>>()?
        } else {
            vec![AttentionParams::new(store, &format!("{name}.self_attn"), d, h, rng)?]
        };
        let cross_attn = AttentionParams::new(store, &format!("{name}.cross_attn"), d, h, rng)?;
        let ffn = FeedForward::new(store, &format!("{name}.ffn"), d, rng)?;
        let modulation = [
            Modulation::new(store, &format!("{name}.mod_self"), d, rng)?,
            Modulation::new(store, &format!("{name}.mod_cross"), d, rng)?,
            Modulation::new(store, &format!("{name}.mod_ffn"), d, rng)?,
        ];
        Ok(Self {
            kind,
            self_attn,
            cross_attn,
            ffn,
            modulation,
        })
    }

    /// Self-attention increment. Plane layers run the x, y and z passes in
    /// sequence, each with its own residual, and return the summed increment.
    pub fn self_attention<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        h: Var,
        grid: [usize; 3],
        window: usize,
    ) -> Result<Var> {
        match self.kind {
            LayerKind::Global => self_attention_branch(g, p, &self.self_attn[0], h, grid, AttentionMode::Global),
            LayerKind::Window => self_attention_branch(g, p, &self.self_attn[0], h, grid, AttentionMode::Window(window)),
            LayerKind::Plane => {
                let mut y = h;
                for (i, axis) in Axis::ALL.into_iter().enumerate() {
                    let params = &self.self_attn[i.min(self.self_attn.len() - 1)];
                    let br = self_attention_branch(g, p, params, y, grid, AttentionMode::Plane(axis))?;
                    y = g.add(y, br)?;
                }
                g.sub(y, h)
            }
        }
    }

    /// One layer on `[B, L, D]` tokens. `context` is `[B, K, D]` or absent.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        silu_c: Var,
        context: Option<Var>,
        grid: [usize; 3],
        window: usize,
    ) -> Result<Var> {
        let x = self.modulation[0].apply(g, p, x, silu_c, |g, h| {
            self.self_attention(g, p, h, grid, window).map(Some)
        })?;
        let x = self.modulation[1].apply(g, p, x, silu_c, |g, h| match context {
            Some(ctx) => cross_attention_branch(g, p, &self.cross_attn, h, ctx),
            None => Ok(None),
        })?;
        self.modulation[2].apply(g, p, x, silu_c, |g, h| self.ffn.forward(g, p, h).map(Some))
    }
}

/// Conditioning inputs of one sample: its slices in caller order.
pub type SampleCondition = Vec<PlaneSlice>;

/// Condition streams of a batch, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct Encoding {
    /// Projected class tokens `[B, D]` (zero for samples without planes).
    pub f_p: Var,
    /// Projected plane-position embedding `[B, D]`.
    pub e_p: Var,
    /// Cross-attention context `[B, K, D]`; absent when no sample has planes.
    pub context: Option<Var>,
    /// Slices scattered into the volume `[B, dx, dy, dz, c(+1)]`.
    pub volume: Option<Var>,
}

/// Values of an [`Encoding`], reusable across graphs (e.g. every sampling
/// step) without recomputing the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoding<F> {
    pub f_p: Tensor<F>,
    pub e_p: Tensor<F>,
    pub context: Option<Tensor<F>>,
    pub volume: Option<Tensor<F>>,
}

impl Encoding {
    pub fn freeze<F: Scalar>(&self, g: &Graph<F>) -> FrozenEncoding<F> {
        FrozenEncoding {
            f_p: g.value(self.f_p).clone(),
            e_p: g.value(self.e_p).clone(),
            context: self.context.map(|c| g.value(c).clone()),
            volume: self.volume.map(|v| g.value(v).clone()),
        }
    }
}

impl<F: Scalar> FrozenEncoding<F> {
    pub fn bind(&self, g: &mut Graph<F>) -> Encoding {
        Encoding {
            f_p: g.constant(self.f_p.clone()),
            e_p: g.constant(self.e_p.clone()),
            context: self.context.as_ref().map(|c| g.constant(c.clone())),
            volume: self.volume.as_ref().map(|v| g.constant(v.clone())),
        }
    }

    pub fn batch(&self) -> usize {
        self.f_p.shape()[0]
    }
}

/// Intermediate nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub condition: Var,
    /// Token state entering each layer, then the state after the last one.
    pub residual: Vec<Var>,
    pub output: Var,
}

/// The denoiser `ε_θ(S_t, c(t, P, E_P))`. Parameters live in a separate
/// [`ParamStore`] and are bound to a graph per forward pass.
#[derive(Debug, Clone)]
pub struct Dit {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub t_mlp: Mlp,
    pub plane_mlp: Mlp,
    pub cls_mlp: Mlp,
    pub lambda1: ParamId,
    pub lambda2: ParamId,
    pub encoder: SliceEncoder,
    pub layers: Vec<DitLayer>,
    pub final_adaln: Linear,
    pub head: Linear,
}

impl Dit {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        config: &ModelConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let d = cfg.hidden;
        let patch_in = cfg.input_channels() * cfg.patch_volume();
        let patch_embed = Linear::new(store, "patch_embed", patch_in, d, Init::Xavier, true, rng)?;
        let t_mlp = Mlp::new(store, "t_embed", cfg.t_embed_dim, d, d, rng)?;
        let plane_mlp = Mlp::new(store, "plane_embed", 4 * cfg.d_pe * cfg.max_planes, d, d, rng)?;
        let cls_mlp = Mlp::new(store, "cls_proj", cfg.max_planes * d, d, d, rng)?;
        let lambda1 = store.register("lambda1", Tensor::full(&[1], F::one()))?;
        let lambda2 = store.register("lambda2", Tensor::full(&[1], F::one()))?;
        let encoder = SliceEncoder::new(
            store,
            "encoder",
            cfg.channels,
            d,
            cfg.heads,
            cfg.encoder_layers,
            cfg.encoder_patch,
            rng,
        )?;
        let layers = (0..cfg.layers)
            .map(|i| DitLayer::new(store, &cfg, i, rng))
            .collect::<Result<_>>()?;
        let final_adaln = Linear::new(store, "final.adaln", d, 2 * d, Init::Zero, true, rng)?;
        let head = Linear::new(
            store,
            "final.linear",
            d,
            cfg.patch_volume() * cfg.channels,
            Init::Zero,
            true,
            rng,
        )?;
        Ok(Self {
            config: cfg,
            patch_embed,
            t_mlp,
            plane_mlp,
            cls_mlp,
            lambda1,
            lambda2,
            encoder,
            layers,
            final_adaln,
            head,
        })
    }

    /// Builds the model and a freshly initialized parameter store.
    pub fn init<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Runs the slice encoder and plane-embedding projection for a batch.
    /// Every sample must yield the same number of encoder tokens.
    pub fn encode<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, conds: &[SampleCondition]) -> Result<Encoding> {
        let cfg = &self.config;
        let (b, d) = (conds.len(), cfg.hidden);
        if b == 0 {
            return Err(Error::config("empty batch"));
        }

        // group slices of equal shape so each group is one encoder batch
        let mut groups: BTreeMap<Vec<usize>, Vec<(usize, usize)>> = BTreeMap::new();
        for (bi, planes) in conds.iter().enumerate() {
            if planes.len() > cfg.max_planes {
                return Err(Error::TooManyPlanes {
                    given: planes.len(),
                    max: cfg.max_planes,
                });
            }
            for (j, s) in planes.iter().enumerate() {
                groups.entry(s.samples.shape().to_vec()).or_default().push((bi, j));
            }
        }
        let mut cls_parts = Vec::new();
        let mut tok_parts = Vec::new();
        let mut cls_row: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut tok_rows: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        let (mut cls_off, mut tok_off) = (0, 0);
        for members in groups.values() {
            let stack: Vec<Tensor<F>> = members
                .iter()
                .map(|&(bi, j)| conds[bi][j].samples.cast())
                .collect();
            let x = g.constant(Tensor::stack(&stack)?);
            let (cls, tok) = self.encoder.forward(g, p, x)?;
            let k = g.shape(tok)[1];
            let n = members.len();
            for (i, &m) in members.iter().enumerate() {
                cls_row.insert(m, cls_off + i);
                tok_rows.insert(m, (tok_off + i * k, k));
            }
            cls_parts.push(cls);
            tok_parts.push(g.reshape(tok, &[n * k, d])?);
            cls_off += n;
            tok_off += n * k;
        }

        // class tokens: caller order, zero rows for missing planes
        cls_parts.push(g.constant(Tensor::zeros(&[1, d])));
        let cls_all = g.concat(&cls_parts, 0)?;
        let mut idx = Vec::with_capacity(b * cfg.max_planes);
        for (bi, planes) in conds.iter().enumerate() {
            for j in 0..cfg.max_planes {
                idx.push(if j < planes.len() { cls_row[&(bi, j)] } else { cls_off });
            }
        }
        let cls = g.index_select(cls_all, 0, &idx)?;
        let cls = g.reshape(cls, &[b, cfg.max_planes * d])?;
        let f_p = self.cls_mlp.forward(g, p, cls)?;
        let present = Tensor::from_fn(&[b, 1], |i| if conds[i].is_empty() { F::zero() } else { F::one() });
        let present = g.constant(present);
        let f_p = g.mul(f_p, present)?;

        let mut e = Vec::with_capacity(b * 4 * cfg.d_pe * cfg.max_planes);
        for planes in conds {
            let specs: Vec<_> = planes.iter().map(|s| s.spec).collect();
            e.extend(build_plane_embedding(&specs, cfg.d_pe, cfg.max_planes)?.values);
        }
        let e = g.constant(Tensor::from_f64(&[b, 4 * cfg.d_pe * cfg.max_planes], &e)?);
        let e_p = self.plane_mlp.forward(g, p, e)?;

        let context = if tok_parts.is_empty() {
            None
        } else {
            let counts: Vec<usize> = conds
                .iter()
                .enumerate()
                .map(|(bi, planes)| (0..planes.len()).map(|j| tok_rows[&(bi, j)].1).sum())
                .collect();
            if counts.iter().any(|&k| k != counts[0]) {
                return Err(Error::config(format!(
                    "samples in one batch must share the encoder token count, got {counts:?}"
                )));
            }
            let all = g.concat(&tok_parts, 0)?;
            let mut rows = Vec::with_capacity(b * counts[0]);
            for (bi, planes) in conds.iter().enumerate() {
                for j in 0..planes.len() {
                    let (start, k) = tok_rows[&(bi, j)];
                    rows.extend(start..start + k);
                }
            }
            let ctx = g.index_select(all, 0, &rows)?;
            Some(g.reshape(ctx, &[b, counts[0], d])?)
        };

        let volume = if cfg.concat_condition {
            let vols: Vec<Tensor<F>> = conds
                .iter()
                .map(|planes| {
                    pad_slices_to_volume(planes, cfg.extents, cfg.channels, cfg.mask_channel).map(|v| v.cast())
                })
                .collect::<Result<_>>()?;
            Some(g.constant(Tensor::stack(&vols)?))
        } else {
            None
        };

        Ok(Encoding {
            f_p,
            e_p,
            context,
            volume,
        })
    }

    /// `c = t_emb + λ₁ F_P + λ₂ E_P` as `[B, D]`.
    pub fn condition<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, ts: &[usize], enc: &Encoding) -> Result<Var> {
        let cfg = &self.config;
        let temb = timestep_embedding::<F>(ts, cfg.t_embed_dim, cfg.timesteps)?;
        let temb = g.constant(temb);
        let temb = self.t_mlp.forward(g, p, temb)?;
        let a = g.mul(enc.f_p, p[self.lambda1])?;
        let b = g.mul(enc.e_p, p[self.lambda2])?;
        let c = g.add(temb, a)?;
        g.add(c, b)
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        noisy: Var,
        ts: &[usize],
        enc: &Encoding,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, p, noisy, ts, enc)?.output)
    }

    /// Forward pass on `[B, dx, dy, dz, c]`, predicting noise of the same
    /// shape, with the intermediate residual stream exposed.
    pub fn forward_traced<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        noisy: Var,
        ts: &[usize],
        enc: &Encoding,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let s = g.shape(noisy).to_vec();
        let [dx, dy, dz] = cfg.extents;
        if s.len() != 5 || s[1..] != [dx, dy, dz, cfg.channels] || ts.len() != s[0] {
            return Err(Error::shape("denoiser input", &s, &[ts.len(), dx, dy, dz, cfg.channels]));
        }
        let x = match enc.volume {
            Some(v) => g.concat(&[noisy, v], 4)?,
            None => noisy,
        };
        let grid = cfg.token_grid();
        let tokens = patchify(g, x, cfg.patch)?;
        let tokens = self.patch_embed.forward(g, p, tokens)?;
        let pos = g.constant(positional_embedding_3d(grid, cfg.hidden));
        let mut x = g.add(tokens, pos)?;

        let c = self.condition(g, p, ts, enc)?;
        let silu_c = g.silu(c);
        let mut residual = vec![x];
        for layer in &self.layers {
            x = layer.forward(g, p, x, silu_c, enc.context, grid, cfg.window)?;
            residual.push(x);
        }
        let m = self.final_adaln.forward(g, p, silu_c)?;
        let h = adaln_modulate(g, x, m)?;
        let out = self.head.forward(g, p, h)?;
        let output = unpatchify(g, out, grid, cfg.patch, cfg.channels)?;
        Ok(ForwardTrace {
            condition: c,
            residual,
            output,
        })
    }
}
