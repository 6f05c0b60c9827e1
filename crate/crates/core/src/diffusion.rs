//! DDPM noise schedule, forward noising, the ε-prediction loss and
//! ancestral sampling over a strided subset of timesteps.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Dit, SampleCondition};
use crate::nn::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear `β` from `beta_start` to `beta_end` over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(alloc::format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut acc = 1.0;
    let alpha_bar = alpha
        .iter()
        .map(|a| {
            acc *= a;
            acc
        })
        .collect();
    Ok(DiffusionSchedule { beta, alpha, alpha_bar })
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

impl DiffusionSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::TimestepOutOfRange { t, steps: self.len() });
        }
        Ok(())
    }

    /// `ᾱ` at `t`, with `ᾱ = 1` before the first step.
    pub fn alpha_bar_at(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }

    /// `steps` timesteps evenly spread over `[0, T)`, increasing, always
    /// ending at `T − 1`.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if steps == 0 || steps > n {
            return Err(Error::config(alloc::format!("sampling steps must be in 1..={n}, got {steps}")));
        }
        if steps == 1 {
            return Ok(alloc::vec![n - 1]);
        }
        Ok((0..steps)
            .map(|i| libm::round(i as f64 * (n - 1) as f64 / (steps - 1) as f64) as usize)
            .collect())
    }
}

/// Tensor of independent standard normal draws.
pub fn standard_normal<F: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::of(rng.sample::<f64, _>(StandardNormal)))
}

/// `S_t = √ᾱ_t · S₀ + √(1 − ᾱ_t) · ε`.
pub fn q_sample<F: Scalar>(s0: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &DiffusionSchedule) -> Result<Tensor<F>> {
    sched.check(t)?;
    if s0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", s0.shape(), eps.shape()));
    }
    let ab = sched.alpha_bar[t];
    let (a, b) = (F::of(libm::sqrt(ab)), F::of(libm::sqrt(1.0 - ab)));
    let data = s0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(s0.shape().to_vec(), data)
}

/// Applies [`q_sample`] to each sample of a `[B, ...]` batch with its own
/// timestep.
pub fn q_sample_batch<F: Scalar>(
    s0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<F>> {
    if s0.shape() != eps.shape() || s0.rank() == 0 || s0.shape()[0] != ts.len() {
        return Err(Error::shape("q_sample batch", s0.shape(), eps.shape()));
    }
    let per = s0.numel() / ts.len().max(1);
    let mut out = Vec::with_capacity(s0.numel());
    for (i, &t) in ts.iter().enumerate() {
        sched.check(t)?;
        let ab = sched.alpha_bar[t];
        let (a, b) = (F::of(libm::sqrt(ab)), F::of(libm::sqrt(1.0 - ab)));
        let r = i * per..(i + 1) * per;
        out.extend(s0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(s0.shape().to_vec(), out)
}

/// `‖ε − ε̂‖²` averaged over all elements, with fixed timesteps and noise.
pub fn loss_with_noise<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    model: &Dit,
    sched: &DiffusionSchedule,
    clean: &Tensor<F>,
    conds: &[SampleCondition],
    ts: &[usize],
    eps: &Tensor<F>,
) -> Result<Var> {
    let noisy = q_sample_batch(clean, ts, eps, sched)?;
    let noisy = g.constant(noisy);
    let enc = model.encode(g, p, conds)?;
    let pred = model.forward(g, p, noisy, ts, &enc)?;
    let target = g.constant(eps.clone());
    g.mse(pred, target)
}

/// Simplified DDPM objective for a `[B, dx, dy, dz, c]` batch: uniform
/// timesteps and standard normal noise drawn from `rng`.
pub fn training_loss<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    p: &Bound,
    model: &Dit,
    sched: &DiffusionSchedule,
    clean: &Tensor<F>,
    conds: &[SampleCondition],
    rng: &mut R,
) -> Result<Var> {
    let b = clean.shape().first().copied().unwrap_or(0);
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.len())).collect();
    let eps = standard_normal(clean.shape(), rng);
    loss_with_noise(g, p, model, sched, clean, conds, &ts, &eps)
}

/// Reported before each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleProgress {
    /// 0-based index of the reverse step.
    pub step: usize,
    pub total: usize,
    pub t: usize,
}

/// Ancestral sampling with an arbitrary noise predictor `predict(S_t, t)`.
/// Starts from `S_T ~ N(0, I)` drawn from `seed` and walks the strided
/// timesteps backwards using the posterior variance `β̃`; the last step adds
/// no noise.
pub fn ddpm_sample_with<F: Scalar>(
    shape: &[usize],
    sched: &DiffusionSchedule,
    steps: usize,
    seed: u64,
    mut predict: impl FnMut(&Tensor<F>, usize) -> Result<Tensor<F>>,
    mut progress: impl FnMut(SampleProgress),
) -> Result<Tensor<F>> {
    let ts = sched.strided(steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Tensor<F> = standard_normal(shape, &mut rng);
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        progress(SampleProgress {
            step: ts.len() - 1 - i,
            total: ts.len(),
            t,
        });
        let prev = if i == 0 { None } else { Some(ts[i - 1]) };
        let ab = sched.alpha_bar[t];
        let ab_prev = sched.alpha_bar_at(prev);
        let beta = 1.0 - ab / ab_prev;
        let eps = predict(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(Error::shape("noise prediction", eps.shape(), x.shape()));
        }
        let inv_sqrt_alpha = 1.0 / libm::sqrt(1.0 - beta);
        let coef = beta / libm::sqrt(1.0 - ab);
        let sigma = if prev.is_some() {
            libm::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)
        } else {
            0.0
        };
        let (c0, c1, s) = (F::of(inv_sqrt_alpha), F::of(coef), F::of(sigma));
        let noise: Option<Tensor<F>> = prev.map(|_| standard_normal(shape, &mut rng));
        for (j, (xv, &e)) in x.data_mut().iter_mut().zip(eps.data()).enumerate() {
            let mut v = c0 * (*xv - c1 * e);
            if let Some(n) = &noise {
                v += s * n.data()[j];
            }
            *xv = v;
        }
    }
    Ok(x)
}

/// Samples one field per condition with the trained denoiser. The encoder
/// runs once; every reverse step rebuilds a small inference graph.
pub fn ddpm_sample<F: Scalar>(
    model: &Dit,
    params: &ParamStore<F>,
    conds: &[SampleCondition],
    sched: &DiffusionSchedule,
    steps: usize,
    seed: u64,
    progress: impl FnMut(SampleProgress),
) -> Result<Tensor<F>> {
    let cfg = &model.config;
    if sched.len() > cfg.timesteps {
        return Err(Error::config(alloc::format!(
            "schedule has {} steps but the model embeds only {}",
            sched.len(),
            cfg.timesteps
        )));
    }
    let frozen = {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        model.encode(&mut g, &p, conds)?.freeze(&g)
    };
    let [dx, dy, dz] = cfg.extents;
    let shape = [conds.len(), dx, dy, dz, cfg.channels];
    ddpm_sample_with(
        &shape,
        sched,
        steps,
        seed,
        |x, t| {
            let mut g = Graph::new();
            let p = params.bind_frozen(&mut g);
            let enc = frozen.bind(&mut g);
            let xv = g.constant(x.clone());
            let ts = alloc::vec![t; conds.len()];
            let out = model.forward(&mut g, &p, xv, &ts, &enc)?;
            Ok(g.value(out).clone())
        },
        progress,
    )
}
