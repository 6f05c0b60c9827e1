//! Deterministic training loop: epoch-shuffled batches, per-step slice
//! conditioning, AdamW with cosine annealing and a divergence guard.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::diffusion::{loss_with_noise, standard_normal, training_loss, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::flowgen::VoxelField;
use crate::geometry::{extract_axis_slice, Axis};
use crate::model::{Dit, SampleCondition};
use crate::nn::ParamStore;
use crate::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamState, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which slices condition each training sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanePolicy {
    /// An x slice and a y slice through the centre.
    FixedOrthogonal,
    /// `count` slices with uniformly drawn axis and index.
    Randomized { count: usize },
    /// The same explicit slices for every sample.
    Fixed(Vec<(Axis, usize)>),
}

impl PlanePolicy {
    pub fn draw<R: Rng + ?Sized>(&self, extents: [usize; 3], rng: &mut R) -> Vec<(Axis, usize)> {
        match self {
            PlanePolicy::FixedOrthogonal => alloc::vec![(Axis::X, extents[0] / 2), (Axis::Y, extents[1] / 2)],
            PlanePolicy::Randomized { count } => (0..*count)
                .map(|_| {
                    let axis = Axis::ALL[rng.random_range(0..3)];
                    (axis, rng.random_range(0..extents[axis.index()]))
                })
                .collect(),
            PlanePolicy::Fixed(planes) => planes.clone(),
        }
    }
}

/// Slices of `field` at the given axis positions.
pub fn condition_from(field: &VoxelField, planes: &[(Axis, usize)]) -> Result<SampleCondition> {
    planes.iter().map(|&(a, i)| extract_axis_slice(field, a, i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adamw: AdamWConfig,
    pub clip_norm: f64,
    pub seed: u64,
    pub policy: PlanePolicy,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 4,
            lr_max: 1e-4,
            lr_min: 0.0,
            adamw: AdamWConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            policy: PlanePolicy::FixedOrthogonal,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    pub step: usize,
    pub epoch: usize,
    pub adam: AdamState<F>,
    pub lr: f64,
    pub seed: u64,
    pub best_eval: Option<f64>,
    /// Loss of the run's first step, the divergence guard's reference.
    pub initial_loss: Option<f64>,
    /// Consecutive steps above the divergence threshold.
    pub over_threshold: usize,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(params: &ParamStore<F>, cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            epoch: 0,
            adam: AdamState::new(params),
            lr: cfg.lr_max,
            seed: cfg.seed,
            best_eval: None,
            initial_loss: None,
            over_threshold: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Number of completed updates after this step.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// RNG for step `step`: the run seed on its own ChaCha stream.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Field indices of the batch at `step`; sample `k = step·B + i` of the run
/// is position `k mod n` of epoch `k / n`'s shuffled order.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> (Vec<usize>, usize) {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for i in 0..batch {
        let k = step * batch + i;
        let epoch = k / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(seed, epoch, n)));
        }
        out.push(cached.as_ref().expect("set above").1[k % n]);
    }
    (out, (step * batch) / n)
}

fn stack_fields<F: Scalar>(fields: &[&VoxelField]) -> Result<Tensor<F>> {
    let tensors: Vec<Tensor<F>> = fields.iter().map(|f| f.to_tensor()).collect();
    Tensor::stack(&tensors)
}

/// One optimization step on (already normalized) `fields`.
pub fn train_step<F: Scalar>(
    model: &Dit,
    params: &mut ParamStore<F>,
    state: &mut TrainState<F>,
    fields: &[VoxelField],
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
) -> Result<StepReport> {
    if fields.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let lr = cosine_lr(state.step, cfg.steps, cfg.lr_max, cfg.lr_min);
    let (idx, epoch) = batch_indices(state.seed, state.step, cfg.batch_size, fields.len());
    let mut rng = step_rng(state.seed, state.step);
    let batch: Vec<&VoxelField> = idx.iter().map(|&i| &fields[i]).collect();
    let conds = batch
        .iter()
        .map(|f| condition_from(f, &cfg.policy.draw(f.extents(), &mut rng)))
        .collect::<Result<Vec<_>>>()?;
    let clean = stack_fields::<F>(&batch)?;

    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let loss = training_loss(&mut g, &p, model, sched, &clean, &conds, &mut rng)?;
    let loss_value = g.value(loss).item().f64();
    let mut grads = g.backward(loss)?;
    let mut grads = params.collect_grads(&p, &mut grads);
    drop(g);
    let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    adamw_step(params, &grads, &mut state.adam, lr, &cfg.adamw)?;

    state.step += 1;
    state.epoch = epoch;
    state.lr = lr;
    let initial = *state.initial_loss.get_or_insert(loss_value);
    if !loss_value.is_finite() || loss_value > cfg.divergence_factor * initial {
        state.over_threshold += 1;
    } else {
        state.over_threshold = 0;
    }
    if state.over_threshold >= cfg.divergence_patience {
        return Err(Error::Diverged {
            step: state.step as u64,
            loss: loss_value,
            initial,
            factor: cfg.divergence_factor,
        });
    }
    Ok(StepReport {
        step: state.step,
        epoch,
        loss: loss_value,
        lr,
        grad_norm,
    })
}

/// Runs until `cfg.steps` updates are done, calling `on_step` after each.
pub fn train<F: Scalar>(
    model: &Dit,
    params: &mut ParamStore<F>,
    state: &mut TrainState<F>,
    fields: &[VoxelField],
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    mut on_step: impl FnMut(&StepReport, &TrainState<F>, &ParamStore<F>) -> Result<()>,
) -> Result<()> {
    while state.step < cfg.steps {
        let report = train_step(model, params, state, fields, cfg, sched)?;
        on_step(&report, state, params)?;
    }
    Ok(())
}

/// Loss over `fields` with timesteps and noise fixed by `seed`, so values
/// are comparable across checkpoints.
pub fn eval_loss<F: Scalar>(
    model: &Dit,
    params: &ParamStore<F>,
    fields: &[VoxelField],
    policy: &PlanePolicy,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for f in fields {
        let cond = condition_from(f, &policy.draw(f.extents(), &mut rng))?;
        let clean = stack_fields::<F>(&[f])?;
        let t = rng.random_range(0..sched.len());
        let eps = standard_normal(clean.shape(), &mut rng);
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let loss = loss_with_noise(&mut g, &p, model, sched, &clean, &[cond], &[t], &eps)?;
        total += g.value(loss).item().f64();
    }
    Ok(total / fields.len().max(1) as f64)
}
