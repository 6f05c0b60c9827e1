//! Data generation, training runs, reconstruction and evaluation as used by
//! the command-line front end.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowdit_core::diffusion::ddpm_sample;
use flowdit_core::flowgen::{
    abc_flow, divergence_tolerance, max_divergence, random_solenoidal, split_indices, taylor_green_series,
    FieldMeta, FlowDataset, NormStats, SplitProtocol, VoxelField,
};
use flowdit_core::geometry::Axis;
use flowdit_core::metrics::{evaluate, MetricReport, SsimOptions};
use flowdit_core::model::Dit;
use flowdit_core::nn::ParamStore;
use flowdit_core::train::{condition_from, eval_loss, train_step, TrainState};
use flowdit_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    TaylorGreen { dt: f64, nu: f64 },
    Abc,
    Random { decay: f64 },
}

impl Generator {
    pub fn parse(name: &str, dt: f64, nu: f64, decay: f64) -> Result<Self> {
        match name {
            "taylor-green" | "tg" => Ok(Generator::TaylorGreen { dt, nu }),
            "abc" => Ok(Generator::Abc),
            "random" | "random-solenoidal" => Ok(Generator::Random { decay }),
            _ => Err(Error::Usage(format!(
                "unknown generator `{name}` (taylor-green, abc, random)"
            ))),
        }
    }
}

/// `count` fields; normalization statistics are fitted on the first
/// `train_fraction` of the time-ordered fields.
pub fn generate(gen: Generator, extents: [usize; 3], count: usize, seed: u64, train_fraction: f64) -> Result<FlowDataset> {
    if count == 0 {
        return Err(Error::Usage("count must be positive".into()));
    }
    let fields = match gen {
        Generator::TaylorGreen { dt, nu } => taylor_green_series(extents, count, dt, nu)?,
        Generator::Abc => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|i| {
                    let [a, b, c] = [0; 3].map(|_| rng.random_range(0.5..1.5));
                    let mut f = abc_flow(extents, a, b, c)?;
                    f.meta.time_index = i as u64;
                    Ok(f)
                })
                .collect::<flowdit_core::Result<Vec<_>>>()?
        }
        Generator::Random { decay } => (0..count)
            .map(|i| {
                let mut f = random_solenoidal(extents, seed.wrapping_add(i as u64), decay)?;
                f.meta.time_index = i as u64;
                Ok(f)
            })
            .collect::<flowdit_core::Result<Vec<_>>>()?,
    };
    let mut ds = FlowDataset::new(fields)?;
    let (train, _) = split_indices(&ds.fields, train_fraction, SplitProtocol::Extrapolation)?;
    let train = if train.is_empty() { vec![0] } else { train };
    ds.fit_normalization(&train)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceAudit {
    pub passed: usize,
    pub total: usize,
    pub max_divergence: f64,
    pub max_tolerance: f64,
}

pub fn divergence_audit(fields: &[VoxelField]) -> Result<DivergenceAudit> {
    let mut audit = DivergenceAudit {
        passed: 0,
        total: fields.len(),
        max_divergence: 0.0,
        max_tolerance: 0.0,
    };
    for f in fields {
        let d = max_divergence(f)?;
        let tol = divergence_tolerance(f);
        audit.passed += usize::from(d < tol);
        audit.max_divergence = audit.max_divergence.max(d);
        audit.max_tolerance = audit.max_tolerance.max(tol);
    }
    Ok(audit)
}

/// Normalized copies of the train and test fields plus the statistics.
pub struct PreparedData {
    pub train: Vec<VoxelField>,
    pub test: Vec<VoxelField>,
    pub stats: NormStats,
}

pub fn prepare(ds: &FlowDataset, cfg: &RunConfig) -> Result<PreparedData> {
    let (train_idx, test_idx) = split_indices(&ds.fields, cfg.train_fraction, cfg.split)?;
    if train_idx.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    let mut ds = ds.clone();
    ds.fit_normalization(&train_idx)?;
    let take = |ix: &[usize]| ix.iter().map(|&i| ds.normalize(&ds.fields[i])).collect::<Vec<_>>();
    Ok(PreparedData {
        train: take(&train_idx),
        test: take(&test_idx),
        stats: ds.stats.clone(),
    })
}

pub const METRICS_HEADER: &str = "step,epoch,loss,lr,grad_norm,eval_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub best_eval: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("ckpt_{step}.bin"))
}

/// Trains into run directory `out`: `config.txt` snapshot, `metrics.csv`
/// and `checkpoints/ckpt_{step}.bin`. With `resume` the model, optimizer
/// and trainer state continue from the checkpoint.
pub fn train_run(cfg: &RunConfig, ds: &FlowDataset, out: &Path, resume: Option<Checkpoint>) -> Result<TrainSummary> {
    cfg.validate()?;
    if ds.extents() != cfg.model.extents || ds.channels() != cfg.model.channels {
        return Err(Error::Usage(format!(
            "dataset is {:?}x{} but the model expects {:?}x{}",
            ds.extents(),
            ds.channels(),
            cfg.model.extents,
            cfg.model.channels
        )));
    }
    let data = prepare(ds, cfg)?;
    let sched = cfg.schedule()?;
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    let snapshot = out.join("config.txt");
    fs::write(&snapshot, cfg.to_text()).map_err(|e| Error::io(&snapshot, e))?;

    let (model, mut params, mut state) = match resume {
        Some(ck) => {
            if ck.config != cfg.model {
                return Err(Error::Usage("checkpoint model config differs from the run config".into()));
            }
            let state = ck
                .train
                .ok_or_else(|| Error::Usage("checkpoint carries no trainer state to resume".into()))?;
            (Dit::init::<f32>(&ck.config, 0)?.0, ck.params, state)
        }
        None => {
            let (model, params) = Dit::init::<f32>(&cfg.model, cfg.init_seed)?;
            let state = TrainState::new(&params, &cfg.train);
            (model, params, state)
        }
    };

    let metrics_path = out.join("metrics.csv");
    let fresh = state.step == 0 || !metrics_path.exists();
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if fresh {
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    }

    let eval_set = if data.test.is_empty() { &data.train } else { &data.test };
    let mut summary = TrainSummary {
        steps: state.step,
        initial_loss: state.initial_loss,
        last_loss: None,
        best_eval: state.best_eval,
        last_checkpoint: None,
    };
    let save = |params: &ParamStore<f32>, state: &TrainState<f32>| -> Result<PathBuf> {
        let path = checkpoint_path(out, state.step);
        Checkpoint {
            config: cfg.model.clone(),
            params: params.clone(),
            train: Some(state.clone()),
            stats: Some(data.stats.clone()),
        }
        .save(&path)?;
        Ok(path)
    };
    let started = Instant::now();
    let total = cfg.train.steps;
    while state.step < total {
        let r = train_step(&model, &mut params, &mut state, &data.train, &cfg.train, &sched)?;
        let mut eval = String::new();
        if cfg.eval_every > 0 && (r.step % cfg.eval_every == 0 || r.step == total) {
            let e = eval_loss(&model, &params, eval_set, &cfg.train.policy, &sched, cfg.eval_seed)?;
            if state.best_eval.is_none_or(|b| e < b) {
                state.best_eval = Some(e);
            }
            eval = e.to_string();
            log::info!("step {} eval_loss {e:.5}", r.step);
        }
        writeln!(metrics, "{},{},{},{},{},{}", r.step, r.epoch, r.loss, r.lr, r.grad_norm, eval)
            .map_err(|e| Error::io(&metrics_path, e))?;
        if r.step % 50 == 0 || r.step == total {
            log::info!(
                "step {}/{} loss {:.5} lr {:.3e} grad_norm {:.3} elapsed_ms {}",
                r.step,
                total,
                r.loss,
                r.lr,
                r.grad_norm,
                started.elapsed().as_millis()
            );
        }
        summary.last_loss = Some(r.loss);
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 && r.step != total {
            summary.last_checkpoint = Some(save(&params, &state)?);
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    summary.steps = state.step;
    summary.initial_loss = state.initial_loss;
    summary.best_eval = state.best_eval;
    summary.last_checkpoint = Some(save(&params, &state)?);
    Ok(summary)
}

/// Drops repeated planes, keeping the first occurrence. Returns the
/// duplicates that were removed.
pub fn dedup_planes(planes: &mut Vec<(Axis, usize)>) -> Vec<(Axis, usize)> {
    let mut seen = Vec::new();
    let mut dropped = Vec::new();
    planes.retain(|p| {
        if seen.contains(p) {
            dropped.push(*p);
            false
        } else {
            seen.push(*p);
            true
        }
    });
    dropped
}

#[derive(Debug, Clone)]
pub struct ReconOptions {
    pub planes: Vec<(Axis, usize)>,
    pub steps: usize,
    pub seed: u64,
    /// Fields sampled together in one batch.
    pub batch: usize,
}

/// Reconstructs `truth` from its observed planes. Fields are normalized
/// with `stats`, sampled, then mapped back to physical units.
pub fn reconstruct(
    ck: &Checkpoint,
    stats: &NormStats,
    truth: &[VoxelField],
    opts: &ReconOptions,
    sched: &flowdit_core::diffusion::DiffusionSchedule,
) -> Result<Vec<VoxelField>> {
    let model = ck.model()?;
    let norm = FlowDataset {
        fields: Vec::new(),
        stats: stats.clone(),
    };
    let mut out = Vec::with_capacity(truth.len());
    let started = Instant::now();
    for (chunk_no, chunk) in truth.chunks(opts.batch.max(1)).enumerate() {
        let conds = chunk
            .iter()
            .map(|f| condition_from(&norm.normalize(f), &opts.planes))
            .collect::<flowdit_core::Result<Vec<_>>>()?;
        let seed = opts.seed.wrapping_add(chunk_no as u64);
        let sampled: Tensor<f32> = ddpm_sample(&model, &ck.params, &conds, sched, opts.steps, seed, |p| {
            if p.step % 10 == 0 || p.step + 1 == p.total {
                log::info!(
                    "sample chunk {chunk_no} step {}/{} t {} elapsed_ms {}",
                    p.step + 1,
                    p.total,
                    p.t,
                    started.elapsed().as_millis()
                );
            }
        })?;
        for (k, f) in chunk.iter().enumerate() {
            let meta = FieldMeta {
                generator: "reconstruction".into(),
                ..f.meta.clone()
            };
            let field = VoxelField::from_tensor(&sampled.select0(k)?, meta)?;
            out.push(norm.denormalize(&field));
        }
    }
    Ok(out)
}

pub const SUMMARY_HEADER: &str = "field,nrmse,psnr,ssim";
pub const PROFILE_HEADER: &str = "field,axis,index,relative_position,nrmse,psnr,ssim";

/// Scores each prediction against the matching reference field.
pub fn evaluate_all(pred: &[VoxelField], truth: &[VoxelField]) -> Result<Vec<MetricReport>> {
    if pred.len() != truth.len() {
        return Err(Error::Usage(format!(
            "{} predicted fields but {} reference fields",
            pred.len(),
            truth.len()
        )));
    }
    let opts = SsimOptions::default();
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| evaluate(p, t, &opts))
        .collect::<flowdit_core::Result<Vec<_>>>()?)
}

pub fn summary_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for (i, r) in reports.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", r.nrmse, r.psnr, r.ssim);
    }
    s
}

/// One row per plane of every axis: `Σ extents` rows per field.
pub fn profile_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{PROFILE_HEADER}\n");
    for (i, r) in reports.iter().enumerate() {
        for axis in Axis::ALL {
            for m in &r.per_plane[axis.index()] {
                let _ = writeln!(
                    s,
                    "{i},{axis},{},{},{},{},{}",
                    m.index, m.relative_position, m.nrmse, m.psnr, m.ssim
                );
            }
        }
    }
    s
}

pub fn summary_text(reports: &[MetricReport]) -> String {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    format!(
        "fields: {}\nmean nrmse: {:.6}\nmean psnr: {:.3} dB\nmean ssim: {:.6}",
        reports.len(),
        mean(|r| r.nrmse),
        mean(|r| r.psnr),
        mean(|r| r.ssim)
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
