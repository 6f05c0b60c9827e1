//! Run configuration: canonical `key = value` text with a provenance tag on
//! every entry.

use std::fmt::Write as _;
use std::str::FromStr;

use flowdit_core::diffusion::{make_schedule, DiffusionSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
use flowdit_core::flowgen::SplitProtocol;
use flowdit_core::geometry::Axis;
use flowdit_core::model::{parse_num, parse_pairs, ModelConfig};
use flowdit_core::train::{PlanePolicy, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Stated by the method description.
    Paper,
    /// Chosen here because no value is given.
    Assumed,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Paper => "paper",
            Provenance::Assumed => "assumed",
        }
    }
}

const PAPER_KEYS: &[&str] = &[
    "preset",
    "model.layers",
    "model.hidden",
    "model.heads",
    "model.patch",
    "model.window",
    "model.window_layers",
    "model.plane_layers",
    "train.lr_max",
    "data.train_fraction",
    "data.split",
];

pub fn provenance(key: &str) -> Provenance {
    if PAPER_KEYS.contains(&key) {
        Provenance::Paper
    } else {
        Provenance::Assumed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_fraction: f64,
    pub split: SplitProtocol,
    /// Steps between evaluations and checkpoints (0 disables).
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub eval_seed: u64,
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "small".into(),
            model: ModelConfig::small(),
            train: TrainConfig::default(),
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            train_fraction: 0.8,
            split: SplitProtocol::Extrapolation,
            eval_every: 500,
            checkpoint_every: 1000,
            eval_seed: 0,
            init_seed: 0,
        }
    }
}

pub fn format_policy(p: &PlanePolicy) -> String {
    match p {
        PlanePolicy::FixedOrthogonal => "orthogonal".into(),
        PlanePolicy::Randomized { count } => format!("random:{count}"),
        PlanePolicy::Fixed(planes) => format!("fixed:{}", format_planes(planes)),
    }
}

pub fn parse_policy(s: &str) -> Result<PlanePolicy> {
    match s.split_once(':') {
        None if s == "orthogonal" => Ok(PlanePolicy::FixedOrthogonal),
        Some(("random", n)) => Ok(PlanePolicy::Randomized {
            count: parse_num("train.policy", n)?,
        }),
        Some(("fixed", planes)) => Ok(PlanePolicy::Fixed(parse_planes(planes)?)),
        _ => Err(Error::Usage(format!(
            "train.policy: expected orthogonal, random:N or fixed:x:I,..., got `{s}`"
        ))),
    }
}

pub fn format_planes(planes: &[(Axis, usize)]) -> String {
    planes.iter().map(|(a, i)| format!("{a}:{i}")).collect::<Vec<_>>().join(",")
}

/// Parses `"x:8,y:8"`; the error names the first bad token.
pub fn parse_planes(s: &str) -> Result<Vec<(Axis, usize)>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|tok| {
            let bad = || Error::Usage(format!("bad plane `{tok}`: expected axis:index with axis x, y or z"));
            let (a, i) = tok.split_once(':').ok_or_else(bad)?;
            let axis = Axis::from_str(a.trim()).map_err(|_| bad())?;
            let index = i.trim().parse().map_err(|_| bad())?;
            Ok((axis, index))
        })
        .collect()
}

fn format_split(s: SplitProtocol) -> String {
    match s {
        SplitProtocol::Extrapolation => "ext".into(),
        SplitProtocol::Interpolation { seed } => format!("int:{seed}"),
    }
}

fn parse_split(s: &str) -> Result<SplitProtocol> {
    match s.split_once(':') {
        None if s == "ext" => Ok(SplitProtocol::Extrapolation),
        None if s == "int" => Ok(SplitProtocol::Interpolation { seed: 0 }),
        Some(("int", seed)) => Ok(SplitProtocol::Interpolation {
            seed: parse_num("data.split", seed)?,
        }),
        _ => Err(Error::Usage(format!("data.split: expected ext or int[:SEED], got `{s}`"))),
    }
}

impl RunConfig {
    /// Every entry in canonical order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![("preset".to_string(), self.preset.clone())];
        for (k, v) in parse_pairs(&self.model.to_text()).expect("canonical model text") {
            out.push((format!("model.{k}"), v.to_string()));
        }
        let t = &self.train;
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("train.steps", t.steps.to_string());
        push("train.batch_size", t.batch_size.to_string());
        push("train.lr_max", t.lr_max.to_string());
        push("train.lr_min", t.lr_min.to_string());
        push("train.beta1", t.adamw.beta1.to_string());
        push("train.beta2", t.adamw.beta2.to_string());
        push("train.eps", t.adamw.eps.to_string());
        push("train.weight_decay", t.adamw.weight_decay.to_string());
        push("train.clip_norm", t.clip_norm.to_string());
        push("train.seed", t.seed.to_string());
        push("train.policy", format_policy(&t.policy));
        push("train.divergence_factor", t.divergence_factor.to_string());
        push("train.divergence_patience", t.divergence_patience.to_string());
        push("diffusion.beta_start", self.beta_start.to_string());
        push("diffusion.beta_end", self.beta_end.to_string());
        push("data.train_fraction", self.train_fraction.to_string());
        push("data.split", format_split(self.split));
        push("run.eval_every", self.eval_every.to_string());
        push("run.checkpoint_every", self.checkpoint_every.to_string());
        push("run.eval_seed", self.eval_seed.to_string());
        push("run.init_seed", self.init_seed.to_string());
        out
    }

    /// Canonical text; entries differing from the defaults note the
    /// default they replace.
    pub fn to_text(&self) -> String {
        let defaults: std::collections::HashMap<String, String> = Self::default().pairs().into_iter().collect();
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let tag = provenance(&k).as_str();
            match defaults.get(&k) {
                Some(d) if *d != v => {
                    let _ = writeln!(s, "{k} = {v}  # {tag}; default {d}");
                }
                _ => {
                    let _ = writeln!(s, "{k} = {v}  # {tag}");
                }
            }
        }
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "preset" => {
                self.model = ModelConfig::preset(value)?;
                self.preset = value.to_string();
            }
            "train.steps" => t.steps = parse_num(key, value)?,
            "train.batch_size" => t.batch_size = parse_num(key, value)?,
            "train.lr_max" => t.lr_max = parse_num(key, value)?,
            "train.lr_min" => t.lr_min = parse_num(key, value)?,
            "train.beta1" => t.adamw.beta1 = parse_num(key, value)?,
            "train.beta2" => t.adamw.beta2 = parse_num(key, value)?,
            "train.eps" => t.adamw.eps = parse_num(key, value)?,
            "train.weight_decay" => t.adamw.weight_decay = parse_num(key, value)?,
            "train.clip_norm" => t.clip_norm = parse_num(key, value)?,
            "train.seed" => t.seed = parse_num(key, value)?,
            "train.policy" => t.policy = parse_policy(value)?,
            "train.divergence_factor" => t.divergence_factor = parse_num(key, value)?,
            "train.divergence_patience" => t.divergence_patience = parse_num(key, value)?,
            "diffusion.beta_start" => self.beta_start = parse_num(key, value)?,
            "diffusion.beta_end" => self.beta_end = parse_num(key, value)?,
            "data.train_fraction" => self.train_fraction = parse_num(key, value)?,
            "data.split" => self.split = parse_split(value)?,
            "run.eval_every" => self.eval_every = parse_num(key, value)?,
            "run.checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "run.eval_seed" => self.eval_seed = parse_num(key, value)?,
            "run.init_seed" => self.init_seed = parse_num(key, value)?,
            _ => match key.strip_prefix("model.") {
                Some(k) => self.model.set(k, value)?,
                None => return Err(Error::Usage(format!("unknown config key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Applies `key = value` lines (trailing `# comments` allowed) on top of
    /// `self`. A `preset` entry is applied before all others.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let stripped: String = text
            .lines()
            .map(|l| l.split_once('#').map_or(l, |(a, _)| a))
            .collect::<Vec<_>>()
            .join("\n");
        let pairs = parse_pairs(&stripped)?;
        if let Some((k, v)) = pairs.iter().find(|(k, _)| *k == "preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        if self.train.batch_size == 0 {
            return Err(Error::Usage("train.batch_size must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Usage("data.train_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        Ok(make_schedule(self.model.timesteps, self.beta_start, self.beta_end)?)
    }
}
