//! Wall-clock comparison of global, window and plane self-attention.

use std::fmt::Write as _;
use std::time::Instant;

use flowdit_core::attention::{attention_flops, self_attention_branch, AttentionMode, AttentionParams};
use flowdit_core::geometry::Axis;
use flowdit_core::nn::ParamStore;
use flowdit_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BENCH_HEADER: &str = "mode,L,w,D,flops,wall_ms_forward,wall_ms_backward";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: String,
    pub flops: u64,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub tokens: usize,
    pub window: usize,
    pub dim: usize,
    pub heads: usize,
    pub rows: Vec<BenchRow>,
    /// Global over window attention FLOPs.
    pub flop_ratio: f64,
    /// Median global time over median window time.
    pub forward_speedup: f64,
    pub backward_speedup: f64,
    pub total_speedup: f64,
}

fn cube_side(l: usize) -> Result<usize> {
    let n = (l as f64).cbrt().round() as usize;
    if n == 0 || n * n * n != l {
        return Err(Error::Usage(format!("token count {l} is not a perfect cube")));
    }
    Ok(n)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mode_name(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::Global => "global",
        AttentionMode::Window(_) => "window",
        AttentionMode::Plane(_) => "plane",
    }
}

/// Times forward and backward of one self-attention sub-layer on a
/// `[1, L, D]` token grid, `repeats` times per mode after one warm-up.
pub fn bench_attention(
    tokens: usize,
    dim: usize,
    window: usize,
    heads: usize,
    repeats: usize,
    with_plane: bool,
) -> Result<BenchReport> {
    let side = cube_side(tokens)?;
    let grid = [side; 3];
    if window == 0 || side % window != 0 {
        return Err(Error::Usage(format!("window {window} does not tile a {side}^3 grid")));
    }
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = AttentionParams::new(&mut store, "attn", dim, heads, &mut rng)?;
    let x = Tensor::<f32>::from_fn(&[1, tokens, dim], |_| rng.random_range(-1.0..1.0));

    let mut modes = vec![AttentionMode::Global, AttentionMode::Window(window)];
    if with_plane {
        modes.push(AttentionMode::Plane(Axis::X));
    }
    let mut rows = Vec::new();
    for &mode in &modes {
        let flops = attention_flops(mode, grid, dim)?;
        for rep in 0..=repeats {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.param(x.clone());
            let t0 = Instant::now();
            let out = self_attention_branch(&mut g, &p, &params, xv, grid, mode)?;
            let loss = g.mean(out);
            let t1 = Instant::now();
            let grads = g.backward(loss)?;
            let t2 = Instant::now();
            drop(grads);
            if rep == 0 {
                continue;
            }
            rows.push(BenchRow {
                mode: mode_name(mode).into(),
                flops,
                forward_ms: (t1 - t0).as_secs_f64() * 1e3,
                backward_ms: (t2 - t1).as_secs_f64() * 1e3,
            });
            log::debug!("{} repeat {rep}: {:?}", mode_name(mode), rows.last());
        }
    }
    let med = |name: &str, f: fn(&BenchRow) -> f64| median(rows.iter().filter(|r| r.mode == name).map(f).collect());
    let flop_ratio = attention_flops(AttentionMode::Global, grid, dim)? as f64
        / attention_flops(AttentionMode::Window(window), grid, dim)? as f64;
    Ok(BenchReport {
        tokens,
        window,
        dim,
        heads,
        flop_ratio,
        forward_speedup: med("global", |r| r.forward_ms) / med("window", |r| r.forward_ms),
        backward_speedup: med("global", |r| r.backward_ms) / med("window", |r| r.backward_ms),
        total_speedup: med("global", |r| r.forward_ms + r.backward_ms) / med("window", |r| r.forward_ms + r.backward_ms),
        rows,
    })
}

impl BenchReport {
    /// One row per timed repeat, then a `summary` row whose flops column is
    /// the global/window FLOP ratio and whose wall-clock columns are the
    /// global/window speedups of the medians.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(BENCH_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{:.4}",
                r.mode, self.tokens, self.window, self.dim, r.flops, r.forward_ms, r.backward_ms
            );
        }
        let _ = writeln!(
            s,
            "summary,{},{},{},{},{:.4},{:.4}",
            self.tokens, self.window, self.dim, self.flop_ratio, self.forward_speedup, self.backward_speedup
        );
        s
    }

    pub fn summary_text(&self) -> String {
        format!(
            "L={} w={} D={} heads={}\n\
             flop ratio global/window: {} (L/w^3 = {})\n\
             window speedup: forward {:.2}x, backward {:.2}x, forward+backward {:.2}x\n\
             note: this times a single attention sub-layer; whole-model training speedups are smaller\n",
            self.tokens,
            self.window,
            self.dim,
            self.heads,
            self.flop_ratio,
            self.tokens as f64 / (self.window * self.window * self.window) as f64,
            self.forward_speedup,
            self.backward_speedup,
            self.total_speedup,
        )
    }
}
