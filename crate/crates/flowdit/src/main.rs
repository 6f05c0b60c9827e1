use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowdit::bench::bench_attention;
use flowdit::checkpoint::Checkpoint;
use flowdit::config::{parse_planes, RunConfig};
use flowdit::dataset::{export_raw, import_raw, read_dataset, write_dataset, RawDtype, RawOrder};
use flowdit::run::{self, Generator, ReconOptions};
use flowdit::{Error, Result};
use flowdit_core::flowgen::{split_indices, FlowDataset};

#[derive(Parser)]
#[command(name = "flowdit", version, about = "Sparse-plane flow field reconstruction with a diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic incompressible flow dataset.
    GenData {
        /// taylor-green, abc or random
        #[arg(long, default_value = "taylor-green")]
        generator: String,
        #[arg(long, default_value = "32,32,32")]
        extents: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Time between Taylor-Green snapshots.
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        /// Taylor-Green viscosity.
        #[arg(long, default_value_t = 0.01)]
        nu: f64,
        /// Spectral decay exponent of the random generator.
        #[arg(long, default_value_t = 2.0)]
        decay: f64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a raw little-endian voxel dump into a dataset file.
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        extents: String,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value = "f32")]
        dtype: RawDtype,
        #[arg(long, default_value = "xyzc")]
        order: RawOrder,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a dataset file as a raw little-endian dump.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "f32")]
        dtype: RawDtype,
        #[arg(long, default_value = "xyzc")]
        order: RawOrder,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration with provenance markers.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a model into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct volumes from observed planes.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Observed planes, e.g. `x:16,y:16`.
        #[arg(long)]
        planes: String,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma separated field indices; defaults to the test split.
        #[arg(long)]
        fields: Option<String>,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted fields against references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "true")]
        truth: PathBuf,
        /// Output directory for summary.csv and profiles.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time window, plane and full attention on one token grid.
    BenchAttn {
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        #[arg(long, default_value_t = 384)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        window: usize,
        #[arg(long, default_value_t = 6)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Also time plane attention.
        #[arg(long)]
        plane: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_extents(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::Usage(format!("extents must be three positive integers like 32,32,32, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| bad())?;
        if *o == 0 {
            return Err(bad());
        }
    }
    Ok(out)
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            generator,
            extents,
            count,
            seed,
            dt,
            nu,
            decay,
            train_fraction,
            out,
        } => {
            let gen = Generator::parse(&generator, dt, nu, decay)?;
            let ds = run::generate(gen, parse_extents(&extents)?, count, seed, train_fraction)?;
            let audit = run::divergence_audit(&ds.fields)?;
            println!(
                "divergence audit: {}/{} fields within tolerance, max |div| {:.3e} (tolerance {:.3e})",
                audit.passed, audit.total, audit.max_divergence, audit.max_tolerance
            );
            write_dataset(&ds, &out)?;
            println!("wrote {} fields to {}", ds.len(), out.display());
        }
        Command::Import {
            input,
            extents,
            channels,
            dtype,
            order,
            out,
        } => {
            let mut ds = import_raw(&input, parse_extents(&extents)?, channels, dtype, order)?;
            ds.fit_normalization(&(0..ds.len()).collect::<Vec<_>>())?;
            write_dataset(&ds, &out)?;
            println!("imported {} into {}", input.display(), out.display());
        }
        Command::Export { data, dtype, order, out } => {
            export_raw(&read_dataset(&data)?, &out, dtype, order)?;
        }
        Command::Config { config, overrides } => {
            print!("{}", load_config(config.as_ref(), &overrides)?.to_text());
        }
        Command::Train {
            config,
            data,
            out,
            overrides,
            resume,
        } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            let ds = read_dataset(&data)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let s = run::train_run(&cfg, &ds, &out, resume)?;
            println!(
                "trained {} steps, last loss {}, best eval {}",
                s.steps,
                s.last_loss.map_or("-".into(), |v| format!("{v:.5}")),
                s.best_eval.map_or("-".into(), |v| format!("{v:.5}"))
            );
            if let Some(p) = s.last_checkpoint {
                println!("checkpoint: {}", p.display());
            }
        }
        Command::Reconstruct {
            ckpt,
            data,
            planes,
            steps,
            seed,
            fields,
            batch,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = read_dataset(&data)?;
            let mut planes = parse_planes(&planes)?;
            for (axis, index) in run::dedup_planes(&mut planes) {
                log::warn!("ignoring repeated plane {axis}:{index}");
            }
            let indices: Vec<usize> = match fields {
                Some(list) => list
                    .split(',')
                    .map(|t| {
                        let i: usize = t.trim().parse().map_err(|_| Error::Usage(format!("bad field index `{t}`")))?;
                        if i >= ds.len() {
                            return Err(Error::Usage(format!("field {i} out of range (dataset has {})", ds.len())));
                        }
                        Ok(i)
                    })
                    .collect::<Result<_>>()?,
                None => {
                    let (_, test) = split_indices(&ds.fields, 0.8, flowdit_core::flowgen::SplitProtocol::Extrapolation)?;
                    if test.is_empty() { (0..ds.len()).collect() } else { test }
                }
            };
            let truth: Vec<_> = indices.iter().map(|&i| ds.fields[i].clone()).collect();
            let stats = ck.stats.clone().unwrap_or_else(|| ds.stats.clone());
            let sched = flowdit_core::diffusion::DiffusionSchedule::default();
            let opts = ReconOptions { planes, steps, seed, batch };
            let recon = run::reconstruct(&ck, &stats, &truth, &opts, &sched)?;
            let reports = run::evaluate_all(&recon, &truth)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut rds = FlowDataset::new(recon)?;
            rds.stats = stats;
            write_dataset(&rds, &out.join("recon.vxfd"))?;
            write_dataset(&FlowDataset { fields: truth, stats: rds.stats.clone() }, &out.join("truth.vxfd"))?;
            run::write_text(&out.join("summary.csv"), &run::summary_csv(&reports))?;
            run::write_text(&out.join("profiles.csv"), &run::profile_csv(&reports))?;
            println!("{}", run::summary_text(&reports));
        }
        Command::Eval { pred, truth, out } => {
            let p = read_dataset(&pred)?;
            let t = read_dataset(&truth)?;
            let reports = run::evaluate_all(&p.fields, &t.fields)?;
            run::write_text(&out.join("summary.csv"), &run::summary_csv(&reports))?;
            run::write_text(&out.join("profiles.csv"), &run::profile_csv(&reports))?;
            println!("{}", run::summary_text(&reports));
        }
        Command::BenchAttn {
            tokens,
            dim,
            window,
            heads,
            repeats,
            plane,
            out,
        } => {
            let report = bench_attention(tokens, dim, window, heads, repeats, plane)?;
            match out {
                Some(path) => run::write_text(&path, &report.to_csv())?,
                None => print!("{}", report.to_csv()),
            }
            println!("{}", report.summary_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
