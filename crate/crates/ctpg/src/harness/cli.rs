//! Command-line driver: single runs, seed/mode sweeps, checkpoint-only
//! evaluation, and plot-ready curve aggregation. Exit codes: 0 success,
//! 2 configuration error, 3 training divergence.

use super::config::Config;
use super::metrics::{self, Row};
use crate::approx::read_checkpoint;
use crate::approx::write_checkpoint;
use crate::error::{Error, Result};
use crate::trainer::{eval_pair, Trainer};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ctpg", about = "Multi-task RL laboratory with cross-task policy guidance")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train once from a config file and write metrics, manifest, checkpoint.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. --set train.seed=3 (repeatable).
        #[arg(long = "set")]
        set: Vec<String>,
        /// Output directory (default: $CTPG_OUT_DIR or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per (seed, mode) plus an aggregated summary.csv.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<String>,
        /// Success threshold for the steps-to-threshold statistic.
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load a checkpoint and evaluate it without training.
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Aggregate metrics CSVs into per-group learning curves (step, mean, std).
    Plotdata {
        /// Inputs as group=path, e.g. ctpg=out/ctpg-seed1/metrics.csv.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value = "success_rate")]
        metric: String,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config, set, out } => {
            let mut cfg = Config::from_file(&config)?;
            cfg.apply_overrides(&set)?;
            let report = run_one(&cfg, &out_root(out))?;
            print!("{report}");
            Ok(())
        }
        Cmd::Sweep { config, seeds, modes, threshold, set, out } => {
            let mut cfg = Config::from_file(&config)?;
            cfg.apply_overrides(&set)?;
            sweep(&cfg, &seeds, &modes, threshold, &out_root(out))
        }
        Cmd::Eval { config, checkpoint, episodes, set } => {
            let mut cfg = Config::from_file(&config)?;
            cfg.apply_overrides(&set)?;
            let report = eval_checkpoint(&cfg, &checkpoint, episodes)?;
            print!("{report}");
            Ok(())
        }
        Cmd::Plotdata { inputs, metric, out } => {
            let table = plotdata(&inputs, &metric)?;
            match out {
                Some(path) => std::fs::write(path, table)?,
                None => print!("{table}"),
            }
            Ok(())
        }
    }
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("CTPG_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Executes one full training run into `dir`. The manifest and whatever
/// metrics were collected are retained even when training diverges. Returns
/// the final per-task and mean metric report.
pub fn run_one(cfg: &Config, dir: &Path) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.txt"), cfg.manifest())?;
    let seed = cfg.u64("train.seed")?;
    let mut trainer = cfg.build_trainer()?;
    let outcome = trainer.run();
    metrics::write_csv(&dir.join("metrics.csv"), seed, &trainer.metrics)?;
    outcome?;
    let blocks: Vec<(String, &crate::approx::ParamBlock)> = trainer
        .control
        .named_blocks("control")
        .into_iter()
        .chain(trainer.guide.named_blocks("guide"))
        .collect();
    write_checkpoint(
        &dir.join("checkpoint.ckpt"),
        &blocks,
        &ChaCha8Rng::seed_from_u64(seed),
    )?;
    Ok(final_report(&trainer))
}

fn final_report(trainer: &Trainer) -> String {
    let name = trainer.suite.metric_kind().name();
    let last = trainer
        .metrics
        .iter()
        .map(|m| m.env_steps_per_task)
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    for m in &trainer.metrics {
        if m.env_steps_per_task != last || m.metric != name {
            continue;
        }
        match m.task {
            Some(i) => out.push_str(&format!("task {i} {name} = {}\n", m.value)),
            None => out.push_str(&format!("mean {name} = {}\n", m.value)),
        }
    }
    out
}

fn load_checkpoint_into(trainer: &mut Trainer, path: &Path) -> Result<()> {
    let data = read_checkpoint(path)?;
    let stored: BTreeMap<String, _> = data.blocks.into_iter().collect();
    let targets = trainer
        .control
        .named_blocks_mut("control")
        .into_iter()
        .chain(trainer.guide.named_blocks_mut("guide"));
    for (name, block) in targets {
        let src = stored
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block '{name}'")))?;
        if src.len() != block.len() {
            return Err(Error::Checkpoint(format!(
                "block '{name}' has {} values, expected {}",
                src.len(),
                block.len()
            )));
        }
        block.values_mut().copy_from_slice(src.values());
    }
    Ok(())
}

pub fn eval_checkpoint(cfg: &Config, checkpoint: &Path, episodes: usize) -> Result<String> {
    let mut trainer = cfg.build_trainer()?;
    load_checkpoint_into(&mut trainer, checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64("train.seed")?);
    rng.set_stream(3);
    let name = trainer.suite.metric_kind().name();
    let n = trainer.suite.n_tasks();
    let mut out = String::new();
    let mut mean = 0.0;
    for i in 0..n {
        let v = eval_pair(&trainer.suite, &trainer.control, i, i, episodes, &mut rng)?;
        mean += v / n as f64;
        out.push_str(&format!("task {i} {name} = {v}\n"));
    }
    out.push_str(&format!("mean {name} = {mean}\n"));
    Ok(out)
}

struct RunResult {
    mode: String,
    failed: bool,
    final_mean: f64,
    steps_to_threshold: f64,
    censored: bool,
}

pub fn sweep(
    cfg: &Config,
    seeds: &[u64],
    modes: &[String],
    threshold: f64,
    root: &Path,
) -> Result<()> {
    if seeds.is_empty() || modes.is_empty() {
        return Err(Error::Config("sweep needs at least one seed and one mode".into()));
    }
    std::fs::create_dir_all(root)?;
    let metric = match cfg.str("env.suite")? {
        "gridskills" => "success_rate",
        _ => "episode_return",
    };
    let total = cfg.u64("train.total_steps_per_task")? as f64;
    let mut results: Vec<RunResult> = Vec::new();
    for mode in modes {
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.set("train.mode", mode)?;
            run_cfg.set("train.seed", &seed.to_string())?;
            let dir = root.join(format!("{mode}-seed{seed}"));
            match run_one(&run_cfg, &dir) {
                Ok(_) => {
                    let rows = metrics::read_csv(&dir.join("metrics.csv"))?;
                    let (final_mean, steps, censored) =
                        curve_stats(&rows, metric, threshold, total);
                    results.push(RunResult {
                        mode: mode.clone(),
                        failed: false,
                        final_mean,
                        steps_to_threshold: steps,
                        censored,
                    });
                }
                Err(e) => {
                    eprintln!("run {mode} seed {seed} failed: {e}");
                    results.push(RunResult {
                        mode: mode.clone(),
                        failed: true,
                        final_mean: f64::NAN,
                        steps_to_threshold: f64::NAN,
                        censored: true,
                    });
                }
            }
        }
    }
    let mut summary = String::from(
        "mode,runs,failures,final_mean,final_std,final_median,\
         steps_mean,steps_std,steps_median,censored\n",
    );
    for mode in modes {
        let ok: Vec<&RunResult> = results
            .iter()
            .filter(|r| &r.mode == mode && !r.failed)
            .collect();
        let failures = results.iter().filter(|r| &r.mode == mode && r.failed).count();
        if ok.is_empty() {
            summary.push_str(&format!(
                "{mode},{},{failures},nan,nan,nan,nan,nan,nan,{}\n",
                seeds.len(),
                seeds.len()
            ));
            continue;
        }
        let finals: Vec<f64> = ok.iter().map(|r| r.final_mean).collect();
        let steps: Vec<f64> = ok.iter().map(|r| r.steps_to_threshold).collect();
        let censored = ok.iter().filter(|r| r.censored).count() + failures;
        let (fm, fs) = metrics::mean_std(&finals);
        let (sm, ss) = metrics::mean_std(&steps);
        summary.push_str(&format!(
            "{mode},{},{failures},{fm},{fs},{},{sm},{ss},{},{censored}\n",
            seeds.len(),
            metrics::median(&finals),
            metrics::median(&steps),
        ));
    }
    std::fs::write(root.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Final across-task mean of `metric` plus the first step at which it
/// reaches `threshold`; never reaching it reports the total budget with a
/// censored flag.
fn curve_stats(rows: &[Row], metric: &str, threshold: f64, total: f64) -> (f64, f64, bool) {
    let curve: Vec<(u64, f64)> = rows
        .iter()
        .filter(|r| r.metric == metric && r.task.is_none())
        .map(|r| (r.env_steps_per_task, r.value))
        .collect();
    let final_mean = curve.last().map(|&(_, v)| v).unwrap_or(f64::NAN);
    match curve.iter().find(|&&(_, v)| v >= threshold) {
        Some(&(s, _)) => (final_mean, s as f64, false),
        None => (final_mean, total, true),
    }
}

pub fn plotdata(inputs: &[String], metric: &str) -> Result<String> {
    let mut groups: BTreeMap<String, Vec<(String, Vec<(u64, f64)>)>> = BTreeMap::new();
    for input in inputs {
        let (group, path) = input.split_once('=').ok_or_else(|| {
            Error::Config(format!("plotdata input must be group=path, got '{input}'"))
        })?;
        let rows = metrics::read_csv(Path::new(path))?;
        let curve: Vec<(u64, f64)> = rows
            .iter()
            .filter(|r| r.metric == metric && r.task.is_none())
            .map(|r| (r.env_steps_per_task, r.value))
            .collect();
        if curve.is_empty() {
            return Err(Error::Config(format!(
                "{path}: no '{metric}' mean rows to aggregate"
            )));
        }
        groups
            .entry(group.to_string())
            .or_default()
            .push((path.to_string(), curve));
    }
    let mut out = String::from("group,env_steps_per_task,mean,std\n");
    for (group, runs) in &groups {
        let grid: Vec<u64> = runs[0].1.iter().map(|&(s, _)| s).collect();
        let misaligned: Vec<&str> = runs
            .iter()
            .filter(|(_, c)| c.iter().map(|&(s, _)| s).collect::<Vec<_>>() != grid)
            .map(|(p, _)| p.as_str())
            .collect();
        if !misaligned.is_empty() {
            return Err(Error::Config(format!(
                "group '{group}': step grids misaligned with {}: {}",
                runs[0].0,
                misaligned.join(", ")
            )));
        }
        for (idx, &step) in grid.iter().enumerate() {
            let vals: Vec<f64> = runs.iter().map(|(_, c)| c[idx].1).collect();
            let (m, s) = metrics::mean_std(&vals);
            out.push_str(&format!("{group},{step},{m},{s}\n"));
        }
    }
    Ok(out)
}
