use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{Experiment, ExperimentConfig};
use super::{plot, write_file, CliError};
use crate::collectives::trace_csv;
use crate::parallel3d::SchemeTable;
use crate::toymodel::{run_experiment, PathTotals, RunMetrics};

/// The JSON summary written next to each run's CSVs.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scheme: String,
    pub world_size: usize,
    pub dp: usize,
    pub pp: usize,
    pub tp: usize,
    pub zero1: bool,
    pub seed: u64,
    pub steps_completed: usize,
    pub diverged: bool,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub simulated_seconds: f64,
    pub samples_per_sec: f64,
    pub paths: BTreeMap<String, PathTotals>,
}

impl RunSummary {
    fn new(exp: &Experiment, seed: u64, m: &RunMetrics) -> Self {
        Self {
            scheme: m.scheme.clone(),
            world_size: m.world_size,
            dp: exp.layout.dp,
            pp: exp.layout.pp,
            tp: exp.layout.tp,
            zero1: exp.zero1.is_some(),
            seed,
            steps_completed: m.steps_completed,
            diverged: m.diverged,
            final_train_loss: m.final_train_loss(),
            final_eval_loss: m.final_eval_loss,
            simulated_seconds: m.simulated_seconds,
            samples_per_sec: m.samples_per_sec,
            paths: m.paths.iter().map(|(p, t)| (p.to_string(), t.clone())).collect(),
        }
    }
}

/// Runs the configured experiment once per seed and writes `loss.csv`,
/// `trace.csv` and `summary.json` into `out` (suffixed `_s<seed>` when more
/// than one seed runs).
pub fn cmd_run(config: &ExperimentConfig, out: Option<&Path>, seeds: Option<&[u64]>) -> Result<Vec<RunSummary>, CliError> {
    let mut exp = config.resolve()?;
    if let Some(s) = seeds {
        exp.seeds = s.to_vec();
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| config.output.dir.clone());
    let multi = exp.seeds.len() > 1;
    let mut summaries = Vec::new();
    for &seed in &exp.seeds {
        let (metrics, events) = run_experiment(&exp.model_for(seed), &exp.topology, &exp.layout, &exp.scheme, exp.zero1)?;
        let suffix = if multi { format!("_s{seed}") } else { String::new() };
        let summary = RunSummary::new(&exp, seed, &metrics);
        write_file(&dir.join(format!("loss{suffix}.csv")), &metrics.loss_csv())?;
        write_file(&dir.join(format!("trace{suffix}.csv")), &trace_csv(&events))?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write_file(&dir.join(format!("summary{suffix}.json")), &(json + "\n"))?;
        summaries.push(summary);
    }
    Ok(summaries)
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub plots: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scheme: String,
    pub world_size: usize,
    pub seed: u64,
    pub samples_per_sec: f64,
    /// Held-out loss at the end of the run; NaN if it diverged.
    pub final_loss: f64,
    pub train_loss: Vec<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("scheme,world_size,seed,samples_per_sec,final_loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.scheme, r.world_size, r.seed, r.samples_per_sec, r.final_loss));
    }
    out
}

fn sweep_loss_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("scheme,world_size,seed,step,train_loss\n");
    for r in rows {
        for (i, l) in r.train_loss.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", r.scheme, r.world_size, r.seed, i, l));
        }
    }
    out
}

/// Runs every (world size, scheme, seed) combination in parallel and writes
/// `sweep.csv` and `sweep_loss.csv` (plus SVG charts with `plots`). Rows come
/// back in configuration order regardless of scheduling.
pub fn cmd_sweep(config: &ExperimentConfig, opts: &SweepOptions) -> Result<Vec<SweepRow>, CliError> {
    let mut base = config.resolve()?;
    if let Some(s) = &opts.seeds {
        base.seeds = s.clone();
    }
    let schemes: Vec<SchemeTable> = if config.sweep.schemes.is_empty() {
        vec![base.scheme.clone()]
    } else {
        config
            .sweep
            .schemes
            .iter()
            .map(|n| SchemeTable::by_name(n).map_err(|e| CliError::invalid("sweep.schemes", e.to_string())))
            .collect::<Result<_, _>>()?
    };
    let worlds: Vec<Experiment> = if config.sweep.world_sizes.is_empty() {
        vec![base.clone()]
    } else {
        config.sweep.world_sizes.iter().map(|&w| base.scaled_to(w)).collect::<Result<_, _>>()?
    };
    let mut jobs = Vec::new();
    for exp in &worlds {
        for scheme in &schemes {
            for &seed in &base.seeds {
                jobs.push((exp, scheme, seed));
            }
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(exp, scheme, seed)| {
            let (m, _) = run_experiment(&exp.model_for(seed), &exp.topology, &exp.layout, scheme, exp.zero1)?;
            Ok(SweepRow {
                scheme: m.scheme.clone(),
                world_size: m.world_size,
                seed,
                samples_per_sec: m.samples_per_sec,
                final_loss: m.final_eval_loss,
                train_loss: m.train_loss,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let dir = opts.out.clone().unwrap_or_else(|| config.output.dir.clone());
    write_file(&dir.join("sweep.csv"), &sweep_csv(&rows))?;
    write_file(&dir.join("sweep_loss.csv"), &sweep_loss_csv(&rows))?;
    if opts.plots {
        write_file(&dir.join("loss_vs_step.svg"), &plot::loss_chart(&rows))?;
        write_file(&dir.join("samples_per_sec.svg"), &plot::throughput_chart(&rows))?;
    }
    Ok(rows)
}

/// Resolves the config and describes it; errors carry the offending field.
pub fn cmd_validate(config: &ExperimentConfig) -> Result<String, CliError> {
    let exp = config.resolve()?;
    let l = &exp.layout;
    let mut out = format!(
        "ok: {} ranks ({} nodes x {} GPUs), dp {} pp {} tp {}, zero1 {}\nscheme {}\n",
        l.world_size(),
        exp.topology.num_nodes,
        exp.topology.gpus_per_node,
        l.dp,
        l.pp,
        l.tp,
        match exp.zero1 {
            None => "off".to_string(),
            Some(g) => format!("on, gradients by {}", g.as_str()),
        },
        exp.scheme.name(),
    );
    out.push_str(&exp.scheme.to_table_string());
    Ok(out)
}
