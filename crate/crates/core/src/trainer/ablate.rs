use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::eval::{evaluate, EvalSummary, MetricReport, SeedSummary};
use super::probe::{collect_examples, train_probe, ProbeReport};
use super::{train_seed, write_log, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, MeanStd};
use crate::model::{ablation_grid, Ablation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub eval: EvalSummary,
    pub probe: ProbeReport,
    pub final_recon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub name: String,
    pub ablation: Ablation,
    pub lambda_approx: f64,
    pub eval: SeedSummary,
    pub probe_top1: Option<MeanStd>,
    pub probe_r2: Option<MeanStd>,
    pub runs: Vec<SeedRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub configs: Vec<ConfigSummary>,
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<&ConfigSummary> {
        self.configs.iter().find(|c| c.name == name)
    }
}

/// Trains, evaluates and probes every ablation row for every seed. Results go
/// to `<out_dir>/<row>/` and `<out_dir>/ablation.json`.
pub fn run_ablation(
    config: &TrainConfig,
    mut progress: impl FnMut(&str, u64),
) -> Result<AblationReport> {
    config.validate()?;
    let train = config.data.train_samples()?;
    let eval = config.data.eval_samples()?;
    let mut rows: Vec<(String, Ablation, f64)> = ablation_grid()
        .into_iter()
        .map(|(n, a)| (n.to_string(), a, config.lambda_approx))
        .collect();
    for &l in &config.lambda_sweep {
        rows.push((format!("full_lambda{l}"), Ablation::default(), l));
    }
    let mut configs = Vec::new();
    for (name, ablation, lambda) in rows {
        let mut cfg = config.clone();
        cfg.lambda_approx = lambda;
        cfg.ablation = ablation;
        let row_dir = config.out_dir.join(&name);
        let mut runs = Vec::new();
        let mut reports = Vec::new();
        for &seed in &config.seeds {
            progress(&name, seed);
            let dir = row_dir.join(format!("seed{seed}"));
            let out = train_seed(&cfg, ablation, seed, &train, Some(&dir))?;
            save_checkpoint(&dir, &out.model, &out.store, ablation, cfg.steps, seed)?;
            write_log(&dir.join("log.jsonl"), &out.log)?;
            let report = evaluate(&out.model, &out.store, &eval, ablation, seed)?;
            let examples = collect_examples(&out.model, &out.store, &eval, ablation)?;
            let probe = train_probe(&examples, &cfg.probe)?;
            runs.push(SeedRun {
                seed,
                checkpoint: dir,
                eval: report.summary.clone(),
                probe,
                final_recon: out.log.last().map_or(f64::NAN, |e| e.recon),
            });
            reports.push(report);
        }
        let metric = MetricReport::new(reports);
        let path = row_dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(&metric)?).map_err(|e| Error::io(&path, e))?;
        configs.push(ConfigSummary {
            name,
            ablation,
            lambda_approx: lambda,
            eval: metric.summary,
            probe_top1: mean_std(runs.iter().map(|r| r.probe.top1)),
            probe_r2: mean_std(runs.iter().map(|r| r.probe.bbox_r2)),
            runs,
        });
    }
    let report = AblationReport { configs };
    let path = config.out_dir.join("ablation.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
