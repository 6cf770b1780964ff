use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use dias_core::scene::{generate_many, read_dataset, write_dataset, SceneConfig};
use dias_core::trainer::{
    collect_examples, evaluate, load_checkpoint, plot_rows, render_csv, render_svg, run_ablation,
    train, train_probe, MetricReport, ProbeConfig, TrainConfig,
};
use dias_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dias", version, about = "Object-centric slot models on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene dataset.
    GenData {
        /// Scene config (TOML); either a bare scene table or a training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every seed of a config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score checkpoints on a dataset.
    Eval {
        /// One checkpoint directory per seed.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Report path; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, evaluate and probe all ablation rows.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit the class/box probe on frozen slots.
    Probe {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// TOML with probe settings, either bare or under `[probe]`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render report files as an SVG bar chart plus CSV.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, json: String) -> Result<()> {
    match out {
        Some(p) => write_text(p, &json),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

/// Accepts a bare table or the matching section of a training config.
fn section<T: for<'de> Deserialize<'de>>(text: &str, pick: fn(TrainConfig) -> T) -> Result<T> {
    match toml::from_str::<T>(text) {
        Ok(v) => Ok(v),
        Err(bare) => match TrainConfig::from_toml(text) {
            Ok(cfg) => Ok(pick(cfg)),
            Err(_) => Err(bare.into()),
        },
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            config,
            count,
            out,
            seed,
        } => {
            let scene = match config {
                Some(p) => section(&read_text(&p)?, |c| c.data.scene)?,
                None => SceneConfig::default(),
            };
            scene.validate()?;
            let samples = generate_many(&scene, seed, count)?;
            write_dataset(&samples, &scene, &out)?;
            eprintln!("wrote {count} scenes to {}", out.display());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            for dir in train(&cfg)? {
                println!("{}", dir.display());
            }
        }
        Command::Eval { ckpt, data, out } => {
            let (_, samples) = read_dataset(&data)?;
            let mut runs = Vec::new();
            for dir in &ckpt {
                let c = load_checkpoint(dir)?;
                runs.push(evaluate(&c.model, &c.store, &samples, c.manifest.ablation, c.manifest.seed)?);
            }
            emit(out.as_deref(), serde_json::to_string_pretty(&MetricReport::new(runs))?)?;
        }
        Command::Ablate { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let report = run_ablation(&cfg, |name, seed| eprintln!("{name} seed {seed}"))?;
            for c in &report.configs {
                let fg = c.eval.ari_fg.map_or("n/a".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.std));
                println!("{:<24} ARI_fg {fg}", c.name);
            }
        }
        Command::Probe {
            ckpt,
            data,
            config,
            out,
        } => {
            let probe = match config {
                Some(p) => section(&read_text(&p)?, |c| c.probe)?,
                None => ProbeConfig::default(),
            };
            let (_, samples) = read_dataset(&data)?;
            let mut reports = Vec::new();
            for dir in &ckpt {
                let c = load_checkpoint(dir)?;
                let examples = collect_examples(&c.model, &c.store, &samples, c.manifest.ablation)?;
                reports.push(train_probe(&examples, &probe)?);
            }
            emit(out.as_deref(), serde_json::to_string_pretty(&reports)?)?;
        }
        Command::Plot { out, reports } => {
            let mut rows = Vec::new();
            for p in &reports {
                let label = p.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
                rows.extend(plot_rows(&read_text(p)?, &label)?);
            }
            let svg = render_svg(&rows)?;
            write_text(&out.join("figure.svg"), &svg)?;
            write_text(&out.join("values.csv"), &render_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
