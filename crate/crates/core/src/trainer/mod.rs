//! Training loop, evaluation, probing, ablations and plotting.

mod ablate;
mod checkpoint;
mod eval;
mod optim;
mod plot;
mod probe;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablate::{run_ablation, AblationReport, ConfigSummary, SeedRun};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_MANIFEST, CHECKPOINT_VERSION, PARAMS_FILE,
};
pub use eval::{
    evaluate, infer_all, score_sample, segment, upsample, EvalReport, EvalSummary, MetricReport,
    SampleScores, SeedSummary, EVAL_BATCH,
};
pub use optim::{clip_global_norm, global_norm, learning_rate, Adam};
pub use plot::{plot_rows, render_csv, render_svg, PlotRow};
pub use probe::{collect_examples, match_slots, train_probe, ProbeConfig, ProbeExample, ProbeReport};

use crate::diffnum::{Graph, ParamStore, Tensor};
use crate::distill::MatchCost;
use crate::error::{Error, Result};
use crate::model::{Ablation, DiasModel, LossOptions, ModelConfig};
use crate::scene::{generate_many, read_dataset, SceneConfig, SceneSample};

/// Offset between training and held-out scene seeds when data is generated.
pub const EVAL_SEED_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `gen-data`; generated on the fly when absent.
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            eval_dir: None,
            train_count: 5000,
            eval_count: 500,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

impl DataConfig {
    fn load(&self, dir: &Option<PathBuf>, count: usize, seed: u64) -> Result<Vec<SceneSample>> {
        match dir {
            Some(d) => Ok(read_dataset(d)?.1),
            None => generate_many(&self.scene, seed, count),
        }
    }

    pub fn train_samples(&self) -> Result<Vec<SceneSample>> {
        self.load(&self.train_dir, self.train_count, self.seed)
    }

    pub fn eval_samples(&self) -> Result<Vec<SceneSample>> {
        self.load(&self.eval_dir, self.eval_count, self.seed + EVAL_SEED_OFFSET)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    /// Weight of the distillation loss.
    pub lambda_approx: f64,
    /// Steps before the distillation loss switches on.
    pub distill_warmup: usize,
    pub match_cost: MatchCost,
    /// Train the convolutional encoder; otherwise it stays at initialization
    /// and acts as a fixed feature extractor.
    pub train_encoder: bool,
    pub normalize_target: bool,
    pub log_every: usize,
    pub out_dir: PathBuf,
    /// Extra distillation weights run with the full configuration by `ablate`.
    pub lambda_sweep: Vec<f64>,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seeds: vec![0, 1, 2],
            steps: 20_000,
            batch_size: 32,
            lr: 4e-4,
            warmup_steps: 2_500,
            clip_norm: 1.0,
            lambda_approx: 0.1,
            distill_warmup: 1_000,
            match_cost: MatchCost::CrossEntropy,
            train_encoder: false,
            normalize_target: false,
            log_every: 100,
            out_dir: PathBuf::from("runs"),
            lambda_sweep: vec![],
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if !(self.lambda_approx >= 0.0) || self.lambda_sweep.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("distillation weights must be non-negative".into()));
        }
        self.model.encoder.grid()?;
        self.model.aggregator.validate(self.ablation.schedule())?;
        self.data.scene.validate()?;
        if self.data.scene.image_size != self.model.encoder.image_size {
            return Err(Error::Config(format!(
                "scene image_size {} differs from encoder image_size {}",
                self.data.scene.image_size, self.model.encoder.image_size
            )));
        }
        if self.data.scene.n_classes > self.probe.classes {
            return Err(Error::Config("probe.classes is smaller than scene.n_classes".into()));
        }
        self.probe.validate()
    }

    /// Run directory of one seed.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed{seed}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub approx: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Written next to the checkpoint when a loss goes non-finite. Non-finite
/// numbers are stored as `null`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NanDump {
    pub step: usize,
    pub sample_seeds: Vec<u64>,
    pub recon: Option<f64>,
    pub approx: Option<f64>,
    pub parameter_norms: Vec<(String, Option<f64>)>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub struct TrainOutcome {
    pub model: DiasModel,
    pub store: ParamStore<f32>,
    pub log: Vec<LogEntry>,
}

fn trainable(train_encoder: bool) -> impl Fn(&str) -> bool {
    move |name: &str| train_encoder || !name.starts_with("encoder.")
}

/// Frozen-encoder features for every sample, `[N, n, c]` flattened.
fn cache_features(model: &DiasModel, store: &ParamStore<f32>, samples: &[SceneSample]) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for chunk in samples.chunks(64) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        out.extend_from_slice(model.features(store, &refs)?.data());
    }
    Ok(out)
}

/// Trains one seed. `run_dir`, when given, receives the NaN dump on failure.
pub fn train_seed(
    config: &TrainConfig,
    ablation: Ablation,
    seed: u64,
    samples: &[SceneSample],
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.ablation = ablation;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let model = DiasModel::new(&mut store, &cfg.model, &mut rng)?;
    let refs: Vec<&SceneSample> = samples.iter().collect();
    model.check_samples(&refs)?;
    let is_trainable = trainable(cfg.train_encoder);
    let ids: Vec<_> = store.ids().filter(|&id| is_trainable(store.name(id))).collect();
    let mut opt = Adam::new(&store, ids);
    let cache = if cfg.train_encoder {
        None
    } else {
        Some(cache_features(&model, &store, samples)?)
    };
    let (n, c) = (model.num_tokens(), cfg.model.encoder.feature_dim);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..samples.len()))
            .collect();
        let mut g = Graph::new();
        g.bind_filtered(&store, &is_trainable);
        let z = match &cache {
            Some(feat) => {
                let mut data = Vec::with_capacity(idx.len() * n * c);
                for &i in &idx {
                    data.extend_from_slice(&feat[i * n * c..(i + 1) * n * c]);
                }
                g.constant(Tensor::new(vec![idx.len(), n, c], data)?)
            }
            None => {
                let batch: Vec<&SceneSample> = idx.iter().map(|&i| &samples[i]).collect();
                let x = g.constant(crate::encoder::image_batch(&batch)?);
                model.encoder.encode(&mut g, x)?
            }
        };
        let options = LossOptions {
            lambda: cfg.lambda_approx,
            distill: step >= cfg.distill_warmup,
            match_cost: cfg.match_cost,
            normalize_target: cfg.normalize_target,
        };
        let write_dump = |recon: f64, approx: Option<f64>, msg: String| -> Error {
            let dump = NanDump {
                step,
                sample_seeds: idx.iter().map(|&i| samples[i].seed).collect(),
                recon: finite(recon),
                approx: approx.and_then(finite),
                parameter_norms: store
                    .iter()
                    .map(|(name, t)| {
                        let norm = t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                        (name.to_string(), finite(norm))
                    })
                    .collect(),
            };
            let Some(dir) = run_dir else {
                return Error::Numerical(msg);
            };
            let path = dir.join("nan_dump.json");
            let written = fs::create_dir_all(dir)
                .map_err(|e| Error::io(dir, e))
                .and_then(|_| Ok(serde_json::to_string_pretty(&dump)?))
                .and_then(|json| fs::write(&path, json).map_err(|e| Error::io(&path, e)));
            match written {
                Ok(()) => Error::Numerical(format!("{msg}; diagnostics in {}", path.display())),
                Err(e) => e,
            }
        };
        let out = match model.forward(&mut g, z, ablation, options, &mut rng) {
            Ok(out) => out,
            Err(Error::Numerical(msg)) => {
                return Err(write_dump(f64::NAN, None, format!("step {step}: {msg}")));
            }
            Err(e) => return Err(e),
        };
        let recon = g.value(out.recon).item() as f64;
        let approx = out.approx.map(|a| g.value(a).item() as f64);
        let total = g.value(out.total).item() as f64;
        if !total.is_finite() {
            let msg = format!("non-finite loss at step {step} (recon {recon}, approx {approx:?})");
            return Err(write_dump(recon, approx, msg));
        }
        let grads = g.backward(out.total)?;
        let mut gs: Vec<Vec<f32>> = opt
            .ids()
            .iter()
            .map(|&id| grads.get_or_zeros(g.param(id), store.get(id).numel()))
            .collect();
        let grad_norm = clip_global_norm(&mut gs, cfg.clip_norm);
        let lr = learning_rate(step, cfg.lr, cfg.warmup_steps, cfg.steps);
        opt.step(&mut store, &gs, lr);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log.push(LogEntry {
                step,
                total,
                recon,
                approx,
                lr,
                grad_norm,
            });
        }
    }
    Ok(TrainOutcome { model, store, log })
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in log {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains every configured seed, writing `seed<k>/` checkpoints and logs.
pub fn train(config: &TrainConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let samples = config.data.train_samples()?;
    let mut dirs = Vec::new();
    for &seed in &config.seeds {
        let dir = config.run_dir(seed);
        let out = train_seed(config, config.ablation, seed, &samples, Some(&dir))?;
        save_checkpoint(&dir, &out.model, &out.store, config.ablation, config.steps, seed)?;
        write_log(&dir.join("log.jsonl"), &out.log)?;
        dirs.push(dir);
    }
    Ok(dirs)
}
