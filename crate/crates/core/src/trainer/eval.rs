//! Discovery-metric evaluation of a trained model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::diffnum::ParamStore;
use crate::error::{Error, Result};
use crate::metrics::{discovery_scores, gt_object_masks, label_masks, mean_std, miou, MeanStd};
use crate::model::{Ablation, DiasModel, Inference};
use crate::redundancy::RedundancyMask;
use crate::scene::SceneSample;

pub const EVAL_BATCH: usize = 32;

/// Bilinear resize of every slot row to `h x w` (pixel centres aligned).
pub fn upsample(map: &AttentionMap, h: usize, w: usize) -> AttentionMap {
    if (map.height(), map.width()) == (h, w) {
        return map.clone();
    }
    let (sh, sw) = (map.height(), map.width());
    let coord = |o: usize, out: usize, src: usize| {
        let x = ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(map.slots() * h * w);
    for k in 0..map.slots() {
        let row = map.slot_row(k);
        for y in 0..h {
            let (y0, y1, fy) = coord(y, h, sh);
            for x in 0..w {
                let (x0, x1, fx) = coord(x, w, sw);
                let top = row[y0 * sw + x0] * (1.0 - fx) + row[y0 * sw + x1] * fx;
                let bot = row[y1 * sw + x0] * (1.0 - fx) + row[y1 * sw + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    AttentionMap::new(map.slots(), h, w, out).expect("resized shape")
}

/// Per-pixel slot labels at image resolution.
pub fn segment(map: &AttentionMap, mask: Option<&RedundancyMask>, h: usize, w: usize) -> Vec<usize> {
    upsample(map, h, w).argmax_labels(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub seed: u64,
    pub ari: f64,
    pub ari_fg: Option<f64>,
    pub mbo: Option<f64>,
    pub miou: Option<f64>,
    /// mIoU of the first-iteration segmentation.
    pub first_miou: Option<f64>,
    pub kept_slots: usize,
}

impl SampleScores {
    /// Whether the final map is at least as good as the first one.
    pub fn last_better(&self) -> Option<bool> {
        Some(self.miou? >= self.first_miou?)
    }
}

/// Scores final and first attention of one image against its ground truth.
pub fn score_sample(
    sample: &SceneSample,
    first: &AttentionMap,
    last: &AttentionMap,
    mask: &RedundancyMask,
) -> Result<SampleScores> {
    let (h, w) = (sample.height, sample.width);
    let pred = segment(last, Some(mask), h, w);
    let scores = discovery_scores(&sample.gt_masks, &pred)?;
    let first_pred = segment(first, None, h, w);
    let first_miou = miou(&gt_object_masks(&sample.gt_masks), &label_masks(&first_pred))?;
    Ok(SampleScores {
        seed: sample.seed,
        ari: scores.ari,
        ari_fg: scores.ari_fg,
        mbo: scores.mbo,
        miou: scores.miou,
        first_miou,
        kept_slots: mask.num_kept(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ari: Option<MeanStd>,
    pub ari_fg: Option<MeanStd>,
    pub mbo: Option<MeanStd>,
    pub miou: Option<MeanStd>,
    /// Share of samples whose final-map mIoU is at least the first-map mIoU.
    pub fraction_last_better: Option<f64>,
    pub mean_kept_slots: f64,
}

impl EvalSummary {
    pub fn from_samples(samples: &[SampleScores]) -> Self {
        let cmp: Vec<bool> = samples.iter().filter_map(SampleScores::last_better).collect();
        let frac = (!cmp.is_empty())
            .then(|| cmp.iter().filter(|&&b| b).count() as f64 / cmp.len() as f64);
        EvalSummary {
            ari: mean_std(samples.iter().map(|s| Some(s.ari))),
            ari_fg: mean_std(samples.iter().map(|s| s.ari_fg)),
            mbo: mean_std(samples.iter().map(|s| s.mbo)),
            miou: mean_std(samples.iter().map(|s| s.miou)),
            fraction_last_better: frac,
            mean_kept_slots: samples.iter().map(|s| s.kept_slots as f64).sum::<f64>()
                / samples.len().max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub ablation: Ablation,
    pub summary: EvalSummary,
    pub samples: Vec<SampleScores>,
}

/// Runs inference on `samples` in fixed-size batches with a fixed noise seed
/// per batch, so results do not depend on anything but the parameters.
pub fn infer_all(
    model: &DiasModel,
    store: &ParamStore<f32>,
    samples: &[SceneSample],
    ablation: Ablation,
) -> Result<Vec<Inference>> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for (bi, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let z = model.features(store, &refs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xE7A1 + bi as u64);
        out.extend(model.infer(store, &z, ablation, &mut rng)?);
    }
    Ok(out)
}

pub fn evaluate(
    model: &DiasModel,
    store: &ParamStore<f32>,
    samples: &[SceneSample],
    ablation: Ablation,
    seed: u64,
) -> Result<EvalReport> {
    let inf = infer_all(model, store, samples, ablation)?;
    let scores = samples
        .iter()
        .zip(&inf)
        .map(|(s, i)| score_sample(s, &i.first, &i.last, &i.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        seed,
        ablation,
        summary: EvalSummary::from_samples(&scores),
        samples: scores,
    })
}

/// Across-seed statistics of the per-seed means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub ari: Option<MeanStd>,
    pub ari_fg: Option<MeanStd>,
    pub mbo: Option<MeanStd>,
    pub miou: Option<MeanStd>,
    pub fraction_last_better: Option<MeanStd>,
}

impl SeedSummary {
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        let pick = |f: fn(&EvalSummary) -> Option<MeanStd>| {
            mean_std(reports.iter().map(|r| f(&r.summary).map(|m| m.mean)))
        };
        SeedSummary {
            seeds: reports.iter().map(|r| r.seed).collect(),
            ari: pick(|s| s.ari),
            ari_fg: pick(|s| s.ari_fg),
            mbo: pick(|s| s.mbo),
            miou: pick(|s| s.miou),
            fraction_last_better: mean_std(reports.iter().map(|r| r.summary.fraction_last_better)),
        }
    }
}

/// Report written by `eval`: per-seed reports plus their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub summary: SeedSummary,
    pub runs: Vec<EvalReport>,
}

impl MetricReport {
    pub fn new(runs: Vec<EvalReport>) -> Self {
        MetricReport {
            summary: SeedSummary::from_reports(&runs),
            runs,
        }
    }
}
