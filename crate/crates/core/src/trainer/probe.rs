//! Recognition probe: a small MLP predicting class and bounding box from
//! frozen slots matched to ground-truth objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{infer_all, segment};
use super::optim::Adam;
use crate::diffnum::nn::Mlp;
use crate::diffnum::{Graph, ParamStore, Tensor};
use crate::distill::{hungarian, pad_square};
use crate::error::{Error, Result};
use crate::metrics::{iou, r2_multi, top1};
use crate::model::{Ablation, DiasModel};
use crate::scene::SceneSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub classes: usize,
    /// Leading share of scenes used for fitting; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 128,
            steps: 2000,
            lr: 1e-3,
            batch_size: 64,
            classes: 4,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.classes == 0 {
            return Err(Error::Config("probe widths and batch size must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("probe train_fraction must lie in (0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("probe lr must be positive".into()));
        }
        Ok(())
    }
}

/// One slot paired with the object it was matched to.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample {
    pub scene: usize,
    pub slot: Vec<f64>,
    pub class: usize,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub top1: Option<f64>,
    pub bbox_r2: Option<f64>,
    pub train_examples: usize,
    pub test_examples: usize,
}

/// Pairs kept slots with ground-truth objects by maximum total mask IoU;
/// pairs without overlap are dropped.
pub fn match_slots(
    sample: &SceneSample,
    pred: &[usize],
    kept: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let objects = sample.objects.len();
    if objects == 0 || kept.is_empty() {
        return Ok(vec![]);
    }
    let gt: Vec<Vec<bool>> = (1..=objects)
        .map(|l| sample.gt_masks.iter().map(|&v| v as usize == l).collect())
        .collect();
    let slot_masks: Vec<Vec<bool>> = kept
        .iter()
        .map(|&k| pred.iter().map(|&p| p == k).collect())
        .collect();
    let ious: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| slot_masks.iter().map(|m| iou(g, m)).collect())
        .collect();
    let cost: Vec<Vec<f64>> = ious.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let a = hungarian(&pad_square(&cost, kept.len(), 0.0))?;
    Ok((0..objects)
        .filter_map(|o| {
            let j = a.mapping[o];
            (j < kept.len() && ious[o][j] > 0.0).then(|| (o, kept[j]))
        })
        .collect())
}

pub fn collect_examples(
    model: &DiasModel,
    store: &ParamStore<f32>,
    samples: &[SceneSample],
    ablation: Ablation,
) -> Result<Vec<ProbeExample>> {
    let inf = infer_all(model, store, samples, ablation)?;
    let c = model.config.encoder.feature_dim;
    let mut out = Vec::new();
    for (scene, (sample, i)) in samples.iter().zip(&inf).enumerate() {
        let pred = segment(&i.last, Some(&i.mask), sample.height, sample.width);
        let kept: Vec<usize> = (0..i.mask.len()).filter(|&k| i.mask.keep()[k]).collect();
        for (o, k) in match_slots(sample, &pred, &kept)? {
            let obj = &sample.objects[o];
            out.push(ProbeExample {
                scene,
                slot: i.slots[k * c..(k + 1) * c].to_vec(),
                class: obj.class_id as usize,
                bbox: obj.bbox.map(|v| v as f64),
            });
        }
    }
    Ok(out)
}

fn standardize(rows: &mut [Vec<f64>], stats: &[(f64, f64)]) {
    for r in rows {
        for (v, &(m, s)) in r.iter_mut().zip(stats) {
            *v = (*v - m) / s;
        }
    }
}

/// Fits the probe on the leading scenes and scores it on the rest.
pub fn train_probe(examples: &[ProbeExample], config: &ProbeConfig) -> Result<ProbeReport> {
    config.validate()?;
    let scenes = examples.iter().map(|e| e.scene + 1).max().unwrap_or(0);
    let cut = (scenes as f64 * config.train_fraction).ceil() as usize;
    let (train, test): (Vec<&ProbeExample>, Vec<&ProbeExample>) =
        examples.iter().partition(|e| e.scene < cut);
    let empty = ProbeReport {
        top1: None,
        bbox_r2: None,
        train_examples: train.len(),
        test_examples: test.len(),
    };
    if train.is_empty() || test.is_empty() {
        return Ok(empty);
    }
    if let Some(e) = examples.iter().find(|e| e.class >= config.classes) {
        return Err(Error::Config(format!(
            "class {} exceeds probe class count {}",
            e.class, config.classes
        )));
    }
    let d = train[0].slot.len();
    let stats: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            let m = train.iter().map(|e| e.slot[j]).sum::<f64>() / train.len() as f64;
            let v = train.iter().map(|e| (e.slot[j] - m).powi(2)).sum::<f64>() / train.len() as f64;
            (m, v.sqrt().max(1e-6))
        })
        .collect();
    let mut xtr: Vec<Vec<f64>> = train.iter().map(|e| e.slot.clone()).collect();
    let mut xte: Vec<Vec<f64>> = test.iter().map(|e| e.slot.clone()).collect();
    standardize(&mut xtr, &stats);
    standardize(&mut xte, &stats);

    let k = config.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::<f32>::new();
    let mlp = Mlp::new(&mut store, "probe", d, config.hidden, k + 4, &mut rng)?;
    let mut opt = Adam::new(&store, store.ids().collect());
    let bs = config.batch_size.min(train.len());
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..train.len())).collect();
        let x: Vec<f32> = idx.iter().flat_map(|&i| xtr[i].iter().map(|&v| v as f32)).collect();
        let boxes: Vec<f32> = idx
            .iter()
            .flat_map(|&i| train[i].bbox.iter().map(|&v| v as f32))
            .collect();
        let mut g = Graph::new();
        g.bind(&store);
        let xv = g.constant(Tensor::new(vec![bs, d], x)?);
        let out = mlp.forward(&mut g, xv)?;
        let logits = g.slice_last(out, 0, k)?;
        let bbox = g.slice_last(out, k, 4)?;
        let cls = g.softmax_nll(logits, idx.iter().map(|&i| Some(train[i].class)).collect(), bs as f32)?;
        let tb = g.constant(Tensor::new(vec![bs, 4], boxes)?);
        let reg = g.mse(bbox, tb)?;
        let loss = g.add(cls, reg)?;
        let grads = g.backward(loss)?;
        let gs: Vec<Vec<f32>> = opt
            .ids()
            .iter()
            .map(|&id| grads.get_or_zeros(g.param(id), store.get(id).numel()))
            .collect();
        opt.step(&mut store, &gs, config.lr);
    }

    let x: Vec<f32> = xte.iter().flatten().map(|&v| v as f32).collect();
    let mut g = Graph::new();
    g.bind_filtered(&store, |_| false);
    let xv = g.constant(Tensor::new(vec![test.len(), d], x)?);
    let out = mlp.forward(&mut g, xv)?;
    let vals: Vec<f64> = g.value(out).data().iter().map(|&v| v as f64).collect();
    let logits: Vec<f64> = vals.chunks(k + 4).flat_map(|r| r[..k].to_vec()).collect();
    let boxes: Vec<f64> = vals.chunks(k + 4).flat_map(|r| r[k..].to_vec()).collect();
    let target_boxes: Vec<f64> = test.iter().flat_map(|e| e.bbox).collect();
    let labels: Vec<usize> = test.iter().map(|e| e.class).collect();
    Ok(ProbeReport {
        top1: top1(&logits, &labels, k)?,
        bbox_r2: r2_multi(&boxes, &target_boxes, 4)?,
        ..empty
    })
}
