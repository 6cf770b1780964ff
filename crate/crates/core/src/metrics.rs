//! Object-discovery and probe metrics. Foreground metrics return `None` when
//! they are undefined for a sample; such samples are left out of averages.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::distill::{hungarian, pad_square};
use crate::error::{Error, Result};

fn pairs(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

fn check_len(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op,
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    Ok(())
}

/// Adjusted Rand index by pair counting. Labels are arbitrary identifiers.
pub fn ari<A, B>(gt: &[A], pred: &[B]) -> Result<f64>
where
    A: Copy + Eq + std::hash::Hash,
    B: Copy + Eq + std::hash::Hash,
{
    check_len(gt.len(), pred.len(), "ari")?;
    let mut joint: HashMap<(A, B), u64> = HashMap::new();
    let mut rows: HashMap<A, u64> = HashMap::new();
    let mut cols: HashMap<B, u64> = HashMap::new();
    for (&a, &b) in gt.iter().zip(pred) {
        *joint.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&v| pairs(v)).sum();
    let sa: f64 = rows.values().map(|&v| pairs(v)).sum();
    let sb: f64 = cols.values().map(|&v| pairs(v)).sum();
    let total = pairs(gt.len() as u64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// ARI over pixels whose ground-truth label is not background (0).
pub fn ari_fg<B>(gt: &[u8], pred: &[B]) -> Result<Option<f64>>
where
    B: Copy + Eq + std::hash::Hash,
{
    check_len(gt.len(), pred.len(), "ari_fg")?;
    let (g, p): (Vec<u8>, Vec<B>) = gt
        .iter()
        .zip(pred)
        .filter(|(&g, _)| g != 0)
        .map(|(&g, &p)| (g, p))
        .unzip();
    if g.is_empty() {
        return Ok(None);
    }
    ari(&g, &p).map(Some)
}

/// Intersection over union; two empty masks score 0.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_masks(gt: &[Vec<bool>], pred: &[Vec<bool>], op: &'static str) -> Result<()> {
    let n = gt.first().or(pred.first()).map_or(0, Vec::len);
    for m in gt.iter().chain(pred) {
        check_len(n, m.len(), op)?;
    }
    Ok(())
}

/// Mean over gt masks of the best IoU with any predicted mask.
pub fn mbo(gt: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<Option<f64>> {
    check_masks(gt, pred, "mbo")?;
    if gt.is_empty() {
        return Ok(None);
    }
    let total: f64 = gt
        .iter()
        .map(|g| pred.iter().map(|p| iou(g, p)).fold(0.0, f64::max))
        .sum();
    Ok(Some(total / gt.len() as f64))
}

/// Mean IoU over gt masks under the one-to-one matching with the largest
/// total IoU. Unmatched gt masks count as 0.
pub fn miou(gt: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<Option<f64>> {
    check_masks(gt, pred, "miou")?;
    if gt.is_empty() {
        return Ok(None);
    }
    let ious: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| pred.iter().map(|p| iou(g, p)).collect())
        .collect();
    let cost: Vec<Vec<f64>> = ious
        .iter()
        .map(|row| row.iter().map(|v| -v).collect())
        .collect();
    let assignment = hungarian(&pad_square(&cost, pred.len(), 0.0))?;
    let total: f64 = (0..gt.len())
        .map(|r| ious[r].get(assignment.mapping[r]).copied().unwrap_or(0.0))
        .sum();
    Ok(Some(total / gt.len() as f64))
}

/// Instance masks for labels `1..=max`, background excluded.
pub fn gt_object_masks(gt: &[u8]) -> Vec<Vec<bool>> {
    let k = gt.iter().copied().max().unwrap_or(0);
    (1..=k)
        .map(|l| gt.iter().map(|&v| v == l).collect())
        .filter(|m: &Vec<bool>| m.iter().any(|&b| b))
        .collect()
}

/// One mask per predicted label that occurs at least once.
pub fn label_masks(pred: &[usize]) -> Vec<Vec<bool>> {
    let k = pred.iter().copied().max().map_or(0, |m| m + 1);
    (0..k)
        .map(|l| pred.iter().map(|&v| v == l).collect())
        .filter(|m: &Vec<bool>| m.iter().any(|&b| b))
        .collect()
}

/// All discovery metrics for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryScores {
    pub ari: f64,
    pub ari_fg: Option<f64>,
    pub mbo: Option<f64>,
    pub miou: Option<f64>,
}

pub fn discovery_scores(gt: &[u8], pred: &[usize]) -> Result<DiscoveryScores> {
    let gt_masks = gt_object_masks(gt);
    let pred_masks = label_masks(pred);
    Ok(DiscoveryScores {
        ari: ari(gt, pred)?,
        ari_fg: ari_fg(gt, pred)?,
        mbo: mbo(&gt_masks, &pred_masks)?,
        miou: miou(&gt_masks, &pred_masks)?,
    })
}

/// Mean and population standard deviation of the defined values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn mean_std<I: IntoIterator<Item = Option<f64>>>(values: I) -> Option<MeanStd> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
        count: v.len(),
    })
}

/// Coefficient of determination of one output column.
/// `None` when the targets have zero variance.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<Option<f64>> {
    check_len(pred.len(), target.len(), "r2")?;
    if target.is_empty() {
        return Ok(None);
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// R² averaged uniformly over the columns of row-major `[n, d]` data.
pub fn r2_multi(pred: &[f64], target: &[f64], d: usize) -> Result<Option<f64>> {
    check_len(pred.len(), target.len(), "r2_multi")?;
    if d == 0 || !target.len().is_multiple_of(d) {
        return Err(Error::Dimension {
            op: "r2_multi",
            lhs: vec![target.len()],
            rhs: vec![d],
        });
    }
    let cols: Vec<Option<f64>> = (0..d)
        .map(|j| {
            let p: Vec<f64> = pred.iter().skip(j).step_by(d).copied().collect();
            let t: Vec<f64> = target.iter().skip(j).step_by(d).copied().collect();
            r2(&p, &t)
        })
        .collect::<Result<_>>()?;
    Ok(mean_std(cols).map(|m| m.mean))
}

/// Fraction of rows whose argmax equals the label. `None` on empty input.
pub fn top1(logits: &[f64], labels: &[usize], classes: usize) -> Result<Option<f64>> {
    check_len(logits.len(), labels.len() * classes, "top1")?;
    if labels.is_empty() {
        return Ok(None);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits[i * classes..(i + 1) * classes];
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                .0;
            best == l
        })
        .count();
    Ok(Some(hits as f64 / labels.len() as f64))
}
