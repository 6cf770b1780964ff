//! Attention self-distillation: the first-iteration aggregation attention is
//! pulled towards the binarized final attention, with teacher slots matched
//! to student slots by the Hungarian algorithm.

mod hungarian;

pub use hungarian::{hungarian, pad_square, Assignment};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::redundancy::RedundancyMask;

/// Smallest probability used inside logarithms.
const PROB_FLOOR: f64 = 1e-300;

/// One-hot per pixel over the kept slots, stored as the winning slot index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMasks {
    slots: usize,
    labels: Vec<usize>,
}

impl BinaryMasks {
    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Winning slot per pixel.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, slot: usize, pixel: usize) -> bool {
        self.labels[pixel] == slot
    }

    /// Pixel count of each slot's mask.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.slots];
        for &l in &self.labels {
            a[l] += 1;
        }
        a
    }

    /// `|mask_i ∩ other_j|` for every pair.
    pub fn intersections(&self, other: &BinaryMasks) -> Vec<Vec<usize>> {
        let mut m = vec![vec![0; other.slots]; self.slots];
        for (&a, &b) in self.labels.iter().zip(&other.labels) {
            m[a][b] += 1;
        }
        m
    }
}

/// Per-pixel one-hot of the maximum over kept slots; ties to the lowest index.
pub fn binarize(a: &AttentionMap, mask: Option<&RedundancyMask>) -> BinaryMasks {
    BinaryMasks {
        slots: a.slots(),
        labels: a.argmax_labels(mask),
    }
}

/// How student and teacher masks are scored for matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCost {
    /// Cross-entropy the student would pay for taking the teacher mask as its
    /// label. The matching then minimizes the distillation loss exactly.
    #[default]
    CrossEntropy,
    /// Negative pixel overlap of the binarized student and teacher masks.
    Intersection,
}

/// Teacher labels re-indexed into student slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets {
    /// Student slot each pixel should choose; `None` contributes no loss.
    pub targets: Vec<Option<usize>>,
    /// Student slot `i` is matched to teacher slot `assignment.mapping[i]`.
    pub assignment: Assignment,
}

fn check_pair(student: &AttentionMap, teacher: &AttentionMap, mask: &RedundancyMask) -> Result<()> {
    if student.slots() != teacher.slots()
        || student.num_pixels() != teacher.num_pixels()
        || mask.len() != teacher.slots()
    {
        return Err(Error::Dimension {
            op: "approx_loss",
            lhs: vec![student.slots(), student.num_pixels()],
            rhs: vec![teacher.slots(), teacher.num_pixels(), mask.len()],
        });
    }
    Ok(())
}

/// Matching cost between student slot `i` and teacher slot `j`.
pub fn match_cost(
    student: &AttentionMap,
    teacher_masks: &BinaryMasks,
    cost: MatchCost,
) -> Vec<Vec<f64>> {
    let s = student.slots();
    match cost {
        MatchCost::CrossEntropy => {
            let mut m = vec![vec![0.0; s]; s];
            for (p, &j) in teacher_masks.labels().iter().enumerate() {
                for (i, row) in m.iter_mut().enumerate() {
                    row[j] -= student.weight(i, p).max(PROB_FLOOR).ln();
                }
            }
            m
        }
        MatchCost::Intersection => binarize(student, None)
            .intersections(teacher_masks)
            .into_iter()
            .map(|row| row.into_iter().map(|v| -(v as f64)).collect())
            .collect(),
    }
}

/// Binarizes the teacher, matches it to the student and returns per-pixel
/// student targets. Teacher slots masked out by `mask` yield no target.
pub fn approx_targets(
    student: &AttentionMap,
    teacher: &AttentionMap,
    mask: &RedundancyMask,
    cost: MatchCost,
) -> Result<DistillTargets> {
    check_pair(student, teacher, mask)?;
    let teacher_masks = binarize(teacher, Some(mask));
    let assignment = hungarian(&match_cost(student, &teacher_masks, cost))?;
    let inverse = assignment.inverse();
    let targets = teacher_masks
        .labels()
        .iter()
        .map(|&j| mask.keep()[j].then(|| inverse[j]))
        .collect();
    Ok(DistillTargets {
        targets,
        assignment,
    })
}

/// Mean over pixels of the cross-entropy between the student's per-pixel slot
/// distribution and the matched one-hot teacher label.
pub fn approx_loss(
    student: &AttentionMap,
    teacher: &AttentionMap,
    mask: &RedundancyMask,
    cost: MatchCost,
) -> Result<f64> {
    let t = approx_targets(student, teacher, mask, cost)?;
    Ok(cross_entropy(student, &t.targets))
}

/// `-(1/n) sum_p log A[target_p, p]` over pixels with a target.
pub fn cross_entropy(student: &AttentionMap, targets: &[Option<usize>]) -> f64 {
    let n = student.num_pixels().max(1) as f64;
    targets
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|i| -student.weight(i, p).max(PROB_FLOOR).ln()))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, s: usize, n: usize, sharp: f64) -> AttentionMap {
        let mut w = vec![0.0; s * n];
        for p in 0..n {
            let logits: Vec<f64> = (0..s).map(|_| rng.random_range(-sharp..sharp)).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for k in 0..s {
                w[k * n + p] = (logits[k] - mx).exp() / z;
            }
        }
        AttentionMap::new(s, 1, n, w).unwrap()
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    /// Minimum over all teacher relabelings of CE(student, permuted teacher).
    fn exhaustive_min_ce(student: &AttentionMap, teacher: &AttentionMap) -> f64 {
        let labels = binarize(teacher, None).labels().to_vec();
        permutations(student.slots())
            .iter()
            .map(|perm| {
                // student slot i takes teacher slot perm[i]
                let mut inv = vec![0; perm.len()];
                for (i, &j) in perm.iter().enumerate() {
                    inv[j] = i;
                }
                let targets: Vec<Option<usize>> = labels.iter().map(|&j| Some(inv[j])).collect();
                cross_entropy(student, &targets)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn binarize_strict_max_and_ties() {
        let a = AttentionMap::new(3, 1, 2, vec![0.7, 0.5, 0.2, 0.5, 0.1, 0.0]).unwrap();
        let b = binarize(&a, None);
        assert_eq!(b.labels(), &[0, 0]);
        assert!(b.get(0, 0) && !b.get(1, 0) && !b.get(2, 0));
    }

    #[test]
    fn masked_slot_with_noise_is_never_selected() {
        let a = AttentionMap::new(3, 1, 2, vec![0.2, 0.3, 1e-7, 0.7, 0.8, 0.0]).unwrap();
        let mask = RedundancyMask::new(vec![true, false, true]).unwrap();
        let b = binarize(&a, Some(&mask));
        assert!(b.labels().iter().all(|&l| l != 1));
        assert_eq!(b.labels(), &[2, 0]);
    }

    #[test]
    fn matching_one_hot_student_has_near_zero_loss() {
        let labels = [0usize, 1, 2, 2, 1, 0, 3, 3];
        let eps = 1e-7;
        let s = 4;
        let mut w = vec![eps / 3.0; s * labels.len()];
        for (p, &l) in labels.iter().enumerate() {
            w[l * labels.len() + p] = 1.0 - eps;
        }
        let student = AttentionMap::new(s, 2, 4, w).unwrap();
        // teacher is the same segmentation under a different slot order
        let teacher = student.permuted(&[2, 0, 3, 1]);
        let loss = approx_loss(&student, &teacher, &RedundancyMask::all(s), MatchCost::CrossEntropy)
            .unwrap();
        assert!(loss <= 1e-6, "{loss}");
        let loss = approx_loss(&student, &teacher, &RedundancyMask::all(s), MatchCost::Intersection)
            .unwrap();
        assert!(loss <= 1e-6, "{loss}");
    }

    #[test]
    fn teacher_permutation_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let student = random_map(&mut rng, 5, 30, 3.0);
            let teacher = random_map(&mut rng, 5, 30, 3.0);
            let mask = RedundancyMask::all(5);
            let base = approx_loss(&student, &teacher, &mask, MatchCost::CrossEntropy).unwrap();
            let permuted = teacher.permuted(&[3, 1, 4, 0, 2]);
            let other = approx_loss(&student, &permuted, &mask, MatchCost::CrossEntropy).unwrap();
            assert!((base - other).abs() < 1e-12);
            assert!(base >= 0.0);
        }
    }

    #[test]
    fn loss_equals_exhaustive_minimum_over_teacher_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for k in 1..=5 {
            for _ in 0..60 {
                let student = random_map(&mut rng, k, 24, 2.0);
                let teacher = random_map(&mut rng, k, 24, 2.0);
                let loss =
                    approx_loss(&student, &teacher, &RedundancyMask::all(k), MatchCost::CrossEntropy)
                        .unwrap();
                let oracle = exhaustive_min_ce(&student, &teacher);
                assert!((loss - oracle).abs() < 1e-12, "k={k}: {loss} vs {oracle}");
            }
        }
    }

    #[test]
    fn intersection_matching_can_miss_the_ce_minimum() {
        // Student slot 0 covers all pixels in the binarized view, but is only
        // confident on pixel 0.
        let student = AttentionMap::new(2, 1, 3, vec![0.9, 0.55, 0.55, 0.1, 0.45, 0.45]).unwrap();
        let teacher = AttentionMap::new(2, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let mask = RedundancyMask::all(2);
        let ce = approx_loss(&student, &teacher, &mask, MatchCost::CrossEntropy).unwrap();
        let inter = approx_loss(&student, &teacher, &mask, MatchCost::Intersection).unwrap();
        assert!((ce - exhaustive_min_ce(&student, &teacher)).abs() < 1e-12);
        assert!(inter > ce + 0.5);
    }

    #[test]
    fn masked_teacher_slots_are_not_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let student = random_map(&mut rng, 4, 20, 2.0);
        let mut teacher = random_map(&mut rng, 4, 20, 2.0);
        let mask = RedundancyMask::new(vec![true, false, true, false]).unwrap();
        // renormalize teacher over kept slots, leave noise on masked ones
        let n = 20;
        let mut w = teacher.weights().to_vec();
        for p in 0..n {
            let z = w[p] + w[2 * n + p];
            w[p] /= z;
            w[2 * n + p] /= z;
            w[n + p] = 1e-9;
            w[3 * n + p] = 1e-9;
        }
        teacher = AttentionMap::new(4, 1, n, w).unwrap();
        let t = approx_targets(&student, &teacher, &mask, MatchCost::CrossEntropy).unwrap();
        let allowed: Vec<usize> = [0, 2].iter().map(|&j| t.assignment.inverse()[j]).collect();
        assert!(t.targets.iter().all(|x| x.is_some_and(|i| allowed.contains(&i))));
    }
}
