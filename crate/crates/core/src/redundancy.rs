//! Slot redundancy reduction by thresholded average-linkage agglomerative
//! clustering on cosine distance.

use serde::{Deserialize, Serialize};

use crate::diffnum::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.2;

/// Per-slot keep flag. At least one slot is always kept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedundancyMask {
    keep: Vec<bool>,
}

impl RedundancyMask {
    pub fn new(keep: Vec<bool>) -> Result<Self> {
        if !keep.iter().any(|&k| k) {
            return Err(Error::InvalidMask("every slot is masked out".to_string()));
        }
        Ok(RedundancyMask { keep })
    }

    pub fn all(s: usize) -> Self {
        RedundancyMask {
            keep: vec![true; s],
        }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn num_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_all_kept(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }
}

/// Clustering result for one set of slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Reduction {
    /// Clusters ordered by their lowest member; members ascending.
    pub clusters: Vec<Vec<usize>>,
    pub mask: RedundancyMask,
}

impl Reduction {
    pub fn is_identity(&self) -> bool {
        self.clusters.iter().all(|c| c.len() == 1)
    }

    /// Row-major `s x s` matrix `R` with `S_r = R S`: the representative row
    /// (lowest member) averages its cluster, every other row is zero.
    pub fn merge_matrix(&self) -> Vec<f64> {
        let s = self.mask.len();
        let mut r = vec![0.0; s * s];
        for cluster in &self.clusters {
            let w = 1.0 / cluster.len() as f64;
            for &m in cluster {
                r[cluster[0] * s + m] = w;
            }
        }
        r
    }
}

/// Pairwise cosine distances `1 - cos(u, v)` of `s` rows of width `c`.
pub fn cosine_distances(rows: &[f64], s: usize, c: usize) -> Result<Vec<f64>> {
    if rows.len() != s * c {
        return Err(Error::Dimension {
            op: "cosine_distances",
            lhs: vec![s, c],
            rhs: vec![rows.len()],
        });
    }
    let mut norms = Vec::with_capacity(s);
    for i in 0..s {
        let row = &rows[i * c..(i + 1) * c];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("slot {i} is not finite")));
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate(format!("slot {i} has zero norm")));
        }
        norms.push(n);
    }
    let mut d = vec![0.0; s * s];
    for i in 0..s {
        for j in i + 1..s {
            let dot: f64 = rows[i * c..(i + 1) * c]
                .iter()
                .zip(&rows[j * c..(j + 1) * c])
                .map(|(a, b)| a * b)
                .sum();
            let v = 1.0 - (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            d[i * s + j] = v;
            d[j * s + i] = v;
        }
    }
    Ok(d)
}

/// Average-linkage agglomeration: repeatedly merge the closest pair of
/// clusters while their distance is at most `tau`. Ties go to the pair with
/// the lexicographically smallest lowest-member indices.
pub fn agglomerate(dist: &[f64], s: usize, tau: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..s).map(|i| vec![i]).collect();
    // Cluster-level distance matrix updated with the Lance-Williams rule.
    let mut d = dist.to_vec();
    let mut alive: Vec<usize> = (0..s).collect();
    while alive.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (ai, &a) in alive.iter().enumerate() {
            for &b in &alive[ai + 1..] {
                let v = d[a * s + b];
                if best.is_none_or(|(bv, _, _)| v < bv) {
                    best = Some((v, a, b));
                }
            }
        }
        let (v, a, b) = best.expect("at least two clusters alive");
        if v > tau {
            break;
        }
        let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
        for &k in &alive {
            if k == a || k == b {
                continue;
            }
            let merged = (na * d[k * s + a] + nb * d[k * s + b]) / (na + nb);
            d[k * s + a] = merged;
            d[a * s + k] = merged;
        }
        let moved = std::mem::take(&mut clusters[b]);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
        alive.retain(|&k| k != b);
    }
    // Cluster slot `a` always holds its lowest member because `a < b` above.
    alive.into_iter().map(|a| clusters[a].clone()).collect()
}

/// Clusters the rows of `slots[s, c]` and returns the clustering with its mask.
pub fn cluster_slots<T: Real>(slots: &Tensor<T>, tau: f64) -> Result<Reduction> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("tau must be >= 0, got {tau}")));
    }
    let sh = slots.shape();
    if sh.len() != 2 || sh[0] == 0 {
        return Err(Error::Dimension {
            op: "reduce",
            lhs: sh.to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (s, c) = (sh[0], sh[1]);
    let rows: Vec<f64> = slots.data().iter().map(|v| v.as_f64()).collect();
    let dist = cosine_distances(&rows, s, c)?;
    let clusters = agglomerate(&dist, s, tau);
    let mut keep = vec![false; s];
    for cl in &clusters {
        keep[cl[0]] = true;
    }
    Ok(Reduction {
        clusters,
        mask: RedundancyMask::new(keep)?,
    })
}

/// Reduces `slots[s, c]`: each cluster becomes the mean of its members at the
/// lowest member index; all other rows are zeroed.
pub fn reduce<T: Real>(slots: &Tensor<T>, tau: f64) -> Result<(Tensor<T>, RedundancyMask)> {
    let red = cluster_slots(slots, tau)?;
    let c = slots.shape()[1];
    let mut out = vec![T::zero(); slots.numel()];
    for cl in &red.clusters {
        let w = T::from_f64(1.0 / cl.len() as f64);
        let dst = cl[0];
        for ch in 0..c {
            let sum = cl
                .iter()
                .fold(T::zero(), |acc, &m| acc + slots.data()[m * c + ch]);
            out[dst * c + ch] = if cl.len() == 1 { sum } else { sum * w };
        }
    }
    Ok((Tensor::new(slots.shape().to_vec(), out)?, red.mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive reference: recompute every inter-cluster average linkage
    /// from the raw point distances at each merge.
    fn brute_force(dist: &[f64], s: usize, tau: f64) -> Vec<Vec<usize>> {
        let mut clusters: Vec<Vec<usize>> = (0..s).map(|i| vec![i]).collect();
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let mut total = 0.0;
                    for &a in &clusters[i] {
                        for &b in &clusters[j] {
                            total += dist[a * s + b];
                        }
                    }
                    let avg = total / (clusters[i].len() * clusters[j].len()) as f64;
                    if best.is_none_or(|(v, _, _)| avg < v) {
                        best = Some((avg, i, j));
                    }
                }
            }
            match best {
                Some((v, i, j)) if v <= tau => {
                    let moved = clusters.remove(j);
                    clusters[i].extend(moved);
                    clusters[i].sort_unstable();
                    clusters.sort_by_key(|c| c[0]);
                }
                _ => break,
            }
        }
        clusters
    }

    fn tensor(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn zero_threshold_keeps_distinct_slots() {
        let s = tensor(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.3]]);
        let (sr, mask) = reduce(&s, 0.0).unwrap();
        assert!(mask.is_all_kept());
        assert_eq!(sr, s);
    }

    #[test]
    fn near_parallel_pair_merges() {
        let n = (0.9999f64 * 0.9999 + 0.01 * 0.01).sqrt();
        let s = tensor(&[[1.0, 0.0], [0.9999 / n, 0.01 / n], [0.0, 1.0]]);
        let dist = cosine_distances(s.data(), 3, 2).unwrap();
        assert!((dist[1] - 5.0e-5).abs() < 1e-6, "{}", dist[1]);
        assert!((dist[2] - 1.0).abs() < 1e-12);
        let red = cluster_slots(&s, 0.1).unwrap();
        assert_eq!(red.clusters, vec![vec![0, 1], vec![2]]);
        assert_eq!(red.mask.keep(), &[true, false, true]);
        let (sr, _) = reduce(&s, 0.1).unwrap();
        assert!((sr.data()[0] - (1.0 + 0.9999 / n) / 2.0).abs() < 1e-15);
        assert_eq!(&sr.data()[2..4], &[0.0, 0.0]);
        assert_eq!(&sr.data()[4..6], &[0.0, 1.0]);
    }

    #[test]
    fn large_threshold_leaves_one_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let data: Vec<f64> = (0..6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = Tensor::new(vec![6, 3], data).unwrap();
            let (_, mask) = reduce(&s, 2.0).unwrap();
            assert_eq!(mask.num_kept(), 1);
            assert!(mask.keep()[0]);
        }
    }

    #[test]
    fn zero_norm_and_negative_tau_are_rejected() {
        let s = tensor(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(reduce(&s, 0.2), Err(Error::Degenerate(_))));
        let s = tensor(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(reduce(&s, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn all_duplicate_slots_collapse_to_first() {
        let s = tensor(&[[0.3, -0.7]; 5]);
        let (sr, mask) = reduce(&s, 0.0).unwrap();
        assert_eq!(mask.keep(), &[true, false, false, false, false]);
        assert!((sr.data()[0] - 0.3).abs() < 1e-15 && (sr.data()[1] + 0.7).abs() < 1e-15);
        assert!(sr.data()[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_brute_force_on_random_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..1000 {
            let s = rng.random_range(1..=8);
            let c = rng.random_range(2..=5);
            let tau = rng.random_range(0.0..1.2);
            let data: Vec<f64> = (0..s * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dist = cosine_distances(&data, s, c).unwrap();
            assert_eq!(
                agglomerate(&dist, s, tau),
                brute_force(&dist, s, tau),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn merge_matrix_reproduces_reduced_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..7 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = Tensor::new(vec![7, 4], data).unwrap();
        let red = cluster_slots(&s, 0.8).unwrap();
        let (sr, _) = reduce(&s, 0.8).unwrap();
        let r = red.merge_matrix();
        for i in 0..7 {
            for ch in 0..4 {
                let v: f64 = (0..7).map(|j| r[i * 7 + j] * s.data()[j * 4 + ch]).sum();
                assert!((v - sr.data()[i * 4 + ch]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn clustering_is_permutation_equivariant(
            seed in any::<u64>(),
            s in 1usize..8,
            tau in 0.0f64..1.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 3;
            let data: Vec<f64> = (0..s * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut perm: Vec<usize> = (0..s).collect();
            for i in (1..s).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<f64> = perm
                .iter()
                .flat_map(|&p| data[p * c..(p + 1) * c].iter().copied())
                .collect();
            let a = cluster_slots(&Tensor::new(vec![s, c], data).unwrap(), tau).unwrap();
            let b = cluster_slots(&Tensor::new(vec![s, c], permuted).unwrap(), tau).unwrap();
            prop_assert!(b.mask.num_kept() >= 1);
            let mut mapped: Vec<Vec<usize>> = b
                .clusters
                .iter()
                .map(|cl| {
                    let mut v: Vec<usize> = cl.iter().map(|&i| perm[i]).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            mapped.sort();
            let mut orig = a.clusters.clone();
            orig.sort();
            prop_assert_eq!(mapped, orig);
        }
    }
}
