use std::f64::consts::PI;

use crate::diffnum::{ParamId, ParamStore};

/// Linear warmup to `peak`, then cosine decay to zero at `total` steps.
pub fn learning_rate(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup.min(step)) as f64 / span).min(1.0);
    0.5 * peak * (1.0 + (PI * t).cos())
}

/// Euclidean norm over all gradient entries.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam over a fixed subset of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, ids: Vec<ParamId>) -> Self {
        let zeros: Vec<Vec<f32>> = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ids,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// `grads[i]` belongs to `ids()[i]`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let g = grads[k][i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::Tensor;

    #[test]
    fn schedule_shape() {
        assert!((learning_rate(0, 1.0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((learning_rate(9, 1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(10, 1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(55, 1.0, 10, 100) - 0.5).abs() < 1e-12);
        assert!(learning_rate(100, 1.0, 10, 100).abs() < 1e-12);
        assert!((learning_rate(0, 2.0, 0, 10) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut small = vec![vec![0.1f32]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(&store, vec![id]);
        for _ in 0..2000 {
            let x = store.get(id).data().to_vec();
            let g = vec![x.iter().map(|v| 2.0 * v).collect()];
            opt.step(&mut store, &g, 0.01);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
