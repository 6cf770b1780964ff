//! Slot Attention with masked competition and the re-initialized aggregation
//! schedule built around redundancy reduction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::diffnum::nn::{GruCell, LayerNorm, Linear, Mlp};
use crate::diffnum::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::redundancy::{cluster_slots, RedundancyMask, DEFAULT_TAU};

/// Added to attention weights before the per-slot weighted mean.
pub const ATTENTION_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub slots: usize,
    /// Total aggregation iterations `i_a`.
    pub iters: usize,
    /// Iterations run from the reduced slots.
    pub extra_iters: usize,
    pub tau: f64,
    pub mlp_hidden: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            slots: 6,
            iters: 3,
            extra_iters: 1,
            tau: DEFAULT_TAU,
            mlp_hidden: 128,
        }
    }
}

/// Which parts of the aggregation schedule are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub reduction: bool,
    pub reinit: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            reduction: true,
            reinit: true,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self, schedule: Schedule) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::Config("at least one slot is required".into()));
        }
        if self.iters == 0 {
            return Err(Error::Config("at least one aggregation iteration is required".into()));
        }
        if schedule.reinit && (self.iters < 2 || self.extra_iters == 0) {
            return Err(Error::Config(
                "re-initialized aggregation needs iters >= 2 and extra_iters >= 1".into(),
            ));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Config(format!("tau must be non-negative, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Learned Gaussian over initial slots.
#[derive(Clone, Debug)]
pub struct SlotInitializer {
    pub mean: ParamId,
    pub log_std: ParamId,
    pub dim: usize,
}

impl SlotInitializer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let mean = store.add_uniform("slots.mean", &[dim], dim, rng)?;
        let log_std = store.add_const("slots.log_std", &[dim], bound.ln())?;
        Ok(SlotInitializer { mean, log_std, dim })
    }

    fn noise<T: Real>(&self, batch: usize, s: usize, rng: &mut impl Rng) -> Tensor<T> {
        let data = (0..batch * s * self.dim)
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::new(vec![batch, s, self.dim], data).expect("noise shape")
    }

    /// `[B, s, c]` samples `mean + exp(log_std) * eps` on the tape.
    pub fn init_slots<T: Real>(
        &self,
        g: &mut Graph<T>,
        batch: usize,
        s: usize,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if s == 0 {
            return Err(Error::Config("slot count must be at least 1".into()));
        }
        let noise = g.constant(self.noise(batch, s, rng));
        let log_std = g.param(self.log_std);
        let std = g.exp(log_std);
        let std = g.expand(std, &[batch, s])?;
        let mean = g.param(self.mean);
        let mean = g.expand(mean, &[batch, s])?;
        let scaled = g.mul(std, noise)?;
        g.add(mean, scaled)
    }

    /// Plain sample of `s` slots, `[s, c]`.
    pub fn sample<T: Real>(&self, store: &ParamStore<T>, s: usize, rng: &mut impl Rng) -> Tensor<T> {
        let noise = self.noise::<T>(1, s, rng);
        let mean = store.get(self.mean).data();
        let log_std = store.get(self.log_std).data();
        let data = noise
            .data()
            .chunks(self.dim)
            .flat_map(|row| {
                row.iter()
                    .zip(mean.iter().zip(log_std))
                    .map(|(&e, (&m, &l))| m + l.exp() * e)
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(vec![s, self.dim], data).expect("slot shape")
    }
}

/// The iterative aggregator `phi_a`.
#[derive(Clone, Debug)]
pub struct SlotAttention {
    norm_inputs: LayerNorm,
    norm_slots: LayerNorm,
    norm_mlp: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    gru: GruCell,
    mlp: Mlp,
    pub dim: usize,
}

/// Keys and values of the (fixed) inputs.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedInputs {
    pub keys: Var,
    pub values: Var,
}

/// Result of one aggregation iteration.
#[derive(Clone, Copy, Debug)]
pub struct AttendStep {
    pub slots: Var,
    /// Slot-axis softmax, `[B, n, s]`.
    pub attention: Var,
    /// Pre-softmax logits, `[B, n, s]`.
    pub logits: Var,
}

impl SlotAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        input_dim: usize,
        dim: usize,
        mlp_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SlotAttention {
            norm_inputs: LayerNorm::new(store, "aggregator.norm_inputs", input_dim)?,
            norm_slots: LayerNorm::new(store, "aggregator.norm_slots", dim)?,
            norm_mlp: LayerNorm::new(store, "aggregator.norm_mlp", dim)?,
            q: Linear::new(store, "aggregator.q", dim, dim, false, rng)?,
            k: Linear::new(store, "aggregator.k", input_dim, dim, false, rng)?,
            v: Linear::new(store, "aggregator.v", input_dim, dim, false, rng)?,
            gru: GruCell::new(store, "aggregator.gru", dim, dim, rng)?,
            mlp: Mlp::new(store, "aggregator.mlp", dim, mlp_hidden, dim, rng)?,
            dim,
        })
    }

    pub fn project_inputs<T: Real>(&self, g: &mut Graph<T>, inputs: Var) -> Result<ProjectedInputs> {
        let x = self.norm_inputs.forward(g, inputs)?;
        Ok(ProjectedInputs {
            keys: self.k.forward(g, x)?,
            values: self.v.forward(g, x)?,
        })
    }

    /// One competitive update. Slots dropped by `masks` get `-inf` logits, so
    /// zero attention, and keep their previous value.
    pub fn attend_once<T: Real>(
        &self,
        g: &mut Graph<T>,
        slots: Var,
        inputs: ProjectedInputs,
        masks: Option<&[RedundancyMask]>,
    ) -> Result<AttendStep> {
        let sh = g.shape(slots).to_vec();
        let ksh = g.shape(inputs.keys).to_vec();
        if sh.len() != 3 || sh[2] != self.dim || ksh[0] != sh[0] {
            return Err(Error::Dimension {
                op: "attend_once",
                lhs: sh,
                rhs: ksh,
            });
        }
        let (b, s, n) = (sh[0], sh[1], ksh[1]);
        if let Some(m) = masks {
            if m.len() != b || m.iter().any(|mk| mk.len() != s) {
                return Err(Error::Dimension {
                    op: "attend_once_mask",
                    lhs: vec![b, s],
                    rhs: vec![m.len(), m.first().map_or(0, RedundancyMask::len)],
                });
            }
        }
        let prev = slots;
        let sn = self.norm_slots.forward(g, slots)?;
        let q = self.q.forward(g, sn)?;
        let logits = g.bmm(inputs.keys, q, false, true)?;
        let logits = g.scale(logits, T::from_f64(1.0 / (self.dim as f64).sqrt()));
        let logits = match masks {
            Some(m) => {
                let add = logit_mask::<T>(m, n);
                let add = g.constant(add);
                g.add(logits, add)?
            }
            None => logits,
        };
        let attention = g.softmax(logits)?;
        let weights = g.col_normalize(attention, T::from_f64(ATTENTION_EPS))?;
        let updates = g.bmm(weights, inputs.values, true, false)?;
        let new = self.gru.forward(g, updates, prev)?;
        let h = self.norm_mlp.forward(g, new)?;
        let h = self.mlp.forward(g, h)?;
        let mut out = g.add(new, h)?;
        if let Some(m) = masks {
            let (keep, drop) = keep_blend::<T>(m, self.dim);
            let keep = g.constant(keep);
            let drop = g.constant(drop);
            let kept = g.mul(out, keep)?;
            let held = g.mul(prev, drop)?;
            out = g.add(kept, held)?;
        }
        Ok(AttendStep {
            slots: out,
            attention,
            logits,
        })
    }
}

/// `[B, n, s]` additive logit mask.
fn logit_mask<T: Real>(masks: &[RedundancyMask], n: usize) -> Tensor<T> {
    let s = masks[0].len();
    let mut data = Vec::with_capacity(masks.len() * n * s);
    for m in masks {
        for _ in 0..n {
            data.extend(
                m.keep()
                    .iter()
                    .map(|&k| if k { T::zero() } else { T::neg_infinity() }),
            );
        }
    }
    Tensor::new(vec![masks.len(), n, s], data).expect("mask shape")
}

/// Row selectors `[B, s, c]` for kept and dropped slots.
fn keep_blend<T: Real>(masks: &[RedundancyMask], c: usize) -> (Tensor<T>, Tensor<T>) {
    let s = masks[0].len();
    let mut keep = Vec::with_capacity(masks.len() * s * c);
    for m in masks {
        for &k in m.keep() {
            keep.extend(std::iter::repeat_n(if k { T::one() } else { T::zero() }, c));
        }
    }
    let drop = keep.iter().map(|&k| T::one() - k).collect();
    let shape = vec![masks.len(), s, c];
    (
        Tensor::new(shape.clone(), keep).expect("blend shape"),
        Tensor::new(shape, drop).expect("blend shape"),
    )
}

/// Everything the aggregation produces for one batch.
#[derive(Clone, Debug)]
pub struct Aggregation {
    /// Final slots `S`, `[B, s, c]`; dropped rows are zero.
    pub slots: Var,
    /// Slots right before reduction.
    pub pre_reduction: Var,
    /// First-iteration attention and its logits.
    pub first: AttendStep,
    /// Attention used for segmentation.
    pub final_attention: Var,
    pub masks: Vec<RedundancyMask>,
    /// Slot-axis attention of every iteration in order.
    pub attentions: Vec<Var>,
}

impl Aggregation {
    pub fn attention_map<T: Real>(&self, g: &Graph<T>, v: Var, item: usize, grid: (usize, usize)) -> Result<AttentionMap> {
        let sh = g.shape(v);
        let (n, s) = (sh[1], sh[2]);
        let data = &g.value(v).data()[item * n * s..(item + 1) * n * s];
        AttentionMap::from_pixel_major(data, s, grid.0, grid.1)
    }

    pub fn first_map<T: Real>(&self, g: &Graph<T>, item: usize, grid: (usize, usize)) -> Result<AttentionMap> {
        self.attention_map(g, self.first.attention, item, grid)
    }

    pub fn final_map<T: Real>(&self, g: &Graph<T>, item: usize, grid: (usize, usize)) -> Result<AttentionMap> {
        self.attention_map(g, self.final_attention, item, grid)
    }
}

/// Merges redundant slots of every batch item: `S_r = R S` with a constant
/// per-item merge matrix.
pub fn reduce_slots<T: Real>(
    g: &mut Graph<T>,
    slots: Var,
    tau: f64,
) -> Result<(Var, Vec<RedundancyMask>)> {
    let sh = g.shape(slots).to_vec();
    let (b, s, c) = (sh[0], sh[1], sh[2]);
    let mut merge = Vec::with_capacity(b * s * s);
    let mut masks = Vec::with_capacity(b);
    let mut identity = true;
    for bi in 0..b {
        let row = &g.value(slots).data()[bi * s * c..(bi + 1) * s * c];
        let item = Tensor::new(vec![s, c], row.to_vec())?;
        let red = cluster_slots(&item, tau)?;
        identity &= red.is_identity();
        merge.extend(red.merge_matrix().into_iter().map(T::from_f64));
        masks.push(red.mask);
    }
    if identity {
        return Ok((slots, masks));
    }
    let r = g.constant(Tensor::new(vec![b, s, s], merge)?);
    Ok((g.bmm(r, slots, false, false)?, masks))
}

/// Runs `i_a - 1` plain iterations, reduction, then `i_extra` masked
/// iterations from the reduced slots. With `reinit` off it runs all `i_a`
/// iterations before reducing; with `reduction` off nothing is merged.
pub fn aggregate_dias<T: Real>(
    g: &mut Graph<T>,
    sa: &SlotAttention,
    inputs: Var,
    initial: Var,
    config: &AggregatorConfig,
    schedule: Schedule,
) -> Result<Aggregation> {
    config.validate(schedule)?;
    let b = g.shape(initial)[0];
    let s = g.shape(initial)[1];
    let proj = sa.project_inputs(g, inputs)?;
    let initial_iters = if schedule.reinit {
        config.iters - 1
    } else {
        config.iters
    };
    let mut slots = initial;
    let mut attentions = Vec::new();
    let mut first = None;
    for _ in 0..initial_iters {
        let step = sa.attend_once(g, slots, proj, None)?;
        first.get_or_insert(step);
        attentions.push(step.attention);
        slots = step.slots;
    }
    let pre_reduction = slots;
    let (reduced, masks) = if schedule.reduction {
        reduce_slots(g, slots, config.tau)?
    } else {
        (slots, vec![RedundancyMask::all(s); b])
    };
    slots = reduced;
    if schedule.reinit {
        let all_kept = masks.iter().all(RedundancyMask::is_all_kept);
        for _ in 0..config.extra_iters {
            let step = sa.attend_once(g, slots, proj, (!all_kept).then_some(&masks[..]))?;
            attentions.push(step.attention);
            slots = step.slots;
        }
    }
    let first = first.expect("at least one iteration");
    Ok(Aggregation {
        slots,
        pre_reduction,
        first,
        final_attention: *attentions.last().expect("at least one iteration"),
        masks,
        attentions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::{gradient_check, gradient_check_param};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore<f64>,
        init: SlotInitializer,
        sa: SlotAttention,
        inputs: Tensor<f64>,
    }

    fn fixture(b: usize, n: usize, c: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let init = SlotInitializer::new(&mut store, c, &mut rng).unwrap();
        let sa = SlotAttention::new(&mut store, c, c, 2 * c, &mut rng).unwrap();
        let data = (0..b * n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inputs = Tensor::new(vec![b, n, c], data).unwrap();
        Fixture {
            store,
            init,
            sa,
            inputs,
        }
    }

    /// Plain Slot Attention written out directly.
    fn plain_slot_attention(
        g: &mut Graph<f64>,
        sa: &SlotAttention,
        inputs: Var,
        mut slots: Var,
        iters: usize,
    ) -> (Var, Vec<Var>) {
        let proj = sa.project_inputs(g, inputs).unwrap();
        let mut att = Vec::new();
        for _ in 0..iters {
            let step = sa.attend_once(g, slots, proj, None).unwrap();
            att.push(step.attention);
            slots = step.slots;
        }
        (slots, att)
    }

    fn max_norm_error(g: &Graph<f64>, a: Var, masks: Option<&[RedundancyMask]>) -> f64 {
        let sh = g.shape(a);
        let (b, n, s) = (sh[0], sh[1], sh[2]);
        let d = g.value(a).data();
        let mut worst: f64 = 0.0;
        for bi in 0..b {
            for p in 0..n {
                let row = &d[(bi * n + p) * s..(bi * n + p + 1) * s];
                let sum: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| masks.is_none_or(|m| m[bi].keep()[*k]))
                    .map(|(_, v)| v)
                    .sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }

    #[test]
    fn single_slot_attends_everywhere() {
        let f = fixture(1, 10, 4, 0);
        let mut g = Graph::new();
        g.bind(&f.store);
        let x = g.constant(f.inputs.clone());
        let proj = f.sa.project_inputs(&mut g, x).unwrap();
        let s0 = f.init.init_slots(&mut g, 1, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let step = f.sa.attend_once(&mut g, s0, proj, None).unwrap();
        assert!(g.value(step.attention).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masked_slot_gets_zero_attention_and_keeps_its_value() {
        let f = fixture(2, 12, 4, 1);
        let mut g = Graph::new();
        g.bind(&f.store);
        let x = g.constant(f.inputs.clone());
        let proj = f.sa.project_inputs(&mut g, x).unwrap();
        let s0 = f.init.init_slots(&mut g, 2, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let masks = vec![
            RedundancyMask::new(vec![true, false, true]).unwrap(),
            RedundancyMask::new(vec![false, true, true]).unwrap(),
        ];
        let step = f.sa.attend_once(&mut g, s0, proj, Some(&masks)).unwrap();
        let a = g.value(step.attention).data();
        for p in 0..12 {
            assert_eq!(a[p * 3 + 1], 0.0);
            assert_eq!(a[(12 + p) * 3], 0.0);
        }
        assert!(max_norm_error(&g, step.attention, Some(&masks)) < 1e-12);
        let before = g.value(s0).data();
        let after = g.value(step.slots).data();
        assert_eq!(before[4..8], after[4..8]);
        assert_eq!(before[12..16], after[12..16]);
        assert_ne!(before[0..4], after[0..4]);
    }

    #[test]
    fn all_keep_mask_matches_unmasked_bitwise() {
        let f = fixture(2, 9, 4, 2);
        let run = |masked: bool| {
            let mut g = Graph::new();
            g.bind(&f.store);
            let x = g.constant(f.inputs.clone());
            let proj = f.sa.project_inputs(&mut g, x).unwrap();
            let s0 = f.init.init_slots(&mut g, 2, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let masks = vec![RedundancyMask::all(4); 2];
            let step = f
                .sa
                .attend_once(&mut g, s0, proj, masked.then_some(&masks[..]))
                .unwrap();
            (g.value(step.slots).clone(), g.value(step.attention).clone())
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn all_masked_is_rejected() {
        assert!(matches!(
            RedundancyMask::new(vec![false; 3]),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn no_reduction_equals_plain_slot_attention() {
        let f = fixture(2, 16, 4, 3);
        let cfg = AggregatorConfig {
            slots: 4,
            iters: 3,
            extra_iters: 1,
            tau: 0.0,
            mlp_hidden: 8,
        };
        let mut g = Graph::new();
        g.bind(&f.store);
        let x = g.constant(f.inputs.clone());
        let s0 = f.init.init_slots(&mut g, 2, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let out = aggregate_dias(&mut g, &f.sa, x, s0, &cfg, Schedule::default()).unwrap();
        assert!(out.masks.iter().all(RedundancyMask::is_all_kept));
        // 2 initial iterations, reduction, 1 extra
        assert_eq!(out.attentions.len(), 3);
        let (plain, att) = plain_slot_attention(&mut g, &f.sa, x, s0, 3);
        assert_eq!(g.value(out.slots), g.value(plain));
        assert_eq!(g.value(out.final_attention), g.value(att[2]));
        assert_eq!(g.value(out.first.attention), g.value(att[0]));
        // same thing with reduction switched off entirely
        let off = Schedule {
            reduction: false,
            reinit: false,
        };
        let out2 = aggregate_dias(&mut g, &f.sa, x, s0, &cfg, off).unwrap();
        assert_eq!(g.value(out2.slots), g.value(plain));
    }

    #[test]
    fn reinit_needs_two_iterations() {
        let f = fixture(1, 4, 4, 4);
        let cfg = AggregatorConfig {
            slots: 2,
            iters: 1,
            ..AggregatorConfig::default()
        };
        let mut g = Graph::new();
        g.bind(&f.store);
        let x = g.constant(f.inputs.clone());
        let s0 = f.init.init_slots(&mut g, 1, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = aggregate_dias(&mut g, &f.sa, x, s0, &cfg, Schedule::default());
        assert!(matches!(r, Err(Error::Config(_))));
        let no_reinit = Schedule {
            reduction: true,
            reinit: false,
        };
        let out = aggregate_dias(&mut g, &f.sa, x, s0, &cfg, no_reinit).unwrap();
        assert_eq!(out.attentions.len(), 1);
    }

    #[test]
    fn duplicate_slots_merge_and_cover_union() {
        let f = fixture(1, 20, 4, 5);
        let mut g = Graph::new();
        g.bind(&f.store);
        let x = g.constant(f.inputs.clone());
        let mut base = f.init.sample(&f.store, 3, &mut ChaCha8Rng::seed_from_u64(6));
        // slot 2 duplicates slot 0
        let c = 4;
        let row0 = base.data()[0..c].to_vec();
        base.data_mut()[2 * c..3 * c].copy_from_slice(&row0);
        let s0 = g.input(base.reshaped(&[1, 3, c]).unwrap());
        let cfg = AggregatorConfig {
            slots: 3,
            iters: 2,
            extra_iters: 1,
            tau: 0.2,
            mlp_hidden: 8,
        };
        let out = aggregate_dias(&mut g, &f.sa, x, s0, &cfg, Schedule::default()).unwrap();
        assert_eq!(out.masks[0].keep(), &[true, true, false]);
        let fin = g.value(out.slots).data();
        assert!(fin[2 * c..].iter().all(|&v| v == 0.0));
        assert!(max_norm_error(&g, out.final_attention, Some(&out.masks)) < 1e-12);

        // Against the unreduced slots, the merged row wins exactly the pixels
        // that went to either duplicate.
        let proj = f.sa.project_inputs(&mut g, x).unwrap();
        let plain = f.sa.attend_once(&mut g, out.pre_reduction, proj, None).unwrap();
        let (reduced, masks) = reduce_slots(&mut g, out.pre_reduction, cfg.tau).unwrap();
        let merged = f.sa.attend_once(&mut g, reduced, proj, Some(&masks)).unwrap();
        let grid = (4, 5);
        let before = out.attention_map(&g, plain.attention, 0, grid).unwrap().argmax_labels(None);
        let after = out
            .attention_map(&g, merged.attention, 0, grid)
            .unwrap()
            .argmax_labels(Some(&masks[0]));
        let folded: Vec<usize> = before.iter().map(|&l| if l == 2 { 0 } else { l }).collect();
        assert_eq!(folded, after);
    }

    #[test]
    fn attention_is_normalized_every_iteration() {
        let f = fixture(3, 25, 4, 6);
        let mut g = Graph::new();
        g.bind(&f.store);
        let x = g.constant(f.inputs.clone());
        let s0 = f.init.init_slots(&mut g, 3, 5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let cfg = AggregatorConfig {
            slots: 5,
            tau: 0.9,
            mlp_hidden: 8,
            ..AggregatorConfig::default()
        };
        let out = aggregate_dias(&mut g, &f.sa, x, s0, &cfg, Schedule::default()).unwrap();
        for (i, &a) in out.attentions.iter().enumerate() {
            let masks = (i == out.attentions.len() - 1).then_some(&out.masks[..]);
            assert!(max_norm_error(&g, a, masks) < 1e-5);
        }
        for m in &out.masks {
            assert!(m.num_kept() >= 1);
        }
    }

    #[test]
    fn degenerate_std_gives_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let init = SlotInitializer::new(&mut store, 3, &mut rng).unwrap();
        store.get_mut(init.log_std).data_mut().fill(-1e3);
        let s = init.sample(&store, 4, &mut rng);
        let mean = store.get(init.mean).data().to_vec();
        for row in s.data().chunks(3) {
            assert_eq!(row, &mean[..]);
        }
    }

    #[test]
    fn sampling_is_seeded_and_matches_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let init = SlotInitializer::new(&mut store, 4, &mut rng).unwrap();
        store.get_mut(init.log_std).data_mut().copy_from_slice(&[0.0, -1.0, 0.5, -2.0]);
        let a = init.sample(&store, 5, &mut ChaCha8Rng::seed_from_u64(1));
        let b = init.sample(&store, 5, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let draws = 10_000;
        let s = init.sample(&store, draws, &mut ChaCha8Rng::seed_from_u64(2));
        let mean = store.get(init.mean).data();
        let log_std = store.get(init.log_std).data();
        for ch in 0..4 {
            let m: f64 = s.data().iter().skip(ch).step_by(4).sum::<f64>() / draws as f64;
            let se = log_std[ch].exp() / (draws as f64).sqrt();
            assert!((m - mean[ch]).abs() < 4.0 * se, "channel {ch}");
        }
    }

    #[test]
    fn iteration_passes_gradient_check() {
        let f = fixture(1, 5, 4, 10);
        let masks = [RedundancyMask::new(vec![true, false, true]).unwrap()];
        let s0 = f.init.sample(&f.store, 3, &mut ChaCha8Rng::seed_from_u64(11));
        let s0 = s0.reshaped(&[1, 3, 4]).unwrap();
        let probe: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let probe = Tensor::new(vec![1, 3, 4], probe).unwrap();
        let inputs = f.inputs.clone();
        for mask in [None, Some(&masks[..])] {
            let err = gradient_check(
                |g: &mut Graph<f64>, s| {
                    g.bind(&f.store);
                    let x = g.constant(inputs.clone());
                    let proj = f.sa.project_inputs(g, x)?;
                    let step = f.sa.attend_once(g, s, proj, mask)?;
                    let p = g.constant(probe.clone());
                    let y = g.mul(step.slots, p)?;
                    Ok(g.sum_all(y))
                },
                &s0,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-3, "slots: {err}");
        }
        for name in ["aggregator.q.weight", "aggregator.k.weight", "aggregator.gru.hh.weight"] {
            let id = f.store.id(name).unwrap();
            let err = gradient_check_param(
                |g: &mut Graph<f64>| {
                    let x = g.constant(inputs.clone());
                    let s = g.constant(s0.clone());
                    let proj = f.sa.project_inputs(g, x)?;
                    let step = f.sa.attend_once(g, s, proj, None)?;
                    let p = g.constant(probe.clone());
                    let y = g.mul(step.slots, p)?;
                    Ok(g.sum_all(y))
                },
                &f.store,
                id,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-3, "{name}: {err}");
        }
    }
}
