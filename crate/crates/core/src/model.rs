//! The full model: encoder, slot initializer, aggregator and decoder, plus the
//! combined training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{
    aggregate_dias, Aggregation, AggregatorConfig, Schedule, SlotAttention, SlotInitializer,
};
use crate::ar_decoder::{recon_loss, sample_batch_orders, ArDecoder, DecoderConfig};
use crate::attention::AttentionMap;
use crate::diffnum::{Graph, ParamStore, Real, Tensor, Var};
use crate::distill::{approx_targets, MatchCost};
use crate::encoder::{image_batch, normalize_channels, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::redundancy::RedundancyMask;
use crate::scene::SceneSample;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub decoder: DecoderConfig,
}

/// The four switchable techniques.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub redundancy_reduction: bool,
    pub reinit: bool,
    pub self_distill: bool,
    pub random_ar: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            redundancy_reduction: true,
            reinit: true,
            self_distill: true,
            random_ar: true,
        }
    }
}

impl Ablation {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            reduction: self.redundancy_reduction,
            reinit: self.reinit,
        }
    }

    /// Plain Slot Attention with raster-order decoding.
    pub fn none() -> Self {
        Ablation {
            redundancy_reduction: false,
            reinit: false,
            self_distill: false,
            random_ar: false,
        }
    }
}

/// Named ablation rows, each run once by the ablation harness.
pub fn ablation_grid() -> Vec<(&'static str, Ablation)> {
    let full = Ablation::default();
    vec![
        ("full", full),
        ("reinit_off", Ablation { reinit: false, ..full }),
        (
            "reduction_reinit_off",
            Ablation {
                redundancy_reduction: false,
                reinit: false,
                ..full
            },
        ),
        ("distill_off", Ablation { self_distill: false, ..full }),
        ("random_ar_off", Ablation { random_ar: false, ..full }),
    ]
}

/// Options for one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub lambda: f64,
    /// Whether the distillation term is active at this step.
    pub distill: bool,
    pub match_cost: MatchCost,
    pub normalize_target: bool,
}

#[derive(Clone, Debug)]
pub struct DiasModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub initializer: SlotInitializer,
    pub aggregator: SlotAttention,
    pub decoder: ArDecoder,
}

/// Outputs of [`DiasModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub aggregation: Aggregation,
    pub recon: Var,
    pub approx: Option<Var>,
    pub total: Var,
}

impl DiasModel {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let grid = config.encoder.grid()?;
        let c = config.encoder.feature_dim;
        let encoder = Encoder::new(store, &config.encoder, rng)?;
        let initializer = SlotInitializer::new(store, c, rng)?;
        let aggregator = SlotAttention::new(store, c, c, config.aggregator.mlp_hidden, rng)?;
        let decoder = ArDecoder::new(store, &config.decoder, grid, c, rng)?;
        Ok(DiasModel {
            config: config.clone(),
            encoder,
            initializer,
            aggregator,
            decoder,
        })
    }

    pub fn grid(&self) -> usize {
        self.config.encoder.grid().expect("validated at construction")
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn slots(&self) -> usize {
        self.config.aggregator.slots
    }

    pub fn check_samples(&self, samples: &[&SceneSample]) -> Result<()> {
        let size = self.config.encoder.image_size;
        match samples.iter().find(|s| s.height != size || s.width != size) {
            Some(s) => Err(Error::Checkpoint(format!(
                "model expects {size}x{size} images, data has {}x{}",
                s.height, s.width
            ))),
            None => Ok(()),
        }
    }

    /// Encoder features `[B, n, c]` without building gradients.
    pub fn features<T: Real>(&self, store: &ParamStore<T>, samples: &[&SceneSample]) -> Result<Tensor<T>> {
        self.check_samples(samples)?;
        let mut g = Graph::new();
        g.bind_filtered(store, |_| false);
        let x = g.constant(image_batch(samples)?);
        let z = self.encoder.encode(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    /// Aggregation only, from precomputed features.
    pub fn aggregate<T: Real>(
        &self,
        g: &mut Graph<T>,
        z: Var,
        ablation: Ablation,
        rng: &mut impl Rng,
    ) -> Result<Aggregation> {
        let b = g.shape(z)[0];
        let inputs = self.encoder.add_position(g, z)?;
        let s0 = self.initializer.init_slots(g, b, self.slots(), rng)?;
        aggregate_dias(
            g,
            &self.aggregator,
            inputs,
            s0,
            &self.config.aggregator,
            ablation.schedule(),
        )
    }

    /// Full forward pass and loss on features `z[B, n, c]`, which may or may
    /// not carry gradients back into the encoder.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        z: Var,
        ablation: Ablation,
        options: LossOptions,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutput> {
        let b = g.shape(z)[0];
        let n = self.num_tokens();
        let y = if options.normalize_target {
            let v = normalize_channels(g.value(z));
            g.constant(v)
        } else {
            crate::encoder::target(g, z)
        };
        let aggregation = self.aggregate(g, z, ablation, rng)?;
        let draws = self.config.decoder.draws;
        let mut recon: Option<Var> = None;
        for _ in 0..draws {
            let orders = sample_batch_orders(n, b, ablation.random_ar, rng)?;
            let step = self.decoder.decode_next(
                g,
                y,
                aggregation.slots,
                &aggregation.masks,
                &orders,
            )?;
            let l = recon_loss(g, step.prediction, y, &orders)?;
            recon = Some(match recon {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let recon = g.scale(recon.expect("draws >= 1"), T::from_f64(1.0 / draws as f64));
        let approx = if ablation.self_distill && options.distill {
            Some(self.distill_loss(g, &aggregation, options.match_cost)?)
        } else {
            None
        };
        let total = match approx {
            Some(a) => {
                let wa = g.scale(a, T::from_f64(options.lambda));
                g.add(recon, wa)?
            }
            None => recon,
        };
        Ok(ForwardOutput {
            aggregation,
            recon,
            approx,
            total,
        })
    }

    /// Cross-entropy of first-iteration attention against the matched,
    /// binarized final attention (treated as a fixed teacher).
    pub fn distill_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        agg: &Aggregation,
        cost: MatchCost,
    ) -> Result<Var> {
        let sh = g.shape(agg.first.logits).to_vec();
        let (b, n, s) = (sh[0], sh[1], sh[2]);
        let grid = (self.grid(), self.grid());
        let mut targets = Vec::with_capacity(b * n);
        for (i, mask) in agg.masks.iter().enumerate() {
            let student = agg.first_map(g, i, grid)?;
            let teacher = agg.final_map(g, i, grid)?;
            targets.extend(approx_targets(&student, &teacher, mask, cost)?.targets);
        }
        let logits = g.reshape(agg.first.logits, &[b * n, s])?;
        g.softmax_nll(logits, targets, T::from_f64((b * n) as f64))
    }
}

/// What evaluation needs from one image.
#[derive(Clone, Debug)]
pub struct Inference {
    pub first: AttentionMap,
    pub last: AttentionMap,
    pub mask: RedundancyMask,
    /// Final slots `[s, c]`.
    pub slots: Vec<f64>,
}

impl DiasModel {
    /// Runs aggregation on a batch of features without gradients.
    pub fn infer<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &Tensor<T>,
        ablation: Ablation,
        rng: &mut impl Rng,
    ) -> Result<Vec<Inference>> {
        let mut g = Graph::new();
        g.bind_filtered(store, |_| false);
        let zv = g.constant(z.clone());
        let agg = self.aggregate(&mut g, zv, ablation, rng)?;
        let grid = (self.grid(), self.grid());
        let b = z.shape()[0];
        let s = self.slots();
        let c = self.config.encoder.feature_dim;
        let slot_data = g.value(agg.slots).data();
        (0..b)
            .map(|i| {
                Ok(Inference {
                    first: agg.first_map(&g, i, grid)?,
                    last: agg.final_map(&g, i, grid)?,
                    mask: agg.masks[i].clone(),
                    slots: slot_data[i * s * c..(i + 1) * s * c]
                        .iter()
                        .map(|v| v.as_f64())
                        .collect(),
                })
            })
            .collect()
    }
}
