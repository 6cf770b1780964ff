//! Random-order auto-regressive decoder: a random prefix of known feature
//! tokens plus a learned mask token attend to each other and to the slots,
//! and the output at the mask position predicts the held-out token.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::diffnum::nn::{key_mask, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::diffnum::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::encoder::grid_embedding;
use crate::error::{Error, Result};
use crate::redundancy::RedundancyMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Independent order draws per image and step.
    pub draws: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            blocks: 3,
            heads: 4,
            mlp_hidden: 128,
            draws: 4,
        }
    }
}

/// A decoding order and the number of tokens already known.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOrder {
    pub n_known: usize,
    pub order: Vec<usize>,
}

impl DecodeOrder {
    pub fn new(n_known: usize, order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("order {order:?} is not a permutation")));
            }
        }
        if n_known >= n {
            return Err(Error::Config(format!(
                "n_known {n_known} leaves nothing to predict among {n} tokens"
            )));
        }
        Ok(DecodeOrder { n_known, order })
    }

    /// Row-major order with `n_known` tokens given.
    pub fn raster(n: usize, n_known: usize) -> Result<Self> {
        Self::new(n_known, (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Index of the token to predict.
    pub fn next(&self) -> usize {
        self.order[self.n_known]
    }

    pub fn known(&self) -> &[usize] {
        &self.order[..self.n_known]
    }
}

/// Uniform prefix length in `0..n` and a uniform permutation.
pub fn sample_order(n: usize, rng: &mut impl Rng) -> Result<DecodeOrder> {
    if n == 0 {
        return Err(Error::Config("cannot decode an empty sequence".into()));
    }
    let n_known = rng.random_range(0..n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(DecodeOrder { n_known, order })
}

/// One random permutation per image sharing a single prefix length, so the
/// batch stays rectangular. With `random` off the orders are raster.
pub fn sample_batch_orders(
    n: usize,
    batch: usize,
    random: bool,
    rng: &mut impl Rng,
) -> Result<Vec<DecodeOrder>> {
    let first = sample_order(n, rng)?;
    let n_known = first.n_known;
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        if !random {
            out.push(DecodeOrder::raster(n, n_known)?);
        } else if i == 0 {
            out.push(first.clone());
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            out.push(DecodeOrder { n_known, order });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

/// Outputs of [`ArDecoder::decode_next`].
#[derive(Clone, Debug)]
pub struct DecodeStep {
    /// Prediction at the mask position, `[B, c]`.
    pub prediction: Var,
    /// Head-averaged slot cross-attention at the mask position for every
    /// layer, `[layer][B * s]`.
    pub slot_attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ArDecoder {
    pub config: DecoderConfig,
    pub dim: usize,
    pub tokens: usize,
    /// Decoder position embeddings `[n, c]`.
    pub position: ParamId,
    pub mask_token: ParamId,
    blocks: Vec<DecoderBlock>,
    norm_out: LayerNorm,
    head: Linear,
}

impl ArDecoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &DecoderConfig,
        grid: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.blocks == 0 || config.draws == 0 {
            return Err(Error::Config("decoder needs at least one block and one draw".into()));
        }
        let position = grid_embedding(store, "pos.decoder", grid, dim, rng)?;
        let mask_token = store.add_normal("decoder.mask_token", &[dim], 0.02, rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let p = format!("decoder.block{i}");
            blocks.push(DecoderBlock {
                norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), dim)?,
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), dim, dim, config.heads, rng)?,
                norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), dim)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross"), dim, dim, config.heads, rng)?,
                norm_mlp: LayerNorm::new(store, &format!("{p}.norm_mlp"), dim)?,
                mlp: Mlp::new(store, &format!("{p}.mlp"), dim, config.mlp_hidden, dim, rng)?,
            });
        }
        Ok(ArDecoder {
            config: config.clone(),
            dim,
            tokens: grid * grid,
            position,
            mask_token,
            blocks,
            norm_out: LayerNorm::new(store, "decoder.norm_out", dim)?,
            head: Linear::new(store, "decoder.head", dim, dim, true, rng)?,
        })
    }

    /// Runs the blocks on `x[B, L, c]`; the last block only evaluates the
    /// final (mask) position. Returns `[B, 1, c]` and per-layer attention.
    fn run_blocks<T: Real>(
        &self,
        g: &mut Graph<T>,
        mut x: Var,
        slots: Var,
        keep: &[Vec<bool>],
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let b = g.shape(x)[0];
        let s = g.shape(slots)[1];
        let heads = self.config.heads;
        let mut att = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let l = g.shape(x)[1];
            let h = blk.norm_self.forward(g, x)?;
            let (q_in, resid) = if i + 1 == self.blocks.len() && l > 1 {
                let last = vec![vec![l - 1]; b];
                (g.gather_rows(h, &last)?, g.gather_rows(x, &last)?)
            } else {
                (h, x)
            };
            let sa = blk.self_attn.forward(g, q_in, h, None)?;
            x = g.add(resid, sa.out)?;
            let lq = g.shape(x)[1];
            let h = blk.norm_cross.forward(g, x)?;
            let mask = g.constant(key_mask::<T>(keep, heads, lq)?);
            let ca = blk.cross_attn.forward(g, h, slots, Some(mask))?;
            x = g.add(x, ca.out)?;
            let h = blk.norm_mlp.forward(g, x)?;
            let h = blk.mlp.forward(g, h)?;
            x = g.add(x, h)?;
            // head average at the last query row
            let w = g.value(ca.weights).data();
            let mut rows = vec![0.0; b * s];
            for bi in 0..b {
                for hd in 0..heads {
                    let base = ((bi * heads + hd) * lq + lq - 1) * s;
                    for j in 0..s {
                        rows[bi * s + j] += w[base + j].as_f64() / heads as f64;
                    }
                }
            }
            att.push(rows);
        }
        let l = g.shape(x)[1];
        if l > 1 {
            x = g.gather_rows(x, &vec![vec![l - 1]; b])?;
        }
        Ok((x, att))
    }

    /// Predicts token `order[n_known]` of every image from its known prefix,
    /// the position embeddings and the kept slots.
    pub fn decode_next<T: Real>(
        &self,
        g: &mut Graph<T>,
        y: Var,
        slots: Var,
        masks: &[RedundancyMask],
        orders: &[DecodeOrder],
    ) -> Result<DecodeStep> {
        let ysh = g.shape(y).to_vec();
        let ssh = g.shape(slots).to_vec();
        let b = ysh[0];
        if ysh.len() != 3
            || ysh[1] != self.tokens
            || ysh[2] != self.dim
            || ssh[0] != b
            || ssh[2] != self.dim
            || orders.len() != b
            || masks.len() != b
        {
            return Err(Error::Dimension {
                op: "decode_next",
                lhs: ysh,
                rhs: ssh,
            });
        }
        let n_known = orders[0].n_known;
        if orders.iter().any(|o| o.n_known != n_known || o.len() != self.tokens) {
            return Err(Error::Config("batch orders must share length and prefix size".into()));
        }
        let mask_tok = g.param(self.mask_token);
        let mask_tok = g.expand(mask_tok, &[b, 1])?;
        let seq = if n_known == 0 {
            mask_tok
        } else {
            let idx: Vec<Vec<usize>> = orders.iter().map(|o| o.known().to_vec()).collect();
            let known = g.gather_rows(y, &idx)?;
            g.concat_rows(known, mask_tok)?
        };
        let pos = g.param(self.position);
        let pos = g.expand(pos, &[b])?;
        let pidx: Vec<Vec<usize>> = orders.iter().map(|o| o.order[..=n_known].to_vec()).collect();
        let pos = g.gather_rows(pos, &pidx)?;
        let x = g.add(seq, pos)?;
        let keep: Vec<Vec<bool>> = masks.iter().map(|m| m.keep().to_vec()).collect();
        let (out, slot_attention) = self.run_blocks(g, x, slots, &keep)?;
        let out = self.norm_out.forward(g, out)?;
        let out = self.head.forward(g, out)?;
        let prediction = g.reshape(out, &[b, self.dim])?;
        Ok(DecodeStep {
            prediction,
            slot_attention,
        })
    }

    /// Decoder attention for one image: every position is queried on its own
    /// with an empty prefix. One map per layer.
    pub fn full_decode_attention<T: Real>(
        &self,
        store: &ParamStore<T>,
        slots: &Tensor<T>,
        mask: &RedundancyMask,
        grid: usize,
    ) -> Result<Vec<AttentionMap>> {
        let s = slots.shape()[0];
        let n = self.tokens;
        if grid * grid != n || slots.shape() != [s, self.dim] || mask.len() != s {
            return Err(Error::Dimension {
                op: "full_decode_attention",
                lhs: vec![n, self.dim],
                rhs: slots.shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        g.bind(store);
        let repeated = slots.data().repeat(n);
        let sv = g.constant(Tensor::new(vec![n, s, self.dim], repeated)?);
        let mask_tok = g.param(self.mask_token);
        let mask_tok = g.expand(mask_tok, &[n])?;
        let pos = g.param(self.position);
        let x = g.add(mask_tok, pos)?;
        let x = g.reshape(x, &[n, 1, self.dim])?;
        let keep = vec![mask.keep().to_vec(); n];
        let (_, att) = self.run_blocks(&mut g, x, sv, &keep)?;
        att.into_iter()
            .map(|rows| AttentionMap::from_pixel_major(&rows, s, grid, grid))
            .collect()
    }
}

/// Mean squared error between predictions and the true tokens at each
/// image's next position.
pub fn recon_loss<T: Real>(
    g: &mut Graph<T>,
    prediction: Var,
    y: Var,
    orders: &[DecodeOrder],
) -> Result<Var> {
    let b = g.shape(y)[0];
    let c = g.shape(y)[2];
    let idx: Vec<Vec<usize>> = orders.iter().map(|o| vec![o.next()]).collect();
    let t = g.gather_rows(y, &idx)?;
    let t = g.reshape(t, &[b, c])?;
    g.mse(prediction, t)
}
