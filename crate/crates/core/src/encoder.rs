//! Convolutional image encoder producing the token grid `Z`, plus the learned
//! position embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::nn::{Conv2d, LayerNorm, Mlp};
use crate::diffnum::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::SceneSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub kernel: usize,
    pub strides: Vec<usize>,
    /// Standardize each feature channel over the tokens of an image, so
    /// features shared by the whole image do not dominate.
    pub standardize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            hidden: 32,
            feature_dim: 64,
            kernel: 5,
            strides: vec![1, 2, 1, 2],
            standardize: true,
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Token grid side length.
    pub fn grid(&self) -> Result<usize> {
        let stride = self.total_stride();
        if self.strides.is_empty() || stride == 0 {
            return Err(Error::Config("encoder needs at least one non-zero stride".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by total stride {stride}",
                self.image_size
            )));
        }
        if self.hidden == 0 || self.feature_dim == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(
                "encoder widths must be positive and the kernel odd".into(),
            ));
        }
        Ok(self.image_size / stride)
    }

    pub fn num_tokens(&self) -> Result<usize> {
        self.grid().map(|g| g * g)
    }
}

const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    convs: Vec<Conv2d>,
    norm: LayerNorm,
    head: Mlp,
    /// Position embedding added to `Z` before aggregation, `[n, c]`.
    pub position: ParamId,
}

/// Row-wise embedding initialized as a random linear map of the normalized
/// grid coordinates, so neighbouring cells start out similar. Entries start
/// small so they do not swamp the features they are added to.
pub fn grid_embedding<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    grid: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    let proj: Vec<f64> = (0..4 * dim).map(|_| rng.random_range(-0.1..0.1)).collect();
    let denom = (grid.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for y in 0..grid {
        for x in 0..grid {
            let (u, v) = (x as f64 / denom, y as f64 / denom);
            let coords = [u, 1.0 - u, v, 1.0 - v];
            for c in 0..dim {
                let e: f64 = (0..4).map(|k| coords[k] * proj[k * dim + c]).sum();
                data.push(T::from_f64(e));
            }
        }
    }
    store.add(name, Tensor::new(vec![grid * grid, dim], data)?)
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let grid = config.grid()?;
        let mut convs = Vec::with_capacity(config.strides.len());
        let mut in_ch = 3;
        for (i, &stride) in config.strides.iter().enumerate() {
            convs.push(Conv2d::new(
                store,
                &format!("encoder.conv{i}"),
                in_ch,
                config.hidden,
                config.kernel,
                stride,
                rng,
            )?);
            in_ch = config.hidden;
        }
        let norm = LayerNorm::new(store, "encoder.norm", config.hidden)?;
        let head = Mlp::new(
            store,
            "encoder.head",
            config.hidden,
            config.feature_dim,
            config.feature_dim,
            rng,
        )?;
        let position = grid_embedding(store, "pos.encoder", grid, config.feature_dim, rng)?;
        Ok(Encoder {
            config: config.clone(),
            convs,
            norm,
            head,
            position,
        })
    }

    /// `images[B, H, W, 3]` -> `Z[B, n, c]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let sh = g.shape(images).to_vec();
        let size = self.config.image_size;
        if sh.len() != 4 || sh[1] != size || sh[2] != size || sh[3] != 3 {
            return Err(Error::Dimension {
                op: "encode",
                lhs: vec![0, size, size, 3],
                rhs: sh,
            });
        }
        let mut x = images;
        for conv in &self.convs {
            x = conv.forward(g, x)?;
            x = g.relu(x);
        }
        let grid = self.config.grid()?;
        let x = g.reshape(x, &[sh[0], grid * grid, self.config.hidden])?;
        let x = self.norm.forward(g, x)?;
        let z = self.head.forward(g, x)?;
        if self.config.standardize {
            g.standardize_tokens(z, T::from_f64(STANDARDIZE_EPS))
        } else {
            Ok(z)
        }
    }

    /// `Z + E_p` for aggregation.
    pub fn add_position<T: Real>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let b = g.shape(z)[0];
        let pos = g.param(self.position);
        let pos = g.expand(pos, &[b])?;
        g.add(z, pos)
    }
}

/// Reconstruction target: the features with the gradient path cut.
pub fn target<T: Real>(g: &mut Graph<T>, z: Var) -> Var {
    g.detach(z)
}

/// Per-channel standardization of `[B, n, c]` features over the token axis.
pub fn normalize_channels<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let sh = z.shape().to_vec();
    let (b, n, c) = (sh[0], sh[1], sh[2]);
    let mut out = z.data().to_vec();
    for bi in 0..b {
        let block = &mut out[bi * n * c..(bi + 1) * n * c];
        for ch in 0..c {
            let mean = (0..n).map(|i| block[i * c + ch].as_f64()).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (block[i * c + ch].as_f64() - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let inv = 1.0 / (var + 1e-6).sqrt();
            for i in 0..n {
                let v = block[i * c + ch].as_f64();
                block[i * c + ch] = T::from_f64((v - mean) * inv);
            }
        }
    }
    Tensor::new(sh, out).expect("shape preserved")
}

/// Stacks scene images into an NHWC batch.
pub fn image_batch<T: Real>(samples: &[&SceneSample]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w * 3);
    for s in samples {
        if s.height != h || s.width != w {
            return Err(Error::Dimension {
                op: "image_batch",
                lhs: vec![h, w],
                rhs: vec![s.height, s.width],
            });
        }
        data.extend(s.image.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(vec![samples.len(), h, w, 3], data)
}
