//! Conv-4 backbone: repeated conv(3×3) → batch-norm → ReLU → 2×2 max-pool.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Conv4,
    /// Reserved; construction fails.
    ResNet12,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub blocks: usize,
    pub channels: usize,
    pub input_side: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Conv4,
            blocks: 4,
            channels: 64,
            input_side: 84,
        }
    }
}

impl EncoderConfig {
    /// Spatial side of the output feature map (floor at every halving).
    pub fn output_side(&self) -> usize {
        (0..self.blocks).fold(self.input_side, |s, _| s / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone == Backbone::ResNet12 {
            return Err(Error::NotImplemented("ResNet-12 backbone"));
        }
        if self.blocks == 0 || self.channels == 0 {
            return Err(Error::Config("encoder needs at least one block and one channel".into()));
        }
        if self.output_side() == 0 {
            return Err(Error::Config(format!(
                "input side {} too small for {} halvings",
                self.input_side, self.blocks
            )));
        }
        Ok(())
    }
}

/// One encoder output `f = F(x)` with shape d×h×w.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::InvalidShape {
                op: "feature_map",
                shape: values.shape().to_vec(),
                reason: "expected d×h×w".into(),
            });
        }
        if !values.all_finite() {
            return Err(Error::NonFinite { op: "feature_map" });
        }
        Ok(Self { values })
    }

    pub fn d(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn r(&self) -> usize {
        self.h() * self.w()
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// d vectors of length r.
    pub fn channel_view(&self) -> Tensor<T> {
        self.values
            .reshaped(vec![self.d(), self.r()])
            .expect("same element count")
    }

    /// r vectors of length d.
    pub fn spatial_view(&self) -> Tensor<T> {
        let (d, r) = (self.d(), self.r());
        let src = self.values.data();
        Tensor::from_fn(vec![r, d], |i| src[(i % d) * r + i / d]).expect("same element count")
    }

    pub fn from_channel_view(view: &Tensor<T>, h: usize, w: usize) -> Result<Self> {
        let d = view.shape()[0];
        Self::new(view.reshaped(vec![d, h, w])?)
    }

    pub fn from_spatial_view(view: &Tensor<T>, h: usize, w: usize) -> Result<Self> {
        let s = view.shape();
        if s.len() != 2 || s[0] != h * w {
            return Err(Error::Shape {
                op: "from_spatial_view",
                lhs: s.to_vec(),
                rhs: vec![h * w],
            });
        }
        let (r, d) = (s[0], s[1]);
        let src = view.data();
        Self::new(Tensor::from_fn(vec![d, h, w], |i| src[(i % r) * d + i / r])?)
    }
}

struct Block {
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Batch-norm statistics gathered during a training forward pass, to be
/// folded into the running estimates once the step is done.
pub struct StatsUpdate<T> {
    block: usize,
    stats: BatchStats<T>,
}

impl<T> StatsUpdate<T> {
    pub fn block(&self) -> usize {
        self.block
    }

    pub fn stats(&self) -> &BatchStats<T> {
        &self.stats
    }
}

pub struct Encoder {
    cfg: EncoderConfig,
    blocks: Vec<Block>,
}

impl Encoder {
    /// Registers parameters under `prefix` with Kaiming (fan-in) normal
    /// kernels and unit-scale, zero-shift batch norm.
    pub fn new<T: Scalar>(cfg: EncoderConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut in_ch = 3;
        for b in 0..cfg.blocks {
            let c = cfg.channels;
            let fan_in = in_ch * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let kernel = Tensor::from_fn(vec![c, in_ch, 3, 3], |_| T::from_f64_lossy(normal.sample(rng)))?;
            blocks.push(Block {
                conv: store.add(format!("{prefix}.block{b}.conv"), kernel)?,
                gamma: store.add(format!("{prefix}.block{b}.bn.gamma"), Tensor::full(vec![c], T::one())?)?,
                beta: store.add(format!("{prefix}.block{b}.bn.beta"), Tensor::zeros(vec![c])?)?,
                running_mean: store.add_buffer(format!("{prefix}.block{b}.bn.running_mean"), Tensor::zeros(vec![c])?)?,
                running_var: store.add_buffer(format!("{prefix}.block{b}.bn.running_var"), Tensor::full(vec![c], T::one())?)?,
            });
            in_ch = c;
        }
        Ok(Self { cfg, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Output feature dims (d, h, w).
    pub fn output_dims(&self) -> (usize, usize, usize) {
        let s = self.cfg.output_side();
        (self.cfg.channels, s, s)
    }

    /// Runs the backbone on `images[B×3×s×s]`, returning `B×d×h×w`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<StatsUpdate<T>>)> {
        let s = g.shape(images).to_vec();
        let side = self.cfg.input_side;
        if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(Error::Shape {
                op: "encoder",
                lhs: s,
                rhs: vec![0, 3, side, side],
            });
        }
        let mut x = images;
        let mut updates = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let w = g.param(store, b.conv)?;
            let gamma = g.param(store, b.gamma)?;
            let beta = g.param(store, b.beta)?;
            let conv = g.conv2d(x, w)?;
            let normed = match mode {
                Mode::Train => {
                    let (y, stats) = g.batch_norm_train(conv, gamma, beta)?;
                    updates.push(StatsUpdate { block: i, stats });
                    y
                }
                Mode::Eval => {
                    let mean = store.get(b.running_mean).data();
                    let var = store.get(b.running_var).data();
                    g.batch_norm_eval(conv, gamma, beta, mean, var)?
                }
            };
            let act = g.relu(normed)?;
            x = g.max_pool2(act)?;
        }
        Ok((x, updates))
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn apply_stats<T: Scalar>(&self, store: &mut ParamStore<T>, updates: &[StatsUpdate<T>]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for u in updates {
            let b = &self.blocks[u.block];
            let n = u.stats.count;
            let correction = if n > 1 {
                T::from_f64_lossy(n as f64 / (n - 1) as f64)
            } else {
                T::one()
            };
            let rm = store.get_mut(b.running_mean).data_mut();
            for (r, &v) in rm.iter_mut().zip(&u.stats.mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            let rv = store.get_mut(b.running_var).data_mut();
            for (r, &v) in rv.iter_mut().zip(&u.stats.var) {
                *r = (T::one() - m) * *r + m * v * correction;
            }
        }
    }

    /// Eval-mode convenience: encodes a batch tensor into feature maps.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<FeatureMap<T>>> {
        if !images.all_finite() {
            return Err(Error::NonFinite { op: "encoder input" });
        }
        let mut g = Graph::new();
        let x = g.constant(images.clone())?;
        let (y, _) = self.forward(&mut g, store, x, Mode::Eval)?;
        split_batch(g.value(y))
    }
}

/// Splits a `B×d×h×w` tensor into per-image feature maps.
pub fn split_batch<T: Scalar>(batch: &Tensor<T>) -> Result<Vec<FeatureMap<T>>> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "split_batch",
            shape: s.to_vec(),
            reason: "expected B×d×h×w".into(),
        });
    }
    let per = s[1] * s[2] * s[3];
    batch
        .data()
        .chunks(per)
        .map(|c| FeatureMap::new(Tensor::new(vec![s[1], s[2], s[3]], c.to_vec())?))
        .collect()
}
