//! Episodic training with validation-based model selection, and evaluation
//! with 95% confidence intervals.

use std::collections::HashMap;
use std::fmt;

use crate::data::{mix_seed, sample_episode, AugmentConfig, Dataset, DatasetSplit, Episode};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::head::{scores_from_matrix, ClassScores};
use crate::model::HfcrModel;
use crate::optim::{clip_grad_norm, lr_at_epoch, SgdNesterov};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    /// `None` keeps the learning rate constant.
    pub lr_decay_period: Option<usize>,
    pub train_way: usize,
    pub train_shot: usize,
    pub train_queries: usize,
    pub eval_way: usize,
    pub eval_shot: usize,
    pub eval_queries: usize,
    pub episodes_per_epoch: usize,
    pub validate_every: usize,
    pub val_episodes: usize,
    pub augment: AugmentConfig,
    /// Caps the joint L2 norm of each episode's gradient; `None` is plain SGD.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 100,
            lr_decay_factor: 10.0,
            lr_decay_period: Some(34),
            train_way: 5,
            train_shot: 1,
            train_queries: 5,
            eval_way: 5,
            eval_shot: 1,
            eval_queries: 16,
            episodes_per_epoch: 50,
            validate_every: 20,
            val_episodes: 100,
            augment: AugmentConfig::default(),
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train_way", self.train_way),
            ("train_shot", self.train_shot),
            ("train_queries", self.train_queries),
            ("eval_way", self.eval_way),
            ("eval_shot", self.eval_shot),
            ("eval_queries", self.eval_queries),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("validate_every", self.validate_every),
            ("val_episodes", self.val_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.train_way < 2 || self.eval_way < 2 {
            return Err(Error::Config("episodes need at least 2 classes".into()));
        }
        let f = self.lr_decay_factor;
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::Config(format!("lr_decay_factor must be positive, got {f}")));
        }
        for (name, v) in [("lr0", self.lr0), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.lr0, self.lr_decay_factor, self.lr_decay_period, epoch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub episode: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub epoch: usize,
    pub mean: f64,
    pub ci95: f64,
}

pub struct TrainOutcome<T> {
    /// Parameters with the best validation accuracy (earliest on ties).
    pub best: ParamStore<T>,
    pub best_epoch: Option<usize>,
    pub last: ParamStore<T>,
    pub log: Vec<LogRecord>,
    pub validations: Vec<Validation>,
}

/// Trains for `cfg.epochs × cfg.episodes_per_epoch` episodes on the base
/// classes, one optimizer step per episode. Validation runs every
/// `validate_every` epochs and after the last one.
pub fn train<T: Scalar>(
    model: &HfcrModel<T>,
    mut store: ParamStore<T>,
    data: &Dataset,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut on_episode: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if split.val.len() < cfg.eval_way {
        return Err(Error::Config(format!(
            "{}-way validation needs {} classes, split has {}",
            cfg.eval_way,
            cfg.eval_way,
            split.val.len()
        )));
    }
    let mut opt = SgdNesterov::new(T::from_f64_lossy(cfg.momentum), T::from_f64_lossy(cfg.weight_decay));
    let val_cfg = EvalConfig {
        way: cfg.eval_way,
        shot: cfg.eval_shot,
        queries: cfg.eval_queries,
        episodes: cfg.val_episodes,
        seed: mix_seed(cfg.seed, &[3]),
    };
    let mut best = store.clone();
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs * cfg.episodes_per_epoch);
    let mut validations = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        for episode in 0..cfg.episodes_per_epoch {
            let seed = mix_seed(cfg.seed, &[1, epoch as u64, episode as u64]);
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch, seed },
                other => other,
            };
            let ep = sample_episode(data, &split.base, cfg.train_way, cfg.train_shot, cfg.train_queries, seed)?;
            let aug_seed = mix_seed(cfg.seed, &[2, epoch as u64, episode as u64]);
            let batch = ep.to_batch::<T>(data, Some((&cfg.augment, aug_seed)))?;

            let mut g = Graph::new();
            let fwd = model.forward_episode(&mut g, &store, &batch, Mode::Train).map_err(diverged)?;
            let loss = g.value(fwd.loss).item().to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, seed });
            }
            g.backward_into(fwd.loss, &mut store).map_err(diverged)?;
            if let Some(c) = cfg.grad_clip {
                if !clip_grad_norm(&mut store, c).is_finite() {
                    return Err(Error::Divergence { epoch, seed });
                }
            }
            opt.step(&mut store, T::from_f64_lossy(lr))?;
            model.encoder().apply_stats(&mut store, &fwd.stats);
            if store.iter().any(|(_, _, t)| !t.all_finite()) {
                return Err(Error::Divergence { epoch, seed });
            }
            let rec = LogRecord {
                epoch,
                episode,
                loss,
                lr,
            };
            on_episode(&rec);
            log.push(rec);
        }
        if (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs {
            let report = evaluate(model, &store, data, &split.val, &val_cfg)?;
            validations.push(Validation {
                epoch,
                mean: report.mean,
                ci95: report.ci95,
            });
            if report.mean > best_acc {
                best_acc = report.mean;
                best_epoch = Some(epoch);
                best = store.clone();
            }
        }
    }
    store.zero_grads();
    best.zero_grads();
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: store,
        log,
        validations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean episode accuracy in percent.
    pub mean: f64,
    /// Half-width of the 95% confidence interval, `1.96·std/√n`.
    pub ci95: f64,
    pub episodes: usize,
    /// CRC-32 over the little-endian bits of the per-episode accuracies.
    pub digest: u32,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    /// Summarizes per-episode accuracies (percent). Uses the sample standard
    /// deviation; a single episode gets a zero-width interval.
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        let n = accuracies.len();
        if n == 0 {
            return Err(Error::Data("no episodes to summarize".into()));
        }
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        let mut bytes = Vec::with_capacity(8 * n);
        for a in &accuracies {
            bytes.extend_from_slice(&a.to_le_bytes());
        }
        Ok(Self {
            mean,
            ci95,
            episodes: n,
            digest: crc32fast::hash(&bytes),
            accuracies,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_mean_ci(self.mean, self.ci95))
    }
}

/// `mean±ci` with two decimals.
pub fn format_mean_ci(mean: f64, ci: f64) -> String {
    format!("{mean:.2}±{ci:.2}")
}

/// Eval-mode embeddings of individual images, keyed by dataset index.
pub struct FeatureCache<T> {
    features: HashMap<usize, Tensor<T>>,
}

const EMBED_CHUNK: usize = 32;

impl<T: Scalar> FeatureCache<T> {
    /// Embeds every image of the given classes.
    pub fn build(model: &HfcrModel<T>, store: &ParamStore<T>, data: &Dataset, classes: &[usize]) -> Result<Self> {
        let indices: Vec<usize> = classes.iter().flat_map(|&c| data.class_images(c).iter().copied()).collect();
        let mut features = HashMap::with_capacity(indices.len());
        for chunk in indices.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let images = g.constant(data.stack::<T>(chunk)?)?;
            let (feats, _) = model.embed(&mut g, store, images, Mode::Eval)?;
            for (&i, f) in chunk.iter().zip(feats) {
                features.insert(i, g.value(f).clone());
            }
        }
        Ok(Self { features })
    }

    pub fn get(&self, index: usize) -> Result<&Tensor<T>> {
        self.features
            .get(&index)
            .ok_or_else(|| Error::Data(format!("image {index} is not in the feature cache")))
    }
}

/// Per-query class scores of one episode from cached features.
pub fn score_episode<T: Scalar>(
    model: &HfcrModel<T>,
    store: &ParamStore<T>,
    cache: &FeatureCache<T>,
    episode: &Episode,
) -> Result<Vec<ClassScores<T>>> {
    let mut g = Graph::new();
    let mut constant = |i: usize| -> Result<Var> { g.constant(cache.get(i)?.clone()) };
    let mut support = Vec::with_capacity(episode.way);
    for shots in episode.support.chunks(episode.shot) {
        support.push(shots.iter().map(|&(i, _)| constant(i)).collect::<Result<Vec<_>>>()?);
    }
    let queries = episode.query.iter().map(|&(i, _)| constant(i)).collect::<Result<Vec<_>>>()?;
    let d = model.distances(&mut g, store, &support, &queries)?;
    scores_from_matrix(g.value(d))
}

/// Mean accuracy over `cfg.episodes` episodes drawn from `classes`.
pub fn evaluate<T: Scalar>(
    model: &HfcrModel<T>,
    store: &ParamStore<T>,
    data: &Dataset,
    classes: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if classes.len() < cfg.way {
        return Err(Error::Config(format!(
            "{}-way evaluation needs {} classes, only {} available",
            cfg.way,
            cfg.way,
            classes.len()
        )));
    }
    if cfg.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let cache = FeatureCache::build(model, store, data, classes)?;
    let mut accuracies = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let seed = mix_seed(cfg.seed, &[e as u64]);
        let episode = sample_episode(data, classes, cfg.way, cfg.shot, cfg.queries, seed)?;
        let scores = score_episode(model, store, &cache, &episode)?;
        let correct = scores
            .iter()
            .zip(&episode.query)
            .filter(|(s, &(_, label))| s.predicted == label)
            .count();
        accuracies.push(100.0 * correct as f64 / episode.query.len() as f64);
    }
    EvalReport::from_accuracies(accuracies)
}
