//! The full pipeline: encoder → hybrid fusion → four-way reconstruction →
//! weighted reconstruction-error classifier, with the ablation switches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig, Mode, StatsUpdate};
use crate::error::{Error, Result};
use crate::head::{self, HeadOptions, HeadParams};
use crate::hffp::{self, Arrangement, Branches, FeatureDims, HffpParams};
use crate::hfrp::{self, HfrpParams};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct HfcrConfig {
    pub encoder: EncoderConfig,
    pub hffp: bool,
    pub hfrp: bool,
    pub branches: Branches,
    pub arrangement: Arrangement,
    pub pos_enc_in_sfo: bool,
    pub pos_enc_in_hfrp: bool,
    pub head: HeadOptions,
    pub lambda_init: f64,
    pub log_tau_init: f64,
}

impl Default for HfcrConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            hffp: true,
            hfrp: true,
            branches: Branches::default(),
            arrangement: Arrangement::Parallel,
            pos_enc_in_sfo: true,
            pos_enc_in_hfrp: false,
            head: HeadOptions::default(),
            lambda_init: head::LAMBDA_INIT,
            log_tau_init: 0.0,
        }
    }
}

/// How an episode is scored, derived from the component switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringMode {
    /// Fusion and reconstruction.
    Full,
    /// Reconstruction on raw encoder features.
    HfrpOnly,
    /// Prototype distances on fused features.
    HffpOnly,
    /// Prototype distances on raw encoder features.
    ProtoNet,
}

impl ScoringMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoringMode::Full => "full",
            ScoringMode::HfrpOnly => "hfrp-only",
            ScoringMode::HffpOnly => "hffp-only",
            ScoringMode::ProtoNet => "protonet",
        }
    }
}

impl HfcrConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.lambda_init.is_finite() && self.log_tau_init.is_finite()) {
            return Err(Error::Config("head initial values must be finite".into()));
        }
        let any_branch = self.branches.channel || self.branches.spatial;
        if (self.hffp || self.hfrp) && !any_branch {
            return Err(Error::Config(
                "channel and spatial branches are both disabled while fusion/reconstruction is enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn scoring_mode(&self) -> ScoringMode {
        match (self.hffp, self.hfrp) {
            (true, true) => ScoringMode::Full,
            (false, true) => ScoringMode::HfrpOnly,
            (true, false) => ScoringMode::HffpOnly,
            (false, false) => ScoringMode::ProtoNet,
        }
    }

    pub fn feature_dims(&self) -> FeatureDims {
        let s = self.encoder.output_side();
        FeatureDims {
            d: self.encoder.channels,
            h: s,
            w: s,
        }
    }
}

/// Parameter layout of the whole model. All tensors are always registered
/// so checkpoints share one layout; unused ones are frozen.
pub struct HfcrModel<T> {
    cfg: HfcrConfig,
    encoder: Encoder,
    hffp: HffpParams<T>,
    hfrp: HfrpParams<T>,
    head: HeadParams,
}

/// Result of scoring one episode.
pub struct EpisodeForward<T> {
    /// queries × classes distance matrix.
    pub distances: Var,
    pub loss: Var,
    pub stats: Vec<StatsUpdate<T>>,
}

/// Images of one episode laid out support-first: support image `n·K + k` is
/// shot `k` of class `n`; queries follow in any order with `query_labels`.
#[derive(Debug, Clone)]
pub struct EpisodeBatch<T> {
    pub images: Tensor<T>,
    pub way: usize,
    pub shot: usize,
    pub query_labels: Vec<usize>,
}

impl<T: Scalar> EpisodeBatch<T> {
    pub fn support_count(&self) -> usize {
        self.way * self.shot
    }
}

impl<T: Scalar> HfcrModel<T> {
    /// Builds the model with freshly initialized parameters from `seed`.
    pub fn new(cfg: HfcrConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder.clone(), &mut store, "encoder", &mut rng)?;
        let dims = cfg.feature_dims();
        let mut hffp = HffpParams::new(dims, &mut store, "hffp", &mut rng)?;
        hffp.pos_enc_in_sfo = cfg.pos_enc_in_sfo;
        let mut hfrp = HfrpParams::new(dims, &mut store, "hfrp", &mut rng)?;
        if cfg.pos_enc_in_hfrp {
            hfrp.enable_pos_enc();
        }
        let head = HeadParams::new(&mut store, "head", cfg.head)?;
        for id in head.lambdas {
            store.get_mut(id).data_mut()[0] = T::from_f64_lossy(cfg.lambda_init);
        }
        store.get_mut(head.log_tau).data_mut()[0] = T::from_f64_lossy(cfg.log_tau_init);
        let model = Self {
            cfg,
            encoder,
            hffp,
            hfrp,
            head,
        };
        model.freeze_unused(&mut store);
        Ok((model, store))
    }

    fn freeze_unused(&self, store: &mut ParamStore<T>) {
        let mut frozen: Vec<ParamId> = Vec::new();
        let b = self.cfg.branches;
        if !self.cfg.hffp {
            frozen.extend(self.hffp.channel_ids());
            frozen.extend(self.hffp.spatial_ids());
        } else {
            if !b.channel {
                frozen.extend(self.hffp.channel_ids());
            }
            if !b.spatial {
                frozen.extend(self.hffp.spatial_ids());
            }
            // sequential arrangements and single branches use both sets as wired
        }
        if !self.cfg.hfrp {
            frozen.extend(self.hfrp.channel_ids());
            frozen.extend(self.hfrp.spatial_ids());
            frozen.extend(self.head.lambdas);
            frozen.push(self.head.log_tau);
        } else {
            if !b.channel {
                frozen.extend(self.hfrp.channel_ids());
                frozen.extend([self.head.lambdas[0], self.head.lambdas[2]]);
            }
            if !b.spatial {
                frozen.extend(self.hfrp.spatial_ids());
                frozen.extend([self.head.lambdas[1], self.head.lambdas[3]]);
            }
        }
        for id in frozen {
            store.set_trainable(id, false);
        }
    }

    pub fn config(&self) -> &HfcrConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn hffp_params(&self) -> &HffpParams<T> {
        &self.hffp
    }

    pub fn hfrp_params(&self) -> &HfrpParams<T> {
        &self.hfrp
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.head
    }

    /// Per-image features ready for scoring (d×r channel views): encoder
    /// output, passed through fusion when enabled.
    pub fn embed(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        mode: Mode,
    ) -> Result<(Vec<Var>, Vec<StatsUpdate<T>>)> {
        let (feats, stats) = self.encoder.forward(g, store, images, mode)?;
        let batch = g.shape(feats)[0];
        let dims = self.cfg.feature_dims();
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let one = g.narrow(feats, b, 1)?;
            let f = g.reshape(one, vec![dims.d, dims.r()])?;
            out.push(self.fuse_features(g, store, f)?);
        }
        Ok((out, stats))
    }

    /// Applies fusion to one d×r encoder feature when enabled.
    pub fn fuse_features(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        if self.cfg.hffp {
            hffp::apply_hffp(g, store, &self.hffp, self.cfg.arrangement, self.cfg.branches, f)
        } else {
            Ok(f)
        }
    }

    /// queries × classes distance matrix from embedded features.
    pub fn distances(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        support: &[Vec<Var>],
        queries: &[Var],
    ) -> Result<Var> {
        if !self.cfg.hfrp {
            let flat_support = support
                .iter()
                .map(|shots| shots.iter().map(|&s| flatten(g, s)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let flat_queries = queries.iter().map(|&q| flatten(g, q)).collect::<Result<Vec<_>>>()?;
            return head::protonet_distances(g, &flat_support, &flat_queries);
        }
        let bundles = hfrp::reconstruct_all(g, store, &self.hfrp, self.cfg.branches, support, queries)?;
        let mut cells = Vec::with_capacity(queries.len() * support.len());
        for row in &bundles {
            for bundle in row {
                let errors = head::bundle_errors(g, bundle, self.head.options)?;
                cells.push(head::total_distance(g, store, &self.head, &errors)?);
            }
        }
        let flat = g.concat(&cells, 0)?;
        g.reshape(flat, vec![queries.len(), support.len()])
    }

    /// Scores an episode and builds the loss `−mean log p(true class)`.
    pub fn forward_episode(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &EpisodeBatch<T>,
        mode: Mode,
    ) -> Result<EpisodeForward<T>> {
        let n_support = batch.support_count();
        let total = batch.images.shape()[0];
        if total != n_support + batch.query_labels.len() || batch.query_labels.is_empty() {
            return Err(Error::Data(format!(
                "episode batch has {total} images, expected {} support + {} queries",
                n_support,
                batch.query_labels.len()
            )));
        }
        let images = g.constant(batch.images.clone())?;
        let (feats, stats) = self.embed(g, store, images, mode)?;
        let support: Vec<Vec<Var>> = feats[..n_support].chunks(batch.shot).map(<[Var]>::to_vec).collect();
        let distances = self.distances(g, store, &support, &feats[n_support..])?;
        let logits = g.scale(distances, -T::one())?;
        let loss = g.softmax_cross_entropy(logits, &batch.query_labels)?;
        Ok(EpisodeForward {
            distances,
            loss,
            stats,
        })
    }
}

fn flatten<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let n = g.value(v).numel();
    g.reshape(v, vec![n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HfcrConfig {
        HfcrConfig {
            encoder: EncoderConfig {
                blocks: 2,
                channels: 4,
                input_side: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn scoring_modes() {
        let mut cfg = small();
        assert_eq!(cfg.scoring_mode(), ScoringMode::Full);
        cfg.hffp = false;
        assert_eq!(cfg.scoring_mode(), ScoringMode::HfrpOnly);
        cfg.hfrp = false;
        assert_eq!(cfg.scoring_mode(), ScoringMode::ProtoNet);
    }

    #[test]
    fn both_branches_off_is_rejected_unless_protonet() {
        let mut cfg = small();
        cfg.branches = Branches {
            channel: false,
            spatial: false,
        };
        assert!(cfg.validate().is_err());
        cfg.hffp = false;
        cfg.hfrp = false;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn ablated_branches_are_frozen() {
        let mut cfg = small();
        cfg.branches.channel = false;
        let (_, store) = HfcrModel::<f32>::new(cfg, 0).unwrap();
        assert!(!store.by_name("hfrp.ac_q").unwrap().requires_grad);
        assert!(!store.by_name("head.lambda1").unwrap().requires_grad);
        assert!(store.by_name("head.lambda2").unwrap().requires_grad);
        assert!(store.by_name("hffp.ws_v").unwrap().requires_grad);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = HfcrModel::<f32>::new(small(), 7).unwrap();
        let (_, b) = HfcrModel::<f32>::new(small(), 7).unwrap();
        let (_, c) = HfcrModel::<f32>::new(small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
