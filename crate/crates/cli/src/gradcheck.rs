//! Finite-difference check of the whole pipeline on a tiny episode.

use hfcr::encoder::{EncoderConfig, Mode};
use hfcr::model::{EpisodeBatch, HfcrConfig, HfcrModel};
use hfcr::tensor::{grad_check_params, GradCheckReport, Tensor};
use hfcr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WAY: usize = 2;
pub const SHOT: usize = 2;
pub const QUERIES: usize = 1;

/// Two conv blocks of width 4 on 8×8 inputs give d = 4 and h = w = 2;
/// fusion in parallel, all four reconstructions, raw distances.
pub fn suite_config() -> HfcrConfig {
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

pub fn suite_episode(seed: u64) -> Result<EpisodeBatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = WAY * SHOT + WAY * QUERIES;
    let images = Tensor::from_fn(vec![n, 3, 8, 8], |_| rng.gen_range(0.0..1.0))?;
    Ok(EpisodeBatch {
        images,
        way: WAY,
        shot: SHOT,
        query_labels: (0..WAY).flat_map(|c| std::iter::repeat(c).take(QUERIES)).collect(),
    })
}

/// Per-parameter reports for the episode loss in train mode.
pub fn run_suite(eps: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let (model, store) = HfcrModel::<f64>::new(suite_config(), seed)?;
    let batch = suite_episode(seed.wrapping_add(1))?;
    grad_check_params(
        &store,
        |g, s| Ok(model.forward_episode(g, s, &batch, Mode::Train)?.loss),
        eps,
    )
}
