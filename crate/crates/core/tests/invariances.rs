//! Symmetry properties of fusion, reconstruction and the metric head.

use hfcr::encoder::{EncoderConfig, Mode};
use hfcr::head::{bundle_errors, scores_from_matrix};
use hfcr::hffp::{Arrangement, Branches};
use hfcr::hfrp::reconstruct_all;
use hfcr::model::{EpisodeBatch, HfcrConfig, HfcrModel};
use hfcr::tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(arrangement: Arrangement) -> HfcrConfig {
    HfcrConfig {
        encoder: EncoderConfig {
            blocks: 2,
            channels: 6,
            input_side: 12,
            ..Default::default()
        },
        arrangement,
        ..Default::default()
    }
}

fn features(n: usize, d: usize, r: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    (0..n)
        .map(|_| Tensor::from_fn(vec![d, r], |_| rng.gen_range(-1.0..1.0)).unwrap())
        .collect()
}

/// All four errors for every (query, class) pair, `[query][class][branch]`.
fn errors(model: &HfcrModel<f64>, store: &ParamStore<f64>, support: &[Vec<Tensor<f64>>], queries: &[Tensor<f64>]) -> Vec<Vec<[f64; 4]>> {
    let mut g = Graph::new();
    let sv: Vec<Vec<Var>> = support
        .iter()
        .map(|s| s.iter().map(|t| g.constant(t.clone()).unwrap()).collect())
        .collect();
    let qv: Vec<Var> = queries.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let bundles = reconstruct_all(&mut g, store, model.hfrp_params(), Branches::default(), &sv, &qv).unwrap();
    bundles
        .iter()
        .map(|row| {
            row.iter()
                .map(|b| {
                    let e = bundle_errors(&mut g, b, model.head_params().options).unwrap();
                    e.map(|v| g.value(v.unwrap()).item())
                })
                .collect()
        })
        .collect()
}

fn distances(model: &HfcrModel<f64>, store: &ParamStore<f64>, support: &[Vec<Tensor<f64>>], queries: &[Tensor<f64>]) -> Tensor<f64> {
    let mut g = Graph::new();
    let sv: Vec<Vec<Var>> = support
        .iter()
        .map(|s| s.iter().map(|t| g.constant(t.clone()).unwrap()).collect())
        .collect();
    let qv: Vec<Var> = queries.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let d = model.distances(&mut g, store, &sv, &qv).unwrap();
    g.value(d).clone()
}

fn episode_features(seed: u64, way: usize, shot: usize) -> (Vec<Vec<Tensor<f64>>>, Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = (0..way).map(|_| features(shot, 6, 9, &mut rng)).collect();
    let queries = features(4, 6, 9, &mut rng);
    (support, queries)
}

#[test]
fn shot_order_does_not_change_any_error() {
    let (model, store) = HfcrModel::<f64>::new(config(Arrangement::Parallel), 1).unwrap();
    for seed in 0..5 {
        let (support, queries) = episode_features(seed, 3, 4);
        let base = errors(&model, &store, &support, &queries);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let shuffled: Vec<Vec<Tensor<f64>>> = support
            .iter()
            .map(|shots| {
                let order = rand::seq::index::sample(&mut rng, shots.len(), shots.len());
                order.iter().map(|i| shots[i].clone()).collect()
            })
            .collect();
        let perm = errors(&model, &store, &shuffled, &queries);
        for (a, b) in base.iter().flatten().zip(perm.iter().flatten()) {
            for j in 0..4 {
                assert!((a[j] - b[j]).abs() < 1e-6, "branch {j}: {} vs {}", a[j], b[j]);
            }
        }
    }
}

#[test]
fn relabeling_classes_permutes_probabilities_exactly() {
    let (model, store) = HfcrModel::<f64>::new(config(Arrangement::Parallel), 2).unwrap();
    let (support, queries) = episode_features(3, 5, 2);
    let perm = [3usize, 0, 4, 1, 2];
    let permuted: Vec<Vec<Tensor<f64>>> = perm.iter().map(|&i| support[i].clone()).collect();
    let a = scores_from_matrix(&distances(&model, &store, &support, &queries)).unwrap();
    let b = scores_from_matrix(&distances(&model, &store, &permuted, &queries)).unwrap();
    for (sa, sb) in a.iter().zip(&b) {
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(sb.probabilities[new].to_bits(), sa.probabilities[old].to_bits());
            assert_eq!(sb.distances[new].to_bits(), sa.distances[old].to_bits());
        }
        assert_eq!(perm[sb.predicted], sa.predicted);
    }
}

#[test]
fn prediction_ignores_temperature_and_global_weight_scale() {
    let (model, mut store) = HfcrModel::<f64>::new(config(Arrangement::Parallel), 4).unwrap();
    let (support, queries) = episode_features(6, 5, 1);
    let predict = |store: &ParamStore<f64>| -> Vec<usize> {
        scores_from_matrix(&distances(&model, store, &support, &queries))
            .unwrap()
            .iter()
            .map(|s| s.predicted)
            .collect()
    };
    let reference = predict(&store);
    let hp = model.head_params().clone();
    for tau in [0.1f64, 1.0, 10.0] {
        for scale in [0.5, 2.0] {
            let mut s = store.clone();
            s.get_mut(hp.log_tau).data_mut()[0] = tau.ln();
            for id in hp.lambdas {
                s.get_mut(id).data_mut()[0] *= scale;
            }
            assert_eq!(predict(&s), reference, "τ={tau} scale={scale}");
        }
    }
    // unequal weights change the metric but scaling them together still does not
    for (i, id) in hp.lambdas.iter().enumerate() {
        store.get_mut(*id).data_mut()[0] = 0.2 + 0.3 * i as f64;
    }
    let skewed = predict(&store);
    for id in hp.lambdas {
        store.get_mut(id).data_mut()[0] *= 2.0;
    }
    assert_eq!(predict(&store), skewed);
}

fn batch(seed: u64, side: usize) -> EpisodeBatch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (way, shot, q) = (3, 2, 2);
    let n = way * shot + way * q;
    EpisodeBatch {
        images: Tensor::from_fn(vec![n, 3, side, side], |_| rng.gen_range(0.0..1.0)).unwrap(),
        way,
        shot,
        query_labels: (0..way).flat_map(|c| [c; 2]).collect(),
    }
}

#[test]
fn every_attention_map_is_row_stochastic() {
    for arrangement in [Arrangement::Parallel, Arrangement::CfoThenSfo, Arrangement::SfoThenCfo] {
        for pos_enc_in_hfrp in [false, true] {
            let cfg = HfcrConfig {
                pos_enc_in_hfrp,
                ..config(arrangement)
            };
            let (model, store) = HfcrModel::<f32>::new(cfg, 5).unwrap();
            for mode in [Mode::Train, Mode::Eval] {
                let mut g = Graph::new();
                model.forward_episode(&mut g, &store, &batch(7, 12), mode).unwrap();
                let maps = g.softmax_outputs();
                // 12 fused images × 2 maps, plus 4 reconstructions per (query, class) pair
                assert!(maps.len() >= 12 * 2 + 6 * 3 * 4, "{} maps", maps.len());
                for m in maps {
                    let t = g.value(m);
                    let n = *t.shape().last().unwrap();
                    for row in t.data().chunks(n) {
                        let s: f32 = row.iter().sum();
                        assert!((s - 1.0).abs() <= 1e-6, "{}: row sums to {s}", arrangement.name());
                        assert!(row.iter().all(|&p| p >= 0.0));
                    }
                }
            }
        }
    }
}

#[test]
fn arrangements_give_different_features() {
    let mut outs = Vec::new();
    for arrangement in [Arrangement::Parallel, Arrangement::CfoThenSfo, Arrangement::SfoThenCfo] {
        let (model, store) = HfcrModel::<f64>::new(config(arrangement), 9).unwrap();
        let mut g = Graph::new();
        let f = g
            .constant(features(1, 6, 9, &mut ChaCha8Rng::seed_from_u64(1)).remove(0))
            .unwrap();
        let y = model.fuse_features(&mut g, &store, f).unwrap();
        outs.push(g.value(y).clone());
    }
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(outs[i].max_abs_diff(&outs[j]).unwrap() > 1e-3, "arrangements {i} and {j} agree");
        }
    }
}

#[test]
fn projections_are_shared_across_images_and_episode_sizes() {
    let (_, small) = HfcrModel::<f32>::new(config(Arrangement::Parallel), 0).unwrap();
    let names: Vec<&str> = small.iter().map(|(_, n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("hffp.")).count(), 6);
    assert_eq!(names.iter().filter(|n| n.starts_with("hfrp.")).count(), 6);
    assert_eq!(names.iter().filter(|n| n.starts_with("head.")).count(), 5);

    // the same image gets the same fused feature whatever else is in the batch
    let (model, store) = HfcrModel::<f32>::new(config(Arrangement::Parallel), 0).unwrap();
    let b = batch(3, 12);
    let embed = |images: &Tensor<f32>| {
        let mut g = Graph::new();
        let x = g.constant(images.clone()).unwrap();
        let (f, _) = model.embed(&mut g, &store, x, Mode::Eval).unwrap();
        f.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
    };
    let all = embed(&b.images);
    let n = 12 * 12 * 3;
    let last = Tensor::new(vec![1, 3, 12, 12], b.images.data()[11 * n..].to_vec()).unwrap();
    let alone = embed(&last);
    assert_eq!(alone[0], all[11]);
}

#[test]
fn projection_shapes_follow_feature_dims() {
    let (_, store) = HfcrModel::<f32>::new(config(Arrangement::Parallel), 0).unwrap();
    let ac = store.by_name("hfrp.ac_q").unwrap();
    let as_ = store.by_name("hfrp.as_q").unwrap();
    assert_eq!(ac.shape(), &[9, 9]);
    assert_eq!(as_.shape(), &[6, 6]);
}
