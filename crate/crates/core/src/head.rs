//! Reconstruction-error metric head, class probabilities, episode loss and
//! the prototype-distance fallback used when reconstruction is disabled.

use crate::error::{Error, Result};
use crate::hfrp::{Recon, ReconBundle};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const LAMBDA_INIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadOptions {
    /// Divide each reconstruction error by its element count.
    pub normalize_distances: bool,
    /// Pass the weights through `max(0, λ)` before use.
    pub clamp_lambdas: bool,
}

/// Four distance weights and the log-temperature.
#[derive(Debug, Clone)]
pub struct HeadParams {
    /// Order: channel query-recon, spatial query-recon, channel
    /// support-recon, spatial support-recon.
    pub lambdas: [ParamId; 4],
    pub log_tau: ParamId,
    pub options: HeadOptions,
}

impl HeadParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, options: HeadOptions) -> Result<Self> {
        let mut lambdas = [ParamId(0); 4];
        for (i, slot) in lambdas.iter_mut().enumerate() {
            *slot = store.add(format!("{prefix}.lambda{}", i + 1), Tensor::scalar(T::from_f64_lossy(LAMBDA_INIT)))?;
        }
        let log_tau = store.add(format!("{prefix}.log_tau"), Tensor::scalar(T::zero()))?;
        Ok(Self {
            lambdas,
            log_tau,
            options,
        })
    }

    pub fn tau<T: Scalar>(&self, store: &ParamStore<T>) -> T {
        store.get(self.log_tau).item().exp()
    }
}

/// Squared Euclidean norm of `recon − target`.
pub fn recon_error<T: Scalar>(g: &mut Graph<T>, recon: Var, target: Var) -> Result<Var> {
    let diff = g.sub(recon, target)?;
    g.sum_squares(diff)
}

fn branch_error<T: Scalar>(g: &mut Graph<T>, r: &Recon, normalize: bool) -> Result<Var> {
    let e = recon_error(g, r.reconstructed, r.target)?;
    if normalize {
        let n = g.value(r.target).numel();
        g.scale(e, T::one() / T::from_usize(n).expect("count fits"))
    } else {
        Ok(e)
    }
}

/// The four reconstruction errors of one (query, class) pair, ordered as
/// [`HeadParams::lambdas`]; absent branches are `None`.
pub fn bundle_errors<T: Scalar>(g: &mut Graph<T>, b: &ReconBundle, opts: HeadOptions) -> Result<[Option<Var>; 4]> {
    let mut out = [None; 4];
    for (slot, r) in out.iter_mut().zip([&b.q_hat_c, &b.q_hat_s, &b.s_hat_c, &b.s_hat_s]) {
        if let Some(r) = r {
            *slot = Some(branch_error(g, r, opts.normalize_distances)?);
        }
    }
    Ok(out)
}

/// `τ · Σ λ_j d_j` over the present errors.
pub fn total_distance<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    hp: &HeadParams,
    errors: &[Option<Var>; 4],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (&lid, e) in hp.lambdas.iter().zip(errors) {
        let Some(e) = *e else { continue };
        let mut lambda = g.param(store, lid)?;
        if hp.options.clamp_lambdas {
            lambda = g.relu(lambda)?;
        }
        let term = g.mul(lambda, e)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let sum = acc.ok_or_else(|| Error::Config("no reconstruction errors to combine".into()))?;
    let log_tau = g.param(store, hp.log_tau)?;
    let tau = g.exp(log_tau)?;
    g.mul(tau, sum)
}

/// Scalar form of [`total_distance`] for plain numbers.
pub fn weighted_distance<T: Scalar>(errors: [T; 4], lambdas: [T; 4], tau: T) -> Result<T> {
    if errors.iter().any(|&e| e < T::zero()) {
        return Err(Error::Data("reconstruction errors must be non-negative".into()));
    }
    let s = errors
        .iter()
        .zip(&lambdas)
        .fold(T::zero(), |acc, (&e, &l)| acc + l * e);
    Ok(tau * s)
}

/// `p_n = exp(−d_n) / Σ_m exp(−d_m)`, max-shift stabilized.
pub fn class_probabilities<T: Scalar>(distances: &[T]) -> Result<Vec<T>> {
    if distances.len() < 2 {
        return Err(Error::Data(format!("need at least two classes, got {}", distances.len())));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite { op: "class_probabilities" });
    }
    let min = distances.iter().copied().fold(T::infinity(), T::min);
    let e: Vec<T> = distances.iter().map(|&d| (min - d).exp()).collect();
    // summed in sorted order so relabeling classes permutes the output exactly
    let mut sorted = e.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let z: T = sorted.into_iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Mean negative log-probability of the true classes.
pub fn episode_loss<T: Scalar>(probs: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Data("one label per probability vector required".into()));
    }
    let mut total = T::zero();
    for (p, &y) in probs.iter().zip(labels) {
        let s: T = p.iter().copied().sum();
        if (s - T::one()).abs() > T::from_f64_lossy(1e-6) {
            return Err(Error::Data(format!("probabilities sum to {s}, not 1")));
        }
        let py = *p
            .get(y)
            .ok_or_else(|| Error::Data(format!("label {y} out of range")))?;
        if py <= T::zero() {
            return Err(Error::Data("true-class probability must be positive".into()));
        }
        total = total - py.ln();
    }
    Ok(total / T::from_usize(probs.len()).expect("count fits"))
}

/// Per-query scores over the episode's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores<T> {
    pub distances: Vec<T>,
    pub probabilities: Vec<T>,
    pub predicted: usize,
}

impl<T: Scalar> ClassScores<T> {
    pub fn from_distances(distances: Vec<T>) -> Result<Self> {
        let probabilities = class_probabilities(&distances)?;
        // first minimum, matching the first maximum of the probabilities
        let predicted = distances
            .iter()
            .enumerate()
            .fold(0, |best, (i, &d)| if d < distances[best] { i } else { best });
        Ok(Self {
            distances,
            probabilities,
            predicted,
        })
    }
}

/// Splits a distance matrix (queries × classes) into per-query scores.
pub fn scores_from_matrix<T: Scalar>(distances: &Tensor<T>) -> Result<Vec<ClassScores<T>>> {
    let n = distances.shape()[distances.rank() - 1];
    distances
        .data()
        .chunks(n)
        .map(|row| ClassScores::from_distances(row.to_vec()))
        .collect()
}

/// Squared Euclidean distances from each query to each class prototype (the
/// mean of its support features), as a queries × classes matrix.
pub fn protonet_distances<T: Scalar>(g: &mut Graph<T>, support: &[Vec<Var>], queries: &[Var]) -> Result<Var> {
    if support.is_empty() || support.iter().any(Vec::is_empty) {
        return Err(Error::Data("prototype needs at least one support feature per class".into()));
    }
    let mut prototypes = Vec::with_capacity(support.len());
    for shots in support {
        let mut acc = shots[0];
        for &s in &shots[1..] {
            acc = g.add(acc, s)?;
        }
        let inv = T::one() / T::from_usize(shots.len()).expect("count fits");
        prototypes.push(g.scale(acc, inv)?);
    }
    let mut cells = Vec::with_capacity(queries.len() * prototypes.len());
    for &q in queries {
        for &p in &prototypes {
            cells.push(recon_error(g, q, p)?);
        }
    }
    let flat = g.concat(&cells, 0)?;
    g.reshape(flat, vec![queries.len(), prototypes.len()])
}

/// Standalone prototype classifier over plain feature tensors.
pub fn protonet_score<T: Scalar>(support: &[Vec<Tensor<T>>], queries: &[Tensor<T>]) -> Result<Vec<ClassScores<T>>> {
    let mut g = Graph::new();
    let sv = support
        .iter()
        .map(|shots| shots.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let qv = queries
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let d = protonet_distances(&mut g, &sv, &qv)?;
    scores_from_matrix(g.value(d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_distance_examples() {
        assert_eq!(weighted_distance([1.0, 2.0, 3.0, 4.0], [0.0; 4], 1.0).unwrap(), 0.0);
        assert_eq!(weighted_distance([1.0, 2.0, 3.0, 4.0], [0.5; 4], 1.0).unwrap(), 5.0);
        assert_eq!(weighted_distance([1.0, 2.0, 3.0, 4.0], [0.5; 4], 2.0).unwrap(), 10.0);
        assert!(weighted_distance([-1.0, 2.0, 3.0, 4.0], [0.5; 4], 1.0).is_err());
    }

    #[test]
    fn probability_examples() {
        let p = class_probabilities(&[2.0f64; 5]).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let p = class_probabilities(&[0.0f64, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        assert!(class_probabilities(&[1.0f64]).is_err());
        assert!(class_probabilities(&[1.0f64, f64::INFINITY]).is_err());
    }

    #[test]
    fn loss_examples() {
        let sure = vec![vec![1.0f64, 0.0], vec![0.0, 1.0]];
        assert_eq!(episode_loss(&sure, &[0, 1]).unwrap(), 0.0);
        let uniform = vec![vec![0.2f64; 5]; 3];
        assert!((episode_loss(&uniform, &[0, 3, 4]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(episode_loss(&sure, &[1, 1]).is_err());
    }

    #[test]
    fn loss_is_mean_of_per_query_losses() {
        let probs = vec![vec![0.7f64, 0.2, 0.1], vec![0.3, 0.3, 0.4], vec![0.05, 0.9, 0.05]];
        let labels = [0, 2, 1];
        let batch = episode_loss(&probs, &labels).unwrap();
        let single: f64 = probs
            .iter()
            .zip(&labels)
            .map(|(p, &l)| episode_loss(std::slice::from_ref(p), &[l]).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((batch - single).abs() < 1e-15);
    }

    #[test]
    fn recon_error_examples() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        let t = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        let e = recon_error(&mut g, r, t).unwrap();
        assert_eq!(g.value(e).item(), 5.0);
        let same = recon_error(&mut g, r, r).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let c = g.constant(Tensor::from_rows(&[vec![3.0, -7.0]]).unwrap()).unwrap();
        let (rc, tc) = (g.add(r, c).unwrap(), g.add(t, c).unwrap());
        let shifted = recon_error(&mut g, rc, tc).unwrap();
        assert_eq!(g.value(shifted).item(), 5.0);
        let wrong = g.constant(Tensor::zeros(vec![2, 1]).unwrap()).unwrap();
        assert!(recon_error(&mut g, r, wrong).is_err());
    }

    #[test]
    fn protonet_examples() {
        let f = |v: Vec<f64>| Tensor::new(vec![v.len()], v).unwrap();
        // K = 1: prototype is the support feature itself
        let s = vec![vec![f(vec![1.0, 0.0])], vec![f(vec![0.0, 1.0])]];
        let scores = protonet_score(&s, &[f(vec![1.0, 0.0])]).unwrap();
        assert_eq!(scores[0].distances, vec![0.0, 2.0]);
        let p = &scores[0].probabilities;
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        assert_eq!(scores[0].predicted, 0);

        let far = vec![vec![f(vec![0.0, 0.0])], vec![f(vec![4.0, 0.0])]];
        let scores = protonet_score(&far, &[f(vec![0.0, 0.0])]).unwrap();
        assert!(scores[0].probabilities[0] > 0.99);

        let empty: Vec<Vec<Tensor<f64>>> = vec![vec![], vec![f(vec![1.0, 1.0])]];
        assert!(protonet_score(&empty, &[f(vec![0.0, 0.0])]).is_err());
    }
}
