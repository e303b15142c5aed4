//! SGD with Nesterov momentum and a step learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone)]
pub struct SgdNesterov<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> SgdNesterov<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update of every trainable parameter from its stored gradient:
    ///
    /// ```text
    /// d = g + wd·θ
    /// v ← μ·v + d
    /// θ ← θ − lr·(d + μ·v)
    /// ```
    ///
    /// Fails without touching any parameter if a gradient is missing.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) -> Result<()> {
        for (_, name, t) in store.iter() {
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
            if let Some(g) = &t.grad {
                if g.len() != t.numel() {
                    return Err(Error::MissingGradient(format!("{name} (gradient length {})", g.len())));
                }
            }
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let grad = t.grad.take().expect("checked above");
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((theta, &g), vi) in t.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                let d = g + wd * *theta;
                *vi = mu * *vi + d;
                *theta = *theta - lr * (d + mu * *vi);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }

    pub fn velocity(&self, index: usize) -> Option<&[T]> {
        self.velocity.get(index).and_then(|v| v.as_deref())
    }
}

/// Rescales the gradients of all trainable parameters so that their joint L2 norm is at most
/// `max_norm`. Returns the norm before rescaling.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|(_, _, t)| t.requires_grad)
        .filter_map(|(_, _, t)| t.grad.as_ref())
        .flat_map(|g| g.iter().map(|x| x.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    norm
}

/// `lr0 / factor^⌊epoch / period⌋`; no period means a constant rate.
pub fn lr_at_epoch(lr0: f64, factor: f64, period: Option<usize>, epoch: usize) -> f64 {
    match period {
        Some(p) if p > 0 => lr0 / factor.powi((epoch / p) as i32),
        _ => lr0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(theta: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(theta)).unwrap();
        s.get_mut(id).grad = Some(vec![g]);
        s
    }

    #[test]
    fn clipping_rescales_the_joint_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::scalar(0.0)).unwrap();
        let b = s.add("b", Tensor::scalar(0.0)).unwrap();
        s.get_mut(a).grad = Some(vec![3.0]);
        s.get_mut(b).grad = Some(vec![4.0]);
        assert_eq!(clip_grad_norm(&mut s, 10.0), 5.0);
        assert_eq!(s.get(b).grad, Some(vec![4.0]));
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.get(a).grad.as_ref().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((s.get(b).grad.as_ref().unwrap()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn hand_stepped_update() {
        let mut s = one(1.0, 1.0);
        let mut opt = SgdNesterov::new(0.9, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.by_name("w").unwrap().item() - 0.81).abs() < 1e-12);
        assert_eq!(opt.velocity(0), Some(&[1.0][..]));
    }

    #[test]
    fn vanilla_limit() {
        let mut s = one(2.0, 0.5);
        SgdNesterov::new(0.0, 0.0).step(&mut s, 0.1).unwrap();
        assert!((s.by_name("w").unwrap().item() - 1.95).abs() < 1e-12);
    }

    #[test]
    fn coasting_on_zero_gradient() {
        let mut s = one(1.0, 1.0);
        let mut opt = SgdNesterov::new(0.9, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        let before = s.by_name("w").unwrap().item();
        s.get_mut(s.id("w").unwrap()).grad = Some(vec![0.0]);
        opt.step(&mut s, 0.1).unwrap();
        let v = opt.velocity(0).unwrap()[0];
        assert!((v - 0.9).abs() < 1e-12);
        let moved = before - s.by_name("w").unwrap().item();
        assert!((moved - 0.1 * 0.9 * v).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        let err = SgdNesterov::new(0.9, 0.0).step(&mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "w"));
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at_epoch(0.1, 10.0, Some(400), 0), 0.1);
        assert!((lr_at_epoch(0.1, 10.0, Some(400), 400) - 0.01).abs() < 1e-15);
        assert!((lr_at_epoch(0.1, 10.0, Some(400), 800) - 0.001).abs() < 1e-15);
        assert_eq!(lr_at_epoch(0.1, 10.0, None, 100_000), 0.1);
    }
}
