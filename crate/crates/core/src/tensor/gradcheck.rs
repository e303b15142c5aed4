//! Central finite-difference checks of analytic gradients (64-bit only).

use crate::error::{Error, Result};

use super::{Graph, ParamStore, Tensor, Var};

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |a − n| / (|a| + |n| + 1e-12) over all checked elements.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn observe(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = err;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.checked += 1;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::NotScalar(t.shape().to_vec()));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(y)
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_grad())?;
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe.clone())?;
        let y = f(&mut g, v)?;
        scalar_of(&g, y)
    };
    let mut report = GradCheckReport::empty();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.observe(i, analytic[i], (up - down) / (2.0 * eps));
    }
    Ok(report)
}

/// Gradient check over every trainable tensor in `store`, one report per
/// parameter name. `f` builds the scalar loss from the bound parameters.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    mut f: F,
    eps: f64,
) -> Result<Vec<(String, GradCheckReport)>>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    scalar_of(&g, y)?;
    let mut with_grads = store.clone();
    g.backward_into(y, &mut with_grads)?;

    let mut probe = store.clone();
    let mut reports = Vec::new();
    for (id, name, tensor) in store.iter() {
        if !tensor.requires_grad {
            continue;
        }
        let analytic = with_grads
            .get(id)
            .grad
            .clone()
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        let mut report = GradCheckReport::empty();
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let mut g = Graph::new();
            let v = f(&mut g, &probe)?;
            let up = scalar_of(&g, v)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let mut g = Graph::new();
            let v = f(&mut g, &probe)?;
            let down = scalar_of(&g, v)?;
            probe.get_mut(id).data_mut()[i] = orig;
            report.observe(i, analytic[i], (up - down) / (2.0 * eps));
        }
        reports.push((name.to_string(), report));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let r = grad_check(|g, x| g.sum_squares(x), &x, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![2], vec![0.3, 0.7]).unwrap();
        let r = grad_check(
            |g, _x| g.constant(Tensor::scalar(4.0)),
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.analytic, 0.0);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, x| g.sum_squares(x), &x, 1e-2).is_err());
        assert!(grad_check(|g, x| g.sum_squares(x), &x, 1e-8).is_err());
    }
}
