use hfcr::tensor::{grad_check, Graph, ParamStore, Tensor, Var};
use hfcr::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Scalar probe `mean(v ⊙ w)` with fixed random `w`, so every output element
/// carries a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> hfcr::Result<Var> {
    let w = g.constant(random(g.shape(v), seed))?;
    let p = g.mul(v, w)?;
    g.mean(p)
}

fn assert_gc(name: &str, x: &Tensor<f64>, f: impl FnMut(&mut Graph<f64>, Var) -> hfcr::Result<Var>) {
    let r = grad_check(f, x, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap()).unwrap();
    let b = g.constant(Tensor::from_rows(&[vec![5., 6.], vec![7., 8.]]).unwrap()).unwrap();
    let eye = g.constant(Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap()).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19., 22., 43., 50.]);
    let ai = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(ai).data(), g.value(a).data());

    let z = g.constant(Tensor::zeros(vec![3, 4]).unwrap()).unwrap();
    let any = g.constant(random(&[4, 2], 3)).unwrap();
    let zc = g.matmul(z, any).unwrap();
    assert_eq!(g.shape(zc), &[3, 2]);
    assert!(g.value(zc).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
    let b = g.constant(Tensor::zeros(vec![4, 2]).unwrap()).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    for v in [-50.0, 0.0, 3.7, 800.0] {
        let x = g.constant(Tensor::scalar(v)).unwrap();
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
    }

    let x = g.constant(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
    let y = g.softmax_lastdim(x).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, f32::NAN]).unwrap());
    // the leaf itself is rejected as non-finite
    assert!(matches!(x, Err(Error::NonFinite { .. })));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap().with_grad()).unwrap();
    let l = g.sum_squares(x).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 6.0]);

    // loss independent of a trainable parameter -> zero gradient
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let q = store.add("q", Tensor::scalar(3.0)).unwrap();
    let mut g = Graph::new();
    let _pv = g.param(&store, p).unwrap();
    let qv = g.param(&store, q).unwrap();
    let l = g.sum_squares(qv).unwrap();
    g.backward_into(l, &mut store).unwrap();
    assert_eq!(store.get(p).grad.as_deref(), Some(&[0.0, 0.0][..]));
    assert_eq!(store.get(q).grad.as_deref(), Some(&[6.0][..]));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let z = [0.3, -1.2, 2.0, 0.5];
    let t = 2;
    let mut g = Graph::<f64>::new();
    let zv = g.leaf(Tensor::new(vec![1, 4], z.to_vec()).unwrap().with_grad()).unwrap();
    let l = g.softmax_cross_entropy(zv, &[t]).unwrap();
    let grads = g.backward(l).unwrap();
    let total: f64 = z.iter().map(|v| v.exp()).sum();
    for (i, &gi) in grads.get(zv).unwrap().iter().enumerate() {
        let expected = z[i].exp() / total - if i == t { 1.0 } else { 0.0 };
        assert!((gi - expected).abs() < 1e-12);
    }
    assert_gc("xent", &Tensor::new(vec![1, 4], z.to_vec()).unwrap(), |g, x| {
        g.softmax_cross_entropy(x, &[t])
    });
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(2.0).with_grad()).unwrap();
    let l = g.sum_squares(x).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::BackwardTwice)));
}

#[test]
fn non_scalar_and_detached_losses_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random(&[2, 2], 1).with_grad()).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));

    let mut other = Graph::<f64>::new();
    let y = other.leaf(Tensor::scalar(1.0).with_grad()).unwrap();
    let l = other.sum_squares(y).unwrap();
    assert!(matches!(g.backward(l), Err(Error::Detached)));
}

#[test]
fn repeated_use_accumulates() {
    // l = sum((x ⊙ x) + x) -> dl/dx = 2x + 1
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![2], vec![0.5, -3.0]).unwrap().with_grad()).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.add(sq, x).unwrap();
    let l = g.mean(s).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[(2.0 * 0.5 + 1.0) / 2.0, (2.0 * -3.0 + 1.0) / 2.0]);

    // one parameter bound twice is one variable
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::scalar(2.0)).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, p).unwrap();
    let b = g.param(&store, p).unwrap();
    assert_eq!(a, b);
    let prod = g.mul(a, b).unwrap();
    let l = g.mean(prod).unwrap();
    g.backward_into(l, &mut store).unwrap();
    assert_eq!(store.get(p).grad.as_deref(), Some(&[4.0][..]));
}

#[test]
fn every_op_passes_gradient_check() {
    let m = random(&[3, 4], 10);
    assert_gc("matmul lhs", &m, |g, x| {
        let b = g.constant(random(&[4, 2], 11))?;
        let y = g.matmul(x, b)?;
        probe(g, y, 12)
    });
    assert_gc("matmul rhs", &m, |g, x| {
        let a = g.constant(random(&[2, 3], 13))?;
        let y = g.matmul(a, x)?;
        probe(g, y, 14)
    });
    assert_gc("transpose", &m, |g, x| {
        let y = g.transpose(x)?;
        probe(g, y, 15)
    });
    assert_gc("reshape", &m, |g, x| {
        let y = g.reshape(x, vec![2, 6])?;
        probe(g, y, 16)
    });
    for axis in 0..2 {
        assert_gc("concat", &m, |g, x| {
            let other = g.constant(random(&[3, 4], 17))?;
            let y = g.concat(&[other, x, x], axis)?;
            probe(g, y, 18)
        });
    }
    assert_gc("narrow", &m, |g, x| {
        let y = g.narrow(x, 1, 2)?;
        probe(g, y, 19)
    });
    assert_gc("add/sub/mul", &m, |g, x| {
        let c = g.constant(random(&[3, 4], 20))?;
        let a = g.add(x, c)?;
        let s = g.sub(c, x)?;
        let p = g.mul(a, s)?;
        probe(g, p, 21)
    });
    assert_gc("scale", &m, |g, x| {
        let y = g.scale(x, -2.5)?;
        probe(g, y, 22)
    });
    assert_gc("relu", &m, |g, x| {
        let y = g.relu(x)?;
        probe(g, y, 23)
    });
    assert_gc("exp", &m, |g, x| {
        let y = g.exp(x)?;
        probe(g, y, 24)
    });
    assert_gc("softmax", &m, |g, x| {
        let y = g.softmax_lastdim(x)?;
        probe(g, y, 25)
    });
    assert_gc("mean", &m, |g, x| g.mean(x));
    assert_gc("sum_squares", &m, |g, x| g.sum_squares(x));
    assert_gc("add_row matrix", &m, |g, x| {
        let v = g.constant(random(&[4], 26))?;
        let y = g.add_row(x, v)?;
        probe(g, y, 27)
    });
    assert_gc("add_row vector", &random(&[4], 28), |g, v| {
        let x = g.constant(random(&[3, 4], 29))?;
        let y = g.add_row(x, v)?;
        probe(g, y, 30)
    });
    assert_gc("cross entropy", &m, |g, x| g.softmax_cross_entropy(x, &[0, 3, 1]));

    let img = random(&[2, 3, 4, 4], 31);
    assert_gc("conv2d input", &img, |g, x| {
        let w = g.constant(random(&[5, 3, 3, 3], 32))?;
        let y = g.conv2d(x, w)?;
        probe(g, y, 33)
    });
    assert_gc("conv2d weight", &random(&[5, 3, 3, 3], 34), |g, w| {
        let x = g.constant(img.clone())?;
        let y = g.conv2d(x, w)?;
        probe(g, y, 35)
    });
    assert_gc("max_pool2", &img, |g, x| {
        let y = g.max_pool2(x)?;
        probe(g, y, 36)
    });
    assert_gc("batch_norm train", &img, |g, x| {
        let gamma = g.constant(random(&[3], 37))?;
        let beta = g.constant(random(&[3], 38))?;
        let (y, _) = g.batch_norm_train(x, gamma, beta)?;
        probe(g, y, 39)
    });
    assert_gc("batch_norm train gamma", &random(&[3], 40), |g, gamma| {
        let x = g.constant(img.clone())?;
        let beta = g.constant(random(&[3], 41))?;
        let (y, _) = g.batch_norm_train(x, gamma, beta)?;
        probe(g, y, 42)
    });
    assert_gc("batch_norm train beta", &random(&[3], 43), |g, beta| {
        let x = g.constant(img.clone())?;
        let gamma = g.constant(random(&[3], 44))?;
        let (y, _) = g.batch_norm_train(x, gamma, beta)?;
        probe(g, y, 45)
    });
    assert_gc("batch_norm eval", &img, |g, x| {
        let gamma = g.constant(random(&[3], 46))?;
        let beta = g.constant(random(&[3], 47))?;
        let y = g.batch_norm_eval(x, gamma, beta, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])?;
        probe(g, y, 48)
    });
}

#[test]
fn conv_preserves_spatial_extent() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![2, 3, 7, 5]).unwrap()).unwrap();
    let w = g.constant(Tensor::zeros(vec![4, 3, 3, 3]).unwrap()).unwrap();
    let y = g.conv2d(x, w).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 7, 5]);
    let p = g.max_pool2(y).unwrap();
    assert_eq!(g.shape(p), &[2, 4, 3, 2]);
}

#[test]
fn only_row_broadcast_is_allowed() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![3, 4]).unwrap()).unwrap();
    let v = g.constant(Tensor::zeros(vec![3]).unwrap()).unwrap();
    assert!(g.add_row(x, v).is_err());
    assert!(g.add(x, v).is_err());
}

fn chain_product<T: hfcr::tensor::Scalar>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, left: bool) -> Tensor<T> {
    let mut g = Graph::<T>::new();
    let (a, b, c) = (
        g.constant(a.clone()).unwrap(),
        g.constant(b.clone()).unwrap(),
        g.constant(c.clone()).unwrap(),
    );
    let out = if left {
        let ab = g.matmul(a, b).unwrap();
        g.matmul(ab, c).unwrap()
    } else {
        let bc = g.matmul(b, c).unwrap();
        g.matmul(a, bc).unwrap()
    };
    g.value(out).clone()
}

proptest! {
    #[test]
    fn matmul_is_associative(m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6, seed in 0u64..1000) {
        let (a, b, c) = (random(&[m, k], seed), random(&[k, n], seed + 1), random(&[n, p], seed + 2));
        let l = chain_product(&a, &b, &c, true);
        let r = chain_product(&a, &b, &c, false);
        prop_assert!(l.max_abs_diff(&r).unwrap() < 1e-10);
        let (a, b, c) = (a.cast::<f32>(), b.cast::<f32>(), c.cast::<f32>());
        let l = chain_product(&a, &b, &c, true);
        let r = chain_product(&a, &b, &c, false);
        prop_assert!(l.max_abs_diff(&r).unwrap() < 1e-4);
    }

    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(rows in 1usize..5, cols in 1usize..8, shift in -50.0f32..50.0, seed in 0u64..1000) {
        let x = random(&[rows, cols], seed).cast::<f32>();
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 4.0 + shift).collect()).unwrap();
        let base = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 4.0).collect()).unwrap();
        let mut g = Graph::<f32>::new();
        let (a, b) = (g.constant(base).unwrap(), g.constant(shifted).unwrap());
        let (ya, yb) = (g.softmax_lastdim(a).unwrap(), g.softmax_lastdim(b).unwrap());
        for row in g.value(ya).data().chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        prop_assert!(g.value(ya).max_abs_diff(g.value(yb)).unwrap() < 1e-6);
    }
}
