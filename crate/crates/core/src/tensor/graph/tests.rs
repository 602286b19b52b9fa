use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = numel(shape);
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .unwrap()
        .with_requires_grad(true)
}

/// Analytic gradients of `build` against central differences on every
/// input element; returns the worst norm-relative error over the inputs.
fn grad_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let weights_seed = 99;
    let scalarize = |g: &mut Graph<f64>, out: Var| -> Var {
        let n = g.value(out).len();
        let mut r = ChaCha8Rng::seed_from_u64(weights_seed);
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = g.mul_const(out, w).unwrap();
        g.sum(y).unwrap()
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        let loss = scalarize(&mut g, out);
        g.scalar(loss).unwrap()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = scalarize(&mut g, out);
    let grads = g.gradients(loss).unwrap();

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn check_op(name: &str, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    for trial in 0..20 {
        let (inputs, build) = make(&mut rng);
        let err = grad_error(&inputs, build.as_ref());
        assert!(err <= 1e-4, "{name} trial {trial}: relative error {err:e}");
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

#[test]
fn gradcheck_matmul() {
    check_op("matmul", |rng| {
        let (m, k, n) = dims(rng);
        let tb = rng.gen_bool(0.5);
        let b_shape = if tb { vec![n, k] } else { vec![k, n] };
        (vec![random(rng, &[m, k]), random(rng, &b_shape)], Box::new(move |g, v| g.matmul(v[0], v[1], tb)))
    });
}

#[test]
fn gradcheck_elementwise() {
    check_op("add", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, &[m, n]), random(rng, &[m, n])], Box::new(|g, v| g.add(v[0], v[1])))
    });
    check_op("add_row", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, &[m, n]), random(rng, &[n])], Box::new(|g, v| g.add_row(v[0], v[1])))
    });
    check_op("mul", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, &[m, n]), random(rng, &[m, n])], Box::new(|g, v| g.mul(v[0], v[1])))
    });
    check_op("mul_const", |rng| {
        let (m, n, _) = dims(rng);
        let c: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (vec![random(rng, &[m, n])], Box::new(move |g, v| g.mul_const(v[0], c.clone())))
    });
    check_op("scale", |rng| {
        let (m, n, _) = dims(rng);
        let s = rng.gen_range(-3.0..3.0);
        (vec![random(rng, &[m, n])], Box::new(move |g, v| g.scale(v[0], s)))
    });
    check_op("gelu", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, &[m, n])], Box::new(|g, v| g.gelu(v[0])))
    });
}

#[test]
fn gradcheck_gathers_and_slices() {
    check_op("gather_rows", |rng| {
        let (r, c, n) = dims(rng);
        let idx: Vec<usize> = (0..n + 2).map(|_| rng.gen_range(0..r)).collect();
        (vec![random(rng, &[r, c])], Box::new(move |g, v| g.gather_rows(v[0], &idx)))
    });
    check_op("gather_elems", |rng| {
        let (r, c, n) = dims(rng);
        let idx: Vec<usize> = (0..n + 2).map(|_| rng.gen_range(0..r * c)).collect();
        (vec![random(rng, &[r, c])], Box::new(move |g, v| g.gather_elems(v[0], &idx)))
    });
    check_op("slice_concat_rows", |rng| {
        let (r, c, _) = dims(rng);
        let start = rng.gen_range(0..r);
        let len = rng.gen_range(1..=r - start);
        (
            vec![random(rng, &[r, c]), random(rng, &[2, c])],
            Box::new(move |g, v| {
                let s = g.slice_rows(v[0], start, len)?;
                g.concat_rows(&[v[1], s, v[0]])
            }),
        )
    });
    check_op("slice_concat_cols", |rng| {
        let (r, c, _) = dims(rng);
        let start = rng.gen_range(0..c);
        let len = rng.gen_range(1..=c - start);
        (
            vec![random(rng, &[r, c]), random(rng, &[r, 3])],
            Box::new(move |g, v| {
                let s = g.slice_cols(v[0], start, len)?;
                g.concat_cols(&[s, v[1], v[0]])
            }),
        )
    });
    check_op("reshape", |rng| {
        let (r, c, _) = dims(rng);
        (vec![random(rng, &[r, c])], Box::new(move |g, v| g.reshape(v[0], vec![r * c])))
    });
}

#[test]
fn gradcheck_normalizations() {
    check_op("softmax_masked", |rng| {
        let (m, n, _) = dims(rng);
        let n = n + 1;
        let mask: Vec<f64> = (0..m * n)
            .map(|i| if i % n != 0 && rng.gen_bool(0.4) { MASK_NEG } else { 0.0 })
            .collect();
        (vec![random(rng, &[m, n])], Box::new(move |g, v| g.softmax_masked(v[0], Some(&mask))))
    });
    check_op("log_softmax", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, &[m, n])], Box::new(|g, v| g.log_softmax(v[0])))
    });
    check_op("cross_entropy", |rng| {
        let (m, n, _) = dims(rng);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        (vec![random(rng, &[m, n])], Box::new(move |g, v| g.cross_entropy(v[0], &labels)))
    });
    check_op("layer_norm", |rng| {
        let (m, n, _) = dims(rng);
        let n = n + 1;
        (
            vec![random(rng, &[m, n]), random(rng, &[n]), random(rng, &[n])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        )
    });
}

#[test]
fn gradcheck_reductions() {
    check_op("max_pool_rows", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, &[m, n])], Box::new(|g, v| g.max_pool_rows(v[0])))
    });
    check_op("sum", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, &[m, n])], Box::new(|g, v| g.sum(v[0])))
    });
    check_op("mean", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, &[m, n])], Box::new(|g, v| g.mean(v[0])))
    });
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.constant(&Tensor::new(vec![2], vec![3.7, 0.0]).unwrap()).unwrap();
    let y = g.softmax_masked(x, Some(&[0.0, MASK_NEG])).unwrap();
    assert_eq!(g.value(y), &[1.0, 0.0]);
}

#[test]
fn max_pool_example_and_tie_rule() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::from_rows(&[vec![1.0, -2.0], vec![0.0, 3.0]]).unwrap().with_requires_grad(true)).unwrap();
    let y = g.max_pool_rows(x).unwrap();
    assert_eq!(g.value(y), &[1.0, 3.0]);

    let t = g.leaf(&Tensor::from_rows(&[vec![2.0], vec![2.0], vec![1.0]]).unwrap().with_requires_grad(true)).unwrap();
    let y = g.max_pool_rows(t).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.gradients(s).unwrap();
    assert_eq!(grads.get(t).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn square_derivative() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::scalar(3.0).with_requires_grad(true)).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.gradients(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let z = vec![0.3, -1.2, 2.0, 0.5];
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::new(vec![1, 4], z.clone()).unwrap().with_requires_grad(true)).unwrap();
    let loss = g.cross_entropy(x, &[2]).unwrap();
    let grads = g.gradients(loss).unwrap();
    let p = softmax_vec(&z);
    for (i, (&gv, &pv)) in grads.get(x).unwrap().iter().zip(&p).enumerate() {
        let want = pv - if i == 2 { 1.0 } else { 0.0 };
        assert!((gv - want).abs() < 1e-12);
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::zeros(vec![2]).with_requires_grad(true)).unwrap();
    assert!(matches!(g.gradients(x), Err(Error::Usage(_))));
}

#[test]
fn shape_errors_report_offending_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(&Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.constant(&Tensor::zeros(vec![2, 3])).unwrap();
    let err = g.matmul(a, b, false).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn non_finite_values_are_numeric_faults() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(&Tensor::full(vec![2], 3e38f32)).unwrap();
    let err = g.scale(a, 10.0).unwrap_err();
    assert!(matches!(err, Error::Numeric { ref op } if op == "scale"));
}

#[test]
fn params_receive_gradients_and_are_bound_once() {
    let mut params = Params::<f64>::new();
    let id = params.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    params.zero_grad();
    let mut g = Graph::new();
    let w1 = g.param(&params, id).unwrap();
    let w2 = g.param(&params, id).unwrap();
    assert_eq!(w1, w2);
    let y = g.mul(w1, w2).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s, &mut params).unwrap();
    assert_eq!(params.get(id).grad.as_deref(), Some(&[2.0, 4.0][..]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(xs in prop::collection::vec(-30.0f32..30.0, 1..40)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::new(vec![xs.len()], xs).unwrap()).unwrap();
        let y = g.softmax(x).unwrap();
        let s: f32 = g.value(y).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn masking_matches_reduced_softmax(
        xs in prop::collection::vec(-10.0f64..10.0, 2..20),
        j in 0usize..20,
    ) {
        let j = j % xs.len();
        let mut mask = vec![0.0; xs.len()];
        mask[j] = MASK_NEG;
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::new(vec![xs.len()], xs.clone()).unwrap()).unwrap();
        let y = g.softmax_masked(x, Some(&mask)).unwrap();
        let mut reduced = xs.clone();
        reduced.remove(j);
        let want = softmax_vec(&reduced);
        let got = g.value(y);
        prop_assert_eq!(got[j], 0.0);
        let rest: Vec<f64> = got.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, &v)| v).collect();
        for (a, b) in rest.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic(xs in prop::collection::vec(-3.0f32..3.0, 12)) {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(&Tensor::new(vec![3, 4], xs.clone()).unwrap()).unwrap();
            let w = g.constant(&Tensor::new(vec![4, 4], xs[..4].repeat(4)).unwrap()).unwrap();
            let h = g.matmul(x, w, false).unwrap();
            let h = g.gelu(h).unwrap();
            let h = g.log_softmax(h).unwrap();
            g.value(h).to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
