use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn store_with(name: &str, shape: &[usize], data: Vec<f64>) -> (ParamStore, ParamId) {
    let mut s = ParamStore::new();
    let id = s.add(name, Tensor::new(shape.to_vec(), data).unwrap());
    (s, id)
}

fn random_store(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, sh)| s.add_normal(format!("p{i}"), sh, 0.8, rng))
        .collect();
    (s, ids)
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0)).unwrap();
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn softmax_of_equal_inputs_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(vec![0.0; 3])).unwrap();
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn matmul_hand_example() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
    let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_primitive_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(NumericsError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn overflow_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(1000.0)).unwrap();
    assert!(matches!(g.exp(x), Err(NumericsError::NonFinite { op: "exp" })));
    let z = g.constant(Tensor::scalar(0.0)).unwrap();
    assert!(matches!(g.log(z), Err(NumericsError::NonFinite { .. })));
}

#[test]
fn derivative_of_square_at_three() {
    let (mut s, id) = store_with("x", &[], vec![3.0]);
    let mut g = Graph::new();
    let x = g.param(&s, id).unwrap();
    let y = g.mul(x, x).unwrap();
    g.backward(y, &mut s).unwrap();
    assert_eq!(s.grad(id).item(), 6.0);
}

#[test]
fn derivative_of_sigmoid_at_zero() {
    let (mut s, id) = store_with("x", &[], vec![0.0]);
    let mut g = Graph::new();
    let x = g.param(&s, id).unwrap();
    let y = g.sigmoid(x).unwrap();
    g.backward(y, &mut s).unwrap();
    assert_eq!(s.grad(id).item(), 0.25);
}

#[test]
fn softmax_cross_entropy_gradient_at_uniform_logits() {
    // Frozen from central finite differences (step 1e-5) of
    // -log softmax(z)[0] at z = 0, V = 4: [-0.75, 0.25, 0.25, 0.25].
    let expected = [-0.75, 0.25, 0.25, 0.25];
    let (mut s, id) = store_with("z", &[1, 4], vec![0.0; 4]);
    let mut g = Graph::new();
    let z = g.param(&s, id).unwrap();
    let lp = g.log_softmax(z).unwrap();
    let p = g.pick(lp, &[0]).unwrap();
    let nll = g.sum(p).unwrap();
    let loss = g.scale(nll, -1.0).unwrap();
    g.backward(loss, &mut s).unwrap();
    for (a, e) in s.grad(id).data().iter().zip(expected) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }

    // The oracle itself, recomputed here.
    let f = |z: &[f64]| {
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - z[0]
    };
    for (j, e) in expected.iter().enumerate() {
        let mut zp = [0.0; 4];
        let mut zm = [0.0; 4];
        zp[j] = 1e-5;
        zm[j] = -1e-5;
        let fd = (f(&zp) - f(&zm)) / 2e-5;
        assert!((fd - e).abs() < 1e-9);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let (mut s, id) = store_with("x", &[1, 2], vec![1.0, 2.0]);
    let mut g = Graph::new();
    let x = g.param(&s, id).unwrap();
    assert!(matches!(
        g.backward(x, &mut s),
        Err(NumericsError::NonScalarLoss { .. })
    ));
}

#[test]
fn foreign_var_is_rejected() {
    let mut g1 = Graph::new();
    let mut g2 = Graph::new();
    let a = g1.constant(Tensor::scalar(1.0)).unwrap();
    let _ = g1.constant(Tensor::scalar(2.0)).unwrap();
    let b = g1.add(a, a).unwrap();
    assert!(matches!(g2.tanh(b), Err(NumericsError::UnknownVar(_))));
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut s = ParamStore::new();
    let used = s.add("used", Tensor::scalar(2.0));
    let unused = s.add("unused", Tensor::scalar(5.0));
    s.get_mut(unused).grad = Tensor::scalar(9.0);
    let mut g = Graph::new();
    let x = g.param(&s, used).unwrap();
    let y = g.tanh(x).unwrap();
    g.backward(y, &mut s).unwrap();
    assert_eq!(s.grad(unused).item(), 0.0);
}

#[test]
fn quadratic_grad_check_passes_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut s, ids) = random_store(&mut rng, &[&[3, 2]]);
    let report = grad_check(
        &mut s,
        |g, st| -> Result<Var, NumericsError> {
            let x = g.param(st, ids[0])?;
            let sq = g.mul(x, x)?;
            let y = g.affine(sq, 0.5, 1.0)?;
            g.sum(y)
        },
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

type Builder = fn(&mut Graph, &ParamStore, &[ParamId]) -> Result<Var, NumericsError>;

fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var, NumericsError> {
    // Non-uniform upstream gradient so that softmax-like ops are exercised.
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 5) as f64) - 1.7).collect()).unwrap();
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let b = g.param(s, p[1])?;
            let c = g.matmul(a, b)?;
            weighted_sum(g, c)
        }),
        ("transpose", vec![vec![3, 2]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let t = g.transpose(a)?;
            weighted_sum(g, t)
        }),
        ("add_sub_mul_div", vec![vec![2, 3], vec![2, 3]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let b = g.param(s, p[1])?;
            let e = g.exp(b)?;
            let x = g.add(a, b)?;
            let y = g.sub(x, a)?;
            let z = g.mul(y, a)?;
            let q = g.div(z, e)?;
            weighted_sum(g, q)
        }),
        ("row_broadcast", vec![vec![3, 4], vec![4], vec![1, 4]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let r = g.param(s, p[1])?;
            let m = g.param(s, p[2])?;
            let x = g.add_row(a, r)?;
            let y = g.mul_row(x, m)?;
            weighted_sum(g, y)
        }),
        ("affine_one_minus", vec![vec![2, 2]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let x = g.affine(a, 1.3, -0.2)?;
            let y = g.one_minus(x)?;
            let z = g.mul(y, y)?;
            weighted_sum(g, z)
        }),
        ("tanh", vec![vec![2, 3]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.tanh(a)?;
            weighted_sum(g, y)
        }),
        ("sigmoid", vec![vec![2, 3]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.sigmoid(a)?;
            weighted_sum(g, y)
        }),
        ("relu", vec![vec![2, 3]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.relu(a)?;
            weighted_sum(g, y)
        }),
        ("elu", vec![vec![2, 3]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.elu(a)?;
            weighted_sum(g, y)
        }),
        ("exp_log_abs", vec![vec![2, 3]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let e = g.exp(a)?;
            let l = g.log(e)?;
            let b = g.abs(l)?;
            weighted_sum(g, b)
        }),
        ("softplus", vec![vec![2, 3]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.softplus(a)?;
            weighted_sum(g, y)
        }),
        ("softmax", vec![vec![3, 5]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.softmax(a)?;
            weighted_sum(g, y)
        }),
        ("log_softmax", vec![vec![3, 5]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.log_softmax(a)?;
            weighted_sum(g, y)
        }),
        ("layer_norm", vec![vec![3, 6]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.layer_norm(a, 1e-5)?;
            weighted_sum(g, y)
        }),
        ("sum_cols_mean", vec![vec![3, 4]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let c = g.sum_cols(a)?;
            let t = g.tanh(c)?;
            g.mean(t)
        }),
        ("gather_rows", vec![vec![4, 3]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.gather_rows(a, &[2, 0, 2, 3])?;
            weighted_sum(g, y)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let b = g.param(s, p[1])?;
            let y = g.concat(a, b)?;
            weighted_sum(g, y)
        }),
        ("pick", vec![vec![3, 4]], |g, s, p| {
            let a = g.param(s, p[0])?;
            let y = g.pick(a, &[1, 3, 0])?;
            weighted_sum(g, y)
        }),
        ("attention", vec![vec![6, 4], vec![8, 4], vec![8, 4]], |g, s, p| {
            let q = g.param(s, p[0])?;
            let k = g.param(s, p[1])?;
            let v = g.param(s, p[2])?;
            let spec = AttentionSpec {
                batch: 2,
                heads: 2,
                q_len: 3,
                k_len: 4,
                key_mask: vec![true, true, true, false, true, true, false, false],
                causal: false,
            };
            let y = g.attention(q, k, v, spec)?;
            weighted_sum(g, y)
        }),
        ("causal_attention", vec![vec![8, 4], vec![8, 4], vec![8, 4]], |g, s, p| {
            let q = g.param(s, p[0])?;
            let k = g.param(s, p[1])?;
            let v = g.param(s, p[2])?;
            let spec = AttentionSpec {
                batch: 2,
                heads: 2,
                q_len: 4,
                k_len: 4,
                key_mask: vec![true, true, true, true, true, true, true, false],
                causal: true,
            };
            let y = g.attention(q, k, v, spec)?;
            weighted_sum(g, y)
        }),
    ]
}

#[test]
fn every_primitive_matches_finite_differences_on_five_seeds() {
    for (name, shapes, build) in primitive_cases() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            let (mut s, ids) = random_store(&mut rng, &shapes);
            let report = grad_check(&mut s, |g, st| build(g, st, &ids), 1e-5, 1e-4).unwrap();
            assert!(report.passed, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_on_wide_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(row)).unwrap();
        let y = g.softmax(x).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() <= 1e-12, "{s}");
    }
}

#[test]
fn softmax_rejects_empty_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 0])).unwrap();
    assert!(matches!(g.softmax(x), Err(NumericsError::EmptySoftmax { .. })));
}

#[test]
fn causal_attention_ignores_future_positions_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (6, 8);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()
    };
    let q = draw(&mut rng);
    let k = draw(&mut rng);
    let v = draw(&mut rng);
    let run = |q: &[f64], k: &[f64], v: &[f64]| {
        let mut g = Graph::new();
        let qv = g.constant(Tensor::new(vec![n, d], q.to_vec()).unwrap()).unwrap();
        let kv = g.constant(Tensor::new(vec![n, d], k.to_vec()).unwrap()).unwrap();
        let vv = g.constant(Tensor::new(vec![n, d], v.to_vec()).unwrap()).unwrap();
        let spec = AttentionSpec {
            batch: 1,
            heads: 2,
            q_len: n,
            k_len: n,
            key_mask: vec![true; n],
            causal: true,
        };
        let o = g.attention(qv, kv, vv, spec).unwrap();
        g.value(o).clone()
    };
    let base = run(&q, &k, &v);
    for j in 0..n {
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for idx in (j + 1) * d..n * d {
            q2[idx] += 3.0;
            k2[idx] -= 1.5;
            v2[idx] *= -4.0;
        }
        let edited = run(&q2, &k2, &v2);
        assert_eq!(base.data()[..(j + 1) * d], edited.data()[..(j + 1) * d]);
    }
}

#[test]
fn repeated_backward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut s, ids) = random_store(&mut rng, &[&[5, 7], &[7, 3]]);
    let run = |s: &mut ParamStore| {
        let mut g = Graph::new();
        let a = g.param(s, ids[0]).unwrap();
        let b = g.param(s, ids[1]).unwrap();
        let c = g.matmul(a, b).unwrap();
        let l = g.log_softmax(c).unwrap();
        let t = g.sum(l).unwrap();
        g.backward(t, s).unwrap();
        (s.grad(ids[0]).clone(), s.grad(ids[1]).clone())
    };
    assert_eq!(run(&mut s), run(&mut s));
}
