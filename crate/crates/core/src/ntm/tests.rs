use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check;

fn cfg(v: usize, h: usize, t: usize, k: usize) -> NtmConfig {
    NtmConfig::new(v, h, t, k)
}

fn model(config: NtmConfig, seed: u64) -> (Ntm, ParamStore) {
    let mut store = ParamStore::new();
    let ntm = Ntm::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (ntm, store)
}

fn set(store: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.find(name).unwrap_or_else(|| panic!("{name}"));
    for (i, v) in store.value_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn random_bow(rng: &mut ChaCha8Rng, b: usize, v: usize) -> Tensor {
    let data = (0..b * v).map(|_| f64::from(rng.random_range(0..4u32))).collect();
    Tensor::new(vec![b, v], data).unwrap()
}

/// Runs the flow chain on a single point, returning `(z_K, Σ log|det|)`.
fn flow_point(store: &ParamStore, layers: &[PlanarFlowLayer], z: &[f64]) -> (Vec<f64>, f64) {
    let mut g = Graph::new();
    let z0 = g.constant(Tensor::row_vector(z.to_vec())).unwrap();
    let (zk, ld) = apply_flow(&mut g, store, layers, z0).unwrap();
    (g.value(zk).data().to_vec(), g.value(ld).item())
}

fn random_flow(rng: &mut ChaCha8Rng, d: usize, k: usize, std: f64) -> (ParamStore, Vec<PlanarFlowLayer>) {
    let mut store = ParamStore::new();
    let layers: Vec<_> = (0..k)
        .map(|i| PlanarFlowLayer::new(&mut store, &format!("f{i}"), d, rng))
        .collect();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    (store, layers)
}

/// `log|det A|` by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let pivot = a[c][c];
        acc += pivot.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / pivot;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

#[test]
fn zero_weights_give_bias_heads() {
    let (ntm, mut store) = model(cfg(6, 4, 3, 0), 1);
    for name in ["ntm.encoder.weight", "ntm.mu.weight", "ntm.log_sigma.weight"] {
        set(&mut store, name, |_| 0.0);
    }
    set(&mut store, "ntm.mu.bias", |i| i as f64 + 0.5);
    set(&mut store, "ntm.log_sigma.bias", |i| -(i as f64));
    let mut g = Graph::new();
    let x = g.constant(random_bow(&mut ChaCha8Rng::seed_from_u64(2), 2, 6)).unwrap();
    let (mu, ls) = ntm.encode_bow(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(mu), &[2, 3]);
    assert_eq!(g.shape(ls), &[2, 3]);
    assert_eq!(g.value(mu).row(1), &[0.5, 1.5, 2.5]);
    assert_eq!(g.value(ls).row(0), &[0.0, -1.0, -2.0]);
}

#[test]
fn encode_rejects_wrong_dimension() {
    let (ntm, store) = model(cfg(6, 4, 3, 0), 1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 5])).unwrap();
    assert!(ntm.encode_bow(&mut g, &store, x).is_err());
}

#[test]
fn mu_norm_gradient_matches_finite_differences() {
    let (ntm, mut store) = model(cfg(7, 5, 3, 0), 3);
    let x = random_bow(&mut ChaCha8Rng::seed_from_u64(4), 3, 7);
    let report = grad_check(
        &mut store,
        |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let xv = g.constant(x.clone())?;
            let (mu, _) = ntm.encode_bow(g, s, xv)?;
            let sq = g.mul(mu, mu)?;
            Ok(g.sum(sq)?)
        },
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn sample_latent_examples() {
    let mut g = Graph::new();
    let mu = g.constant(Tensor::row_vector(vec![0.3, -1.2])).unwrap();
    let ls = g.constant(Tensor::row_vector(vec![0.7, 0.0])).unwrap();
    let zero = g.constant(Tensor::zeros(&[1, 2])).unwrap();
    let z = Ntm::sample_latent(&mut g, mu, ls, zero).unwrap();
    assert_eq!(g.value(z).data(), &[0.3, -1.2]);

    let ls0 = g.constant(Tensor::zeros(&[1, 2])).unwrap();
    let eps = g.constant(Tensor::row_vector(vec![0.25, 2.0])).unwrap();
    let z = Ntm::sample_latent(&mut g, mu, ls0, eps).unwrap();
    assert_eq!(g.value(z).data(), &[0.3 + 0.25, -1.2 + 2.0]);
}

#[test]
fn sample_latent_monte_carlo_mean() {
    let (ntm, _) = model(cfg(3, 2, 3, 0), 0);
    let n = 10_000;
    let mu = [0.4, -2.0, 1.5];
    let log_sigma = [0.0, 0.5, -1.0];
    let noise = ntm.draw_noise(n, &mut ChaCha8Rng::seed_from_u64(11));
    let mut g = Graph::new();
    let m = g.constant(Tensor::new(vec![n, 3], mu.repeat(n)).unwrap()).unwrap();
    let l = g.constant(Tensor::new(vec![n, 3], log_sigma.repeat(n)).unwrap()).unwrap();
    let e = g.constant(noise).unwrap();
    let z = Ntm::sample_latent(&mut g, m, l, e).unwrap();
    for j in 0..3 {
        let mean = (0..n).map(|i| g.value(z).at(i, j)).sum::<f64>() / n as f64;
        let bound = 3.0 * log_sigma[j].exp() / (n as f64).sqrt();
        assert!((mean - mu[j]).abs() <= bound, "coord {j}: {mean} vs {}", mu[j]);
    }
}

#[test]
fn zero_u_flow_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut store, layers) = random_flow(&mut rng, 4, 3, 0.7);
    for l in &layers {
        store.value_mut(l.u).data_mut().fill(0.0);
    }
    let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (zk, ld) = flow_point(&store, &layers, &z);
    assert_eq!(zk, z);
    assert_eq!(ld, 0.0);
}

#[test]
fn single_layer_log_two() {
    let mut store = ParamStore::new();
    let layer = PlanarFlowLayer {
        u: store.add_full("u", &[1, 1], 1.0),
        w: store.add_full("w", &[1, 1], 1.0),
        b: store.add_zeros("b", &[1, 1]),
    };
    let (z1, ld) = flow_point(&store, &[layer], &[0.0]);
    assert_eq!(z1, vec![0.0]);
    assert!((ld - 2f64.ln()).abs() < 1e-15);
    assert!((ld - 0.693147).abs() < 1e-6);

    let h = 1e-6;
    let (plus, _) = flow_point(&store, &[layer], &[h]);
    let (minus, _) = flow_point(&store, &[layer], &[-h]);
    let fd = (plus[0] - minus[0]) / (2.0 * h);
    assert!((fd.ln() - ld).abs() < 1e-8);
}

#[test]
fn u_hat_keeps_invertibility_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..200 {
        let (mut store, layers) = random_flow(&mut rng, 5, 1, 1.5);
        if trial % 2 == 0 {
            let w = store.value(layers[0].w).clone();
            *store.value_mut(layers[0].u) = w.map(|v| -3.0 * v);
        }
        let mut g = Graph::new();
        let (uh, w) = layers[0].u_hat(&mut g, &store).unwrap();
        let dot: f64 = g.value(uh).data().iter().zip(g.value(w).data()).map(|(a, b)| a * b).sum();
        assert!(dot >= -1.0 - 1e-12, "trial {trial}: ûᵀw = {dot}");
    }
}

#[test]
fn log_det_matches_numeric_jacobian() {
    let (d, k, h) = (8, 4, 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let (store, layers) = random_flow(&mut rng, d, k, 0.6);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, analytic) = flow_point(&store, &layers, &z);
        let mut jac = vec![vec![0.0; d]; d];
        for j in 0..d {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let (fp, _) = flow_point(&store, &layers, &zp);
            let (fm, _) = flow_point(&store, &layers, &zm);
            for i in 0..d {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let numeric = log_abs_det(jac);
        assert!(
            (analytic - numeric).abs() <= 1e-6,
            "trial {trial}: {analytic} vs {numeric}"
        );
    }
}

/// Inverts one planar layer by bisection on `α = wᵀz`.
fn invert_layer(u_hat: &[f64], w: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    let uw: f64 = u_hat.iter().zip(w).map(|(a, b)| a * b).sum();
    let wy: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
    let g = |a: f64| a + uw * (a + b).tanh() - wy;
    let span = uw.abs() + 1.0;
    let (mut lo, mut hi) = (wy - span, wy + span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (0.5 * (lo + hi) + b).tanh();
    y.iter().zip(u_hat).map(|(yi, ui)| yi - ui * t).collect()
}

#[test]
fn planar_layer_is_injective() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..1000 {
        let (mut store, layers) = random_flow(&mut rng, d, 1, 1.0);
        if trial % 3 == 0 {
            let w = store.value(layers[0].w).clone();
            *store.value_mut(layers[0].u) = w.map(|v| -5.0 * v);
        }
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (fa, _) = flow_point(&store, &layers, &a);
        let mut g = Graph::new();
        let (uh, w) = layers[0].u_hat(&mut g, &store).unwrap();
        let b = store.value(layers[0].b).item();
        let back = invert_layer(g.value(uh).data(), g.value(w).data(), b, &fa);
        let dist = a.iter().zip(&back).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist <= 1e-9, "trial {trial}: {dist}");
    }
}

#[test]
fn theta_lies_on_simplex_and_is_shift_invariant() {
    let (ntm, mut store) = model(cfg(9, 6, 5, 2), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_bow(&mut rng, 16, 9);
    let noise = ntm.draw_noise(16, &mut rng);
    let mut g = Graph::new();
    let out = ntm.forward(&mut g, &store, &x, &noise).unwrap();
    for i in 0..16 {
        let row = g.value(out.theta).row(i);
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    set(&mut store, "ntm.theta.weight", |_| 0.0);
    set(&mut store, "ntm.theta.bias", |_| 0.0);
    let mut g = Graph::new();
    let z = g.constant(Tensor::row_vector(vec![0.3; 5])).unwrap();
    let theta = ntm.topic_mixture(&mut g, &store, z).unwrap();
    for &p in g.value(theta).data() {
        assert!((p - 0.2).abs() < 1e-15);
    }

    let mut g = Graph::new();
    let a = g.constant(Tensor::row_vector(vec![0.1, 2.0, -1.0])).unwrap();
    let b = g.constant(Tensor::row_vector(vec![3.1, 5.0, 2.0])).unwrap();
    let sa = g.softmax(a).unwrap();
    let sb = g.softmax(b).unwrap();
    assert_eq!(g.value(sa).data(), g.value(sb).data());
}

#[test]
fn reconstruction_examples() {
    let (ntm, mut store) = model(cfg(3, 2, 2, 0), 12);
    set(&mut store, "ntm.phi.weight", |_| 0.0);
    let mut g = Graph::new();
    let theta = g.constant(Tensor::row_vector(vec![0.6, 0.4])).unwrap();
    let lp = ntm.reconstruct_log_probs(&mut g, &store, theta).unwrap();
    assert_eq!(g.shape(lp), &[1, 3]);
    for &v in g.value(lp).data() {
        assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    set(&mut store, "ntm.phi.weight", |i| [1.0, 0.0, -1.0, 0.5, 2.0, 0.0][i]);
    set(&mut store, "ntm.phi.bias", |i| [0.0, 0.1, 0.2][i]);
    let mut g = Graph::new();
    let theta = g.constant(Tensor::row_vector(vec![0.6, 0.4])).unwrap();
    let lp = ntm.reconstruct_log_probs(&mut g, &store, theta).unwrap();
    let logits = [0.6 * 1.0 + 0.4 * 0.5, 0.6 * 0.0 + 0.4 * 2.0 + 0.1, -0.6 + 0.2];
    let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
    let x = [2.0, 0.0, 3.0];
    let oracle: f64 = x.iter().zip(&logits).map(|(c, l)| c * (l - z.ln())).sum();
    let got: f64 = x.iter().zip(g.value(lp).data()).map(|(c, l)| c * l).sum();
    assert!((got - oracle).abs() < 1e-12);
    let total: f64 = g.value(lp).data().iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

fn zero_encoder(store: &mut ParamStore) {
    for name in [
        "ntm.encoder.weight",
        "ntm.mu.weight",
        "ntm.mu.bias",
        "ntm.log_sigma.weight",
        "ntm.log_sigma.bias",
    ] {
        set(store, name, |_| 0.0);
    }
}

#[test]
fn elbo_at_the_mode_is_the_reconstruction_term() {
    let (ntm, mut store) = model(cfg(6, 4, 3, 0), 13);
    zero_encoder(&mut store);
    let x = random_bow(&mut ChaCha8Rng::seed_from_u64(14), 2, 6);
    let mut g = Graph::new();
    let out = ntm.forward(&mut g, &store, &x, &Tensor::zeros(&[2, 3])).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let lp = ntm.reconstruct_log_probs(&mut g, &store, out.theta).unwrap();
    let w = g.mul(xv, lp).unwrap();
    let ll = g.sum_cols(w).unwrap();
    for i in 0..2 {
        assert!((g.value(out.elbo).at(i, 0) - g.value(ll).at(i, 0)).abs() < 1e-12);
    }
}

#[test]
fn empty_document_keeps_only_latent_terms() {
    let (ntm, store) = model(cfg(6, 4, 3, 2), 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let noise = ntm.draw_noise(1, &mut rng);
    let mut g = Graph::new();
    let out = ntm.forward(&mut g, &store, &Tensor::zeros(&[1, 6]), &noise).unwrap();
    let s = out.sample;
    let lq = gaussian_log_density(&mut g, s.z0, Some((s.mu, s.log_sigma)), 3.0).unwrap();
    let lp = gaussian_log_density(&mut g, s.zk, None, 3.0).unwrap();
    let expected = g.value(lp).item() - g.value(lq).item() + g.value(s.sum_log_det).item();
    assert!((g.value(out.elbo).item() - expected).abs() < 1e-12);
}

#[test]
fn gaussian_density_matches_closed_form() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::row_vector(vec![0.5, -1.0])).unwrap();
    let mu = g.constant(Tensor::row_vector(vec![0.0, 1.0])).unwrap();
    let ls = g.constant(Tensor::row_vector(vec![0.0, 2f64.ln()])).unwrap();
    let v = gaussian_log_density(&mut g, z, Some((mu, ls)), 2.0).unwrap();
    let pdf = |x: f64, m: f64, s: f64| {
        (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    };
    let oracle = (pdf(0.5, 0.0, 1.0) * pdf(-1.0, 1.0, 2.0)).ln();
    assert!((g.value(v).item() - oracle).abs() < 1e-12);
}

#[test]
fn monte_carlo_kl_matches_analytic() {
    let d = 16;
    let n = 10_000;
    let (ntm, _) = model(cfg(2, 2, d, 0), 0);
    let noise = ntm.draw_noise(n, &mut ChaCha8Rng::seed_from_u64(17));
    let mut g = Graph::new();
    let mu = g.constant(Tensor::full(&[n, d], 0.5)).unwrap();
    let ls = g.constant(Tensor::zeros(&[n, d])).unwrap();
    let e = g.constant(noise).unwrap();
    let z0 = Ntm::sample_latent(&mut g, mu, ls, e).unwrap();
    let lq = gaussian_log_density(&mut g, z0, Some((mu, ls)), d as f64).unwrap();
    let lp = gaussian_log_density(&mut g, z0, None, d as f64).unwrap();
    let diff = g.sub(lp, lq).unwrap();
    let est = g.value(diff).data().iter().sum::<f64>() / n as f64;
    let analytic = -(d as f64) * 0.125;
    assert!(((est - analytic) / analytic).abs() <= 0.02, "{est} vs {analytic}");
}

#[test]
fn zero_u_elbo_equals_flowless_elbo_bitwise() {
    let (with_flow, mut s1) = model(cfg(8, 5, 4, 3), 18);
    for l in &with_flow.flows {
        s1.value_mut(l.u).data_mut().fill(0.0);
    }
    let mut s0 = ParamStore::new();
    let mut ids = Vec::new();
    for (_, p) in s1.iter() {
        if !p.name.contains(".flow.") {
            ids.push(s0.add(p.name.clone(), p.value.clone()));
        }
    }
    let without = Ntm::from_store(cfg(8, 5, 4, 0), &s0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random_bow(&mut rng, 5, 8);
    let noise = with_flow.draw_noise(5, &mut rng);
    let mut g1 = Graph::new();
    let a = with_flow.forward(&mut g1, &s1, &x, &noise).unwrap();
    let mut g0 = Graph::new();
    let b = without.forward(&mut g0, &s0, &x, &noise).unwrap();
    let bits = |g: &Graph, v| g.value(v).data().iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&g1, a.elbo), bits(&g0, b.elbo));
    assert_eq!(bits(&g1, a.sample.zk), bits(&g1, a.sample.z0));
}

#[test]
fn full_elbo_passes_grad_check() {
    let (ntm, mut store) = model(cfg(12, 6, 4, 2), 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_bow(&mut rng, 3, 12);
    let noise = ntm.draw_noise(3, &mut rng);
    let report = grad_check(
        &mut store,
        |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let out = ntm.forward(g, s, &x, &noise)?;
            Ok(g.sum(out.elbo)?)
        },
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn from_store_rejects_bad_shapes() {
    let (_, store) = model(cfg(6, 4, 3, 1), 22);
    assert!(Ntm::from_store(cfg(6, 4, 3, 1), &store).is_ok());
    assert!(Ntm::from_store(cfg(7, 4, 3, 1), &store).is_err());
    assert!(Ntm::from_store(cfg(6, 4, 3, 2), &store).is_err());
}

fn bow_vocab(words: &[&str]) -> BowVocabulary {
    BowVocabulary::from_words(words, BTreeSet::new()).unwrap()
}

#[test]
fn top_words_examples() {
    let vocab = bow_vocab(&["tea", "cup", "ball", "goal"]);
    let phi = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![0.5, 0.5, 0.9, 0.5]]);
    let top = top_words(&phi, &vocab, 1).unwrap();
    assert_eq!(top[0].top_words, vec!["cup"]);
    let full = top_words(&phi, &vocab, 4).unwrap();
    assert_eq!(full[1].top_words, vec!["ball", "cup", "goal", "tea"]);
    assert_eq!(full[1].weights, vec![0.9, 0.5, 0.5, 0.5]);
    let mut sorted = full[0].top_words.clone();
    sorted.sort();
    assert_eq!(sorted, vec!["ball", "cup", "goal", "tea"]);
    assert!(top_words(&phi, &vocab, 0).is_err());
    assert!(top_words(&phi, &vocab, 5).is_err());
}

#[test]
fn topic_word_distributions_are_normalized() {
    let (ntm, store) = model(cfg(10, 4, 3, 1), 23);
    for row in ntm.topic_word_distributions(&store) {
        assert_eq!(row.len(), 10);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
