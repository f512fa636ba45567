//! Flow-based neural topic model.
//!
//! ```text
//! x_bow ─tanh MLP─▶ π ─▶ (μ, log σ) ─reparam─▶ z_0 ─planar flow─▶ z_K
//!   z_K ─ReLU affine─▶ softmax ─▶ θ ─affine (φ)─▶ log softmax ─▶ log p(w)
//! ```
//!
//! The objective per document is
//! `−log q(z_0) + Σ log|det ∂f_i/∂z_{i−1}| + log p(x | z_K) + log p(z_K)`
//! with `q = N(μ, diag σ²)` and a standard-normal prior on `z_K`.

mod flow;

pub use flow::{apply_flow, PlanarFlowLayer, MIN_JACOBIAN};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::BowVocabulary;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NtmConfig {
    /// `V_bow`
    pub vocab_size: usize,
    /// `h_ntm`
    pub hidden: usize,
    /// `d_z`
    pub latent_dim: usize,
    /// `T`
    pub topics: usize,
    /// `K`; zero means no flow.
    pub flow_length: usize,
}

impl NtmConfig {
    /// Latent dimension equal to the topic count.
    pub fn new(vocab_size: usize, hidden: usize, topics: usize, flow_length: usize) -> Self {
        Self {
            vocab_size,
            hidden,
            latent_dim: topics,
            topics,
            flow_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.latent_dim == 0 || self.topics == 0 {
            return Err(Error::Config(format!("all NTM dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// How θ is produced when no training noise is wanted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThetaMode {
    /// `z_0 = μ`.
    #[default]
    Mean,
    /// One reparameterized draw.
    Sample,
}

/// Parameter handles of the topic model.
#[derive(Debug, Clone)]
pub struct Ntm {
    pub config: NtmConfig,
    enc_w: ParamId,
    enc_b: ParamId,
    mu_w: ParamId,
    mu_b: ParamId,
    ls_w: ParamId,
    ls_b: ParamId,
    pub flows: Vec<PlanarFlowLayer>,
    theta_w: ParamId,
    theta_b: ParamId,
    /// Topic-word matrix `[T, V_bow]`.
    pub phi: ParamId,
    pub phi_b: ParamId,
}

/// Graph handles for one reparameterized pass through encoder and flow.
#[derive(Debug, Clone, Copy)]
pub struct LatentSample {
    pub z0: Var,
    pub zk: Var,
    pub mu: Var,
    pub log_sigma: Var,
    /// `[B, 1]`
    pub sum_log_det: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NtmForward {
    pub sample: LatentSample,
    /// `[B, T]`
    pub theta: Var,
    /// Per-document ELBO, `[B, 1]`.
    pub elbo: Var,
}

const PREFIX: &str = "ntm";

impl Ntm {
    pub fn new<R: Rng + ?Sized>(config: NtmConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let NtmConfig {
            vocab_size: v,
            hidden: h,
            latent_dim: d,
            topics: t,
            flow_length: k,
        } = config;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let enc_w = store.add_normal(format!("{PREFIX}.encoder.weight"), &[v, h], fan(v), rng);
        let enc_b = store.add_zeros(format!("{PREFIX}.encoder.bias"), &[h]);
        let mu_w = store.add_normal(format!("{PREFIX}.mu.weight"), &[h, d], fan(h), rng);
        let mu_b = store.add_zeros(format!("{PREFIX}.mu.bias"), &[d]);
        let ls_w = store.add_normal(format!("{PREFIX}.log_sigma.weight"), &[h, d], 0.1 * fan(h), rng);
        let ls_b = store.add_zeros(format!("{PREFIX}.log_sigma.bias"), &[d]);
        let flows = (0..k)
            .map(|i| PlanarFlowLayer::new(store, &format!("{PREFIX}.flow.{i}"), d, rng))
            .collect();
        let theta_w = store.add_normal(format!("{PREFIX}.theta.weight"), &[d, t], fan(d), rng);
        let theta_b = store.add_zeros(format!("{PREFIX}.theta.bias"), &[t]);
        let phi = store.add_normal(format!("{PREFIX}.phi.weight"), &[t, v], fan(t), rng);
        let phi_b = store.add_zeros(format!("{PREFIX}.phi.bias"), &[v]);
        Ok(Self {
            config,
            enc_w,
            enc_b,
            mu_w,
            mu_b,
            ls_w,
            ls_b,
            flows,
            theta_w,
            theta_b,
            phi,
            phi_b,
        })
    }

    /// Re-binds handles to tensors already present in `store` (e.g. loaded
    /// from a checkpoint), checking every shape against `config`.
    pub fn from_store(config: NtmConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let NtmConfig {
            vocab_size: v,
            hidden: h,
            latent_dim: d,
            topics: t,
            ..
        } = config;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let full = format!("{PREFIX}.{name}");
            let id = store
                .find(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            if store.value(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{full}: expected shape {shape:?}, found {:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let flows = (0..config.flow_length)
            .map(|i| PlanarFlowLayer::lookup(store, &format!("{PREFIX}.flow.{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            enc_w: get("encoder.weight", &[v, h])?,
            enc_b: get("encoder.bias", &[h])?,
            mu_w: get("mu.weight", &[h, d])?,
            mu_b: get("mu.bias", &[d])?,
            ls_w: get("log_sigma.weight", &[h, d])?,
            ls_b: get("log_sigma.bias", &[d])?,
            flows,
            theta_w: get("theta.weight", &[d, t])?,
            theta_b: get("theta.bias", &[t])?,
            phi: get("phi.weight", &[t, v])?,
            phi_b: get("phi.bias", &[v])?,
        })
    }

    /// Every parameter owned by the topic model.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.enc_w, self.enc_b, self.mu_w, self.mu_b, self.ls_w, self.ls_b,
        ];
        for f in &self.flows {
            ids.extend([f.u, f.w, f.b]);
        }
        ids.extend([self.theta_w, self.theta_b, self.phi, self.phi_b]);
        ids
    }

    fn linear(&self, g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = g.param(store, w)?;
        let bv = g.param(store, b)?;
        let y = g.matmul(x, wv)?;
        Ok(g.add_row(y, bv)?)
    }

    /// `π = tanh(x W + b)`, `μ = f_1(π)`, `log σ = f_2(π)`.
    pub fn encode_bow(&self, g: &mut Graph, store: &ParamStore, x_bow: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x_bow);
        if shape.len() != 2 || shape[1] != self.config.vocab_size {
            return Err(Error::Model(format!(
                "BoW input has shape {shape:?}, expected [B, {}]",
                self.config.vocab_size
            )));
        }
        let pre = self.linear(g, store, x_bow, self.enc_w, self.enc_b)?;
        let pi = g.tanh(pre)?;
        let mu = self.linear(g, store, pi, self.mu_w, self.mu_b)?;
        let log_sigma = self.linear(g, store, pi, self.ls_w, self.ls_b)?;
        Ok((mu, log_sigma))
    }

    /// Reparameterized draw `z_0 = μ + exp(log σ) ⊙ ε` with caller-supplied `ε`.
    pub fn sample_latent(g: &mut Graph, mu: Var, log_sigma: Var, noise: Var) -> Result<Var> {
        let sigma = g.exp(log_sigma)?;
        let scaled = g.mul(sigma, noise)?;
        Ok(g.add(mu, scaled)?)
    }

    pub fn apply_flow(&self, g: &mut Graph, store: &ParamStore, z0: Var) -> Result<(Var, Var)> {
        apply_flow(g, store, &self.flows, z0)
    }

    /// `θ = softmax(ReLU(z_K W + b))`, `[B, T]`.
    pub fn topic_mixture(&self, g: &mut Graph, store: &ParamStore, zk: Var) -> Result<Var> {
        let pre = self.linear(g, store, zk, self.theta_w, self.theta_b)?;
        let act = g.relu(pre)?;
        Ok(g.softmax(act)?)
    }

    /// `log softmax(θ φ + b_φ)`, `[B, V_bow]`.
    pub fn reconstruct_log_probs(&self, g: &mut Graph, store: &ParamStore, theta: Var) -> Result<Var> {
        let logits = self.linear(g, store, theta, self.phi, self.phi_b)?;
        Ok(g.log_softmax(logits)?)
    }

    /// Encoder, reparameterization and flow for a `[B, V_bow]` batch.
    pub fn sample(&self, g: &mut Graph, store: &ParamStore, x_bow: Var, noise: &Tensor) -> Result<LatentSample> {
        let (mu, log_sigma) = self.encode_bow(g, store, x_bow)?;
        if g.shape(mu) != noise.shape() {
            return Err(Error::Model(format!(
                "noise shape {:?} does not match latent shape {:?}",
                noise.shape(),
                g.shape(mu)
            )));
        }
        let eps = g.constant(noise.clone())?;
        let z0 = Self::sample_latent(g, mu, log_sigma, eps)?;
        let (zk, sum_log_det) = self.apply_flow(g, store, z0)?;
        Ok(LatentSample {
            z0,
            zk,
            mu,
            log_sigma,
            sum_log_det,
        })
    }

    /// Per-document ELBO `[B, 1]`; `sample` must come from [`Ntm::sample`]
    /// on the same `x_bow`.
    pub fn elbo(&self, g: &mut Graph, store: &ParamStore, x_bow: Var, sample: &LatentSample) -> Result<Var> {
        let theta = self.topic_mixture(g, store, sample.zk)?;
        self.elbo_with_theta(g, store, x_bow, sample, theta)
    }

    fn elbo_with_theta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_bow: Var,
        sample: &LatentSample,
        theta: Var,
    ) -> Result<Var> {
        let d = self.config.latent_dim as f64;
        let log_q = gaussian_log_density(g, sample.z0, Some((sample.mu, sample.log_sigma)), d)?;
        let log_prior = gaussian_log_density(g, sample.zk, None, d)?;
        let log_probs = self.reconstruct_log_probs(g, store, theta)?;
        let weighted = g.mul(x_bow, log_probs)?;
        let log_lik = g.sum_cols(weighted)?;

        let latent = g.sub(log_prior, log_q)?;
        let latent = g.add(latent, sample.sum_log_det)?;
        Ok(g.add(latent, log_lik)?)
    }

    /// Full pass: sample, θ and ELBO.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_bow: &Tensor, noise: &Tensor) -> Result<NtmForward> {
        let x = g.constant(x_bow.clone())?;
        let sample = self.sample(g, store, x, noise)?;
        let theta = self.topic_mixture(g, store, sample.zk)?;
        let elbo = self.elbo_with_theta(g, store, x, &sample, theta)?;
        Ok(NtmForward { sample, theta, elbo })
    }

    /// Standard-normal noise for a batch of `batch` documents.
    pub fn draw_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor {
        let d = self.config.latent_dim;
        let data = (0..batch * d)
            .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        Tensor::new(vec![batch, d], data).expect("shape")
    }

    pub fn noise_for<R: Rng + ?Sized>(&self, mode: ThetaMode, batch: usize, rng: &mut R) -> Tensor {
        match mode {
            ThetaMode::Mean => Tensor::zeros(&[batch, self.config.latent_dim]),
            ThetaMode::Sample => self.draw_noise(batch, rng),
        }
    }

    /// Word distribution of each topic: `softmax(φ_t + b_φ)`, the decoder
    /// output for a one-hot mixture.
    pub fn topic_word_distributions(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let phi = store.value(self.phi);
        let bias = store.value(self.phi_b).data();
        (0..self.config.topics)
            .map(|t| {
                let logits: Vec<f64> = phi.row(t).iter().zip(bias).map(|(a, b)| a + b).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / s).collect()
            })
            .collect()
    }

    /// The `k` highest-weighted words of every topic row of `φ`, ties broken
    /// lexicographically.
    pub fn top_words(&self, store: &ParamStore, vocab: &BowVocabulary, k: usize) -> Result<Vec<TopicWords>> {
        top_words(store.value(self.phi), vocab, k)
    }
}

/// Ranked words of one topic with their `φ` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicWords {
    pub topic_id: usize,
    pub top_words: Vec<String>,
    pub weights: Vec<f64>,
}

pub fn top_words(phi: &Tensor, vocab: &BowVocabulary, k: usize) -> Result<Vec<TopicWords>> {
    let v = phi.cols();
    if vocab.len() != v {
        return Err(Error::Model(format!(
            "topic-word matrix has {v} columns but the BoW vocabulary has {} words",
            vocab.len()
        )));
    }
    if k == 0 || k > v {
        return Err(Error::Model(format!("k must lie in 1..={v}, got {k}")));
    }
    Ok((0..phi.rows())
        .map(|t| {
            let row = phi.row(t);
            let mut order: Vec<usize> = (0..v).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .total_cmp(&row[a])
                    .then_with(|| vocab.tokens()[a].cmp(&vocab.tokens()[b]))
            });
            order.truncate(k);
            TopicWords {
                topic_id: t,
                top_words: order.iter().map(|&i| vocab.tokens()[i].clone()).collect(),
                weights: order.iter().map(|&i| row[i]).collect(),
            }
        })
        .collect())
}

/// Row-wise `log N(z; μ, diag σ²)`, or the standard normal when `params` is
/// `None`; `[B, 1]`.
pub fn gaussian_log_density(g: &mut Graph, z: Var, params: Option<(Var, Var)>, dim: f64) -> Result<Var> {
    let norm = -dim * HALF_LN_2PI;
    match params {
        None => {
            let sq = g.mul(z, z)?;
            let s = g.sum_cols(sq)?;
            Ok(g.affine(s, -0.5, norm)?)
        }
        Some((mu, log_sigma)) => {
            let diff = g.sub(z, mu)?;
            let neg = g.scale(log_sigma, -1.0)?;
            let inv_sigma = g.exp(neg)?;
            let eps = g.mul(diff, inv_sigma)?;
            let sq = g.mul(eps, eps)?;
            let quad = g.sum_cols(sq)?;
            let quad = g.scale(quad, -0.5)?;
            let log_det = g.sum_cols(log_sigma)?;
            let out = g.sub(quad, log_det)?;
            Ok(g.affine(out, 1.0, norm)?)
        }
    }
}

#[cfg(test)]
mod tests;
