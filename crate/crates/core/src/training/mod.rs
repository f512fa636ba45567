//! Losses, NTM pretraining and joint fine-tuning.

mod optim;

pub use optim::{
    clip_and_step, clip_gradients, global_grad_norm, warmup_lr, Optimizer, OptimizerKind, ADADELTA_EPS,
    ADADELTA_RHO, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EncodedExample, Vocabulary, EOS};
use crate::eval::{aggregate, mean_f1, round2, score_texts, RougeReport, RougeTriple};
use crate::ntm::{Ntm, NtmConfig, ThetaMode};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::summarizer::{
    beam_search, greedy, BeamConfig, GateMode, Hypothesis, Mode, ModelScorer, Summarizer, TransformerConfig,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the topic-model term in the joint loss.
    pub lambda_ntm: f64,
    pub lr_ntm: f64,
    pub lr_joint: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub checkpoint_top_k: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub ntm_optimizer: OptimizerKind,
    pub freeze_ntm: bool,
    /// Decode validation/test sets during training to report ROUGE.
    pub eval_rouge: bool,
    pub eval_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ntm: 0.75,
            lr_ntm: 1e-3,
            lr_joint: 1e-4,
            batch_size: 8,
            pretrain_epochs: 20,
            max_steps: 2000,
            eval_interval: 100,
            seed: 42,
            checkpoint_top_k: 3,
            clip_norm: 1.0,
            warmup_steps: 100,
            ntm_optimizer: OptimizerKind::Adam,
            freeze_ntm: false,
            eval_rouge: true,
            eval_beam: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda_ntm >= 0.0) {
            return fail(format!("lambda_ntm must be >= 0, got {}", self.lambda_ntm));
        }
        if self.checkpoint_top_k < 1 {
            return fail("checkpoint_top_k must be >= 1".into());
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_beam == 0 {
            return fail("batch_size, eval_interval and eval_beam must be >= 1".into());
        }
        if !(self.lr_ntm > 0.0 && self.lr_joint > 0.0) || !(self.clip_norm >= 0.0) {
            return fail("learning rates must be positive and clip_norm non-negative".into());
        }
        Ok(())
    }
}

/// Mean negative log-likelihood over unmasked target positions.
pub fn sum_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    if targets.len() != mask.len() || g.shape(logits).first() != Some(&targets.len()) {
        return Err(Error::Model(format!(
            "logits {:?} do not align with {} targets",
            g.shape(logits),
            targets.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Model("every target position is masked".into()));
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, targets)?;
    let weights = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let weights = g.constant(Tensor::new(vec![mask.len(), 1], weights)?)?;
    let kept = g.mul(picked, weights)?;
    let total = g.sum(kept)?;
    Ok(g.scale(total, -1.0 / count as f64)?)
}

/// `L_sum + λ · (−ELBO)`.
pub fn joint_loss(g: &mut Graph, sum_loss: Var, elbo: Var, lambda: f64) -> Result<Var> {
    let ntm = g.scale(elbo, -lambda)?;
    Ok(g.add(sum_loss, ntm)?)
}

/// How θ reaches the summarizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopicPath {
    Gated(GateMode),
    /// Topic-free baseline: no gating at all.
    Off,
}

impl TopicPath {
    pub fn is_on(self) -> bool {
        matches!(self, TopicPath::Gated(_))
    }

    fn gate(self) -> GateMode {
        match self {
            TopicPath::Gated(m) => m,
            TopicPath::Off => GateMode::Learned,
        }
    }
}

/// Topic model and summarizer sharing one parameter store.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub ntm: Ntm,
    pub summarizer: Summarizer,
    pub topic_path: TopicPath,
}

/// Scalar handles of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: Var,
    pub ce: Var,
    pub neg_elbo: Var,
}

impl JointModel {
    pub fn new<R: Rng>(
        ntm: NtmConfig,
        transformer: TransformerConfig,
        vocab_size: usize,
        topic_path: TopicPath,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let ntm = Ntm::new(ntm, store, rng)?;
        let summarizer = Summarizer::new(transformer, vocab_size, ntm.config.topics, store, rng)?;
        Ok(Self {
            ntm,
            summarizer,
            topic_path,
        })
    }

    pub fn from_store(
        ntm: NtmConfig,
        transformer: TransformerConfig,
        vocab_size: usize,
        topic_path: TopicPath,
        store: &ParamStore,
    ) -> Result<Self> {
        Ok(Self {
            ntm: Ntm::from_store(ntm, store)?,
            summarizer: Summarizer::from_store(transformer, vocab_size, ntm.topics, store)?,
            topic_path,
        })
    }

    pub fn ntm_ids(&self) -> Vec<ParamId> {
        self.ntm.param_ids()
    }

    /// Parameters updated during joint training.
    pub fn trainable_ids(&self, store: &ParamStore, freeze_ntm: bool) -> Vec<ParamId> {
        let ntm: BTreeSet<usize> = self.ntm_ids().iter().map(|id| id.index()).collect();
        store
            .ids()
            .filter(|id| !freeze_ntm || !ntm.contains(&id.index()))
            .collect()
    }

    /// Builds the joint objective for one batch. `noise` is the latent draw;
    /// dropout follows `mode`.
    pub fn step_losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        noise: &Tensor,
        lambda: f64,
        mode: &mut Mode<'_>,
    ) -> Result<StepLosses> {
        let nf = self.ntm.forward(g, store, &batch.bow, noise)?;
        let theta = self.topic_path.is_on().then_some(nf.theta);
        let out = self
            .summarizer
            .forward(g, store, batch, theta, self.topic_path.gate(), mode)?;
        let ce = sum_loss(g, out.logits, &batch.tgt_out, &batch.tgt_mask)?;
        let elbo = g.mean(nf.elbo)?;
        let neg_elbo = g.scale(elbo, -1.0)?;
        let total = joint_loss(g, ce, elbo, lambda)?;
        Ok(StepLosses { total, ce, neg_elbo })
    }

    /// Token-weighted cross-entropy in evaluation mode with θ from the
    /// posterior mean.
    pub fn evaluate_ce(&self, store: &ParamStore, examples: &[EncodedExample], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0usize;
        for chunk in examples.chunks(batch_size.max(1)) {
            let batch = Batch::from_examples(&chunk.iter().collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let noise = Tensor::zeros(&[batch.size, self.ntm.config.latent_dim]);
            let l = self.step_losses(&mut g, store, &batch, &noise, 0.0, &mut Mode::Eval)?;
            let n = batch.target_tokens();
            total += g.value(l.ce).item() * n as f64;
            tokens += n;
        }
        if tokens == 0 {
            return Err(Error::Model("no target tokens to evaluate".into()));
        }
        Ok(total / tokens as f64)
    }

    /// Topic mixture of one document, `[1, T]`.
    pub fn theta<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        bow: &[f64],
        mode: ThetaMode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, bow.len()], bow.to_vec())?;
        let noise = self.ntm.noise_for(mode, 1, rng);
        let out = self.ntm.forward(&mut g, store, &x, &noise)?;
        Ok(g.value(out.theta).data().to_vec())
    }

    /// Decodes one document; `beam == 1` runs greedy decoding.
    pub fn summarize<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        example: &EncodedExample,
        beam: &BeamConfig,
        theta_mode: ThetaMode,
        rng: &mut R,
    ) -> Result<Hypothesis> {
        let theta = match self.topic_path {
            TopicPath::Gated(_) => Some(self.theta(store, &example.bow_f64(), theta_mode, rng)?),
            TopicPath::Off => None,
        };
        let ctx = self
            .summarizer
            .prepare(store, &example.x_ids, theta.as_deref(), self.topic_path.gate())?;
        let mut scorer = ModelScorer {
            model: &self.summarizer,
            store,
            context: &ctx,
        };
        if beam.beam == 1 {
            greedy(&mut scorer, beam)
        } else {
            beam_search(&mut scorer, beam)
        }
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub rouge: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, split: &str, loss: f64, rouge: Option<(f64, f64, f64)>) {
        self.rows.push(MetricRow {
            step,
            split: split.into(),
            loss,
            rouge,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,loss,rouge1,rouge2,rougeL\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.step, r.split, r.loss);
            match r.rouge {
                Some((a, b, c)) => {
                    let _ = writeln!(out, ",{a},{b},{c}");
                }
                None => out.push_str(",,,\n"),
            }
        }
        out
    }
}

fn diverged(step: usize, e: &Error) -> Error {
    Error::Diverged {
        step,
        reason: e.to_string(),
    }
}

fn is_numeric(e: &Error) -> bool {
    matches!(
        e,
        Error::Numerics(NumericsError::NonFinite { .. }) | Error::Numerics(NumericsError::EmptySoftmax { .. })
    ) || matches!(e, Error::Model(m) if m.contains("degenerate"))
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(store: &mut ParamStore, values: &[Tensor]) {
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        *store.value_mut(id) = v.clone();
    }
}

fn bow_tensor(examples: &[&EncodedExample]) -> Result<Tensor> {
    let v = examples.first().map_or(0, |e| e.x_bow.len());
    let data: Vec<f64> = examples.iter().flat_map(|e| e.bow_f64()).collect();
    Ok(Tensor::new(vec![examples.len(), v], data)?)
}

/// Minimizes `−ELBO` over the documents' BoW vectors. Returns the mean loss
/// of every epoch. On a non-finite loss the parameters are rolled back to
/// the start of the failing epoch and [`Error::Diverged`] is returned.
pub fn pretrain_ntm<R: Rng>(
    ntm: &Ntm,
    store: &mut ParamStore,
    examples: &[EncodedExample],
    config: &TrainConfig,
    rng: &mut R,
    log: &mut MetricsLog,
) -> Result<Vec<f64>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Corpus("cannot pretrain on an empty corpus".into()));
    }
    let ids = ntm.param_ids();
    let mut opt = Optimizer::new(config.ntm_optimizer, store);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(config.pretrain_epochs);
    let mut step = 0usize;
    for _ in 0..config.pretrain_epochs {
        let good = snapshot(store);
        order.shuffle(rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let docs: Vec<&EncodedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let x = bow_tensor(&docs)?;
            let noise = ntm.draw_noise(docs.len(), rng);
            let result = (|| -> Result<f64> {
                let mut g = Graph::new();
                let out = ntm.forward(&mut g, store, &x, &noise)?;
                let elbo = g.mean(out.elbo)?;
                let loss = g.scale(elbo, -1.0)?;
                g.backward(loss, store)?;
                Ok(g.value(loss).item())
            })();
            let loss = match result {
                Ok(l) if l.is_finite() => l,
                Ok(l) => {
                    restore(store, &good);
                    return Err(Error::Diverged {
                        step,
                        reason: format!("loss is {l}"),
                    });
                }
                Err(e) if is_numeric(&e) => {
                    restore(store, &good);
                    return Err(diverged(step, &e));
                }
                Err(e) => return Err(e),
            };
            let lr = warmup_lr(config.lr_ntm, step, config.warmup_steps);
            clip_and_step(store, &ids, config.clip_norm, &mut opt, lr);
            sum += loss * docs.len() as f64;
            step += 1;
        }
        let mean = sum / examples.len() as f64;
        log.push(step, "pretrain", mean, None);
        curve.push(mean);
    }
    Ok(curve)
}

/// Documents with their reference summaries.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub examples: &'a [EncodedExample],
    pub references: &'a [String],
}

#[derive(Debug, Clone)]
pub struct RetainedCheckpoint {
    pub step: usize,
    pub valid_loss: f64,
    pub test_loss: f64,
    /// Mean F1 ×100, unrounded.
    pub test_rouge: (f64, f64, f64),
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct JointReport {
    /// Ordered by step.
    pub retained: Vec<RetainedCheckpoint>,
    /// Mean over retained checkpoints of their test ROUGE, rounded.
    pub mean_test_rouge: RougeReport,
    /// Test ROUGE of the checkpoint with the lowest validation loss.
    pub best_test_rouge: RougeReport,
    pub mean_test_loss: f64,
    /// Training cross-entropy of every step (with dropout active).
    pub step_ce: Vec<f64>,
    pub evals: usize,
}

fn decode_rouge(
    model: &JointModel,
    store: &ParamStore,
    set: &EvalSet<'_>,
    vocab: &Vocabulary,
    beam: &BeamConfig,
) -> Result<(f64, f64, f64)> {
    let mut scores: Vec<RougeTriple> = Vec::with_capacity(set.examples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (ex, reference) in set.examples.iter().zip(set.references) {
        let h = model.summarize(store, ex, beam, ThetaMode::Mean, &mut rng)?;
        scores.push(score_texts(&vocab.detokenize(&h.tokens), reference));
    }
    Ok(mean_f1(&scores))
}

/// Joint fine-tuning of summarizer and topic model.
///
/// Every `eval_interval` steps (and after the last step) the validation
/// cross-entropy is measured and the `checkpoint_top_k` lowest-loss
/// parameter snapshots are kept. Each retained snapshot is then scored on
/// the test set; the report carries the mean of those scores. On return the
/// store holds the snapshot with the lowest validation loss.
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    model: &JointModel,
    store: &mut ParamStore,
    train: &[EncodedExample],
    valid: &EvalSet<'_>,
    test: &EvalSet<'_>,
    vocab: &Vocabulary,
    config: &TrainConfig,
    beam: &BeamConfig,
    rng: &mut dyn RngCore,
    log: &mut MetricsLog,
) -> Result<JointReport> {
    config.validate()?;
    if train.is_empty() || valid.examples.is_empty() {
        return Err(Error::Corpus("training and validation sets must be non-empty".into()));
    }
    let ids = model.trainable_ids(store, config.freeze_ntm);
    let mut opt = Optimizer::new(OptimizerKind::Adam, store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut retained: Vec<RetainedCheckpoint> = Vec::new();
    let mut step_ce = Vec::with_capacity(config.max_steps);
    let (mut acc_ce, mut acc_ntm, mut acc_n) = (0.0, 0.0, 0usize);
    let mut evals = 0;
    let eval_beam = BeamConfig {
        beam: config.eval_beam,
        ..*beam
    };

    for step in 0..config.max_steps {
        if cursor + config.batch_size > order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let docs: Vec<&EncodedExample> = order[cursor..end].iter().map(|&i| &train[i]).collect();
        cursor = end;
        let batch = Batch::from_examples(&docs)?;
        let noise = model.ntm.draw_noise(batch.size, rng);
        let result = (|| -> Result<(f64, f64)> {
            let mut g = Graph::new();
            let l = model.step_losses(&mut g, store, &batch, &noise, config.lambda_ntm, &mut Mode::Train(&mut *rng))?;
            g.backward(l.total, store)?;
            Ok((g.value(l.ce).item(), g.value(l.neg_elbo).item()))
        })();
        let (ce, neg_elbo) = match result {
            Ok(v) if v.0.is_finite() && v.1.is_finite() => v,
            Ok(v) => {
                return Err(Error::Diverged {
                    step,
                    reason: format!("non-finite loss {v:?}"),
                })
            }
            Err(e) if is_numeric(&e) => return Err(diverged(step, &e)),
            Err(e) => return Err(e),
        };
        let lr = warmup_lr(config.lr_joint, step, config.warmup_steps);
        clip_and_step(store, &ids, config.clip_norm, &mut opt, lr);
        step_ce.push(ce);
        acc_ce += ce;
        acc_ntm += neg_elbo;
        acc_n += 1;

        let done = step + 1;
        if done % config.eval_interval == 0 || done == config.max_steps {
            evals += 1;
            log.push(done, "train", acc_ce / acc_n as f64, None);
            log.push(done, "train_ntm", acc_ntm / acc_n as f64, None);
            (acc_ce, acc_ntm, acc_n) = (0.0, 0.0, 0);
            let valid_loss = model.evaluate_ce(store, valid.examples, config.batch_size)?;
            let rouge = if config.eval_rouge {
                Some(decode_rouge(model, store, valid, vocab, &eval_beam)?)
            } else {
                None
            };
            log.push(done, "valid", valid_loss, rouge);
            let worst = retained
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.valid_loss.total_cmp(&b.1.valid_loss).then(a.1.step.cmp(&b.1.step)));
            let keep = retained.len() < config.checkpoint_top_k || worst.is_some_and(|(_, w)| valid_loss < w.valid_loss);
            if keep {
                if retained.len() >= config.checkpoint_top_k {
                    let i = worst.map(|(i, _)| i).expect("non-empty");
                    retained.remove(i);
                }
                retained.push(RetainedCheckpoint {
                    step: done,
                    valid_loss,
                    test_loss: f64::NAN,
                    test_rouge: (0.0, 0.0, 0.0),
                    params: snapshot(store),
                });
            }
        }
    }

    let final_params = snapshot(store);
    for r in &mut retained {
        restore(store, &r.params);
        r.test_loss = if test.examples.is_empty() {
            f64::NAN
        } else {
            model.evaluate_ce(store, test.examples, config.batch_size)?
        };
        r.test_rouge = if config.eval_rouge && !test.examples.is_empty() {
            decode_rouge(model, store, test, vocab, &eval_beam)?
        } else {
            (0.0, 0.0, 0.0)
        };
        log.push(r.step, "test", r.test_loss, config.eval_rouge.then_some(r.test_rouge));
    }
    let n = retained.len().max(1) as f64;
    let mean = retained.iter().fold((0.0, 0.0, 0.0), |a, r| {
        (a.0 + r.test_rouge.0, a.1 + r.test_rouge.1, a.2 + r.test_rouge.2)
    });
    let best = retained
        .iter()
        .min_by(|a, b| a.valid_loss.total_cmp(&b.valid_loss).then(a.step.cmp(&b.step)));
    match best {
        Some(b) => restore(store, &b.params),
        None => restore(store, &final_params),
    }
    let to_report = |t: (f64, f64, f64)| RougeReport {
        rouge1: round2(t.0),
        rouge2: round2(t.1),
        rouge_l: round2(t.2),
    };
    Ok(JointReport {
        mean_test_rouge: to_report((mean.0 / n, mean.1 / n, mean.2 / n)),
        best_test_rouge: to_report(best.map_or((0.0, 0.0, 0.0), |b| b.test_rouge)),
        mean_test_loss: retained.iter().map(|r| r.test_loss).sum::<f64>() / n,
        retained,
        step_ce,
        evals,
    })
}

/// Decodes every example and scores it against its reference.
pub fn decode_all<R: Rng + ?Sized>(
    model: &JointModel,
    store: &ParamStore,
    examples: &[EncodedExample],
    vocab: &Vocabulary,
    beam: &BeamConfig,
    theta_mode: ThetaMode,
    rng: &mut R,
) -> Result<Vec<(String, Hypothesis)>> {
    examples
        .iter()
        .map(|ex| {
            let h = model.summarize(store, ex, beam, theta_mode, rng)?;
            Ok((vocab.detokenize(&h.tokens), h))
        })
        .collect()
}

/// Default decoding settings for a summarizer whose targets hold at most
/// `m_max` ids (BOS and EOS included).
pub fn beam_for(m_max: usize, beam: usize, length_penalty: f64) -> BeamConfig {
    BeamConfig {
        beam,
        max_len: m_max.saturating_sub(1).max(1),
        length_penalty,
        eos: EOS,
    }
}

/// Aggregate helper for per-example scores.
pub fn rouge_of(pairs: &[(String, String)]) -> RougeReport {
    let scores: Vec<RougeTriple> = pairs.iter().map(|(c, r)| score_texts(c, r)).collect();
    aggregate(&scores)
}
