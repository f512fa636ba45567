//! Greedy and beam-search decoding over an abstract next-token scorer.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Supplies next-token log-probabilities for a set of equal-length prefixes.
///
/// Prefixes hold generated tokens only; the scorer adds its own start symbol.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    pub eos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, ending in EOS unless truncated at `max_len`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / len^length_penalty`.
    pub score: f64,
    /// Step at which the hypothesis stopped growing (0-based).
    pub completed_at: usize,
}

pub fn normalized_score(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(length_penalty)
}

/// Higher score first, then earlier completion, then lexicographic tokens.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.completed_at.cmp(&b.completed_at))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn check(config: &BeamConfig) -> Result<()> {
    if config.beam == 0 || config.max_len == 0 {
        return Err(Error::Config(format!(
            "beam ({}) and max_len ({}) must be at least 1",
            config.beam, config.max_len
        )));
    }
    Ok(())
}

fn step_scores<S: StepScorer + ?Sized>(scorer: &mut S, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let out = scorer.next_log_probs(prefixes)?;
    if out.len() != prefixes.len() {
        return Err(Error::Model(format!(
            "scorer returned {} rows for {} prefixes",
            out.len(),
            prefixes.len()
        )));
    }
    Ok(out)
}

/// Arg-max decoding; ties go to the smaller token id.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, config: &BeamConfig) -> Result<Hypothesis> {
    check(config)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for step in 0..config.max_len {
        let rows = step_scores(scorer, std::slice::from_ref(&tokens))?;
        let (best, lp) = rows[0]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (t, lp)| if lp > acc.1 { (t, lp) } else { acc });
        tokens.push(best);
        log_prob += lp;
        if best == config.eos || step + 1 == config.max_len {
            let score = normalized_score(log_prob, tokens.len(), config.length_penalty);
            return Ok(Hypothesis {
                tokens,
                log_prob,
                score,
                completed_at: step,
            });
        }
    }
    unreachable!("max_len >= 1 always returns inside the loop")
}

/// Beam search keeping the `beam` best extensions (by cumulative log-prob)
/// at every step. Extensions ending in EOS leave the beam as finished
/// hypotheses; everything still alive at `max_len` is finished as truncated.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, config: &BeamConfig) -> Result<Hypothesis> {
    check(config)?;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..config.max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let rows = step_scores(scorer, &prefixes)?;
        let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
        for ((prefix, lp), row) in live.iter().zip(&rows) {
            for (t, &l) in row.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut next = prefix.clone();
                next.push(t);
                candidates.push((next, lp + l));
            }
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        candidates.truncate(config.beam);
        live.clear();
        let last = step + 1 == config.max_len;
        for (tokens, log_prob) in candidates {
            if last || tokens.last() == Some(&config.eos) {
                let score = normalized_score(log_prob, tokens.len(), config.length_penalty);
                finished.push(Hypothesis {
                    tokens,
                    log_prob,
                    score,
                    completed_at: step,
                });
            } else {
                live.push((tokens, log_prob));
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.sort_by(rank);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Model("beam search produced no hypothesis".into()))
}
