use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 110;
pub const NPMI_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub per_topic: Vec<f64>,
    pub mean: f64,
}

/// Normalized PMI from window probabilities.
///
/// A word that never occurs gives −1 against everything; a pair present in
/// every window gives 1.
pub fn npmi(p_i: f64, p_j: f64, p_ij: f64) -> f64 {
    if p_i == 0.0 || p_j == 0.0 {
        return -1.0;
    }
    if p_ij >= 1.0 {
        return 1.0;
    }
    let joint = p_ij + NPMI_EPSILON;
    (joint / (p_i * p_j)).ln() / -joint.ln()
}

/// Boolean sliding-window counts for one word set: `(windows, single, pair)`
/// where `pair` is row-major `n × n` (diagonal equals `single`).
fn window_counts(words: &[String], corpus: &[Vec<String>], window: usize) -> (u64, Vec<u64>, Vec<u64>) {
    let n = words.len();
    let index: HashMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let mut total = 0u64;
    let mut single = vec![0u64; n];
    let mut pair = vec![0u64; n * n];
    let mut inside = vec![0usize; n];
    let mut present = Vec::with_capacity(n);
    for doc in corpus {
        if doc.is_empty() {
            continue;
        }
        let ids: Vec<Option<usize>> = doc.iter().map(|t| index.get(t.as_str()).copied()).collect();
        let span = window.min(ids.len());
        inside.iter_mut().for_each(|c| *c = 0);
        let windows = if ids.len() <= window { 1 } else { ids.len() - window + 1 };
        for id in ids[..span].iter().flatten() {
            inside[*id] += 1;
        }
        for start in 0..windows {
            if start > 0 {
                if let Some(out) = ids[start - 1] {
                    inside[out] -= 1;
                }
                if let Some(inc) = ids[start + span - 1] {
                    inside[inc] += 1;
                }
            }
            total += 1;
            present.clear();
            present.extend((0..n).filter(|&i| inside[i] > 0));
            for &i in &present {
                single[i] += 1;
                for &j in &present {
                    pair[i * n + j] += 1;
                }
            }
        }
    }
    (total, single, pair)
}

/// C_V of one word set against a tokenized reference corpus.
fn topic_cv(words: &[String], corpus: &[Vec<String>], window: usize) -> f64 {
    let n = words.len();
    let (total, single, pair) = window_counts(words, corpus, window);
    let total = total.max(1) as f64;
    let p: Vec<f64> = single.iter().map(|&c| c as f64 / total).collect();
    let vectors: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| npmi(p[i], p[j], pair[i * n + j] as f64 / total)).collect())
        .collect();
    let sum: Vec<f64> = (0..n).map(|k| vectors.iter().map(|v| v[k]).sum()).collect();
    let mean_cos = vectors.iter().map(|v| cosine(v, &sum)).sum::<f64>() / n as f64;
    mean_cos.clamp(0.0, 1.0)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// C_V coherence with one-set segmentation: every word's NPMI vector against
/// the topic's word set is compared by cosine with the sum of all those
/// vectors, and the mean cosine (clamped to `[0, 1]`) is the topic's score.
pub fn cv_coherence(topics: &[Vec<String>], corpus: &[Vec<String>], window: usize) -> Result<CoherenceReport> {
    if window == 0 {
        return Err(Error::Eval("coherence window must be at least 1".into()));
    }
    if let Some(t) = topics.iter().position(|t| t.len() < 2) {
        return Err(Error::Eval(format!("topic {t} has fewer than two words")));
    }
    let per_topic: Vec<f64> = topics.iter().map(|t| topic_cv(t, corpus, window)).collect();
    let mean = if per_topic.is_empty() {
        0.0
    } else {
        per_topic.iter().sum::<f64>() / per_topic.len() as f64
    };
    Ok(CoherenceReport { per_topic, mean })
}
