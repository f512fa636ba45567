//! ROUGE-1/2/L and C_V topic coherence.

mod coherence;

pub use coherence::{cv_coherence, npmi, CoherenceReport, DEFAULT_WINDOW, NPMI_EPSILON};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Builds a score from a match count and the two sequence sizes; empty
    /// sides give zero.
    pub fn from_counts(matches: usize, candidate: usize, reference: usize) -> Self {
        let ratio = |den: usize| if den == 0 { 0.0 } else { matches as f64 / den as f64 };
        let (p, r) = (ratio(candidate), ratio(reference));
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Self {
            precision: p,
            recall: r,
            f1,
        }
    }
}

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Ord + Clone>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |m: &BTreeMap<&[T], usize>| m.values().sum::<usize>();
    RougeScore::from_counts(matches, total(&cand), total(&refs))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// ROUGE-1, ROUGE-2 and ROUGE-L for one pair of texts, tokenized with the
/// corpus tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeTriple {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
}

pub fn score_texts(candidate: &str, reference: &str) -> RougeTriple {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    RougeTriple {
        rouge1: rouge_n(&c, &r, 1),
        rouge2: rouge_n(&c, &r, 2),
        rouge_l: rouge_l(&c, &r),
    }
}

/// Mean F1 values ×100, rounded to two decimals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl RougeReport {
    pub fn table(&self) -> String {
        format!("{:.2}/{:.2}/{:.2}", self.rouge1, self.rouge2, self.rouge_l)
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Unrounded mean F1 ×100 over per-example scores.
pub fn mean_f1(scores: &[RougeTriple]) -> (f64, f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = scores.len() as f64;
    let mut acc = (0.0, 0.0, 0.0);
    for s in scores {
        acc.0 += s.rouge1.f1;
        acc.1 += s.rouge2.f1;
        acc.2 += s.rouge_l.f1;
    }
    (100.0 * acc.0 / n, 100.0 * acc.1 / n, 100.0 * acc.2 / n)
}

pub fn aggregate(scores: &[RougeTriple]) -> RougeReport {
    let (a, b, c) = mean_f1(scores);
    RougeReport {
        rouge1: round2(a),
        rouge2: round2(b),
        rouge_l: round2(c),
    }
}

/// One line of an outputs or references file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub id: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEvaluation {
    pub report: RougeReport,
    /// `(id, scores)` in reference order.
    pub per_example: Vec<(String, RougeTriple)>,
}

impl RunEvaluation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,rouge1,rouge2,rougeL\n");
        for (id, s) in &self.per_example {
            let id = if id.contains([',', '"', '\n']) {
                format!("\"{}\"", id.replace('"', "\"\""))
            } else {
                id.clone()
            };
            let _ = writeln!(out, "{id},{},{},{}", s.rouge1.f1, s.rouge2.f1, s.rouge_l.f1);
        }
        out
    }
}

fn index_by_id<'a>(rows: &'a [SummaryRecord], what: &str) -> Result<HashMap<&'a str, &'a str>> {
    let mut map = HashMap::with_capacity(rows.len());
    for r in rows {
        if map.insert(r.id.as_str(), r.summary.as_str()).is_some() {
            return Err(Error::Eval(format!("duplicate id {:?} in {what}", r.id)));
        }
    }
    Ok(map)
}

/// Scores outputs against references aligned by id.
pub fn evaluate_run(outputs: &[SummaryRecord], references: &[SummaryRecord]) -> Result<RunEvaluation> {
    let out = index_by_id(outputs, "outputs")?;
    let refs = index_by_id(references, "references")?;
    let missing: BTreeSet<&str> = refs.keys().filter(|k| !out.contains_key(*k)).copied().collect();
    let extra: BTreeSet<&str> = out.keys().filter(|k| !refs.contains_key(*k)).copied().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Eval(format!(
            "id mismatch: missing from outputs {missing:?}; missing from references {extra:?}"
        )));
    }
    let per_example: Vec<(String, RougeTriple)> = references
        .iter()
        .map(|r| (r.id.clone(), score_texts(out[r.id.as_str()], &r.summary)))
        .collect();
    let scores: Vec<RougeTriple> = per_example.iter().map(|(_, s)| *s).collect();
    Ok(RunEvaluation {
        report: aggregate(&scores),
        per_example,
    })
}
