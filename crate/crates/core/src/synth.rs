//! Synthetic corpora with known generating topics.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::{BowVocabulary, DocumentRecord, EncodedExample, BOS, CLS, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicCorpusConfig {
    pub topics: usize,
    pub vocab_size: usize,
    pub documents: usize,
    pub doc_len: usize,
    /// Dirichlet concentration of the per-document mixtures.
    pub alpha: f64,
    /// Probability mass each topic spreads uniformly over the whole vocabulary.
    pub leak: f64,
}

impl Default for TopicCorpusConfig {
    fn default() -> Self {
        Self {
            topics: 5,
            vocab_size: 100,
            documents: 2000,
            doc_len: 50,
            alpha: 0.1,
            leak: 0.05,
        }
    }
}

/// Documents drawn from an LDA-style generative process.
#[derive(Debug, Clone)]
pub struct TopicCorpus {
    /// `[T][V]` true topic-word distributions.
    pub topic_word: Vec<Vec<f64>>,
    /// `[D][T]` document mixtures.
    pub theta: Vec<Vec<f64>>,
    /// `[D][doc_len]` word ids.
    pub tokens: Vec<Vec<usize>>,
    pub words: Vec<String>,
}

pub fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let g = Gamma::new(a, 1.0).map_err(|e| Error::Config(format!("dirichlet concentration {a}: {e}")))?;
        draws.push(g.sample(rng));
    }
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        Ok(draws.into_iter().map(|d| d / sum).collect())
    } else {
        // every gamma draw underflowed; fall back to the largest concentration
        let best = alpha
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        Ok((0..alpha.len()).map(|i| f64::from(u8::from(i == best))).collect())
    }
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(p).map_err(|e| Error::Model(format!("bad categorical weights: {e}")))?;
    Ok(dist.sample(rng))
}

/// Topic `t` concentrates `1 − leak` of its mass on its own block of
/// `V / T` words.
pub fn topic_corpus<R: Rng + ?Sized>(config: &TopicCorpusConfig, rng: &mut R) -> Result<TopicCorpus> {
    let (t, v) = (config.topics, config.vocab_size);
    if t == 0 || v < t || config.documents == 0 || config.doc_len == 0 {
        return Err(Error::Config(format!("invalid synthetic corpus config {config:?}")));
    }
    if !(0.0..1.0).contains(&config.leak) || !(config.alpha > 0.0) {
        return Err(Error::Config("need 0 <= leak < 1 and alpha > 0".into()));
    }
    let block = v / t;
    let mut topic_word = Vec::with_capacity(t);
    for k in 0..t {
        let w = dirichlet(&vec![1.0; block], rng)?;
        let mut row = vec![config.leak / v as f64; v];
        for (j, p) in w.into_iter().enumerate() {
            row[k * block + j] += (1.0 - config.leak) * p;
        }
        topic_word.push(row);
    }
    let mut theta = Vec::with_capacity(config.documents);
    let mut tokens = Vec::with_capacity(config.documents);
    for _ in 0..config.documents {
        let mix = dirichlet(&vec![config.alpha; t], rng)?;
        let mut doc = Vec::with_capacity(config.doc_len);
        for _ in 0..config.doc_len {
            let z = categorical(&mix, rng)?;
            doc.push(categorical(&topic_word[z], rng)?);
        }
        theta.push(mix);
        tokens.push(doc);
    }
    Ok(TopicCorpus {
        topic_word,
        theta,
        tokens,
        words: (0..v).map(|i| format!("w{i:03}")).collect(),
    })
}

impl TopicCorpus {
    pub fn bow_vocab(&self) -> Result<BowVocabulary> {
        BowVocabulary::from_words(&self.words, BTreeSet::new())
    }

    /// BoW-only examples (empty source and target sequences).
    pub fn examples(&self) -> Vec<EncodedExample> {
        self.tokens
            .iter()
            .map(|doc| {
                let mut x_bow = vec![0u32; self.words.len()];
                for &w in doc {
                    x_bow[w] += 1;
                }
                EncodedExample {
                    x_ids: vec![CLS],
                    y_ids: vec![BOS, EOS],
                    x_bow,
                }
            })
            .collect()
    }

    pub fn documents(&self) -> Vec<Vec<String>> {
        self.tokens
            .iter()
            .map(|d| d.iter().map(|&w| self.words[w].clone()).collect())
            .collect()
    }

    pub fn records(&self) -> Vec<DocumentRecord> {
        self.documents()
            .into_iter()
            .enumerate()
            .map(|(i, d)| DocumentRecord {
                id: format!("topic-{i:05}"),
                document: d.join(" "),
                summary: String::new(),
            })
            .collect()
    }
}

const THEMES: [(&str, [&str; 12]); 5] = [
    (
        "sports",
        [
            "team", "match", "coach", "season", "goal", "players", "league", "stadium", "fans", "win", "striker",
            "final",
        ],
    ),
    (
        "markets",
        [
            "shares", "bank", "profit", "investors", "prices", "trading", "stocks", "interest", "growth", "revenue",
            "inflation", "bonds",
        ],
    ),
    (
        "weather",
        [
            "storm", "rain", "winds", "flood", "forecast", "snow", "temperatures", "coast", "heat", "clouds",
            "warning", "drought",
        ],
    ),
    (
        "science",
        [
            "researchers", "study", "cells", "telescope", "genes", "laboratory", "species", "planet", "experiment",
            "data", "climate", "vaccine",
        ],
    ),
    (
        "politics",
        [
            "minister", "parliament", "election", "vote", "party", "policy", "senate", "campaign", "president",
            "law", "reform", "leaders",
        ],
    ),
];

const FILLERS: [&str; 8] = ["the", "a", "of", "in", "and", "to", "on", "with"];

/// Document–summary pairs over five themed word lists.
///
/// Each document mixes themes through a Dirichlet draw; every sentence
/// picks one theme. The summary is the dominant theme's name, a colon and
/// the content words of the first sentence.
pub fn summary_pairs<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<Vec<DocumentRecord>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mix = dirichlet(&[0.3; THEMES.len()], rng)?;
        let sentences = rng.random_range(2..=4);
        let mut doc: Vec<&str> = Vec::new();
        let mut lead: Vec<&str> = Vec::new();
        let mut theme_hits = [0usize; THEMES.len()];
        for s in 0..sentences {
            let theme = categorical(&mix, rng)?;
            let len = rng.random_range(5..=8);
            for _ in 0..len {
                if rng.random_bool(0.25) {
                    doc.push(FILLERS[rng.random_range(0..FILLERS.len())]);
                } else {
                    let w = THEMES[theme].1[rng.random_range(0..12)];
                    doc.push(w);
                    theme_hits[theme] += 1;
                    if s == 0 {
                        lead.push(w);
                    }
                }
            }
            doc.push(".");
        }
        let dominant = (0..THEMES.len())
            .max_by(|&a, &b| theme_hits[a].cmp(&theme_hits[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        let summary = std::iter::once(THEMES[dominant].0)
            .chain(std::iter::once(":"))
            .chain(lead)
            .collect::<Vec<_>>()
            .join(" ");
        out.push(DocumentRecord {
            id: format!("syn-{i:04}"),
            document: doc.join(" "),
            summary,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn topics_and_mixtures_are_distributions() {
        let cfg = TopicCorpusConfig {
            documents: 50,
            ..TopicCorpusConfig::default()
        };
        let c = topic_corpus(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for row in c.topic_word.iter().chain(&c.theta) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        assert_eq!(c.tokens.len(), 50);
        assert!(c.tokens.iter().all(|d| d.len() == 50 && d.iter().all(|&w| w < 100)));
        for (k, row) in c.topic_word.iter().enumerate() {
            let own: f64 = row[k * 20..(k + 1) * 20].iter().sum();
            assert!((own - (0.95 + 0.05 * 0.2)).abs() < 1e-12);
        }
        let ex = c.examples();
        assert_eq!(ex[3].x_bow.iter().sum::<u32>(), 50);
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = TopicCorpusConfig {
            documents: 5,
            ..TopicCorpusConfig::default()
        };
        let a = topic_corpus(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = topic_corpus(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let p = summary_pairs(4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(p, summary_pairs(4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
    }

    #[test]
    fn summaries_name_a_theme_and_copy_the_lead() {
        for r in summary_pairs(30, &mut ChaCha8Rng::seed_from_u64(9)).unwrap() {
            let s = tokenize(&r.summary);
            assert!(THEMES.iter().any(|(name, _)| *name == s[0]));
            assert_eq!(s[1], ":");
            let doc = tokenize(&r.document);
            let lead: Vec<&String> = doc
                .iter()
                .take_while(|t| *t != ".")
                .filter(|t| !FILLERS.contains(&t.as_str()))
                .collect();
            assert_eq!(s[2..].iter().collect::<Vec<_>>(), lead);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            TopicCorpusConfig {
                topics: 0,
                ..TopicCorpusConfig::default()
            },
            TopicCorpusConfig {
                alpha: 0.0,
                ..TopicCorpusConfig::default()
            },
        ] {
            assert!(topic_corpus(&cfg, &mut rng).is_err());
        }
    }
}
