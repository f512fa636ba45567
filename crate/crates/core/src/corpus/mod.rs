//! Document ingestion, vocabularies, encoding and batching.

mod vocab;

pub use vocab::{
    build_vocabs, default_stopwords, load_stopwords, parse_stopwords, BowVocabulary, Vocabulary,
    BOS, CLS, EOS, PAD, SPECIAL_TOKENS, UNK,
};

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Lowercases, splits on whitespace and splits every character that is
/// neither alphanumeric nor whitespace into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub document: String,
    #[serde(default)]
    pub summary: String,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DocumentRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Json {
            context: format!("{}:{}", path.display(), n + 1),
            source: e,
        })?;
        if rec.document.trim().is_empty() {
            return Err(Error::Corpus(format!(
                "{}:{}: record {:?} has an empty document",
                path.display(),
                n + 1,
                rec.id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("serializable row"));
        s.push('\n');
    }
    s
}

/// Model-ready form of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    /// `[CLS, x_1, ...]`, at most `n_max` ids.
    pub x_ids: Vec<usize>,
    /// `[BOS, y_1, ..., EOS]`, at most `m_max` ids.
    pub y_ids: Vec<usize>,
    /// Content-word counts over the whole (untruncated) document.
    pub x_bow: Vec<u32>,
}

impl EncodedExample {
    pub fn bow_f64(&self) -> Vec<f64> {
        self.x_bow.iter().map(|&c| f64::from(c)).collect()
    }
}

pub fn encode(
    record: &DocumentRecord,
    vocab: &Vocabulary,
    bow: &BowVocabulary,
    n_max: usize,
    m_max: usize,
) -> EncodedExample {
    assert!(n_max > 1 && m_max > 2, "n_max > 1 and m_max > 2 required");
    let doc = tokenize(&record.document);
    let mut x_bow = vec![0u32; bow.len()];
    for t in &doc {
        if let Some(i) = bow.id(t) {
            x_bow[i] += 1;
        }
    }
    let x_ids = std::iter::once(CLS)
        .chain(doc.iter().take(n_max - 1).map(|t| vocab.id_or_unk(t)))
        .collect();
    let summary = tokenize(&record.summary);
    let y_ids = std::iter::once(BOS)
        .chain(summary.iter().take(m_max - 2).map(|t| vocab.id_or_unk(t)))
        .chain(std::iter::once(EOS))
        .collect();
    EncodedExample { x_ids, y_ids, x_bow }
}

/// Right-padded batch. The decoder input replaces BOS with CLS as its start
/// symbol and the target is the input shifted left by one.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    /// `size * src_len` ids.
    pub src_ids: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_mask: Vec<bool>,
    /// `[size, V_bow]` counts.
    pub bow: Tensor,
}

impl Batch {
    pub fn from_examples(examples: &[&EncodedExample]) -> Result<Self> {
        let size = examples.len();
        if size == 0 {
            return Err(Error::Corpus("cannot batch zero examples".into()));
        }
        let src_len = examples.iter().map(|e| e.x_ids.len()).max().unwrap_or(0);
        let tgt_len = examples
            .iter()
            .map(|e| e.y_ids.len().saturating_sub(1))
            .max()
            .unwrap_or(0);
        let v_bow = examples[0].x_bow.len();
        let mut b = Batch {
            size,
            src_len,
            src_ids: vec![PAD; size * src_len],
            src_mask: vec![false; size * src_len],
            tgt_len,
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            tgt_mask: vec![false; size * tgt_len],
            bow: Tensor::zeros(&[size, v_bow]),
        };
        for (i, e) in examples.iter().enumerate() {
            if e.x_bow.len() != v_bow {
                return Err(Error::Corpus("examples disagree on BoW dimension".into()));
            }
            for (j, &id) in e.x_ids.iter().enumerate() {
                b.src_ids[i * src_len + j] = id;
                b.src_mask[i * src_len + j] = true;
            }
            let m = e.y_ids.len().saturating_sub(1);
            for j in 0..m {
                b.tgt_in[i * tgt_len + j] = if j == 0 { CLS } else { e.y_ids[j] };
                b.tgt_out[i * tgt_len + j] = e.y_ids[j + 1];
                b.tgt_mask[i * tgt_len + j] = true;
            }
            for (k, &c) in e.x_bow.iter().enumerate() {
                b.bow.data_mut()[i * v_bow + k] = f64::from(c);
            }
        }
        Ok(b)
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }
}

/// Order-preserving split into batches of at most `size` examples.
pub fn batches(examples: &[EncodedExample], size: usize) -> Result<Vec<Batch>> {
    if size == 0 {
        return Err(Error::Corpus("batch size must be at least 1".into()));
    }
    if examples.is_empty() {
        return Err(Error::Corpus("cannot batch an empty example list".into()));
    }
    examples
        .chunks(size)
        .map(|c| Batch::from_examples(&c.iter().collect::<Vec<_>>()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub mean_document_len: f64,
    pub mean_summary_len: f64,
}

/// Record count and mean token lengths of documents and summaries.
pub fn corpus_stats(records: &[DocumentRecord]) -> CorpusStats {
    if records.is_empty() {
        return CorpusStats {
            count: 0,
            mean_document_len: 0.0,
            mean_summary_len: 0.0,
        };
    }
    let n = records.len() as f64;
    let (mut d, mut s) = (0usize, 0usize);
    for r in records {
        d += tokenize(&r.document).len();
        s += tokenize(&r.summary).len();
    }
    CorpusStats {
        count: records.len(),
        mean_document_len: d as f64 / n,
        mean_summary_len: s as f64 / n,
    }
}
