use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::{tokenize, DocumentRecord};
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;

/// Surface forms of the reserved ids, in id order. The tokenizer splits
/// brackets off, so no corpus token can collide with them.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[BOS]", "[EOS]"];

const VOCAB_HEADER: &str = "#version=1";

/// Token-id bijection with per-token corpus counts.
#[derive(Debug, Clone, PartialEq)]
struct Table {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Table {
    fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut tokens = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        for (i, (tok, count)) in entries.into_iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token {tok:?}")));
            }
            tokens.push(tok);
            counts.push(count);
        }
        Ok(Self {
            tokens,
            counts,
            index,
        })
    }

    fn to_tsv(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{t}\t{i}\t{c}");
        }
        out
    }

    fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(VOCAB_HEADER) {
            return Err(Error::Corpus(format!("vocab file must start with {VOCAB_HEADER}")));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parsed = match fields.as_slice() {
                [tok, id, count] => id
                    .parse::<usize>()
                    .ok()
                    .zip(count.parse::<u64>().ok())
                    .map(|(id, c)| (tok.to_string(), id, c)),
                _ => None,
            };
            let (tok, id, count) =
                parsed.ok_or_else(|| Error::Corpus(format!("malformed vocab line {}", n + 2)))?;
            if id != entries.len() {
                return Err(Error::Corpus(format!(
                    "vocab ids must be dense and ordered; line {} has id {id}",
                    n + 2
                )));
            }
            entries.push((tok, count));
        }
        Self::from_entries(entries)
    }
}

/// Summarizer vocabulary. Ids 0..5 are PAD, UNK, CLS, BOS, EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    table: Table,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if entries.get(i).map(|e| e.0.as_str()) != Some(*s) {
                return Err(Error::Corpus(format!("reserved id {i} must be {s}")));
            }
        }
        Ok(Self {
            table: Table::from_entries(entries)?,
        })
    }

    /// Reserved tokens followed by `words` in the given order.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let entries = SPECIAL_TOKENS
            .iter()
            .map(|s| (s.to_string(), 0))
            .chain(words.iter().map(|w| (w.as_ref().to_string(), 0)))
            .collect();
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.table.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.table.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.table.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.table.counts[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.table.tokens
    }

    /// Maps ids back to surface tokens; out-of-range ids become `[UNK]`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    /// Space-joined words, stopping at EOS and skipping the other specials.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        for &i in ids {
            if i == EOS {
                break;
            }
            if i == PAD || i == CLS || i == BOS {
                continue;
            }
            words.push(self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]));
        }
        words.join(" ")
    }

    pub fn to_tsv(&self) -> String {
        self.table.to_tsv()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let t = Table::from_tsv(text)?;
        Self::from_entries(t.tokens.into_iter().zip(t.counts).collect())
    }
}

/// Topic-model vocabulary: content words only.
#[derive(Debug, Clone, PartialEq)]
pub struct BowVocabulary {
    table: Table,
    stopwords: BTreeSet<String>,
}

impl BowVocabulary {
    pub fn from_words<S: AsRef<str>>(words: &[S], stopwords: BTreeSet<String>) -> Result<Self> {
        let entries = words.iter().map(|w| (w.as_ref().to_string(), 0)).collect();
        Self::checked(Table::from_entries(entries)?, stopwords)
    }

    fn checked(table: Table, stopwords: BTreeSet<String>) -> Result<Self> {
        if let Some(t) = table.tokens.iter().find(|t| stopwords.contains(*t)) {
            return Err(Error::Corpus(format!("stopword {t:?} in BoW vocabulary")));
        }
        Ok(Self { table, stopwords })
    }

    pub fn len(&self) -> usize {
        self.table.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.table.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.table.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.table.tokens
    }

    pub fn stopwords(&self) -> &BTreeSet<String> {
        &self.stopwords
    }

    pub fn to_tsv(&self) -> String {
        self.table.to_tsv()
    }

    pub fn from_tsv(text: &str, stopwords: BTreeSet<String>) -> Result<Self> {
        Self::checked(Table::from_tsv(text)?, stopwords)
    }
}

/// Builds both vocabularies from documents and summaries.
///
/// Ordering is by descending corpus frequency with lexicographic tie-breaks.
/// `bow_max_size` keeps only the most frequent content words.
pub fn build_vocabs(
    records: &[DocumentRecord],
    min_count: u64,
    stopwords: &BTreeSet<String>,
    bow_max_size: Option<usize>,
) -> Result<(Vocabulary, BowVocabulary)> {
    if min_count < 1 {
        return Err(Error::Corpus("min_count must be at least 1".into()));
    }
    if records.is_empty() {
        return Err(Error::Corpus("cannot build vocabularies from an empty corpus".into()));
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    for r in records {
        for tok in tokenize(&r.document).into_iter().chain(tokenize(&r.summary)) {
            *freq.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = freq
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let specials = SPECIAL_TOKENS.iter().map(|s| (s.to_string(), 0));
    let vocab = Vocabulary::from_entries(specials.chain(ranked.iter().cloned()).collect())?;

    let mut content: Vec<(String, u64)> = ranked
        .into_iter()
        .filter(|(t, _)| !stopwords.contains(t))
        .collect();
    if let Some(cap) = bow_max_size {
        content.truncate(cap);
    }
    let bow = BowVocabulary::checked(Table::from_entries(content)?, stopwords.clone())?;
    Ok((vocab, bow))
}

/// The bundled English list (179 function words).
pub fn default_stopwords() -> BTreeSet<String> {
    parse_stopwords(include_str!("../../data/stopwords_en.txt"))
}

pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stopwords(&text))
}
