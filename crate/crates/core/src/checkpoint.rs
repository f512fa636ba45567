//! Versioned binary parameter container.
//!
//! ```text
//! b"TOPICFLW" | u64 LE header length | JSON header | f64 LE tensor data
//! ```
//!
//! The header lists tensors by name and shape in data order.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ntm::NtmConfig;
use crate::numerics::{ParamStore, Tensor};
use crate::summarizer::TransformerConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TOPICFLW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizerMeta {
    pub transformer: TransformerConfig,
    pub vocab_size: usize,
    /// `false` for a baseline trained without the topic path.
    pub topic_path: bool,
    /// Constant gate value used instead of the learned gates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_gate: Option<f64>,
    pub n_max: usize,
    pub m_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ntm: NtmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summarizer: Option<SummarizerMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Summarizer vocabulary as TSV, when saved with one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
    /// BoW vocabulary as TSV.
    pub bow_vocab: String,
    pub stopwords: Vec<String>,
    #[serde(default)]
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub store: ParamStore,
}

impl Checkpoint {
    /// Builds a checkpoint over every tensor of `store`, filling the tensor
    /// table of `header`.
    pub fn new(mut header: Header, store: ParamStore) -> Self {
        header.format_version = FORMAT_VERSION;
        header.tensors = store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Self { header, store }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("serializable header");
        let floats: usize = self.store.iter().map(|(_, p)| p.value.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a topicflow checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Json {
            context: "checkpoint header".into(),
            source: e,
        })?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format_version {}",
                header.format_version
            )));
        }
        let mut data = &bytes[16 + len..];
        let mut store = ParamStore::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 8 * n {
                return Err(Error::Checkpoint(format!("truncated data for tensor {}", entry.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            if store.find(&entry.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
            }
            store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { header, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Copies values of same-named tensors from `src` into `dst`; returns how
/// many were copied. Shapes must agree.
pub fn copy_matching(src: &ParamStore, dst: &mut ParamStore) -> Result<usize> {
    let mut n = 0;
    for (_, p) in src.iter() {
        if let Some(id) = dst.find(&p.name) {
            if dst.value(id).shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match {:?}",
                    p.name,
                    p.value.shape(),
                    dst.value(id).shape()
                )));
            }
            *dst.value_mut(id) = p.value.clone();
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::ntm::Ntm;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        let cfg = NtmConfig::new(6, 4, 3, 2);
        Ntm::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let header = Header {
            format_version: 0,
            config: ModelConfig {
                ntm: cfg,
                summarizer: None,
            },
            vocab: None,
            bow_vocab: "#version=1\n".into(),
            stopwords: vec!["the".into()],
            step: 7,
            tensors: Vec::new(),
        };
        Checkpoint::new(header, store)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/ntm.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.header.format_version, 1);
        for ((_, a), (_, b)) in ck.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert!(Ntm::from_store(ck.header.config.ntm, &back.store).is_ok());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
