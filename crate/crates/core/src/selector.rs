//! k-shot demonstration selection by question-embedding cosine similarity.
//!
//! The default embedder is fully offline: hashed character trigrams into 512
//! buckets, L2-normalized. A remote embedding endpoint can be swapped in; on
//! provider failure the batch falls back to the offline backend.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::llm::LlmError;

pub const EMBED_DIM: usize = 512;

/// A training example with its unit-normalized question embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedExample {
    pub question: String,
    pub sql: String,
    pub vector: Vec<f32>,
}

/// Deterministic offline embedder: FNV-1a hashed character trigrams counted
/// into [`EMBED_DIM`] buckets, then L2-normalized. Texts shorter than three
/// characters hash as a single gram.
pub fn embed(text: &str) -> Vec<f32> {
    let chars: Vec<char> = text.chars().collect();
    let mut counts = vec![0f32; EMBED_DIM];
    if chars.is_empty() {
        return counts;
    }
    if chars.len() < 3 {
        counts[bucket(&chars)] += 1.0;
    } else {
        for win in chars.windows(3) {
            counts[bucket(win)] += 1.0;
        }
    }
    let norm = counts.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 0.0 {
        for v in &mut counts {
            *v /= norm;
        }
    }
    counts
}

fn bucket(gram: &[char]) -> usize {
    // FNV-1a over the UTF-8 bytes of the gram.
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut buf = [0u8; 4];
    for &c in gram {
        for &b in c.encode_utf8(&mut buf).as_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    (hash % EMBED_DIM as u64) as usize
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which embedding backend to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbedBackend {
    /// Remote embedding endpoint (`POST {base}/v1/embeddings`).
    Remote,
    /// Offline trigram hashing; the default and the CI backend.
    #[default]
    Offline,
}

/// Embed one text via the remote endpoint.
pub fn embed_remote(
    base_url: &str,
    api_key: &str,
    model: &str,
    text: &str,
) -> Result<Vec<f32>, LlmError> {
    let url = format!("{}/v1/embeddings", base_url.trim_end_matches('/'));
    let body = serde_json::json!({ "model": model, "input": text });
    let resp = ureq::post(&url)
        .set("Authorization", &format!("Bearer {api_key}"))
        .send_json(body);
    let resp = match resp {
        Ok(r) => r,
        Err(ureq::Error::Status(status, r)) => {
            return Err(LlmError::Provider {
                status,
                body: r.into_string().unwrap_or_default(),
            })
        }
        Err(ureq::Error::Transport(t)) => return Err(LlmError::Transport(t.to_string())),
    };
    let v: serde_json::Value = resp
        .into_json()
        .map_err(|e| LlmError::Transport(e.to_string()))?;
    let raw = v
        .pointer("/data/0/embedding")
        .and_then(|e| e.as_array())
        .ok_or_else(|| LlmError::Transport("embedding response missing data".into()))?;
    let mut vec: Vec<f32> = raw
        .iter()
        .map(|x| x.as_f64().unwrap_or(0.0) as f32)
        .collect();
    let norm = vec.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 0.0 {
        for v in &mut vec {
            *v /= norm;
        }
    }
    Ok(vec)
}

/// Embed a pool of (question, sql) pairs with the offline backend.
pub fn embed_pool(pairs: &[(String, String)]) -> Vec<EmbeddedExample> {
    pairs
        .iter()
        .map(|(q, s)| EmbeddedExample {
            question: q.clone(),
            sql: s.clone(),
            vector: embed(q),
        })
        .collect()
}

/// Top-k pool entries by cosine similarity to the query question.
///
/// Ties break by pool index ascending; the result is ordered
/// most-similar-LAST so the closest example sits adjacent to the query in
/// the prompt. A pool smaller than k returns the entire pool with a warning.
pub fn select_shots(
    query_question: &str,
    pool: &[EmbeddedExample],
    k: usize,
) -> Vec<(String, String)> {
    if k == 0 {
        return Vec::new();
    }
    if pool.len() < k {
        log::warn!(
            "shot pool has {} examples, fewer than k={k}; returning all",
            pool.len()
        );
    }
    let qv = embed(query_question);
    let mut scored: Vec<(f32, usize)> = pool
        .iter()
        .enumerate()
        .map(|(i, e)| (cosine(&qv, &e.vector), i))
        .collect();
    // Descending by similarity, ascending by index on ties.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut top: Vec<&(f32, usize)> = scored.iter().take(k).collect();
    top.reverse(); // most similar last
    top.iter()
        .map(|(_, i)| (pool[*i].question.clone(), pool[*i].sql.clone()))
        .collect()
}

const SIDECAR_MAGIC: &[u8; 8] = b"QSEMB001";

#[derive(Debug, thiserror::Error)]
pub enum SidecarError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a sidecar file (bad magic)")]
    BadMagic,
    #[error("sidecar content hash does not match the pool")]
    StaleHash,
    #[error("sidecar is truncated or malformed")]
    Malformed,
}

/// 64-bit FNV-1a over every question and sql in order; invalidates the
/// sidecar when the dataset changes.
pub fn pool_content_hash(pairs: &[(String, String)]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(0x100000001b3);
    };
    for (q, s) in pairs {
        eat(q.as_bytes());
        eat(s.as_bytes());
    }
    hash
}

/// Persist precomputed pool embeddings beside the dataset.
///
/// Layout: magic, u64 content hash, u32 dimension, u32 count, row-major f32
/// little-endian vectors, then length-prefixed question/sql strings.
pub fn write_sidecar(path: &Path, pool: &[EmbeddedExample], content_hash: u64) -> Result<(), SidecarError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(SIDECAR_MAGIC)?;
    f.write_all(&content_hash.to_le_bytes())?;
    f.write_all(&(EMBED_DIM as u32).to_le_bytes())?;
    f.write_all(&(pool.len() as u32).to_le_bytes())?;
    for e in pool {
        for v in &e.vector {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    for e in pool {
        for s in [&e.question, &e.sql] {
            f.write_all(&(s.len() as u32).to_le_bytes())?;
            f.write_all(s.as_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Load a sidecar, verifying the magic and the pool content hash.
pub fn read_sidecar(path: &Path, expected_hash: u64) -> Result<Vec<EmbeddedExample>, SidecarError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| SidecarError::Malformed)?;
    if &magic != SIDECAR_MAGIC {
        return Err(SidecarError::BadMagic);
    }
    let mut u64b = [0u8; 8];
    f.read_exact(&mut u64b).map_err(|_| SidecarError::Malformed)?;
    if u64::from_le_bytes(u64b) != expected_hash {
        return Err(SidecarError::StaleHash);
    }
    let mut u32b = [0u8; 4];
    f.read_exact(&mut u32b).map_err(|_| SidecarError::Malformed)?;
    let dim = u32::from_le_bytes(u32b) as usize;
    f.read_exact(&mut u32b).map_err(|_| SidecarError::Malformed)?;
    let count = u32::from_le_bytes(u32b) as usize;
    if dim != EMBED_DIM {
        return Err(SidecarError::Malformed);
    }
    let mut vectors = Vec::with_capacity(count);
    let mut f32b = [0u8; 4];
    for _ in 0..count {
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            f.read_exact(&mut f32b).map_err(|_| SidecarError::Malformed)?;
            v.push(f32::from_le_bytes(f32b));
        }
        vectors.push(v);
    }
    let read_str = |f: &mut dyn Read| -> Result<String, SidecarError> {
        let mut lb = [0u8; 4];
        f.read_exact(&mut lb).map_err(|_| SidecarError::Malformed)?;
        let len = u32::from_le_bytes(lb) as usize;
        let mut buf = vec![0u8; len];
        f.read_exact(&mut buf).map_err(|_| SidecarError::Malformed)?;
        String::from_utf8(buf).map_err(|_| SidecarError::Malformed)
    };
    let mut out = Vec::with_capacity(count);
    for vector in vectors {
        let question = read_str(&mut f)?;
        let sql = read_str(&mut f)?;
        out.push(EmbeddedExample {
            question,
            sql,
            vector,
        });
    }
    Ok(out)
}
