//! Query/FAQ vectors, cosine top-k retrieval, and retrieval metrics.
//!
//! Base vectors come from an [`EmbeddingStore`]: fixture vectors when
//! provided, otherwise a deterministic signed hashed character-trigram
//! embedder. Retrieval similarity is the cosine of the vectors mapped through
//! a learnable square projection ([`ProjectionHead`]), which is what
//! contrastive training updates.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::FaqCorpus;
use crate::error::{Error, Result};
use crate::exec;
use crate::seeds;
use crate::util::write_atomic;

mod loss;
mod train;

pub use loss::{infonce_loss, triplet_loss};
pub use train::{train_head, HeadTrainConfig, LossKind};

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 8;
const DEFAULT_HASH_SEED: u64 = 0x6661_7176_6563_7331;

/// A fixed-dimension real vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Array1<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "embedding vector has non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

pub(crate) fn cosine_arrays(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity in `[-1, 1]`. Errors on dimension mismatch or a zero
/// vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_arrays(&a.values, &b.values)
}

fn fnv1a(bytes: impl Iterator<Item = u8>, seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seeds::mix(seed);
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed hashed character trigrams over the whitespace-normalized,
/// lowercased text, L2-normalized. Deterministic in (text, dimension, seed).
fn trigram_embed(text: &str, dimension: usize, seed: u64) -> Array1<f64> {
    let normalized = text
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    let padded: Vec<char> = std::iter::once(' ')
        .chain(normalized.chars())
        .chain(std::iter::once(' '))
        .collect();
    let mut acc = Array1::<f64>::zeros(dimension);
    if padded.len() >= 3 {
        let mut buf = [0u8; 4];
        for window in padded.windows(3) {
            let h = fnv1a(
                window
                    .iter()
                    .flat_map(|&c| c.encode_utf8(&mut buf).as_bytes().to_vec()),
                seed,
            );
            let bucket = (h % dimension as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
    }
    let norm = acc.dot(&acc).sqrt();
    if norm == 0.0 {
        acc[0] = 1.0;
        return acc;
    }
    acc / norm
}

/// Base vectors plus the hashed-trigram fallback embedder.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dimension: usize,
    base_vectors: BTreeMap<String, EmbeddingVector>,
    hash_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    dimension: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dimension: usize) -> Self {
        Self::with_hash_seed(dimension, DEFAULT_HASH_SEED)
    }

    pub fn with_hash_seed(dimension: usize, hash_seed: u64) -> Self {
        Self {
            dimension,
            base_vectors: BTreeMap::new(),
            hash_seed,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Registers a fixture vector served verbatim for `text`.
    pub fn insert(&mut self, text: impl Into<String>, vector: EmbeddingVector) -> Result<()> {
        check_dims(self.dimension, vector.dim())?;
        self.base_vectors.insert(text.into(), vector);
        Ok(())
    }

    /// The stored vector for `text` if present, otherwise the fallback
    /// trigram embedding. Always returns the same vector for the same text.
    pub fn embed(&self, text: &str) -> EmbeddingVector {
        if let Some(v) = self.base_vectors.get(text) {
            return v.clone();
        }
        EmbeddingVector {
            values: trigram_embed(text, self.dimension, self.hash_seed),
        }
    }

    /// Loads the embedding fixture format
    /// `{"dimension": d, "vectors": {"<text>": [floats]}}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)?;
        let file: StoreFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut store = Self::new(file.dimension);
        for (text, values) in file.vectors {
            store.insert(text, EmbeddingVector::new(Array1::from_vec(values))?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = StoreFile {
            dimension: self.dimension,
            vectors: self
                .base_vectors
                .iter()
                .map(|(k, v)| (k.clone(), v.values.to_vec()))
                .collect(),
        };
        let json = serde_json::to_string_pretty(&file).expect("store serializes");
        write_atomic(path.as_ref(), json.as_bytes())
    }
}

/// The learnable square map defining retrieval similarity, with the
/// contrastive-training temperature and batch size.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub(crate) w: Array2<f64>,
    tau: f64,
    batch_size: usize,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    dimension: usize,
    tau: f64,
    #[serde(rename = "W")]
    w: Vec<f64>,
}

impl ProjectionHead {
    pub fn new(w: Array2<f64>, tau: f64, batch_size: usize) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::Validation(format!(
                "projection must be square, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "projection has non-finite entries".into(),
            ));
        }
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::Validation(format!(
                "tau must be positive, got {tau}"
            )));
        }
        if batch_size < 2 {
            return Err(Error::Validation(format!(
                "batch size must be at least 2, got {batch_size}"
            )));
        }
        Ok(Self { w, tau, batch_size })
    }

    pub fn identity(dimension: usize) -> Self {
        Self {
            w: Array2::eye(dimension),
            tau: DEFAULT_TAU,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn identity_with(dimension: usize, tau: f64, batch_size: usize) -> Result<Self> {
        Self::new(Array2::eye(dimension), tau, batch_size)
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    pub(crate) fn project_array(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        check_dims(self.dim(), v.len())?;
        Ok(self.w.dot(v))
    }

    /// Persisted as `{"dimension", "tau", "W"}` with `W` row-major.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = HeadFile {
            dimension: self.dim(),
            tau: self.tau,
            w: self.w.iter().copied().collect(),
        };
        let json = serde_json::to_string(&file).expect("head serializes");
        write_atomic(path.as_ref(), json.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)?;
        let file: HeadFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let d = file.dimension;
        if file.w.len() != d * d {
            return Err(Error::Validation(format!(
                "head file W has {} entries, expected {}",
                file.w.len(),
                d * d
            )));
        }
        let w = Array2::from_shape_vec((d, d), file.w).expect("shape checked");
        Self::new(w, file.tau, DEFAULT_BATCH_SIZE)
    }
}

/// Cosine similarity of `a` and `b` after projection through `head`.
pub fn project_sim(head: &ProjectionHead, a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let ua = head.project_array(&a.values)?;
    let ub = head.project_array(&b.values)?;
    cosine_arrays(&ua, &ub)
}

/// Ranked retrieval output: `(faq_id, score)` with non-increasing scores and
/// distinct ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    ranked: Vec<(String, f64)>,
}

impl RetrievalResult {
    pub fn ranked(&self) -> &[(String, f64)] {
        &self.ranked
    }

    pub fn top1(&self) -> (&str, f64) {
        let (id, score) = &self.ranked[0];
        (id, *score)
    }

    pub fn contains(&self, faq_id: &str) -> bool {
        self.ranked.iter().any(|(id, _)| id == faq_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.ranked.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Projected corpus vectors for repeated retrieval against one
/// (store, head, corpus) triple.
pub struct RetrievalIndex<'a> {
    store: &'a EmbeddingStore,
    head: &'a ProjectionHead,
    corpus: &'a FaqCorpus,
    ids: Vec<String>,
    projected: Vec<Array1<f64>>,
}

impl<'a> RetrievalIndex<'a> {
    pub fn new(
        store: &'a EmbeddingStore,
        head: &'a ProjectionHead,
        corpus: &'a FaqCorpus,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vectors = exec::map_ordered(corpus.entries(), |entry| store.embed(&entry.qna_text()));
        let mut ids = Vec::with_capacity(corpus.len());
        let mut projected = Vec::with_capacity(corpus.len());
        for (entry, vector) in corpus.entries().iter().zip(vectors) {
            let p = head.project_array(vector.values())?;
            if p.dot(&p) == 0.0 {
                return Err(Error::ZeroVector);
            }
            ids.push(entry.id.clone());
            projected.push(p);
        }
        Ok(Self {
            store,
            head,
            corpus,
            ids,
            projected,
        })
    }

    pub fn corpus(&self) -> &FaqCorpus {
        self.corpus
    }

    pub fn store(&self) -> &EmbeddingStore {
        self.store
    }

    pub fn head(&self) -> &ProjectionHead {
        self.head
    }

    pub fn project_query(&self, text: &str) -> Result<Array1<f64>> {
        let v = self.store.embed(text);
        self.head.project_array(v.values())
    }

    /// Projected similarity between an already-projected query and the QnA
    /// vector of `faq_id`.
    pub fn similarity_to(&self, projected_query: &Array1<f64>, faq_id: &str) -> Result<f64> {
        let idx = self
            .ids
            .iter()
            .position(|id| id == faq_id)
            .ok_or_else(|| Error::Validation(format!("unknown FAQ id \"{faq_id}\"")))?;
        cosine_arrays(projected_query, &self.projected[idx])
    }

    /// Top-k FAQ ids by projected query-QnA cosine, ties broken by ascending
    /// id.
    pub fn query(&self, text: &str, k: usize) -> Result<RetrievalResult> {
        if k < 1 || k > self.ids.len() {
            return Err(Error::Validation(format!(
                "k must be in 1..={}, got {k}",
                self.ids.len()
            )));
        }
        let q = self.project_query(text)?;
        if q.dot(&q) == 0.0 {
            return Err(Error::ZeroVector);
        }
        let mut scored: Vec<(String, f64)> = self
            .ids
            .iter()
            .zip(&self.projected)
            .map(|(id, p)| Ok((id.clone(), cosine_arrays(&q, p)?)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(RetrievalResult { ranked: scored })
    }
}

/// One-shot top-k retrieval; see [`RetrievalIndex::query`].
pub fn retrieve_topk(
    store: &EmbeddingStore,
    head: &ProjectionHead,
    corpus: &FaqCorpus,
    query: &str,
    k: usize,
) -> Result<RetrievalResult> {
    RetrievalIndex::new(store, head, corpus)?.query(query, k)
}

/// Top-1 / top-3 retrieval accuracy over labeled queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub top1: f64,
    pub top3: f64,
}

/// Fraction of `labeled` queries whose target FAQ ranks first / within the
/// top three.
pub fn eval_retrieval(
    store: &EmbeddingStore,
    head: &ProjectionHead,
    corpus: &FaqCorpus,
    labeled: &[(String, String)],
) -> Result<RetrievalMetrics> {
    if labeled.is_empty() {
        return Err(Error::InsufficientData(
            "eval_retrieval needs at least one labeled query".into(),
        ));
    }
    for (_, faq_id) in labeled {
        if !corpus.contains(faq_id) {
            return Err(Error::Validation(format!(
                "label references unknown FAQ id \"{faq_id}\""
            )));
        }
    }
    let index = RetrievalIndex::new(store, head, corpus)?;
    let k = corpus.len().min(3);
    let hits = exec::map_ordered(labeled, |(query, faq_id)| {
        let result = index.query(query, k)?;
        let top1 = result.top1().0 == faq_id;
        let top3 = result.contains(faq_id);
        Ok::<_, Error>((top1, top3))
    });
    let mut top1 = 0usize;
    let mut top3 = 0usize;
    for hit in hits {
        let (h1, h3) = hit?;
        top1 += h1 as usize;
        top3 += h3 as usize;
    }
    let n = labeled.len() as f64;
    Ok(RetrievalMetrics {
        top1: top1 as f64 / n,
        top3: top3 as f64 / n,
    })
}

/// Mean top-1 retrieval score for in-domain vs out-of-domain query groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodSeparation {
    pub mean_top1_in: f64,
    pub mean_top1_ood: f64,
}

impl OodSeparation {
    pub fn gap(&self) -> f64 {
        self.mean_top1_in - self.mean_top1_ood
    }
}

pub fn ood_separation(
    store: &EmbeddingStore,
    head: &ProjectionHead,
    corpus: &FaqCorpus,
    in_domain: &[String],
    ood: &[String],
) -> Result<OodSeparation> {
    if in_domain.is_empty() || ood.is_empty() {
        return Err(Error::InsufficientData(
            "ood_separation needs non-empty in-domain and OOD query lists".into(),
        ));
    }
    let index = RetrievalIndex::new(store, head, corpus)?;
    let mean_top1 = |queries: &[String]| -> Result<f64> {
        let scores = exec::map_ordered(queries, |q| Ok::<_, Error>(index.query(q, 1)?.top1().1));
        let mut total = 0.0;
        for s in scores {
            total += s?;
        }
        Ok(total / queries.len() as f64)
    };
    Ok(OodSeparation {
        mean_top1_in: mean_top1(in_domain)?,
        mean_top1_ood: mean_top1(ood)?,
    })
}
