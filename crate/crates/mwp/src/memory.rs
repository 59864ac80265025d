//! Question memory: co-occurrence embeddings and exact retrieval.
//!
//! The embedder assigns each question token a vector by factorising a
//! positive
//! pointwise-mutual-information matrix (symmetric co-occurrence window of 5)
//! with a truncated SVD; a question embeds as the L2-normalised mean of its
//! token vectors. A [`MemoryIndex`] stores one normalised row per solved
//! problem, and [`MemoryIndex::search`] scores a query against every row
//! (exact maximum-inner-product search), returning the top `k` with
//! softmax-normalised probabilities.
//!
//! # On-disk layout
//!
//! [`MemoryStore::save`] writes three files into a directory:
//!
//! * `embedder.bin`: magic `MWPE`, version `u32`, dim `u64`, token count
//!   `u64`, then per token a length-prefixed UTF-8 string followed by `dim`
//!   little-endian `f64` values.
//! * `index.bin`: magic `MWPI`, version `u32`, dim `u64`, row count `u64`,
//!   then per row a length-prefixed id and `dim` little-endian `f64` values.
//! * `problems.jsonl`: the stored problems, as written by
//!   [`corpus::save_jsonl`](crate::corpus::save_jsonl).

use crate::corpus::{self, CorpusError, Dataset, Problem, Split};
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Co-occurrence window radius used by [`fit_embedder`].
pub const WINDOW: usize = 5;

const EMBEDDER_MAGIC: &[u8; 4] = b"MWPE";
const INDEX_MAGIC: &[u8; 4] = b"MWPI";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("embedding dim {dim} must be between 1 and the question vocabulary size {vocab}")]
    BadDim { dim: usize, vocab: usize },
    #[error("expected a vector of dim {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Token vectors fitted on training questions.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    dim: usize,
    tokens: Vec<String>,
    by_token: HashMap<String, usize>,
    /// Row-major `tokens.len() × dim`.
    rows: Vec<f64>,
}

/// A question embedding plus the flag for the out-of-vocabulary fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionEmbedding {
    pub vector: Vec<f64>,
    /// True when no token carried signal and the fixed unit fallback was used.
    pub fallback: bool,
}

impl Embedder {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Construct directly from token vectors (used by tests and tools).
    pub fn from_vectors(tokens: Vec<String>, dim: usize, rows: Vec<f64>) -> Embedder {
        assert_eq!(rows.len(), tokens.len() * dim, "rows must be tokens × dim");
        let by_token = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Embedder { dim, tokens, by_token, rows }
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.by_token.get(token).map(|&i| &self.rows[i * self.dim..(i + 1) * self.dim])
    }

    /// Mean of token vectors (zero for unknown tokens), L2-normalised.
    /// A question with no usable signal maps to the first unit basis vector
    /// with `fallback` set.
    pub fn embed_question(&self, tokens: &[String]) -> QuestionEmbedding {
        let mut mean = vec![0.0; self.dim];
        if !tokens.is_empty() {
            for t in tokens {
                if let Some(row) = self.vector(t) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
            }
            for m in mean.iter_mut() {
                *m /= tokens.len() as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            let mut v = vec![0.0; self.dim];
            v[0] = 1.0;
            return QuestionEmbedding { vector: v, fallback: true };
        }
        for m in mean.iter_mut() {
            *m /= norm;
        }
        QuestionEmbedding { vector: mean, fallback: false }
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(EMBEDDER_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        buf.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for (i, t) in self.tokens.iter().enumerate() {
            write_str(&mut buf, t);
            for v in &self.rows[i * self.dim..(i + 1) * self.dim] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|source| MemoryError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Embedder, MemoryError> {
        let bytes = fs::read(path).map_err(|source| MemoryError::Io { path: path.into(), source })?;
        let mut r = ByteReader::new(&bytes, path);
        r.expect_magic(EMBEDDER_MAGIC)?;
        r.expect_version(FORMAT_VERSION)?;
        let dim = r.read_u64()? as usize;
        let count = r.read_u64()? as usize;
        let mut tokens = Vec::with_capacity(count);
        let mut rows = Vec::with_capacity(count * dim);
        for _ in 0..count {
            tokens.push(r.read_str()?);
            for _ in 0..dim {
                rows.push(r.read_f64()?);
            }
        }
        r.expect_end()?;
        Ok(Embedder::from_vectors(tokens, dim, rows))
    }
}

/// Fit token vectors on the questions of a training set.
///
/// Builds the PPMI matrix of token co-occurrences within a symmetric window
/// of [`WINDOW`], factorises it with an SVD, and keeps the top `dim`
/// components scaled by the square root of their singular values. `dim`
/// must not exceed the question vocabulary size. Intended for desk-scale
/// vocabularies: the dense matrix is quadratic in distinct tokens.
pub fn fit_embedder(train: &Dataset, dim: usize) -> Result<Embedder, MemoryError> {
    let mut tokens: Vec<String> = Vec::new();
    let mut by_token: HashMap<String, usize> = HashMap::new();
    for p in train.problems() {
        for t in &p.question {
            if !by_token.contains_key(t) {
                by_token.insert(t.clone(), tokens.len());
                tokens.push(t.clone());
            }
        }
    }
    let n = tokens.len();
    if dim == 0 || dim > n {
        return Err(MemoryError::BadDim { dim, vocab: n });
    }
    let mut counts = DMatrix::<f64>::zeros(n, n);
    for p in train.problems() {
        let ids: Vec<usize> = p.question.iter().map(|t| by_token[t]).collect();
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len().min(i + WINDOW + 1) {
                counts[(ids[i], ids[j])] += 1.0;
                counts[(ids[j], ids[i])] += 1.0;
            }
        }
    }
    let total: f64 = counts.sum();
    let row_sums: Vec<f64> = (0..n).map(|i| counts.row(i).sum()).collect();
    let mut ppmi = DMatrix::<f64>::zeros(n, n);
    if total > 0.0 {
        for i in 0..n {
            for j in 0..n {
                let c = counts[(i, j)];
                if c > 0.0 {
                    let v = (c * total / (row_sums[i] * row_sums[j])).ln();
                    if v > 0.0 {
                        ppmi[(i, j)] = v;
                    }
                }
            }
        }
    }
    let svd = ppmi.svd(true, false);
    let u = svd.u.expect("svd requested u");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut rows = vec![0.0; n * dim];
    for (k, &col) in order.iter().take(dim).enumerate() {
        let scale = svd.singular_values[col].max(0.0).sqrt();
        for i in 0..n {
            rows[i * dim + k] = u[(i, col)] * scale;
        }
    }
    Ok(Embedder { dim, tokens, by_token, rows })
}

/// One retrieved problem with its raw inner-product score and its softmax
/// probability among the returned results.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Retrieval {
    pub id: String,
    pub score: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Descending by score; ties broken by ascending id.
    pub results: Vec<Retrieval>,
    /// Fewer than `k` candidates existed after exclusion.
    pub truncated: bool,
}

/// Normalised question embeddings for a set of solved problems.
#[derive(Debug, Clone)]
pub struct MemoryIndex {
    dim: usize,
    ids: Vec<String>,
    /// Row-major `ids.len() × dim`.
    rows: Vec<f64>,
}

impl MemoryIndex {
    /// Embed every question of `dataset`.
    pub fn build(embedder: &Embedder, dataset: &Dataset) -> MemoryIndex {
        let dim = embedder.dim();
        let mut ids = Vec::with_capacity(dataset.len());
        let mut rows = Vec::with_capacity(dataset.len() * dim);
        for p in dataset.problems() {
            ids.push(p.id.clone());
            rows.extend_from_slice(&embedder.embed_question(&p.question).vector);
        }
        MemoryIndex { dim, ids, rows }
    }

    /// Construct from explicit rows (used by tests and tools). Rows are
    /// taken as-is; callers are responsible for normalisation.
    pub fn from_rows(dim: usize, ids: Vec<String>, rows: Vec<f64>) -> MemoryIndex {
        assert_eq!(rows.len(), ids.len() * dim, "rows must be ids × dim");
        MemoryIndex { dim, ids, rows }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact top-`k` by inner product, skipping `exclude`. Probabilities are
    /// the softmax of the returned scores.
    pub fn search(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<&str>,
    ) -> Result<SearchOutcome, MemoryError> {
        if query.len() != self.dim {
            return Err(MemoryError::DimMismatch { expected: self.dim, got: query.len() });
        }
        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(self.ids.len());
        for (i, id) in self.ids.iter().enumerate() {
            if exclude == Some(id.as_str()) {
                continue;
            }
            let dot: f64 = self.row(i).iter().zip(query).map(|(a, b)| a * b).sum();
            scored.push((dot, i));
        }
        scored.sort_unstable_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        });
        let truncated = scored.len() < k;
        scored.truncate(k);
        let max = scored.first().map(|s| s.0).unwrap_or(0.0);
        let weights: Vec<f64> = scored.iter().map(|(s, _)| (s - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        let results = scored
            .iter()
            .zip(&weights)
            .map(|(&(score, i), w)| Retrieval {
                id: self.ids[i].clone(),
                score,
                probability: w / z,
            })
            .collect();
        Ok(SearchOutcome { results, truncated })
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            write_str(&mut buf, id);
            for v in self.row(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|source| MemoryError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<MemoryIndex, MemoryError> {
        let bytes = fs::read(path).map_err(|source| MemoryError::Io { path: path.into(), source })?;
        let mut r = ByteReader::new(&bytes, path);
        r.expect_magic(INDEX_MAGIC)?;
        r.expect_version(FORMAT_VERSION)?;
        let dim = r.read_u64()? as usize;
        let count = r.read_u64()? as usize;
        let mut ids = Vec::with_capacity(count);
        let mut rows = Vec::with_capacity(count * dim);
        for _ in 0..count {
            ids.push(r.read_str()?);
            for _ in 0..dim {
                rows.push(r.read_f64()?);
            }
        }
        r.expect_end()?;
        Ok(MemoryIndex { dim, ids, rows })
    }
}

/// The embedder, the index, and the solved problems they were built from.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    pub embedder: Embedder,
    pub index: MemoryIndex,
    pub problems: Dataset,
}

impl MemoryStore {
    /// Fit an embedder on `problems` and index all of them.
    pub fn build(problems: Dataset, dim: usize) -> Result<MemoryStore, MemoryError> {
        let embedder = fit_embedder(&problems, dim)?;
        let index = MemoryIndex::build(&embedder, &problems);
        Ok(MemoryStore { embedder, index, problems })
    }

    pub fn problem(&self, id: &str) -> Option<&Problem> {
        self.problems.get(id)
    }

    /// Number of indexed problems.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embed a question and search the index.
    pub fn retrieve(
        &self,
        question: &[String],
        k: usize,
        exclude: Option<&str>,
    ) -> Result<SearchOutcome, MemoryError> {
        let q = self.embedder.embed_question(question);
        self.index.search(&q.vector, k, exclude)
    }

    pub fn save(&self, dir: &Path) -> Result<(), MemoryError> {
        fs::create_dir_all(dir).map_err(|source| MemoryError::Io { path: dir.into(), source })?;
        self.embedder.save(&dir.join("embedder.bin"))?;
        self.index.save(&dir.join("index.bin"))?;
        corpus::save_jsonl(&self.problems, &dir.join("problems.jsonl"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<MemoryStore, MemoryError> {
        let embedder = Embedder::load(&dir.join("embedder.bin"))?;
        let index = MemoryIndex::load(&dir.join("index.bin"))?;
        let problems = corpus::load_jsonl(&dir.join("problems.jsonl"), Split::Train)?;
        if index.ids.len() != problems.len()
            || index.ids.iter().any(|id| problems.get(id).is_none())
        {
            return Err(MemoryError::Format {
                path: dir.join("index.bin"),
                message: "index ids do not match problems.jsonl".into(),
            });
        }
        Ok(MemoryStore { embedder, index, problems })
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> ByteReader<'a> {
        ByteReader { bytes, pos: 0, path }
    }

    fn fail(&self, message: impl Into<String>) -> MemoryError {
        MemoryError::Format { path: self.path.into(), message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MemoryError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<(), MemoryError> {
        if self.take(4)? != magic {
            return Err(self.fail("bad magic"));
        }
        Ok(())
    }

    fn expect_version(&mut self, version: u32) -> Result<(), MemoryError> {
        let got = u32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if got != version {
            return Err(self.fail(format!("unsupported version {got}")));
        }
        Ok(())
    }

    fn read_u64(&mut self) -> Result<u64, MemoryError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_f64(&mut self) -> Result<f64, MemoryError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_str(&mut self) -> Result<String, MemoryError> {
        let len = self.read_u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("invalid utf-8"))
    }

    fn expect_end(&mut self) -> Result<(), MemoryError> {
        if self.pos != self.bytes.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_cooccurrence_rows_share_vectors() {
        let ds = synthetic::generate(50, 1, 1).unwrap();
        let emb = fit_embedder(&ds, 8).unwrap();
        // Same corpus refit: determinism.
        let emb2 = fit_embedder(&ds, 8).unwrap();
        assert_eq!(emb, emb2);
        assert!(emb.vector("how").is_some());
        assert!(emb.vector("zebra").is_none());
    }

    #[test]
    fn embedder_dim_bounds() {
        let ds = synthetic::generate(5, 1, 1).unwrap();
        assert!(matches!(fit_embedder(&ds, 0), Err(MemoryError::BadDim { .. })));
        assert!(matches!(fit_embedder(&ds, 100_000), Err(MemoryError::BadDim { .. })));
    }

    #[test]
    fn embed_question_means_and_normalises() {
        let emb = Embedder::from_vectors(
            vec!["x".into(), "y".into()],
            2,
            vec![1.0, 0.0, 0.0, 1.0],
        );
        let e = emb.embed_question(&toks("x y"));
        assert!(!e.fallback);
        let s = 0.5f64.sqrt();
        assert!((e.vector[0] - s).abs() < 1e-15 && (e.vector[1] - s).abs() < 1e-15);
        let single = emb.embed_question(&toks("x"));
        assert_eq!(single.vector, vec![1.0, 0.0]);
        let oov = emb.embed_question(&toks("z w"));
        assert!(oov.fallback);
        assert_eq!(oov.vector, vec![1.0, 0.0]);
        assert!(emb.embed_question(&[]).fallback);
    }

    #[test]
    fn index_rows_are_unit_norm() {
        let ds = synthetic::generate(100, 2, 3).unwrap();
        let store = MemoryStore::build(ds, 16).unwrap();
        for i in 0..store.index.len() {
            let n: f64 = store.index.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12, "row {i} norm {n}");
        }
    }

    #[test]
    fn search_matches_brute_force_and_breaks_ties_by_id() {
        let ds = synthetic::generate(200, 3, 4).unwrap();
        let store = MemoryStore::build(ds, 12).unwrap();
        let q = store.embedder.embed_question(&toks("how many pens did the shop sell ?")).vector;
        let got = store.index.search(&q, 4, None).unwrap();
        assert_eq!(got.results.len(), 4);
        assert!(!got.truncated);
        let mut brute: Vec<(f64, String)> = (0..store.index.len())
            .map(|i| {
                let dot = store.index.row(i).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
                (dot, store.index.ids()[i].clone())
            })
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        for (r, (score, id)) in got.results.iter().zip(&brute) {
            assert_eq!(&r.id, id);
            assert_eq!(r.score, *score);
        }
        let p: f64 = got.results.iter().map(|r| r.probability).sum();
        assert!((p - 1.0).abs() < 1e-12);
        assert!(got.results.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn equal_rows_give_half_probability_each() {
        let idx = MemoryIndex::from_rows(
            2,
            vec!["b".into(), "a".into()],
            vec![0.6, 0.8, 0.6, 0.8],
        );
        let out = idx.search(&[0.6, 0.8], 2, None).unwrap();
        assert_eq!(out.results[0].id, "a");
        assert_eq!(out.results[1].id, "b");
        assert_eq!(out.results[0].probability, 0.5);
        assert_eq!(out.results[1].probability, 0.5);
    }

    #[test]
    fn exclusion_and_truncation() {
        let idx = MemoryIndex::from_rows(2, vec!["a".into(), "b".into()], vec![1.0, 0.0, 0.0, 1.0]);
        let out = idx.search(&[1.0, 0.0], 2, Some("a")).unwrap();
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.results[0].id, "b");
        assert!(out.truncated);
        let empty = idx.search(&[1.0, 0.0], 0, None).unwrap();
        assert!(empty.results.is_empty() && !empty.truncated);
        assert!(idx.search(&[1.0], 1, None).is_err());
    }

    #[test]
    fn store_roundtrips_through_disk() {
        let ds = synthetic::generate(60, 4, 5).unwrap();
        let store = MemoryStore::build(ds, 10).unwrap();
        let dir = std::env::temp_dir().join(format!("mwp-mem-{}", std::process::id()));
        store.save(&dir).unwrap();
        let loaded = MemoryStore::load(&dir).unwrap();
        assert_eq!(store.embedder, loaded.embedder);
        for qi in 0..20 {
            let q = store.index.row(qi % store.index.len()).to_vec();
            let a = store.index.search(&q, 5, None).unwrap();
            let b = loaded.index.search(&q, 5, None).unwrap();
            assert_eq!(a, b);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
