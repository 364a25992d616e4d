//! Embedding vectors, metrics and embedders.
//!
//! Column embedders turn rendered column text into fixed-length vectors; cell
//! embedders map single cell values into the metric space used by semantic
//! joins. [`HashEmbedder`] is a deterministic feature-hashing embedder that
//! needs no model, [`external::ExternalEmbedder`] talks to a separate encoder
//! process over the line-delimited JSON protocol in [`protocol`].

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::contextualize::{render_with, RenderOptions, TokenCounter};
use crate::corpus::{Column, DocFreq};
use crate::hashing::hash_str;
use crate::par::Execution;
use crate::{Error, Result};

pub mod external;
pub mod protocol;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Rejects non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("embedding has non-finite entries".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    lanes(a, b, |x, y| x * y)
}

#[inline]
pub(crate) fn l2_sq(a: &[f64], b: &[f64]) -> f64 {
    lanes(a, b, |x, y| (x - y) * (x - y))
}

/// Sum of `f(a_i, b_i)` with four independent accumulators, which lets the
/// compiler vectorize instead of waiting on one serial add chain.
#[inline(always)]
fn lanes(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += f(x[i], y[i]);
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| f(*x, *y)).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(())
}

pub fn euclidean(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    Ok(l2_sq(u, v).sqrt())
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    let denom = dot(u, u).sqrt() * dot(v, v).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(u, v) / denom)
}

pub fn normalize(v: &[f64]) -> Result<EmbeddingVector> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / n).collect()))
}

/// Embeds rendered column text.
pub trait ColumnEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Maximum input length in the embedder's own tokens.
    fn token_budget(&self) -> usize;

    /// Embeds `(id, text)` items, returning vectors in input order.
    fn embed_batch(&self, items: &[(String, String)]) -> Result<Vec<(String, EmbeddingVector)>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[(String::new(), text.to_owned())])?;
        out.pop()
            .map(|(_, v)| v)
            .ok_or_else(|| Error::MissingId(String::new()))
    }

    fn count_tokens(&self, text: &str) -> Result<usize> {
        Ok(text.split_whitespace().count())
    }

    /// Human-readable identity, e.g. the model name an external encoder
    /// reported.
    fn name(&self) -> String;
}

/// Embeds single cell values for semantic matching.
pub trait CellEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_cell(&self, cell: &str) -> Result<EmbeddingVector>;
}

/// Token counting through a column embedder.
pub struct EmbedderTokens<'a>(pub &'a dyn ColumnEmbedder);

impl TokenCounter for EmbedderTokens<'_> {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        self.0.count_tokens(text)
    }
}

/// Items per `embed_batch` call in [`embed_columns`].
pub const EMBED_CHUNK: usize = 64;

/// Renders every column with the embedder's token counting and embeds the
/// texts in chunks, keeping column order.
pub fn embed_columns(
    columns: &[Column],
    embedder: &dyn ColumnEmbedder,
    opts: &RenderOptions,
    df: &(dyn DocFreq + Sync),
    exec: Execution,
) -> Result<Vec<(String, EmbeddingVector)>> {
    let chunks: Vec<&[Column]> = columns.chunks(EMBED_CHUNK).collect();
    let done = exec.try_map(&chunks, |chunk| {
        let items = chunk
            .iter()
            .map(|c| Ok((c.id.clone(), render_with(c, opts, df, &EmbedderTokens(embedder))?.text)))
            .collect::<Result<Vec<_>>>()?;
        embedder.embed_batch(&items)
    })?;
    Ok(done.into_iter().flatten().collect())
}

fn token_key(token: &str) -> &str {
    token.trim_matches(|c: char| c.is_ascii_punctuation())
}

/// Signed feature hashing of whitespace tokens, L2-normalized.
///
/// Leading and trailing ASCII punctuation is stripped from each token so that
/// `"Apple,"` and `"Apple."` land on the same feature. Text without tokens
/// maps to the zero vector.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<EmbeddingVector> {
    if dim < 8 {
        return Err(Error::InvalidParam(format!("embedding dimension {dim} is below 8")));
    }
    let mut v = vec![0.0f64; dim];
    for token in text.split_whitespace() {
        let key = token_key(token);
        if key.is_empty() {
            continue;
        }
        let h = hash_str(key, seed);
        let slot = (h % dim as u64) as usize;
        v[slot] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(EmbeddingVector(v))
}

/// Model-free embedder backed by [`hash_embed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
    pub budget: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::InvalidParam(format!("embedding dimension {dim} is below 8")));
        }
        Ok(HashEmbedder {
            dim,
            seed,
            budget: 512,
        })
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }
}

impl ColumnEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_budget(&self) -> usize {
        self.budget
    }

    fn embed_batch(&self, items: &[(String, String)]) -> Result<Vec<(String, EmbeddingVector)>> {
        items
            .iter()
            .map(|(id, text)| Ok((id.clone(), hash_embed(text, self.dim, self.seed)?)))
            .collect()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        hash_embed(text, self.dim, self.seed)
    }

    fn name(&self) -> String {
        format!("hash:{}:{}", self.dim, self.seed)
    }
}

impl CellEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_cell(&self, cell: &str) -> Result<EmbeddingVector> {
        hash_embed(cell, self.dim, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn embed_columns_keeps_order() {
        let cols: Vec<Column> = (0..150)
            .map(|i| Column::new(format!("c{i:03}"), [format!("a{i}"), format!("b{}", i % 7)]).unwrap())
            .collect();
        let e = HashEmbedder::new(16, 1).unwrap();
        let opts = RenderOptions::default();
        let df = crate::corpus::UniformDocFreq;
        let seq = embed_columns(&cols, &e, &opts, &df, Execution::Sequential).unwrap();
        let par = embed_columns(&cols, &e, &opts, &df, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.len(), 150);
        assert_eq!(seq[149].0, "c149");
        let text = crate::contextualize::render(&cols[3], &opts, &df).unwrap().text;
        assert_eq!(seq[3].1, e.embed(&text).unwrap());
    }

    #[test]
    fn empty_text_is_zero() {
        let v = hash_embed("", 16, 0).unwrap();
        assert!(v.is_zero());
        assert_eq!(v.dim(), 16);
        assert!(hash_embed("  ,. ", 16, 0).unwrap().is_zero());
    }

    #[test]
    fn permutation_invariant() {
        let a = hash_embed("red green blue green", 32, 3).unwrap();
        let b = hash_embed("green blue green red", 32, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_dimension_rejected() {
        assert!(hash_embed("a", 7, 0).is_err());
        assert!(HashEmbedder::new(4, 0).is_err());
    }

    #[test]
    fn metric_basics() {
        let v = [3.0, 4.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(euclidean(&v, &v).unwrap(), 0.0);
        assert!((euclidean(&[0.0, 0.0], &v).unwrap() - 5.0).abs() < 1e-15);
        let n = normalize(&v).unwrap();
        assert!((n.norm() - 1.0).abs() < 1e-15);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 1, found: 2 })
        ));
        assert!(euclidean(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn hashed_vectors_are_unit(words in prop::collection::vec("[a-z]{1,8}", 1..40), seed in any::<u64>()) {
            let text = words.join(" ");
            let v = hash_embed(&text, 64, seed).unwrap();
            if !v.is_zero() {
                prop_assert!((v.norm() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn unit_vectors_bridge_cosine_and_euclid(
            a in prop::collection::vec(-1.0f64..1.0, 16),
            b in prop::collection::vec(-1.0f64..1.0, 16),
        ) {
            prop_assume!(dot(&a, &a) > 1e-6 && dot(&b, &b) > 1e-6);
            let (u, v) = (normalize(&a).unwrap(), normalize(&b).unwrap());
            let d = euclidean(&u, &v).unwrap();
            let c = cosine(&u, &v).unwrap();
            prop_assert!((d * d - (2.0 - 2.0 * c)).abs() < 1e-9);
        }
    }
}
