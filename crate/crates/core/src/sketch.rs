//! MinHash approximation of equi-joinability.
//!
//! Each column is summarized by `m` minima of independent hash functions.
//! The fraction of agreeing positions between two sketches estimates their
//! Jaccard similarity, which is converted back to an overlap estimate using
//! the two set sizes:
//!
//! ```text
//! J = |Q ∩ X| / |Q ∪ X|  and  |Q ∪ X| = |Q| + |X| - |Q ∩ X|
//! => |Q ∩ X| = J (|Q| + |X|) / (1 + J)
//! ```
//!
//! and joinability is that overlap divided by `|Q|`, clamped to `[0, 1]`.

use crate::corpus::{Column, Repository};
use crate::hashing::{hash_str, splitmix64};
use crate::oracle::{select_top_k, JoinabilityScore, SearchResult};
use crate::par::Execution;
use crate::{Error, Result};

pub const DEFAULT_NUM_HASHES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHashSketch {
    pub signature: Vec<u64>,
    pub set_size: usize,
    pub seed: u64,
}

/// A family of `m` seeded hash functions.
///
/// Function `i` is multiply-add-shift on the 64-bit cell hash:
/// `h_i(x) = ((a_i * x + b_i) mod 2^128) >> 64`, with `a_i` odd and both
/// parameters drawn from splitmix64 seeded by `seed`.
#[derive(Debug, Clone)]
pub struct MinHasher {
    seed: u64,
    params: Vec<(u128, u128)>,
}

impl MinHasher {
    pub fn new(m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParam("a sketch needs at least one hash function".into()));
        }
        let mut state = seed;
        let mut draw = || ((splitmix64(&mut state) as u128) << 64) | splitmix64(&mut state) as u128;
        let params = (0..m).map(|_| (draw() | 1, draw())).collect();
        Ok(MinHasher { seed, params })
    }

    pub fn num_hashes(&self) -> usize {
        self.params.len()
    }

    pub fn sketch_values<'a>(&self, values: impl IntoIterator<Item = &'a str>) -> MinHashSketch {
        let mut signature = vec![u64::MAX; self.params.len()];
        let mut n = 0;
        for v in values {
            n += 1;
            let x = hash_str(v, self.seed) as u128;
            for (slot, &(a, b)) in signature.iter_mut().zip(&self.params) {
                let h = (a.wrapping_mul(x).wrapping_add(b) >> 64) as u64;
                if h < *slot {
                    *slot = h;
                }
            }
        }
        MinHashSketch {
            signature,
            set_size: n,
            seed: self.seed,
        }
    }

    pub fn sketch(&self, col: &Column) -> MinHashSketch {
        self.sketch_values(col.cells().iter().map(String::as_str))
    }
}

pub fn minhash(col: &Column, m: usize, seed: u64) -> Result<MinHashSketch> {
    Ok(MinHasher::new(m, seed)?.sketch(col))
}

fn check_compatible(a: &MinHashSketch, b: &MinHashSketch) -> Result<()> {
    if a.signature.len() != b.signature.len() {
        return Err(Error::IncompatibleSketch(format!(
            "lengths {} and {}",
            a.signature.len(),
            b.signature.len()
        )));
    }
    if a.seed != b.seed {
        return Err(Error::IncompatibleSketch(format!("seeds {} and {}", a.seed, b.seed)));
    }
    Ok(())
}

/// Fraction of agreeing signature positions.
pub fn estimate_jaccard(a: &MinHashSketch, b: &MinHashSketch) -> Result<f64> {
    check_compatible(a, b)?;
    let agree = a.signature.iter().zip(&b.signature).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.signature.len() as f64)
}

/// Joinability from a Jaccard estimate and the two set sizes.
pub fn joinability_from_jaccard(jaccard: f64, query_size: usize, target_size: usize) -> JoinabilityScore {
    if query_size == 0 {
        return JoinabilityScore::clamped(0.0);
    }
    let overlap = jaccard * (query_size + target_size) as f64 / (1.0 + jaccard);
    JoinabilityScore::clamped(overlap / query_size as f64)
}

pub fn estimate_joinability(sq: &MinHashSketch, sx: &MinHashSketch) -> Result<JoinabilityScore> {
    let j = estimate_jaccard(sq, sx)?;
    Ok(joinability_from_jaccard(j, sq.set_size, sx.set_size))
}

/// Flat collection of repository sketches.
#[derive(Debug, Clone)]
pub struct SketchIndex {
    hasher: MinHasher,
    sketches: Vec<MinHashSketch>,
}

impl SketchIndex {
    pub fn build(repo: &Repository, m: usize, seed: u64, exec: Execution) -> Result<Self> {
        let hasher = MinHasher::new(m, seed)?;
        let sketches = exec.map(repo.columns(), |c| hasher.sketch(c));
        Ok(SketchIndex { hasher, sketches })
    }

    pub fn hasher(&self) -> &MinHasher {
        &self.hasher
    }

    pub fn sketches(&self) -> &[MinHashSketch] {
        &self.sketches
    }

    pub fn top_k(&self, query: &Column, k: usize) -> Vec<(usize, f64)> {
        let sq = self.hasher.sketch(query);
        self.top_k_sketch(&sq, k)
    }

    pub fn top_k_sketch(&self, sq: &MinHashSketch, k: usize) -> Vec<(usize, f64)> {
        let scores = self.sketches.iter().enumerate().map(|(i, sx)| {
            let s = estimate_joinability(sq, sx).expect("sketches share one hasher");
            (i, s.value())
        });
        select_top_k(scores, k)
    }
}

/// Ranks every repository column by estimated joinability.
pub fn sketch_topk(query: &Column, repo: &Repository, index: &SketchIndex, k: usize) -> SearchResult {
    SearchResult::from_positions(repo, index.top_k(query, k))
}
