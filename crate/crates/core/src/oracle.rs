//! Exact joinability and exact top-k joinable column search.
//!
//! Joinability of a query column `Q` to a target `X` is the fraction of
//! query cells that have at least one match in `X`. Under equi-joins a match
//! is string equality; under semantic joins it is a cell embedding within
//! Euclidean distance `tau`.
//!
//! [`EquiIndex`] answers equi-join top-k queries with an inverted index over
//! cells ordered rarest-first and a prefix filter against the running k-th
//! best overlap. [`SemanticIndex`] verifies every target column, optionally
//! skipping distance computations that pivot lower bounds rule out. Both are
//! exact; results are ranked by descending score, ties by ascending id.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Column, Repository};
use crate::embed::{l2_sq, CellEmbedder};
use crate::par::Execution;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JoinabilityScore(f64);

impl JoinabilityScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidParam(format!("joinability {value} outside [0, 1]")));
        }
        Ok(JoinabilityScore(value))
    }

    pub(crate) fn from_counts(matched: usize, total: usize) -> Self {
        JoinabilityScore(matched as f64 / total as f64)
    }

    pub(crate) fn clamped(value: f64) -> Self {
        JoinabilityScore(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Ranked answer to a top-k query.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// Builds a result from repository positions; positions are in id order.
    pub(crate) fn from_positions(repo: &Repository, ranked: Vec<(usize, f64)>) -> Self {
        SearchResult {
            hits: ranked
                .into_iter()
                .map(|(pos, score)| Hit {
                    id: repo.column(pos).id.clone(),
                    score,
                })
                .collect(),
        }
    }
}

/// The `k` best `(position, score)` pairs, score descending then position
/// ascending. Scores must not be NaN.
pub fn select_top_k(scores: impl IntoIterator<Item = (usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = scores.into_iter().collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
    };
    if k < all.len() {
        all.select_nth_unstable_by(k, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchQuery<'a> {
    pub query: &'a Column,
    pub k: usize,
}

impl<'a> SearchQuery<'a> {
    pub fn new(query: &'a Column, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParam("k must be at least 1".into()));
        }
        Ok(SearchQuery { query, k })
    }
}

/// Equi-joinability `|Q ∩ X| / |Q|`.
pub fn equi_joinability(q: &Column, x: &Column) -> JoinabilityScore {
    let target: HashSet<&str> = x.cells().iter().map(String::as_str).collect();
    let matched = q.cells().iter().filter(|c| target.contains(c.as_str())).count();
    JoinabilityScore::from_counts(matched, q.len())
}

/// Semantic match configuration. The metric is Euclidean distance between
/// cell embeddings; a pair matches when its distance is at most `tau`.
#[derive(Clone, Copy)]
pub struct MatchConfig<'a> {
    pub tau: f64,
    pub cell_embedder: &'a dyn CellEmbedder,
}

impl<'a> MatchConfig<'a> {
    pub fn new(tau: f64, cell_embedder: &'a dyn CellEmbedder) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::InvalidParam(format!("tau must be a finite non-negative number, got {tau}")));
        }
        Ok(MatchConfig { tau, cell_embedder })
    }
}

fn embed_cells(cells: &[String], embedder: &dyn CellEmbedder) -> Result<Vec<Vec<f64>>> {
    cells
        .iter()
        .map(|c| {
            let v = embedder.embed_cell(c)?;
            if v.dim() != embedder.dim() {
                return Err(Error::DimensionMismatch {
                    expected: embedder.dim(),
                    found: v.dim(),
                });
            }
            Ok(v.into_inner())
        })
        .collect()
}

#[inline]
fn within(a: &[f64], b: &[f64], tau: f64) -> bool {
    l2_sq(a, b).sqrt() <= tau
}

/// Semantic joinability: the fraction of `q`'s cells whose embedding lies
/// within `tau` of some cell embedding of `x`.
pub fn semantic_joinability(q: &Column, x: &Column, cfg: &MatchConfig) -> Result<JoinabilityScore> {
    let qv = embed_cells(q.cells(), cfg.cell_embedder)?;
    let xv = embed_cells(x.cells(), cfg.cell_embedder)?;
    let matched = qv
        .iter()
        .filter(|a| xv.iter().any(|b| within(a, b, cfg.tau)))
        .count();
    Ok(JoinabilityScore::from_counts(matched, q.len()))
}

/// Inverted index for exact equi-join search.
///
/// Cell values are renumbered in ascending document frequency (ties by
/// value), so each column's sorted token list starts with its rarest cells.
#[derive(Debug, Clone)]
pub struct EquiIndex {
    vocab: HashMap<String, u32>,
    columns: Vec<Vec<u32>>,
    postings: Vec<Vec<u32>>,
}

impl EquiIndex {
    pub fn build(repo: &Repository) -> Self {
        let mut values: Vec<(&str, u32)> = repo
            .doc_freq_map()
            .iter()
            .map(|(v, &f)| (v.as_str(), f))
            .collect();
        values.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
        let vocab: HashMap<String, u32> = values
            .iter()
            .enumerate()
            .map(|(i, (v, _))| (v.to_string(), i as u32))
            .collect();
        let mut postings = vec![Vec::new(); vocab.len()];
        let columns = repo
            .columns()
            .iter()
            .enumerate()
            .map(|(pos, c)| {
                let mut toks: Vec<u32> = c.cells().iter().map(|v| vocab[v.as_str()]).collect();
                toks.sort_unstable();
                for &t in &toks {
                    postings[t as usize].push(pos as u32);
                }
                toks
            })
            .collect();
        EquiIndex {
            vocab,
            columns,
            postings,
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    fn query_tokens(&self, query: &Column) -> Vec<u32> {
        let mut toks: Vec<u32> = query
            .cells()
            .iter()
            .filter_map(|c| self.vocab.get(c.as_str()).copied())
            .collect();
        toks.sort_unstable();
        toks
    }

    /// Exact top-k by overlap. Returns fewer than `k` hits only when the
    /// repository has fewer than `k` columns.
    pub fn top_k(&self, query: &Column, k: usize) -> Vec<(usize, f64)> {
        let q = self.query_tokens(query);
        let n = q.len();
        // min-heap on (overlap, Reverse(pos)): the top is the current k-th best
        let mut heap: BinaryHeap<Reverse<(u32, Reverse<u32>)>> = BinaryHeap::with_capacity(k + 1);
        let mut seen: HashSet<u32> = HashSet::new();
        for i in 0..n {
            let remaining = (n - i) as u32;
            if heap.len() == k {
                let Reverse((kth, _)) = *heap.peek().expect("non-empty heap");
                // columns not yet seen share nothing with q[..i]
                if remaining < kth {
                    break;
                }
            }
            for &pos in &self.postings[q[i] as usize] {
                if !seen.insert(pos) {
                    continue;
                }
                let x = &self.columns[pos as usize];
                let p = x.binary_search(&q[i]).expect("posting implies membership");
                // x[..p] ranks before q[i], so only x[p..] can meet q[i..]
                let bound = remaining.min((x.len() - p) as u32);
                if heap.len() == k {
                    let Reverse((kth, Reverse(kpos))) = *heap.peek().expect("non-empty heap");
                    if bound < kth || (bound == kth && pos > kpos) {
                        continue;
                    }
                }
                let overlap = sorted_overlap(&q[i..], &x[p..]);
                let entry = Reverse((overlap, Reverse(pos)));
                if heap.len() < k {
                    heap.push(entry);
                } else if entry < *heap.peek().expect("non-empty heap") {
                    heap.pop();
                    heap.push(entry);
                }
            }
        }
        let qlen = query.len() as f64;
        let mut ranked: Vec<(usize, f64)> = heap
            .into_iter()
            .map(|Reverse((ov, Reverse(pos)))| (pos as usize, ov as f64 / qlen))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        if ranked.len() < k {
            // zero-overlap columns, smallest ids first
            let taken: HashSet<usize> = ranked.iter().map(|r| r.0).collect();
            let need = k - ranked.len();
            ranked.extend(
                (0..self.columns.len())
                    .filter(|p| !taken.contains(p))
                    .take(need)
                    .map(|p| (p, 0.0)),
            );
        }
        ranked
    }

    /// Overlap `|X ∩ Y|` for every `Y` with `|X ∩ Y| / |X| >= t`, `Y != X`,
    /// where `X` is the column at `pos`. Uses the prefix filter: such a `Y`
    /// must contain one of `X`'s `|X| - need + 1` rarest cells.
    pub fn threshold_partners(&self, pos: usize, t: f64) -> Vec<(usize, u32)> {
        let x = &self.columns[pos];
        let len = x.len();
        let Some(need) = (1..=len).find(|&o| o as f64 / len as f64 >= t) else {
            return Vec::new();
        };
        let prefix = len - need + 1;
        let mut candidates: Vec<u32> = x[..prefix]
            .iter()
            .flat_map(|&tok| self.postings[tok as usize].iter().copied())
            .filter(|&c| c as usize != pos)
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        candidates
            .into_iter()
            .filter_map(|c| {
                let ov = sorted_overlap(x, &self.columns[c as usize]);
                (ov as f64 / len as f64 >= t).then_some((c as usize, ov))
            })
            .collect()
    }
}

fn sorted_overlap(a: &[u32], b: &[u32]) -> u32 {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Exact equi-join top-k over `repo`.
pub fn exact_equi_topk(q: &SearchQuery, repo: &Repository, index: &EquiIndex) -> SearchResult {
    SearchResult::from_positions(repo, index.top_k(q.query, q.k))
}

/// Exact top-k for a batch of queries.
pub fn exact_equi_topk_batch(
    queries: &[Column],
    k: usize,
    repo: &Repository,
    index: &EquiIndex,
    exec: Execution,
) -> Vec<SearchResult> {
    exec.map(queries, |q| SearchResult::from_positions(repo, index.top_k(q, k)))
}

/// Number of pivots chosen when pruning is enabled.
pub const DEFAULT_PIVOTS: usize = 8;
/// Lower bounds must clear `tau` by this much before a pair is skipped.
const PRUNE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
struct PivotTable {
    pivots: Vec<Vec<f64>>,
    /// `dist[v * p + j]`: distance from distinct vector `v` to pivot `j`.
    dist: Vec<f64>,
    /// `ranges[c * p + j]`: min/max pivot-`j` distance over column `c`.
    ranges: Vec<(f64, f64)>,
}

/// Repository cell embeddings prepared for exact semantic search.
#[derive(Debug, Clone)]
pub struct SemanticIndex {
    dim: usize,
    /// Distinct cell vectors, flattened.
    vectors: Vec<f64>,
    /// Per column, indices into the distinct vectors.
    columns: Vec<Vec<u32>>,
    pivots: Option<PivotTable>,
}

impl SemanticIndex {
    /// Embeds every distinct repository cell once. With `pivots > 0`, picks
    /// that many pivots by farthest-first traversal over a seeded sample and
    /// precomputes pivot distances.
    pub fn build(repo: &Repository, embedder: &dyn CellEmbedder, pivots: usize, exec: Execution) -> Result<Self> {
        let dim = embedder.dim();
        let mut values: Vec<&str> = repo.doc_freq_map().keys().map(String::as_str).collect();
        values.sort_unstable();
        let slot: HashMap<&str, u32> = values.iter().enumerate().map(|(i, v)| (*v, i as u32)).collect();
        let embedded = exec.try_map(&values, |v| {
            let e = embedder.embed_cell(v)?;
            if e.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: e.dim() });
            }
            Ok(e.into_inner())
        })?;
        let vectors: Vec<f64> = embedded.into_iter().flatten().collect();
        let columns: Vec<Vec<u32>> = repo
            .columns()
            .iter()
            .map(|c| c.cells().iter().map(|v| slot[v.as_str()]).collect())
            .collect();
        let mut index = SemanticIndex {
            dim,
            vectors,
            columns,
            pivots: None,
        };
        if pivots > 0 && !values.is_empty() {
            index.pivots = Some(index.build_pivots(pivots, exec));
        }
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_pivots(&self) -> bool {
        self.pivots.is_some()
    }

    pub fn without_pivots(mut self) -> Self {
        self.pivots = None;
        self
    }

    fn vector(&self, v: u32) -> &[f64] {
        let start = v as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    fn n_vectors(&self) -> usize {
        self.vectors.len() / self.dim.max(1)
    }

    fn build_pivots(&self, count: usize, exec: Execution) -> PivotTable {
        const SAMPLE: usize = 2048;
        let n = self.n_vectors();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0fb1_7075);
        let mut sample: Vec<u32> = (0..n as u32).collect();
        sample.shuffle(&mut rng);
        sample.truncate(SAMPLE);

        let mut chosen = vec![sample[0]];
        let mut nearest: Vec<f64> = sample
            .iter()
            .map(|&s| l2_sq(self.vector(s), self.vector(sample[0])))
            .collect();
        while chosen.len() < count.min(sample.len()) {
            let (far, d) = nearest
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            if d <= 0.0 {
                break;
            }
            let pick = sample[far];
            chosen.push(pick);
            for (i, &s) in sample.iter().enumerate() {
                nearest[i] = nearest[i].min(l2_sq(self.vector(s), self.vector(pick)));
            }
        }
        let pivots: Vec<Vec<f64>> = chosen.iter().map(|&c| self.vector(c).to_vec()).collect();
        let p = pivots.len();
        let dist: Vec<f64> = exec
            .map_range(n, |v| {
                pivots
                    .iter()
                    .map(|pv| l2_sq(self.vector(v as u32), pv).sqrt())
                    .collect::<Vec<_>>()
            })
            .into_iter()
            .flatten()
            .collect();
        let ranges = self
            .columns
            .iter()
            .flat_map(|cells| {
                (0..p).map(|j| {
                    cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        let d = dist[v as usize * p + j];
                        (lo.min(d), hi.max(d))
                    })
                })
            })
            .collect();
        PivotTable { pivots, dist, ranges }
    }

    fn embed_query(&self, query: &Column, embedder: &dyn CellEmbedder) -> Result<Vec<Vec<f64>>> {
        let qv = embed_cells(query.cells(), embedder)?;
        if embedder.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: embedder.dim() });
        }
        Ok(qv)
    }

    /// Matched query-cell count for the column at `pos`.
    fn matches(&self, qv: &[Vec<f64>], qpivot: &[Vec<f64>], pos: usize, tau: f64) -> usize {
        let cells = &self.columns[pos];
        match &self.pivots {
            None => qv
                .iter()
                .filter(|a| cells.iter().any(|&v| within(a, self.vector(v), tau)))
                .count(),
            Some(pt) => {
                let p = pt.pivots.len();
                let ranges = &pt.ranges[pos * p..(pos + 1) * p];
                let bound = tau + PRUNE_SLACK;
                qv.iter()
                    .zip(qpivot)
                    .filter(|(a, dq)| {
                        // every cell of the column is at least this far away
                        let col_far = dq
                            .iter()
                            .zip(ranges)
                            .any(|(&d, &(lo, hi))| d - hi > bound || lo - d > bound);
                        if col_far {
                            return false;
                        }
                        cells.iter().any(|&v| {
                            let dv = &pt.dist[v as usize * p..(v as usize + 1) * p];
                            let pruned = dq.iter().zip(dv).any(|(a, b)| (a - b).abs() > bound);
                            !pruned && within(a, self.vector(v), tau)
                        })
                    })
                    .count()
            }
        }
    }

    fn pivot_distances(&self, qv: &[Vec<f64>]) -> Vec<Vec<f64>> {
        match &self.pivots {
            None => Vec::new(),
            Some(pt) => qv
                .iter()
                .map(|a| pt.pivots.iter().map(|pv| l2_sq(a, pv).sqrt()).collect())
                .collect(),
        }
    }

    /// Semantic joinability of already-embedded query cells to every column.
    pub fn scores_for_vectors(&self, qv: &[Vec<f64>], tau: f64, exec: Execution) -> Vec<f64> {
        let qp = self.pivot_distances(qv);
        let total = qv.len();
        exec.map_range(self.columns.len(), |pos| {
            self.matches(qv, &qp, pos, tau) as f64 / total as f64
        })
    }

    /// Embedded cells of the repository column at `pos`.
    pub fn column_vectors(&self, pos: usize) -> Vec<Vec<f64>> {
        self.columns[pos].iter().map(|&v| self.vector(v).to_vec()).collect()
    }

    pub fn top_k(&self, query: &Column, k: usize, cfg: &MatchConfig, exec: Execution) -> Result<Vec<(usize, f64)>> {
        let qv = self.embed_query(query, cfg.cell_embedder)?;
        let scores = self.scores_for_vectors(&qv, cfg.tau, exec);
        Ok(select_top_k(scores.into_iter().enumerate(), k))
    }
}

/// Exact semantic-join top-k over `repo`.
pub fn exact_semantic_topk(
    q: &SearchQuery,
    repo: &Repository,
    index: &SemanticIndex,
    cfg: &MatchConfig,
    exec: Execution,
) -> Result<SearchResult> {
    let ranked = index.top_k(q.query, q.k, cfg, exec)?;
    Ok(SearchResult::from_positions(repo, ranked))
}
