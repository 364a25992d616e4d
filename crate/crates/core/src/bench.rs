//! Synthetic lakes and a latency harness for the search methods.
//!
//! Background columns draw distinct cells uniformly from a shared vocabulary
//! `v0 .. v{vocab-1}`. Each query gets planted partners: a partner with
//! target `jn` holds `round(jn * |Q|)` of the query's cells plus fresh
//! filler cells no other column uses, so its true joinability is known
//! without running an oracle.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::HnswIndex;
use crate::contextualize::{render_with, RenderOptions};
use crate::corpus::{Column, Repository, MIN_COLUMN_CELLS};
use crate::embed::{ColumnEmbedder, EmbedderTokens, EmbeddingVector};
use crate::oracle::{EquiIndex, Hit, SearchResult};
use crate::sketch::{MinHashSketch, SketchIndex};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// Total repository size, planted partners included.
    pub n_columns: usize,
    pub n_queries: usize,
    pub min_cells: usize,
    pub max_cells: usize,
    pub vocab_size: usize,
    /// Target joinabilities planted for every query.
    pub planted_jn: Vec<f64>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_columns: 1000,
            n_queries: 20,
            min_cells: MIN_COLUMN_CELLS,
            max_cells: 50,
            vocab_size: 5000,
            planted_jn: vec![1.0, 0.8, 0.6],
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.min_cells < MIN_COLUMN_CELLS || self.min_cells > self.max_cells {
            return bad(format!(
                "cell range {}..={} must start at {MIN_COLUMN_CELLS} or more",
                self.min_cells, self.max_cells
            ));
        }
        if self.max_cells > 4096 {
            return bad(format!("max_cells {} above 4096", self.max_cells));
        }
        if self.vocab_size < self.max_cells {
            return bad(format!("vocabulary {} smaller than max_cells {}", self.vocab_size, self.max_cells));
        }
        if self.planted_jn.iter().any(|j| !(0.0..=1.0).contains(j)) {
            return bad("planted joinabilities must lie in [0, 1]".into());
        }
        if self.n_queries * self.planted_jn.len() > self.n_columns {
            return bad("more planted partners than columns".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub query_id: String,
    pub target_id: String,
    pub target_jn: f64,
    /// `round(target_jn * |Q|) / |Q|`.
    pub achieved_jn: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticLake {
    pub repo: Repository,
    pub queries: Vec<Column>,
    pub planted: Vec<PlantedPair>,
}

fn vocab_column(id: String, rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> Column {
    let len = rng.gen_range(spec.min_cells..=spec.max_cells);
    let cells = sample_indices(rng, spec.vocab_size, len).into_iter().map(|v| format!("v{v}"));
    Column::new(id, cells).expect("non-empty").with_name("col")
}

pub fn generate(spec: &CorpusSpec) -> Result<SyntheticLake> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let queries: Vec<Column> = (0..spec.n_queries)
        .map(|q| vocab_column(format!("q{q:05}"), &mut rng, spec))
        .collect();

    let mut columns = Vec::with_capacity(spec.n_columns);
    let mut planted = Vec::new();
    for q in &queries {
        for (j, &target) in spec.planted_jn.iter().enumerate() {
            let shared = (target * q.len() as f64).round() as usize;
            let picked = sample_indices(&mut rng, q.len(), shared);
            let mut cells: Vec<String> = picked.into_iter().map(|i| q.cells()[i].clone()).collect();
            let target_id = format!("p{}-{j}", &q.id[1..]);
            // a full-overlap partner is an exact duplicate
            let len = if shared == q.len() {
                shared
            } else {
                cells.len().max(rng.gen_range(spec.min_cells..=spec.max_cells))
            };
            cells.extend((cells.len()..len).map(|f| format!("{target_id}-f{f}")));
            columns.push(Column::new(target_id.clone(), cells)?.with_name("col"));
            planted.push(PlantedPair {
                query_id: q.id.clone(),
                target_id,
                target_jn: target,
                achieved_jn: shared as f64 / q.len() as f64,
            });
        }
    }
    let background = spec.n_columns - columns.len();
    for i in 0..background {
        columns.push(vocab_column(format!("t{i:07}"), &mut rng, spec));
    }
    Ok(SyntheticLake {
        repo: Repository::build(columns)?,
        queries,
        planted,
    })
}

/// A search method split into query encoding and index search.
pub trait SearchMethod: Sync {
    type Encoded: Send;

    fn name(&self) -> String;
    fn encode(&self, query: &Column) -> Result<Self::Encoded>;
    fn search(&self, encoded: &Self::Encoded, k: usize) -> Result<SearchResult>;

    fn run(&self, query: &Column, k: usize) -> Result<SearchResult> {
        self.search(&self.encode(query)?, k)
    }
}

pub struct OracleMethod<'a> {
    pub repo: &'a Repository,
    pub index: EquiIndex,
}

impl<'a> OracleMethod<'a> {
    pub fn new(repo: &'a Repository) -> Self {
        OracleMethod {
            repo,
            index: EquiIndex::build(repo),
        }
    }
}

impl SearchMethod for OracleMethod<'_> {
    type Encoded = Column;

    fn name(&self) -> String {
        "oracle".into()
    }

    fn encode(&self, query: &Column) -> Result<Column> {
        Ok(query.clone())
    }

    fn search(&self, q: &Column, k: usize) -> Result<SearchResult> {
        Ok(SearchResult::from_positions(self.repo, self.index.top_k(q, k)))
    }
}

pub struct MinHashMethod<'a> {
    pub repo: &'a Repository,
    pub index: SketchIndex,
}

impl SearchMethod for MinHashMethod<'_> {
    type Encoded = MinHashSketch;

    fn name(&self) -> String {
        format!("minhash:{}", self.index.hasher().num_hashes())
    }

    fn encode(&self, query: &Column) -> Result<MinHashSketch> {
        Ok(self.index.hasher().sketch(query))
    }

    fn search(&self, sq: &MinHashSketch, k: usize) -> Result<SearchResult> {
        Ok(SearchResult::from_positions(self.repo, self.index.top_k_sketch(sq, k)))
    }
}

/// Render, embed, then HNSW lookup. Hit scores are cosine similarities
/// `1 - d^2 / 2` of the unit vectors.
pub struct AnnMethod<'a> {
    pub index: &'a HnswIndex,
    pub embedder: &'a dyn ColumnEmbedder,
    pub render: RenderOptions,
    /// Document frequencies for cell sampling, usually the repository.
    pub doc_freq: &'a (dyn crate::corpus::DocFreq + Sync),
    pub ef_search: usize,
}

impl SearchMethod for AnnMethod<'_> {
    type Encoded = EmbeddingVector;

    fn name(&self) -> String {
        format!("ann:{}", self.embedder.name())
    }

    fn encode(&self, query: &Column) -> Result<EmbeddingVector> {
        let text = render_with(query, &self.render, self.doc_freq, &EmbedderTokens(self.embedder))?;
        self.embedder.embed(&text.text)
    }

    fn search(&self, v: &EmbeddingVector, k: usize) -> Result<SearchResult> {
        let hits = self
            .index
            .knn(v, k, self.ef_search)?
            .into_iter()
            .map(|n| Hit {
                id: n.id,
                score: 1.0 - n.distance * n.distance / 2.0,
            })
            .collect();
        Ok(SearchResult { hits })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        LatencyStats {
            mean_us: s.iter().sum::<f64>() / s.len() as f64,
            p50_us: rank(0.50),
            p95_us: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub method: String,
    pub queries: usize,
    pub repeats: usize,
    pub k: usize,
    pub encode: LatencyStats,
    pub search: LatencyStats,
    pub total: LatencyStats,
}

/// Per-query wall-clock latency over `repeats` timed passes after one
/// untimed warm-up pass. Runs on the calling thread.
pub fn time_search<M: SearchMethod>(method: &M, queries: &[Column], k: usize, repeats: usize) -> Result<LatencyReport> {
    if repeats == 0 || queries.is_empty() {
        return Err(Error::InvalidParam("need at least one query and one repeat".into()));
    }
    for q in queries {
        method.run(q, k)?;
    }
    let mut encode = Vec::with_capacity(queries.len() * repeats);
    let mut search = Vec::with_capacity(queries.len() * repeats);
    let mut total = Vec::with_capacity(queries.len() * repeats);
    for _ in 0..repeats {
        for q in queries {
            let t0 = Instant::now();
            let e = method.encode(q)?;
            let t1 = Instant::now();
            let r = method.search(&e, k)?;
            let t2 = Instant::now();
            std::hint::black_box(r);
            encode.push((t1 - t0).as_secs_f64() * 1e6);
            search.push((t2 - t1).as_secs_f64() * 1e6);
            total.push((t2 - t0).as_secs_f64() * 1e6);
        }
    }
    Ok(LatencyReport {
        method: method.name(),
        queries: queries.len(),
        repeats,
        k,
        encode: LatencyStats::from_samples(&encode),
        search: LatencyStats::from_samples(&search),
        total: LatencyStats::from_samples(&total),
    })
}
