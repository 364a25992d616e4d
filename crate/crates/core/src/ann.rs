//! HNSW approximate nearest-neighbor index over column embeddings.
//!
//! Vectors are stored unit-normalized, so ascending Euclidean distance is
//! the same order as descending cosine similarity. Construction is
//! sequential and fully determined by the insertion order and the seed;
//! after construction the index is read-only and can be searched from many
//! threads at once.
//!
//! Neighbor lists are chosen with the diversity heuristic (a candidate is
//! kept if it is closer to the new node than to every neighbor already kept),
//! topped up with the closest pruned candidates when the heuristic keeps
//! fewer than the layer's degree.

use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::embed::{l2_sq, normalize, EmbeddingVector};
use crate::par::Execution;
use crate::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"LJH1";
const INDEX_VERSION: u32 = 1;
const MAX_LEVEL: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Maximum out-degree on layers above 0.
    pub m: usize,
    /// Maximum out-degree on layer 0.
    pub m0: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            m0: 32,
            ef_construction: 200,
            ef_search: 200,
            seed: 0,
        }
    }
}

impl HnswParams {
    /// Defaults with `m0 = 2m`.
    pub fn with_m(m: usize) -> Self {
        HnswParams {
            m,
            m0: 2 * m,
            ..Default::default()
        }
    }

    /// `mL = 1 / ln(m)`.
    pub fn level_norm(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidParam(format!("m must be at least 2, got {}", self.m)));
        }
        if self.m0 < self.m {
            return Err(Error::InvalidParam(format!("m0 ({}) must be at least m ({})", self.m0, self.m)));
        }
        if self.ef_construction < self.m {
            return Err(Error::InvalidParam(format!(
                "ef_construction ({}) must be at least m ({})",
                self.ef_construction, self.m
            )));
        }
        if self.ef_search == 0 {
            return Err(Error::InvalidParam("ef_search must be positive".into()));
        }
        Ok(())
    }

    fn degree(&self, layer: usize) -> usize {
        if layer == 0 {
            self.m0
        } else {
            self.m
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

/// Squared distance with a node index, ordered by distance then index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    dist: f64,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Generation-stamped visited marks, reused across searches on a thread.
#[derive(Default)]
struct Visited {
    stamp: u32,
    marks: Vec<u32>,
}

impl Visited {
    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
    }

    /// Marks `node`; true if it was not marked yet.
    fn insert(&mut self, node: u32) -> bool {
        let m = &mut self.marks[node as usize];
        if *m == self.stamp {
            false
        } else {
            *m = self.stamp;
            true
        }
    }
}

thread_local! {
    static VISITED: RefCell<Visited> = RefCell::new(Visited::default());
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    params: HnswParams,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f64>,
    /// `links[node][layer]`, for layers `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
    metadata: String,
}

impl HnswIndex {
    /// An empty index of dimension `dim`.
    pub fn new(dim: usize, params: HnswParams) -> Result<Self> {
        params.validate()?;
        Ok(HnswIndex {
            params,
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            links: Vec::new(),
            entry: None,
            max_level: 0,
            metadata: String::new(),
        })
    }

    /// Builds an index over `items`, inserted in the given order.
    pub fn build(items: Vec<(String, EmbeddingVector)>, params: HnswParams) -> Result<Self> {
        params.validate()?;
        let dim = items.first().map(|(_, v)| v.dim()).unwrap_or(0);
        let mut seen = HashSet::new();
        for (id, v) in &items {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.dim() });
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut index = HnswIndex::new(dim, params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = params.level_norm();
        index.ids.reserve(items.len());
        index.vectors.reserve(items.len() * dim);
        for (id, v) in items {
            let unit = normalize(&v)?;
            // U in (0, 1]
            let u: f64 = 1.0 - rng.gen::<f64>();
            let level = ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL);
            index.insert(id, &unit, level);
        }
        index.repair_reachability();
        Ok(index)
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn entry_point(&self) -> Option<&str> {
        self.entry.map(|e| self.ids[e as usize].as_str())
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    /// Stored (unit-normalized) vector of node `i`.
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Free-form string persisted with the index (used by the CLI to record
    /// how vectors were produced).
    pub fn metadata(&self) -> &str {
        &self.metadata
    }

    pub fn set_metadata(&mut self, metadata: impl Into<String>) {
        self.metadata = metadata.into();
    }

    #[inline]
    fn dist_to(&self, q: &[f64], node: u32) -> f64 {
        l2_sq(q, self.vector(node as usize))
    }

    fn insert(&mut self, id: String, unit: &[f64], level: usize) {
        let node = self.ids.len() as u32;
        self.ids.push(id);
        self.vectors.extend_from_slice(unit);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(mut ep) = self.entry else {
            self.entry = Some(node);
            self.max_level = level;
            return;
        };
        let q = unit;
        let mut ep_dist = self.dist_to(q, ep);
        for layer in (level + 1..=self.max_level).rev() {
            (ep, ep_dist) = self.greedy(q, ep, ep_dist, layer);
        }
        let mut entries = vec![Scored { dist: ep_dist, node: ep }];
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(q, &entries, self.params.ef_construction, layer);
            let chosen = self.select_neighbors(&found, self.params.degree(layer));
            for s in &chosen {
                self.link(s.node, node, s.dist, layer);
            }
            self.links[node as usize][layer] = chosen.iter().map(|s| s.node).collect();
            entries = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(node);
        }
    }

    /// Adds `to` to `from`'s neighbors at `layer`, re-selecting when over
    /// capacity.
    fn link(&mut self, from: u32, to: u32, dist: f64, layer: usize) {
        let cap = self.params.degree(layer);
        if self.links[from as usize][layer].len() < cap {
            self.links[from as usize][layer].push(to);
            return;
        }
        let base = self.vector(from as usize).to_vec();
        let mut candidates: Vec<Scored> = self.links[from as usize][layer]
            .iter()
            .map(|&n| Scored { dist: self.dist_to(&base, n), node: n })
            .collect();
        candidates.push(Scored { dist, node: to });
        candidates.sort();
        let kept = self.select_neighbors(&candidates, cap);
        self.links[from as usize][layer] = kept.into_iter().map(|s| s.node).collect();
    }

    /// Heuristic selection from candidates sorted by distance to the base.
    fn select_neighbors(&self, sorted: &[Scored], cap: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(cap);
        let mut pruned: Vec<Scored> = Vec::new();
        for &c in sorted {
            if kept.len() >= cap {
                break;
            }
            let cv = self.vector(c.node as usize);
            if kept.iter().all(|k| self.dist_to(cv, k.node) > c.dist) {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for p in pruned {
            if kept.len() >= cap {
                break;
            }
            kept.push(p);
        }
        kept
    }

    fn greedy(&self, q: &[f64], mut ep: u32, mut ep_dist: f64, layer: usize) -> (u32, f64) {
        loop {
            let mut moved = false;
            for &n in &self.links[ep as usize][layer] {
                let d = self.dist_to(q, n);
                if d < ep_dist || (d == ep_dist && n < ep) {
                    ep = n;
                    ep_dist = d;
                    moved = true;
                }
            }
            if !moved {
                return (ep, ep_dist);
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes sorted by distance.
    fn search_layer(&self, q: &[f64], entries: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        VISITED.with(|cell| {
            let mut visited = cell.borrow_mut();
            visited.reset(self.ids.len());
            let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
            let mut best: BinaryHeap<Scored> = BinaryHeap::new();
            for &e in entries {
                if visited.insert(e.node) {
                    candidates.push(Reverse(e));
                    best.push(e);
                }
            }
            while best.len() > ef {
                best.pop();
            }
            while let Some(Reverse(c)) = candidates.pop() {
                let worst = best.peek().expect("best is non-empty while searching");
                if c.dist > worst.dist && best.len() >= ef {
                    break;
                }
                for &n in &self.links[c.node as usize][layer] {
                    if !visited.insert(n) {
                        continue;
                    }
                    let s = Scored { dist: self.dist_to(q, n), node: n };
                    if best.len() < ef || s < *best.peek().expect("non-empty") {
                        candidates.push(Reverse(s));
                        best.push(s);
                        if best.len() > ef {
                            best.pop();
                        }
                    }
                }
            }
            best.into_sorted_vec()
        })
    }

    /// Links any layer-0 node not reachable from the entry point to its
    /// nearest reachable node that still has spare degree.
    fn repair_reachability(&mut self) {
        let Some(entry) = self.entry else {
            return;
        };
        let n = self.ids.len();
        let mut reached = vec![false; n];
        let mut queue = VecDeque::from([entry]);
        reached[entry as usize] = true;
        self.flood(&mut reached, &mut queue);
        for u in 0..n as u32 {
            if reached[u as usize] {
                continue;
            }
            let q = self.vector(u as usize).to_vec();
            let start = Scored { dist: self.dist_to(&q, entry), node: entry };
            let found = self.search_layer(&q, &[start], self.params.ef_construction, 0);
            let host = found
                .iter()
                .find(|s| reached[s.node as usize] && self.links[s.node as usize][0].len() < self.params.m0)
                .or_else(|| found.iter().find(|s| reached[s.node as usize]));
            let Some(host) = host.copied() else {
                log::warn!("hnsw: could not reconnect node {u}");
                continue;
            };
            if self.links[host.node as usize][0].len() < self.params.m0 {
                self.links[host.node as usize][0].push(u);
            } else {
                // swap out the host's farthest neighbor; it stays reachable through u
                let far = self.links[host.node as usize][0].pop().expect("full list");
                self.links[host.node as usize][0].push(u);
                if !self.links[u as usize][0].contains(&far) {
                    if self.links[u as usize][0].len() < self.params.m0 {
                        self.links[u as usize][0].push(far);
                    } else {
                        self.links[u as usize][0].pop();
                        self.links[u as usize][0].push(far);
                    }
                }
            }
            reached[u as usize] = true;
            queue.push_back(u);
            self.flood(&mut reached, &mut queue);
        }
    }

    fn flood(&self, reached: &mut [bool], queue: &mut VecDeque<u32>) {
        while let Some(x) = queue.pop_front() {
            for &y in &self.links[x as usize][0] {
                if !reached[y as usize] {
                    reached[y as usize] = true;
                    queue.push_back(y);
                }
            }
        }
    }

    /// Checks degree bounds and layer-0 reachability.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for (node, layers) in self.links.iter().enumerate() {
            for (layer, list) in layers.iter().enumerate() {
                if list.len() > self.params.degree(layer) {
                    return Err(format!("node {node} layer {layer} has degree {}", list.len()));
                }
                if list.iter().any(|&n| n as usize == node) {
                    return Err(format!("node {node} links to itself on layer {layer}"));
                }
                if list.iter().any(|&n| self.links[n as usize].len() <= layer) {
                    return Err(format!("node {node} links above a neighbor's level on layer {layer}"));
                }
            }
        }
        if let Some(entry) = self.entry {
            let mut reached = vec![false; self.len()];
            reached[entry as usize] = true;
            self.flood(&mut reached, &mut VecDeque::from([entry]));
            if let Some(u) = reached.iter().position(|r| !r) {
                return Err(format!("node {u} unreachable from the entry point"));
            }
        }
        Ok(())
    }

    /// Approximate k nearest neighbors by Euclidean distance between unit
    /// vectors, ascending, ties by id.
    pub fn knn(&self, query: &[f64], k: usize, ef_search: usize) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim && !self.is_empty() {
            return Err(Error::DimensionMismatch { expected: self.dim, found: query.len() });
        }
        if k == 0 {
            return Err(Error::InvalidParam("k must be at least 1".into()));
        }
        let Some(entry) = self.entry else {
            return Ok(Vec::new());
        };
        let q = normalize(query)?;
        let mut ep = entry;
        let mut ep_dist = self.dist_to(&q, ep);
        for layer in (1..=self.max_level).rev() {
            (ep, ep_dist) = self.greedy(&q, ep, ep_dist, layer);
        }
        let found = self.search_layer(&q, &[Scored { dist: ep_dist, node: ep }], ef_search.max(k), 0);
        let mut out: Vec<Neighbor> = found
            .into_iter()
            .map(|s| Neighbor {
                id: self.ids[s.node as usize].clone(),
                distance: s.dist.sqrt(),
            })
            .collect();
        out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
        out.truncate(k);
        Ok(out)
    }

    pub fn knn_batch(
        &self,
        queries: &[EmbeddingVector],
        k: usize,
        ef_search: usize,
        exec: Execution,
    ) -> Result<Vec<Vec<Neighbor>>> {
        exec.try_map(queries, |q| self.knn(q, k, ef_search))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, INDEX_MAGIC, INDEX_VERSION)?;
        let p = &self.params;
        for v in [p.m, p.m0, p.ef_construction, p.ef_search] {
            w.write_u64::<LittleEndian>(v as u64)?;
        }
        w.write_u64::<LittleEndian>(p.seed)?;
        w.write_u64::<LittleEndian>(self.dim as u64)?;
        binio::write_str(w, &self.metadata)?;
        w.write_u64::<LittleEndian>(self.ids.len() as u64)?;
        w.write_u64::<LittleEndian>(self.entry.map_or(u64::MAX, u64::from))?;
        w.write_u64::<LittleEndian>(self.max_level as u64)?;
        for (i, id) in self.ids.iter().enumerate() {
            binio::write_str(w, id)?;
            for &x in self.vector(i) {
                w.write_f64::<LittleEndian>(x)?;
            }
            let layers = &self.links[i];
            w.write_u32::<LittleEndian>(layers.len() as u32)?;
            for list in layers {
                w.write_u32::<LittleEndian>(list.len() as u32)?;
                for &n in list {
                    w.write_u32::<LittleEndian>(n)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, INDEX_MAGIC, INDEX_VERSION)?;
        let mut p = [0usize; 4];
        for slot in &mut p {
            *slot = binio::read_len(r, 1 << 32, "parameter")?;
        }
        let params = HnswParams {
            m: p[0],
            m0: p[1],
            ef_construction: p[2],
            ef_search: p[3],
            seed: binio::read_u64(r)?,
        };
        params.validate().map_err(|e| Error::Format(e.to_string()))?;
        let dim = binio::read_len(r, 1 << 20, "dimension")?;
        let metadata = binio::read_str(r)?;
        let n = binio::read_len(r, u32::MAX as u64, "node")?;
        let entry = binio::read_u64(r)?;
        let max_level = binio::read_len(r, MAX_LEVEL as u64, "level")?;
        let mut index = HnswIndex::new(dim, params)?;
        index.metadata = metadata;
        for _ in 0..n {
            index.ids.push(binio::read_str(r)?);
            for _ in 0..dim {
                index.vectors.push(binio::read_f64(r)?);
            }
            let nl = binio::read_u32(r)? as usize;
            if nl == 0 || nl > MAX_LEVEL + 1 {
                return Err(Error::Format(format!("node has {nl} layers")));
            }
            let mut layers = Vec::with_capacity(nl);
            for _ in 0..nl {
                let deg = binio::read_u32(r)? as usize;
                if deg > params.m0.max(params.m) {
                    return Err(Error::Format(format!("degree {deg} exceeds bound")));
                }
                let mut list = Vec::with_capacity(deg);
                for _ in 0..deg {
                    let nb = binio::read_u32(r)?;
                    if nb as usize >= n {
                        return Err(Error::Format(format!("neighbor {nb} out of range")));
                    }
                    list.push(nb);
                }
                layers.push(list);
            }
            index.links.push(layers);
        }
        binio::expect_eof(r)?;
        index.entry = match entry {
            u64::MAX if n == 0 => None,
            e if (e as usize) < n => Some(e as u32),
            e => return Err(Error::Format(format!("entry point {e} out of range"))),
        };
        index.max_level = max_level;
        if let Some(e) = index.entry {
            if index.links[e as usize].len() != max_level + 1 {
                return Err(Error::Format("entry point level disagrees with max level".into()));
            }
        }
        if index.links.iter().flatten().flatten().any(|&nb| index.links[nb as usize].is_empty()) {
            return Err(Error::Format("dangling neighbor".into()));
        }
        index.check_invariants().map_err(Error::Format)?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}
