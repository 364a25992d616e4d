//! Contrastive training data for a column encoder.
//!
//! Positives are ordered column pairs `(X, Y)` of one repository with
//! `jn(X, Y) >= t`, found by a self-join with the exact oracle machinery.
//! Shuffle augmentation adds `(perm(X), Y)` copies so the encoder learns that
//! cell order is irrelevant; with rate `r`, a fraction `r / (1 + r)` of the
//! final pairs are augmented. Batches are packed so that every `y_id` in a
//! batch is distinct, which makes each off-diagonal `(X_i, Y_j)` a valid
//! in-batch negative for the multiple-negatives ranking loss.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contextualize::{render, RenderOptions};
use crate::corpus::{Column, Repository};
use crate::embed::{cosine, EmbeddingVector};
use crate::oracle::{EquiIndex, SemanticIndex, DEFAULT_PIVOTS};
use crate::par::Execution;
use crate::embed::CellEmbedder;
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_SIZE: usize = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum JoinMode {
    Equi,
    Semantic { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub threshold: f64,
    pub shuffle_rate: f64,
    pub batch_size: usize,
    pub join_mode: JoinMode,
    pub seed: u64,
    /// Self-join runs on a uniform sample of at most this many columns.
    pub sample_size: usize,
    pub render: RenderOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            threshold: 0.7,
            shuffle_rate: 0.2,
            batch_size: 32,
            join_mode: JoinMode::Equi,
            seed: 0,
            sample_size: DEFAULT_SAMPLE_SIZE,
            render: RenderOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidParam(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        if !(self.shuffle_rate >= 0.0 && self.shuffle_rate.is_finite()) {
            return Err(Error::InvalidParam(format!("shuffle rate {} must be >= 0", self.shuffle_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidParam(format!("batch size {} must be >= 2", self.batch_size)));
        }
        if self.sample_size == 0 {
            return Err(Error::InvalidParam("sample size must be positive".into()));
        }
        if let JoinMode::Semantic { tau } = self.join_mode {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(Error::InvalidParam(format!("tau {tau} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivePair {
    pub x_id: String,
    pub y_id: String,
    pub x_text: String,
    pub y_text: String,
    pub jn: f64,
    pub augmented: bool,
}

/// Members of one batch, as indices into the pair list it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub batches: Vec<TrainBatch>,
    /// Pairs left over in batches that could not be completed.
    pub dropped: usize,
}

fn sample_positions(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if size < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(size);
        all.sort_unstable();
    }
    all
}

/// All ordered pairs `(X, Y)`, `X != Y`, with `jn(X, Y) >= t`, sorted by
/// `(x_id, y_id)`. Semantic mode needs `cell_embedder`.
pub fn self_join_positives(
    repo: &Repository,
    cfg: &TrainConfig,
    cell_embedder: Option<&dyn CellEmbedder>,
    exec: Execution,
) -> Result<Vec<PositivePair>> {
    cfg.validate()?;
    let picked = sample_positions(repo.len(), cfg.sample_size, cfg.seed);
    let sub = if picked.len() == repo.len() {
        repo.clone()
    } else {
        Repository::build(picked.iter().map(|&p| repo.column(p).clone()).collect())?
    };
    let t = cfg.threshold;

    let partners: Vec<Vec<(usize, f64)>> = match cfg.join_mode {
        JoinMode::Equi => {
            let index = EquiIndex::build(&sub);
            exec.map_range(sub.len(), |x| {
                let len = sub.column(x).len();
                index
                    .threshold_partners(x, t)
                    .into_iter()
                    .map(|(y, ov)| (y, ov as f64 / len as f64))
                    .collect()
            })
        }
        JoinMode::Semantic { tau } => {
            let embedder = cell_embedder
                .ok_or_else(|| Error::InvalidParam("semantic self-join needs a cell embedder".into()))?;
            let index = SemanticIndex::build(&sub, embedder, DEFAULT_PIVOTS, exec)?;
            exec.map_range(sub.len(), |x| {
                let scores = index.scores_for_vectors(&index.column_vectors(x), tau, Execution::Sequential);
                scores
                    .into_iter()
                    .enumerate()
                    .filter(|&(y, s)| y != x && s >= t)
                    .collect()
            })
        }
    };

    // texts are rendered against the full repository's document frequencies
    let texts = exec.try_map(sub.columns(), |c| render(c, &cfg.render, repo).map(|r| r.text))?;
    let mut out = Vec::new();
    for (x, ys) in partners.into_iter().enumerate() {
        let mut ys = ys;
        ys.sort_by_key(|&(y, _)| y);
        for (y, jn) in ys {
            out.push(PositivePair {
                x_id: sub.column(x).id.clone(),
                y_id: sub.column(y).id.clone(),
                x_text: texts[x].clone(),
                y_text: texts[y].clone(),
                jn,
                augmented: false,
            });
        }
    }
    Ok(out)
}

/// Appends `round(r * |pairs|)` shuffled copies of seed-chosen source pairs:
/// `X`'s cells are permuted and re-rendered, `Y` and `jn` are kept. Sources
/// are drawn without replacement; for `r > 1` every pair is used `floor(r)`
/// times and the remainder is drawn without replacement.
pub fn augment_shuffle(
    pairs: &[PositivePair],
    r: f64,
    seed: u64,
    repo: &Repository,
    opts: &RenderOptions,
) -> Result<Vec<PositivePair>> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::InvalidParam(format!("shuffle rate {r} must be >= 0")));
    }
    let n = pairs.len();
    let extra = (r * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sources = Vec::with_capacity(extra);
    if n > 0 {
        while sources.len() + n <= extra {
            sources.extend(0..n);
        }
        let mut rest: Vec<usize> = (0..n).collect();
        rest.shuffle(&mut rng);
        sources.extend(rest.into_iter().take(extra - sources.len()));
    }

    let mut out = pairs.to_vec();
    for src in sources {
        let p = &pairs[src];
        let x = repo.get(&p.x_id).ok_or_else(|| Error::UnknownId(p.x_id.clone()))?;
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Column = x.permuted(&order);
        out.push(PositivePair {
            x_id: p.x_id.clone(),
            y_id: p.y_id.clone(),
            x_text: render(&shuffled, opts, repo)?.text,
            y_text: p.y_text.clone(),
            jn: p.jn,
            augmented: true,
        });
    }
    Ok(out)
}

/// Shuffles pairs by `seed` and packs them first-fit into batches of exactly
/// `n` with distinct `y_id`s. Incomplete batches are dropped.
pub fn make_batches(pairs: &[PositivePair], n: usize, seed: u64) -> Result<BatchPlan> {
    if n < 2 {
        return Err(Error::InvalidParam(format!("batch size {n} must be >= 2")));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut open: Vec<(Vec<usize>, HashSet<&str>)> = Vec::new();
    let mut batches = Vec::new();
    for i in order {
        let y = pairs[i].y_id.as_str();
        let slot = match open.iter().position(|(_, ys)| !ys.contains(y)) {
            Some(s) => s,
            None => {
                open.push((Vec::new(), HashSet::new()));
                open.len() - 1
            }
        };
        open[slot].0.push(i);
        open[slot].1.insert(y);
        if open[slot].0.len() == n {
            let (members, _) = open.remove(slot);
            batches.push(TrainBatch { members });
        }
    }
    let dropped = open.iter().map(|(m, _)| m.len()).sum();
    Ok(BatchPlan {
        batch_size: n,
        batches,
        dropped,
    })
}

/// Multiple-negatives ranking loss with cosine scores:
/// `-(1/N) * sum_i [S(X_i, Y_i) - log sum_j exp S(X_i, Y_j)]`.
pub fn mnr_loss(x: &[EmbeddingVector], y: &[EmbeddingVector]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidParam(format!("{} anchors but {} positives", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let dim = x[0].dim();
    for v in x.iter().chain(y) {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: v.dim() });
        }
        if v.is_zero() {
            return Err(Error::ZeroVector);
        }
    }
    let mut total = 0.0;
    for (i, xi) in x.iter().enumerate() {
        let s: Vec<f64> = y.iter().map(|yj| cosine(xi, yj)).collect::<Result<_>>()?;
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += s[i] - lse;
    }
    Ok(-total / x.len() as f64)
}

pub fn write_pairs_jsonl<W: Write>(mut w: W, pairs: &[PositivePair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(r: R) -> Result<Vec<PositivePair>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// One JSON line per batch: `{"batch": b, "members": [line indices]}`.
pub fn write_manifest<W: Write>(mut w: W, plan: &BatchPlan) -> Result<()> {
    for (b, batch) in plan.batches.iter().enumerate() {
        serde_json::to_writer(&mut w, &serde_json::json!({ "batch": b, "members": batch.members }))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::contextualize::{Pattern, SampleStrategy, Sampling};
    use crate::embed::{normalize, HashEmbedder};
    use crate::oracle::{equi_joinability, semantic_joinability, MatchConfig};

    fn pair(x: &str, y: &str) -> PositivePair {
        PositivePair {
            x_id: x.into(),
            y_id: y.into(),
            x_text: String::new(),
            y_text: String::new(),
            jn: 1.0,
            augmented: false,
        }
    }

    fn random_repo(n: usize, vocab: usize, seed: u64) -> Repository {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = (0..n)
            .map(|i| {
                let len = rng.gen_range(5..12);
                let cells: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect();
                Column::new(format!("c{i:04}"), cells).unwrap()
            })
            .collect();
        Repository::build(cols).unwrap()
    }

    fn col_opts() -> RenderOptions {
        RenderOptions {
            pattern: Pattern::Col,
            strategy: SampleStrategy::new(Sampling::Truncate, 4096).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn disjoint_repo_has_no_positives() {
        let cols = (0..5)
            .map(|i| Column::new(format!("c{i}"), (0..6).map(|j| format!("{i}-{j}"))).unwrap())
            .collect();
        let repo = Repository::build(cols).unwrap();
        let out = self_join_positives(&repo, &TrainConfig::default(), None, Execution::Sequential).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn identical_columns_give_both_directions() {
        let cells = ["a", "b", "c", "d", "e"];
        let repo = Repository::build(vec![
            Column::new("x", cells).unwrap(),
            Column::new("y", cells).unwrap(),
            Column::new("z", ["p", "q", "r", "s", "t"]).unwrap(),
        ])
        .unwrap();
        let out = self_join_positives(&repo, &TrainConfig::default(), None, Execution::Sequential).unwrap();
        let ids: Vec<(&str, &str, f64)> = out.iter().map(|p| (p.x_id.as_str(), p.y_id.as_str(), p.jn)).collect();
        assert_eq!(ids, [("x", "y", 1.0), ("y", "x", 1.0)]);
    }

    #[test]
    fn equi_self_join_matches_all_pairs() {
        let repo = random_repo(200, 25, 4);
        let cfg = TrainConfig {
            threshold: 0.5,
            render: col_opts(),
            ..Default::default()
        };
        let got = self_join_positives(&repo, &cfg, None, Execution::default()).unwrap();
        let mut want = Vec::new();
        for x in repo.columns() {
            for y in repo.columns() {
                let jn = equi_joinability(x, y).value();
                if x.id != y.id && jn >= cfg.threshold {
                    want.push((x.id.clone(), y.id.clone(), jn));
                }
            }
        }
        let got: Vec<(String, String, f64)> = got.into_iter().map(|p| (p.x_id, p.y_id, p.jn)).collect();
        assert!(!want.is_empty());
        assert_eq!(got, want);
    }

    #[test]
    fn semantic_self_join_matches_all_pairs() {
        let repo = random_repo(60, 30, 8);
        let e = HashEmbedder::new(16, 3).unwrap();
        let tau = 1.1;
        let cfg = TrainConfig {
            threshold: 0.6,
            join_mode: JoinMode::Semantic { tau },
            render: col_opts(),
            ..Default::default()
        };
        let got = self_join_positives(&repo, &cfg, Some(&e), Execution::default()).unwrap();
        let mc = MatchConfig::new(tau, &e).unwrap();
        let mut want = Vec::new();
        for x in repo.columns() {
            for y in repo.columns() {
                let jn = semantic_joinability(x, y, &mc).unwrap().value();
                if x.id != y.id && jn >= cfg.threshold {
                    want.push((x.id.clone(), y.id.clone(), jn));
                }
            }
        }
        let got: Vec<(String, String, f64)> = got.into_iter().map(|p| (p.x_id, p.y_id, p.jn)).collect();
        assert_eq!(got, want);
        let missing = TrainConfig { join_mode: JoinMode::Semantic { tau }, ..Default::default() };
        assert!(self_join_positives(&repo, &missing, None, Execution::Sequential).is_err());
    }

    #[test]
    fn sampling_restricts_columns() {
        let repo = random_repo(100, 10, 1);
        let cfg = TrainConfig {
            sample_size: 20,
            threshold: 0.3,
            ..Default::default()
        };
        let a = self_join_positives(&repo, &cfg, None, Execution::Sequential).unwrap();
        let b = self_join_positives(&repo, &cfg, None, Execution::default()).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<&str> = a.iter().flat_map(|p| [p.x_id.as_str(), p.y_id.as_str()]).collect();
        assert!(ids.len() <= 20);
    }

    #[test]
    fn augmentation_counts() {
        let repo = random_repo(10, 100, 2);
        let ids: Vec<&str> = repo.columns().iter().map(|c| c.id.as_str()).collect();
        let pairs: Vec<PositivePair> = (0..100).map(|i| pair(ids[i % 10], ids[(i + 1) % 10])).collect();
        assert_eq!(augment_shuffle(&pairs, 0.0, 1, &repo, &col_opts()).unwrap(), pairs);
        let out = augment_shuffle(&pairs, 0.2, 1, &repo, &col_opts()).unwrap();
        assert_eq!(out.len(), 120);
        assert_eq!(out.iter().filter(|p| p.augmented).count(), 20);
        let out = augment_shuffle(&pairs, 2.5, 1, &repo, &col_opts()).unwrap();
        assert_eq!(out.len(), 350);
    }

    #[test]
    fn augmented_text_is_a_permutation() {
        let repo = random_repo(5, 1000, 7);
        let x = repo.column(0);
        let pairs = vec![PositivePair { jn: 0.8, ..pair(&x.id, &repo.column(1).id) }];
        let out = augment_shuffle(&pairs, 1.0, 3, &repo, &col_opts()).unwrap();
        let aug = &out[1];
        assert!(aug.augmented);
        assert_eq!(aug.jn, 0.8);
        let mut got: Vec<&str> = aug.x_text.split(", ").collect();
        let mut want: Vec<&str> = x.cells().iter().map(String::as_str).collect();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn batching_examples() {
        let pairs: Vec<PositivePair> = (0..4).map(|i| pair("x", &format!("y{i}"))).collect();
        let plan = make_batches(&pairs, 2, 0).unwrap();
        assert_eq!((plan.batches.len(), plan.dropped), (2, 0));

        let same: Vec<PositivePair> = (0..6).map(|i| pair(&format!("x{i}"), "y")).collect();
        let plan = make_batches(&same, 2, 0).unwrap();
        assert_eq!((plan.batches.len(), plan.dropped), (0, 6));
        assert!(make_batches(&same, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn batches_respect_invariants(ys in prop::collection::vec(0u8..12, 0..200), n in 2usize..9, seed: u64) {
            let pairs: Vec<PositivePair> = ys.iter().enumerate().map(|(i, y)| pair(&format!("x{i}"), &format!("y{y}"))).collect();
            let plan = make_batches(&pairs, n, seed).unwrap();
            let mut used = HashSet::new();
            for b in &plan.batches {
                prop_assert_eq!(b.members.len(), n);
                let distinct: HashSet<&str> = b.members.iter().map(|&i| pairs[i].y_id.as_str()).collect();
                prop_assert_eq!(distinct.len(), n);
                for &m in &b.members {
                    prop_assert!(used.insert(m));
                }
            }
            prop_assert_eq!(used.len() + plan.dropped, pairs.len());
        }

        #[test]
        fn loss_permutation_invariant(seed: u64, n in 1usize..8) {
            let (x, y) = random_batch(n, 6, seed);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let px: Vec<EmbeddingVector> = idx.iter().map(|&i| x[i].clone()).collect();
            let py: Vec<EmbeddingVector> = idx.iter().map(|&i| y[i].clone()).collect();
            let a = mnr_loss(&x, &y).unwrap();
            let b = mnr_loss(&px, &py).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> (Vec<EmbeddingVector>, Vec<EmbeddingVector>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || {
            let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            EmbeddingVector::new(raw).unwrap()
        };
        let x = (0..n).map(|_| v()).collect();
        let y = (0..n).map(|_| v()).collect();
        (x, y)
    }

    fn naive_loss(x: &[EmbeddingVector], y: &[EmbeddingVector]) -> f64 {
        let n = x.len();
        let mut sum = 0.0;
        for i in 0..n {
            let denom: f64 = (0..n).map(|j| cosine(&x[i], &y[j]).unwrap().exp()).sum();
            sum += cosine(&x[i], &y[i]).unwrap() - denom.ln();
        }
        -sum / n as f64
    }

    #[test]
    fn loss_examples() {
        let (x, y) = random_batch(1, 4, 0);
        assert_eq!(mnr_loss(&x, &y).unwrap(), 0.0);

        let e = |v: Vec<f64>| EmbeddingVector::new(v).unwrap();
        let x = vec![e(vec![1.0, 0.0]), e(vec![0.0, 1.0])];
        let l = mnr_loss(&x, &x).unwrap();
        assert!((l - ((1.0 + std::f64::consts::E).ln() - 1.0)).abs() < 1e-12);

        for seed in 0..20 {
            let (x, y) = random_batch(16, 8, seed);
            assert!((mnr_loss(&x, &y).unwrap() - naive_loss(&x, &y)).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_decreases_with_diagonal_similarity() {
        // 2-d batch: y_0 rotates towards x_0, off-diagonal cosines stay fixed
        // because x_1 is orthogonal to the rotation plane in 3-d.
        let e = |v: Vec<f64>| normalize(&v).unwrap();
        let x = vec![e(vec![1.0, 0.0, 0.0]), e(vec![0.0, 0.0, 1.0])];
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let angle = 1.5 - step as f64 * 0.15;
            let y = vec![e(vec![angle.cos(), angle.sin(), 0.0]), e(vec![0.0, 0.0, 1.0])];
            let l = mnr_loss(&x, &y).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn loss_errors() {
        let e = |v: Vec<f64>| EmbeddingVector::new(v).unwrap();
        assert!(matches!(
            mnr_loss(&[e(vec![1.0, 0.0])], &[e(vec![1.0, 0.0, 0.0])]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(mnr_loss(&[e(vec![1.0])], &[]).is_err());
        assert!(matches!(mnr_loss(&[e(vec![0.0])], &[e(vec![1.0])]), Err(Error::ZeroVector)));
    }

    #[test]
    fn jsonl_round_trip() {
        let pairs = vec![pair("a", "b"), PositivePair { augmented: true, ..pair("b", "a") }];
        let mut buf = Vec::new();
        write_pairs_jsonl(&mut buf, &pairs).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.starts_with(r#"{"x_id":"a","y_id":"b","x_text":"","y_text":"","jn":1.0,"augmented":false}"#));
        assert_eq!(read_pairs_jsonl(buf.as_slice()).unwrap(), pairs);
    }
}
