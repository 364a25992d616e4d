//! Accuracy of approximate search against exact answers.
//!
//! * precision@k: overlap of the model's and the exact top-k, over k;
//! * NDCG@k with joinability as the gain and `log2(i + 1)` as the discount,
//!   normalized by the exact ranking's DCG (1.0 when that DCG is 0);
//! * pooled precision / recall / F1 against a label pool, where recall is
//!   measured against the positives found in the union of every compared
//!   method's retrievals.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::oracle::{Hit, SearchResult};
use crate::par::Execution;
use crate::{Error, Result};

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    Ok(())
}

pub fn precision_at_k(model: &SearchResult, exact: &SearchResult, k: usize) -> Result<f64> {
    check_k(k)?;
    let truth: HashSet<&str> = exact.ids().take(k).collect();
    let mut seen = HashSet::new();
    let hits = model
        .ids()
        .take(k)
        .filter(|id| seen.insert(*id) && truth.contains(id))
        .count();
    Ok(hits as f64 / k as f64)
}

fn dcg<'a>(ids: impl Iterator<Item = &'a str>, jn: &dyn Fn(&str) -> f64, k: usize) -> f64 {
    ids.take(k)
        .enumerate()
        .map(|(i, id)| jn(id) / ((i + 2) as f64).log2())
        .sum()
}

/// `DCG(model) / DCG(exact)` over the first `k` entries, gains from `jn`.
pub fn ndcg_at_k(model: &SearchResult, exact: &SearchResult, jn: &dyn Fn(&str) -> f64, k: usize) -> Result<f64> {
    check_k(k)?;
    let ideal = dcg(exact.ids(), jn, k);
    if ideal <= 0.0 {
        return Ok(1.0);
    }
    Ok((dcg(model.ids(), jn, k) / ideal).clamp(0.0, 1.0))
}

/// Ranked answer for one query, as stored in result files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl QueryResult {
    pub fn new(query_id: impl Into<String>, result: SearchResult) -> Self {
        QueryResult {
            query_id: query_id.into(),
            hits: result.hits,
        }
    }

    pub fn result(&self) -> SearchResult {
        SearchResult { hits: self.hits.clone() }
    }
}

pub fn read_results_jsonl<R: BufRead>(r: R) -> Result<Vec<QueryResult>> {
    read_jsonl(r)
}

pub fn write_results_jsonl<W: Write>(mut w: W, results: &[QueryResult]) -> Result<()> {
    for q in results {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub query_id: String,
    pub positive_ids: Vec<String>,
    /// Every id that was judged for this query. When present, retrievals
    /// outside it are rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_ids: Option<Vec<String>>,
}

/// Judged-joinable columns per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelPool {
    positives: HashMap<String, HashSet<String>>,
    judged: HashMap<String, HashSet<String>>,
}

impl LabelPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, positives: &[&str], judged: Option<&[&str]>) {
        self.positives
            .entry(query_id.to_owned())
            .or_default()
            .extend(positives.iter().map(|s| s.to_string()));
        if let Some(j) = judged {
            let set = self.judged.entry(query_id.to_owned()).or_default();
            set.extend(j.iter().map(|s| s.to_string()));
            set.extend(positives.iter().map(|s| s.to_string()));
        }
    }

    pub fn from_records(records: Vec<LabelRecord>) -> Self {
        let mut pool = LabelPool::new();
        for r in records {
            let pos: Vec<&str> = r.positive_ids.iter().map(String::as_str).collect();
            let judged: Option<Vec<&str>> = r.pool_ids.as_ref().map(|p| p.iter().map(String::as_str).collect());
            pool.insert(&r.query_id, &pos, judged.as_deref());
        }
        pool
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        Ok(Self::from_records(read_jsonl(r)?))
    }

    pub fn positives(&self, query_id: &str) -> Option<&HashSet<String>> {
        self.positives.get(query_id)
    }

    /// Errors on ids the repository does not know.
    pub fn validate(&self, known: &dyn Fn(&str) -> bool) -> Result<()> {
        for ids in self.positives.values().chain(self.judged.values()) {
            if let Some(bad) = ids.iter().find(|id| !known(id)) {
                return Err(Error::UnknownId(bad.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: usize, retrieved: usize, relevant: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(hits, retrieved);
        let recall = ratio(hits, relevant);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

/// Pooled precision / recall / F1 per method, summing counts over the
/// queries each method answered.
pub fn pooled_prf(
    results_by_method: &BTreeMap<String, Vec<QueryResult>>,
    pool: &LabelPool,
) -> Result<BTreeMap<String, Prf>> {
    let mut out = BTreeMap::new();
    for (method, results) in results_by_method {
        let (mut hits, mut retrieved, mut relevant) = (0, 0, 0);
        for q in results {
            let positives = pool
                .positives
                .get(&q.query_id)
                .ok_or_else(|| Error::MissingId(format!("query {} has no labels", q.query_id)))?;
            let judged = pool.judged.get(&q.query_id);
            let ids: HashSet<&str> = q.hits.iter().map(|h| h.id.as_str()).collect();
            for id in &ids {
                if judged.is_some_and(|j| !j.contains(*id)) {
                    return Err(Error::MissingId(format!(
                        "{method} retrieved {id} for {}, outside the judged pool",
                        q.query_id
                    )));
                }
            }
            hits += ids.iter().filter(|id| positives.contains(**id)).count();
            retrieved += ids.len();
            relevant += positives.len();
        }
        out.insert(method.clone(), Prf::from_counts(hits, retrieved, relevant));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    /// Aligned with the report's `ks`.
    pub precision: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub per_query: Vec<QueryMetrics>,
    pub mean_precision: Vec<f64>,
    pub mean_ndcg: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled: Option<BTreeMap<String, Prf>>,
}

/// Scores `model` against `exact` for every k. `jn(query_id, column_id)`
/// gives the true joinability used as the NDCG gain.
pub fn evaluate(
    model: &[QueryResult],
    exact: &[QueryResult],
    ks: &[usize],
    jn: &(dyn Fn(&str, &str) -> f64 + Sync),
    exec: Execution,
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::InvalidParam("no k given".into()));
    }
    for &k in ks {
        check_k(k)?;
    }
    let truth: HashMap<&str, &QueryResult> = exact.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let per_query = exec.try_map(model, |m| {
        let e = truth
            .get(m.query_id.as_str())
            .ok_or_else(|| Error::MissingId(format!("no exact result for query {}", m.query_id)))?;
        let (mr, er) = (m.result(), e.result());
        let gain = |id: &str| jn(&m.query_id, id);
        let precision = ks.iter().map(|&k| precision_at_k(&mr, &er, k)).collect::<Result<_>>()?;
        let ndcg = ks.iter().map(|&k| ndcg_at_k(&mr, &er, &gain, k)).collect::<Result<_>>()?;
        Ok::<_, Error>(QueryMetrics {
            query_id: m.query_id.clone(),
            precision,
            ndcg,
        })
    })?;
    let mean = |f: &dyn Fn(&QueryMetrics) -> &Vec<f64>| -> Vec<f64> {
        (0..ks.len())
            .map(|i| {
                if per_query.is_empty() {
                    0.0
                } else {
                    per_query.iter().map(|q| f(q)[i]).sum::<f64>() / per_query.len() as f64
                }
            })
            .collect()
    };
    Ok(EvalReport {
        ks: ks.to_vec(),
        mean_precision: mean(&|q| &q.precision),
        mean_ndcg: mean(&|q| &q.ndcg),
        per_query,
        pooled: None,
    })
}

/// Joinability lookup from the scores stored in exact results; ids missing
/// from a query's exact list count as 0.
pub fn jn_from_exact(exact: &[QueryResult]) -> impl Fn(&str, &str) -> f64 + Sync + '_ {
    let table: HashMap<(&str, &str), f64> = exact
        .iter()
        .flat_map(|q| q.hits.iter().map(move |h| ((q.query_id.as_str(), h.id.as_str()), h.score)))
        .collect();
    move |q, id| table.get(&(q, id)).copied().unwrap_or(0.0)
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6}  {:>9}  {:>7}", "k", "precision", "ndcg");
        for (i, k) in self.ks.iter().enumerate() {
            let _ = writeln!(s, "{:>6}  {:>9.4}  {:>7.4}", k, self.mean_precision[i], self.mean_ndcg[i]);
        }
        if let Some(pooled) = &self.pooled {
            let width = pooled.keys().map(String::len).max().unwrap_or(6).max(6);
            let _ = writeln!(s);
            let _ = writeln!(s, "{:>width$}  {:>9}  {:>7}  {:>7}", "method", "precision", "recall", "f1");
            for (m, p) in pooled {
                let _ = writeln!(s, "{:>width$}  {:>9.4}  {:>7.4}  {:>7.4}", m, p.precision, p.recall, p.f1);
            }
        }
        s
    }
}
