use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_lakejoin");

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn lakejoin")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "lakejoin {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn jsonl(text: &str) -> Vec<Value> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn ranked(results: &[Value]) -> BTreeMap<String, Vec<(String, f64)>> {
    results
        .iter()
        .map(|r| {
            let hits = r["hits"]
                .as_array()
                .unwrap()
                .iter()
                .map(|h| (h["id"].as_str().unwrap().to_owned(), h["score"].as_f64().unwrap()))
                .collect();
            (r["query_id"].as_str().unwrap().to_owned(), hits)
        })
        .collect()
}

// Independent reading of the fixture lake: key column = most distinct
// trimmed non-empty values, leftmost on ties; tables under 5 cells dropped.
fn fixture_columns() -> BTreeMap<String, HashSet<String>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(fixtures().join("lake")).unwrap() {
        let path = entry.unwrap().path();
        let delim = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ',',
            Some("tsv") => '\t',
            _ => continue,
        };
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<Vec<&str>> = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| l.split(delim).map(str::trim).collect())
            .collect();
        let width = rows[0].len();
        let mut best: (usize, HashSet<String>) = (0, HashSet::new());
        for i in 0..width {
            let set: HashSet<String> = rows.iter().map(|r| r[i]).filter(|c| !c.is_empty()).map(str::to_owned).collect();
            if set.len() > best.1.len() {
                best = (i, set);
            }
        }
        if best.1.len() >= 5 {
            let stem = path.file_stem().unwrap().to_str().unwrap();
            out.insert(format!("{stem}:{}", best.0), best.1);
        }
    }
    out
}

fn fixture_queries() -> Vec<(String, HashSet<String>)> {
    std::fs::read_to_string(fixtures().join("queries.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let cells = v["cells"].as_array().unwrap().iter().map(|c| c.as_str().unwrap().to_owned()).collect();
            (v["id"].as_str().unwrap().to_owned(), cells)
        })
        .collect()
}

fn brute_equi(k: usize) -> BTreeMap<String, Vec<(String, f64)>> {
    let cols = fixture_columns();
    fixture_queries()
        .into_iter()
        .map(|(qid, q)| {
            let mut all: Vec<(String, f64)> = cols
                .iter()
                .map(|(id, x)| (id.clone(), q.intersection(x).count() as f64 / q.len() as f64))
                .collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            all.truncate(k);
            (qid, all)
        })
        .collect()
}

struct Lake {
    dir: tempfile::TempDir,
}

impl Lake {
    fn ingest() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake { dir };
        ok(&["ingest", "--input", fixtures().join("lake").to_str().unwrap(), "--out", &lake.path("repo.bin")]);
        lake
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_owned()
    }

    fn queries(&self) -> String {
        fixtures().join("queries.jsonl").to_str().unwrap().to_owned()
    }
}

#[test]
fn help_succeeds_and_hides_internal_commands() {
    let out = ok(&["--help"]);
    for cmd in ["ingest", "transform", "index", "search", "oracle", "traingen", "eval", "bench"] {
        assert!(out.contains(cmd), "missing {cmd} in help");
    }
    assert!(!out.contains("serve-hash"));
    assert!(run(&["search", "--help"]).status.success());
}

#[test]
fn bad_arguments_fail() {
    assert!(!run(&["--no-such-flag"]).status.success());
    assert!(!run(&["search", "--queries", "x", "--method", "bogus"]).status.success());
    let missing = run(&["oracle", "--repo", "/nonexistent/repo.bin", "--queries", "/nonexistent/q.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn ingest_skips_short_tables() {
    let lake = Lake::ingest();
    let text = ok(&["transform", "--repo", &lake.path("repo.bin"), "--pattern", "col"]);
    let ids: Vec<String> = jsonl(&text).iter().map(|r| r["id"].as_str().unwrap().to_owned()).collect();
    let expected: Vec<String> = fixture_columns().into_keys().collect();
    assert_eq!(ids, expected);
    assert!(!ids.iter().any(|id| id.starts_with("tiny")));
}

#[test]
fn oracle_matches_brute_force() {
    let lake = Lake::ingest();
    for k in [1, 3, 5] {
        let out = ok(&[
            "oracle", "--repo", &lake.path("repo.bin"), "--queries", &lake.queries(), "--k", &k.to_string(),
        ]);
        let got = ranked(&jsonl(&out));
        let want = brute_equi(k);
        assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
        for (q, hits) in &want {
            let g = &got[q];
            assert_eq!(g.len(), hits.len(), "{q}");
            for ((gi, gs), (wi, ws)) in g.iter().zip(hits) {
                assert_eq!(gi, wi, "{q} k={k}");
                assert!((gs - ws).abs() < 1e-12);
            }
        }
    }
    let via_search = ok(&[
        "search", "--method", "oracle", "--repo", &lake.path("repo.bin"), "--queries", &lake.queries(), "--k", "3",
    ]);
    assert_eq!(ranked(&jsonl(&via_search)), brute_equi(3));
}

#[test]
fn index_then_search_end_to_end() {
    let lake = Lake::ingest();
    ok(&[
        "index", "--repo", &lake.path("repo.bin"), "--embedder", "hash:64:3", "--out", &lake.path("idx.ljh"),
    ]);
    let out = ok(&[
        "search", "--index", &lake.path("idx.ljh"), "--repo", &lake.path("repo.bin"), "--queries", &lake.queries(),
        "--k", "2",
    ]);
    let got = ranked(&jsonl(&out));
    // the two planted partners of each query are the exact top 2 and share
    // most cells with it, so the hashed texts rank them first as well
    for (q, want) in brute_equi(2) {
        let mut g: Vec<&str> = got[&q].iter().map(|h| h.0.as_str()).collect();
        let mut w: Vec<&str> = want.iter().map(|h| h.0.as_str()).collect();
        g.sort();
        w.sort();
        assert_eq!(g, w, "{q}");
        assert!(got[&q].iter().all(|h| h.1 <= 1.0 + 1e-9));
    }
    let all = ok(&[
        "search", "--index", &lake.path("idx.ljh"), "--repo", &lake.path("repo.bin"), "--queries", &lake.queries(),
        "--k", "50",
    ]);
    for (_, hits) in ranked(&jsonl(&all)) {
        assert_eq!(hits.len(), fixture_columns().len());
        assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn minhash_search_estimates_close_to_exact() {
    let lake = Lake::ingest();
    let out = ok(&[
        "search", "--method", "minhash", "--m", "512", "--repo", &lake.path("repo.bin"), "--queries",
        &lake.queries(), "--k", "5",
    ]);
    let exact = brute_equi(5);
    for (q, hits) in ranked(&jsonl(&out)) {
        for (id, est) in hits {
            let truth = exact[&q].iter().find(|h| h.0 == id).map_or(0.0, |h| h.1);
            assert!((est - truth).abs() < 0.25, "{q} {id}: {est} vs {truth}");
        }
    }
}

#[test]
fn spawned_external_embedder_matches_in_process() {
    let lake = Lake::ingest();
    let repo = lake.path("repo.bin");
    ok(&["index", "--repo", &repo, "--embedder", "hash:32:5", "--out", &lake.path("a.ljh")]);
    let spec = format!("external:{BIN} serve-hash --dim 32 --seed 5");
    ok(&["index", "--repo", &repo, "--embedder", &spec, "--out", &lake.path("b.ljh")]);
    let search = |idx: &str| {
        ok(&["search", "--index", &lake.path(idx), "--repo", &repo, "--queries", &lake.queries(), "--k", "5"])
    };
    assert_eq!(search("a.ljh"), search("b.ljh"));
}

#[test]
fn tcp_external_embedder_matches_in_process() {
    let lake = Lake::ingest();
    let repo = lake.path("repo.bin");
    let mut server = Command::new(BIN)
        .args(["serve-hash", "--dim", "32", "--seed", "9", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut addr = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut addr).unwrap();
    let addr = addr.trim().to_owned();

    ok(&["index", "--repo", &repo, "--embedder", "hash:32:9", "--out", &lake.path("a.ljh")]);
    let local = ok(&["search", "--index", &lake.path("a.ljh"), "--repo", &repo, "--queries", &lake.queries()]);
    let remote = ok(&[
        "search", "--index", &lake.path("a.ljh"), "--repo", &repo, "--queries", &lake.queries(), "--embedder",
        &format!("external:{addr}"),
    ]);
    server.kill().unwrap();
    server.wait().unwrap();
    assert_eq!(local, remote);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let lake = Lake::ingest();
    let cfg = lake.path("lakejoin.toml");
    std::fs::write(&cfg, "pattern = \"col\"\n").unwrap();
    let repo = lake.path("repo.bin");
    let from_cfg = jsonl(&ok(&["--config", &cfg, "transform", "--repo", &repo]));
    let text = from_cfg[0]["text"].as_str().unwrap();
    assert!(!text.contains("contains"), "{text}");
    let flagged = jsonl(&ok(&["--config", &cfg, "transform", "--repo", &repo, "--pattern", "colname-stat-col"]));
    assert!(flagged[0]["text"].as_str().unwrap().contains("contains"));

    std::fs::write(&cfg, "patern = \"col\"\n").unwrap();
    assert!(!run(&["--config", &cfg, "transform", "--repo", &repo]).status.success());
}

#[test]
fn traingen_and_eval_run() {
    let lake = Lake::ingest();
    let repo = lake.path("repo.bin");
    let out = run(&[
        "traingen", "--repo", &repo, "--t", "0.5", "--r", "1", "--N", "2", "--out", &lake.path("pairs.jsonl"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pairs = jsonl(&std::fs::read_to_string(lake.path("pairs.jsonl")).unwrap());
    let cols = fixture_columns();
    let mut expected = 0;
    for (a, x) in &cols {
        for (b, y) in &cols {
            if a != b && x.intersection(y).count() as f64 / x.len() as f64 >= 0.5 {
                expected += 1;
            }
        }
    }
    assert_eq!(pairs.len(), 2 * expected);
    assert_eq!(pairs.iter().filter(|p| p["augmented"] == Value::Bool(true)).count(), expected);
    let batches = jsonl(&std::fs::read_to_string(lake.path("pairs.jsonl.batches.jsonl")).unwrap());
    for b in &batches {
        let members = b["members"].as_array().unwrap();
        assert_eq!(members.len(), 2);
        let ys: HashSet<&str> = members.iter().map(|m| pairs[m.as_u64().unwrap() as usize]["y_id"].as_str().unwrap()).collect();
        assert_eq!(ys.len(), 2);
    }

    ok(&["oracle", "--repo", &repo, "--queries", &lake.queries(), "--k", "3", "--out", &lake.path("exact.jsonl")]);
    let table = ok(&[
        "eval", "--exact", &lake.path("exact.jsonl"), "--model", &lake.path("exact.jsonl"), "--k", "1,3", "--out",
        &lake.path("report.json"),
    ]);
    assert!(table.contains("precision"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(lake.path("report.json")).unwrap()).unwrap();
    let m = &report["models"][lake.path("exact.jsonl")];
    assert_eq!(m["mean_precision"], serde_json::json!([1.0, 1.0]));
    assert_eq!(m["mean_ndcg"], serde_json::json!([1.0, 1.0]));
}

#[test]
fn bench_reports_latency() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"n_columns": 100, "n_queries": 3, "seed": 4}"#).unwrap();
    for method in ["oracle", "minhash", "ann"] {
        let out = ok(&["bench", "--spec", spec.to_str().unwrap(), "--method", method, "--k", "5", "--repeats", "1"]);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["queries"], 3);
        assert!(v["total"]["mean_us"].as_f64().unwrap() > 0.0);
    }
}
