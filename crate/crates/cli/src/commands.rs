use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lakejoin::ann::{HnswIndex, HnswParams};
use lakejoin::bench::{self, AnnMethod, CorpusSpec, MinHashMethod, OracleMethod, SearchMethod};
use lakejoin::contextualize::{render_with, Pattern, RenderOptions, SampleStrategy, Sampling, StatUnit, WhitespaceTokens};
use lakejoin::corpus::{self, Column, DocFreq, KeySelector, Repository, TableSource, UniformDocFreq};
use lakejoin::embed::external::ExternalEmbedder;
use lakejoin::embed::{embed_columns, protocol, CellEmbedder, ColumnEmbedder, EmbedderTokens, HashEmbedder};
use lakejoin::evalkit::{self, LabelPool, QueryResult};
use lakejoin::oracle::{self, EquiIndex, MatchConfig, SearchQuery, SemanticIndex};
use lakejoin::par::Execution;
use lakejoin::sketch::{SketchIndex, DEFAULT_NUM_HASHES};
use lakejoin::trainprep::{self, JoinMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::{
    BenchArgs, Cli, Command, EvalArgs, HnswArgs, IndexArgs, IngestArgs, InputFormat, JoinModeArg, Method, OracleArgs,
    RenderArgs, SearchArgs, ServeHashArgs, TraingenArgs, TransformArgs,
};

const DEFAULT_EMBEDDER: &str = "hash:256:0";

static UNIFORM: UniformDocFreq = UniformDocFreq;

struct Ctx {
    cfg: Config,
    exec: Execution,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let workers = cli.workers.or(cfg.workers).unwrap_or(1);
    let exec = execution(workers)?;
    let ctx = Ctx { cfg, exec };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Transform(a) => transform(&ctx, a),
        Command::Index(a) => index(&ctx, a),
        Command::Search(a) => search(&ctx, a),
        Command::Oracle(a) => run_oracle(&ctx, a),
        Command::Traingen(a) => traingen(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Bench(a) => run_bench(&ctx, a),
        Command::ServeHash(a) => serve_hash(a),
    }
}

fn execution(workers: usize) -> Result<Execution> {
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    if workers == 1 {
        return Ok(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("starting worker pool")?;
        Ok(Execution::Parallel)
    }
    #[cfg(not(feature = "parallel"))]
    {
        log::warn!("built without the parallel feature; running on one thread");
        Ok(Execution::Sequential)
    }
}

// embedders

enum Embedder {
    Hash(HashEmbedder),
    External(ExternalEmbedder),
}

impl Embedder {
    fn parse(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("hash:") {
            let (dim, seed) = match rest.split_once(':') {
                Some((d, s)) => (d, s),
                None => (rest, "0"),
            };
            let dim = dim.parse().with_context(|| format!("bad dimension in embedder {spec:?}"))?;
            let seed = seed.parse().with_context(|| format!("bad seed in embedder {spec:?}"))?;
            return Ok(Embedder::Hash(HashEmbedder::new(dim, seed)?));
        }
        if let Some(target) = spec.strip_prefix("external:") {
            let ext = if is_tcp_target(target) {
                ExternalEmbedder::connect_tcp(target)?
            } else {
                ExternalEmbedder::spawn(target)?
            };
            return Ok(Embedder::External(ext));
        }
        bail!("unknown embedder {spec:?}; expected hash:<dim>:<seed> or external:<host:port|command>")
    }

    fn column(&self) -> &dyn ColumnEmbedder {
        match self {
            Embedder::Hash(e) => e,
            Embedder::External(e) => e,
        }
    }

    fn cell(&self) -> &dyn CellEmbedder {
        match self {
            Embedder::Hash(e) => e,
            Embedder::External(e) => e,
        }
    }
}

/// `host:port` without whitespace is a socket address; anything else is a
/// command line.
fn is_tcp_target(target: &str) -> bool {
    !target.contains(char::is_whitespace)
        && target
            .rsplit_once(':')
            .is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok())
}

fn embedder_spec(flag: Option<&str>, cfg: &Config) -> String {
    flag.map(str::to_owned)
        .or_else(|| cfg.embedder.clone())
        .unwrap_or_else(|| DEFAULT_EMBEDDER.to_owned())
}

// rendering

fn render_options(args: &RenderArgs, cfg: &Config, fallback_budget: usize) -> Result<RenderOptions> {
    let pattern = match args.pattern.as_ref().or(cfg.pattern.as_ref()) {
        Some(p) => p.parse::<Pattern>()?,
        None => Pattern::default(),
    };
    let sampling = match args.strategy.as_ref().or(cfg.strategy.as_ref()) {
        Some(s) => s.parse::<Sampling>()?,
        None => Sampling::Frequency,
    };
    let budget = args.budget.or(cfg.budget).unwrap_or(fallback_budget);
    let stat_unit = match args.stat_unit.as_deref().or(cfg.stat_unit.as_deref()) {
        None | Some("chars") => StatUnit::Chars,
        Some("words") => StatUnit::Words,
        Some(other) => bail!("unknown stat unit {other:?}; expected chars or words"),
    };
    Ok(RenderOptions {
        pattern,
        strategy: SampleStrategy::new(sampling, budget)?,
        stat_unit,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    embedder: String,
    render: RenderOptions,
}

// io helpers

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_repo(path: &Path) -> Result<Repository> {
    Repository::load(path).with_context(|| format!("loading repository {}", path.display()))
}

fn read_queries(path: &Path) -> Result<Vec<Column>> {
    corpus::read_jsonl_columns(open(path)?).with_context(|| format!("reading queries {}", path.display()))
}

fn read_results(path: &Path) -> Result<Vec<QueryResult>> {
    evalkit::read_results_jsonl(open(path)?).with_context(|| format!("reading results {}", path.display()))
}

fn write_results(path: Option<&Path>, results: &[QueryResult]) -> Result<()> {
    evalkit::write_results_jsonl(output(path)?, results)?;
    Ok(())
}

// ingest

fn parse_key(s: &str) -> Result<KeySelector> {
    if s == "maxdistinct" {
        return Ok(KeySelector::MaxDistinct);
    }
    match s.strip_prefix("explicit:") {
        Some(n) => Ok(KeySelector::ExplicitIndex(
            n.parse().with_context(|| format!("bad column index in {s:?}"))?,
        )),
        None => bail!("unknown key selector {s:?}; expected explicit:<n> or maxdistinct"),
    }
}

fn format_of(path: &Path, forced: Option<InputFormat>) -> Option<InputFormat> {
    forced.or_else(|| match path.extension()?.to_str()? {
        "csv" => Some(InputFormat::Csv),
        "tsv" => Some(InputFormat::Tsv),
        "jsonl" => Some(InputFormat::Jsonl),
        _ => None,
    })
}

fn collect_inputs(inputs: &[PathBuf], forced: Option<InputFormat>) -> Result<Vec<(PathBuf, InputFormat)>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<io::Result<_>>()?;
            entries.sort();
            for e in entries {
                if e.is_file() {
                    if let Some(f) = format_of(&e, forced) {
                        out.push((e, f));
                    }
                }
            }
        } else {
            let f = format_of(p, forced)
                .ok_or_else(|| anyhow!("cannot tell the format of {}; pass --format", p.display()))?;
            out.push((p.clone(), f));
        }
    }
    Ok(out)
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    let key = parse_key(&a.key)?;
    let min_cells = a.min_cells.or(ctx.cfg.min_cells).unwrap_or(corpus::MIN_COLUMN_CELLS);
    let files = collect_inputs(&a.input, a.format)?;
    if files.is_empty() {
        bail!("no input tables found");
    }
    let mut columns = Vec::new();
    let mut short = 0;
    for (path, format) in &files {
        match format {
            InputFormat::Jsonl => {
                columns.extend(corpus::read_jsonl_columns(open(path)?).with_context(|| format!("reading {}", path.display()))?);
            }
            InputFormat::Csv | InputFormat::Tsv => {
                let delim = if *format == InputFormat::Csv { b',' } else { b'\t' };
                let src = TableSource::parse(open(path)?, delim).with_context(|| format!("parsing {}", path.display()))?;
                let table_id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| anyhow!("bad file name {}", path.display()))?;
                let got = corpus::ingest_table(&src, table_id, key, min_cells)
                    .with_context(|| format!("ingesting {}", path.display()))?;
                short += got.warnings.len();
                columns.extend(got.columns);
            }
        }
    }
    let (keep, rejected) = corpus::admit(columns, min_cells);
    for id in &rejected {
        log::warn!("column {id} has fewer than {min_cells} distinct cells; skipped");
    }
    let repo = Repository::build(keep)?;
    repo.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "ingested {} columns from {} files ({} skipped as too short)",
        repo.len(),
        files.len(),
        short + rejected.len()
    );
    Ok(())
}

// transform

#[derive(Serialize)]
struct TextRecord<'a> {
    id: &'a str,
    text: String,
    truncated: bool,
}

fn transform(ctx: &Ctx, a: TransformArgs) -> Result<()> {
    let repo = load_repo(&a.repo)?;
    let emb = a.embedder.as_deref().map(Embedder::parse).transpose()?;
    let fallback = emb.as_ref().map_or(SampleStrategy::default().token_budget, |e| e.column().token_budget());
    let opts = render_options(&a.render, &ctx.cfg, fallback)?;
    let rendered = ctx.exec.try_map(repo.columns(), |c| match &emb {
        Some(e) => render_with(c, &opts, &repo, &EmbedderTokens(e.column())),
        None => render_with(c, &opts, &repo, &WhitespaceTokens),
    })?;
    let mut w = output(a.out.as_deref())?;
    for (c, t) in repo.columns().iter().zip(rendered) {
        serde_json::to_writer(
            &mut w,
            &TextRecord {
                id: &c.id,
                text: t.text,
                truncated: t.truncated,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// index

fn hnsw_params(a: &HnswArgs, cfg: &Config, seed: Option<u64>) -> Result<HnswParams> {
    let mut p = HnswParams::with_m(a.m.or(cfg.hnsw.m).unwrap_or(HnswParams::default().m));
    if let Some(v) = a.ef_construction.or(cfg.hnsw.ef_construction) {
        p.ef_construction = v;
    }
    if let Some(v) = a.ef_search.or(cfg.hnsw.ef_search) {
        p.ef_search = v;
    }
    p.seed = seed.or(cfg.seed).unwrap_or(0);
    p.validate()?;
    Ok(p)
}

fn build_index(
    repo: &Repository,
    emb: &Embedder,
    spec: &str,
    opts: &RenderOptions,
    params: HnswParams,
    exec: Execution,
) -> Result<HnswIndex> {
    let vectors = embed_columns(repo.columns(), emb.column(), opts, repo, exec)?;
    let total = vectors.len();
    let items: Vec<_> = vectors
        .into_iter()
        .filter(|(id, v)| {
            if v.is_zero() {
                log::warn!("column {id} embeds to the zero vector; left out of the index");
            }
            !v.is_zero()
        })
        .collect();
    if items.len() < total {
        log::warn!("{} of {total} columns were not indexed", total - items.len());
    }
    let mut index = HnswIndex::build(items, params)?;
    index.set_metadata(serde_json::to_string(&IndexMeta {
        embedder: spec.to_owned(),
        render: *opts,
    })?);
    Ok(index)
}

fn index(ctx: &Ctx, a: IndexArgs) -> Result<()> {
    let repo = load_repo(&a.repo)?;
    let spec = embedder_spec(a.embedder.as_deref(), &ctx.cfg);
    let emb = Embedder::parse(&spec)?;
    let opts = render_options(&a.render, &ctx.cfg, emb.column().token_budget())?;
    let params = hnsw_params(&a.hnsw, &ctx.cfg, a.seed)?;
    let index = build_index(&repo, &emb, &spec, &opts, params, ctx.exec)?;
    index.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("indexed {} of {} columns (dim {})", index.len(), repo.len(), index.dim());
    Ok(())
}

// search

fn search(ctx: &Ctx, a: SearchArgs) -> Result<()> {
    let queries = read_queries(&a.queries)?;
    let repo = a.repo.as_deref().map(load_repo).transpose()?;
    let results = match a.method {
        Method::Ann => {
            let path = a.index.as_deref().ok_or_else(|| anyhow!("--method ann needs --index"))?;
            let index = HnswIndex::load(path).with_context(|| format!("loading index {}", path.display()))?;
            let meta: IndexMeta = serde_json::from_str(index.metadata())
                .context("index metadata does not record an embedder; was it built by `lakejoin index`?")?;
            let spec = a.embedder.clone().unwrap_or(meta.embedder);
            let emb = Embedder::parse(&spec)?;
            let doc_freq: &(dyn DocFreq + Sync) = match &repo {
                Some(r) => r,
                None => {
                    log::warn!("no --repo given; cell sampling falls back to uniform frequencies");
                    &UNIFORM
                }
            };
            let method = AnnMethod {
                index: &index,
                embedder: emb.column(),
                render: meta.render,
                doc_freq,
                ef_search: a.ef_search.or(ctx.cfg.hnsw.ef_search).unwrap_or(index.params().ef_search),
            };
            run_method(&method, &queries, a.k, ctx.exec)?
        }
        Method::Minhash => {
            let repo = repo.as_ref().ok_or_else(|| anyhow!("--method minhash needs --repo"))?;
            let m = a.m.or(ctx.cfg.minhash.m).unwrap_or(DEFAULT_NUM_HASHES);
            let seed = a.seed.or(ctx.cfg.seed).unwrap_or(0);
            let method = MinHashMethod {
                repo,
                index: SketchIndex::build(repo, m, seed, ctx.exec)?,
            };
            run_method(&method, &queries, a.k, ctx.exec)?
        }
        Method::Oracle => {
            let repo = repo.as_ref().ok_or_else(|| anyhow!("--method oracle needs --repo"))?;
            run_method(&OracleMethod::new(repo), &queries, a.k, ctx.exec)?
        }
    };
    write_results(a.out.as_deref(), &results)
}

fn run_method<M: SearchMethod>(method: &M, queries: &[Column], k: usize, exec: Execution) -> Result<Vec<QueryResult>> {
    if k == 0 {
        bail!("--k must be at least 1");
    }
    Ok(exec.try_map(queries, |q| method.run(q, k).map(|r| QueryResult::new(q.id.clone(), r)))?)
}

// oracle

fn run_oracle(ctx: &Ctx, a: OracleArgs) -> Result<()> {
    let repo = load_repo(&a.repo)?;
    let queries = read_queries(&a.queries)?;
    for q in &queries {
        SearchQuery::new(q, a.k)?;
    }
    let results: Vec<QueryResult> = match a.mode {
        JoinModeArg::Equi => {
            let index = EquiIndex::build(&repo);
            let found = oracle::exact_equi_topk_batch(&queries, a.k, &repo, &index, ctx.exec);
            queries.iter().zip(found).map(|(q, r)| QueryResult::new(q.id.clone(), r)).collect()
        }
        JoinModeArg::Semantic => {
            let emb = Embedder::parse(&embedder_spec(a.embedder.as_deref(), &ctx.cfg))?;
            let cfg = MatchConfig::new(a.tau, emb.cell())?;
            let index = SemanticIndex::build(&repo, emb.cell(), a.pivots, ctx.exec)?;
            let mut out = Vec::with_capacity(queries.len());
            for q in &queries {
                let r = oracle::exact_semantic_topk(&SearchQuery::new(q, a.k)?, &repo, &index, &cfg, ctx.exec)?;
                out.push(QueryResult::new(q.id.clone(), r));
            }
            out
        }
    };
    write_results(a.out.as_deref(), &results)
}

// traingen

fn traingen(ctx: &Ctx, a: TraingenArgs) -> Result<()> {
    let repo = load_repo(&a.repo)?;
    let emb = match a.mode {
        JoinModeArg::Semantic => Some(Embedder::parse(&embedder_spec(a.embedder.as_deref(), &ctx.cfg))?),
        JoinModeArg::Equi => None,
    };
    let cfg = TrainConfig {
        threshold: a.t,
        shuffle_rate: a.r,
        batch_size: a.n,
        join_mode: match a.mode {
            JoinModeArg::Equi => JoinMode::Equi,
            JoinModeArg::Semantic => JoinMode::Semantic { tau: a.tau },
        },
        seed: a.seed.or(ctx.cfg.seed).unwrap_or(0),
        sample_size: a.sample_size,
        render: render_options(&a.render, &ctx.cfg, SampleStrategy::default().token_budget)?,
    };
    cfg.validate()?;
    let positives = trainprep::self_join_positives(&repo, &cfg, emb.as_ref().map(Embedder::cell), ctx.exec)?;
    let base = positives.len();
    let pairs = trainprep::augment_shuffle(&positives, cfg.shuffle_rate, cfg.seed, &repo, &cfg.render)?;
    let plan = trainprep::make_batches(&pairs, cfg.batch_size, cfg.seed)?;
    trainprep::write_pairs_jsonl(create(&a.out)?, &pairs)?;
    let manifest = a.manifest.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".batches.jsonl");
        PathBuf::from(s)
    });
    trainprep::write_manifest(create(&manifest)?, &plan)?;
    eprintln!(
        "{base} positive pairs, {} augmented, {} batches of {}, {} pairs dropped",
        pairs.len() - base,
        plan.batches.len(),
        plan.batch_size,
        plan.dropped
    );
    Ok(())
}

// eval

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let exact = read_results(&a.exact)?;
    let jn = evalkit::jn_from_exact(&exact);
    let mut by_method = BTreeMap::new();
    let mut reports = BTreeMap::new();
    for path in &a.model {
        let name = path.display().to_string();
        let model = read_results(path)?;
        let report = evalkit::evaluate(&model, &exact, &a.k, &jn, ctx.exec).with_context(|| format!("scoring {name}"))?;
        println!("{name}");
        print!("{}", report.to_table());
        println!();
        reports.insert(name.clone(), report);
        by_method.insert(name, model);
    }
    let pooled = match &a.pool {
        Some(p) => {
            let pool = LabelPool::read_jsonl(open(p)?).with_context(|| format!("reading labels {}", p.display()))?;
            let prf = evalkit::pooled_prf(&by_method, &pool)?;
            println!("{:<40}  {:>9}  {:>7}  {:>7}", "pooled", "precision", "recall", "f1");
            for (name, v) in &prf {
                println!("{name:<40}  {:>9.4}  {:>7.4}  {:>7.4}", v.precision, v.recall, v.f1);
            }
            Some(prf)
        }
        None => None,
    };
    if let Some(out) = &a.out {
        let doc = serde_json::json!({ "models": reports, "pooled": pooled });
        let mut w = create(out)?;
        serde_json::to_writer_pretty(&mut w, &doc)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

// bench

fn run_bench(ctx: &Ctx, a: BenchArgs) -> Result<()> {
    let spec: CorpusSpec = match &a.spec {
        Some(p) => serde_json::from_reader(open(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => CorpusSpec::default(),
    };
    let lake = bench::generate(&spec)?;
    eprintln!("generated {} columns and {} queries", lake.repo.len(), lake.queries.len());
    let report = match a.method {
        Method::Oracle => bench::time_search(&OracleMethod::new(&lake.repo), &lake.queries, a.k, a.repeats)?,
        Method::Minhash => {
            let m = ctx.cfg.minhash.m.unwrap_or(DEFAULT_NUM_HASHES);
            let method = MinHashMethod {
                repo: &lake.repo,
                index: SketchIndex::build(&lake.repo, m, ctx.cfg.seed.unwrap_or(0), ctx.exec)?,
            };
            bench::time_search(&method, &lake.queries, a.k, a.repeats)?
        }
        Method::Ann => {
            let spec_str = embedder_spec(a.embedder.as_deref(), &ctx.cfg);
            let emb = Embedder::parse(&spec_str)?;
            let opts = render_options(&a.render, &ctx.cfg, emb.column().token_budget())?;
            let params = hnsw_params(&a.hnsw, &ctx.cfg, None)?;
            let index = build_index(&lake.repo, &emb, &spec_str, &opts, params, ctx.exec)?;
            let method = AnnMethod {
                index: &index,
                embedder: emb.column(),
                render: opts,
                doc_freq: &lake.repo,
                ef_search: params.ef_search,
            };
            bench::time_search(&method, &lake.queries, a.k, a.repeats)?
        }
    };
    let mut w = output(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

// serve-hash

fn serve_hash(a: ServeHashArgs) -> Result<()> {
    let emb = HashEmbedder::new(a.dim, a.seed)?.with_budget(a.budget);
    let Some(addr) = a.listen else {
        let stdin = io::stdin();
        return Ok(protocol::serve(stdin.lock(), io::stdout().lock(), &emb)?);
    };
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
    // the bound address goes to stdout so callers can pass port 0
    println!("{}", listener.local_addr()?);
    io::stdout().flush()?;
    std::thread::scope(|s| {
        for conn in listener.incoming() {
            let conn = match conn {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let _ = conn.set_nodelay(true);
            let emb = &emb;
            s.spawn(move || {
                let reader = match conn.try_clone() {
                    Ok(r) => BufReader::new(r),
                    Err(e) => return log::warn!("connection setup failed: {e}"),
                };
                if let Err(e) = protocol::serve(reader, BufWriter::new(conn), emb) {
                    log::warn!("connection closed: {e}");
                }
            });
        }
    });
    Ok(())
}
