use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use villa_core::corpus::{load_corpus, load_ground_truth, Corpus, GroundTruthDataset};
use villa_core::datastore::build_datastores;
use villa_core::embedding::{Embedder, EmbedderConfig};
use villa_core::evaluation::{
    abstract_distance_analysis, aggregate, score_manifest, sweep, write_results_csv, write_sweep_csv, Cell,
    ExperimentSummary, SweepSetup,
};
use villa_core::pipeline::{
    run_experiment, Method, OracleResponder, PromptMode, PromptTemplate, RemoteResponder, Responder, RunManifest,
    ScriptedResponder, Templates,
};
use villa_core::synthetic::{fixture, MutationPlacement};
use villa_core::vectorstore::VectorStore;
use villa_review_api::auth::{Role, TokenEntry, Tokens};
use villa_review_api::ingest::items_from_manifest;
use villa_review_api::store::ReviewStore;
use villa_review_api::AppState;

use crate::config::{load_config, resolve, Settings};
use crate::workspace::{write_file, Workspace};
use crate::{Cli, Command, PlacementArg};

pub const FIXED_CLOCK: &str = "1970-01-01T00:00:00Z";

struct Ctx {
    ws: Workspace,
    settings: Settings,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let ws = Workspace::new(&cli.workspace);
    let file = match &cli.config {
        Some(p) => load_config(p)?,
        None if ws.config().exists() => load_config(&ws.config())?,
        None => Default::default(),
    };
    let settings = resolve(file, cli.tuning.to_table())?;
    let ctx = Ctx { ws, settings };
    match cli.command {
        Command::Ingest { corpus, ground_truth } => ingest(&ctx, &corpus, &ground_truth),
        Command::Synth { placement } => synth(&ctx, placement),
        Command::Embed => embed(&ctx),
        Command::Run {
            method,
            proteins,
            output,
            fixed_clock,
        } => run(&ctx, method, proteins, output, fixed_clock),
        Command::Evaluate { runs, ground_truth } => evaluate(&ctx, runs, ground_truth),
        Command::Sweep {
            k_a_values,
            k_c_values,
            proteins,
        } => run_sweep(&ctx, &k_a_values, &k_c_values, proteins),
        Command::AnalyzeDistances { proteins } => analyze_distances(&ctx, proteins),
        Command::Serve {
            addr,
            tokens,
            manifests,
        } => serve(&ctx, &addr, tokens, &manifests),
    }
}

fn report_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn ingest(ctx: &Ctx, corpus_path: &Path, gt_path: &Path) -> Result<()> {
    let corpus = load_corpus(corpus_path).with_context(|| format!("loading corpus {}", corpus_path.display()))?;
    let gt = load_ground_truth(gt_path, Some(&corpus))
        .with_context(|| format!("loading ground truth {}", gt_path.display()))?;
    report_warnings(&gt.warnings);
    store_corpus(ctx, &corpus, &gt.dataset)
}

fn store_corpus(ctx: &Ctx, corpus: &Corpus, gt: &GroundTruthDataset) -> Result<()> {
    write_file(&ctx.ws.corpus(), corpus.to_jsonl())?;
    write_file(&ctx.ws.ground_truth(), gt.to_csv())?;
    let mutations: usize = gt.proteins().map(|p| gt.protein(p).unwrap().mutations.len()).sum();
    println!(
        "publications: {}, proteins: {}, mutations: {mutations}",
        corpus.len(),
        gt.len()
    );
    Ok(())
}

fn synth(ctx: &Ctx, placement: PlacementArg) -> Result<()> {
    let f = fixture(match placement {
        PlacementArg::Spread => MutationPlacement::Spread,
        PlacementArg::FirstChunk => MutationPlacement::FirstChunk,
    });
    let EmbedderConfig::Mock { seed, dim } = f.embedder else {
        unreachable!("the fixture uses the mock embedder")
    };
    let r = f.retrieval;
    let config = format!(
        "# Settings the synthetic fixture is built around.\n\
         virus = {:?}\nk = {}\nk_a = {}\nk_c = {}\nt = {}\nquery_mode = \"short\"\n\
         embedder = \"mock\"\nmock_seed = {seed}\nembedder_dim = {dim}\niterations = 1\n",
        f.virus, r.k, r.k_a, r.k_c, r.t_abstracts
    );
    write_file(&ctx.ws.config(), config)?;
    store_corpus(ctx, &f.corpus, &f.ground_truth)
}

fn read_corpus(ctx: &Ctx) -> Result<Corpus> {
    let path = ctx.ws.corpus();
    load_corpus(&path).with_context(|| format!("loading corpus {} (run `villa ingest` first)", path.display()))
}

fn read_ground_truth(path: &Path, corpus: Option<&Corpus>) -> Result<GroundTruthDataset> {
    let gt = load_ground_truth(path, corpus).with_context(|| format!("loading ground truth {}", path.display()))?;
    report_warnings(&gt.warnings);
    Ok(gt.dataset)
}

fn base_url(var: &str) -> Result<String> {
    let url = std::env::var(var).map_err(|_| anyhow!("{var} must be set to use a remote backend"))?;
    Ok(url.trim_end_matches('/').to_string())
}

fn embedder_config(s: &Settings) -> Result<EmbedderConfig> {
    Ok(match s.embedder.strip_prefix("remote:") {
        None => EmbedderConfig::Mock {
            seed: s.mock_seed,
            dim: s.embedder_dim,
        },
        Some(model) => EmbedderConfig::Remote {
            url: format!("{}/embeddings", base_url("EMBEDDER_BASE_URL")?),
            model: model.to_string(),
            query_model: None,
            dim: s.embedder_dim,
            max_chars: s.embedder_max_chars,
        },
    })
}

fn build_embedder(config: &EmbedderConfig, jobs: usize) -> Result<Box<dyn Embedder>> {
    let key = std::env::var("EMBEDDER_API_KEY").ok();
    Ok(config.build(key, jobs)?)
}

fn embed(ctx: &Ctx) -> Result<()> {
    let corpus = read_corpus(ctx)?;
    let config = embedder_config(&ctx.settings)?;
    let embedder = build_embedder(&config, ctx.settings.jobs)?;
    let stores = build_datastores(&corpus, embedder.as_ref(), ctx.settings.chunking())?;
    report_warnings(&stores.warnings);
    for (store, path) in [
        (&stores.abstracts, ctx.ws.abstracts_store()),
        (&stores.fulltext, ctx.ws.fulltext_store()),
    ] {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        store.persist(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    write_file(&ctx.ws.embedder(), serde_json::to_string_pretty(&config)?)?;
    println!("abstracts: {}, chunks: {}", stores.abstracts.len(), stores.fulltext.len());
    Ok(())
}

/// Stores and the embedder that built them.
struct Loaded {
    embedder: Box<dyn Embedder>,
    abstracts: VectorStore,
    fulltext: VectorStore,
}

fn load_stores(ctx: &Ctx) -> Result<Loaded> {
    let path = ctx.ws.embedder();
    let text = fs::read_to_string(&path).with_context(|| format!("reading {} (run `villa embed` first)", path.display()))?;
    let config: EmbedderConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let open = |p: PathBuf| VectorStore::open(&p).with_context(|| format!("opening {}", p.display()));
    Ok(Loaded {
        embedder: build_embedder(&config, ctx.settings.jobs)?,
        abstracts: open(ctx.ws.abstracts_store())?,
        fulltext: open(ctx.ws.fulltext_store())?,
    })
}

fn templates(s: &Settings) -> Result<Templates> {
    let load = |path: &Option<PathBuf>, mode: PromptMode, fallback: PromptTemplate| -> Result<PromptTemplate> {
        let Some(path) = path else { return Ok(fallback) };
        let text = fs::read_to_string(path).with_context(|| format!("reading template {}", path.display()))?;
        let t: PromptTemplate = toml::from_str(&text).with_context(|| format!("parsing template {}", path.display()))?;
        ensure!(t.mode() == mode, "{}: expected a {mode:?} template", path.display());
        Ok(t)
    };
    Ok(Templates {
        zero_shot: load(&s.zero_shot_template, PromptMode::ZeroShot, PromptTemplate::default_zero_shot())?,
        rag: load(&s.rag_template, PromptMode::Rag, PromptTemplate::default_rag())?,
    })
}

fn build_responder(spec: &str, gt: Option<&GroundTruthDataset>) -> Result<Box<dyn Responder>> {
    Ok(match spec {
        "mock:oracle" => Box::new(OracleResponder::new(
            gt.ok_or_else(|| anyhow!("the oracle responder needs the workspace ground truth"))?,
        )),
        "mock:empty" => Box::new(ScriptedResponder::fixed(
            "empty",
            r#"{"mutations": [], "reasoning": "nothing reported"}"#,
        )),
        _ => match spec.strip_prefix("remote:") {
            Some(model) if !model.is_empty() => Box::new(RemoteResponder::new(
                &format!("{}/chat/completions", base_url("RESPONDER_BASE_URL")?),
                model,
                std::env::var("RESPONDER_API_KEY").ok(),
            )),
            _ => bail!("unknown responder {spec:?}; expected mock:oracle, mock:empty or remote:MODEL"),
        },
    })
}

fn proteins_or_all(proteins: Vec<String>, gt: Option<&GroundTruthDataset>) -> Result<Vec<String>> {
    if !proteins.is_empty() {
        return Ok(proteins);
    }
    let gt = gt.ok_or_else(|| anyhow!("no --proteins given and no ground truth in the workspace"))?;
    ensure!(!gt.is_empty(), "ground truth lists no proteins");
    Ok(gt.proteins().map(str::to_string).collect())
}

fn optional_ground_truth(ctx: &Ctx) -> Result<Option<GroundTruthDataset>> {
    let path = ctx.ws.ground_truth();
    if path.exists() {
        Ok(Some(read_ground_truth(&path, None)?))
    } else {
        Ok(None)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn run(ctx: &Ctx, method: Method, proteins: Vec<String>, output: Option<PathBuf>, fixed_clock: bool) -> Result<()> {
    let gt = optional_ground_truth(ctx)?;
    let proteins = proteins_or_all(proteins, gt.as_ref())?;
    let responder = build_responder(&ctx.settings.responder, gt.as_ref())?;
    // Zero-shot needs no datastores; it still records the embedder config
    // as None, so a placeholder embedder is fine.
    let loaded = match method {
        Method::ZeroShot => None,
        _ => Some(load_stores(ctx)?),
    };
    let placeholder;
    let embedder: &dyn Embedder = match &loaded {
        Some(l) => l.embedder.as_ref(),
        None => {
            placeholder = villa_core::embedding::MockEmbedder::new(0, 2)?;
            &placeholder
        }
    };
    let pipeline = villa_core::pipeline::Pipeline {
        embedder,
        responder: responder.as_ref(),
        abstracts: loaded.as_ref().map(|l| &l.abstracts),
        fulltext: loaded.as_ref().map(|l| &l.fulltext),
        config: ctx.settings.retrieval(),
        templates: templates(&ctx.settings)?,
    };
    let clock: &dyn Fn() -> String = if fixed_clock { &|| FIXED_CLOCK.to_string() } else { &now };
    let manifest = run_experiment(
        &pipeline,
        method,
        &ctx.settings.virus,
        &proteins,
        ctx.settings.iterations,
        clock,
    )?;
    let path = output.unwrap_or_else(|| ctx.ws.runs().join(format!("{method}.json")));
    write_file(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    let failures = manifest.records.iter().filter(|r| r.result.error.is_some()).count();
    if failures > 0 {
        eprintln!("warning: {failures} of {} responses could not be used", manifest.records.len());
    }
    println!("{} records -> {}", manifest.records.len(), path.display());
    Ok(())
}

fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading run manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing run manifest {}", path.display()))
}

fn print_summary(summary: &ExperimentSummary) {
    for g in &summary.groups {
        println!(
            "{:<14} {:<12} {:<12} P {}  R {}  F1 {}  (n={})",
            g.method.as_str(),
            g.scope.as_str(),
            g.responder,
            g.precision,
            g.recall,
            g.f1,
            g.cells
        );
    }
}

fn evaluate(ctx: &Ctx, runs: Vec<PathBuf>, ground_truth: Option<PathBuf>) -> Result<()> {
    let gt_path = ground_truth.unwrap_or_else(|| ctx.ws.ground_truth());
    ensure!(gt_path.exists(), "ground truth file {} does not exist", gt_path.display());
    let gt = read_ground_truth(&gt_path, None)?;
    let runs = if runs.is_empty() {
        let dir = ctx.ws.runs();
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        found.sort();
        ensure!(!found.is_empty(), "no run manifests in {}", dir.display());
        found
    } else {
        runs
    };
    let mut cells: Vec<Cell> = Vec::new();
    for path in &runs {
        let manifest = read_manifest(path)?;
        cells.extend(score_manifest(&manifest, &gt).with_context(|| format!("scoring {}", path.display()))?);
    }
    let summary = aggregate(&cells, ctx.settings.std)?;
    let results = ctx.ws.results();
    let mut csv = Vec::new();
    write_results_csv(&cells, &mut csv)?;
    write_file(&results.join("results.csv"), csv)?;
    write_file(&results.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print_summary(&summary);
    Ok(())
}

fn run_sweep(ctx: &Ctx, k_a: &[usize], k_c: &[usize], proteins: Vec<String>) -> Result<()> {
    let gt_path = ctx.ws.ground_truth();
    let gt = read_ground_truth(&gt_path, None)?;
    let proteins = proteins_or_all(proteins, Some(&gt))?;
    let responder = build_responder(&ctx.settings.responder, Some(&gt))?;
    let loaded = load_stores(ctx)?;
    let setup = SweepSetup {
        embedder: loaded.embedder.as_ref(),
        responder: responder.as_ref(),
        abstracts: &loaded.abstracts,
        fulltext: &loaded.fulltext,
        templates: templates(&ctx.settings)?,
        base: ctx.settings.retrieval(),
        virus: ctx.settings.virus.clone(),
        proteins,
        iterations: ctx.settings.iterations,
        ground_truth: &gt,
        std_kind: ctx.settings.std,
    };
    let rows = sweep(&setup, k_a, k_c)?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv)?;
    let path = ctx.ws.results().join("sweep.csv");
    write_file(&path, csv)?;
    let mut failed = 0;
    for r in &rows {
        match (&r.summary, &r.error) {
            (Some(s), _) => {
                if let Some(g) = s.group(Method::Villa, villa_core::evaluation::Scope::Overall) {
                    println!("k_a={:<4} k_c={:<4} P {}  R {}  F1 {}", r.k_a, r.k_c, g.precision, g.recall, g.f1);
                }
            }
            (None, e) => {
                failed += 1;
                println!("k_a={:<4} k_c={:<4} failed: {}", r.k_a, r.k_c, e.as_deref().unwrap_or("unknown"));
            }
        }
    }
    println!("{} grid points -> {}", rows.len(), path.display());
    ensure!(failed < rows.len(), "every grid point failed");
    Ok(())
}

fn analyze_distances(ctx: &Ctx, proteins: Vec<String>) -> Result<()> {
    let gt = read_ground_truth(&ctx.ws.ground_truth(), None)?;
    let proteins = proteins_or_all(proteins, Some(&gt))?;
    let loaded = load_stores(ctx)?;
    let responder = ScriptedResponder::fixed("unused", "");
    let pipeline = villa_core::pipeline::Pipeline {
        embedder: loaded.embedder.as_ref(),
        responder: &responder,
        abstracts: Some(&loaded.abstracts),
        fulltext: None,
        config: ctx.settings.retrieval(),
        templates: templates(&ctx.settings)?,
    };
    let prompts: BTreeMap<String, String> = proteins
        .iter()
        .map(|p| (p.clone(), pipeline.query_text(&ctx.settings.virus, p)))
        .collect();
    let analysis = abstract_distance_analysis(loaded.embedder.as_ref(), &gt, &loaded.abstracts, &prompts)?;
    report_warnings(&analysis.skipped);
    let path = ctx.ws.results().join("distances.json");
    write_file(&path, serde_json::to_string_pretty(&analysis)? + "\n")?;
    for p in &analysis.proteins {
        let test = p
            .test
            .map(|t| format!("U={} p={:.3e} ({:?})", t.u_a, t.p_two_sided, t.method))
            .unwrap_or_else(|| "no non-relevant abstracts".into());
        println!(
            "{:<8} relevant {:.4} (n={})  other {:.4} (n={})  {test}",
            p.protein,
            p.mean_relevant,
            p.relevant.len(),
            p.mean_non_relevant,
            p.non_relevant.len()
        );
    }
    Ok(())
}

fn serve(ctx: &Ctx, addr: &str, token_file: Option<PathBuf>, manifests: &[PathBuf]) -> Result<()> {
    let mut entries = Vec::new();
    if let Some(path) = token_file {
        entries.extend(Tokens::read_entries(&path).map_err(|e| anyhow!(e))?);
    }
    if let Ok(token) = std::env::var("REVIEW_ADMIN_TOKEN") {
        ensure!(!token.is_empty(), "REVIEW_ADMIN_TOKEN is empty");
        entries.push(TokenEntry {
            token,
            evaluator_id: "admin".into(),
            role: Role::Admin,
        });
    }
    ensure!(!entries.is_empty(), "no tokens configured; pass --tokens or set REVIEW_ADMIN_TOKEN");
    let store = ReviewStore::open(ctx.ws.review())?;
    for path in manifests {
        let items = items_from_manifest(&read_manifest(path)?, &store.salt());
        println!("ingested {} items from {}", items.len(), path.display());
        store.upsert_items(items)?;
    }
    let state = AppState::new(store, Tokens::new(entries));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        villa_review_api::serve(listener, state).await?;
        Ok(())
    })
}
