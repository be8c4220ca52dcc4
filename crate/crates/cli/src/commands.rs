use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use kgfuse_core::eval::{
    aggregate, evaluate_split, select_hybrid, write_ranks_csv, DatasetResults, EvalOptions, EvalSide,
    MetricsReport, RunMetrics, RANKS_CSV_HEADER,
};
use kgfuse_core::hygiene::{audit_leakage, generate_harder_split, Corpus};
use kgfuse_core::kg::{load_dataset, write_dataset, DatasetSplit};
use kgfuse_core::model::{checkpoint, train, Model, TrainingSet};
use kgfuse_core::relgraph::{self, InteractionKind};
use kgfuse_core::seed::derive_seed;
use kgfuse_core::text::backend::{
    ChatBackend, Embedder, FixtureChat, FixtureEmbedder, HashingEmbedder, HttpChat, HttpEmbedder, OfflineChat,
};
use kgfuse_core::text::cache::{read_table, write_table, CacheStats, EmbeddingCache};
use kgfuse_core::text::pipeline::{self, embed_sources, load_records, save_records, EnrichConfig};
use kgfuse_core::text::{assemble_variant, records_for_split, EmbeddingTable, RelationTextRecord, TextVariant};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{AlphaPolicy, ChatConfig, EmbedderConfig, QuerySource, RunConfig};

pub fn load(path: &Path) -> Result<DatasetSplit> {
    let (split, report) = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    log::info!("{}: {report:?}", split.name);
    Ok(split)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn pretty(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn chat_backend(cfg: &RunConfig) -> Result<Box<dyn ChatBackend>> {
    Ok(match &cfg.text.chat {
        ChatConfig::Http { endpoint, model, api_key_env, record_dir } => {
            Box::new(HttpChat::new(endpoint, model, api_key_env, record_dir.clone())?)
        }
        ChatConfig::Fixture { dir } => Box::new(FixtureChat { dir: dir.clone() }),
        ChatConfig::Offline => Box::new(OfflineChat),
    })
}

fn embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>> {
    Ok(match &cfg.text.embedder {
        EmbedderConfig::Http { endpoint, model, api_key_env, record_file } => {
            Box::new(HttpEmbedder::new(endpoint, model, api_key_env, record_file.clone())?)
        }
        EmbedderConfig::Fixture { path } => Box::new(FixtureEmbedder::load(path)?),
        EmbedderConfig::Hashing { dim } => Box::new(HashingEmbedder { dim: *dim }),
    })
}

/// Every dataset the config touches, evaluation ones first, without repeats.
fn all_datasets(cfg: &RunConfig) -> Vec<PathBuf> {
    let mut seen = BTreeSet::new();
    cfg.datasets
        .iter()
        .map(PathBuf::as_path)
        .chain(cfg.pretrain.iter().map(|s| s.path()))
        .filter(|p| seen.insert(p.to_path_buf()))
        .map(Path::to_path_buf)
        .collect()
}

fn text_table(cfg: &RunConfig, split: &DatasetSplit) -> Result<Arc<EmbeddingTable>> {
    let dir = cfg.text_dir(&split.name);
    let table = read_table(&dir, cfg.text.variant).map_err(|e| {
        anyhow!(
            "no {} text embeddings for dataset {} in {} ({e}); run `kgfuse enrich` (or `kgfuse embed`) first",
            cfg.text.variant,
            split.name,
            dir.display()
        )
    })?;
    if table.num_base_relations() != split.num_relations() {
        bail!(
            "text embeddings for {} cover {} relations but the dataset has {}; rerun `kgfuse enrich`",
            split.name,
            table.num_base_relations(),
            split.num_relations()
        );
    }
    Ok(Arc::new(table))
}

fn check_text_width(cfg: &RunConfig, table: &EmbeddingTable, name: &str) -> Result<()> {
    if table.dim() != cfg.model.d_text {
        bail!(
            "model.d_text is {} but the {name} embeddings are {}-dimensional; set \"model\": {{\"d_text\": {}}}",
            cfg.model.d_text,
            table.dim(),
            table.dim()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EnrichSummary {
    dataset: String,
    records: PathBuf,
    relations: usize,
    requests: usize,
    enriched: usize,
    fallback: Vec<String>,
    reused: bool,
    embedding_cache: CacheStats,
    tables: Vec<PathBuf>,
}

fn embed_dataset(
    cfg: &RunConfig,
    name: &str,
    records: &[RelationTextRecord],
    embedder: &dyn Embedder,
) -> Result<(CacheStats, Vec<PathBuf>)> {
    let dir = cfg.text_dir(name);
    let (sources, stats) = embed_sources(records, embedder, &EmbeddingCache::new(&dir))?;
    let mut tables = Vec::new();
    for variant in TextVariant::ALL {
        let table = assemble_variant(records, &sources, variant)?;
        tables.push(write_table(&dir, &table, &embedder.id())?);
    }
    log::info!("{name}: embedded {} relations ({} cache hits, {} misses)", records.len(), stats.hits, stats.misses);
    Ok((stats, tables))
}

pub fn enrich(cfg: &RunConfig, force: bool) -> Result<Value> {
    let chat = chat_backend(cfg)?;
    let emb = embedder(cfg)?;
    let ecfg = EnrichConfig { max_relations_per_request: cfg.text.max_relations_per_request, retries: cfg.text.retries };
    let mut summaries = Vec::new();
    for path in all_datasets(cfg) {
        let split = load(&path)?;
        let fresh = records_for_split(&split);
        let rec_path = cfg.text_dir(&split.name).join("records.json");
        let cached = if force { None } else { load_records(&rec_path).ok() };
        let same = |old: &[RelationTextRecord]| {
            old.len() == fresh.len() && old.iter().zip(&fresh).all(|(a, b)| a.raw_identifier == b.raw_identifier)
        };
        let (records, report, reused) = match cached {
            Some(old) if same(&old) => {
                log::info!("{}: reusing enrichment records from {}", split.name, rec_path.display());
                let fallback = old.iter().filter(|r| !r.enriched).map(|r| r.raw_identifier.clone()).collect();
                let enriched = old.iter().filter(|r| r.enriched).count();
                (old, pipeline::EnrichReport { enriched, fallback, ..Default::default() }, true)
            }
            _ => {
                let (records, report) = pipeline::enrich(fresh, chat.as_ref(), &ecfg);
                save_records(&rec_path, &records)?;
                (records, report, false)
            }
        };
        for r in &report.fallback {
            log::warn!("{}: relation {r:?} not enriched; raw identifier used", split.name);
        }
        let (stats, tables) = embed_dataset(cfg, &split.name, &records, emb.as_ref())?;
        summaries.push(EnrichSummary {
            dataset: split.name.clone(),
            records: rec_path,
            relations: records.len(),
            requests: report.requests,
            enriched: report.enriched,
            fallback: report.fallback,
            reused,
            embedding_cache: stats,
            tables,
        });
    }
    let out = cfg.reports_dir().join("enrich.json");
    write_file(&out, pretty(&summaries)?)?;
    Ok(json!({ "enrich": out, "datasets": summaries }))
}

pub fn embed(cfg: &RunConfig) -> Result<Value> {
    let emb = embedder(cfg)?;
    let mut out = Vec::new();
    for path in all_datasets(cfg) {
        let split = load(&path)?;
        let rec_path = cfg.text_dir(&split.name).join("records.json");
        let records = load_records(&rec_path)
            .map_err(|e| anyhow!("{}: no enrichment records ({e}); run `kgfuse enrich` first", split.name))?;
        if records.len() != split.num_relations() {
            bail!("{}: records cover {} of {} relations; rerun `kgfuse enrich`", split.name, records.len(), split.num_relations());
        }
        let (stats, tables) = embed_dataset(cfg, &split.name, &records, emb.as_ref())?;
        out.push(json!({ "dataset": split.name, "embedding_cache": stats, "tables": tables }));
    }
    Ok(json!({ "datasets": out }))
}

pub fn build_relgraph(cfg: &RunConfig) -> Result<Value> {
    let mut out = Vec::new();
    for path in &cfg.datasets {
        let split = load(path)?;
        let dir = cfg.work_dir.join("relgraph").join(&split.name);
        let structural = relgraph::build_structural(&split.test_graph.graph.augment());
        let mut buf = Vec::new();
        structural.write_jsonl(&mut buf)?;
        write_file(&dir.join("structural.jsonl"), &buf)?;
        let mut kinds = BTreeMap::new();
        for k in InteractionKind::ALL {
            kinds.insert(format!("{k:?}").to_lowercase(), structural.edges().iter().filter(|e| e.kind == k).count());
        }
        let mut summary = json!({
            "dataset": split.name,
            "nodes": structural.num_nodes(),
            "structural_edges": kinds,
            "structural": dir.join("structural.jsonl"),
        });
        if cfg.uses_text() {
            let table = text_table(cfg, &split)?;
            let textual = relgraph::build_textual(&table.data, cfg.text.sparsifier)?;
            let mut buf = Vec::new();
            textual.write_jsonl(&mut buf)?;
            write_file(&dir.join("textual.jsonl"), &buf)?;
            summary["textual_edges"] = json!(textual.edges().len());
            summary["textual"] = json!(dir.join("textual.jsonl"));
        }
        write_file(&dir.join("summary.json"), pretty(&summary)?)?;
        out.push(summary);
    }
    Ok(json!({ "datasets": out }))
}

pub fn pretrain(cfg: &RunConfig) -> Result<Value> {
    if cfg.pretrain.is_empty() {
        bail!("no pretraining datasets configured; list them under \"pretrain\" or pass --pretrain-dataset");
    }
    let mut model_cfg = cfg.model.clone();
    if !cfg.uses_text() {
        model_cfg.d_text = 0;
    }
    let mut sets = Vec::new();
    for src in &cfg.pretrain {
        let split = load(src.path())?;
        let text = if cfg.uses_text() {
            let table = text_table(cfg, &split)?;
            check_text_width(cfg, &table, &split.name)?;
            Some((table, cfg.text.sparsifier))
        } else {
            None
        };
        sets.push(match src.queries() {
            QuerySource::TrainGraph => TrainingSet::from_split(&split, text)?,
            QuerySource::TestQueries => TrainingSet::from_test_side(&split, text)?,
        });
    }
    let mut runs = Vec::new();
    for run in 0..cfg.runs {
        model_cfg.init_seed = derive_seed(cfg.seed, "init", run as u64);
        let mut model = Model::new(model_cfg.clone())?;
        log::info!("run {run}: {} parameters", model.num_parameters());
        let mut tcfg = cfg.train.clone();
        tcfg.seed = derive_seed(cfg.seed, "train", run as u64);
        tcfg.alpha = cfg.uses_text();
        tcfg.checkpoint_dir.get_or_insert_with(|| cfg.work_dir.join("checkpoints"));
        let log = train(&mut model, &sets, &tcfg)?;
        let ckpt = cfg.checkpoint(run);
        if let Some(d) = ckpt.parent() {
            fs::create_dir_all(d)?;
        }
        checkpoint::save(&model, &ckpt)?;
        let log_path = cfg.work_dir.join("logs").join(format!("run{run}.csv"));
        let mut buf = Vec::new();
        log.write_csv(&mut buf)?;
        write_file(&log_path, buf)?;
        runs.push(json!({
            "run": run,
            "parameters": model.num_parameters(),
            "checkpoint": ckpt,
            "log": log_path,
            "final_loss": log.rows.last().map(|r| r.1),
        }));
    }
    Ok(json!({ "runs": runs }))
}

fn load_models(cfg: &RunConfig) -> Result<Vec<Model>> {
    (0..cfg.runs)
        .map(|run| {
            let p = cfg.checkpoint(run);
            if !p.is_file() {
                bail!("checkpoint {} not found; run `kgfuse pretrain` first", p.display());
            }
            let m = checkpoint::load(&p)?;
            if cfg.uses_text() && !m.has_text() {
                bail!(
                    "checkpoint {} was trained without text; rerun `kgfuse pretrain` with --alpha text or hybrid, or evaluate with --alpha structural",
                    p.display()
                );
            }
            Ok(m)
        })
        .collect()
}

struct EvalData {
    split: DatasetSplit,
    text: Option<Arc<EmbeddingTable>>,
}

fn load_eval_data(cfg: &RunConfig, models: &[Model]) -> Result<Vec<EvalData>> {
    if cfg.datasets.is_empty() {
        bail!("no evaluation datasets configured; list them under \"datasets\" or pass --dataset");
    }
    let mut names = BTreeSet::new();
    cfg.datasets
        .iter()
        .map(|p| {
            let split = load(p)?;
            if !names.insert(split.name.clone()) {
                bail!("two evaluation datasets are both named {:?}", split.name);
            }
            let text = if cfg.uses_text() {
                let t = text_table(cfg, &split)?;
                let want = models.first().map_or(cfg.model.d_text, |m| m.config.d_text);
                if t.dim() != want {
                    bail!("checkpoint expects {want}-dimensional text but {} embeddings are {}-dimensional", split.name, t.dim());
                }
                Some(t)
            } else {
                None
            };
            Ok(EvalData { split, text })
        })
        .collect()
}

fn eval_run(cfg: &RunConfig, model: &Model, data: &[EvalData], side: EvalSide, alpha: &BTreeMap<String, u8>) -> Result<Vec<DatasetResults>> {
    data.iter()
        .map(|d| {
            let on = alpha.get(&d.split.name).copied().unwrap_or(0) == 1;
            let opt = EvalOptions { alpha: on, parallel: cfg.train.parallel, ..Default::default() };
            let text = d.text.clone().map(|t| (t, cfg.text.sparsifier));
            Ok(evaluate_split(model, &d.split, side, text, &opt)?)
        })
        .collect()
}

/// Validation MRR averaged over runs, in `RunMetrics` shape.
fn mean_run(runs: &[RunMetrics]) -> RunMetrics {
    let mut out = runs[0].clone();
    for (name, dm) in out.datasets.iter_mut() {
        dm.metrics.mrr = runs.iter().map(|r| r.datasets[name].metrics.mrr).sum::<f64>() / runs.len() as f64;
    }
    out
}

fn hybrid_decisions(cfg: &RunConfig, models: &[Model], data: &[EvalData]) -> Result<(BTreeMap<String, u8>, Value)> {
    let all = |a: u8| data.iter().map(|d| (d.split.name.clone(), a)).collect::<BTreeMap<_, _>>();
    let mut with_text = Vec::new();
    let mut without = Vec::new();
    for m in models {
        with_text.push(aggregate(&eval_run(cfg, m, data, EvalSide::Valid, &all(1))?)?);
        without.push(aggregate(&eval_run(cfg, m, data, EvalSide::Valid, &all(0))?)?);
    }
    let (on, off) = (mean_run(&with_text), mean_run(&without));
    let alpha = select_hybrid(&on, &off)?;
    let detail: BTreeMap<_, _> = alpha
        .iter()
        .map(|(n, a)| {
            (n.clone(), json!({ "alpha": a, "valid_mrr_text": on.datasets[n].metrics.mrr, "valid_mrr_structural": off.datasets[n].metrics.mrr }))
        })
        .collect();
    Ok((alpha, json!(detail)))
}

pub fn hybrid_select(cfg: &RunConfig) -> Result<Value> {
    if cfg.alpha == AlphaPolicy::Structural {
        bail!("hybrid selection compares α = 1 with α = 0; it needs a text-trained checkpoint (use --alpha hybrid)");
    }
    let models = load_models(cfg)?;
    let data = load_eval_data(cfg, &models)?;
    let (_, detail) = hybrid_decisions(cfg, &models, &data)?;
    let out = cfg.reports_dir().join("hybrid.json");
    write_file(&out, pretty(&detail)?)?;
    Ok(json!({ "hybrid": out }))
}

pub fn evaluate(cfg: &RunConfig) -> Result<Value> {
    let models = load_models(cfg)?;
    let data = load_eval_data(cfg, &models)?;
    let all = |a: u8| data.iter().map(|d| (d.split.name.clone(), a)).collect::<BTreeMap<_, _>>();
    let reports = cfg.reports_dir();
    let mut paths = serde_json::Map::new();
    let alpha = match cfg.alpha {
        AlphaPolicy::Text => all(1),
        AlphaPolicy::Structural => all(0),
        AlphaPolicy::Hybrid => {
            let (alpha, detail) = hybrid_decisions(cfg, &models, &data)?;
            let p = reports.join("hybrid.json");
            write_file(&p, pretty(&detail)?)?;
            paths.insert("hybrid".into(), json!(p));
            alpha
        }
    };
    let mut runs = Vec::new();
    let mut ranks = format!("{RANKS_CSV_HEADER}\n").into_bytes();
    for (run, model) in models.iter().enumerate() {
        let results = eval_run(cfg, model, &data, EvalSide::Test, &alpha)?;
        for (res, d) in results.iter().zip(&data) {
            write_ranks_csv(&mut ranks, run, res, &d.split.vocab)?;
        }
        runs.push(aggregate(&results)?);
    }
    let mut report = MetricsReport::from_runs(runs)?;
    report.alpha = alpha;
    for (key, name, bytes) in [
        ("metrics", "metrics.json", report.to_json()?.into_bytes()),
        ("table", "metrics.txt", report.to_table().into_bytes()),
        ("ranks", "ranks.csv", ranks),
    ] {
        let p = reports.join(name);
        write_file(&p, bytes)?;
        paths.insert(key.into(), json!(p));
    }
    print!("{}", report.to_table());
    std::io::stdout().flush()?;
    Ok(Value::Object(paths))
}

pub fn gen_harder(cfg: &RunConfig, dataset: Option<&Path>, out: Option<&Path>) -> Result<Value> {
    let path = match (dataset, cfg.datasets.as_slice()) {
        (Some(p), _) => p.to_path_buf(),
        (None, [only]) => only.clone(),
        (None, _) => bail!("pass --dataset to choose which dataset to derive the harder split from"),
    };
    let split = load(&path)?;
    let harder = generate_harder_split(&split, cfg.mask_ratio, cfg.seed)?;
    let info = harder.info.clone();
    let (graph_facts, queries) = (harder.graph.len(), harder.queries.len());
    let new = harder.into_split(&split);
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.work_dir.join("harder").join(&new.name));
    write_dataset(&dir, &new)?;
    Ok(json!({ "dataset": dir, "test_graph_facts": graph_facts, "test_queries": queries, "harder": info }))
}

pub fn audit(cfg: &RunConfig) -> Result<Value> {
    if cfg.pretrain.is_empty() {
        bail!("no pretraining corpora configured; list them under \"pretrain\" or pass --pretrain-dataset");
    }
    if cfg.datasets.is_empty() {
        bail!("no test datasets configured; list them under \"datasets\" or pass --dataset");
    }
    let corpora = cfg
        .pretrain
        .iter()
        .map(|s| Ok(Corpus::from_split(&load(s.path())?, cfg.leakage_scope)))
        .collect::<Result<Vec<_>>>()?;
    let tests = cfg.datasets.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let report = audit_leakage(&corpora, &tests);
    let dir = cfg.reports_dir();
    let json_path = dir.join("leakage.json");
    let csv_path = dir.join("leakage.csv");
    write_file(&json_path, report.to_json()?)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&csv_path, csv)?;
    let flagged: Vec<_> = report.datasets.iter().filter(|d| d.leaks()).map(|d| d.dataset.clone()).collect();
    Ok(json!({ "leakage": json_path, "csv": csv_path, "flagged": flagged }))
}
