//! Artifact layout and the end-to-end run: every stage reads its inputs
//! from an output directory, checks their provenance against the current
//! config, and writes its outputs next to a `.meta.json` sidecar.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::ann::{measure_recall, HnswIndex};
use crate::config::RunConfig;
use crate::dataset::{build_datasets, generate_synthetic_world, SyntheticWorld};
use crate::encoders::Model;
use crate::enrichment::EnrichmentReport;
use crate::error::{Error, Result};
use crate::eval::TaskReport;
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::pipeline::{
    ablation_train_config, compat_matrix, enrichment_matrix, multitask_matrix, run_ablation, AblationFlags, AblationRow, AblationTable,
    Workspace, WITHIN_TOPIC_TASK,
};
use crate::serving::{
    publish_to_file, read_embedding_file, simulate_load, ArtifactMeta, LatencyModel, LoadReport, PublishReport, Request, Response, Service,
    TickClock, TtlCache,
};
use crate::tokenizer::VocabularyBundle;
use crate::trainer::{load_checkpoint, loss_endpoints, save_checkpoint, write_metrics_csv};
use crate::types::EntityDocument;

/// Number of probe queries used by the index and serving checks.
pub const PROBES: usize = 100;

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn world(&self) -> PathBuf {
        self.root.join("world")
    }
    pub fn docs(&self) -> PathBuf {
        self.root.join("docs.jsonl")
    }
    pub fn enrichment(&self) -> PathBuf {
        self.root.join("enrichment.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.tsv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn train_metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("entities.osse")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index.hnsw")
    }
    pub fn load(&self) -> PathBuf {
        self.root.join("load.json")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
}

/// Tags an error with the stage that produced it.
pub fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

fn stamp(path: &Path, config: &RunConfig, artifact: &str, vocab_fingerprint: &str) -> Result<()> {
    ArtifactMeta {
        artifact: artifact.to_string(),
        config_hash: config.hash(),
        vocab_fingerprint: vocab_fingerprint.to_string(),
    }
    .write_for(path)
}

/// Errors unless `path` was produced under `config` (and, when given, with
/// the vocabulary `vocab_fingerprint`).
pub fn check_artifact(path: &Path, config: &RunConfig, vocab_fingerprint: Option<&str>) -> Result<ArtifactMeta> {
    let meta =
        ArtifactMeta::read_for(path).map_err(|e| Error::ArtifactMismatch(format!("{}: no readable provenance ({e})", path.display())))?;
    let hash = config.hash();
    if meta.config_hash != hash {
        return Err(Error::ArtifactMismatch(format!(
            "{} was built with config {}, current config is {}",
            path.display(),
            meta.config_hash,
            hash
        )));
    }
    if let Some(fp) = vocab_fingerprint {
        if meta.vocab_fingerprint != fp {
            return Err(Error::ArtifactMismatch(format!(
                "{} was built with a different vocabulary",
                path.display()
            )));
        }
    }
    Ok(meta)
}

pub fn synth_stage(config: &RunConfig, layout: &Layout) -> Result<SyntheticWorld> {
    let world = generate_synthetic_world(config.seed, &config.world)?;
    world.write_dir(&layout.world())?;
    stamp(&layout.world(), config, "world", "")?;
    Ok(world)
}

pub fn load_world(config: &RunConfig, layout: &Layout) -> Result<SyntheticWorld> {
    check_artifact(&layout.world(), config, None)?;
    SyntheticWorld::read_dir(&layout.world())
}

pub fn enrich_stage(config: &RunConfig, layout: &Layout, world: &SyntheticWorld) -> Result<(Vec<EntityDocument>, EnrichmentReport)> {
    let split = crate::pipeline::split_world(world, config)?;
    let (docs, report) = crate::pipeline::enrich_world(world, &split, config)?;
    write_jsonl(layout.docs(), &docs)?;
    write_json(layout.enrichment(), &report)?;
    stamp(&layout.docs(), config, "docs", "")?;
    Ok((docs, report))
}

pub fn vocab_stage(config: &RunConfig, layout: &Layout, world: &SyntheticWorld, docs: &[EntityDocument]) -> Result<VocabularyBundle> {
    let vocab = crate::pipeline::build_world_vocab(world, docs, config)?;
    vocab.write_tsv(BufWriter::new(File::create(layout.vocab())?))?;
    stamp(&layout.vocab(), config, "vocab", &vocab.fingerprint())?;
    Ok(vocab)
}

pub fn load_vocab(config: &RunConfig, layout: &Layout) -> Result<Arc<VocabularyBundle>> {
    let meta = check_artifact(&layout.vocab(), config, None)?;
    let vocab = VocabularyBundle::read_tsv(std::io::BufReader::new(File::open(layout.vocab())?))?;
    if vocab.fingerprint() != meta.vocab_fingerprint {
        return Err(Error::ArtifactMismatch("vocab.tsv does not match its recorded fingerprint".into()));
    }
    Ok(Arc::new(vocab))
}

/// Reloads world, enriched documents and vocabulary from `layout`.
pub fn load_workspace(config: &RunConfig, layout: &Layout) -> Result<Workspace> {
    let world = load_world(config, layout)?;
    check_artifact(&layout.docs(), config, None)?;
    let docs: Vec<EntityDocument> = read_jsonl(layout.docs())?;
    let enrichment: EnrichmentReport = read_json(layout.enrichment())?;
    let vocab = load_vocab(config, layout)?;
    Workspace::from_parts(config.clone(), world, docs, enrichment, vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub dataset_sizes: BTreeMap<String, usize>,
    pub batch_counts: BTreeMap<String, usize>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains the full model (all tasks, all text fields) and writes the
/// checkpoint and per-step loss log.
pub fn train_stage(ws: &Workspace, layout: &Layout) -> Result<(Model, TrainSummary)> {
    let flags = AblationFlags {
        compat_tasks: ws.config.tasks.compat,
        ..AblationFlags::full()
    };
    let (outcome, tasks) = ws.train_model(&flags, &ws.config.train, Some(&layout.root))?;
    let meta = ws.checkpoint_meta(&outcome.model, &tasks, ws.config.train.steps);
    save_checkpoint(&layout.checkpoint(), &outcome.model, &outcome.adam, &meta)?;
    stamp(&layout.checkpoint(), &ws.config, "checkpoint", &meta.vocab_fingerprint)?;
    write_metrics_csv(&outcome.metrics, BufWriter::new(File::create(layout.train_metrics())?))?;
    let datasets = build_datasets(&ws.split.train, &ws.world.kind_index(), &ws.config.dedup, ws.config.seed)?;
    let (initial_loss, final_loss) = loss_endpoints(&outcome.metrics, 50).unwrap_or((f64::NAN, f64::NAN));
    let summary = TrainSummary {
        steps: ws.config.train.steps,
        dataset_sizes: datasets.iter().map(|(k, d)| (k.to_string(), d.len())).collect(),
        batch_counts: outcome.plan.counts.iter().map(|(k, c)| (k.to_string(), *c)).collect(),
        initial_loss,
        final_loss,
    };
    Ok((outcome.model, summary))
}

pub fn load_model(ws: &Workspace, layout: &Layout) -> Result<Model> {
    check_artifact(&layout.checkpoint(), &ws.config, Some(&ws.vocab.fingerprint()))?;
    let loaded = load_checkpoint(&layout.checkpoint(), ws.vocab.clone())?;
    if loaded.meta.config_hash != ws.config.hash() {
        return Err(Error::ArtifactMismatch("checkpoint trailer records a different config".into()));
    }
    Ok(loaded.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub k: usize,
    pub m: usize,
    pub headline_task: String,
    pub headline_recall: f64,
    pub random_init_headline_recall: f64,
    pub trained: BTreeMap<String, TaskReport>,
    pub random_init: BTreeMap<String, TaskReport>,
}

/// Evaluates `model` and a freshly initialized model on the same tasks.
pub fn eval_stage(ws: &Workspace, model: &Model, layout: Option<&Layout>) -> Result<EvalSummary> {
    let tasks = ws.eval_tasks(ws.config.tasks.compat)?;
    if !tasks.iter().any(|t| t.name == WITHIN_TOPIC_TASK && !t.pairs.is_empty()) {
        return Err(Error::Empty(
            "held-out within-topic eval pairs (check world.days against the split)",
        ));
    }
    let trained = ws.evaluate(model, &tasks)?;
    let baseline = ws.init_model(model.config.clone())?;
    let random_init = ws.evaluate(&baseline, &tasks)?;
    let headline = |m: &BTreeMap<String, TaskReport>| m.get(WITHIN_TOPIC_TASK).map_or(f64::NAN, |r| r.recall);
    let summary = EvalSummary {
        k: ws.config.eval.k,
        m: ws.config.eval.m,
        headline_task: WITHIN_TOPIC_TASK.to_string(),
        headline_recall: headline(&trained),
        random_init_headline_recall: headline(&random_init),
        trained,
        random_init,
    };
    if let Some(layout) = layout {
        write_json(layout.eval(), &summary)?;
        stamp(&layout.eval(), &ws.config, "eval", &ws.vocab.fingerprint())?;
    }
    Ok(summary)
}

pub fn publish_stage(ws: &Workspace, model: &Model, layout: &Layout) -> Result<PublishReport> {
    let report = publish_to_file(model, &ws.docs, &layout.embeddings())?;
    stamp(&layout.embeddings(), &ws.config, "embeddings", &ws.vocab.fingerprint())?;
    Ok(report)
}

/// World queries in id order that the model can encode.
pub fn probe_queries(ws: &Workspace, model: &Model, n: usize) -> Vec<String> {
    let mut queries: Vec<_> = ws.world.queries.iter().collect();
    queries.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    queries
        .into_iter()
        .filter(|q| model.encode_query(&q.text).is_ok())
        .take(n)
        .map(|q| q.text.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    pub entities: usize,
    pub max_level: usize,
    pub repaired: usize,
    pub probes: usize,
    pub k: usize,
    pub ef_search: usize,
    /// Mean overlap of HNSW top-k with exact top-k on probe queries.
    pub recall_vs_exact: f64,
}

pub fn index_stage(ws: &Workspace, model: &Model, layout: &Layout) -> Result<(HnswIndex, IndexReport)> {
    check_artifact(&layout.embeddings(), &ws.config, Some(&ws.vocab.fingerprint()))?;
    let vectors = read_embedding_file(&layout.embeddings())?;
    let index = HnswIndex::build(vectors, ws.config.index, ws.config.seed)?;
    index.validate()?;
    index.write(&layout.index())?;
    stamp(&layout.index(), &ws.config, "index", &ws.vocab.fingerprint())?;
    let k = ws.config.eval.k.min(index.len());
    let probes: Vec<Vec<f32>> = probe_queries(ws, model, PROBES)
        .iter()
        .map(|q| model.encode_query(q).map(|e| e.to_f32()))
        .collect::<Result<_>>()?;
    let recall = if probes.is_empty() || k == 0 {
        f64::NAN
    } else {
        measure_recall(&index, &probes, k, ws.config.index.ef_search)?
    };
    let report = IndexReport {
        entities: index.len(),
        max_level: index.max_level(),
        repaired: index.repaired,
        probes: probes.len(),
        k,
        ef_search: ws.config.index.ef_search,
        recall_vs_exact: recall,
    };
    Ok((index, report))
}

pub fn load_index(ws: &Workspace, layout: &Layout) -> Result<HnswIndex> {
    check_artifact(&layout.index(), &ws.config, Some(&ws.vocab.fingerprint()))?;
    HnswIndex::read(&layout.index())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingReport {
    pub probes: usize,
    /// Probes whose served embedding equals offline `encode_query` bit for bit.
    pub embed_identical: usize,
    /// Probes whose served top-k equals offline search on the same index.
    pub retrieve_identical: usize,
    /// Repeat requests answered from the cache.
    pub repeat_hits: usize,
}

/// Compares the in-process service against offline encoding and search.
pub fn serving_check(ws: &Workspace, model: Arc<Model>, index: HnswIndex) -> Result<ServingReport> {
    let probes = probe_queries(ws, &model, PROBES);
    let k = ws.config.eval.k;
    let service = Service::new(model.clone(), index, &ws.config.cache, Box::<TickClock>::default())?;
    let mut report = ServingReport {
        probes: probes.len(),
        embed_identical: 0,
        retrieve_identical: 0,
        repeat_hits: 0,
    };
    for q in &probes {
        let offline = model.encode_query(q)?.to_f32();
        if let Response::Embedding { embedding, .. } = service.handle(&Request::EmbedQuery { text: q.clone() }) {
            if embedding.iter().map(|v| v.to_bits()).eq(offline.iter().map(|v| v.to_bits())) {
                report.embed_identical += 1;
            }
        }
        let idx = service.index();
        let kk = k.min(idx.len());
        let expected: Vec<String> = idx
            .search(&offline, kk, idx.params.ef_search.max(kk))?
            .into_iter()
            .map(|(i, _)| idx.vectors.ids[i as usize].clone())
            .collect();
        if let Response::Results { ids, cache_hit, .. } = service.handle(&Request::Retrieve { text: q.clone(), k }) {
            report.retrieve_identical += (ids == expected) as usize;
            report.repeat_hits += cache_hit as usize;
        }
    }
    Ok(report)
}

/// Query texts ranked by training-window frequency, then text; only
/// queries the model can encode.
pub fn query_universe(ws: &Workspace, model: &Model) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = ws.world.queries.iter().map(|q| (q.text.as_str(), 0)).collect();
    for p in &ws.split.train {
        if let Some(c) = counts.get_mut(p.query.as_str()) {
            *c += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked
        .into_iter()
        .filter(|(q, _)| model.encode_query(q).is_ok())
        .map(|(q, _)| q.to_string())
        .collect()
}

/// Replays Zipf traffic over the query universe through a fresh cache in
/// front of the real query tower.
pub fn simulate_stage(ws: &Workspace, model: &Model, layout: Option<&Layout>) -> Result<LoadReport> {
    let universe = query_universe(ws, model);
    let cache = Mutex::new(TtlCache::from_config(&ws.config.cache)?);
    let sim = &ws.config.simulate;
    let latency = LatencyModel {
        hit_us: sim.hit_latency_us,
        miss_us: sim.miss_latency_us,
    };
    let report = simulate_load(&cache, &universe, sim.zipf_s, sim.requests, ws.config.seed, latency, |q| {
        Ok(model.encode_query(q)?.to_f32())
    })?;
    if let Some(layout) = layout {
        write_json(layout.load(), &report)?;
        stamp(&layout.load(), &ws.config, "load", &ws.vocab.fingerprint())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matrix {
    Enrichment,
    Multitask,
    Compat,
}

impl Matrix {
    pub const ALL: [Matrix; 3] = [Matrix::Enrichment, Matrix::Multitask, Matrix::Compat];

    pub fn name(self) -> &'static str {
        match self {
            Matrix::Enrichment => "enrichment",
            Matrix::Multitask => "multitask",
            Matrix::Compat => "compat",
        }
    }

    pub fn rows(self) -> Vec<AblationRow> {
        match self {
            Matrix::Enrichment => enrichment_matrix(),
            Matrix::Multitask => multitask_matrix(),
            Matrix::Compat => compat_matrix(),
        }
    }
}

impl std::str::FromStr for Matrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Matrix::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation matrix {s:?}")))
    }
}

pub fn ablate_stage(ws: &Workspace, matrices: &[Matrix], layout: Option<&Layout>) -> Result<BTreeMap<String, AblationTable>> {
    let train_config = ablation_train_config(&ws.config);
    let mut out = BTreeMap::new();
    for m in matrices {
        log::info!("ablation matrix {}", m.name());
        let table = run_ablation(ws, &m.rows(), &train_config)?;
        log::info!("\n{}", table.render());
        out.insert(m.name().to_string(), table);
    }
    if let Some(layout) = layout {
        write_json(layout.ablation(), &out)?;
        stamp(&layout.ablation(), &ws.config, "ablation", &ws.vocab.fingerprint())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub entities: usize,
    pub queries: usize,
    pub pairs: usize,
    pub train_pairs: usize,
    pub eval_pairs: usize,
}

/// Contents of `metrics.json`. Holds no timings, so identical configs give
/// identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub vocab_fingerprint: String,
    pub world: WorldSummary,
    pub enrichment: EnrichmentReport,
    pub training: TrainSummary,
    pub eval: EvalSummary,
    pub publish: PublishReport,
    pub index: IndexReport,
    pub serving: ServingReport,
    pub load: LoadReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<BTreeMap<String, AblationTable>>,
}

/// Runs every stage in order under `layout`. The first failing stage aborts
/// the run; artifacts already written are kept.
pub fn run_pipeline(config: &RunConfig, layout: &Layout) -> Result<PipelineReport> {
    stage("config", || config.validate())?;
    layout.create()?;
    std::fs::write(layout.config(), config.to_toml()?)?;
    let clock = std::time::Instant::now();
    let lap = |name: &str| log::info!("{name} done at {:.1}s", clock.elapsed().as_secs_f64());

    let world = stage("synth", || synth_stage(config, layout))?;
    lap("synth");
    let (docs, enrichment) = stage("enrich", || enrich_stage(config, layout, &world))?;
    lap("enrich");
    let vocab = stage("build-vocab", || vocab_stage(config, layout, &world, &docs))?;
    lap("build-vocab");
    let ws = Workspace::from_parts(config.clone(), world, docs, enrichment, Arc::new(vocab))?;
    let (model, training) = stage("train", || train_stage(&ws, layout))?;
    lap("train");
    let eval = stage("eval", || eval_stage(&ws, &model, Some(layout)))?;
    lap("eval");
    let publish = stage("publish", || publish_stage(&ws, &model, layout))?;
    let (index, index_report) = stage("index", || index_stage(&ws, &model, layout))?;
    lap("index");
    let model = Arc::new(model);
    let serving = stage("serve", || serving_check(&ws, model.clone(), index))?;
    let load = stage("simulate-load", || simulate_stage(&ws, &model, Some(layout)))?;
    lap("simulate-load");
    let ablation = if config.ablation.enabled {
        let tables = stage("ablate", || ablate_stage(&ws, &Matrix::ALL, Some(layout)))?;
        lap("ablate");
        Some(tables)
    } else {
        None
    };
    let report = PipelineReport {
        config_hash: config.hash(),
        vocab_fingerprint: ws.vocab.fingerprint(),
        world: WorldSummary {
            entities: ws.world.entities.len(),
            queries: ws.world.queries.len(),
            pairs: ws.world.pairs.len(),
            train_pairs: ws.split.train.len(),
            eval_pairs: ws.split.eval.len(),
        },
        enrichment: ws.enrichment.clone(),
        training,
        eval,
        publish,
        index: index_report,
        serving,
        load,
        ablation,
    };
    write_json(layout.metrics(), &report)?;
    Ok(report)
}
