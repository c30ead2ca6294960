//! Stage functions shared by the CLI and the end-to-end run: world
//! generation, enrichment, vocabulary, training, evaluation and ablations.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{build_datasets, split_by_kind, temporal_split, DatasetKind, SyntheticWorld, TrainingPair};
use crate::encoders::{Model, ModelConfig, TextFields};
use crate::enrichment::{enrich_documents, EnrichmentReport, FixtureCaptionProvider};
use crate::error::{Error, Result};
use crate::eval::{eval_pairs, evaluate, standard_tasks, EmbeddingTables, EvalSide, EvalTask, TaskReport};
use crate::loss::TaskSpec;
use crate::rng::substream;
use crate::tokenizer::{build_vocab, VocabularyBundle};
use crate::trainer::{default_tasks, loss_endpoints, train, CheckpointMeta, TrainConfig, TrainOutcome, TrainingData};
use crate::types::{EntityDocument, EntityKind};

/// Name of the headline evaluation: held-out within-topic query->pin/product
/// pairs against a corpus of all pins and products.
pub const WITHIN_TOPIC_TASK: &str = "entity_within_topic";

pub struct Split {
    pub train: Vec<TrainingPair>,
    pub eval: Vec<TrainingPair>,
}

pub fn split_world(world: &SyntheticWorld, config: &RunConfig) -> Result<Split> {
    let (train, eval) = temporal_split(&world.pairs, config.split.train_end, config.split.gap_days, config.split.eval_days)?;
    Ok(Split { train, eval })
}

/// Enriches world documents using training-window pairs only, so held-out
/// engagement never leaks into entity text.
pub fn enrich_world(world: &SyntheticWorld, split: &Split, config: &RunConfig) -> Result<(Vec<EntityDocument>, EnrichmentReport)> {
    let provider = FixtureCaptionProvider::new(&world.captions);
    let entity_pairs: Vec<TrainingPair> = {
        let kinds = world.kind_index();
        split
            .train
            .iter()
            .filter(|p| kinds.get(&p.entity_id).is_some_and(|k| *k != EntityKind::Query))
            .cloned()
            .collect()
    };
    enrich_documents(&world.entities, &world.boards, &entity_pairs, &provider, &config.enrichment)
}

/// Every string either tower can see.
pub fn vocab_corpus<'a>(docs: &'a [EntityDocument], queries: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = queries.collect();
    for d in docs {
        out.push(&d.title);
        out.push(&d.description);
        out.push(&d.synthetic_caption);
        out.extend(d.board_titles.iter().map(String::as_str));
        out.extend(d.engaged_queries.iter().map(|q| q.query.as_str()));
    }
    out
}

pub fn build_world_vocab(world: &SyntheticWorld, docs: &[EntityDocument], config: &RunConfig) -> Result<VocabularyBundle> {
    build_vocab(vocab_corpus(docs, world.queries.iter().map(|q| q.text.as_str())), config.vocab)
}

/// Which tasks a model trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Multi,
    Pin,
    Product,
    Query,
}

impl TaskMode {
    pub fn datasets(self) -> Vec<DatasetKind> {
        match self {
            TaskMode::Multi => DatasetKind::ALL.to_vec(),
            TaskMode::Pin => vec![DatasetKind::QueryPin],
            TaskMode::Product => vec![DatasetKind::QueryProduct],
            TaskMode::Query => vec![DatasetKind::QueryQuery],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub native_text: bool,
    pub captions: bool,
    pub board_titles: bool,
    pub engaged_queries: bool,
    pub compat_tasks: bool,
    pub mode: TaskMode,
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            native_text: true,
            captions: true,
            board_titles: true,
            engaged_queries: true,
            compat_tasks: true,
            mode: TaskMode::Multi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.compat_tasks && self.mode == TaskMode::Query {
            return Err(Error::Config("compat tasks need pin or product pairs; mode is query-only".into()));
        }
        Ok(())
    }

    pub fn text_fields(&self) -> TextFields {
        TextFields {
            native_text: self.native_text,
            captions: self.captions,
            board_titles: self.board_titles,
            engaged_queries: self.engaged_queries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
}

fn row(name: &str, flags: AblationFlags) -> AblationRow {
    AblationRow {
        name: name.to_string(),
        flags,
    }
}

/// Cumulative text enrichment: continuous features only, then native text
/// and captions, then board titles, then engaged queries.
pub fn enrichment_matrix() -> Vec<AblationRow> {
    let base = AblationFlags {
        native_text: false,
        captions: false,
        board_titles: false,
        engaged_queries: false,
        compat_tasks: false,
        mode: TaskMode::Multi,
    };
    let text = AblationFlags {
        native_text: true,
        captions: true,
        ..base
    };
    let boards = AblationFlags {
        board_titles: true,
        ..text
    };
    let queries = AblationFlags {
        engaged_queries: true,
        ..boards
    };
    vec![
        row("continuous_features", base),
        row("plus_text_and_captions", text),
        row("plus_board_titles", boards),
        row("plus_engaged_queries", queries),
    ]
}

/// One single-task model per dataset and the joint model.
pub fn multitask_matrix() -> Vec<AblationRow> {
    let joint = AblationFlags {
        compat_tasks: false,
        ..AblationFlags::full()
    };
    vec![
        row(
            "pin_only",
            AblationFlags {
                mode: TaskMode::Pin,
                ..joint
            },
        ),
        row(
            "product_only",
            AblationFlags {
                mode: TaskMode::Product,
                ..joint
            },
        ),
        row(
            "query_only",
            AblationFlags {
                mode: TaskMode::Query,
                ..joint
            },
        ),
        row("multi_task", joint),
    ]
}

/// The joint model with and without compatibility tasks.
pub fn compat_matrix() -> Vec<AblationRow> {
    vec![
        row(
            "without_compat",
            AblationFlags {
                compat_tasks: false,
                ..AblationFlags::full()
            },
        ),
        row("with_compat", AblationFlags::full()),
    ]
}

/// Everything prepared once and shared by training runs over one world.
pub struct Workspace {
    pub config: RunConfig,
    pub world: SyntheticWorld,
    pub split: Split,
    pub docs: Vec<EntityDocument>,
    pub enrichment: EnrichmentReport,
    pub vocab: Arc<VocabularyBundle>,
}

impl Workspace {
    pub fn new(config: RunConfig, world: SyntheticWorld) -> Result<Self> {
        config.validate()?;
        let split = split_world(&world, &config)?;
        let (docs, enrichment) = enrich_world(&world, &split, &config)?;
        let vocab = Arc::new(build_world_vocab(&world, &docs, &config)?);
        Ok(Self {
            config,
            world,
            split,
            docs,
            enrichment,
            vocab,
        })
    }

    /// Assembles a workspace from previously written stage outputs.
    pub fn from_parts(
        config: RunConfig,
        world: SyntheticWorld,
        docs: Vec<EntityDocument>,
        enrichment: EnrichmentReport,
        vocab: Arc<VocabularyBundle>,
    ) -> Result<Self> {
        config.validate()?;
        let split = split_world(&world, &config)?;
        Ok(Self {
            config,
            world,
            split,
            docs,
            enrichment,
            vocab,
        })
    }

    pub fn model_config(&self, flags: &AblationFlags) -> ModelConfig {
        ModelConfig {
            text_fields: flags.text_fields(),
            ..self.config.model.clone()
        }
    }

    pub fn tasks(&self, flags: &AblationFlags) -> Vec<TaskSpec> {
        default_tasks(&flags.mode.datasets(), flags.compat_tasks, &self.config.tasks.weights)
    }

    pub fn init_model(&self, model_config: ModelConfig) -> Result<Model> {
        Model::init(model_config, self.vocab.clone(), &mut substream(self.config.seed, "model/init"))
    }

    pub fn training_data(&self, model: &Model, datasets: &[DatasetKind]) -> Result<TrainingData> {
        let mut all = build_datasets(&self.split.train, &self.world.kind_index(), &self.config.dedup, self.config.seed)?;
        all.retain(|k, _| datasets.contains(k));
        TrainingData::prepare(model, &self.docs, &self.world.queries, &all)
    }

    pub fn checkpoint_meta(&self, model: &Model, tasks: &[TaskSpec], step: usize) -> CheckpointMeta {
        CheckpointMeta {
            config_hash: self.config.hash(),
            vocab_fingerprint: self.vocab.fingerprint(),
            step,
            model: model.config.clone(),
            tasks: tasks.to_vec(),
        }
    }

    /// Trains one model for `flags` under `train_config`.
    pub fn train_model(
        &self,
        flags: &AblationFlags,
        train_config: &TrainConfig,
        out_dir: Option<&Path>,
    ) -> Result<(TrainOutcome, Vec<TaskSpec>)> {
        flags.validate()?;
        let model = self.init_model(self.model_config(flags))?;
        let tasks = self.tasks(flags);
        let data = self.training_data(&model, &flags.mode.datasets())?;
        let meta = self.checkpoint_meta(&model, &tasks, train_config.steps);
        let outcome = train(model, &data, &tasks, train_config, self.config.seed, &meta, out_dir)?;
        Ok((outcome, tasks))
    }

    /// Held-out eval tasks: per dataset (plus compat variants) and the
    /// within-topic headline task.
    pub fn eval_tasks(&self, compat: bool) -> Result<Vec<EvalTask>> {
        let kinds = self.world.kind_index();
        let split = split_by_kind(&self.split.eval, &kinds)?;
        let mut tasks = standard_tasks(&split, &self.docs, &self.world.queries, compat);
        let topics = self.world.topic_index();
        let qids = self.world.query_id_index();
        let within: Vec<TrainingPair> = self
            .split
            .eval
            .iter()
            .filter(|p| kinds.get(&p.entity_id).is_some_and(|k| *k != EntityKind::Query))
            .filter(|p| self.world.is_within_topic(p, &topics, &qids))
            .cloned()
            .collect();
        let locales: HashMap<String, String> = self.world.queries.iter().map(|q| (q.text.clone(), q.locale.clone())).collect();
        tasks.push(EvalTask {
            name: WITHIN_TOPIC_TASK.to_string(),
            pairs: eval_pairs(&within, &locales),
            corpus_pool: self
                .docs
                .iter()
                .filter(|d| d.kind != EntityKind::Query)
                .map(|d| d.entity_id.clone())
                .collect(),
            side: EvalSide::Unified,
        });
        Ok(tasks)
    }

    pub fn evaluate(&self, model: &Model, tasks: &[EvalTask]) -> Result<BTreeMap<String, TaskReport>> {
        let extra: Vec<&str> = self.split.eval.iter().map(|p| p.query.as_str()).collect();
        let tables = EmbeddingTables::compute(model, &self.docs, &self.world.queries, &extra)?;
        evaluate(&tables, tasks, &self.config.eval, self.config.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub flags: AblationFlags,
    /// Recall@k per evaluation task.
    pub recall: BTreeMap<String, f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub k: usize,
    pub rows: Vec<AblationResult>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Plain-text table: one row per config, one column per task.
    pub fn render(&self) -> String {
        let mut cols: Vec<&String> = self.rows.iter().flat_map(|r| r.recall.keys()).collect();
        cols.sort();
        cols.dedup();
        let mut out = format!("{:<24}", "config");
        for c in &cols {
            out.push_str(&format!(" {:>20}", c));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<24}", r.name));
            for c in &cols {
                match r.recall.get(*c) {
                    Some(v) => out.push_str(&format!(" {:>20.4}", v)),
                    None => out.push_str(&format!(" {:>20}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per row on identical data and seeds and reports
/// held-out Recall@k for each.
pub fn run_ablation(ws: &Workspace, rows: &[AblationRow], train_config: &TrainConfig) -> Result<AblationTable> {
    for r in rows {
        r.flags.validate()?;
    }
    let mut results = Vec::with_capacity(rows.len());
    for r in rows {
        log::info!("ablation row {}", r.name);
        let (outcome, _) = ws.train_model(&r.flags, train_config, None)?;
        let eval_tasks: Vec<EvalTask> = ws
            .eval_tasks(r.flags.compat_tasks)?
            .into_iter()
            .filter(|t| match t.side {
                EvalSide::QueryTower => r.flags.mode.datasets().contains(&DatasetKind::QueryQuery),
                _ => r.flags.mode != TaskMode::Query,
            })
            .filter(|t| match t.name.as_str() {
                "pin" | "compat_pin" => r.flags.mode.datasets().contains(&DatasetKind::QueryPin),
                "product" | "compat_product" => r.flags.mode.datasets().contains(&DatasetKind::QueryProduct),
                _ => true,
            })
            .collect();
        let reports = ws.evaluate(&outcome.model, &eval_tasks)?;
        let (initial_loss, final_loss) = loss_endpoints(&outcome.metrics, 20).unwrap_or((f64::NAN, f64::NAN));
        results.push(AblationResult {
            name: r.name.clone(),
            flags: r.flags,
            recall: reports.into_iter().map(|(k, v)| (k, v.recall)).collect(),
            initial_loss,
            final_loss,
        });
    }
    Ok(AblationTable {
        k: ws.config.eval.k,
        rows: results,
    })
}

/// The ablation budget applied on top of the main training config.
pub fn ablation_train_config(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        steps: config.ablation.steps,
        batch_size: config.ablation.batch_size,
        negatives: config.ablation.negatives,
        plan: BTreeMap::new(),
        checkpoint_every: 0,
        ..config.train.clone()
    }
}
