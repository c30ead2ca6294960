//! Recall@k against a uniformly sampled corpus.
//!
//! A pair counts as a hit when fewer than `k` corpus members score strictly
//! higher than the engaged entity. The engaged entity itself is never part of
//! the competition, so ties never count against it.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetKind, QueryRecord, TrainingPair};
use crate::encoders::{encode_compat, Model};
use crate::error::{Error, Result};
use crate::math::{dot, DenseMatrix};
use crate::rng::substream;
use crate::types::{EntityDocument, EntityKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub query: String,
    pub entity_id: String,
    /// Slice labels (action, locale, ...) the pair is reported under.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub pairs: Vec<EvalPair>,
    pub corpus: Vec<String>,
    pub k: usize,
}

/// Uniform sample of `m` distinct ids (all of them when `m` is larger).
pub fn sample_corpus<R: Rng + ?Sized>(candidates: &[String], m: usize, rng: &mut R) -> Vec<String> {
    if m >= candidates.len() {
        return candidates.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, candidates.len(), m).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Per-pair hit indicators. `query_embs` is keyed by query text,
/// `entity_embs` by entity id; a pair whose query has no embedding is a miss.
pub fn recall_indicators(
    set: &EvalSet,
    query_embs: &HashMap<String, Vec<f64>>,
    entity_embs: &HashMap<String, Vec<f64>>,
) -> Result<Vec<bool>> {
    if set.pairs.is_empty() {
        return Err(Error::Empty("eval set"));
    }
    if set.k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let mut corpus_ids: Vec<&str> = Vec::with_capacity(set.corpus.len());
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(set.corpus.len());
    for id in &set.corpus {
        let v = entity_embs.get(id).ok_or_else(|| Error::UnknownId(format!("corpus entity {id}")))?;
        corpus_ids.push(id);
        rows.push(v.clone());
    }
    let corpus = if rows.is_empty() {
        DenseMatrix::zeros(0, 0)
    } else {
        DenseMatrix::from_rows(&rows)?
    };
    set.pairs
        .iter()
        .map(|p| {
            let Some(q) = query_embs.get(&p.query) else {
                return Ok(false);
            };
            let y = entity_embs
                .get(&p.entity_id)
                .ok_or_else(|| Error::UnknownId(format!("engaged entity {}", p.entity_id)))?;
            let target = dot(q, y);
            let mut above = 0usize;
            for (r, id) in corpus_ids.iter().enumerate() {
                if *id != p.entity_id && dot(q, corpus.row(r)) > target {
                    above += 1;
                    if above >= set.k {
                        return Ok(false);
                    }
                }
            }
            Ok(true)
        })
        .collect()
}

pub fn recall_at_k(set: &EvalSet, query_embs: &HashMap<String, Vec<f64>>, entity_embs: &HashMap<String, Vec<f64>>) -> Result<f64> {
    let hits = recall_indicators(set, query_embs, entity_embs)?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Corpus sample size.
    pub m: usize,
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { m: 1000, k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecall {
    pub recall: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub recall: f64,
    pub pairs: usize,
    pub corpus: usize,
    /// Recall per tag value, keyed `"tag=value"`.
    pub slices: BTreeMap<String, SliceRecall>,
}

fn summarize(set: &EvalSet, hits: &[bool]) -> TaskReport {
    let mut slices: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, &h) in set.pairs.iter().zip(hits) {
        for (tag, value) in &p.tags {
            let e = slices.entry(format!("{tag}={value}")).or_default();
            e.0 += usize::from(h);
            e.1 += 1;
        }
    }
    TaskReport {
        recall: hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64,
        pairs: hits.len(),
        corpus: set.corpus.len(),
        slices: slices
            .into_iter()
            .map(|(k, (h, n))| {
                (
                    k,
                    SliceRecall {
                        recall: h as f64 / n as f64,
                        pairs: n,
                    },
                )
            })
            .collect(),
    }
}

/// Which side encodes the right-hand entities of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSide {
    Unified,
    Compat,
    QueryTower,
}

/// One named evaluation: which pairs, which corpus, which encoder.
#[derive(Debug, Clone)]
pub struct EvalTask {
    pub name: String,
    pub pairs: Vec<EvalPair>,
    pub corpus_pool: Vec<String>,
    pub side: EvalSide,
}

/// Embeddings for every pin/product and query, computed once per model.
pub struct EmbeddingTables {
    pub queries: HashMap<String, Vec<f64>>,
    pub unified: HashMap<String, Vec<f64>>,
    pub compat: HashMap<String, Vec<f64>>,
    /// Query-tower embeddings keyed by query id, for query-query tasks.
    pub query_ids: HashMap<String, Vec<f64>>,
}

impl EmbeddingTables {
    pub fn compute(model: &Model, docs: &[EntityDocument], queries: &[QueryRecord], extra_queries: &[&str]) -> Result<Self> {
        let mut q = HashMap::new();
        let mut by_id = HashMap::new();
        for r in queries {
            if let Ok(v) = model.encode_query(&r.text) {
                by_id.insert(r.query_id.clone(), v.as_slice().to_vec());
                q.insert(r.text.clone(), v.into_inner());
            }
        }
        for text in extra_queries {
            if !q.contains_key(*text) {
                if let Ok(v) = model.encode_query(text) {
                    q.insert(text.to_string(), v.into_inner());
                }
            }
        }
        let entities: Vec<&EntityDocument> = docs.iter().filter(|d| d.kind != EntityKind::Query).collect();
        let mut unified = HashMap::with_capacity(entities.len());
        for chunk in entities.chunks(256) {
            let inputs = chunk.iter().map(|d| model.entity_input(d)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = inputs.iter().collect();
            let tape = model.forward_entities(&refs)?;
            for (r, d) in chunk.iter().enumerate() {
                unified.insert(d.entity_id.clone(), tape.outputs().row(r).to_vec());
            }
        }
        let compat = entities
            .iter()
            .filter_map(|d| encode_compat(d).ok().map(|v| (d.entity_id.clone(), v.into_inner())))
            .collect();
        Ok(Self {
            queries: q,
            unified,
            compat,
            query_ids: by_id,
        })
    }
}

/// Runs every task with a corpus drawn from `seed`'s `eval/<task>` stream.
pub fn evaluate(tables: &EmbeddingTables, tasks: &[EvalTask], config: &EvalConfig, seed: u64) -> Result<BTreeMap<String, TaskReport>> {
    let mut out = BTreeMap::new();
    for task in tasks {
        if task.pairs.is_empty() {
            continue;
        }
        let mut rng = substream(seed, &format!("eval/{}", task.name));
        let corpus = sample_corpus(&task.corpus_pool, config.m, &mut rng);
        let set = EvalSet {
            pairs: task.pairs.clone(),
            corpus,
            k: config.k,
        };
        let entity_embs = match task.side {
            EvalSide::Unified => &tables.unified,
            EvalSide::Compat => &tables.compat,
            EvalSide::QueryTower => &tables.query_ids,
        };
        let hits = recall_indicators(&set, &tables.queries, entity_embs)?;
        out.insert(task.name.clone(), summarize(&set, &hits));
    }
    Ok(out)
}

/// Converts held-out pairs to tagged eval pairs (action and query locale).
pub fn eval_pairs(pairs: &[TrainingPair], locales: &HashMap<String, String>) -> Vec<EvalPair> {
    pairs
        .iter()
        .map(|p| {
            let mut tags = BTreeMap::new();
            tags.insert("action".to_string(), p.action.to_string());
            if let Some(l) = locales.get(&p.query) {
                tags.insert("locale".to_string(), l.clone());
            }
            EvalPair {
                query: p.query.clone(),
                entity_id: p.entity_id.clone(),
                tags,
            }
        })
        .collect()
}

/// Standard per-dataset tasks: pin, product and query recall, with compat
/// variants when `compat` is set. Pairs must already be split by dataset.
pub fn standard_tasks(
    split: &BTreeMap<DatasetKind, Vec<TrainingPair>>,
    docs: &[EntityDocument],
    queries: &[QueryRecord],
    compat: bool,
) -> Vec<EvalTask> {
    let locales: HashMap<String, String> = queries.iter().map(|q| (q.text.clone(), q.locale.clone())).collect();
    let ids_of = |kind: EntityKind| -> Vec<String> { docs.iter().filter(|d| d.kind == kind).map(|d| d.entity_id.clone()).collect() };
    let mut tasks = Vec::new();
    for (kind, pairs) in split {
        let eval = eval_pairs(pairs, &locales);
        match kind {
            DatasetKind::QueryPin | DatasetKind::QueryProduct => {
                let pool = ids_of(kind.entity_kind());
                let name = kind.entity_kind().to_string();
                if compat {
                    tasks.push(EvalTask {
                        name: format!("compat_{name}"),
                        pairs: eval.clone(),
                        corpus_pool: pool.clone(),
                        side: EvalSide::Compat,
                    });
                }
                tasks.push(EvalTask {
                    name,
                    pairs: eval,
                    corpus_pool: pool,
                    side: EvalSide::Unified,
                });
            }
            DatasetKind::QueryQuery => tasks.push(EvalTask {
                name: "query".into(),
                pairs: eval,
                corpus_pool: queries.iter().map(|q| q.query_id.clone()).collect(),
                side: EvalSide::QueryTower,
            }),
        }
    }
    tasks
}
