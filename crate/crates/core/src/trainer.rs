//! Mixed-task batch composition, the Adam training loop, checkpoints and
//! the ablation runner.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetKind, PairDataset, QueryRecord};
use crate::encoders::{encode_compat, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::loss::{loss_total, Batch, BatchPair, EntityEncoder, LossConfig, NegativeSamplerState, NegativeSet, PreparedCatalog, TaskSpec};
use crate::math::{adam_step, AdamConfig, AdamState};
use crate::rng::substream;
use crate::tokenizer::VocabularyBundle;
use crate::types::{EntityDocument, EntityKind};

/// Splits `total` in proportion to `weights` (largest remainder, ties to the
/// earlier entry).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - out[b] as f64).total_cmp(&(exact[a] - out[a] as f64)).then(a.cmp(&b)));
    for i in order {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    /// Pairs drawn per dataset per batch.
    pub counts: BTreeMap<DatasetKind, usize>,
    /// Random negatives drawn per dataset per batch.
    pub negatives: BTreeMap<DatasetKind, usize>,
    /// Task ids consuming each dataset's pairs.
    pub routing: BTreeMap<DatasetKind, Vec<String>>,
}

impl BatchPlan {
    pub fn new(counts: BTreeMap<DatasetKind, usize>, total_negatives: usize, tasks: &[TaskSpec]) -> Result<Self> {
        let kinds: Vec<DatasetKind> = counts.iter().filter(|(_, &c)| c > 0).map(|(k, _)| *k).collect();
        if kinds.is_empty() {
            return Err(Error::Config("batch plan draws no pairs".into()));
        }
        let weights: Vec<f64> = kinds.iter().map(|k| counts[k] as f64).collect();
        let negatives = kinds.iter().copied().zip(largest_remainder(&weights, total_negatives)).collect();
        let mut routing: BTreeMap<DatasetKind, Vec<String>> = BTreeMap::new();
        for k in &kinds {
            let ids: Vec<String> = tasks.iter().filter(|t| t.dataset == *k).map(|t| t.task_id.clone()).collect();
            if ids.is_empty() {
                return Err(Error::Config(format!("dataset {k} has no task to route to")));
            }
            routing.insert(*k, ids);
        }
        let counts = kinds.iter().map(|k| (*k, counts[k])).collect();
        Ok(Self {
            counts,
            negatives,
            routing,
        })
    }

    /// Per-dataset counts proportional to dataset sizes.
    pub fn proportional(sizes: &BTreeMap<DatasetKind, usize>, batch_size: usize, negatives: usize, tasks: &[TaskSpec]) -> Result<Self> {
        let kinds: Vec<DatasetKind> = sizes.keys().copied().collect();
        let weights: Vec<f64> = kinds.iter().map(|k| sizes[k] as f64).collect();
        let counts = kinds.into_iter().zip(largest_remainder(&weights, batch_size)).collect();
        Self::new(counts, negatives, tasks)
    }

    pub fn batch_size(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Training pairs resolved to catalog indices, plus the prepared catalog.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub catalog: PreparedCatalog,
    pub query_texts: Vec<String>,
    pub entity_ids: Vec<String>,
    pub entity_kinds: Vec<EntityKind>,
    /// (query index, target index) per dataset.
    pub datasets: BTreeMap<DatasetKind, Vec<(u32, u32)>>,
    /// Pairs dropped because their query has no in-vocabulary token.
    pub dropped_pairs: usize,
}

impl TrainingData {
    pub fn prepare(
        model: &Model,
        docs: &[EntityDocument],
        queries: &[QueryRecord],
        datasets: &BTreeMap<DatasetKind, PairDataset>,
    ) -> Result<Self> {
        let mut query_texts: Vec<String> = Vec::new();
        let mut query_index: HashMap<String, u32> = HashMap::new();
        let mut add_query = |text: &str, texts: &mut Vec<String>| -> u32 {
            *query_index.entry(text.to_string()).or_insert_with(|| {
                texts.push(text.to_string());
                texts.len() as u32 - 1
            })
        };
        for q in queries {
            add_query(&q.text, &mut query_texts);
        }
        let query_id_text: HashMap<&str, &str> = queries.iter().map(|q| (q.query_id.as_str(), q.text.as_str())).collect();
        let entities: Vec<&EntityDocument> = docs.iter().filter(|d| d.kind != EntityKind::Query).collect();
        let entity_index: HashMap<&str, u32> = entities.iter().enumerate().map(|(i, d)| (d.entity_id.as_str(), i as u32)).collect();

        let mut resolved: BTreeMap<DatasetKind, Vec<(u32, u32)>> = BTreeMap::new();
        for (kind, ds) in datasets {
            let mut v = Vec::with_capacity(ds.pairs.len());
            for p in &ds.pairs {
                let q = add_query(&p.query, &mut query_texts);
                let target = match kind {
                    DatasetKind::QueryQuery => {
                        let text = query_id_text
                            .get(p.entity_id.as_str())
                            .ok_or_else(|| Error::UnknownId(p.entity_id.clone()))?;
                        add_query(text, &mut query_texts)
                    }
                    _ => *entity_index
                        .get(p.entity_id.as_str())
                        .ok_or_else(|| Error::UnknownId(p.entity_id.clone()))?,
                };
                v.push((q, target));
            }
            resolved.insert(*kind, v);
        }

        let bags: Vec<_> = query_texts.iter().map(|t| model.query_bag(t)).collect();
        let mut dropped = 0;
        for (kind, v) in resolved.iter_mut() {
            let before = v.len();
            v.retain(|&(q, t)| !bags[q as usize].is_empty() && (*kind != DatasetKind::QueryQuery || !bags[t as usize].is_empty()));
            dropped += before - v.len();
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} pairs whose queries have no in-vocabulary tokens");
        }
        let inputs = entities.iter().map(|d| model.entity_input(d)).collect::<Result<Vec<_>>>()?;
        let compat = entities.iter().map(|d| encode_compat(d).ok().map(|v| v.into_inner())).collect();
        Ok(Self {
            catalog: PreparedCatalog {
                queries: bags,
                entities: inputs,
                compat,
            },
            query_texts,
            entity_ids: entities.iter().map(|d| d.entity_id.clone()).collect(),
            entity_kinds: entities.iter().map(|d| d.kind).collect(),
            datasets: resolved,
            dropped_pairs: dropped,
        })
    }

    /// Negative-sampling catalog of a dataset: entities of its kind, or every
    /// encodable query.
    pub fn negative_catalog(&self, kind: DatasetKind) -> Vec<u32> {
        match kind {
            DatasetKind::QueryQuery => (0..self.query_texts.len() as u32)
                .filter(|&i| !self.catalog.queries[i as usize].is_empty())
                .collect(),
            _ => (0..self.entity_ids.len() as u32)
                .filter(|&i| self.entity_kinds[i as usize] == kind.entity_kind())
                .collect(),
        }
    }

    pub fn sizes(&self) -> BTreeMap<DatasetKind, usize> {
        self.datasets.iter().map(|(k, v)| (*k, v.len())).collect()
    }
}

/// Draws batches epoch by epoch: each dataset is walked in a seeded shuffled
/// order and reshuffled when exhausted.
pub struct BatchComposer<'a> {
    data: &'a TrainingData,
    plan: BatchPlan,
    seed: u64,
    orders: BTreeMap<DatasetKind, (usize, Vec<u32>, usize)>,
    samplers: BTreeMap<DatasetKind, NegativeSamplerState>,
}

impl<'a> BatchComposer<'a> {
    pub fn new(data: &'a TrainingData, plan: BatchPlan, seed: u64) -> Result<Self> {
        let mut samplers = BTreeMap::new();
        for (kind, &count) in &plan.counts {
            let len = data.datasets.get(kind).map_or(0, Vec::len);
            if count > 0 && len == 0 {
                return Err(Error::Empty("dataset required by the batch plan"));
            }
            samplers.insert(*kind, NegativeSamplerState::new(data.negative_catalog(*kind)));
        }
        Ok(Self {
            data,
            plan,
            seed,
            orders: BTreeMap::new(),
            samplers,
        })
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn samplers(&self) -> &BTreeMap<DatasetKind, NegativeSamplerState> {
        &self.samplers
    }

    fn draw(&mut self, kind: DatasetKind, n: usize) -> Vec<(u32, u32)> {
        let pairs = &self.data.datasets[&kind];
        let seed = self.seed;
        let (epoch, order, cursor) = self.orders.entry(kind).or_insert_with(|| (0, Vec::new(), 0));
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if *cursor >= order.len() {
                *order = (0..pairs.len() as u32).collect();
                order.shuffle(&mut substream(seed, &format!("epoch/{kind}/{epoch}")));
                *epoch += 1;
                *cursor = 0;
            }
            out.push(pairs[order[*cursor] as usize]);
            *cursor += 1;
        }
        out
    }

    /// Next batch without logQ values filled in.
    pub fn compose(&mut self, step: usize) -> Batch {
        let mut batch = Batch::default();
        let plan = self.plan.clone();
        for (kind, &count) in &plan.counts {
            for (q, t) in self.draw(*kind, count) {
                batch.pairs.push(BatchPair {
                    dataset: *kind,
                    query: q,
                    target: t,
                    log_q: 0.0,
                });
            }
            let n_neg = plan.negatives.get(kind).copied().unwrap_or(0);
            let sampler = &self.samplers[kind];
            let mut rng = substream(self.seed, &format!("negatives/{kind}/{step}"));
            let ids = sampler.sample_uniform(n_neg, &mut rng);
            let lq = sampler.uniform_log_q().unwrap_or(0.0);
            batch.negatives.insert(
                *kind,
                NegativeSet {
                    log_q: vec![lq; ids.len()],
                    ids,
                },
            );
        }
        batch
    }

    /// Counts the batch's positives into the streaming frequency estimate,
    /// then sets every pair's in-batch logQ from the updated counts.
    pub fn assign_log_q(&mut self, batch: &mut Batch) -> Result<()> {
        for p in &batch.pairs {
            self.samplers
                .get_mut(&p.dataset)
                .expect("sampler per planned dataset")
                .observe(p.target);
        }
        for p in batch.pairs.iter_mut() {
            p.log_q = self.samplers[&p.dataset].estimate_log_q(p.target)?;
        }
        Ok(())
    }

    pub fn next_batch(&mut self, step: usize) -> Result<Batch> {
        let mut b = self.compose(step);
        self.assign_log_q(&mut b)?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Explicit per-dataset pair counts; when empty the plan is proportional
    /// to dataset sizes.
    pub plan: BTreeMap<DatasetKind, usize>,
    /// Write a checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 256,
            negatives: 256,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            plan: BTreeMap::new(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub task: String,
    pub loss: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> Result<()> {
    writeln!(out, "step,task,loss")?;
    for r in rows {
        writeln!(out, "{},{},{:.9}", r.step, r.task, r.loss)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub metrics: Vec<MetricRow>,
    pub plan: BatchPlan,
}

/// Mean total loss of the first and last `window` logged steps.
pub fn loss_endpoints(metrics: &[MetricRow], window: usize) -> Option<(f64, f64)> {
    let totals: Vec<f64> = metrics.iter().filter(|r| r.task == "total").map(|r| r.loss).collect();
    if totals.is_empty() {
        return None;
    }
    let w = window.clamp(1, totals.len());
    let head = totals[..w].iter().sum::<f64>() / w as f64;
    let tail = totals[totals.len() - w..].iter().sum::<f64>() / w as f64;
    Some((head, tail))
}

fn dump_batch(dir: Option<&Path>, step: usize, batch: &Batch, reason: &str) -> String {
    let Some(dir) = dir else {
        return reason.to_string();
    };
    let path = dir.join(format!("abort-step-{step}.json"));
    let dump = serde_json::json!({ "step": step, "reason": reason, "batch": batch });
    match std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, dump.to_string())) {
        Ok(()) => format!("{reason}; batch written to {}", path.display()),
        Err(e) => format!("{reason}; batch dump failed: {e}"),
    }
}

/// Runs `config.steps` Adam steps. When `out_dir` is given, periodic
/// checkpoints and abort diagnostics are written there. The returned model
/// is rounded to checkpoint precision.
pub fn train(
    mut model: Model,
    data: &TrainingData,
    tasks: &[TaskSpec],
    config: &TrainConfig,
    seed: u64,
    meta: &CheckpointMeta,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    for t in tasks {
        t.validate()?;
    }
    let plan = if config.plan.is_empty() {
        let sizes: BTreeMap<DatasetKind, usize> = data
            .sizes()
            .into_iter()
            .filter(|(k, n)| *n > 0 && tasks.iter().any(|t| t.dataset == *k))
            .collect();
        BatchPlan::proportional(&sizes, config.batch_size, config.negatives, tasks)?
    } else {
        BatchPlan::new(config.plan.clone(), config.negatives, tasks)?
    };
    let mut composer = BatchComposer::new(data, plan.clone(), seed)?;
    let mut adam = AdamState::new(config.adam, &model.param_block_sizes())?;
    let mut metrics = Vec::with_capacity(config.steps * (tasks.len() + 1));
    for step in 0..config.steps {
        let batch = composer.next_batch(step)?;
        let (loss, grads) = match loss_total(&batch, tasks, &model, &data.catalog, &config.loss) {
            Ok(v) => v,
            Err(e @ Error::NonFinite(_)) => {
                let reason = dump_batch(out_dir, step, &batch, &e.to_string());
                return Err(Error::TrainingAborted { step, reason });
            }
            Err(e) => return Err(e),
        };
        let grad_blocks = grads.blocks();
        if !loss.total.is_finite() || grad_blocks.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            let reason = dump_batch(out_dir, step, &batch, &format!("non-finite loss or gradient (loss {})", loss.total));
            return Err(Error::TrainingAborted { step, reason });
        }
        for (task, l) in &loss.per_task {
            metrics.push(MetricRow {
                step,
                task: task.clone(),
                loss: *l,
            });
        }
        metrics.push(MetricRow {
            step,
            task: "total".into(),
            loss: loss.total,
        });
        adam_step(&mut adam, &mut model.param_blocks_mut(), &grad_blocks)?;
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps {
                let mut m = meta.clone();
                m.step = step + 1;
                let mut snapshot = model.clone();
                snapshot.round_to_f32();
                save_checkpoint(&dir.join(format!("step-{}.ckpt", step + 1)), &snapshot, &adam, &m)?;
            }
        }
    }
    model.round_to_f32();
    Ok(TrainOutcome {
        model,
        adam,
        metrics,
        plan,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"OSCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub vocab_fingerprint: String,
    pub step: usize,
    pub model: ModelConfig,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Trailer {
    meta: CheckpointMeta,
    adam_config: AdamConfig,
    adam_step: u64,
    param_blocks: Vec<usize>,
}

/// Layout: magic, version (u32), block count (u32), then every parameter
/// block, Adam first moments and Adam second moments as little-endian f32
/// runs (each prefixed by its u64 length), then the JSON trailer and its u64
/// byte length.
pub fn save_checkpoint(path: &Path, model: &Model, adam: &AdamState, meta: &CheckpointMeta) -> Result<()> {
    let mut m = model.clone();
    let blocks = m.param_blocks_mut();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(blocks.len() as u32).to_le_bytes())?;
    let write_block = |out: &mut BufWriter<File>, b: &[f64]| -> Result<()> {
        out.write_all(&(b.len() as u64).to_le_bytes())?;
        for v in b {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    };
    let sizes: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
    for b in &blocks {
        write_block(&mut out, b)?;
    }
    for b in adam.first_moment.iter().chain(&adam.second_moment) {
        write_block(&mut out, b)?;
    }
    let trailer = serde_json::to_vec(&Trailer {
        meta: meta.clone(),
        adam_config: adam.config,
        adam_step: adam.step,
        param_blocks: sizes,
    })?;
    out.write_all(&trailer)?;
    out.write_all(&(trailer.len() as u64).to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_block(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn load_checkpoint(path: &Path, vocab: Arc<VocabularyBundle>) -> Result<LoadedCheckpoint> {
    let mut all = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut all)?;
    if all.len() < 20 || &all[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("{}: not a checkpoint", path.display())));
    }
    let tlen = u64::from_le_bytes(all[all.len() - 8..].try_into().expect("8 bytes")) as usize;
    if tlen + 8 > all.len() {
        return Err(Error::format("checkpoint trailer length out of range"));
    }
    let trailer: Trailer = serde_json::from_slice(&all[all.len() - 8 - tlen..all.len() - 8])?;
    let mut r = &all[4..all.len() - 8 - tlen];
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let n_blocks = read_u32(&mut r)? as usize;
    if vocab.fingerprint() != trailer.meta.vocab_fingerprint {
        return Err(Error::ArtifactMismatch("checkpoint was trained with a different vocabulary".into()));
    }
    let mut model = Model::init(trailer.meta.model.clone(), vocab, &mut substream(0, "checkpoint/shape"))?;
    let sizes = model.param_block_sizes();
    if sizes != trailer.param_blocks || n_blocks != sizes.len() {
        return Err(Error::format("checkpoint parameter layout does not match its model config"));
    }
    let params = (0..n_blocks).map(|_| read_block(&mut r)).collect::<Result<Vec<_>>>()?;
    let first = (0..n_blocks).map(|_| read_block(&mut r)).collect::<Result<Vec<_>>>()?;
    let second = (0..n_blocks).map(|_| read_block(&mut r)).collect::<Result<Vec<_>>>()?;
    for (dst, src) in model.param_blocks_mut().into_iter().zip(&params) {
        if dst.len() != src.len() {
            return Err(Error::format("checkpoint block size mismatch"));
        }
        dst.copy_from_slice(src);
    }
    let adam = AdamState {
        config: trailer.adam_config,
        step: trailer.adam_step,
        first_moment: first,
        second_moment: second,
    };
    Ok(LoadedCheckpoint {
        model,
        adam,
        meta: trailer.meta,
    })
}

/// Builds the task list: unified tasks for pin and product pairs, the query
/// tower for query-query pairs, and compat tasks when requested.
pub fn default_tasks(datasets: &[DatasetKind], compat: bool, weights: &TaskWeights) -> Vec<TaskSpec> {
    let mut tasks = Vec::new();
    for &d in datasets {
        match d {
            DatasetKind::QueryPin => {
                tasks.push(TaskSpec::new("unified_pin", d, EntityEncoder::Unified, weights.unified_pin));
                if compat {
                    tasks.push(TaskSpec::new("compat_pin", d, EntityEncoder::CompatPin, weights.compat_pin));
                }
            }
            DatasetKind::QueryProduct => {
                tasks.push(TaskSpec::new("unified_product", d, EntityEncoder::Unified, weights.unified_product));
                if compat {
                    tasks.push(TaskSpec::new(
                        "compat_product",
                        d,
                        EntityEncoder::CompatProduct,
                        weights.compat_product,
                    ));
                }
            }
            DatasetKind::QueryQuery => tasks.push(TaskSpec::new("query_query", d, EntityEncoder::QueryTower, weights.query_query)),
        }
    }
    tasks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskWeights {
    pub unified_pin: f64,
    pub unified_product: f64,
    pub query_query: f64,
    pub compat_pin: f64,
    pub compat_product: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            unified_pin: 1.0,
            unified_product: 1.0,
            query_query: 1.0,
            compat_pin: 1.0,
            compat_product: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder(&[8.0, 4.0, 4.0], 16), vec![8, 4, 4]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.56, 0.24, 0.2], 256).iter().sum::<usize>(), 256);
        assert_eq!(largest_remainder(&[], 5), Vec::<usize>::new());
    }

    #[test]
    fn plan_routes_every_dataset() {
        let tasks = default_tasks(&[DatasetKind::QueryPin, DatasetKind::QueryProduct], true, &TaskWeights::default());
        let counts: BTreeMap<_, _> = [(DatasetKind::QueryPin, 8), (DatasetKind::QueryProduct, 4)].into_iter().collect();
        let plan = BatchPlan::new(counts.clone(), 6, &tasks).unwrap();
        assert_eq!(plan.batch_size(), 12);
        assert_eq!(plan.routing[&DatasetKind::QueryPin], vec!["unified_pin", "compat_pin"]);
        assert_eq!(plan.negatives[&DatasetKind::QueryPin], 4);
        let mut with_query = counts;
        with_query.insert(DatasetKind::QueryQuery, 4);
        assert!(BatchPlan::new(with_query, 6, &tasks).is_err());
    }
}
