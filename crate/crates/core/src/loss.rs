//! Sampled softmax with logQ correction.
//!
//! Each task pairs a dataset of (query, entity) pairs with an entity encoder.
//! A task's loss has an in-batch part (the batch's positives as the candidate
//! set, corrected by their streaming positive frequency) and a random-negative
//! part (catalog samples corrected by the sampler's probability). The total
//! loss is the mix-weighted sum over tasks, with every task that shares a
//! dataset reusing the same pairs.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetKind;
use crate::encoders::{EntityInput, Model, ModelGrads};
use crate::error::{Error, Result};
use crate::hash_embedding::TokenBag;
use crate::math::{axpy, dot, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityEncoder {
    Unified,
    CompatPin,
    CompatProduct,
    QueryTower,
}

impl EntityEncoder {
    pub fn valid_for(self, dataset: DatasetKind) -> bool {
        matches!(
            (self, dataset),
            (EntityEncoder::Unified, DatasetKind::QueryPin)
                | (EntityEncoder::Unified, DatasetKind::QueryProduct)
                | (EntityEncoder::CompatPin, DatasetKind::QueryPin)
                | (EntityEncoder::CompatProduct, DatasetKind::QueryProduct)
                | (EntityEncoder::QueryTower, DatasetKind::QueryQuery)
        )
    }

    pub fn is_compat(self) -> bool {
        matches!(self, EntityEncoder::CompatPin | EntityEncoder::CompatProduct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub dataset: DatasetKind,
    pub encoder: EntityEncoder,
    pub mix_weight: f64,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, dataset: DatasetKind, encoder: EntityEncoder, mix_weight: f64) -> Self {
        Self {
            task_id: task_id.into(),
            dataset,
            encoder,
            mix_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mix_weight >= 0.0 && self.mix_weight.is_finite()) {
            return Err(Error::Config(format!("task {}: mix weight must be >= 0", self.task_id)));
        }
        if !self.encoder.valid_for(self.dataset) {
            return Err(Error::Config(format!(
                "task {}: encoder {:?} cannot embed {:?} entities",
                self.task_id, self.encoder, self.dataset
            )));
        }
        Ok(())
    }
}

/// Streaming positive-frequency counts for one catalog, plus the uniform
/// random-negative sampler over it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NegativeSamplerState {
    pub catalog: Vec<u32>,
    counts: HashMap<u32, u64>,
    total: u64,
}

impl NegativeSamplerState {
    pub fn new(catalog: Vec<u32>) -> Self {
        Self {
            catalog,
            counts: HashMap::new(),
            total: 0,
        }
    }

    pub fn observe(&mut self, id: u32) {
        *self.counts.entry(id).or_default() += 1;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    /// `log(max(count, 1) / total)`; unseen ids get the count-1 floor.
    pub fn estimate_log_q(&self, id: u32) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::Empty("negative sampler counts"));
        }
        Ok((self.count(id).max(1) as f64 / self.total as f64).ln())
    }

    /// Exact log-probability of any id under uniform sampling.
    pub fn uniform_log_q(&self) -> Result<f64> {
        if self.catalog.is_empty() {
            return Err(Error::Empty("negative sampler catalog"));
        }
        Ok(-(self.catalog.len() as f64).ln())
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<u32> {
        if self.catalog.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.catalog[rng.gen_range(0..self.catalog.len())]).collect()
    }
}

/// Free-function form of [`NegativeSamplerState::estimate_log_q`].
pub fn estimate_log_q(state: &NegativeSamplerState, id: u32) -> Result<f64> {
    state.estimate_log_q(id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InBatchLoss {
    pub loss: f64,
    pub d_query: DenseMatrix,
    pub d_pos: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomNegativeLoss {
    pub loss: f64,
    pub d_query: DenseMatrix,
    pub d_pos: DenseMatrix,
    pub d_neg: DenseMatrix,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_rows(a: &DenseMatrix, b: &DenseMatrix, context: &'static str) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            expected: a.rows * a.cols,
            actual: b.rows * b.cols,
            context,
        });
    }
    Ok(())
}

/// In-batch sampled softmax: each query scores every distinct positive of
/// the batch (`ids` identify duplicates; the first occurrence stands for the
/// entity), logits are `q.p / temperature - logQ`.
pub fn loss_in_batch(query: &DenseMatrix, pos: &DenseMatrix, ids: &[u32], log_q: &[f64], temperature: f64) -> Result<InBatchLoss> {
    let b = query.rows;
    if b == 0 {
        return Err(Error::Empty("in-batch loss batch"));
    }
    check_rows(query, pos, "in-batch positives")?;
    if ids.len() != b || log_q.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            actual: ids.len().min(log_q.len()),
            context: "in-batch ids/logQ",
        });
    }
    let mut first: HashMap<u32, usize> = HashMap::new();
    let mut columns: Vec<usize> = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        first.entry(*id).or_insert_with(|| {
            columns.push(i);
            columns.len() - 1
        });
    }
    let target: Vec<usize> = ids.iter().map(|id| first[id]).collect();
    let inv_t = 1.0 / temperature;
    let mut d_query = DenseMatrix::zeros(b, query.cols);
    let mut d_pos = DenseMatrix::zeros(b, query.cols);
    let mut total = 0.0;
    let mut logits = vec![0.0; columns.len()];
    let scale = 1.0 / b as f64;
    for i in 0..b {
        let q = query.row(i);
        for (z, &row) in columns.iter().enumerate() {
            logits[z] = dot(q, pos.row(row)) * inv_t - log_q[row];
        }
        let lse = log_sum_exp(&logits);
        total += lse - logits[target[i]];
        for (z, &row) in columns.iter().enumerate() {
            let mut g = (logits[z] - lse).exp();
            if z == target[i] {
                g -= 1.0;
            }
            let g = g * scale * inv_t;
            axpy(g, pos.row(row), d_query.row_mut(i));
            axpy(g, q, d_pos.row_mut(row));
        }
    }
    Ok(InBatchLoss {
        loss: total * scale,
        d_query,
        d_pos,
    })
}

/// Sampled softmax over `{positive} ∪ negatives`. A negative that is the
/// row's own positive (an accidental hit) is skipped so the positive is
/// counted once; with zero negatives every row has a single candidate.
#[allow(clippy::too_many_arguments)]
pub fn loss_random_negatives(
    query: &DenseMatrix,
    pos: &DenseMatrix,
    pos_ids: &[u32],
    neg: &DenseMatrix,
    neg_ids: &[u32],
    log_q_pos: &[f64],
    log_q_neg: &[f64],
    temperature: f64,
) -> Result<RandomNegativeLoss> {
    let b = query.rows;
    if b == 0 {
        return Err(Error::Empty("random-negative loss batch"));
    }
    check_rows(query, pos, "random-negative positives")?;
    if neg.rows > 0 && neg.cols != query.cols {
        return Err(Error::DimensionMismatch {
            expected: query.cols,
            actual: neg.cols,
            context: "negative embeddings",
        });
    }
    if pos_ids.len() != b || log_q_pos.len() != b || neg_ids.len() != neg.rows || log_q_neg.len() != neg.rows {
        return Err(Error::invalid("random-negative ids/logQ lengths do not match embeddings"));
    }
    let inv_t = 1.0 / temperature;
    let scale = 1.0 / b as f64;
    let mut d_query = DenseMatrix::zeros(b, query.cols);
    let mut d_pos = DenseMatrix::zeros(b, query.cols);
    let mut d_neg = DenseMatrix::zeros(neg.rows, query.cols);
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(neg.rows + 1);
    let mut cand: Vec<usize> = Vec::with_capacity(neg.rows);
    for i in 0..b {
        let q = query.row(i);
        logits.clear();
        cand.clear();
        logits.push(dot(q, pos.row(i)) * inv_t - log_q_pos[i]);
        for j in 0..neg.rows {
            if neg_ids[j] == pos_ids[i] {
                continue;
            }
            cand.push(j);
            logits.push(dot(q, neg.row(j)) * inv_t - log_q_neg[j]);
        }
        let lse = log_sum_exp(&logits);
        total += lse - logits[0];
        let g_pos = ((logits[0] - lse).exp() - 1.0) * scale * inv_t;
        axpy(g_pos, pos.row(i), d_query.row_mut(i));
        axpy(g_pos, q, d_pos.row_mut(i));
        for (k, &j) in cand.iter().enumerate() {
            let g = (logits[k + 1] - lse).exp() * scale * inv_t;
            axpy(g, neg.row(j), d_query.row_mut(i));
            axpy(g, q, d_neg.row_mut(j));
        }
    }
    Ok(RandomNegativeLoss {
        loss: total * scale,
        d_query,
        d_pos,
        d_neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Logits are `cosine / temperature`.
    pub temperature: f64,
    /// Weight of the random-negative term relative to the in-batch term.
    pub random_negative_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            random_negative_weight: 1.0,
        }
    }
}

/// Everything the towers need to embed catalog members by index.
#[derive(Debug, Clone, Default)]
pub struct PreparedCatalog {
    pub queries: Vec<TokenBag>,
    pub entities: Vec<EntityInput>,
    /// Unit-normalized compatibility embeddings per entity.
    pub compat: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPair {
    pub dataset: DatasetKind,
    /// Index into the query catalog.
    pub query: u32,
    /// Entity catalog index, or query catalog index for query-query pairs.
    pub target: u32,
    pub log_q: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NegativeSet {
    pub ids: Vec<u32>,
    pub log_q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Batch {
    pub pairs: Vec<BatchPair>,
    pub negatives: BTreeMap<DatasetKind, NegativeSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    /// Unweighted `L_T` per task, in task order.
    pub per_task: Vec<(String, f64)>,
}

enum Source {
    QueryTower,
    EntityTower,
    Compat,
}

fn gather(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), m.cols);
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

fn scatter_add(grad: &DenseMatrix, rows: &[usize], weight: f64, into: &mut DenseMatrix) {
    for (i, &r) in rows.iter().enumerate() {
        axpy(weight, grad.row(i), into.row_mut(r));
    }
}

/// Mix-weighted sum of task losses over one batch, with gradients for every
/// trainable parameter. Compatibility embeddings are constants.
pub fn loss_total(
    batch: &Batch,
    tasks: &[TaskSpec],
    model: &Model,
    catalog: &PreparedCatalog,
    config: &LossConfig,
) -> Result<(TotalLoss, ModelGrads)> {
    for t in tasks {
        t.validate()?;
    }
    if batch.pairs.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    for p in &batch.pairs {
        if !tasks.iter().any(|t| t.dataset == p.dataset) {
            return Err(Error::invalid(format!("no task consumes {:?} pairs", p.dataset)));
        }
    }
    let dim = model.embed_dim();

    // Query-tower rows: every left-hand query, then right-hand queries and
    // query negatives of the query-query dataset.
    let mut q_bags: Vec<&TokenBag> = Vec::new();
    let bag = |i: u32| -> Result<&TokenBag> {
        catalog
            .queries
            .get(i as usize)
            .ok_or_else(|| Error::UnknownId(format!("query index {i}")))
    };
    for p in &batch.pairs {
        q_bags.push(bag(p.query)?);
    }
    let needs_query_tower = tasks.iter().any(|t| t.encoder == EntityEncoder::QueryTower);
    let needs_unified = |d: DatasetKind| tasks.iter().any(|t| t.dataset == d && t.encoder == EntityEncoder::Unified);

    let mut right_rows: HashMap<usize, usize> = HashMap::new(); // pair index -> tower row
    let mut neg_rows: BTreeMap<DatasetKind, Vec<usize>> = BTreeMap::new();
    let mut e_inputs: Vec<&EntityInput> = Vec::new();
    let entity = |i: u32| -> Result<&EntityInput> {
        catalog
            .entities
            .get(i as usize)
            .ok_or_else(|| Error::UnknownId(format!("entity index {i}")))
    };
    for (pi, p) in batch.pairs.iter().enumerate() {
        match p.dataset {
            DatasetKind::QueryQuery if needs_query_tower => {
                right_rows.insert(pi, q_bags.len());
                q_bags.push(bag(p.target)?);
            }
            DatasetKind::QueryPin | DatasetKind::QueryProduct if needs_unified(p.dataset) => {
                right_rows.insert(pi, e_inputs.len());
                e_inputs.push(entity(p.target)?);
            }
            _ => {}
        }
    }
    for (kind, negs) in &batch.negatives {
        let rows: Vec<usize> = match kind {
            DatasetKind::QueryQuery if needs_query_tower => negs
                .ids
                .iter()
                .map(|&id| {
                    q_bags.push(bag(id)?);
                    Ok(q_bags.len() - 1)
                })
                .collect::<Result<_>>()?,
            DatasetKind::QueryPin | DatasetKind::QueryProduct if needs_unified(*kind) => negs
                .ids
                .iter()
                .map(|&id| {
                    e_inputs.push(entity(id)?);
                    Ok(e_inputs.len() - 1)
                })
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        neg_rows.insert(*kind, rows);
    }

    let q_tape = model.forward_queries(&q_bags)?;
    let e_tape = if e_inputs.is_empty() {
        None
    } else {
        Some(model.forward_entities(&e_inputs)?)
    };
    let mut dq_all = DenseMatrix::zeros(q_tape.len(), dim);
    let mut de_all = DenseMatrix::zeros(e_tape.as_ref().map_or(0, |t| t.len()), dim);

    let compat_row = |i: u32| -> Result<&[f64]> {
        catalog
            .compat
            .get(i as usize)
            .and_then(|c| c.as_deref())
            .ok_or_else(|| Error::MissingCompat(format!("entity index {i}")))
    };
    let compat_matrix = |ids: &[u32]| -> Result<DenseMatrix> {
        let mut m = DenseMatrix::zeros(ids.len(), dim);
        for (r, &id) in ids.iter().enumerate() {
            let v = compat_row(id)?;
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                    context: "compat embedding",
                });
            }
            m.row_mut(r).copy_from_slice(v);
        }
        Ok(m)
    };

    let mut total = 0.0;
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let pair_idx: Vec<usize> = (0..batch.pairs.len()).filter(|&i| batch.pairs[i].dataset == task.dataset).collect();
        if pair_idx.is_empty() {
            per_task.push((task.task_id.clone(), 0.0));
            continue;
        }
        let source = match task.encoder {
            EntityEncoder::QueryTower => Source::QueryTower,
            EntityEncoder::Unified => Source::EntityTower,
            EntityEncoder::CompatPin | EntityEncoder::CompatProduct => Source::Compat,
        };
        let q_rows = &pair_idx;
        let queries = gather(q_tape.outputs(), q_rows);
        let pos_ids: Vec<u32> = pair_idx.iter().map(|&i| batch.pairs[i].target).collect();
        let log_q: Vec<f64> = pair_idx.iter().map(|&i| batch.pairs[i].log_q).collect();
        let empty = NegativeSet::default();
        let negs = batch.negatives.get(&task.dataset).unwrap_or(&empty);

        let (pos_rows, neg_tower_rows): (Vec<usize>, Vec<usize>) = match source {
            Source::Compat => (Vec::new(), Vec::new()),
            _ => (
                pair_idx.iter().map(|i| right_rows[i]).collect(),
                neg_rows.get(&task.dataset).cloned().unwrap_or_default(),
            ),
        };
        let (pos, neg) = match source {
            Source::QueryTower => (gather(q_tape.outputs(), &pos_rows), gather(q_tape.outputs(), &neg_tower_rows)),
            Source::EntityTower => {
                let out = e_tape.as_ref().expect("entity rows present").outputs();
                (gather(out, &pos_rows), gather(out, &neg_tower_rows))
            }
            Source::Compat => (compat_matrix(&pos_ids)?, compat_matrix(&negs.ids)?),
        };

        let bn = loss_in_batch(&queries, &pos, &pos_ids, &log_q, config.temperature)?;
        let rn = loss_random_negatives(&queries, &pos, &pos_ids, &neg, &negs.ids, &log_q, &negs.log_q, config.temperature)?;
        let rn_w = config.random_negative_weight;
        let task_loss = bn.loss + rn_w * rn.loss;
        total += task.mix_weight * task_loss;
        per_task.push((task.task_id.clone(), task_loss));

        let w = task.mix_weight;
        scatter_add(&bn.d_query, q_rows, w, &mut dq_all);
        scatter_add(&rn.d_query, q_rows, w * rn_w, &mut dq_all);
        match source {
            Source::QueryTower => {
                scatter_add(&bn.d_pos, &pos_rows, w, &mut dq_all);
                scatter_add(&rn.d_pos, &pos_rows, w * rn_w, &mut dq_all);
                scatter_add(&rn.d_neg, &neg_tower_rows, w * rn_w, &mut dq_all);
            }
            Source::EntityTower => {
                scatter_add(&bn.d_pos, &pos_rows, w, &mut de_all);
                scatter_add(&rn.d_pos, &pos_rows, w * rn_w, &mut de_all);
                scatter_add(&rn.d_neg, &neg_tower_rows, w * rn_w, &mut de_all);
            }
            Source::Compat => {}
        }
    }
    if per_task.iter().all(|(_, l)| *l == 0.0) && !tasks.iter().any(|t| batch.pairs.iter().any(|p| p.dataset == t.dataset)) {
        return Err(Error::invalid("no applicable task for batch"));
    }

    let mut grads = ModelGrads::zeros_like(model);
    model.backward_tower(&q_tape, &dq_all, &mut grads)?;
    if let Some(t) = &e_tape {
        model.backward_tower(t, &de_all, &mut grads)?;
    }
    Ok((TotalLoss { total, per_task }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_check, l2_normalize};
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| l2_normalize(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        DenseMatrix::from_rows(&rows).unwrap()
    }

    /// Independent scalar evaluation of the in-batch formula.
    fn in_batch_direct(q: &DenseMatrix, p: &DenseMatrix, log_q: &[f64]) -> f64 {
        let b = q.rows;
        let mut acc = 0.0;
        for i in 0..b {
            let num = (dot(q.row(i), p.row(i)) - log_q[i]).exp();
            let den: f64 = (0..b).map(|z| (dot(q.row(i), p.row(z)) - log_q[z]).exp()).sum();
            acc += (num / den).ln();
        }
        -acc / b as f64
    }

    #[test]
    fn sampler_log_q() {
        let s = NegativeSamplerState::new((0..100).collect());
        assert!((s.uniform_log_q().unwrap() - 0.01f64.ln()).abs() < 1e-15);
        assert!(s.estimate_log_q(3).is_err());

        let mut s = NegativeSamplerState::new((0..10).collect());
        for _ in 0..5 {
            s.observe(1);
        }
        for _ in 0..45 {
            s.observe(2);
        }
        assert!((estimate_log_q(&s, 1).unwrap() - 0.1f64.ln()).abs() < 1e-15);
        assert!((s.estimate_log_q(7).unwrap() - (1.0f64 / 50.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn in_batch_small_cases() {
        let q = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let out = loss_in_batch(&q, &q, &[0], &[0.3], 1.0).unwrap();
        assert!(out.loss.abs() < 1e-15);

        // symmetric logits: every query scores both candidates equally
        let q = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let p = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let out = loss_in_batch(&q, &p, &[0, 1], &[-1.0, -1.0], 1.0).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);

        assert!(loss_in_batch(&DenseMatrix::zeros(0, 2), &DenseMatrix::zeros(0, 2), &[], &[], 1.0).is_err());
    }

    #[test]
    fn in_batch_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_unit_rows(4, 5, &mut rng);
        let p = random_unit_rows(4, 5, &mut rng);
        let lq = vec![-4.0f64.ln(); 4];
        let out = loss_in_batch(&q, &p, &[0, 1, 2, 3], &lq, 1.0).unwrap();
        assert!((out.loss - in_batch_direct(&q, &p, &lq)).abs() < 1e-10);
        let lq = vec![-1.2, -0.3, -2.5, -0.9];
        let out = loss_in_batch(&q, &p, &[0, 1, 2, 3], &lq, 1.0).unwrap();
        assert!((out.loss - in_batch_direct(&q, &p, &lq)).abs() < 1e-10);
    }

    #[test]
    fn in_batch_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_unit_rows(5, 4, &mut rng);
        let p = random_unit_rows(5, 4, &mut rng);
        let ids = [0, 1, 2, 1, 3];
        let lq = vec![-1.0, -0.5, -2.0, -0.5, -1.5];
        let out = loss_in_batch(&q, &p, &ids, &lq, 0.7).unwrap();
        let err = finite_diff_check(
            |x| {
                loss_in_batch(&DenseMatrix::from_vec(5, 4, x.to_vec()).unwrap(), &p, &ids, &lq, 0.7)
                    .unwrap()
                    .loss
            },
            &q.data,
            &out.d_query.data,
            1e-5,
        );
        assert!(err < 1e-6, "dq {err}");
        let err = finite_diff_check(
            |x| {
                loss_in_batch(&q, &DenseMatrix::from_vec(5, 4, x.to_vec()).unwrap(), &ids, &lq, 0.7)
                    .unwrap()
                    .loss
            },
            &p.data,
            &out.d_pos.data,
            1e-5,
        );
        assert!(err < 1e-6, "dp {err}");
    }

    #[test]
    fn random_negatives_zero_and_full_catalog() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_unit_rows(3, 4, &mut rng);
        let p = random_unit_rows(3, 4, &mut rng);
        let none = loss_random_negatives(&q, &p, &[0, 1, 2], &DenseMatrix::zeros(0, 4), &[], &[0.0; 3], &[], 1.0).unwrap();
        assert_eq!(none.loss, 0.0);

        // catalog of 20; positives are catalog members; sample = whole catalog
        let catalog = random_unit_rows(20, 4, &mut rng);
        let pos_ids = [3u32, 11, 19];
        let pos = gather(&catalog, &[3, 11, 19]);
        let exact_q = -(20f64).ln();
        let ids: Vec<u32> = (0..20).collect();
        let out = loss_random_negatives(&q, &pos, &pos_ids, &catalog, &ids, &[exact_q; 3], &[exact_q; 20], 1.0).unwrap();
        let mut exact = 0.0;
        for (i, &y) in pos_ids.iter().enumerate() {
            let logits: Vec<f64> = (0..20).map(|c| dot(q.row(i), catalog.row(c))).collect();
            let m = logits.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            exact += -(logits[y as usize] - m - z.ln());
        }
        exact /= 3.0;
        assert!((out.loss - exact).abs() < 1e-10);
    }

    #[test]
    fn log_q_correction_discounts_popular_negatives() {
        let q = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let neg = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        // same raw logit, the popular one (log q = -0.5) vs rare (log q = -5)
        let out = loss_random_negatives(&q, &p, &[0], &neg, &[1, 2], &[-1.0], &[-0.5, -5.0], 1.0).unwrap();
        let popular = out.d_neg.row(0)[0].abs();
        let rare = out.d_neg.row(1)[0].abs();
        assert!(popular < rare);
    }

    #[test]
    fn random_negative_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_unit_rows(3, 4, &mut rng);
        let p = random_unit_rows(3, 4, &mut rng);
        let n = random_unit_rows(4, 4, &mut rng);
        let pos_ids = [0u32, 1, 2];
        let neg_ids = [5u32, 1, 7, 8];
        let lqp = [-1.0, -2.0, -0.5];
        let lqn = [-3.0; 4];
        let out = loss_random_negatives(&q, &p, &pos_ids, &n, &neg_ids, &lqp, &lqn, 1.0).unwrap();
        let f = |qq: &DenseMatrix, pp: &DenseMatrix, nn: &DenseMatrix| {
            loss_random_negatives(qq, pp, &pos_ids, nn, &neg_ids, &lqp, &lqn, 1.0).unwrap().loss
        };
        let m = |x: &[f64], r| DenseMatrix::from_vec(r, 4, x.to_vec()).unwrap();
        assert!(finite_diff_check(|x| f(&m(x, 3), &p, &n), &q.data, &out.d_query.data, 1e-5) < 1e-6);
        assert!(finite_diff_check(|x| f(&q, &m(x, 3), &n), &p.data, &out.d_pos.data, 1e-5) < 1e-6);
        assert!(finite_diff_check(|x| f(&q, &p, &m(x, 4)), &n.data, &out.d_neg.data, 1e-5) < 1e-6);
    }

    proptest! {
        #[test]
        fn in_batch_is_permutation_invariant(seed in 0u64..500, shift in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_unit_rows(5, 3, &mut rng);
            let p = random_unit_rows(5, 3, &mut rng);
            let lq: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..-0.1)).collect();
            let ids: Vec<u32> = (0..5).collect();
            let base = loss_in_batch(&q, &p, &ids, &lq, 1.0).unwrap().loss;
            let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
            let lq2: Vec<f64> = perm.iter().map(|&i| lq[i]).collect();
            let ids2: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
            let permuted = loss_in_batch(&gather(&q, &perm), &gather(&p, &perm), &ids2, &lq2, 1.0).unwrap().loss;
            prop_assert!((base - permuted).abs() < 1e-12);
        }
    }
}
