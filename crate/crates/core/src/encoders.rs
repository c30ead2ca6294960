//! The query tower, the unified pin/product tower and the frozen
//! compatibility pass-through. Both learned towers share the tokenizer and
//! (by default) one hash-embedding table, and end in an MLP followed by L2
//! normalization.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash_embedding::{HashEmbeddingGrads, HashEmbeddingTable, TokenBag, DEFAULT_SEEDS};
use crate::math::{l2_normalize_backward, norm, DenseMatrix, Mlp, MlpGrads, MlpSpec, MlpTape};
use crate::tokenizer::VocabularyBundle;
use crate::types::{EmbeddingVector, EntityDocument, EntityKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub dim: usize,
}

/// Which entity text fields feed the unified tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextFields {
    /// Title and description.
    pub native_text: bool,
    pub captions: bool,
    pub board_titles: bool,
    pub engaged_queries: bool,
}

impl Default for TextFields {
    fn default() -> Self {
        Self {
            native_text: true,
            captions: true,
            board_titles: true,
            engaged_queries: true,
        }
    }
}

impl TextFields {
    pub fn none() -> Self {
        Self {
            native_text: false,
            captions: false,
            board_titles: false,
            engaged_queries: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hash_table_size: usize,
    pub hash_dim: usize,
    /// Hidden widths of the unified tower MLP (output layer is `embed_dim`).
    pub entity_hidden: Vec<usize>,
    /// Hidden widths of the query tower MLP.
    pub query_hidden: Vec<usize>,
    pub share_hash_table: bool,
    pub text_fields: TextFields,
    pub features: Vec<FeatureSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hash_table_size: 4096,
            hash_dim: 64,
            entity_hidden: vec![128, 128],
            query_hidden: vec![64],
            share_hash_table: true,
            text_fields: TextFields::default(),
            features: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.features.iter().map(|f| f.dim).sum()
    }

    pub fn entity_mlp_spec(&self) -> MlpSpec {
        let mut dims = vec![self.hash_dim + self.feature_dim()];
        dims.extend(&self.entity_hidden);
        dims.push(self.embed_dim);
        MlpSpec::relu_stack(dims)
    }

    pub fn query_mlp_spec(&self) -> MlpSpec {
        let mut dims = vec![self.hash_dim];
        dims.extend(&self.query_hidden);
        dims.push(self.embed_dim);
        MlpSpec::relu_stack(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hash_dim == 0 || self.hash_table_size == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.entity_hidden.iter().chain(&self.query_hidden).any(|&d| d == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let mut names: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.features.len() {
            return Err(Error::Config("duplicate continuous feature name".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Query,
    Entity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Arc<VocabularyBundle>,
    pub query_table: HashEmbeddingTable,
    /// `None` when the entity tower shares `query_table`.
    pub entity_table: Option<HashEmbeddingTable>,
    pub query_mlp: Mlp,
    pub entity_mlp: Mlp,
}

/// Gradients for every trainable parameter of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub query_table: HashEmbeddingGrads,
    pub entity_table: Option<HashEmbeddingGrads>,
    pub query_mlp: MlpGrads,
    pub entity_mlp: MlpGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            query_table: HashEmbeddingGrads::zeros_like(&model.query_table),
            entity_table: model.entity_table.as_ref().map(HashEmbeddingGrads::zeros_like),
            query_mlp: MlpGrads::zeros_like(&model.query_mlp),
            entity_mlp: MlpGrads::zeros_like(&model.entity_mlp),
        }
    }

    /// Blocks in the same order as [`Model::param_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.query_table.table, &self.query_table.weights1, &self.query_table.weights2];
        if let Some(t) = &self.entity_table {
            out.extend([&t.table[..], &t.weights1[..], &t.weights2[..]]);
        }
        for m in [&self.query_mlp, &self.entity_mlp] {
            for (w, b) in m.weights.iter().zip(&m.biases) {
                out.push(&w.data);
                out.push(b);
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }
}

/// Activation record for a batched tower pass.
#[derive(Debug, Clone)]
pub struct TowerTape {
    tower: Tower,
    bags: Vec<TokenBag>,
    mlp: MlpTape,
    pre_norms: Vec<f64>,
    outputs: DenseMatrix,
}

impl TowerTape {
    pub fn outputs(&self) -> &DenseMatrix {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.rows == 0
    }
}

/// Prepared input of the unified tower: the token bag and the concatenated
/// (zero-filled) continuous features.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityInput {
    pub bag: TokenBag,
    pub features: Vec<f64>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, vocab: Arc<VocabularyBundle>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let query_table = HashEmbeddingTable::new(vocab.len(), config.hash_table_size, config.hash_dim, DEFAULT_SEEDS, rng)?;
        let entity_table = if config.share_hash_table {
            None
        } else {
            Some(HashEmbeddingTable::new(
                vocab.len(),
                config.hash_table_size,
                config.hash_dim,
                DEFAULT_SEEDS,
                rng,
            )?)
        };
        let query_mlp = Mlp::init(config.query_mlp_spec(), rng)?;
        let entity_mlp = Mlp::init(config.entity_mlp_spec(), rng)?;
        Ok(Self {
            config,
            vocab,
            query_table,
            entity_table,
            query_mlp,
            entity_mlp,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn table(&self, tower: Tower) -> &HashEmbeddingTable {
        match tower {
            Tower::Query => &self.query_table,
            Tower::Entity => self.entity_table.as_ref().unwrap_or(&self.query_table),
        }
    }

    fn mlp(&self, tower: Tower) -> &Mlp {
        match tower {
            Tower::Query => &self.query_mlp,
            Tower::Entity => &self.entity_mlp,
        }
    }

    pub fn query_bag(&self, text: &str) -> TokenBag {
        TokenBag::from_ids(&self.vocab.tokenize(text).ids)
    }

    /// Bag of tokens of every enabled text field. Each field (and each board
    /// title / engaged query) is tokenized on its own so bigrams never span
    /// two fields and list order cannot matter.
    pub fn entity_bag(&self, doc: &EntityDocument) -> TokenBag {
        let f = self.config.text_fields;
        let mut ids = Vec::new();
        let mut push = |text: &str| ids.extend(self.vocab.tokenize(text).ids);
        if f.native_text {
            push(&doc.title);
            push(&doc.description);
        }
        if f.captions {
            push(&doc.synthetic_caption);
        }
        if f.board_titles {
            for t in &doc.board_titles {
                push(t);
            }
        }
        if f.engaged_queries {
            for q in &doc.engaged_queries {
                push(&q.query);
            }
        }
        TokenBag::from_ids(&ids)
    }

    /// Continuous features in configured order; absent ones are zeros.
    pub fn entity_features(&self, doc: &EntityDocument) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.config.feature_dim());
        for spec in &self.config.features {
            match doc.continuous_features.get(&spec.name) {
                Some(v) if v.len() == spec.dim => out.extend_from_slice(v),
                Some(v) => {
                    return Err(Error::DimensionMismatch {
                        expected: spec.dim,
                        actual: v.len(),
                        context: "continuous feature",
                    })
                }
                None => out.extend(std::iter::repeat_n(0.0, spec.dim)),
            }
        }
        for name in doc.continuous_features.keys() {
            if !self.config.features.iter().any(|f| &f.name == name) {
                return Err(Error::invalid(format!("{}: unknown continuous feature {name:?}", doc.entity_id)));
            }
        }
        Ok(out)
    }

    pub fn entity_input(&self, doc: &EntityDocument) -> Result<EntityInput> {
        if doc.kind == EntityKind::Query {
            return Err(Error::invalid(format!("{} is a query, not a pin/product", doc.entity_id)));
        }
        Ok(EntityInput {
            bag: self.entity_bag(doc),
            features: self.entity_features(doc)?,
        })
    }

    /// Batched query tower. Fails if any query pools to the zero vector.
    pub fn forward_queries(&self, bags: &[&TokenBag]) -> Result<TowerTape> {
        let owned: Vec<TokenBag> = bags.iter().map(|b| (*b).clone()).collect();
        let empty: Vec<Vec<f64>> = vec![Vec::new(); owned.len()];
        self.forward_tower(Tower::Query, owned, &empty)
    }

    pub fn forward_entities(&self, inputs: &[&EntityInput]) -> Result<TowerTape> {
        let bags = inputs.iter().map(|i| i.bag.clone()).collect();
        let feats: Vec<Vec<f64>> = inputs.iter().map(|i| i.features.clone()).collect();
        self.forward_tower(Tower::Entity, bags, &feats)
    }

    fn forward_tower(&self, tower: Tower, bags: Vec<TokenBag>, features: &[Vec<f64>]) -> Result<TowerTape> {
        let table = self.table(tower);
        let mlp = self.mlp(tower);
        let hash_dim = table.dim();
        let in_dim = mlp.spec.input_dim();
        let mut x = DenseMatrix::zeros(bags.len(), in_dim);
        for (r, (bag, feat)) in bags.iter().zip(features).enumerate() {
            let row = x.row_mut(r);
            table.pool_bag_into(bag, &mut row[..hash_dim])?;
            if tower == Tower::Query && row[..hash_dim].iter().all(|&v| v == 0.0) {
                return Err(Error::UnencodableQuery(format!("row {r}: no in-vocabulary tokens")));
            }
            if feat.len() != in_dim - hash_dim {
                return Err(Error::DimensionMismatch {
                    expected: in_dim - hash_dim,
                    actual: feat.len(),
                    context: "tower features",
                });
            }
            row[hash_dim..].copy_from_slice(feat);
        }
        let (mut out, tape) = mlp.forward_batch(&x)?;
        let mut pre_norms = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("tower output"));
            }
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::DegenerateEmbedding);
            }
            row.iter_mut().for_each(|v| *v /= n);
            pre_norms.push(n);
        }
        Ok(TowerTape {
            tower,
            bags,
            mlp: tape,
            pre_norms,
            outputs: out,
        })
    }

    /// Accumulates parameter gradients given `d loss / d output` rows.
    pub fn backward_tower(&self, tape: &TowerTape, upstream: &DenseMatrix, grads: &mut ModelGrads) -> Result<()> {
        if upstream.rows != tape.outputs.rows || upstream.cols != tape.outputs.cols {
            return Err(Error::DimensionMismatch {
                expected: tape.outputs.rows * tape.outputs.cols,
                actual: upstream.rows * upstream.cols,
                context: "tower upstream gradient",
            });
        }
        let mut d_pre = DenseMatrix::zeros(upstream.rows, upstream.cols);
        for r in 0..upstream.rows {
            let g = l2_normalize_backward(tape.outputs.row(r), tape.pre_norms[r], upstream.row(r));
            d_pre.row_mut(r).copy_from_slice(&g);
        }
        let mlp = self.mlp(tape.tower);
        let (mlp_grads, dx) = mlp.backward_batch(&tape.mlp, &d_pre)?;
        match tape.tower {
            Tower::Query => grads.query_mlp.add_assign(&mlp_grads),
            Tower::Entity => grads.entity_mlp.add_assign(&mlp_grads),
        }
        let table = self.table(tape.tower);
        let table_grads = match (tape.tower, grads.entity_table.as_mut()) {
            (Tower::Entity, Some(g)) => g,
            _ => &mut grads.query_table,
        };
        let hash_dim = table.dim();
        for (r, bag) in tape.bags.iter().enumerate() {
            table.backward_bag(bag, &dx.row(r)[..hash_dim], table_grads);
        }
        Ok(())
    }

    pub fn encode_query(&self, text: &str) -> Result<EmbeddingVector> {
        let bag = self.query_bag(text);
        let tape = self.forward_queries(&[&bag]).map_err(|e| match e {
            Error::UnencodableQuery(_) => Error::UnencodableQuery(text.to_string()),
            other => other,
        })?;
        Ok(EmbeddingVector::from_unit(tape.outputs.row(0).to_vec()))
    }

    pub fn encode_entity(&self, doc: &EntityDocument) -> Result<EmbeddingVector> {
        doc.validate()?;
        let input = self.entity_input(doc)?;
        let tape = self.forward_entities(&[&input])?;
        Ok(EmbeddingVector::from_unit(tape.outputs.row(0).to_vec()))
    }

    /// Parameter blocks in a fixed order, matching [`ModelGrads::blocks`].
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.query_table.param_blocks_mut());
        if let Some(t) = self.entity_table.as_mut() {
            out.extend(t.param_blocks_mut());
        }
        out.extend(self.query_mlp.param_blocks_mut());
        out.extend(self.entity_mlp.param_blocks_mut());
        out
    }

    pub fn param_block_sizes(&mut self) -> Vec<usize> {
        self.param_blocks_mut().iter().map(|b| b.len()).collect()
    }

    pub fn flatten_params(&mut self) -> Vec<f64> {
        self.param_blocks_mut().iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for block in self.param_blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for block in self.param_blocks_mut() {
            for v in block.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// The frozen compatibility encoder: the pre-existing embedding, re-normalized.
pub fn encode_compat(doc: &EntityDocument) -> Result<EmbeddingVector> {
    let v = doc
        .compat_embedding
        .as_ref()
        .ok_or_else(|| Error::MissingCompat(doc.entity_id.clone()))?;
    EmbeddingVector::from_raw(v)
}
