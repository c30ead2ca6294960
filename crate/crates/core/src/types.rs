//! Records shared across the pipeline: entity documents, engagement actions
//! and the unit-norm embedding currency.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::l2_normalize;

pub const MAX_BOARD_TITLES: usize = 10;
pub const MAX_ENGAGED_QUERIES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Pin,
    Product,
    Query,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::Pin => "pin",
            EntityKind::Product => "product",
            EntityKind::Query => "query",
        })
    }
}

impl FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pin" => Ok(EntityKind::Pin),
            "product" => Ok(EntityKind::Product),
            "query" => Ok(EntityKind::Query),
            other => Err(Error::invalid(format!("unknown entity kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Save,
    Longclick,
    Click,
    AddToCart,
    Checkout,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Save, Action::Longclick, Action::Click, Action::AddToCart, Action::Checkout];

    pub fn name(self) -> &'static str {
        match self {
            Action::Save => "save",
            Action::Longclick => "longclick",
            Action::Click => "click",
            Action::AddToCart => "add_to_cart",
            Action::Checkout => "checkout",
        }
    }

    /// Whether the action can label a pair whose right-hand side has `kind`.
    pub fn valid_for(self, kind: EntityKind) -> bool {
        match kind {
            EntityKind::Pin => matches!(self, Action::Save | Action::Longclick),
            EntityKind::Product => !matches!(self, Action::Click),
            EntityKind::Query => matches!(self, Action::Click),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A query an entity was engaged under, with per-action engagement counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagedQuery {
    pub query: String,
    pub counts: BTreeMap<Action, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityDocument {
    pub entity_id: String,
    pub kind: EntityKind,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub synthetic_caption: String,
    #[serde(default)]
    pub board_titles: Vec<String>,
    #[serde(default)]
    pub engaged_queries: Vec<EngagedQuery>,
    /// Named fixed vectors standing in for pre-trained entity embeddings.
    /// Absent features are zero-filled by the encoder.
    #[serde(default)]
    pub continuous_features: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compat_embedding: Option<Vec<f64>>,
}

impl EntityDocument {
    pub fn new(entity_id: impl Into<String>, kind: EntityKind) -> Self {
        Self {
            entity_id: entity_id.into(),
            kind,
            title: String::new(),
            description: String::new(),
            synthetic_caption: String::new(),
            board_titles: Vec::new(),
            engaged_queries: Vec::new(),
            continuous_features: BTreeMap::new(),
            compat_embedding: None,
        }
    }

    /// A query-kind document carries its text in `title`.
    pub fn query(entity_id: impl Into<String>, text: impl Into<String>) -> Self {
        let mut d = Self::new(entity_id, EntityKind::Query);
        d.title = text.into();
        d
    }

    pub fn has_native_text(&self) -> bool {
        !self.title.trim().is_empty() || !self.description.trim().is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entity_id.is_empty() {
            return Err(Error::invalid("entity document without id"));
        }
        if self.board_titles.len() > MAX_BOARD_TITLES {
            return Err(Error::invalid(format!(
                "{}: {} board titles exceeds {MAX_BOARD_TITLES}",
                self.entity_id,
                self.board_titles.len()
            )));
        }
        if self.engaged_queries.len() > MAX_ENGAGED_QUERIES {
            return Err(Error::invalid(format!(
                "{}: {} engaged queries exceeds {MAX_ENGAGED_QUERIES}",
                self.entity_id,
                self.engaged_queries.len()
            )));
        }
        for (name, v) in &self.continuous_features {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("{}: non-finite feature {name}", self.entity_id)));
            }
        }
        Ok(())
    }
}

/// A unit-L2-norm vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn from_raw(v: &[f64]) -> Result<Self> {
        l2_normalize(v).map(Self)
    }

    /// Wraps a vector already known to be unit norm.
    pub(crate) fn from_unit(v: Vec<f64>) -> Self {
        debug_assert!((crate::math::norm(&v) - 1.0).abs() < 1e-6);
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        crate::math::dot(&self.0, &other.0)
    }

    /// Storage precision used by published files and the serving cache.
    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}
