//! Document expansion: board-title selection, incrementally aggregated
//! engaged queries, and pluggable synthetic captions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::{Board, CaptionRecord, TrainingPair};
use crate::error::{Error, Result};
use crate::tokenizer::normalize_words;
use crate::types::{Action, EngagedQuery, EntityDocument, EntityKind, MAX_BOARD_TITLES, MAX_ENGAGED_QUERIES};

#[derive(Debug, Clone, PartialEq)]
pub struct BoardTitleCandidate {
    /// Normalized title (lowercased words joined by single spaces).
    pub title: String,
    /// Boards containing the entity under this title.
    pub occurrence_count: u64,
}

/// Fraction of boards whose title contains each word.
pub fn word_prevalence(boards: &[Board]) -> HashMap<String, f64> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for b in boards {
        let mut words = normalize_words(&b.title);
        words.sort();
        words.dedup();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
    }
    let n = boards.len().max(1) as f64;
    counts.into_iter().map(|(w, c)| (w, c as f64 / n)).collect()
}

pub fn board_title_score(candidate: &BoardTitleCandidate, prevalence: &HashMap<String, f64>) -> f64 {
    let words = normalize_words(&candidate.title);
    if words.is_empty() {
        return 0.0;
    }
    let mean = words.iter().map(|w| prevalence.get(w).copied().unwrap_or(0.0)).sum::<f64>() / words.len() as f64;
    candidate.occurrence_count as f64 * mean
}

fn word_count(title: &str) -> usize {
    title.split_whitespace().count()
}

/// Lowest score first, then more words, then longer titles, then title text.
pub fn compare_board_titles(a: (&str, f64), b: (&str, f64)) -> Ordering {
    a.1.total_cmp(&b.1)
        .then_with(|| word_count(b.0).cmp(&word_count(a.0)))
        .then_with(|| b.0.chars().count().cmp(&a.0.chars().count()))
        .then_with(|| a.0.cmp(b.0))
}

pub fn select_board_titles(candidates: &[BoardTitleCandidate], prevalence: &HashMap<String, f64>) -> Vec<String> {
    let mut scored: Vec<(&str, f64)> = candidates
        .iter()
        .map(|c| (c.title.as_str(), board_title_score(c, prevalence)))
        .collect();
    scored.sort_by(|a, b| compare_board_titles(*a, *b));
    scored.into_iter().take(MAX_BOARD_TITLES).map(|(t, _)| t.to_string()).collect()
}

/// Candidates per entity: each distinct normalized board title with the
/// number of boards holding the entity under it.
pub fn board_title_candidates(boards: &[Board]) -> HashMap<String, Vec<BoardTitleCandidate>> {
    let mut counts: HashMap<String, BTreeMap<String, u64>> = HashMap::new();
    for b in boards {
        let title = normalize_words(&b.title).join(" ");
        if title.is_empty() {
            continue;
        }
        let mut members: Vec<&String> = b.pins.iter().collect();
        members.sort();
        members.dedup();
        for id in members {
            *counts.entry(id.clone()).or_default().entry(title.clone()).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(id, titles)| {
            let c = titles
                .into_iter()
                .map(|(title, occurrence_count)| BoardTitleCandidate { title, occurrence_count })
                .collect();
            (id, c)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionWeights {
    pub save: f64,
    pub longclick: f64,
    pub click: f64,
    pub add_to_cart: f64,
    pub checkout: f64,
}

impl Default for ActionWeights {
    fn default() -> Self {
        Self {
            save: 2.0,
            longclick: 2.0,
            click: 1.0,
            add_to_cart: 3.0,
            checkout: 5.0,
        }
    }
}

impl ActionWeights {
    pub fn weight(&self, action: Action) -> f64 {
        match action {
            Action::Save => self.save,
            Action::Longclick => self.longclick,
            Action::Click => self.click,
            Action::AddToCart => self.add_to_cart,
            Action::Checkout => self.checkout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if Action::ALL.iter().any(|&a| !(self.weight(a) >= 0.0 && self.weight(a).is_finite())) {
            return Err(Error::Config("action weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

pub fn engaged_query_score(record: &EngagedQuery, weights: &ActionWeights) -> f64 {
    record.counts.iter().map(|(a, c)| weights.weight(*a) * *c as f64).sum()
}

/// Unions records by query with counts summed, ranks by score (descending,
/// then query ascending) and keeps the first `limit` when one is given.
pub fn merge_engaged_queries_with_limit(
    existing: &[EngagedQuery],
    window: &[EngagedQuery],
    weights: &ActionWeights,
    limit: Option<usize>,
) -> Vec<EngagedQuery> {
    let mut merged: BTreeMap<&str, BTreeMap<Action, u64>> = BTreeMap::new();
    for r in existing.iter().chain(window) {
        let counts = merged.entry(&r.query).or_default();
        for (a, c) in &r.counts {
            *counts.entry(*a).or_default() += c;
        }
    }
    let mut out: Vec<(f64, EngagedQuery)> = merged
        .into_iter()
        .map(|(q, counts)| {
            let r = EngagedQuery {
                query: q.to_string(),
                counts,
            };
            (engaged_query_score(&r, weights), r)
        })
        .collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.query.cmp(&b.1.query)));
    if let Some(limit) = limit {
        out.truncate(limit);
    }
    out.into_iter().map(|(_, r)| r).collect()
}

pub fn merge_engaged_queries(existing: &[EngagedQuery], window: &[EngagedQuery], weights: &ActionWeights) -> Vec<EngagedQuery> {
    merge_engaged_queries_with_limit(existing, window, weights, Some(MAX_ENGAGED_QUERIES))
}

/// Per-entity raw engaged-query records of one window of pairs.
pub fn aggregate_window(pairs: &[&TrainingPair]) -> BTreeMap<String, Vec<EngagedQuery>> {
    let mut acc: BTreeMap<&str, BTreeMap<&str, BTreeMap<Action, u64>>> = BTreeMap::new();
    for p in pairs {
        *acc.entry(&p.entity_id)
            .or_default()
            .entry(&p.query)
            .or_default()
            .entry(p.action)
            .or_default() += 1;
    }
    acc.into_iter()
        .map(|(id, qs)| {
            let records = qs
                .into_iter()
                .map(|(q, counts)| EngagedQuery {
                    query: q.to_string(),
                    counts,
                })
                .collect();
            (id.to_string(), records)
        })
        .collect()
}

/// Folds pairs window by window (`cadence_days` per window), merging each
/// window into the running top list the way a periodic job would.
pub fn engaged_queries_incremental(
    pairs: &[TrainingPair],
    cadence_days: u32,
    weights: &ActionWeights,
) -> Result<BTreeMap<String, Vec<EngagedQuery>>> {
    if cadence_days == 0 {
        return Err(Error::Config("engaged-query cadence must be >= 1 day".into()));
    }
    let mut windows: BTreeMap<u32, Vec<&TrainingPair>> = BTreeMap::new();
    for p in pairs {
        windows.entry(p.day / cadence_days).or_default().push(p);
    }
    let mut state: BTreeMap<String, Vec<EngagedQuery>> = BTreeMap::new();
    for window in windows.values() {
        for (id, records) in aggregate_window(window) {
            let entry = state.entry(id).or_default();
            *entry = merge_engaged_queries(entry, &records, weights);
        }
    }
    Ok(state)
}

pub trait CaptionProvider {
    fn caption(&self, doc: &EntityDocument) -> Result<String>;
}

/// Looks captions up by entity id from a fixture table.
#[derive(Debug, Clone, Default)]
pub struct FixtureCaptionProvider {
    captions: HashMap<String, String>,
}

impl FixtureCaptionProvider {
    pub fn new(records: &[CaptionRecord]) -> Self {
        Self {
            captions: records.iter().map(|r| (r.entity_id.clone(), r.caption.clone())).collect(),
        }
    }
}

impl CaptionProvider for FixtureCaptionProvider {
    fn caption(&self, doc: &EntityDocument) -> Result<String> {
        self.captions
            .get(&doc.entity_id)
            .cloned()
            .ok_or_else(|| Error::UnknownId(format!("no fixture caption for {}", doc.entity_id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionPolicy {
    /// Caption only documents without a title or description.
    #[default]
    FillMissing,
    Always,
}

/// Returns whether the document ended up with a caption. Provider failures
/// leave the caption empty.
pub fn apply_caption(doc: &mut EntityDocument, provider: &dyn CaptionProvider, policy: CaptionPolicy) -> bool {
    if policy == CaptionPolicy::FillMissing && doc.has_native_text() {
        return false;
    }
    match provider.caption(doc) {
        Ok(c) => {
            doc.synthetic_caption = c;
            !doc.synthetic_caption.is_empty()
        }
        Err(e) => {
            log::warn!("caption provider failed for {}: {e}", doc.entity_id);
            doc.synthetic_caption.clear();
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnrichmentConfig {
    pub caption_policy: CaptionPolicy,
    pub cadence_days: u32,
    pub action_weights: ActionWeights,
}

impl Default for EnrichmentConfig {
    fn default() -> Self {
        Self {
            caption_policy: CaptionPolicy::FillMissing,
            cadence_days: 7,
            action_weights: ActionWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentReport {
    pub documents: usize,
    /// Documents with a title, description or caption.
    pub text_coverage: f64,
    pub caption_coverage: f64,
    pub board_title_coverage: f64,
    pub engaged_query_coverage: f64,
    pub caption_failures: usize,
}

/// Fills captions, board titles and engaged queries for pin and product
/// documents. `pairs` should be training-window pairs only.
pub fn enrich_documents(
    docs: &[EntityDocument],
    boards: &[Board],
    pairs: &[TrainingPair],
    provider: &dyn CaptionProvider,
    config: &EnrichmentConfig,
) -> Result<(Vec<EntityDocument>, EnrichmentReport)> {
    config.action_weights.validate()?;
    let prevalence = word_prevalence(boards);
    let candidates = board_title_candidates(boards);
    let engaged = engaged_queries_incremental(pairs, config.cadence_days, &config.action_weights)?;
    let mut out = Vec::with_capacity(docs.len());
    let (mut text, mut captioned, mut with_boards, mut with_queries, mut failures) = (0, 0, 0, 0, 0);
    for doc in docs {
        let mut d = doc.clone();
        if d.kind != EntityKind::Query {
            let wants_caption = config.caption_policy == CaptionPolicy::Always || !d.has_native_text();
            if !apply_caption(&mut d, provider, config.caption_policy) && wants_caption {
                failures += 1;
            }
            d.board_titles = candidates
                .get(&d.entity_id)
                .map(|c| select_board_titles(c, &prevalence))
                .unwrap_or_default();
            d.engaged_queries = engaged.get(&d.entity_id).cloned().unwrap_or_default();
        }
        text += usize::from(d.has_native_text() || !d.synthetic_caption.is_empty());
        captioned += usize::from(!d.synthetic_caption.is_empty());
        with_boards += usize::from(!d.board_titles.is_empty());
        with_queries += usize::from(!d.engaged_queries.is_empty());
        d.validate()?;
        out.push(d);
    }
    let n = docs.len().max(1) as f64;
    let report = EnrichmentReport {
        documents: docs.len(),
        text_coverage: text as f64 / n,
        caption_coverage: captioned as f64 / n,
        board_title_coverage: with_boards as f64 / n,
        engaged_query_coverage: with_queries as f64 / n,
        caption_failures: failures,
    };
    Ok((out, report))
}
