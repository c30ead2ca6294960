//! Engagement pairs: per-entity dedup caps, temporal train/eval separation,
//! and a seeded topic-structured synthetic world standing in for real logs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::math::l2_normalize;
use crate::rng::substream;
use crate::types::{Action, EntityDocument, EntityKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    QueryPin,
    QueryProduct,
    QueryQuery,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::QueryPin, DatasetKind::QueryProduct, DatasetKind::QueryQuery];

    pub fn entity_kind(self) -> EntityKind {
        match self {
            DatasetKind::QueryPin => EntityKind::Pin,
            DatasetKind::QueryProduct => EntityKind::Product,
            DatasetKind::QueryQuery => EntityKind::Query,
        }
    }

    pub fn for_entity(kind: EntityKind) -> Self {
        match kind {
            EntityKind::Pin => DatasetKind::QueryPin,
            EntityKind::Product => DatasetKind::QueryProduct,
            EntityKind::Query => DatasetKind::QueryQuery,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::QueryPin => "query_pin",
            DatasetKind::QueryProduct => "query_product",
            DatasetKind::QueryQuery => "query_query",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dataset {s:?}")))
    }
}

/// One engagement: `query` text led to `action` on `entity_id` on `day`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPair {
    pub query: String,
    pub entity_id: String,
    pub action: Action,
    pub day: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub kind: DatasetKind,
    pub pairs: Vec<TrainingPair>,
    pub cap: usize,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_multiplicity(&self) -> usize {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for p in &self.pairs {
            *counts.entry(&p.entity_id).or_default() += 1;
        }
        counts.values().copied().max().unwrap_or(0)
    }
}

/// Caps every entity at `cap` pairs by keeping a seeded uniform sample of its
/// pairs; kept pairs stay in input order.
pub fn apply_dedup_cap(kind: DatasetKind, pairs: Vec<TrainingPair>, cap: usize, seed: u64) -> Result<PairDataset> {
    if cap < 1 {
        return Err(Error::invalid("dedup cap must be >= 1"));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(&p.entity_id).or_default().push(i);
    }
    let mut keep = vec![true; pairs.len()];
    for (entity, idx) in &groups {
        if idx.len() <= cap {
            continue;
        }
        let mut rng = substream(seed, &format!("dedup/{entity}"));
        let chosen: HashSet<usize> = rand::seq::index::sample(&mut rng, idx.len(), cap).into_iter().collect();
        for (j, &i) in idx.iter().enumerate() {
            keep[i] = chosen.contains(&j);
        }
    }
    let pairs = pairs.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect();
    Ok(PairDataset { kind, pairs, cap })
}

/// `train` = days `<= train_end`; `eval` = days in
/// `(train_end + gap, train_end + gap + eval_days]`. The gap is dropped.
pub fn temporal_split(
    pairs: &[TrainingPair],
    train_end: i64,
    gap_days: i64,
    eval_days: i64,
) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    if gap_days < 0 {
        return Err(Error::invalid("gap_days must be >= 0"));
    }
    if eval_days < 0 {
        return Err(Error::invalid("eval_days must be >= 0"));
    }
    let eval_start = train_end + gap_days;
    let eval_end = eval_start + eval_days;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for p in pairs {
        let d = p.day as i64;
        if d <= train_end {
            train.push(p.clone());
        } else if d > eval_start && d <= eval_end {
            eval.push(p.clone());
        }
    }
    Ok((train, eval))
}

/// Looks up the dataset each pair belongs to from its entity id and checks
/// the action is valid for that entity kind.
pub fn split_by_kind(pairs: &[TrainingPair], kinds: &HashMap<String, EntityKind>) -> Result<BTreeMap<DatasetKind, Vec<TrainingPair>>> {
    let mut out: BTreeMap<DatasetKind, Vec<TrainingPair>> = BTreeMap::new();
    for p in pairs {
        if p.query.trim().is_empty() {
            return Err(Error::invalid(format!("pair for {} has an empty query", p.entity_id)));
        }
        let kind = *kinds.get(&p.entity_id).ok_or_else(|| Error::UnknownId(p.entity_id.clone()))?;
        if !p.action.valid_for(kind) {
            return Err(Error::invalid(format!("action {} not valid for {kind} {}", p.action, p.entity_id)));
        }
        out.entry(DatasetKind::for_entity(kind)).or_default().push(p.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DedupCaps {
    pub pin: usize,
    pub product: usize,
    pub query: usize,
}

impl Default for DedupCaps {
    fn default() -> Self {
        Self {
            pin: 50,
            product: 200,
            query: 50,
        }
    }
}

impl DedupCaps {
    pub fn for_kind(&self, kind: DatasetKind) -> usize {
        match kind {
            DatasetKind::QueryPin => self.pin,
            DatasetKind::QueryProduct => self.product,
            DatasetKind::QueryQuery => self.query,
        }
    }
}

/// Splits pairs into per-kind datasets and applies each kind's cap.
pub fn build_datasets(
    pairs: &[TrainingPair],
    kinds: &HashMap<String, EntityKind>,
    caps: &DedupCaps,
    seed: u64,
) -> Result<BTreeMap<DatasetKind, PairDataset>> {
    split_by_kind(pairs, kinds)?
        .into_iter()
        .map(|(kind, p)| Ok((kind, apply_dedup_cap(kind, p, caps.for_kind(kind), seed)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    pub locale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Board {
    pub board_id: String,
    pub title: String,
    pub pins: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub entity_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicRecord {
    pub id: String,
    pub topic: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub entities: usize,
    pub queries: usize,
    pub topics: usize,
    pub days: u32,
    /// Query-entity pairs generated per day.
    pub pairs_per_day: usize,
    /// Query-query pairs generated per day.
    pub query_pairs_per_day: usize,
    /// Probability an engagement stays inside the query's topic.
    pub within_topic: f64,
    pub pin_fraction: f64,
    /// Fraction of entities that keep a title and description.
    pub title_coverage: f64,
    /// Fraction of query-entity pairs that land on products.
    pub product_pair_share: f64,
    /// Fraction of product pairs that come from offsite conversions rather
    /// than onsite engagement.
    pub offsite_share: f64,
    pub words_per_topic: usize,
    pub filler_words: usize,
    pub feature_dim: usize,
    pub compat_dim: usize,
    pub feature_noise: f64,
    pub compat_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entities: 2000,
            queries: 500,
            topics: 20,
            days: 60,
            pairs_per_day: 400,
            query_pairs_per_day: 100,
            within_topic: 0.9,
            pin_fraction: 0.7,
            title_coverage: 0.71,
            product_pair_share: 0.3,
            offsite_share: 0.3,
            words_per_topic: 48,
            filler_words: 200,
            feature_dim: 16,
            compat_dim: 64,
            feature_noise: 0.35,
            compat_noise: 0.12,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities == 0 || self.queries == 0 || self.topics == 0 || self.days == 0 {
            return Err(Error::Config("world sizes must be positive".into()));
        }
        if self.words_per_topic < 4 || self.feature_dim == 0 || self.compat_dim == 0 {
            return Err(Error::Config("word pools and vector dims too small".into()));
        }
        for (name, v) in [
            ("within_topic", self.within_topic),
            ("pin_fraction", self.pin_fraction),
            ("title_coverage", self.title_coverage),
            ("product_pair_share", self.product_pair_share),
            ("offsite_share", self.offsite_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

pub const FEATURE_GRAPH: &str = "graph";
pub const FEATURE_VISUAL: &str = "visual";
pub const FEATURE_ITEM: &str = "item";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldHeader {
    seed: u64,
    config: SynthConfig,
}

/// Everything the synthetic generator emits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub config: SynthConfig,
    pub entities: Vec<EntityDocument>,
    pub queries: Vec<QueryRecord>,
    pub pairs: Vec<TrainingPair>,
    pub boards: Vec<Board>,
    pub captions: Vec<CaptionRecord>,
    /// Ground-truth topic of every entity and query.
    pub topics: Vec<TopicRecord>,
}

pub const WORLD_FILES: [&str; 7] = [
    "world.json",
    "entities.jsonl",
    "queries.jsonl",
    "pairs.jsonl",
    "boards.jsonl",
    "captions.jsonl",
    "topics.jsonl",
];

impl SyntheticWorld {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(
            dir.join("world.json"),
            &WorldHeader {
                seed: self.seed,
                config: self.config.clone(),
            },
        )?;
        write_jsonl(dir.join("entities.jsonl"), &self.entities)?;
        write_jsonl(dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(dir.join("pairs.jsonl"), &self.pairs)?;
        write_jsonl(dir.join("boards.jsonl"), &self.boards)?;
        write_jsonl(dir.join("captions.jsonl"), &self.captions)?;
        write_jsonl(dir.join("topics.jsonl"), &self.topics)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let header: WorldHeader = read_json(dir.join("world.json"))?;
        Ok(Self {
            seed: header.seed,
            config: header.config,
            entities: read_jsonl(dir.join("entities.jsonl"))?,
            queries: read_jsonl(dir.join("queries.jsonl"))?,
            pairs: read_jsonl(dir.join("pairs.jsonl"))?,
            boards: read_jsonl(dir.join("boards.jsonl"))?,
            captions: read_jsonl(dir.join("captions.jsonl"))?,
            topics: read_jsonl(dir.join("topics.jsonl"))?,
        })
    }

    /// Entity kinds for every id a pair can reference, including queries.
    pub fn kind_index(&self) -> HashMap<String, EntityKind> {
        let mut m: HashMap<String, EntityKind> = self.entities.iter().map(|d| (d.entity_id.clone(), d.kind)).collect();
        for q in &self.queries {
            m.insert(q.query_id.clone(), EntityKind::Query);
        }
        m
    }

    pub fn topic_index(&self) -> HashMap<String, u32> {
        self.topics.iter().map(|t| (t.id.clone(), t.topic)).collect()
    }

    pub fn query_text_index(&self) -> HashMap<String, String> {
        self.queries.iter().map(|q| (q.query_id.clone(), q.text.clone())).collect()
    }

    /// Whether the pair's query and entity share a ground-truth topic.
    pub fn is_within_topic(&self, pair: &TrainingPair, topics: &HashMap<String, u32>, query_ids: &HashMap<String, String>) -> bool {
        match (query_ids.get(&pair.query), topics.get(&pair.entity_id)) {
            (Some(qid), Some(et)) => topics.get(qid) == Some(et),
            _ => false,
        }
    }

    /// Query text -> query id.
    pub fn query_id_index(&self) -> HashMap<String, String> {
        self.queries.iter().map(|q| (q.text.clone(), q.query_id.clone())).collect()
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const LOCALES: [&str; 4] = ["us", "uk", "fr", "de"];
const GENERIC_BOARD_TITLES: [&str; 8] = [
    "favorites",
    "my stuff",
    "ideas",
    "inspiration",
    "saved",
    "cool things",
    "for later",
    "love these",
];

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, used: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if rng.gen_bool(0.5) {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        }
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream easy to reason about.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Rounded to 6 decimals so the JSON files stay compact and stable.
fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

struct Family {
    topic: usize,
    base: [String; 2],
    queries: Vec<usize>,
    extras: Vec<String>,
}

/// Seeded topic-structured world. Topics own word pools; queries come in
/// small families sharing two base words; each entity is anchored to 1-3
/// queries of one family and its title repeats their words. Engagement pairs
/// mostly follow the anchors, with `1 - within_topic` of them sent to a
/// random entity of another topic.
pub fn generate_synthetic_world(seed: u64, config: &SynthConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let t_count = config.topics;

    let mut rng = substream(seed, "synth/words");
    let mut used = HashSet::new();
    let topic_words: Vec<Vec<String>> = (0..t_count)
        .map(|_| pseudo_words(&mut rng, config.words_per_topic, &mut used))
        .collect();
    let filler = pseudo_words(&mut rng, config.filler_words.max(1), &mut used);

    // Queries and their families.
    let mut rng = substream(seed, "synth/queries");
    let mut per_topic: Vec<Vec<usize>> = vec![Vec::new(); t_count];
    for q in 0..config.queries {
        per_topic[q % t_count].push(q);
    }
    let mut families: Vec<Family> = Vec::new();
    let mut query_text = vec![String::new(); config.queries];
    let mut query_family = vec![0usize; config.queries];
    let mut topic_desc_words: Vec<Vec<String>> = Vec::with_capacity(t_count);
    for (t, qs) in per_topic.iter().enumerate() {
        let mut pool = topic_words[t].clone();
        pool.shuffle(&mut rng);
        let mut next = 0usize;
        let mut take = |rng: &mut ChaCha8Rng| -> String {
            if next < pool.len() / 2 + pool.len() / 4 {
                next += 1;
                pool[next - 1].clone()
            } else {
                pool[rng.gen_range(0..pool.len())].clone()
            }
        };
        let n_fam = qs.len().div_ceil(3).max(1);
        let first_family = families.len();
        for _ in 0..n_fam {
            let a = take(&mut rng);
            let mut b = take(&mut rng);
            while b == a {
                b = pool[rng.gen_range(0..pool.len())].clone();
            }
            families.push(Family {
                topic: t,
                base: [a, b],
                queries: Vec::new(),
                extras: Vec::new(),
            });
        }
        let mut seen: HashSet<String> = HashSet::new();
        for (i, &q) in qs.iter().enumerate() {
            let f = first_family + i % n_fam;
            let fam = &mut families[f];
            let mut text = format!("{} {}", fam.base[0], fam.base[1]);
            let mut extra = String::new();
            let mut tries = 0;
            while !seen.insert(text.clone()) || (!fam.queries.is_empty() && extra.is_empty()) {
                extra = take(&mut rng);
                text = if rng.gen_bool(0.5) {
                    format!("{} {} {}", fam.base[0], fam.base[1], extra)
                } else {
                    format!("{} {} {}", extra, fam.base[0], fam.base[1])
                };
                tries += 1;
                if tries > 1000 {
                    return Err(Error::Config("word pool too small for query count".into()));
                }
            }
            if !extra.is_empty() {
                fam.extras.push(extra);
            }
            fam.queries.push(q);
            query_text[q] = text;
            query_family[q] = f;
        }
        topic_desc_words.push(pool[pool.len() / 2 + pool.len() / 4..].to_vec());
    }
    let topic_of_query: Vec<usize> = query_family.iter().map(|&f| families[f].topic).collect();
    let queries: Vec<QueryRecord> = (0..config.queries)
        .map(|q| QueryRecord {
            query_id: format!("query-{:05}", q + 1),
            text: query_text[q].clone(),
            locale: LOCALES[rng.gen_range(0..LOCALES.len())].to_string(),
        })
        .collect();

    // Entities.
    let mut rng = substream(seed, "synth/entities");
    let n = config.entities;
    let n_products = ((1.0 - config.pin_fraction) * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let product_set: HashSet<usize> = order[..n_products].iter().copied().collect();
    order.shuffle(&mut rng);
    let n_blank = ((1.0 - config.title_coverage) * n as f64).round() as usize;
    let blank_set: HashSet<usize> = order[..n_blank].iter().copied().collect();

    let mut fam_by_topic: Vec<Vec<usize>> = vec![Vec::new(); t_count];
    for (f, fam) in families.iter().enumerate() {
        fam_by_topic[fam.topic].push(f);
    }
    let mut vrng = substream(seed, "synth/vectors");
    let feature_names: [&str; 3] = [FEATURE_GRAPH, FEATURE_VISUAL, FEATURE_ITEM];
    let topic_centroids: Vec<Vec<Vec<f64>>> = feature_names
        .iter()
        .map(|_| (0..t_count).map(|_| random_unit(&mut vrng, config.feature_dim)).collect())
        .collect();
    let family_centroids: Vec<Vec<Vec<f64>>> = feature_names
        .iter()
        .map(|_| families.iter().map(|_| random_unit(&mut vrng, config.feature_dim)).collect())
        .collect();
    let compat_topic: Vec<Vec<f64>> = (0..t_count).map(|_| random_unit(&mut vrng, config.compat_dim)).collect();
    let compat_family: Vec<Vec<f64>> = families.iter().map(|_| random_unit(&mut vrng, config.compat_dim)).collect();

    let mut entities = Vec::with_capacity(n);
    let mut entity_topic = vec![0usize; n];
    let mut entity_family = vec![0usize; n];
    let mut anchors: Vec<Vec<usize>> = vec![Vec::new(); n];
    let (mut pin_no, mut product_no) = (0usize, 0usize);
    let mut topic_slots: Vec<usize> = (0..n).map(|i| i % t_count).collect();
    topic_slots.shuffle(&mut rng);
    for i in 0..n {
        let kind = if product_set.contains(&i) {
            EntityKind::Product
        } else {
            EntityKind::Pin
        };
        let id = match kind {
            EntityKind::Product => {
                product_no += 1;
                format!("product-{product_no:05}")
            }
            _ => {
                pin_no += 1;
                format!("pin-{pin_no:05}")
            }
        };
        let t = topic_slots[i];
        let f = fam_by_topic[t][rng.gen_range(0..fam_by_topic[t].len())];
        entity_topic[i] = t;
        entity_family[i] = f;
        let fam = &families[f];
        let n_anchor = rng.gen_range(1..=3).min(fam.queries.len());
        anchors[i] = fam.queries.choose_multiple(&mut rng, n_anchor).copied().collect();
        anchors[i].sort_unstable();

        let mut doc = EntityDocument::new(id, kind);
        let desc_pool = &topic_desc_words[t];
        let pick_desc = |rng: &mut ChaCha8Rng| -> String {
            if desc_pool.is_empty() {
                topic_words[t][rng.gen_range(0..topic_words[t].len())].clone()
            } else {
                desc_pool[rng.gen_range(0..desc_pool.len())].clone()
            }
        };
        // Draw text even for blanked entities so blanking does not shift the stream.
        let mut title: Vec<String> = fam.base.to_vec();
        for &q in &anchors[i] {
            for w in query_text[q].split(' ') {
                if !title.iter().any(|t| t == w) {
                    title.push(w.to_string());
                }
            }
        }
        for _ in 0..rng.gen_range(1..=2) {
            title.push(pick_desc(&mut rng));
        }
        if rng.gen_bool(0.5) {
            title.push(filler[rng.gen_range(0..filler.len())].clone());
        }
        title.shuffle(&mut rng);
        let mut desc: Vec<String> = Vec::new();
        for _ in 0..rng.gen_range(2..=4) {
            desc.push(pick_desc(&mut rng));
        }
        for _ in 0..rng.gen_range(2..=4) {
            desc.push(filler[rng.gen_range(0..filler.len())].clone());
        }
        desc.shuffle(&mut rng);
        if !blank_set.contains(&i) {
            doc.title = title.join(" ");
            doc.description = desc.join(" ");
        }

        for (fi, name) in feature_names.iter().enumerate() {
            let v: Vec<f64> = (0..config.feature_dim)
                .map(|d| round6(topic_centroids[fi][t][d] + 0.5 * family_centroids[fi][f][d] + config.feature_noise * gaussian(&mut vrng)))
                .collect();
            if *name != FEATURE_ITEM || kind == EntityKind::Product {
                doc.continuous_features.insert(name.to_string(), v);
            }
        }
        let raw: Vec<f64> = (0..config.compat_dim)
            .map(|d| compat_topic[t][d] + 0.6 * compat_family[f][d] + config.compat_noise * gaussian(&mut vrng))
            .collect();
        let compat = l2_normalize(&raw)?.into_iter().map(round6).collect();
        doc.compat_embedding = Some(compat);
        entities.push(doc);
    }

    // Captions: one fixed per-topic caption, the stand-in for a captioning model.
    let mut rng = substream(seed, "synth/captions");
    let topic_caption: Vec<String> = (0..t_count)
        .map(|t| {
            let pool = if topic_desc_words[t].len() >= 3 {
                &topic_desc_words[t]
            } else {
                &topic_words[t]
            };
            let w: Vec<&String> = pool.choose_multiple(&mut rng, 3).collect();
            format!("a photo of {} {} with {}", w[0], w[1], w[w.len() - 1])
        })
        .collect();
    let captions: Vec<CaptionRecord> = entities
        .iter()
        .enumerate()
        .map(|(i, d)| CaptionRecord {
            entity_id: d.entity_id.clone(),
            caption: topic_caption[entity_topic[i]].clone(),
        })
        .collect();

    // Boards: family boards titled with family words, topic boards, and
    // generic catch-all boards that mix topics.
    let mut rng = substream(seed, "synth/boards");
    let mut family_members: Vec<Vec<usize>> = vec![Vec::new(); families.len()];
    let mut topic_members: Vec<Vec<usize>> = vec![Vec::new(); t_count];
    for i in 0..n {
        family_members[entity_family[i]].push(i);
        topic_members[entity_topic[i]].push(i);
    }
    let mut boards: Vec<Board> = Vec::new();
    let add_board = |title: String, members: BTreeSet<usize>, boards: &mut Vec<Board>| {
        if members.is_empty() {
            return;
        }
        boards.push(Board {
            board_id: format!("board-{:05}", boards.len() + 1),
            title,
            pins: members.into_iter().map(|i| entities[i].entity_id.clone()).collect(),
        });
    };
    for (f, fam) in families.iter().enumerate() {
        for _ in 0..rng.gen_range(1..=2) {
            let title = match rng.gen_range(0..3) {
                0 => format!("{} {}", fam.base[0], fam.base[1]),
                1 => format!("{} {}", fam.base[rng.gen_range(0..2)], filler[rng.gen_range(0..filler.len())]),
                _ => match fam.extras.choose(&mut rng) {
                    Some(x) => format!("{} {}", x, fam.base[1]),
                    None => fam.base[0].clone(),
                },
            };
            let mut members: BTreeSet<usize> = family_members[f].iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
            let topic = &topic_members[fam.topic];
            for _ in 0..rng.gen_range(0..=3) {
                members.insert(topic[rng.gen_range(0..topic.len())]);
            }
            add_board(title, members, &mut boards);
        }
    }
    for t in 0..t_count {
        for _ in 0..2 {
            let title = format!(
                "{} {}",
                topic_desc_words[t].choose(&mut rng).unwrap_or(&topic_words[t][0]),
                filler[rng.gen_range(0..filler.len())]
            );
            let topic = &topic_members[t];
            if topic.is_empty() {
                continue;
            }
            let members = (0..rng.gen_range(5..=15)).map(|_| topic[rng.gen_range(0..topic.len())]).collect();
            add_board(title, members, &mut boards);
        }
    }
    for _ in 0..t_count * 3 {
        let title = GENERIC_BOARD_TITLES[rng.gen_range(0..GENERIC_BOARD_TITLES.len())].to_string();
        let members = (0..rng.gen_range(5..=20)).map(|_| rng.gen_range(0..n)).collect();
        add_board(title, members, &mut boards);
    }

    // Engagement pairs.
    let mut rng = substream(seed, "synth/pairs");
    let mut anchored: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; config.queries];
    let mut by_topic_kind: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; t_count];
    let slot = |i: usize| usize::from(product_set.contains(&i));
    for i in 0..n {
        for &q in &anchors[i] {
            anchored[q][slot(i)].push(i);
        }
        by_topic_kind[entity_topic[i]][slot(i)].push(i);
    }
    let other_topic = |rng: &mut ChaCha8Rng, t: usize| -> usize {
        if t_count == 1 {
            t
        } else {
            (t + rng.gen_range(1..t_count)) % t_count
        }
    };
    let mut pairs = Vec::new();
    for day in 0..config.days {
        for _ in 0..config.pairs_per_day {
            let q = rng.gen_range(0..config.queries);
            let t = topic_of_query[q];
            let mut s = usize::from(rng.gen_bool(config.product_pair_share));
            let within = rng.gen_bool(config.within_topic);
            let fam_kind = |s: usize| -> Vec<usize> { family_members[query_family[q]].iter().copied().filter(|&i| slot(i) == s).collect() };
            let entity = if within {
                let mut cands = anchored[q][s].clone();
                if cands.is_empty() {
                    cands = fam_kind(s);
                }
                if cands.is_empty() {
                    cands = by_topic_kind[t][s].clone();
                }
                if cands.is_empty() {
                    s = 1 - s;
                    cands = anchored[q][s].clone();
                    if cands.is_empty() {
                        cands = fam_kind(s);
                    }
                    if cands.is_empty() {
                        cands = by_topic_kind[t][s].clone();
                    }
                }
                cands[rng.gen_range(0..cands.len())]
            } else {
                let mut u = other_topic(&mut rng, t);
                if by_topic_kind[u][s].is_empty() {
                    s = 1 - s;
                }
                let mut guard = 0;
                while by_topic_kind[u][s].is_empty() && guard < 4 * t_count {
                    u = other_topic(&mut rng, t);
                    guard += 1;
                }
                if by_topic_kind[u][s].is_empty() {
                    continue;
                }
                by_topic_kind[u][s][rng.gen_range(0..by_topic_kind[u][s].len())]
            };
            let action = if s == 1 {
                if rng.gen_bool(config.offsite_share) {
                    if rng.gen_bool(0.7) {
                        Action::AddToCart
                    } else {
                        Action::Checkout
                    }
                } else if rng.gen_bool(0.6) {
                    Action::Save
                } else {
                    Action::Longclick
                }
            } else if rng.gen_bool(0.6) {
                Action::Save
            } else {
                Action::Longclick
            };
            pairs.push(TrainingPair {
                query: query_text[q].clone(),
                entity_id: entities[entity].entity_id.clone(),
                action,
                day,
            });
        }
        for _ in 0..config.query_pairs_per_day {
            let q = rng.gen_range(0..config.queries);
            let t = topic_of_query[q];
            let within = rng.gen_bool(config.within_topic);
            let related: Vec<usize> = if within {
                let fam: Vec<usize> = families[query_family[q]].queries.iter().copied().filter(|&r| r != q).collect();
                if fam.is_empty() {
                    per_topic[t].iter().copied().filter(|&r| r != q).collect()
                } else {
                    fam
                }
            } else {
                per_topic[other_topic(&mut rng, t)].iter().copied().filter(|&r| r != q).collect()
            };
            if related.is_empty() {
                continue;
            }
            let r = related[rng.gen_range(0..related.len())];
            pairs.push(TrainingPair {
                query: query_text[q].clone(),
                entity_id: queries[r].query_id.clone(),
                action: Action::Click,
                day,
            });
        }
    }

    let mut topics: Vec<TopicRecord> = entities
        .iter()
        .enumerate()
        .map(|(i, d)| TopicRecord {
            id: d.entity_id.clone(),
            topic: entity_topic[i] as u32,
        })
        .collect();
    topics.extend(queries.iter().enumerate().map(|(q, r)| TopicRecord {
        id: r.query_id.clone(),
        topic: topic_of_query[q] as u32,
    }));

    Ok(SyntheticWorld {
        seed,
        config: config.clone(),
        entities,
        queries,
        pairs,
        boards,
        captions,
        topics,
    })
}
