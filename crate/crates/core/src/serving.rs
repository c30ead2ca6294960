//! Serving: a TTL+LRU query-embedding cache, a Zipf traffic simulator,
//! embedding publication, and a small length-prefixed JSON service.
//!
//! Time is always injected. The cache never reads a wall clock; the
//! simulator and the service advance a logical clock by one tick per request.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{HnswIndex, VectorSet};
use crate::config::CacheConfig;
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::types::EntityDocument;

pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(t: u64) -> Self {
        Self(AtomicU64::new(t))
    }

    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, dt: u64) {
        self.0.fetch_add(dt, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Returns 0, 1, 2, ... on successive reads.
#[derive(Debug, Default)]
pub struct TickClock(AtomicU64);

impl Clock for TickClock {
    fn now(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    /// Entries dropped to make room, least recently used first.
    pub evictions: u64,
    /// Entries found stale on lookup and replaced.
    pub expirations: u64,
    pub inserts: u64,
    pub size: usize,
}

impl CacheStats {
    pub fn requests(&self) -> u64 {
        self.hits + self.misses
    }
}

#[derive(Debug, Clone)]
struct Entry<V> {
    value: V,
    inserted: u64,
    last_used: u64,
}

/// Keyed by query string. An entry is fresh while `now - inserted <= ttl`.
/// At capacity the least recently used entry is evicted.
#[derive(Debug, Clone)]
pub struct TtlCache<V> {
    capacity: usize,
    ttl: u64,
    entries: HashMap<String, Entry<V>>,
    /// Use sequence number → key; the first entry is the LRU victim.
    order: BTreeMap<u64, String>,
    seq: u64,
    stats: CacheStats,
}

impl<V: Clone> TtlCache<V> {
    pub fn new(capacity: usize, ttl: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("cache capacity must be positive"));
        }
        Ok(Self {
            capacity,
            ttl,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            seq: 0,
            stats: CacheStats::default(),
        })
    }

    pub fn from_config(config: &CacheConfig) -> Result<Self> {
        Self::new(config.capacity, config.ttl)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            size: self.entries.len(),
            ..self.stats
        }
    }

    fn fresh(&self, e: &Entry<V>, now: u64) -> bool {
        now.saturating_sub(e.inserted) <= self.ttl
    }

    fn touch(&mut self, key: &str) {
        self.seq += 1;
        let e = self.entries.get_mut(key).expect("touched key exists");
        self.order.remove(&e.last_used);
        e.last_used = self.seq;
        self.order.insert(self.seq, key.to_string());
    }

    /// Looks up a fresh entry and records a hit. Misses are recorded by
    /// [`TtlCache::insert_miss`] once the value is computed.
    pub fn get_fresh(&mut self, key: &str, now: u64) -> Option<V> {
        let value = match self.entries.get(key) {
            Some(e) if self.fresh(e, now) => e.value.clone(),
            _ => return None,
        };
        self.stats.hits += 1;
        self.touch(key);
        Some(value)
    }

    /// Records a miss and stores `value` with timestamp `now`.
    pub fn insert_miss(&mut self, key: &str, value: V, now: u64) {
        self.stats.misses += 1;
        if let Some(old) = self.entries.remove(key) {
            self.order.remove(&old.last_used);
            if !self.fresh(&old, now) {
                self.stats.expirations += 1;
            }
        }
        if self.entries.len() >= self.capacity {
            if let Some((_, victim)) = self.order.pop_first() {
                self.entries.remove(&victim);
                self.stats.evictions += 1;
            }
        }
        self.seq += 1;
        self.entries.insert(
            key.to_string(),
            Entry {
                value,
                inserted: now,
                last_used: self.seq,
            },
        );
        self.order.insert(self.seq, key.to_string());
        self.stats.inserts += 1;
    }

    pub fn contains_fresh(&self, key: &str, now: u64) -> bool {
        self.entries.get(key).is_some_and(|e| self.fresh(e, now))
    }
}

/// Returns the cached value when fresh, else computes and inserts it.
///
/// The lock is released while `compute` runs, so concurrent misses on one
/// key may each compute; `compute` must be deterministic, which makes the
/// duplicate inserts identical. A failed compute leaves the cache and its
/// counters untouched.
pub fn cache_get_or_compute<V, F>(cache: &Mutex<TtlCache<V>>, key: &str, now: u64, compute: F) -> Result<(V, bool)>
where
    V: Clone,
    F: FnOnce(&str) -> Result<V>,
{
    if let Some(v) = cache.lock().expect("cache lock").get_fresh(key, now) {
        return Ok((v, true));
    }
    let value = compute(key)?;
    cache.lock().expect("cache lock").insert_miss(key, value.clone(), now);
    Ok((value, false))
}

/// Inverse-CDF sampler for Zipf(s) over ranks `0..n` (rank 0 most popular).
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, s: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("zipf universe"));
        }
        if !s.is_finite() || s < 0.0 {
            return Err(Error::invalid(format!("zipf exponent must be finite and >= 0, got {s}")));
        }
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = (1..=n)
            .map(|r| {
                acc += (r as f64).powf(-s);
                acc
            })
            .collect();
        for c in &mut cumulative {
            *c /= acc;
        }
        Ok(Self { cumulative })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

/// Expected hit rate of `n` i.i.d. draws through a cache that never evicts
/// or expires: every distinct key misses exactly once.
pub fn analytic_hit_rate(probabilities: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let distinct: f64 = probabilities.iter().map(|&p| 1.0 - (1.0 - p).powf(n as f64)).sum();
    1.0 - distinct / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub hit_us: f64,
    pub miss_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub requests: usize,
    pub universe: usize,
    pub zipf_s: f64,
    pub hit_rate: f64,
    /// Fraction of requests that reached the embedding backend.
    pub backend_request_fraction: f64,
    /// Prediction for an unbounded, non-expiring cache.
    pub analytic_hit_rate: f64,
    pub mean_latency_us: f64,
    pub p50_latency_us: f64,
    pub p90_latency_us: f64,
    pub p99_latency_us: f64,
    /// (latency in microseconds, request count), ascending.
    pub latency_histogram: Vec<(f64, usize)>,
    pub cache: CacheStats,
}

/// Replays `n_requests` Zipf draws over `universe` (ranked by popularity)
/// through `cache`, one clock tick per request.
pub fn simulate_load<V, F>(
    cache: &Mutex<TtlCache<V>>,
    universe: &[String],
    zipf_s: f64,
    n_requests: usize,
    seed: u64,
    latency: LatencyModel,
    mut compute: F,
) -> Result<LoadReport>
where
    V: Clone,
    F: FnMut(&str) -> Result<V>,
{
    let sampler = ZipfSampler::new(universe.len(), zipf_s)?;
    let mut rng = substream(seed, "simulate/zipf");
    let clock = TickClock::default();
    let before = cache.lock().expect("cache lock").stats();
    let mut hits = 0usize;
    for _ in 0..n_requests {
        let key = &universe[sampler.sample(&mut rng)];
        let (_, hit) = cache_get_or_compute(cache, key, clock.now(), &mut compute)?;
        hits += hit as usize;
    }
    let misses = n_requests - hits;
    let mut latencies = vec![(latency.hit_us, hits), (latency.miss_us, misses)];
    latencies.sort_by(|a, b| a.0.total_cmp(&b.0));
    let quantile = |q: f64| -> f64 {
        let target = (q * n_requests as f64).ceil().max(1.0) as usize;
        let mut seen = 0;
        for &(l, c) in &latencies {
            seen += c;
            if seen >= target {
                return l;
            }
        }
        0.0
    };
    let histogram: Vec<(f64, usize)> = latencies.iter().copied().filter(|&(_, c)| c > 0).collect();
    let denom = n_requests.max(1) as f64;
    let after = cache.lock().expect("cache lock").stats();
    Ok(LoadReport {
        requests: n_requests,
        universe: universe.len(),
        zipf_s,
        hit_rate: hits as f64 / denom,
        backend_request_fraction: misses as f64 / denom,
        analytic_hit_rate: analytic_hit_rate(&sampler.probabilities(), n_requests),
        mean_latency_us: (hits as f64 * latency.hit_us + misses as f64 * latency.miss_us) / denom,
        p50_latency_us: quantile(0.5),
        p90_latency_us: quantile(0.9),
        p99_latency_us: quantile(0.99),
        latency_histogram: histogram,
        cache: CacheStats {
            hits: after.hits - before.hits,
            misses: after.misses - before.misses,
            evictions: after.evictions - before.evictions,
            expirations: after.expirations - before.expirations,
            inserts: after.inserts - before.inserts,
            size: after.size,
        },
    })
}

const EMBED_MAGIC: &[u8; 4] = b"OSSE";
const EMBED_VERSION: u32 = 1;

/// Header (magic, version u32, count u64, dim u32), `count * dim` f32 rows,
/// then one id per line. Little-endian.
pub fn write_embedding_file(path: &Path, set: &VectorSet) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(EMBED_MAGIC)?;
    out.write_all(&EMBED_VERSION.to_le_bytes())?;
    out.write_all(&(set.len() as u64).to_le_bytes())?;
    out.write_all(&(set.dim as u32).to_le_bytes())?;
    for v in &set.data {
        out.write_all(&v.to_le_bytes())?;
    }
    for id in &set.ids {
        if id.contains('\n') {
            return Err(Error::invalid(format!("id {id:?} contains a newline")));
        }
        out.write_all(id.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_embedding_file(path: &Path) -> Result<VectorSet> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let bad = |what: &str| Error::format(format!("{}: {what}", path.display()));
    if bytes.len() < 20 || &bytes[..4] != EMBED_MAGIC {
        return Err(bad("not an embedding file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != EMBED_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    let body = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("size overflow"))?;
    if bytes.len() < 20 + body {
        return Err(bad("truncated rows"));
    }
    let data: Vec<f32> = bytes[20..20 + body]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let table = std::str::from_utf8(&bytes[20 + body..]).map_err(|_| bad("id table is not UTF-8"))?;
    let ids: Vec<String> = table.lines().map(str::to_string).collect();
    if ids.len() != count {
        return Err(bad(&format!("{} ids for {count} rows", ids.len())));
    }
    VectorSet::new(dim, ids, data)
}

/// Provenance written next to every artifact as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub config_hash: String,
    pub vocab_fingerprint: String,
}

impl ArtifactMeta {
    pub fn sidecar(path: &Path) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        path.with_file_name(name)
    }

    pub fn write_for(&self, path: &Path) -> Result<()> {
        crate::io::write_json(Self::sidecar(path), self)
    }

    pub fn read_for(path: &Path) -> Result<Self> {
        crate::io::read_json(Self::sidecar(path))
    }

    /// Errors unless both artifacts come from the same config and vocabulary.
    pub fn check_compatible(&self, other: &ArtifactMeta) -> Result<()> {
        if self.config_hash != other.config_hash {
            return Err(Error::ArtifactMismatch(format!(
                "{} has config {} but {} has config {}",
                self.artifact, self.config_hash, other.artifact, other.config_hash
            )));
        }
        if self.vocab_fingerprint != other.vocab_fingerprint {
            return Err(Error::ArtifactMismatch(format!(
                "{} and {} were built with different vocabularies",
                self.artifact, other.artifact
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishReport {
    pub accepted: usize,
    pub rejected: usize,
}

/// Encodes every document with the unified tower, in entity-id order.
/// Documents that fail to encode (or repeat an id) go to the rejects list
/// as `id<TAB>reason` lines.
pub fn publish_entity_embeddings(model: &Model, docs: &[EntityDocument]) -> (VectorSet, Vec<String>) {
    let mut order: Vec<&EntityDocument> = docs.iter().collect();
    order.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
    let dim = model.embed_dim();
    let mut set = VectorSet {
        dim,
        ..VectorSet::default()
    };
    let mut rejects = Vec::new();
    let mut seen = HashSet::new();
    for doc in order {
        if !seen.insert(doc.entity_id.as_str()) {
            rejects.push(format!("{}\tduplicate entity id", doc.entity_id));
            continue;
        }
        if doc.entity_id.is_empty() || doc.entity_id.contains(['\n', '\t']) {
            rejects.push(format!("{:?}\tunusable entity id", doc.entity_id));
            continue;
        }
        match model.encode_entity(doc) {
            Ok(e) => {
                set.ids.push(doc.entity_id.clone());
                set.data.extend(e.to_f32());
            }
            Err(err) => rejects.push(format!("{}\t{err}", doc.entity_id)),
        }
    }
    (set, rejects)
}

/// Writes the embedding file and, next to it, `<file>.rejects.tsv`.
pub fn publish_to_file(model: &Model, docs: &[EntityDocument], path: &Path) -> Result<PublishReport> {
    let (set, rejects) = publish_entity_embeddings(model, docs);
    write_embedding_file(path, &set)?;
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".rejects.tsv");
    let mut text = rejects.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path.with_file_name(name), text)?;
    Ok(PublishReport {
        accepted: set.len(),
        rejected: rejects.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    EmbedQuery { text: String },
    Retrieve { text: String, k: usize },
    Stats {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Embedding {
        embedding: Vec<f32>,
        cache_hit: bool,
    },
    Results {
        ids: Vec<String>,
        scores: Vec<f32>,
        cache_hit: bool,
    },
    Stats {
        cache: CacheStats,
        entities: usize,
    },
    Error {
        message: String,
    },
}

/// Query embedding (cached) plus HNSW retrieval over published entities.
pub struct Service {
    model: Arc<Model>,
    index: HnswIndex,
    cache: Mutex<TtlCache<Vec<f32>>>,
    clock: Box<dyn Clock>,
}

impl Service {
    pub fn new(model: Arc<Model>, index: HnswIndex, cache: &CacheConfig, clock: Box<dyn Clock>) -> Result<Self> {
        if index.vectors.dim != model.embed_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.embed_dim(),
                actual: index.vectors.dim,
                context: "index vs model",
            });
        }
        Ok(Self {
            model,
            index,
            cache: Mutex::new(TtlCache::from_config(cache)?),
            clock,
        })
    }

    pub fn index(&self) -> &HnswIndex {
        &self.index
    }

    fn embed(&self, text: &str) -> Result<(Vec<f32>, bool)> {
        let now = self.clock.now();
        cache_get_or_compute(&self.cache, text, now, |t| Ok(self.model.encode_query(t)?.to_f32()))
    }

    pub fn handle(&self, request: &Request) -> Response {
        let result = match request {
            Request::EmbedQuery { text } => self
                .embed(text)
                .map(|(embedding, cache_hit)| Response::Embedding { embedding, cache_hit }),
            Request::Retrieve { text, k } => self.embed(text).and_then(|(q, cache_hit)| {
                let k = (*k).min(self.index.len());
                let ef = self.index.params.ef_search.max(k);
                let hits = self.index.search(&q, k, ef)?;
                Ok(Response::Results {
                    ids: hits.iter().map(|&(i, _)| self.index.vectors.ids[i as usize].clone()).collect(),
                    scores: hits.iter().map(|&(_, s)| s).collect(),
                    cache_hit,
                })
            }),
            Request::Stats {} => Ok(Response::Stats {
                cache: self.cache.lock().expect("cache lock").stats(),
                entities: self.index.len(),
            }),
        };
        result.unwrap_or_else(|e| Response::Error { message: e.to_string() })
    }

    /// Parses one JSON request; malformed input yields an error response.
    pub fn handle_json(&self, bytes: &[u8]) -> Response {
        match serde_json::from_slice::<Request>(bytes) {
            Ok(req) => self.handle(&req),
            Err(e) => Response::Error {
                message: format!("bad request: {e}"),
            },
        }
    }
}

/// Largest accepted frame, in bytes.
pub const MAX_FRAME: usize = 1 << 20;

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| Error::invalid("frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::invalid(format!("frame of {len} bytes exceeds {MAX_FRAME}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

fn handle_connection(service: &Service, stream: TcpStream) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(frame) = read_frame(&mut reader)? {
        let response = service.handle_json(&frame);
        write_frame(&mut writer, &serde_json::to_vec(&response)?)?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve(service: Arc<Service>, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let service = Arc::clone(&service);
        std::thread::spawn(move || {
            if let Err(e) = handle_connection(&service, stream) {
                log::warn!("connection closed with error: {e}");
            }
        });
    }
    Ok(())
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn send_raw(&mut self, payload: &[u8]) -> Result<Response> {
        write_frame(&mut self.writer, payload)?;
        let frame = read_frame(&mut self.reader)?.ok_or_else(|| Error::format("connection closed"))?;
        Ok(serde_json::from_slice(&frame)?)
    }

    pub fn request(&mut self, request: &Request) -> Result<Response> {
        self.send_raw(&serde_json::to_vec(request)?)
    }
}
