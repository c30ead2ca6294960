//! Nearest-neighbor retrieval over unit vectors: an exact brute-force oracle
//! and an HNSW graph (greedy descent through layers, beam search at the
//! target layer, heuristic neighbor selection).
//!
//! Distance is `1 - dot`. Results are ordered by distance, then position;
//! published embedding files list entities in id order, so position order
//! is id order.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

const MAX_LEVEL: usize = 16;

#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn distance(a: &[f32], b: &[f32]) -> f32 {
    1.0 - dot_f32(a, b)
}

/// A (distance, position) pair ordered by distance then position.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored(f32, u32);

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Row-major `f32` vectors with string ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorSet {
    pub dim: usize,
    pub ids: Vec<String>,
    pub data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                actual: data.len(),
                context: "vector set",
            });
        }
        Ok(Self { dim, ids, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Top-`k` positions by descending dot product, ties by ascending position.
pub fn exact_knn(query: &[f32], vectors: &VectorSet, k: usize) -> Result<Vec<(u32, f32)>> {
    if vectors.is_empty() {
        return Err(Error::Empty("kNN corpus"));
    }
    if query.len() != vectors.dim {
        return Err(Error::DimensionMismatch {
            expected: vectors.dim,
            actual: query.len(),
            context: "kNN query",
        });
    }
    let k = k.min(vectors.len());
    let mut heap: BinaryHeap<Scored> = BinaryHeap::with_capacity(k + 1);
    for i in 0..vectors.len() {
        let s = Scored(distance(query, vectors.row(i)), i as u32);
        if heap.len() < k {
            heap.push(s);
        } else if s < *heap.peek().expect("non-empty") {
            heap.pop();
            heap.push(s);
        }
    }
    let mut out: Vec<Scored> = heap.into_vec();
    out.sort();
    Ok(out.into_iter().map(|s| (s.1, 1.0 - s.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HnswParams {
    /// Max neighbors per node on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 100,
        }
    }
}

impl HnswParams {
    pub fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::Config("hnsw needs m >= 2 and positive ef".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    pub params: HnswParams,
    pub vectors: VectorSet,
    /// `links[node][layer]` lists the node's neighbors on that layer.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    /// Nodes the reachability repair had to link back into layer 0.
    pub repaired: usize,
}

/// Reusable visited marks: a slot is visited when it holds the current stamp.
struct Visited {
    marks: Vec<u32>,
    stamp: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            stamp: 0,
        }
    }

    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
    }

    /// Marks `i`; returns whether it was unvisited.
    fn insert(&mut self, i: u32) -> bool {
        let slot = &mut self.marks[i as usize];
        if *slot == self.stamp {
            false
        } else {
            *slot = self.stamp;
            true
        }
    }
}

impl HnswIndex {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry
    }

    pub fn level(&self, node: u32) -> usize {
        self.links[node as usize].len() - 1
    }

    pub fn max_level(&self) -> usize {
        self.entry.map_or(0, |e| self.level(e))
    }

    pub fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        &self.links[node as usize][layer]
    }

    fn dist_to(&self, q: &[f32], node: u32) -> f32 {
        distance(q, self.vectors.row(node as usize))
    }

    /// Beam search on one layer; returns up to `ef` closest, ascending.
    fn search_layer(&self, q: &[f32], entries: &[Scored], ef: usize, layer: usize, visited: &mut Visited) -> Vec<Scored> {
        visited.reset(self.len());
        let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut results: BinaryHeap<Scored> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.1) {
                candidates.push(Reverse(e));
                results.push(e);
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(Reverse(c)) = candidates.pop() {
            let worst = *results.peek().expect("results non-empty");
            if c > worst && results.len() >= ef {
                break;
            }
            for &n in &self.links[c.1 as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored(self.dist_to(q, n), n);
                if results.len() < ef || s < *results.peek().expect("non-empty") {
                    candidates.push(Reverse(s));
                    results.push(s);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out = results.into_vec();
        out.sort();
        out
    }

    /// Keeps a candidate only if it is closer to the base than to every
    /// neighbor kept so far; pruned candidates fill any remaining slots.
    fn select_neighbors(&self, candidates: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned: Vec<Scored> = Vec::new();
        for &c in candidates {
            if kept.len() >= m {
                break;
            }
            let cv = self.vectors.row(c.1 as usize);
            let diverse = kept.iter().all(|k| distance(cv, self.vectors.row(k.1 as usize)) > c.0);
            if diverse {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for p in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(p);
        }
        kept
    }

    fn shrink(&mut self, node: u32, layer: usize) {
        let max = self.params.max_degree(layer);
        if self.links[node as usize][layer].len() <= max {
            return;
        }
        let base = self.vectors.row(node as usize).to_vec();
        let mut cands: Vec<Scored> = self.links[node as usize][layer]
            .iter()
            .map(|&n| Scored(distance(&base, self.vectors.row(n as usize)), n))
            .collect();
        cands.sort();
        let kept = self.select_neighbors(&cands, max);
        self.links[node as usize][layer] = kept.into_iter().map(|s| s.1).collect();
    }

    fn insert(&mut self, node: u32, level: usize, visited: &mut Visited) {
        self.links[node as usize] = vec![Vec::new(); level + 1];
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return;
        };
        let q = self.vectors.row(node as usize).to_vec();
        let top = self.level(entry);
        let mut eps = vec![Scored(self.dist_to(&q, entry), entry)];
        for layer in (level + 1..=top).rev() {
            eps = self.search_layer(&q, &eps, 1, layer, visited);
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer, visited);
            let chosen = self.select_neighbors(&found, self.params.max_degree(layer));
            for s in &chosen {
                self.links[node as usize][layer].push(s.1);
                self.links[s.1 as usize][layer].push(node);
                self.shrink(s.1, layer);
            }
            eps = found;
        }
        if level > top {
            self.entry = Some(node);
        }
    }

    /// Inserts vectors in order; levels come from `seed`.
    pub fn build(vectors: VectorSet, params: HnswParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut seen = HashSet::with_capacity(vectors.len());
        for id in &vectors.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate id {id} in index input")));
            }
        }
        let n = vectors.len();
        let mut rng = substream(seed, "hnsw/levels");
        let ml = 1.0 / (params.m as f64).ln();
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL)
            })
            .collect();
        let mut index = Self {
            params,
            vectors,
            links: vec![Vec::new(); n],
            entry: None,
            repaired: 0,
        };
        let mut visited = Visited::new(n);
        for (i, &l) in levels.iter().enumerate() {
            index.insert(i as u32, l, &mut visited);
        }
        index.repair_reachability(&mut visited);
        Ok(index)
    }

    fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let Some(e) = self.entry else {
            return seen;
        };
        let mut queue = VecDeque::from([e]);
        seen[e as usize] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.links[u as usize][0] {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    /// Links every node unreachable at layer 0 from its nearest reachable
    /// node that still has a free slot.
    fn repair_reachability(&mut self, visited: &mut Visited) {
        let mut seen = self.reachable();
        let max0 = self.params.max_degree(0);
        for v in 0..self.len() {
            if seen[v] {
                continue;
            }
            let q = self.vectors.row(v).to_vec();
            let mut ef = self.params.ef_construction.max(self.params.m);
            let host = loop {
                let entry = self.entry.expect("non-empty index has an entry");
                let found = self.search_layer(&q, &[Scored(self.dist_to(&q, entry), entry)], ef, 0, visited);
                if let Some(h) = found
                    .iter()
                    .find(|s| seen[s.1 as usize] && self.links[s.1 as usize][0].len() < max0)
                {
                    break Some(h.1);
                }
                if ef >= self.len() {
                    break (0..self.len() as u32).find(|&u| seen[u as usize] && self.links[u as usize][0].len() < max0);
                }
                ef = (ef * 2).min(self.len());
            };
            let host = match host {
                Some(h) => h,
                None => {
                    // Every reachable node is full: replace the host's farthest link.
                    let entry = self.entry.expect("entry");
                    self.links[entry as usize][0].pop();
                    entry
                }
            };
            self.links[host as usize][0].push(v as u32);
            if self.links[v][0].len() < max0 && !self.links[v][0].contains(&host) {
                self.links[v][0].push(host);
            }
            self.repaired += 1;
            // Mark everything newly reachable through v.
            let mut queue = VecDeque::from([v as u32]);
            seen[v] = true;
            while let Some(u) = queue.pop_front() {
                for &w in &self.links[u as usize][0] {
                    if !seen[w as usize] {
                        seen[w as usize] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            // A replaced link can orphan nodes; sweep again until stable.
            self.repair_reachability(visited);
        }
    }

    /// Approximate top-`k` positions with scores (dot products).
    pub fn search(&self, query: &[f32], k: usize, ef_search: usize) -> Result<Vec<(u32, f32)>> {
        if ef_search < k {
            return Err(Error::invalid(format!("ef_search ({ef_search}) must be >= k ({k})")));
        }
        if query.len() != self.vectors.dim {
            return Err(Error::DimensionMismatch {
                expected: self.vectors.dim,
                actual: query.len(),
                context: "hnsw query",
            });
        }
        let Some(entry) = self.entry else {
            return Ok(Vec::new());
        };
        let mut visited = Visited::new(self.len());
        let mut eps = vec![Scored(self.dist_to(query, entry), entry)];
        for layer in (1..=self.level(entry)).rev() {
            eps = self.search_layer(query, &eps, 1, layer, &mut visited);
        }
        let found = self.search_layer(query, &eps, ef_search, 0, &mut visited);
        Ok(found.into_iter().take(k).map(|s| (s.1, 1.0 - s.0)).collect())
    }

    /// Checks degree bounds, link validity and layer-0 reachability.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return if self.entry.is_none() {
                Ok(())
            } else {
                Err(Error::format("empty index with an entry point"))
            };
        }
        let entry = self.entry.ok_or_else(|| Error::format("non-empty index without entry point"))?;
        for (u, layers) in self.links.iter().enumerate() {
            if layers.is_empty() {
                return Err(Error::format(format!("node {u} has no layers")));
            }
            if layers.len() - 1 > self.level(entry) {
                return Err(Error::format(format!("node {u} is above the entry point's level")));
            }
            for (layer, list) in layers.iter().enumerate() {
                if list.len() > self.params.max_degree(layer) {
                    return Err(Error::format(format!("node {u} has degree {} on layer {layer}", list.len())));
                }
                let mut uniq = HashSet::new();
                for &v in list {
                    if v as usize >= n || v as usize == u || !uniq.insert(v) {
                        return Err(Error::format(format!("node {u} has an invalid link {v} on layer {layer}")));
                    }
                    if self.links[v as usize].len() <= layer {
                        return Err(Error::format(format!("node {u} links to {v} on layer {layer} above its level")));
                    }
                }
            }
        }
        if let Some(orphan) = self.reachable().iter().position(|r| !r) {
            return Err(Error::format(format!("node {orphan} unreachable from the entry point")));
        }
        Ok(())
    }
}

const INDEX_MAGIC: &[u8; 4] = b"OSHN";
const INDEX_VERSION: u32 = 1;

impl HnswIndex {
    /// Layout: magic, version, dim (u32), count (u64), m, ef_construction,
    /// ef_search (u32 each), entry (u64, `u64::MAX` when empty), then per
    /// node its level count (u32) and each layer's neighbor list (u32
    /// length + u32 ids), then the vector block (f32) and the newline id
    /// table. Everything little-endian.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(INDEX_MAGIC)?;
        out.write_all(&INDEX_VERSION.to_le_bytes())?;
        out.write_all(&(self.vectors.dim as u32).to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in [self.params.m, self.params.ef_construction, self.params.ef_search] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        out.write_all(&self.entry.map_or(u64::MAX, |e| e as u64).to_le_bytes())?;
        for layers in &self.links {
            out.write_all(&(layers.len() as u32).to_le_bytes())?;
            for list in layers {
                out.write_all(&(list.len() as u32).to_le_bytes())?;
                for v in list {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        for v in &self.vectors.data {
            out.write_all(&v.to_le_bytes())?;
        }
        for id in &self.vectors.ids {
            out.write_all(id.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::format(format!("{}: not an index file", path.display())));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::format(format!("unsupported index version {version}")));
        }
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let params = HnswParams {
            m: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            ef_search: r.u32()? as usize,
        };
        let entry = match r.u64()? {
            u64::MAX => None,
            e if (e as usize) < n => Some(e as u32),
            e => return Err(Error::format(format!("entry point {e} out of range"))),
        };
        let mut links = Vec::with_capacity(n);
        for _ in 0..n {
            let nl = r.u32()? as usize;
            if nl == 0 || nl > MAX_LEVEL + 1 {
                return Err(Error::format("bad level count in index"));
            }
            let mut layers = Vec::with_capacity(nl);
            for _ in 0..nl {
                let len = r.u32()? as usize;
                layers.push((0..len).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?);
            }
            links.push(layers);
        }
        let raw = r.take(n * dim * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let rest = std::str::from_utf8(&bytes[r.pos..]).map_err(|_| Error::format("index id table is not UTF-8"))?;
        let ids: Vec<String> = rest.lines().map(str::to_string).collect();
        if ids.len() != n {
            return Err(Error::format(format!("index has {} ids for {n} vectors", ids.len())));
        }
        let index = Self {
            params,
            vectors: VectorSet::new(dim, ids, data)?,
            links,
            entry,
            repaired: 0,
        };
        index.validate()?;
        Ok(index)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Mean fraction of the exact top-`k` recovered by the index.
pub fn measure_recall(index: &HnswIndex, queries: &[Vec<f32>], k: usize, ef_search: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Empty("recall queries"));
    }
    let mut total = 0.0;
    for q in queries {
        let truth: HashSet<u32> = exact_knn(q, &index.vectors, k)?.into_iter().map(|(i, _)| i).collect();
        let got = index.search(q, k, ef_search.max(k))?;
        total += got.iter().filter(|(i, _)| truth.contains(i)).count() as f64 / truth.len() as f64;
    }
    Ok(total / queries.len() as f64)
}

/// Seeded Gaussian-direction unit vectors, for tests and benchmarks.
pub fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = substream(seed, "ann/random-vectors");
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                break v.iter().map(|x| (x / n) as f32).collect();
            }
        })
        .collect()
}

pub fn vector_set_from_rows(rows: &[Vec<f32>]) -> Result<VectorSet> {
    let dim = rows.first().map_or(0, Vec::len);
    let ids = (0..rows.len()).map(|i| format!("v{i:06}")).collect();
    VectorSet::new(dim, ids, rows.concat())
}
