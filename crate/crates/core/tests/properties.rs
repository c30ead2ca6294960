use std::sync::Mutex;

use proptest::prelude::*;

use omnisearch::ann::{measure_recall, random_unit_vectors, vector_set_from_rows, HnswIndex, HnswParams};
use omnisearch::serving::{cache_get_or_compute, TtlCache};
use omnisearch::Error;

/// Reference cache: a recency-ordered list of (key, inserted_at).
struct Reference {
    capacity: usize,
    ttl: u64,
    lru: Vec<(u8, u64)>,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl Reference {
    fn get(&mut self, key: u8, now: u64) -> (u64, bool) {
        if let Some(pos) = self.lru.iter().position(|e| e.0 == key) {
            let e = self.lru.remove(pos);
            if now - e.1 <= self.ttl {
                self.lru.push(e);
                self.hits += 1;
                return (e.1, true);
            }
        }
        self.misses += 1;
        if self.lru.len() >= self.capacity {
            self.lru.remove(0);
            self.evictions += 1;
        }
        self.lru.push((key, now));
        (now, false)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cache_matches_reference(
        capacity in 1usize..5,
        ttl in 0u64..8,
        ops in prop::collection::vec((0u8..7, 0u64..4, prop::bool::weighted(0.1)), 1..200),
    ) {
        let cache = Mutex::new(TtlCache::<u64>::new(capacity, ttl).unwrap());
        let mut reference = Reference { capacity, ttl, lru: Vec::new(), hits: 0, misses: 0, evictions: 0 };
        let mut now = 0;
        for (key, dt, fail) in ops {
            now += dt;
            let name = format!("k{key}");
            if fail {
                let before = cache.lock().unwrap().stats();
                let fresh = cache.lock().unwrap().contains_fresh(&name, now);
                let r = cache_get_or_compute(&cache, &name, now, |_| Err(Error::Empty("compute")));
                if fresh {
                    // A fresh entry is served without computing.
                    prop_assert!(r.unwrap().1);
                    reference.get(key, now);
                } else {
                    prop_assert!(r.is_err());
                    prop_assert_eq!(cache.lock().unwrap().stats(), before);
                }
                continue;
            }
            let got = cache_get_or_compute(&cache, &name, now, |_| Ok(now)).unwrap();
            prop_assert_eq!(got, reference.get(key, now));
            let s = cache.lock().unwrap().stats();
            prop_assert!(s.size <= capacity);
            prop_assert_eq!(s.size, reference.lru.len());
            prop_assert_eq!((s.hits, s.misses, s.evictions), (reference.hits, reference.misses, reference.evictions));
            prop_assert_eq!(s.inserts, s.misses);
        }
    }

    #[test]
    fn hnsw_graph_invariants(n in 1usize..80, dim in 2usize..8, m in 2usize..8, seed in 0u64..1000) {
        let rows = random_unit_vectors(n, dim, seed);
        let params = HnswParams { m, ef_construction: 2 * m + 4, ef_search: 10 };
        let index = HnswIndex::build(vector_set_from_rows(&rows).unwrap(), params, seed).unwrap();
        index.validate().unwrap();
        for node in 0..n as u32 {
            for layer in 0..=index.level(node) {
                let links = index.neighbors(node, layer);
                prop_assert!(links.len() <= params.max_degree(layer));
                prop_assert!(!links.contains(&node));
                prop_assert!(links.iter().all(|&l| (l as usize) < n && index.level(l) >= layer));
            }
        }
        // With ef covering the whole set the search is exhaustive.
        let hits = index.search(&rows[0], 1, n.max(1)).unwrap();
        prop_assert_eq!(hits[0].0, 0);
    }
}

#[test]
fn hnsw_recall_is_monotone_in_ef() {
    let rows = random_unit_vectors(3000, 32, 1);
    let queries = random_unit_vectors(200, 32, 2);
    let index = HnswIndex::build(vector_set_from_rows(&rows).unwrap(), HnswParams::default(), 3).unwrap();
    let mut last = 0.0;
    for ef in [10, 20, 40, 80, 160, 320] {
        let r = measure_recall(&index, &queries, 10, ef).unwrap();
        assert!(r >= last - 0.01, "recall fell from {last} to {r} at ef {ef}");
        last = r;
    }
    assert!(last > 0.99);
}

#[test]
fn hnsw_file_round_trip_preserves_search() {
    let rows = random_unit_vectors(500, 16, 4);
    let index = HnswIndex::build(vector_set_from_rows(&rows).unwrap(), HnswParams::default(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("i.hnsw");
    index.write(&path).unwrap();
    let back = HnswIndex::read(&path).unwrap();
    for q in random_unit_vectors(20, 16, 6) {
        assert_eq!(index.search(&q, 10, 50).unwrap(), back.search(&q, 10, 50).unwrap());
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(HnswIndex::read(&path).is_err());
}
