//! Two-hash embedding table. Token `i` is embedded as
//! `w1[i] * row(h1(i)) + w2[i] * row(h2(i))`, where `w1`/`w2` are learned
//! per-token importance scalars and `h1`/`h2` are seeded hashes into a shared
//! row table. Texts are sum-pooled bags of token embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, dot, DenseMatrix};
use crate::tokenizer::TokenId;

pub const DEFAULT_SEEDS: (u64, u64) = (0x9E37_79B9_7F4A_7C15, 0xD1B5_4A32_D192_ED03);

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashEmbeddingTable {
    pub table: DenseMatrix,
    pub weights1: Vec<f64>,
    pub weights2: Vec<f64>,
    pub seeds: (u64, u64),
}

/// Token ids with multiplicities, sorted by id. Pooling a bag is equivalent
/// to pooling the id list it was built from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenBag {
    pub entries: Vec<(TokenId, f64)>,
}

impl TokenBag {
    pub fn from_ids(ids: &[TokenId]) -> Self {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        let mut entries: Vec<(TokenId, f64)> = Vec::new();
        for id in sorted {
            match entries.last_mut() {
                Some((last, c)) if *last == id => *c += 1.0,
                _ => entries.push((id, 1.0)),
            }
        }
        Self { entries }
    }

    pub fn extend(&mut self, other: &TokenBag) {
        let mut ids: Vec<(TokenId, f64)> = self.entries.drain(..).chain(other.entries.iter().copied()).collect();
        ids.sort_by_key(|e| e.0);
        for (id, c) in ids {
            match self.entries.last_mut() {
                Some((last, lc)) if *last == id => *lc += c,
                _ => self.entries.push((id, c)),
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gradients for a [`HashEmbeddingTable`], kept dense so accumulation over
/// shared rows is a plain add.
#[derive(Debug, Clone, PartialEq)]
pub struct HashEmbeddingGrads {
    pub table: Vec<f64>,
    pub weights1: Vec<f64>,
    pub weights2: Vec<f64>,
}

impl HashEmbeddingGrads {
    pub fn zeros_like(t: &HashEmbeddingTable) -> Self {
        Self {
            table: vec![0.0; t.table.data.len()],
            weights1: vec![0.0; t.weights1.len()],
            weights2: vec![0.0; t.weights2.len()],
        }
    }

    pub fn clear(&mut self) {
        self.table.iter_mut().for_each(|v| *v = 0.0);
        self.weights1.iter_mut().for_each(|v| *v = 0.0);
        self.weights2.iter_mut().for_each(|v| *v = 0.0);
    }
}

impl HashEmbeddingTable {
    /// Rows get Glorot-uniform init, both importance weights start at 0.5.
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, table_size: usize, dim: usize, seeds: (u64, u64), rng: &mut R) -> Result<Self> {
        if table_size == 0 || dim == 0 {
            return Err(Error::invalid("hash table size and dim must be positive"));
        }
        Ok(Self {
            table: DenseMatrix::glorot(table_size, dim, table_size, dim, rng),
            weights1: vec![0.5; vocab_size],
            weights2: vec![0.5; vocab_size],
            seeds,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights1.len()
    }

    pub fn table_size(&self) -> usize {
        self.table.rows
    }

    pub fn dim(&self) -> usize {
        self.table.cols
    }

    #[inline]
    pub fn bucket1(&self, id: TokenId) -> usize {
        (mix64(id as u64 ^ self.seeds.0) % self.table.rows as u64) as usize
    }

    #[inline]
    pub fn bucket2(&self, id: TokenId) -> usize {
        (mix64(id as u64 ^ self.seeds.1) % self.table.rows as u64) as usize
    }

    fn check(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.vocab_size() {
            Ok(())
        } else {
            Err(Error::UnknownId(format!("token id {id} (vocab size {})", self.vocab_size())))
        }
    }

    pub fn embed_token(&self, id: TokenId) -> Result<Vec<f64>> {
        self.check(id)?;
        let mut out = vec![0.0; self.dim()];
        self.accumulate_token(id, 1.0, &mut out);
        Ok(out)
    }

    #[inline]
    fn accumulate_token(&self, id: TokenId, scale: f64, out: &mut [f64]) {
        let i = id as usize;
        axpy(scale * self.weights1[i], self.table.row(self.bucket1(id)), out);
        axpy(scale * self.weights2[i], self.table.row(self.bucket2(id)), out);
    }

    /// Sum of token embeddings; an empty list pools to the zero vector.
    pub fn pool_tokens(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        for &id in ids {
            self.check(id)?;
            self.accumulate_token(id, 1.0, &mut out);
        }
        Ok(out)
    }

    pub fn pool_bag_into(&self, bag: &TokenBag, out: &mut [f64]) -> Result<()> {
        if out.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: out.len(),
                context: "pooled output",
            });
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(id, count) in &bag.entries {
            self.check(id)?;
            self.accumulate_token(id, count, out);
        }
        Ok(())
    }

    pub fn pool_bag(&self, bag: &TokenBag) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.pool_bag_into(bag, &mut out)?;
        Ok(out)
    }

    /// Accumulates gradients of a pooled bag given the upstream gradient of the
    /// pooled vector.
    pub fn backward_bag(&self, bag: &TokenBag, upstream: &[f64], grads: &mut HashEmbeddingGrads) {
        let dim = self.dim();
        for &(id, count) in &bag.entries {
            let i = id as usize;
            let (b1, b2) = (self.bucket1(id), self.bucket2(id));
            grads.weights1[i] += count * dot(upstream, self.table.row(b1));
            grads.weights2[i] += count * dot(upstream, self.table.row(b2));
            axpy(count * self.weights1[i], upstream, &mut grads.table[b1 * dim..(b1 + 1) * dim]);
            axpy(count * self.weights2[i], upstream, &mut grads.table[b2 * dim..(b2 + 1) * dim]);
        }
    }

    pub fn param_blocks_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.table.data, &mut self.weights1, &mut self.weights2]
    }
}

/// Gradient of `upstream . pool_tokens(ids)` w.r.t. rows, `w1` and `w2`.
pub fn hash_embed_backward(ids: &[TokenId], upstream: &[f64], table: &HashEmbeddingTable, grads: &mut HashEmbeddingGrads) {
    table.backward_bag(&TokenBag::from_ids(ids), upstream, grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::finite_diff_check;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(vocab: usize, rows: usize, dim: usize, seed: u64) -> HashEmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = HashEmbeddingTable::new(vocab, rows, dim, DEFAULT_SEEDS, &mut rng).unwrap();
        for w in t.weights1.iter_mut().chain(t.weights2.iter_mut()) {
            *w = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn buckets_in_range() {
        let t = table(500, 7, 2, 1);
        for id in 0..500 {
            assert!(t.bucket1(id) < 7 && t.bucket2(id) < 7);
        }
    }

    #[test]
    fn degenerate_weights_select_one_row() {
        let mut t = table(10, 16, 4, 2);
        t.weights1[3] = 1.0;
        t.weights2[3] = 0.0;
        assert_eq!(t.embed_token(3).unwrap(), t.table.row(t.bucket1(3)).to_vec());
        assert!(t.embed_token(10).is_err());
    }

    #[test]
    fn midpoint_of_two_rows() {
        let mut t = table(10, 16, 2, 3);
        let (a, b) = (t.bucket1(4), t.bucket2(4));
        assert_ne!(a, b, "fixture expects distinct buckets");
        t.table.row_mut(a).copy_from_slice(&[2.0, 0.0]);
        t.table.row_mut(b).copy_from_slice(&[0.0, 2.0]);
        t.weights1[4] = 0.5;
        t.weights2[4] = 0.5;
        assert_eq!(t.embed_token(4).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn colliding_ids_share_embeddings() {
        // one-row table: every id hashes to row 0 twice
        let mut t = table(4, 1, 3, 4);
        t.weights1[1] = 0.2;
        t.weights2[1] = 0.7;
        t.weights1[2] = 0.2;
        t.weights2[2] = 0.7;
        assert_eq!(t.embed_token(1).unwrap(), t.embed_token(2).unwrap());
    }

    #[test]
    fn pooling_sums_with_multiplicity() {
        let t = table(20, 32, 5, 5);
        assert_eq!(t.pool_tokens(&[7]).unwrap(), t.embed_token(7).unwrap());
        let twice = t.pool_tokens(&[7, 7]).unwrap();
        for (a, b) in twice.iter().zip(t.embed_token(7).unwrap()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        assert_eq!(t.pool_tokens(&[]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn pooling_matches_naive_loop() {
        let t = table(50, 64, 8, 6);
        let ids = [3u32, 17, 42];
        let mut naive = [0.0; 8];
        for &id in &ids {
            let i = id as usize;
            for d in 0..8 {
                naive[d] += t.weights1[i] * t.table.get(t.bucket1(id), d) + t.weights2[i] * t.table.get(t.bucket2(id), d);
            }
        }
        let pooled = t.pool_tokens(&ids).unwrap();
        let bagged = t.pool_bag(&TokenBag::from_ids(&ids)).unwrap();
        for d in 0..8 {
            assert!((pooled[d] - naive[d]).abs() < 1e-12);
            assert!((bagged[d] - naive[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_single_token() {
        let mut t = table(5, 16, 3, 7);
        t.weights1[2] = 1.0;
        t.weights2[2] = 0.0;
        let g = [0.3, -0.4, 1.5];
        let mut grads = HashEmbeddingGrads::zeros_like(&t);
        hash_embed_backward(&[2], &g, &t, &mut grads);
        let b1 = t.bucket1(2);
        let b2 = t.bucket2(2);
        assert_ne!(b1, b2);
        assert_eq!(&grads.table[b1 * 3..b1 * 3 + 3], &g);
        assert_eq!(&grads.table[b2 * 3..b2 * 3 + 3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_collisions_add() {
        let mut t = table(4, 1, 2, 8);
        t.weights1 = vec![0.5, 1.0, 0.0, 0.0];
        t.weights2 = vec![0.0; 4];
        let g = [1.0, 2.0];
        let mut grads = HashEmbeddingGrads::zeros_like(&t);
        hash_embed_backward(&[0, 1], &g, &t, &mut grads);
        assert_eq!(grads.table, vec![1.5, 3.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let t = table(30, 8, 4, 9);
        let ids = [1u32, 5, 5, 9, 22, 29];
        let probe = [0.7, -0.2, 0.4, 1.1];
        let mut grads = HashEmbeddingGrads::zeros_like(&t);
        hash_embed_backward(&ids, &probe, &t, &mut grads);

        let rows = t.table.data.clone();
        let err = finite_diff_check(
            |p| {
                let mut tt = t.clone();
                tt.table.data.copy_from_slice(p);
                dot(&tt.pool_tokens(&ids).unwrap(), &probe)
            },
            &rows,
            &grads.table,
            1e-5,
        );
        assert!(err < 1e-4, "rows {err}");
        let err = finite_diff_check(
            |p| {
                let mut tt = t.clone();
                tt.weights1.copy_from_slice(p);
                dot(&tt.pool_tokens(&ids).unwrap(), &probe)
            },
            &t.weights1,
            &grads.weights1,
            1e-5,
        );
        assert!(err < 1e-4, "w1 {err}");
        let err = finite_diff_check(
            |p| {
                let mut tt = t.clone();
                tt.weights2.copy_from_slice(p);
                dot(&tt.pool_tokens(&ids).unwrap(), &probe)
            },
            &t.weights2,
            &grads.weights2,
            1e-5,
        );
        assert!(err < 1e-4, "w2 {err}");
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(mut ids in proptest::collection::vec(0u32..40, 0..12), seed in 0u64..1000) {
            let t = table(40, 16, 4, 11);
            let a = t.pool_bag(&TokenBag::from_ids(&ids)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            ids.shuffle(&mut rng);
            let b = t.pool_bag(&TokenBag::from_ids(&ids)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn embedding_is_linear_in_importance_weights(s in -2.0f64..2.0, id in 0u32..20) {
            let mut t = table(20, 16, 4, 12);
            let base = t.embed_token(id).unwrap();
            t.weights1[id as usize] *= s;
            t.weights2[id as usize] *= s;
            let scaled = t.embed_token(id).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a * s - b).abs() < 1e-12);
            }
        }
    }
}
