//! Exact sparse recovery under insertions and deletions.
//!
//! A [`KSet`] is a grid of `rows x buckets` cells. Each coordinate lands in
//! one bucket per row, and every cell keeps three linear aggregates of the
//! coordinates hashed to it: the value sum, the index-weighted value sum, and
//! the fingerprint `sum v_i r^i` over the Mersenne field for a random base `r`.
//! A low-degree polynomial fingerprint would be blind to vectors that are
//! finite differences along an arithmetic progression of indices, which
//! smooth data produces. A cell holding exactly one
//! coordinate reveals it (`index = index_sum / count`, confirmed by the
//! fingerprint). Decoding peels pure cells across rows until nothing changes.
//!
//! The query returns the whole vector when its support is at most the
//! capacity, and [`KSetOutput::Fail`] when peeling stalls or the recovered
//! support exceeds the capacity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::randkit::{add61, derive_seed, field61, mul61, pow61, MersenneHash, MERSENNE_61};

/// Linear aggregates of the coordinates hashed into one bucket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cell {
    pub count: i64,
    pub index_sum: i64,
    pub fingerprint: u64,
}

impl Cell {
    pub fn is_zero(&self) -> bool {
        self.count == 0 && self.index_sum == 0 && self.fingerprint == 0
    }
}

/// Bytes per stored cell.
pub const CELL_BYTES: usize = std::mem::size_of::<Cell>();

/// A sparse vector as sorted `(index, value)` pairs with nonzero values.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparseVector {
    pub entries: Vec<(u64, i64)>,
}

impl SparseVector {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<i64> {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .ok()
            .map(|pos| self.entries[pos].1)
    }
}

/// Query outcome. `Fail` is a value, not an error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KSetOutput {
    Vector(SparseVector),
    Fail,
}

impl KSetOutput {
    pub fn vector(self) -> Option<SparseVector> {
        match self {
            KSetOutput::Vector(v) => Some(v),
            KSetOutput::Fail => None,
        }
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, KSetOutput::Fail)
    }
}

/// Shape of a [`KSet`] for a given capacity and failure probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KSetShape {
    pub rows: usize,
    pub buckets: usize,
}

impl KSetShape {
    /// `max(3, ceil(log2(k/delta) / 4))` rows (capped at 8), each with
    /// `ceil(1.5 k) + 8` buckets.
    pub fn for_capacity(capacity: usize, fail_prob: f64) -> Self {
        let ratio = (capacity.max(1) as f64 / fail_prob).log2();
        let rows = ((ratio / 4.0).ceil() as usize).clamp(3, 8);
        let buckets = (1.5 * capacity as f64).ceil() as usize + 8;
        Self { rows, buckets }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.buckets
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KSet {
    capacity: usize,
    fail_prob: f64,
    universe: u64,
    seed: u64,
    shape: KSetShape,
    row_hashes: Vec<MersenneHash>,
    /// Fingerprint base `r` in `[2, 2^61 - 1)`.
    fingerprint: u64,
    /// Row-major `rows x buckets`; empty until the first update.
    cells: Vec<Cell>,
    updates: u64,
}

impl KSet {
    pub fn new(capacity: usize, fail_prob: f64, universe: u64, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("k-set capacity must be positive"));
        }
        if !(fail_prob > 0.0 && fail_prob < 1.0) {
            return Err(Error::config(format!(
                "k-set failure probability must lie in (0, 1), got {fail_prob}"
            )));
        }
        if universe == 0 {
            return Err(Error::config("k-set universe must be positive"));
        }
        let shape = KSetShape::for_capacity(capacity, fail_prob);
        let row_hashes = (0..shape.rows)
            .map(|r| MersenneHash::new(derive_seed(seed, r as u64), 2))
            .collect();
        let fingerprint = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)).random_range(2..MERSENNE_61);
        Ok(Self {
            capacity,
            fail_prob,
            universe,
            seed,
            shape,
            row_hashes,
            fingerprint,
            cells: Vec::new(),
            updates: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fail_prob(&self) -> f64 {
        self.fail_prob
    }

    pub fn universe(&self) -> u64 {
        self.universe
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shape(&self) -> KSetShape {
        self.shape
    }

    /// Number of updates applied so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Nominal cell count, fixed at construction.
    pub fn cell_count(&self) -> usize {
        self.shape.cells()
    }

    /// Nominal payload: cells plus hash state.
    pub fn space_bytes(&self) -> usize {
        self.cell_count() * CELL_BYTES
            + self.row_hashes.iter().map(|h| h.state_bytes()).sum::<usize>()
            + 8
    }

    /// Cell value at `(row, bucket)`; zero if the grid was never touched.
    pub fn cell(&self, row: usize, bucket: usize) -> Cell {
        if self.cells.is_empty() {
            Cell::default()
        } else {
            self.cells[row * self.shape.buckets + bucket]
        }
    }

    /// True when every cell is zero.
    pub fn is_zero(&self) -> bool {
        self.cells.iter().all(Cell::is_zero)
    }

    /// Cell-wise equality of states, treating an untouched grid as zeros.
    pub fn same_state(&self, other: &KSet) -> bool {
        if self.shape != other.shape {
            return false;
        }
        (0..self.shape.rows).all(|r| {
            (0..self.shape.buckets).all(|b| self.cell(r, b) == other.cell(r, b))
        })
    }

    #[inline]
    fn fingerprint_of(&self, coord: u64) -> u64 {
        pow61(self.fingerprint, coord)
    }

    #[inline]
    fn bucket(&self, row: usize, coord: u64) -> usize {
        self.row_hashes[row].bucket(coord, self.shape.buckets)
    }

    /// Applies `v[coord] += delta`.
    pub fn update(&mut self, coord: u64, delta: i64) -> Result<()> {
        if coord >= self.universe {
            return Err(Error::domain(format!(
                "coordinate {coord} outside universe {}",
                self.universe
            )));
        }
        self.updates += 1;
        if delta == 0 {
            return Ok(());
        }
        let weighted = (coord as i64)
            .checked_mul(delta)
            .ok_or_else(|| Error::Overflow(format!("index weight {coord} * {delta}")))?;
        let fp = mul61(self.fingerprint_of(coord), field61(delta));
        if self.cells.is_empty() {
            self.cells = vec![Cell::default(); self.shape.cells()];
        }
        for row in 0..self.shape.rows {
            let idx = row * self.shape.buckets + self.bucket(row, coord);
            let cell = &mut self.cells[idx];
            let count = cell.count.checked_add(delta);
            let index_sum = cell.index_sum.checked_add(weighted);
            match (count, index_sum) {
                (Some(c), Some(s)) => {
                    cell.count = c;
                    cell.index_sum = s;
                    cell.fingerprint = add61(cell.fingerprint, fp);
                }
                _ => {
                    return Err(Error::Overflow(format!(
                        "k-set cell overflow at coordinate {coord}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Adds another k-set's state cell-wise. Both must share shape and seed.
    pub fn merge(&mut self, other: &KSet) -> Result<()> {
        if self.shape != other.shape || self.seed != other.seed || self.universe != other.universe
        {
            return Err(Error::config("cannot merge k-sets with different seeds or shapes"));
        }
        self.updates += other.updates;
        if other.cells.is_empty() {
            return Ok(());
        }
        if self.cells.is_empty() {
            self.cells = vec![Cell::default(); self.shape.cells()];
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.count = a
                .count
                .checked_add(b.count)
                .ok_or_else(|| Error::Overflow("k-set merge".into()))?;
            a.index_sum = a
                .index_sum
                .checked_add(b.index_sum)
                .ok_or_else(|| Error::Overflow("k-set merge".into()))?;
            a.fingerprint = add61(a.fingerprint, b.fingerprint);
        }
        Ok(())
    }

    /// Decodes the cell as a single coordinate, if it holds exactly one.
    fn pure(&self, cell: &Cell, row: usize, bucket: usize) -> Option<(u64, i64)> {
        if cell.count == 0 || cell.index_sum % cell.count != 0 {
            return None;
        }
        let index = cell.index_sum / cell.count;
        if index < 0 || index as u64 >= self.universe {
            return None;
        }
        let index = index as u64;
        if self.bucket(row, index) != bucket {
            return None;
        }
        let expected = mul61(self.fingerprint_of(index), field61(cell.count));
        (expected == cell.fingerprint).then_some((index, cell.count))
    }

    /// Recovers the vector, or reports `Fail`.
    pub fn query(&self) -> KSetOutput {
        if self.cells.is_empty() {
            return KSetOutput::Vector(SparseVector::default());
        }
        let buckets = self.shape.buckets;
        let mut cells = self.cells.clone();
        let mut recovered: BTreeMap<u64, i64> = BTreeMap::new();
        let mut pending: Vec<usize> = (0..cells.len()).filter(|&i| !cells[i].is_zero()).collect();

        while let Some(ci) = pending.pop() {
            let (row, bucket) = (ci / buckets, ci % buckets);
            let Some((index, value)) = self.pure(&cells[ci], row, bucket) else {
                continue;
            };
            let fp = mul61(self.fingerprint_of(index), field61(value));
            let neg_fp = (MERSENNE_61 - fp) % MERSENNE_61;
            for r in 0..self.shape.rows {
                let cj = r * buckets + self.bucket(r, index);
                let cell = &mut cells[cj];
                // Exact inverse of additions that already succeeded.
                cell.count -= value;
                cell.index_sum -= index as i64 * value;
                cell.fingerprint = add61(cell.fingerprint, neg_fp);
                if !cell.is_zero() {
                    pending.push(cj);
                }
            }
            // A correct peel removes a coordinate for good.
            if recovered.insert(index, value).is_some() || recovered.len() > self.capacity {
                return KSetOutput::Fail;
            }
        }

        if cells.iter().any(|c| !c.is_zero()) {
            return KSetOutput::Fail;
        }
        KSetOutput::Vector(SparseVector {
            entries: recovered.into_iter().collect(),
        })
    }

    pub(crate) fn raw_cells(&self) -> &[Cell] {
        &self.cells
    }

    pub(crate) fn restore(&mut self, cells: Vec<Cell>, updates: u64) -> Result<()> {
        if !cells.is_empty() && cells.len() != self.shape.cells() {
            return Err(Error::config("k-set cell count mismatch"));
        }
        self.cells = cells;
        self.updates = updates;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_oracle(n: usize, updates: &[(u64, i64)]) -> Vec<(u64, i64)> {
        let mut v = vec![0i64; n];
        for &(c, d) in updates {
            v[c as usize] += d;
        }
        v.iter()
            .enumerate()
            .filter(|(_, &x)| x != 0)
            .map(|(i, &x)| (i as u64, x))
            .collect()
    }

    #[test]
    fn finite_difference_noise_is_not_pure() {
        // 20 * (1, -4, 6, -4, 1) on a progression has zero count, zero index
        // sum and zero sum against any cubic.
        let s = KSet::new(8, 0.01, 1000, 11).unwrap();
        let mut cell = Cell::default();
        let mut add = |c: u64, v: i64| {
            cell.count += v;
            cell.index_sum += c as i64 * v;
            cell.fingerprint = add61(cell.fingerprint, mul61(s.fingerprint_of(c), field61(v)));
        };
        for (k, w) in [1i64, -4, 6, -4, 1].into_iter().enumerate() {
            add(131 + 215 * k as u64, 20 * w);
        }
        add(776, 205);
        assert_eq!((cell.count, cell.index_sum), (205, 776 * 205));
        assert_eq!(s.pure(&cell, 0, s.bucket(0, 776)), None);
    }

    #[test]
    fn empty_sketch_returns_empty_vector() {
        let s = KSet::new(8, 0.01, 100, 1).unwrap();
        assert_eq!(s.query(), KSetOutput::Vector(SparseVector::default()));
    }

    #[test]
    fn insert_then_delete_restores_empty_state() {
        let empty = KSet::new(8, 0.01, 100, 1).unwrap();
        let mut s = empty.clone();
        s.update(3, 1).unwrap();
        s.update(3, -1).unwrap();
        assert!(s.same_state(&empty));
        assert!(s.query().vector().unwrap().is_empty());
    }

    #[test]
    fn five_distinct_coordinates_recovered() {
        let updates = [(4u64, 2i64), (17, -5), (63, 1), (90, 7), (12, 3)];
        let mut s = KSet::new(8, 0.01, 100, 42).unwrap();
        for &(c, d) in &updates {
            s.update(c, d).unwrap();
        }
        let got = s.query().vector().expect("support 5 <= k = 8");
        assert_eq!(got.entries, dense_oracle(100, &updates));
    }

    #[test]
    fn support_exactly_k_recovers_across_seeds() {
        let k = 16;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut updates = Vec::new();
            let mut coords = std::collections::BTreeSet::new();
            while coords.len() < k {
                coords.insert(rng.random_range(0..1000u64));
            }
            for &c in &coords {
                updates.push((c, rng.random_range(1..50i64) * if rng.random() { 1 } else { -1 }));
            }
            let mut s = KSet::new(k, 0.01, 1000, seed).unwrap();
            for &(c, d) in &updates {
                s.update(c, d).unwrap();
            }
            assert_eq!(s.query().vector().unwrap().entries, dense_oracle(1000, &updates));
        }
    }

    #[test]
    fn support_four_k_fails() {
        let k = 16;
        let mut fails = 0;
        for seed in 0..1000u64 {
            let mut s = KSet::new(k, 0.01, 10_000, seed).unwrap();
            for c in 0..(4 * k) as u64 {
                s.update(c * 37 + (seed % 37), 1).unwrap();
            }
            fails += s.query().is_fail() as usize;
        }
        assert!(fails >= 990, "only {fails} of 1000 failed");
    }

    #[test]
    fn out_of_range_coordinate() {
        let mut s = KSet::new(4, 0.1, 10, 0).unwrap();
        assert!(matches!(s.update(10, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut s = KSet::new(4, 0.1, 10, 0).unwrap();
        s.update(1, i64::MAX).unwrap();
        assert!(matches!(s.update(1, 1), Err(Error::Overflow(_))));
    }

    #[test]
    fn bad_configuration() {
        assert!(KSet::new(0, 0.1, 10, 0).is_err());
        assert!(KSet::new(4, 0.0, 10, 0).is_err());
        assert!(KSet::new(4, 1.0, 10, 0).is_err());
        assert!(KSet::new(4, 0.1, 0, 0).is_err());
    }

    #[test]
    fn cell_count_tracks_shape() {
        let s = KSet::new(64, 0.01, 10_000, 0).unwrap();
        let shape = KSetShape::for_capacity(64, 0.01);
        assert_eq!(s.cell_count(), shape.rows * shape.buckets);
        // O(k log(k/delta)) with small constants.
        let bound = 64.0 * (64.0f64 / 0.01).log2() * 2.0;
        assert!((s.cell_count() as f64) <= bound);
    }

    #[test]
    fn cell_count_equals_reference_accumulator() {
        let mut s = KSet::new(32, 0.01, 500, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = vec![0i64; 500];
        for _ in 0..300 {
            let c = rng.random_range(0..500u64);
            let d = rng.random_range(-3..=3i64);
            s.update(c, d).unwrap();
            v[c as usize] += d;
        }
        for row in 0..s.shape().rows {
            let mut sums = vec![0i64; s.shape().buckets];
            for (i, &x) in v.iter().enumerate() {
                sums[s.bucket(row, i as u64)] += x;
            }
            for (b, &expected) in sums.iter().enumerate() {
                assert_eq!(s.cell(row, b).count, expected);
            }
        }
    }
}
