//! Sketches of `Z = f(A) * B` for a streamed matrix `A` and a fixed `B`.
//!
//! Cell `(i, j)` of the grid estimates `<B[:, j], f(A[i, :])>`, so an update
//! `(i, c, delta)` touches only the cells of row `i`, each at coordinate `c`.
//!
//! Two layouts are available:
//!
//! * [`Layout::Independent`]: every cell owns its own vector sketch.
//! * [`Layout::SharedRow`]: each row owns one level set that records the
//!   subsampled row of `A` exactly. Every cell of the row, and the row norm,
//!   is read off the same recovered sample. This costs a factor `k` less
//!   memory and works for any transform.
//!
//! Each row draws its own subsample with one hash `h_i`, and level `l` keeps
//! coordinate `c` when `h_i(c) < p_l * modulus`, so levels are nested. Rows
//! sampled independently keep errors uncorrelated across rows; a sample
//! shared by all rows would bend every row of `Z` by the same random Gram
//! matrix.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fsketch::{
    dequantize, quantize, LevelPlan, LogSumConfig, PolySumConfig, PolySumSketch,
    DEFAULT_SCALE_BITS,
};
use crate::kset::{KSet, SparseVector};
use crate::randkit::{derive_seed, HashFamily};

const SAMPLER_TAG: u64 = 0x4d50_4c56;
const CELL_TAG: u64 = 0x4d50_434c;

/// The entrywise function `f`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    /// `log^power(|v| + 1)`.
    Log1p { power: u32 },
    /// `|v|^p` with `p` in `(0, 2]`.
    Pow { p: f64 },
}

impl Transform {
    pub const LOG1P: Transform = Transform::Log1p { power: 1 };

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            Transform::Log1p { power: 1 } => v.abs().ln_1p(),
            Transform::Log1p { power } => v.abs().ln_1p().powi(power as i32),
            Transform::Pow { p } => {
                if v == 0.0 {
                    0.0
                } else {
                    v.abs().powf(p)
                }
            }
        }
    }

    /// `f^2`, used for row norms. Powers need `p <= 1` so that `2p <= 2`.
    pub fn squared(&self) -> Result<Transform> {
        match *self {
            Transform::Log1p { power } => Ok(Transform::Log1p { power: 2 * power }),
            Transform::Pow { p } if p <= 1.0 => Ok(Transform::Pow { p: 2.0 * p }),
            Transform::Pow { p } => Err(Error::config(format!(
                "row norms of |x|^{p} need p <= 1"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::Log1p { power: 0 } => Err(Error::config("log power must be at least 1")),
            Transform::Pow { p } if !(p > 0.0 && p <= 2.0) => {
                Err(Error::config(format!("p must lie in (0, 2], got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply_matrix(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        a.map(|v| self.apply(v))
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Log1p { power: 1 } => write!(f, "log1p"),
            Transform::Log1p { power } => write!(f, "log1p:{power}"),
            Transform::Pow { p } => write!(f, "pow:{p}"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    /// Accepts `log1p`, `log1p:C` and `pow:P`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s, None),
        };
        let t = match (name, arg) {
            ("log1p", None) => Transform::LOG1P,
            ("log1p", Some(c)) => Transform::Log1p {
                power: c.parse().map_err(|_| Error::config(format!("bad log power {c:?}")))?,
            },
            ("pow", Some(p)) => Transform::Pow {
                p: p.parse().map_err(|_| Error::config(format!("bad exponent {p:?}")))?,
            },
            _ => return Err(Error::config(format!("unknown transform {s:?}"))),
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Independent,
    SharedRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatProdConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub layout: Layout,
    /// Accept arbitrary real `B` with a log transform.
    pub real_weights: bool,
    /// Shared-row only: record every coordinate, not just those with a
    /// nonzero weight, so that row norms can be read off the same sample.
    pub cover_all: bool,
    pub gamma: Option<f64>,
    pub capacity: Option<usize>,
    pub capacity_const: f64,
    pub hash_degree: Option<usize>,
    pub kset_fail_prob: Option<f64>,
    pub copies_const: f64,
    pub width_const: f64,
    pub scale_bits: u32,
    pub seed: u64,
}

impl MatProdConfig {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            layout: Layout::Independent,
            real_weights: false,
            cover_all: false,
            gamma: None,
            capacity: None,
            capacity_const: 8.0,
            hash_degree: None,
            kset_fail_prob: None,
            copies_const: 16.0,
            width_const: 4.0,
            scale_bits: DEFAULT_SCALE_BITS,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    fn level_config(&self, delta: f64) -> LogSumConfig {
        LogSumConfig {
            epsilon: self.epsilon,
            delta,
            power: 1,
            gamma: self.gamma,
            capacity: self.capacity,
            capacity_const: self.capacity_const,
            hash_degree: self.hash_degree,
            kset_fail_prob: self.kset_fail_prob,
            scale_bits: self.scale_bits,
            seed: self.seed,
        }
    }
}

/// Nominal storage of a sketch, in bytes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpaceReport {
    pub cells: usize,
    pub cell_bytes: usize,
    pub hash_bytes: usize,
}

impl SpaceReport {
    pub fn total(&self) -> usize {
        self.cell_bytes + self.hash_bytes
    }
}

/// Query result: estimates plus a mask of cells whose sketch failed.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductEstimate {
    pub z: DMatrix<f64>,
    pub failed: DMatrix<bool>,
}

impl ProductEstimate {
    pub fn failures(&self) -> usize {
        self.failed.iter().filter(|&&f| f).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowNormEstimate {
    pub values: DVector<f64>,
    pub failed: Vec<bool>,
}

#[derive(Clone, Debug)]
enum Body {
    Levels {
        plan: LevelPlan,
        /// One subsampling hash per row.
        samplers: Vec<HashFamily>,
        /// Per level, `h(c) < thresholds[l]` keeps `c`; non-increasing.
        thresholds: Vec<u64>,
        /// Shared-row only: whether a coordinate is recorded at all.
        guard: Vec<bool>,
        ksets: Vec<KSet>,
    },
    Poly {
        cells: Vec<PolySumSketch>,
    },
}

#[derive(Clone, Debug)]
pub struct MatrixProductSketch {
    n_rows: usize,
    n_coords: usize,
    weights: DMatrix<f64>,
    transform: Transform,
    cfg: MatProdConfig,
    body: Body,
    updates: u64,
}

impl MatrixProductSketch {
    /// `weights` is `B`, with one row per coordinate and one column per output.
    pub fn new(
        n_rows: usize,
        weights: DMatrix<f64>,
        transform: Transform,
        cfg: MatProdConfig,
    ) -> Result<Self> {
        transform.validate()?;
        let (n_coords, k) = weights.shape();
        if n_rows == 0 || n_coords == 0 || k == 0 {
            return Err(Error::config("matrix product sketch needs nonzero dimensions"));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("weights must be finite"));
        }
        let is_log = matches!(transform, Transform::Log1p { .. });
        if is_log && !cfg.real_weights && weights.iter().any(|&v| v != 0.0 && v.abs() != 1.0) {
            return Err(Error::config(
                "weights must lie in {-1, 0, 1}; enable real_weights for general B",
            ));
        }
        let body = match (cfg.layout, transform) {
            (Layout::Independent, Transform::Pow { p }) => {
                let cells = (0..n_rows * k)
                    .map(|c| {
                        let mut pc = PolySumConfig::new(cfg.epsilon, p)
                            .with_seed(derive_seed(derive_seed(cfg.seed, CELL_TAG), c as u64));
                        pc.copies_const = cfg.copies_const;
                        pc.width_const = cfg.width_const;
                        pc.scale_bits = cfg.scale_bits;
                        PolySumSketch::new(weights.column(c % k).iter().copied().collect(), pc)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Body::Poly { cells }
            }
            (layout, _) => {
                let cells_per_row = if layout == Layout::Independent { k } else { 1 };
                let cell_delta = cfg.delta / (n_rows * cells_per_row) as f64;
                let plan = LevelPlan::resolve(n_coords as u64, &cfg.level_config(cell_delta))?;
                let sampler_seed = derive_seed(cfg.seed, SAMPLER_TAG);
                let samplers = (0..n_rows as u64)
                    .map(|r| HashFamily::new(derive_seed(sampler_seed, r), plan.hash_degree, n_coords as u64))
                    .collect::<Result<Vec<_>>>()?;
                let modulus = samplers[0].modulus();
                let thresholds = plan
                    .probs
                    .iter()
                    .map(|&p| if p >= 1.0 { modulus } else { (p * modulus as f64).round() as u64 })
                    .collect();
                let guard = (0..n_coords)
                    .map(|c| cfg.cover_all || weights.row(c).iter().any(|&v| v != 0.0))
                    .collect();
                let base = derive_seed(cfg.seed, CELL_TAG);
                let ksets = (0..n_rows * cells_per_row)
                    .flat_map(|c| (0..plan.levels).map(move |l| (c, l)))
                    .map(|(c, l)| {
                        let seed = derive_seed(derive_seed(base, c as u64), l as u64);
                        KSet::new(plan.capacity, plan.kset_fail_prob, n_coords as u64, seed)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Body::Levels {
                    plan,
                    samplers,
                    thresholds,
                    guard,
                    ksets,
                }
            }
        };
        Ok(Self {
            n_rows,
            n_coords,
            weights,
            transform,
            cfg,
            body,
            updates: 0,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_coords(&self) -> usize {
        self.n_coords
    }

    pub fn k(&self) -> usize {
        self.weights.ncols()
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    pub fn config(&self) -> &MatProdConfig {
        &self.cfg
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Number of vector sketches: `n_rows * k`, or `n_rows` when rows share.
    pub fn cell_count(&self) -> usize {
        match self.cfg.layout {
            Layout::Independent => self.n_rows * self.k(),
            Layout::SharedRow => self.n_rows,
        }
    }

    /// Level parameters, when the sketch is level-based.
    pub fn plan(&self) -> Option<&LevelPlan> {
        match &self.body {
            Body::Levels { plan, .. } => Some(plan),
            Body::Poly { .. } => None,
        }
    }

    /// Nominal storage: k-set or count-sketch cells plus hash state. `B` is
    /// not counted.
    pub fn space(&self) -> SpaceReport {
        match &self.body {
            Body::Levels {
                samplers,
                thresholds,
                ksets,
                ..
            } => {
                let cells = ksets.iter().map(KSet::cell_count).sum::<usize>();
                let total = ksets.iter().map(KSet::space_bytes).sum::<usize>();
                let cell_bytes = cells * crate::kset::CELL_BYTES;
                SpaceReport {
                    cells,
                    cell_bytes,
                    hash_bytes: total - cell_bytes
                        + samplers.iter().map(HashFamily::state_bytes).sum::<usize>()
                        + 8 * thresholds.len(),
                }
            }
            Body::Poly { cells } => {
                let total = cells.iter().map(PolySumSketch::space_bytes).sum::<usize>();
                let n = cells
                    .iter()
                    .map(|c| 2 * c.rows() * c.width())
                    .sum::<usize>();
                SpaceReport {
                    cells: n,
                    cell_bytes: 16 * n,
                    hash_bytes: total - 16 * n,
                }
            }
        }
    }

    pub fn update(&mut self, row: usize, coord: usize, delta: f64) -> Result<()> {
        let value = quantize(delta, self.cfg.scale_bits)?;
        self.update_fixed(row, coord, value)
    }

    /// Applies a delta expressed at the sketch's fixed-point scale.
    pub fn update_fixed(&mut self, row: usize, coord: usize, value: i64) -> Result<()> {
        if row >= self.n_rows || coord >= self.n_coords {
            return Err(Error::domain(format!(
                "update ({row}, {coord}) outside {}x{}",
                self.n_rows, self.n_coords
            )));
        }
        self.updates += 1;
        if value == 0 {
            return Ok(());
        }
        let k = self.weights.ncols();
        let c = coord as u64;
        match &mut self.body {
            Body::Levels {
                plan,
                samplers,
                thresholds,
                guard,
                ksets,
            } => {
                let t = plan.levels;
                let h = samplers[row].eval_unchecked(c);
                let depth = thresholds.iter().take_while(|&&th| h < th).count();
                if depth == 0 {
                    return Ok(());
                }
                let mut touch = |cell: usize| -> Result<()> {
                    for l in 0..depth {
                        ksets[cell * t + l].update(c, value)?;
                    }
                    Ok(())
                };
                match self.cfg.layout {
                    Layout::SharedRow => {
                        if guard[coord] {
                            touch(row)?;
                        }
                    }
                    Layout::Independent => {
                        for j in 0..k {
                            if self.weights[(coord, j)] != 0.0 {
                                touch(row * k + j)?;
                            }
                        }
                    }
                }
            }
            Body::Poly { cells } => {
                for j in 0..k {
                    cells[row * k + j].update_fixed(c, value)?;
                }
            }
        }
        Ok(())
    }

    /// Densest level of `cell` whose k-set decodes, with its sample.
    fn decode(&self, cell: usize) -> Option<(f64, SparseVector)> {
        let Body::Levels {
            plan, ksets, ..
        } = &self.body
        else {
            return None;
        };
        (0..plan.levels).find_map(|l| {
            ksets[cell * plan.levels + l]
                .query()
                .vector()
                .map(|v| (plan.probs[l], v))
        })
    }

    pub fn query(&self) -> ProductEstimate {
        let k = self.weights.ncols();
        let mut z = DMatrix::zeros(self.n_rows, k);
        let mut failed = DMatrix::from_element(self.n_rows, k, false);
        let scale = self.cfg.scale_bits;
        match (&self.body, self.cfg.layout) {
            (Body::Poly { cells }, _) => {
                for i in 0..self.n_rows {
                    for j in 0..k {
                        z[(i, j)] = cells[i * k + j].query();
                    }
                }
            }
            (Body::Levels { .. }, Layout::Independent) => {
                for i in 0..self.n_rows {
                    for j in 0..k {
                        match self.decode(i * k + j) {
                            Some((p, v)) => {
                                let s: f64 = v
                                    .entries
                                    .iter()
                                    .map(|&(a, val)| {
                                        self.weights[(a as usize, j)]
                                            * self.transform.apply(dequantize(val, scale))
                                    })
                                    .sum();
                                z[(i, j)] = s / p;
                            }
                            None => failed[(i, j)] = true,
                        }
                    }
                }
            }
            (Body::Levels { .. }, Layout::SharedRow) => {
                for i in 0..self.n_rows {
                    match self.decode(i) {
                        Some((p, v)) => {
                            for &(a, val) in &v.entries {
                                let fv = self.transform.apply(dequantize(val, scale)) / p;
                                for j in 0..k {
                                    z[(i, j)] += self.weights[(a as usize, j)] * fv;
                                }
                            }
                        }
                        None => failed.row_mut(i).fill(true),
                    }
                }
            }
        }
        ProductEstimate { z, failed }
    }

    /// Estimates `sum_c f^2(A[i, c])` per row from the shared samples.
    ///
    /// Requires the shared-row layout with `cover_all`.
    pub fn query_row_norms(&self) -> Result<RowNormEstimate> {
        if self.cfg.layout != Layout::SharedRow || !self.cfg.cover_all {
            return Err(Error::config(
                "row norms need the shared-row layout with cover_all",
            ));
        }
        let sq = self.transform.squared()?;
        let scale = self.cfg.scale_bits;
        let mut values = DVector::zeros(self.n_rows);
        let mut failed = vec![false; self.n_rows];
        for i in 0..self.n_rows {
            match self.decode(i) {
                Some((p, v)) => {
                    values[i] = v
                        .entries
                        .iter()
                        .map(|&(_, val)| sq.apply(dequantize(val, scale)))
                        .sum::<f64>()
                        / p;
                }
                None => failed[i] = true,
            }
        }
        Ok(RowNormEstimate { values, failed })
    }
}

/// Row norms `sum_c f^2(A[i, c])` via a one-column product against all-ones.
#[derive(Clone, Debug)]
pub struct RowNormSketch {
    inner: MatrixProductSketch,
}

impl RowNormSketch {
    pub fn new(n_rows: usize, n_coords: usize, transform: Transform, cfg: MatProdConfig) -> Result<Self> {
        let sq = transform.squared()?;
        let ones = DMatrix::from_element(n_coords, 1, 1.0);
        Ok(Self {
            inner: MatrixProductSketch::new(n_rows, ones, sq, cfg)?,
        })
    }

    pub fn update(&mut self, row: usize, coord: usize, delta: f64) -> Result<()> {
        self.inner.update(row, coord, delta)
    }

    pub fn update_fixed(&mut self, row: usize, coord: usize, value: i64) -> Result<()> {
        self.inner.update_fixed(row, coord, value)
    }

    pub fn space(&self) -> SpaceReport {
        self.inner.space()
    }

    pub fn query(&self) -> RowNormEstimate {
        let est = self.inner.query();
        RowNormEstimate {
            values: est.z.column(0).into_owned(),
            failed: est.failed.column(0).iter().copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(n: usize, k: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, k, 1.0)
    }

    #[test]
    fn transform_parsing_and_display() {
        assert_eq!("log1p".parse::<Transform>().unwrap(), Transform::LOG1P);
        assert_eq!("log1p:2".parse::<Transform>().unwrap(), Transform::Log1p { power: 2 });
        assert_eq!("pow:0.5".parse::<Transform>().unwrap(), Transform::Pow { p: 0.5 });
        assert!("pow:3".parse::<Transform>().is_err());
        assert!("exp".parse::<Transform>().is_err());
        assert_eq!(Transform::Pow { p: 0.5 }.to_string(), "pow:0.5");
        assert_eq!(Transform::LOG1P.to_string(), "log1p");
    }

    #[test]
    fn squared_transforms() {
        assert_eq!(Transform::LOG1P.squared().unwrap(), Transform::Log1p { power: 2 });
        assert_eq!(Transform::Pow { p: 0.5 }.squared().unwrap(), Transform::Pow { p: 1.0 });
        assert!(Transform::Pow { p: 1.5 }.squared().is_err());
    }

    #[test]
    fn allocates_one_cell_per_row_and_column() {
        let s = MatrixProductSketch::new(200, ones(200, 3), Transform::LOG1P, MatProdConfig::new(0.25, 0.1))
            .unwrap();
        assert_eq!(s.cell_count(), 600);
        let plan = s.plan().unwrap();
        assert_eq!(s.space().cells, 600 * plan.levels * s_cells_per_kset(plan));
    }

    fn s_cells_per_kset(plan: &LevelPlan) -> usize {
        crate::kset::KSetShape::for_capacity(plan.capacity, plan.kset_fail_prob).cells()
    }

    #[test]
    fn rejects_non_sign_weights_for_log() {
        let w = DMatrix::from_element(4, 1, 0.5);
        let cfg = MatProdConfig::new(0.25, 0.1);
        assert!(MatrixProductSketch::new(4, w.clone(), Transform::LOG1P, cfg.clone()).is_err());
        let mut real = cfg;
        real.real_weights = true;
        assert!(MatrixProductSketch::new(4, w, Transform::LOG1P, real).is_ok());
    }

    #[test]
    fn empty_stream_is_zero_matrix() {
        let s = MatrixProductSketch::new(5, ones(7, 2), Transform::LOG1P, MatProdConfig::new(0.25, 0.1))
            .unwrap();
        let q = s.query();
        assert_eq!(q.z, DMatrix::zeros(5, 2));
        assert_eq!(q.failures(), 0);
    }

    #[test]
    fn zero_weight_leaves_cell_untouched() {
        let mut w = ones(10, 3);
        w[(5, 2)] = 0.0;
        let mut s = MatrixProductSketch::new(4, w, Transform::LOG1P, MatProdConfig::new(0.25, 0.1)).unwrap();
        s.update(0, 5, 1.0).unwrap();
        let q = s.query();
        assert_eq!(q.z[(0, 2)], 0.0);
        assert!((q.z[(0, 0)] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_column_gives_zero_output() {
        let mut w = ones(10, 2);
        w.column_mut(1).fill(0.0);
        let mut s = MatrixProductSketch::new(3, w, Transform::LOG1P, MatProdConfig::new(0.25, 0.1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            s.update(rng.random_range(0..3), rng.random_range(0..10), 1.0).unwrap();
        }
        assert!(s.query().z.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cancelling_pair_restores_query() {
        let cfg = MatProdConfig::new(0.25, 0.1).with_seed(3);
        let mut s = MatrixProductSketch::new(4, ones(6, 2), Transform::LOG1P, cfg).unwrap();
        s.update(1, 2, 3.0).unwrap();
        let before = s.query();
        s.update(2, 4, 1.0).unwrap();
        s.update(2, 4, -1.0).unwrap();
        assert_eq!(s.query(), before);
    }

    #[test]
    fn diagonal_matrix_gives_log_two() {
        let n = 8;
        let w = DMatrix::<f64>::identity(n, n);
        let mut s = MatrixProductSketch::new(n, w, Transform::LOG1P, MatProdConfig::new(0.25, 0.1)).unwrap();
        for i in 0..n {
            s.update(i, i, 1.0).unwrap();
        }
        let q = s.query();
        for i in 0..n {
            assert!((q.z[(i, i)] - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_row_matches_independent_when_levels_are_exact() {
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1..=1) as f64);
        let mut a = MatrixProductSketch::new(n, w.clone(), Transform::LOG1P, MatProdConfig::new(0.25, 0.1))
            .unwrap();
        let cfg = MatProdConfig::new(0.25, 0.1).with_layout(Layout::SharedRow);
        let mut b = MatrixProductSketch::new(n, w, Transform::LOG1P, cfg).unwrap();
        for _ in 0..400 {
            let (i, c) = (rng.random_range(0..n), rng.random_range(0..n));
            let d = rng.random_range(-3..=3) as f64 * 0.25;
            a.update(i, c, d).unwrap();
            b.update(i, c, d).unwrap();
        }
        let (qa, qb) = (a.query(), b.query());
        assert!((qa.z - qb.z).abs().max() < 1e-9);
    }

    #[test]
    fn row_norm_of_unit_entry() {
        let mut s = RowNormSketch::new(3, 5, Transform::LOG1P, MatProdConfig::new(0.25, 0.1)).unwrap();
        s.update(1, 3, 1.0).unwrap();
        let q = s.query();
        assert_eq!(q.values[0], 0.0);
        assert!((q.values[1] - 2f64.ln().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn shared_row_norms_need_cover_all() {
        let cfg = MatProdConfig::new(0.25, 0.1).with_layout(Layout::SharedRow);
        let s = MatrixProductSketch::new(3, ones(4, 1), Transform::LOG1P, cfg.clone()).unwrap();
        assert!(s.query_row_norms().is_err());
        let mut all = cfg;
        all.cover_all = true;
        all.real_weights = true;
        let mut w = ones(4, 1);
        w[(2, 0)] = 0.0;
        let mut s = MatrixProductSketch::new(3, w, Transform::LOG1P, all).unwrap();
        s.update(0, 2, 1.0).unwrap();
        let q = s.query_row_norms().unwrap();
        assert!((q.values[0] - 2f64.ln().powi(2)).abs() < 1e-12);
        assert_eq!(s.query().z[(0, 0)], 0.0);
    }

    #[test]
    fn out_of_range_update() {
        let mut s = MatrixProductSketch::new(3, ones(4, 1), Transform::LOG1P, MatProdConfig::new(0.25, 0.1))
            .unwrap();
        assert!(matches!(s.update(3, 0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(s.update(0, 4, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn pow_transform_uses_polysum_cells() {
        let mut s = MatrixProductSketch::new(
            2,
            ones(50, 1),
            Transform::Pow { p: 1.0 },
            MatProdConfig::new(0.25, 0.1).with_seed(4),
        )
        .unwrap();
        s.update(0, 10, 7.0).unwrap();
        let q = s.query();
        assert!((q.z[(0, 0)] - 7.0).abs() <= 0.25 * 7.0);
        assert_eq!(q.z[(1, 0)], 0.0);
    }
}
