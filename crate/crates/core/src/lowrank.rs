//! Multi-pass rank-`k` approximation of `M = f(A)` for a streamed `A`.
//!
//! The pipeline makes five passes over a replayable stream:
//!
//! 1. sketch `E ~ R M` with `R = [S+; S-]` for an oblivious `S`, then sample
//!    `d1` columns `P` by the leverage scores of `E`'s columns;
//! 2. extract the columns in `P` exactly;
//! 3. sketch `Q_p^T M` and the column norms of `M` together, and sample `d2`
//!    more columns by their estimated residual mass;
//! 4. extract the new columns exactly;
//! 5. sketch `Q_y^T M` for the basis `Q_y` of all sampled columns, and return
//!    `L = Q_y W` with `W` the top-`k` left singular vectors of the sketch.
//!
//! Sketches run once per column of `A`: the "row" handed to
//! [`MatrixProductSketch`] is a column index and the coordinate is a row
//! index, so every estimate comes out transposed.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::densela::{
    complete_basis, leverage_sample, qr_basis, singular_values, split_pos_neg, topk_svd,
    LeverageScores, SketchTransform, TransformKind,
};
use crate::error::{Error, Result};
use crate::fsketch::dequantize;
use crate::matprod::{Layout, MatProdConfig, MatrixProductSketch, Transform};
use crate::randkit::derive_seed;
use crate::streams::UpdateStream;

const WORD: usize = 8;
const LEVERAGE_TOL: f64 = 1e-10;

/// How the residual scores become a sampling distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptiveVariant {
    /// `p_i = max(s_i, eta * z_i)`.
    ThresholdedEta,
    /// `q_i = max(s_i, 0)`, `p_i = q_i + sum(q) / n`.
    ExperimentalQi,
}

impl fmt::Display for AdaptiveVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptiveVariant::ThresholdedEta => "thresholded_eta",
            AdaptiveVariant::ExperimentalQi => "experimental_qi",
        })
    }
}

impl FromStr for AdaptiveVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thresholded_eta" => Ok(AdaptiveVariant::ThresholdedEta),
            "experimental_qi" => Ok(AdaptiveVariant::ExperimentalQi),
            _ => Err(Error::config(format!(
                "unknown variant {s:?}; expected thresholded_eta or experimental_qi"
            ))),
        }
    }
}

/// Where the products `X^T M` come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProductMode {
    /// Streaming sketches, five passes.
    Sketch,
    /// Accumulate `A` densely in one pass and use exact products. Same
    /// sampling as sketch mode, without sketch noise.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankConfig {
    pub k: usize,
    pub epsilon: f64,
    /// Rows of the oblivious sketch `S`.
    pub s: usize,
    /// Columns drawn by leverage scores.
    pub d1: usize,
    /// Columns drawn adaptively.
    pub d2: usize,
    pub eta: f64,
    pub variant: AdaptiveVariant,
    pub transform_kind: TransformKind,
    pub mode: ProductMode,
    /// Parameters of every matrix-product sketch. Layout, weight and seed
    /// fields are set per pass.
    pub sketch: MatProdConfig,
    /// Optional positive weight per column of `M`; the target becomes `M D`.
    pub column_weights: Option<Vec<f64>>,
    pub seed: u64,
}

fn log2_at_least_one(k: usize) -> f64 {
    (k as f64).log2().max(1.0)
}

impl LowRankConfig {
    /// Sizes from unit constants: `s = k log k`, `d1 = k log^2 k`,
    /// `d2 = k / eps`, `eta = eps sqrt(d1) + eps^2 d1` (logs base 2,
    /// floored at 1).
    pub fn new(k: usize, epsilon: f64) -> Self {
        Self::with_constants(k, epsilon, 1.0, 1.0, 1.0, 1.0)
    }

    pub fn with_constants(k: usize, epsilon: f64, c_s: f64, c_1: f64, c_2: f64, c_eta: f64) -> Self {
        let lg = log2_at_least_one(k);
        let kf = k as f64;
        let at_least_k = |v: f64| (v.ceil() as usize).max(k);
        let d1 = at_least_k(c_1 * kf * lg * lg);
        let d1f = d1 as f64;
        Self {
            k,
            epsilon,
            s: at_least_k(c_s * kf * lg),
            d1,
            d2: at_least_k(c_2 * kf / epsilon),
            eta: c_eta * (epsilon * d1f.sqrt() + epsilon * epsilon * d1f),
            variant: AdaptiveVariant::ExperimentalQi,
            transform_kind: TransformKind::CountSketch,
            mode: ProductMode::Sketch,
            sketch: MatProdConfig::new(epsilon, 0.1),
            column_weights: None,
            seed: 0,
        }
    }

    /// A single space budget: `s = d1 = d2 = budget`, k-set capacity
    /// `budget`, and level rates `min(2^-j, 1)`.
    pub fn with_budget(k: usize, epsilon: f64, budget: usize) -> Self {
        let mut cfg = Self::new(k, epsilon);
        cfg.s = budget;
        cfg.d1 = budget;
        cfg.d2 = budget;
        cfg.sketch.capacity = Some(budget);
        cfg.sketch.gamma = Some(2.0);
        cfg
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, n_rows: usize, n_cols: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.s < self.k || self.d1 < self.k || self.d2 < self.k {
            return Err(Error::config(format!(
                "s, d1, d2 = {}, {}, {} must all be at least k = {}",
                self.s, self.d1, self.d2, self.k
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta must be nonnegative"));
        }
        if self.k > n_rows.min(n_cols) {
            return Err(Error::config(format!(
                "k = {} exceeds the matrix dimensions {n_rows}x{n_cols}",
                self.k
            )));
        }
        if let Some(w) = &self.column_weights {
            if w.len() != n_cols {
                return Err(Error::config(format!("{} column weights for {n_cols} columns", w.len())));
            }
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::config("column weights must be positive and finite"));
            }
        }
        Ok(())
    }

    fn column_weight(&self, j: usize) -> f64 {
        self.column_weights.as_ref().map_or(1.0, |w| w[j])
    }

    fn sketch_config(&self, stage: u64, cover_all: bool, scale_bits: u8) -> MatProdConfig {
        let mut c = self.sketch.clone();
        c.layout = Layout::SharedRow;
        c.real_weights = true;
        c.cover_all = cover_all;
        c.scale_bits = scale_bits as u32;
        c.seed = derive_seed(self.seed, 0x534b_0000 + stage);
        c
    }
}

/// Conditions that changed the computation but did not abort it.
#[derive(Clone, Debug, PartialEq)]
pub enum Flag {
    /// The leverage scores were all zero and `P` was drawn uniformly.
    UniformLeverage,
    /// The adaptive scores were all zero and the extra columns were drawn
    /// uniformly.
    UniformAdaptive,
    /// The sampled columns span fewer than `k` directions; `L` was padded.
    RankDeficient { rank: usize },
}

/// Space and failure diagnostics for one pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageReport {
    pub stage: &'static str,
    pub pass: usize,
    /// Nominal sketch storage in bytes.
    pub sketch_bytes: usize,
    /// Dense columns and bases held during the pass, in bytes.
    pub dense_bytes: usize,
    /// Columns whose sketch failed at every level.
    pub failed_columns: usize,
}

impl StageReport {
    pub fn total(&self) -> usize {
        self.sketch_bytes + self.dense_bytes
    }
}

#[derive(Clone, Debug)]
pub struct LowRankResult {
    /// Orthonormal `n x k` factor.
    pub l: DMatrix<f64>,
    pub stages: Vec<StageReport>,
    pub pass_count: u64,
    pub flags: Vec<Flag>,
    /// Distinct columns drawn by leverage scores.
    pub p_columns: Vec<usize>,
    /// Distinct columns drawn adaptively and not already in `P`.
    pub y_columns: Vec<usize>,
}

impl LowRankResult {
    /// Largest per-pass footprint.
    pub fn peak_space_bytes(&self) -> usize {
        self.stages.iter().map(StageReport::total).max().unwrap_or(0)
    }

    pub fn failed_columns(&self) -> usize {
        self.stages.iter().map(|s| s.failed_columns).sum()
    }

    pub fn residual_fro(&self, m: &DMatrix<f64>) -> f64 {
        residual_fro(m, &self.l)
    }
}

/// `||M - L L^T M||_F`.
pub fn residual_fro(m: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    (m - l * (l.transpose() * m)).norm()
}

/// `||M - [M]_k||_F` from the singular values.
pub fn best_rank_k_residual(m: &DMatrix<f64>, k: usize) -> f64 {
    singular_values(m).iter().skip(k).map(|s| s * s).sum::<f64>().sqrt()
}

/// `||M||_{1,2} = (sum_j ||M[:, j]||_1^2)^{1/2}`.
pub fn norm_1_2(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-pass footprint planned before the run: nominal sketch bytes plus the
/// largest possible dense column and basis storage (`d1`, then `d1 + d2`
/// columns). The realized peak never exceeds it.
pub fn expected_space(n_rows: usize, n_cols: usize, cfg: &LowRankConfig, scale_bits: u8) -> Result<usize> {
    cfg.validate(n_rows, n_cols)?;
    let sketch = if cfg.mode == ProductMode::Exact {
        0
    } else {
        let probe = MatrixProductSketch::new(
            n_cols,
            DMatrix::from_element(n_rows, 1, 1.0),
            Transform::LOG1P,
            cfg.sketch_config(0, true, scale_bits),
        )?;
        probe.space().total()
    };
    let p = cfg.d1.min(n_cols);
    let y = (cfg.d1 + cfg.d2).min(n_cols);
    let col = n_rows * WORD;
    let passes = [
        sketch,
        p * col,
        sketch + 2 * p * col,
        y * col,
        sketch + y * col,
    ];
    Ok(passes.into_iter().max().unwrap_or(0))
}

/// Drives the stages against one stream.
pub struct Pipeline<'a> {
    stream: &'a mut dyn UpdateStream,
    cfg: LowRankConfig,
    f: Transform,
    n_rows: usize,
    n_cols: usize,
    scale_bits: u8,
    start_passes: u64,
    /// Dense `M`, exact mode only.
    dense: Option<DMatrix<f64>>,
    columns: HashMap<usize, DVector<f64>>,
    stages: Vec<StageReport>,
    flags: Vec<Flag>,
    p: Vec<usize>,
    y: Vec<usize>,
}

impl<'a> Pipeline<'a> {
    pub fn new(stream: &'a mut dyn UpdateStream, cfg: LowRankConfig, f: Transform) -> Result<Self> {
        f.validate()?;
        let h = stream.header();
        let (n_rows, n_cols) = (h.n_rows as usize, h.n_cols as usize);
        cfg.validate(n_rows, n_cols)?;
        if cfg.mode == ProductMode::Sketch && !stream.replayable() {
            return Err(Error::config("the low-rank pipeline needs a replayable stream"));
        }
        Ok(Self {
            start_passes: stream.passes(),
            stream,
            cfg,
            f,
            n_rows,
            n_cols,
            scale_bits: h.scale_bits,
            dense: None,
            columns: HashMap::new(),
            stages: Vec::new(),
            flags: Vec::new(),
            p: Vec::new(),
            y: Vec::new(),
        })
    }

    fn pass_number(&self) -> usize {
        (self.stream.passes() - self.start_passes) as usize
    }

    fn dense_m(&mut self) -> Result<&DMatrix<f64>> {
        if self.dense.is_none() {
            let a = crate::streams::accumulate(&mut *self.stream)?;
            let mut m = self.f.apply_matrix(&a);
            for (j, mut col) in m.column_iter_mut().enumerate() {
                col *= self.cfg.column_weight(j);
            }
            self.dense = Some(m);
        }
        Ok(self.dense.as_ref().unwrap())
    }

    /// Estimates `(X^T M)^T` (one row per column of `M`) and, when asked,
    /// the squared column norms of `M`.
    fn product(
        &mut self,
        stage: &'static str,
        tag: u64,
        x: &DMatrix<f64>,
        norms: bool,
        dense_bytes: usize,
    ) -> Result<(DMatrix<f64>, Option<DVector<f64>>)> {
        if self.cfg.mode == ProductMode::Exact {
            let m = self.dense_m()?;
            let z = m.transpose() * x;
            let nv = norms.then(|| DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.norm_squared())));
            let pass = self.pass_number();
            self.stages.push(StageReport {
                stage,
                pass,
                sketch_bytes: 0,
                dense_bytes,
                failed_columns: 0,
            });
            return Ok((z, nv));
        }
        // A zero-width basis still needs one weight column.
        let width = x.ncols().max(1);
        let mut weights = DMatrix::zeros(self.n_rows, width);
        weights.columns_mut(0, x.ncols()).copy_from(x);
        let mut sk = MatrixProductSketch::new(
            self.n_cols,
            weights,
            self.f,
            self.cfg.sketch_config(tag, norms, self.scale_bits),
        )?;
        self.stream
            .replay(&mut |e| sk.update_fixed(e.col as usize, e.row as usize, e.value))?;
        let est = sk.query();
        let failed_columns = (0..self.n_cols).filter(|&j| est.failed[(j, 0)]).count();
        if failed_columns == self.n_cols {
            return Err(Error::Pipeline {
                stage,
                msg: "every column sketch failed at every level".into(),
            });
        }
        let mut z = est.z.columns(0, x.ncols()).into_owned();
        let mut nv = if norms {
            Some(sk.query_row_norms()?.values)
        } else {
            None
        };
        for j in 0..self.n_cols {
            let w = self.cfg.column_weight(j);
            if w != 1.0 {
                z.row_mut(j).scale_mut(w);
                if let Some(v) = nv.as_mut() {
                    v[j] *= w * w;
                }
            }
        }
        let pass = self.pass_number();
        self.stages.push(StageReport {
            stage,
            pass,
            sketch_bytes: sk.space().total(),
            dense_bytes,
            failed_columns,
        });
        Ok((z, nv))
    }

    /// Materializes the requested columns of `M` exactly.
    fn extract(&mut self, stage: &'static str, cols: &[usize], held_bytes: usize) -> Result<()> {
        let fresh: Vec<usize> = cols.iter().copied().filter(|c| !self.columns.contains_key(c)).collect();
        let dense_bytes = held_bytes + fresh.len() * self.n_rows * WORD;
        if self.cfg.mode == ProductMode::Exact {
            let m = self.dense_m()?;
            let got: Vec<(usize, DVector<f64>)> = fresh.iter().map(|&c| (c, m.column(c).into_owned())).collect();
            self.columns.extend(got);
            let pass = self.pass_number();
            self.stages.push(StageReport {
                stage,
                pass,
                sketch_bytes: 0,
                dense_bytes,
                failed_columns: 0,
            });
            return Ok(());
        }
        let slot: HashMap<usize, usize> = fresh.iter().enumerate().map(|(s, &c)| (c, s)).collect();
        let n = self.n_rows;
        let mut acc = vec![0i64; n * fresh.len()];
        self.stream.replay(&mut |e| {
            if let Some(&s) = slot.get(&(e.col as usize)) {
                let cell = &mut acc[s * n + e.row as usize];
                *cell = cell
                    .checked_add(e.value)
                    .ok_or_else(|| Error::Overflow(format!("column {} row {}", e.col, e.row)))?;
            }
            Ok(())
        })?;
        let bits = self.scale_bits as u32;
        for (s, &c) in fresh.iter().enumerate() {
            let w = self.cfg.column_weight(c);
            let col = DVector::from_iterator(n, acc[s * n..(s + 1) * n].iter().map(|&v| w * self.f.apply(dequantize(v, bits))));
            self.columns.insert(c, col);
        }
        let pass = self.pass_number();
        self.stages.push(StageReport {
            stage,
            pass,
            sketch_bytes: 0,
            dense_bytes,
            failed_columns: 0,
        });
        Ok(())
    }

    fn gather(&self, cols: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_rows, cols.len());
        for (i, c) in cols.iter().enumerate() {
            out.set_column(i, &self.columns[c]);
        }
        out
    }

    fn draw(&self, weights: &[f64], count: usize, tag: u64) -> Result<Vec<usize>> {
        let (idx, _) = leverage_sample(weights, count, derive_seed(self.cfg.seed, tag))?;
        Ok(idx.into_iter().collect::<BTreeSet<_>>().into_iter().collect())
    }

    /// Passes 1 and 2: leverage-score sampling of `d1` columns, then their
    /// extraction. Returns the distinct sampled columns.
    pub fn stage1_leverage(&mut self) -> Result<Vec<usize>> {
        let sk = SketchTransform::new(
            self.cfg.transform_kind,
            self.cfg.s,
            self.n_rows,
            derive_seed(self.cfg.seed, 0x5331),
        )?;
        let r = split_pos_neg(&sk.to_dense());
        let (e_t, _) = self.product("leverage", 1, &r.transpose(), false, 0)?;
        let lev = LeverageScores::of_rows(&e_t, LEVERAGE_TOL);
        let mut q: Vec<f64> = lev.scores.iter().map(|&v| v.max(0.0)).collect();
        if q.iter().sum::<f64>() <= 0.0 {
            self.flags.push(Flag::UniformLeverage);
            q = vec![1.0; self.n_cols];
        }
        let p = self.draw(&q, self.cfg.d1, 0x5031)?;
        self.extract("extract_p", &p, 0)?;
        self.p = p.clone();
        Ok(p)
    }

    /// Passes 3 and 4: residual scores against `span(P)`, adaptive sampling
    /// of `d2` more columns, and their extraction. Returns `Y`, the union.
    pub fn stage2_adaptive(&mut self, p: &[usize]) -> Result<Vec<usize>> {
        if p.is_empty() {
            return Err(Error::Pipeline {
                stage: "adaptive",
                msg: "no columns were sampled in the first stage".into(),
            });
        }
        let mp = self.gather(p);
        let qp = qr_basis(&mp);
        let held = (p.len() + qp.ncols()) * self.n_rows * WORD;
        let (mut gamma_t, z) = self.product("adaptive", 3, &qp, true, held)?;
        let mut z = z.expect("norms requested");
        // Columns already extracted are known exactly.
        for (i, &c) in p.iter().enumerate() {
            let col = mp.column(i);
            gamma_t.set_row(c, &(qp.transpose() * col).transpose());
            z[c] = col.norm_squared();
        }
        let s: Vec<f64> = (0..self.n_cols)
            .map(|j| (z[j] - gamma_t.row(j).norm_squared()).max(0.0))
            .collect();
        let mut probs: Vec<f64> = match self.cfg.variant {
            AdaptiveVariant::ExperimentalQi => {
                let floor = s.iter().sum::<f64>() / self.n_cols as f64;
                s.iter().map(|v| v + floor).collect()
            }
            AdaptiveVariant::ThresholdedEta => s
                .iter()
                .zip(z.iter())
                .map(|(&v, &zj)| v.max(self.cfg.eta * zj.max(0.0)))
                .collect(),
        };
        if probs.iter().sum::<f64>() <= 0.0 {
            self.flags.push(Flag::UniformAdaptive);
            probs = vec![1.0; self.n_cols];
        }
        let drawn = self.draw(&probs, self.cfg.d2, 0x5932)?;
        let extra: Vec<usize> = drawn.into_iter().filter(|c| !p.contains(c)).collect();
        self.extract("extract_y", &extra, p.len() * self.n_rows * WORD)?;
        self.y = extra.clone();
        let mut y: Vec<usize> = p.iter().chain(&extra).copied().collect();
        y.sort_unstable();
        Ok(y)
    }

    /// Pass 5: project onto `span(Y)`, take the top-`k` directions of the
    /// sketched projection, and return an orthonormal `n x k` factor.
    pub fn stage3_solve(&mut self, y: &[usize]) -> Result<DMatrix<f64>> {
        if y.is_empty() {
            return Err(Error::Pipeline {
                stage: "project",
                msg: "no columns were sampled".into(),
            });
        }
        let my = self.gather(y);
        let qy = qr_basis(&my);
        let held = qy.ncols() * self.n_rows * WORD;
        let (mut pi_t, _) = self.product("project", 5, &qy, false, held)?;
        for (i, &c) in y.iter().enumerate() {
            pi_t.set_row(c, &(qy.transpose() * my.column(i)).transpose());
        }
        let k = self.cfg.k;
        let kk = k.min(qy.ncols());
        let l = if kk == 0 {
            DMatrix::zeros(self.n_rows, 0)
        } else {
            let (w, _) = topk_svd(&pi_t.transpose(), kk)?;
            qr_basis(&(&qy * w))
        };
        if l.ncols() < k {
            self.flags.push(Flag::RankDeficient { rank: l.ncols() });
            return Ok(complete_basis(&l, k, derive_seed(self.cfg.seed, 0x4c50)));
        }
        Ok(l)
    }

    pub fn finish(self, l: DMatrix<f64>) -> LowRankResult {
        LowRankResult {
            l,
            pass_count: self.stream.passes() - self.start_passes,
            stages: self.stages,
            flags: self.flags,
            p_columns: self.p,
            y_columns: self.y,
        }
    }
}

/// Runs all three stages. Sketch mode makes exactly five passes.
pub fn lowrank_run(stream: &mut dyn UpdateStream, cfg: &LowRankConfig, f: Transform) -> Result<LowRankResult> {
    let mut pipe = Pipeline::new(stream, cfg.clone(), f)?;
    let p = pipe.stage1_leverage()?;
    let y = pipe.stage2_adaptive(&p)?;
    let l = pipe.stage3_solve(&y)?;
    let res = pipe.finish(l);
    if cfg.mode == ProductMode::Sketch && res.pass_count != 5 {
        return Err(Error::Pipeline {
            stage: "project",
            msg: format!("expected 5 passes, made {}", res.pass_count),
        });
    }
    Ok(res)
}
