//! Sketch-and-solve least squares on `f(A)` for a streamed `n x d` matrix `A`.
//!
//! One pass builds `S f(A)` through a shared-row product sketch with the
//! real weights `S^T`; `S b` is exact. The answer is the minimum-norm
//! minimizer of `||S f(A) x - S b||`.

use nalgebra::{DMatrix, DVector};

use crate::densela::{SketchTransform, TransformKind};
use crate::error::{Error, Result};
use crate::lowrank::ProductMode;
use crate::matprod::{Layout, MatProdConfig, MatrixProductSketch, Transform};
use crate::randkit::derive_seed;
use crate::streams::{accumulate, UpdateStream};

/// Relative singular-value cutoff for the solve.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionConfig {
    pub d: usize,
    pub epsilon: f64,
    /// Sketch rows; `ceil(c_r d^2 / eps^2)` by default with `c_r = 4`.
    pub s: usize,
    pub transform_kind: TransformKind,
    pub mode: ProductMode,
    pub sketch: MatProdConfig,
    pub seed: u64,
}

impl RegressionConfig {
    pub fn new(d: usize, epsilon: f64) -> Self {
        Self::with_constant(d, epsilon, 4.0)
    }

    pub fn with_constant(d: usize, epsilon: f64, c_r: f64) -> Self {
        let s = ((c_r * (d * d) as f64 / (epsilon * epsilon)).ceil() as usize).max(d);
        Self {
            d,
            epsilon,
            s,
            transform_kind: TransformKind::Gaussian,
            mode: ProductMode::Sketch,
            sketch: MatProdConfig::new(epsilon, 0.1),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.d == 0 || self.d != d {
            return Err(Error::config(format!("config has d = {} but the stream has {d} columns", self.d)));
        }
        if n < d {
            return Err(Error::config(format!("need n >= d, got n = {n}, d = {d}")));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.s < d {
            return Err(Error::config(format!("s = {} is below d = {d}", self.s)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RegressionResult {
    pub x: DVector<f64>,
    /// Numerical rank of the sketched design matrix.
    pub rank: usize,
    pub rank_deficient: bool,
    /// Nominal sketch storage in bytes.
    pub space_bytes: usize,
    pub passes: u64,
}

/// Minimum-norm least squares through the SVD. Returns the solution and the
/// numerical rank.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
    if a.nrows() != b.len() {
        return Err(Error::domain(format!("{} rows against {} targets", a.nrows(), b.len())));
    }
    let svd = a.clone().svd(true, true);
    let top = svd.singular_values.max();
    if top == 0.0 {
        return Ok((DVector::zeros(a.ncols()), 0));
    }
    let cut = RANK_TOL * top;
    let rank = svd.singular_values.iter().filter(|&&v| v > cut).count();
    let x = svd.solve(b, cut).map_err(|e| Error::domain(e.to_string()))?;
    Ok((x, rank))
}

/// Solves `min_x ||f(A) x - b||` approximately from one pass over `A`.
pub fn regress_solve(
    stream: &mut dyn UpdateStream,
    b: &DVector<f64>,
    cfg: &RegressionConfig,
    f: Transform,
) -> Result<RegressionResult> {
    f.validate()?;
    let h = stream.header();
    let (n, d) = (h.n_rows as usize, h.n_cols as usize);
    cfg.validate(n, d)?;
    if b.len() != n {
        return Err(Error::config(format!("b has {} entries for {n} rows", b.len())));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("b must be finite"));
    }
    let start = stream.passes();
    let sk = SketchTransform::new(cfg.transform_kind, cfg.s, n, derive_seed(cfg.seed, 0x5247))?;
    let s = sk.to_dense();
    let sb = &s * b;
    let (sa, space_bytes) = match cfg.mode {
        ProductMode::Exact => {
            let a = accumulate(stream)?;
            (&s * f.apply_matrix(&a), 0)
        }
        ProductMode::Sketch => {
            let mut mc = cfg.sketch.clone();
            mc.layout = Layout::SharedRow;
            mc.real_weights = true;
            mc.cover_all = false;
            mc.scale_bits = h.scale_bits as u32;
            mc.seed = derive_seed(cfg.seed, 0x5253);
            let mut sketch = MatrixProductSketch::new(d, s.transpose(), f, mc)?;
            stream.replay(&mut |e| sketch.update_fixed(e.col as usize, e.row as usize, e.value))?;
            let est = sketch.query();
            if let Some(j) = (0..d).find(|&j| est.failed[(j, 0)]) {
                return Err(Error::Pipeline {
                    stage: "regress",
                    msg: format!("sketch of column {j} failed at every level"),
                });
            }
            (est.z.transpose(), sketch.space().total())
        }
    };
    let (x, rank) = min_norm_lstsq(&sa, &sb)?;
    Ok(RegressionResult {
        x,
        rank,
        rank_deficient: rank < d,
        space_bytes,
        passes: stream.passes() - start,
    })
}
