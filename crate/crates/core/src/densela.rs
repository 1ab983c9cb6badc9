//! Dense linear algebra for the pipelines: oblivious sketching transforms,
//! rank-revealing QR, truncated SVD, leverage scores and sampling.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::randkit::derive_seed;

/// Relative tolerance for numerical rank in [`qr_basis`].
pub const QR_RANK_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    CountSketch,
    Gaussian,
    /// A count-sketch to `4s` rows followed by an `s x 4s` Gaussian.
    CountSketchThenGaussian,
    /// Subsampled randomized Hadamard transform (an FJLT).
    Srht,
}

/// An `s x n` oblivious sketching matrix, generated from a seed.
#[derive(Clone, Debug)]
pub struct SketchTransform {
    kind: TransformKind,
    rows: usize,
    cols: usize,
    seed: u64,
    repr: Repr,
}

#[derive(Clone, Debug)]
enum Repr {
    /// Row and sign per column.
    Count { bucket: Vec<usize>, sign: Vec<f64> },
    Dense(DMatrix<f64>),
    Composite { first: Box<SketchTransform>, second: Box<SketchTransform> },
    /// Sign flips, sampled rows of the padded Hadamard matrix, padded size.
    Srht { signs: Vec<f64>, picks: Vec<usize>, padded: usize },
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rows as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn count_sketch(rows: usize, cols: usize, seed: u64) -> Repr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bucket = Vec::with_capacity(cols);
    let mut sign = Vec::with_capacity(cols);
    for _ in 0..cols {
        bucket.push(rng.random_range(0..rows));
        sign.push(if rng.random::<bool>() { 1.0 } else { -1.0 });
    }
    Repr::Count { bucket, sign }
}

/// In-place fast Walsh-Hadamard transform along each column (unnormalized).
fn fwht_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for mut col in m.column_iter_mut() {
        let mut h = 1;
        while h < n {
            for start in (0..n).step_by(2 * h) {
                for i in start..start + h {
                    let (a, b) = (col[i], col[i + h]);
                    col[i] = a + b;
                    col[i + h] = a - b;
                }
            }
            h *= 2;
        }
    }
}

impl SketchTransform {
    pub fn new(kind: TransformKind, rows: usize, cols: usize, seed: u64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("sketch dimensions must be positive"));
        }
        let repr = match kind {
            TransformKind::CountSketch => count_sketch(rows, cols, seed),
            TransformKind::Gaussian => Repr::Dense(gaussian(rows, cols, seed)),
            TransformKind::CountSketchThenGaussian => {
                let mid = 4 * rows;
                Repr::Composite {
                    first: Box::new(Self::new(TransformKind::CountSketch, mid, cols, derive_seed(seed, 1))?),
                    second: Box::new(Self::new(TransformKind::Gaussian, rows, mid, derive_seed(seed, 2))?),
                }
            }
            TransformKind::Srht => {
                let padded = cols.next_power_of_two();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let signs = (0..cols)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let picks = (0..rows).map(|_| rng.random_range(0..padded)).collect();
                Repr::Srht { signs, picks, padded }
            }
        };
        Ok(Self {
            kind,
            rows,
            cols,
            seed,
            repr,
        })
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `T * m`, without forming `T` for the structured kinds.
    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.cols {
            return Err(Error::domain(format!(
                "transform has {} columns but input has {} rows",
                self.cols,
                m.nrows()
            )));
        }
        Ok(match &self.repr {
            Repr::Count { bucket, sign } => {
                let mut out = DMatrix::zeros(self.rows, m.ncols());
                for (i, (&b, &s)) in bucket.iter().zip(sign).enumerate() {
                    for j in 0..m.ncols() {
                        let v = m[(i, j)];
                        if v != 0.0 {
                            out[(b, j)] += s * v;
                        }
                    }
                }
                out
            }
            Repr::Dense(g) => g * m,
            Repr::Composite { first, second } => second.apply(&first.apply(m)?)?,
            Repr::Srht { signs, picks, padded } => {
                let mut work = DMatrix::zeros(*padded, m.ncols());
                for i in 0..self.cols {
                    for j in 0..m.ncols() {
                        work[(i, j)] = signs[i] * m[(i, j)];
                    }
                }
                fwht_columns(&mut work);
                let scale = 1.0 / (self.rows as f64).sqrt();
                DMatrix::from_fn(self.rows, m.ncols(), |r, j| work[(picks[r], j)] * scale)
            }
        })
    }

    /// The explicit `s x n` matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        self.apply(&DMatrix::identity(self.cols, self.cols))
            .expect("identity has matching dimensions")
    }
}

/// Stacks the positive and negative parts: `[max(S, 0); max(-S, 0)]`.
pub fn split_pos_neg(s: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = s.shape();
    DMatrix::from_fn(2 * r, c, |i, j| {
        if i < r {
            s[(i, j)].max(0.0)
        } else {
            (-s[(i - r, j)]).max(0.0)
        }
    })
}

/// Orthonormal basis of the column span of `y`, with numerical rank taken
/// from a column-pivoted QR at tolerance `1e-10 * ||y||_F`.
pub fn qr_basis(y: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = y.shape();
    if n == 0 || d == 0 {
        return DMatrix::zeros(n, 0);
    }
    let norm = y.norm();
    if norm == 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let qr = y.clone().col_piv_qr();
    let r = qr.r();
    let tol = QR_RANK_TOL * norm;
    let rank = (0..r.nrows().min(r.ncols()))
        .take_while(|&i| r[(i, i)].abs() > tol)
        .count();
    qr.q().columns(0, rank).into_owned()
}

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Count of singular values above `tol * sigma_max`.
pub fn rank_of(m: &DMatrix<f64>, tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&v| v > tol * top).count(),
        _ => 0,
    }
}

/// Top-`k` left singular vectors (as columns) and the top-`k` singular values.
pub fn topk_svd(m: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (r, c) = m.shape();
    if k > r.min(c) {
        return Err(Error::domain(format!("k = {k} exceeds min({r}, {c})")));
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut w = DMatrix::zeros(r, k);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        w.set_column(dst, &u.column(src));
        sigma.push(svd.singular_values[src]);
    }
    Ok((w, sigma))
}

/// Leverage scores `l_i = ||V^i||^2` of the columns of `e`, from the thin SVD
/// `e = U S V^T` restricted to singular values above `tol * sigma_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct LeverageScores {
    pub scores: DVector<f64>,
    pub rank: usize,
}

impl LeverageScores {
    pub fn of_columns(e: &DMatrix<f64>, tol: f64) -> Self {
        let n = e.ncols();
        if e.is_empty() {
            return Self {
                scores: DVector::zeros(n),
                rank: 0,
            };
        }
        let svd = e.clone().svd(false, true);
        let v_t = svd.v_t.expect("right singular vectors requested");
        let top = svd.singular_values.max();
        let mut scores = DVector::zeros(n);
        let mut rank = 0;
        if top > 0.0 {
            for (r, &s) in svd.singular_values.iter().enumerate() {
                if s > tol * top {
                    rank += 1;
                    for j in 0..n {
                        scores[j] += v_t[(r, j)] * v_t[(r, j)];
                    }
                }
            }
        }
        Self { scores, rank }
    }

    /// Leverage scores of the rows of `e`.
    pub fn of_rows(e: &DMatrix<f64>, tol: f64) -> Self {
        Self::of_columns(&e.transpose(), tol)
    }
}

/// Draws `s` indices i.i.d. from `q` (normalized internally), with rescaling
/// factors `1 / sqrt(q_i s)`.
pub fn leverage_sample(q: &[f64], s: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    if q.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::domain("sampling weights must be finite and nonnegative"));
    }
    let total: f64 = q.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("sampling weights are all zero"));
    }
    let dist = WeightedIndex::new(q).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..s).map(|_| dist.sample(&mut rng)).collect();
    let rescale = idx
        .iter()
        .map(|&i| 1.0 / (q[i] / total * s as f64).sqrt())
        .collect();
    Ok((idx, rescale))
}

/// Gram-Schmidt completion of an orthonormal `q` to `k` columns.
///
/// New directions are drawn from a seeded Gaussian and orthogonalized twice.
pub fn complete_basis(q: &DMatrix<f64>, k: usize, seed: u64) -> DMatrix<f64> {
    let n = q.nrows();
    let mut cols: Vec<DVector<f64>> = q.column_iter().map(|c| c.into_owned()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while cols.len() < k.min(n) {
        let mut v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        for _ in 0..2 {
            for c in &cols {
                let d = c.dot(&v);
                v.axpy(-d, c, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        gaussian(r, c, seed) * (r as f64).sqrt()
    }

    #[test]
    fn count_sketch_on_identity_has_one_sign_per_column() {
        let t = SketchTransform::new(TransformKind::CountSketch, 5, 12, 3).unwrap();
        let d = t.to_dense();
        for col in d.column_iter() {
            let nz: Vec<f64> = col.iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nz.len(), 1);
            assert_eq!(nz[0].abs(), 1.0);
        }
    }

    #[test]
    fn gaussian_scalar() {
        let t = SketchTransform::new(TransformKind::Gaussian, 1, 1, 9).unwrap();
        let v = t.to_dense()[(0, 0)];
        assert!(v.is_finite() && v != 0.0);
    }

    #[test]
    fn count_sketch_is_linear() {
        let t = SketchTransform::new(TransformKind::CountSketch, 4, 10, 1).unwrap();
        let a = random(10, 3, 1);
        let b = random(10, 3, 2);
        let lhs = t.apply(&(&a + &b)).unwrap();
        let rhs = t.apply(&a).unwrap() + t.apply(&b).unwrap();
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn structured_kinds_match_dense_form() {
        for kind in [TransformKind::Srht, TransformKind::CountSketchThenGaussian] {
            let t = SketchTransform::new(kind, 6, 13, 5).unwrap();
            let m = random(13, 2, 4);
            let direct = t.apply(&m).unwrap();
            let via_dense = t.to_dense() * &m;
            assert!((direct - via_dense).abs().max() < 1e-10, "{kind:?}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let t = SketchTransform::new(TransformKind::Gaussian, 2, 5, 0).unwrap();
        assert!(matches!(t.apply(&DMatrix::zeros(4, 1)), Err(Error::Domain(_))));
    }

    #[test]
    fn split_examples() {
        let s = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        assert_eq!(split_pos_neg(&s), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        let r = split_pos_neg(&random(3, 4, 8));
        let (top, bottom) = (r.rows(0, 3), r.rows(3, 3));
        assert_eq!(top - bottom, random(3, 4, 8));
        let nonneg = random(2, 3, 1).abs();
        assert!(split_pos_neg(&nonneg).rows(2, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qr_of_random_is_orthonormal() {
        let q = qr_basis(&random(40, 7, 2));
        assert_eq!(q.ncols(), 7);
        let err = (q.transpose() * &q - DMatrix::identity(7, 7)).norm();
        assert!(err <= 1e-10);
    }

    #[test]
    fn qr_detects_duplicate_column() {
        let mut y = random(20, 4, 3);
        let c = y.column(1).into_owned();
        y.set_column(3, &c);
        let q = qr_basis(&y);
        assert_eq!(q.ncols(), 3);
        assert!((&q * q.transpose() * &y - &y).abs().max() < 1e-10);
    }

    #[test]
    fn qr_of_orthonormal_spans_it() {
        let y = qr_basis(&random(15, 3, 4));
        let q = qr_basis(&y);
        assert!((&q * q.transpose() * &y - &y).abs().max() < 1e-12);
    }

    #[test]
    fn topk_svd_rank_one_and_full() {
        let u = random(10, 1, 1);
        let v = random(8, 1, 2);
        let m = &u * v.transpose();
        let (w, _) = topk_svd(&m, 1).unwrap();
        assert!((&m - &w * w.transpose() * &m).norm() <= 1e-8);
        let full = random(6, 6, 3);
        let (w, _) = topk_svd(&full, 6).unwrap();
        assert!((&full - &w * w.transpose() * &full).norm() <= 1e-10);
        assert!(topk_svd(&full, 7).is_err());
    }

    #[test]
    fn topk_residual_matches_eckart_young() {
        let m = random(50, 50, 11);
        let (w, sigma) = topk_svd(&m, 5).unwrap();
        let residual = (&m - &w * w.transpose() * &m).norm();
        let s = singular_values(&m);
        let oracle = s[5..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((residual - oracle).abs() <= 1e-8);
        for (a, b) in sigma.iter().zip(&s) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn leverage_scores_sum_to_rank() {
        let e = random(6, 30, 5);
        let lev = LeverageScores::of_columns(&e, 1e-12);
        assert_eq!(lev.rank, 6);
        assert!((lev.scores.sum() - 6.0).abs() < 1e-8);
        assert!(lev.scores.iter().all(|&l| (-1e-12..=1.0 + 1e-12).contains(&l)));
    }

    #[test]
    fn concentrated_sampling() {
        let (idx, scale) = leverage_sample(&[0.0, 0.0, 0.0, 5.0], 9, 1).unwrap();
        assert!(idx.iter().all(|&i| i == 3));
        assert!(scale.iter().all(|&s| (s - 1.0 / 3.0).abs() < 1e-15));
        assert!(leverage_sample(&[0.0, 0.0], 3, 1).is_err());
    }

    #[test]
    fn weighted_sampling_frequency() {
        let (idx, _) = leverage_sample(&[1.0, 2.0, 1.0], 10_000, 2).unwrap();
        let f = idx.iter().filter(|&&i| i == 1).count() as f64 / 1e4;
        assert!((f - 0.5).abs() < 0.015);
    }

    #[test]
    fn rank_of_zero_matrix() {
        assert_eq!(rank_of(&DMatrix::zeros(4, 4), 1e-8), 0);
    }

    #[test]
    fn basis_completion() {
        let q = qr_basis(&random(10, 2, 6));
        let full = complete_basis(&q, 5, 1);
        assert_eq!(full.ncols(), 5);
        assert!((full.transpose() * &full - DMatrix::identity(5, 5)).norm() < 1e-10);
        assert_eq!(full.columns(0, 2), q);
    }
}
