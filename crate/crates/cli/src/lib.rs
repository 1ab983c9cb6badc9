//! Evaluation harness behind the `fsketch` binary: error ratios against dense
//! oracles, the uniform-column baseline, budget resolution and CSV records.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use fsketch::densela::{complete_basis, qr_basis, topk_svd};
use fsketch::fsketch::dequantize;
use fsketch::lowrank::{best_rank_k_residual, expected_space, residual_fro, LowRankConfig};
use fsketch::randkit::derive_seed;
use fsketch::streams::{read_text, FileStream, MemoryStream, UpdateStream, MAGIC};
use fsketch::{Error, Result, Transform};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Column order of every CSV this tool writes.
pub const CSV_HEADER: [&str; 11] = [
    "dataset",
    "n",
    "k",
    "budget",
    "gamma",
    "variant",
    "seed",
    "space_ratio",
    "error_ratio",
    "baseline_error_ratio",
    "wall_ms",
];

/// Bytes per stored word in space ratios.
pub const WORD_BYTES: usize = 8;

/// One CSV row. Missing measurements serialize as empty fields.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub n: usize,
    pub k: usize,
    pub budget: String,
    pub gamma: String,
    pub variant: String,
    pub seed: String,
    pub space_ratio: f64,
    pub error_ratio: Option<f64>,
    pub baseline_error_ratio: Option<f64>,
    pub wall_ms: u64,
}

impl EvalRecord {
    /// Field-wise mean of `rows`, labelled `seed = mean`.
    pub fn mean(rows: &[EvalRecord]) -> Option<EvalRecord> {
        let first = rows.first()?;
        let avg = |get: &dyn Fn(&EvalRecord) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = rows.iter().filter_map(get).collect();
            (vals.len() == rows.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Some(EvalRecord {
            seed: "mean".into(),
            space_ratio: avg(&|r| Some(r.space_ratio)).unwrap_or(f64::NAN),
            error_ratio: avg(&|r| r.error_ratio),
            baseline_error_ratio: avg(&|r| r.baseline_error_ratio),
            wall_ms: rows.iter().map(|r| r.wall_ms).sum::<u64>() / rows.len() as u64,
            ..first.clone()
        })
    }
}

/// Writes records under [`CSV_HEADER`], appending to an existing file
/// without repeating the header.
pub fn write_csv(path: &Path, rows: &[EvalRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    write_records(file, rows, fresh)
}

pub fn write_records<W: Write>(w: W, rows: &[EvalRecord], header: bool) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if header {
        out.write_record(CSV_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `||M||_{1,2} = (sum_j ||M[:, j]||_1^2)^{1/2}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics12Norm {
    pub value: f64,
}

impl Metrics12Norm {
    pub fn of(m: &DMatrix<f64>) -> Self {
        Self {
            value: fsketch::lowrank::norm_1_2(m),
        }
    }
}

/// `(||M - L L^T M||_F + tau) / (||M - [M]_k||_F + tau)` with
/// `tau = 1e-9 ||M||_F`, so that exact-rank inputs give a ratio near 1
/// instead of 0/0.
pub fn error_ratio(m: &DMatrix<f64>, l: &DMatrix<f64>, k: usize) -> f64 {
    let tau = 1e-9 * m.norm();
    let opt = best_rank_k_residual(m, k);
    (residual_fro(m, l) + tau) / (opt + tau)
}

/// Opens a binary stream file, or parses a text one.
pub fn open_stream(path: &Path) -> Result<Box<dyn UpdateStream>> {
    let mut head = [0u8; 8];
    let mut f = File::open(path)?;
    let got = f.read(&mut head)?;
    if got == 8 && &head == MAGIC {
        Ok(Box::new(FileStream::open(path)?))
    } else {
        let text = BufReader::new(File::open(path)?);
        Ok(Box::new(read_text(text, fsketch::fsketch::DEFAULT_SCALE_BITS as u8)?))
    }
}

/// Accumulates `f(A)` densely in one pass.
pub fn dense_transformed(stream: &mut dyn UpdateStream, f: Transform) -> Result<DMatrix<f64>> {
    let a = fsketch::streams::accumulate(stream)?;
    Ok(f.apply_matrix(&a))
}

/// Samples `num_cols` distinct columns uniformly, extracts them in one pass,
/// and returns the top-`k` left singular vectors of `f` of those columns
/// (padded to `k` if they span less).
pub fn baseline_uniform(
    stream: &mut dyn UpdateStream,
    k: usize,
    f: Transform,
    num_cols: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let h = stream.header();
    let (n, m) = (h.n_rows as usize, h.n_cols as usize);
    if num_cols > m {
        return Err(Error::Domain(format!("{num_cols} columns requested from {m}")));
    }
    if num_cols == 0 || k == 0 || k > n {
        return Err(Error::Config(format!("baseline needs 1 <= k <= {n} and at least one column")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4255));
    let cols: BTreeSet<usize> = sample(&mut rng, m, num_cols).into_iter().collect();
    let slot: std::collections::HashMap<usize, usize> =
        cols.iter().enumerate().map(|(s, &c)| (c, s)).collect();
    let mut acc = vec![0i64; n * cols.len()];
    stream.replay(&mut |e| {
        if let Some(&s) = slot.get(&(e.col as usize)) {
            let cell = &mut acc[s * n + e.row as usize];
            *cell = cell
                .checked_add(e.value)
                .ok_or_else(|| Error::Overflow(format!("column {}", e.col)))?;
        }
        Ok(())
    })?;
    let bits = h.scale_bits as u32;
    let t = DMatrix::from_iterator(n, cols.len(), acc.iter().map(|&v| f.apply(dequantize(v, bits))));
    let q = qr_basis(&t);
    let kk = k.min(q.ncols());
    let l = if kk == 0 {
        DMatrix::zeros(n, 0)
    } else {
        let (w, _) = topk_svd(&t, kk)?;
        w
    };
    Ok(if l.ncols() < k {
        complete_basis(&l, k, derive_seed(seed, 0x4250))
    } else {
        l
    })
}

/// Baseline column count at matched space: planned pipeline bytes over the
/// bytes of one dense column, clamped to `[k, n_cols]`.
pub fn matched_columns(planned_bytes: usize, n_rows: usize, n_cols: usize, k: usize) -> usize {
    (planned_bytes / (n_rows * WORD_BYTES)).clamp(k, n_cols)
}

/// A budget given on the command line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    /// `s = d1 = d2 = capacity = value`.
    Size(usize),
    /// Largest size whose planned space stays within this fraction of the
    /// dense matrix.
    Fraction(f64),
}

impl std::str::FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("budget {s:?} is neither an integer nor a percentage"));
        if let Some(p) = s.strip_suffix('%') {
            let v: f64 = p.trim().parse().map_err(|_| bad())?;
            if !(v > 0.0 && v <= 100.0) {
                return Err(Error::Config(format!("budget percentage {v} outside (0, 100]")));
            }
            Ok(Budget::Fraction(v / 100.0))
        } else {
            let v: usize = s.trim().parse().map_err(|_| bad())?;
            if v == 0 {
                return Err(Error::Config("budget must be positive".into()));
            }
            Ok(Budget::Size(v))
        }
    }
}

/// Turns a budget into a concrete size. A fraction picks the largest size in
/// `[k, n_cols]` whose planned space fits, or fails with a config error.
pub fn resolve_budget(
    budget: Budget,
    n_rows: usize,
    n_cols: usize,
    template: impl Fn(usize) -> LowRankConfig,
    scale_bits: u8,
) -> Result<usize> {
    match budget {
        Budget::Size(b) => Ok(b),
        Budget::Fraction(frac) => {
            let limit = frac * (n_rows * n_cols * WORD_BYTES) as f64;
            let k = template(n_cols).k;
            let fits = |b: usize| -> Result<bool> {
                Ok(expected_space(n_rows, n_cols, &template(b), scale_bits)? as f64 <= limit)
            };
            if !fits(k)? {
                let need = expected_space(n_rows, n_cols, &template(k), scale_bits)? as f64
                    / (n_rows * n_cols * WORD_BYTES) as f64;
                return Err(Error::Config(format!(
                    "no budget fits in {:.2}% of the dense matrix; the smallest size needs {:.1}%",
                    frac * 100.0,
                    need * 100.0
                )));
            }
            let (mut lo, mut hi) = (k, n_cols.max(k));
            while lo < hi {
                let mid = lo + (hi - lo).div_ceil(2);
                if fits(mid)? {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            Ok(lo)
        }
    }
}

/// Reads one number per line; blank lines and `#` comments are skipped.
pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let mut vals = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        vals.push(
            t.parse::<f64>()
                .map_err(|_| Error::Config(format!("{}:{}: not a number", path.display(), i + 1)))?,
        );
    }
    Ok(DVector::from_vec(vals))
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for x in v.iter() {
        writeln!(f, "{x}")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a unigram sidecar (`word count` lines, optional `total N`).
pub fn read_unigrams(path: &Path) -> Result<Vec<u64>> {
    let mut counts = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => continue,
            ["total", _] => continue,
            [_, c] => counts.push(
                c.parse()
                    .map_err(|_| Error::Config(format!("{}:{}: bad count", path.display(), i + 1)))?,
            ),
            _ => return Err(Error::Config(format!("{}:{}: expected `word count`", path.display(), i + 1))),
        }
    }
    Ok(counts)
}

/// Keeps an in-memory copy when the caller needs several independent runs.
pub fn load_memory(path: &Path) -> Result<MemoryStream> {
    let mut head = [0u8; 8];
    let got = File::open(path)?.read(&mut head)?;
    if got == 8 && &head == MAGIC {
        MemoryStream::load(path)
    } else {
        read_text(BufReader::new(File::open(path)?), fsketch::fsketch::DEFAULT_SCALE_BITS as u8)
    }
}

/// Exit status for an error: 2 for bad input or configuration, 3 when a
/// sketch or pipeline stage fails.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Format { .. } | Error::Io(_) => 2,
        Error::Pipeline { .. } | Error::EstimationUnavailable | Error::Overflow(_) => 3,
    }
}
