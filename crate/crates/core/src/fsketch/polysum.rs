use crate::blob::{BlobReader, BlobWriter, KIND_POLYSUM};
use crate::error::{Error, Result};
use crate::fsketch::{check_unit_interval, quantize, StreamMeta, DEFAULT_SCALE_BITS};
use crate::randkit::{derive_seed, MersenneHash, PInverseSampler};

/// Fractional bits of the fixed-point weights `|x_i|^(1/p) z(i, j)`.
const WEIGHT_BITS: u32 = 32;

const SAMPLER_TAG: u64 = 0x5049_4e56;
const POS_TAG: u64 = 0x504f_53;
const NEG_TAG: u64 = 0x4e45_47;

#[derive(Clone, Debug, PartialEq)]
pub struct PolySumConfig {
    pub epsilon: f64,
    /// Exponent `p` in `|v|^p`, in `(0, 2]`.
    pub p: f64,
    /// `copies = ceil(copies_const / eps^2)`.
    pub copies_const: f64,
    /// Count-sketch width `ceil(width_const * eps^-2 * log2^2 n)`.
    pub width_const: f64,
    /// Count-sketch rows; `None` uses `ceil(log2 n)` rounded up to odd, at least 3.
    pub rows: Option<usize>,
    pub scale_bits: u32,
    pub seed: u64,
}

impl PolySumConfig {
    pub fn new(epsilon: f64, p: f64) -> Self {
        Self {
            epsilon,
            p,
            copies_const: 16.0,
            width_const: 4.0,
            rows: None,
            scale_bits: DEFAULT_SCALE_BITS,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Number of p-inverse copies per coordinate.
    pub fn copies(&self) -> usize {
        (self.copies_const / (self.epsilon * self.epsilon)).ceil() as usize
    }
}

/// Count-sketch over keys `i * copies + j` with `i128` cells.
///
/// Cells add with wrapping arithmetic, which keeps the state a function of
/// the update multiset alone.
#[derive(Clone, Debug)]
struct CountSketch {
    width: usize,
    buckets: Vec<MersenneHash>,
    signs: Vec<MersenneHash>,
    cells: Vec<i128>,
}

impl CountSketch {
    fn new(rows: usize, width: usize, seed: u64) -> Self {
        Self {
            width,
            buckets: (0..rows)
                .map(|r| MersenneHash::new(derive_seed(seed, 2 * r as u64), 2))
                .collect(),
            signs: (0..rows)
                .map(|r| MersenneHash::new(derive_seed(seed, 2 * r as u64 + 1), 4))
                .collect(),
            cells: Vec::new(),
        }
    }

    fn rows(&self) -> usize {
        self.buckets.len()
    }

    #[inline]
    fn add(&mut self, key: u64, value: i128) {
        if self.cells.is_empty() {
            self.cells = vec![0; self.rows() * self.width];
        }
        for r in 0..self.rows() {
            let b = self.buckets[r].bucket(key, self.width);
            let v = if self.signs[r].sign(key) > 0 { value } else { value.wrapping_neg() };
            let cell = &mut self.cells[r * self.width + b];
            *cell = cell.wrapping_add(v);
        }
    }

    /// Median over rows of the signed bucket values.
    fn estimate(&self, key: u64, scratch: &mut Vec<i128>) -> i128 {
        if self.cells.is_empty() {
            return 0;
        }
        scratch.clear();
        for r in 0..self.rows() {
            let c = self.cells[r * self.width + self.buckets[r].bucket(key, self.width)];
            scratch.push(if self.signs[r].sign(key) > 0 { c } else { c.wrapping_neg() });
        }
        let mid = scratch.len() / 2;
        *scratch.select_nth_unstable(mid).1
    }

    fn space_bytes(&self) -> usize {
        self.rows() * self.width * 16
            + self.buckets.iter().chain(&self.signs).map(MersenneHash::state_bytes).sum::<usize>()
    }
}

/// One sign class of `x`: coordinates and their `|x_i|^(1/p)` weights.
#[derive(Clone, Debug)]
struct Part {
    scaled: Vec<f64>,
    sketch: CountSketch,
}

/// Estimates `<x, |y|^p>` in one pass over the updates to `y`.
#[derive(Clone, Debug)]
pub struct PolySumSketch {
    x: Vec<f64>,
    cfg: PolySumConfig,
    copies: usize,
    sampler: PInverseSampler,
    pos: Part,
    neg: Part,
    meta: StreamMeta,
    cell_touches: u64,
}

impl PolySumSketch {
    pub fn new(x: Vec<f64>, cfg: PolySumConfig) -> Result<Self> {
        if !(cfg.p > 0.0 && cfg.p <= 2.0) {
            return Err(Error::config(format!("p must lie in (0, 2], got {}", cfg.p)));
        }
        check_unit_interval("epsilon", cfg.epsilon)?;
        if x.is_empty() {
            return Err(Error::config("universe size must be at least 1"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("x must be finite"));
        }
        if cfg.scale_bits > 40 {
            return Err(Error::config("scale_bits must be at most 40"));
        }
        let n = x.len() as u64;
        let log_n = (n as f64).log2().max(1.0);
        let copies = cfg.copies().max(2);
        let width = (cfg.width_const * log_n * log_n / (cfg.epsilon * cfg.epsilon)).ceil() as usize;
        let rows = cfg.rows.unwrap_or_else(|| (log_n.ceil() as usize).max(3) | 1);
        if rows == 0 || width == 0 {
            return Err(Error::config("count-sketch must have positive rows and width"));
        }
        let sampler = PInverseSampler::new(derive_seed(cfg.seed, SAMPLER_TAG), cfg.p)?;
        let part = |keep: fn(f64) -> bool, tag: u64| Part {
            scaled: x
                .iter()
                .map(|&v| if keep(v) { v.abs().powf(1.0 / cfg.p) } else { 0.0 })
                .collect(),
            sketch: CountSketch::new(rows, width, derive_seed(cfg.seed, tag)),
        };
        let pos = part(|v| v > 0.0, POS_TAG);
        let neg = part(|v| v < 0.0, NEG_TAG);
        let meta = StreamMeta {
            n,
            m: 0,
            epsilon: cfg.epsilon,
            delta: 0.0,
        };
        Ok(Self {
            x,
            cfg,
            copies,
            sampler,
            pos,
            neg,
            meta,
            cell_touches: 0,
        })
    }

    pub fn config(&self) -> &PolySumConfig {
        &self.cfg
    }

    pub fn meta(&self) -> StreamMeta {
        self.meta
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn rows(&self) -> usize {
        self.pos.sketch.rows()
    }

    pub fn width(&self) -> usize {
        self.pos.sketch.width
    }

    /// Count-sketch cell writes so far (one per copy per row).
    pub fn cell_touches(&self) -> u64 {
        self.cell_touches
    }

    pub fn space_bytes(&self) -> usize {
        self.pos.sketch.space_bytes() + self.neg.sketch.space_bytes() + 24
    }

    pub fn update(&mut self, coord: u64, delta: f64) -> Result<()> {
        let value = quantize(delta, self.cfg.scale_bits)?;
        self.update_fixed(coord, value)
    }

    pub fn update_fixed(&mut self, coord: u64, value: i64) -> Result<()> {
        if coord >= self.meta.n {
            return Err(Error::domain(format!(
                "coordinate {coord} outside universe {}",
                self.meta.n
            )));
        }
        self.meta.m += 1;
        let i = coord as usize;
        let part = if self.x[i] > 0.0 {
            &mut self.pos
        } else if self.x[i] < 0.0 {
            &mut self.neg
        } else {
            return Ok(());
        };
        if value == 0 {
            return Ok(());
        }
        let scale = part.scaled[i] * (1u64 << WEIGHT_BITS) as f64;
        for j in 0..self.copies {
            let w = (scale * self.sampler.draw(coord, j as u64)).round() as i128;
            let key = coord * self.copies as u64 + j as u64;
            part.sketch.add(key, w.wrapping_mul(value as i128));
            self.cell_touches += part.sketch.rows() as u64;
        }
        Ok(())
    }

    /// `T^p / 2` where `T` is the `(copies/2)`-th largest decoded magnitude.
    fn part_estimate(&self, part: &Part) -> f64 {
        let support: Vec<usize> = (0..part.scaled.len()).filter(|&i| part.scaled[i] != 0.0).collect();
        if support.is_empty() || part.sketch.cells.is_empty() {
            return 0.0;
        }
        let unit = (1u128 << (WEIGHT_BITS + self.cfg.scale_bits)) as f64;
        let mut scratch = Vec::with_capacity(part.sketch.rows());
        let mut mags = Vec::with_capacity(support.len() * self.copies);
        for &i in &support {
            for j in 0..self.copies {
                let key = (i * self.copies + j) as u64;
                mags.push((part.sketch.estimate(key, &mut scratch) as f64 / unit).abs());
            }
        }
        let rank = self.copies / 2;
        let (_, t, _) = mags.select_nth_unstable_by(rank - 1, |a, b| b.total_cmp(a));
        t.powf(self.cfg.p) / 2.0
    }

    pub fn query(&self) -> f64 {
        self.part_estimate(&self.pos) - self.part_estimate(&self.neg)
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(KIND_POLYSUM);
        let c = &self.cfg;
        w.f64(c.epsilon);
        w.f64(c.p);
        w.f64(c.copies_const);
        w.f64(c.width_const);
        w.opt_u64(c.rows.map(|r| r as u64));
        w.u32(c.scale_bits);
        w.u64(c.seed);
        w.f64s(&self.x);
        w.u64(self.meta.m);
        w.u64(self.cell_touches);
        for part in [&self.pos, &self.neg] {
            w.u64(part.sketch.cells.len() as u64);
            for &cell in &part.sketch.cells {
                w.i128(cell);
            }
        }
        w.finish()
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::new(bytes, KIND_POLYSUM)?;
        let cfg = PolySumConfig {
            epsilon: r.f64()?,
            p: r.f64()?,
            copies_const: r.f64()?,
            width_const: r.f64()?,
            rows: r.opt_u64()?.map(|v| v as usize),
            scale_bits: r.u32()?,
            seed: r.u64()?,
        };
        let x = r.f64s()?;
        let at = r.offset();
        let mut sketch = Self::new(x, cfg).map_err(|e| Error::format(at, e.to_string()))?;
        sketch.meta.m = r.u64()?;
        sketch.cell_touches = r.u64()?;
        let expected = sketch.rows() * sketch.width();
        for part in [&mut sketch.pos, &mut sketch.neg] {
            let at = r.offset();
            let len = r.len_prefix(16)?;
            if len != 0 && len != expected {
                return Err(Error::format(at, format!("expected {expected} cells, found {len}")));
            }
            part.sketch.cells = (0..len).map(|_| r.i128()).collect::<Result<Vec<_>>>()?;
        }
        r.finish()?;
        Ok(sketch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copies_at_half_epsilon() {
        assert_eq!(PolySumConfig::new(0.5, 1.0).copies(), 64);
    }

    #[test]
    fn rejects_bad_p() {
        assert!(PolySumSketch::new(vec![1.0; 4], PolySumConfig::new(0.5, 0.0)).is_err());
        assert!(PolySumSketch::new(vec![1.0; 4], PolySumConfig::new(0.5, 2.5)).is_err());
        assert!(PolySumSketch::new(vec![1.0; 4], PolySumConfig::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn empty_stream_is_zero() {
        let s = PolySumSketch::new(vec![1.0; 100], PolySumConfig::new(0.5, 1.0)).unwrap();
        assert_eq!(s.query(), 0.0);
    }

    #[test]
    fn nonnegative_x_leaves_negative_part_empty() {
        let mut s = PolySumSketch::new(vec![1.0, 0.0, 2.0], PolySumConfig::new(0.5, 1.0)).unwrap();
        s.update(0, 3.0).unwrap();
        s.update(2, -1.0).unwrap();
        assert!(s.neg.sketch.cells.is_empty());
        assert_eq!(s.part_estimate(&s.neg), 0.0);
    }

    #[test]
    fn zero_weight_coordinate_is_noop() {
        let mut s = PolySumSketch::new(vec![0.0, 1.0], PolySumConfig::new(0.5, 1.0)).unwrap();
        s.update(0, 5.0).unwrap();
        assert_eq!(s.cell_touches(), 0);
        assert!(s.pos.sketch.cells.is_empty());
    }

    #[test]
    fn single_update_touches_copies_times_rows() {
        let mut cfg = PolySumConfig::new(0.5, 1.0);
        cfg.copies_const = 1.0;
        let mut s = PolySumSketch::new(vec![1.0; 16], cfg).unwrap();
        assert_eq!(s.copies(), 4);
        s.update(3, 1.0).unwrap();
        assert_eq!(s.cell_touches(), 4 * s.rows() as u64);
    }

    #[test]
    fn cancellation_restores_state() {
        let mut s = PolySumSketch::new(vec![1.0, -2.0, 0.5], PolySumConfig::new(0.5, 0.5)).unwrap();
        s.update(0, 2.0).unwrap();
        let before = (s.pos.sketch.cells.clone(), s.neg.sketch.cells.clone());
        s.update(1, 1.25).unwrap();
        s.update(2, 0.75).unwrap();
        s.update(1, -1.25).unwrap();
        s.update(2, -0.75).unwrap();
        assert_eq!(s.pos.sketch.cells, before.0);
        assert!(s.neg.sketch.cells.iter().all(|&c| c == 0));
    }

    #[test]
    fn single_heavy_coordinate() {
        // Target: sum |x_i| |y_i| = 7.
        let mut hits = 0;
        for seed in 0..20 {
            let cfg = PolySumConfig::new(0.25, 1.0).with_seed(seed);
            let mut s = PolySumSketch::new(vec![1.0; 200], cfg).unwrap();
            s.update(42, 7.0).unwrap();
            hits += ((s.query() - 7.0).abs() <= 0.25 * 7.0) as usize;
        }
        assert!(hits >= 18, "{hits} of 20 within bound");
    }

    #[test]
    fn blob_round_trip() {
        let mut s = PolySumSketch::new(vec![1.0, -1.0, 0.5], PolySumConfig::new(0.5, 1.0).with_seed(3)).unwrap();
        s.update(0, 2.0).unwrap();
        s.update(1, 3.0).unwrap();
        let blob = s.to_blob();
        let t = PolySumSketch::from_blob(&blob).unwrap();
        assert_eq!(t.query(), s.query());
        assert_eq!(t.to_blob(), blob);
        assert!(PolySumSketch::from_blob(&blob[..20]).is_err());
    }
}
