use crate::blob::{BlobReader, BlobWriter, KIND_LOGSUM};
use crate::error::{Error, Result};
use crate::fsketch::{dequantize, quantize, LevelPlan, LevelSampler, StreamMeta, DEFAULT_SCALE_BITS};
use crate::kset::{Cell, KSet};
use crate::randkit::derive_seed;

const SAMPLER_TAG: u64 = 0x4c45_5645_4c53;
const KSET_TAG: u64 = 0x4b53_4554;

#[derive(Clone, Debug, PartialEq)]
pub struct LogSumConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Exponent `c` in `log^c(|v| + 1)`.
    pub power: u32,
    /// Oversampling factor; `None` uses `eps^-2 log2(n/delta)`.
    pub gamma: Option<f64>,
    /// Per-level k-set capacity; `None` derives it from `capacity_const`.
    pub capacity: Option<usize>,
    pub capacity_const: f64,
    pub hash_degree: Option<usize>,
    pub kset_fail_prob: Option<f64>,
    pub scale_bits: u32,
    pub seed: u64,
}

impl LogSumConfig {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            power: 1,
            gamma: None,
            capacity: None,
            capacity_const: 8.0,
            hash_degree: None,
            kset_fail_prob: None,
            scale_bits: DEFAULT_SCALE_BITS,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Estimates `<x, log^c(|y| + 1)>` in one pass over the updates to `y`.
#[derive(Clone, Debug)]
pub struct LogSumSketch {
    x: Vec<f64>,
    cfg: LogSumConfig,
    plan: LevelPlan,
    sampler: LevelSampler,
    ksets: Vec<KSet>,
    meta: StreamMeta,
    kset_touches: u64,
}

impl LogSumSketch {
    pub fn new(x: Vec<f64>, cfg: LogSumConfig) -> Result<Self> {
        if cfg.power == 0 {
            return Err(Error::config("log power must be at least 1"));
        }
        if cfg.scale_bits > 40 {
            return Err(Error::config("scale_bits must be at most 40"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("x must be finite"));
        }
        let n = x.len() as u64;
        let plan = LevelPlan::resolve(n, &cfg)?;
        let sampler = LevelSampler::new(&plan, derive_seed(cfg.seed, SAMPLER_TAG))?;
        let kset_seed = derive_seed(cfg.seed, KSET_TAG);
        let ksets = (0..plan.levels)
            .map(|j| KSet::new(plan.capacity, plan.kset_fail_prob, n, derive_seed(kset_seed, j as u64)))
            .collect::<Result<Vec<_>>>()?;
        let meta = StreamMeta {
            n,
            m: 0,
            epsilon: cfg.epsilon,
            delta: cfg.delta,
        };
        Ok(Self {
            x,
            cfg,
            plan,
            sampler,
            ksets,
            meta,
            kset_touches: 0,
        })
    }

    pub fn config(&self) -> &LogSumConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &LevelPlan {
        &self.plan
    }

    pub fn meta(&self) -> StreamMeta {
        self.meta
    }

    pub fn levels(&self) -> usize {
        self.plan.levels
    }

    pub fn level_prob(&self, level: usize) -> f64 {
        self.sampler.prob(level)
    }

    pub fn level_kset(&self, level: usize) -> &KSet {
        &self.ksets[level]
    }

    /// Total k-set updates performed so far.
    pub fn kset_touches(&self) -> u64 {
        self.kset_touches
    }

    /// Nominal sketch bytes, excluding `x`.
    pub fn space_bytes(&self) -> usize {
        self.ksets.iter().map(KSet::space_bytes).sum::<usize>() + self.sampler.state_bytes()
    }

    pub fn update(&mut self, coord: u64, delta: f64) -> Result<()> {
        let value = quantize(delta, self.cfg.scale_bits)?;
        self.update_fixed(coord, value)
    }

    /// Applies a delta already expressed at the sketch's fixed-point scale.
    pub fn update_fixed(&mut self, coord: u64, value: i64) -> Result<()> {
        if coord >= self.meta.n {
            return Err(Error::domain(format!(
                "coordinate {coord} outside universe {}",
                self.meta.n
            )));
        }
        self.meta.m += 1;
        if self.x[coord as usize] == 0.0 || value == 0 {
            return Ok(());
        }
        for j in 0..self.plan.levels {
            if self.sampler.accepts(j, coord) {
                self.ksets[j].update(coord, value)?;
                self.kset_touches += 1;
            }
        }
        Ok(())
    }

    fn f(&self, value: i64) -> f64 {
        dequantize(value, self.cfg.scale_bits).abs().ln_1p().powi(self.cfg.power as i32)
    }

    /// The scaled estimator restricted to one level, or `None` if its k-set fails.
    pub fn level_estimate(&self, level: usize) -> Option<f64> {
        let v = self.ksets[level].query().vector()?;
        let sum: f64 = v
            .entries
            .iter()
            .map(|&(i, val)| self.x[i as usize] * self.f(val))
            .sum();
        Some(sum / self.sampler.prob(level))
    }

    /// Index of the densest level whose k-set decodes.
    pub fn selected_level(&self) -> Option<usize> {
        (0..self.plan.levels).find(|&j| !self.ksets[j].query().is_fail())
    }

    pub fn query(&self) -> Result<f64> {
        (0..self.plan.levels)
            .find_map(|j| self.level_estimate(j))
            .ok_or(Error::EstimationUnavailable)
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(KIND_LOGSUM);
        let c = &self.cfg;
        w.f64(c.epsilon);
        w.f64(c.delta);
        w.u32(c.power);
        w.opt_f64(c.gamma);
        w.opt_u64(c.capacity.map(|v| v as u64));
        w.f64(c.capacity_const);
        w.opt_u64(c.hash_degree.map(|v| v as u64));
        w.opt_f64(c.kset_fail_prob);
        w.u32(c.scale_bits);
        w.u64(c.seed);
        w.f64s(&self.x);
        w.u64(self.meta.m);
        w.u64(self.kset_touches);
        for k in &self.ksets {
            w.u64(k.updates());
            w.u64(k.raw_cells().len() as u64);
            for cell in k.raw_cells() {
                w.i64(cell.count);
                w.i64(cell.index_sum);
                w.u64(cell.fingerprint);
            }
        }
        w.finish()
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::new(bytes, KIND_LOGSUM)?;
        let cfg = LogSumConfig {
            epsilon: r.f64()?,
            delta: r.f64()?,
            power: r.u32()?,
            gamma: r.opt_f64()?,
            capacity: r.opt_u64()?.map(|v| v as usize),
            capacity_const: r.f64()?,
            hash_degree: r.opt_u64()?.map(|v| v as usize),
            kset_fail_prob: r.opt_f64()?,
            scale_bits: r.u32()?,
            seed: r.u64()?,
        };
        let x = r.f64s()?;
        let at = r.offset();
        let mut sketch = Self::new(x, cfg).map_err(|e| Error::format(at, e.to_string()))?;
        sketch.meta.m = r.u64()?;
        sketch.kset_touches = r.u64()?;
        for k in sketch.ksets.iter_mut() {
            let updates = r.u64()?;
            let at = r.offset();
            let len = r.len_prefix(24)?;
            let cells = (0..len)
                .map(|_| {
                    Ok(Cell {
                        count: r.i64()?,
                        index_sum: r.i64()?,
                        fingerprint: r.u64()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            k.restore(cells, updates)
                .map_err(|e| Error::format(at, e.to_string()))?;
        }
        r.finish()?;
        Ok(sketch)
    }
}
