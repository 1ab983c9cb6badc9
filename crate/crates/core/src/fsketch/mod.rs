//! Single-pass sketches of `<x, f(y)>` for a fixed vector `x` and a vector `y`
//! that arrives as a turnstile stream.
//!
//! [`LogSumSketch`] handles `f(v) = log^c(|v| + 1)` by subsampling the
//! coordinates at geometrically decreasing rates and recovering each
//! subsample exactly with a [`KSet`](crate::kset::KSet). [`PolySumSketch`]
//! handles `f(v) = |v|^p` through p-inverse scaling and a count-sketch.
//!
//! Stream deltas are stored as fixed-point integers so that insertions and
//! deletions cancel exactly.

mod logsum;
mod polysum;

pub use logsum::{LogSumConfig, LogSumSketch};
pub use polysum::{PolySumConfig, PolySumSketch};

use crate::error::{Error, Result};
use crate::randkit::{derive_seed, HashFamily, SubsampleHash};

/// Default number of fractional bits for fixed-point deltas.
pub const DEFAULT_SCALE_BITS: u32 = 20;

/// Stream bookkeeping shared by the vector sketches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamMeta {
    pub n: u64,
    /// Updates observed so far, including no-op ones.
    pub m: u64,
    pub epsilon: f64,
    pub delta: f64,
}

/// Converts a real delta to fixed point with `scale_bits` fractional bits.
pub fn quantize(delta: f64, scale_bits: u32) -> Result<i64> {
    if !delta.is_finite() {
        return Err(Error::domain(format!("delta {delta} is not finite")));
    }
    let scaled = (delta * (1u64 << scale_bits) as f64).round();
    if scaled.abs() >= i64::MAX as f64 {
        return Err(Error::Overflow(format!("delta {delta} at scale 2^{scale_bits}")));
    }
    Ok(scaled as i64)
}

/// Rescales a fixed-point value between scales, rounding to nearest.
pub fn rescale(value: i64, from_bits: u32, to_bits: u32) -> Result<i64> {
    use std::cmp::Ordering;
    match from_bits.cmp(&to_bits) {
        Ordering::Equal => Ok(value),
        Ordering::Less => value
            .checked_mul(1i64 << (to_bits - from_bits))
            .ok_or_else(|| Error::Overflow(format!("rescaling {value} to 2^{to_bits}"))),
        Ordering::Greater => {
            let shift = from_bits - to_bits;
            let half = 1i64 << (shift - 1);
            Ok((value + half) >> shift)
        }
    }
}

/// Real value of a fixed-point integer.
#[inline]
pub fn dequantize(value: i64, scale_bits: u32) -> f64 {
    value as f64 / (1u64 << scale_bits) as f64
}

pub(crate) fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

/// Resolved parameters of a level-subsampled sketch over a universe of size `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPlan {
    pub n: u64,
    pub levels: usize,
    pub gamma: f64,
    pub probs: Vec<f64>,
    pub capacity: usize,
    pub hash_degree: usize,
    pub kset_fail_prob: f64,
}

impl LevelPlan {
    /// `levels = ceil(log2 n) + 2`, `p_j = min(gamma * 2^-(j+1), 1)`.
    ///
    /// Defaults: `gamma = eps^-2 log2(n/delta)`, capacity
    /// `C eps^-2 log2^2(n/delta)` capped at `n`, hash degree
    /// `max(2, ceil(log2 n))` and a per-level k-set failure probability of
    /// `delta / levels`.
    pub fn resolve(n: u64, cfg: &LogSumConfig) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("universe size must be at least 1"));
        }
        check_unit_interval("epsilon", cfg.epsilon)?;
        check_unit_interval("delta", cfg.delta)?;
        let log_n = (n as f64).log2().ceil() as usize;
        let levels = log_n + 2;
        let ratio = (n as f64 / cfg.delta).log2();
        let inv_eps2 = cfg.epsilon.powi(-2);
        let gamma = cfg.gamma.unwrap_or(inv_eps2 * ratio);
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {gamma}")));
        }
        let capacity = match cfg.capacity {
            Some(0) => return Err(Error::config("k-set capacity must be positive")),
            Some(k) => k,
            None => {
                let k = (cfg.capacity_const * inv_eps2 * ratio * ratio).ceil();
                (k.min(n as f64) as usize).max(1)
            }
        };
        let hash_degree = cfg.hash_degree.unwrap_or(log_n.max(2));
        if hash_degree == 0 {
            return Err(Error::config("hash degree must be positive"));
        }
        let kset_fail_prob = cfg.kset_fail_prob.unwrap_or(cfg.delta / levels as f64);
        check_unit_interval("k-set failure probability", kset_fail_prob)?;
        let probs = (0..levels)
            .map(|j| (gamma * 0.5f64.powi(j as i32 + 1)).min(1.0))
            .collect();
        Ok(Self {
            n,
            levels,
            gamma,
            probs,
            capacity,
            hash_degree,
            kset_fail_prob,
        })
    }
}

/// One subsampling hash per level.
#[derive(Clone, Debug)]
pub struct LevelSampler {
    hashes: Vec<SubsampleHash>,
}

impl LevelSampler {
    pub fn new(plan: &LevelPlan, seed: u64) -> Result<Self> {
        let hashes = plan
            .probs
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let fam = HashFamily::new(derive_seed(seed, j as u64), plan.hash_degree, plan.n)?;
                SubsampleHash::new(fam, p)
            })
            .collect::<Result<Vec<_>>>()?;
        if hashes.len() > 64 {
            return Err(Error::config("at most 64 levels are supported"));
        }
        Ok(Self { hashes })
    }

    pub fn levels(&self) -> usize {
        self.hashes.len()
    }

    pub fn prob(&self, level: usize) -> f64 {
        self.hashes[level].prob()
    }

    #[inline]
    pub fn accepts(&self, level: usize, coord: u64) -> bool {
        self.hashes[level].accepts(coord)
    }

    /// Bit `j` is set when level `j` keeps `coord`.
    pub fn mask(&self, coord: u64) -> u64 {
        self.hashes
            .iter()
            .enumerate()
            .filter(|(_, h)| h.accepts(coord))
            .fold(0u64, |m, (j, _)| m | (1 << j))
    }

    pub fn state_bytes(&self) -> usize {
        self.hashes.iter().map(|h| h.family().state_bytes() + 8).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_round_trip() {
        assert_eq!(quantize(1.0, 20).unwrap(), 1 << 20);
        assert_eq!(quantize(-0.5, 4).unwrap(), -8);
        assert_eq!(dequantize(quantize(0.125, 20).unwrap(), 20), 0.125);
        assert!(quantize(f64::NAN, 20).is_err());
        assert!(quantize(1e300, 20).is_err());
    }

    #[test]
    fn rescale_between_scales() {
        assert_eq!(rescale(3, 0, 20).unwrap(), 3 << 20);
        assert_eq!(rescale(3 << 20, 20, 0).unwrap(), 3);
        assert_eq!(rescale(5, 20, 20).unwrap(), 5);
        assert!(rescale(i64::MAX, 0, 20).is_err());
    }

    #[test]
    fn plan_levels_and_probabilities() {
        let cfg = LogSumConfig::new(0.5, 0.1);
        let plan = LevelPlan::resolve(16, &cfg).unwrap();
        assert_eq!(plan.levels, 6);
        assert_eq!(plan.hash_degree, 4);
        assert!(plan.probs.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(plan.probs[0], (plan.gamma / 2.0).min(1.0));
        assert_eq!(plan.capacity, 16);
    }

    #[test]
    fn large_gamma_saturates_every_level() {
        let mut cfg = LogSumConfig::new(0.5, 0.1);
        cfg.gamma = Some(1024.0);
        let plan = LevelPlan::resolve(16, &cfg).unwrap();
        assert!(plan.probs.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn plan_rejects_bad_targets() {
        assert!(LevelPlan::resolve(16, &LogSumConfig::new(0.0, 0.1)).is_err());
        assert!(LevelPlan::resolve(16, &LogSumConfig::new(0.5, 1.0)).is_err());
        assert!(LevelPlan::resolve(0, &LogSumConfig::new(0.5, 0.1)).is_err());
    }
}
