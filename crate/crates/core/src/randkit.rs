//! Deterministic, seedable randomness.
//!
//! Everything here is a pure function of a 64-bit seed and its inputs, so two
//! sketches built from the same seed evolve identically on every platform.
//!
//! * [`HashFamily`]: degree-`d` independent hashing, realised as a random
//!   polynomial of degree `d - 1` over the smallest prime field that covers
//!   both the universe and `2^31`.
//! * [`SubsampleHash`]: a `HashFamily` thresholded into a biased coin
//!   `h: [n] -> {0, 1}` with `Pr[h(i) = 1] = min(p, 1)`.
//! * [`MersenneHash`]: the same polynomial construction over `2^61 - 1`, used
//!   on hot paths (bucket selection, fingerprints, count-sketch signs).
//! * [`PInverseSampler`]: keyed draws from the p-inverse distribution
//!   `Pr[z < x] = 1 - x^-p`, computed on demand and never tabulated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Lower bound on the modulus of every [`HashFamily`].
pub const MIN_MODULUS: u64 = 1 << 31;

/// The Mersenne prime `2^61 - 1`.
pub const MERSENNE_61: u64 = (1 << 61) - 1;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser. Bijective on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent-looking child seed from `seed` and a tag.
#[inline]
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(GOLDEN)))
}

/// Keyed 64-bit mix of `(seed, i, j)`.
#[inline]
pub fn keyed_mix(seed: u64, i: u64, j: u64) -> u64 {
    let h = mix64(seed.wrapping_add(GOLDEN.wrapping_mul(i.wrapping_add(1))));
    mix64(h ^ j.wrapping_mul(0xD6E8_FEB8_6659_FD93).wrapping_add(0x632B_E59B_D9B4_E019))
}

/// A uniform in `(0, 1]` keyed by `(seed, i, j)`, with 53 bits of resolution.
#[inline]
pub fn keyed_uniform(seed: u64, i: u64, j: u64) -> f64 {
    ((keyed_mix(seed, i, j) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin, exact for every `u64`.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const SMALL: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &p in &SMALL {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut r = 0;
    while d % 2 == 0 {
        d /= 2;
        r += 1;
    }
    'witness: for &a in &SMALL {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..r {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Smallest prime `>= n`.
pub fn next_prime(n: u64) -> u64 {
    let mut c = n.max(2);
    while !is_prime(c) {
        c += 1;
    }
    c
}

/// A degree-wise independent hash family `[universe] -> [0, modulus)`.
///
/// `degree` is the independence level: the polynomial has `degree`
/// coefficients, so `degree = 1` is a constant function and `degree = 2` is
/// the classic pairwise family `a*x + b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashFamily {
    seed: u64,
    universe: u64,
    modulus: u64,
    /// Highest-order coefficient first, ready for Horner evaluation.
    coeffs: Vec<u64>,
}

impl HashFamily {
    /// Builds a family whose modulus is the smallest prime `>= max(universe, 2^31)`.
    pub fn new(seed: u64, degree: usize, universe: u64) -> Result<Self> {
        let modulus = next_prime(universe.max(MIN_MODULUS));
        Self::with_modulus(seed, degree, universe, modulus)
    }

    /// Builds a family over an explicit prime modulus `>= universe`.
    pub fn with_modulus(seed: u64, degree: usize, universe: u64, modulus: u64) -> Result<Self> {
        if degree == 0 {
            return Err(Error::config("hash degree must be positive"));
        }
        if universe == 0 {
            return Err(Error::config("hash universe must be positive"));
        }
        if !is_prime(modulus) {
            return Err(Error::config(format!("modulus {modulus} is not prime")));
        }
        if modulus < universe {
            return Err(Error::config(format!(
                "modulus {modulus} is smaller than universe {universe}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..degree).map(|_| rng.random_range(0..modulus)).collect();
        Ok(Self {
            seed,
            universe,
            modulus,
            coeffs,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len()
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    pub fn universe(&self) -> u64 {
        self.universe
    }

    /// Coefficients, highest order first.
    pub fn coefficients(&self) -> &[u64] {
        &self.coeffs
    }

    /// Evaluates the hash at `key`.
    pub fn eval(&self, key: u64) -> Result<u64> {
        if key >= self.universe {
            return Err(Error::domain(format!(
                "key {key} outside hash universe {}",
                self.universe
            )));
        }
        Ok(self.eval_unchecked(key))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, key: u64) -> u64 {
        let m = self.modulus;
        let x = key % m;
        let mut acc = 0u64;
        if m <= u32::MAX as u64 {
            // acc, x < 2^32 so acc*x + c < 2^64.
            for &c in &self.coeffs {
                acc = (acc * x + c) % m;
            }
        } else {
            for &c in &self.coeffs {
                acc = ((acc as u128 * x as u128 + c as u128) % m as u128) as u64;
            }
        }
        acc
    }

    /// Biased coin: true with probability `min(prob, 1)` over the seed.
    ///
    /// `prob >= 1` always accepts and `prob <= 0` never does.
    pub fn accepts(&self, key: u64, prob: f64) -> bool {
        if prob >= 1.0 {
            return true;
        }
        if prob.is_nan() || prob <= 0.0 {
            return false;
        }
        self.eval_unchecked(key) < threshold(prob, self.modulus)
    }

    /// Bytes needed to store the family (seed plus coefficients).
    pub fn state_bytes(&self) -> usize {
        8 * (self.coeffs.len() + 3)
    }
}

#[inline]
fn threshold(prob: f64, modulus: u64) -> u64 {
    (prob * modulus as f64).round() as u64
}

/// A [`HashFamily`] bound to a fixed acceptance probability.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsampleHash {
    family: HashFamily,
    prob: f64,
    threshold: u64,
}

impl SubsampleHash {
    /// Rejects `prob <= 0`; `prob >= 1` yields a coin that always accepts.
    pub fn new(family: HashFamily, prob: f64) -> Result<Self> {
        if prob.is_nan() || prob <= 0.0 {
            return Err(Error::config(format!(
                "subsampling probability must be positive, got {prob}"
            )));
        }
        let threshold = if prob >= 1.0 {
            family.modulus
        } else {
            threshold(prob, family.modulus)
        };
        Ok(Self {
            family,
            prob: prob.min(1.0),
            threshold,
        })
    }

    /// The effective probability `min(p, 1)`.
    pub fn prob(&self) -> f64 {
        self.prob
    }

    pub fn family(&self) -> &HashFamily {
        &self.family
    }

    #[inline]
    pub fn accepts(&self, key: u64) -> bool {
        self.prob >= 1.0 || self.family.eval_unchecked(key) < self.threshold
    }
}

/// Polynomial hashing over the Mersenne prime `2^61 - 1`.
///
/// Reduction needs no division, which matters on per-update paths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MersenneHash {
    seed: u64,
    coeffs: Vec<u64>,
}

#[inline]
fn reduce61(x: u128) -> u64 {
    let lo = (x as u64) & MERSENNE_61;
    let hi = (x >> 61) as u64;
    let mut s = lo + (hi & MERSENNE_61) + ((x >> 122) as u64);
    s = (s & MERSENNE_61) + (s >> 61);
    if s >= MERSENNE_61 {
        s - MERSENNE_61
    } else {
        s
    }
}

/// `a * b mod 2^61 - 1` for reduced operands.
#[inline]
pub fn mul61(a: u64, b: u64) -> u64 {
    reduce61(a as u128 * b as u128)
}

/// `base^exp mod 2^61 - 1` for a reduced base.
pub fn pow61(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul61(acc, base);
        }
        base = mul61(base, base);
        exp >>= 1;
    }
    acc
}

/// `a + b mod 2^61 - 1` for reduced operands.
#[inline]
pub fn add61(a: u64, b: u64) -> u64 {
    let s = a + b;
    if s >= MERSENNE_61 {
        s - MERSENNE_61
    } else {
        s
    }
}

/// Maps a signed integer into the field `Z / (2^61 - 1)`.
#[inline]
pub fn field61(v: i64) -> u64 {
    v.rem_euclid(MERSENNE_61 as i64) as u64
}

impl MersenneHash {
    pub fn new(seed: u64, degree: usize) -> Self {
        assert!(degree > 0, "hash degree must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..degree).map(|_| rng.random_range(0..MERSENNE_61)).collect();
        Self { seed, coeffs }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len()
    }

    #[inline]
    pub fn eval(&self, key: u64) -> u64 {
        let x = reduce61(key as u128);
        let mut acc = 0u64;
        for &c in &self.coeffs {
            acc = add61(mul61(acc, x), c);
        }
        acc
    }

    /// Hash reduced into `[0, buckets)`.
    #[inline]
    pub fn bucket(&self, key: u64, buckets: usize) -> usize {
        (self.eval(key) % buckets as u64) as usize
    }

    /// A `+1/-1` sign derived from the hash.
    #[inline]
    pub fn sign(&self, key: u64) -> i64 {
        if self.eval(key) & 1 == 0 {
            1
        } else {
            -1
        }
    }

    pub fn state_bytes(&self) -> usize {
        8 * (self.coeffs.len() + 1)
    }
}

/// Draws from the p-inverse distribution keyed by an index pair.
///
/// `z(i, j) = u(i, j)^(-1/p)` where `u` is a keyed uniform on `(0, 1]`, so
/// `Pr[z < x] = 1 - x^-p` for `x >= 1`. The largest values are clamped at
/// `z_max`, which touches only the far tail.
#[derive(Clone, Debug, PartialEq)]
pub struct PInverseSampler {
    seed: u64,
    p: f64,
    z_max: f64,
}

/// Default clamp for p-inverse draws.
pub const DEFAULT_Z_MAX: f64 = (1u64 << 40) as f64;

impl PInverseSampler {
    pub fn new(seed: u64, p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 2.0) {
            return Err(Error::config(format!("p must lie in (0, 2], got {p}")));
        }
        Ok(Self {
            seed,
            p,
            z_max: DEFAULT_Z_MAX,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Continuous draw, `>= 1`.
    #[inline]
    pub fn draw(&self, i: u64, j: u64) -> f64 {
        let u = keyed_uniform(self.seed, i, j);
        u.powf(-1.0 / self.p).min(self.z_max)
    }

    /// Integer-supported variant with `Pr[X <= z] = 1 - z^-p` at integers `z >= 1`.
    pub fn draw_integer(&self, i: u64, j: u64) -> u64 {
        self.draw(i, j).ceil() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primes() {
        assert!(is_prime(2));
        assert!(is_prime(101));
        assert!(!is_prime(1));
        assert!(!is_prime(561));
        assert!(is_prime(MERSENNE_61));
        assert_eq!(next_prime(1 << 31), 2_147_483_659);
        assert_eq!(next_prime(100), 101);
    }

    #[test]
    fn default_modulus_covers_universe_and_two_pow_31() {
        let h = HashFamily::new(1, 3, 1000).unwrap();
        assert_eq!(h.modulus(), 2_147_483_659);
        let big = HashFamily::new(1, 3, 5_000_000_000).unwrap();
        assert!(big.modulus() >= 5_000_000_000 && is_prime(big.modulus()));
    }

    #[test]
    fn degree_one_is_constant() {
        let h = HashFamily::new(77, 1, 1000).unwrap();
        let c = h.coefficients()[0];
        for key in [0, 1, 17, 999] {
            assert_eq!(h.eval(key).unwrap(), c);
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let a = HashFamily::new(5, 4, 1 << 20).unwrap();
        let b = HashFamily::new(5, 4, 1 << 20).unwrap();
        for key in [0u64, 3, 12345, (1 << 20) - 1] {
            assert_eq!(a.eval(key).unwrap(), a.eval(key).unwrap());
            assert_eq!(a.eval(key).unwrap(), b.eval(key).unwrap());
        }
    }

    #[test]
    fn degree_two_matches_direct_horner() {
        let h = HashFamily::with_modulus(9, 2, 100, 101).unwrap();
        let c = h.coefficients();
        for key in 0..100u64 {
            // Independent oracle: c1 * x + c0, reduced once at the end.
            let expected = (c[0] * key + c[1]) % 101;
            assert_eq!(h.eval(key).unwrap(), expected);
        }
    }

    #[test]
    fn wide_modulus_matches_bignum_oracle() {
        let h = HashFamily::new(3, 3, 1 << 40).unwrap();
        let m = h.modulus() as u128;
        let c = h.coefficients();
        for key in [0u64, 1, 999_999_999_999] {
            let x = key as u128 % m;
            let expected = (c[0] as u128 * x % m * x + c[1] as u128 * x + c[2] as u128) % m;
            assert_eq!(h.eval(key).unwrap() as u128, expected);
        }
    }

    #[test]
    fn key_outside_universe_is_rejected() {
        let h = HashFamily::new(1, 2, 10).unwrap();
        assert!(matches!(h.eval(10), Err(Error::Domain(_))));
    }

    #[test]
    fn bad_family_parameters() {
        assert!(HashFamily::new(1, 0, 10).is_err());
        assert!(HashFamily::with_modulus(1, 2, 10, 9).is_err());
        assert!(HashFamily::with_modulus(1, 2, 200, 101).is_err());
    }

    #[test]
    fn subsample_prob_one_always_accepts() {
        let s = SubsampleHash::new(HashFamily::new(4, 8, 1000).unwrap(), 1.0).unwrap();
        assert!((0..1000).all(|k| s.accepts(k)));
        let s = SubsampleHash::new(HashFamily::new(4, 8, 1000).unwrap(), 3.5).unwrap();
        assert_eq!(s.prob(), 1.0);
        assert!((0..1000).all(|k| s.accepts(k)));
    }

    #[test]
    fn subsample_rejects_nonpositive_prob() {
        let fam = HashFamily::new(4, 8, 1000).unwrap();
        assert!(SubsampleHash::new(fam.clone(), 0.0).is_err());
        assert!(SubsampleHash::new(fam.clone(), -0.5).is_err());
        assert!(SubsampleHash::new(fam, f64::NAN).is_err());
    }

    #[test]
    fn subsample_half_rate() {
        let n = 100_000u64;
        let s = SubsampleHash::new(HashFamily::new(2024, 17, n).unwrap(), 0.5).unwrap();
        let hits = (0..n).filter(|&k| s.accepts(k)).count() as f64 / n as f64;
        assert!((hits - 0.5).abs() <= 0.01, "acceptance {hits}");
        for k in [0, 7, 99_999] {
            assert_eq!(s.accepts(k), s.accepts(k));
        }
    }

    #[test]
    fn mersenne_arithmetic_matches_u128() {
        let p = MERSENNE_61 as u128;
        for &(a, b) in &[(3u64, 5u64), (MERSENNE_61 - 1, MERSENNE_61 - 1), (1 << 60, 12345)] {
            assert_eq!(mul61(a, b) as u128, a as u128 * b as u128 % p);
            assert_eq!(add61(a, b) as u128, (a as u128 + b as u128) % p);
        }
        assert_eq!(field61(-1), MERSENNE_61 - 1);
        assert_eq!(reduce61(u128::MAX) as u128, u128::MAX % p);
    }

    #[test]
    fn mersenne_hash_matches_horner_oracle() {
        let h = MersenneHash::new(8, 3);
        let p = MERSENNE_61 as u128;
        let key = 987_654_321u64;
        let c: Vec<u128> = h.coeffs.iter().map(|&c| c as u128).collect();
        let x = key as u128;
        let expected = ((c[0] * x % p) * x % p + c[1] * x % p + c[2]) % p;
        assert_eq!(h.eval(key) as u128, expected);
    }

    #[test]
    fn pinverse_deterministic_and_at_least_one() {
        let s = PInverseSampler::new(11, 1.0).unwrap();
        for i in 0..100 {
            for j in 0..5 {
                let z = s.draw(i, j);
                assert!(z >= 1.0);
                assert_eq!(z, s.draw(i, j));
            }
        }
        assert!(PInverseSampler::new(1, 0.0).is_err());
        assert!(PInverseSampler::new(1, 2.5).is_err());
    }

    #[test]
    fn pinverse_tail_at_ten() {
        let s = PInverseSampler::new(99, 1.0).unwrap();
        let n = 1_000_000u64;
        let tail = (0..n).filter(|&t| s.draw(t / 1000, t % 1000) >= 10.0).count();
        let frac = tail as f64 / n as f64;
        assert!((frac - 0.1).abs() <= 0.003, "tail {frac}");
    }

    #[test]
    fn pinverse_integer_variant_tracks_continuous_tail() {
        let s = PInverseSampler::new(5, 0.5).unwrap();
        let n = 200_000u64;
        for x in [1u64, 4, 9] {
            let cont = (0..n).filter(|&t| s.draw(t, 0) > x as f64).count();
            let int = (0..n).filter(|&t| s.draw_integer(t, 0) > x).count();
            assert_eq!(cont, int);
            let target = (x as f64).powf(-0.5);
            assert!((int as f64 / n as f64 - target).abs() < 0.01);
        }
    }
}
