//! Finite distributions and reproducible random streams.
//!
//! Every distribution keeps its support sorted in the element type's natural
//! order; all sampling is inverse-CDF over that order, so a draw is a pure
//! function of the stream state and two equal distributions always consume
//! randomness identically.

use crate::error::Error;
use crate::Result;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deviation from 1 a mass vector may have and still be accepted unchanged.
pub const SUM_TOL: f64 = 1e-12;
/// Deviation from 1 below which constructors repair the vector by rescaling.
/// Anything worse is rejected. Vectors already within [`SUM_TOL`] are kept
/// bit-for-bit so that serialized distributions round-trip exactly.
pub const RENORM_TOL: f64 = 1e-9;

/// Probability distribution over a finite, canonically ordered support.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDist<T> {
    support: Vec<T>,
    mass: Vec<f64>,
}

impl<T: Ord + Clone> FiniteDist<T> {
    /// Builds a distribution from (element, mass) pairs. Pairs are sorted
    /// into canonical order; duplicate elements are rejected.
    pub fn new(pairs: Vec<(T, f64)>) -> Result<Self> {
        let mut pairs = pairs;
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let (support, mass): (Vec<T>, Vec<f64>) = pairs.into_iter().unzip();
        Self::from_sorted(support, mass)
    }

    /// Builds a distribution from a support already in canonical order and a
    /// parallel mass vector.
    pub fn from_sorted(support: Vec<T>, mass: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        if support.len() != mass.len() {
            return Err(Error::InvalidParameter(format!(
                "support has {} elements but {} masses were given",
                support.len(),
                mass.len()
            )));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DuplicateSupport);
        }
        let mut mass = mass;
        for (index, m) in mass.iter_mut().enumerate() {
            if !m.is_finite() || *m < -SUM_TOL {
                return Err(Error::InvalidMass { index, mass: *m });
            }
            if *m < 0.0 {
                // Roundoff-scale negatives are produced by averaging and
                // differencing; anything larger was rejected above.
                *m = 0.0;
            }
        }
        let sum: f64 = mass.iter().sum();
        let dev = (sum - 1.0).abs();
        if dev > SUM_TOL {
            if dev >= RENORM_TOL {
                return Err(Error::NotNormalized { sum });
            }
            for m in &mut mass {
                *m /= sum;
            }
        }
        Ok(Self { support, mass })
    }

    /// Distribution putting all mass on one element.
    pub fn point_mass(x: T) -> Self {
        Self {
            support: vec![x],
            mass: vec![1.0],
        }
    }

    /// Uniform distribution over the given elements.
    pub fn uniform(support: Vec<T>) -> Result<Self> {
        let n = support.len();
        Self::new(support.into_iter().map(|x| (x, 1.0 / n as f64)).collect())
    }

    pub fn support(&self) -> &[T] {
        &self.support
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = (&T, f64)> {
        self.support.iter().zip(self.mass.iter().copied())
    }

    /// Mass of `x`, zero if `x` is not in the support.
    pub fn mass_of(&self, x: &T) -> f64 {
        match self.support.binary_search(x) {
            Ok(i) => self.mass[i],
            Err(_) => 0.0,
        }
    }

    /// Index of `x` in the canonical support order.
    pub fn index_of(&self, x: &T) -> Option<usize> {
        self.support.binary_search(x).ok()
    }

    /// L1 distance to another distribution on the same support. Values lie
    /// in [0, 2]; the supports must be identical.
    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        if self.support != other.support {
            return Err(Error::SupportMismatch);
        }
        Ok(self
            .mass
            .iter()
            .zip(&other.mass)
            .map(|(a, b)| (a - b).abs())
            .sum())
    }

    /// Expectation of `f` under the distribution.
    pub fn expectation(&self, f: impl Fn(&T) -> f64) -> f64 {
        self.iter().map(|(x, m)| f(x) * m).sum()
    }

    /// Inverse-CDF draw over the canonical support order.
    pub fn sample<'a>(&'a self, rng: &mut RngStream) -> &'a T {
        let u = rng.next_f64();
        let mut cum = 0.0;
        for (x, m) in self.iter() {
            cum += m;
            if u < cum {
                return x;
            }
        }
        // Mass sums can fall a few ulps short of 1; the draw belongs to the
        // last element that actually carries mass.
        let i = self
            .mass
            .iter()
            .rposition(|&m| m > 0.0)
            .expect("a distribution always carries positive mass somewhere");
        &self.support[i]
    }
}

/// Deterministic random stream. A `(seed, stream_id)` pair selects an
/// independent ChaCha keystream, so work items keyed by index reproduce the
/// same draws no matter how they are scheduled across threads.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Mixes a base seed with a tag into a fresh seed (SplitMix64 finalizer).
/// Commands use this to give each named phase its own seed domain before
/// per-episode stream ids are applied.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Exact Poisson draw by sequential CDF inversion (one uniform per draw).
/// Rates above 64 are split with Poisson additivity so the pmf recursion
/// never leaves the numerically safe range.
///
/// Panics if `rate` is negative or not finite.
pub fn sample_poisson(rate: f64, rng: &mut RngStream) -> u64 {
    assert!(
        rate.is_finite() && rate >= 0.0,
        "Poisson rate must be finite and nonnegative, got {rate}"
    );
    if rate == 0.0 {
        return 0;
    }
    if rate > 64.0 {
        let half = rate / 2.0;
        return sample_poisson(half, rng) + sample_poisson(half, rng);
    }
    let u = rng.next_f64();
    let mut k = 0u64;
    let mut pmf = (-rate).exp();
    let mut cdf = pmf;
    while u >= cdf {
        k += 1;
        pmf *= rate / k as f64;
        cdf += pmf;
        if pmf < f64::MIN_POSITIVE && k as f64 > rate {
            // u landed in mass lost to roundoff; the draw is in the far tail.
            break;
        }
    }
    k
}
