//! Large i.i.d. uniform samples over one clock period, realized lazily.
//!
//! The sample is defined by a binary splitting tree: each node holding `n`
//! points over `[lo, hi)` sends `Binomial(n, 1/2)` of them to its left half.
//! Small nodes draw their points directly. Every node has its own RNG stream
//! keyed by its position in the tree, so any count `#{x_i < t}` can be
//! answered by a single root-to-leaf walk, and all queries against one seed
//! describe the same underlying set of points.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::seed::rng_for;

const LEAF_SIZE: u64 = 32;
const MAX_DEPTH: u32 = 56;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSample {
    shots: u64,
    clock_period_ps: f64,
    seed: u64,
}

impl PhaseSample {
    pub fn new(shots: u64, clock_period_ps: f64, seed: u64) -> Result<Self> {
        if shots == 0 {
            return Err(Error::invalid("a density test needs at least one shot"));
        }
        if !(clock_period_ps > 0.0 && clock_period_ps.is_finite()) {
            return Err(Error::invalid("clock period must be positive"));
        }
        Ok(Self {
            shots,
            clock_period_ps,
            seed,
        })
    }

    pub fn shots(&self) -> u64 {
        self.shots
    }

    pub fn clock_period_ps(&self) -> f64 {
        self.clock_period_ps
    }

    fn node_rng(&self, id: u64) -> ChaCha8Rng {
        rng_for(self.seed, &[id])
    }

    fn is_leaf(n: u64, depth: u32) -> bool {
        n <= LEAF_SIZE || depth >= MAX_DEPTH
    }

    fn split(rng: &mut ChaCha8Rng, n: u64) -> u64 {
        Binomial::new(n, 0.5).expect("p = 1/2 is valid").sample(rng)
    }

    fn leaf_point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        let u: f64 = rng.gen();
        let p = lo + (hi - lo) * u;
        // Rounding can land exactly on `hi`, which belongs to the next node.
        if p < hi {
            p
        } else {
            lo
        }
    }

    /// Number of sampled phases strictly below `x`.
    pub fn count_below(&self, x: f64) -> u64 {
        let (mut lo, mut hi) = (0.0, self.clock_period_ps);
        let (mut n, mut id, mut depth) = (self.shots, 1u64, 0u32);
        let mut acc = 0;
        loop {
            if n == 0 || x <= lo {
                return acc;
            }
            if x >= hi {
                return acc + n;
            }
            let mut rng = self.node_rng(id);
            if Self::is_leaf(n, depth) {
                let below = (0..n)
                    .filter(|_| Self::leaf_point(&mut rng, lo, hi) < x)
                    .count() as u64;
                return acc + below;
            }
            let left = Self::split(&mut rng, n);
            let mid = lo + (hi - lo) * 0.5;
            if x <= mid {
                hi = mid;
                n = left;
                id *= 2;
            } else {
                acc += left;
                lo = mid;
                n -= left;
                id = id * 2 + 1;
            }
            depth += 1;
        }
    }

    /// Every sampled phase, in tree order. Only sensible for small samples.
    pub fn phases(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shots as usize);
        let mut stack = vec![(0.0, self.clock_period_ps, self.shots, 1u64, 0u32)];
        while let Some((lo, hi, n, id, depth)) = stack.pop() {
            if n == 0 {
                continue;
            }
            let mut rng = self.node_rng(id);
            if Self::is_leaf(n, depth) {
                out.extend((0..n).map(|_| Self::leaf_point(&mut rng, lo, hi)));
                continue;
            }
            let left = Self::split(&mut rng, n);
            let mid = lo + (hi - lo) * 0.5;
            stack.push((mid, hi, n - left, id * 2 + 1, depth + 1));
            stack.push((lo, mid, left, id * 2, depth + 1));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_below_matches_realized_points() {
        let s = PhaseSample::new(5000, 100.0, 9).unwrap();
        let pts = s.phases();
        assert_eq!(pts.len(), 5000);
        for x in [-1.0, 0.0, 0.1, 3.7, 50.0, 50.000001, 99.99, 100.0, 200.0] {
            let direct = pts.iter().filter(|&&p| p < x).count() as u64;
            assert_eq!(s.count_below(x), direct, "x = {x}");
        }
        assert!(pts.iter().all(|&p| (0.0..100.0).contains(&p)));
    }

    #[test]
    fn count_below_is_monotone() {
        let s = PhaseSample::new(1_000_000_000, 4000.0, 1).unwrap();
        let mut prev = 0;
        for i in 0..=400 {
            let c = s.count_below(i as f64 * 10.0);
            assert!(c >= prev);
            prev = c;
        }
        assert_eq!(prev, 1_000_000_000);
    }

    #[test]
    fn counts_are_roughly_uniform() {
        let s = PhaseSample::new(10_000_000, 4000.0, 5).unwrap();
        let half = s.count_below(2000.0) as f64;
        assert!((half - 5e6).abs() < 5.0 * (2.5e6f64).sqrt());
        let c = (s.count_below(1000.3) - s.count_below(1000.0)) as f64;
        let expected = 1e7 * 0.3 / 4000.0;
        assert!((c - expected).abs() < 6.0 * expected.sqrt());
    }

    #[test]
    fn seeds_differ() {
        let a = PhaseSample::new(1000, 10.0, 1).unwrap();
        let b = PhaseSample::new(1000, 10.0, 2).unwrap();
        assert_ne!(a.phases(), b.phases());
        assert_eq!(
            a.phases(),
            PhaseSample::new(1000, 10.0, 1).unwrap().phases()
        );
    }

    #[test]
    fn rejects_empty() {
        assert!(PhaseSample::new(0, 1.0, 0).is_err());
        assert!(PhaseSample::new(1, 0.0, 0).is_err());
    }
}
