//! Seeded random numbers with a fixed, portable definition.
//!
//! Every random draw in this crate comes from the SplitMix64 sequence below,
//! so ports to other languages can reproduce distributions from the same
//! recipe (statistical matching; bitwise cross-language equality is not a
//! goal). The exact definitions:
//!
//! * state update: `s += 0x9E3779B97F4A7C15`, then the output is
//!   `z = s; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9; z = (z ^ z>>27) *
//!   0x94D049BB133111EB; z ^ z>>31`.
//! * uniform in `[0,1)`: top 53 bits of an output, times 2^-53.
//! * standard normal: Box-Muller cosine branch. Each call consumes two
//!   uniforms `u1, u2` (in that order), with `u1` shifted into `(0,1]`, and
//!   returns `sqrt(-2 ln u1) * cos(2 pi u2)`. The sine branch is discarded.
//! * bounded integer `next_below(n)`: one output modulo `n` (the modulo bias
//!   is irrelevant at the `n` used here).
//! * shuffle: Fisher-Yates from the top index down, `j = next_below(i + 1)`.
//!
//! Named substreams are derived with [`SplitMix64::stream`] so independent
//! parts of a pipeline (concept directions, image noise, epoch shuffles)
//! do not share a sequence.

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derives an independent generator for substream `id` of `seed`.
    pub fn stream(seed: u64, id: u64) -> Self {
        Self::new(mix(seed ^ id.wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box-Muller cosine branch.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_sequence() {
        let mut a = SplitMix64::new(7);
        let mut b = SplitMix64::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniforms_in_unit_interval() {
        let mut r = SplitMix64::new(3);
        for _ in 0..1000 {
            let u = r.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normals_have_plausible_moments() {
        let mut r = SplitMix64::new(11);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn streams_differ() {
        let mut a = SplitMix64::stream(42, 0);
        let mut b = SplitMix64::stream(42, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = SplitMix64::new(5);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
