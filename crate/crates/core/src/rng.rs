//! Deterministic random number generation.
//!
//! All randomness in the project flows from one root seed through named
//! sub-streams, so data generation, parameter init, and shuffling are
//! independently reproducible. The generator is SplitMix64; the exact
//! algorithm is documented in `docs/determinism.md` and pinned by tests.
//!
//! Stream derivation: `stream_seed = splitmix64_next(root ^ fnv1a64(name))`.
//! Normal samples use Box-Muller on two uniform draws, computed in f64
//! regardless of the active tensor precision.

/// SplitMix64 generator (public-domain algorithm by Sebastiano Vigna).
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over UTF-8 bytes; used only to hash stream names.
pub fn fnv1a64(name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive the named sub-stream of `root`.
    pub fn stream(root: u64, name: &str) -> Self {
        let mut r = Rng::new(root ^ fnv1a64(name));
        let seed = r.next_u64();
        Rng::new(seed)
    }

    /// Derive an indexed sub-stream, e.g. one per episode.
    pub fn stream_indexed(root: u64, name: &str, index: u64) -> Self {
        Rng::stream(root, &format!("{name}/{index}"))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) by rejection-free modulo reduction over
    /// 64 bits; bias is negligible for the small bounds used here, and the
    /// method is trivially portable.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// One Box-Muller draw: `sqrt(-2 ln u1) * cos(2 pi u2)`, consuming exactly
    /// two uniforms. u1 is mapped into (0, 1] to avoid ln(0).
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + std * z
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Choose one element uniformly.
    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 0, cross-checked against the reference
        // implementation in the SplitMix64 paper's public-domain C code.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220A8397B1DCDAF);
        assert_eq!(r.next_u64(), 0x6E789E6AA1B965F4);
        assert_eq!(r.next_u64(), 0x06C45D188009454F);
    }

    #[test]
    fn streams_are_independent_and_deterministic() {
        let mut a1 = Rng::stream(7, "data/train");
        let mut a2 = Rng::stream(7, "data/train");
        let mut b = Rng::stream(7, "data/test");
        let xs1: Vec<u64> = (0..4).map(|_| a1.next_u64()).collect();
        let xs2: Vec<u64> = (0..4).map(|_| a2.next_u64()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = Rng::stream(123, "init/test");
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal(0.0, 0.02)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 1e-3, "std {}", var.sqrt());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = Rng::stream(9, "shuffle");
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
