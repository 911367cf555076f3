//! Deterministic RNG used throughout the simulator.
//!
//! The generator is splitmix64: a named, platform-independent algorithm with
//! a single 64-bit state word. Child generators are derived by hashing the
//! parent seed with a label, so independent subsystems (trace generation,
//! content generation, sampling, mutation injection) draw from disjoint
//! streams and results stay reproducible across runs and platforms.

/// splitmix64 state.
#[derive(Clone, Debug)]
pub struct SimRng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Child generator for an independent stream. The label keeps streams
    /// apart even when two children share a parent seed.
    pub fn split(&self, label: &str) -> SimRng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        SimRng::new(mix(self.state.wrapping_add(GOLDEN_GAMMA)) ^ h)
    }

    /// Child generator indexed by an integer (per-region, per-VM streams).
    pub fn split_index(&self, label: &str, index: u64) -> SimRng {
        let mut child = self.split(label);
        child.state = mix(child.state ^ mix(index.wrapping_add(GOLDEN_GAMMA)));
        child
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform value in `[0, n)` via widening multiply.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as u64
    }

    /// Bernoulli draw with probability `p` (clamped to [0,1]).
    pub fn next_bool(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        (self.next_u64() as f64 / u64::MAX as f64) < p
    }

    /// Uniform f64 in [0,1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Draw `k` distinct values from `[0, n)` in sorted order.
    pub fn sample_distinct(&mut self, n: u64, k: u64) -> Vec<u64> {
        assert!(k <= n);
        // Floyd's algorithm keeps the draw count at k.
        let mut chosen = std::collections::BTreeSet::new();
        for j in (n - k)..n {
            let t = self.next_below(j + 1);
            if !chosen.insert(t) {
                chosen.insert(j);
            }
        }
        chosen.into_iter().collect()
    }

    /// Poisson draw by inversion; suitable for the small means used here.
    pub fn next_poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= self.next_f64().max(f64::MIN_POSITIVE);
            if p <= limit || k > 10_000 {
                return k;
            }
            k += 1;
        }
    }
}
