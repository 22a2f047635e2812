//! Counter-based deterministic random streams.
//!
//! Every random decision in the lab draws from an explicitly passed
//! [`Stream`]. A stream is a (key, counter) pair: output i is a hash of
//! key and i, so a stream can be split by deriving child keys from labels
//! or indices without consuming state from the parent. Identical seeds and
//! derivation paths give bit-identical draws on every build.

/// SplitMix64 finalizer. Good avalanche behaviour, cheap, stable.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over a label, for deriving child streams by name.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const GOLDEN: u64 = 0x9e3779b97f4a7c15;

/// A deterministic counter-based random stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { key: mix(seed.wrapping_add(GOLDEN)), counter: 0 }
    }

    /// Child stream keyed by a label; does not consume from `self`.
    pub fn derive(&self, label: &str) -> Stream {
        Stream { key: mix(self.key ^ fnv1a(label.as_bytes())), counter: 0 }
    }

    /// Child stream keyed by an index; does not consume from `self`.
    pub fn derive_idx(&self, idx: u64) -> Stream {
        Stream { key: mix(self.key ^ mix(idx.wrapping_add(GOLDEN))), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_f32(&mut self) -> f32 {
        self.next_f64() as f32
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn next_range(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; consumes exactly two draws.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Index drawn from unnormalized nonnegative weights.
    pub fn next_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut u = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_range(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = Stream::new(7);
        let mut b = Stream::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_is_independent_of_parent_use() {
        let mut a = Stream::new(3);
        let _ = a.next_u64();
        let _ = a.next_u64();
        let b = Stream::new(3);
        assert_eq!(a.derive("x"), b.derive("x"));
        assert_ne!(b.derive("x"), b.derive("y"));
        assert_ne!(b.derive_idx(0), b.derive_idx(1));
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = Stream::new(11);
        for _ in 0..10_000 {
            let u = s.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(5);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = s.next_normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
