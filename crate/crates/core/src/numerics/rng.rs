use rand_core::{Rng as _, SeedableRng};
use rand_pcg::Pcg64;

/// Seedable random stream used by every sampler in the crate.
///
/// The generator is PCG-XSL-RR 128/64 (`rand_pcg::Pcg64`) seeded through
/// `seed_from_u64`. Uniform reals take the top 53 bits of one 64-bit draw,
/// normals use the Marsaglia polar method with the second variate cached.
/// None of these steps depend on platform or float library behavior beyond
/// IEEE-754 `ln`/`sqrt`, so a seed replays the same stream everywhere.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: Pcg64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng {
            inner: Pcg64::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Derives an independent stream, keyed by `stream`, without touching `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut probe = self.inner.clone();
        let base = probe.next_u64();
        Rng::seed_from_u64(base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`, safe to take the logarithm of.
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Uniform integer in `0..n` by rejection (no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal variate.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * factor);
                return u * factor;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
