//! Portable counter-based random numbers.
//!
//! Algorithm (fixed, so other implementations can reproduce streams bit for bit):
//!
//! * word `i` (0-based) of the stream keyed by `seed` is
//!   `splitmix64_mix(seed + (i + 1) * 0x9E3779B97F4A7C15)` with wrapping arithmetic;
//! * `splitmix64_mix(z)`: `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^ (z >> 31)`;
//! * uniform in [0,1): `(word >> 11) * 2^-53`;
//! * standard normal: Box–Muller on two consecutive words,
//!   `u1 = ((w0 >> 11) + 1) * 2^-53` (never zero), `u2 = (w1 >> 11) * 2^-53`,
//!   emitting `r·cos(2πu2)` then `r·sin(2πu2)` with `r = sqrt(-2 ln u1)`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

pub fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct PortableRng {
    seed: u64,
    counter: u64,
    spare: Option<f64>,
}

impl PortableRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0, spare: None }
    }

    /// Independent stream for item `index` of a seeded collection.
    pub fn derived(seed: u64, index: u64) -> Self {
        Self::new(seed ^ index)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        splitmix64_mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * INV_2_53
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * INV_2_53;
        let u2 = (self.next_u64() >> 11) as f64 * INV_2_53;
        let r = (-2.0 * u1.ln()).sqrt();
        let a = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * a.sin());
        r * a.cos()
    }

    /// Normal(0, std) redrawn until it falls within ±2·std.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_words_are_splitmix64() {
        // reference SplitMix64 seeded with 0: 0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4
        let mut r = PortableRng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn normal_moments() {
        let mut r = PortableRng::new(42);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn reproducible() {
        let a: Vec<u64> = {
            let mut r = PortableRng::new(7);
            (0..5).map(|_| r.next_u64()).collect()
        };
        let mut r = PortableRng::new(7);
        assert!(a.iter().all(|&v| v == r.next_u64()));
    }
}
