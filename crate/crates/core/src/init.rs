//! Seeded randomness and parameter initialization.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The generator behind every random draw in the crate.
pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose within one seed.
pub fn derived_rng(seed: u64, stream: &str) -> SeededRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    SeededRng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Uniform draws in `±sqrt(6 / (rows + cols))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::Contract(format!(
            "glorot init needs positive dimensions, got {rows}x{cols}"
        )));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Ok(Tensor::matrix(rows, cols, data))
}

pub fn glorot_init(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    glorot(rows, cols, &mut seeded_rng(seed))
}

/// Standard normal draw by Box–Muller.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = glorot_init(5, 7, 3).unwrap();
        let b = glorot_init(5, 7, 3).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), glorot_init(5, 7, 4).unwrap().data());
    }

    #[test]
    fn values_within_bound() {
        let t = glorot_init(100, 100, 7).unwrap();
        let bound = (6.0f64 / 200.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn empirical_mean_near_zero() {
        let t = glorot_init(100, 100, 99).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(glorot_init(0, 3, 1), Err(Error::Contract(_))));
        assert!(matches!(glorot_init(3, 0, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn streams_differ() {
        let a: u64 = derived_rng(1, "split").random();
        let b: u64 = derived_rng(1, "encoder").random();
        assert_ne!(a, b);
    }
}
