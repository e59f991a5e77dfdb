//! Seeded randomness. Every stochastic code path takes an explicit seed;
//! nothing reads entropy sources.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for per-item work (room sampling, chunk picks) so
/// items can be processed in any order without changing their draws.
pub fn for_item(seed: u64, item: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item);
    rng
}

/// Uniform draw helper for callers that do not depend on rand directly.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    use rand::RngExt;
    rng.random_range(lo..hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    #[test]
    fn same_seed_same_draws() {
        let a: f64 = from_seed(7).random_range(0.0..1.0);
        let b: f64 = from_seed(7).random_range(0.0..1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn item_streams_are_order_independent() {
        let x: f64 = for_item(3, 10).random_range(0.0..1.0);
        let mut other = for_item(3, 9);
        let _: f64 = other.random_range(0.0..1.0);
        let y: f64 = for_item(3, 10).random_range(0.0..1.0);
        assert_eq!(x, y);
    }
}
