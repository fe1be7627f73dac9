//! Criterion benchmarks for `sae-core`; see `benches/`.

use sae_core::numeric::{randn, Rng};
use sae_core::Matrix;

/// Standard-normal inputs shared by the benchmarks.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    randn(&mut Rng::new(seed), rows, cols, 1.0).expect("positive scale")
}
