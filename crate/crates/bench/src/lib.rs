//! Shared fixtures for the benchmarks.

use biopm::synth::mixed_linear_window;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Samples in a 10 s window at the pipeline rate.
pub const WINDOW_SAMPLES: usize = 800;

/// Seeded gravity-free 80 Hz windows.
pub fn linear_windows(n: usize, seed: u64) -> Vec<Vec<[f64; 3]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| mixed_linear_window(&mut rng, WINDOW_SAMPLES, 80.0))
        .collect()
}
