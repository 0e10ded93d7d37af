//! Shared inputs for the kernel benchmarks.

use instsep_core::dsp::AudioClip;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform noise in [-0.5, 0.5).
pub fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

pub fn noise_clip(seconds: f64, sample_rate: u32, seed: u64) -> AudioClip {
    let len = (seconds * sample_rate as f64).round() as usize;
    AudioClip::mono(noise(len, seed), sample_rate).expect("valid clip")
}
