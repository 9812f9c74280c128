//! Seeded inputs shared by the benchmarks.

use m2s_add::dataio::Waveform;
use m2s_add::ndarray::{Array2, IxDyn};
use m2s_add::tensor::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian-ish bonafide and spoof scores with overlapping distributions.
pub fn score_sets(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shift: f64| (0..n).map(|_| shift + (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>()).collect();
    (draw(1.0), draw(-1.0))
}

pub fn noise(shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Var::constant(Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-0.5..0.5)))
}

pub fn mono(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..len)
        .map(|i| 0.3 * (i as f64 * 0.07).sin() + rng.gen_range(-0.05..0.05))
        .collect();
    Waveform::new(Array2::from_shape_vec((1, len), x).expect("shape"), 16000).expect("valid waveform")
}
