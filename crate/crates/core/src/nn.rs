//! Small shared pieces for the neural components: forward modes, init, and
//! dropout masks.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Glorot-uniform weight matrix.
pub fn xavier(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Array2<f64> {
    let s = (6.0 / (n_in + n_out) as f64).sqrt();
    Array2::from_shape_fn((n_in, n_out), |_| rng.random_range(-s..s))
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// 1/(1-rate), so expectations match eval mode.
pub fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, m: usize, rate: f64) -> Array2<f64> {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn((n, m), |_| {
        if rng.random_range(0.0..1.0) < rate {
            0.0
        } else {
            keep
        }
    })
}

/// Small random bias init: breaks symmetry and keeps rectifier
/// preactivations away from exact zero.
pub fn small_bias(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((1, n), |_| rng.random_range(-0.05..0.05))
}

pub fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}
