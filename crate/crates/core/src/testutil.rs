use rand::Rng;

use crate::autodiff::Tensor;
pub use crate::oracle::{central_diff, rel_err};

/// Uniform entries in [-2, 2].
pub fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}
