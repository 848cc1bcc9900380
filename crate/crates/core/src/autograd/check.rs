//! Central finite-difference gradient checking.
//!
//! The numerical side never touches the tape: it re-evaluates a loss closure
//! under elementwise perturbations, so it stays an independent oracle for the
//! analytic gradients.

use ndarray::Array2;

/// Central-difference gradients of `loss` with respect to every element of
/// every tensor in `tensors`. The closure receives the perturbed tensors in
/// the same order.
pub fn finite_diff(
    tensors: &[Array2<f64>],
    loss: &mut dyn FnMut(&[Array2<f64>]) -> f64,
    eps: f64,
) -> Vec<Array2<f64>> {
    let mut work: Vec<Array2<f64>> = tensors.to_vec();
    let mut grads = Vec::with_capacity(tensors.len());
    for t in 0..tensors.len() {
        let dim = tensors[t].raw_dim();
        let mut g = Array2::zeros(dim);
        for idx in 0..tensors[t].len() {
            let (n, m) = tensors[t].dim();
            let pos = (idx / m, idx % m);
            debug_assert!(pos.0 < n);
            let orig = work[t][pos];
            work[t][pos] = orig + eps;
            let up = loss(&work);
            work[t][pos] = orig - eps;
            let down = loss(&work);
            work[t][pos] = orig;
            g[pos] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Largest elementwise relative error between two same-shape gradients.
/// The denominator is floored to keep near-zero entries from exploding.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    assert_eq!(a.dim(), b.dim(), "relative error on mismatched shapes");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
