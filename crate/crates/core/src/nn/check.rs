//! Loss helpers and gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::params::ParameterStore;
use super::tape::bce_value;

/// `-[y ln ẑ + (1-y) ln(1-ẑ)]` with `ẑ` clamped to `[1e-7, 1-1e-7]`.
pub fn bce_loss(z_hat: f64, y: f64) -> f64 {
    bce_value(z_hat, y)
}

/// Gradient magnitudes below this are compared on an absolute scale.
const RELATIVE_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares reverse-mode gradients with central differences
/// `(f(x+h) - f(x-h)) / 2h` on up to `coords_per_param` random coordinates of
/// every parameter. Returns the largest relative error.
pub fn finite_difference_check<F>(
    store: &mut ParameterStore,
    mut loss_and_grad: F,
    h: f64,
    coords_per_param: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&ParameterStore) -> (f64, Vec<Option<Matrix>>),
{
    let (_, grads) = loss_and_grad(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for p in 0..store.len() {
        let n = store.value(p).len();
        let picks = sample(&mut rng, n, coords_per_param.min(n));
        for k in picks.iter() {
            let x0 = store.value(p).data()[k];
            store.value_mut(p).data_mut()[k] = x0 + h;
            let (plus, _) = loss_and_grad(store);
            store.value_mut(p).data_mut()[k] = x0 - h;
            let (minus, _) = loss_and_grad(store);
            store.value_mut(p).data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[p].as_ref().map_or(0.0, |g| g.data()[k]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}
