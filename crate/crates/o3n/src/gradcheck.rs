//! Central-difference gradient checking against an f64 scalar function.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Maximum relative error between analytic gradients and central finite
/// differences of `f`, evaluated at `x` over a random subset of at most
/// `max_coords` coordinates.
///
/// `f` must be the f64 view of the function whose analytic gradient is
/// being checked; differentiability at `x` is the caller's problem (keep
/// rectifier inputs away from zero).
pub fn grad_check<F>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    epsilon: f64,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut coords: Vec<usize> = (0..x.len()).collect();
    coords.shuffle(rng);
    coords.truncate(max_coords);

    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = f(&probe);
        probe[i] = orig - epsilon;
        let minus = f(&probe);
        probe[i] = orig;
        let fd = (plus - minus) / (2.0 * epsilon);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum x_i^2, grad = 2x.
        let x: Vec<f64> = vec![0.3, -1.2, 2.0, 0.7];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = grad_check(
            |p| p.iter().map(|v| v * v).sum(),
            &x,
            &analytic,
            1e-5,
            16,
            &mut rng::stream(0, &[1]),
        );
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = vec![0.5, 1.5];
        let wrong = vec![1.0, 1.0];
        let err = grad_check(
            |p| p.iter().map(|v| v * v).sum(),
            &x,
            &wrong,
            1e-5,
            8,
            &mut rng::stream(0, &[2]),
        );
        assert!(err > 0.1, "err = {err}");
    }
}
