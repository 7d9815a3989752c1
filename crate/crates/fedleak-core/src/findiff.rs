//! Central finite differences.
//!
//! Deliberately independent of the tape: this is the falsification oracle
//! the autodiff tests are judged against, so it must not share code with the
//! thing it checks.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`.
///
/// `eps` is the absolute step; a relative component proportional to |x_i| is
/// added so large coordinates are not under-resolved.
pub fn central_diff(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let h = eps * (1.0 + orig.abs());
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Largest relative disagreement between two gradients, using a symmetric
/// denominator with an absolute floor so near-zero entries compare sanely.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let mut worst = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let denom = x.abs().max(y.abs()).max(1e-4);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x^2), grad = 2x.
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = central_diff(&mut |t: &Tensor| t.data().iter().map(|v| v * v).sum(), &x, 1e-6);
        let expect = [2.0, -4.0, 1.0];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
