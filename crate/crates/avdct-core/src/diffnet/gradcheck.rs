//! Central finite-difference gradient checker.

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate index where the relative error peaks.
    pub worst_coord: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Compare the analytic gradient of a scalar function against central finite
/// differences at every coordinate of `point`.
///
/// Relative error per coordinate is `|num - ana| / max(|num|, |ana|)`.
/// Coordinates where both derivatives sit below the finite-difference noise
/// floor (1e-7) are compared absolutely instead: central differences cannot
/// resolve them, only bound them. Threshold parameters should not be checked
/// this way at all; their exact derivative is zero almost everywhere, so
/// their surrogate is asserted directly instead.
pub fn grad_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(point.len(), analytic.len());
    const NOISE_FLOOR: f64 = 1e-7;
    let mut buf = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_coord: 0,
    };
    for i in 0..point.len() {
        buf[i] = point[i] + step;
        let hi = f(&buf)?;
        buf[i] = point[i] - step;
        let lo = f(&buf)?;
        buf[i] = point[i];
        let num = (hi - lo) / (2.0 * step);
        let abs = (num - analytic[i]).abs();
        let scale = num.abs().max(analytic[i].abs());
        let rel = if scale >= NOISE_FLOOR {
            abs / scale
        } else {
            0.0
        };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{
        hard_threshold_backward, linear_backward, linear_forward, scale_backward,
    };
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn linear_layer_passes() {
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let l = 5;
        let x: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..l * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cot: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();

        let xt = Tensor::from_vec(&[l], x.clone()).unwrap();
        let wt = Tensor::from_vec(&[l, l], w.clone()).unwrap();
        let bt = Tensor::from_vec(&[l], b).unwrap();
        let ct = Tensor::from_vec(&[l], cot.clone()).unwrap();
        let grads = linear_backward(&xt, &wt, &ct).unwrap();

        let report = grad_check(
            |vals| {
                let wt = Tensor::from_vec(&[l, l], vals.to_vec()).unwrap();
                let out = linear_forward(&xt, &wt, &bt)?;
                Ok(out.data().iter().zip(&cot).map(|(a, b)| a * b).sum())
            },
            &w,
            grads.grad_w.data(),
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-5), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn bilinear_scale_is_exact_even_with_zeros() {
        let x = Tensor::from_vec(&[4], vec![0.0, 1.0, -2.0, 0.0]).unwrap();
        let v = Tensor::from_vec(&[4], vec![0.5, 0.0, 1.5, -1.0]).unwrap();
        let cot = Tensor::filled(&[4], 1.0);
        let grads = scale_backward(&x, &v, &cot).unwrap();
        // d(sum x.v)/dv = x exactly
        assert_eq!(grads.grad_v.data(), x.data());
        assert_eq!(grads.grad_x.data(), v.data());
    }

    #[test]
    fn threshold_surrogate_is_reported_exactly() {
        let x = Tensor::from_vec(&[1], vec![5.0]).unwrap();
        let t = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let grads = hard_threshold_backward(&x, &t, &g).unwrap();
        assert_eq!(grads.grad_t.data()[0], -1.0);
    }
}
