//! Root-mean-square normalization.

use crate::error::ModelError;

/// `out_i = gain_i * x_i / sqrt(mean_j(x_j^2) + eps)`.
pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>, ModelError> {
    if x.len() != gain.len() {
        return Err(ModelError::Shape(format!(
            "rms_norm: input dim {} vs gain dim {}",
            x.len(),
            gain.len()
        )));
    }
    if eps < 0.0 {
        return Err(ModelError::Precondition("eps must be non-negative".into()));
    }
    let inv = rms_inv(x, eps);
    Ok(x.iter()
        .zip(gain)
        .map(|(xi, gi)| gi * xi * inv)
        .collect())
}

#[inline]
pub(crate) fn rms_inv(x: &[f64], eps: f64) -> f64 {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (mean_sq + eps).sqrt()
}

/// Backward pass. Accumulates the gain gradient into `gain_grad` and returns
/// the input gradient.
pub fn rms_norm_backward(
    x: &[f64],
    gain: &[f64],
    eps: f64,
    grad_out: &[f64],
    gain_grad: &mut [f64],
) -> Vec<f64> {
    let n = x.len() as f64;
    let inv = rms_inv(x, eps);
    let mut weighted = 0.0;
    for i in 0..x.len() {
        gain_grad[i] += grad_out[i] * x[i] * inv;
        weighted += grad_out[i] * gain[i] * x[i];
    }
    let coef = inv * inv * inv / n * weighted;
    x.iter()
        .zip(gain)
        .zip(grad_out)
        .map(|((xi, gi), gout)| gout * gi * inv - coef * xi)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_are_fixed() {
        let x = vec![1.0; 5];
        let g = vec![1.0; 5];
        let y = rms_norm(&x, &g, 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn three_four_example() {
        let y = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((y[0] - 0.848528137).abs() < 1e-8);
        assert!((y[1] - 1.131370850).abs() < 1e-8);
    }

    #[test]
    fn scale_invariance_at_zero_eps() {
        let x = vec![0.3, -1.2, 2.5, 0.01];
        let g = vec![1.5, 0.2, -0.7, 1.0];
        let y1 = rms_norm(&x, &g, 0.0).unwrap();
        for &c in &[0.5, 3.0, 1e6] {
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let y2 = rms_norm(&xs, &g, 0.0).unwrap();
            for (a, b) in y1.iter().zip(&y2) {
                assert!((a - b).abs() < 1e-9, "scale {c}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = vec![0.4, -1.1, 0.9, 2.0];
        let g = vec![1.2, 0.8, -0.5, 1.0];
        let eps = 1e-5;
        let grad_out = vec![0.3, -0.2, 0.7, 0.1];
        let mut gg = vec![0.0; 4];
        let gx = rms_norm_backward(&x, &g, eps, &grad_out, &mut gg);
        let loss = |x: &[f64], g: &[f64]| -> f64 {
            rms_norm(x, g, eps)
                .unwrap()
                .iter()
                .zip(&grad_out)
                .map(|(y, w)| y * w)
                .sum()
        };
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp, &g) - loss(&xm, &g)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7, "dx[{i}]: fd {fd} vs {}", gx[i]);

            let mut gp = g.clone();
            let mut gm = g.clone();
            gp[i] += h;
            gm[i] -= h;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * h);
            assert!((fd - gg[i]).abs() < 1e-7, "dgain[{i}]");
        }
    }
}
