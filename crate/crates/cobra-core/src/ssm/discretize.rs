//! Zero-order-hold discretization of the diagonal continuous system.

use super::{DiscreteParams, LtiParams};
use crate::error::ModelError;

/// Discretize under a zero-order hold on the input:
/// `a_bar = exp(dt a)`, `b_bar = (dt a)^-1 (exp(dt a) - 1) dt b`, with the
/// removable singularity at `dt a = 0` evaluated as `b_bar = dt b`.
pub fn discretize_zoh(p: &LtiParams) -> Result<DiscreteParams, ModelError> {
    p.validate()?;
    let n = p.state_dim;
    let mut a_bar = vec![0.0; p.channels * n];
    let mut b_bar = vec![0.0; p.channels * n];
    for d in 0..p.channels {
        let dt = p.dt[d];
        for s in 0..n {
            let idx = d * n + s;
            let x = dt * p.a_diag[idx];
            a_bar[idx] = x.exp();
            // expm1(x)/x is numerically stable as x -> 0 and equals 1 at x = 0.
            let phi = if x == 0.0 { 1.0 } else { x.exp_m1() / x };
            b_bar[idx] = phi * dt * p.b[idx];
        }
    }
    Ok(DiscreteParams {
        state_dim: n,
        channels: p.channels,
        a_bar,
        b_bar,
        c: p.c.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_a_limit() {
        // dt=1, a=0, b=1 -> a_bar=1, b_bar=1.
        let p = LtiParams::scalar(1.0, 0.0, 1.0, 1.0).unwrap();
        let d = discretize_zoh(&p).unwrap();
        assert_eq!(d.a_bar[0], 1.0);
        assert_eq!(d.b_bar[0], 1.0);
    }

    #[test]
    fn scalar_closed_form() {
        // dt=1, a=-1, b=1 -> a_bar = e^-1, b_bar = 1 - e^-1.
        let p = LtiParams::scalar(1.0, -1.0, 1.0, 1.0).unwrap();
        let d = discretize_zoh(&p).unwrap();
        assert!((d.a_bar[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((d.b_bar[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((d.a_bar[0] - 0.367879441).abs() < 1e-9);
        assert!((d.b_bar[0] - 0.632120559).abs() < 1e-9);
    }

    #[test]
    fn half_step_closed_form() {
        // dt=0.5, a=-2, b=1 -> a_bar = e^-1, b_bar = (e^-1 - 1)/(-2) ~ 0.316060.
        let p = LtiParams::scalar(0.5, -2.0, 1.0, 1.0).unwrap();
        let d = discretize_zoh(&p).unwrap();
        assert!((d.a_bar[0] - (-1.0f64).exp()).abs() < 1e-15);
        let expected = ((-1.0f64).exp() - 1.0) / -2.0;
        assert!((d.b_bar[0] - expected).abs() < 1e-15);
        assert!((d.b_bar[0] - 0.316060280).abs() < 1e-9);
    }

    #[test]
    fn held_input_integration_oracle() {
        // Integrate h' = a h + b u with u held constant over one step using
        // RK4 at a fine substep, and compare the state map against (a_bar,
        // b_bar). Independent of the closed form above.
        let (dt, a, b) = (0.5, -2.0, 1.0);
        let p = LtiParams::scalar(dt, a, b, 1.0).unwrap();
        let d = discretize_zoh(&p).unwrap();
        for &(h0, u) in &[(0.0, 1.0), (1.0, 0.0), (0.3, -0.7)] {
            let mut h: f64 = h0;
            let steps = 20_000;
            let sub = dt / steps as f64;
            for _ in 0..steps {
                let f = |h: f64| a * h + b * u;
                let k1 = f(h);
                let k2 = f(h + 0.5 * sub * k1);
                let k3 = f(h + 0.5 * sub * k2);
                let k4 = f(h + sub * k3);
                h += sub / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            let discrete = d.a_bar[0] * h0 + d.b_bar[0] * u;
            assert!(
                (h - discrete).abs() < 1e-12,
                "held-input integration disagrees: {h} vs {discrete}"
            );
        }
    }

    #[test]
    fn rejects_nonpositive_dt() {
        let p = LtiParams {
            state_dim: 1,
            channels: 1,
            dt: vec![0.0],
            a_diag: vec![-1.0],
            b: vec![1.0],
            c: vec![1.0],
        };
        assert!(matches!(
            discretize_zoh(&p),
            Err(ModelError::Precondition(_))
        ));
    }

    #[test]
    fn rejects_non_finite_inputs() {
        let p = LtiParams {
            state_dim: 1,
            channels: 1,
            dt: vec![1.0],
            a_diag: vec![f64::NAN],
            b: vec![1.0],
            c: vec![1.0],
        };
        assert!(matches!(
            discretize_zoh(&p),
            Err(ModelError::InvalidParameter(_))
        ));
        let p = LtiParams {
            state_dim: 1,
            channels: 1,
            dt: vec![1.0],
            a_diag: vec![-1.0],
            b: vec![f64::INFINITY],
            c: vec![1.0],
        };
        assert!(matches!(
            discretize_zoh(&p),
            Err(ModelError::InvalidParameter(_))
        ));
    }

    #[test]
    fn stability_transfers_to_discrete() {
        let p = LtiParams::new(
            2,
            2,
            vec![0.7, 0.01],
            vec![-1.0, -2.0, -0.5, -4.0],
            vec![1.0; 4],
            vec![1.0; 4],
        )
        .unwrap();
        let d = discretize_zoh(&p).unwrap();
        assert!(d.spectral_radius() < 1.0);
    }
}
