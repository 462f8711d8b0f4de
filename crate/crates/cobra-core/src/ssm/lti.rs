//! The three equivalent execution forms of the time-invariant system:
//! stepwise recurrence, truncated kernel, and causal convolution.

use super::{DiscreteParams, SsmKernel};
use crate::error::ModelError;

fn check_input(d: &DiscreteParams, x: &[f64]) -> Result<usize, ModelError> {
    if x.is_empty() || !x.len().is_multiple_of(d.channels) {
        return Err(ModelError::Shape(format!(
            "input length {} is not a positive multiple of {} channels",
            x.len(),
            d.channels
        )));
    }
    Ok(x.len() / d.channels)
}

/// Run the recurrence `h_k = a_bar h_{k-1} + b_bar x_k`, `y_k = c h_k` left
/// to right over a time-major `len x channels` input. Returns the outputs and
/// the final state (channels x state_dim) for streaming continuation.
pub fn lti_scan_recurrent(
    d: &DiscreteParams,
    x: &[f64],
    h0: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let len = check_input(d, x)?;
    let n = d.state_dim;
    if h0.len() != d.channels * n {
        return Err(ModelError::Shape(format!(
            "initial state has length {}, expected {}",
            h0.len(),
            d.channels * n
        )));
    }
    if h0.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Precondition("initial state must be finite".into()));
    }
    let mut h = h0.to_vec();
    let mut y = vec![0.0; len * d.channels];
    for t in 0..len {
        for ch in 0..d.channels {
            let xv = x[t * d.channels + ch];
            let mut out = 0.0;
            for s in 0..n {
                let idx = ch * n + s;
                h[idx] = d.a_bar[idx] * h[idx] + d.b_bar[idx] * xv;
                out += d.c[idx] * h[idx];
            }
            y[t * d.channels + ch] = out;
        }
    }
    Ok((y, h))
}

/// Truncated impulse response: tap k equals `c a_bar^k b_bar` per channel.
pub fn build_kernel(d: &DiscreteParams, len: usize) -> Result<SsmKernel, ModelError> {
    if len == 0 {
        return Err(ModelError::Precondition("kernel length must be >= 1".into()));
    }
    let n = d.state_dim;
    let mut taps = vec![0.0; d.channels * len];
    for ch in 0..d.channels {
        // power[s] tracks a_bar^k entrywise.
        let mut power = vec![1.0; n];
        for out_tap in taps[ch * len..(ch + 1) * len].iter_mut() {
            let mut tap = 0.0;
            for (s, p) in power.iter_mut().enumerate() {
                let idx = ch * n + s;
                tap += d.c[idx] * *p * d.b_bar[idx];
                *p *= d.a_bar[idx];
            }
            *out_tap = tap;
        }
    }
    Ok(SsmKernel {
        channels: d.channels,
        len,
        taps,
    })
}

/// Convolution form `y = x * k_bar`. Only valid from a zero initial state;
/// passing a nonzero `h0` is an unsupported mode by construction.
pub fn lti_forward_convolutional(
    d: &DiscreteParams,
    x: &[f64],
    h0: Option<&[f64]>,
) -> Result<Vec<f64>, ModelError> {
    if let Some(h) = h0 {
        if h.iter().any(|&v| v != 0.0) {
            return Err(ModelError::UnsupportedMode(
                "convolution form requires a zero initial state".into(),
            ));
        }
    }
    let len = check_input(d, x)?;
    let kernel = build_kernel(d, len)?;
    let mut y = vec![0.0; len * d.channels];
    for ch in 0..d.channels {
        let taps = &kernel.taps[ch * len..(ch + 1) * len];
        for t in 0..len {
            let mut acc = 0.0;
            for (j, tap) in taps.iter().enumerate().take(t + 1) {
                acc += tap * x[(t - j) * d.channels + ch];
            }
            y[t * d.channels + ch] = acc;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_zero_state_gives_zero_output() {
        let d = DiscreteParams::scalar(0.5, 1.0, 1.0);
        let (y, h) = lti_scan_recurrent(&d, &[0.0; 8], &[0.0]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_step_hand_recurrence() {
        // a_bar=0.5, b_bar=1, c=1, x=(1,1,1) -> h=y=(1, 1.5, 1.75).
        let d = DiscreteParams::scalar(0.5, 1.0, 1.0);
        let (y, h) = lti_scan_recurrent(&d, &[1.0, 1.0, 1.0], &[0.0]).unwrap();
        assert_eq!(y, vec![1.0, 1.5, 1.75]);
        assert_eq!(h, vec![1.75]);
    }

    #[test]
    fn impulse_response_equals_kernel() {
        let d = DiscreteParams {
            state_dim: 3,
            channels: 2,
            a_bar: vec![0.9, -0.3, 0.5, 0.1, 0.7, -0.8],
            b_bar: vec![1.0, 0.2, -0.4, 0.6, 0.3, 1.1],
            c: vec![0.5, 1.0, -1.0, 0.2, 0.9, 0.4],
        };
        let len = 12;
        let mut x = vec![0.0; len * 2];
        x[0] = 1.0;
        x[1] = 1.0;
        let (y, _) = lti_scan_recurrent(&d, &x, &[0.0; 6]).unwrap();
        let k = build_kernel(&d, len).unwrap();
        for t in 0..len {
            for ch in 0..2 {
                assert!(
                    (y[t * 2 + ch] - k.tap(ch, t)).abs() < 1e-15,
                    "impulse response mismatch at t={t} ch={ch}"
                );
            }
        }
    }

    #[test]
    fn kernel_direct_powers() {
        // a_bar=0.5, b_bar=1, c=2, len=3 -> (2, 1, 0.5).
        let d = DiscreteParams::scalar(0.5, 1.0, 2.0);
        let k = build_kernel(&d, 3).unwrap();
        assert_eq!(k.taps, vec![2.0, 1.0, 0.5]);
        // Oracle: repeated multiply.
        let mut p = 1.0;
        for i in 0..3 {
            assert_eq!(k.tap(0, i), 2.0 * p * 1.0);
            p *= 0.5;
        }
    }

    #[test]
    fn kernel_from_discretized_example() {
        // a_bar = e^-1, b_bar = 1 - e^-1, c = 1, len 2 -> (0.632121, 0.232544).
        let a_bar = (-1.0f64).exp();
        let b_bar = 1.0 - a_bar;
        let d = DiscreteParams::scalar(a_bar, b_bar, 1.0);
        let k = build_kernel(&d, 2).unwrap();
        assert!((k.tap(0, 0) - 0.632120559).abs() < 1e-8);
        assert!((k.tap(0, 1) - 0.232544158).abs() < 1e-8);
    }

    #[test]
    fn kernel_len_zero_is_an_error() {
        let d = DiscreteParams::scalar(0.5, 1.0, 1.0);
        assert!(build_kernel(&d, 0).is_err());
    }

    #[test]
    fn convolution_matches_recurrence_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = DiscreteParams::scalar(0.83, 0.7, 1.3);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (yr, _) = lti_scan_recurrent(&d, &x, &[0.0]).unwrap();
        let yc = lti_forward_convolutional(&d, &x, None).unwrap();
        assert!(max_abs_diff(&yr, &yc) < 1e-10);
    }

    #[test]
    fn convolution_of_impulse_is_kernel() {
        let d = DiscreteParams::scalar(0.4, 0.9, -1.2);
        let mut x = vec![0.0; 6];
        x[0] = 1.0;
        let y = lti_forward_convolutional(&d, &x, None).unwrap();
        let k = build_kernel(&d, 6).unwrap();
        assert!(max_abs_diff(&y, &k.taps) < 1e-15);
    }

    #[test]
    fn convolution_rejects_nonzero_initial_state() {
        let d = DiscreteParams::scalar(0.5, 1.0, 1.0);
        let err = lti_forward_convolutional(&d, &[1.0, 2.0], Some(&[0.1])).unwrap_err();
        assert!(matches!(err, ModelError::UnsupportedMode(_)));
        // A zero h0 is fine.
        assert!(lti_forward_convolutional(&d, &[1.0, 2.0], Some(&[0.0])).is_ok());
    }

    #[test]
    fn shape_errors() {
        let d = DiscreteParams {
            state_dim: 1,
            channels: 2,
            a_bar: vec![0.5, 0.5],
            b_bar: vec![1.0, 1.0],
            c: vec![1.0, 1.0],
        };
        assert!(lti_scan_recurrent(&d, &[1.0, 2.0, 3.0], &[0.0, 0.0]).is_err());
        assert!(lti_scan_recurrent(&d, &[1.0, 2.0], &[0.0]).is_err());
        assert!(lti_scan_recurrent(&d, &[], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn final_state_continues_the_stream() {
        let d = DiscreteParams::scalar(0.6, 0.8, 1.0);
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let (y_full, h_full) = lti_scan_recurrent(&d, &x, &[0.0]).unwrap();
        let (y_a, h_a) = lti_scan_recurrent(&d, &x[..4], &[0.0]).unwrap();
        let (y_b, h_b) = lti_scan_recurrent(&d, &x[4..], &h_a).unwrap();
        let stitched: Vec<f64> = y_a.into_iter().chain(y_b).collect();
        assert_eq!(stitched, y_full);
        assert_eq!(h_b, h_full);
    }
}
