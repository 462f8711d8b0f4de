//! Depthwise causal convolution over a time-major sequence, plus the
//! ring-buffer streaming variant used during generation.
//!
//! The kernel is one row of `width` taps per channel; tap `width - 1`
//! multiplies the current input, earlier taps reach back in time, and the
//! sequence is implicitly left-padded with zeros.

use crate::error::ModelError;
use crate::linalg::Mat;

pub fn causal_conv1d(x: &[f64], kernel: &Mat) -> Result<Vec<f64>, ModelError> {
    let channels = kernel.rows;
    let width = kernel.cols;
    if width == 0 {
        return Err(ModelError::Precondition("kernel width must be >= 1".into()));
    }
    if channels == 0 || !x.len().is_multiple_of(channels) {
        return Err(ModelError::Shape(format!(
            "input length {} is not a multiple of {} channels",
            x.len(),
            channels
        )));
    }
    let len = x.len() / channels;
    let mut y = vec![0.0; x.len()];
    for t in 0..len {
        for ch in 0..channels {
            let taps = kernel.row(ch);
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                let back = width - 1 - k;
                if back <= t {
                    acc += tap * x[(t - back) * channels + ch];
                }
            }
            y[t * channels + ch] = acc;
        }
    }
    Ok(y)
}

/// One streaming step. `buf` holds the last `width - 1` inputs per channel as
/// a ring (layout: slot-major, `slot * channels + ch`) and `pos` is the slot
/// that the oldest entry occupies. Computes the output for `x_t`, then pushes
/// `x_t` into the ring.
pub fn conv_step(
    buf: &mut [f64],
    pos: &mut usize,
    x_t: &[f64],
    kernel: &Mat,
) -> Result<Vec<f64>, ModelError> {
    let channels = kernel.rows;
    let width = kernel.cols;
    if x_t.len() != channels {
        return Err(ModelError::Shape(format!(
            "step input has {} channels, kernel has {}",
            x_t.len(),
            channels
        )));
    }
    let hist = width - 1;
    if buf.len() != hist * channels {
        return Err(ModelError::State(format!(
            "conv buffer holds {} values, expected {}",
            buf.len(),
            hist * channels
        )));
    }
    let mut y = vec![0.0; channels];
    for ch in 0..channels {
        let taps = kernel.row(ch);
        let mut acc = taps[width - 1] * x_t[ch];
        for (k, tap) in taps[..hist].iter().enumerate() {
            // Slot (pos + k) holds the input from hist - k steps back.
            let slot = (*pos + k) % hist.max(1);
            acc += tap * buf[slot * channels + ch];
        }
        y[ch] = acc;
    }
    if hist > 0 {
        // Overwrite the oldest slot with the current input.
        for ch in 0..channels {
            buf[*pos * channels + ch] = x_t[ch];
        }
        *pos = (*pos + 1) % hist;
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
    fn identity_tap_passes_input_through() {
        let kernel = Mat::from_rows(&[vec![0.0, 0.0, 0.0, 1.0]]);
        let x = vec![3.0, -1.0, 0.5, 2.0, 7.0];
        let y = causal_conv1d(&x, &kernel).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_convolution_with_zero_pad() {
        // kernel (0.5, 0.5), x = (2, 4) -> y = (1, 3).
        let kernel = Mat::from_rows(&[vec![0.5, 0.5]]);
        let y = causal_conv1d(&[2.0, 4.0], &kernel).unwrap();
        assert_eq!(y, vec![1.0, 3.0]);
    }

    #[test]
    fn streaming_equals_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let channels = 3;
        let width = 4;
        let kernel = Mat::from_fn(channels, width, |_, _| rng.random_range(-1.0..1.0));
        let len = 64;
        let x: Vec<f64> = (0..len * channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let batch = causal_conv1d(&x, &kernel).unwrap();

        let mut buf = vec![0.0; (width - 1) * channels];
        let mut pos = 0usize;
        let mut streamed = Vec::new();
        for t in 0..len {
            let y = conv_step(&mut buf, &mut pos, &x[t * channels..(t + 1) * channels], &kernel)
                .unwrap();
            streamed.extend(y);
        }
        assert!(max_abs_diff(&batch, &streamed) < 1e-12);
    }

    #[test]
    fn width_one_kernel_has_no_history() {
        let kernel = Mat::from_rows(&[vec![2.0]]);
        let mut buf: Vec<f64> = vec![];
        let mut pos = 0;
        let y = conv_step(&mut buf, &mut pos, &[1.5], &kernel).unwrap();
        assert_eq!(y, vec![3.0]);
        let batch = causal_conv1d(&[1.5, -2.0], &kernel).unwrap();
        assert_eq!(batch, vec![3.0, -4.0]);
    }

    #[test]
    fn output_depends_only_on_recent_window() {
        let kernel = Mat::from_rows(&[vec![1.0, 1.0]]);
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        a[0] = 100.0;
        b[0] = -3.0;
        a[6] = 1.0;
        b[6] = 1.0;
        a[7] = 2.0;
        b[7] = 2.0;
        let ya = causal_conv1d(&a, &kernel).unwrap();
        let yb = causal_conv1d(&b, &kernel).unwrap();
        assert_eq!(ya[7], yb[7], "position 7 must ignore inputs before t=6");
    }
}
