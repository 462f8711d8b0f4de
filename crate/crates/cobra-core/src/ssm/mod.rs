//! Structured and selective state-space core.
//!
//! One independent SSM per channel: diagonal state matrix, zero-order-hold
//! discretization, and three provably-equivalent execution paths (recurrent,
//! convolutional for the LTI case, parallel associative scan for the
//! selective case). The block module wires the SSM into a pre-norm residual
//! unit with a short depthwise causal convolution and a multiplicative gate.

pub mod block;
pub mod conv;
pub mod discretize;
pub mod lti;
pub mod norm;
pub mod scan;
pub mod selective;

pub use block::{
    mamba_block_backward, mamba_block_forward, mamba_block_forward_cached, mamba_block_step,
    BlockCache, BlockWeights,
};
pub use conv::{causal_conv1d, conv_step};
pub use discretize::discretize_zoh;
pub use lti::{build_kernel, lti_forward_convolutional, lti_scan_recurrent};
pub use norm::{rms_norm, rms_norm_backward};
pub use selective::{
    selective_parameterize, selective_scan, selective_scan_f32, ssm_step, BDiscretization,
    ScanMode, SelectiveWeights, SsmState,
};

use crate::error::ModelError;

/// Continuous-time parameters of a bank of single-input single-output SSMs,
/// one per channel. The state matrix is restricted to a real diagonal with
/// strictly negative entries so the discrete system is always stable.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiParams {
    pub state_dim: usize,
    pub channels: usize,
    /// Per-channel time scale, strictly positive.
    pub dt: Vec<f64>,
    /// Diagonal of the state matrix, channels x state_dim row-major.
    pub a_diag: Vec<f64>,
    /// Input vector per channel, channels x state_dim.
    pub b: Vec<f64>,
    /// Output vector per channel, channels x state_dim.
    pub c: Vec<f64>,
}

impl LtiParams {
    pub fn new(
        state_dim: usize,
        channels: usize,
        dt: Vec<f64>,
        a_diag: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if state_dim == 0 || channels == 0 {
            return Err(ModelError::Precondition(
                "state_dim and channels must be >= 1".into(),
            ));
        }
        let p = Self {
            state_dim,
            channels,
            dt,
            a_diag,
            b,
            c,
        };
        p.validate()?;
        Ok(p)
    }

    /// One-channel scalar system, the configuration used by closed-form checks.
    pub fn scalar(dt: f64, a: f64, b: f64, c: f64) -> Result<Self, ModelError> {
        Self::new(1, 1, vec![dt], vec![a], vec![b], vec![c])
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.state_dim * self.channels;
        if self.dt.len() != self.channels
            || self.a_diag.len() != n
            || self.b.len() != n
            || self.c.len() != n
        {
            return Err(ModelError::Shape(format!(
                "parameter lengths inconsistent with {} channels x {} states",
                self.channels, self.state_dim
            )));
        }
        for v in self
            .dt
            .iter()
            .chain(&self.a_diag)
            .chain(&self.b)
            .chain(&self.c)
        {
            if !v.is_finite() {
                return Err(ModelError::InvalidParameter(
                    "non-finite value in SSM parameters".into(),
                ));
            }
        }
        if self.dt.iter().any(|&d| d <= 0.0) {
            return Err(ModelError::Precondition(
                "time scale dt must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Discretized parameters: `a_bar = exp(dt a)` entrywise on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteParams {
    pub state_dim: usize,
    pub channels: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

impl DiscreteParams {
    pub fn scalar(a_bar: f64, b_bar: f64, c: f64) -> Self {
        Self {
            state_dim: 1,
            channels: 1,
            a_bar: vec![a_bar],
            b_bar: vec![b_bar],
            c: vec![c],
        }
    }

    /// Largest |a_bar| entry; < 1 for a stable system.
    pub fn spectral_radius(&self) -> f64 {
        self.a_bar.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Truncated impulse response, one row of `len` taps per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmKernel {
    pub channels: usize,
    pub len: usize,
    /// channels x len row-major; taps[d][k] = c_d a_bar_d^k b_bar_d summed over states.
    pub taps: Vec<f64>,
}

impl SsmKernel {
    pub fn tap(&self, channel: usize, k: usize) -> f64 {
        self.taps[channel * self.len + k]
    }
}
