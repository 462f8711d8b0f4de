//! The residual mixer block: pre-norm, dual in-projection to an expanded
//! width, short depthwise causal convolution, SiLU, selective SSM,
//! multiplicative gate, out-projection, residual add.
//!
//!   out = x + OutProj( SiLU(InProjGate(norm(x))) . SSM(SiLU(conv(InProjX(norm(x))))) )
//!
//! The batch forward, the cached forward used for training, and the
//! single-token streaming step all evaluate the same recurrence; streaming
//! over a sequence reproduces the batch output.

use rand_chacha::ChaCha8Rng;

use super::conv::{causal_conv1d, conv_step};
use super::norm::{rms_norm, rms_norm_backward};
use super::selective::{b_bar_entry, ssm_step, BDiscretization, SelectiveWeights, SsmState};
use crate::error::ModelError;
use crate::linalg::{silu, silu_grad, sigmoid, Mat};

pub const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub model_dim: usize,
    pub inner_dim: usize,
    pub conv_width: usize,
    pub norm_gain: Vec<f64>,
    pub in_proj_x: Mat,
    pub in_proj_gate: Mat,
    pub conv_kernel: Mat,
    pub ssm: SelectiveWeights,
    pub out_proj: Mat,
}

impl BlockWeights {
    pub fn seeded(
        model_dim: usize,
        inner_dim: usize,
        state_dim: usize,
        conv_width: usize,
        dt_rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            model_dim,
            inner_dim,
            conv_width,
            norm_gain: vec![1.0; model_dim],
            in_proj_x: Mat::randn(inner_dim, model_dim, rng, 1.0),
            in_proj_gate: Mat::randn(inner_dim, model_dim, rng, 1.0),
            conv_kernel: Mat::randn(inner_dim, conv_width, rng, 1.0),
            ssm: SelectiveWeights::seeded(inner_dim, state_dim, dt_rank, rng),
            out_proj: Mat::randn(model_dim, inner_dim, rng, 0.5),
        }
    }

    pub fn zeros(
        model_dim: usize,
        inner_dim: usize,
        state_dim: usize,
        conv_width: usize,
        dt_rank: usize,
    ) -> Self {
        Self {
            model_dim,
            inner_dim,
            conv_width,
            norm_gain: vec![0.0; model_dim],
            in_proj_x: Mat::zeros(inner_dim, model_dim),
            in_proj_gate: Mat::zeros(inner_dim, model_dim),
            conv_kernel: Mat::zeros(inner_dim, conv_width),
            ssm: SelectiveWeights::zeros(inner_dim, state_dim, dt_rank),
            out_proj: Mat::zeros(model_dim, inner_dim),
        }
    }

    /// A gradient accumulator with the same shapes.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(
            self.model_dim,
            self.inner_dim,
            self.ssm.state_dim,
            self.conv_width,
            self.ssm.dt_rank,
        );
        z.ssm.b_mode = self.ssm.b_mode;
        z
    }

    pub fn fresh_state(&self) -> SsmState {
        SsmState::zeros(self.inner_dim, self.ssm.state_dim, self.conv_width)
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, &Vec<f64>)> {
        vec![
            ("norm_gain", &self.norm_gain),
            ("in_proj_x", &self.in_proj_x.data),
            ("in_proj_gate", &self.in_proj_gate.data),
            ("conv_kernel", &self.conv_kernel.data),
            ("dt_down", &self.ssm.dt_down.data),
            ("dt_up", &self.ssm.dt_up.data),
            ("dt_bias", &self.ssm.dt_bias),
            ("b_proj", &self.ssm.b_proj.data),
            ("c_proj", &self.ssm.c_proj.data),
            ("a_log", &self.ssm.a_log.data),
            ("out_proj", &self.out_proj.data),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("norm_gain", &mut self.norm_gain),
            ("in_proj_x", &mut self.in_proj_x.data),
            ("in_proj_gate", &mut self.in_proj_gate.data),
            ("conv_kernel", &mut self.conv_kernel.data),
            ("dt_down", &mut self.ssm.dt_down.data),
            ("dt_up", &mut self.ssm.dt_up.data),
            ("dt_bias", &mut self.ssm.dt_bias),
            ("b_proj", &mut self.ssm.b_proj.data),
            ("c_proj", &mut self.ssm.c_proj.data),
            ("a_log", &mut self.ssm.a_log.data),
            ("out_proj", &mut self.out_proj.data),
        ]
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    len: usize,
    xn: Vec<f64>,
    u: Vec<f64>,
    gate: Vec<f64>,
    conv: Vec<f64>,
    s: Vec<f64>,
    low: Vec<f64>,
    dpre: Vec<f64>,
    dt: Vec<f64>,
    bv: Vec<f64>,
    cv: Vec<f64>,
    h: Vec<f64>,
    y: Vec<f64>,
}

pub fn mamba_block_forward(x: &[f64], w: &BlockWeights) -> Result<Vec<f64>, ModelError> {
    Ok(mamba_block_forward_cached(x, w)?.0)
}

pub fn mamba_block_forward_cached(
    x: &[f64],
    w: &BlockWeights,
) -> Result<(Vec<f64>, BlockCache), ModelError> {
    let m = w.model_dim;
    let e = w.inner_dim;
    let n = w.ssm.state_dim;
    let r = w.ssm.dt_rank;
    if x.is_empty() || !x.len().is_multiple_of(m) {
        return Err(ModelError::Shape(format!(
            "block input length {} is not a positive multiple of model dim {m}",
            x.len()
        )));
    }
    let len = x.len() / m;

    let mut xn = vec![0.0; len * m];
    let mut u = vec![0.0; len * e];
    let mut gate = vec![0.0; len * e];
    for t in 0..len {
        let normed = rms_norm(&x[t * m..(t + 1) * m], &w.norm_gain, RMS_EPS)?;
        xn[t * m..(t + 1) * m].copy_from_slice(&normed);
        w.in_proj_x.matvec(&normed, &mut u[t * e..(t + 1) * e]);
        w.in_proj_gate
            .matvec(&normed, &mut gate[t * e..(t + 1) * e]);
    }

    let conv = causal_conv1d(&u, &w.conv_kernel)?;
    let s: Vec<f64> = conv.iter().map(|&v| silu(v)).collect();

    let mut low = vec![0.0; len * r];
    let mut dpre = vec![0.0; len * e];
    let mut dt = vec![0.0; len * e];
    let mut bv = vec![0.0; len * n];
    let mut cv = vec![0.0; len * n];
    let mut h = vec![0.0; len * e * n];
    let mut y = vec![0.0; len * e];
    for t in 0..len {
        let st = &s[t * e..(t + 1) * e];
        if st.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParameter(
                "non-finite activation entering the SSM".into(),
            ));
        }
        w.ssm.dt_down.matvec(st, &mut low[t * r..(t + 1) * r]);
        w.ssm
            .dt_up
            .matvec(&low[t * r..(t + 1) * r], &mut dpre[t * e..(t + 1) * e]);
        for d in 0..e {
            dpre[t * e + d] += w.ssm.dt_bias[d];
            dt[t * e + d] = crate::linalg::softplus(dpre[t * e + d]);
        }
        w.ssm.b_proj.matvec(st, &mut bv[t * n..(t + 1) * n]);
        w.ssm.c_proj.matvec(st, &mut cv[t * n..(t + 1) * n]);
        for d in 0..e {
            let sd = st[d];
            let dtd = dt[t * e + d];
            let mut out = 0.0;
            for k in 0..n {
                let a = w.ssm.a(d, k);
                let a_bar = (dtd * a).exp();
                let b_bar = b_bar_entry(w.ssm.b_mode, dtd, a, bv[t * n + k]);
                let prev = if t == 0 { 0.0 } else { h[(t - 1) * e * n + d * n + k] };
                let hv = a_bar * prev + b_bar * sd;
                h[t * e * n + d * n + k] = hv;
                out += cv[t * n + k] * hv;
            }
            y[t * e + d] = out;
        }
    }

    let mut out = vec![0.0; len * m];
    let mut z = vec![0.0; e];
    let mut proj = vec![0.0; m];
    for t in 0..len {
        for d in 0..e {
            z[d] = silu(gate[t * e + d]) * y[t * e + d];
        }
        w.out_proj.matvec(&z, &mut proj);
        for i in 0..m {
            out[t * m + i] = x[t * m + i] + proj[i];
        }
    }

    Ok((
        out,
        BlockCache {
            len,
            xn,
            u,
            gate,
            conv,
            s,
            low,
            dpre,
            dt,
            bv,
            cv,
            h,
            y,
        },
    ))
}

/// Single-token streaming step; composes the conv ring buffer and the SSM
/// recurrence held in `state`.
pub fn mamba_block_step(
    x_t: &[f64],
    w: &BlockWeights,
    state: &mut SsmState,
) -> Result<Vec<f64>, ModelError> {
    let m = w.model_dim;
    let e = w.inner_dim;
    if x_t.len() != m {
        return Err(ModelError::Shape(format!(
            "step input dim {} vs model dim {m}",
            x_t.len()
        )));
    }
    let xn = rms_norm(x_t, &w.norm_gain, RMS_EPS)?;
    let mut u = vec![0.0; e];
    w.in_proj_x.matvec(&xn, &mut u);
    let mut gate = vec![0.0; e];
    w.in_proj_gate.matvec(&xn, &mut gate);
    let conv = conv_step(&mut state.conv_buf, &mut state.conv_pos, &u, &w.conv_kernel)?;
    let s: Vec<f64> = conv.iter().map(|&v| silu(v)).collect();
    let y = ssm_step(state, &s, &w.ssm)?;
    let z: Vec<f64> = gate
        .iter()
        .zip(&y)
        .map(|(g, yv)| silu(*g) * yv)
        .collect();
    let mut out = vec![0.0; m];
    w.out_proj.matvec(&z, &mut out);
    for i in 0..m {
        out[i] += x_t[i];
    }
    Ok(out)
}

/// Backward pass. Accumulates parameter gradients into `grads` (same shapes
/// as the weights) and returns the gradient with respect to the block input.
pub fn mamba_block_backward(
    x: &[f64],
    w: &BlockWeights,
    cache: &BlockCache,
    grad_out: &[f64],
    grads: &mut BlockWeights,
) -> Result<Vec<f64>, ModelError> {
    let m = w.model_dim;
    let e = w.inner_dim;
    let n = w.ssm.state_dim;
    let r = w.ssm.dt_rank;
    let len = cache.len;
    if grad_out.len() != len * m || x.len() != len * m {
        return Err(ModelError::Shape("backward shapes disagree".into()));
    }

    let mut ds = vec![0.0; len * e];
    let mut dbv = vec![0.0; len * n];
    let mut dcv = vec![0.0; len * n];
    let mut ddt = vec![0.0; len * e];
    let mut dgate = vec![0.0; len * e];
    let mut dy = vec![0.0; len * e];

    // Out-projection and gate.
    let mut z = vec![0.0; e];
    for t in 0..len {
        let go = &grad_out[t * m..(t + 1) * m];
        for (d, zd) in z.iter_mut().enumerate() {
            *zd = silu(cache.gate[t * e + d]) * cache.y[t * e + d];
        }
        grads.out_proj.outer_acc(go, &z);
        let mut dz = vec![0.0; e];
        w.out_proj.matvec_t_acc(go, &mut dz);
        for d in 0..e {
            let g = cache.gate[t * e + d];
            let gs = silu(g);
            dy[t * e + d] = dz[d] * gs;
            dgate[t * e + d] = dz[d] * cache.y[t * e + d] * silu_grad(g);
        }
    }

    // Recurrence, walked backwards with a carried state gradient.
    let mut dh_carry = vec![0.0; e * n];
    for t in (0..len).rev() {
        for d in 0..e {
            let sd = cache.s[t * e + d];
            let dtd = cache.dt[t * e + d];
            for k in 0..n {
                let idx = d * n + k;
                let dh = cache.cv[t * n + k] * dy[t * e + d] + dh_carry[idx];
                let a = w.ssm.a(d, k);
                let a_bar = (dtd * a).exp();
                let h_prev = if t == 0 {
                    0.0
                } else {
                    cache.h[(t - 1) * e * n + idx]
                };
                let d_abar = dh * h_prev;
                let d_bbar = dh * sd;
                dh_carry[idx] = dh * a_bar;
                ds[t * e + d] += dh * b_bar_entry(w.ssm.b_mode, dtd, a, cache.bv[t * n + k]);
                ddt[t * e + d] += d_abar * a_bar * a;
                let mut da = d_abar * a_bar * dtd;
                match w.ssm.b_mode {
                    BDiscretization::Euler => {
                        ddt[t * e + d] += d_bbar * cache.bv[t * n + k];
                        dbv[t * n + k] += d_bbar * dtd;
                    }
                    BDiscretization::Zoh => {
                        // b_bar = f(dt, a) b with f = (exp(dt a) - 1)/a.
                        let f = (dtd * a).exp_m1() / a;
                        ddt[t * e + d] += d_bbar * cache.bv[t * n + k] * a_bar;
                        dbv[t * n + k] += d_bbar * f;
                        da += d_bbar * cache.bv[t * n + k] * (dtd * a_bar - f) / a;
                    }
                }
                // a = -exp(a_log) so da/da_log = a.
                *grads.ssm.a_log.at_mut(d, k) += da * a;
            }
            // Output read-out contributes to cv's gradient.
            for k in 0..n {
                dcv[t * n + k] += dy[t * e + d] * cache.h[t * e * n + d * n + k];
            }
        }
    }

    // Step-parameter projections.
    for t in 0..len {
        let st = &cache.s[t * e..(t + 1) * e];
        let mut ddpre = vec![0.0; e];
        for d in 0..e {
            ddpre[d] = ddt[t * e + d] * sigmoid(cache.dpre[t * e + d]);
            grads.ssm.dt_bias[d] += ddpre[d];
        }
        grads
            .ssm
            .dt_up
            .outer_acc(&ddpre, &cache.low[t * r..(t + 1) * r]);
        let mut dlow = vec![0.0; r];
        w.ssm.dt_up.matvec_t_acc(&ddpre, &mut dlow);
        grads.ssm.dt_down.outer_acc(&dlow, st);
        w.ssm
            .dt_down
            .matvec_t_acc(&dlow, &mut ds[t * e..(t + 1) * e]);

        grads.ssm.b_proj.outer_acc(&dbv[t * n..(t + 1) * n], st);
        w.ssm
            .b_proj
            .matvec_t_acc(&dbv[t * n..(t + 1) * n], &mut ds[t * e..(t + 1) * e]);
        grads.ssm.c_proj.outer_acc(&dcv[t * n..(t + 1) * n], st);
        w.ssm
            .c_proj
            .matvec_t_acc(&dcv[t * n..(t + 1) * n], &mut ds[t * e..(t + 1) * e]);
    }

    // SiLU after the convolution.
    let mut dconv = vec![0.0; len * e];
    for i in 0..len * e {
        dconv[i] = ds[i] * silu_grad(cache.conv[i]);
    }

    // Depthwise causal convolution.
    let width = w.conv_width;
    let mut du = vec![0.0; len * e];
    for t in 0..len {
        for d in 0..e {
            let g = dconv[t * e + d];
            if g == 0.0 {
                continue;
            }
            for k in 0..width {
                let back = width - 1 - k;
                if back <= t {
                    let src = t - back;
                    du[src * e + d] += w.conv_kernel.at(d, k) * g;
                    *grads.conv_kernel.at_mut(d, k) += g * cache.u[src * e + d];
                }
            }
        }
    }

    // In-projections and the pre-norm.
    let mut dx = vec![0.0; len * m];
    for t in 0..len {
        let xn_t = &cache.xn[t * m..(t + 1) * m];
        grads.in_proj_x.outer_acc(&du[t * e..(t + 1) * e], xn_t);
        grads
            .in_proj_gate
            .outer_acc(&dgate[t * e..(t + 1) * e], xn_t);
        let mut dxn = vec![0.0; m];
        w.in_proj_x.matvec_t_acc(&du[t * e..(t + 1) * e], &mut dxn);
        w.in_proj_gate
            .matvec_t_acc(&dgate[t * e..(t + 1) * e], &mut dxn);
        let dx_t = rms_norm_backward(
            &x[t * m..(t + 1) * m],
            &w.norm_gain,
            RMS_EPS,
            &dxn,
            &mut grads.norm_gain,
        );
        for i in 0..m {
            dx[t * m + i] = dx_t[i] + grad_out[t * m + i];
        }
    }

    Ok(dx)
}
