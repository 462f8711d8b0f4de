//! Minimal single-head causal attention with a key/value cache: the scaling
//! baseline whose per-token decode cost grows with context length. Not a
//! faithful transformer, just the smallest unit that exhibits the growth.

use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;
use crate::linalg::Mat;

#[derive(Debug, Clone)]
pub struct AttentionRef {
    pub dim: usize,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

impl AttentionRef {
    pub fn seeded(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dim,
            wq: Mat::randn(dim, dim, rng, 1.0),
            wk: Mat::randn(dim, dim, rng, 1.0),
            wv: Mat::randn(dim, dim, rng, 1.0),
            wo: Mat::randn(dim, dim, rng, 1.0),
        }
    }

    pub fn from_seed(dim: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        Self::seeded(dim, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Per-token key/value storage; grows by exactly one entry per decode step.
#[derive(Debug, Clone, Default)]
pub struct AttnCache {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl AttnCache {
    pub fn entries(&self) -> usize {
        self.keys.len()
    }
}

/// Full-sequence causal attention over a time-major `len x dim` input.
pub fn attention_forward(r: &AttentionRef, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    if x.is_empty() || !x.len().is_multiple_of(r.dim) {
        return Err(ModelError::Shape("attention input length".into()));
    }
    let len = x.len() / r.dim;
    let mut cache = AttnCache::default();
    let mut out = vec![0.0; x.len()];
    for t in 0..len {
        let y = attention_step(r, &mut cache, &x[t * r.dim..(t + 1) * r.dim])?;
        out[t * r.dim..(t + 1) * r.dim].copy_from_slice(&y);
    }
    Ok(out)
}

/// One decode step: append the new key/value, attend over everything cached.
pub fn attention_step(
    r: &AttentionRef,
    cache: &mut AttnCache,
    x_t: &[f64],
) -> Result<Vec<f64>, ModelError> {
    if x_t.len() != r.dim {
        return Err(ModelError::Shape(format!(
            "attention step input dim {} vs {}",
            x_t.len(),
            r.dim
        )));
    }
    let mut q = vec![0.0; r.dim];
    r.wq.matvec(x_t, &mut q);
    let mut k = vec![0.0; r.dim];
    r.wk.matvec(x_t, &mut k);
    let mut v = vec![0.0; r.dim];
    r.wv.matvec(x_t, &mut v);
    cache.keys.push(k);
    cache.values.push(v);

    let scale = 1.0 / (r.dim as f64).sqrt();
    let mut scores: Vec<f64> = cache
        .keys
        .iter()
        .map(|k| crate::linalg::dot(&q, k) * scale)
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    let mut mixed = vec![0.0; r.dim];
    for (w, val) in scores.iter().zip(&cache.values) {
        let p = w / total;
        for (m, x) in mixed.iter_mut().zip(val) {
            *m += p * x;
        }
    }
    let mut out = vec![0.0; r.dim];
    r.wo.matvec(&mixed, &mut out);
    Ok(out)
}
