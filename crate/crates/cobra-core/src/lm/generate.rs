//! Autoregressive generation with constant per-token cost.
//!
//! Prefill consumes the whole prompt once, leaving one fixed-size state per
//! layer; each generated token is then a single recurrence step. The session
//! state never grows with the number of tokens emitted; the contrast with a
//! key/value cache lives in the benchmark harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackboneWeights, MultimodalSequence};
use crate::error::ModelError;
use crate::linalg::Mat;
use crate::prompt::tokenizer::END_OF_TEXT_ID;
use crate::ssm::block::RMS_EPS;
use crate::ssm::{mamba_block_step, rms_norm, SsmState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub max_new: usize,
    pub stop_id: Option<u32>,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new: 64,
            stop_id: Some(END_OF_TEXT_ID),
            sampling: Sampling::Greedy,
            seed: 0,
        }
    }
}

/// Per-step trace record: step index, emitted token, step latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTrace {
    pub step: usize,
    pub token: u32,
    pub micros: u128,
}

/// One decoding session: a fixed-size state per layer plus the emitted
/// tokens. Exclusively owned by its task; weights are shared.
#[derive(Debug, Clone)]
pub struct GenerationSession {
    pub states: Vec<SsmState>,
    pub emitted: Vec<u32>,
    pub cfg: GenerationConfig,
    rng: ChaCha8Rng,
}

impl GenerationSession {
    pub fn new(w: &BackboneWeights, cfg: GenerationConfig) -> Self {
        Self {
            states: w.blocks.iter().map(|b| b.fresh_state()).collect(),
            emitted: Vec::new(),
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    /// Serialized size of the recurrent state; constant for a configuration.
    pub fn state_bytes(&self) -> usize {
        self.states.iter().map(|s| s.serialized_len()).sum()
    }

    fn check_fresh(&self, w: &BackboneWeights) -> Result<(), ModelError> {
        if self.states.len() != w.blocks.len() {
            return Err(ModelError::State(format!(
                "session has {} layer states, model has {} layers",
                self.states.len(),
                w.blocks.len()
            )));
        }
        for (s, b) in self.states.iter().zip(&w.blocks) {
            if !s.matches(&b.ssm) || s.conv_width != b.conv_width {
                return Err(ModelError::State(
                    "session state shape does not match the model configuration".into(),
                ));
            }
        }
        Ok(())
    }

    /// Advance every layer by one position and return the logits there.
    fn step_logits(&mut self, x: &[f64], w: &BackboneWeights) -> Result<Vec<f64>, ModelError> {
        let mut h = x.to_vec();
        for (block, state) in w.blocks.iter().zip(self.states.iter_mut()) {
            h = mamba_block_step(&h, block, state)?;
        }
        let normed = rms_norm(&h, &w.final_gain, RMS_EPS)?;
        let head = w.head.as_ref().unwrap_or(&w.embedding);
        let mut logits = vec![0.0; w.cfg.vocab];
        head.matvec(&normed, &mut logits);
        Ok(logits)
    }

    fn pick(&mut self, logits: &[f64]) -> u32 {
        match self.cfg.sampling {
            Sampling::Greedy => argmax(logits) as u32,
            Sampling::Temperature(temp) => {
                let t = temp.max(1e-6);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|v| ((v - max) / t).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut draw = self.rng.random::<f64>() * total;
                for (i, wgt) in weights.iter().enumerate() {
                    draw -= wgt;
                    if draw <= 0.0 {
                        return i as u32;
                    }
                }
                (weights.len() - 1) as u32
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Decode from a prompt: prefill once, then emit up to `max_new` tokens,
/// stopping at the configured stop id. Returns the tokens and a per-step
/// trace.
pub fn generate(
    session: &mut GenerationSession,
    seq: &MultimodalSequence,
    w: &BackboneWeights,
) -> Result<(Vec<u32>, Vec<StepTrace>), ModelError> {
    session.check_fresh(w)?;
    if seq.is_empty() {
        return Err(ModelError::Precondition("empty prompt".into()));
    }
    if session.cfg.max_new == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let m = w.cfg.model_dim;
    // Prefill: one pass over the prompt, state carried forward.
    let mut logits = Vec::new();
    for t in 0..seq.len() {
        logits = session.step_logits(&seq.embeds.data[t * m..(t + 1) * m], w)?;
    }
    let mut out = Vec::new();
    let mut trace = Vec::new();
    for step in 0..session.cfg.max_new {
        let started = std::time::Instant::now();
        let token = session.pick(&logits);
        if Some(token) == session.cfg.stop_id {
            break;
        }
        out.push(token);
        session.emitted.push(token);
        if out.len() == session.cfg.max_new {
            trace.push(StepTrace {
                step,
                token,
                micros: started.elapsed().as_micros(),
            });
            break;
        }
        let emb = w.embedding.row(token as usize).to_vec();
        logits = session.step_logits(&emb, w)?;
        trace.push(StepTrace {
            step,
            token,
            micros: started.elapsed().as_micros(),
        });
    }
    Ok((out, trace))
}

/// Streaming evaluation of the full-sequence logits: step every position
/// through fresh per-layer states. The oracle for batch/streaming
/// equivalence checks.
pub fn forward_logits_streaming(
    seq: &MultimodalSequence,
    w: &BackboneWeights,
) -> Result<Mat, ModelError> {
    let mut session = GenerationSession::new(w, GenerationConfig::default());
    let m = w.cfg.model_dim;
    let mut logits = Mat::zeros(seq.len(), w.cfg.vocab);
    for t in 0..seq.len() {
        let row = session.step_logits(&seq.embeds.data[t * m..(t + 1) * m], w)?;
        logits.row_mut(t).copy_from_slice(&row);
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{forward_logits, fuse_sequence, BackboneConfig};
    use crate::prompt::tokenize;

    fn setup(seed: u64) -> (BackboneWeights, MultimodalSequence) {
        let w = BackboneWeights::seeded(BackboneConfig::tiny(), seed).unwrap();
        let ids = tokenize("<|user|>\nsay something<|endoftext|>\n<|assistant|>\n");
        let flags = vec![false; ids.len()];
        let seq = fuse_sequence(None, &ids, &flags, &w).unwrap();
        (w, seq)
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let (w, seq) = setup(1);
        let cfg = GenerationConfig {
            max_new: 12,
            ..Default::default()
        };
        let mut s1 = GenerationSession::new(&w, cfg);
        let mut s2 = GenerationSession::new(&w, cfg);
        let (t1, _) = generate(&mut s1, &seq, &w).unwrap();
        let (t2, _) = generate(&mut s2, &seq, &w).unwrap();
        assert_eq!(t1, t2);
        assert!(!t1.is_empty());
    }

    #[test]
    fn max_new_zero_yields_empty_output() {
        let (w, seq) = setup(2);
        let cfg = GenerationConfig {
            max_new: 0,
            ..Default::default()
        };
        let mut s = GenerationSession::new(&w, cfg);
        let (tokens, trace) = generate(&mut s, &seq, &w).unwrap();
        assert!(tokens.is_empty());
        assert!(trace.is_empty());
    }

    #[test]
    fn prefill_logits_match_full_forward_at_the_last_position() {
        let (w, seq) = setup(3);
        let batch = forward_logits(&seq, &w).unwrap();
        let streamed = forward_logits_streaming(&seq, &w).unwrap();
        let last = seq.len() - 1;
        for (a, b) in batch.row(last).iter().zip(streamed.row(last)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn session_state_size_constant_across_emissions() {
        let (w, seq) = setup(4);
        let cfg = GenerationConfig {
            max_new: 1,
            stop_id: None,
            ..Default::default()
        };
        let mut s = GenerationSession::new(&w, cfg);
        generate(&mut s, &seq, &w).unwrap();
        let sz1 = s.state_bytes();
        let cfg = GenerationConfig {
            max_new: 100,
            stop_id: None,
            ..Default::default()
        };
        let mut s = GenerationSession::new(&w, cfg);
        generate(&mut s, &seq, &w).unwrap();
        assert_eq!(sz1, s.state_bytes());
    }

    #[test]
    fn mismatched_session_is_a_state_error() {
        let (w, seq) = setup(5);
        let other = BackboneWeights::seeded(
            BackboneConfig {
                layers: 3,
                ..BackboneConfig::tiny()
            },
            6,
        )
        .unwrap();
        let mut s = GenerationSession::new(&other, GenerationConfig::default());
        assert!(matches!(
            generate(&mut s, &seq, &w),
            Err(ModelError::State(_))
        ));
    }

    #[test]
    fn temperature_sampling_is_seed_deterministic() {
        let (w, seq) = setup(7);
        let cfg = GenerationConfig {
            max_new: 8,
            sampling: Sampling::Temperature(1.0),
            seed: 42,
            ..Default::default()
        };
        let mut s1 = GenerationSession::new(&w, cfg);
        let mut s2 = GenerationSession::new(&w, cfg);
        let (t1, _) = generate(&mut s1, &seq, &w).unwrap();
        let (t2, _) = generate(&mut s2, &seq, &w).unwrap();
        assert_eq!(t1, t2);
    }
}
