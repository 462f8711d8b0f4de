//! The recurrent language backbone: token embedding, a stack of identical
//! mixer blocks, multi-modal sequence fusion, full-sequence logits for
//! training, and the loss with its full backward pass.
//!
//! Visual embeddings bypass the token table entirely; they are prepended to
//! the text embeddings as continuous vectors. Causality is structural: the
//! recurrence never reads future positions.

pub mod generate;

pub use generate::{
    forward_logits_streaming, generate, GenerationConfig, GenerationSession, Sampling, StepTrace,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;
use crate::linalg::Mat;
use crate::prompt::tokenizer::MIN_VOCAB;
use crate::ssm::block::RMS_EPS;
use crate::ssm::{
    mamba_block_backward, mamba_block_forward_cached, rms_norm, rms_norm_backward, BlockCache,
    BlockWeights,
};
use crate::vision::ProjectedTokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub state_dim: usize,
    /// Inner width is `model_dim * expand`.
    pub expand: usize,
    pub conv_width: usize,
    pub tie_embeddings: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab < MIN_VOCAB {
            return Err(ModelError::Config(format!(
                "vocab {} is smaller than the tokenizer's id space {MIN_VOCAB}",
                self.vocab
            )));
        }
        if self.model_dim == 0
            || self.layers == 0
            || self.state_dim == 0
            || self.expand == 0
            || self.conv_width == 0
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn inner_dim(&self) -> usize {
        self.model_dim * self.expand
    }

    pub fn dt_rank(&self) -> usize {
        self.model_dim.div_ceil(16)
    }

    /// Small configuration used throughout the test and verification suites.
    pub fn tiny() -> Self {
        Self {
            vocab: 300,
            model_dim: 16,
            layers: 2,
            state_dim: 4,
            expand: 2,
            conv_width: 4,
            tie_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub cfg: BackboneConfig,
    /// vocab x model_dim; also the output head when tied.
    pub embedding: Mat,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: Vec<f64>,
    /// Untied output head, vocab x model_dim.
    pub head: Option<Mat>,
}

impl BackboneWeights {
    pub fn seeded(cfg: BackboneConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Mat::randn(cfg.vocab, cfg.model_dim, &mut rng, 1.0);
        let blocks = (0..cfg.layers)
            .map(|_| {
                BlockWeights::seeded(
                    cfg.model_dim,
                    cfg.inner_dim(),
                    cfg.state_dim,
                    cfg.conv_width,
                    cfg.dt_rank(),
                    &mut rng,
                )
            })
            .collect();
        let head = if cfg.tie_embeddings {
            None
        } else {
            Some(Mat::randn(cfg.vocab, cfg.model_dim, &mut rng, 1.0))
        };
        Ok(Self {
            cfg,
            embedding,
            blocks,
            final_gain: vec![1.0; cfg.model_dim],
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg,
            embedding: Mat::zeros(self.embedding.rows, self.embedding.cols),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            final_gain: vec![0.0; self.final_gain.len()],
            head: self
                .head
                .as_ref()
                .map(|h| Mat::zeros(h.rows, h.cols)),
        }
    }

    fn head_matrix(&self) -> &Mat {
        self.head.as_ref().unwrap_or(&self.embedding)
    }

    pub(crate) fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![("embedding".into(), &self.embedding.data)];
        for (k, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("block{k}.{name}"), t));
            }
        }
        out.push(("final_gain".into(), &self.final_gain));
        if let Some(h) = &self.head {
            out.push(("head".into(), &h.data));
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> =
            vec![("embedding".into(), &mut self.embedding.data)];
        for (k, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                out.push((format!("block{k}.{name}"), t));
            }
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        if let Some(h) = &mut self.head {
            out.push(("head".into(), &mut h.data));
        }
        out
    }
}

/// The fused input sequence: visual embeddings first, then embedded text.
/// `mask[t]` is true exactly when the prediction made at position `t` (of
/// the token at `t + 1`) is scored by the loss, i.e. when `t + 1` lies in
/// the answer span.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    /// len x model_dim.
    pub embeds: Mat,
    /// Token id per position; `None` on visual positions.
    pub token_ids: Vec<Option<u32>>,
    pub mask: Vec<bool>,
    pub visual_len: usize,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.embeds.rows
    }

    pub fn is_empty(&self) -> bool {
        self.embeds.rows == 0
    }
}

/// Concatenate projected visual tokens (if any) with embedded text ids.
/// `answer_flags[i]` marks whether text token `i` belongs to the answer span.
pub fn fuse_sequence(
    visual: Option<&ProjectedTokens>,
    ids: &[u32],
    answer_flags: &[bool],
    w: &BackboneWeights,
) -> Result<MultimodalSequence, ModelError> {
    if ids.is_empty() {
        return Err(ModelError::Precondition("text token list is empty".into()));
    }
    if ids.len() != answer_flags.len() {
        return Err(ModelError::Shape("ids and answer flags disagree".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= w.cfg.vocab) {
        return Err(ModelError::Precondition(format!(
            "token id {bad} outside vocabulary {}",
            w.cfg.vocab
        )));
    }
    let m = w.cfg.model_dim;
    let visual_len = visual.map_or(0, |v| v.tokens.rows);
    if let Some(v) = visual {
        if v.tokens.cols != m {
            return Err(ModelError::Shape(format!(
                "visual tokens have dim {}, model dim is {m}",
                v.tokens.cols
            )));
        }
    }
    let total = visual_len + ids.len();
    let mut embeds = Mat::zeros(total, m);
    let mut token_ids = vec![None; total];
    if let Some(v) = visual {
        embeds.data[..visual_len * m].copy_from_slice(&v.tokens.data);
    }
    for (i, &id) in ids.iter().enumerate() {
        let p = visual_len + i;
        embeds
            .row_mut(p)
            .copy_from_slice(w.embedding.row(id as usize));
        token_ids[p] = Some(id);
    }
    let mut mask = vec![false; total];
    for (i, &is_answer) in answer_flags.iter().enumerate() {
        if is_answer {
            let target_pos = visual_len + i;
            if target_pos > 0 {
                mask[target_pos - 1] = true;
            }
        }
    }
    Ok(MultimodalSequence {
        embeds,
        token_ids,
        mask,
        visual_len,
    })
}

/// Forward intermediates for [`loss_and_grads`].
pub struct ForwardCache {
    pub block_inputs: Vec<Vec<f64>>,
    pub block_caches: Vec<BlockCache>,
    pub stack_out: Vec<f64>,
    pub normed: Mat,
}

/// Full-sequence logits: pre-norm residual stack, final normalization,
/// output projection. `len x vocab`.
pub fn forward_logits(seq: &MultimodalSequence, w: &BackboneWeights) -> Result<Mat, ModelError> {
    Ok(forward_logits_cached(seq, w)?.0)
}

pub fn forward_logits_cached(
    seq: &MultimodalSequence,
    w: &BackboneWeights,
) -> Result<(Mat, ForwardCache), ModelError> {
    if seq.is_empty() {
        return Err(ModelError::Precondition("empty sequence".into()));
    }
    let len = seq.len();
    let m = w.cfg.model_dim;
    let mut x = seq.embeds.data.clone();
    let mut block_inputs = Vec::with_capacity(w.blocks.len());
    let mut block_caches = Vec::with_capacity(w.blocks.len());
    for b in &w.blocks {
        block_inputs.push(x.clone());
        let (out, cache) = mamba_block_forward_cached(&x, b)?;
        block_caches.push(cache);
        x = out;
    }
    let mut normed = Mat::zeros(len, m);
    for t in 0..len {
        let n = rms_norm(&x[t * m..(t + 1) * m], &w.final_gain, RMS_EPS)?;
        normed.row_mut(t).copy_from_slice(&n);
    }
    let head = w.head_matrix();
    let mut logits = Mat::zeros(len, w.cfg.vocab);
    for t in 0..len {
        head.matvec(normed.row(t), logits.row_mut(t));
    }
    Ok((
        logits,
        ForwardCache {
            block_inputs,
            block_caches,
            stack_out: x,
            normed,
        },
    ))
}

/// Mean cross-entropy over masked positions `t` of `logits[t]` against the
/// token at `t + 1`.
pub fn next_token_loss(logits: &Mat, seq: &MultimodalSequence) -> Result<f64, ModelError> {
    let (loss, _) = loss_and_dlogits(logits, seq)?;
    Ok(loss)
}

fn loss_and_dlogits(
    logits: &Mat,
    seq: &MultimodalSequence,
) -> Result<(f64, Mat), ModelError> {
    if logits.rows != seq.len() {
        return Err(ModelError::Shape("logits/sequence length mismatch".into()));
    }
    let count = seq.mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(ModelError::Precondition(
            "loss mask has no scored positions".into(),
        ));
    }
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for t in 0..seq.len() {
        if !seq.mask[t] {
            continue;
        }
        let target = seq
            .token_ids
            .get(t + 1)
            .copied()
            .flatten()
            .ok_or_else(|| {
                ModelError::Precondition(format!("masked position {t} has no target token"))
            })?;
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[target as usize];
        let drow = dlogits.row_mut(t);
        for (i, v) in row.iter().enumerate() {
            drow[i] = (v - lse).exp() / count as f64;
        }
        drow[target as usize] -= 1.0 / count as f64;
    }
    Ok((total / count as f64, dlogits))
}

/// Loss, parameter gradients, and the gradient with respect to the visual
/// token embeddings (for continuing into the projector).
pub fn loss_and_grads(
    seq: &MultimodalSequence,
    w: &BackboneWeights,
    grads: &mut BackboneWeights,
) -> Result<(f64, Mat), ModelError> {
    let (logits, cache) = forward_logits_cached(seq, w)?;
    let (loss, dlogits) = loss_and_dlogits(&logits, seq)?;
    let dvisual = backward_from_dlogits(seq, w, &cache, &dlogits, grads)?;
    Ok((loss, dvisual))
}

pub(crate) fn backward_from_dlogits(
    seq: &MultimodalSequence,
    w: &BackboneWeights,
    cache: &ForwardCache,
    dlogits: &Mat,
    grads: &mut BackboneWeights,
) -> Result<Mat, ModelError> {
    let len = seq.len();
    let m = w.cfg.model_dim;
    let head = w.head_matrix();
    let mut dnormed = Mat::zeros(len, m);
    for t in 0..len {
        let drow = dlogits.row(t);
        if drow.iter().all(|&v| v == 0.0) {
            continue;
        }
        head.matvec_t_acc(drow, dnormed.row_mut(t));
        // Head weight gradient goes to the tied embedding or the free head.
        let gm = match (&mut grads.head, w.head.is_some()) {
            (Some(h), true) => h,
            _ => &mut grads.embedding,
        };
        gm.outer_acc(drow, cache.normed.row(t));
    }

    let mut dstack = vec![0.0; len * m];
    for t in 0..len {
        let dx = rms_norm_backward(
            &cache.stack_out[t * m..(t + 1) * m],
            &w.final_gain,
            RMS_EPS,
            dnormed.row(t),
            &mut grads.final_gain,
        );
        dstack[t * m..(t + 1) * m].copy_from_slice(&dx);
    }

    let mut dx = dstack;
    for k in (0..w.blocks.len()).rev() {
        dx = mamba_block_backward(
            &cache.block_inputs[k],
            &w.blocks[k],
            &cache.block_caches[k],
            &dx,
            &mut grads.blocks[k],
        )?;
    }

    // Split the input-embedding gradient between the token table and the
    // visual rows handed back to the projector.
    let mut dvisual = Mat::zeros(seq.visual_len, m);
    for t in 0..len {
        match seq.token_ids[t] {
            Some(id) => {
                let row = grads.embedding.row_mut(id as usize);
                for (g, v) in row.iter_mut().zip(&dx[t * m..(t + 1) * m]) {
                    *g += v;
                }
            }
            None => {
                dvisual
                    .row_mut(t)
                    .copy_from_slice(&dx[t * m..(t + 1) * m]);
            }
        }
    }
    Ok(dvisual)
}
