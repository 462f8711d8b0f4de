//! Toy-scale supervised fine-tuning with the full recipe shape: joint tuning
//! of projector and backbone (no pre-alignment stage by default), linear
//! warm-up into cosine decay, decoupled weight decay, multi-epoch passes
//! over a synthetic instruction dataset. Vision encoders stay frozen.

pub mod optim;
pub mod synthetic;

pub use optim::AdamW;
pub use synthetic::{synthetic_dataset, SyntheticSample, INSTRUCTION, PALETTE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TrainError;
use crate::lm::{fuse_sequence, loss_and_grads, MultimodalSequence};
use crate::pipeline::VlmPipeline;
use crate::prompt::{training_ids_chat, Conversation};
use crate::vision::{project_backward, project_cached, VisualFeatures};

/// Training hyperparameters. [`TrainConfig::recipe`] carries the published
/// defaults (learning rate 2e-5, weight decay 0.1, warm-up ratio 0.03,
/// cosine decay, 2 epochs, global batch 128); [`TrainConfig::toy`] scales
/// the batch and learning rate down to desk size: a randomly initialized
/// toy model needs a larger step than a pretrained multi-billion-parameter
/// one, and the 128 batch does not fit a 32-sample dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional hard cap on optimizer steps (evaluation harness use).
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn recipe() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.1,
            warmup_ratio: 0.03,
            epochs: 2,
            batch_size: 128,
            seed: 0,
            max_steps: None,
        }
    }

    pub fn toy() -> Self {
        Self {
            lr: 4e-3,
            batch_size: 1,
            ..Self::recipe()
        }
    }

    /// Parse a plain key=value text file ("lr", "weight_decay",
    /// "warmup_ratio", "epochs", "batch_size", "seed"); unknown keys are
    /// rejected, missing keys keep the base values.
    pub fn from_kv(text: &str, base: TrainConfig) -> Result<Self, TrainError> {
        let mut cfg = base;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| {
                TrainError::Model(crate::error::ModelError::Config(format!(
                    "config line {}: {what}",
                    lineno + 1
                )))
            };
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "lr" => cfg.lr = v.parse().map_err(|_| bad("bad lr"))?,
                "weight_decay" => {
                    cfg.weight_decay = v.parse().map_err(|_| bad("bad weight_decay"))?
                }
                "warmup_ratio" => {
                    cfg.warmup_ratio = v.parse().map_err(|_| bad("bad warmup_ratio"))?
                }
                "epochs" => cfg.epochs = v.parse().map_err(|_| bad("bad epochs"))?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad("bad batch_size"))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("bad seed"))?,
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::Model(crate::error::ModelError::Config(
                "warm-up ratio must lie in [0, 1)".into(),
            )));
        }
        if self.lr <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Model(crate::error::ModelError::Config(
                "lr must be positive, epochs and batch size at least 1".into(),
            )));
        }
        Ok(())
    }
}

/// Linear warm-up from zero over `ceil(warmup_ratio * total)` steps, then
/// cosine decay from the peak toward zero at `total`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let warmup = (cfg.warmup_ratio * total_steps as f64).ceil() as usize;
    if warmup > 0 && step <= warmup {
        return Ok(cfg.lr * step as f64 / warmup as f64);
    }
    let denom = (total_steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / denom;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{}\n", p.step, p.lr, p.loss));
        }
        out
    }
}

/// Which parameters the optimizer touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Projector and backbone jointly (the default recipe).
    Full,
    /// Projector only; the backbone is bitwise untouched.
    ProjectorOnly,
}

struct PreparedSample {
    id: usize,
    features: VisualFeatures,
    ids: Vec<u32>,
    flags: Vec<bool>,
}

fn prepare(
    pipe: &VlmPipeline,
    data: &[SyntheticSample],
) -> Result<Vec<PreparedSample>, TrainError> {
    data.iter()
        .map(|s| {
            let features = pipe.encode_image(&s.image)?;
            let mut conv = Conversation::single(s.instruction.clone());
            conv.push_assistant(s.answer.clone());
            let (ids, flags) = training_ids_chat(&conv)?;
            Ok(PreparedSample {
                id: s.id,
                features,
                ids,
                flags,
            })
        })
        .collect()
}

fn sequence_for(
    pipe: &VlmPipeline,
    sample: &PreparedSample,
) -> Result<(MultimodalSequence, crate::vision::ProjectorCache), TrainError> {
    let (projected, cache) = project_cached(&pipe.projector, &sample.features)?;
    let seq = fuse_sequence(Some(&projected), &sample.ids, &sample.flags, &pipe.backbone)?;
    Ok((seq, cache))
}

fn mean_loss(pipe: &VlmPipeline, samples: &[PreparedSample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in samples {
        let (seq, _) = sequence_for(pipe, s)?;
        let logits = crate::lm::forward_logits(&seq, &pipe.backbone)?;
        total += crate::lm::next_token_loss(&logits, &seq)?;
    }
    Ok(total / samples.len() as f64)
}

/// Fine-tune on the synthetic dataset. Deterministic for a fixed seed.
pub fn train_toy(
    pipe: &mut VlmPipeline,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_with_scope(pipe, data, cfg, TrainScope::Full)
}

pub fn train_with_scope(
    pipe: &mut VlmPipeline,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
    scope: TrainScope,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let samples = prepare(pipe, data)?;
    let initial_loss = mean_loss(pipe, &samples)?;

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let mut total_steps = cfg.epochs * steps_per_epoch;
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap);
    }

    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    let epoch_limit = total_steps.div_ceil(steps_per_epoch);
    'epochs: for _epoch in 0..epoch_limit {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            let mut backbone_grads = pipe.backbone.zeros_like();
            let mut projector_grads = pipe.projector.zeros_like();
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let s = &samples[idx];
                let (seq, cache) = sequence_for(pipe, s)?;
                let (loss, dvisual) =
                    loss_and_grads(&seq, &pipe.backbone, &mut backbone_grads)?;
                project_backward(
                    &pipe.projector,
                    &s.features,
                    &cache,
                    &dvisual,
                    &mut projector_grads,
                )?;
                batch_loss += loss;
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    loss: batch_loss,
                    step,
                    samples: chunk.iter().map(|&i| samples[i].id).collect(),
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            let lr = lr_at(step + 1, total_steps, cfg)?;

            let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
            let mut params: Vec<(String, &mut Vec<f64>)> = Vec::new();
            for (name, g) in projector_grads.tensors() {
                grads.push((
                    format!("projector.{name}"),
                    g.iter().map(|v| v * scale).collect(),
                ));
            }
            for (name, p) in pipe.projector.tensors_mut() {
                params.push((format!("projector.{name}"), p));
            }
            if scope == TrainScope::Full {
                for (name, g) in backbone_grads.tensors() {
                    grads.push((
                        format!("backbone.{name}"),
                        g.iter().map(|v| v * scale).collect(),
                    ));
                }
                for (name, p) in pipe.backbone.tensors_mut() {
                    params.push((format!("backbone.{name}"), p));
                }
            }
            opt.step(lr, &mut params, &grads);
            step += 1;
            curve.push(CurvePoint {
                step,
                lr,
                loss: batch_loss,
            });
        }
    }

    let final_loss = mean_loss(pipe, &samples)?;
    Ok(TrainReport {
        curve,
        initial_loss,
        final_loss,
    })
}

/// The runnable training-strategy axes: two-epoch fine-tuning (default),
/// one-epoch fine-tuning, and a pre-align-then-fine-tune variant whose
/// first phase updates only the projector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub enum TrainVariant {
    #[default]
    Ft2Ep,
    Ft1Ep,
    PrealignFt,
}

impl TrainVariant {
    pub fn id(&self) -> &'static str {
        match self {
            Self::Ft2Ep => "ft2ep",
            Self::Ft1Ep => "ft1ep",
            Self::PrealignFt => "prealign_ft",
        }
    }

    pub fn all() -> [TrainVariant; 3] {
        [Self::Ft2Ep, Self::Ft1Ep, Self::PrealignFt]
    }
}


impl std::str::FromStr for TrainVariant {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "ft2ep" => Ok(Self::Ft2Ep),
            "ft1ep" => Ok(Self::Ft1Ep),
            "prealign_ft" => Ok(Self::PrealignFt),
            other => Err(TrainError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub variant_id: &'static str,
    pub report: TrainReport,
    /// For the pre-align variant: whether the backbone stayed bitwise
    /// unchanged through phase one.
    pub backbone_frozen_in_phase1: Option<bool>,
}

/// Run one training-strategy variant from the given starting pipeline
/// (cloned; the input is untouched). All variants emit comparable curves.
pub fn run_variant(
    variant: TrainVariant,
    pipe: &VlmPipeline,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<(VariantOutcome, VlmPipeline), TrainError> {
    let mut model = pipe.clone();
    match variant {
        TrainVariant::Ft2Ep => {
            let report = train_with_scope(
                &mut model,
                data,
                &TrainConfig {
                    epochs: 2,
                    ..*cfg
                },
                TrainScope::Full,
            )?;
            Ok((
                VariantOutcome {
                    variant_id: variant.id(),
                    report,
                    backbone_frozen_in_phase1: None,
                },
                model,
            ))
        }
        TrainVariant::Ft1Ep => {
            let report = train_with_scope(
                &mut model,
                data,
                &TrainConfig {
                    epochs: 1,
                    ..*cfg
                },
                TrainScope::Full,
            )?;
            Ok((
                VariantOutcome {
                    variant_id: variant.id(),
                    report,
                    backbone_frozen_in_phase1: None,
                },
                model,
            ))
        }
        TrainVariant::PrealignFt => {
            let backbone_before = model.backbone.clone();
            let phase1 = train_with_scope(
                &mut model,
                data,
                &TrainConfig {
                    epochs: 1,
                    ..*cfg
                },
                TrainScope::ProjectorOnly,
            )?;
            let frozen = model.backbone == backbone_before;
            let mut phase2 = train_with_scope(
                &mut model,
                data,
                &TrainConfig {
                    epochs: 1,
                    ..*cfg
                },
                TrainScope::Full,
            )?;
            let offset = phase1.curve.len();
            let mut curve = phase1.curve;
            for p in &mut phase2.curve {
                curve.push(CurvePoint {
                    step: p.step + offset,
                    lr: p.lr,
                    loss: p.loss,
                });
            }
            Ok((
                VariantOutcome {
                    variant_id: variant.id(),
                    report: TrainReport {
                        curve,
                        initial_loss: phase1.initial_loss,
                        final_loss: phase2.final_loss,
                    },
                    backbone_frozen_in_phase1: Some(frozen),
                },
                model,
            ))
        }
    }
}
