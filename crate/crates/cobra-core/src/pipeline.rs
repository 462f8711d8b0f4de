//! The full image-and-question pipeline: dual toy encoders, projector,
//! backbone, prompt rendering, generation. Checkpoints round-trip through
//! the shared binary container.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{Container, Entry};
use crate::error::{FormatError, ModelError};
use crate::linalg::Mat;
use crate::lm::{
    fuse_sequence, generate, BackboneConfig, BackboneWeights, GenerationConfig, GenerationSession,
    StepTrace,
};
use crate::prompt::{
    apply_ocr_ordering, detokenize, render_base, render_chat, tokenize, Conversation, OcrOrdering,
};
use crate::ssm::{BDiscretization, BlockWeights, SelectiveWeights};
use crate::vision::{
    encode_dual, patchify, project, ImageInput, ProjectedTokens, Projector, ToyEncoder,
    VisualFeatures, DEFAULT_IMAGE_SIZE, DEFAULT_PATCH_SIZE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_a_dim: usize,
    pub enc_b_dim: usize,
}

impl VisionConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn feature_dim(&self) -> usize {
        self.enc_a_dim + self.enc_b_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Chat,
    Base,
}

impl std::str::FromStr for TemplateKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "chat" => Ok(Self::Chat),
            "base" => Ok(Self::Base),
            other => Err(ModelError::Config(format!("unknown template {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmPipeline {
    pub vision_cfg: VisionConfig,
    pub enc_a: ToyEncoder,
    pub enc_b: ToyEncoder,
    pub projector: Projector,
    pub backbone: BackboneWeights,
}

impl VlmPipeline {
    pub fn seeded(
        vision_cfg: VisionConfig,
        backbone_cfg: BackboneConfig,
        projector_kind: &str,
        ldp_stride: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_dim = vision_cfg.patch_size * vision_cfg.patch_size * 3;
        let enc_a = ToyEncoder::seeded(patch_dim, vision_cfg.enc_a_dim, &mut rng);
        let enc_b = ToyEncoder::seeded(patch_dim, vision_cfg.enc_b_dim, &mut rng);
        let projector = match projector_kind {
            "mlp" => Projector::seeded_mlp(
                vision_cfg.feature_dim(),
                backbone_cfg.model_dim,
                &mut rng,
            ),
            "ldp" => Projector::seeded_ldp(
                vision_cfg.feature_dim(),
                backbone_cfg.model_dim,
                ldp_stride,
                &mut rng,
            ),
            other => {
                return Err(ModelError::Config(format!(
                    "unknown projector kind {other:?}"
                )))
            }
        };
        let backbone = BackboneWeights::seeded(backbone_cfg, seed ^ 0x9e37_79b9)?;
        Ok(Self {
            vision_cfg,
            enc_a,
            enc_b,
            projector,
            backbone,
        })
    }

    /// Tiny pipeline on 28-pixel images; the training and CLI test target.
    pub fn toy(projector_kind: &str, seed: u64) -> Result<Self, ModelError> {
        Self::seeded(
            VisionConfig {
                image_size: 28,
                patch_size: 14,
                enc_a_dim: 6,
                enc_b_dim: 10,
            },
            BackboneConfig::tiny(),
            projector_kind,
            2,
            seed,
        )
    }

    /// Default desk-scale pipeline: 378 x 378 images, 14-pixel patches,
    /// 729 visual tokens; the down-sampling projector pools 27 -> 14 (196).
    pub fn desk(projector_kind: &str, seed: u64) -> Result<Self, ModelError> {
        Self::seeded(
            VisionConfig {
                image_size: DEFAULT_IMAGE_SIZE,
                patch_size: DEFAULT_PATCH_SIZE,
                enc_a_dim: 12,
                enc_b_dim: 20,
            },
            BackboneConfig {
                vocab: 300,
                model_dim: 32,
                layers: 2,
                state_dim: 8,
                expand: 2,
                conv_width: 4,
                tie_embeddings: true,
            },
            projector_kind,
            2,
            seed,
        )
    }

    pub fn encode_image(&self, img: &ImageInput) -> Result<VisualFeatures, ModelError> {
        if img.height != self.vision_cfg.image_size {
            return Err(ModelError::Config(format!(
                "pipeline expects {}px images, got {}px",
                self.vision_cfg.image_size, img.height
            )));
        }
        let grid = patchify(img, self.vision_cfg.patch_size)?;
        encode_dual(&grid, &self.enc_a, &self.enc_b)
    }

    pub fn project(&self, feats: &VisualFeatures) -> Result<ProjectedTokens, ModelError> {
        project(&self.projector, feats)
    }

    /// Render the prompt for a question (with optional OCR reference) under
    /// the chosen template.
    pub fn render_prompt(
        &self,
        question: &str,
        ocr: Option<&str>,
        ordering: OcrOrdering,
        template: TemplateKind,
    ) -> Result<String, ModelError> {
        let instruction = match ocr {
            Some(tokens) => apply_ocr_ordering(question, tokens, ordering),
            None => question.to_string(),
        };
        let conv = Conversation::single(instruction);
        match template {
            TemplateKind::Chat => render_chat(&conv),
            TemplateKind::Base => render_base(&conv),
        }
    }

    /// End-to-end answer: encode (or accept pre-computed features), project,
    /// render, tokenize, generate, detokenize.
    #[allow(clippy::too_many_arguments)]
    pub fn answer(
        &self,
        image: Option<&ImageInput>,
        features: Option<&VisualFeatures>,
        question: &str,
        ocr: Option<&str>,
        ordering: OcrOrdering,
        template: TemplateKind,
        gen_cfg: GenerationConfig,
    ) -> Result<QueryOutput, ModelError> {
        let feats = match (features, image) {
            (Some(f), _) => Some(f.clone()),
            (None, Some(img)) => Some(self.encode_image(img)?),
            (None, None) => None,
        };
        let visual = feats.as_ref().map(|f| self.project(f)).transpose()?;
        let prompt = self.render_prompt(question, ocr, ordering, template)?;
        let ids = tokenize(&prompt);
        let flags = vec![false; ids.len()];
        let seq = fuse_sequence(visual.as_ref(), &ids, &flags, &self.backbone)?;
        let mut session = GenerationSession::new(&self.backbone, gen_cfg);
        let (tokens, trace) = generate(&mut session, &seq, &self.backbone)?;
        Ok(QueryOutput {
            text: detokenize(&tokens),
            tokens,
            trace,
            prompt,
            visual_tokens: visual.map_or(0, |v| v.count()),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let cfg = &self.backbone.cfg;
        for (name, v) in [
            ("config.vocab", cfg.vocab as f64),
            ("config.model_dim", cfg.model_dim as f64),
            ("config.layers", cfg.layers as f64),
            ("config.state_dim", cfg.state_dim as f64),
            ("config.expand", cfg.expand as f64),
            ("config.conv_width", cfg.conv_width as f64),
            ("config.tie", if cfg.tie_embeddings { 1.0 } else { 0.0 }),
            ("config.image_size", self.vision_cfg.image_size as f64),
            ("config.patch_size", self.vision_cfg.patch_size as f64),
            ("config.enc_a_dim", self.vision_cfg.enc_a_dim as f64),
            ("config.enc_b_dim", self.vision_cfg.enc_b_dim as f64),
        ] {
            c.insert(name, Entry::scalar(v));
        }
        for (tag, enc) in [("a", &self.enc_a), ("b", &self.enc_b)] {
            c.insert(
                format!("vision.{tag}.patch_proj"),
                mat_entry(&enc.patch_proj),
            );
            c.insert(format!("vision.{tag}.bias"), Entry::vector(enc.bias.clone()));
            c.insert(format!("vision.{tag}.ctx_proj"), mat_entry(&enc.ctx_proj));
        }
        c.insert(
            "projector.kind",
            Entry::scalar(match self.projector {
                Projector::Mlp(_) => 0.0,
                Projector::Ldp(_) => 1.0,
            }),
        );
        if let Projector::Ldp(p) = &self.projector {
            c.insert("projector.stride", Entry::scalar(p.stride as f64));
        }
        for (name, t) in self.projector.tensors() {
            let dims = match &self.projector {
                Projector::Mlp(p) => match name {
                    "w1" => Some((p.w1.rows, p.w1.cols)),
                    "w2" => Some((p.w2.rows, p.w2.cols)),
                    _ => None,
                },
                Projector::Ldp(p) => match name {
                    "w1" => Some((p.w1.rows, p.w1.cols)),
                    "w2" => Some((p.w2.rows, p.w2.cols)),
                    "w3" => Some((p.w3.rows, p.w3.cols)),
                    _ => None,
                },
            };
            let entry = match dims {
                Some((r, k)) => Entry::matrix(r, k, t.clone()),
                None => Entry::vector(t.clone()),
            };
            c.insert(format!("projector.{name}"), entry);
        }
        c.insert("backbone.embedding", mat_entry(&self.backbone.embedding));
        c.insert(
            "backbone.final_gain",
            Entry::vector(self.backbone.final_gain.clone()),
        );
        if let Some(h) = &self.backbone.head {
            c.insert("backbone.head", mat_entry(h));
        }
        for (k, b) in self.backbone.blocks.iter().enumerate() {
            let p = |n: &str| format!("backbone.block{k}.{n}");
            c.insert(p("norm_gain"), Entry::vector(b.norm_gain.clone()));
            c.insert(p("in_proj_x"), mat_entry(&b.in_proj_x));
            c.insert(p("in_proj_gate"), mat_entry(&b.in_proj_gate));
            c.insert(p("conv_kernel"), mat_entry(&b.conv_kernel));
            c.insert(p("out_proj"), mat_entry(&b.out_proj));
            c.insert(p("dt_down"), mat_entry(&b.ssm.dt_down));
            c.insert(p("dt_up"), mat_entry(&b.ssm.dt_up));
            c.insert(p("dt_bias"), Entry::vector(b.ssm.dt_bias.clone()));
            c.insert(p("b_proj"), mat_entry(&b.ssm.b_proj));
            c.insert(p("c_proj"), mat_entry(&b.ssm.c_proj));
            c.insert(p("a_log"), mat_entry(&b.ssm.a_log));
            c.insert(
                p("b_mode"),
                Entry::scalar(match b.ssm.b_mode {
                    BDiscretization::Euler => 0.0,
                    BDiscretization::Zoh => 1.0,
                }),
            );
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, FormatError> {
        let scalar = |name: &str| c.get_scalar(name);
        let usize_of = |name: &str| -> Result<usize, FormatError> {
            Ok(scalar(name)? as usize)
        };
        let cfg = BackboneConfig {
            vocab: usize_of("config.vocab")?,
            model_dim: usize_of("config.model_dim")?,
            layers: usize_of("config.layers")?,
            state_dim: usize_of("config.state_dim")?,
            expand: usize_of("config.expand")?,
            conv_width: usize_of("config.conv_width")?,
            tie_embeddings: scalar("config.tie")? != 0.0,
        };
        let vision_cfg = VisionConfig {
            image_size: usize_of("config.image_size")?,
            patch_size: usize_of("config.patch_size")?,
            enc_a_dim: usize_of("config.enc_a_dim")?,
            enc_b_dim: usize_of("config.enc_b_dim")?,
        };
        let load_mat = |name: &str| -> Result<Mat, FormatError> {
            let (r, k, d) = c.get_matrix(name)?;
            Ok(Mat {
                rows: r,
                cols: k,
                data: d.to_vec(),
            })
        };
        let load_vec = |name: &str| -> Result<Vec<f64>, FormatError> {
            Ok(c.get(name)?.data.clone())
        };
        let enc = |tag: &str| -> Result<ToyEncoder, FormatError> {
            let patch_proj = load_mat(&format!("vision.{tag}.patch_proj"))?;
            Ok(ToyEncoder {
                dim: patch_proj.rows,
                patch_proj,
                bias: load_vec(&format!("vision.{tag}.bias"))?,
                ctx_proj: load_mat(&format!("vision.{tag}.ctx_proj"))?,
            })
        };
        let enc_a = enc("a")?;
        let enc_b = enc("b")?;
        let projector = if scalar("projector.kind")? == 0.0 {
            Projector::Mlp(crate::vision::MlpProjector {
                w1: load_mat("projector.w1")?,
                b1: load_vec("projector.b1")?,
                w2: load_mat("projector.w2")?,
                b2: load_vec("projector.b2")?,
            })
        } else {
            Projector::Ldp(crate::vision::LdpProjector {
                w1: load_mat("projector.w1")?,
                b1: load_vec("projector.b1")?,
                w2: load_mat("projector.w2")?,
                b2: load_vec("projector.b2")?,
                stride: usize_of("projector.stride")?,
                w3: load_mat("projector.w3")?,
                b3: load_vec("projector.b3")?,
            })
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            let p = |n: &str| format!("backbone.block{k}.{n}");
            let dt_down = load_mat(&p("dt_down"))?;
            let a_log = load_mat(&p("a_log"))?;
            let ssm = SelectiveWeights {
                channels: a_log.rows,
                state_dim: a_log.cols,
                dt_rank: dt_down.rows,
                dt_down,
                dt_up: load_mat(&p("dt_up"))?,
                dt_bias: load_vec(&p("dt_bias"))?,
                b_proj: load_mat(&p("b_proj"))?,
                c_proj: load_mat(&p("c_proj"))?,
                a_log,
                b_mode: if scalar(&p("b_mode"))? == 0.0 {
                    BDiscretization::Euler
                } else {
                    BDiscretization::Zoh
                },
            };
            let in_proj_x = load_mat(&p("in_proj_x"))?;
            blocks.push(BlockWeights {
                model_dim: in_proj_x.cols,
                inner_dim: in_proj_x.rows,
                conv_width: cfg.conv_width,
                norm_gain: load_vec(&p("norm_gain"))?,
                in_proj_x,
                in_proj_gate: load_mat(&p("in_proj_gate"))?,
                conv_kernel: load_mat(&p("conv_kernel"))?,
                ssm,
                out_proj: load_mat(&p("out_proj"))?,
            });
        }
        let backbone = BackboneWeights {
            cfg,
            embedding: load_mat("backbone.embedding")?,
            blocks,
            final_gain: load_vec("backbone.final_gain")?,
            head: if cfg.tie_embeddings {
                None
            } else {
                Some(load_mat("backbone.head")?)
            },
        };
        let pipe = Self {
            vision_cfg,
            enc_a,
            enc_b,
            projector,
            backbone,
        };
        pipe.validate_shapes()
            .map_err(|e| FormatError::InvalidEntry {
                offset: 0,
                context: e.to_string(),
            })?;
        Ok(pipe)
    }

    fn validate_shapes(&self) -> Result<(), ModelError> {
        self.backbone.cfg.validate()?;
        if self.backbone.embedding.rows != self.backbone.cfg.vocab
            || self.backbone.embedding.cols != self.backbone.cfg.model_dim
        {
            return Err(ModelError::Shape("embedding shape vs config".into()));
        }
        if self.backbone.blocks.len() != self.backbone.cfg.layers {
            return Err(ModelError::Shape("layer count vs config".into()));
        }
        if self.projector.in_dim() != self.vision_cfg.feature_dim() {
            return Err(ModelError::Shape("projector vs encoder dims".into()));
        }
        if self.projector.model_dim() != self.backbone.cfg.model_dim {
            return Err(ModelError::Shape("projector vs model dim".into()));
        }
        Ok(())
    }
}

fn mat_entry(m: &Mat) -> Entry {
    Entry::matrix(m.rows, m.cols, m.data.clone())
}

/// The result of one end-to-end query.
#[derive(Debug, Clone)]
pub struct QueryOutput {
    pub text: String,
    pub tokens: Vec<u32>,
    pub trace: Vec<StepTrace>,
    pub prompt: String,
    pub visual_tokens: usize,
}
