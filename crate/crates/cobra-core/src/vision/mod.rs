//! Image ingestion, patchification, the dual toy vision encoders and the
//! external-feature bridge.
//!
//! The toy encoders are deterministic stand-ins: a seeded per-patch linear
//! embedding plus one global mixing step (a projected mean over all patches
//! added back to every row). Real pretrained encoders stay out of scope;
//! features computed elsewhere flow in through [`ingest_external_features`].

pub mod projector;

pub use projector::{
    project, project_backward, project_cached, LdpProjector, MlpProjector, ProjectedTokens,
    Projector, ProjectorCache,
};

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::container::{Container, Entry};
use crate::error::{FormatError, ModelError};
use crate::linalg::Mat;

/// Default toy resolution: 378 x 378 with 14-pixel patches gives exactly
/// 729 visual tokens on a 27 x 27 grid. A 384 / 16 (576-token) configuration
/// is provided alongside; see the crate README for the reconciliation.
pub const DEFAULT_IMAGE_SIZE: usize = 378;
pub const DEFAULT_PATCH_SIZE: usize = 14;
pub const ALT_IMAGE_SIZE: usize = 384;
pub const ALT_PATCH_SIZE: usize = 16;

/// A square RGB image with values in [0, 1], stored channel-major (C x H x W).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub source: Option<PathBuf>,
}

pub const IMAGE_CHANNELS: usize = 3;

impl ImageInput {
    pub fn new(pixels: Vec<f64>, height: usize, width: usize) -> Result<Self, ModelError> {
        if height != width {
            return Err(ModelError::Precondition(format!(
                "image must be square after resize, got {height}x{width}"
            )));
        }
        if pixels.len() != IMAGE_CHANNELS * height * width {
            return Err(ModelError::Shape(format!(
                "pixel buffer length {} does not match 3x{height}x{width}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(ModelError::InvalidParameter(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            pixels,
            height,
            width,
            source: None,
        })
    }

    /// Uniform fill, handy for tests and synthetic data.
    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * size * size);
        for c in rgb {
            pixels.extend(std::iter::repeat_n(c, size * size));
        }
        Self::new(pixels, size, size).expect("constant image is valid")
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[c * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[c * self.height * self.width + y * self.width + x] = v;
    }

    /// Binary P6 pixmap with an 8-bit max value.
    pub fn from_ppm(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let bytes = std::fs::read(&path)?;
        let mut img = parse_ppm(&bytes)?;
        img.source = Some(path.as_ref().to_path_buf());
        Ok(img)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push((self.at(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// Raw float image: three u64 LE dims (channels, height, width) followed
    /// by the channel-major f64 LE payload.
    pub fn from_raw(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let bytes = std::fs::read(&path)?;
        if bytes.len() < 24 {
            return Err(FormatError::Truncated {
                offset: bytes.len(),
                context: "raw image header".into(),
            });
        }
        let dim = |i: usize| u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
        let (c, h, w) = (dim(0) as usize, dim(1) as usize, dim(2) as usize);
        if c != IMAGE_CHANNELS {
            return Err(FormatError::InvalidEntry {
                offset: 0,
                context: format!("raw image has {c} channels, expected 3"),
            });
        }
        let need = 24 + c * h * w * 8;
        if bytes.len() != need {
            return Err(FormatError::Truncated {
                offset: bytes.len(),
                context: format!("raw image payload: need {need} bytes"),
            });
        }
        let pixels: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut img = Self::new(pixels, h, w).map_err(|e| FormatError::InvalidEntry {
            offset: 24,
            context: e.to_string(),
        })?;
        img.source = Some(path.as_ref().to_path_buf());
        Ok(img)
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.pixels.len() * 8);
        for d in [IMAGE_CHANNELS as u64, self.height as u64, self.width as u64] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<ImageInput, FormatError> {
    let mut pos = 0usize;
    let mut token = |ctx: &str| -> Result<String, FormatError> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::BadPixmap(format!("missing {ctx}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token("magic")? != "P6" {
        return Err(FormatError::BadPixmap("magic is not P6".into()));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|_| FormatError::BadPixmap("bad width".into()))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| FormatError::BadPixmap("bad height".into()))?;
    let maxval: usize = token("maxval")?
        .parse()
        .map_err(|_| FormatError::BadPixmap("bad maxval".into()))?;
    if maxval != 255 {
        return Err(FormatError::BadPixmap(format!(
            "only maxval 255 supported, got {maxval}"
        )));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            context: "pixmap payload".into(),
        });
    }
    let mut pixels = vec![0.0; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let v = bytes[pos + (y * width + x) * 3 + c] as f64 / 255.0;
                pixels[c * height * width + y * width + x] = v;
            }
        }
    }
    ImageInput::new(pixels, height, width).map_err(|e| FormatError::BadPixmap(e.to_string()))
}

/// Row-major grid of flattened non-overlapping patches.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_side: usize,
    /// count x (patch_size^2 * 3).
    pub patches: Mat,
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// Split into non-overlapping `patch x patch` tiles, row-major; the token
/// count is exactly (side / patch)^2.
pub fn patchify(img: &ImageInput, patch: usize) -> Result<PatchGrid, ModelError> {
    if patch == 0 || !img.height.is_multiple_of(patch) {
        return Err(ModelError::Config(format!(
            "image side {} is not divisible by patch size {patch}",
            img.height
        )));
    }
    let g = img.height / patch;
    let dim = patch * patch * IMAGE_CHANNELS;
    let mut patches = Mat::zeros(g * g, dim);
    for gy in 0..g {
        for gx in 0..g {
            let row = patches.row_mut(gy * g + gx);
            let mut i = 0;
            for c in 0..IMAGE_CHANNELS {
                for py in 0..patch {
                    for px in 0..patch {
                        row[i] = img.at(c, gy * patch + py, gx * patch + px);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patch_size: patch,
        grid_side: g,
        patches,
    })
}

/// One deterministic toy encoder: per-patch linear embedding followed by a
/// global mixing step. Returns the pre-head representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub dim: usize,
    pub patch_proj: Mat,
    pub bias: Vec<f64>,
    pub ctx_proj: Mat,
}

impl ToyEncoder {
    pub fn seeded(patch_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dim,
            patch_proj: Mat::randn(dim, patch_dim, rng, 1.0),
            bias: (0..dim).map(|_| crate::linalg::normal(rng) * 0.1).collect(),
            ctx_proj: Mat::randn(dim, dim, rng, 0.5),
        }
    }

    fn encode(&self, grid: &PatchGrid) -> Result<Mat, ModelError> {
        if grid.patches.cols != self.patch_proj.cols {
            return Err(ModelError::Shape(format!(
                "encoder expects patch dim {}, grid has {}",
                self.patch_proj.cols, grid.patches.cols
            )));
        }
        let count = grid.count();
        let mut embedded = Mat::zeros(count, self.dim);
        for p in 0..count {
            self.patch_proj
                .matvec(grid.patches.row(p), embedded.row_mut(p));
            for (v, b) in embedded.row_mut(p).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        // Mean-pooled context vector added back to every patch.
        let mut mean = vec![0.0; self.dim];
        for p in 0..count {
            for (m, v) in mean.iter_mut().zip(embedded.row(p)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut ctx = vec![0.0; self.dim];
        self.ctx_proj.matvec(&mean, &mut ctx);
        for p in 0..count {
            for (v, c) in embedded.row_mut(p).iter_mut().zip(&ctx) {
                *v += c;
            }
        }
        Ok(embedded)
    }
}

/// The per-patch feature matrix produced by the dual encoder (or ingested
/// from a file), with the grid side kept around for pooling projectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    /// count x dim.
    pub features: Mat,
    /// Present when the token count is a perfect square.
    pub grid_side: Option<usize>,
}

impl VisualFeatures {
    pub fn count(&self) -> usize {
        self.features.rows
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    fn from_matrix(features: Mat) -> Self {
        let side = (features.rows as f64).sqrt().round() as usize;
        let grid_side = (side * side == features.rows).then_some(side);
        Self {
            features,
            grid_side,
        }
    }
}

/// Encode with both toy encoders and concatenate along the channel axis,
/// first encoder's block first.
pub fn encode_dual(
    grid: &PatchGrid,
    enc_a: &ToyEncoder,
    enc_b: &ToyEncoder,
) -> Result<VisualFeatures, ModelError> {
    let a = enc_a.encode(grid)?;
    let b = enc_b.encode(grid)?;
    let count = grid.count();
    let mut features = Mat::zeros(count, a.cols + b.cols);
    for p in 0..count {
        let row = features.row_mut(p);
        row[..a.cols].copy_from_slice(a.row(p));
        row[a.cols..].copy_from_slice(b.row(p));
    }
    Ok(VisualFeatures {
        features,
        grid_side: Some(grid.grid_side),
    })
}

pub const FEATURES_ENTRY: &str = "features";

/// Read a feature matrix (entry `features`, rank 2) from the shared
/// container format.
pub fn ingest_external_features(path: impl AsRef<Path>) -> Result<VisualFeatures, FormatError> {
    let c = Container::load(path)?;
    let (rows, cols, data) = c.get_matrix(FEATURES_ENTRY)?;
    if rows == 0 || cols == 0 {
        return Err(FormatError::BadShape {
            name: FEATURES_ENTRY.into(),
            got: vec![rows as u64, cols as u64],
            expected: "non-empty rank-2 tensor".into(),
        });
    }
    Ok(VisualFeatures::from_matrix(Mat {
        rows,
        cols,
        data: data.to_vec(),
    }))
}

pub fn write_external_features(
    path: impl AsRef<Path>,
    feats: &VisualFeatures,
) -> Result<(), FormatError> {
    let mut c = Container::new();
    c.insert(
        FEATURES_ENTRY,
        Entry::matrix(
            feats.features.rows,
            feats.features.cols,
            feats.features.data.clone(),
        ),
    );
    c.save(path)
}
