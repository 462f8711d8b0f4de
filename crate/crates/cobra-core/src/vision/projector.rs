//! Learned maps from concatenated vision features into the language
//! embedding space: a token-preserving two-layer perceptron, and a
//! down-sampling variant that average-pools the token grid between two
//! pointwise stages to cut the visual token count.

use rand_chacha::ChaCha8Rng;

use super::VisualFeatures;
use crate::error::ModelError;
use crate::linalg::{gelu, gelu_grad, Mat};

/// Visual embeddings in model space, `count x model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTokens {
    pub tokens: Mat,
    pub grid_side: Option<usize>,
}

impl ProjectedTokens {
    pub fn count(&self) -> usize {
        self.tokens.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpProjector {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpProjector {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    /// Pooling stride; the output grid side is ceil(grid_side / stride).
    pub stride: usize,
    pub w3: Mat,
    pub b3: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projector {
    Mlp(MlpProjector),
    Ldp(LdpProjector),
}

impl Projector {
    pub fn seeded_mlp(in_dim: usize, model_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::Mlp(MlpProjector {
            w1: Mat::randn(model_dim, in_dim, rng, 1.0),
            b1: vec![0.0; model_dim],
            w2: Mat::randn(model_dim, model_dim, rng, 1.0),
            b2: vec![0.0; model_dim],
        })
    }

    pub fn seeded_ldp(
        in_dim: usize,
        model_dim: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::Ldp(LdpProjector {
            w1: Mat::randn(model_dim, in_dim, rng, 1.0),
            b1: vec![0.0; model_dim],
            w2: Mat::randn(model_dim, model_dim, rng, 1.0),
            b2: vec![0.0; model_dim],
            stride,
            w3: Mat::randn(model_dim, model_dim, rng, 1.0),
            b3: vec![0.0; model_dim],
        })
    }

    pub fn model_dim(&self) -> usize {
        match self {
            Self::Mlp(p) => p.w2.rows,
            Self::Ldp(p) => p.w3.rows,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Self::Mlp(p) => p.w1.cols,
            Self::Ldp(p) => p.w1.cols,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Mlp(_) => "mlp",
            Self::Ldp(_) => "ldp",
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Self::Mlp(p) => Self::Mlp(MlpProjector {
                w1: Mat::zeros(p.w1.rows, p.w1.cols),
                b1: vec![0.0; p.b1.len()],
                w2: Mat::zeros(p.w2.rows, p.w2.cols),
                b2: vec![0.0; p.b2.len()],
            }),
            Self::Ldp(p) => Self::Ldp(LdpProjector {
                w1: Mat::zeros(p.w1.rows, p.w1.cols),
                b1: vec![0.0; p.b1.len()],
                w2: Mat::zeros(p.w2.rows, p.w2.cols),
                b2: vec![0.0; p.b2.len()],
                stride: p.stride,
                w3: Mat::zeros(p.w3.rows, p.w3.cols),
                b3: vec![0.0; p.b3.len()],
            }),
        }
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, &Vec<f64>)> {
        match self {
            Self::Mlp(p) => vec![
                ("w1", &p.w1.data),
                ("b1", &p.b1),
                ("w2", &p.w2.data),
                ("b2", &p.b2),
            ],
            Self::Ldp(p) => vec![
                ("w1", &p.w1.data),
                ("b1", &p.b1),
                ("w2", &p.w2.data),
                ("b2", &p.b2),
                ("w3", &p.w3.data),
                ("b3", &p.b3),
            ],
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        match self {
            Self::Mlp(p) => vec![
                ("w1", &mut p.w1.data),
                ("b1", &mut p.b1),
                ("w2", &mut p.w2.data),
                ("b2", &mut p.b2),
            ],
            Self::Ldp(p) => vec![
                ("w1", &mut p.w1.data),
                ("b1", &mut p.b1),
                ("w2", &mut p.w2.data),
                ("b2", &mut p.b2),
                ("w3", &mut p.w3.data),
                ("b3", &mut p.b3),
            ],
        }
    }
}

/// Forward intermediates for [`project_backward`].
#[derive(Debug, Clone)]
pub struct ProjectorCache {
    pre1: Mat,
    act1: Mat,
    mid: Option<Mat>,
    pooled: Option<Mat>,
    bins: Option<PoolBins>,
}

#[derive(Debug, Clone)]
struct PoolBins {
    in_side: usize,
    out_side: usize,
}

impl PoolBins {
    fn bin(&self, i: usize) -> (usize, usize) {
        let start = i * self.in_side / self.out_side;
        let end = ((i + 1) * self.in_side).div_ceil(self.out_side);
        (start, end)
    }
}

pub fn project(p: &Projector, feats: &VisualFeatures) -> Result<ProjectedTokens, ModelError> {
    Ok(project_cached(p, feats)?.0)
}

pub fn project_cached(
    p: &Projector,
    feats: &VisualFeatures,
) -> Result<(ProjectedTokens, ProjectorCache), ModelError> {
    if feats.dim() != p.in_dim() {
        return Err(ModelError::Shape(format!(
            "features have dim {}, projector expects {}",
            feats.dim(),
            p.in_dim()
        )));
    }
    let rows = feats.count();
    let dm = p.model_dim();
    match p {
        Projector::Mlp(mlp) => {
            let mut pre1 = Mat::zeros(rows, dm);
            let mut act1 = Mat::zeros(rows, dm);
            let mut out = Mat::zeros(rows, dm);
            for r in 0..rows {
                mlp.w1.matvec(feats.features.row(r), pre1.row_mut(r));
                for (v, b) in pre1.row_mut(r).iter_mut().zip(&mlp.b1) {
                    *v += b;
                }
                for (a, &h) in act1.row_mut(r).iter_mut().zip(pre1.row(r)) {
                    *a = gelu(h);
                }
                mlp.w2.matvec(act1.row(r), out.row_mut(r));
                for (v, b) in out.row_mut(r).iter_mut().zip(&mlp.b2) {
                    *v += b;
                }
            }
            Ok((
                ProjectedTokens {
                    tokens: out,
                    grid_side: feats.grid_side,
                },
                ProjectorCache {
                    pre1,
                    act1,
                    mid: None,
                    pooled: None,
                    bins: None,
                },
            ))
        }
        Projector::Ldp(ldp) => {
            if ldp.stride == 0 {
                return Err(ModelError::Config("pooling stride must be >= 1".into()));
            }
            let g = feats.grid_side.ok_or_else(|| {
                ModelError::Config(format!(
                    "down-sample projector needs a square token grid, got {rows} tokens"
                ))
            })?;
            let out_side = g.div_ceil(ldp.stride);
            if out_side > g {
                return Err(ModelError::Config(format!(
                    "output grid {out_side} exceeds input grid {g}"
                )));
            }
            let mut pre1 = Mat::zeros(rows, dm);
            let mut act1 = Mat::zeros(rows, dm);
            let mut mid = Mat::zeros(rows, dm);
            for r in 0..rows {
                ldp.w1.matvec(feats.features.row(r), pre1.row_mut(r));
                for (v, b) in pre1.row_mut(r).iter_mut().zip(&ldp.b1) {
                    *v += b;
                }
                for (a, &h) in act1.row_mut(r).iter_mut().zip(pre1.row(r)) {
                    *a = gelu(h);
                }
                ldp.w2.matvec(act1.row(r), mid.row_mut(r));
                for (v, b) in mid.row_mut(r).iter_mut().zip(&ldp.b2) {
                    *v += b;
                }
            }
            let bins = PoolBins {
                in_side: g,
                out_side,
            };
            let mut pooled = Mat::zeros(out_side * out_side, dm);
            for oy in 0..out_side {
                let (y0, y1) = bins.bin(oy);
                for ox in 0..out_side {
                    let (x0, x1) = bins.bin(ox);
                    let area = ((y1 - y0) * (x1 - x0)) as f64;
                    let row = pooled.row_mut(oy * out_side + ox);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            for (acc, v) in row.iter_mut().zip(mid.row(y * g + x)) {
                                *acc += v;
                            }
                        }
                    }
                    for v in row.iter_mut() {
                        *v /= area;
                    }
                }
            }
            let mut out = Mat::zeros(pooled.rows, dm);
            for r in 0..pooled.rows {
                ldp.w3.matvec(pooled.row(r), out.row_mut(r));
                for (v, b) in out.row_mut(r).iter_mut().zip(&ldp.b3) {
                    *v += b;
                }
            }
            Ok((
                ProjectedTokens {
                    tokens: out,
                    grid_side: Some(out_side),
                },
                ProjectorCache {
                    pre1,
                    act1,
                    mid: Some(mid),
                    pooled: Some(pooled),
                    bins: Some(bins),
                },
            ))
        }
    }
}

/// Accumulates parameter gradients into `grads` and returns the gradient
/// with respect to the input features.
pub fn project_backward(
    p: &Projector,
    feats: &VisualFeatures,
    cache: &ProjectorCache,
    grad_out: &Mat,
    grads: &mut Projector,
) -> Result<Mat, ModelError> {
    let rows = feats.count();
    let mut dx = Mat::zeros(rows, feats.dim());
    match (p, grads) {
        (Projector::Mlp(mlp), Projector::Mlp(g)) => {
            if grad_out.rows != rows {
                return Err(ModelError::Shape("projector grad shape".into()));
            }
            for r in 0..rows {
                let go = grad_out.row(r);
                g.w2.outer_acc(go, cache.act1.row(r));
                for (b, v) in g.b2.iter_mut().zip(go) {
                    *b += v;
                }
                let mut da = vec![0.0; mlp.w2.cols];
                mlp.w2.matvec_t_acc(go, &mut da);
                let dh: Vec<f64> = da
                    .iter()
                    .zip(cache.pre1.row(r))
                    .map(|(d, &h)| d * gelu_grad(h))
                    .collect();
                g.w1.outer_acc(&dh, feats.features.row(r));
                for (b, v) in g.b1.iter_mut().zip(&dh) {
                    *b += v;
                }
                mlp.w1.matvec_t_acc(&dh, dx.row_mut(r));
            }
        }
        (Projector::Ldp(ldp), Projector::Ldp(g)) => {
            let bins = cache.bins.as_ref().expect("ldp cache");
            let pooled = cache.pooled.as_ref().expect("ldp cache");
            let mid = cache.mid.as_ref().expect("ldp cache");
            let dm = ldp.w3.rows;
            let out_side = bins.out_side;
            if grad_out.rows != out_side * out_side {
                return Err(ModelError::Shape("projector grad shape".into()));
            }
            let mut dmid = Mat::zeros(rows, dm);
            for oy in 0..out_side {
                let (y0, y1) = bins.bin(oy);
                for ox in 0..out_side {
                    let (x0, x1) = bins.bin(ox);
                    let r = oy * out_side + ox;
                    let go = grad_out.row(r);
                    g.w3.outer_acc(go, pooled.row(r));
                    for (b, v) in g.b3.iter_mut().zip(go) {
                        *b += v;
                    }
                    let mut dpooled = vec![0.0; dm];
                    ldp.w3.matvec_t_acc(go, &mut dpooled);
                    let area = ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            for (acc, v) in
                                dmid.row_mut(y * bins.in_side + x).iter_mut().zip(&dpooled)
                            {
                                *acc += v / area;
                            }
                        }
                    }
                }
            }
            for r in 0..rows {
                let dm_row = dmid.row(r).to_vec();
                g.w2.outer_acc(&dm_row, cache.act1.row(r));
                for (b, v) in g.b2.iter_mut().zip(&dm_row) {
                    *b += v;
                }
                let mut da = vec![0.0; ldp.w2.cols];
                ldp.w2.matvec_t_acc(&dm_row, &mut da);
                let dh: Vec<f64> = da
                    .iter()
                    .zip(cache.pre1.row(r))
                    .map(|(d, &h)| d * gelu_grad(h))
                    .collect();
                g.w1.outer_acc(&dh, feats.features.row(r));
                for (b, v) in g.b1.iter_mut().zip(&dh) {
                    *b += v;
                }
                ldp.w1.matvec_t_acc(&dh, dx.row_mut(r));
            }
            let _ = mid;
        }
        _ => {
            return Err(ModelError::Config(
                "gradient accumulator variant does not match projector".into(),
            ))
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::VisualFeatures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(rows: usize, dim: usize, seed: u64) -> VisualFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mat::from_fn(rows, dim, |_, _| rng.random_range(-1.0..1.0));
        let side = (rows as f64).sqrt().round() as usize;
        VisualFeatures {
            features: m,
            grid_side: (side * side == rows).then_some(side),
        }
    }

    fn identity_mlp(dim: usize) -> Projector {
        Projector::Mlp(MlpProjector {
            w1: Mat::identity(dim),
            b1: vec![0.0; dim],
            w2: Mat::identity(dim),
            b2: vec![0.0; dim],
        })
    }

    #[test]
    fn mlp_preserves_token_count_and_maps_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Projector::seeded_mlp(24, 32, &mut rng);
        let f = feats(729, 24, 2);
        let out = project(&p, &f).unwrap();
        assert_eq!(out.tokens.rows, 729);
        assert_eq!(out.tokens.cols, 32);
    }

    #[test]
    fn identity_layers_fix_gelu_fixed_points() {
        // gelu(0) = 0 exactly, and for entries >= 9 the f64-rounded Gaussian
        // CDF is exactly 1, so identity layers reproduce such inputs bitwise.
        let p = identity_mlp(4);
        let zero = VisualFeatures {
            features: Mat::zeros(3, 4),
            grid_side: None,
        };
        let out = project(&p, &zero).unwrap();
        assert_eq!(out.tokens.data, vec![0.0; 12]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = VisualFeatures {
            features: Mat::from_fn(5, 4, |_, _| rng.random_range(9.0..20.0)),
            grid_side: None,
        };
        let out = project(&p, &big).unwrap();
        assert_eq!(out.tokens.data, big.features.data);
    }

    #[test]
    fn ldp_pools_27_to_14_giving_196_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Projector::seeded_ldp(24, 16, 2, &mut rng);
        let f = feats(729, 24, 5);
        let out = project(&p, &f).unwrap();
        assert_eq!(out.count(), 196);
        assert_eq!(out.grid_side, Some(14));
    }

    #[test]
    fn ldp_constant_rows_stay_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Projector::seeded_ldp(8, 8, 3, &mut rng);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let features = Mat::from_fn(81, 8, |_, c| row[c]);
        let f = VisualFeatures {
            features,
            grid_side: Some(9),
        };
        let out = project(&p, &f).unwrap();
        let first = out.tokens.row(0).to_vec();
        for r in 1..out.count() {
            for (a, b) in out.tokens.row(r).iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ldp_stride_one_with_identity_layers_is_identity_on_fixed_points() {
        let dim = 4;
        let p = Projector::Ldp(LdpProjector {
            w1: Mat::identity(dim),
            b1: vec![0.0; dim],
            w2: Mat::identity(dim),
            b2: vec![0.0; dim],
            stride: 1,
            w3: Mat::identity(dim),
            b3: vec![0.0; dim],
        });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let features = Mat::from_fn(9, dim, |_, _| rng.random_range(9.0..15.0));
        let f = VisualFeatures {
            features: features.clone(),
            grid_side: Some(3),
        };
        let out = project(&p, &f).unwrap();
        assert_eq!(out.count(), 9);
        assert_eq!(out.tokens.data, features.data);
    }

    #[test]
    fn ldp_zero_stride_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Projector::seeded_ldp(8, 8, 0, &mut rng);
        let f = feats(81, 8, 9);
        assert!(matches!(project(&p, &f), Err(ModelError::Config(_))));
    }

    #[test]
    fn ldp_needs_square_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = Projector::seeded_ldp(8, 8, 2, &mut rng);
        let f = feats(7, 8, 11);
        assert!(matches!(project(&p, &f), Err(ModelError::Config(_))));
    }

    fn gradcheck(p: &Projector, f: &VisualFeatures, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, cache) = project_cached(p, f).unwrap();
        let weights = Mat::from_fn(out.tokens.rows, out.tokens.cols, |_, _| {
            rng.random_range(-1.0..1.0)
        });
        let loss = |p: &Projector, f: &VisualFeatures| -> f64 {
            project(p, f)
                .unwrap()
                .tokens
                .data
                .iter()
                .zip(&weights.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grads = p.zeros_like();
        let dx = project_backward(p, f, &cache, &weights, &mut grads).unwrap();
        let h = 1e-6;
        let ok = |fd: f64, an: f64| (fd - an).abs() <= 1e-4 * (fd.abs() + an.abs()) + 1e-8;

        for i in 0..f.features.data.len() {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp.features.data[i] += h;
            fm.features.data[i] -= h;
            let fd = (loss(p, &fp) - loss(p, &fm)) / (2.0 * h);
            assert!(ok(fd, dx.data[i]), "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
        let names: Vec<&str> = p.tensors().iter().map(|(n, _)| *n).collect();
        for name in names {
            let len = p
                .tensors()
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .len();
            for i in (0..len).step_by(2) {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.tensors_mut().into_iter().find(|(n, _)| *n == name).unwrap().1[i] += h;
                pm.tensors_mut().into_iter().find(|(n, _)| *n == name).unwrap().1[i] -= h;
                let fd = (loss(&pp, f) - loss(&pm, f)) / (2.0 * h);
                let an = grads
                    .tensors()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1[i];
                assert!(ok(fd, an), "{name}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = Projector::seeded_mlp(6, 8, &mut rng);
        let f = feats(4, 6, 13);
        gradcheck(&p, &f, 14);
    }

    #[test]
    fn ldp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = Projector::seeded_ldp(6, 8, 2, &mut rng);
        let f = feats(9, 6, 16);
        gradcheck(&p, &f, 17);
    }
}
