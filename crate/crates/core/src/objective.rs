//! Multi-scale view-synthesis objective with depth-normal consistency.
//!
//! Per pyramid level `l` (depth area-downsampled, intrinsics rescaled):
//!
//! ```text
//! N_l  = depth_to_normal(D_l)
//! Dn_l = normal_to_depth(D_l, N_l)            (D_l itself when d-n is off)
//! L_l  = L_vs(Dn_l) + λ_s L_s(Dn_l, 2) + λ_m L_m(M_l)
//!      + λ_g L_g(Dn_l) + λ_n L_s(N_l, 1)
//! ```
//!
//! Every term is the mean over its contributing entries, and the total sums
//! the levels. Gradients flow back to the full-resolution depth, the source
//! pose twists and the mask logits.

use std::ops::Range;

use nalgebra::{Matrix3, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{reproject, se3_exp_with_jacobian, CameraIntrinsics, ExpJacobian, PoseSE3, Twist, DEFAULT_MIN_Z};
use crate::consistency::{
    depth_to_normal, depth_to_normal_vjp, edge_weights, normal_to_depth, refine_depth_vjp,
    EdgeWeights, NormalMap,
};
use crate::error::{check_shape, Error, Result};
use crate::grid::{downsample_area, downsample_area_adjoint, Grid, Image, ScalarField, VectorField};
use crate::losses::{
    gradient_matching_loss, mask_loss, photometric_loss, sigmoid, smoothness_loss,
    smoothness_loss_vector, LossTerm, SmoothOrder,
};
use crate::sampling::{BilinearTap, SampledImage};

/// Balancing coefficients of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub lambda_g: f64,
    pub lambda_n: f64,
    /// Edge sensitivity of the smoothness terms.
    pub alpha_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 0.5,
            lambda_m: 0.2,
            lambda_g: 0.5,
            lambda_n: 1.0,
            alpha_smooth: 0.1,
        }
    }
}

/// The four reduced variants of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoDn,
    SmoothNoGradient,
    NoImgGradForDn,
    NoNormalSmooth,
}

impl Ablation {
    pub const VARIANTS: [Ablation; 4] = [
        Ablation::NoDn,
        Ablation::SmoothNoGradient,
        Ablation::NoImgGradForDn,
        Ablation::NoNormalSmooth,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDn => "no d-n",
            Ablation::SmoothNoGradient => "smooth no gradient",
            Ablation::NoImgGradForDn => "no img grad for d-n",
            Ablation::NoNormalSmooth => "no normal smooth",
        }
    }

    /// Applies this variant on top of `config`.
    pub fn apply(&self, mut config: ObjectiveConfig) -> ObjectiveConfig {
        match self {
            Ablation::Full => {}
            Ablation::NoDn => config.use_dn = false,
            Ablation::SmoothNoGradient => config.edge_aware_smooth = false,
            Ablation::NoImgGradForDn => config.edge_aware_dn = false,
            Ablation::NoNormalSmooth => config.normal_smooth = false,
        }
        config
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Edge sensitivity of the depth-normal layers.
    pub alpha_dn: f64,
    /// Requested pyramid levels; coarse levels smaller than 3×3 are skipped.
    pub scales: usize,
    /// Warp with the refined depth from the normal-to-depth layer.
    pub use_dn: bool,
    pub edge_aware_smooth: bool,
    pub edge_aware_dn: bool,
    pub normal_smooth: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            alpha_dn: 0.1,
            scales: 4,
            use_dn: true,
            edge_aware_smooth: true,
            edge_aware_dn: true,
            normal_smooth: true,
        }
    }
}

/// Which optional terms are evaluated; the rest contribute 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub gradient_matching: bool,
    pub normal_smoothness: bool,
}

impl ActiveTerms {
    /// View synthesis, depth smoothness and mask regularization only.
    pub const BASE: ActiveTerms = ActiveTerms {
        gradient_matching: false,
        normal_smoothness: false,
    };
    pub const ALL: ActiveTerms = ActiveTerms {
        gradient_matching: true,
        normal_smoothness: true,
    };
}

/// Target frame, source frames and shared intrinsics.
#[derive(Clone, Debug)]
pub struct Frames {
    pub target: Image,
    pub sources: Vec<Image>,
    pub intrinsics: CameraIntrinsics,
}

/// Free variables of the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub depth: ScalarField,
    /// Target-to-source pose per source view.
    pub twists: Vec<Twist>,
    pub mask_logits: Vec<ScalarField>,
}

impl SceneState {
    pub fn masks(&self) -> Vec<ScalarField> {
        self.mask_logits.iter().map(|l| l.map(|&x| sigmoid(x))).collect()
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        self.twists.iter().map(PoseSE3::exp).collect()
    }
}

/// Level-summed, normalized values of each term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub vs: f64,
    pub smooth_depth: f64,
    pub smooth_normal: f64,
    pub mask: f64,
    pub grad: f64,
}

impl LossTerms {
    /// `vs + λ_s smooth_depth + λ_m mask + λ_g grad + λ_n smooth_normal`.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.vs
            + w.lambda_s * self.smooth_depth
            + w.lambda_m * self.mask
            + w.lambda_g * self.grad
            + w.lambda_n * self.smooth_normal
    }
}

/// Objective value, its parts and gradients with respect to every free variable.
#[derive(Clone, Debug, Serialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    pub weights: LossWeights,
    #[serde(skip)]
    pub grad_depth: ScalarField,
    pub grad_twists: Vec<[f64; 6]>,
    #[serde(skip)]
    pub grad_mask_logits: Vec<ScalarField>,
    pub diagnostics: Vec<String>,
}

struct Level {
    k: CameraIntrinsics,
    target: Image,
    gray: ScalarField,
    sources: Vec<Image>,
    dn_weights: EdgeWeights,
}

/// Objective bound to a set of frames, with pyramids and edge weights prepared once.
pub struct Objective {
    config: ObjectiveConfig,
    levels: Vec<Level>,
}

#[derive(Clone, Copy)]
struct SourceBackward {
    outer: Matrix3<f64>,
    sum: Vector3<f64>,
}

struct LevelOutput {
    terms: LossTerms,
    grad_depth: ScalarField,
    grad_masks: Vec<ScalarField>,
    pose_stats: Vec<SourceBackward>,
    diagnostics: Vec<String>,
}

impl LevelOutput {
    fn inactive(depth: &ScalarField, sources: usize) -> Self {
        let (h, w) = depth.shape();
        Self {
            terms: LossTerms::default(),
            grad_depth: ScalarField::zeros(h, w),
            grad_masks: vec![ScalarField::zeros(h, w); sources],
            pose_stats: vec![
                SourceBackward {
                    outer: Matrix3::zeros(),
                    sum: Vector3::zeros(),
                };
                sources
            ],
            diagnostics: Vec::new(),
        }
    }
}

/// One warped target pixel, kept for the backward pass.
#[derive(Clone, Copy)]
struct WarpSample {
    tap: BilinearTap,
    point: Vector3<f64>,
    q: Vector3<f64>,
}

struct WarpedView {
    sampled: SampledImage,
    samples: Vec<Option<WarpSample>>,
}

fn warp_view(
    depth: &ScalarField,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    source: &Image,
) -> Result<WarpedView> {
    let (h, w) = depth.shape();
    let (sh, sw) = source.shape();
    let mut samples = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let d = depth[(r, c)];
            let mut sample = None;
            if d > 0.0 {
                let point = k.ray(c as f64, r as f64) * d;
                let q = pose.transform(&point);
                let x_t = nalgebra::Vector2::new(c as f64, r as f64);
                if let Some(uv) = reproject(x_t, &point, &q, k, DEFAULT_MIN_Z) {
                    sample = BilinearTap::locate(uv.x, uv.y, sh, sw)
                        .map(|tap| WarpSample { tap, point, q });
                }
            }
            samples.push(sample);
        }
    }
    let channels = source
        .channels()
        .iter()
        .map(|plane| {
            let data = samples
                .iter()
                .map(|s| s.map_or(0.0, |s| s.tap.value(plane.as_slice())))
                .collect();
            Grid::from_vec(h, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let valid = Grid::from_vec(h, w, samples.iter().map(Option::is_some).collect())?;
    Ok(WarpedView {
        sampled: SampledImage {
            image: Image::new(channels)?,
            valid,
        },
        samples,
    })
}

/// Synthesizes the target view by inverse-warping `source` with `depth` and `pose`.
pub fn synthesize_view(
    depth: &ScalarField,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    source: &Image,
) -> Result<SampledImage> {
    check_shape((k.height, k.width), depth.shape())?;
    Ok(warp_view(depth, pose, k, source)?.sampled)
}

impl Objective {
    pub fn new(frames: &Frames, config: ObjectiveConfig) -> Result<Self> {
        let k0 = frames.intrinsics;
        check_shape((k0.height, k0.width), frames.target.shape())?;
        for s in &frames.sources {
            check_shape(frames.target.shape(), s.shape())?;
            if s.num_channels() != frames.target.num_channels() {
                return Err(Error::InvalidInput("source channel count differs from target".into()));
            }
        }
        if frames.sources.is_empty() {
            return Err(Error::InvalidInput("at least one source view is required".into()));
        }
        if config.scales == 0 {
            return Err(Error::InvalidInput("pyramid needs at least one level".into()));
        }
        let alpha_dn = if config.edge_aware_dn { config.alpha_dn } else { 0.0 };
        let mut levels = Vec::new();
        let mut k = k0;
        let mut target = frames.target.clone();
        let mut sources = frames.sources.clone();
        for l in 0..config.scales {
            if l > 0 {
                if k.height / 2 < 3 || k.width / 2 < 3 {
                    break;
                }
                k = k.downsampled();
                target = target.downsample();
                sources = sources.iter().map(Image::downsample).collect();
            }
            if k.height < 3 || k.width < 3 {
                return Err(Error::InvalidInput("frames must be at least 3x3".into()));
            }
            let gray = target.grayscale();
            let dn_weights = edge_weights(&gray, alpha_dn)?;
            levels.push(Level {
                k,
                target: target.clone(),
                gray,
                sources: sources.clone(),
                dn_weights,
            });
        }
        Ok(Self { config, levels })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    /// Number of pyramid levels actually used.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_sources(&self) -> usize {
        self.levels[0].sources.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.levels[0].target.shape()
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.levels[0].k
    }

    /// Edge weights the depth-normal layers use at full resolution.
    pub fn dn_weights(&self) -> &EdgeWeights {
        &self.levels[0].dn_weights
    }

    fn check_state(&self, state: &SceneState) -> Result<()> {
        let shape = self.shape();
        check_shape(shape, state.depth.shape())?;
        if state.twists.len() != self.num_sources() || state.mask_logits.len() != self.num_sources() {
            return Err(Error::InvalidInput(format!(
                "state has {} twists and {} masks for {} sources",
                state.twists.len(),
                state.mask_logits.len(),
                self.num_sources()
            )));
        }
        for m in &state.mask_logits {
            check_shape(shape, m.shape())?;
        }
        Ok(())
    }

    /// Depth used for warping at full resolution, and the normals derived from it.
    pub fn geometry(&self, depth: &ScalarField) -> Result<(ScalarField, NormalMap)> {
        check_shape(self.shape(), depth.shape())?;
        let level = &self.levels[0];
        let warped = if self.config.use_dn {
            let n = depth_to_normal(depth, &level.k, &level.dn_weights)?;
            normal_to_depth(depth, &n.normals, &level.k, &level.dn_weights)?
        } else {
            depth.clone()
        };
        let normals = depth_to_normal(&warped, &level.k, &level.dn_weights)?;
        Ok((warped, normals))
    }

    /// Evaluates the objective and all gradients.
    pub fn evaluate(&self, state: &SceneState, active: ActiveTerms) -> Result<LossReport> {
        self.evaluate_levels(state, active, 0..self.levels.len())
    }

    /// Evaluates the objective restricted to the pyramid levels in `levels`
    /// (0 is full resolution); the other levels contribute nothing.
    pub fn evaluate_levels(
        &self,
        state: &SceneState,
        active: ActiveTerms,
        levels: Range<usize>,
    ) -> Result<LossReport> {
        self.check_state(state)?;
        if levels.start >= levels.end || levels.end > self.levels.len() {
            return Err(Error::InvalidInput(format!(
                "level range {levels:?} is empty or exceeds the {} pyramid levels",
                self.levels.len()
            )));
        }
        let poses: Vec<(PoseSE3, ExpJacobian)> =
            state.twists.iter().map(se3_exp_with_jacobian).collect();
        let masks = state.masks();

        let mut depth_pyr = vec![state.depth.clone()];
        let mut mask_pyr = vec![masks.clone()];
        for l in 1..self.levels.len() {
            depth_pyr.push(downsample_area(&depth_pyr[l - 1]));
            mask_pyr.push(mask_pyr[l - 1].iter().map(downsample_area).collect());
        }

        let outputs: Vec<Result<LevelOutput>> = (0..self.levels.len())
            .into_par_iter()
            .map(|l| {
                if levels.contains(&l) {
                    self.evaluate_level(l, &depth_pyr[l], &mask_pyr[l], &poses, active)
                } else {
                    Ok(LevelOutput::inactive(&depth_pyr[l], poses.len()))
                }
            })
            .collect();

        let mut terms = LossTerms::default();
        let mut diagnostics = Vec::new();
        let mut grad_depth: Option<ScalarField> = None;
        let mut grad_masks: Option<Vec<ScalarField>> = None;
        let mut outer = vec![Matrix3::zeros(); poses.len()];
        let mut sums = vec![Vector3::zeros(); poses.len()];
        // Coarse to fine so each adjoint step folds the running gradient one level up.
        for (l, out) in outputs.into_iter().enumerate().rev() {
            let out = out?;
            terms.vs += out.terms.vs;
            terms.smooth_depth += out.terms.smooth_depth;
            terms.smooth_normal += out.terms.smooth_normal;
            terms.mask += out.terms.mask;
            terms.grad += out.terms.grad;
            diagnostics.extend(out.diagnostics);
            for (s, st) in out.pose_stats.iter().enumerate() {
                outer[s] += st.outer;
                sums[s] += st.sum;
            }
            let mut gd = out.grad_depth;
            let mut gm = out.grad_masks;
            if let Some(coarse) = grad_depth.take() {
                gd.add_assign(&downsample_area_adjoint(&coarse, gd.shape()))?;
            }
            if let Some(coarse) = grad_masks.take() {
                for (g, c) in gm.iter_mut().zip(coarse.iter()) {
                    g.add_assign(&downsample_area_adjoint(c, g.shape()))?;
                }
            }
            grad_depth = Some(gd);
            grad_masks = Some(gm);
            let _ = l;
        }
        let grad_depth = grad_depth.expect("at least one level");
        let grad_mask_logits = grad_masks
            .expect("at least one level")
            .iter()
            .zip(masks.iter())
            .map(|(g, m)| g.zip_map(m, |&g, &m| g * m * (1.0 - m)))
            .collect::<Result<Vec<_>>>()?;
        let grad_twists = poses
            .iter()
            .enumerate()
            .map(|(s, (_, jac))| {
                let g: Vector6<f64> = jac.twist_gradient(&outer[s], &sums[s]);
                let mut a = [0.0; 6];
                a.copy_from_slice(g.as_slice());
                a
            })
            .collect();

        let weights = self.config.weights;
        Ok(LossReport {
            total: terms.weighted_total(&weights),
            terms,
            weights,
            grad_depth,
            grad_twists,
            grad_mask_logits,
            diagnostics,
        })
    }

    fn evaluate_level(
        &self,
        l: usize,
        depth: &ScalarField,
        masks: &[ScalarField],
        poses: &[(PoseSE3, ExpJacobian)],
        active: ActiveTerms,
    ) -> Result<LevelOutput> {
        let level = &self.levels[l];
        let cfg = &self.config;
        let w = &cfg.weights;
        let k = &level.k;
        let (h, wd) = depth.shape();
        let alpha_smooth = if cfg.edge_aware_smooth { w.alpha_smooth } else { 0.0 };
        let mut diagnostics = Vec::new();

        let normals = depth_to_normal(depth, k, &level.dn_weights)?;
        let degenerate = normals.degenerate.iter().filter(|&&d| d).count();
        if degenerate > 0 {
            diagnostics.push(format!("level {l}: {degenerate} degenerate normals"));
        }
        let warp_depth = if cfg.use_dn {
            normal_to_depth(depth, &normals.normals, k, &level.dn_weights)?
        } else {
            depth.clone()
        };

        let views = poses
            .iter()
            .zip(&level.sources)
            .map(|((pose, _), src)| warp_view(&warp_depth, pose, k, src))
            .collect::<Result<Vec<_>>>()?;
        let sampled: Vec<SampledImage> = views.iter().map(|v| v.sampled.clone()).collect();

        let vs = photometric_loss(&level.target, &sampled, masks)?;
        if vs.no_valid_pixels {
            diagnostics.push(format!("level {l}: no valid warped pixels"));
        }
        let gm = if active.gradient_matching && w.lambda_g != 0.0 {
            Some(gradient_matching_loss(&level.target, &sampled, masks)?)
        } else {
            None
        };
        let (sd_term, sd_grad) =
            smoothness_loss(&warp_depth, SmoothOrder::Second, &level.gray, alpha_smooth)?;
        let (m_term, m_grad) = mask_loss(masks)?;
        let sn = if active.normal_smoothness && cfg.normal_smooth && w.lambda_n != 0.0 {
            Some(smoothness_loss_vector(
                &normals.normals,
                SmoothOrder::First,
                &level.gray,
                alpha_smooth,
            )?)
        } else {
            None
        };

        let scale = |t: &LossTerm| if t.count == 0 { 0.0 } else { 1.0 / t.count as f64 };
        let terms = LossTerms {
            vs: vs.term.mean(),
            smooth_depth: sd_term.mean(),
            smooth_normal: sn.as_ref().map_or(0.0, |(t, _)| t.mean()),
            mask: m_term.mean(),
            grad: gm.as_ref().map_or(0.0, |g| g.term.mean()),
        };

        let c_vs = scale(&vs.term);
        let c_g = gm.as_ref().map_or(0.0, |g| w.lambda_g * scale(&g.term));
        let c_sd = w.lambda_s * scale(&sd_term);
        let c_m = w.lambda_m * scale(&m_term);

        // Warped views → warp depth and pose statistics.
        let mut g_warp_depth = sd_grad.map(|g| g * c_sd);
        let mut pose_stats = Vec::with_capacity(poses.len());
        for (s, ((pose, _), view)) in poses.iter().zip(&views).enumerate() {
            let src = &level.sources[s];
            let mut stats = SourceBackward {
                outer: Matrix3::zeros(),
                sum: Vector3::zeros(),
            };
            for (i, sample) in view.samples.iter().enumerate() {
                let Some(sample) = sample else { continue };
                let mut g_uv = nalgebra::Vector2::zeros();
                for (c, plane) in src.channels().iter().enumerate() {
                    let mut g = c_vs * vs.grad_warped[s][c].as_slice()[i];
                    if let Some(gm) = &gm {
                        g += c_g * gm.grad_warped[s][c].as_slice()[i];
                    }
                    if g != 0.0 {
                        g_uv += sample.tap.gradient(plane.as_slice()) * g;
                    }
                }
                if g_uv == nalgebra::Vector2::zeros() {
                    continue;
                }
                let g_q = k.project_jacobian(&sample.q).transpose() * g_uv;
                let (r, c) = (i / wd, i % wd);
                g_warp_depth[(r, c)] += g_q.dot(&(pose.rotation * k.ray(c as f64, r as f64)));
                stats.outer += g_q * sample.point.transpose();
                stats.sum += g_q;
            }
            pose_stats.push(stats);
        }

        let g_normals = match &sn {
            Some((t, g)) => {
                let c = w.lambda_n * scale(t);
                g.map(|v| v * c)
            }
            None => VectorField::zeros(h, wd),
        };
        let grad_depth = if cfg.use_dn {
            refine_depth_vjp(depth, k, &level.dn_weights, &normals, &g_normals, &g_warp_depth)?
        } else {
            let mut g = g_warp_depth;
            if sn.is_some() {
                g.add_assign(&depth_to_normal_vjp(depth, k, &level.dn_weights, &g_normals)?)?;
            }
            g
        };

        let grad_masks = (0..masks.len())
            .map(|s| {
                Grid::from_fn(h, wd, |r, c| {
                    let mut g = c_vs * vs.grad_masks[s][(r, c)] + c_m * m_grad[s][(r, c)];
                    if let Some(gm) = &gm {
                        g += c_g * gm.grad_masks[s][(r, c)];
                    }
                    g
                })
            })
            .collect();

        Ok(LevelOutput {
            terms,
            grad_depth,
            grad_masks,
            pose_stats,
            diagnostics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn texture(h: usize, w: usize, phase: f64, shift: f64) -> Image {
        let chan = |p: f64| {
            Grid::from_fn(h, w, |r, c| {
                let (x, y) = (c as f64 + shift, r as f64);
                0.5 + 0.2 * (0.45 * x + p).sin() * (0.37 * y - p).cos() + 0.1 * (0.21 * (x + y)).sin()
            })
        };
        Image::new(vec![chan(phase), chan(phase + 1.0), chan(phase + 2.0)]).unwrap()
    }

    fn setup(config: ObjectiveConfig) -> (Objective, SceneState) {
        let (h, w) = (8, 12);
        let k = CameraIntrinsics::new(7.0, 7.0, 5.5, 3.5, w, h).unwrap();
        let frames = Frames {
            target: texture(h, w, 0.0, 0.0),
            sources: vec![texture(h, w, 0.0, 0.6), texture(h, w, 0.0, -0.4)],
            intrinsics: k,
        };
        let depth = Grid::from_fn(h, w, |r, c| 2.0 + 0.05 * c as f64 + 0.03 * r as f64 + 0.02 * ((r * c) as f64 + 0.7 * r as f64 + 0.4 * c as f64 + 0.1).sin());
        let state = SceneState {
            depth,
            twists: vec![
                Twist::new(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.08, 0.01, -0.02)),
                Twist::new(Vector3::new(-0.01, 0.015, 0.0), Vector3::new(-0.05, 0.02, 0.01)),
            ],
            mask_logits: vec![
                Grid::from_fn(h, w, |r, c| 0.3 * ((r + 2 * c) as f64).cos() + 1.0),
                Grid::from_fn(h, w, |r, c| 0.2 * ((3 * r + c) as f64).sin() + 0.5),
            ],
        };
        (Objective::new(&frames, config).unwrap(), state)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn fd_check(config: ObjectiveConfig) {
        let (obj, state) = setup(config);
        let report = obj.evaluate(&state, ActiveTerms::ALL).unwrap();
        let f = |s: &SceneState| obj.evaluate(s, ActiveTerms::ALL).unwrap().total;
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..state.depth.len()).step_by(5) {
            let mut p = state.clone();
            p.depth.as_mut_slice()[i] += eps;
            let mut m = state.clone();
            m.depth.as_mut_slice()[i] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            worst = worst.max(rel_err(fd, report.grad_depth.as_slice()[i]));
        }
        for s in 0..2 {
            for j in 0..6 {
                let mut p = state.clone();
                p.twists[s].0[j] += eps;
                let mut m = state.clone();
                m.twists[s].0[j] -= eps;
                let fd = (f(&p) - f(&m)) / (2.0 * eps);
                worst = worst.max(rel_err(fd, report.grad_twists[s][j]));
            }
            for i in (0..state.depth.len()).step_by(7) {
                let mut p = state.clone();
                p.mask_logits[s].as_mut_slice()[i] += eps;
                let mut m = state.clone();
                m.mask_logits[s].as_mut_slice()[i] -= eps;
                let fd = (f(&p) - f(&m)) / (2.0 * eps);
                worst = worst.max(rel_err(fd, report.grad_mask_logits[s].as_slice()[i]));
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(ObjectiveConfig::default());
    }

    #[test]
    fn gradients_match_without_dn_layers() {
        fd_check(Ablation::NoDn.apply(ObjectiveConfig::default()));
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let (obj, state) = setup(ObjectiveConfig::default());
        let r = obj.evaluate(&state, ActiveTerms::ALL).unwrap();
        assert_eq!(r.total, r.terms.weighted_total(&r.weights));
        assert!(r.terms.grad > 0.0 && r.terms.smooth_normal > 0.0);
        let base = obj.evaluate(&state, ActiveTerms::BASE).unwrap();
        assert_eq!(base.terms.grad, 0.0);
        assert_eq!(base.terms.smooth_normal, 0.0);
    }

    #[test]
    fn zero_lambdas_leave_photometric_only() {
        let mut cfg = ObjectiveConfig::default();
        cfg.weights = LossWeights {
            lambda_s: 0.0,
            lambda_m: 0.0,
            lambda_g: 0.0,
            lambda_n: 0.0,
            ..cfg.weights
        };
        let (obj, state) = setup(cfg);
        let r = obj.evaluate(&state, ActiveTerms::ALL).unwrap();
        assert_eq!(r.total, r.terms.vs);
    }

    #[test]
    fn level_subsets_partition_the_objective() {
        let (obj, state) = setup(ObjectiveConfig::default());
        let all = obj.evaluate(&state, ActiveTerms::ALL).unwrap();
        let fine = obj.evaluate_levels(&state, ActiveTerms::ALL, 0..1).unwrap();
        let coarse = obj.evaluate_levels(&state, ActiveTerms::ALL, 1..2).unwrap();
        assert!((fine.total + coarse.total - all.total).abs() < 1e-12);
        for ((a, f), c) in all.grad_depth.iter().zip(fine.grad_depth.iter()).zip(coarse.grad_depth.iter()) {
            assert!((f + c - a).abs() < 1e-12);
        }
        for s in 0..2 {
            for j in 0..6 {
                let sum = fine.grad_twists[s][j] + coarse.grad_twists[s][j];
                assert!((sum - all.grad_twists[s][j]).abs() < 1e-12);
            }
        }
        assert!(obj.evaluate_levels(&state, ActiveTerms::ALL, 1..1).is_err());
        assert!(obj.evaluate_levels(&state, ActiveTerms::ALL, 0..3).is_err());
    }

    #[test]
    fn pyramid_stops_before_tiny_levels() {
        let (obj, _) = setup(ObjectiveConfig::default());
        // 8x12 → 4x6; the next level would be 2x3.
        assert_eq!(obj.num_levels(), 2);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (obj, state) = setup(ObjectiveConfig::default());
        let a = obj.evaluate(&state, ActiveTerms::ALL).unwrap();
        let b = obj.evaluate(&state, ActiveTerms::ALL).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.grad_depth, b.grad_depth);
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let (obj, state) = setup(ObjectiveConfig::default());
        let src = texture(8, 12, 0.3, 0.0);
        let out = synthesize_view(&state.depth, &PoseSE3::identity(), obj.intrinsics(), &src).unwrap();
        assert!(out.valid.iter().all(|&v| v));
        assert_eq!(out.image, src);
    }
}
