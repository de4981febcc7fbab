//! Central-difference verification of the hand-written gradients.

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{se3_exp_with_jacobian, warp_coords, warp_coords_jacobian, CameraIntrinsics, PoseSE3, Twist};
use crate::consistency::{
    depth_to_normal, depth_to_normal_vjp, edge_weights, normal_to_depth, normal_to_depth_vjp,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, Image, ScalarField, VectorField};
use crate::losses::{
    gradient_matching_loss, mask_loss, photometric_loss, smoothness_loss, smoothness_loss_vector, SmoothOrder,
};
use crate::objective::{ActiveTerms, Frames, Objective, ObjectiveConfig, SceneState};
use crate::sampling::{bilinear_sample, bilinear_sample_vjp, SampledImage};
use crate::scene::{make_sequence, Preset};

/// Floor of the denominator in the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;
/// Largest number of coordinates checked per variable.
pub const MAX_COORDS: usize = 500;

/// A flat differentiable input with its accumulated analytic gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffVariable {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl DiffVariable {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::InvalidInput(format!(
                "variable shape {shape:?} holds {n} values, got {}",
                value.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            gradient: vec![0.0; n],
            value,
        })
    }

    pub fn from_scalar(name: impl Into<String>, f: &ScalarField) -> Self {
        let (h, w) = f.shape();
        Self::new(name, vec![h, w], f.as_slice().to_vec()).expect("shape matches")
    }

    pub fn from_vector(name: impl Into<String>, f: &VectorField) -> Self {
        let (h, w) = f.shape();
        let value = f.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        Self::new(name, vec![h, w, 3], value).expect("shape matches")
    }

    /// Channel-major flattening.
    pub fn from_image(name: impl Into<String>, img: &Image) -> Self {
        let (h, w) = img.shape();
        let value = img.channels().iter().flat_map(|c| c.as_slice().iter().copied()).collect();
        Self::new(name, vec![img.num_channels(), h, w], value).expect("shape matches")
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Adds `g` to the gradient element-wise, in index order.
    pub fn accumulate(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.gradient.len() {
            return Err(Error::ShapeMismatch {
                expected: (self.gradient.len(), 1),
                actual: (g.len(), 1),
            });
        }
        for (a, b) in self.gradient.iter_mut().zip(g) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scalar_field(&self) -> ScalarField {
        Grid::from_vec(self.shape[0], self.shape[1], self.value.clone()).expect("2-D variable")
    }

    pub fn vector_field(&self) -> VectorField {
        let data = self.value.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        Grid::from_vec(self.shape[0], self.shape[1], data).expect("3-vector field variable")
    }

    pub fn image(&self) -> Image {
        let (h, w) = (self.shape[1], self.shape[2]);
        let channels = self
            .value
            .chunks_exact(h * w)
            .map(|c| Grid::from_vec(h, w, c.to_vec()).expect("plane"))
            .collect();
        Image::new(channels).expect("image variable")
    }
}

fn flatten_vectors(f: &VectorField) -> Vec<f64> {
    f.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

fn flatten_image(img: &Image) -> Vec<f64> {
    img.channels().iter().flat_map(|c| c.as_slice().iter().copied()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords: MAX_COORDS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub variables: Vec<VariableReport>,
    pub step: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.variables.iter().map(|v| v.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the gradients stored in `vars` with central differences of `f`.
///
/// At most `max_coords` coordinates per variable are checked, drawn with a
/// fixed seed. Any non-finite value or gradient is an error naming its location.
pub fn finite_diff_check<F>(f: F, vars: &[DiffVariable], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[DiffVariable]) -> Result<f64>,
{
    if !(opts.step > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {}", opts.step)));
    }
    let f0 = f(vars)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            what: "objective value".into(),
            index: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = vars.to_vec();
    let mut reports = Vec::with_capacity(vars.len());
    for (v, var) in vars.iter().enumerate() {
        if let Some(i) = var.gradient.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("analytic gradient of {}", var.name),
                index: i,
            });
        }
        let mut coords: Vec<usize> = if var.len() <= opts.max_coords {
            (0..var.len()).collect()
        } else {
            sample(&mut rng, var.len(), opts.max_coords).into_vec()
        };
        coords.sort_unstable();
        let mut report = VariableReport {
            name: var.name.clone(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let x = var.value[i];
            work[v].value[i] = x + opts.step;
            let fp = f(&work)?;
            work[v].value[i] = x - opts.step;
            let fm = f(&work)?;
            work[v].value[i] = x;
            let numeric = (fp - fm) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("finite difference of {}", var.name),
                    index: i,
                });
            }
            let analytic = var.gradient[i];
            let err = relative_error(analytic, numeric);
            if i == coords[0] || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.max_rel_error < opts.tol);
    Ok(GradCheckReport {
        variables: reports,
        step: opts.step,
        tol: opts.tol,
        passed,
    })
}

/// One named check of the standard suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub operation: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub step: f64,
    /// Tolerance for individual operations.
    pub op_tol: f64,
    /// Tolerance for the full objective.
    pub objective_tol: f64,
    /// Step for the full objective, smaller because its many L1 residuals
    /// and bilinear cells put kinks close to almost every point.
    pub objective_step: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 12,
            seed: 0,
            step: 1e-5,
            op_tol: 1e-4,
            objective_tol: 1e-3,
            objective_step: 1e-7,
        }
    }
}

/// Random inputs shared by the per-operation checks.
struct Fixture {
    k: CameraIntrinsics,
    target: Image,
    source: Image,
    depth: ScalarField,
    gray: ScalarField,
}

fn smooth_random_field(rng: &mut ChaCha8Rng, h: usize, w: usize, base: f64, amp: f64) -> ScalarField {
    let (a, b, c): (f64, f64, f64) = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.0..6.0));
    let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Grid::from_fn(h, w, |r, col| {
        base + amp * ((a * col as f64 + c).sin() * (b * r as f64 - c).cos() + 0.3 * noise[r * w + col])
    })
}

fn fixture(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let (h, w) = (cfg.height, cfg.width);
    let k = CameraIntrinsics::new(
        0.9 * w as f64,
        0.9 * w as f64,
        (w as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        w,
        h,
    )?;
    let rgb = |rng: &mut ChaCha8Rng| -> Result<Image> {
        Image::new((0..3).map(|_| smooth_random_field(rng, h, w, 0.5, 0.25)).collect())
    };
    let target = rgb(rng)?;
    let source = rgb(rng)?;
    let depth = smooth_random_field(rng, h, w, 3.0, 0.3);
    let gray = target.grayscale();
    Ok(Fixture {
        k,
        target,
        source,
        depth,
        gray,
    })
}

fn random_upstream(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `⟨out − base, u⟩`: the same functional as `⟨out, u⟩` up to a constant, but
/// outputs untouched by a perturbation cancel exactly, so round-off does not
/// swamp small gradient entries.
fn dot_delta(out: &[f64], base: &[f64], u: &[f64]) -> f64 {
    out.iter().zip(base).zip(u).map(|((o, b), u)| (o - b) * u).sum()
}

fn to_planes(flat: &[f64], h: usize, w: usize) -> Vec<ScalarField> {
    flat.chunks_exact(h * w)
        .map(|c| Grid::from_vec(h, w, c.to_vec()).expect("plane"))
        .collect()
}

fn to_vectors(flat: &[f64], h: usize, w: usize) -> VectorField {
    let data = flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
    Grid::from_vec(h, w, data).expect("vector field")
}

/// Coordinates inside the image, kept away from integer values where the
/// bilinear derivative jumps.
fn random_coords(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid<Vector2<f64>> {
    let off = |rng: &mut ChaCha8Rng, n: usize| {
        let cell = rng.random_range(0..n - 1) as f64;
        cell + rng.random_range(0.05..0.95)
    };
    Grid::from_fn(h, w, |_, _| Vector2::new(off(rng, w), off(rng, h)))
}

fn coords_from(flat: &[f64], h: usize, w: usize) -> Grid<Vector2<f64>> {
    let data = flat.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect();
    Grid::from_vec(h, w, data).expect("coordinate grid")
}

/// Positive masks in (0.2, 1].
fn random_masks(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<ScalarField> {
    (0..n)
        .map(|_| Grid::from_fn(h, w, |_, _| rng.random_range(0.2..1.0)))
        .collect()
}

/// Target plus a ramp with jitter: every photometric residual and every
/// forward difference of the residual stays at least 0.01 away from zero, so
/// central differences never straddle an L1 kink.
fn perturbed_view(rng: &mut ChaCha8Rng, target: &Image) -> Result<SampledImage> {
    let (h, w) = target.shape();
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let channels = target
        .channels()
        .iter()
        .map(|ch| {
            Grid::from_fn(h, w, |r, c| {
                let ramp = 0.05 + 0.03 * c as f64 + 0.05 * r as f64 + rng.random_range(-0.01..0.01);
                ch[(r, c)] + sign * ramp
            })
        })
        .collect();
    let mut valid = Grid::filled(h, w, true);
    valid[(0, 0)] = false;
    valid[(h - 1, w / 2)] = false;
    Ok(SampledImage {
        image: Image::new(channels)?,
        valid,
    })
}

/// Runs every per-operation check and the end-to-end objective check.
pub fn standard_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fx = fixture(cfg, &mut rng)?;
    let (h, w) = (cfg.height, cfg.width);
    let op = GradCheckOptions {
        step: cfg.step,
        tol: cfg.op_tol,
        max_coords: MAX_COORDS,
        seed: cfg.seed,
    };
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(SuiteEntry {
            operation: name.to_string(),
            report,
        })
    };

    // Bilinear sampling, with respect to the source image and the coordinates.
    {
        let coords = random_coords(&mut rng, h, w);
        let valid = Grid::filled(h, w, true);
        let u = random_upstream(&mut rng, 3 * h * w);
        let planes = to_planes(&u, h, w);
        let (g_src, g_coords) = bilinear_sample_vjp(&fx.source, &coords, &valid, &planes)?;
        let mut src = DiffVariable::from_image("source", &fx.source);
        src.accumulate(&flatten_image(&g_src))?;
        let flat_coords: Vec<f64> = coords.iter().flat_map(|c| [c.x, c.y]).collect();
        let mut cv = DiffVariable::new("coords", vec![h, w, 2], flat_coords)?;
        cv.accumulate(&g_coords.iter().flat_map(|g| [g.x, g.y]).collect::<Vec<_>>())?;
        let base = flatten_image(&bilinear_sample(&fx.source, &coords, &valid)?.image);
        let report = finite_diff_check(
            |v| {
                let s = bilinear_sample(&v[0].image(), &coords_from(&v[1].value, h, w), &valid)?;
                Ok(dot_delta(&flatten_image(&s.image), &base, &u))
            },
            &[src, cv],
            &op,
        )?;
        push("bilinear_sample", report);
    }

    // Warp coordinates, with respect to depth and the twist.
    {
        let twist = Twist::new(Vector3::new(0.02, -0.01, 0.015), Vector3::new(0.1, -0.05, 0.03));
        let u = random_upstream(&mut rng, 2 * h * w);
        let (pose, jac) = se3_exp_with_jacobian(&twist);
        let mut gd = vec![0.0; h * w];
        let mut gt = [0.0; 6];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let x = Vector2::new(c as f64, r as f64);
                let j = warp_coords_jacobian(x, fx.depth[(r, c)], &pose, &jac, &fx.k)?
                    .ok_or_else(|| Error::Domain("warped point behind the camera".into()))?;
                let up = Vector2::new(u[2 * i], u[2 * i + 1]);
                gd[i] = up.dot(&j.d_depth);
                let t = j.d_twist.transpose() * up;
                for (a, b) in gt.iter_mut().zip(t.iter()) {
                    *a += b;
                }
            }
        }
        let mut dv = DiffVariable::from_scalar("depth", &fx.depth);
        dv.accumulate(&gd)?;
        let mut tv = DiffVariable::new("twist", vec![6], twist.0.as_slice().to_vec())?;
        tv.accumulate(&gt)?;
        let k = fx.k;
        let base = Grid::from_fn(h, w, |r, c| {
            warp_coords(Vector2::new(c as f64, r as f64), fx.depth[(r, c)], &pose, &k).map(|wc| wc.coords)
        })
        .into_vec()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let report = finite_diff_check(
            |v| {
                let pose = PoseSE3::exp(&Twist(nalgebra::Vector6::from_column_slice(&v[1].value)));
                let mut s = 0.0;
                for r in 0..h {
                    for c in 0..w {
                        let i = r * w + c;
                        let wc = warp_coords(Vector2::new(c as f64, r as f64), v[0].value[i], &pose, &k)?;
                        let b = &base[i];
                        s += u[2 * i] * (wc.coords.x - b.x) + u[2 * i + 1] * (wc.coords.y - b.y);
                    }
                }
                Ok(s)
            },
            &[dv, tv],
            &op,
        )?;
        push("warp_coords", report);
    }

    let weights = edge_weights(&fx.gray, 0.1)?;

    // Depth to normal.
    {
        let u = random_upstream(&mut rng, 3 * h * w);
        let up = to_vectors(&u, h, w);
        let mut dv = DiffVariable::from_scalar("depth", &fx.depth);
        dv.accumulate(depth_to_normal_vjp(&fx.depth, &fx.k, &weights, &up)?.as_slice())?;
        let base = flatten_vectors(&depth_to_normal(&fx.depth, &fx.k, &weights)?.normals);
        let report = finite_diff_check(
            |v| {
                let n = depth_to_normal(&v[0].scalar_field(), &fx.k, &weights)?;
                Ok(dot_delta(&flatten_vectors(&n.normals), &base, &u))
            },
            &[dv],
            &op,
        )?;
        push("depth_to_normal", report);
    }

    // Normal to depth, with respect to depth and normals.
    {
        let normals = depth_to_normal(&fx.depth, &fx.k, &weights)?.normals;
        let u = random_upstream(&mut rng, h * w);
        let up = Grid::from_vec(h, w, u.clone())?;
        let (g_d, g_n) = normal_to_depth_vjp(&fx.depth, &normals, &fx.k, &weights, &up)?;
        let mut dv = DiffVariable::from_scalar("depth", &fx.depth);
        dv.accumulate(g_d.as_slice())?;
        let mut nv = DiffVariable::from_vector("normals", &normals);
        nv.accumulate(&flatten_vectors(&g_n))?;
        let base = normal_to_depth(&fx.depth, &normals, &fx.k, &weights)?;
        let report = finite_diff_check(
            |v| {
                let d = normal_to_depth(&v[0].scalar_field(), &v[1].vector_field(), &fx.k, &weights)?;
                Ok(dot_delta(d.as_slice(), base.as_slice(), &u))
            },
            &[dv, nv],
            &op,
        )?;
        push("normal_to_depth", report);
    }

    // View-synthesis losses, with respect to warped views and masks.
    let views = vec![perturbed_view(&mut rng, &fx.target)?, perturbed_view(&mut rng, &fx.target)?];
    let masks = random_masks(&mut rng, 2, h, w);
    for (name, loss) in [
        ("photometric_loss", photometric_loss as fn(&Image, &[SampledImage], &[ScalarField]) -> _),
        ("gradient_matching_loss", gradient_matching_loss),
    ] {
        let r = loss(&fx.target, &views, &masks)?;
        let mut vars = Vec::new();
        for (s, view) in views.iter().enumerate() {
            let mut v = DiffVariable::from_image(format!("warped[{s}]"), &view.image);
            let g: Vec<f64> = r.grad_warped[s].iter().flat_map(|c| c.as_slice().iter().copied()).collect();
            v.accumulate(&g)?;
            vars.push(v);
        }
        for (s, m) in masks.iter().enumerate() {
            let mut v = DiffVariable::from_scalar(format!("mask[{s}]"), m);
            v.accumulate(r.grad_masks[s].as_slice())?;
            vars.push(v);
        }
        let report = finite_diff_check(
            |v| {
                let warped: Vec<SampledImage> = views
                    .iter()
                    .zip(&v[..2])
                    .map(|(orig, var)| SampledImage {
                        image: var.image(),
                        valid: orig.valid.clone(),
                    })
                    .collect();
                let m: Vec<ScalarField> = v[2..].iter().map(DiffVariable::scalar_field).collect();
                Ok(loss(&fx.target, &warped, &m)?.term.sum)
            },
            &vars,
            &op,
        )?;
        push(name, report);
    }

    // Smoothness of depth (second order) and normals (first order), on fields
    // whose stencil differences stay clear of the L1 kink at zero.
    {
        let depth = Grid::from_fn(h, w, |r, c| {
            3.0 + 0.02 * (r * r) as f64 + 0.03 * (c * c) as f64 + rng.random_range(-0.002..0.002)
        });
        let (_, g) = smoothness_loss(&depth, SmoothOrder::Second, &fx.gray, 0.1)?;
        let mut dv = DiffVariable::from_scalar("depth", &depth);
        dv.accumulate(g.as_slice())?;
        let report = finite_diff_check(
            |v| Ok(smoothness_loss(&v[0].scalar_field(), SmoothOrder::Second, &fx.gray, 0.1)?.0.sum),
            &[dv],
            &op,
        )?;
        push("smoothness_loss(order 2)", report);

        let normals = Grid::from_fn(h, w, |r, c| {
            let (r, c) = (r as f64, c as f64);
            let mut j = || rng.random_range(-0.003..0.003);
            Vector3::new(0.02 * c + 0.015 * r + j(), 0.01 * c + 0.03 * r + j(), -1.0 + 0.012 * c + 0.01 * r + j())
        });
        let (_, g) = smoothness_loss_vector(&normals, SmoothOrder::First, &fx.gray, 0.1)?;
        let mut nv = DiffVariable::from_vector("normals", &normals);
        nv.accumulate(&flatten_vectors(&g))?;
        let report = finite_diff_check(
            |v| Ok(smoothness_loss_vector(&v[0].vector_field(), SmoothOrder::First, &fx.gray, 0.1)?.0.sum),
            &[nv],
            &op,
        )?;
        push("smoothness_loss(order 1)", report);
    }

    // Mask regularizer.
    {
        let (_, g) = mask_loss(&masks)?;
        let vars = masks
            .iter()
            .zip(&g)
            .enumerate()
            .map(|(s, (m, g))| {
                let mut v = DiffVariable::from_scalar(format!("mask[{s}]"), m);
                v.accumulate(g.as_slice()).map(|_| v)
            })
            .collect::<Result<Vec<_>>>()?;
        let report = finite_diff_check(
            |v| {
                let m: Vec<ScalarField> = v.iter().map(DiffVariable::scalar_field).collect();
                Ok(mask_loss(&m)?.0.sum)
            },
            &vars,
            &op,
        )?;
        push("mask_loss", report);
    }

    // Full objective on a rendered scene, away from the ground truth.
    {
        let spec = Preset::Slanted.spec(h, w, cfg.seed)?;
        let seq = make_sequence(&spec)?;
        let frames: Frames = seq.to_frames();
        let objective = Objective::new(&frames, ObjectiveConfig::default())?;
        let depth = seq.depth.zip_map(&smooth_random_field(&mut rng, h, w, 1.1, 0.05), |a, b| a * b)?;
        let twists: Vec<Twist> = seq
            .poses
            .iter()
            .map(|p| {
                let mut t = p.log();
                for j in 0..6 {
                    t.0[j] += rng.random_range(-0.01..0.01);
                }
                t
            })
            .collect();
        let mask_logits = vec![
            smooth_random_field(&mut rng, h, w, 0.5, 0.5),
            smooth_random_field(&mut rng, h, w, 0.5, 0.5),
        ];
        let state = SceneState {
            depth,
            twists,
            mask_logits,
        };
        let report = objective.evaluate(&state, ActiveTerms::ALL)?;
        let mut vars = vec![DiffVariable::from_scalar("depth", &state.depth)];
        vars[0].accumulate(report.grad_depth.as_slice())?;
        for (s, t) in state.twists.iter().enumerate() {
            let mut v = DiffVariable::new(format!("twist[{s}]"), vec![6], t.0.as_slice().to_vec())?;
            v.accumulate(&report.grad_twists[s])?;
            vars.push(v);
        }
        for (s, m) in state.mask_logits.iter().enumerate() {
            let mut v = DiffVariable::from_scalar(format!("mask_logits[{s}]"), m);
            v.accumulate(report.grad_mask_logits[s].as_slice())?;
            vars.push(v);
        }
        let n = state.twists.len();
        let opts = GradCheckOptions {
            step: cfg.objective_step,
            tol: cfg.objective_tol,
            ..op
        };
        let report = finite_diff_check(
            |v| {
                let s = SceneState {
                    depth: v[0].scalar_field(),
                    twists: v[1..=n]
                        .iter()
                        .map(|t| Twist(nalgebra::Vector6::from_column_slice(&t.value)))
                        .collect(),
                    mask_logits: v[n + 1..].iter().map(DiffVariable::scalar_field).collect(),
                };
                Ok(objective.evaluate(&s, ActiveTerms::ALL)?.total)
            },
            &vars,
            &opts,
        )?;
        push("total_objective", report);
    }

    Ok(out)
}
