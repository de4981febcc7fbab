//! Depth and normal error metrics, ground-truth normals and naive normal baselines.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::consistency::{depth_to_normal, EdgeWeights, NormalMap, FALLBACK_NORMAL};
use crate::error::{check_shape, Error, Result};
use crate::grid::{Grid, ScalarField, ValidMask, VectorField};

/// Lower clamp applied to both prediction and ground truth before the metrics.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;
pub const DEFAULT_DEPTH_CAP: f64 = 80.0;
/// Unit-norm tolerance for normal inputs.
const UNIT_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_3: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,delta_1,delta_2,delta_3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta_1, self.delta_2, self.delta_3
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub pct_11_25: f64,
    pub pct_22_5: f64,
    pub pct_30: f64,
}

impl NormalMetrics {
    pub const CSV_HEADER: &'static str = "mean,median,11.25,22.5,30";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.mean_deg, self.median_deg, self.pct_11_25, self.pct_22_5, self.pct_30
        )
    }
}

/// Median with the midpoint convention for even counts. `values` is reordered.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty set");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn valid_indices(shape: (usize, usize), valid: Option<&ValidMask>) -> Result<Vec<usize>> {
    let n = shape.0 * shape.1;
    match valid {
        Some(v) => {
            check_shape(shape, v.shape())?;
            Ok((0..n).filter(|&i| v.as_slice()[i]).collect())
        }
        None => Ok((0..n).collect()),
    }
}

/// Standard depth error metrics over the valid pixels.
///
/// With `scale_correct` the prediction is first multiplied by
/// `median(gt) / median(pred)`; both maps are then clamped to `[1e-3, cap]`.
pub fn depth_metrics(
    pred: &ScalarField,
    gt: &ScalarField,
    cap: f64,
    scale_correct: bool,
    valid: Option<&ValidMask>,
) -> Result<DepthMetrics> {
    check_shape(gt.shape(), pred.shape())?;
    if !(cap > MIN_EVAL_DEPTH) {
        return Err(Error::InvalidInput(format!("depth cap {cap} must exceed {MIN_EVAL_DEPTH}")));
    }
    let idx = valid_indices(gt.shape(), valid)?;
    if idx.is_empty() {
        return Err(Error::InvalidInput("no valid pixels to evaluate".into()));
    }
    let (p, g) = (pred.as_slice(), gt.as_slice());
    for &i in &idx {
        if !(g[i] > 0.0 && g[i].is_finite()) {
            return Err(Error::Domain(format!("ground-truth depth {} at index {i} is not positive", g[i])));
        }
        if !p[i].is_finite() {
            return Err(Error::NonFinite {
                what: "predicted depth".into(),
                index: i,
            });
        }
    }
    let scale = if scale_correct {
        let mut gv: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        let mut pv: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let mp = median(&mut pv);
        if !(mp > 0.0) {
            return Err(Error::Domain(format!("median prediction {mp} is not positive")));
        }
        median(&mut gv) / mp
    } else {
        1.0
    };

    let clamp = |x: f64| x.clamp(MIN_EVAL_DEPTH, cap);
    let n = idx.len() as f64;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    for &i in &idx {
        let pi = clamp(p[i] * scale);
        let gi = clamp(g[i]);
        let d = pi - gi;
        abs_rel += d.abs() / gi;
        sq_rel += d * d / gi;
        se += d * d;
        let dl = pi.ln() - gi.ln();
        se_log += dl * dl;
        let ratio = (pi / gi).max(gi / pi);
        for (k, w) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *w += 1;
            }
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (se / n).sqrt(),
        rmse_log: (se_log / n).sqrt(),
        delta_1: within[0] as f64 / n,
        delta_2: within[1] as f64 / n,
        delta_3: within[2] as f64 / n,
    })
}

/// Angle between two unit vectors in degrees.
///
/// Computed as `atan2(‖p × g‖, p · g)`, which equals `arccos(p · g)` for unit
/// vectors but stays exact at 0° and 180°.
pub fn angle_deg(p: &Vector3<f64>, g: &Vector3<f64>) -> f64 {
    p.cross(g).norm().atan2(p.dot(g)).to_degrees()
}

/// Error of an estimated relative pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Angle between the estimated and true translation directions; the
    /// translation magnitude is not observable from images alone.
    pub translation_deg: f64,
    /// Rotation angle of `R_est · R_gtᵀ`.
    pub rotation_deg: f64,
}

pub fn pose_error(pred: &PoseSE3, gt: &PoseSE3) -> Result<PoseError> {
    if gt.translation.norm() == 0.0 {
        return Err(Error::InvalidInput("translation direction undefined for a zero ground-truth baseline".into()));
    }
    let delta = pred.rotation * gt.rotation.transpose();
    let cos = ((delta.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok(PoseError {
        translation_deg: angle_deg(&pred.translation, &gt.translation),
        rotation_deg: cos.acos().to_degrees(),
    })
}

/// Angular error statistics over the valid pixels.
pub fn normal_metrics(pred: &VectorField, gt: &VectorField, valid: Option<&ValidMask>) -> Result<NormalMetrics> {
    check_shape(gt.shape(), pred.shape())?;
    let idx = valid_indices(gt.shape(), valid)?;
    if idx.is_empty() {
        return Err(Error::InvalidInput("no valid pixels to evaluate".into()));
    }
    let (p, g) = (pred.as_slice(), gt.as_slice());
    let mut angles = Vec::with_capacity(idx.len());
    for &i in &idx {
        for (what, v) in [("predicted", &p[i]), ("ground-truth", &g[i])] {
            if !((v.norm() - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::Domain(format!(
                    "{what} normal at index {i} has norm {}, expected 1",
                    v.norm()
                )));
            }
        }
        angles.push(angle_deg(&p[i], &g[i]));
    }
    let n = angles.len() as f64;
    let frac = |t: f64| angles.iter().filter(|&&a| a < t).count() as f64 / n;
    let mean = angles.iter().sum::<f64>() / n;
    let (pct_11_25, pct_22_5, pct_30) = (frac(11.25), frac(22.5), frac(30.0));
    Ok(NormalMetrics {
        mean_deg: mean,
        median_deg: median(&mut angles),
        pct_11_25,
        pct_22_5,
        pct_30,
    })
}

/// Ground-truth normals by the depth-to-normal layer with uniform weights.
///
/// A pixel is valid when its depth and every neighbour depth feeding its
/// normal are valid (positive, finite and inside `valid`), and the normal is
/// not degenerate. Invalid depths are replaced by 1 before the layer runs.
pub fn gt_normals_from_depth(
    depth: &ScalarField,
    k: &CameraIntrinsics,
    valid: Option<&ValidMask>,
) -> Result<(NormalMap, ValidMask)> {
    let (h, w) = depth.shape();
    let depth_ok = Grid::from_fn(h, w, |r, c| {
        let d = depth[(r, c)];
        d > 0.0 && d.is_finite() && valid.is_none_or(|v| v[(r, c)])
    });
    if let Some(v) = valid {
        check_shape((h, w), v.shape())?;
    }
    let filled = Grid::from_fn(h, w, |r, c| if depth_ok[(r, c)] { depth[(r, c)] } else { 1.0 });
    let normals = depth_to_normal(&filled, k, &EdgeWeights::uniform(h, w))?;
    let interior_ok = |r: usize, c: usize| {
        !normals.degenerate[(r, c)]
            && (-1..=1).all(|dr: isize| {
                (-1..=1).all(|dc: isize| depth_ok[((r as isize + dr) as usize, (c as isize + dc) as usize)])
            })
    };
    let out_valid = Grid::from_fn(h, w, |r, c| {
        let (sr, sc) = (r.clamp(1, h - 2), c.clamp(1, w - 2));
        depth_ok[(r, c)] && interior_ok(sr, sc)
    });
    Ok((normals, out_valid))
}

/// Naive constant-structure normal predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Mean ground-truth normal broadcast to every pixel.
    GtMean,
    /// Floor below, walls left and right, a facing surface above.
    PredefinedScene,
}

/// Normal of the up-facing floor in camera coordinates (image y grows downward).
pub const FLOOR_NORMAL: Vector3<f64> = Vector3::new(0.0, -1.0, 0.0);
/// Normal of a wall on the left side of the image, facing right.
pub const LEFT_WALL_NORMAL: Vector3<f64> = Vector3::new(1.0, 0.0, 0.0);
pub const RIGHT_WALL_NORMAL: Vector3<f64> = Vector3::new(-1.0, 0.0, 0.0);
/// Normal of the upper region, facing the camera.
pub const FACING_NORMAL: Vector3<f64> = Vector3::new(0.0, 0.0, -1.0);

/// Splits the image by the two diagonals through the corners and returns the
/// normal assigned to pixel `(r, c)`. Pixels on a diagonal go to the top or
/// bottom part.
pub fn predefined_normal(r: usize, c: usize, height: usize, width: usize) -> Vector3<f64> {
    let x = (c as f64 - (width as f64 - 1.0) / 2.0) / (width as f64 / 2.0);
    let y = (r as f64 - (height as f64 - 1.0) / 2.0) / (height as f64 / 2.0);
    if y.abs() >= x.abs() {
        if y > 0.0 {
            FLOOR_NORMAL
        } else {
            FACING_NORMAL
        }
    } else if x < 0.0 {
        LEFT_WALL_NORMAL
    } else {
        RIGHT_WALL_NORMAL
    }
}

/// Baseline normal map of the given size.
///
/// For [`BaselineKind::GtMean`] a mean that cancels out falls back to
/// `(0, 0, −1)` with every pixel flagged degenerate.
pub fn baseline_normals(
    kind: BaselineKind,
    gt: &VectorField,
    valid: Option<&ValidMask>,
    size: (usize, usize),
) -> Result<NormalMap> {
    let (h, w) = size;
    match kind {
        BaselineKind::GtMean => {
            let idx = valid_indices(gt.shape(), valid)?;
            let sum: Vector3<f64> = idx.iter().map(|&i| gt.as_slice()[i]).sum();
            let norm = sum.norm();
            let (n, degenerate) = if norm < 1e-12 || !norm.is_finite() {
                (FALLBACK_NORMAL, true)
            } else {
                (sum / norm, false)
            };
            Ok(NormalMap {
                normals: Grid::filled(h, w, n),
                degenerate: Grid::filled(h, w, degenerate),
            })
        }
        BaselineKind::PredefinedScene => Ok(NormalMap {
            normals: Grid::from_fn(h, w, |r, c| predefined_normal(r, c, h, w)),
            degenerate: Grid::filled(h, w, false),
        }),
    }
}
