//! Edge-aware depth-normal consistency layers.
//!
//! Depth and normals are tied by local planarity: for a pixel `x_i` with
//! back-projected point `φ(x_i) = D(x_i) K⁻¹ h(x_i)`, every weighted
//! difference `ω_ji (φ(x_j) − φ(x_i))` to a neighbour should be orthogonal
//! to the normal `N(x_i)`.
//!
//! * [`depth_to_normal`] approximates the least-squares normal by the
//!   normalized sum of cross products over four perpendicular neighbour pairs.
//! * [`normal_to_depth`] lets every neighbour `i` of `j` cast a vote for the
//!   depth of `j` by intersecting the ray of `x_j` with the tangent plane of
//!   `x_i`, then fuses the votes with normalized edge-aware weights.
//!
//! Weights `ω_ji = exp(−α |I(x_j) − I(x_i)|)` are computed once from the
//! target image and treated as constants.
//!
//! Normals face the camera: `N · φ < 0` on visible surfaces, so a
//! fronto-parallel plane gets `(0, 0, −1)`.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::camera::CameraIntrinsics;
use crate::error::{check_shape, Error, Result};
use crate::grid::{Grid, ScalarField, ValidMask, VectorField};

/// 8-neighbourhood as `(row, col)` offsets, laid out so that consecutive
/// entries form the four perpendicular pairs in [`NEIGHBOR_PAIRS`].
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (-1, 0),
    (0, 1),
    (-1, 1),
    (1, 1),
    (1, 0),
    (0, -1),
    (1, -1),
    (-1, -1),
];

/// Indices into [`NEIGHBOR_OFFSETS`]; each of the 8 neighbours appears once.
pub const NEIGHBOR_PAIRS: [(usize, usize); 4] = [(0, 1), (2, 3), (4, 5), (6, 7)];

/// Votes whose ray meets the neighbour plane at `|N · K⁻¹h| < DEFAULT_EPS_RAY` are dropped.
pub const DEFAULT_EPS_RAY: f64 = 1e-6;

const DEGENERATE_NORM: f64 = 1e-12;

/// Fallback normal for degenerate pixels, facing the camera.
pub const FALLBACK_NORMAL: Vector3<f64> = Vector3::new(0.0, 0.0, -1.0);

/// Per-pixel, per-neighbour weights `exp(−α |ΔI|)`; out-of-image neighbours hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    alpha: f64,
    weights: Grid<[f64; 8]>,
}

impl EdgeWeights {
    /// All in-image neighbours weighted 1.
    pub fn uniform(height: usize, width: usize) -> Self {
        let weights = Grid::from_fn(height, width, |r, c| {
            let mut w = [0.0; 8];
            for (k, &(dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                if in_bounds(r as isize + dr, c as isize + dc, height, width) {
                    w[k] = 1.0;
                }
            }
            w
        });
        Self {
            alpha: 0.0,
            weights,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }

    /// Weight between pixel `(row, col)` and its neighbour `k`.
    #[inline]
    pub fn get(&self, row: usize, col: usize, k: usize) -> f64 {
        self.weights[(row, col)][k]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64; 8] {
        &self.weights[(row, col)]
    }
}

#[inline]
fn in_bounds(r: isize, c: isize, h: usize, w: usize) -> bool {
    r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w
}

/// Edge-aware neighbour weights from a grayscale image.
///
/// `alpha = 0` disables edge awareness (all in-image weights are 1).
pub fn edge_weights(gray: &ScalarField, alpha: f64) -> Result<EdgeWeights> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "edge weight alpha must be non-negative, got {alpha}"
        )));
    }
    let (h, w) = gray.shape();
    let weights = Grid::from_fn(h, w, |r, c| {
        let centre = gray[(r, c)];
        let mut out = [0.0; 8];
        for (k, &(dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
            if let Some(&other) = gray.get(r as isize + dr, c as isize + dc) {
                out[k] = (-alpha * (other - centre).abs()).exp();
            }
        }
        out
    });
    Ok(EdgeWeights { alpha, weights })
}

/// Unit normals plus the pixels where the cross-product sum vanished.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub normals: VectorField,
    pub degenerate: ValidMask,
}

fn check_layer_inputs(
    depth: &ScalarField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
) -> Result<()> {
    let (h, w) = depth.shape();
    if h < 3 || w < 3 {
        return Err(Error::InvalidInput(format!(
            "depth-normal layers need at least 3x3 pixels, got {h}x{w}"
        )));
    }
    check_shape(depth.shape(), weights.shape())?;
    check_shape((k.height, k.width), depth.shape())?;
    Ok(())
}

#[inline]
fn point(depth: &ScalarField, k: &CameraIntrinsics, r: usize, c: usize) -> Vector3<f64> {
    k.ray(c as f64, r as f64) * depth[(r, c)]
}

/// Weighted neighbour differences and the (camera-facing) cross-product sum at an interior pixel.
struct PixelCross {
    deltas: [Vector3<f64>; 8],
    n: Vector3<f64>,
}

fn pixel_cross(
    depth: &ScalarField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
    r: usize,
    c: usize,
) -> PixelCross {
    let centre = point(depth, k, r, c);
    let w = weights.at(r, c);
    let mut deltas = [Vector3::zeros(); 8];
    for (kk, &(dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
        let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
        deltas[kk] = (point(depth, k, nr, nc) - centre) * w[kk];
    }
    // With rows growing downward the listed pair order yields normals pointing
    // away from the camera; flip each product so normals face it.
    let mut n = Vector3::zeros();
    for &(a, b) in &NEIGHBOR_PAIRS {
        n += deltas[b].cross(&deltas[a]);
    }
    PixelCross { deltas, n }
}

/// Interior pixel whose normal a (possibly border) pixel replicates.
#[inline]
fn interior_source(r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
    (r.clamp(1, h - 2), c.clamp(1, w - 2))
}

/// Normals from depth by the normalized sum of cross products.
///
/// Border pixels copy the normal of the nearest interior pixel.
pub fn depth_to_normal(
    depth: &ScalarField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
) -> Result<NormalMap> {
    check_layer_inputs(depth, k, weights)?;
    let (h, w) = depth.shape();
    let mut normals = VectorField::zeros(h, w);
    let mut degenerate = Grid::filled(h, w, false);
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let n = pixel_cross(depth, k, weights, r, c).n;
            let norm = n.norm();
            if norm < DEGENERATE_NORM || !norm.is_finite() {
                normals[(r, c)] = FALLBACK_NORMAL;
                degenerate[(r, c)] = true;
            } else {
                normals[(r, c)] = n / norm;
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = interior_source(r, c, h, w);
            if (sr, sc) != (r, c) {
                normals[(r, c)] = normals[(sr, sc)];
                degenerate[(r, c)] = degenerate[(sr, sc)];
            }
        }
    }
    Ok(NormalMap {
        normals,
        degenerate,
    })
}

/// Reference normal at an interior pixel: the unit `N` minimizing
/// `Σ_j (ω_ji (φ_j − φ_i) · N)²` over the 8-neighbourhood, i.e. the plane fit
/// that [`depth_to_normal`] approximates with cross products. Solved as the
/// eigenvector of the smallest eigenvalue of the scatter matrix, equivalently
/// the smallest right singular vector of the stacked differences; that
/// eigenvalue is returned as the fit residual. Not differentiable; it exists
/// to validate the layer. Panics on border pixels.
pub fn plane_fit_normal(
    depth: &ScalarField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
    r: usize,
    c: usize,
) -> (Vector3<f64>, f64) {
    let centre = k.ray(c as f64, r as f64) * depth[(r, c)];
    let mut m = Matrix3::zeros();
    for (kk, &(dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
        let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
        let d = (k.ray(nc as f64, nr as f64) * depth[(nr, nc)] - centre) * weights.get(r, c, kk);
        m += d * d.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let i = eig.eigenvalues.imin();
    let mut n: Vector3<f64> = eig.eigenvectors.column(i).into_owned();
    if n.dot(&centre) > 0.0 {
        n = -n;
    }
    (n.normalize(), eig.eigenvalues[i])
}

/// Gradient of `Σ ⟨upstream, depth_to_normal(depth)⟩` with respect to depth.
pub fn depth_to_normal_vjp(
    depth: &ScalarField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
    upstream: &VectorField,
) -> Result<ScalarField> {
    check_layer_inputs(depth, k, weights)?;
    check_shape(depth.shape(), upstream.shape())?;
    let (h, w) = depth.shape();

    // Fold replicated border gradients back onto their interior sources.
    let mut g_normal = VectorField::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let src = interior_source(r, c, h, w);
            g_normal[src] += upstream[(r, c)];
        }
    }

    let mut grad = ScalarField::zeros(h, w);
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let g_unit = g_normal[(r, c)];
            if g_unit == Vector3::zeros() {
                continue;
            }
            let PixelCross { deltas, n } = pixel_cross(depth, k, weights, r, c);
            let norm = n.norm();
            if norm < DEGENERATE_NORM || !norm.is_finite() {
                continue;
            }
            let unit = n / norm;
            let g_n = (g_unit - unit * unit.dot(&g_unit)) / norm;

            // g · (Δ_b × Δ_a) = Δ_a · (g × Δ_b) = Δ_b · (Δ_a × g)
            let mut g_delta = [Vector3::zeros(); 8];
            for &(a, b) in &NEIGHBOR_PAIRS {
                g_delta[a] += g_n.cross(&deltas[b]);
                g_delta[b] += deltas[a].cross(&g_n);
            }

            let wts = weights.at(r, c);
            let mut g_centre = Vector3::zeros();
            for (kk, &(dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                let gd = g_delta[kk] * wts[kk];
                let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                grad[(nr, nc)] += gd.dot(&k.ray(nc as f64, nr as f64));
                g_centre -= gd;
            }
            grad[(r, c)] += g_centre.dot(&k.ray(c as f64, r as f64));
        }
    }
    Ok(grad)
}

/// Depth of `x_j` implied by the tangent plane at `x_i`:
/// `(N_i · φ(x_i)) / (N_i · K⁻¹h(x_j))`, or `None` at grazing incidence.
#[inline]
pub fn plane_vote(
    normal_i: &Vector3<f64>,
    point_i: &Vector3<f64>,
    ray_j: &Vector3<f64>,
    eps_ray: f64,
) -> Option<f64> {
    let denom = normal_i.dot(ray_j);
    if denom.abs() < eps_ray {
        return None;
    }
    Some(normal_i.dot(point_i) / denom)
}

/// Depth re-estimated from neighbouring tangent planes.
///
/// `D_n(x_j) = Σ_i ŵ_ij D_e(x_j | x_i)` over the in-image 8-neighbours `i`
/// of `j`, with `ŵ_ij = ω_ij / Σ_i ω_ij` renormalized over the votes kept.
/// When every vote is dropped the initial depth passes through.
pub fn normal_to_depth(
    depth: &ScalarField,
    normals: &VectorField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
) -> Result<ScalarField> {
    normal_to_depth_with_eps(depth, normals, k, weights, DEFAULT_EPS_RAY)
}

pub fn normal_to_depth_with_eps(
    depth: &ScalarField,
    normals: &VectorField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
    eps_ray: f64,
) -> Result<ScalarField> {
    check_layer_inputs(depth, k, weights)?;
    check_shape(depth.shape(), normals.shape())?;
    let (h, w) = depth.shape();
    let mut out = ScalarField::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let ray_j = k.ray(c as f64, r as f64);
            let wts = weights.at(r, c);
            let (mut num, mut den) = (0.0, 0.0);
            for (kk, &(dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if !in_bounds(nr, nc, h, w) {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                let p_i = point(depth, k, nr, nc);
                if let Some(vote) = plane_vote(&normals[(nr, nc)], &p_i, &ray_j, eps_ray) {
                    num += wts[kk] * vote;
                    den += wts[kk];
                }
            }
            out[(r, c)] = if den > 0.0 { num / den } else { depth[(r, c)] };
        }
    }
    Ok(out)
}

/// Gradients of `Σ upstream · normal_to_depth(depth, normals)` with respect
/// to the initial depth and the normals.
pub fn normal_to_depth_vjp(
    depth: &ScalarField,
    normals: &VectorField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
    upstream: &ScalarField,
) -> Result<(ScalarField, VectorField)> {
    check_layer_inputs(depth, k, weights)?;
    check_shape(depth.shape(), normals.shape())?;
    check_shape(depth.shape(), upstream.shape())?;
    let (h, w) = depth.shape();
    let mut g_depth = ScalarField::zeros(h, w);
    let mut g_normals = VectorField::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let g = upstream[(r, c)];
            if g == 0.0 {
                continue;
            }
            let ray_j = k.ray(c as f64, r as f64);
            let wts = weights.at(r, c);
            let mut den = 0.0;
            let mut kept = [false; 8];
            for (kk, &(dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if !in_bounds(nr, nc, h, w) {
                    continue;
                }
                if normals[(nr as usize, nc as usize)].dot(&ray_j).abs() >= DEFAULT_EPS_RAY {
                    kept[kk] = true;
                    den += wts[kk];
                }
            }
            if den <= 0.0 {
                g_depth[(r, c)] += g;
                continue;
            }
            for (kk, &(dr, dc)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                if !kept[kk] {
                    continue;
                }
                let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                let g_vote = g * wts[kk] / den;
                let n_i = normals[(nr, nc)];
                let ray_i = k.ray(nc as f64, nr as f64);
                let d_i = depth[(nr, nc)];
                let a = n_i.dot(&ray_i);
                let b = n_i.dot(&ray_j);
                // vote = d_i · a / b
                g_depth[(nr, nc)] += g_vote * a / b;
                g_normals[(nr, nc)] += (ray_i / b - ray_j * (a / (b * b))) * (g_vote * d_i);
            }
        }
    }
    Ok((g_depth, g_normals))
}

/// Depth → normals → refined depth, the composite used inside the objective.
pub fn refine_depth(
    depth: &ScalarField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
) -> Result<(NormalMap, ScalarField)> {
    let normals = depth_to_normal(depth, k, weights)?;
    let refined = normal_to_depth(depth, &normals.normals, k, weights)?;
    Ok((normals, refined))
}

/// Vector-Jacobian product of [`refine_depth`] with upstream gradients on
/// both outputs (either may be zero).
pub fn refine_depth_vjp(
    depth: &ScalarField,
    k: &CameraIntrinsics,
    weights: &EdgeWeights,
    normals: &NormalMap,
    upstream_normals: &VectorField,
    upstream_depth: &ScalarField,
) -> Result<ScalarField> {
    let (mut g_depth, g_n) =
        normal_to_depth_vjp(depth, &normals.normals, k, weights, upstream_depth)?;
    let mut g_total = g_n;
    for (a, b) in g_total.as_mut_slice().iter_mut().zip(upstream_normals.iter()) {
        *a += *b;
    }
    let from_normals = depth_to_normal_vjp(depth, k, weights, &g_total)?;
    g_depth.add_assign(&from_normals)?;
    Ok(g_depth)
}
