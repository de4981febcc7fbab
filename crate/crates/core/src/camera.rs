//! Pinhole projection, back-projection and SE(3) pose algebra.
//!
//! Camera frames look down `+z`, depth is the `z` component of a camera-frame
//! point, and pixel coordinates are `(u, v) = (col, row)` with the origin at
//! the centre of the top-left pixel. Poses map target-camera coordinates into
//! source-camera coordinates: `q = R p + t`.
//!
//! Poses are parametrized by twists `ξ = (ω, v)` (rotation first) and mapped
//! to `[R|t]` with the Rodrigues closed form:
//!
//! ```text
//! R = I + A(θ²) W + B(θ²) W²        W = [ω]×, θ = |ω|
//! t = V v,   V = I + B(θ²) W + C(θ²) W²
//! A = sin θ / θ,  B = (1 - cos θ) / θ²,  C = (θ - sin θ) / θ³
//! ```
//!
//! The coefficient functions are expressed in `s = θ²` so their derivatives
//! stay smooth through `ω = 0`; below `θ = 0.05` they switch to Taylor series.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forward points closer than this to the camera plane are flagged invalid.
pub const DEFAULT_MIN_Z: f64 = 1e-6;

/// Pinhole intrinsics `K = [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: RawIntrinsics) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::InvalidInput(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics for an image downsampled by 2×2 area averaging.
    ///
    /// Pixel `u'` of the coarse image covers fine pixels `2u'` and `2u'+1`,
    /// so its centre sits at fine coordinate `2u' + 0.5`.
    pub fn downsampled(&self) -> Self {
        Self {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx + 0.5) * 0.5 - 0.5,
            cy: (self.cy + 0.5) * 0.5 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹ h(x)`: the ray through pixel `(u, v)` scaled to unit depth.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point; `None` when `z <= min_z`.
    #[inline]
    pub fn project(&self, q: &Vector3<f64>, min_z: f64) -> Option<Vector2<f64>> {
        if q.z <= min_z {
            return None;
        }
        Some(Vector2::new(
            self.fx * q.x / q.z + self.cx,
            self.fy * q.y / q.z + self.cy,
        ))
    }

    /// Jacobian of [`Self::project`] with respect to the point.
    #[inline]
    pub fn project_jacobian(&self, q: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / q.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * q.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * q.y * iz2,
        )
    }
}

/// Lifts pixel `x = (u, v)` at depth `d` to `d · K⁻¹ · (u, v, 1)ᵀ`.
pub fn backproject(x: Vector2<f64>, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("depth must be positive, got {depth}")));
    }
    Ok(k.ray(x.x, x.y) * depth)
}

/// Six-vector `(ω, v)`: rotation vector first, then the translational part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self(Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z))
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn v(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }
}

impl From<[f64; 6]> for Twist {
    fn from(a: [f64; 6]) -> Self {
        Self(Vector6::from_row_slice(&a))
    }
}

impl From<Twist> for [f64; 6] {
    fn from(t: Twist) -> Self {
        let mut a = [0.0; 6];
        a.copy_from_slice(t.0.as_slice());
        a
    }
}

/// Rigid transform `[R|t]`. Serialized as 12 numbers, row-major 3×4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl TryFrom<Vec<f64>> for PoseSE3 {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Format(format!(
                "pose needs 12 numbers (row-major 3x4), got {}",
                v.len()
            )));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        let pose = PoseSE3 {
            rotation,
            translation,
        };
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Format("pose rotation is not a proper rotation".into()));
        }
        Ok(pose)
    }
}

impl From<PoseSE3> for Vec<f64> {
    fn from(p: PoseSE3) -> Self {
        p.to_row_major()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let r = &self.rotation;
        let t = &self.translation;
        vec![
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn exp(twist: &Twist) -> PoseSE3 {
        se3_exp(twist)
    }

    pub fn log(&self) -> Twist {
        se3_log(self)
    }
}

#[inline]
pub(crate) fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

const TAYLOR_THETA: f64 = 0.05;

/// `A, B, C` and their derivatives with respect to `s = θ²`.
#[derive(Clone, Copy, Debug)]
struct RodriguesCoeffs {
    a: f64,
    b: f64,
    c: f64,
    da: f64,
    db: f64,
    dc: f64,
}

fn rodrigues_coeffs(s: f64) -> RodriguesCoeffs {
    if s < TAYLOR_THETA * TAYLOR_THETA {
        let s2 = s * s;
        let s3 = s2 * s;
        let s4 = s3 * s;
        RodriguesCoeffs {
            a: 1.0 - s / 6.0 + s2 / 120.0 - s3 / 5040.0 + s4 / 362_880.0,
            b: 0.5 - s / 24.0 + s2 / 720.0 - s3 / 40_320.0 + s4 / 3_628_800.0,
            c: 1.0 / 6.0 - s / 120.0 + s2 / 5040.0 - s3 / 362_880.0 + s4 / 39_916_800.0,
            da: -1.0 / 6.0 + s / 60.0 - s2 / 1680.0 + s3 / 90_720.0,
            db: -1.0 / 24.0 + s / 360.0 - s2 / 13_440.0 + s3 / 907_200.0,
            dc: -1.0 / 120.0 + s / 2520.0 - s2 / 120_960.0 + s3 / 9_979_200.0,
        }
    } else {
        let theta = s.sqrt();
        let (sin, cos) = theta.sin_cos();
        let a = sin / theta;
        let b = (1.0 - cos) / s;
        let c = (theta - sin) / (s * theta);
        let da = (cos - a) / (2.0 * s);
        let db = (0.5 * a - b) / s;
        let dc = (-da - c) / s;
        RodriguesCoeffs {
            a,
            b,
            c,
            da,
            db,
            dc,
        }
    }
}

/// Exponential map from twist to pose.
pub fn se3_exp(twist: &Twist) -> PoseSE3 {
    let omega = twist.omega();
    let w = hat(&omega);
    let w2 = w * w;
    let k = rodrigues_coeffs(omega.norm_squared());
    let rotation = Matrix3::identity() + w * k.a + w2 * k.b;
    let v_mat = Matrix3::identity() + w * k.b + w2 * k.c;
    PoseSE3 {
        rotation,
        translation: v_mat * twist.v(),
    }
}

/// Derivatives of `exp(ξ)` with respect to each twist coordinate.
#[derive(Clone, Debug)]
pub struct ExpJacobian {
    /// `∂R/∂ω_k` for k = 0, 1, 2.
    pub d_rotation: [Matrix3<f64>; 3],
    /// `∂t/∂ξ`; columns follow the twist layout `(ω, v)`.
    pub d_translation: Matrix3x6<f64>,
}

impl ExpJacobian {
    /// Jacobian of `R p + t` with respect to the twist.
    pub fn point_jacobian(&self, p: &Vector3<f64>) -> Matrix3x6<f64> {
        let mut j = self.d_translation;
        for k in 0..3 {
            let col = self.d_rotation[k] * p;
            for r in 0..3 {
                j[(r, k)] += col[r];
            }
        }
        j
    }

    /// Twist gradient from accumulated point gradients.
    ///
    /// With `g_q` the gradient on each transformed point `q = R p + t`,
    /// `outer = Σ g_q pᵀ` and `sum = Σ g_q` are sufficient statistics.
    pub fn twist_gradient(&self, outer: &Matrix3<f64>, sum: &Vector3<f64>) -> Vector6<f64> {
        let mut g = self.d_translation.transpose() * sum;
        for k in 0..3 {
            g[k] += self.d_rotation[k].component_mul(outer).sum();
        }
        g
    }
}

/// Exponential map plus its analytic Jacobian.
pub fn se3_exp_with_jacobian(twist: &Twist) -> (PoseSE3, ExpJacobian) {
    let omega = twist.omega();
    let v = twist.v();
    let w = hat(&omega);
    let w2 = w * w;
    let k = rodrigues_coeffs(omega.norm_squared());
    let eye = Matrix3::identity();
    let rotation = eye + w * k.a + w2 * k.b;
    let v_mat = eye + w * k.b + w2 * k.c;

    let mut d_rotation = [Matrix3::zeros(); 3];
    let mut d_translation = Matrix3x6::zeros();
    for i in 0..3 {
        let e = hat(&Vector3::ith(i, 1.0));
        let ds = 2.0 * omega[i];
        let dw2 = e * w + w * e;
        d_rotation[i] = w * (k.da * ds) + e * k.a + w2 * (k.db * ds) + dw2 * k.b;
        let dv = w * (k.db * ds) + e * k.b + w2 * (k.dc * ds) + dw2 * k.c;
        d_translation.set_column(i, &(dv * v));
    }
    d_translation.fixed_view_mut::<3, 3>(0, 3).copy_from(&v_mat);

    (
        PoseSE3 {
            rotation,
            translation: v_mat * v,
        },
        ExpJacobian {
            d_rotation,
            d_translation,
        },
    )
}

/// Logarithm map; valid for rotation angles below π.
pub fn se3_log(pose: &PoseSE3) -> Twist {
    let r = &pose.rotation;
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = 0.5 * vee.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = sin.atan2(cos);
    // θ / sin θ, Taylor expanded near zero.
    let scale = if theta < 1e-4 {
        1.0 + theta * theta / 6.0
    } else {
        theta / sin
    };
    let omega = vee * (0.5 * scale);
    let w = hat(&omega);
    let k = rodrigues_coeffs(omega.norm_squared());
    let v_mat = Matrix3::identity() + w * k.b + w * w * k.c;
    let v = v_mat
        .lu()
        .solve(&pose.translation)
        .unwrap_or(pose.translation);
    Twist::new(omega, v)
}

/// Result of warping one target pixel into a source view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpedCoord {
    /// Continuous source pixel coordinate `(u, v)`.
    pub coords: Vector2<f64>,
    /// Depth of the point in the source frame, before dehomogenisation.
    pub z: f64,
    /// `false` when the point lands on or behind the source camera plane.
    pub valid: bool,
}

/// Maps target pixel `x_t` with depth `depth` through `pose` into the source image:
/// `K · T · (depth · K⁻¹ h(x_t))`, divided by its third component.
pub fn warp_coords(
    x_t: Vector2<f64>,
    depth: f64,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> Result<WarpedCoord> {
    warp_coords_with_min_z(x_t, depth, pose, k, DEFAULT_MIN_Z)
}

pub fn warp_coords_with_min_z(
    x_t: Vector2<f64>,
    depth: f64,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    min_z: f64,
) -> Result<WarpedCoord> {
    let p = backproject(x_t, depth, k)?;
    let q = pose.transform(&p);
    Ok(match reproject(x_t, &p, &q, k, min_z) {
        Some(coords) => WarpedCoord {
            coords,
            z: q.z,
            valid: true,
        },
        None => WarpedCoord {
            coords: Vector2::zeros(),
            z: q.z,
            valid: false,
        },
    })
}

/// Projection of `q`, the image of the back-projected point `p` of pixel `x_t`,
/// written as `x_t` plus the displacement `f · (q/q_z − p/p_z)`.
///
/// Equal to `k.project(q)` up to round-off, but exactly `x_t` whenever `q == p`,
/// so the identity warp reproduces the pixel grid bit for bit.
#[inline]
pub fn reproject(
    x_t: Vector2<f64>,
    p: &Vector3<f64>,
    q: &Vector3<f64>,
    k: &CameraIntrinsics,
    min_z: f64,
) -> Option<Vector2<f64>> {
    if !(q.z > min_z) {
        return None;
    }
    let du = k.fx * (q.x / q.z - p.x / p.z);
    let dv = k.fy * (q.y / q.z - p.y / p.z);
    Some(Vector2::new(x_t.x + du, x_t.y + dv))
}

/// Analytic derivatives of the warped coordinate.
#[derive(Clone, Copy, Debug)]
pub struct WarpJacobian {
    pub d_depth: Vector2<f64>,
    pub d_twist: Matrix2x6<f64>,
}

/// Jacobian of [`warp_coords`] with respect to the target depth and the pose twist.
///
/// `None` when the warped point is invalid.
pub fn warp_coords_jacobian(
    x_t: Vector2<f64>,
    depth: f64,
    pose: &PoseSE3,
    exp_jac: &ExpJacobian,
    k: &CameraIntrinsics,
) -> Result<Option<WarpJacobian>> {
    let p = backproject(x_t, depth, k)?;
    let q = pose.transform(&p);
    if q.z <= DEFAULT_MIN_Z {
        return Ok(None);
    }
    let jp = k.project_jacobian(&q);
    let ray = k.ray(x_t.x, x_t.y);
    Ok(Some(WarpJacobian {
        d_depth: jp * (pose.rotation * ray),
        d_twist: jp * exp_jac.point_jacobian(&p),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    /// Matrix exponential of the 4×4 twist generator by scaling and squaring.
    fn expm_oracle(twist: &Twist) -> PoseSE3 {
        let mut g = Matrix4::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&twist.omega()));
        g.fixed_view_mut::<3, 1>(0, 3).copy_from(&twist.v());
        let norm = g.abs().max().max(1e-300);
        let squarings = (norm.log2().ceil() as i32 + 4).max(0);
        let scaled = g / 2f64.powi(squarings);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for i in 1..30 {
            term = term * scaled / i as f64;
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        PoseSE3 {
            rotation: sum.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: sum.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    #[test]
    fn backproject_examples() {
        let unit = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).unwrap();
        assert_eq!(
            backproject(Vector2::new(0.0, 0.0), 2.0, &unit).unwrap(),
            Vector3::new(0.0, 0.0, 2.0)
        );
        let k = k100();
        assert_eq!(
            backproject(Vector2::new(50.0, 50.0), 3.0, &k).unwrap(),
            Vector3::new(0.0, 0.0, 3.0)
        );
        // Oracle: explicit inverse of K applied to the homogeneous coordinate.
        let kinv = k.matrix().try_inverse().unwrap();
        let expected = kinv * Vector3::new(150.0, 50.0, 1.0) * 3.0;
        let got = backproject(Vector2::new(150.0, 50.0), 3.0, &k).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        assert_relative_eq!(got, Vector3::new(3.0, 0.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_rejects_non_positive_depth() {
        assert!(matches!(
            backproject(Vector2::new(1.0, 1.0), 0.0, &k100()),
            Err(Error::Domain(_))
        ));
        assert!(backproject(Vector2::new(1.0, 1.0), -1.0, &k100()).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 3.9, 4, 4).is_ok());
        let json = r#"{"fx":1,"fy":1,"cx":9,"cy":0,"width":4,"height":4}"#;
        assert!(serde_json::from_str::<CameraIntrinsics>(json).is_err());
    }

    #[test]
    fn warp_examples() {
        let k = k100();
        let x = Vector2::new(50.0, 50.0);
        let id = warp_coords(x, 10.0, &PoseSE3::identity(), &k).unwrap();
        assert!(id.valid);
        assert_eq!(id.coords, x);
        assert_eq!(id.z, 10.0);

        // Hand chain: p = (0,0,10), q = (1,0,10), u = 100·1/10 + 50.
        let w = warp_coords(
            x,
            10.0,
            &PoseSE3::from_translation(Vector3::new(1.0, 0.0, 0.0)),
            &k,
        )
        .unwrap();
        assert!(w.valid);
        assert_relative_eq!(w.coords, Vector2::new(60.0, 50.0), epsilon = 1e-12);
        assert_eq!(w.z, 10.0);

        let behind = warp_coords(
            x,
            10.0,
            &PoseSE3::from_translation(Vector3::new(0.0, 0.0, -10.0)),
            &k,
        )
        .unwrap();
        assert!(!behind.valid);
        assert_eq!(behind.z, 0.0);
    }

    #[test]
    fn identity_warp_is_exact_everywhere() {
        let k = CameraIntrinsics::new(57.2, 55.0, 51.5, 15.5, 104, 32).unwrap();
        for row in 0..32 {
            for col in 0..104 {
                let x = Vector2::new(col as f64, row as f64);
                let d = 0.5 + (row * 104 + col) as f64 * 0.01;
                let w = warp_coords(x, d, &PoseSE3::identity(), &k).unwrap();
                assert_relative_eq!(w.coords, x, epsilon = 1e-12);
                assert_relative_eq!(w.z, d, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Twist::zero()), PoseSE3::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z_matches_oracle() {
        let twist = Twist::from([0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0]);
        let pose = se3_exp(&twist);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(pose.rotation, expected, epsilon = 1e-12);

        let twist = Twist::from([0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.3, -0.2, 0.7]);
        let pose = se3_exp(&twist);
        let oracle = expm_oracle(&twist);
        assert_relative_eq!(pose.rotation, oracle.rotation, epsilon = 1e-12);
        assert_relative_eq!(pose.translation, oracle.translation, epsilon = 1e-12);
    }

    #[test]
    fn exp_matches_oracle_across_taylor_switch() {
        for &angle in &[0.0, 1e-9, 1e-5, 0.01, 0.0499, 0.0501, 0.3, 1.5, 2.9] {
            let axis = Vector3::new(0.3, -0.5, 0.81).normalize();
            let twist = Twist::new(axis * angle, Vector3::new(0.4, 0.1, -0.25));
            let pose = se3_exp(&twist);
            let oracle = expm_oracle(&twist);
            assert_relative_eq!(pose.rotation, oracle.rotation, epsilon = 1e-12);
            assert_relative_eq!(pose.translation, oracle.translation, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_exp_round_trip_on_random_twists() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut max_err = 0.0f64;
        for _ in 0..100 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.random_range(0.0..3.0);
            let v = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let twist = Twist::new(axis * angle, v);
            let back = se3_log(&se3_exp(&twist));
            max_err = max_err.max((back.0 - twist.0).abs().max());
        }
        assert!(max_err < 1e-7, "max round-trip error {max_err}");
    }

    #[test]
    fn exp_produces_rotations() {
        let twist = Twist::from([0.7, -1.1, 0.4, 1.0, 2.0, 3.0]);
        let r = se3_exp(&twist).rotation;
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pose_json_is_twelve_numbers() {
        let pose = se3_exp(&Twist::from([0.1, 0.2, 0.3, 1.0, -1.0, 0.5]));
        let json = serde_json::to_string(&pose).unwrap();
        let parsed: Vec<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.len(), 12);
        assert_eq!(parsed[3], pose.translation.x);
        let back: PoseSE3 = serde_json::from_str(&json).unwrap();
        assert_eq!(back, pose);
        assert!(serde_json::from_str::<PoseSE3>("[1,0,0,0]").is_err());
    }

    fn central_diff_exp(twist: &Twist, i: usize, h: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let mut plus = *twist;
        let mut minus = *twist;
        plus.0[i] += h;
        minus.0[i] -= h;
        let (a, b) = (se3_exp(&plus), se3_exp(&minus));
        (
            (a.rotation - b.rotation) / (2.0 * h),
            (a.translation - b.translation) / (2.0 * h),
        )
    }

    #[test]
    fn exp_jacobian_matches_finite_differences() {
        for twist in [
            Twist::zero(),
            Twist::from([1e-4, -2e-4, 3e-5, 0.3, 0.1, -0.2]),
            Twist::from([0.03, 0.02, -0.01, 0.5, 0.0, 1.0]),
            Twist::from([0.6, -0.9, 1.3, -0.4, 0.8, 0.2]),
        ] {
            let (_, jac) = se3_exp_with_jacobian(&twist);
            for i in 0..6 {
                let (dr, dt) = central_diff_exp(&twist, i, 1e-6);
                let analytic_r = if i < 3 {
                    jac.d_rotation[i]
                } else {
                    Matrix3::zeros()
                };
                assert_relative_eq!(analytic_r, dr, epsilon = 1e-8);
                assert_relative_eq!(jac.d_translation.column(i).into_owned(), dt, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn twist_gradient_from_sufficient_statistics() {
        let twist = Twist::from([0.2, -0.1, 0.05, 0.3, 0.0, -0.1]);
        let (_, jac) = se3_exp_with_jacobian(&twist);
        let points = [
            Vector3::new(0.1, 0.2, 3.0),
            Vector3::new(-0.5, 0.4, 2.0),
            Vector3::new(0.9, -0.3, 5.0),
        ];
        let grads = [
            Vector3::new(1.0, -2.0, 0.5),
            Vector3::new(0.3, 0.1, -1.0),
            Vector3::new(-0.7, 0.0, 0.2),
        ];
        let mut direct = Vector6::zeros();
        let mut outer = Matrix3::zeros();
        let mut sum = Vector3::zeros();
        for (p, g) in points.iter().zip(grads.iter()) {
            direct += jac.point_jacobian(p).transpose() * g;
            outer += g * p.transpose();
            sum += g;
        }
        assert_relative_eq!(jac.twist_gradient(&outer, &sum), direct, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn backproject_inverts_projection(
            x in -3.0f64..3.0, y in -3.0f64..3.0, z in 0.05f64..50.0,
        ) {
            let k = CameraIntrinsics::new(320.0, 310.0, 208.0, 64.0, 416, 128).unwrap();
            let p = Vector3::new(x, y, z);
            let uv = k.project(&p, DEFAULT_MIN_Z).unwrap();
            let back = backproject(uv, z, &k).unwrap();
            prop_assert!((back - p).norm() <= 1e-9 * p.norm());
        }

        #[test]
        fn warp_composes_through_3d(
            a in prop::array::uniform6(-0.3f64..0.3),
            b in prop::array::uniform6(-0.3f64..0.3),
            u in 0.0f64..100.0, v in 0.0f64..100.0, d in 1.0f64..20.0,
        ) {
            let k = k100();
            let t1 = se3_exp(&Twist::from(a));
            let t2 = se3_exp(&Twist::from(b));
            let x = Vector2::new(u, v);
            let direct = t2.compose(&t1).transform(&backproject(x, d, &k).unwrap());
            let w1 = warp_coords(x, d, &t1, &k).unwrap();
            prop_assume!(w1.valid);
            // Re-lift the once-warped point with its own source depth, then apply T₂.
            let chained = t2.transform(&backproject(w1.coords, w1.z, &k).unwrap());
            prop_assert!((direct - chained).norm() < 1e-9);
            let w12 = warp_coords(x, d, &t2.compose(&t1), &k).unwrap();
            prop_assert!((w12.z - direct.z).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_jacobian_matches_finite_differences_at_random_configurations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let k = CameraIntrinsics::new(120.0, 115.0, 52.0, 40.0, 104, 80).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        let mut worst = 0.0f64;
        let mut checked = 0;
        while checked < 1000 {
            let mut xi = [0.0; 6];
            for (i, c) in xi.iter_mut().enumerate() {
                *c = if i < 3 {
                    rng.random_range(-0.2..0.2)
                } else {
                    rng.random_range(-0.5..0.5)
                };
            }
            let twist = Twist::from(xi);
            let x = Vector2::new(rng.random_range(0.0..104.0), rng.random_range(0.0..80.0));
            let d = rng.random_range(1.0..10.0);
            let (pose, jac) = se3_exp_with_jacobian(&twist);
            let Some(wj) = warp_coords_jacobian(x, d, &pose, &jac, &k).unwrap() else {
                continue;
            };
            let f = |tw: &Twist, dd: f64| warp_coords(x, dd, &se3_exp(tw), &k).unwrap().coords;
            let nd = (f(&twist, d + h) - f(&twist, d - h)) / (2.0 * h);
            for r in 0..2 {
                worst = worst.max(rel(wj.d_depth[r], nd[r]));
            }
            for i in 0..6 {
                let mut p = twist;
                let mut m = twist;
                p.0[i] += h;
                m.0[i] -= h;
                let n = (f(&p, d) - f(&m, d)) / (2.0 * h);
                for r in 0..2 {
                    // Entries that vanish analytically only carry round-off.
                    if wj.d_twist[(r, i)].abs() < 1e-9 && n[r].abs() < 1e-6 {
                        continue;
                    }
                    worst = worst.max(rel(wj.d_twist[(r, i)], n[r]));
                }
            }
            checked += 1;
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
