//! Synthetic piecewise-planar scenes with exact depth, normals and poses.
//!
//! The world frame coincides with the target camera unless the spec says
//! otherwise; every pose here maps world points into a camera frame.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::error::{Error, Result};
use crate::grid::{Grid, Image, ScalarField, VectorField};
use crate::objective::Frames;

/// Valid depth range of a rendered target view.
pub const MIN_SCENE_DEPTH: f64 = 0.1;
pub const MAX_SCENE_DEPTH: f64 = 80.0;

/// Default sequence resolution (rows × columns).
pub const DEFAULT_HEIGHT: usize = 128;
pub const DEFAULT_WIDTH: usize = 416;

/// One sinusoidal component `a_c · sin(k·X + φ_c)` of a texture, per channel `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// World-space wave vector (radians per scene unit).
    pub k: [f64; 3],
    pub amplitude: [f64; 3],
    pub phase: [f64; 3],
}

/// RGB texture as a function of the world point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Constant { value: [f64; 3] },
    Sinusoids { base: [f64; 3], waves: Vec<Wave> },
}

impl Texture {
    pub fn eval(&self, x: &Vector3<f64>) -> [f64; 3] {
        match self {
            Texture::Constant { value } => *value,
            Texture::Sinusoids { base, waves } => {
                let mut out = *base;
                for w in waves {
                    let arg = Vector3::from(w.k).dot(x);
                    for c in 0..3 {
                        out[c] += w.amplitude[c] * (arg + w.phase[c]).sin();
                    }
                }
                out
            }
        }
    }
}

/// Axis-aligned world box limiting where a plane exists.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Extent {
    fn contains(&self, x: &Vector3<f64>) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] && x[i] <= self.max[i])
    }
}

/// The plane `{X : normal · X = offset}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
    pub texture: Texture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Extent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub planes: Vec<Plane>,
    pub camera: CameraIntrinsics,
    /// World-to-camera pose of the target view.
    pub target_pose: PoseSE3,
    /// World-to-camera poses of the source views.
    pub source_poses: Vec<PoseSE3>,
    /// Standard deviation of additive Gaussian image noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Ground truth for the target view plus all rendered images.
#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub target: Image,
    pub sources: Vec<Image>,
    pub depth: ScalarField,
    pub normals: VectorField,
    /// Index of the plane seen by each target pixel.
    pub labels: Grid<usize>,
    /// Target-to-source relative poses.
    pub relative_poses: Vec<PoseSE3>,
    pub intrinsics: CameraIntrinsics,
}

/// `(source₁, target, source₂)` with ground truth for the middle frame.
#[derive(Clone, Debug)]
pub struct FrameTriplet {
    pub frames: [Image; 3],
    /// Target-to-source poses for `frames[0]` and `frames[2]`.
    pub poses: [PoseSE3; 2],
    pub depth: ScalarField,
    pub normals: VectorField,
    pub labels: Grid<usize>,
    pub intrinsics: CameraIntrinsics,
}

impl FrameTriplet {
    pub const TARGET_INDEX: usize = 1;

    pub fn target(&self) -> &Image {
        &self.frames[Self::TARGET_INDEX]
    }

    /// Target plus both sources, in the form the objective consumes.
    pub fn to_frames(&self) -> Frames {
        Frames {
            target: self.frames[1].clone(),
            sources: vec![self.frames[0].clone(), self.frames[2].clone()],
            intrinsics: self.intrinsics,
        }
    }
}

struct View {
    image: Image,
    depth: ScalarField,
    normals: VectorField,
    labels: Grid<usize>,
}

struct Hit {
    plane: usize,
    depth: f64,
    normal: Vector3<f64>,
    color: [f64; 3],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.planes.is_empty() {
            return Err(Error::InvalidScene("scene has no planes".into()));
        }
        for (i, p) in self.planes.iter().enumerate() {
            let n = Vector3::from(p.normal);
            if !((n.norm() - 1.0).abs() < 1e-9) || !p.offset.is_finite() {
                return Err(Error::InvalidScene(format!("plane {i} normal must be unit length")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidScene("noise must be a finite non-negative value".into()));
        }
        Ok(())
    }

    /// Nearest plane hit along the ray of pixel `(u, v)` of a camera with pose `pose`.
    fn trace(&self, pose: &PoseSE3, pose_inv: &PoseSE3, u: f64, v: f64) -> Option<Hit> {
        let ray_c = self.camera.ray(u, v);
        let origin = pose_inv.translation;
        let dir = pose_inv.rotation * ray_c;
        let mut best: Option<(f64, usize)> = None;
        for (i, plane) in self.planes.iter().enumerate() {
            let n = Vector3::from(plane.normal);
            let denom = n.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            // The ray has unit z in camera coordinates, so its parameter is the depth.
            let t = (plane.offset - n.dot(&origin)) / denom;
            if !(t > 0.0) || best.is_some_and(|(bt, _)| t >= bt) {
                continue;
            }
            if let Some(ext) = &plane.extent {
                if !ext.contains(&(origin + dir * t)) {
                    continue;
                }
            }
            best = Some((t, i));
        }
        let (t, i) = best?;
        let plane = &self.planes[i];
        let world = origin + dir * t;
        let mut normal = pose.rotation * Vector3::from(plane.normal);
        if normal.dot(&ray_c) > 0.0 {
            normal = -normal;
        }
        Some(Hit {
            plane: i,
            depth: t,
            normal,
            color: plane.texture.eval(&world),
        })
    }

    fn render_view(&self, pose: &PoseSE3, require_hits: bool) -> Result<View> {
        let (h, w) = (self.camera.height, self.camera.width);
        let pose_inv = pose.inverse();
        let rows: Vec<Vec<Option<Hit>>> = (0..h)
            .into_par_iter()
            .map(|r| (0..w).map(|c| self.trace(pose, &pose_inv, c as f64, r as f64)).collect())
            .collect();
        let mut channels = vec![ScalarField::zeros(h, w); 3];
        let mut depth = ScalarField::zeros(h, w);
        let mut normals = VectorField::zeros(h, w);
        let mut labels = Grid::filled(h, w, usize::MAX);
        for (r, row) in rows.iter().enumerate() {
            for (c, hit) in row.iter().enumerate() {
                match hit {
                    Some(hit) => {
                        if require_hits && !(hit.depth > MIN_SCENE_DEPTH && hit.depth <= MAX_SCENE_DEPTH) {
                            return Err(Error::InvalidScene(format!(
                                "pixel ({r}, {c}) depth {} outside ({MIN_SCENE_DEPTH}, {MAX_SCENE_DEPTH}]",
                                hit.depth
                            )));
                        }
                        for (ch, v) in channels.iter_mut().zip(hit.color) {
                            ch[(r, c)] = v;
                        }
                        depth[(r, c)] = hit.depth;
                        normals[(r, c)] = hit.normal;
                        labels[(r, c)] = hit.plane;
                    }
                    None if require_hits => {
                        return Err(Error::InvalidScene(format!("ray of pixel ({r}, {c}) misses every plane")));
                    }
                    // Source views may see past the scene; those pixels stay black.
                    None => {}
                }
            }
        }
        Ok(View {
            image: Image::new(channels)?,
            depth,
            normals,
            labels,
        })
    }

    /// Renders the target and all source views.
    pub fn render(&self) -> Result<RenderedScene> {
        self.validate()?;
        let View {
            image: mut target,
            depth,
            normals,
            labels,
        } = self.render_view(&self.target_pose, true)?;
        let mut sources = self
            .source_poses
            .iter()
            .map(|p| self.render_view(p, false).map(|v| v.image))
            .collect::<Result<Vec<_>>>()?;
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let normal = Normal::new(0.0, self.noise).map_err(|e| Error::InvalidScene(e.to_string()))?;
            for img in std::iter::once(&mut target).chain(sources.iter_mut()) {
                *img = add_noise(img, &normal, &mut rng)?;
            }
        }
        let target_inv = self.target_pose.inverse();
        Ok(RenderedScene {
            target,
            sources,
            depth,
            normals,
            labels,
            relative_poses: self.source_poses.iter().map(|p| p.compose(&target_inv)).collect(),
            intrinsics: self.camera,
        })
    }
}

fn add_noise(img: &Image, dist: &Normal<f64>, rng: &mut ChaCha8Rng) -> Result<Image> {
    let channels = img
        .channels()
        .iter()
        .map(|ch| ch.map(|&v| v + dist.sample(rng)))
        .collect();
    Image::new(channels)
}

/// Renders `(source₁, target, source₂)`.
///
/// The first two source poses are used. With a single source the second is
/// its mirror about the target (inverse relative motion); with none, both
/// sources coincide with the target.
pub fn make_sequence(spec: &SceneSpec) -> Result<FrameTriplet> {
    let mut spec = spec.clone();
    match spec.source_poses.len() {
        0 => spec.source_poses = vec![spec.target_pose; 2],
        1 => {
            let rel = spec.source_poses[0].compose(&spec.target_pose.inverse());
            spec.source_poses.push(rel.inverse().compose(&spec.target_pose));
        }
        _ => spec.source_poses.truncate(2),
    }
    let scene = spec.render()?;
    let [s1, s2]: [Image; 2] = scene.sources.try_into().expect("two sources");
    let [p1, p2]: [PoseSE3; 2] = scene.relative_poses.try_into().expect("two poses");
    Ok(FrameTriplet {
        frames: [s1, scene.target, s2],
        poses: [p1, p2],
        depth: scene.depth,
        normals: scene.normals,
        labels: scene.labels,
        intrinsics: scene.intrinsics,
    })
}

/// Built-in scene families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// A single fronto-parallel plane at depth 3.
    Fronto,
    /// A single plane tilted about both image axes.
    Slanted,
    /// The slanted plane with an almost constant texture.
    LowTexture,
    /// Two fronto-parallel planes meeting at a depth and colour edge.
    Edge,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Fronto, Preset::Slanted, Preset::LowTexture, Preset::Edge];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Fronto => "fronto",
            Preset::Slanted => "slanted",
            Preset::LowTexture => "low_texture",
            Preset::Edge => "edge",
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fronto" => Ok(Preset::Fronto),
            "slanted" => Ok(Preset::Slanted),
            "low_texture" | "low-texture" => Ok(Preset::LowTexture),
            "edge" => Ok(Preset::Edge),
            other => Err(Error::InvalidInput(format!("unknown scene preset {other:?}"))),
        }
    }
}

/// Reference depth of the presets.
const PRESET_DEPTH: f64 = 3.0;
/// Highest texture frequency at the reference depth, in radians per pixel.
/// Keeps bilinear interpolation error well below 1e-3 on average.
const MAX_PIXEL_FREQ: f64 = 0.25;
const MIN_PIXEL_FREQ: f64 = 0.08;

/// Intrinsics used by the presets: square pixels, principal point at the centre.
pub fn preset_camera(height: usize, width: usize) -> Result<CameraIntrinsics> {
    let f = 0.55 * width as f64;
    CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
}

/// In-plane orthonormal basis of a unit normal.
fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = n.cross(&helper).normalize();
    (t1, n.cross(&t1))
}

/// Random sinusoidal texture living in the plane with normal `n`.
const WAVES_PER_TEXTURE: usize = 4;

fn random_texture(rng: &mut ChaCha8Rng, n: &Vector3<f64>, base: [f64; 3], amplitude: f64, fx: f64) -> Texture {
    let (t1, t2) = tangent_basis(n);
    // Orientations are stratified over half a turn so no direction is left
    // without texture.
    let waves = (0..WAVES_PER_TEXTURE)
        .map(|i| {
            let angle = (i as f64 + rng.random_range(0.2..0.8)) * std::f64::consts::PI / WAVES_PER_TEXTURE as f64;
            let px_freq: f64 = rng.random_range(MIN_PIXEL_FREQ..MAX_PIXEL_FREQ);
            let mag = px_freq * fx / PRESET_DEPTH;
            let k = (t1 * angle.cos() + t2 * angle.sin()) * mag;
            let mut amp = [0.0; 3];
            let mut phase = [0.0; 3];
            for c in 0..3 {
                amp[c] = amplitude * rng.random_range(0.6..1.0);
                phase[c] = rng.random_range(0.0..std::f64::consts::TAU);
            }
            Wave {
                k: [k.x, k.y, k.z],
                amplitude: amp,
                phase,
            }
        })
        .collect();
    Texture::Sinusoids { base, waves }
}

fn plane_through(normal: Vector3<f64>, point: Vector3<f64>, texture: Texture, extent: Option<Extent>) -> Plane {
    let n = normal.normalize();
    Plane {
        normal: [n.x, n.y, n.z],
        offset: n.dot(&point),
        texture,
        extent,
    }
}

/// Source poses translated sideways (and slightly forward) by 5% of the reference depth.
fn preset_sources() -> Vec<PoseSE3> {
    let t = 0.05 * PRESET_DEPTH * Vector3::new(1.0, -0.2, 0.3).normalize();
    // World-to-camera translation is minus the camera centre.
    vec![PoseSE3::from_translation(-t), PoseSE3::from_translation(t)]
}

impl Preset {
    pub fn spec(&self, height: usize, width: usize, seed: u64) -> Result<SceneSpec> {
        let camera = preset_camera(height, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = Vector3::new(0.0, 0.0, PRESET_DEPTH);
        let slanted = Vector3::new(0.25, 0.45, -1.0).normalize();
        let planes = match self {
            Preset::Fronto => {
                let n = Vector3::new(0.0, 0.0, -1.0);
                vec![plane_through(n, centre, random_texture(&mut rng, &n, [0.5; 3], 0.08, camera.fx), None)]
            }
            Preset::Slanted => vec![plane_through(
                slanted,
                centre,
                random_texture(&mut rng, &slanted, [0.5; 3], 0.08, camera.fx),
                None,
            )],
            Preset::LowTexture => vec![plane_through(
                slanted,
                centre,
                random_texture(&mut rng, &slanted, [0.5; 3], 0.002, camera.fx),
                None,
            )],
            Preset::Edge => {
                let n = Vector3::new(0.0, 0.0, -1.0);
                let near = random_texture(&mut rng, &n, [0.25; 3], 0.05, camera.fx);
                let far = random_texture(&mut rng, &n, [0.75; 3], 0.05, camera.fx);
                // Finite stand-in for an unbounded side, so specs stay valid JSON.
                let inf = 1e6;
                vec![
                    plane_through(
                        n,
                        Vector3::new(0.0, 0.0, 0.8 * PRESET_DEPTH),
                        near,
                        Some(Extent {
                            min: [-inf, -inf, -inf],
                            max: [0.0, inf, inf],
                        }),
                    ),
                    plane_through(n, Vector3::new(0.0, 0.0, 1.3 * PRESET_DEPTH), far, None),
                ]
            }
        };
        Ok(SceneSpec {
            planes,
            camera,
            target_pose: PoseSE3::identity(),
            source_poses: preset_sources(),
            noise: 0.0,
            seed,
        })
    }
}

/// Ground-truth orthogonality residual `max |N · (φ_j − φ_i)| / ‖φ_j − φ_i‖`
/// over 4-neighbour pairs lying on the same plane.
pub fn orthogonality_residual(
    depth: &ScalarField,
    normals: &VectorField,
    labels: &Grid<usize>,
    k: &CameraIntrinsics,
) -> f64 {
    let (h, w) = depth.shape();
    let point = |r: usize, c: usize| k.ray(c as f64, r as f64) * depth[(r, c)];
    let mut worst: f64 = 0.0;
    for r in 0..h {
        for c in 0..w {
            for (dr, dc) in [(0usize, 1usize), (1, 0)] {
                let (r2, c2) = (r + dr, c + dc);
                if r2 >= h || c2 >= w || labels[(r, c)] != labels[(r2, c2)] {
                    continue;
                }
                let d = point(r2, c2) - point(r, c);
                if d.norm() > 0.0 {
                    worst = worst.max(normals[(r, c)].dot(&d).abs() / d.norm());
                }
            }
        }
    }
    worst
}

/// Constant texture at a given grey level; handy for tests and ambiguity probes.
pub fn grey(level: f64) -> Texture {
    Texture::Constant { value: [level; 3] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::{depth_to_normal, EdgeWeights};
    use crate::losses::photometric_loss;
    use crate::objective::synthesize_view;

    fn fronto_spec(depth: f64, sources: Vec<PoseSE3>) -> SceneSpec {
        let camera = CameraIntrinsics::new(10.0, 10.0, 7.5, 5.5, 16, 12).unwrap();
        let n = Vector3::new(0.0, 0.0, -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        SceneSpec {
            planes: vec![plane_through(n, Vector3::new(0.0, 0.0, depth), random_texture(&mut rng, &n, [0.5; 3], 0.1, 10.0), None)],
            camera,
            target_pose: PoseSE3::identity(),
            source_poses: sources,
            noise: 0.0,
            seed: 0,
        }
    }

    fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn fronto_plane_with_identity_source() {
        let scene = fronto_spec(5.0, vec![PoseSE3::identity()]).render().unwrap();
        assert_eq!(scene.sources[0], scene.target);
        assert!(scene.depth.iter().all(|&d| (d - 5.0).abs() < 1e-12));
        assert!(scene.normals.iter().all(|n| *n == Vector3::new(0.0, 0.0, -1.0)));
    }

    #[test]
    fn lateral_translation_shifts_by_focal_times_baseline_over_depth() {
        // fx · t_x / d = 10 · 1 / 5 = 2 pixels.
        let pose = PoseSE3::from_translation(Vector3::new(-1.0, 0.0, 0.0));
        let scene = fronto_spec(5.0, vec![pose]).render().unwrap();
        for r in 0..12 {
            for c in 0..14 {
                for ch in 0..3 {
                    let t = scene.target.channel(ch)[(r, c + 2)];
                    let s = scene.sources[0].channel(ch)[(r, c)];
                    assert!((t - s).abs() < 1e-12, "({r}, {c}): {t} vs {s}");
                }
            }
        }
    }

    #[test]
    fn slanted_plane_normals_recovered_by_layer() {
        let theta: f64 = 0.4;
        let camera = CameraIntrinsics::new(20.0, 20.0, 9.5, 9.5, 20, 20).unwrap();
        let n = Vector3::new(0.0, theta.sin(), -theta.cos());
        let spec = SceneSpec {
            planes: vec![plane_through(n, Vector3::new(0.0, 0.0, 4.0), grey(0.5), None)],
            camera,
            target_pose: PoseSE3::identity(),
            source_poses: vec![],
            noise: 0.0,
            seed: 0,
        };
        let scene = spec.render().unwrap();
        let nm = depth_to_normal(&scene.depth, &camera, &EdgeWeights::uniform(20, 20)).unwrap();
        for r in 1..19 {
            for c in 1..19 {
                assert!(angle_deg(&nm.normals[(r, c)], &n) < 0.1);
                assert!(angle_deg(&scene.normals[(r, c)], &n) < 1e-9);
            }
        }
    }

    #[test]
    fn default_sequence_has_three_frames_at_default_resolution() {
        let spec = Preset::Slanted.spec(DEFAULT_HEIGHT, DEFAULT_WIDTH, 1).unwrap();
        let seq = make_sequence(&spec).unwrap();
        assert_eq!(seq.frames.len(), 3);
        for f in &seq.frames {
            assert_eq!(f.shape(), (128, 416));
        }
    }

    #[test]
    fn single_source_is_mirrored() {
        let pose = PoseSE3::from_translation(Vector3::new(-0.2, 0.0, 0.0));
        let seq = make_sequence(&fronto_spec(5.0, vec![pose])).unwrap();
        assert!((seq.poses[1].translation - Vector3::new(0.2, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_motion_triplet_has_zero_photometric_loss() {
        let seq = make_sequence(&fronto_spec(5.0, vec![])).unwrap();
        let k = seq.intrinsics;
        let warped: Vec<_> = [&seq.frames[0], &seq.frames[2]]
            .iter()
            .zip(&seq.poses)
            .map(|(img, pose)| synthesize_view(&seq.depth, pose, &k, img).unwrap())
            .collect();
        let masks = vec![ScalarField::filled(12, 16, 1.0); 2];
        let loss = photometric_loss(seq.target(), &warped, &masks).unwrap();
        assert_eq!(loss.term.sum, 0.0);
    }

    fn warp_mae(preset: Preset, h: usize, w: usize, seed: u64) -> f64 {
        let seq = make_sequence(&preset.spec(h, w, seed).unwrap()).unwrap();
        let mut err = 0.0;
        let mut n = 0usize;
        for (img, pose) in [&seq.frames[0], &seq.frames[2]].iter().zip(&seq.poses) {
            let out = synthesize_view(&seq.depth, pose, &seq.intrinsics, img).unwrap();
            for i in 0..h * w {
                if !out.valid.as_slice()[i] {
                    continue;
                }
                for c in 0..3 {
                    err += (out.image.channel(c).as_slice()[i] - seq.target().channel(c).as_slice()[i]).abs();
                    n += 1;
                }
            }
        }
        err / n as f64
    }

    #[test]
    fn ground_truth_warp_reproduces_target() {
        for preset in [Preset::Fronto, Preset::Slanted, Preset::LowTexture] {
            for (h, w) in [(32, 104), (128, 416)] {
                for seed in 0..3 {
                    let mae = warp_mae(preset, h, w, seed);
                    assert!(mae < 1e-3, "{preset:?} {h}x{w} seed {seed}: {mae}");
                }
            }
        }
    }

    #[test]
    fn ground_truth_satisfies_orthogonality() {
        for preset in [Preset::Fronto, Preset::Slanted, Preset::Edge] {
            let seq = make_sequence(&preset.spec(32, 104, 7).unwrap()).unwrap();
            let res = orthogonality_residual(&seq.depth, &seq.normals, &seq.labels, &seq.intrinsics);
            assert!(res < 1e-9, "{preset:?}: {res}");
        }
    }

    #[test]
    fn edge_preset_has_two_depths() {
        let seq = make_sequence(&Preset::Edge.spec(32, 104, 0).unwrap()).unwrap();
        assert!((seq.depth[(16, 10)] - 2.4).abs() < 1e-9);
        assert!((seq.depth[(16, 90)] - 3.9).abs() < 1e-9);
    }

    #[test]
    fn ray_missing_every_plane_is_rejected() {
        let mut spec = fronto_spec(5.0, vec![]);
        spec.planes[0].extent = Some(Extent {
            min: [-0.1, -10.0, -10.0],
            max: [10.0, 10.0, 10.0],
        });
        assert!(matches!(spec.render(), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn depth_beyond_cap_is_rejected() {
        assert!(matches!(fronto_spec(100.0, vec![]).render(), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn noise_is_seeded() {
        let mut spec = fronto_spec(5.0, vec![]);
        spec.noise = 0.01;
        spec.seed = 9;
        let a = spec.render().unwrap();
        let b = spec.render().unwrap();
        assert_eq!(a.target, b.target);
        spec.seed = 10;
        assert_ne!(spec.render().unwrap().target, a.target);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = Preset::Edge.spec(32, 104, 5).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: SceneSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
