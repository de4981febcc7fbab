//! Input sequences: rendered in memory from a preset or scene description,
//! or read from a directory written by `gen-scene` (or assembled by hand).
//!
//! A sequence directory holds a `sequence.json`:
//!
//! ```json
//! {
//!   "intrinsics": { "fx": 52.0, "fy": 52.0, "cx": 51.5, "cy": 15.5, "width": 104, "height": 32 },
//!   "target": "frame_1.pfm",
//!   "sources": ["frame_0.pfm", "frame_2.pfm"],
//!   "poses": [[1, 0, 0, 0.1, 0, 1, 0, 0, 0, 0, 1, 0], [1, 0, 0, -0.1, 0, 1, 0, 0, 0, 0, 1, 0]],
//!   "depth": "depth.pfm",
//!   "normals": "normals.pfm"
//! }
//! ```
//!
//! Poses map target-camera points into each source camera (row-major 3×4).
//! `poses`, `depth` and `normals` are optional ground truth; file names are
//! relative to the directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use warpgeo::io;
use warpgeo::objective::Frames;
use warpgeo::scene::{make_sequence, FrameTriplet, SceneSpec};
use warpgeo::{CameraIntrinsics, PoseSE3, ScalarField, ValidMask, VectorField};

use crate::config::SceneConfig;

pub const SEQUENCE_FILE: &str = "sequence.json";
pub const SCENE_SPEC_FILE: &str = "scene.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceFile {
    pub intrinsics: CameraIntrinsics,
    pub target: PathBuf,
    pub sources: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<Vec<PoseSE3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<PathBuf>,
}

/// Frames plus whatever ground truth is known about them.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Frames,
    pub poses: Option<Vec<PoseSE3>>,
    pub depth: Option<(ScalarField, ValidMask)>,
    pub normals: Option<VectorField>,
}

impl Sequence {
    pub fn from_triplet(t: &FrameTriplet) -> Self {
        let (h, w) = t.depth.shape();
        Self {
            frames: t.to_frames(),
            poses: Some(t.poses.to_vec()),
            depth: Some((t.depth.clone(), ValidMask::filled(h, w, true))),
            normals: Some(t.normals.clone()),
        }
    }

    pub fn load_dir(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(SEQUENCE_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let file: SequenceFile =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let k = file.intrinsics;
        let image = |p: &Path| -> anyhow::Result<_> {
            let img = io::load_image(dir.join(p)).with_context(|| format!("loading frame {}", p.display()))?;
            check_shape(&k, img.shape(), p)?;
            Ok(img)
        };
        let target = image(&file.target)?;
        let sources = file.sources.iter().map(|p| image(p)).collect::<anyhow::Result<Vec<_>>>()?;
        if sources.is_empty() {
            bail!("{} lists no source frames", path.display());
        }
        if let Some(poses) = &file.poses {
            if poses.len() != sources.len() {
                bail!("{} has {} poses for {} sources", path.display(), poses.len(), sources.len());
            }
        }
        let depth = match &file.depth {
            Some(p) => {
                let d = io::load_depth(dir.join(p)).with_context(|| format!("loading depth {}", p.display()))?;
                check_shape(&k, d.0.shape(), p)?;
                Some(d)
            }
            None => None,
        };
        let normals = match &file.normals {
            Some(p) => {
                let n = io::load_normals(dir.join(p)).with_context(|| format!("loading normals {}", p.display()))?;
                check_shape(&k, n.shape(), p)?;
                Some(n)
            }
            None => None,
        };
        Ok(Self {
            frames: Frames {
                target,
                sources,
                intrinsics: k,
            },
            poses: file.poses,
            depth,
            normals,
        })
    }
}

fn check_shape(k: &CameraIntrinsics, shape: (usize, usize), file: &Path) -> anyhow::Result<()> {
    if shape != (k.height, k.width) {
        bail!(
            "{} is {}x{} but the intrinsics describe {}x{}",
            file.display(),
            shape.0,
            shape.1,
            k.height,
            k.width
        );
    }
    Ok(())
}

/// The scene description a config selects, when it is synthetic.
pub fn scene_spec(cfg: &SceneConfig, seed: u64) -> anyhow::Result<SceneSpec> {
    match &cfg.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let spec: SceneSpec =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            spec.validate()?;
            Ok(spec)
        }
        None => Ok(cfg.preset.spec(cfg.height, cfg.width, seed)?),
    }
}

/// Loads the sequence a config points at.
pub fn load(cfg: &SceneConfig, seed: u64) -> anyhow::Result<Sequence> {
    match &cfg.dir {
        Some(dir) => Sequence::load_dir(dir),
        None => Ok(Sequence::from_triplet(&make_sequence(&scene_spec(cfg, seed)?)?)),
    }
}

/// Writes a rendered triplet, its ground truth and previews into `dir`.
pub fn write_dir(triplet: &FrameTriplet, spec: &SceneSpec, dir: &Path) -> anyhow::Result<()> {
    let names: Vec<PathBuf> = (0..3).map(|i| PathBuf::from(format!("frame_{i}.pfm"))).collect();
    for (i, (frame, name)) in triplet.frames.iter().zip(&names).enumerate() {
        io::Pfm::from_image(frame)?.save(dir.join(name))?;
        io::save_png(dir.join(format!("frame_{i}.png")), &io::image_rgb(frame))?;
    }
    io::save_scalar_pfm(dir.join("depth.pfm"), &triplet.depth)?;
    io::save_png(dir.join("depth.png"), &io::depth_heatmap(&triplet.depth, None))?;
    io::save_vector_pfm(dir.join("normals.pfm"), &triplet.normals)?;
    io::save_png(dir.join("normals.png"), &io::normal_rgb(&triplet.normals))?;
    let t = FrameTriplet::TARGET_INDEX;
    let file = SequenceFile {
        intrinsics: triplet.intrinsics,
        target: names[t].clone(),
        sources: names.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, n)| n.clone()).collect(),
        poses: Some(triplet.poses.to_vec()),
        depth: Some("depth.pfm".into()),
        normals: Some("normals.pfm".into()),
    };
    write_json(&dir.join(SEQUENCE_FILE), &file)?;
    write_json(&dir.join(SCENE_SPEC_FILE), spec)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
