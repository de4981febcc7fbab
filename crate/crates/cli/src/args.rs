//! Command-line surface. Every option is optional so that values left unset
//! fall back to the config file and then to the library defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use warpgeo::optim::{InitStrategy, LrSchedule, PyramidSchedule};
use warpgeo::scene::Preset;

#[derive(Debug, Parser)]
#[command(name = "warpgeo", version, about = "Depth, normal and pose recovery by differentiable view synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic three-frame sequence with ground truth.
    GenScene(SceneArgs),
    /// Recover depth, normals, poses and masks by direct optimization.
    Optimize {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Depth and normal metrics for a prediction against ground truth.
    Eval(EvalArgs),
    /// Apply the depth-to-normal and normal-to-depth layers to stored maps.
    Layers(LayersArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the full model and the four ablations and compare them.
    Ablate {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        optim: OptimArgs,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenScene(_) => "gen-scene",
            Command::Optimize { .. } => "optimize",
            Command::Eval(_) => "eval",
            Command::Layers(_) => "layers",
            Command::Gradcheck(_) => "gradcheck",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Options shared by every subcommand.
#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Pyramid levels used by the objective.
    #[arg(long, global = true)]
    pub scales: Option<usize>,

    /// Edge sensitivity shared by the smoothness and depth-normal weights.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,

    #[arg(long = "lambda-s", global = true, value_name = "F")]
    pub lambda_s: Option<f64>,

    #[arg(long = "lambda-m", global = true, value_name = "F")]
    pub lambda_m: Option<f64>,

    #[arg(long = "lambda-g", global = true, value_name = "F")]
    pub lambda_g: Option<f64>,

    #[arg(long = "lambda-n", global = true, value_name = "F")]
    pub lambda_n: Option<f64>,

    /// Warp with the raw depth instead of the normal-to-depth refinement.
    #[arg(long, global = true)]
    pub no_dn: bool,

    /// Drop the image-gradient weighting of the depth smoothness.
    #[arg(long, global = true)]
    pub no_edge_smooth: bool,

    /// Drop the image-gradient weighting of the depth-normal layers.
    #[arg(long, global = true)]
    pub no_edge_dn: bool,

    /// Drop the normal smoothness term.
    #[arg(long, global = true)]
    pub no_normal_smooth: bool,

    /// Depth cap for evaluation.
    #[arg(long, global = true)]
    pub cap: Option<f64>,

    /// Median-scale the prediction before evaluation.
    #[arg(long, global = true)]
    pub scale_correct: bool,

    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "WARPGEO_THREADS")]
    pub threads: Option<usize>,
}

/// Where the frames come from.
#[derive(Debug, Default, Args)]
pub struct SceneArgs {
    /// Built-in synthetic scene.
    #[arg(long)]
    pub preset: Option<Preset>,

    #[arg(long)]
    pub height: Option<usize>,

    #[arg(long)]
    pub width: Option<usize>,

    /// JSON scene description to render instead of a preset.
    #[arg(long, value_name = "PATH", conflicts_with = "scene_dir")]
    pub scene_spec: Option<PathBuf>,

    /// Directory holding a sequence.json and its frames.
    #[arg(long, value_name = "DIR")]
    pub scene_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    /// `constant` or `cosine[:FINAL_FRACTION]`.
    #[arg(long, value_parser = parse_lr_schedule)]
    pub lr_schedule: Option<LrSchedule>,

    /// `joint` or `coarse-to-fine[:PHASE_FRACTION]`.
    #[arg(long, value_parser = parse_pyramid)]
    pub pyramid: Option<PyramidSchedule>,

    /// `constant[:D]`, `gt` or `perturbed:S`.
    #[arg(long)]
    pub init: Option<InitStrategy>,

    /// Fraction of the steps spent before the gradient and normal terms switch on.
    #[arg(long)]
    pub stage1_fraction: Option<f64>,

    /// Start from the ground-truth poses and keep them fixed.
    #[arg(long)]
    pub known_poses: bool,

    /// Keep the explainability masks at their initial value.
    #[arg(long)]
    pub fixed_masks: bool,
}

#[derive(Debug, Default, Args)]
pub struct EvalArgs {
    /// Predicted depth (PFM, or 16-bit PNG scaled by 256).
    #[arg(long, value_name = "PATH")]
    pub pred: Option<PathBuf>,

    /// Ground-truth depth; zero or non-finite pixels are ignored.
    #[arg(long, value_name = "PATH")]
    pub gt: Option<PathBuf>,

    /// Evaluation mask; nonzero pixels are evaluated.
    #[arg(long, value_name = "PATH")]
    pub mask: Option<PathBuf>,

    #[arg(long, value_name = "PATH")]
    pub pred_normals: Option<PathBuf>,

    #[arg(long, value_name = "PATH")]
    pub gt_normals: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerOp {
    DepthToNormal,
    NormalToDepth,
    /// Depth to normals and back to refined depth.
    Refine,
}

#[derive(Debug, Default, Args)]
pub struct LayersArgs {
    #[arg(long, value_enum)]
    pub op: Option<LayerOp>,

    #[arg(long, value_name = "PATH")]
    pub depth: Option<PathBuf>,

    /// Normals for `normal-to-depth`.
    #[arg(long, value_name = "PATH")]
    pub normals: Option<PathBuf>,

    /// Image for the edge-aware weights; uniform weights without it.
    #[arg(long, value_name = "PATH")]
    pub image: Option<PathBuf>,

    /// Intrinsics JSON, or a sequence.json carrying them.
    #[arg(long, value_name = "PATH")]
    pub intrinsics: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub height: Option<usize>,

    #[arg(long)]
    pub width: Option<usize>,
}

fn split_arg(s: &str) -> (&str, Option<f64>, Option<&str>) {
    match s.split_once(':') {
        Some((id, arg)) => (id, arg.parse().ok(), Some(arg)),
        None => (s, None, None),
    }
}

pub fn parse_lr_schedule(s: &str) -> Result<LrSchedule, String> {
    match split_arg(s) {
        ("constant", _, None) => Ok(LrSchedule::Constant),
        ("cosine", None, None) => Ok(LrSchedule::Cosine { final_fraction: 0.01 }),
        ("cosine", Some(f), _) if (0.0..=1.0).contains(&f) => Ok(LrSchedule::Cosine { final_fraction: f }),
        _ => Err(format!("expected `constant` or `cosine[:F]` with F in [0, 1], got {s:?}")),
    }
}

pub fn parse_pyramid(s: &str) -> Result<PyramidSchedule, String> {
    match split_arg(s) {
        ("joint", _, None) => Ok(PyramidSchedule::Joint),
        ("coarse-to-fine", None, None) => Ok(PyramidSchedule::CoarseToFine { phase_fraction: 0.25 }),
        ("coarse-to-fine", Some(f), _) if f > 0.0 && f <= 1.0 => {
            Ok(PyramidSchedule::CoarseToFine { phase_fraction: f })
        }
        _ => Err(format!("expected `joint` or `coarse-to-fine[:F]` with F in (0, 1], got {s:?}")),
    }
}
