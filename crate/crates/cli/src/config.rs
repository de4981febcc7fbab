//! The resolved run configuration: library defaults, overlaid by an optional
//! JSON config file, overlaid by command-line flags. The result is written
//! next to every run's outputs and can be fed back through `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use warpgeo::gradcheck::SuiteConfig;
use warpgeo::metrics::DEFAULT_DEPTH_CAP;
use warpgeo::optim::OptimConfig;
use warpgeo::scene::{Preset, DEFAULT_HEIGHT, DEFAULT_WIDTH};

use crate::args::{Cli, Command, CommonArgs, EvalArgs, GradcheckArgs, LayerOp, LayersArgs, OptimArgs, SceneArgs};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const DEFAULT_OUT_DIR: &str = "warpgeo-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub preset: Preset,
    pub height: usize,
    pub width: usize,
    /// Scene description rendered instead of the preset.
    pub spec: Option<PathBuf>,
    /// Stored sequence used instead of rendering.
    pub dir: Option<PathBuf>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Slanted,
            height: DEFAULT_HEIGHT,
            width: DEFAULT_WIDTH,
            spec: None,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cap: f64,
    pub scale_correct: bool,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub pred_normals: Option<PathBuf>,
    pub gt_normals: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_DEPTH_CAP,
            scale_correct: false,
            pred: None,
            gt: None,
            mask: None,
            pred_normals: None,
            gt_normals: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayersConfig {
    pub op: LayerOp,
    pub depth: Option<PathBuf>,
    pub normals: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub intrinsics: Option<PathBuf>,
}

impl Default for LayersConfig {
    fn default() -> Self {
        Self {
            op: LayerOp::Refine,
            depth: None,
            normals: None,
            image: None,
            intrinsics: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let d = SuiteConfig::default();
        Self {
            height: d.height,
            width: d.width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand the config was resolved for.
    pub command: Option<String>,
    /// Seeds the scene, the optimizer and the gradient check.
    pub seed: u64,
    pub out: PathBuf,
    pub scene: SceneConfig,
    pub optim: OptimConfig,
    /// Initialize the poses from ground truth and keep them fixed.
    pub known_poses: bool,
    pub eval: EvalConfig,
    pub layers: LayersConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            out: PathBuf::from(DEFAULT_OUT_DIR),
            scene: SceneConfig::default(),
            optim: OptimConfig::default(),
            known_poses: false,
            eval: EvalConfig::default(),
            layers: LayersConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Defaults, then the config file, then the flags.
    pub fn resolve(cli: &Cli) -> anyhow::Result<Self> {
        let mut cfg = match &cli.common.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        let name = cli.command.name();
        if let Some(recorded) = &cfg.command {
            if recorded != name {
                bail!("config was resolved for `{recorded}`, not `{name}`");
            }
        }
        cfg.command = Some(name.to_string());
        cfg.apply_common(&cli.common);
        match &cli.command {
            Command::GenScene(scene) => cfg.apply_scene(scene),
            Command::Optimize { scene, optim } | Command::Ablate { scene, optim } => {
                cfg.apply_scene(scene);
                cfg.apply_optim(optim);
            }
            Command::Eval(eval) => cfg.apply_eval(eval),
            Command::Layers(layers) => cfg.apply_layers(layers),
            Command::Gradcheck(gc) => cfg.apply_gradcheck(gc),
        }
        cfg.optim.seed = cfg.seed;
        cfg.absolutize_paths()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_common(&mut self, a: &CommonArgs) {
        set(&mut self.out, a.out.clone());
        set(&mut self.seed, a.seed);
        let obj = &mut self.optim.objective;
        set(&mut obj.scales, a.scales);
        if let Some(alpha) = a.alpha {
            obj.alpha_dn = alpha;
            obj.weights.alpha_smooth = alpha;
        }
        set(&mut obj.weights.lambda_s, a.lambda_s);
        set(&mut obj.weights.lambda_m, a.lambda_m);
        set(&mut obj.weights.lambda_g, a.lambda_g);
        set(&mut obj.weights.lambda_n, a.lambda_n);
        obj.use_dn &= !a.no_dn;
        obj.edge_aware_smooth &= !a.no_edge_smooth;
        obj.edge_aware_dn &= !a.no_edge_dn;
        obj.normal_smooth &= !a.no_normal_smooth;
        set(&mut self.eval.cap, a.cap);
        self.eval.scale_correct |= a.scale_correct;
    }

    fn apply_scene(&mut self, a: &SceneArgs) {
        let s = &mut self.scene;
        set(&mut s.preset, a.preset);
        set(&mut s.height, a.height);
        set(&mut s.width, a.width);
        if a.scene_spec.is_some() {
            s.spec = a.scene_spec.clone();
            s.dir = None;
        }
        if a.scene_dir.is_some() {
            s.dir = a.scene_dir.clone();
            s.spec = None;
        }
    }

    fn apply_optim(&mut self, a: &OptimArgs) {
        let o = &mut self.optim;
        set(&mut o.max_steps, a.steps);
        set(&mut o.lr, a.lr);
        set(&mut o.lr_schedule, a.lr_schedule);
        set(&mut o.pyramid, a.pyramid);
        set(&mut o.init, a.init);
        set(&mut o.stage1_fraction, a.stage1_fraction);
        o.optimize_masks &= !a.fixed_masks;
        if a.known_poses {
            self.known_poses = true;
        }
        if self.known_poses {
            self.optim.optimize_poses = false;
        }
    }

    fn apply_eval(&mut self, a: &EvalArgs) {
        let e = &mut self.eval;
        set_path(&mut e.pred, &a.pred);
        set_path(&mut e.gt, &a.gt);
        set_path(&mut e.mask, &a.mask);
        set_path(&mut e.pred_normals, &a.pred_normals);
        set_path(&mut e.gt_normals, &a.gt_normals);
    }

    fn apply_layers(&mut self, a: &LayersArgs) {
        let l = &mut self.layers;
        set(&mut l.op, a.op);
        set_path(&mut l.depth, &a.depth);
        set_path(&mut l.normals, &a.normals);
        set_path(&mut l.image, &a.image);
        set_path(&mut l.intrinsics, &a.intrinsics);
    }

    fn apply_gradcheck(&mut self, a: &GradcheckArgs) {
        set(&mut self.gradcheck.height, a.height);
        set(&mut self.gradcheck.width, a.width);
    }

    /// Makes input paths independent of the working directory so the
    /// resolved config replays from anywhere.
    fn absolutize_paths(&mut self) -> anyhow::Result<()> {
        let fields = [
            &mut self.scene.spec,
            &mut self.scene.dir,
            &mut self.eval.pred,
            &mut self.eval.gt,
            &mut self.eval.mask,
            &mut self.eval.pred_normals,
            &mut self.eval.gt_normals,
            &mut self.layers.depth,
            &mut self.layers.normals,
            &mut self.layers.image,
            &mut self.layers.intrinsics,
        ];
        for p in fields.into_iter().flatten() {
            *p = std::path::absolute(&*p).with_context(|| format!("resolving path {}", p.display()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.optim.validate()?;
        let o = &self.optim;
        if o.max_steps == 0 {
            bail!("the optimizer needs at least one step");
        }
        if o.objective.scales == 0 {
            bail!("--scales must be at least 1");
        }
        let w = &o.objective.weights;
        let weights = [w.lambda_s, w.lambda_m, w.lambda_g, w.lambda_n, w.alpha_smooth, o.objective.alpha_dn];
        if weights.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            bail!("loss weights and edge sensitivities must be finite and nonnegative");
        }
        if self.scene.height < 3 || self.scene.width < 3 {
            bail!("scenes need at least 3x3 pixels");
        }
        if !(self.eval.cap.is_finite() && self.eval.cap > 0.0) {
            bail!("--cap must be positive");
        }
        Ok(())
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            height: self.gradcheck.height,
            width: self.gradcheck.width,
            seed: self.seed,
            ..SuiteConfig::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Writes the config to `dir/resolved_config.json`.
    pub fn write_to(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json() + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn resolve(argv: &[&str]) -> anyhow::Result<RunConfig> {
        RunConfig::resolve(&Cli::try_parse_from(argv)?)
    }

    #[test]
    fn defaults_match_the_library() {
        let cfg = resolve(&["warpgeo", "optimize"]).unwrap();
        assert_eq!(cfg.optim, OptimConfig::default());
        assert_eq!(cfg.command.as_deref(), Some("optimize"));
        assert_eq!(cfg.eval.cap, 80.0);
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut file_cfg = RunConfig::default();
        file_cfg.optim.lr = 0.5;
        file_cfg.optim.max_steps = 7;
        file_cfg.seed = 9;
        fs::write(&path, file_cfg.to_json()).unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve(&["warpgeo", "optimize", "--config", p, "--lr", "0.25", "--alpha", "1"]).unwrap();
        assert_eq!(cfg.optim.lr, 0.25);
        assert_eq!(cfg.optim.max_steps, 7);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optim.seed, 9);
        assert_eq!(cfg.optim.objective.alpha_dn, 1.0);
        assert_eq!(cfg.optim.objective.weights.alpha_smooth, 1.0);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = resolve(&[
            "warpgeo",
            "ablate",
            "--known-poses",
            "--pyramid",
            "coarse-to-fine:0.25",
            "--lr-schedule",
            "cosine",
            "--init",
            "perturbed:2",
            "--no-edge-dn",
        ])
        .unwrap();
        assert!(!cfg.optim.optimize_poses);
        assert!(!cfg.optim.objective.edge_aware_dn);
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors_are_reported() {
        assert!(resolve(&["warpgeo", "optimize", "--steps", "0"]).is_err());
        assert!(resolve(&["warpgeo", "optimize", "--lambda-s", "-1"]).is_err());
        assert!(resolve(&["warpgeo", "optimize", "--lr", "0"]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, r#"{"optim": {"lr": 1e-3}, "typo": 1}"#).unwrap();
        assert!(resolve(&["warpgeo", "optimize", "--config", path.to_str().unwrap()]).is_err());
        let other = RunConfig {
            command: Some("eval".into()),
            ..RunConfig::default()
        };
        fs::write(&path, other.to_json()).unwrap();
        assert!(resolve(&["warpgeo", "optimize", "--config", path.to_str().unwrap()]).is_err());
    }
}
