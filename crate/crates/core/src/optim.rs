//! Direct optimization of depth, poses and masks with Adam, in two stages.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::camera::{PoseSE3, Twist};
use crate::consistency::NormalMap;
use crate::error::{check_shape, Error, Result};
use crate::grid::ScalarField;
use crate::objective::{ActiveTerms, Frames, LossReport, LossTerms, Objective, ObjectiveConfig, SceneState};

/// How the depth is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitStrategy {
    /// Constant depth, 1 scene unit by default.
    Constant(f64),
    GroundTruth,
    /// Ground truth multiplied by a scale.
    Perturbed(f64),
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::Constant(1.0)
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitStrategy::Constant(v) => write!(f, "constant:{v}"),
            InitStrategy::GroundTruth => write!(f, "gt"),
            InitStrategy::Perturbed(s) => write!(f, "perturbed:{s}"),
        }
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (id, arg) = match s.split_once(':') {
            Some((id, arg)) => (id, Some(arg)),
            None => (s, None),
        };
        let num = |arg: Option<&str>, default: Option<f64>| -> Result<f64> {
            let v = match arg {
                Some(a) => a
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("bad number {a:?} in init strategy {s:?}")))?,
                None => default.ok_or_else(|| Error::InvalidInput(format!("init strategy {s:?} needs a value")))?,
            };
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("init strategy {s:?} needs a positive value")));
            }
            Ok(v)
        };
        match id {
            "constant" => Ok(InitStrategy::Constant(num(arg, Some(1.0))?)),
            "gt" | "ground_truth" if arg.is_none() => Ok(InitStrategy::GroundTruth),
            "perturbed" => Ok(InitStrategy::Perturbed(num(arg, None)?)),
            _ => Err(Error::InvalidInput(format!("unknown init strategy {s:?}"))),
        }
    }
}

impl Serialize for InitStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InitStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Learning-rate schedule over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `lr · final_fraction` at the last step.
    Cosine { final_fraction: f64 },
}

/// How the pyramid levels enter the objective over the course of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PyramidSchedule {
    /// Every level is summed at every step.
    #[default]
    Joint,
    /// Starts with every level and drops the coarsest remaining level
    /// after each phase of `phase_fraction` of the run, ending at full
    /// resolution only: coarse levels steer the early, large moves and the
    /// finest level alone sets the final estimate.
    CoarseToFine { phase_fraction: f64 },
}

impl PyramidSchedule {
    /// Active level range at `step` for a pyramid of `levels` levels.
    pub fn levels_at(&self, step: usize, max_steps: usize, levels: usize) -> Range<usize> {
        match *self {
            PyramidSchedule::Joint => 0..levels,
            PyramidSchedule::CoarseToFine { phase_fraction } => {
                let phase_len = (max_steps as f64 * phase_fraction).round().max(1.0) as usize;
                let dropped = (step / phase_len).min(levels.saturating_sub(1));
                0..levels - dropped
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: usize,
    /// Fraction of the steps spent in stage 1.
    pub stage1_fraction: f64,
    pub stage1_terms: ActiveTerms,
    pub stage2_terms: ActiveTerms,
    pub lr_schedule: LrSchedule,
    pub objective: ObjectiveConfig,
    pub pyramid: PyramidSchedule,
    pub init: InitStrategy,
    /// Optimize the source poses; when false they stay at their initial value.
    pub optimize_poses: bool,
    pub optimize_masks: bool,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 2000,
            stage1_fraction: 0.8,
            stage1_terms: ActiveTerms::BASE,
            stage2_terms: ActiveTerms::ALL,
            lr_schedule: LrSchedule::default(),
            objective: ObjectiveConfig::default(),
            pyramid: PyramidSchedule::default(),
            init: InitStrategy::default(),
            optimize_poses: true,
            optimize_masks: true,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0

            && (0.0..=1.0).contains(&self.stage1_fraction);
        if !ok {
            return Err(Error::InvalidInput(
                "optimizer needs lr > 0, 0 ≤ β < 1, ε > 0 and a stage-1 fraction in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate used for the update at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { final_fraction } => {
                let t = if self.max_steps > 1 {
                    step as f64 / (self.max_steps - 1) as f64
                } else {
                    1.0
                };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
                self.lr * (final_fraction + (1.0 - final_fraction) * c)
            }
        }
    }

    /// Number of stage-1 steps.
    pub fn stage1_steps(&self) -> usize {
        (self.max_steps as f64 * self.stage1_fraction).round() as usize
    }

    pub fn terms_at(&self, step: usize) -> (u8, ActiveTerms) {
        if step < self.stage1_steps() {
            (1, self.stage1_terms)
        } else {
            (2, self.stage2_terms)
        }
    }
}

/// Adam moments of one parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Optimizer state: log-depth, mask logits, twists and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub log_depth: ScalarField,
    pub mask_logits: Vec<ScalarField>,
    pub twists: Vec<Twist>,
    pub step: usize,
    moments: Vec<Moments>,
}

impl OptimState {
    pub fn new(depth: &ScalarField, twists: Vec<Twist>, mask_logits: Vec<ScalarField>) -> Result<Self> {
        if let Some(i) = depth.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Domain(format!("initial depth at index {i} is not positive")));
        }
        if twists.len() != mask_logits.len() {
            return Err(Error::InvalidInput("one twist and one mask per source view".into()));
        }
        for m in &mask_logits {
            check_shape(depth.shape(), m.shape())?;
        }
        let mut moments = vec![Moments::zeros(depth.len())];
        moments.extend(twists.iter().map(|_| Moments::zeros(6)));
        moments.extend(mask_logits.iter().map(|m| Moments::zeros(m.len())));
        Ok(Self {
            log_depth: depth.map(|d| d.ln()),
            mask_logits,
            twists,
            step: 0,
            moments,
        })
    }

    pub fn depth(&self) -> ScalarField {
        self.log_depth.map(|l| l.exp())
    }

    pub fn scene_state(&self) -> SceneState {
        SceneState {
            depth: self.depth(),
            twists: self.twists.clone(),
            mask_logits: self.mask_logits.clone(),
        }
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        self.twists.iter().map(PoseSE3::exp).collect()
    }
}

/// Initial state: depth from `strategy`, zero twists (unless `poses` are
/// given) and zero mask logits (M = 0.5).
pub fn init_state(
    frames: &Frames,
    strategy: InitStrategy,
    gt_depth: Option<&ScalarField>,
    poses: Option<&[PoseSE3]>,
) -> Result<OptimState> {
    let (h, w) = frames.target.shape();
    let gt = || gt_depth.ok_or_else(|| Error::InvalidInput(format!("init strategy {strategy} needs ground-truth depth")));
    let depth = match strategy {
        InitStrategy::Constant(v) => ScalarField::filled(h, w, v),
        InitStrategy::GroundTruth => gt()?.clone(),
        InitStrategy::Perturbed(s) => gt()?.map(|d| d * s),
    };
    check_shape((h, w), depth.shape())?;
    let n = frames.sources.len();
    let twists = match poses {
        Some(p) if p.len() == n => p.iter().map(PoseSE3::log).collect(),
        Some(p) => {
            return Err(Error::InvalidInput(format!("{} poses given for {n} source views", p.len())));
        }
        None => vec![Twist::zero(); n],
    };
    OptimState::new(&depth, twists, vec![ScalarField::zeros(h, w); n])
}

/// One row of the optimization trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: u8,
    pub total: f64,
    #[serde(flatten)]
    pub terms: LossTerms,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,stage,total,vs,smooth_depth,smooth_normal,mask,grad";

    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.stage, self.total, t.vs, t.smooth_depth, t.smooth_normal, t.mask, t.grad
        )
    }
}

/// Renders a trace as CSV text (header plus one line per step).
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(TraceRow::CSV_HEADER);
    out.push('\n');
    for row in trace {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped at `step` because of a non-finite loss or gradient; the
    /// returned state is the last finite one.
    Aborted { step: usize, reason: String },
}

/// Final geometry and the loss trace of a run.
#[derive(Clone, Debug)]
pub struct OptimResult {
    pub state: OptimState,
    /// Depth used for warping (refined when the depth-normal path is on).
    pub depth: ScalarField,
    pub normals: NormalMap,
    pub poses: Vec<PoseSE3>,
    pub masks: Vec<ScalarField>,
    pub trace: Vec<TraceRow>,
    pub final_report: Option<LossReport>,
    pub status: RunStatus,
}

fn first_non_finite(report: &LossReport) -> Option<String> {
    if !report.total.is_finite() {
        return Some(format!("loss is {}", report.total));
    }
    if let Some(i) = report.grad_depth.first_non_finite() {
        return Some(format!("depth gradient at pixel {i} is not finite"));
    }
    for (s, g) in report.grad_twists.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            return Some(format!("pose gradient of source {s} is not finite"));
        }
    }
    for (s, g) in report.grad_mask_logits.iter().enumerate() {
        if let Some(i) = g.first_non_finite() {
            return Some(format!("mask gradient of source {s} at pixel {i} is not finite"));
        }
    }
    None
}

struct Adam<'a> {
    cfg: &'a OptimConfig,
    lr: f64,
    t: i32,
}

impl Adam<'_> {
    fn update(&self, params: &mut [f64], grad: &[f64], mom: &mut Moments) {
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
            mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

/// Runs both stages from `init` and returns the final geometry with the trace.
pub fn optimize(frames: &Frames, init: OptimState, cfg: &OptimConfig) -> Result<OptimResult> {
    cfg.validate()?;
    let objective = Objective::new(frames, cfg.objective)?;
    optimize_with(&objective, init, cfg)
}

/// As [`optimize`], reusing a prepared objective.
pub fn optimize_with(objective: &Objective, init: OptimState, cfg: &OptimConfig) -> Result<OptimResult> {
    cfg.validate()?;
    let mut state = init;
    let mut trace = Vec::with_capacity(cfg.max_steps);
    let mut status = RunStatus::Completed;
    for step in state.step..cfg.max_steps {
        let (stage, terms) = cfg.terms_at(step);
        let scene = state.scene_state();
        let levels = cfg.pyramid.levels_at(step, cfg.max_steps, objective.num_levels());
        let report = objective.evaluate_levels(&scene, terms, levels)?;
        if let Some(reason) = first_non_finite(&report) {
            status = RunStatus::Aborted { step, reason };
            break;
        }
        trace.push(TraceRow {
            step,
            stage,
            total: report.total,
            terms: report.terms,
        });
        let adam = Adam {
            cfg,
            lr: cfg.lr_at(step),
            t: step as i32 + 1,
        };
        // Chain rule through D = exp(log D).
        let g_log: Vec<f64> = report
            .grad_depth
            .iter()
            .zip(scene.depth.iter())
            .map(|(g, d)| g * d)
            .collect();
        let n = state.twists.len();
        let (depth_mom, rest) = state.moments.split_at_mut(1);
        let (twist_mom, mask_mom) = rest.split_at_mut(n);
        adam.update(state.log_depth.as_mut_slice(), &g_log, &mut depth_mom[0]);
        if cfg.optimize_poses {
            for (s, tw) in state.twists.iter_mut().enumerate() {
                adam.update(tw.0.as_mut_slice(), &report.grad_twists[s], &mut twist_mom[s]);
            }
        }
        if cfg.optimize_masks {
            for (s, logits) in state.mask_logits.iter_mut().enumerate() {
                adam.update(logits.as_mut_slice(), report.grad_mask_logits[s].as_slice(), &mut mask_mom[s]);
            }
        }
        state.step = step + 1;
    }

    let scene = state.scene_state();
    let last = cfg.max_steps.saturating_sub(1);
    let final_levels = cfg.pyramid.levels_at(last, cfg.max_steps, objective.num_levels());
    let final_report = objective.evaluate_levels(&scene, cfg.terms_at(last).1, final_levels).ok();
    let (depth, normals) = objective.geometry(&scene.depth)?;
    Ok(OptimResult {
        poses: state.poses(),
        masks: scene.masks(),
        depth,
        normals,
        trace,
        final_report,
        status,
        state,
    })
}

/// Checks that the `window`-step moving average of the total loss never
/// rises more than `slack` above its running minimum, separately within each
/// stage (stage 2 adds terms, so the loss jumps at the switch).
pub fn moving_average_is_monotone(trace: &[TraceRow], window: usize, slack: f64) -> bool {
    let mut ok = true;
    for stage in [1u8, 2] {
        let totals: Vec<f64> = trace.iter().filter(|r| r.stage == stage).map(|r| r.total).collect();
        if totals.len() < window || window == 0 {
            continue;
        }
        let mut sum: f64 = totals[..window].iter().sum();
        let mut best = sum / window as f64;
        for i in window..totals.len() {
            sum += totals[i] - totals[i - window];
            let avg = sum / window as f64;
            if avg > best * (1.0 + slack) {
                ok = false;
            }
            best = best.min(avg);
        }
    }
    ok
}

/// Mask logits from masks, the inverse of the sigmoid (clamped away from 0 and 1).
pub fn logits_from_masks(masks: &[ScalarField]) -> Vec<ScalarField> {
    masks
        .iter()
        .map(|m| m.map(|&p| {
            let p = p.clamp(1e-9, 1.0 - 1e-9);
            (p / (1.0 - p)).ln()
        }))
        .collect()
}
