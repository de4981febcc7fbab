//! Subcommand bodies. Each takes a fully resolved [`RunConfig`] and writes
//! its artifacts into `cfg.out`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use warpgeo::consistency::{depth_to_normal, edge_weights, normal_to_depth, EdgeWeights};
use warpgeo::gradcheck::{standard_suite, SuiteEntry};
use warpgeo::io;
use warpgeo::metrics::{depth_metrics, normal_metrics, pose_error, DepthMetrics, NormalMetrics, PoseError};
use warpgeo::objective::Ablation;
use warpgeo::optim::{init_state, optimize, trace_csv, OptimConfig, RunStatus, TraceRow};
use warpgeo::scene::make_sequence;
use warpgeo::{CameraIntrinsics, PoseSE3};

use crate::args::LayerOp;
use crate::config::RunConfig;
use crate::sequence::{self, write_json, Sequence};
use crate::{NumericFailure, ThresholdFailure};

pub fn execute(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating output directory {}", cfg.out.display()))?;
    cfg.write_to(&cfg.out)?;
    match cfg.command.as_deref() {
        Some("gen-scene") => gen_scene(cfg),
        Some("optimize") => run_optimize(cfg),
        Some("eval") => eval(cfg),
        Some("layers") => layers(cfg),
        Some("gradcheck") => gradcheck(cfg),
        Some("ablate") => ablate(cfg),
        other => bail!("unknown command {other:?}"),
    }
}

fn gen_scene(cfg: &RunConfig) -> anyhow::Result<()> {
    let spec = sequence::scene_spec(&cfg.scene, cfg.seed)?;
    let triplet = make_sequence(&spec)?;
    sequence::write_dir(&triplet, &spec, &cfg.out)?;
    let (h, w) = triplet.depth.shape();
    println!("wrote {h}x{w} sequence to {}", cfg.out.display());
    Ok(())
}

/// What an optimization run reports in `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub steps: usize,
    pub final_loss: Option<TraceRow>,
    pub poses: Vec<PoseSE3>,
    pub depth_metrics: Option<DepthMetrics>,
    pub normal_metrics: Option<NormalMetrics>,
    pub pose_errors: Option<Vec<PoseError>>,
}

/// Optimizes one sequence and writes geometry, masks, trace and summary into `out`.
pub fn optimize_sequence(seq: &Sequence, cfg: &RunConfig, optim: &OptimConfig, out: &Path) -> anyhow::Result<RunSummary> {
    let gt_depth = seq.depth.as_ref().map(|(d, _)| d);
    let poses = if cfg.known_poses {
        let p = seq.poses.as_deref();
        if p.is_none() {
            bail!("known poses requested but the sequence has no poses");
        }
        p
    } else {
        None
    };
    let state = init_state(&seq.frames, optim.init, gt_depth, poses)?;
    let result = optimize(&seq.frames, state, optim)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::save_scalar_pfm(out.join("depth.pfm"), &result.depth)?;
    io::save_png(out.join("depth.png"), &io::depth_heatmap(&result.depth, None))?;
    io::save_vector_pfm(out.join("normals.pfm"), &result.normals.normals)?;
    io::save_png(out.join("normals.png"), &io::normal_rgb(&result.normals.normals))?;
    for (i, mask) in result.masks.iter().enumerate() {
        io::save_scalar_pfm(out.join(format!("mask_{i}.pfm")), mask)?;
    }
    fs::write(out.join("trace.csv"), trace_csv(&result.trace))?;

    let depth_metrics = match &seq.depth {
        Some((gt, valid)) => Some(depth_metrics(&result.depth, gt, cfg.eval.cap, cfg.eval.scale_correct, Some(valid))?),
        None => None,
    };
    let normal_metrics = match &seq.normals {
        Some(gt) => Some(normal_metrics(&result.normals.normals, gt, None)?),
        None => None,
    };
    let pose_errors = match &seq.poses {
        Some(gt) if !cfg.known_poses => Some(
            result
                .poses
                .iter()
                .zip(gt)
                .map(|(p, g)| pose_error(p, g))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        _ => None,
    };
    let summary = RunSummary {
        status: result.status.clone(),
        steps: result.trace.len(),
        final_loss: result.trace.last().copied(),
        poses: result.poses.clone(),
        depth_metrics,
        normal_metrics,
        pose_errors,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn check_status(summary: &RunSummary) -> anyhow::Result<()> {
    match &summary.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Aborted { step, reason } => Err(NumericFailure(format!("optimization aborted at step {step}: {reason}")).into()),
    }
}

fn run_optimize(cfg: &RunConfig) -> anyhow::Result<()> {
    let seq = sequence::load(&cfg.scene, cfg.seed)?;
    let start = Instant::now();
    let summary = optimize_sequence(&seq, cfg, &cfg.optim, &cfg.out)?;
    eprintln!("{} steps in {:.1} s", summary.steps, start.elapsed().as_secs_f64());
    if let Some(last) = &summary.final_loss {
        println!("final loss {:.6} (view synthesis {:.6})", last.total, last.terms.vs);
    }
    if let Some(m) = &summary.depth_metrics {
        print_depth_table(m);
    }
    if let Some(m) = &summary.normal_metrics {
        print_normal_table(m);
    }
    if let Some(errors) = &summary.pose_errors {
        for (i, e) in errors.iter().enumerate() {
            println!("pose {i}: translation direction {:.3}°, rotation {:.3}°", e.translation_deg, e.rotation_deg);
        }
    }
    check_status(&summary)
}

fn print_depth_table(m: &DepthMetrics) {
    println!("{:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}", "abs_rel", "sq_rel", "rmse", "rmse_log", "δ<1.25", "δ<1.25²", "δ<1.25³");
    println!(
        "{:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
        m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta_1, m.delta_2, m.delta_3
    );
}

fn print_normal_table(m: &NormalMetrics) {
    println!("{:>9} {:>9} {:>9} {:>9} {:>9}", "mean°", "median°", "<11.25°", "<22.5°", "<30°");
    println!(
        "{:>9.3} {:>9.3} {:>9.4} {:>9.4} {:>9.4}",
        m.mean_deg, m.median_deg, m.pct_11_25, m.pct_22_5, m.pct_30
    );
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub depth: DepthMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normals: Option<NormalMetrics>,
}

fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let e = &cfg.eval;
    let (Some(pred_path), Some(gt_path)) = (&e.pred, &e.gt) else {
        bail!("eval needs --pred and --gt");
    };
    let (pred, pred_valid) = io::load_depth(pred_path).with_context(|| format!("loading {}", pred_path.display()))?;
    let (gt, gt_valid) = io::load_depth(gt_path).with_context(|| format!("loading {}", gt_path.display()))?;
    let user_mask = match &e.mask {
        Some(p) => Some(io::load_png_mask(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut valid = gt_valid.zip_map(&pred_valid, |&a, &b| a && b)?;
    if let Some(m) = &user_mask {
        valid = valid.zip_map(m, |&a, &b| a && b)?;
    }
    let depth = depth_metrics(&pred, &gt, e.cap, e.scale_correct, Some(&valid))?;
    let normals = match (&e.pred_normals, &e.gt_normals) {
        (Some(p), Some(g)) => {
            let pn = io::load_normals(p).with_context(|| format!("loading {}", p.display()))?;
            let gn = io::load_normals(g).with_context(|| format!("loading {}", g.display()))?;
            Some(normal_metrics(&pn, &gn, user_mask.as_ref())?)
        }
        (None, None) => None,
        _ => bail!("normal evaluation needs both --pred-normals and --gt-normals"),
    };
    let report = EvalReport { depth, normals };
    write_json(&cfg.out.join("metrics.json"), &report)?;
    fs::write(cfg.out.join("metrics.csv"), format!("{}\n{}\n", DepthMetrics::CSV_HEADER, depth.csv_row()))?;
    print_depth_table(&depth);
    if let Some(n) = &normals {
        fs::write(cfg.out.join("normal_metrics.csv"), format!("{}\n{}\n", NormalMetrics::CSV_HEADER, n.csv_row()))?;
        print_normal_table(n);
    }
    Ok(())
}

/// Intrinsics from a bare intrinsics JSON or from a `sequence.json`.
fn load_intrinsics(path: &Path) -> anyhow::Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(inner) = value.get_mut("intrinsics") {
        value = inner.take();
    }
    serde_json::from_value(value).with_context(|| format!("reading intrinsics from {}", path.display()))
}

fn layers(cfg: &RunConfig) -> anyhow::Result<()> {
    let l = &cfg.layers;
    let (Some(depth_path), Some(k_path)) = (&l.depth, &l.intrinsics) else {
        bail!("layers needs --depth and --intrinsics");
    };
    let k = load_intrinsics(k_path)?;
    let (depth, _) = io::load_depth(depth_path).with_context(|| format!("loading {}", depth_path.display()))?;
    let (h, w) = depth.shape();
    let obj = &cfg.optim.objective;
    let weights = match &l.image {
        Some(p) if obj.edge_aware_dn => {
            let img = io::load_image(p).with_context(|| format!("loading {}", p.display()))?;
            edge_weights(&img.grayscale(), obj.alpha_dn)?
        }
        _ => EdgeWeights::uniform(h, w),
    };
    let write_normals = |n: &warpgeo::VectorField| -> anyhow::Result<()> {
        io::save_vector_pfm(cfg.out.join("normals.pfm"), n)?;
        io::save_png(cfg.out.join("normals.png"), &io::normal_rgb(n))?;
        Ok(())
    };
    let write_depth = |d: &warpgeo::ScalarField| -> anyhow::Result<()> {
        io::save_scalar_pfm(cfg.out.join("depth_refined.pfm"), d)?;
        io::save_png(cfg.out.join("depth_refined.png"), &io::depth_heatmap(d, None))?;
        Ok(())
    };
    let report_degenerate = |count: usize| {
        if count > 0 {
            println!("{count} degenerate pixels fell back to the camera-facing normal");
        }
    };
    match l.op {
        LayerOp::DepthToNormal => {
            let n = depth_to_normal(&depth, &k, &weights)?;
            report_degenerate(n.degenerate.iter().filter(|&&d| d).count());
            write_normals(&n.normals)?;
        }
        LayerOp::NormalToDepth => {
            let Some(np) = &l.normals else {
                bail!("normal-to-depth needs --normals");
            };
            let normals = io::load_normals(np).with_context(|| format!("loading {}", np.display()))?;
            write_depth(&normal_to_depth(&depth, &normals, &k, &weights)?)?;
        }
        LayerOp::Refine => {
            let n = depth_to_normal(&depth, &k, &weights)?;
            report_degenerate(n.degenerate.iter().filter(|&&d| d).count());
            write_normals(&n.normals)?;
            write_depth(&normal_to_depth(&depth, &n.normals, &k, &weights)?)?;
        }
    }
    println!("wrote {h}x{w} layer outputs to {}", cfg.out.display());
    Ok(())
}

/// Renders the suite as a fixed-width table.
pub fn gradcheck_table(entries: &[SuiteEntry]) -> String {
    let mut s = format!(
        "{:<26} {:<14} {:>7} {:>12} {:>9}  {}\n",
        "operation", "variable", "coords", "max rel err", "tol", "result"
    );
    for e in entries {
        for v in &e.report.variables {
            s += &format!(
                "{:<26} {:<14} {:>7} {:>12.3e} {:>9.0e}  {}\n",
                e.operation,
                v.name,
                v.coords_checked,
                v.max_rel_error,
                e.report.tol,
                if v.max_rel_error < e.report.tol { "ok" } else { "FAIL" }
            );
        }
    }
    s
}

fn gradcheck(cfg: &RunConfig) -> anyhow::Result<()> {
    let start = Instant::now();
    let entries = standard_suite(&cfg.suite_config())?;
    print!("{}", gradcheck_table(&entries));
    println!("{} checks in {:.2} s", entries.len(), start.elapsed().as_secs_f64());
    write_json(&cfg.out.join("gradcheck.json"), &entries)?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.report.passed).map(|e| e.operation.as_str()).collect();
    if !failed.is_empty() {
        return Err(ThresholdFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

/// Directory name for a configuration's outputs.
pub fn ablation_dir(a: Ablation) -> String {
    match serde_json::to_value(a) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("ablations serialize as strings"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub depth: DepthMetrics,
    pub normals: NormalMetrics,
    pub final_loss: f64,
}

pub const ABLATION_CSV_HEADER: &str = "variant,abs_rel,sq_rel,rmse,rmse_log,delta_1,delta_2,delta_3,\
normal_mean,normal_median,normal_11.25,normal_22.5,normal_30,abs_rel_vs_full,normal_mean_vs_full";

fn ablate(cfg: &RunConfig) -> anyhow::Result<()> {
    let seq = sequence::load(&cfg.scene, cfg.seed)?;
    if seq.depth.is_none() || seq.normals.is_none() {
        bail!("ablate needs a sequence with ground-truth depth and normals");
    }
    let variants: Vec<Ablation> = std::iter::once(Ablation::Full).chain(Ablation::VARIANTS).collect();
    let results = variants
        .par_iter()
        .map(|&a| {
            let optim = OptimConfig {
                objective: a.apply(cfg.optim.objective),
                ..cfg.optim.clone()
            };
            let summary = optimize_sequence(&seq, cfg, &optim, &cfg.out.join(ablation_dir(a)))
                .with_context(|| format!("running {:?}", a.label()))?;
            check_status(&summary).with_context(|| format!("running {:?}", a.label()))?;
            Ok(AblationRow {
                variant: a.label().to_string(),
                depth: summary.depth_metrics.expect("ground truth present"),
                normals: summary.normal_metrics.expect("ground truth present"),
                final_loss: summary.final_loss.map_or(f64::NAN, |t| t.total),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let full = &results[0];
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for row in &results[1..] {
        csv += &format!(
            "{},{},{},{},{}\n",
            row.variant,
            row.depth.csv_row(),
            row.normals.csv_row(),
            row.depth.abs_rel - full.depth.abs_rel,
            row.normals.mean_deg - full.normals.mean_deg
        );
    }
    fs::write(cfg.out.join("ablation.csv"), csv)?;
    write_json(&cfg.out.join("ablation.json"), &results)?;
    println!("{:<22} {:>9} {:>9} {:>12}", "variant", "abs_rel", "normal°", "final loss");
    for row in &results {
        println!(
            "{:<22} {:>9.4} {:>9.3} {:>12.6}",
            row.variant, row.depth.abs_rel, row.normals.mean_deg, row.final_loss
        );
    }
    Ok(())
}
