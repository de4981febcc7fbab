//! Direct-optimization recovery on rendered scenes with exact ground truth.
//!
//! The recovery runs use a decaying learning rate and a coarse-to-fine
//! pyramid schedule; the library defaults (constant 2e-3, all levels jointly)
//! move log-depth too slowly to converge from a constant start in 2000 steps.

use warpgeo::metrics::{depth_metrics, normal_metrics};
use warpgeo::objective::Ablation;
use warpgeo::optim::{
    init_state, moving_average_is_monotone, optimize, trace_csv, InitStrategy, LrSchedule, OptimConfig, OptimResult,
    PyramidSchedule, RunStatus,
};
use warpgeo::scene::{make_sequence, FrameTriplet, Preset};

fn triplet(preset: Preset, seed: u64) -> FrameTriplet {
    make_sequence(&preset.spec(32, 104, seed).unwrap()).unwrap()
}

fn known_pose_config(lr: f64) -> OptimConfig {
    OptimConfig {
        lr,
        optimize_poses: false,
        lr_schedule: LrSchedule::Cosine { final_fraction: 0.01 },
        pyramid: PyramidSchedule::CoarseToFine { phase_fraction: 0.25 },
        ..OptimConfig::default()
    }
}

fn run(seq: &FrameTriplet, init: InitStrategy, cfg: &OptimConfig) -> OptimResult {
    let frames = seq.to_frames();
    let state = init_state(&frames, init, Some(&seq.depth), Some(&seq.poses)).unwrap();
    let res = optimize(&frames, state, cfg).unwrap();
    assert_eq!(res.status, RunStatus::Completed);
    res
}

fn abs_rel(res: &OptimResult, seq: &FrameTriplet) -> f64 {
    depth_metrics(&res.depth, &seq.depth, 80.0, false, None).unwrap().abs_rel
}

#[test]
fn fronto_plane_from_twice_the_true_depth() {
    let seq = triplet(Preset::Fronto, 0);
    assert!(seq.depth.iter().all(|&d| (d - 3.0).abs() < 1e-12));
    let res = run(&seq, InitStrategy::Constant(6.0), &known_pose_config(5e-2));
    assert_eq!(res.trace.len(), 2000);
    let err = abs_rel(&res, &seq);
    assert!(err < 0.02, "Abs Rel {err}");
    assert!(moving_average_is_monotone(&res.trace, 100, 0.05));
}

#[test]
fn coarse_to_fine_beats_single_scale() {
    for seed in [0, 1] {
        let seq = triplet(Preset::Slanted, seed);
        let pyramid = known_pose_config(2e-2);
        let single = OptimConfig {
            pyramid: PyramidSchedule::Joint,
            objective: warpgeo::objective::ObjectiveConfig {
                scales: 1,
                ..pyramid.objective
            },
            ..pyramid.clone()
        };
        let c2f = run(&seq, InitStrategy::Constant(1.0), &pyramid);
        let one = run(&seq, InitStrategy::Constant(1.0), &single);
        let (a, b) = (abs_rel(&c2f, &seq), abs_rel(&one, &seq));
        assert!(a < b, "seed {seed}: coarse-to-fine {a} vs single-scale {b}");
        assert!(moving_average_is_monotone(&c2f.trace, 100, 0.05));
        assert!(moving_average_is_monotone(&one.trace, 100, 0.05));
    }
}

#[test]
fn default_settings_lower_the_loss_monotonically() {
    let seq = triplet(Preset::Slanted, 2);
    let cfg = OptimConfig {
        optimize_poses: false,
        ..OptimConfig::default()
    };
    let res = run(&seq, InitStrategy::Constant(1.0), &cfg);
    assert!(moving_average_is_monotone(&res.trace, 100, 0.05));
    let first = res.trace.first().unwrap().total;
    let last_stage1 = res.trace.iter().rfind(|r| r.stage == 1).unwrap().total;
    assert!(last_stage1 < 0.5 * first, "stage-1 loss {first} -> {last_stage1}");
}

#[test]
fn no_dn_still_converges_but_with_worse_normals() {
    let seq = triplet(Preset::Slanted, 3);
    let full_cfg = known_pose_config(2e-2);
    let no_dn_cfg = OptimConfig {
        objective: Ablation::NoDn.apply(full_cfg.objective),
        ..full_cfg.clone()
    };
    let full = run(&seq, InitStrategy::Constant(1.0), &full_cfg);
    let no_dn = run(&seq, InitStrategy::Constant(1.0), &no_dn_cfg);
    let normals = |r: &OptimResult| normal_metrics(&r.normals.normals, &seq.normals, None).unwrap().mean_deg;
    assert!(abs_rel(&no_dn, &seq) < 0.05, "no d-n Abs Rel {}", abs_rel(&no_dn, &seq));
    assert!(normals(&full) < normals(&no_dn));
}

#[test]
fn results_do_not_depend_on_the_thread_count() {
    let seq = triplet(Preset::Edge, 1);
    let cfg = OptimConfig {
        max_steps: 150,
        ..OptimConfig::default()
    };
    let run_with = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run(&seq, InitStrategy::Constant(2.0), &cfg))
    };
    let (a, b) = (run_with(1), run_with(3));
    assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.poses, b.poses);
    assert_eq!(a.masks, b.masks);
}
