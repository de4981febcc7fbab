//! Benchmarks for the per-step building blocks, at the desk-scale resolution
//! used by the recovery tests and at the full 128×416 input resolution.

use std::hint::black_box;

use criterion::{BenchmarkId, Criterion};
use warpgeo::consistency::{depth_to_normal, depth_to_normal_vjp, edge_weights, normal_to_depth, refine_depth};
use warpgeo::objective::{synthesize_view, ActiveTerms, Objective, ObjectiveConfig, SceneState};
use warpgeo::optim::logits_from_masks;
use warpgeo::scene::{make_sequence, FrameTriplet, Preset};
use warpgeo::ScalarField;

const SIZES: [(usize, usize); 2] = [(32, 104), (128, 416)];

fn triplet(h: usize, w: usize) -> FrameTriplet {
    make_sequence(&Preset::Slanted.spec(h, w, 0).expect("preset")).expect("render")
}

fn label(h: usize, w: usize) -> String {
    format!("{h}x{w}")
}

pub fn consistency_layers(c: &mut Criterion) {
    let mut group = c.benchmark_group("consistency");
    for (h, w) in SIZES {
        let seq = triplet(h, w);
        let k = seq.intrinsics;
        let weights = edge_weights(&seq.target().grayscale(), 0.1).unwrap();
        let normals = depth_to_normal(&seq.depth, &k, &weights).unwrap();
        group.bench_with_input(BenchmarkId::new("depth_to_normal", label(h, w)), &seq.depth, |b, d| {
            b.iter(|| depth_to_normal(black_box(d), &k, &weights).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("normal_to_depth", label(h, w)), &seq.depth, |b, d| {
            b.iter(|| normal_to_depth(black_box(d), &normals.normals, &k, &weights).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("refine_depth", label(h, w)), &seq.depth, |b, d| {
            b.iter(|| refine_depth(black_box(d), &k, &weights).unwrap())
        });
        let upstream = normals.normals.clone();
        group.bench_with_input(BenchmarkId::new("depth_to_normal_vjp", label(h, w)), &seq.depth, |b, d| {
            b.iter(|| depth_to_normal_vjp(black_box(d), &k, &weights, &upstream).unwrap())
        });
    }
    group.finish();
}

pub fn warping(c: &mut Criterion) {
    let mut group = c.benchmark_group("warping");
    for (h, w) in SIZES {
        let seq = triplet(h, w);
        group.bench_with_input(BenchmarkId::new("synthesize_view", label(h, w)), &seq, |b, seq| {
            b.iter(|| synthesize_view(black_box(&seq.depth), &seq.poses[0], &seq.intrinsics, &seq.frames[0]).unwrap())
        });
    }
    group.finish();
}

pub fn objective(c: &mut Criterion) {
    let mut group = c.benchmark_group("objective");
    group.sample_size(20);
    for (h, w) in SIZES {
        let seq = triplet(h, w);
        let frames = seq.to_frames();
        let obj = Objective::new(&frames, ObjectiveConfig::default()).unwrap();
        let state = SceneState {
            depth: seq.depth.map(|d| d * 1.05),
            twists: seq.poses.iter().map(|p| p.log()).collect(),
            mask_logits: logits_from_masks(&vec![ScalarField::filled(h, w, 0.5); 2]),
        };
        group.bench_with_input(BenchmarkId::new("evaluate_all_terms", label(h, w)), &state, |b, s| {
            b.iter(|| obj.evaluate(black_box(s), ActiveTerms::ALL).unwrap())
        });
    }
    group.finish();
}

pub fn benchmarks(c: &mut Criterion) {
    consistency_layers(c);
    warping(c);
    objective(c);
}
