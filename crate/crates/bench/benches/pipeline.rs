//! Benchmarks for the hot paths of the pipeline: scene generation,
//! voxelization, feature extraction, encoder forward pass, the training
//! losses, and farthest-point sampling.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::Rng;

use lg3d_core::catalog::LabelCatalog;
use lg3d_core::embed::synthetic_anchors;
use lg3d_core::eval::farthest_point_sampling;
use lg3d_core::losses::{cfocal, cross_entropy, loss_total, ContrastiveConfig};
use lg3d_core::model::{encode, point_features, EncoderParams, INPUT_DIM};
use lg3d_core::rng::substream;
use lg3d_core::scene::Scene;
use lg3d_core::synth::{generate_synthetic_scene, synthetic_catalog, SyntheticSpec};
use lg3d_core::voxelize::voxelize;

const N_CATEGORIES: usize = 20;
const RESOLUTION: f64 = 0.05;

fn bench_spec() -> SyntheticSpec {
    SyntheticSpec {
        extent: 4.0,
        density: 250.0,
        n_categories: N_CATEGORIES,
        ..SyntheticSpec::default()
    }
}

fn bench_scene() -> (Scene, LabelCatalog) {
    let catalog = synthetic_catalog(N_CATEGORIES).unwrap();
    let scene = generate_synthetic_scene(&bench_spec(), &catalog, 42).unwrap();
    (scene, catalog)
}

fn scene_generation(c: &mut Criterion) {
    let catalog = synthetic_catalog(N_CATEGORIES).unwrap();
    let spec = bench_spec();
    c.bench_function("scene_generation", |b| {
        b.iter(|| generate_synthetic_scene(&spec, &catalog, 42).unwrap())
    });
}

fn voxelization(c: &mut Criterion) {
    let (scene, _) = bench_scene();
    c.bench_function(&format!("voxelize_{}pts", scene.len()), |b| {
        b.iter(|| voxelize(&scene, RESOLUTION).unwrap())
    });
}

fn feature_extraction(c: &mut Criterion) {
    let (scene, _) = bench_scene();
    let grid = voxelize(&scene, RESOLUTION).unwrap();
    c.bench_function(&format!("point_features_{}cells", grid.len()), |b| {
        b.iter(|| point_features(&grid, &scene, true))
    });
}

fn random_features(rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = substream(7, "bench/features");
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn encoder_forward(c: &mut Criterion) {
    let mut rng = substream(7, "bench/encoder");
    let params = EncoderParams::init(&[INPUT_DIM, 64, 64, 64], &mut rng);
    let features = random_features(4096, INPUT_DIM);
    c.bench_function("encoder_forward_4096x7_h64", |b| {
        b.iter(|| encode(&params, &features).unwrap())
    });
}

fn contrastive_loss(c: &mut Criterion) {
    let n = 4096;
    let dim = 64;
    let table = synthetic_anchors(N_CATEGORIES, dim, 0);
    let features = random_features(n, dim);
    let mut rng = substream(7, "bench/assign");
    let assignments: Vec<u16> = (0..n).map(|_| rng.gen_range(0..N_CATEGORIES as u16)).collect();
    let cfg = ContrastiveConfig::default();
    let negatives: Vec<Vec<u16>> = assignments
        .iter()
        .map(|&a| {
            (0..N_CATEGORIES as u16)
                .filter(|&c| c != a)
                .take(cfg.n_neg)
                .collect()
        })
        .collect();
    c.bench_function("contrastive_loss_4096x64", |b| {
        b.iter(|| loss_total(&features, &assignments, &table, &negatives, &cfg).unwrap())
    });
}

fn classification_losses(c: &mut Criterion) {
    let n = 4096;
    let logits = random_features(n, N_CATEGORIES);
    let mut rng = substream(7, "bench/targets");
    let targets: Vec<u16> = (0..n).map(|_| rng.gen_range(0..N_CATEGORIES as u16)).collect();
    let alpha: Vec<f64> = vec![1.0 / N_CATEGORIES as f64; N_CATEGORIES];
    c.bench_function("cross_entropy_4096x20", |b| {
        b.iter(|| cross_entropy(&logits, &targets).unwrap())
    });
    c.bench_function("cfocal_4096x20", |b| {
        b.iter(|| cfocal(&logits, &targets, 2.0, &alpha).unwrap())
    });
}

fn fps(c: &mut Criterion) {
    let mut rng = substream(7, "bench/fps");
    let points: Vec<[f64; 3]> = (0..2048)
        .map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..2.0)])
        .collect();
    c.bench_function("fps_2048pts_k64", |b| {
        b.iter_batched(
            || points.clone(),
            |pts| farthest_point_sampling(&pts, &[0], 64).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    scene_generation,
    voxelization,
    feature_extraction,
    encoder_forward,
    contrastive_loss,
    classification_losses,
    fps
);
criterion_main!(benches);
