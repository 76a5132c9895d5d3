use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relgeo::dataset::{generate_synth_scene, SynthSceneConfig};
use relgeo::losses::{global_loss, weighted_global, Weighting};
use relgeo::network::Mode;
use relgeo::trainer::{train, TrainConfig};
use relgeo::{relative_pose, Graph, ModelConfig, Pose, Position, Quaternion, SiameseModel, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = (random_tensor(&mut rng, 32, 128), random_tensor(&mut rng, 128, 128));
    c.bench_function("matmul 32x128 * 128x128", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            black_box(g.matmul(x, y).unwrap());
        })
    });
}

fn forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = SiameseModel::from_seed(ModelConfig::default(), 0).unwrap();
    let input = random_tensor(&mut rng, 32, 32);
    let gt_x = random_tensor(&mut rng, 32, 3);
    let gt_q = Tensor::from_rows(&vec![[1.0, 0.0, 0.0, 0.0]; 32]).unwrap();
    c.bench_function("forward + backward, batch 32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(input.clone());
            let f = bound.encode(&mut g, x, &mut Mode::Eval).unwrap();
            let (px, pq) = bound.gpru(&mut g, f, &mut Mode::Eval).unwrap();
            let (tx, tq) = (g.constant(gt_x.clone()), g.constant(gt_q.clone()));
            let (lx, lq) = global_loss(&mut g, px, pq, tx, tq).unwrap();
            let loss = weighted_global(&mut g, lx, lq, Weighting::FixedBeta(250.0)).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn train_epoch(c: &mut Criterion) {
    let scene = generate_synth_scene(&SynthSceneConfig {
        num_sequences: 4,
        frames_per_sequence: 40,
        ..Default::default()
    })
    .unwrap();
    let config = TrainConfig {
        max_epochs: 1,
        ..Default::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("one epoch, full loss, 160 frames", |bench| {
        bench.iter(|| black_box(train(&scene, &config).unwrap()))
    });
    group.finish();
}

fn pose_algebra(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pose = || {
        let q = Quaternion::new(rng.random(), rng.random(), rng.random(), rng.random());
        Pose::new(Position::new(rng.random(), rng.random(), rng.random()), q).unwrap()
    };
    let pairs: Vec<(Pose, Pose)> = (0..1000).map(|_| (pose(), pose())).collect();
    c.bench_function("relative_pose x1000", |bench| {
        bench.iter(|| {
            for (p, r) in &pairs {
                black_box(relative_pose(p, r));
            }
        })
    });
}

criterion_group!(benches, matmul, forward_backward, train_epoch, pose_algebra);
criterion_main!(benches);
