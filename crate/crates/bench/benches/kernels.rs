//! Microbenchmarks for the hot kernels: transformer forward/backward,
//! k-means fitting, and the SQ-VAE loss.

use criterion::{criterion_group, criterion_main, Criterion};
use plantok_core::model::{forward, gradients, init_model, ForwardOpts, ModelConfig};
use plantok_core::planner::{kmeans_fit, make_blobs, KMeansParams, SqVae, SqVaeParams};
use plantok_core::tokenizer::{AnnotatedSequence, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_model(c: &mut Criterion) {
    let cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 2,
        d_ff: 256,
        context_len: 128,
        dropout_rate: 0.0,
        tie_embeddings: false,
    };
    let state = init_model::<f32>(&cfg, 100, "bench", 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = 64;
    let ids: Vec<u32> = (0..t).map(|_| rng.gen_range(0..100)).collect();
    c.bench_function("forward_64tok_2layer_d64", |b| {
        b.iter(|| {
            forward(
                &state,
                std::hint::black_box(&ids),
                ForwardOpts {
                    capture_attention: false,
                    capture_hidden: false,
                },
            )
            .unwrap()
        })
    });
    let seq = AnnotatedSequence {
        id: "bench".into(),
        token_ids: ids,
        loss_mask: vec![true; t],
        role_mask: vec![Role::Step; t],
        plan_ids_used: vec![],
    };
    let batch = [seq];
    c.bench_function("gradients_64tok_2layer_d64", |b| {
        b.iter(|| gradients(&state, std::hint::black_box(&batch), None).unwrap())
    });
}

fn blob_centers(k: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..d).map(|j| if j % k == i { spread } else { 0.0 }).collect())
        .collect()
}

fn bench_kmeans(c: &mut Criterion) {
    let (points, _) = make_blobs(100, &blob_centers(4, 16, 4.0), 0.5, 7);
    c.bench_function("kmeans_400x16_k4", |b| {
        b.iter(|| {
            kmeans_fit(
                std::hint::black_box(&points),
                4,
                0,
                &KMeansParams::default(),
            )
            .unwrap()
        })
    });
}

fn bench_sqvae_loss(c: &mut Criterion) {
    let (points, _) = make_blobs(50, &blob_centers(4, 16, 4.0), 0.5, 7);
    let params = SqVaeParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = SqVae::new(16, 4, &params, &mut rng);
    let eps: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut grads = model.zero_grads();
    c.bench_function("sqvae_loss_and_grads_d16_k4", |b| {
        b.iter(|| {
            let mut total = 0.0;
            for x in points.iter().take(32) {
                total += model.loss_and_grads(std::hint::black_box(x), &eps, Some(&mut grads));
            }
            total
        })
    });
}

criterion_group!(benches, bench_model, bench_kmeans, bench_sqvae_loss);
criterion_main!(benches);
