use criterion::{criterion_group, criterion_main, Criterion};
use geogrouse::eval::auc;
use geogrouse::grouping::kmeans_fit;
use geogrouse::simulator::{generate_environment, simulate_batch, UniformLogger};
use geogrouse::training::{accumulate_surrogate, init_params};
use geogrouse::{EnvironmentSpec, GsVariant, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn policy_step(c: &mut Criterion) {
    let env = generate_environment(&EnvironmentSpec {
        n_users: 500,
        ..Default::default()
    })
    .unwrap();
    let batch = simulate_batch(&env, &UniformLogger, 1, 0, 10, false).unwrap();
    for variant in [GsVariant::Kmeans, GsVariant::Proto, GsVariant::Can, GsVariant::Din] {
        let cfg = ModelConfig {
            gs_variant: variant,
            ..Default::default()
        };
        let (model, mut params) = init_params(&cfg, &env.vocab(), &env.geo_sample(200, 1), 1).unwrap();
        let step = &batch[0].steps[0];
        c.bench_function(&format!("forward/{variant}"), |b| {
            b.iter(|| model.logits(params.values(), &step.state, &step.candidate_set).unwrap())
        });
        c.bench_function(&format!("surrogate_grad_10_sessions/{variant}"), |b| {
            b.iter(|| accumulate_surrogate(&model, &mut params, &batch, 0.9, false).unwrap())
        });
    }
}

fn grouping_and_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points = Tensor::matrix(2000, 40, (0..80_000).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    c.bench_function("kmeans_fit/2000x40_k3", |b| b.iter(|| kmeans_fit(&points, 3, 20, 7).unwrap()));
    let scores: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..20_000).map(|_| (rng.random::<f64>() < 0.1) as u8).collect();
    c.bench_function("auc/20000", |b| b.iter(|| auc(&scores, &labels).unwrap()));
}

criterion_group!(benches, policy_step, grouping_and_metrics);
criterion_main!(benches);
