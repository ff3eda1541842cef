//! Throughput of the paths that dominate a closed-loop experiment: network
//! training and inference on the full 28x28 architecture, cluster binning,
//! market clearing and the per-device dynamic program.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use flexq::aggregation::{bin_cluster, SupportPoints};
use flexq::benchmark::{dp_optimal, DpGridConfig};
use flexq::dispatch::{clear, Bid};
use flexq::neuralnet::{QNetwork, QNetworkConfig, Sample};
use flexq::sim::{sample_cluster, step_cluster, GainProcess, TclState};

fn training_data(n: usize, hw: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grids = (0..n)
        .map(|_| (0..hw).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let scalars = (0..n)
        .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let targets = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
    (grids, scalars, targets)
}

fn bench_network(c: &mut Criterion) {
    let cfg = QNetworkConfig::default();
    let net = QNetwork::new(cfg, 1).unwrap();
    let (grids, scalars, targets) = training_data(64, 784, 2);
    let samples: Vec<Sample> = grids
        .iter()
        .zip(&scalars)
        .map(|(g, s)| Sample {
            grid: g,
            scalars: s,
        })
        .collect();

    c.bench_function("net_forward_28x28", |b| {
        b.iter(|| black_box(net.forward(black_box(&grids[0]), black_box(&scalars[0]))))
    });

    let actions: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
    c.bench_function("net_min_q_11_actions", |b| {
        b.iter(|| black_box(net.min_q(black_box(&grids[0]), 0.5, 0.2, &actions)))
    });

    c.bench_function("net_batch_gradient_16", |b| {
        b.iter(|| black_box(net.batch_gradient(&samples[..16], &targets[..16])))
    });

    let train_cfg = QNetworkConfig {
        epochs: 1,
        ..QNetworkConfig::default()
    };
    c.bench_function("net_train_epoch_64", |b| {
        b.iter_batched(
            || QNetwork::new(train_cfg, 1).unwrap(),
            |mut net| net.train(&samples, &targets, 3).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn bench_cluster(c: &mut Criterion) {
    let params = sample_cluster(400, 1).unwrap();
    let support = SupportPoints::new(28).unwrap();
    let t_airs: Vec<f64> = (0..400)
        .map(|i| 20.0 + 2.0 * (i as f64 / 400.0))
        .collect();
    c.bench_function("bin_cluster_400", |b| {
        b.iter(|| black_box(bin_cluster(black_box(&t_airs), &params, &support)))
    });

    let bids: Vec<Bid> = (0..400)
        .map(|i| Bid {
            corner_priority: (i as f64 / 400.0),
            power_kw: 0.5,
        })
        .collect();
    c.bench_function("clear_400_bids", |b| {
        b.iter(|| black_box(clear(black_box(&bids), 87.0)))
    });

    let gains = GainProcess::new(7, 0.01);
    c.bench_function("step_cluster_400", |b| {
        b.iter_batched(
            || {
                (
                    vec![TclState::new(21.0, 21.0); 400],
                    vec![true; 400],
                    gains.sample_all(3, 400),
                )
            },
            |(mut states, u, q)| {
                step_cluster(&mut states, &params, &u, 2.0, 1.0, 60, &q).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_dp(c: &mut Criterion) {
    let params = sample_cluster(1, 3).unwrap()[0];
    let t_out: Vec<f64> = (0..24).map(|k| 2.0 + 3.0 * ((k as f64) / 4.0).sin()).collect();
    let prices: Vec<f64> = (0..24).map(|k| 0.03 + 0.01 * (k % 7) as f64).collect();
    c.bench_function("dp_optimal_24h_64x64", |b| {
        b.iter(|| {
            black_box(
                dp_optimal(
                    &params,
                    TclState::new(21.0, 21.0),
                    &t_out,
                    &prices,
                    1.0,
                    60,
                    &DpGridConfig::default(),
                )
                .unwrap(),
            )
        })
    });
}

criterion_group!(benches, bench_network, bench_cluster, bench_dp);
criterion_main!(benches);
