//! Trains on the 8-mode ring and reports mode coverage.
//!
//! `cargo run --release --example gmm_ring -- <mode> <seed> <iterations> <lr>`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slcgan::data::{sample_condition, sample_latent, AugmentationPolicy, DatasetHandle, GaussianMixtureSpec, Source};
use slcgan::metrics::mode_coverage;
use slcgan::models::{ArchConfig, Phase};
use slcgan::trainer::{train_loop, Mode, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = match args.get(1).map(String::as_str).unwrap_or("slcgan") {
        "ugan" => Mode::Ugan,
        "cgan" => Mode::Cgan,
        _ => Mode::Slcgan,
    };
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let iterations: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let spec = GaussianMixtureSpec::ring(8, 1.0, 0.05);
    let data = DatasetHandle::open(Source::Gmm { spec: spec.clone(), n: 10_000, seed }).unwrap();
    let config = TrainConfig { mode, k: 8, batch_size: 256, total_iterations: iterations, learning_rate: lr, c_learning_rate: lr, seed, ..TrainConfig::default() };
    let mut arch = ArchConfig::mlp(8);
    arch.conditional = mode != Mode::Ugan;

    let start = Instant::now();
    let (state, rows) = train_loop(&config, &arch, &AugmentationPolicy::default(), &data).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let n = 2000;
    let z = sample_latent(n, arch.d_z, &mut rng);
    let cond = sample_condition(n, 8, &mut rng);
    let label = arch.conditional.then_some(&cond.onehot);
    let x = state.g.generate(&z, label, Phase::Eval).unwrap();
    let pts = x.into_dimensionality().unwrap();
    let ids: &[usize] = if arch.conditional { &cond.index } else { &[] };
    let cov = mode_coverage(&pts, ids, &spec).unwrap();
    let last = rows.last().map(|r| r.losses);
    println!("{mode} seed={seed} iters={iterations} time={elapsed:.1}s covered={} purity={:?} per_mode={:?} last={last:?}", cov.covered, cov.purity, cov.per_mode);
}
