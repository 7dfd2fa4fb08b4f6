// Scratch harness for sizing experiments; not part of the library surface.

use depthlab::data::{generate_splits, preset_by_name};
use depthlab::losses::LossWeights;
use depthlab::model::{EncoderConfig, MultiHeadModel};
use depthlab::trainer::{train_first_domain, Strategy, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let preset = args.get(1).map(String::as_str).unwrap_or("indoor_a");
    let n_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(256);
    let n_test: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let size: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let period: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(5);
    let uncertainty: bool = args.get(8).map(|s| s != "nounc").unwrap_or(true);

    let spec = preset_by_name(preset).unwrap();
    let t0 = Instant::now();
    let (train, test) = generate_splits(&spec, n_train, n_test, (size, size), 42).unwrap();
    println!("datagen: {:.2}s", t0.elapsed().as_secs_f64());

    let mut model = MultiHeadModel::build_model(EncoderConfig::default(), &spec, 7).unwrap();
    let config = TrainConfig {
        epochs,
        base_lr: lr,
        lr_halving_period_epochs: period,
        batch_size: 8,
        weights: LossWeights { enable_uncertainty: uncertainty, ..LossWeights::default() },
        strategy: Strategy::Ours,
        seed: 1,
        replay_cap: 50,
    };
    let tests = vec![(format!("{}_test", spec.domain_id), &test), (format!("{}_train", spec.domain_id), &train)];
    let tests: Vec<(String, &depthlab::data::Dataset)> = tests
        .into_iter()
        .map(|(n, d)| (spec.domain_id.clone(), d))
        .zip(["test", "train"])
        .map(|((id, d), _)| (id, d))
        .collect();
    let t1 = Instant::now();
    let (_, report) = train_first_domain(&mut model, &train, &config, &tests).unwrap();
    println!("train: {:.2}s", t1.elapsed().as_secs_f64());
    for (e, l) in report.epoch_losses.iter().enumerate() {
        if e % 5 == 0 || e + 1 == report.epoch_losses.len() {
            println!("epoch {e}: ud={:.5}", l.ud);
        }
    }
    for ((_, rec), label) in report.eval.iter().zip(["test", "train"]) {
        println!(
            "{preset} {label}: rmse={:.4} rel={:.4} delta1={:.4} (n={})",
            rec.rmse, rec.rel, rec.delta1, rec.n_pixels
        );
    }
}
