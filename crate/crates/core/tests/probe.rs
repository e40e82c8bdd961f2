//! Temporary scale probe (not part of the suite).

use mtlavsr_core::evalharness::{run_experiment, ExperimentConfig, ModelSpec};
use mtlavsr_core::mtlnet::TrainConfig;

#[test]
#[ignore]
fn probe_trend_small() {

    let mut cfg = ExperimentConfig::desk_default(300, 9001);
    cfg.train = TrainConfig { hidden_dim: 128, hidden_layers: 2, seed: 9001, ..TrainConfig::default() };
    cfg.models = vec![ModelSpec::stl(), ModelSpec::mtl(0.3)];
    cfg.snrs_db = vec![-3.0, 0.0];
    let t0 = std::time::Instant::now();
    let out = run_experiment(&cfg).unwrap();
    println!("probe elapsed: {:.1}s", t0.elapsed().as_secs_f64());
    println!("{}", out.results.to_csv());
    for (m, recs) in &out.training {
        for r in recs {
            println!("{m}: epoch {} lr {} ce {:.4} acc {:.2}", r.epoch, r.learning_rate, r.train_cross_entropy, r.cv_accuracy_pct);
        }
    }
}
