//! Trains the full model and the model without one component (default
//! `mamba`) over two seeds and prints the dev-accuracy change.

use dualkanba::data::{generate_synthetic, split, SynthSpec};
use dualkanba::model::ModelConfig;
use dualkanba::trainer::{run_ablation, TrainConfig};

fn main() -> dualkanba::Result<()> {
    let component = std::env::args().nth(1).unwrap_or_else(|| "mamba".into());
    let pool = generate_synthetic(&SynthSpec {
        n_samples: 320,
        ..SynthSpec::default()
    })?;
    let (train, dev, _) = split(&pool, [0.8, 0.1, 0.1], 0)?;
    let cfg = ModelConfig {
        d_in: 16,
        d: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        max_epochs: 8,
        patience: 3,
        ..TrainConfig::default()
    };
    let r = run_ablation(cfg, &component, &train, &dev, &tc, &[0, 1])?;
    println!(
        "without {}: dev acc {:.4} -> {:.4} ({:+.1} points)",
        r.component,
        r.baseline_accuracy(),
        r.ablated_accuracy(),
        100.0 * r.delta_accuracy()
    );
    Ok(())
}
