//! Dev accuracy for one to three stacked layers.

use dualkanba::data::{generate_synthetic, split, SynthSpec};
use dualkanba::model::ModelConfig;
use dualkanba::trainer::{sweep_layers, TrainConfig};

fn main() -> dualkanba::Result<()> {
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
    for (depth, m) in sweep_layers(cfg, 1..=3, &train, &dev, &tc)? {
        println!("{depth} layers: dev acc {:.4}, macro-F1 {:.4}", m.accuracy, m.macro_f1);
    }
    Ok(())
}
