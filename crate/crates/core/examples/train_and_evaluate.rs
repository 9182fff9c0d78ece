//! Trains a small model on the synthetic task, evaluates it on held-out
//! data, and restores it from a checkpoint.

use dualkanba::data::{generate_synthetic, split, SynthSpec};
use dualkanba::model::{DualKanbaFormer, ModelConfig};
use dualkanba::trainer::{evaluate, train_loop_with, write_history, TrainConfig};

fn main() -> dualkanba::Result<()> {
    let pool = generate_synthetic(&SynthSpec {
        n_samples: 384,
        ..SynthSpec::default()
    })?;
    let (train, dev, test) = split(&pool, [0.667, 0.1665, 0.1665], 0)?;
    let cfg = ModelConfig {
        d_in: 16,
        d: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        max_epochs: 12,
        patience: 4,
        ..TrainConfig::default()
    };
    let mut model = DualKanbaFormer::new(cfg, 0)?;
    let outcome = train_loop_with(&mut model, &train, &dev, &tc, |r| {
        println!("epoch {:>2} loss {:.4} dev acc {:.3}", r.epoch, r.train_loss, r.dev_acc);
    })?;
    let m = evaluate(&model, &test)?;
    println!("best epoch {}: test acc={:.4}, macro_f1={:.4}", outcome.best_epoch, m.accuracy, m.macro_f1);

    let dir = std::env::temp_dir().join("dualkanba-train-example");
    std::fs::create_dir_all(&dir)?;
    write_history(&outcome.history, dir.join("history.csv"))?;
    model.save(dir.join("model.ckpt"))?;
    let mut restored = DualKanbaFormer::new(cfg, 99)?;
    restored.load(dir.join("model.ckpt"))?;
    println!("restored test acc={:.4}", evaluate(&restored, &test)?.accuracy);
    Ok(())
}
