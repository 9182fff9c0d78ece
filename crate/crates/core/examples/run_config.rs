//! Writes a dotted-key JSON config, then drives the command line with it.

use dualkanba::cli::{run, RunConfig};
use serde_json::json;

fn main() -> dualkanba::Result<()> {
    let mut cfg = RunConfig::from_json(&json!({
        "model.d": 16,
        "model.dropout": 0.0,
        "adsa.window": 4,
        "train.lr": 1e-3,
        "train.max_epochs": 10,
        "train.patience": 3,
        "data.n_samples": 320,
    }))?;
    cfg.seed = 3;
    let dir = std::env::temp_dir().join("dualkanba-config-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("config.json");
    cfg.save(&path)?;
    println!("{}", std::fs::read_to_string(&path)?);

    let (config, data, out) = (path.to_str().unwrap(), dir.join("data"), dir.join("run"));
    let (data, out) = (data.to_str().unwrap(), out.to_str().unwrap());
    let train = format!("{data}/train.jsonl");
    let dev = format!("{data}/dev.jsonl");
    let test = format!("{data}/test.jsonl");
    let ckpt = format!("{out}/model.ckpt");
    for args in [
        vec!["gen-data", "--config", config, "--out", data],
        vec!["train", "--config", config, "--train", &train, "--dev", &dev, "--out", out],
        vec!["eval", "--checkpoint", &ckpt, "--test", &test],
    ] {
        println!("$ dualkanba {}", args.join(" "));
        let code = run(std::iter::once("dualkanba").chain(args.iter().copied()));
        assert_eq!(code, 0);
    }
    Ok(())
}
