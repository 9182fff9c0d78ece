//! The `dualkanba` command line: data generation, training, evaluation,
//! gradient checks, the sparsity benchmark, ablations and depth sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use crate::adsa::Proximity;
use crate::bench;
use crate::checks::{self, Kind};
use crate::data::{generate_synthetic, read_jsonl, split, write_jsonl, Sample, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{DualKanbaFormer, Fusion, ModelConfig};
use crate::trainer::{evaluate, run_ablation, sweep_layers, train_loop_with, write_history, TrainConfig};

/// Model, optimiser, synthetic-data and path settings in one place.
///
/// Read from a JSON object with flat dotted keys such as `"adsa.window": 2`;
/// flags applied afterwards win.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `d_in` and `seed` follow `model.d_in` and `seed`.
    pub data: SynthSpec,
    pub split: [f64; 3],
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SynthSpec::default();
        RunConfig {
            seed: 0,
            model: ModelConfig {
                d_in: data.d_in,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            data,
            split: [0.8, 0.1, 0.1],
            paths: Paths::default(),
        }
    }
}

trait ConfigValue: Sized {
    fn from_json(v: &Value) -> Option<Self>;
    fn to_json(&self) -> Value;
}

impl ConfigValue for usize {
    fn from_json(v: &Value) -> Option<Self> {
        v.as_u64().and_then(|x| x.try_into().ok())
    }
    fn to_json(&self) -> Value {
        (*self as u64).into()
    }
}

impl ConfigValue for u64 {
    fn from_json(v: &Value) -> Option<Self> {
        v.as_u64()
    }
    fn to_json(&self) -> Value {
        (*self).into()
    }
}

impl ConfigValue for f64 {
    fn from_json(v: &Value) -> Option<Self> {
        v.as_f64()
    }
    fn to_json(&self) -> Value {
        (*self).into()
    }
}

impl ConfigValue for bool {
    fn from_json(v: &Value) -> Option<Self> {
        v.as_bool()
    }
    fn to_json(&self) -> Value {
        (*self).into()
    }
}

impl ConfigValue for [f64; 3] {
    fn from_json(v: &Value) -> Option<Self> {
        let a = v.as_array()?;
        match a.as_slice() {
            [x, y, z] => Some([x.as_f64()?, y.as_f64()?, z.as_f64()?]),
            _ => None,
        }
    }
    fn to_json(&self) -> Value {
        self.iter().copied().collect()
    }
}

impl ConfigValue for Option<PathBuf> {
    fn from_json(v: &Value) -> Option<Self> {
        match v {
            Value::Null => Some(None),
            Value::String(s) => Some(Some(PathBuf::from(s))),
            _ => None,
        }
    }
    fn to_json(&self) -> Value {
        match self {
            Some(p) => p.to_string_lossy().into_owned().into(),
            None => Value::Null,
        }
    }
}

impl ConfigValue for Proximity {
    fn from_json(v: &Value) -> Option<Self> {
        serde_json::from_value(v.clone()).ok()
    }
    fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("unit enum")
    }
}

impl ConfigValue for Fusion {
    fn from_json(v: &Value) -> Option<Self> {
        match v.as_str()? {
            "gated" => Some(Fusion::Gated),
            "ffn" => Some(Fusion::Ffn),
            "sum" => Some(Fusion::Sum),
            _ => None,
        }
    }
    fn to_json(&self) -> Value {
        match self {
            Fusion::Gated => "gated",
            Fusion::Ffn => "ffn",
            Fusion::Sum => "sum",
        }
        .into()
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one dotted key from a JSON value.
            pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::from_json(v)
                            .ok_or_else(|| Error::Config(format!("bad value {v} for `{key}`")))?
                    })*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Every key with its current value.
            pub fn to_json(&self) -> Value {
                let mut m = Map::new();
                $(m.insert($key.to_string(), self.$($field).+.to_json());)*
                Value::Object(m)
            }
        }
    };
}

config_keys! {
    "seed" => seed,
    "model.d_in" => model.d_in,
    "model.d" => model.d,
    "model.heads" => model.heads,
    "model.n_layers" => model.n_layers,
    "model.dropout" => model.dropout,
    "model.query_residual" => model.query_residual,
    "adsa.block_len" => model.adsa.block_len,
    "adsa.stride" => model.adsa.stride,
    "adsa.select_len" => model.adsa.select_len,
    "adsa.n_select" => model.adsa.n_select,
    "adsa.window" => model.adsa.window,
    "adsa.proximity" => model.adsa.proximity,
    "adsa.sqrt_temperature" => model.adsa.sqrt_temperature,
    "mamba.d_state" => model.mamba.d_state,
    "mamba.d_conv" => model.mamba.d_conv,
    "mamba.expand" => model.mamba.expand,
    "kan.grid_size" => model.kan.grid_size,
    "kan.order" => model.kan.order,
    "kan.range" => model.kan.range,
    "ablations.no_mamba" => model.ablations.no_mamba,
    "ablations.no_kanformer" => model.ablations.no_kanformer,
    "ablations.kan_to_ffn" => model.ablations.kan_to_ffn,
    "ablations.dyt_to_layernorm" => model.ablations.dyt_to_layernorm,
    "ablations.intra_fusion" => model.ablations.intra_fusion,
    "ablations.multi_fusion" => model.ablations.multi_fusion,
    "ablations.text_only" => model.ablations.text_only,
    "train.lr" => train.lr,
    "train.batch_size" => train.batch_size,
    "train.max_epochs" => train.max_epochs,
    "train.patience" => train.patience,
    "train.beta1" => train.beta1,
    "train.beta2" => train.beta2,
    "train.adam_eps" => train.adam_eps,
    "data.n_samples" => data.n_samples,
    "data.ts" => data.ts,
    "data.ti" => data.ti,
    "data.ta" => data.ta,
    "data.noise_std" => data.noise_std,
    "data.fixed_positions" => data.fixed_positions,
    "data.prototypes" => data.prototypes,
    "data.split" => split,
    "paths.train" => paths.train,
    "paths.dev" => paths.dev,
    "paths.test" => paths.test,
    "paths.out" => paths.out,
    "paths.checkpoint" => paths.checkpoint,
}

impl RunConfig {
    pub fn from_json(v: &Value) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge(v)?;
        Ok(cfg)
    }

    pub fn merge(&mut self, v: &Value) -> Result<()> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object with dotted keys".into()))?;
        for (k, v) in obj {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json()).expect("plain JSON values");
        fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Applies the ties between sections and validates each.
    pub fn resolved(mut self) -> Result<Self> {
        self.data.d_in = self.model.d_in;
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.model.adsa.heads = self.model.heads;
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        Ok(self)
    }
}

#[derive(Parser, Debug)]
#[command(name = "dualkanba", version, about = "Multimodal aspect sentiment classifier with sparse attention and state-space layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON file of dotted config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    ts: Option<usize>,
    #[arg(long)]
    ti: Option<usize>,
    #[arg(long)]
    ta: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    fixed_positions: bool,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// One of all, autodiff, layers, adsa, mamba, model.
    #[arg(long, default_value = "all")]
    module: String,
    /// Finite-difference step; defaults to 1e-4 for ops and 5e-4 for blocks.
    #[arg(long)]
    eps: Option<f64>,
    /// Relative error bound; defaults to 1e-5 for ops and 1e-4 for blocks.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Debug)]
struct Bench {
    #[command(flatten)]
    common: Common,
    /// Sequence lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![64, 128, 256, 512])]
    ts: Vec<usize>,
    /// Timed forward passes per length; 0 skips timing.
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

#[derive(Args, Debug)]
struct Ablate {
    #[command(flatten)]
    common: Common,
    /// mamba, kanformer, kan, dyt, intra-fusion, multi-fusion or visual.
    #[arg(long)]
    component: String,
    /// Number of seeds, counted up from --seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct Sweep {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    min: usize,
    #[arg(long, default_value_t = 4)]
    max: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the planted synthetic task as train/dev/test JSONL under --out.
    GenData(GenData),
    /// Train on --train with early stopping on --dev; writes checkpoint, history and config under --out.
    Train(Common),
    /// Print accuracy and macro-F1 of --checkpoint on --test.
    Eval(Common),
    /// Finite-difference gradient checks.
    Gradcheck(Gradcheck),
    /// Attended key/value counts and timings against dense attention, as CSV.
    Bench(Bench),
    /// Train with and without one component and print the accuracy change.
    Ablate(Ablate),
    /// Dev accuracy for each depth in --min..=--max.
    SweepLayers(Sweep),
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        self.config_from(None)
    }

    /// `fallback` is read when no --config is given and the file exists.
    fn config_from(&self, fallback: Option<PathBuf>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.exists() => RunConfig::load(p)?,
            _ => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            cfg.set(k, &value)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let p = &mut cfg.paths;
        for (dst, src) in [
            (&mut p.train, &self.train),
            (&mut p.dev, &self.dev),
            (&mut p.test, &self.test),
            (&mut p.out, &self.out),
            (&mut p.checkpoint, &self.checkpoint),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        cfg.resolved()
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("{flag} is required")))
}

/// Train and dev sets from --train/--dev, or split from a fresh synthetic pool.
fn train_dev(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match &cfg.paths.train {
        Some(t) => {
            let dev = match &cfg.paths.dev {
                Some(d) => read_jsonl(d)?,
                None => Vec::new(),
            };
            Ok((read_jsonl(t)?, dev))
        }
        None => {
            let pool = generate_synthetic(&cfg.data)?;
            let (train, dev, _) = split(&pool, cfg.split, cfg.seed)?;
            Ok((train, dev))
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn gen_data(args: &GenData, out: &mut dyn Write) -> Result<()> {
    let mut cfg = args.common.config()?;
    let d = &mut cfg.data;
    d.n_samples = args.n_samples.unwrap_or(d.n_samples);
    d.noise_std = args.noise.unwrap_or(d.noise_std);
    d.ts = args.ts.unwrap_or(d.ts);
    d.ti = args.ti.unwrap_or(d.ti);
    d.ta = args.ta.unwrap_or(d.ta);
    d.fixed_positions |= args.fixed_positions;
    cfg.model.d_in = args.d_in.unwrap_or(cfg.model.d_in);
    let cfg = cfg.resolved()?;
    let dir = out_dir(&cfg)?;
    let pool = generate_synthetic(&cfg.data)?;
    let (train, dev, test) = split(&pool, cfg.split, cfg.seed)?;
    for (name, set) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let path = dir.join(format!("{name}.jsonl"));
        write_jsonl(set, &path)?;
        writeln!(out, "{name}: {} samples -> {}", set.len(), path.display())?;
    }
    Ok(())
}

fn train(args: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = args.config()?;
    let train = read_jsonl(required(&cfg.paths.train, "--train")?)?;
    let dev = match &cfg.paths.dev {
        Some(d) => read_jsonl(d)?,
        None => Vec::new(),
    };
    let dir = out_dir(&cfg)?;
    let mut model = DualKanbaFormer::new(cfg.model, cfg.seed)?;
    let outcome = train_loop_with(&mut model, &train, &dev, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  train_loss={:.6}  dev_acc={:.4}  dev_macro_f1={:.4}",
            r.epoch, r.train_loss, r.dev_acc, r.dev_macro_f1
        );
    })?;
    let ckpt = cfg.paths.checkpoint.clone().unwrap_or_else(|| dir.join("model.ckpt"));
    model.save(&ckpt)?;
    write_history(&outcome.history, dir.join("history.csv"))?;
    let mut saved = cfg.clone();
    saved.paths = Paths::default();
    saved.save(ckpt.with_extension("json"))?;
    writeln!(
        out,
        "best_epoch={} dev_acc={:.4} dev_macro_f1={:.4} checkpoint={}",
        outcome.best_epoch,
        outcome.best_dev.accuracy,
        outcome.best_dev.macro_f1,
        ckpt.display()
    )?;
    Ok(())
}

fn eval(args: &Common, out: &mut dyn Write) -> Result<()> {
    let ckpt = required(&args.checkpoint, "--checkpoint")?;
    let cfg = args.config_from(Some(ckpt.with_extension("json")))?;
    let data_path = cfg.paths.test.as_ref().or(cfg.paths.dev.as_ref());
    let data = read_jsonl(data_path.ok_or_else(|| Error::Config("--test is required".into()))?)?;
    let mut model = DualKanbaFormer::new(cfg.model, cfg.seed)?;
    model.load(ckpt)?;
    let m = evaluate(&model, &data)?;
    writeln!(out, "acc={:.4}, macro_f1={:.4}", m.accuracy, m.macro_f1)?;
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck(args: &Gradcheck, out: &mut dyn Write) -> Result<bool> {
    let selected = checks::select(&args.module).ok_or_else(|| {
        Error::Config(format!(
            "unknown module `{}` (expected one of {})",
            args.module,
            checks::MODULES.join(", ")
        ))
    })?;
    let mut ok = true;
    for c in selected {
        let (eps, tol) = c.kind.defaults();
        let (eps, tol) = (args.eps.unwrap_or(eps), args.tol.unwrap_or(tol));
        let r = c.run(eps)?;
        let pass = r.max_rel_error <= tol;
        ok &= pass;
        let kind = match c.kind {
            Kind::Op => "op",
            Kind::Composite => "block",
        };
        writeln!(
            out,
            "{} {:<24} {:<5} max_rel_err={:.3e} tol={:.0e} entries={}",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            kind,
            r.max_rel_error,
            tol,
            r.entries_checked
        )?;
    }
    Ok(ok)
}

fn bench(args: &Bench, out: &mut dyn Write) -> Result<()> {
    let cfg = args.common.config()?;
    let rows = bench::sparsity_sweep(cfg.model.d, cfg.model.adsa, &args.ts, cfg.seed, args.reps)?;
    match &cfg.paths.out {
        Some(p) => bench::write_csv(&rows, fs::File::create(p)?)?,
        None => bench::write_csv(&rows, &mut *out)?,
    }
    Ok(())
}

fn ablate(args: &Ablate, out: &mut dyn Write) -> Result<()> {
    let cfg = args.common.config()?;
    let (train, dev) = train_dev(&cfg)?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + args.seeds).collect();
    let r = run_ablation(cfg.model, &args.component, &train, &dev, &cfg.train, &seeds)?;
    for (i, s) in seeds.iter().enumerate() {
        writeln!(
            out,
            "seed={s} baseline_acc={:.4} ablated_acc={:.4}",
            r.baseline[i].accuracy, r.ablated[i].accuracy
        )?;
    }
    writeln!(
        out,
        "component={} baseline_acc={:.4} ablated_acc={:.4} delta={:+.4}",
        r.component,
        r.baseline_accuracy(),
        r.ablated_accuracy(),
        r.delta_accuracy()
    )?;
    Ok(())
}

fn sweep(args: &Sweep, out: &mut dyn Write) -> Result<()> {
    if args.min == 0 || args.min > args.max {
        return Err(Error::Config(format!("need 1 <= --min <= --max, got {}..{}", args.min, args.max)));
    }
    let cfg = args.common.config()?;
    let (train, dev) = train_dev(&cfg)?;
    let rows = sweep_layers(cfg.model, args.min..=args.max, &train, &dev, &cfg.train)?;
    writeln!(out, "depth,dev_acc,dev_macro_f1")?;
    for (depth, m) in rows {
        writeln!(out, "{depth},{:.4},{:.4}", m.accuracy, m.macro_f1)?;
    }
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand writing its
/// results to `out`, and returns the process exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => match gradcheck(a, out) {
            Ok(true) => Ok(()),
            Ok(false) => return 1,
            Err(e) => Err(e),
        },
        Command::Bench(a) => bench(a, out),
        Command::Ablate(a) => ablate(a, out),
        Command::SweepLayers(a) => sweep(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn json_round_trip_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.model.adsa.window = 5;
        cfg.model.ablations.multi_fusion = Fusion::Sum;
        cfg.paths.train = Some("a.jsonl".into());
        let v = cfg.to_json();
        assert_eq!(v.as_object().unwrap().len(), RunConfig::KEYS.len());
        assert_eq!(RunConfig::from_json(&v).unwrap(), cfg);
    }

    #[test]
    fn file_values_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, json!({"adsa.window": 3, "train.lr": 0.01, "seed": 4}).to_string()).unwrap();
        let common = Common {
            config: Some(path),
            seed: Some(9),
            set: vec!["train.lr=0.5".into(), "adsa.proximity=sliding".into()],
            ..Common::default()
        };
        let cfg = common.config().unwrap();
        assert_eq!(cfg.model.adsa.window, 3);
        assert_eq!(cfg.model.adsa.proximity, Proximity::Sliding);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.data.seed), (9, 9, 9));
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        assert!(RunConfig::from_json(&json!({"adsa.windw": 2})).is_err());
        assert!(RunConfig::from_json(&json!({"adsa.window": "two"})).is_err());
        assert!(RunConfig::from_json(&json!({"ablations.intra_fusion": "max"})).is_err());
        assert!(RunConfig::from_json(&json!([1, 2])).is_err());
    }

    #[test]
    fn exit_codes() {
        let mut out = Vec::new();
        assert_eq!(run_with(["dualkanba", "frobnicate"], &mut out), 2);
        assert_eq!(run_with(["dualkanba", "train", "--bogus"], &mut out), 2);
        assert_eq!(run_with(["dualkanba", "train"], &mut out), 1);
        assert_eq!(run_with(["dualkanba", "gradcheck", "--module", "nope"], &mut out), 1);
        assert_eq!(run_with(["dualkanba", "sweep-layers", "--min", "3", "--max", "2"], &mut out), 1);
    }

    #[test]
    fn gradcheck_adsa_passes_at_tight_step() {
        let mut out = Vec::new();
        let code = run_with(["dualkanba", "gradcheck", "--module", "adsa", "--eps", "1e-4", "--tol", "1e-4"], &mut out);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(code, 0, "{text}");
        assert!(text.lines().all(|l| l.starts_with("PASS")));
    }

    #[test]
    fn bench_reports_73_at_128() {
        let mut out = Vec::new();
        assert_eq!(run_with(["dualkanba", "bench", "--ts", "128", "--reps", "0"], &mut out), 0);
        let text = String::from_utf8(out).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!((row[0], row[4], row[6]), ("128", "73", "128"));
    }
}
