//! Named finite-difference gradient checks over every differentiable op
//! and every composite block, as run by `dualkanba gradcheck`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adsa::{adsa_forward, AdsaConfig, AdsaParams, IndexedAttention};
use crate::autodiff::{GradCheck, GradCheckReport, Tape, Tensor, Var};
use crate::data::{generate_synthetic, SynthSpec};
use crate::error::Result;
use crate::layers::{
    ati_forward, avi_forward, dyt_forward, gate_map, gated_fuse, kan_forward, mhca_forward, AviParams, BSplineBasis,
    DytParams, GateConvParams, InteractionParams, KanConfig, KanParams, MhcaParams,
};
use crate::mamba::{mamba_forward, MambaConfig, MambaParams, SelectiveScan};
use crate::model::{kanba_layer, kanformer_block, DualKanbaFormer, KanbaLayer, KanFormerParams, ModelConfig};
use crate::params::{Ctx, Init, Mode, ParamStore, Selections};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Op,
    Composite,
}

impl Kind {
    /// Default step and tolerance.
    ///
    /// Composites use a wider step: several of their gradients sit near
    /// 1e-8, where a 1e-4 step leaves the central difference dominated by
    /// rounding, while 1e-3 lets truncation error through.
    pub fn defaults(self) -> (f64, f64) {
        match self {
            Kind::Op => (1e-4, 1e-5),
            Kind::Composite => (5e-4, 1e-4),
        }
    }
}

pub struct Check {
    pub name: &'static str,
    /// `autodiff`, `layers`, `adsa`, `mamba` or `model`.
    pub module: &'static str,
    pub kind: Kind,
    run: fn(f64) -> Result<GradCheckReport>,
}

impl Check {
    pub fn run(&self, eps: f64) -> Result<GradCheckReport> {
        (self.run)(eps)
    }
}

fn rng(name: &str) -> ChaCha8Rng {
    crate::rng::stream(7, &format!("gradcheck.{name}"))
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

fn shifted(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `Σ w ⊙ y` with fixed random weights.
fn weighted(tape: &mut Tape, y: Var, name: &str) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_t(&shape, &mut rng(&format!("{name}.weights"))));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn op_check(
    name: &'static str,
    eps: f64,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(&inputs, |tape, v| {
        let y = f(tape, v)?;
        weighted(tape, y, name)
    })
}

/// Checks `f` over every parameter in `store` plus the extra `inputs`, with
/// block selections recorded once and replayed for every perturbation.
fn composite_check(
    name: &'static str,
    eps: f64,
    store: &ParamStore,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let log = {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval, 0);
        ctx.selections = Selections::Record(Vec::new());
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.param(t.clone())).collect();
        f(&mut ctx, &vars)?;
        match ctx.selections {
            Selections::Record(log) => log,
            _ => unreachable!(),
        }
    };
    let mut all = store.tensors().to_vec();
    all.extend(inputs);
    let n_params = store.len();
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(&all, |tape, vars| {
        let (params, extra) = vars.split_at(n_params);
        let mut ctx = Ctx::from_vars(tape, params.to_vec(), Mode::Eval, 0);
        ctx.selections = Selections::Replay(log.clone(), 0);
        let y = f(&mut ctx, extra)?;
        weighted(ctx.tape, y, name)
    })
}

macro_rules! op {
    ($name:literal, |$rng:ident| $inputs:expr, |$tape:ident, $v:ident| $body:expr) => {
        Check {
            name: $name,
            module: "autodiff",
            kind: Kind::Op,
            run: |eps| {
                let $rng = &mut rng($name);
                op_check($name, eps, $inputs, |$tape, $v| $body)
            },
        }
    };
}

fn ops() -> Vec<Check> {
    vec![
        op!("matmul", |r| vec![rand_t(&[3, 5], r), rand_t(&[5, 4], r)], |t, v| t.matmul(v[0], v[1])),
        op!("transpose", |r| vec![rand_t(&[3, 5], r)], |t, v| t.transpose(v[0])),
        op!("add", |r| vec![rand_t(&[4, 3], r), rand_t(&[4, 3], r)], |t, v| t.add(v[0], v[1])),
        op!("add_broadcast_row", |r| vec![rand_t(&[4, 3], r), rand_t(&[3], r)], |t, v| t.add(v[0], v[1])),
        op!("sub", |r| vec![rand_t(&[4, 3], r), rand_t(&[4, 1], r)], |t, v| t.sub(v[0], v[1])),
        op!("mul", |r| vec![rand_t(&[4, 3], r), rand_t(&[4, 3], r)], |t, v| t.mul(v[0], v[1])),
        op!("mul_broadcast_scalar", |r| vec![rand_t(&[4, 3], r), rand_t(&[1], r)], |t, v| t.mul(v[0], v[1])),
        op!("scale", |r| vec![rand_t(&[2, 6], r)], |t, v| t.scale(v[0], -1.7)),
        op!("add_scalar", |r| vec![rand_t(&[2, 6], r)], |t, v| t.add_scalar(v[0], 0.3)),
        op!("sigmoid", |r| vec![rand_t(&[3, 4], r)], |t, v| t.sigmoid(v[0])),
        op!("tanh", |r| vec![rand_t(&[3, 4], r)], |t, v| t.tanh(v[0])),
        op!("silu", |r| vec![rand_t(&[3, 4], r)], |t, v| t.silu(v[0])),
        op!("exp", |r| vec![rand_t(&[3, 4], r)], |t, v| t.exp(v[0])),
        op!("log", |r| vec![shifted(&[3, 4], 0.5, 2.0, r)], |t, v| t.log(v[0])),
        op!("softplus", |r| vec![rand_t(&[3, 4], r)], |t, v| t.softplus(v[0])),
        op!("softmax_rows", |r| vec![rand_t(&[3, 5], r)], |t, v| t.softmax_rows(v[0])),
        op!("concat_rows", |r| vec![rand_t(&[2, 3], r), rand_t(&[4, 3], r)], |t, v| t.concat_rows(v)),
        op!("concat_cols", |r| vec![rand_t(&[3, 2], r), rand_t(&[3, 5], r)], |t, v| t.concat_cols(v)),
        op!("slice_rows", |r| vec![rand_t(&[6, 3], r)], |t, v| t.slice_rows(v[0], 1, 4)),
        op!("slice_cols", |r| vec![rand_t(&[3, 6], r)], |t, v| t.slice_cols(v[0], 2, 5)),
        op!("gather_rows", |r| vec![rand_t(&[5, 3], r)], |t, v| t.gather_rows(v[0], vec![4, 0, 4, 2, 1, 4])),
        op!("reshape", |r| vec![rand_t(&[4, 6], r)], |t, v| {
            let y = t.reshape(v[0], [3, 8])?;
            t.tanh(y)
        }),
        op!("mean_rows", |r| vec![rand_t(&[5, 4], r)], |t, v| t.mean_rows(v[0])),
        op!("max_rows", |r| vec![rand_t(&[5, 4], r)], |t, v| t.max_rows(v[0])),
        op!("sum", |r| vec![rand_t(&[3, 4], r)], |t, v| t.sum(v[0])),
        op!("index", |r| vec![rand_t(&[3, 4], r)], |t, v| t.index(v[0], 7)),
        op!("conv1d_same", |r| vec![rand_t(&[6, 3], r), rand_t(&[9, 4], r), rand_t(&[4], r)], |t, v| {
            t.conv1d_same(v[0], v[1], v[2], 3)
        }),
        op!("causal_depthwise_conv", |r| vec![rand_t(&[6, 3], r), rand_t(&[2, 3], r), rand_t(&[3], r)], |t, v| {
            t.causal_depthwise_conv(v[0], v[1], v[2], 2)
        }),
        op!("dropout", |r| vec![rand_t(&[4, 5], r)], |t, v| t.dropout(v[0], 0.4, 11)),
        op!("layer_norm_rows", |r| vec![rand_t(&[3, 6], r)], |t, v| t.layer_norm_rows(v[0], 1e-5)),
        op!("bspline_basis", |r| vec![shifted(&[3, 4], -2.4, 2.4, r)], |t, v| {
            t.apply_fn(BSplineBasis::new(KanConfig::default().grid()), &[v[0]])
        }),
        op!("indexed_attention", |r| vec![rand_t(&[4, 3], r), rand_t(&[6, 3], r), rand_t(&[6, 3], r)], |t, v| {
            let index = vec![vec![0, 1, 2], vec![5], vec![2, 2, 3, 4], vec![0, 5]];
            t.apply_fn(IndexedAttention::new(index, 1.0 / 3.0), v)
        }),
        op!(
            "selective_scan",
            |r| vec![
                rand_t(&[5, 3], r),
                shifted(&[5, 3], 0.05, 0.8, r),
                shifted(&[3, 4], -2.0, -0.2, r),
                rand_t(&[5, 4], r),
                rand_t(&[5, 4], r),
                rand_t(&[3], r),
            ],
            |t, v| t.apply_fn(SelectiveScan::default(), v)
        ),
    ]
}

fn composite(
    name: &'static str,
    module: &'static str,
    run: fn(f64) -> Result<GradCheckReport>,
) -> Check {
    Check {
        name,
        module,
        kind: Kind::Composite,
        run,
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_in: 6,
        d: 8,
        heads: 2,
        n_layers: 1,
        dropout: 0.0,
        mamba: MambaConfig {
            d_state: 4,
            ..MambaConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn composites() -> Vec<Check> {
    vec![
        composite("mhca", "layers", |eps| {
            let mut store = ParamStore::new();
            let p = MhcaParams::init(&mut Init::new(&mut store, 1), 4, 2);
            let r = &mut rng("mhca");
            composite_check("mhca", eps, &store, vec![rand_t(&[5, 4], r), rand_t(&[3, 4], r)], |ctx, x| {
                mhca_forward(ctx, x[0], x[1], &p)
            })
        }),
        composite("ati", "layers", |eps| {
            let mut store = ParamStore::new();
            let p = InteractionParams::init(&mut Init::new(&mut store, 2), 4, 2, true);
            let r = &mut rng("ati");
            composite_check("ati", eps, &store, vec![rand_t(&[5, 4], r), rand_t(&[2, 4], r)], |ctx, x| {
                ati_forward(ctx, x[0], x[1], &p)
            })
        }),
        composite("avi", "layers", |eps| {
            let mut store = ParamStore::new();
            let p = AviParams::init(&mut Init::new(&mut store, 3), 3, 4, 2, true);
            let r = &mut rng("avi");
            composite_check("avi", eps, &store, vec![rand_t(&[5, 4], r), rand_t(&[4, 3], r)], |ctx, x| {
                avi_forward(ctx, x[0], x[1], &p)
            })
        }),
        composite("dyt", "layers", |eps| {
            let mut store = ParamStore::new();
            let p = DytParams::init(&mut Init::new(&mut store, 4), 4);
            let x = shifted(&[3, 4], -3.0, 3.0, &mut rng("dyt"));
            composite_check("dyt", eps, &store, vec![x], |ctx, x| dyt_forward(ctx, x[0], &p))
        }),
        composite("kan", "layers", |eps| {
            let mut store = ParamStore::new();
            let p = KanParams::init(&mut Init::new(&mut store, 5), 4, 3, &KanConfig::default());
            let x = shifted(&[3, 4], -2.5, 2.5, &mut rng("kan"));
            composite_check("kan", eps, &store, vec![x], |ctx, x| kan_forward(ctx, x[0], &p))
        }),
        composite("gate_map", "layers", |eps| {
            let mut store = ParamStore::new();
            let p = GateConvParams::init(&mut Init::new(&mut store, 6), 4, 3);
            let x = rand_t(&[5, 4], &mut rng("gate_map"));
            composite_check("gate_map", eps, &store, vec![x], |ctx, x| gate_map(ctx, x[0], &p))
        }),
        composite("gated_fuse", "layers", |eps| {
            let r = &mut rng("gated_fuse");
            let inputs = vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r), shifted(&[3, 4], 0.1, 0.9, r), shifted(&[3, 4], 0.1, 0.9, r)];
            composite_check("gated_fuse", eps, &ParamStore::new(), inputs, |ctx, x| gated_fuse(ctx, x[0], x[1], x[2], x[3]))
        }),
        composite("adsa", "adsa", |eps| {
            let mut store = ParamStore::new();
            let p = AdsaParams::init(&mut Init::new(&mut store, 7), 4, AdsaConfig::default())?;
            let x = rand_t(&[8, 4], &mut rng("adsa"));
            composite_check("adsa", eps, &store, vec![x], |ctx, x| adsa_forward(ctx, x[0], &p))
        }),
        composite("mamba", "mamba", |eps| {
            let mut store = ParamStore::new();
            let cfg = MambaConfig {
                d_state: 4,
                ..MambaConfig::default()
            };
            let p = MambaParams::init(&mut Init::new(&mut store, 8), 4, cfg)?;
            let x = rand_t(&[6, 4], &mut rng("mamba"));
            composite_check("mamba", eps, &store, vec![x], |ctx, x| mamba_forward(ctx, x[0], &p))
        }),
        composite("kanformer_block", "model", |eps| {
            let mut store = ParamStore::new();
            let p = KanFormerParams::init(&mut Init::new(&mut store, 9), &tiny_model_config())?;
            let x = rand_t(&[6, 8], &mut rng("kanformer_block"));
            composite_check("kanformer_block", eps, &store, vec![x], |ctx, x| kanformer_block(ctx, x[0], &p))
        }),
        composite("kanbaformer_layer", "model", |eps| {
            let mut store = ParamStore::new();
            let p = KanbaLayer::init(&mut Init::new(&mut store, 10), &tiny_model_config())?;
            let x = rand_t(&[6, 8], &mut rng("kanbaformer_layer"));
            composite_check("kanbaformer_layer", eps, &store, vec![x], |ctx, x| kanba_layer(ctx, x[0], &p))
        }),
        composite("model_forward", "model", |eps| {
            let model = DualKanbaFormer::new(tiny_model_config(), 11)?;
            let batch = generate_synthetic(&SynthSpec {
                n_samples: 2,
                ts: 6,
                ti: 4,
                ta: 2,
                d_in: 6,
                noise_std: 0.3,
                seed: 12,
                ..SynthSpec::default()
            })?;
            composite_check("model_forward", eps, &model.store, Vec::new(), |ctx, _| model.batch_loss(ctx, &batch))
        }),
    ]
}

/// Every check, ops first.
pub fn all() -> Vec<Check> {
    let mut v = ops();
    v.extend(composites());
    v
}

pub const MODULES: [&str; 6] = ["all", "autodiff", "layers", "adsa", "mamba", "model"];

/// Checks belonging to `module`, or every check for `all`.
pub fn select(module: &str) -> Option<Vec<Check>> {
    if !MODULES.contains(&module) {
        return None;
    }
    Some(all().into_iter().filter(|c| module == "all" || c.module == module).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_at_its_defaults() {
        for c in all() {
            let (eps, tol) = c.kind.defaults();
            let r = c.run(eps).unwrap();
            assert!(r.max_rel_error <= tol, "{}: {r:?}", c.name);
            assert!(r.entries_checked > 0 || c.name == "gated_fuse");
        }
    }

    #[test]
    fn module_selection() {
        assert_eq!(select("adsa").unwrap().len(), 1);
        assert!(select("autodiff").unwrap().iter().all(|c| c.kind == Kind::Op));
        assert!(select("nope").is_none());
    }
}
