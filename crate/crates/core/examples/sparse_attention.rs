//! Runs the three-branch sparse attention on one sequence and prints which
//! tokens each branch looked at, the branch gates, and the attended counts.

use dualkanba::adsa::{adsa_attend, focus_tokens, proximity_indices, select_focus_blocks, AdsaConfig, AdsaParams};
use dualkanba::autodiff::{Tape, Tensor};
use dualkanba::params::{Ctx, Init, Mode, ParamStore};
use dualkanba::rng;

fn main() -> dualkanba::Result<()> {
    let (n, d) = (16, 8);
    let cfg = AdsaConfig::default();
    let mut store = ParamStore::new();
    let p = AdsaParams::init(&mut Init::new(&mut store, 1), d, cfg)?;
    let h = Tensor::uniform([n, d], 1.0, &mut rng::stream(1, "example"));

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, 0);
    let hv = ctx.constant(h);
    let out = adsa_attend(&mut ctx, hv, &p)?;
    println!("{:?}", out.stats);

    let scores = ctx.value(out.scope_scores[0]).clone();
    let blocks = select_focus_blocks(scores.values(), n, &cfg);
    println!("compressed blocks: {}", cfg.n_blocks(n));
    println!("query 0, head 0: focus blocks {:?} -> tokens {:?}", blocks[0], focus_tokens(&blocks[0], n, &cfg));
    println!("proximity tokens: {:?}", proximity_indices(n, &cfg)[0]);
    let g = ctx.value(out.gates);
    println!("gates (scope, focus, proximity) at query 0: {:?}", g.row(0));
    Ok(())
}
