//! Evaluates the cubic B-spline basis on a grid and runs a KAN layer.

use dualkanba::autodiff::{Tape, Tensor};
use dualkanba::layers::{kan_forward, KanConfig, KanParams};
use dualkanba::params::{Ctx, Init, Mode, ParamStore};

fn main() -> dualkanba::Result<()> {
    let cfg = KanConfig::default();
    let grid = cfg.grid();
    println!("knots: {:?}", grid.knots());
    let mut basis = vec![0.0; grid.basis_len()];
    for x in [-2.0, -1.0, 0.0, 0.5, 1.9] {
        grid.eval(x, &mut basis, None);
        let total: f64 = basis.iter().sum();
        let shown: Vec<String> = basis.iter().map(|b| format!("{b:.3}")).collect();
        println!("x={x:>5}: [{}] sum={total:.3}", shown.join(" "));
    }

    let mut store = ParamStore::new();
    let p = KanParams::init(&mut Init::new(&mut store, 0), 4, 2, &cfg);
    println!("KAN 4->2: {} parameters", store.numel());
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, 0);
    let x = ctx.constant(Tensor::from_rows(&[vec![0.1, -0.4, 1.2, 0.0], vec![-1.5, 0.3, 0.7, 2.5]]));
    let y = kan_forward(&mut ctx, x, &p)?;
    println!("output: {:?}", ctx.value(y).values());
    Ok(())
}
