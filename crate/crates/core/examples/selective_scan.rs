//! Runs the selective scan directly and through a full Mamba layer.

use dualkanba::autodiff::{Tape, Tensor};
use dualkanba::mamba::{mamba_forward, selective_scan, MambaConfig, MambaParams};
use dualkanba::params::{Ctx, Init, Mode, ParamStore};
use dualkanba::rng;

fn main() -> dualkanba::Result<()> {
    // One channel, one state, decay e^{-Δ}: an exponential moving sum.
    let n = 6;
    let u = Tensor::new([n, 1], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0])?;
    let delta = Tensor::full([n, 1], 0.5);
    let a = Tensor::full([1, 1], -1.0);
    let b = Tensor::full([n, 1], 1.0);
    let c = Tensor::full([n, 1], 1.0);
    let d = Tensor::zeros([1]);
    let y = selective_scan(&u, &delta, &a, &b, &c, &d)?;
    println!("impulse response: {:?}", y.values());

    let dm = 8;
    let mut store = ParamStore::new();
    let p = MambaParams::init(&mut Init::new(&mut store, 2), dm, MambaConfig::default())?;
    println!("Mamba layer d={dm}: {} parameters", store.numel());
    let x = Tensor::uniform([32, dm], 1.0, &mut rng::stream(2, "example"));
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, 0);
    let xv = ctx.constant(x);
    let y = mamba_forward(&mut ctx, xv, &p)?;
    println!("output shape {:?}, first row {:?}", ctx.value(y).shape(), ctx.value(y).row(0));
    Ok(())
}
