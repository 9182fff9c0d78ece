//! Builds a small graph on the tape, backpropagates, and checks the result
//! against central differences.

use dualkanba::autodiff::{finite_diff_check, Tape, Tensor};

fn main() -> dualkanba::Result<()> {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]));
    let w = tape.param(Tensor::from_rows(&[vec![1.0, 0.0, -0.5], vec![0.3, 0.8, 0.1]]));
    let h = tape.matmul(x, w)?;
    let a = tape.silu(h)?;
    let p = tape.softmax_rows(a)?;
    let picked = tape.index(p, 1)?;
    let loss = tape.log(picked)?;

    println!("loss = {:.6}", tape.value(loss).item());
    let grads = tape.backward(loss)?;
    println!("dloss/dx = {:?}", grads.wrt(x).values());
    println!("dloss/dw = {:?}", grads.wrt(w).values());

    let params = [tape.value(x).clone(), tape.value(w).clone()];
    let report = finite_diff_check(&params, 1e-5, |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let a = t.silu(h)?;
        let p = t.softmax_rows(a)?;
        let picked = t.index(p, 1)?;
        t.log(picked)
    })?;
    println!(
        "finite differences: max relative error {:.2e} over {} entries",
        report.max_rel_error, report.entries_checked
    );
    Ok(())
}
