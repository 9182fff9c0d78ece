//! Attended key/value counts and wall-clock cost of block sparse attention
//! against dense attention over a range of sequence lengths.

use std::io::Write;
use std::time::Instant;

use crate::adsa::{adsa_attend, AdsaConfig, AdsaParams, IndexedAttention};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::{Ctx, Init, Mode, ParamStore};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub ts: usize,
    pub compressed: usize,
    pub selected: usize,
    pub window: usize,
    /// Largest per-query attended count.
    pub attended_kv: usize,
    pub attended_mean: f64,
    pub dense_kv: usize,
    /// Attended count summed over queries.
    pub total_attended: f64,
    pub total_dense: usize,
    pub sparse_ms: f64,
    pub dense_ms: f64,
}

pub const HEADER: [&str; 11] = [
    "ts",
    "compressed",
    "selected",
    "window",
    "attended_kv",
    "attended_mean",
    "dense_kv",
    "total_attended",
    "total_dense",
    "sparse_ms",
    "dense_ms",
];

fn dense(ctx: &mut Ctx<'_>, h: Var, p: &AdsaParams) -> Result<Var> {
    let n = ctx.value(h).dims2().0;
    let dh = p.d / p.cfg.heads;
    let (wq, wk, wv) = (ctx.p(p.wq), ctx.p(p.wk), ctx.p(p.wv));
    let q = ctx.tape.matmul(h, wq)?;
    let k = ctx.tape.matmul(h, wk)?;
    let v = ctx.tape.matmul(h, wv)?;
    let heads = (0..p.cfg.heads)
        .map(|i| {
            let cols = |t: &mut Tape, x| t.slice_cols(x, i * dh, (i + 1) * dh);
            let (qh, kh, vh) = (cols(ctx.tape, q)?, cols(ctx.tape, k)?, cols(ctx.tape, v)?);
            let index = vec![(0..n).collect(); n];
            ctx.tape.apply_fn(IndexedAttention::new(index, p.cfg.temperature(dh)), &[qh, kh, vh])
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.tape.concat_cols(&heads)
}

fn time_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

/// One row per sequence length. Timings average `reps` forward passes and
/// are skipped (left at zero) when `reps` is zero.
pub fn sparsity_sweep(d: usize, cfg: AdsaConfig, lengths: &[usize], seed: u64, reps: usize) -> Result<Vec<BenchRow>> {
    let mut store = ParamStore::new();
    let p = AdsaParams::init(&mut Init::new(&mut store, seed), d, cfg)?;
    lengths
        .iter()
        .map(|&ts| {
            let x = Tensor::uniform([ts, d], 1.0, &mut rng::stream(seed, &format!("bench.input.{ts}")));
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, 0);
            let h = ctx.constant(x.clone());
            let stats = adsa_attend(&mut ctx, h, &p)?.stats;
            let (mut sparse_ms, mut dense_ms) = (0.0, 0.0);
            if reps > 0 {
                let run = |f: fn(&mut Ctx<'_>, Var, &AdsaParams) -> Result<Var>| {
                    let mut tape = Tape::new();
                    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, 0);
                    let h = ctx.constant(x.clone());
                    f(&mut ctx, h, &p).map(|_| ())
                };
                sparse_ms = time_ms(reps, || run(|c, h, p| adsa_attend(c, h, p).map(|o| o.output)))?;
                dense_ms = time_ms(reps, || run(dense))?;
            }
            Ok(BenchRow {
                ts,
                compressed: stats.compressed,
                selected: stats.selected,
                window: stats.window,
                attended_kv: stats.attended,
                attended_mean: stats.attended_mean,
                dense_kv: ts,
                total_attended: stats.attended_mean * ts as f64,
                total_dense: ts * ts,
                sparse_ms,
                dense_ms,
            })
        })
        .collect()
}

pub fn write_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER).map_err(crate::trainer::csv_error)?;
    for r in rows {
        w.write_record([
            r.ts.to_string(),
            r.compressed.to_string(),
            r.selected.to_string(),
            r.window.to_string(),
            r.attended_kv.to_string(),
            format!("{:.4}", r.attended_mean),
            r.dense_kv.to_string(),
            format!("{:.1}", r.total_attended),
            r.total_dense.to_string(),
            format!("{:.4}", r.sparse_ms),
            format!("{:.4}", r.dense_ms),
        ])
        .map_err(crate::trainer::csv_error)?;
    }
    w.flush()?;
    Ok(())
}
