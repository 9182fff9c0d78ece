//! Selective state-space layer with a sequential scan.

use rand::Rng;

use crate::autodiff::{Function, Operand, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MambaConfig {
    pub d_state: usize,
    pub d_conv: usize,
    /// Inner width is `expand · d`.
    pub expand: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            d_state: 16,
            d_conv: 2,
            expand: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MambaParams {
    pub cfg: MambaConfig,
    pub d: usize,
    pub d_inner: usize,
    pub dt_rank: usize,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: ParamId,
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub skip: ParamId,
    pub out_proj: ParamId,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl MambaParams {
    pub fn init(init: &mut Init<'_>, d: usize, cfg: MambaConfig) -> Result<Self> {
        if cfg.d_state == 0 || cfg.d_conv == 0 || cfg.expand == 0 {
            return Err(Error::Config("mamba sizes must be at least 1".into()));
        }
        let e = cfg.expand * d;
        let r = (e / 16).max(1);
        let s = cfg.d_state;
        let mut rng = init.rng("dt_bias");
        let dt_bias: Vec<f64> = (0..e)
            .map(|_| inverse_softplus(rng.gen_range(1e-3f64.ln()..1e-1f64.ln()).exp()))
            .collect();
        let a_log: Vec<f64> = (0..e).flat_map(|_| (1..=s).map(|j| (j as f64).ln())).collect();
        Ok(MambaParams {
            cfg,
            d,
            d_inner: e,
            dt_rank: r,
            in_proj: init.xavier("in_proj", d, 2 * e),
            conv_w: init.uniform("conv_w", vec![cfg.d_conv, e], 1.0 / (cfg.d_conv as f64).sqrt()),
            conv_b: init.zeros("conv_b", vec![e]),
            x_proj: init.xavier("x_proj", e, r + 2 * s),
            dt_proj: init.uniform("dt_proj", vec![r, e], 1.0 / (r as f64).sqrt()),
            dt_bias: init.tensor("dt_bias", Tensor::new([e], dt_bias)?),
            a_log: init.tensor("a_log", Tensor::new([e, s], a_log)?),
            skip: init.full("skip", vec![e], 1.0),
            out_proj: init.xavier("out_proj", e, d),
        })
    }
}

/// Scan inputs as flat row-major slices: `u, delta: n×e`, `a: e×s`,
/// `b, c: n×s`, `d: e`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
}

/// Runs the zero-order-hold recurrence `h_t = exp(Δ_t A) ⊙ h_{t−1} + Δ_t B_t u_t`,
/// `y_t = C_t·h_t + D ⊙ u_t` from `h_0 = 0`. Returns `y` and every state
/// `h_1..h_n` (`n×e×s`).
pub fn scan(x: ScanInputs<'_>, n: usize, e: usize, s: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut y = vec![0.0; n * e];
    let mut states = vec![0.0; n * e * s];
    let mut h = vec![0.0; e * s];
    for t in 0..n {
        for ch in 0..e {
            let (u, dt) = (x.u[t * e + ch], x.delta[t * e + ch]);
            let mut acc = x.d[ch] * u;
            for j in 0..s {
                let hj = &mut h[ch * s + j];
                *hj = (dt * x.a[ch * s + j]).exp() * *hj + dt * x.b[t * s + j] * u;
                acc += x.c[t * s + j] * *hj;
            }
            y[t * e + ch] = acc;
        }
        if !y[t * e..(t + 1) * e].iter().chain(&h).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "selective scan",
                step: t,
            });
        }
        states[t * e * s..(t + 1) * e * s].copy_from_slice(&h);
    }
    Ok((y, states))
}

/// [`scan`] on tensors.
pub fn selective_scan(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let ((n, e), s) = (u.dims2(), a.dims2().1);
    let inputs = ScanInputs {
        u: u.values(),
        delta: delta.values(),
        a: a.values(),
        b: b.values(),
        c: c.values(),
        d: d.values(),
    };
    Tensor::new([n, e], scan(inputs, n, e, s)?.0)
}

/// Tape op over inputs `(u, Δ, A, B, C, D)`.
#[derive(Debug, Default)]
pub struct SelectiveScan {
    states: Vec<f64>,
}

impl Function for SelectiveScan {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn forward(&mut self, x: &[Operand<'_>]) -> Result<Tensor> {
        let shapes: Vec<&[usize]> = x.iter().map(|o| o.shape).collect();
        let bad = || Error::shape("selective_scan", &shapes, "expected u, Δ: n×e, A: e×s, B, C: n×s, D: e");
        if x.len() != 6 || x[..5].iter().any(|o| o.shape.len() != 2) {
            return Err(bad());
        }
        let (n, e) = x[0].dims2();
        let s = x[2].dims2().1;
        if x[1].dims2() != (n, e) || x[2].dims2() != (e, s) || x[3].dims2() != (n, s) || x[4].dims2() != (n, s) || x[5].values.len() != e {
            return Err(bad());
        }
        let inputs = ScanInputs {
            u: x[0].values,
            delta: x[1].values,
            a: x[2].values,
            b: x[3].values,
            c: x[4].values,
            d: x[5].values,
        };
        let (y, states) = scan(inputs, n, e, s)?;
        self.states = states;
        Tensor::new([n, e], y)
    }

    fn backward(&self, x: &[Operand<'_>], _y: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, e) = x[0].dims2();
        let s = x[2].dims2().1;
        let (u, delta, a, b, c, d) = (x[0].values, x[1].values, x[2].values, x[3].values, x[4].values, x[5].values);
        let mut du = vec![0.0; n * e];
        let mut ddelta = vec![0.0; n * e];
        let mut da = vec![0.0; e * s];
        let mut db = vec![0.0; n * s];
        let mut dc = vec![0.0; n * s];
        let mut dd = vec![0.0; e];
        // Gradient reaching h_t from later steps.
        let mut carry = vec![0.0; e * s];
        for t in (0..n).rev() {
            let h = &self.states[t * e * s..(t + 1) * e * s];
            for ch in 0..e {
                let gy = g[t * e + ch];
                let (ut, dt) = (u[t * e + ch], delta[t * e + ch]);
                dd[ch] += gy * ut;
                du[t * e + ch] += gy * d[ch];
                for j in 0..s {
                    let k = ch * s + j;
                    dc[t * s + j] += gy * h[k];
                    let dh = carry[k] + gy * c[t * s + j];
                    let abar = (dt * a[k]).exp();
                    let prev = if t == 0 { 0.0 } else { self.states[(t - 1) * e * s + k] };
                    let dabar = dh * prev * abar;
                    ddelta[t * e + ch] += dabar * a[k] + dh * b[t * s + j] * ut;
                    da[k] += dabar * dt;
                    db[t * s + j] += dh * dt * ut;
                    du[t * e + ch] += dh * dt * b[t * s + j];
                    carry[k] = dh * abar;
                }
            }
        }
        vec![Some(du), Some(ddelta), Some(da), Some(db), Some(dc), Some(dd)]
    }
}

pub fn mamba_forward(ctx: &mut Ctx<'_>, h: Var, p: &MambaParams) -> Result<Var> {
    let (_, d) = ctx.value(h).dims2();
    if d != p.d {
        return Err(Error::DimMismatch {
            stage: "mamba",
            expected: p.d,
            got: d,
        });
    }
    let (e, r, s) = (p.d_inner, p.dt_rank, p.cfg.d_state);
    let xz = ctx.tape.matmul(h, ctx.p(p.in_proj))?;
    let x = ctx.tape.slice_cols(xz, 0, e)?;
    let z = ctx.tape.slice_cols(xz, e, 2 * e)?;
    let x = ctx.tape.causal_depthwise_conv(x, ctx.p(p.conv_w), ctx.p(p.conv_b), p.cfg.d_conv)?;
    let x = ctx.tape.silu(x)?;
    let proj = ctx.tape.matmul(x, ctx.p(p.x_proj))?;
    let dt = ctx.tape.slice_cols(proj, 0, r)?;
    let b = ctx.tape.slice_cols(proj, r, r + s)?;
    let c = ctx.tape.slice_cols(proj, r + s, r + 2 * s)?;
    let dt = ctx.tape.matmul(dt, ctx.p(p.dt_proj))?;
    let dt = ctx.tape.add(dt, ctx.p(p.dt_bias))?;
    let delta = ctx.tape.softplus(dt)?;
    let a = ctx.tape.exp(ctx.p(p.a_log))?;
    let a = ctx.tape.scale(a, -1.0)?;
    let y = ctx.tape.apply_fn(SelectiveScan::default(), &[x, delta, a, b, c, ctx.p(p.skip)])?;
    let gate = ctx.tape.silu(z)?;
    let y = ctx.tape.mul(y, gate)?;
    ctx.tape.matmul(y, ctx.p(p.out_proj))
}
