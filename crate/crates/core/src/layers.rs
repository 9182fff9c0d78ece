//! Reusable blocks: cross-modal multi-head attention and the aspect
//! interaction front-ends, DyT, the B-spline KAN layer, convolutional gate
//! maps and the binary gated fusion.

use crate::autodiff::{Function, Operand, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId};

/// Multi-head attention projections. Head `i` owns columns
/// `i·d_h..(i+1)·d_h` of the query, key and value matrices.
#[derive(Debug, Clone)]
pub struct MhcaParams {
    pub heads: usize,
    pub d: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MhcaParams {
    pub fn init(init: &mut Init<'_>, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "d = {d} not divisible by {heads} heads");
        MhcaParams {
            heads,
            d,
            wq: init.xavier("wq", d, d),
            wk: init.xavier("wk", d, d),
            wv: init.xavier("wv", d, d),
            wo: init.xavier("wo", d, d),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Output of [`mhca_attend`]: the projected result plus each head's
/// `n_q×n_kv` attention weights.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention per head, `softmax(QKᵀ/√d_h)·V`, heads
/// concatenated and output-projected.
pub fn mhca_attend(ctx: &mut Ctx<'_>, q_seq: Var, kv_seq: Var, p: &MhcaParams) -> Result<Attended> {
    let (nq, dq) = ctx.value(q_seq).dims2();
    let (nkv, dkv) = ctx.value(kv_seq).dims2();
    if nq == 0 || nkv == 0 {
        return Err(Error::Empty("attention sequence"));
    }
    if dq != p.d || dkv != p.d {
        return Err(Error::DimMismatch {
            stage: "mhca",
            expected: p.d,
            got: if dq != p.d { dq } else { dkv },
        });
    }
    let q = ctx.tape.matmul(q_seq, ctx.p(p.wq))?;
    let k = ctx.tape.matmul(kv_seq, ctx.p(p.wk))?;
    let v = ctx.tape.matmul(kv_seq, ctx.p(p.wv))?;
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = ctx.tape.slice_cols(q, lo, hi)?;
        let kh = ctx.tape.slice_cols(k, lo, hi)?;
        let vh = ctx.tape.slice_cols(v, lo, hi)?;
        let kt = ctx.tape.transpose(kh)?;
        let logits = ctx.tape.matmul(qh, kt)?;
        let logits = ctx.tape.scale(logits, scale)?;
        let w = ctx.tape.softmax_rows(logits)?;
        heads.push(ctx.tape.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads.len() == 1 { heads[0] } else { ctx.tape.concat_cols(&heads)? };
    let output = ctx.tape.matmul(cat, ctx.p(p.wo))?;
    Ok(Attended { output, weights })
}

pub fn mhca_forward(ctx: &mut Ctx<'_>, q_seq: Var, kv_seq: Var, p: &MhcaParams) -> Result<Var> {
    Ok(mhca_attend(ctx, q_seq, kv_seq, p)?.output)
}

/// Fully connected layer `x·W + b`.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = init.scope(name);
        LinearParams {
            w: s.xavier("w", d_in, d_out),
            b: s.zeros("b", vec![d_out]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.w))?;
        ctx.tape.add(y, ctx.p(self.b))
    }
}

/// Cross-modal interaction: attention followed by a residual FC layer,
/// `FC(H̃) + H̃`.
///
/// With `query_residual`, the query sequence is added to the attention
/// output before the FC stage (the crossmodal-transformer residual); without
/// it, content reaches the output only through the attended values.
#[derive(Debug, Clone)]
pub struct InteractionParams {
    pub mhca: MhcaParams,
    pub fc: LinearParams,
    pub query_residual: bool,
}

impl InteractionParams {
    pub fn init(init: &mut Init<'_>, d: usize, heads: usize, query_residual: bool) -> Self {
        let mhca = MhcaParams::init(&mut init.scope("mhca"), d, heads);
        InteractionParams {
            mhca,
            fc: LinearParams::init(init, "fc", d, d),
            query_residual,
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, q_seq: Var, kv_seq: Var) -> Result<Var> {
        let mut attended = mhca_forward(ctx, q_seq, kv_seq, &self.mhca)?;
        if self.query_residual {
            attended = ctx.tape.add(attended, q_seq)?;
        }
        let fc = self.fc.forward(ctx, attended)?;
        ctx.tape.add(fc, attended)
    }
}

/// Aspect-textual interaction: sentence tokens query the aspect tokens.
/// Output keeps the sentence length.
pub fn ati_forward(ctx: &mut Ctx<'_>, sentence: Var, aspect: Var, p: &InteractionParams) -> Result<Var> {
    p.forward(ctx, sentence, aspect)
}

#[derive(Debug, Clone)]
pub struct AviParams {
    pub d_img: usize,
    pub proj: ParamId,
    pub interaction: InteractionParams,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

impl AviParams {
    pub fn init(init: &mut Init<'_>, d_img: usize, d: usize, heads: usize, query_residual: bool) -> Self {
        AviParams {
            d_img,
            proj: init.xavier("proj", d_img, d),
            interaction: InteractionParams::init(init, d, heads, query_residual),
            gate_w: init.xavier("gate_w", d, d),
            gate_b: init.zeros("gate_b", vec![d]),
        }
    }
}

/// Outputs of [`avi_attend`], exposed for inspection.
pub struct AviOutput {
    /// Interaction output before gating, `ti×d`.
    pub interacted: Var,
    /// Column-wise max over visual tokens, `1×d`.
    pub pooled: Var,
    /// `σ(pooled·W_G + b_G)`, `1×d`.
    pub gate: Var,
    /// Gate broadcast over every visual token, `ti×d`.
    pub gated: Var,
}

/// Aspect-visual interaction. Projected visual tokens query the
/// aspect-aware sentence; the max-pooled result drives a sigmoid gate that
/// filters every visual token.
pub fn avi_attend(ctx: &mut Ctx<'_>, h_as: Var, image: Var, p: &AviParams) -> Result<AviOutput> {
    let (_, d_img) = ctx.value(image).dims2();
    if d_img != p.d_img {
        return Err(Error::DimMismatch {
            stage: "avi",
            expected: p.d_img,
            got: d_img,
        });
    }
    let projected = ctx.tape.matmul(image, ctx.p(p.proj))?;
    let interacted = p.interaction.forward(ctx, projected, h_as)?;
    let pooled = ctx.tape.max_rows(interacted)?;
    let logits = ctx.tape.matmul(pooled, ctx.p(p.gate_w))?;
    let logits = ctx.tape.add(logits, ctx.p(p.gate_b))?;
    let gate = ctx.tape.sigmoid(logits)?;
    let gated = ctx.tape.mul(interacted, gate)?;
    Ok(AviOutput {
        interacted,
        pooled,
        gate,
        gated,
    })
}

pub fn avi_forward(ctx: &mut Ctx<'_>, h_as: Var, image: Var, p: &AviParams) -> Result<Var> {
    Ok(avi_attend(ctx, h_as, image, p)?.gated)
}

/// Dynamic tanh: `γ·tanh(α·x) + β` with a scalar `α`.
#[derive(Debug, Clone)]
pub struct DytParams {
    pub alpha: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl DytParams {
    pub fn init(init: &mut Init<'_>, d: usize) -> Self {
        DytParams {
            alpha: init.full("alpha", vec![1], 0.5),
            gamma: init.full("gamma", vec![d], 1.0),
            beta: init.zeros("beta", vec![d]),
        }
    }
}

pub fn dyt_forward(ctx: &mut Ctx<'_>, x: Var, p: &DytParams) -> Result<Var> {
    let ax = ctx.tape.mul(x, ctx.p(p.alpha))?;
    let t = ctx.tape.tanh(ax)?;
    let scaled = ctx.tape.mul(t, ctx.p(p.gamma))?;
    ctx.tape.add(scaled, ctx.p(p.beta))
}

/// Layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(init: &mut Init<'_>, d: usize) -> Self {
        LayerNormParams {
            gamma: init.full("gamma", vec![d], 1.0),
            beta: init.zeros("beta", vec![d]),
        }
    }
}

pub fn layer_norm_forward(ctx: &mut Ctx<'_>, x: Var, p: &LayerNormParams) -> Result<Var> {
    let n = ctx.tape.layer_norm_rows(x, 1e-5)?;
    let s = ctx.tape.mul(n, ctx.p(p.gamma))?;
    ctx.tape.add(s, ctx.p(p.beta))
}

/// Uniform knot grid for B-splines of degree `order` on `[lo, hi]` with
/// `intervals` cells, extended by `order` knots on each side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineGrid {
    pub lo: f64,
    pub hi: f64,
    pub intervals: usize,
    pub order: usize,
}

impl SplineGrid {
    pub fn new(lo: f64, hi: f64, intervals: usize, order: usize) -> Self {
        assert!(hi > lo && intervals > 0, "degenerate spline grid");
        SplineGrid {
            lo,
            hi,
            intervals,
            order,
        }
    }

    /// Basis functions per input, `intervals + order`.
    pub fn basis_len(&self) -> usize {
        self.intervals + self.order
    }

    pub fn knots(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / self.intervals as f64;
        (0..=self.intervals + 2 * self.order)
            .map(|i| self.lo + (i as f64 - self.order as f64) * h)
            .collect()
    }

    /// Cox-de Boor evaluation of every basis function at `x`, with
    /// derivatives when `deriv` is given. Zero outside the knot span.
    pub fn eval(&self, x: f64, out: &mut [f64], deriv: Option<&mut [f64]>) {
        let t = self.knots();
        let k = self.order;
        // Degree-0 indicators over half-open knot intervals.
        let mut b: Vec<f64> = (0..t.len() - 1)
            .map(|i| if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 })
            .collect();
        let mut prev = Vec::new();
        for p in 1..=k {
            prev.clone_from(&b);
            let len = t.len() - 1 - p;
            b.truncate(len);
            for i in 0..len {
                let left = (x - t[i]) / (t[i + p] - t[i]) * prev[i];
                let right = (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * prev[i + 1];
                b[i] = left + right;
            }
        }
        out.copy_from_slice(&b);
        if let Some(d) = deriv {
            if k == 0 {
                d.fill(0.0);
            } else {
                // `prev` holds the degree k−1 basis.
                let kf = k as f64;
                for i in 0..out.len() {
                    d[i] = kf * (prev[i] / (t[i + k] - t[i]) - prev[i + 1] / (t[i + k + 1] - t[i + 1]));
                }
            }
        }
    }
}

/// Expands `x: n×d_in` to its spline basis `n×(d_in·M)`, entry `i·M + m`
/// holding `B_m(x_i)`.
#[derive(Debug)]
pub struct BSplineBasis {
    grid: SplineGrid,
    deriv: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(grid: SplineGrid) -> Self {
        BSplineBasis {
            grid,
            deriv: Vec::new(),
        }
    }
}

impl Function for BSplineBasis {
    fn name(&self) -> &'static str {
        "bspline_basis"
    }

    fn forward(&mut self, x: &[Operand<'_>]) -> Result<Tensor> {
        let (n, d) = x[0].dims2();
        let m = self.grid.basis_len();
        let mut out = vec![0.0; n * d * m];
        self.deriv = vec![0.0; n * d * m];
        for (e, &v) in x[0].values.iter().enumerate() {
            let span = e * m..(e + 1) * m;
            self.grid.eval(v, &mut out[span.clone()], Some(&mut self.deriv[span]));
        }
        Tensor::new([n, d * m], out)
    }

    fn backward(&self, x: &[Operand<'_>], _y: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let m = self.grid.basis_len();
        let dx = (0..x[0].values.len())
            .map(|e| {
                let span = e * m..(e + 1) * m;
                crate::autodiff::kernels::dot(&g[span.clone()], &self.deriv[span])
            })
            .collect();
        vec![Some(dx)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KanConfig {
    pub grid_size: usize,
    pub order: usize,
    pub range: f64,
}

impl Default for KanConfig {
    fn default() -> Self {
        KanConfig {
            grid_size: 5,
            order: 3,
            range: 2.0,
        }
    }
}

impl KanConfig {
    pub fn grid(&self) -> SplineGrid {
        SplineGrid::new(-self.range, self.range, self.grid_size, self.order)
    }
}

/// KAN layer: edge `(i, j)` computes `w_b·silu(x_i) + Σ_m c_m·B_m(x_i)`,
/// summed over `i`. Spline coefficients are stored as a
/// `(d_in·M)×d_out` matrix, row `i·M + m`.
#[derive(Debug, Clone)]
pub struct KanParams {
    pub grid: SplineGrid,
    pub d_in: usize,
    pub d_out: usize,
    pub base: ParamId,
    pub coef: ParamId,
}

impl KanParams {
    pub fn init(init: &mut Init<'_>, d_in: usize, d_out: usize, cfg: &KanConfig) -> Self {
        let grid = cfg.grid();
        let m = grid.basis_len();
        KanParams {
            grid,
            d_in,
            d_out,
            base: init.xavier("base", d_in, d_out),
            coef: init.uniform("coef", vec![d_in * m, d_out], 0.1 / (d_in as f64).sqrt()),
        }
    }
}

pub fn kan_forward(ctx: &mut Ctx<'_>, x: Var, p: &KanParams) -> Result<Var> {
    let s = ctx.tape.silu(x)?;
    let base = ctx.tape.matmul(s, ctx.p(p.base))?;
    let basis = ctx.tape.apply_fn(BSplineBasis::new(p.grid), &[x])?;
    let spline = ctx.tape.matmul(basis, ctx.p(p.coef))?;
    ctx.tape.add(base, spline)
}

/// Two-layer perceptron `silu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
}

impl MlpParams {
    pub fn init(init: &mut Init<'_>, d_in: usize, hidden: usize, d_out: usize) -> Self {
        MlpParams {
            l1: LinearParams::init(init, "l1", d_in, hidden),
            l2: LinearParams::init(init, "l2", hidden, d_out),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.l1.forward(ctx, x)?;
        let h = ctx.tape.silu(h)?;
        self.l2.forward(ctx, h)
    }
}

/// Convolution kernel for a gate map; `width` must be odd.
#[derive(Debug, Clone)]
pub struct GateConvParams {
    pub width: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl GateConvParams {
    pub fn init(init: &mut Init<'_>, d: usize, width: usize) -> Self {
        assert!(width % 2 == 1, "gate kernel width must be odd");
        let fan = width * d;
        GateConvParams {
            width,
            w: init.uniform("w", vec![width * d, d], (6.0 / (fan + d) as f64).sqrt()),
            b: init.zeros("b", vec![d]),
        }
    }
}

/// `σ(conv(H))` with same padding along the sequence axis.
pub fn gate_map(ctx: &mut Ctx<'_>, h: Var, p: &GateConvParams) -> Result<Var> {
    let c = ctx.tape.conv1d_same(h, ctx.p(p.w), ctx.p(p.b), p.width)?;
    ctx.tape.sigmoid(c)
}

/// `G_a ⊙ H_a + (1 − G_a) ⊙ G_b ⊙ H_b`.
pub fn gated_fuse(ctx: &mut Ctx<'_>, h_a: Var, h_b: Var, g_a: Var, g_b: Var) -> Result<Var> {
    let shapes = [h_a, h_b, g_a, g_b].map(|v| ctx.tape.shape(v).to_vec());
    if shapes.iter().any(|s| s != &shapes[0]) {
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        return Err(Error::shape("gated_fuse", &refs, "all operands must share one shape"));
    }
    let first = ctx.tape.mul(g_a, h_a)?;
    let rest = ctx.tape.one_minus(g_a)?;
    let rest = ctx.tape.mul(rest, g_b)?;
    let rest = ctx.tape.mul(rest, h_b)?;
    ctx.tape.add(first, rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheck, Tape};
    use crate::params::{Mode, ParamStore};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn with_ctx<R>(store: &ParamStore, f: impl FnOnce(&mut Ctx<'_>) -> R) -> R {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval, 0);
        f(&mut ctx)
    }

    #[test]
    fn singleton_key_gets_full_weight() {
        let mut store = ParamStore::new();
        let p = MhcaParams::init(&mut Init::new(&mut store, 1), 4, 2);
        with_ctx(&store, |ctx| {
            let q = ctx.constant(rand_t(&[3, 4], 2));
            let kv = ctx.constant(rand_t(&[1, 4], 3));
            let att = mhca_attend(ctx, q, kv, &p).unwrap();
            for w in att.weights {
                assert!(ctx.value(w).values().iter().all(|&v| v == 1.0));
            }
        });
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut store = ParamStore::new();
        let p = MhcaParams::init(&mut Init::new(&mut store, 1), 4, 2);
        with_ctx(&store, |ctx| {
            let q = ctx.constant(rand_t(&[2, 4], 2));
            let row = rand_t(&[1, 4], 3);
            let kv = ctx.constant(Tensor::from_rows(&vec![row.values().to_vec(); 5]));
            let att = mhca_attend(ctx, q, kv, &p).unwrap();
            for w in att.weights {
                for &v in ctx.value(w).values() {
                    assert_abs_diff_eq!(v, 0.2, epsilon = 1e-15);
                }
            }
        });
    }

    #[test]
    fn logit_gap_of_ln3_gives_three_to_one() {
        // Single head, d = 1: logits are q·k·wq·wk/√1.
        let mut store = ParamStore::new();
        let p = MhcaParams::init(&mut Init::new(&mut store, 1), 1, 1);
        for id in [p.wq, p.wk, p.wv, p.wo] {
            store.fill(id, 1.0);
        }
        with_ctx(&store, |ctx| {
            let q = ctx.constant(Tensor::from_rows(&[vec![1.0]]));
            let kv = ctx.constant(Tensor::from_rows(&[vec![3f64.ln()], vec![0.0]]));
            let att = mhca_attend(ctx, q, kv, &p).unwrap();
            let w = ctx.value(att.weights[0]).values();
            assert_abs_diff_eq!(w[0], 0.75, epsilon = 1e-15);
            assert_abs_diff_eq!(w[1], 0.25, epsilon = 1e-15);
        });
    }

    #[test]
    fn empty_sequences_are_rejected() {
        let mut store = ParamStore::new();
        let p = MhcaParams::init(&mut Init::new(&mut store, 1), 4, 2);
        with_ctx(&store, |ctx| {
            let q = ctx.constant(rand_t(&[2, 4], 2));
            let kv = ctx.constant(rand_t(&[2, 3], 2));
            assert!(matches!(mhca_attend(ctx, q, kv, &p), Err(Error::DimMismatch { .. })));
        });
    }

    /// Straight-line attention + FC residual, no tape.
    fn ati_oracle(s: &Tensor, a: &Tensor, store: &ParamStore, p: &InteractionParams) -> Tensor {
        let mm = |x: &Tensor, w: &Tensor| {
            let (n, k) = x.dims2();
            let (_, m) = w.dims2();
            let mut out = vec![vec![0.0; m]; n];
            for i in 0..n {
                for j in 0..m {
                    out[i][j] = (0..k).map(|t| x.at(i, t) * w.at(t, j)).sum();
                }
            }
            Tensor::from_rows(&out)
        };
        let (d, h) = (p.mhca.d, p.mhca.heads);
        let dh = d / h;
        let q = mm(s, store.get(p.mhca.wq));
        let k = mm(a, store.get(p.mhca.wk));
        let v = mm(a, store.get(p.mhca.wv));
        let (ns, na) = (s.dims2().0, a.dims2().0);
        let mut cat = vec![vec![0.0; d]; ns];
        for head in 0..h {
            for i in 0..ns {
                let logits: Vec<f64> = (0..na)
                    .map(|j| (0..dh).map(|c| q.at(i, head * dh + c) * k.at(j, head * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    cat[i][head * dh + c] = (0..na).map(|j| e[j] / z * v.at(j, head * dh + c)).sum();
                }
            }
        }
        let mut att = mm(&Tensor::from_rows(&cat), store.get(p.mhca.wo));
        if p.query_residual {
            for (o, x) in att.values_mut().iter_mut().zip(s.values()) {
                *o += x;
            }
        }
        let fc = mm(&att, store.get(p.fc.w));
        let b = store.get(p.fc.b);
        let rows: Vec<Vec<f64>> = (0..ns)
            .map(|i| (0..d).map(|j| fc.at(i, j) + b.values()[j] + att.at(i, j)).collect())
            .collect();
        Tensor::from_rows(&rows)
    }

    #[test]
    fn ati_matches_straight_line_oracle() {
        for residual in [false, true] {
            let mut store = ParamStore::new();
            let p = InteractionParams::init(&mut Init::new(&mut store, 9), 6, 3, residual);
            store.set(p.fc.b, rand_t(&[6], 10));
            let s = rand_t(&[5, 6], 11);
            let a = rand_t(&[2, 6], 12);
            let got = with_ctx(&store, |ctx| {
                let sv = ctx.constant(s.clone());
                let av = ctx.constant(a.clone());
                let y = ati_forward(ctx, sv, av, &p).unwrap();
                ctx.value(y).clone()
            });
            let want = ati_oracle(&s, &a, &store, &p);
            assert!(got.max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn ati_with_zero_fc_is_attention_output() {
        let mut store = ParamStore::new();
        let p = InteractionParams::init(&mut Init::new(&mut store, 9), 4, 2, false);
        store.fill(p.fc.w, 0.0);
        with_ctx(&store, |ctx| {
            let s = ctx.constant(rand_t(&[5, 4], 1));
            let a = ctx.constant(rand_t(&[1, 4], 2));
            let y = ati_forward(ctx, s, a, &p).unwrap();
            let m = mhca_forward(ctx, s, a, &p.mhca).unwrap();
            assert_eq!(ctx.value(y), ctx.value(m));
            assert_eq!(ctx.value(y).dims2(), (5, 4));
        });
    }

    #[test]
    fn avi_gate_saturation() {
        let mut store = ParamStore::new();
        let p = AviParams::init(&mut Init::new(&mut store, 3), 6, 4, 2, true);
        store.fill(p.gate_w, 0.0);
        for (bias, expect_identity) in [(30.0, true), (-30.0, false)] {
            store.fill(p.gate_b, bias);
            with_ctx(&store, |ctx| {
                let h_as = ctx.constant(rand_t(&[5, 4], 1));
                let img = ctx.constant(rand_t(&[7, 6], 2));
                let out = avi_attend(ctx, h_as, img, &p).unwrap();
                let gated = ctx.value(out.gated);
                assert_eq!(gated.dims2(), (7, 4));
                let reference = if expect_identity {
                    ctx.value(out.interacted).clone()
                } else {
                    Tensor::zeros([7, 4])
                };
                assert!(gated.max_abs_diff(&reference) <= 1e-9);
            });
        }
    }

    #[test]
    fn avi_rejects_wrong_feature_dim() {
        let mut store = ParamStore::new();
        let p = AviParams::init(&mut Init::new(&mut store, 3), 6, 4, 2, true);
        with_ctx(&store, |ctx| {
            let h_as = ctx.constant(rand_t(&[5, 4], 1));
            let img = ctx.constant(rand_t(&[7, 5], 2));
            assert!(matches!(avi_forward(ctx, h_as, img, &p), Err(Error::DimMismatch { stage: "avi", .. })));
        });
    }

    #[test]
    fn dyt_closed_forms() {
        let mut store = ParamStore::new();
        let p = DytParams::init(&mut Init::new(&mut store, 1), 3);
        store.set(p.beta, Tensor::new([3], vec![0.1, -0.2, 0.3]).unwrap());
        with_ctx(&store, |ctx| {
            let z = ctx.constant(Tensor::zeros([2, 3]));
            let y = dyt_forward(ctx, z, &p).unwrap();
            assert_eq!(ctx.value(y).row(1), &[0.1, -0.2, 0.3]);
        });
        store.fill(p.beta, 0.0);
        with_ctx(&store, |ctx| {
            let x = ctx.constant(Tensor::full([1, 3], 2.0));
            let y = dyt_forward(ctx, x, &p).unwrap();
            assert_abs_diff_eq!(ctx.value(y).values()[0], 0.761594, epsilon = 1e-6);
        });
    }

    proptest! {
        #[test]
        fn dyt_is_bounded_and_odd(xs in proptest::collection::vec(-50.0f64..50.0, 4),
                                  gamma in proptest::collection::vec(-3.0f64..3.0, 4),
                                  beta in proptest::collection::vec(-3.0f64..3.0, 4),
                                  alpha in 0.01f64..4.0) {
            let mut store = ParamStore::new();
            let p = DytParams::init(&mut Init::new(&mut store, 1), 4);
            store.set(p.gamma, Tensor::new([4], gamma.clone()).unwrap());
            store.set(p.beta, Tensor::new([4], beta.clone()).unwrap());
            store.fill(p.alpha, alpha);
            let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
            let (pos_out, neg_out) = with_ctx(&store, |ctx| {
                let a = ctx.constant(Tensor::new([1, 4], xs.clone()).unwrap());
                let b = ctx.constant(Tensor::new([1, 4], neg).unwrap());
                let ya = dyt_forward(ctx, a, &p).unwrap();
                let yb = dyt_forward(ctx, b, &p).unwrap();
                (ctx.value(ya).clone(), ctx.value(yb).clone())
            });
            for j in 0..4 {
                let (u, v) = (pos_out.values()[j] - beta[j], neg_out.values()[j] - beta[j]);
                prop_assert!(u.abs() <= gamma[j].abs() + 1e-12);
                prop_assert!((u + v).abs() <= 1e-12);
            }
        }

        #[test]
        fn gate_outputs_lie_in_open_unit_interval(seed in 0u64..1000, n in 1usize..6) {
            let mut store = ParamStore::new();
            let p = GateConvParams::init(&mut Init::new(&mut store, seed), 3, 3);
            let g = with_ctx(&store, |ctx| {
                let h = ctx.constant(rand_t(&[n, 3], seed + 1));
                let g = gate_map(ctx, h, &p).unwrap();
                ctx.value(g).clone()
            });
            prop_assert!(g.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    /// Textbook de Boor evaluation of `Σ c_i B_i(x)` (degree `k`).
    fn de_boor(t: &[f64], c: &[f64], k: usize, x: f64) -> f64 {
        let Some(mut s) = (k..t.len() - k - 1).find(|&s| t[s] <= x && x < t[s + 1]) else {
            return 0.0;
        };
        if s >= c.len() {
            s = c.len() - 1;
        }
        let mut d: Vec<f64> = (0..=k).map(|j| c[j + s - k]).collect();
        for r in 1..=k {
            for j in (r..=k).rev() {
                let i = j + s - k;
                let alpha = (x - t[i]) / (t[i + k + 1 - r] - t[i]);
                d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j];
            }
        }
        d[k]
    }

    #[test]
    fn basis_matches_de_boor() {
        let grid = KanConfig::default().grid();
        let t = grid.knots();
        let m = grid.basis_len();
        let c: Vec<f64> = (0..m).map(|i| ((i as f64) * 0.7).sin()).collect();
        let mut b = vec![0.0; m];
        for x in [-1.9, -1.3, -0.5, 0.0, 0.2, 0.8, 1.7] {
            grid.eval(x, &mut b, None);
            let via_basis: f64 = b.iter().zip(&c).map(|(b, c)| b * c).sum();
            assert_abs_diff_eq!(via_basis, de_boor(&t, &c, grid.order, x), epsilon = 1e-12);
        }
        // Symmetric coefficients: the value at 0 is the weighted basis sum at the centre knot.
        let sym: Vec<f64> = (0..m).map(|i| 1.0 + (i as f64 - (m as f64 - 1.0) / 2.0).powi(2)).collect();
        grid.eval(0.0, &mut b, None);
        let at_zero: f64 = b.iter().zip(&sym).map(|(b, c)| b * c).sum();
        assert_abs_diff_eq!(at_zero, de_boor(&t, &sym, grid.order, 0.0), epsilon = 1e-12);
        // Partition of unity inside the grid.
        grid.eval(0.37, &mut b, None);
        assert_abs_diff_eq!(b.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_spline_interpolates_by_hand() {
        let grid = SplineGrid::new(-1.0, 1.0, 2, 1);
        let mut b = vec![0.0; 3];
        let c = [0.0, 1.0, 0.0];
        let phi = |x: f64, b: &mut Vec<f64>| {
            grid.eval(x, b, None);
            b.iter().zip(&c).map(|(b, c)| b * c).sum::<f64>()
        };
        assert_eq!(phi(0.5, &mut b), 0.5);
        assert_eq!(phi(0.0, &mut b), 1.0);
        assert_eq!(phi(-1.0, &mut b), 0.0);
        assert_eq!(phi(1.0, &mut b), 0.0);
        assert_eq!(phi(-0.25, &mut b), 0.75);
    }

    #[test]
    fn basis_is_zero_outside_knot_span() {
        let grid = KanConfig::default().grid();
        let mut b = vec![1.0; grid.basis_len()];
        grid.eval(10.0, &mut b, None);
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kan_without_splines_is_base_branch() {
        let mut store = ParamStore::new();
        let p = KanParams::init(&mut Init::new(&mut store, 4), 5, 3, &KanConfig::default());
        store.fill(p.coef, 0.0);
        let x = rand_t(&[4, 5], 8).values().iter().map(|v| v * 3.0).collect::<Vec<_>>();
        let x = Tensor::new([4, 5], x).unwrap();
        let got = with_ctx(&store, |ctx| {
            let xv = ctx.constant(x.clone());
            let y = kan_forward(ctx, xv, &p).unwrap();
            ctx.value(y).clone()
        });
        let wb = store.get(p.base);
        for i in 0..4 {
            for j in 0..3 {
                let want: f64 = (0..5).map(|k| wb.at(k, j) * crate::autodiff::kernels::silu(x.at(i, k))).sum();
                assert_abs_diff_eq!(got.at(i, j), want, epsilon = 1e-12);
            }
        }
        // Linear in the base weights.
        let doubled = Tensor::new(wb.shape(), wb.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        store.set(p.base, doubled);
        let got2 = with_ctx(&store, |ctx| {
            let xv = ctx.constant(x.clone());
            let y = kan_forward(ctx, xv, &p).unwrap();
            ctx.value(y).clone()
        });
        for (a, b) in got.values().iter().zip(got2.values()) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_edge_linear_kan() {
        let mut store = ParamStore::new();
        let cfg = KanConfig {
            grid_size: 2,
            order: 1,
            range: 1.0,
        };
        let p = KanParams::init(&mut Init::new(&mut store, 4), 1, 1, &cfg);
        store.fill(p.base, 0.0);
        store.set(p.coef, Tensor::new([3, 1], vec![0.0, 1.0, 0.0]).unwrap());
        with_ctx(&store, |ctx| {
            let x = ctx.constant(Tensor::new([3, 1], vec![0.5, 0.0, 1.0]).unwrap());
            let y = kan_forward(ctx, x, &p).unwrap();
            assert_eq!(ctx.value(y).values(), &[0.5, 1.0, 0.0]);
        });
    }

    #[test]
    fn gate_map_closed_forms() {
        let mut store = ParamStore::new();
        let p = GateConvParams::init(&mut Init::new(&mut store, 2), 3, 3);
        store.fill(p.w, 0.0);
        with_ctx(&store, |ctx| {
            let h = ctx.constant(rand_t(&[4, 3], 1));
            let g = gate_map(ctx, h, &p).unwrap();
            assert!(ctx.value(g).values().iter().all(|&v| v == 0.5));
        });
        store.fill(p.b, 30.0);
        with_ctx(&store, |ctx| {
            let h = ctx.constant(rand_t(&[4, 3], 1));
            let g = gate_map(ctx, h, &p).unwrap();
            assert!(ctx.value(g).values().iter().all(|&v| (1.0 - v) <= 1e-9));
        });
    }

    #[test]
    fn width_one_gate_is_pointwise_linear() {
        let mut store = ParamStore::new();
        let p = GateConvParams::init(&mut Init::new(&mut store, 2), 3, 1);
        store.set(p.b, rand_t(&[3], 5));
        let h = rand_t(&[4, 3], 1);
        let got = with_ctx(&store, |ctx| {
            let hv = ctx.constant(h.clone());
            let g = gate_map(ctx, hv, &p).unwrap();
            ctx.value(g).clone()
        });
        let (w, b) = (store.get(p.w), store.get(p.b));
        for i in 0..4 {
            for j in 0..3 {
                let z: f64 = (0..3).map(|k| h.at(i, k) * w.at(k, j)).sum::<f64>() + b.values()[j];
                assert_abs_diff_eq!(got.at(i, j), 1.0 / (1.0 + (-z).exp()), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gated_fuse_cases() {
        let store = ParamStore::new();
        with_ctx(&store, |ctx| {
            let ha = ctx.constant(rand_t(&[2, 3], 1));
            let hb = ctx.constant(rand_t(&[2, 3], 2));
            let one = ctx.constant(Tensor::full([2, 3], 1.0));
            let zero = ctx.constant(Tensor::zeros([2, 3]));
            let half = ctx.constant(Tensor::full([2, 3], 0.5));
            let y = gated_fuse(ctx, ha, hb, one, half).unwrap();
            assert_eq!(ctx.value(y), ctx.value(ha));
            let y = gated_fuse(ctx, ha, hb, zero, one).unwrap();
            assert_eq!(ctx.value(y), ctx.value(hb));
            let y = gated_fuse(ctx, ha, ha, half, half).unwrap();
            let want: Vec<f64> = ctx.value(ha).values().iter().map(|v| 0.75 * v).collect();
            for (a, b) in ctx.value(y).values().iter().zip(want) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
            }
            let bad = ctx.constant(Tensor::zeros([1, 3]));
            assert!(gated_fuse(ctx, ha, hb, bad, half).is_err());
        });
    }

    fn check_params<F>(store: &ParamStore, f: F) -> f64
    where
        F: Fn(&mut Ctx<'_>) -> Result<Var>,
    {
        let report = GradCheck::default()
            .run(store.tensors(), |tape, vars| {
                let mut ctx = Ctx::from_vars(tape, vars.to_vec(), Mode::Eval, 0);
                let y = f(&mut ctx)?;
                weighted_sum(&mut ctx, y)
            })
            .unwrap();
        report.max_rel_error
    }

    /// Σ w ⊙ y with fixed pseudo-random weights, keeping gradients O(1).
    fn weighted_sum(ctx: &mut Ctx<'_>, y: Var) -> Result<Var> {
        let shape = ctx.tape.shape(y).to_vec();
        let w = ctx.constant(Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(99)));
        let prod = ctx.tape.mul(y, w)?;
        ctx.tape.sum(prod)
    }

    #[test]
    fn layer_gradients() {
        let mut store = ParamStore::new();
        let (mhca, ati, avi, dyt, kan, gate) = {
            let mut init = Init::new(&mut store, 21);
            (
                MhcaParams::init(&mut init.scope("mhca"), 4, 2),
                InteractionParams::init(&mut init.scope("ati"), 4, 2, true),
                AviParams::init(&mut init.scope("avi"), 3, 4, 2, true),
                DytParams::init(&mut init.scope("dyt"), 4),
                KanParams::init(&mut init.scope("kan"), 4, 3, &KanConfig::default()),
                GateConvParams::init(&mut init.scope("gate"), 4, 3),
            )
        };
        let s = rand_t(&[5, 4], 1);
        let a = rand_t(&[2, 4], 2);
        let img = rand_t(&[3, 3], 3);
        let x = Tensor::new([5, 4], s.values().iter().map(|v| v * 1.7).collect()).unwrap();
        let cases: Vec<(&str, f64)> = vec![
            ("mhca", check_params(&store, |ctx| {
                let (q, kv) = (ctx.constant(s.clone()), ctx.constant(a.clone()));
                mhca_forward(ctx, q, kv, &mhca)
            })),
            ("ati", check_params(&store, |ctx| {
                let (q, kv) = (ctx.constant(s.clone()), ctx.constant(a.clone()));
                ati_forward(ctx, q, kv, &ati)
            })),
            ("avi", check_params(&store, |ctx| {
                let (h, i) = (ctx.constant(s.clone()), ctx.constant(img.clone()));
                avi_forward(ctx, h, i, &avi)
            })),
            ("dyt", check_params(&store, |ctx| {
                let xv = ctx.constant(x.clone());
                dyt_forward(ctx, xv, &dyt)
            })),
            ("kan", check_params(&store, |ctx| {
                let xv = ctx.constant(x.clone());
                kan_forward(ctx, xv, &kan)
            })),
            ("gate_map", check_params(&store, |ctx| {
                let xv = ctx.constant(x.clone());
                gate_map(ctx, xv, &gate)
            })),
        ];
        for (name, err) in cases {
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn kan_input_gradient() {
        let mut store = ParamStore::new();
        let p = KanParams::init(&mut Init::new(&mut store, 4), 3, 2, &KanConfig::default());
        let x = Tensor::new([2, 3], vec![-2.5, -1.1, 0.3, 0.9, 1.6, 2.2]).unwrap();
        let report = finite_diff_check(&[x], 1e-5, |tape, v| {
            let mut ctx = Ctx::new(tape, &store, Mode::Eval, 0);
            let y = kan_forward(&mut ctx, v[0], &p)?;
            weighted_sum(&mut ctx, y)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }
}
