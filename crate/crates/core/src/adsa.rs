//! Aspect-driven sparse attention: scope (compressed blocks), focus
//! (top-scoring raw blocks) and proximity (local window) branches mixed by
//! per-position sigmoid gates.

use crate::autodiff::{kernels, top_k_indices, Function, Operand, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::LinearParams;
use crate::params::{Ctx, Init, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proximity {
    /// The last `w` tokens, shared by every query.
    Suffix,
    /// A `w`-token window around each query, shifted to stay in bounds.
    Sliding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdsaConfig {
    pub block_len: usize,
    pub stride: usize,
    pub select_len: usize,
    pub n_select: usize,
    pub window: usize,
    pub heads: usize,
    pub proximity: Proximity,
    /// Scale logits by `1/√d_h` instead of `1/d_h`.
    pub sqrt_temperature: bool,
}

impl Default for AdsaConfig {
    fn default() -> Self {
        AdsaConfig {
            block_len: 4,
            stride: 2,
            select_len: 4,
            n_select: 2,
            window: 2,
            heads: 2,
            proximity: Proximity::Suffix,
            sqrt_temperature: false,
        }
    }
}

impl AdsaConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        let positive = [
            ("block_len", self.block_len),
            ("stride", self.stride),
            ("select_len", self.select_len),
            ("n_select", self.n_select),
            ("window", self.window),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("adsa.{name} must be at least 1")));
            }
        }
        if !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {d} is not divisible by {} heads", self.heads)));
        }
        Ok(())
    }

    /// Compressed block count for a length-`n` sequence.
    pub fn n_blocks(&self, n: usize) -> usize {
        if n >= self.block_len {
            (n - self.block_len) / self.stride + 1
        } else {
            0
        }
    }

    pub fn temperature(&self, d_h: usize) -> f64 {
        if self.sqrt_temperature {
            1.0 / (d_h as f64).sqrt()
        } else {
            1.0 / d_h as f64
        }
    }
}

/// Block compressor `φ`: rows of a block plus a learned in-block position
/// embedding, flattened, through one SiLU hidden layer.
#[derive(Debug, Clone)]
pub struct CompressorParams {
    pub block_len: usize,
    pub pos: ParamId,
    pub hidden: LinearParams,
    pub out: LinearParams,
}

#[derive(Debug, Clone)]
pub struct AdsaParams {
    pub cfg: AdsaConfig,
    pub d: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub compressor: CompressorParams,
    pub gate: LinearParams,
}

impl AdsaParams {
    pub fn init(init: &mut Init<'_>, d: usize, cfg: AdsaConfig) -> Result<Self> {
        cfg.validate(d)?;
        let dh = d / cfg.heads;
        let l = cfg.block_len;
        let compressor = {
            let mut s = init.scope("compress");
            CompressorParams {
                block_len: l,
                pos: s.uniform("pos", vec![l, dh], 0.1),
                hidden: LinearParams::init(&mut s, "hidden", l * dh, dh),
                out: LinearParams::init(&mut s, "out", dh, dh),
            }
        };
        Ok(AdsaParams {
            cfg,
            d,
            wq: init.xavier("wq", d, d),
            wk: init.xavier("wk", d, d),
            wv: init.xavier("wv", d, d),
            compressor,
            gate: LinearParams::init(init, "gate", d, 3),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.cfg.heads
    }
}

/// Compresses `x: n×d_h` into one row per block, `m×d_h`. `None` when the
/// sequence is shorter than one block.
pub fn compress(ctx: &mut Ctx<'_>, x: Var, cfg: &AdsaConfig, p: &CompressorParams) -> Result<Option<Var>> {
    let (n, dh) = ctx.value(x).dims2();
    let m = cfg.n_blocks(n);
    if m == 0 {
        return Ok(None);
    }
    let l = cfg.block_len;
    let rows: Vec<usize> = (0..m).flat_map(|j| j * cfg.stride..j * cfg.stride + l).collect();
    let tiles: Vec<usize> = (0..m).flat_map(|_| 0..l).collect();
    let blocks = ctx.tape.gather_rows(x, rows)?;
    let pos = ctx.tape.gather_rows(ctx.p(p.pos), tiles)?;
    let blocks = ctx.tape.add(blocks, pos)?;
    let flat = ctx.tape.reshape(blocks, [m, l * dh])?;
    let h = p.hidden.forward(ctx, flat)?;
    let h = ctx.tape.silu(h)?;
    Ok(Some(p.out.forward(ctx, h)?))
}

/// `(K̃, Ṽ)` for the scope branch.
pub fn compress_kv(ctx: &mut Ctx<'_>, k: Var, v: Var, cfg: &AdsaConfig, p: &CompressorParams) -> Result<Option<(Var, Var)>> {
    match (compress(ctx, k, cfg, p)?, compress(ctx, v, cfg, p)?) {
        (Some(kc), Some(vc)) => Ok(Some((kc, vc))),
        _ => Ok(None),
    }
}

/// Row-softmax of `q·K̃ᵀ·temperature`.
pub fn scope_scores(ctx: &mut Ctx<'_>, q: Var, kc: Var, temperature: f64) -> Result<Var> {
    let kt = ctx.tape.transpose(kc)?;
    let logits = ctx.tape.matmul(q, kt)?;
    let logits = ctx.tape.scale(logits, temperature)?;
    ctx.tape.softmax_rows(logits)
}

/// Selected block indices per query, from the `n×m` row-major scope scores.
///
/// When `select_len == block_len` the compressed blocks are selected
/// directly. Otherwise the sequence is cut into non-overlapping selection
/// blocks, each scored by the summed scores of the compressed blocks that
/// overlap it.
pub fn select_focus_blocks(scores: &[f64], n: usize, cfg: &AdsaConfig) -> Vec<Vec<usize>> {
    let m = cfg.n_blocks(n);
    if m == 0 {
        return vec![Vec::new(); n];
    }
    scores
        .chunks(m)
        .map(|row| {
            if cfg.select_len == cfg.block_len {
                top_k_indices(row, cfg.n_select)
            } else {
                let nb = n.div_ceil(cfg.select_len);
                let sel: Vec<f64> = (0..nb)
                    .map(|b| {
                        let (lo, hi) = (b * cfg.select_len, (b + 1) * cfg.select_len);
                        (0..m)
                            .filter(|&j| j * cfg.stride < hi && j * cfg.stride + cfg.block_len > lo)
                            .map(|j| row[j])
                            .sum()
                    })
                    .collect();
                top_k_indices(&sel, cfg.n_select)
            }
        })
        .collect()
}

/// Raw token indices covered by the selected blocks, concatenated in block
/// order. Overlapping blocks contribute their shared tokens twice.
pub fn focus_tokens(blocks: &[usize], n: usize, cfg: &AdsaConfig) -> Vec<usize> {
    let start = |b: usize| {
        if cfg.select_len == cfg.block_len {
            b * cfg.stride
        } else {
            b * cfg.select_len
        }
    };
    blocks
        .iter()
        .flat_map(|&b| start(b)..(start(b) + cfg.select_len).min(n))
        .collect()
}

/// Proximity token indices for every query.
pub fn proximity_indices(n: usize, cfg: &AdsaConfig) -> Vec<Vec<usize>> {
    let w = cfg.window.min(n);
    match cfg.proximity {
        Proximity::Suffix => vec![(n - w..n).collect(); n],
        Proximity::Sliding => (0..n)
            .map(|i| {
                let start = i.saturating_sub(cfg.window / 2).min(n - w);
                (start..start + w).collect()
            })
            .collect(),
    }
}

/// Softmax attention where query `i` sees only the key/value rows listed in
/// `index[i]`.
#[derive(Debug)]
pub struct IndexedAttention {
    index: Vec<Vec<usize>>,
    temperature: f64,
    weights: Vec<Vec<f64>>,
}

impl IndexedAttention {
    pub fn new(index: Vec<Vec<usize>>, temperature: f64) -> Self {
        IndexedAttention {
            index,
            temperature,
            weights: Vec::new(),
        }
    }
}

impl Function for IndexedAttention {
    fn name(&self) -> &'static str {
        "indexed_attention"
    }

    fn forward(&mut self, x: &[Operand<'_>]) -> Result<Tensor> {
        let (n, dh) = x[0].dims2();
        let (nk, dk) = x[1].dims2();
        if dk != dh || x[2].dims2() != (nk, dh) || self.index.len() != n {
            return Err(Error::shape(
                self.name(),
                &[x[0].shape, x[1].shape, x[2].shape],
                format!("{} index lists for {n} queries", self.index.len()),
            ));
        }
        if self.index.iter().flatten().any(|&j| j >= nk) || self.index.iter().any(Vec::is_empty) {
            return Err(Error::shape(self.name(), &[x[1].shape], "index list empty or out of range"));
        }
        let (q, k, v) = (x[0].values, x[1].values, x[2].values);
        let mut out = vec![0.0; n * dh];
        self.weights = self
            .index
            .iter()
            .enumerate()
            .map(|(i, idx)| {
                let qi = &q[i * dh..(i + 1) * dh];
                let mut w: Vec<f64> = idx
                    .iter()
                    .map(|&j| kernels::dot(qi, &k[j * dh..(j + 1) * dh]) * self.temperature)
                    .collect();
                kernels::softmax_in_place(&mut w);
                let oi = &mut out[i * dh..(i + 1) * dh];
                for (&j, &a) in idx.iter().zip(&w) {
                    for (o, vv) in oi.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
                        *o += a * vv;
                    }
                }
                w
            })
            .collect();
        Tensor::new([n, dh], out)
    }

    fn backward(&self, x: &[Operand<'_>], _y: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let dh = x[0].dims2().1;
        let (q, k, v) = (x[0].values, x[1].values, x[2].values);
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        for (i, (idx, w)) in self.index.iter().zip(&self.weights).enumerate() {
            let gi = &g[i * dh..(i + 1) * dh];
            let dw: Vec<f64> = idx.iter().map(|&j| kernels::dot(gi, &v[j * dh..(j + 1) * dh])).collect();
            let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for ((&j, &a), &dwj) in idx.iter().zip(w).zip(&dw) {
                let dl = a * (dwj - mean) * self.temperature;
                for c in 0..dh {
                    dv[j * dh + c] += a * gi[c];
                    dq[i * dh + c] += dl * k[j * dh + c];
                    dk[j * dh + c] += dl * q[i * dh + c];
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }
}

/// Attention of every query over the rows listed for it.
pub fn branch_attention(ctx: &mut Ctx<'_>, q: Var, k: Var, v: Var, index: Vec<Vec<usize>>, temperature: f64) -> Result<Var> {
    ctx.tape.apply_fn(IndexedAttention::new(index, temperature), &[q, k, v])
}

/// Per-query key/value counts of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdsaStats {
    pub n: usize,
    pub compressed: usize,
    /// Largest focus-branch token count over queries.
    pub selected: usize,
    /// Largest proximity-branch token count over queries.
    pub window: usize,
    /// Largest total attended count over queries.
    pub attended: usize,
    pub attended_mean: f64,
}

pub struct AdsaOutput {
    pub output: Var,
    /// `n×3` gates in branch order scope, focus, proximity.
    pub gates: Var,
    /// Scope scores for each head, when any block exists.
    pub scope_scores: Vec<Var>,
    pub stats: AdsaStats,
}

pub fn adsa_forward(ctx: &mut Ctx<'_>, h: Var, p: &AdsaParams) -> Result<Var> {
    Ok(adsa_attend(ctx, h, p)?.output)
}

pub fn adsa_attend(ctx: &mut Ctx<'_>, h: Var, p: &AdsaParams) -> Result<AdsaOutput> {
    let cfg = &p.cfg;
    let (n, d) = ctx.value(h).dims2();
    if d != p.d {
        return Err(Error::DimMismatch {
            stage: "adsa",
            expected: p.d,
            got: d,
        });
    }
    let dh = p.head_dim();
    let temp = cfg.temperature(dh);
    let gate_logits = p.gate.forward(ctx, h)?;
    let gates = ctx.tape.sigmoid(gate_logits)?;
    let g: Vec<Var> = (0..3).map(|c| ctx.tape.slice_cols(gates, c, c + 1)).collect::<Result<_>>()?;

    let q = ctx.tape.matmul(h, ctx.p(p.wq))?;
    let k = ctx.tape.matmul(h, ctx.p(p.wk))?;
    let v = ctx.tape.matmul(h, ctx.p(p.wv))?;
    let prox = proximity_indices(n, cfg);
    let m = cfg.n_blocks(n);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut scope = Vec::new();
    let mut focus_counts = vec![0; n];
    for head in 0..cfg.heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let qh = ctx.tape.slice_cols(q, lo, hi)?;
        let kh = ctx.tape.slice_cols(k, lo, hi)?;
        let vh = ctx.tape.slice_cols(v, lo, hi)?;

        let prx = branch_attention(ctx, qh, kh, vh, prox.clone(), temp)?;
        let mut out = ctx.tape.mul(prx, g[2])?;

        if let Some((kc, vc)) = compress_kv(ctx, kh, vh, cfg, &p.compressor)? {
            let probs = scope_scores(ctx, qh, kc, temp)?;
            let scp = ctx.tape.matmul(probs, vc)?;
            let scp = ctx.tape.mul(scp, g[0])?;
            out = ctx.tape.add(out, scp)?;

            let values = ctx.value(probs).values().to_vec();
            let blocks = ctx.select(|| select_focus_blocks(&values, n, cfg));
            let tokens: Vec<Vec<usize>> = blocks.iter().map(|b| focus_tokens(b, n, cfg)).collect();
            for (c, t) in focus_counts.iter_mut().zip(&tokens) {
                *c = t.len();
            }
            let fcs = branch_attention(ctx, qh, kh, vh, tokens, temp)?;
            let fcs = ctx.tape.mul(fcs, g[1])?;
            out = ctx.tape.add(out, fcs)?;
            scope.push(probs);
        }
        heads.push(out);
    }
    let output = if heads.len() == 1 { heads[0] } else { ctx.tape.concat_cols(&heads)? };

    let totals: Vec<usize> = (0..n).map(|i| m + focus_counts[i] + prox[i].len()).collect();
    let stats = AdsaStats {
        n,
        compressed: m,
        selected: focus_counts.iter().copied().max().unwrap_or(0),
        window: prox.iter().map(Vec::len).max().unwrap_or(0),
        attended: totals.iter().copied().max().unwrap_or(0),
        attended_mean: totals.iter().sum::<usize>() as f64 / n as f64,
    };
    Ok(AdsaOutput {
        output,
        gates,
        scope_scores: scope,
        stats,
    })
}
