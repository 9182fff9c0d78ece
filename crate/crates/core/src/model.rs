//! The end-to-end DualKanbaFormer: aspect interactions, stacked textual and
//! visual KanbaFormer layers, multimodal gated fusion and the classifier.

use std::io::{Read, Write};
use std::path::Path;

use crate::adsa::{adsa_forward, AdsaConfig, AdsaParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Sample, N_CLASSES};
use crate::error::{Error, Result};
use crate::layers::{
    ati_forward, avi_forward, dyt_forward, gate_map, gated_fuse, kan_forward, layer_norm_forward, AviParams,
    DytParams, GateConvParams, InteractionParams, KanConfig, KanParams, LayerNormParams, LinearParams, MlpParams,
};
use crate::mamba::{mamba_forward, MambaConfig, MambaParams};
use crate::params::{Ctx, Init, Mode, ParamId, ParamStore};

/// Replacement for a gated fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    #[default]
    Gated,
    /// Two-layer perceptron over the concatenated inputs.
    Ffn,
    Sum,
}

/// Structural ablations. The default is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablations {
    pub no_mamba: bool,
    pub no_kanformer: bool,
    /// Perceptron of matched parameter count in place of the KAN layer.
    pub kan_to_ffn: bool,
    /// Layer normalization in place of DyT.
    pub dyt_to_layernorm: bool,
    pub intra_fusion: Fusion,
    pub multi_fusion: Fusion,
    /// Drop the visual path; the classifier sees only the pooled text.
    pub text_only: bool,
}

impl Ablations {
    pub const COMPONENTS: [&'static str; 7] = ["mamba", "kanformer", "kan", "dyt", "intra-fusion", "multi-fusion", "visual"];

    /// The full model with one named component removed or substituted.
    pub fn without(component: &str) -> Result<Self> {
        let mut a = Ablations::default();
        match component {
            "mamba" => a.no_mamba = true,
            "kanformer" => a.no_kanformer = true,
            "kan" => a.kan_to_ffn = true,
            "dyt" => a.dyt_to_layernorm = true,
            "intra-fusion" => a.intra_fusion = Fusion::Ffn,
            "multi-fusion" => a.multi_fusion = Fusion::Ffn,
            "visual" => a.text_only = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown component `{other}` (expected one of {})",
                    Self::COMPONENTS.join(", ")
                )))
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Width of the input token features.
    pub d_in: usize,
    pub d: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub adsa: AdsaConfig,
    pub mamba: MambaConfig,
    pub kan: KanConfig,
    pub dropout: f64,
    /// Add the query sequence back onto the cross-attention output.
    pub query_residual: bool,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 32,
            d: 32,
            heads: 2,
            n_layers: 2,
            adsa: AdsaConfig::default(),
            mamba: MambaConfig::default(),
            kan: KanConfig::default(),
            dropout: 0.5,
            query_residual: true,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.d == 0 || self.d_in == 0 {
            return Err(Error::Config("dimensions must be at least 1".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.ablations.no_mamba && self.ablations.no_kanformer {
            return Err(Error::Config("cannot remove both mamba and kanformer".into()));
        }
        AdsaConfig {
            heads: self.heads,
            ..self.adsa
        }
        .validate(self.d)
    }
}

#[derive(Debug, Clone)]
enum Norm {
    Dyt(DytParams),
    LayerNorm(LayerNormParams),
}

impl Norm {
    fn init(init: &mut Init<'_>, d: usize, layer_norm: bool) -> Self {
        if layer_norm {
            Norm::LayerNorm(LayerNormParams::init(init, d))
        } else {
            Norm::Dyt(DytParams::init(init, d))
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Norm::Dyt(p) => dyt_forward(ctx, x, p),
            Norm::LayerNorm(p) => layer_norm_forward(ctx, x, p),
        }
    }
}

#[derive(Debug, Clone)]
enum FeedForward {
    Kan(KanParams),
    Ffn(MlpParams),
}

/// Hidden width giving a `d→h→d` perceptron the parameter count of a
/// `d→d` KAN layer.
pub fn matched_ffn_hidden(d: usize, kan: &KanConfig) -> usize {
    let kan_params = d * d * (1 + kan.grid().basis_len());
    (((kan_params - d) as f64 / (2 * d + 1) as f64).round() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct KanFormerParams {
    adsa: AdsaParams,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

impl KanFormerParams {
    pub fn init(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        let adsa_cfg = AdsaConfig {
            heads: cfg.heads,
            ..cfg.adsa
        };
        let ab = &cfg.ablations;
        Ok(KanFormerParams {
            adsa: AdsaParams::init(&mut init.scope("adsa"), d, adsa_cfg)?,
            norm1: Norm::init(&mut init.scope("norm1"), d, ab.dyt_to_layernorm),
            ffn: if ab.kan_to_ffn {
                FeedForward::Ffn(MlpParams::init(&mut init.scope("ffn"), d, matched_ffn_hidden(d, &cfg.kan), d))
            } else {
                FeedForward::Kan(KanParams::init(&mut init.scope("kan"), d, d, &cfg.kan))
            },
            norm2: Norm::init(&mut init.scope("norm2"), d, ab.dyt_to_layernorm),
        })
    }

    pub fn adsa(&self) -> &AdsaParams {
        &self.adsa
    }

    /// The KAN layer, unless it was ablated away.
    pub fn kan(&self) -> Option<&KanParams> {
        match &self.ffn {
            FeedForward::Kan(p) => Some(p),
            FeedForward::Ffn(_) => None,
        }
    }

    /// The two DyT stages, unless they were ablated away.
    pub fn dyts(&self) -> Option<(&DytParams, &DytParams)> {
        match (&self.norm1, &self.norm2) {
            (Norm::Dyt(a), Norm::Dyt(b)) => Some((a, b)),
            _ => None,
        }
    }
}

/// `y1 = norm(ADSA(H) + H)`, `y2 = norm(KAN(y1) + y1)`.
pub fn kanformer_block(ctx: &mut Ctx<'_>, h: Var, p: &KanFormerParams) -> Result<Var> {
    let a = adsa_forward(ctx, h, &p.adsa)?;
    let a = ctx.tape.add(a, h)?;
    let y1 = p.norm1.forward(ctx, a)?;
    let f = match &p.ffn {
        FeedForward::Kan(k) => kan_forward(ctx, y1, k)?,
        FeedForward::Ffn(m) => m.forward(ctx, y1)?,
    };
    let f = ctx.tape.add(f, y1)?;
    p.norm2.forward(ctx, f)
}

#[derive(Debug, Clone)]
enum FusionParams {
    Gated { ga: GateConvParams, gb: GateConvParams },
    Ffn(MlpParams),
    Sum,
}

impl FusionParams {
    fn init(init: &mut Init<'_>, d: usize, kind: Fusion, width: usize) -> Self {
        match kind {
            Fusion::Gated => FusionParams::Gated {
                ga: GateConvParams::init(&mut init.scope("gate_a"), d, width),
                gb: GateConvParams::init(&mut init.scope("gate_b"), d, width),
            },
            Fusion::Ffn => FusionParams::Ffn(MlpParams::init(&mut init.scope("ffn"), 2 * d, d, d)),
            Fusion::Sum => FusionParams::Sum,
        }
    }

    /// `G_a ⊙ a + (1 − G_a) ⊙ G_b ⊙ b` for the gated variant.
    fn forward(&self, ctx: &mut Ctx<'_>, a: Var, b: Var) -> Result<Var> {
        match self {
            FusionParams::Gated { ga, gb } => {
                let g_a = gate_map(ctx, a, ga)?;
                let g_b = gate_map(ctx, b, gb)?;
                gated_fuse(ctx, a, b, g_a, g_b)
            }
            FusionParams::Ffn(m) => {
                let cat = ctx.tape.concat_cols(&[a, b])?;
                m.forward(ctx, cat)
            }
            FusionParams::Sum => ctx.tape.add(a, b),
        }
    }
}

/// One KanbaFormer layer: KanFormer and Mamba paths on the same input,
/// fused intra-modally.
#[derive(Debug, Clone)]
pub struct KanbaLayer {
    pub kanformer: Option<KanFormerParams>,
    pub mamba: Option<MambaParams>,
    fusion: FusionParams,
}

impl KanbaLayer {
    pub fn init(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let ab = &cfg.ablations;
        let kanformer = match ab.no_kanformer {
            true => None,
            false => Some(KanFormerParams::init(&mut init.scope("kanformer"), cfg)?),
        };
        let mamba = match ab.no_mamba {
            true => None,
            false => Some(MambaParams::init(&mut init.scope("mamba"), cfg.d, cfg.mamba)?),
        };
        let fusion = match kanformer.is_some() && mamba.is_some() {
            true => FusionParams::init(&mut init.scope("fusion"), cfg.d, ab.intra_fusion, 3),
            false => FusionParams::Sum,
        };
        Ok(KanbaLayer {
            kanformer,
            mamba,
            fusion,
        })
    }

    /// `(G_K, G_M)` when the fusion is gated.
    pub fn fusion_gates(&self) -> Option<(&GateConvParams, &GateConvParams)> {
        match &self.fusion {
            FusionParams::Gated { ga, gb } => Some((ga, gb)),
            _ => None,
        }
    }
}

pub fn kanba_layer(ctx: &mut Ctx<'_>, h: Var, p: &KanbaLayer) -> Result<Var> {
    let hk = p.kanformer.as_ref().map(|k| kanformer_block(ctx, h, k)).transpose()?;
    let hm = p.mamba.as_ref().map(|m| mamba_forward(ctx, h, m)).transpose()?;
    match (hk, hm) {
        (Some(hk), Some(hm)) => p.fusion.forward(ctx, hk, hm),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => unreachable!("validated config keeps one path"),
    }
}

/// Stacked layers, each feeding the next.
pub fn kanbaformer_forward(ctx: &mut Ctx<'_>, h: Var, layers: &[KanbaLayer]) -> Result<Var> {
    layers.iter().try_fold(h, |h, l| kanba_layer(ctx, h, l))
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub text_in: Option<ParamId>,
    pub aspect_in: Option<ParamId>,
    pub ati: InteractionParams,
    pub avi: Option<AviParams>,
    pub text: Vec<KanbaLayer>,
    pub visual: Vec<KanbaLayer>,
    multi: Option<FusionParams>,
    pub classifier: LinearParams,
}

impl ModelParams {
    /// `(G_V, G_T)` of the gated multimodal fusion.
    pub fn multimodal_gates(&self) -> Option<(&GateConvParams, &GateConvParams)> {
        match &self.multi {
            Some(FusionParams::Gated { ga, gb }) => Some((ga, gb)),
            _ => None,
        }
    }
}

/// Intermediate results of one forward pass.
pub struct Trace {
    pub h_as: Var,
    pub h_gi: Option<Var>,
    pub h_t: Var,
    pub h_v: Option<Var>,
    pub h_c: Var,
    pub logits: Var,
}

/// Model configuration, parameters and their layout.
#[derive(Debug, Clone)]
pub struct DualKanbaFormer {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub parts: ModelParams,
}

impl DualKanbaFormer {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let (d, d_in) = (cfg.d, cfg.d_in);
        let ab = cfg.ablations;
        let project = d_in != d;
        let text_in = project.then(|| init.xavier("text.in", d_in, d));
        let aspect_in = project.then(|| init.xavier("aspect.in", d_in, d));
        let ati = InteractionParams::init(&mut init.scope("ati"), d, cfg.heads, cfg.query_residual);
        let avi = (!ab.text_only).then(|| AviParams::init(&mut init.scope("avi"), d_in, d, cfg.heads, cfg.query_residual));
        let stack = |init: &mut Init<'_>, path: &str| -> Result<Vec<KanbaLayer>> {
            (0..cfg.n_layers)
                .map(|i| KanbaLayer::init(&mut init.scope(&format!("{path}.layer{i}")), &cfg))
                .collect()
        };
        let text = stack(&mut init, "text")?;
        let visual = if ab.text_only { Vec::new() } else { stack(&mut init, "visual")? };
        let multi = (!ab.text_only).then(|| FusionParams::init(&mut init.scope("multi"), d, ab.multi_fusion, 1));
        let classifier = LinearParams::init(&mut init, "classifier", d, N_CLASSES);
        let parts = ModelParams {
            text_in,
            aspect_in,
            ati,
            avi,
            text,
            visual,
            multi,
            classifier,
        };
        Ok(DualKanbaFormer { cfg, store, parts })
    }

    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        for (stage, t) in [("text input", &s.text), ("visual input", &s.visual), ("aspect input", &s.aspect)] {
            let got = t.dims2().1;
            if got != self.cfg.d_in {
                return Err(Error::DimMismatch {
                    stage,
                    expected: self.cfg.d_in,
                    got,
                });
            }
        }
        Ok(())
    }

    /// Runs the full pipeline on one sample, returning `1×3` logits and the
    /// intermediate representations.
    pub fn trace(&self, ctx: &mut Ctx<'_>, s: &Sample) -> Result<Trace> {
        self.check_sample(s)?;
        let p = &self.parts;
        let mut text = ctx.constant(s.text.clone());
        let mut aspect = ctx.constant(s.aspect.clone());
        if let (Some(ti), Some(ai)) = (p.text_in, p.aspect_in) {
            text = ctx.tape.matmul(text, ctx.p(ti))?;
            aspect = ctx.tape.matmul(aspect, ctx.p(ai))?;
        }
        let h_as = ati_forward(ctx, text, aspect, &p.ati)?;
        let h_text = kanbaformer_forward(ctx, h_as, &p.text)?;
        let h_t = ctx.tape.mean_rows(h_text)?;
        let (h_gi, h_v, h_c) = match (&p.avi, &p.multi) {
            (Some(avi), Some(multi)) => {
                let image = ctx.constant(s.visual.clone());
                let h_gi = avi_forward(ctx, h_as, image, avi)?;
                let h_vis = kanbaformer_forward(ctx, h_gi, &p.visual)?;
                let h_v = ctx.tape.mean_rows(h_vis)?;
                let h_c = multi.forward(ctx, h_v, h_t)?;
                (Some(h_gi), Some(h_v), h_c)
            }
            _ => (None, None, h_t),
        };
        let dropped = ctx.dropout(h_c, self.cfg.dropout)?;
        let logits = p.classifier.forward(ctx, dropped)?;
        Ok(Trace {
            h_as,
            h_gi,
            h_t,
            h_v,
            h_c,
            logits,
        })
    }

    pub fn logits(&self, ctx: &mut Ctx<'_>, s: &Sample) -> Result<Var> {
        Ok(self.trace(ctx, s)?.logits)
    }

    /// Class probabilities in eval mode.
    pub fn predict_proba(&self, s: &Sample) -> Result<[f64; N_CLASSES]> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval, 0);
        let logits = self.logits(&mut ctx, s)?;
        let probs = ctx.tape.softmax_rows(logits)?;
        let v = ctx.value(probs).values();
        Ok([v[0], v[1], v[2]])
    }

    pub fn predict(&self, s: &Sample) -> Result<usize> {
        Ok(argmax(&self.predict_proba(s)?))
    }

    /// Mean cross-entropy over `batch`, built on `ctx`'s tape.
    pub fn batch_loss(&self, ctx: &mut Ctx<'_>, batch: &[Sample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut total: Option<Var> = None;
        for s in batch {
            let logits = self.logits(ctx, s)?;
            let l = cross_entropy(ctx, logits, s.label)?;
            total = Some(match total {
                Some(t) => ctx.tape.add(t, l)?,
                None => l,
            });
        }
        ctx.tape.scale(total.unwrap(), 1.0 / batch.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&self.store, &mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Replaces the parameters with those stored at `path`, which must match
    /// this model's names and shapes.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        read_checkpoint(&mut self.store, &mut r)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// `−log softmax(logits)[label]`, shifted by the row max for stability.
pub fn cross_entropy(ctx: &mut Ctx<'_>, logits: Var, label: usize) -> Result<Var> {
    let n = ctx.value(logits).numel();
    if label >= n {
        return Err(Error::Label(label));
    }
    let max = ctx.value(logits).values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = ctx.tape.add_scalar(logits, -max)?;
    let e = ctx.tape.exp(shifted)?;
    let z = ctx.tape.sum(e)?;
    let lse = ctx.tape.log(z)?;
    let picked = ctx.tape.index(shifted, label)?;
    ctx.tape.sub(lse, picked)
}

/// `−log p[label]` for an explicit distribution.
pub fn loss(probs: &[f64], label: usize) -> Result<f64> {
    probs.get(label).map(|p| -p.ln()).ok_or(Error::Label(label))
}

const MAGIC: &[u8; 4] = b"DKBF";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Magic, version, entry count, then per entry: name, rank, extents (u64)
/// and values (f32), little-endian.
pub fn write_checkpoint(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u32(w, store.len())?;
    for (name, t) in store.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.values() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(get(r)?) as usize)
}

/// Reads a checkpoint into `store`, validating every name and shape first.
pub fn read_checkpoint(store: &mut ParamStore, r: &mut impl Read) -> Result<()> {
    if &get::<4>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(get(r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = get_u32(r)?;
    if count != store.len() {
        return Err(Error::Checkpoint(format!("{count} entries, model has {}", store.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let rank = get_u32(r)?;
        let shape: Vec<usize> = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(get(r)?) as usize))
            .collect::<Result<_>>()?;
        if shape != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                store.get(id).shape()
            )));
        }
        let values = (0..store.get(id).numel())
            .map(|_| Ok(f32::from_le_bytes(get(r)?) as f64))
            .collect::<Result<Vec<_>>>()?;
        loaded.push((id, Tensor::new(shape, values)?));
    }
    for (id, t) in loaded {
        store.set(id, t);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::layers::DytParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn tiny(ablations: Ablations) -> ModelConfig {
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
            ablations,
            ..ModelConfig::default()
        }
    }

    fn sample(seed: u64) -> Sample {
        let spec = SynthSpec {
            n_samples: 1,
            ts: 6,
            ti: 4,
            ta: 2,
            d_in: 6,
            noise_std: 0.3,
            seed,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec).unwrap().remove(0)
    }

    fn eval<R>(store: &ParamStore, f: impl FnOnce(&mut Ctx<'_>) -> R) -> R {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval, 0);
        f(&mut ctx)
    }

    fn dyt_ref(x: f64, p: &DytParams, store: &ParamStore, j: usize) -> f64 {
        let a = store.get(p.alpha).values()[0];
        store.get(p.gamma).values()[j] * (a * x).tanh() + store.get(p.beta).values()[j]
    }

    #[test]
    fn residual_only_block_is_double_dyt() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 1).unwrap();
        let mut store = m.store.clone();
        let k = m.parts.text[0].kanformer.as_ref().unwrap();
        store.fill(k.adsa().gate.w, 0.0);
        store.fill(k.adsa().gate.b, -60.0);
        let kan = k.kan().unwrap();
        store.fill(kan.coef, 0.0);
        store.fill(kan.base, 0.0);
        let (d1, d2) = k.dyts().unwrap();
        store.fill(d1.alpha, 0.7);
        store.set(d2.beta, rand_t(&[8], 4));
        let h = rand_t(&[5, 8], 3);
        let y = eval(&store, |ctx| {
            let hv = ctx.constant(h.clone());
            let y = kanformer_block(ctx, hv, k).unwrap();
            ctx.value(y).clone()
        });
        for i in 0..5 {
            for j in 0..8 {
                let want = dyt_ref(dyt_ref(h.at(i, j), d1, &store, j), d2, &store, j);
                assert_abs_diff_eq!(y.at(i, j), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn block_matches_composition_of_parts() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 2).unwrap();
        let k = m.parts.text[0].kanformer.as_ref().unwrap();
        let h = rand_t(&[7, 8], 5);
        // Stage-by-stage recomposition on values, each stage on a fresh tape.
        let stage = |f: &dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>, x: &Tensor| {
            eval(&m.store, |ctx| {
                let xv = ctx.constant(x.clone());
                let y = f(ctx, xv).unwrap();
                ctx.value(y).clone()
            })
        };
        let add = |a: &Tensor, b: &Tensor| Tensor::new(a.shape(), a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect()).unwrap();
        let a = stage(&|ctx, x| adsa_forward(ctx, x, k.adsa()), &h);
        let (d1, d2) = k.dyts().unwrap();
        let y1 = stage(&|ctx, x| dyt_forward(ctx, x, d1), &add(&a, &h));
        let f = stage(&|ctx, x| kan_forward(ctx, x, k.kan().unwrap()), &y1);
        let want = stage(&|ctx, x| dyt_forward(ctx, x, d2), &add(&f, &y1));
        let got = stage(&|ctx, x| kanformer_block(ctx, x, k), &h);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn saturated_intra_gate_keeps_the_kanformer_path() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 3).unwrap();
        let mut store = m.store.clone();
        let layer = &m.parts.text[0];
        let (gk, _) = layer.fusion_gates().unwrap();
        store.fill(gk.w, 0.0);
        store.fill(gk.b, 60.0);
        let h = rand_t(&[6, 8], 6);
        eval(&store, |ctx| {
            let hv = ctx.constant(h.clone());
            let fused = kanba_layer(ctx, hv, layer).unwrap();
            let hk = kanformer_block(ctx, hv, layer.kanformer.as_ref().unwrap()).unwrap();
            assert!(ctx.value(fused).max_abs_diff(ctx.value(hk)) <= 1e-12);
        });
    }

    #[test]
    fn depth_changes_the_output() {
        let one = DualKanbaFormer::new(tiny(Ablations::default()), 4).unwrap();
        let two = DualKanbaFormer::new(ModelConfig { n_layers: 2, ..tiny(Ablations::default()) }, 4).unwrap();
        let s = sample(1);
        assert_ne!(one.predict_proba(&s).unwrap(), two.predict_proba(&s).unwrap());
    }

    #[test]
    fn textual_and_visual_stacks_share_code() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 5).unwrap();
        let mut store = m.store.clone();
        // Copy every text-layer parameter onto its visual twin.
        for (name, _) in m.store.iter().filter(|(n, _)| n.starts_with("text.layer")) {
            let twin = name.replacen("text.", "visual.", 1);
            let (src, dst) = (m.store.id(name).unwrap(), m.store.id(&twin).unwrap());
            store.set(dst, m.store.get(src).clone());
        }
        let h = rand_t(&[6, 8], 7);
        eval(&store, |ctx| {
            let hv = ctx.constant(h.clone());
            let a = kanbaformer_forward(ctx, hv, &m.parts.text).unwrap();
            let b = kanbaformer_forward(ctx, hv, &m.parts.visual).unwrap();
            assert_eq!(ctx.value(a), ctx.value(b));
        });
    }

    #[test]
    fn multimodal_fusion_cases() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 6).unwrap();
        let (gv, gt) = m.parts.multimodal_gates().unwrap();
        let multi = m.parts.multi.as_ref().unwrap();
        let hv = rand_t(&[1, 8], 1);
        let ht = rand_t(&[1, 8], 2);
        let mut store = m.store.clone();
        store.fill(gv.w, 0.0);
        store.fill(gv.b, 60.0);
        eval(&store, |ctx| {
            let (a, b) = (ctx.constant(hv.clone()), ctx.constant(ht.clone()));
            let c = multi.forward(ctx, a, b).unwrap();
            assert!(ctx.value(c).max_abs_diff(&hv) <= 1e-12);
        });
        for g in [gv, gt] {
            store.fill(g.w, 0.0);
            store.fill(g.b, 0.0);
        }
        eval(&store, |ctx| {
            let a = ctx.constant(hv.clone());
            let c = multi.forward(ctx, a, a).unwrap();
            for (x, y) in ctx.value(c).values().iter().zip(hv.values()) {
                assert_abs_diff_eq!(*x, 0.75 * y, epsilon = 1e-15);
            }
            let constant = ctx.constant(Tensor::from_rows(&vec![hv.values().to_vec(); 4]));
            let pooled = ctx.tape.mean_rows(constant).unwrap();
            assert!(ctx.value(pooled).max_abs_diff(&hv) <= 1e-15);
        });
    }

    #[test]
    fn classifier_closed_forms() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 7).unwrap();
        let mut store = m.store.clone();
        let c = &m.parts.classifier;
        store.fill(c.w, 0.0);
        let s = sample(2);
        let probe = |store: &ParamStore| {
            eval(store, |ctx| {
                let l = m.logits(ctx, &s).unwrap();
                let p = ctx.tape.softmax_rows(l).unwrap();
                ctx.value(p).values().to_vec()
            })
        };
        for p in probe(&store) {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        store.set(c.b, Tensor::new([3], vec![2f64.ln(), 0.0, 0.0]).unwrap());
        let p = probe(&store);
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn loss_closed_forms() {
        assert_abs_diff_eq!(loss(&[1.0 / 3.0; 3], 1).unwrap(), 3f64.ln(), epsilon = 1e-15);
        assert_eq!(loss(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert_abs_diff_eq!(loss(&[0.75, 0.2, 0.05], 0).unwrap(), 0.287682, epsilon = 1e-6);
        assert!(matches!(loss(&[0.5, 0.5, 0.0], 3), Err(Error::Label(3))));
        eval(&ParamStore::new(), |ctx| {
            let logits = ctx.constant(Tensor::new([1, 3], vec![0.3, 0.3, 0.3]).unwrap());
            let l = cross_entropy(ctx, logits, 2).unwrap();
            assert_abs_diff_eq!(ctx.value(l).item(), 3f64.ln(), epsilon = 1e-15);
            assert!(matches!(cross_entropy(ctx, logits, 3), Err(Error::Label(3))));
        });
    }

    #[test]
    fn eval_is_deterministic_and_train_dropout_is_seeded() {
        let cfg = ModelConfig {
            dropout: 0.5,
            ..tiny(Ablations::default())
        };
        let m = DualKanbaFormer::new(cfg, 8).unwrap();
        let s = sample(3);
        let a = m.predict_proba(&s).unwrap();
        let b = m.predict_proba(&s).unwrap();
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        let train = |seed| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &m.store, Mode::Train, seed);
            let l = m.logits(&mut ctx, &s).unwrap();
            ctx.value(l).clone()
        };
        assert_eq!(train(1), train(1));
        assert_ne!(train(1), train(2));
    }

    #[test]
    fn visual_features_matter_only_with_open_gates() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 9).unwrap();
        let s = sample(4);
        let mut flipped = s.clone();
        flipped.visual = Tensor::new(s.visual.shape(), s.visual.values().iter().map(|v| -3.0 * v).collect()).unwrap();
        assert_ne!(m.predict_proba(&s).unwrap(), m.predict_proba(&flipped).unwrap());

        let mut closed = m.clone();
        let (gv, _) = m.parts.multimodal_gates().unwrap();
        closed.store.fill(gv.w, 0.0);
        closed.store.fill(gv.b, -60.0);
        let a = closed.predict_proba(&s).unwrap();
        let b = closed.predict_proba(&flipped).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn wrong_feature_width_names_the_stage() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 10).unwrap();
        let mut s = sample(5);
        s.visual = rand_t(&[4, 5], 1);
        assert!(matches!(m.predict(&s), Err(Error::DimMismatch { stage: "visual input", .. })));
    }

    #[test]
    fn every_ablation_builds_and_runs() {
        let s = sample(6);
        let full = DualKanbaFormer::new(tiny(Ablations::default()), 11).unwrap();
        for c in Ablations::COMPONENTS {
            let m = DualKanbaFormer::new(tiny(Ablations::without(c).unwrap()), 11).unwrap();
            let p = m.predict_proba(&s).unwrap();
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert_ne!(m.store.numel(), 0);
            // Parameters shared with the full model keep their initial values.
            for (name, t) in m.store.iter() {
                if let Some(id) = full.store.id(name) {
                    assert_eq!(full.store.get(id), t, "{c}: {name}");
                }
            }
        }
        let sums = Ablations {
            intra_fusion: Fusion::Sum,
            multi_fusion: Fusion::Sum,
            ..Ablations::default()
        };
        DualKanbaFormer::new(tiny(sums), 11).unwrap().predict(&s).unwrap();
        assert!(Ablations::without("attention").is_err());
        let both = Ablations {
            no_mamba: true,
            no_kanformer: true,
            ..Ablations::default()
        };
        assert!(DualKanbaFormer::new(tiny(both), 1).is_err());
    }

    #[test]
    fn matched_ffn_has_kan_parameter_count() {
        let cfg = KanConfig::default();
        for d in [8, 16, 32] {
            let h = matched_ffn_hidden(d, &cfg);
            let ffn = 2 * d * h + h + d;
            let kan = d * d * (1 + cfg.grid().basis_len());
            assert!((ffn as f64 - kan as f64).abs() <= (2 * d + 1) as f64, "{d}: {ffn} vs {kan}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"DKBF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);

        let mut other = DualKanbaFormer::new(tiny(Ablations::default()), 13).unwrap();
        other.load(&path).unwrap();
        for ((_, a), (_, b)) in m.store.iter().zip(other.store.iter()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let mut again = Vec::new();
        write_checkpoint(&other.store, &mut again).unwrap();
        assert_eq!(again, bytes);

        let mut wider = DualKanbaFormer::new(ModelConfig { d: 12, ..tiny(Ablations::default()) }, 1).unwrap();
        assert!(matches!(wider.load(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(other.load(&path), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn probabilities_form_a_distribution(seed in 0u64..1000) {
            let m = DualKanbaFormer::new(tiny(Ablations::default()), seed).unwrap();
            let p = m.predict_proba(&sample(seed)).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn class_permutation_is_equivariant(seed in 0u64..1000, rot in 1usize..3) {
            let m = DualKanbaFormer::new(tiny(Ablations::default()), seed).unwrap();
            let mut perm = m.clone();
            let c = &m.parts.classifier;
            let (w, b) = (m.store.get(c.w), m.store.get(c.b));
            let (d, _) = w.dims2();
            let pw: Vec<f64> = (0..d).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| w.at(i, (j + rot) % 3)).collect();
            let pb: Vec<f64> = (0..3).map(|j| b.values()[(j + rot) % 3]).collect();
            perm.store.set(c.w, Tensor::new([d, 3], pw).unwrap());
            perm.store.set(c.b, Tensor::new([3], pb).unwrap());
            let s = sample(seed + 1);
            let (p, q) = (m.predict_proba(&s).unwrap(), perm.predict_proba(&s).unwrap());
            for j in 0..3 {
                prop_assert!((q[j] - p[(j + rot) % 3]).abs() <= 1e-12);
            }
        }

        #[test]
        fn argmax_ignores_constant_logit_shifts(v in proptest::collection::vec(-5.0f64..5.0, 3), shift in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            prop_assert_eq!(argmax(&v), argmax(&shifted));
        }
    }

    const EPS: f64 = 5e-4;

    #[test]
    fn end_to_end_gradients() {
        let m = DualKanbaFormer::new(tiny(Ablations::default()), 14).unwrap();
        let batch = [sample(7), sample(8)];
        let report = GradCheck {
            eps: EPS,
            max_entries_per_param: Some(6),
            ..GradCheck::default()
        }
        .run(m.store.tensors(), |tape, vars| {
            let mut ctx = Ctx::from_vars(tape, vars.to_vec(), Mode::Eval, 0);
            m.batch_loss(&mut ctx, &batch)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
