//! Samples, the JSONL feature format, dataset splits and the synthetic
//! bimodal task.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Deserialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const NEGATIVE: usize = 0;
pub const NEUTRAL: usize = 1;
pub const POSITIVE: usize = 2;
pub const N_CLASSES: usize = 3;

/// One instance: token features per modality plus the polarity label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub text: Tensor,
    pub visual: Tensor,
    pub aspect: Tensor,
    pub label: usize,
}

impl Sample {
    pub fn new(text: Tensor, visual: Tensor, aspect: Tensor, label: usize) -> Result<Self> {
        if label >= N_CLASSES {
            return Err(Error::Label(label));
        }
        let dims = [text.dims2().1, visual.dims2().1, aspect.dims2().1];
        if dims.iter().any(|&d| d != dims[0]) {
            return Err(Error::DimMismatch {
                stage: "sample",
                expected: dims[0],
                got: *dims.iter().find(|&&d| d != dims[0]).unwrap(),
            });
        }
        Ok(Sample {
            text,
            visual,
            aspect,
            label,
        })
    }

    pub fn d_in(&self) -> usize {
        self.text.dims2().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub ts: usize,
    pub ti: usize,
    pub ta: usize,
    pub d_in: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Plant the signal tokens at fixed positions (`ts/2`, `ti/2`) instead of
    /// uniformly random ones.
    pub fixed_positions: bool,
    pub prototypes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 512,
            ts: 16,
            ti: 8,
            ta: 2,
            d_in: 16,
            noise_std: 0.1,
            seed: 0,
            fixed_positions: false,
            prototypes: 4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        if self.ts == 0 || self.ti == 0 || self.ta == 0 || self.prototypes == 0 {
            return Err(Error::Config("sequence lengths and prototype count must be at least 1".into()));
        }
        if self.d_in <= self.prototypes {
            return Err(Error::Config(format!(
                "d_in = {} must exceed the prototype count {} to fit an orthogonal signal direction",
                self.d_in, self.prototypes
            )));
        }
        Ok(())
    }
}

/// Aspect prototypes (unit vectors) and the unit signal direction,
/// orthogonal to every prototype.
pub fn synth_directions(spec: &SynthSpec) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = rng::stream(spec.seed, "synth.directions");
    let mut draw = || -> Vec<f64> { (0..spec.d_in).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let protos: Vec<Vec<f64>> = (0..spec.prototypes)
        .map(|_| {
            let mut v = draw();
            normalize(&mut v);
            v
        })
        .collect();
    // Gram-Schmidt against the span of the prototypes.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for p in &protos {
        let mut v = p.clone();
        for b in &basis {
            let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        normalize(&mut v);
        basis.push(v);
    }
    let mut u = draw();
    for _ in 0..2 {
        for b in &basis {
            let c: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    normalize(&mut u);
    (protos, u)
}

/// Label of a planted `(text bit, visual bit)` pair.
pub fn synth_label(text_bit: bool, visual_bit: bool) -> usize {
    match (text_bit, visual_bit) {
        (true, true) => POSITIVE,
        (false, false) => NEGATIVE,
        _ => NEUTRAL,
    }
}

/// Best accuracy achievable from the text bit alone, by enumerating the four
/// equally likely bit pairs.
pub fn text_only_bayes_accuracy() -> f64 {
    [false, true]
        .iter()
        .map(|&bt| {
            let mut counts = [0usize; N_CLASSES];
            for bv in [false, true] {
                counts[synth_label(bt, bv)] += 1;
            }
            *counts.iter().max().unwrap() as f64 / 2.0
        })
        .sum::<f64>()
        / 2.0
}

/// Draws the planted bimodal dataset.
///
/// Each sample picks an aspect prototype `a` and bits `b_t`, `b_v`. One text
/// token is `a ± u`, one visual token is `a ± u`, every other token is pure
/// noise and the aspect tokens are `a` plus noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let (protos, u) = synth_directions(spec);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng::stream(spec.seed, "synth.samples");
    (0..spec.n_samples)
        .map(|_| {
            let k = rng.gen_range(0..spec.prototypes);
            let (bt, bv): (bool, bool) = (rng.gen(), rng.gen());
            let (pt, pv) = if spec.fixed_positions {
                (spec.ts / 2, spec.ti / 2)
            } else {
                (rng.gen_range(0..spec.ts), rng.gen_range(0..spec.ti))
            };
            let mut seq = |len: usize, base: Option<(bool, usize)>, aspect: bool| -> Result<Tensor> {
                let planted_at = base.map(|(_, pos)| pos);
                let mut vals = Vec::with_capacity(len * spec.d_in);
                for i in 0..len {
                    for j in 0..spec.d_in {
                        let mut v: f64 = noise.sample(&mut rng);
                        if aspect {
                            v += protos[k][j];
                        } else if planted_at == Some(i) {
                            let sign = if base.unwrap().0 { 1.0 } else { -1.0 };
                            v += protos[k][j] + sign * u[j];
                        }
                        vals.push(v);
                    }
                }
                Tensor::new([len, spec.d_in], vals)
            };
            let text = seq(spec.ts, Some((bt, pt)), false)?;
            let visual = seq(spec.ti, Some((bv, pv)), false)?;
            let aspect = seq(spec.ta, None, true)?;
            Sample::new(text, visual, aspect, synth_label(bt, bv))
        })
        .collect()
}

fn push_matrix(out: &mut String, t: &Tensor) {
    out.push('[');
    let (n, d) = t.dims2();
    for i in 0..n {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{:.16e}", t.at(i, j)).unwrap();
        }
        out.push(']');
    }
    out.push(']');
}

/// One JSON object per sample, floats with 17 significant digits.
pub fn write_jsonl(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    let mut line = String::new();
    for s in samples {
        line.clear();
        line.push_str("{\"text_features\":");
        push_matrix(&mut line, &s.text);
        line.push_str(",\"visual_features\":");
        push_matrix(&mut line, &s.visual);
        line.push_str(",\"aspect_features\":");
        push_matrix(&mut line, &s.aspect);
        write!(line, ",\"label\":{}}}", s.label).unwrap();
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text_features: Vec<Vec<f64>>,
    visual_features: Vec<Vec<f64>>,
    aspect_features: Vec<Vec<f64>>,
    label: usize,
}

fn to_tensor(rows: Vec<Vec<f64>>, key: &str) -> std::result::Result<Tensor, String> {
    let d = rows.first().map(Vec::len).ok_or(format!("{key} is empty"))?;
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(format!("{key} rows must be non-empty and equally long"));
    }
    let n = rows.len();
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format!("{key} contains a non-finite value"));
    }
    Tensor::new([n, d], values).map_err(|e| e.to_string())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples: Vec<Sample> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let fail = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let text = to_tensor(rec.text_features, "text_features").map_err(fail)?;
        let visual = to_tensor(rec.visual_features, "visual_features").map_err(fail)?;
        let aspect = to_tensor(rec.aspect_features, "aspect_features").map_err(fail)?;
        let sample = Sample::new(text, visual, aspect, rec.label).map_err(|e| fail(e.to_string()))?;
        if let Some(first) = samples.first() {
            if first.d_in() != sample.d_in() {
                return Err(fail(format!("feature dim {} differs from earlier lines ({})", sample.d_in(), first.d_in())));
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Seeded shuffle, then train/dev sizes rounded from the first two ratios;
/// the remainder is the test split.
pub fn split(samples: &[Sample], ratios: [f64; 3], seed: u64) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    if ratios.iter().any(|&r| r.is_nan() || r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_dev = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}
