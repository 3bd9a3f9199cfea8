//! Synthetic stand-in for a retouched photo collection: smooth random
//! images and a handful of global tone operators acting as "experts".

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{load_image, save_image};
use super::manifest::{write_manifest, Dataset, ImagePair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pointwise tone operator on `[0, 1]` values.
#[derive(Clone, Debug, PartialEq)]
pub enum Operator {
    Gamma(f64),
    /// `clamp(gain·x + bias, 0, 1)`.
    GainBias { gain: f64, bias: f64 },
    ChannelGamma([f64; 3]),
    /// Blend toward smoothstep: `(1 − s)·x + s·(3x² − 2x³)`, `s ∈ [0, 1]`.
    SCurve(f64),
    /// Scales red and blue, clamped.
    WhiteBalance { red: f64, blue: f64 },
}

/// JSON form: `{"kind": "gamma", "params": [0.7]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: String,
    pub params: Vec<f64>,
}

impl TryFrom<&OperatorSpec> for Operator {
    type Error = Error;

    fn try_from(spec: &OperatorSpec) -> Result<Self> {
        let p = &spec.params;
        let want = |n: usize| {
            if p.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "operator {} takes {n} parameters, got {}",
                    spec.kind,
                    p.len()
                )))
            }
        };
        let op = match spec.kind.as_str() {
            "gamma" => {
                want(1)?;
                Operator::Gamma(p[0])
            }
            "gain-bias" => {
                want(2)?;
                Operator::GainBias { gain: p[0], bias: p[1] }
            }
            "channel-gamma" => {
                want(3)?;
                Operator::ChannelGamma([p[0], p[1], p[2]])
            }
            "s-curve" => {
                want(1)?;
                Operator::SCurve(p[0])
            }
            "white-balance" => {
                want(2)?;
                Operator::WhiteBalance { red: p[0], blue: p[1] }
            }
            other => return Err(Error::Config(format!("unknown operator kind {other:?}"))),
        };
        op.validate()?;
        Ok(op)
    }
}

impl Operator {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Operator::Gamma(g) => g > 0.0,
            Operator::ChannelGamma(g) => g.iter().all(|&v| v > 0.0),
            Operator::SCurve(s) => (0.0..=1.0).contains(&s),
            Operator::GainBias { gain, bias } => gain.is_finite() && bias.is_finite(),
            Operator::WhiteBalance { red, blue } => red >= 0.0 && blue >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid operator parameters {self:?}")))
        }
    }

    /// Maps one value of color channel `channel`.
    pub fn apply(&self, v: f64, channel: usize) -> f64 {
        match *self {
            Operator::Gamma(g) => v.powf(g),
            Operator::GainBias { gain, bias } => (gain * v + bias).clamp(0.0, 1.0),
            Operator::ChannelGamma(g) => v.powf(g[channel]),
            Operator::SCurve(s) => (1.0 - s) * v + s * v * v * (3.0 - 2.0 * v),
            Operator::WhiteBalance { red, blue } => match channel {
                0 => (v * red).min(1.0),
                2 => (v * blue).min(1.0),
                _ => v,
            },
        }
    }
}

/// A chain of operators applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub ops: Vec<Operator>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ExpertSpec {
    Single(OperatorSpec),
    Chain(Vec<OperatorSpec>),
}

/// Parses an expert file: a JSON list whose entries are either one
/// operator object or a list of them (applied in order).
pub fn parse_experts(json: &str) -> Result<Vec<Expert>> {
    let specs: Vec<ExpertSpec> =
        serde_json::from_str(json).map_err(|e| Error::Config(format!("expert spec: {e}")))?;
    if specs.is_empty() {
        return Err(Error::Config("expert spec lists no experts".into()));
    }
    specs
        .iter()
        .map(|s| {
            let ops = match s {
                ExpertSpec::Single(op) => vec![Operator::try_from(op)?],
                ExpertSpec::Chain(ops) => ops.iter().map(Operator::try_from).collect::<Result<_>>()?,
            };
            Ok(Expert { ops })
        })
        .collect()
}

impl Expert {
    pub fn new(ops: Vec<Operator>) -> Self {
        Expert { ops }
    }

    pub fn apply_value(&self, v: f64, channel: usize) -> f64 {
        self.ops.iter().fold(v, |acc, op| op.apply(acc, channel))
    }

    /// Applies the chain to every pixel of an `H×W×3` image.
    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        Tensor::from_fn(img.shape(), |i| self.apply_value(img.data()[i] as f64, i % 3) as f32)
    }
}

/// `h×w×3` image: each channel is a sum of 8–16 random Gaussian blobs,
/// min–max normalized to `[0, 1]`.
pub fn blob_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor<f32> {
    let mut data = vec![0f64; h * w * 3];
    let side = h.max(w) as f64;
    for c in 0..3 {
        let n = rng.gen_range(8..=16);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.gen_range(0.0..w as f64),
                    rng.gen_range(0.0..h as f64),
                    rng.gen_range(0.05..0.3) * side,
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                data[(y * w + x) * 3 + c] = blobs
                    .iter()
                    .map(|&(cx, cy, s, a)| {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
            }
        }
        let channel = data.iter().skip(c).step_by(3);
        let lo = channel.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = channel.copied().fold(f64::NEG_INFINITY, f64::max);
        for v in data.iter_mut().skip(c).step_by(3) {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
        }
    }
    Tensor::new(&[h, w, 3], data.into_iter().map(|v| v as f32).collect()).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub inputs: Vec<PathBuf>,
    /// One manifest per expert, tagged `synthetic-k`.
    pub manifests: Vec<PathBuf>,
}

/// Writes `count` input images, one target per expert per input, and one
/// manifest per expert under `out_dir`. Targets are computed from the
/// 8-bit inputs as decoded, so they are exactly the operator applied to
/// what a model sees.
pub fn synth_dataset(opts: &SynthOptions, experts: &[Expert], out_dir: &Path) -> Result<SynthOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inputs_dir = out_dir.join("inputs");
    fs::create_dir_all(&inputs_dir).map_err(|e| Error::io(&inputs_dir, e))?;
    let mut inputs = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let img = blob_image(&mut rng, opts.height, opts.width);
        let path = inputs_dir.join(format!("{i:05}.ppm"));
        save_image(&img, &path)?;
        inputs.push(path);
    }
    let mut manifests = Vec::with_capacity(experts.len());
    for (k, expert) in experts.iter().enumerate() {
        let tag = format!("synthetic-{k}");
        let dir = out_dir.join(&tag);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut pairs = Vec::with_capacity(inputs.len());
        for input in &inputs {
            let target = dir.join(input.file_name().expect("generated file name"));
            save_image(&expert.apply(&load_image(input)?), &target)?;
            pairs.push(ImagePair {
                input: input.clone(),
                target,
                expert: tag.clone(),
            });
        }
        let manifest = out_dir.join(format!("{tag}.jsonl"));
        write_manifest(&manifest, &Dataset { pairs })?;
        manifests.push(manifest);
    }
    Ok(SynthOutput { inputs, manifests })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_examples() {
        assert_eq!(Operator::Gamma(0.5).apply(0.25, 0), 0.5);
        assert_eq!(Operator::Gamma(1.0).apply(0.3, 1), 0.3);
        assert_eq!(Operator::GainBias { gain: 2.0, bias: 0.1 }.apply(0.7, 2), 1.0);
        assert_eq!(Operator::WhiteBalance { red: 1.1, blue: 0.9 }.apply(0.5, 1), 0.5);
        assert_eq!(Operator::SCurve(1.0).apply(0.5, 0), 0.5);
    }

    #[test]
    fn operators_map_unit_interval_into_itself() {
        let ops = [
            Operator::Gamma(0.7),
            Operator::Gamma(2.2),
            Operator::GainBias { gain: 1.3, bias: -0.1 },
            Operator::ChannelGamma([0.6, 1.0, 1.4]),
            Operator::SCurve(0.8),
            Operator::WhiteBalance { red: 1.2, blue: 0.8 },
        ];
        for op in &ops {
            for i in 0..=100 {
                let v = i as f64 / 100.0;
                for c in 0..3 {
                    let out = op.apply(v, c);
                    assert!((0.0..=1.0).contains(&out), "{op:?} {v} → {out}");
                }
            }
        }
    }

    #[test]
    fn parses_single_and_chained_experts() {
        let json = r#"[
            {"kind": "gamma", "params": [0.7]},
            [{"kind": "gamma", "params": [0.7]}, {"kind": "gain-bias", "params": [0.9, 0.0]}]
        ]"#;
        let experts = parse_experts(json).unwrap();
        assert_eq!(experts.len(), 2);
        assert_eq!(experts[1].ops.len(), 2);
        assert!((experts[1].apply_value(0.5, 0) - 0.9 * 0.5f64.powf(0.7)).abs() < 1e-15);
        assert!(parse_experts(r#"[{"kind": "sepia", "params": []}]"#).is_err());
        assert!(parse_experts(r#"[{"kind": "gamma", "params": [1, 2]}]"#).is_err());
        assert!(parse_experts("[]").is_err());
    }

    #[test]
    fn blob_images_span_unit_range() {
        let img = blob_image(&mut ChaCha8Rng::seed_from_u64(1), 24, 40);
        assert_eq!(img.shape(), &[24, 40, 3]);
        for c in 0..3 {
            let ch: Vec<f32> = img.data().iter().skip(c).step_by(3).copied().collect();
            let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }
}
