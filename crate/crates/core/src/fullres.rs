//! Full-resolution stream: guidance map, grid slicing, and per-pixel affine
//! color transforms, plus the end-to-end [`Model`].

use indexmap::IndexMap;

use crate::data::resize_to_lowres;
use crate::error::{Error, Result};
use crate::net::{self, LowresTrace, Mode, NetConfig, NetParams, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// ReLU knots per channel of the guidance tone curve.
pub const KNOTS: usize = 16;

/// Parameters of `g = clamp(b + Σ_c ρ_c(M_c·φ + b'_c), 0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceParams<T: Scalar = f32> {
    /// `3×3` color matrix; row `c` mixes the input into curve `c`.
    pub matrix: Tensor<T>,
    /// Output bias `b`, shape `[1]`.
    pub bias: Tensor<T>,
    /// Per-curve input bias `b'_c`, shape `[3]`.
    pub channel_bias: Tensor<T>,
    /// `3×16` knot positions `t_{c,i}`.
    pub thresholds: Tensor<T>,
    /// `3×16` slope increments `a_{c,i}`.
    pub slopes: Tensor<T>,
}

pub const GUIDE_NAMES: [&str; 5] = ["guide.M", "guide.b", "guide.bp", "guide.t", "guide.a"];

/// Identity color matrix, zero biases, knots at `i/16`, and a single unit
/// slope of `1/3` per channel: the initial guidance is the channel mean.
pub fn init_guidance<T: Scalar>() -> GuidanceParams<T> {
    GuidanceParams {
        matrix: Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { T::one() } else { T::zero() }),
        bias: Tensor::zeros(&[1]),
        channel_bias: Tensor::zeros(&[3]),
        thresholds: Tensor::from_fn(&[3, KNOTS], |i| T::of((i % KNOTS) as f64 / KNOTS as f64)),
        slopes: Tensor::from_fn(&[3, KNOTS], |i| {
            if i % KNOTS == 0 {
                T::of(1.0 / 3.0)
            } else {
                T::zero()
            }
        }),
    }
}

impl<T: Scalar> GuidanceParams<T> {
    pub fn entries(&self) -> [(&'static str, &Tensor<T>); 5] {
        [
            (GUIDE_NAMES[0], &self.matrix),
            (GUIDE_NAMES[1], &self.bias),
            (GUIDE_NAMES[2], &self.channel_bias),
            (GUIDE_NAMES[3], &self.thresholds),
            (GUIDE_NAMES[4], &self.slopes),
        ]
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "guide.M" => Some(&mut self.matrix),
            "guide.b" => Some(&mut self.bias),
            "guide.bp" => Some(&mut self.channel_bias),
            "guide.t" => Some(&mut self.thresholds),
            "guide.a" => Some(&mut self.slopes),
            _ => None,
        }
    }
}

/// Guidance map `H×W×1` for a full-resolution image variable.
pub fn guidance_map<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, image: Var) -> Result<Var> {
    let v = |name: &str| {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} not bound to the tape")))
    };
    tape.guidance(image, v("guide.M")?, v("guide.b")?, v("guide.bp")?, v("guide.t")?, v("guide.a")?)
}

/// Per-pixel coefficients `H×W×12` sampled from `grid` at depth `g`.
pub fn slice<T: Scalar>(tape: &mut Tape<T>, grid: Var, guidance: Var) -> Result<Var> {
    tape.slice(grid, guidance)
}

/// `O_c = A[4c+3] + Σ_j A[4c+j]·φ_j`. Output is not clamped.
pub fn apply_coefficients<T: Scalar>(tape: &mut Tape<T>, coeffs: Var, image: Var) -> Result<Var> {
    tape.apply_affine(coeffs, image)
}

/// Low-resolution network plus guidance parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub net: NetParams<T>,
    pub guide: GuidanceParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(seed: u64, config: NetConfig) -> Result<Self> {
        Ok(Model {
            net: net::init_params(seed, config)?,
            guide: init_guidance(),
        })
    }

    /// Debug model whose grid is the identity transform everywhere, with
    /// neutral batch-norm statistics so it runs in inference mode.
    pub fn identity(config: NetConfig) -> Result<Self> {
        let mut model = Self::new(0, config)?;
        net::force_identity(&mut model.net)?;
        model.net.ensure_running()?;
        Ok(model)
    }

    pub fn config(&self) -> NetConfig {
        self.net.config
    }

    /// Every learnable array, network first, in a fixed order.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.net
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(self.guide.entries())
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match self.net.params.get_mut(name) {
            Some(t) => Some(t),
            None => self.guide.get_mut(name),
        }
    }

    /// Mutable view of every learnable array, in [`Model::named_params`] order.
    pub fn named_params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        let mut out: Vec<(&str, &mut Tensor<T>)> =
            self.net.params.iter_mut().map(|(k, v)| (k.as_str(), v)).collect();
        let g = &mut self.guide;
        out.extend([
            (GUIDE_NAMES[0], &mut g.matrix),
            (GUIDE_NAMES[1], &mut g.bias),
            (GUIDE_NAMES[2], &mut g.channel_bias),
            (GUIDE_NAMES[3], &mut g.thresholds),
            (GUIDE_NAMES[4], &mut g.slopes),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().map(|(_, t)| t.len()).sum()
    }

    /// Records every learnable array on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let mut vars = net::bind(tape, &self.net, trainable);
        for (name, t) in self.guide.entries() {
            vars.insert(name.to_string(), tape.leaf(t.clone(), trainable));
        }
        vars
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let cast_map = |m: &IndexMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Model {
            net: NetParams {
                config: self.net.config,
                params: cast_map(&self.net.params),
                running: self
                    .net
                    .running
                    .iter()
                    .map(|(k, r)| {
                        (
                            k.clone(),
                            net::RunningStats {
                                mean: r.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                                var: r.var.iter().map(|v| U::of(v.as_f64())).collect(),
                            },
                        )
                    })
                    .collect(),
            },
            guide: GuidanceParams {
                matrix: self.guide.matrix.cast(),
                bias: self.guide.bias.cast(),
                channel_bias: self.guide.channel_bias.cast(),
                thresholds: self.guide.thresholds.cast(),
                slopes: self.guide.slopes.cast(),
            },
        }
    }
}

/// One forward pass over a batch.
#[derive(Debug)]
pub struct BatchForward<T> {
    /// Enhanced image per item, `H×W×3`, unclamped.
    pub outputs: Vec<Var>,
    pub guidance: Vec<Var>,
    pub grids: Vec<Var>,
    pub trace: LowresTrace<T>,
}

/// Runs the model on a batch. `lowres` is `N×L×L×3`; `images` holds the
/// matching full-resolution inputs (`H×W×3`, sizes may differ per item).
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    net: &NetParams<T>,
    vars: &ParamVars,
    lowres: Var,
    images: &[Var],
    mode: Mode,
) -> Result<BatchForward<T>> {
    let n = tape.value(lowres).shape()[0];
    if n != images.len() {
        return Err(Error::shape(
            "forward_batch",
            format!("{n} low-res items but {} full-res images", images.len()),
        ));
    }
    let trace = net::forward(tape, net, vars, lowres, mode)?;
    let mut out = BatchForward {
        outputs: Vec::with_capacity(n),
        guidance: Vec::with_capacity(n),
        grids: Vec::with_capacity(n),
        trace,
    };
    for (item, &image) in images.iter().enumerate() {
        let grid = net::reshape_to_grid(tape, out.trace.coefficients, item, net.config.depth)?;
        let g = guidance_map(tape, vars, image)?;
        let coeffs = slice(tape, grid, g)?;
        out.outputs.push(apply_coefficients(tape, coeffs, image)?);
        out.guidance.push(g);
        out.grids.push(grid);
    }
    Ok(out)
}

/// Stacks equally sized `L×L×3` images into `N×L×L×3`.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::shape("stack", "no items"))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        if t.shape() != first.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {first:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(first);
    Tensor::new(&shape, data)
}

/// Enhances a full-resolution `H×W×3` image (`H, W ≥ 16`). The output has
/// the input's resolution and is not clamped.
pub fn enhance<T: Scalar>(image: &Tensor<T>, model: &Model<T>, mode: Mode) -> Result<Tensor<T>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape("enhance", format!("expected H×W×3, got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::shape("enhance", format!("expected 3 channels, got {c}")));
    }
    if h < 16 || w < 16 {
        return Err(Error::shape("enhance", format!("image {h}×{w} is smaller than 16×16")));
    }
    let low = resize_to_lowres(image, model.config().lowres)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let lowres = tape.constant(stack(&[low])?);
    let full = tape.constant(image.clone());
    let out = forward_batch(&mut tape, &model.net, &vars, lowres, &[full], mode)?;
    Ok(tape.value(out.outputs[0]).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(v: [f64; 3]) -> Tensor<f64> {
        Tensor::new(&[1, 1, 3], v.to_vec()).unwrap()
    }

    fn guide_at_init(v: [f64; 3]) -> f64 {
        let mut tape = Tape::new();
        let model = Model::<f64>::new(0, NetConfig { scale: 0.25, lowres: 64, depth: 4 }).unwrap();
        let vars = model.bind(&mut tape, false);
        let x = tape.constant(pixel(v));
        let g = guidance_map(&mut tape, &vars, x).unwrap();
        tape.value(g).data()[0]
    }

    #[test]
    fn initial_guidance_is_channel_mean() {
        assert!((guide_at_init([0.3, 0.3, 0.3]) - 0.3).abs() < 1e-12);
        assert!((guide_at_init([1.0, 0.0, 0.0]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(guide_at_init([0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn initial_guidance_is_monotone_per_channel() {
        for c in 0..3 {
            let mut prev = -1.0;
            for step in 0..=20 {
                let mut v = [0.2, 0.5, 0.7];
                v[c] = step as f64 / 20.0;
                let g = guide_at_init(v);
                assert!(g >= prev, "channel {c} step {step}");
                prev = g;
            }
        }
    }

    #[test]
    fn enhance_rejects_bad_inputs() {
        let model = Model::<f32>::identity(NetConfig { scale: 0.25, lowres: 64, depth: 4 }).unwrap();
        assert!(enhance(&Tensor::zeros(&[32, 32, 1]), &model, Mode::Infer).is_err());
        assert!(enhance(&Tensor::zeros(&[8, 32, 3]), &model, Mode::Infer).is_err());
    }
}
