//! Low-resolution coefficient network.
//!
//! ```text
//! 256²×3 ─S1─S4 (conv s2 + bn + relu)─▶ 16²×64 ─┬─ L1, L2 (conv s1 + relu) ──────────────┐
//!                                               └─ G1, G2 (conv s2 + bn + relu), G3–G5 fc ┴─ F ─ A (16²×96)
//! ```
//!
//! Channel counts follow the table below at `scale = 1.0`; every hidden count
//! is multiplied by `scale`. The prediction layer always emits
//! `12 × depth` channels, which [`reshape_to_grid`] views as a bilateral grid.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::conv::out_extent;
use crate::ops::norm;
use crate::tape::{BatchStats, NormMode, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Values per grid cell: a 3×4 affine color transform.
pub const CELL_VALUES: usize = 12;

const LOW_LEVEL: [usize; 4] = [8, 16, 32, 64];
const LOCAL: [usize; 2] = [128, 128];
const GLOBAL_CONV: [usize; 2] = [128, 128];
const GLOBAL_FC: [usize; 3] = [512, 256, 128];
const FUSION: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    /// Multiplier on every hidden channel count.
    pub scale: f64,
    /// Side of the square low-resolution input.
    pub lowres: usize,
    /// Grid depth (intensity bins).
    pub depth: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            scale: 1.0,
            lowres: 256,
            depth: 8,
        }
    }
}

impl NetConfig {
    pub fn with_scale(scale: f64) -> Self {
        NetConfig {
            scale,
            ..Self::default()
        }
    }

    fn channels(&self, base: usize) -> Result<usize> {
        let c = base as f64 * self.scale;
        if !(c >= 1.0 && c.fract() == 0.0) {
            return Err(Error::Config(format!(
                "scale {} turns {base} channels into {c}, not a positive integer",
                self.scale
            )));
        }
        Ok(c as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.layers().map(|_| ())
    }

    /// Spatial side of the grid (= side of `S4`).
    pub fn grid_size(&self) -> usize {
        (0..LOW_LEVEL.len()).fold(self.lowres, |n, _| out_extent(n, 2))
    }

    pub fn coefficient_channels(&self) -> usize {
        CELL_VALUES * self.depth
    }

    /// Every learnable layer in forward order.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.lowres < 2 || self.depth < 1 {
            return Err(Error::Config(format!(
                "low-res side {} and depth {} must be ≥ 2 and ≥ 1",
                self.lowres, self.depth
            )));
        }
        let mut layers = Vec::new();
        let mut c_in = 3;
        let mut side = self.lowres;
        for (i, &base) in LOW_LEVEL.iter().enumerate() {
            let c_out = self.channels(base)?;
            side = out_extent(side, 2);
            layers.push(LayerSpec::conv(format!("S{}", i + 1), c_in, c_out, 2, true, side));
            c_in = c_out;
        }
        let (s4_channels, grid) = (c_in, side);
        for (i, &base) in LOCAL.iter().enumerate() {
            let c_out = self.channels(base)?;
            layers.push(LayerSpec::conv(format!("L{}", i + 1), c_in, c_out, 1, false, grid));
            c_in = c_out;
        }
        let local_channels = c_in;
        c_in = s4_channels;
        side = grid;
        for (i, &base) in GLOBAL_CONV.iter().enumerate() {
            let c_out = self.channels(base)?;
            side = out_extent(side, 2);
            layers.push(LayerSpec::conv(format!("G{}", i + 1), c_in, c_out, 2, true, side));
            c_in = c_out;
        }
        c_in *= side * side;
        for (i, &base) in GLOBAL_FC.iter().enumerate() {
            let c_out = self.channels(base)?;
            layers.push(LayerSpec::dense(format!("G{}", i + 3), c_in, c_out));
            c_in = c_out;
        }
        let fusion = self.channels(FUSION)?;
        layers.push(LayerSpec {
            name: "F".into(),
            kind: LayerKind::Fusion {
                global_in: c_in,
            },
            c_in: local_channels,
            c_out: fusion,
            side: grid,
        });
        layers.push(LayerSpec {
            name: "A".into(),
            kind: LayerKind::Pointwise,
            c_in: fusion,
            c_out: self.coefficient_channels(),
            side: grid,
        });
        Ok(layers)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv { stride: usize, batch_norm: bool },
    Dense,
    Fusion { global_in: usize },
    Pointwise,
}

/// One learnable layer. `side` is the output spatial extent (0 for dense).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub side: usize,
}

impl LayerSpec {
    fn conv(name: String, c_in: usize, c_out: usize, stride: usize, batch_norm: bool, side: usize) -> Self {
        LayerSpec {
            name,
            kind: LayerKind::Conv { stride, batch_norm },
            c_in,
            c_out,
            side,
        }
    }

    fn dense(name: String, c_in: usize, c_out: usize) -> Self {
        LayerSpec {
            name,
            kind: LayerKind::Dense,
            c_in,
            c_out,
            side: 0,
        }
    }
}

/// Running batch-norm statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Learnable arrays keyed by name (`S1.w`, `bn.S1.gamma`, `F.wg`, …) plus
/// running batch-norm statistics keyed by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T: Scalar = f32> {
    pub config: NetConfig,
    pub params: IndexMap<String, Tensor<T>>,
    pub running: IndexMap<String, RunningStats<T>>,
}

/// Network parameters with Glorot-uniform weights and zero biases,
/// batch-norm scale 1 and shift 0. Deterministic in `seed`.
pub fn init_params<T: Scalar>(seed: u64, config: NetConfig) -> Result<NetParams<T>> {
    let layers = config.layers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    let mut glorot = |shape: &[usize], fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of(rng.gen_range(-limit..limit)))
    };
    for layer in &layers {
        let (ci, co) = (layer.c_in, layer.c_out);
        let name = &layer.name;
        match layer.kind {
            LayerKind::Conv { batch_norm, .. } => {
                params.insert(format!("{name}.w"), glorot(&[3, 3, ci, co], 9 * ci, 9 * co));
                params.insert(format!("{name}.b"), Tensor::zeros(&[co]));
                if batch_norm {
                    params.insert(format!("bn.{name}.gamma"), Tensor::full(&[co], T::one()));
                    params.insert(format!("bn.{name}.beta"), Tensor::zeros(&[co]));
                }
            }
            LayerKind::Dense | LayerKind::Pointwise => {
                params.insert(format!("{name}.w"), glorot(&[ci, co], ci, co));
                params.insert(format!("{name}.b"), Tensor::zeros(&[co]));
            }
            LayerKind::Fusion { global_in } => {
                params.insert(format!("{name}.w"), glorot(&[ci, co], ci, co));
                params.insert(format!("{name}.wg"), glorot(&[global_in, co], global_in, co));
                params.insert(format!("{name}.b"), Tensor::zeros(&[co]));
            }
        }
    }
    Ok(NetParams {
        config,
        params,
        running: IndexMap::new(),
    })
}

impl<T: Scalar> NetParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Folds one training batch's statistics into the running averages.
    /// The first batch initializes them directly.
    pub fn update_running(&mut self, stats: &[(String, BatchStats<T>)]) {
        for (layer, s) in stats {
            match self.running.get_mut(layer) {
                Some(r) => {
                    norm::update_running(&mut r.mean, &s.mean);
                    norm::update_running(&mut r.var, &s.var);
                }
                None => {
                    self.running.insert(
                        layer.clone(),
                        RunningStats {
                            mean: s.mean.clone(),
                            var: s.var.clone(),
                        },
                    );
                }
            }
        }
    }

    /// Sets neutral running statistics (mean 0, variance 1) on every
    /// batch-norm layer that has none.
    pub fn ensure_running(&mut self) -> Result<()> {
        for layer in self.config.layers()? {
            if let LayerKind::Conv { batch_norm: true, .. } = layer.kind {
                self.running.entry(layer.name).or_insert_with(|| RunningStats {
                    mean: vec![T::zero(); layer.c_out],
                    var: vec![T::one(); layer.c_out],
                });
            }
        }
        Ok(())
    }

    /// Checks every array against the shapes implied by the config.
    pub fn validate(&self) -> Result<()> {
        let reference = init_params::<T>(0, self.config)?;
        for (name, t) in &reference.params {
            let have = self.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
            if !have.all_finite() {
                return Err(Error::Config(format!("parameter {name} has non-finite values")));
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Tape variables for every learnable array, keyed like [`NetParams::params`].
pub type ParamVars = IndexMap<String, Var>;

fn var(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("parameter {name} not bound to the tape")))
}

/// Records the parameters on `tape`; with `trainable` they receive gradients.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, net: &NetParams<T>, trainable: bool) -> ParamVars {
    net.params
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
        .collect()
}

/// Every intermediate of one low-resolution forward pass, plus the batch
/// statistics gathered in training mode.
#[derive(Clone, Debug)]
pub struct LowresTrace<T> {
    pub low_level: Vec<Var>,
    pub local: Vec<Var>,
    pub global: Vec<Var>,
    pub fusion: Var,
    pub coefficients: Var,
    pub stats: Vec<(String, BatchStats<T>)>,
}

struct Ctx<'a, T: Scalar> {
    net: &'a NetParams<T>,
    vars: &'a ParamVars,
    mode: Mode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv(&mut self, tape: &mut Tape<T>, x: Var, layer: &str, stride: usize, batch_norm: bool) -> Result<Var> {
        let run = |ctx: &mut Self, tape: &mut Tape<T>| -> Result<Var> {
            let y = tape.conv2d(x, var(ctx.vars, &format!("{layer}.w"))?, var(ctx.vars, &format!("{layer}.b"))?, stride)?;
            let y = if batch_norm {
                let gamma = var(ctx.vars, &format!("bn.{layer}.gamma"))?;
                let beta = var(ctx.vars, &format!("bn.{layer}.beta"))?;
                let (y, stats) = match ctx.mode {
                    Mode::Train => tape.batch_norm(y, gamma, beta, NormMode::Train)?,
                    Mode::Infer => {
                        let r = ctx
                            .net
                            .running
                            .get(layer)
                            .ok_or_else(|| Error::NoRunningStats(layer.to_string()))?;
                        tape.batch_norm(y, gamma, beta, NormMode::Infer { mean: &r.mean, var: &r.var })?
                    }
                };
                if let Some(s) = stats {
                    ctx.stats.push((layer.to_string(), s));
                }
                y
            } else {
                y
            };
            tape.relu(y)
        };
        run(self, tape).map_err(|e| e.in_layer(layer))
    }
}

/// Runs the whole low-resolution stream on a batch `N×L×L×3`, returning
/// every layer's output. The coefficients are `N×g×g×(12·depth)`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    net: &NetParams<T>,
    vars: &ParamVars,
    input: Var,
    mode: Mode,
) -> Result<LowresTrace<T>> {
    let mut ctx = Ctx {
        net,
        vars,
        mode,
        stats: Vec::new(),
    };
    let low_level = low_level_features(tape, &mut ctx, input)?;
    let s4 = *low_level.last().unwrap();
    let local = local_path(tape, &mut ctx, s4)?;
    let global = global_path(tape, &mut ctx, s4)?;
    let fusion = fuse(tape, vars, *local.last().unwrap(), *global.last().unwrap())?;
    let coefficients = predict_coefficients(tape, vars, fusion)?;
    Ok(LowresTrace {
        low_level,
        local,
        global,
        fusion,
        coefficients,
        stats: ctx.stats,
    })
}

fn low_level_features<T: Scalar>(tape: &mut Tape<T>, ctx: &mut Ctx<'_, T>, input: Var) -> Result<Vec<Var>> {
    let l = ctx.net.config.lowres;
    match tape.value(input).shape() {
        &[_, h, w, 3] if h == l && w == l => {}
        s => {
            return Err(Error::shape(
                "low_level_features",
                format!("input must be N×{l}×{l}×3, got {s:?}"),
            ))
        }
    }
    let mut x = input;
    let mut out = Vec::with_capacity(LOW_LEVEL.len());
    for i in 1..=LOW_LEVEL.len() {
        x = ctx.conv(tape, x, &format!("S{i}"), 2, true)?;
        out.push(x);
    }
    Ok(out)
}

fn local_path<T: Scalar>(tape: &mut Tape<T>, ctx: &mut Ctx<'_, T>, s4: Var) -> Result<Vec<Var>> {
    let mut x = s4;
    let mut out = Vec::with_capacity(LOCAL.len());
    for i in 1..=LOCAL.len() {
        x = ctx.conv(tape, x, &format!("L{i}"), 1, false)?;
        out.push(x);
    }
    Ok(out)
}

fn global_path<T: Scalar>(tape: &mut Tape<T>, ctx: &mut Ctx<'_, T>, s4: Var) -> Result<Vec<Var>> {
    let mut x = s4;
    let mut out = Vec::with_capacity(GLOBAL_CONV.len() + GLOBAL_FC.len());
    for i in 1..=GLOBAL_CONV.len() {
        x = ctx.conv(tape, x, &format!("G{i}"), 2, true)?;
        out.push(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let n = shape[0];
    x = tape.reshape(x, &[n, shape[1..].iter().product()])?;
    for i in GLOBAL_CONV.len() + 1..=GLOBAL_CONV.len() + GLOBAL_FC.len() {
        let layer = format!("G{i}");
        x = dense_relu(tape, ctx.vars, x, &layer).map_err(|e| e.in_layer(&layer))?;
        out.push(x);
    }
    Ok(out)
}

fn dense_relu<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, x: Var, layer: &str) -> Result<Var> {
    let y = tape.linear(x, var(vars, &format!("{layer}.w"))?, Some(var(vars, &format!("{layer}.b"))?))?;
    tape.relu(y)
}

/// `F = relu(b + wg·G + w·L)`, the global term broadcast over positions.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, local: Var, global: Var) -> Result<Var> {
    let run = |tape: &mut Tape<T>| -> Result<Var> {
        let l = tape.linear(local, var(vars, "F.w")?, Some(var(vars, "F.b")?))?;
        let g = tape.linear(global, var(vars, "F.wg")?, None)?;
        let f = tape.add_channels(l, g)?;
        tape.relu(f)
    };
    run(tape).map_err(|e| e.in_layer("F"))
}

/// Pointwise linear prediction `A = b + w·F`, no activation.
pub fn predict_coefficients<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, fusion: Var) -> Result<Var> {
    tape.linear(fusion, var(vars, "A.w")?, Some(var(vars, "A.b")?))
        .map_err(|e| e.in_layer("A"))
}

/// Views item `item` of the coefficient map as a `g×g×depth×12` grid.
pub fn reshape_to_grid<T: Scalar>(tape: &mut Tape<T>, coefficients: Var, item: usize, depth: usize) -> Result<Var> {
    let a = tape.select(coefficients, item)?;
    tape.to_grid(a, depth)
}

/// Grid position of flat coefficient channel `k`: `(cell value, depth)`.
pub fn grid_index(k: usize, depth: usize) -> (usize, usize) {
    (k / depth, k % depth)
}

/// Prediction bias that makes every grid cell the identity color transform.
pub fn identity_coefficients<T: Scalar>(depth: usize) -> Tensor<T> {
    let mut b = Tensor::zeros(&[CELL_VALUES * depth]);
    for c in 0..3 {
        let cell = 4 * c + c;
        for z in 0..depth {
            b.data_mut()[depth * cell + z] = T::one();
        }
    }
    b
}

/// Forces the prediction layer to emit the identity grid regardless of its
/// input: `A.w = 0`, `A.b` = identity transform in every cell.
pub fn force_identity<T: Scalar>(net: &mut NetParams<T>) -> Result<()> {
    let depth = net.config.depth;
    let w = net
        .params
        .get_mut("A.w")
        .ok_or_else(|| Error::Config("missing parameter A.w".into()))?;
    w.data_mut().iter_mut().for_each(|v| *v = T::zero());
    net.params.insert("A.b".into(), identity_coefficients(depth));
    Ok(())
}
