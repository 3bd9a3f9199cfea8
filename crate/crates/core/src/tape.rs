//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Every op evaluates eagerly and appends a node holding its output value.
//! [`Tape::backward`] walks the nodes in reverse execution order, so each
//! node's gradient is complete (all consumers have contributed) before it is
//! propagated to its inputs.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, conv::ConvGeometry, guide::GuideArgs, slice::GridDims};
use crate::tensor::{nhwc, Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Fold of the activation pattern of every non-smooth op (ReLU signs, clamp
/// states, interpolation cells). Two evaluations with equal signatures lie
/// on the same linear piece of every kink.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Signature(u64);

impl Signature {
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Signature(0xcbf2_9ce4_8422_2325)
    }

    #[inline]
    pub fn push(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(Self::PRIME);
    }

    #[inline]
    pub fn push_bool(&mut self, v: bool) {
        self.push(v as u64);
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Statistics source for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalize by the statistics of this batch.
    Train,
    /// Normalize by recorded running statistics.
    Infer { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &[T]) -> Vec<Vec<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeometry,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        c_in: usize,
        c_out: usize,
    },
    AddChannels {
        x: usize,
        v: usize,
        per_item: usize,
        c: usize,
    },
    Relu {
        x: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        batch_statistics: bool,
    },
    Reshape {
        x: usize,
    },
    Select {
        x: usize,
        item: usize,
    },
    ToGrid {
        a: usize,
        depth: usize,
        cells: usize,
    },
    Guidance {
        phi: usize,
        matrix: usize,
        bias: usize,
        channel_bias: usize,
        thresholds: usize,
        slopes: usize,
        knots: usize,
    },
    Slice {
        grid: usize,
        g: usize,
        dims: GridDims,
        h: usize,
        w: usize,
    },
    ApplyAffine {
        coeffs: usize,
        phi: usize,
    },
    Mse {
        out: usize,
        target: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    Scale {
        x: usize,
        k: T,
    },
    Mean {
        xs: Vec<usize>,
    },
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
    signature: Signature,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: None,
            signature: Signature::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!("{v:?} is not recorded on this tape")));
        }
        Ok(v.index)
    }

    /// Records an input value. Gradients are only produced for leaves with
    /// `requires_grad` and for values computed from them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Value of a recorded variable.
    ///
    /// Panics if `v` belongs to a different tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.index(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.index(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Activation-pattern signature of everything recorded so far.
    pub fn kink_signature(&self) -> u64 {
        self.signature.finish()
    }

    // ---- linear algebra ----

    /// 3×3 convolution, zero padding 1, stride 1 or 2. `x` is `H×W×C_in` or
    /// `N×H×W×C_in`, `w` is `3×3×C_in×C_out`, `b` is `C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape("conv2d", format!("stride {stride} not in {{1, 2}}")));
        }
        let xs = self.val(xi).shape().to_vec();
        let (batch, in_h, in_w, c_in) = nhwc("conv2d", &xs)?;
        let ws = self.val(wi).shape();
        let &[3, 3, wc_in, c_out] = ws else {
            return Err(Error::shape("conv2d", format!("weights must be 3×3×C_in×C_out, got {ws:?}")));
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("weights expect {wc_in} input channels, input has {c_in}"),
            ));
        }
        if self.val(bi).shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{c_out}]", self.val(bi).shape()),
            ));
        }
        let geom = ConvGeometry {
            batch,
            in_h,
            in_w,
            c_in,
            c_out,
            stride,
        };
        let data = ops::conv::forward(&geom, self.val(xi).data(), self.val(wi).data(), self.val(bi).data());
        let shape = if xs.len() == 3 {
            vec![geom.out_h(), geom.out_w(), c_out]
        } else {
            vec![batch, geom.out_h(), geom.out_w(), c_out]
        };
        let value = Tensor::new(&shape, data)?;
        Ok(self.push_op(value, Op::Conv2d { x: xi, w: wi, b: bi, geom }, &[xi, wi, bi]))
    }

    /// Affine map over the last axis: `x` is `…×C_in`, `w` is `C_in×C_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xi = self.index(x)?;
        let wi = self.index(w)?;
        let bi = b.map(|b| self.index(b)).transpose()?;
        let xs = self.val(xi).shape().to_vec();
        let &[c_in, c_out] = self.val(wi).shape() else {
            return Err(Error::shape(
                "linear",
                format!("weights must be C_in×C_out, got {:?}", self.val(wi).shape()),
            ));
        };
        let last = *xs.last().unwrap_or(&0);
        if last != c_in {
            return Err(Error::shape(
                "linear",
                format!("input has {last} features, weights expect {c_in}"),
            ));
        }
        if let Some(bi) = bi {
            if self.val(bi).shape() != [c_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?}, expected [{c_out}]", self.val(bi).shape()),
                ));
            }
        }
        let rows = self.val(xi).len() / c_in;
        let data = ops::linear::forward(
            rows,
            c_in,
            c_out,
            self.val(xi).data(),
            self.val(wi).data(),
            bi.map(|b| self.val(b).data()),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = c_out;
        let value = Tensor::new(&shape, data)?;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        Ok(self.push_op(
            value,
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
                rows,
                c_in,
                c_out,
            },
            &inputs,
        ))
    }

    /// Adds a per-item channel vector to every position:
    /// `y[n, …, c] = x[n, …, c] + v[n, c]`. `x` may also be unbatched with
    /// `v` of shape `C`.
    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xi, vi) = (self.index(x)?, self.index(v)?);
        let xs = self.val(xi).shape().to_vec();
        let vs = self.val(vi).shape().to_vec();
        let c = *xs.last().unwrap();
        let batch = if vs.len() == 1 { 1 } else { vs[0] };
        let ok = match vs.len() {
            1 => vs[0] == c,
            2 => vs[1] == c && xs.len() >= 2 && xs[0] == vs[0],
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "add_channels",
                format!("cannot broadcast {vs:?} over {xs:?}"),
            ));
        }
        let per_item = self.val(xi).len() / batch;
        let vd = self.val(vi).data();
        let data = self
            .val(xi)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vd[(i / per_item) * c + i % c])
            .collect();
        let value = Tensor::new(&xs, data)?;
        Ok(self.push_op(value, Op::AddChannels { x: xi, v: vi, per_item, c }, &[xi, vi]))
    }

    // ---- elementwise ----

    /// `max(0, x)`; the gradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let value = self.val(xi).map(|v| v.max(T::zero()));
        let mut sig = Signature::new();
        for &v in self.val(xi).data() {
            sig.push_bool(v > T::zero());
        }
        self.signature.push(sig.finish());
        Ok(self.push_op(value, Op::Relu { x: xi }, &[xi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        if self.val(ai).shape() != self.val(bi).shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.val(ai).shape(), self.val(bi).shape()),
            ));
        }
        let data = self
            .val(ai)
            .data()
            .iter()
            .zip(self.val(bi).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.val(ai).shape(), data)?;
        Ok(self.push_op(value, Op::Mul { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let value = Tensor::scalar(self.val(xi).sum());
        Ok(self.push_op(value, Op::Sum { x: xi }, &[xi]))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let xi = self.index(x)?;
        let value = self.val(xi).map(|v| v * k);
        Ok(self.push_op(value, Op::Scale { x: xi, k }, &[xi]))
    }

    /// Mean of scalar variables.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("mean", "no inputs"));
        }
        let idx = xs.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = idx.iter().find(|&&i| !self.val(i).is_scalar()) {
            return Err(Error::shape(
                "mean",
                format!("input shape {:?} is not scalar", self.val(bad).shape()),
            ));
        }
        let n = T::of(idx.len() as f64);
        let total = idx.iter().fold(T::zero(), |acc, &i| acc + self.val(i).data()[0]);
        let value = Tensor::scalar(total / n);
        Ok(self.push_op(value, Op::Mean { xs: idx.clone() }, &idx))
    }

    // ---- normalization ----

    /// Batch normalization over every position of a channel-last tensor.
    /// In [`NormMode::Train`] the batch statistics are returned so the
    /// caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let xs = self.val(xi).shape().to_vec();
        let c = *xs.last().unwrap();
        for (name, i) in [("scale", gi), ("shift", bi)] {
            if self.val(i).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?}, expected [{c}]", self.val(i).shape()),
                ));
            }
        }
        let rows = self.val(xi).len() / c;
        let (stats, batch_statistics) = match mode {
            NormMode::Train => {
                let (mean, var) = ops::norm::batch_stats(rows, c, self.val(xi).data());
                (BatchStats { mean, var }, true)
            }
            NormMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics have {} channels, input {c}", mean.len()),
                    ));
                }
                (
                    BatchStats {
                        mean: mean.to_vec(),
                        var: var.to_vec(),
                    },
                    false,
                )
            }
        };
        let (y, x_hat, inv_std) = ops::norm::forward(
            c,
            self.val(xi).data(),
            &stats.mean,
            &stats.var,
            self.val(gi).data(),
            self.val(bi).data(),
        );
        let value = Tensor::new(&xs, y)?;
        let var = self.push_op(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                x_hat,
                inv_std,
                batch_statistics,
            },
            &[xi, gi, bi],
        );
        Ok((var, batch_statistics.then_some(stats)))
    }

    // ---- structural ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let value = self.val(xi).clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape { x: xi }, &[xi]))
    }

    /// Item `item` of a batched tensor, dropping the leading axis.
    pub fn select(&mut self, x: Var, item: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let xs = self.val(xi).shape();
        if xs.len() < 2 || item >= xs[0] {
            return Err(Error::shape("select", format!("item {item} of shape {xs:?}")));
        }
        let inner: Vec<usize> = xs[1..].to_vec();
        let n: usize = inner.iter().product();
        let data = self.val(xi).data()[item * n..(item + 1) * n].to_vec();
        let value = Tensor::new(&inner, data)?;
        Ok(self.push_op(value, Op::Select { x: xi, item }, &[xi]))
    }

    /// Reinterprets an `H×W×(cells·depth)` map as a `H×W×depth×cells` grid:
    /// flat channel `depth·c + z` becomes cell value `c` at depth `z`.
    pub fn to_grid(&mut self, a: Var, depth: usize) -> Result<Var> {
        let ai = self.index(a)?;
        let &[h, w, k] = self.val(ai).shape() else {
            return Err(Error::shape(
                "to_grid",
                format!("expected H×W×C, got {:?}", self.val(ai).shape()),
            ));
        };
        if depth == 0 || k % depth != 0 {
            return Err(Error::shape(
                "to_grid",
                format!("{k} channels not divisible by depth {depth}"),
            ));
        }
        let cells = k / depth;
        let src = self.val(ai).data();
        let mut data = vec![T::zero(); src.len()];
        for p in 0..h * w {
            for c in 0..cells {
                for z in 0..depth {
                    data[(p * depth + z) * cells + c] = src[p * k + depth * c + z];
                }
            }
        }
        let value = Tensor::new(&[h, w, depth, cells], data)?;
        Ok(self.push_op(value, Op::ToGrid { a: ai, depth, cells }, &[ai]))
    }

    // ---- full-resolution path ----

    /// Guidance map `H×W×1` from `phi` (`H×W×3`), color matrix `3×3`, scalar
    /// bias `1`, channel bias `3`, thresholds and slopes `3×K`.
    pub fn guidance(
        &mut self,
        phi: Var,
        matrix: Var,
        bias: Var,
        channel_bias: Var,
        thresholds: Var,
        slopes: Var,
    ) -> Result<Var> {
        let idx = [phi, matrix, bias, channel_bias, thresholds, slopes]
            .iter()
            .map(|&v| self.index(v))
            .collect::<Result<Vec<_>>>()?;
        let [pi, mi, bi, ci, ti, si] = idx[..] else { unreachable!() };
        let ps = self.val(pi).shape().to_vec();
        let &[h, w, 3] = &ps[..] else {
            return Err(Error::shape("guidance", format!("input must be H×W×3, got {ps:?}")));
        };
        let knots = match self.val(ti).shape() {
            &[3, k] => k,
            s => return Err(Error::shape("guidance", format!("thresholds must be 3×K, got {s:?}"))),
        };
        let checks = [
            (mi, vec![3, 3], "matrix"),
            (bi, vec![1], "bias"),
            (ci, vec![3], "channel bias"),
            (si, vec![3, knots], "slopes"),
        ];
        for (i, expected, name) in checks {
            if self.val(i).shape() != expected.as_slice() {
                return Err(Error::shape(
                    "guidance",
                    format!("{name} shape {:?}, expected {expected:?}", self.val(i).shape()),
                ));
            }
        }
        let args = self.guide_args(mi, bi, ci, ti, si, knots);
        let (g, sig) = ops::guide::forward(&args, self.val(pi).data());
        self.signature.push(sig);
        let value = Tensor::new(&[h, w, 1], g)?;
        Ok(self.push_op(
            value,
            Op::Guidance {
                phi: pi,
                matrix: mi,
                bias: bi,
                channel_bias: ci,
                thresholds: ti,
                slopes: si,
                knots,
            },
            &idx,
        ))
    }

    fn guide_args(&self, mi: usize, bi: usize, ci: usize, ti: usize, si: usize, knots: usize) -> GuideArgs<'_, T> {
        GuideArgs {
            matrix: self.val(mi).data(),
            bias: self.val(bi).data()[0],
            channel_bias: self.val(ci).data(),
            thresholds: self.val(ti).data(),
            slopes: self.val(si).data(),
            knots,
        }
    }

    /// Trilinear slice of `grid` (`gh×gw×depth×cells`) at every pixel of the
    /// guidance map `g` (`H×W×1`, values in `[0, 1]`).
    pub fn slice(&mut self, grid: Var, g: Var) -> Result<Var> {
        let (gi, ri) = (self.index(grid)?, self.index(g)?);
        let &[gh, gw, depth, cells] = self.val(gi).shape() else {
            return Err(Error::shape(
                "slice",
                format!("grid must be gh×gw×depth×cells, got {:?}", self.val(gi).shape()),
            ));
        };
        let &[h, w, 1] = self.val(ri).shape() else {
            return Err(Error::shape(
                "slice",
                format!("guidance must be H×W×1, got {:?}", self.val(ri).shape()),
            ));
        };
        if let Some(p) = self
            .val(ri)
            .data()
            .iter()
            .position(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::Invalid(format!(
                "slice: guidance value {} at pixel ({}, {}) outside [0, 1]",
                self.val(ri).data()[p],
                p / w,
                p % w
            )));
        }
        let dims = GridDims {
            height: gh,
            width: gw,
            depth,
            cells,
        };
        let (data, sig) = ops::slice::forward(&dims, self.val(gi).data(), h, w, self.val(ri).data());
        self.signature.push(sig);
        let value = Tensor::new(&[h, w, cells], data)?;
        Ok(self.push_op(value, Op::Slice { grid: gi, g: ri, dims, h, w }, &[gi, ri]))
    }

    /// Per-pixel affine transform of `phi` (`H×W×3`) by `coeffs` (`H×W×12`).
    pub fn apply_affine(&mut self, coeffs: Var, phi: Var) -> Result<Var> {
        let (ai, pi) = (self.index(coeffs)?, self.index(phi)?);
        let cs = self.val(ai).shape();
        let ps = self.val(pi).shape();
        let (&[h, w, ops::affine::COEFFS], &[ph, pw, ops::affine::INPUTS]) = (cs, ps) else {
            return Err(Error::shape(
                "apply_affine",
                format!("coefficients {cs:?} must be H×W×12 and input {ps:?} H×W×3"),
            ));
        };
        if (h, w) != (ph, pw) {
            return Err(Error::shape(
                "apply_affine",
                format!("coefficients are {h}×{w}, input is {ph}×{pw}"),
            ));
        }
        let data = ops::affine::forward(self.val(ai).data(), self.val(pi).data());
        let value = Tensor::new(&[h, w, ops::affine::OUTPUTS], data)?;
        Ok(self.push_op(value, Op::ApplyAffine { coeffs: ai, phi: pi }, &[ai, pi]))
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, out: Var, target: Var) -> Result<Var> {
        let (oi, ti) = (self.index(out)?, self.index(target)?);
        if self.val(oi).shape() != self.val(ti).shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.val(oi).shape(), self.val(ti).shape()),
            ));
        }
        let value = Tensor::scalar(crate::train::mean_squared_error(
            self.val(oi).data(),
            self.val(ti).data(),
        ));
        Ok(self.push_op(value, Op::Mse { out: oi, target: ti }, &[oi, ti]))
    }

    /// Records an op with a caller-supplied backward rule. `backward`
    /// receives the input values and the output gradient and returns one
    /// gradient per input.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor<T>, backward: F) -> Result<Var>
    where
        F: Fn(&[&Tensor<T>], &[T]) -> Vec<Vec<T>> + Send + Sync + 'static,
    {
        let idx = inputs.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        Ok(self.push_op(
            value,
            Op::Custom {
                inputs: idx.clone(),
                backward: Box::new(backward),
            },
            &idx,
        ))
    }

    // ---- reverse pass ----

    /// Populates gradients of the scalar `loss` with respect to every
    /// recorded value that requires them. A second call without
    /// [`Tape::reset_grads`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        if self.grads.is_some() {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if !self.val(li).is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.val(li).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (j, contrib) in self.node_backward(i, &g)? {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// requires gradients and is reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let i = self.index(v).ok()?;
        self.grads.as_ref()?.get(i)?.as_ref()
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Gradient contributions `(input, d_input)` of node `i`.
    fn node_backward(&self, i: usize, dy: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, ref geom } => {
                if self.needs(x) {
                    out.push((x, ops::conv::backward_input(geom, self.val(w).data(), dy)));
                }
                if self.needs(w) || self.needs(b) {
                    let (dw, db) = ops::conv::backward_params(geom, self.val(x).data(), dy);
                    out.push((w, dw));
                    out.push((b, db));
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                c_in,
                c_out,
            } => {
                if self.needs(x) {
                    out.push((x, ops::linear::backward_input(rows, c_in, c_out, self.val(w).data(), dy)));
                }
                if self.needs(w) {
                    out.push((w, ops::linear::backward_weights(rows, c_in, c_out, self.val(x).data(), dy)));
                }
                if let Some(b) = b {
                    out.push((b, ops::linear::backward_bias(c_out, dy)));
                }
            }
            &Op::AddChannels { x, v, per_item, c } => {
                out.push((x, dy.to_vec()));
                let mut dv = vec![T::zero(); self.val(v).len()];
                for (k, &d) in dy.iter().enumerate() {
                    dv[(k / per_item) * c + k % c] += d;
                }
                out.push((v, dv));
            }
            &Op::Relu { x } => {
                let dx = self
                    .val(x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_statistics,
            } => {
                let c = self.val(*gamma).len();
                let (dx, dg, db) =
                    ops::norm::backward(c, dy, x_hat, inv_std, self.val(*gamma).data(), *batch_statistics);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            &Op::Reshape { x } => out.push((x, dy.to_vec())),
            &Op::Select { x, item } => {
                let mut dx = vec![T::zero(); self.val(x).len()];
                dx[item * dy.len()..(item + 1) * dy.len()].copy_from_slice(dy);
                out.push((x, dx));
            }
            &Op::ToGrid { a, depth, cells } => {
                let k = depth * cells;
                let mut da = vec![T::zero(); dy.len()];
                for p in 0..dy.len() / k {
                    for c in 0..cells {
                        for z in 0..depth {
                            da[p * k + depth * c + z] = dy[(p * depth + z) * cells + c];
                        }
                    }
                }
                out.push((a, da));
            }
            &Op::Guidance {
                phi,
                matrix,
                bias,
                channel_bias,
                thresholds,
                slopes,
                knots,
            } => {
                let args = self.guide_args(matrix, bias, channel_bias, thresholds, slopes, knots);
                let g = ops::guide::backward(&args, self.val(phi).data(), dy);
                out.push((phi, g.phi));
                out.push((matrix, g.matrix));
                out.push((bias, vec![g.bias]));
                out.push((channel_bias, g.channel_bias));
                out.push((thresholds, g.thresholds));
                out.push((slopes, g.slopes));
            }
            &Op::Slice { grid, g, ref dims, h, w } => {
                let (dgrid, dg) =
                    ops::slice::backward(dims, self.val(grid).data(), h, w, self.val(g).data(), dy);
                out.push((grid, dgrid));
                out.push((g, dg));
            }
            &Op::ApplyAffine { coeffs, phi } => {
                let (dc, dp) = ops::affine::backward(self.val(coeffs).data(), self.val(phi).data(), dy);
                out.push((coeffs, dc));
                out.push((phi, dp));
            }
            &Op::Mse { out: o, target } => {
                let (a, b) = (self.val(o).data(), self.val(target).data());
                let k = dy[0] * T::of(2.0 / a.len() as f64);
                let d: Vec<T> = a.iter().zip(b).map(|(&x, &y)| k * (x - y)).collect();
                out.push((target, d.iter().map(|&v| -v).collect()));
                out.push((o, d));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                out.push((a, dy.iter().zip(bv).map(|(&d, &y)| d * y).collect()));
                out.push((b, dy.iter().zip(av).map(|(&d, &x)| d * x).collect()));
            }
            &Op::Sum { x } => out.push((x, vec![dy[0]; self.val(x).len()])),
            &Op::Scale { x, k } => out.push((x, dy.iter().map(|&d| d * k).collect())),
            Op::Mean { xs } => {
                let share = dy[0] / T::of(xs.len() as f64);
                out.extend(xs.iter().map(|&x| (x, vec![share])));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&j| self.val(j)).collect();
                let grads = backward(&values, dy);
                if grads.len() != inputs.len() {
                    return Err(Error::Tape(format!(
                        "custom op returned {} gradients for {} inputs",
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&j, g) in inputs.iter().zip(grads) {
                    if g.len() != self.val(j).len() {
                        return Err(Error::Tape("custom op gradient has wrong length".into()));
                    }
                    out.push((j, g));
                }
            }
        }
        Ok(out)
    }
}
