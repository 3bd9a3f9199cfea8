//! Central finite-difference verification of tape gradients.
//!
//! The function under test may produce any tensor; non-scalar outputs are
//! reduced to a scalar with a fixed random projection. An element whose
//! `±step` evaluations land on a different linear piece of some kink (the
//! tape's activation signature changes) is skipped and counted.

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fullres::{forward_batch, Model};
use crate::net::{Mode, NetConfig, ParamVars};
use crate::tape::{NormMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-3,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Location {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Element with the largest relative error.
    pub worst: Option<Location>,
    /// Set when evaluation failed or produced non-finite values.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String) -> Self {
        GradCheckReport {
            max_rel_err: f64::INFINITY,
            pass: false,
            checked: 0,
            skipped_kinks: 0,
            worst: None,
            failure: Some(msg),
        }
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

struct Eval {
    loss: f64,
    signature: u64,
}

/// Compares tape gradients of `f` with central differences for every
/// element (or a sample of elements) of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    match run(&f, inputs, opts) {
        Ok(report) => report,
        Err(e) => GradCheckReport::failed(e.to_string()),
    }
}

fn run<F>(f: &F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe: Option<Tensor<f64>> = None;

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out_value = tape.value(out).clone();
    if !out_value.all_finite() {
        let p = out_value.data().iter().position(|v| !v.is_finite()).unwrap();
        return Ok(GradCheckReport::failed(format!(
            "non-finite output at element {p} of the unperturbed evaluation"
        )));
    }
    if !out_value.is_scalar() {
        probe = Some(Tensor::from_fn(out_value.shape(), |_| rng.gen_range(-1.0..1.0)));
    }
    let loss = reduce(&mut tape, out, probe.as_ref())?;
    let base_signature = tape.kink_signature();
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let evaluate = |perturbed: &[Tensor<f64>]| -> Result<Eval> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = reduce(&mut tape, out, probe.as_ref())?;
        Ok(Eval {
            loss: tape.value(loss).data()[0],
            signature: tape.kink_signature(),
        })
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
        failure: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (input, tensor) in inputs.iter().enumerate() {
        let n = tensor.len();
        let elements: Vec<usize> = match opts.max_elements {
            Some(k) if k < n => {
                let mut picked = sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for element in elements {
            let orig = tensor.data()[element];
            work[input].data_mut()[element] = orig + opts.step;
            let plus = evaluate(&work)?;
            work[input].data_mut()[element] = orig - opts.step;
            let minus = evaluate(&work)?;
            work[input].data_mut()[element] = orig;
            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                return Ok(GradCheckReport::failed(format!(
                    "non-finite loss when perturbing input {input} element {element}"
                )));
            }
            if plus.signature != base_signature || minus.signature != base_signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * opts.step);
            let exact = analytic[input].data()[element];
            let err = relative_error(exact, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(Location {
                    input,
                    element,
                    analytic: exact,
                    numeric,
                });
            }
        }
    }
    report.pass = report.max_rel_err < opts.tolerance;
    Ok(report)
}

fn reduce(tape: &mut Tape<f64>, out: Var, probe: Option<&Tensor<f64>>) -> Result<Var> {
    match probe {
        None => Ok(out),
        Some(p) => {
            let w = tape.constant(p.clone());
            let prod = tape.mul(out, w)?;
            tape.sum(prod)
        }
    }
}

/// Deterministic uniform `[lo, hi)` tensor for test inputs.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// One named entry of [`suite`].
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Gradient checks of every differentiable op and of the whole model at
/// scale 0.25. Inputs are drawn from `seed`; `opts.seed` is overridden per
/// check so the table is reproducible.
pub fn suite(seed: u64, opts: &GradCheckOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts_for = |i: u64| GradCheckOptions {
        seed: seed.wrapping_mul(31).wrapping_add(i),
        ..opts.clone()
    };
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| out.push(Check { name, report });

    let conv_inputs = |rng: &mut ChaCha8Rng, shape: [usize; 4], c_out: usize| {
        vec![
            random_tensor(rng, &shape, -1.0, 1.0),
            random_tensor(rng, &[3, 3, shape[3], c_out], -0.5, 0.5),
            random_tensor(rng, &[c_out], -0.2, 0.2),
        ]
    };
    let inputs = conv_inputs(&mut rng, [2, 5, 5, 3], 4);
    push("conv2d", grad_check(|t, v| t.conv2d(v[0], v[1], v[2], 1), &inputs, &opts_for(0)));
    let inputs = conv_inputs(&mut rng, [1, 6, 5, 2], 3);
    push("conv2d_stride2", grad_check(|t, v| t.conv2d(v[0], v[1], v[2], 2), &inputs, &opts_for(1)));

    let inputs = vec![
        random_tensor(&mut rng, &[3, 7], -1.0, 1.0),
        random_tensor(&mut rng, &[7, 5], -0.5, 0.5),
        random_tensor(&mut rng, &[5], -0.2, 0.2),
    ];
    push(
        "fully_connected",
        grad_check(|t, v| t.linear(v[0], v[1], Some(v[2])), &inputs, &opts_for(2)),
    );

    let inputs = vec![
        random_tensor(&mut rng, &[2, 3, 3, 4], -1.0, 1.0),
        random_tensor(&mut rng, &[4], 0.5, 1.5),
        random_tensor(&mut rng, &[4], -0.5, 0.5),
    ];
    push(
        "batch_norm",
        grad_check(
            |t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Train)?.0),
            &inputs,
            &opts_for(3),
        ),
    );

    let mut inputs = conv_inputs(&mut rng, [2, 4, 4, 2], 3);
    inputs.push(random_tensor(&mut rng, &[48, 2], -0.5, 0.5));
    inputs.push(random_tensor(&mut rng, &[2, 2], -1.0, 1.0));
    push(
        "relu_composite",
        grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1)?;
                let y = t.relu(y)?;
                let y = t.reshape(y, &[2, 48])?;
                let y = t.linear(y, v[3], None)?;
                t.mse(y, v[4])
            },
            &inputs,
            &opts_for(4),
        ),
    );

    let guide = crate::fullres::init_guidance::<f64>();
    let jitter = |rng: &mut ChaCha8Rng, t: &Tensor<f64>, amount: f64| {
        Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.gen_range(-amount..amount))
    };
    let inputs = vec![
        random_tensor(&mut rng, &[3, 4, 3], 0.0, 1.0),
        jitter(&mut rng, &guide.matrix, 0.1),
        random_tensor(&mut rng, &[1], -0.05, 0.05),
        random_tensor(&mut rng, &[3], -0.05, 0.05),
        jitter(&mut rng, &guide.thresholds, 0.02),
        Tensor::from_fn(&[3, crate::fullres::KNOTS], |i| {
            guide.slopes.data()[i] + rng.gen_range(-0.02..0.02)
        }),
    ];
    push(
        "guidance",
        grad_check(|t, v| t.guidance(v[0], v[1], v[2], v[3], v[4], v[5]), &inputs, &opts_for(5)),
    );

    let inputs = vec![
        random_tensor(&mut rng, &[4, 4, 4, 12], -1.0, 1.0),
        random_tensor(&mut rng, &[8, 8, 1], 0.05, 0.95),
    ];
    push("slice", grad_check(|t, v| t.slice(v[0], v[1]), &inputs, &opts_for(6)));

    let inputs = vec![
        random_tensor(&mut rng, &[4, 3, 12], -1.0, 1.0),
        random_tensor(&mut rng, &[4, 3, 3], 0.0, 1.0),
    ];
    push("apply", grad_check(|t, v| t.apply_affine(v[0], v[1]), &inputs, &opts_for(7)));

    let inputs = vec![
        random_tensor(&mut rng, &[3, 4, 3], 0.0, 1.0),
        random_tensor(&mut rng, &[3, 4, 3], 0.0, 1.0),
    ];
    push("loss", grad_check(|t, v| t.mse(v[0], v[1]), &inputs, &opts_for(8)));

    push("model", model_check(&mut rng, opts_for(9)));
    out
}

/// Whole model in training mode on a batch of two: every parameter array,
/// both low-res inputs and both full-res inputs are perturbed.
fn model_check(rng: &mut ChaCha8Rng, mut opts: GradCheckOptions) -> GradCheckReport {
    let config = NetConfig {
        scale: 0.25,
        lowres: 64,
        depth: 4,
    };
    let model = match Model::<f64>::new(rng.gen(), config) {
        Ok(m) => m,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };
    // A conv bias followed by batch normalization is cancelled by the mean
    // subtraction: its exact gradient is 0, where relative error means
    // nothing, so it is held constant here.
    let feeds_norm = |name: &str| {
        name.strip_suffix(".b")
            .is_some_and(|layer| model.net.params.contains_key(&format!("bn.{layer}.gamma")))
    };
    let names: Vec<String> = model
        .named_params()
        .map(|(k, _)| k.to_string())
        .filter(|k| !feeds_norm(k))
        .collect();
    let fixed: Vec<(String, Tensor<f64>)> = model
        .named_params()
        .filter(|(k, _)| feeds_norm(k))
        .map(|(k, t)| (k.to_string(), t.clone()))
        .collect();
    let mut inputs: Vec<Tensor<f64>> = model
        .named_params()
        .filter(|(k, _)| !feeds_norm(k))
        .map(|(_, t)| t.clone())
        .collect();
    // Nonzero biases keep the check away from trivially symmetric points.
    for (name, t) in names.iter().zip(inputs.iter_mut()) {
        if name.ends_with(".b") || name.ends_with(".beta") {
            *t = random_tensor(rng, t.shape(), -0.1, 0.1);
        }
    }
    let (h, w) = (32, 32);
    let batch = 4;
    // Items with distinct global brightness keep the 1×1 global batch
    // statistics away from zero variance, where the loss is sharply curved.
    let mut lowres = Vec::with_capacity(batch * 64 * 64 * 3);
    for _ in 0..batch {
        let lo = rng.gen_range(0.0..0.5);
        lowres.extend(random_tensor(rng, &[64, 64, 3], lo, lo + 0.5).into_data());
    }
    inputs.push(Tensor::new(&[batch, 64, 64, 3], lowres).expect("batch shape"));
    for _ in 0..2 * batch {
        inputs.push(random_tensor(rng, &[h, w, 3], 0.0, 1.0));
    }
    opts.max_elements = Some(opts.max_elements.unwrap_or(4).min(4));
    let n = names.len();
    grad_check(
        |t, v| {
            let mut vars: ParamVars = names.iter().cloned().zip(v[..n].iter().copied()).collect();
            for (k, value) in &fixed {
                vars.insert(k.clone(), t.constant(value.clone()));
            }
            let images: Vec<Var> = v[n + 1..n + 1 + batch].to_vec();
            let fwd = forward_batch(t, &model.net, &vars, v[n], &images, Mode::Train)?;
            let losses = (0..batch)
                .map(|i| t.mse(fwd.outputs[i], v[n + 1 + batch + i]))
                .collect::<Result<Vec<_>>>()?;
            t.mean(&losses)
        },
        &inputs,
        &opts,
    )
}
