use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, AdamState};
use super::loss::{psnr, psnr_from_mse};
use super::schedule::{lr_at_epoch, Start, TrainConfig};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{resize_to_lowres, Dataset, ImagePair};
use crate::error::{Error, Result};
use crate::fullres::{enhance, forward_batch, stack, Model};
use crate::net::{self, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,step,loss,psnr,lr";

/// One metrics-log row. `step` is the 1-based global optimizer step, or
/// `None` for the end-of-epoch evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: Option<u64>,
    pub loss: f64,
    pub psnr: f64,
    pub lr: f64,
}

impl MetricRow {
    fn csv(&self) -> String {
        let step = self.step.map_or_else(|| "eval".to_string(), |s| s.to_string());
        format!("{},{step},{},{},{}", self.epoch, self.loss, self.psnr, self.lr)
    }
}

/// Appends `rows` to a CSV log, writing the header if the file is new.
pub fn write_metrics(path: &Path, rows: &[MetricRow], append: bool) -> Result<()> {
    let fresh = !append || !path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for row in rows {
        text.push_str(&row.csv());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A decoded training pair with its low-resolution copy.
#[derive(Clone, Debug)]
pub struct Sample {
    pub lowres: Tensor<f32>,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

pub fn load_sample(pair: &ImagePair, lowres: usize) -> Result<Sample> {
    let (input, target) = pair.load()?;
    if input.shape()[0] < 16 || input.shape()[1] < 16 {
        return Err(Error::Image {
            path: pair.input.clone(),
            msg: format!("image {:?} is smaller than 16×16", input.shape()),
        });
    }
    Ok(Sample {
        lowres: resize_to_lowres(&input, lowres)?,
        input,
        target,
    })
}

/// One optimizer step on a batch. The loss is the mean over items of each
/// item's mean squared error on the unclamped output. Returns that loss.
pub fn train_step(model: &mut Model<f32>, adam: &mut AdamState<f32>, batch: &[Sample], lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let lowres = tape.constant(stack(&batch.iter().map(|s| s.lowres.clone()).collect::<Vec<_>>())?);
    let inputs: Vec<_> = batch.iter().map(|s| tape.constant(s.input.clone())).collect();
    let fwd = forward_batch(&mut tape, &model.net, &vars, lowres, &inputs, Mode::Train)?;
    let losses = fwd
        .outputs
        .iter()
        .zip(batch)
        .map(|(&out, s)| {
            let target = tape.constant(s.target.clone());
            tape.mse(out, target)
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = tape.mean(&losses)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Invalid(format!("training loss is {value}")));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|(name, &v)| {
            tape.grad(v)
                .cloned()
                .map(|g| (name.clone(), g))
                .ok_or_else(|| Error::MissingGradient(name.clone()))
        })
        .collect::<Result<IndexMap<_, _>>>()?;
    adam_step(&mut model.named_params_mut(), &grads, adam, lr)?;
    model.net.update_running(&fwd.trace.stats);
    Ok(value)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    /// Rows produced by this call (a resumed run holds only the new epochs).
    pub rows: Vec<MetricRow>,
}

/// Trains from scratch, or from `cfg.resume`. The shuffle of each epoch
/// depends only on `(seed, epoch)`, so a resumed run reproduces the
/// uninterrupted one.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (mut model, mut adam, start) = match &cfg.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.model.config() != cfg.net {
                return Err(Error::Config(format!(
                    "checkpoint {} holds {:?}, run asks for {:?}",
                    path.display(),
                    ckpt.model.config(),
                    cfg.net
                )));
            }
            let (Some(adam), Some(epoch)) = (ckpt.adam, ckpt.epoch) else {
                return Err(Error::Checkpoint {
                    path: path.clone(),
                    msg: "no optimizer state to resume from".into(),
                });
            };
            (ckpt.model, adam, epoch + 1)
        }
        None => {
            let mut model = Model::new(cfg.seed, cfg.net)?;
            if cfg.start == Start::IdentityGrid {
                net::force_identity(&mut model.net)?;
            }
            (model, AdamState::new(), 0)
        }
    };
    let eval_set = cfg.validation.as_ref().unwrap_or(dataset);
    let mut rows = Vec::new();
    for epoch in start..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let order = epoch_order(dataset.len(), cfg.seed, epoch);
        let first_row = rows.len();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .par_iter()
                .map(|&i| load_sample(&dataset.pairs[i], cfg.net.lowres))
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut model, &mut adam, &batch, lr)?;
            rows.push(MetricRow {
                epoch,
                step: Some(adam.step),
                loss,
                psnr: psnr_from_mse(loss, 1.0),
                lr,
            });
        }
        let report = evaluate(&model, eval_set)?;
        rows.push(MetricRow {
            epoch,
            step: None,
            loss: report.overall.mean_loss,
            psnr: report.overall.mean_psnr,
            lr,
        });
        if let Some(path) = &cfg.checkpoint {
            checkpoint::save(
                path,
                &Checkpoint {
                    model: model.clone(),
                    adam: Some(adam.clone()),
                    epoch: Some(epoch),
                },
            )?;
        }
        if let Some(path) = &cfg.metrics {
            let append = epoch > start || cfg.resume.is_some();
            write_metrics(path, &rows[first_row..], append)?;
        }
    }
    Ok(TrainOutcome { model, adam, rows })
}

/// Metrics of one pair, computed on the clamped output.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub input: PathBuf,
    pub target: PathBuf,
    pub expert: String,
    pub loss: f64,
    pub psnr: f64,
}

/// Means over a set of rows. `mean_psnr` skips `+∞` rows, which are
/// counted in `infinite`; it is `+∞` when every row is.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_loss: f64,
    pub mean_psnr: f64,
    pub infinite: usize,
}

impl EvalSummary {
    fn of<'a>(rows: impl Iterator<Item = &'a EvalRow>) -> Self {
        let (mut count, mut loss, mut psnr, mut finite) = (0usize, 0f64, 0f64, 0usize);
        for r in rows {
            count += 1;
            loss += r.loss;
            if r.psnr.is_finite() {
                psnr += r.psnr;
                finite += 1;
            }
        }
        EvalSummary {
            count,
            mean_loss: loss / count as f64,
            mean_psnr: if finite == 0 { f64::INFINITY } else { psnr / finite as f64 },
            infinite: count - finite,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub overall: EvalSummary,
    /// One summary per expert tag, in order of first appearance.
    pub per_expert: Vec<(String, EvalSummary)>,
}

/// Inference-mode metrics for every pair of `dataset`.
pub fn evaluate(model: &Model<f32>, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let rows = dataset
        .pairs
        .par_iter()
        .map(|pair| {
            let (input, target) = pair.load()?;
            let out = enhance(&input, model, Mode::Infer)?.map(|v| v.clamp(0.0, 1.0));
            let loss = out
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                / out.len() as f64;
            Ok(EvalRow {
                input: pair.input.clone(),
                target: pair.target.clone(),
                expert: pair.expert.clone(),
                loss,
                psnr: psnr(&out, &target, 1.0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut experts: Vec<String> = Vec::new();
    for r in &rows {
        if !experts.contains(&r.expert) {
            experts.push(r.expert.clone());
        }
    }
    let per_expert = experts
        .into_iter()
        .map(|e| {
            let s = EvalSummary::of(rows.iter().filter(|r| r.expert == e));
            (e, s)
        })
        .collect();
    Ok(EvalReport {
        overall: EvalSummary::of(rows.iter()),
        per_expert,
        rows,
    })
}

