use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::load_image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One input image and one expert's retouched version of it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePair {
    pub input: PathBuf,
    pub target: PathBuf,
    pub expert: String,
}

impl ImagePair {
    /// Decodes both images and checks that their extents agree.
    pub fn load(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let input = load_image(&self.input)?;
        let target = load_image(&self.target)?;
        if input.shape() != target.shape() {
            return Err(Error::Image {
                path: self.target.clone(),
                msg: format!(
                    "target is {:?} but input {} is {:?}",
                    target.shape(),
                    self.input.display(),
                    input.shape()
                ),
            });
        }
        Ok((input, target))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    input: String,
    target: String,
    expert: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Splits off a validation set holding `round(ratio·n)` pairs chosen by
    /// a seeded shuffle. Returns `(train, validation)`, both in original order.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
        }
        let n = self.pairs.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = (ratio * n as f64).round() as usize;
        let mut in_val = vec![false; n];
        order[..k].iter().for_each(|&i| in_val[i] = true);
        let (val, train): (Vec<_>, Vec<_>) = self.pairs.iter().cloned().zip(in_val).partition(|(_, v)| *v);
        Ok((
            Dataset {
                pairs: train.into_iter().map(|(p, _)| p).collect(),
            },
            Dataset {
                pairs: val.into_iter().map(|(p, _)| p).collect(),
            },
        ))
    }
}

/// Reads a JSON-lines manifest. Relative paths resolve against the
/// manifest's directory; blank lines are ignored; duplicates are kept.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        pairs.push(ImagePair {
            input: base.join(entry.input),
            target: base.join(entry.target),
            expert: entry.expert,
        });
    }
    Ok(Dataset { pairs })
}

/// Writes `dataset` as JSON lines, storing paths relative to the manifest
/// directory where possible.
pub fn write_manifest(path: &Path, dataset: &Dataset) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    let mut out = Vec::new();
    for pair in &dataset.pairs {
        let line = ManifestLine {
            input: rel(&pair.input),
            target: rel(&pair.target),
            expert: pair.expert.clone(),
        };
        serde_json::to_writer(&mut out, &line).expect("manifest line serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Concatenates per-expert datasets, keeping every pair and its tag.
pub fn combine_experts(sets: &[Dataset]) -> Dataset {
    Dataset {
        pairs: sets.iter().flat_map(|d| d.pairs.iter().cloned()).collect(),
    }
}
