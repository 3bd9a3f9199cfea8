//! Binary checkpoint container.
//!
//! ```text
//! u32 version | u32 record count | record*
//! record = u32 name length | name (UTF-8) | u32 rank | u32 extent × rank | f32 × Π extents
//! ```
//!
//! All integers and floats are little-endian. Besides the learnable arrays
//! a checkpoint holds `meta.scale`, `meta.lowres`, `meta.depth`, running
//! batch-norm statistics `bn.<layer>.mean` / `bn.<layer>.var`, and
//! optionally optimizer state (`adam.step`, `adam.m.<param>`,
//! `adam.v.<param>`) with the last finished epoch `train.epoch`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::fullres::{GuidanceParams, Model, GUIDE_NAMES};
use crate::net::{self, NetConfig, NetParams, RunningStats};
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Last finished epoch, 0-based.
    pub epoch: Option<usize>,
}

impl Checkpoint {
    pub fn model_only(model: Model<f32>) -> Self {
        Checkpoint {
            model,
            adam: None,
            epoch: None,
        }
    }
}

fn scalar(v: f32) -> Tensor<f32> {
    Tensor::scalar(v)
}

fn records(ckpt: &Checkpoint) -> Vec<(String, Tensor<f32>)> {
    let cfg = ckpt.model.config();
    let mut out = vec![
        ("meta.scale".to_string(), scalar(cfg.scale as f32)),
        ("meta.lowres".to_string(), scalar(cfg.lowres as f32)),
        ("meta.depth".to_string(), scalar(cfg.depth as f32)),
    ];
    out.extend(ckpt.model.named_params().map(|(k, v)| (k.to_string(), v.clone())));
    for (layer, r) in &ckpt.model.net.running {
        let vec = |v: &[f32]| Tensor::new(&[v.len()], v.to_vec()).expect("1-D");
        out.push((format!("bn.{layer}.mean"), vec(&r.mean)));
        out.push((format!("bn.{layer}.var"), vec(&r.var)));
    }
    if let Some(adam) = &ckpt.adam {
        out.push(("adam.step".into(), scalar(adam.step as f32)));
        out.extend(adam.m.iter().map(|(k, v)| (format!("adam.m.{k}"), v.clone())));
        out.extend(adam.v.iter().map(|(k, v)| (format!("adam.v.{k}"), v.clone())));
    }
    if let Some(epoch) = ckpt.epoch {
        out.push(("train.epoch".into(), scalar(epoch as f32)));
    }
    out
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let recs = records(ckpt);
    let mut buf = Vec::new();
    let u32_le = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    u32_le(&mut buf, VERSION as usize);
    u32_le(&mut buf, recs.len());
    for (name, t) in &recs {
        u32_le(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        u32_le(&mut buf, t.rank());
        for &d in t.shape() {
            u32_le(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Writes through a temporary sibling file so a crash never leaves a
/// truncated checkpoint behind.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, encode(ckpt)).map_err(|e| Error::io(path, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()?;
    let mut recs: IndexMap<String, Tensor<f32>> = IndexMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("record name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.err(format!("record {name} is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.err(format!("record {name}: {e}")))?;
        if recs.insert(name.clone(), t).is_some() {
            return Err(r.err(format!("duplicate record {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    assemble(recs, path)
}

fn assemble(mut recs: IndexMap<String, Tensor<f32>>, path: &Path) -> Result<Checkpoint> {
    let err = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut take = |name: &str| recs.shift_remove(name).ok_or_else(|| err(format!("missing record {name}")));
    let meta = |t: Tensor<f32>| t.data().first().copied().unwrap_or(f32::NAN);
    // Shortest decimal that round-trips the stored f32, so 0.25 and 0.3 come back exact.
    let scale: f64 = meta(take("meta.scale")?).to_string().parse().expect("float display parses");
    let config = NetConfig {
        scale,
        lowres: meta(take("meta.lowres")?) as usize,
        depth: meta(take("meta.depth")?) as usize,
    };
    let reference = net::init_params::<f32>(0, config).map_err(|e| err(e.to_string()))?;
    let mut params = IndexMap::new();
    for name in reference.params.keys() {
        params.insert(name.clone(), take(name)?);
    }
    let mut guide = Vec::with_capacity(GUIDE_NAMES.len());
    for name in GUIDE_NAMES {
        guide.push(take(name)?);
    }
    let mut running = IndexMap::new();
    for layer in config.layers()? {
        if let (Ok(mean), Ok(var)) = (take(&format!("bn.{}.mean", layer.name)), take(&format!("bn.{}.var", layer.name))) {
            running.insert(
                layer.name.clone(),
                RunningStats {
                    mean: mean.into_data(),
                    var: var.into_data(),
                },
            );
        }
    }
    let adam = match take("adam.step") {
        Ok(step) => {
            let mut state = AdamState::new();
            state.step = meta(step) as u64;
            for name in params.keys().map(String::as_str).chain(GUIDE_NAMES) {
                if let Ok(m) = take(&format!("adam.m.{name}")) {
                    state.m.insert(name.to_string(), m);
                }
                if let Ok(v) = take(&format!("adam.v.{name}")) {
                    state.v.insert(name.to_string(), v);
                }
            }
            Some(state)
        }
        Err(_) => None,
    };
    let epoch = take("train.epoch").ok().map(|t| meta(t) as usize);
    if let Some(name) = recs.keys().next() {
        return Err(err(format!("unknown record {name}")));
    }
    let mut guide = guide.into_iter();
    let mut next = || guide.next().expect("five guidance arrays");
    let model = Model {
        net: NetParams {
            config,
            params,
            running,
        },
        guide: GuidanceParams {
            matrix: next(),
            bias: next(),
            channel_bias: next(),
            thresholds: next(),
            slopes: next(),
        },
    };
    model.net.validate().map_err(|e| err(e.to_string()))?;
    let reference = crate::fullres::init_guidance::<f32>();
    for ((name, have), (_, want)) in model.guide.entries().iter().zip(reference.entries()) {
        if have.shape() != want.shape() {
            return Err(err(format!("{name} has shape {:?}, expected {:?}", have.shape(), want.shape())));
        }
    }
    Ok(Checkpoint { model, adam, epoch })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            scale: 0.25,
            lowres: 64,
            depth: 4,
        }
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let mut model = Model::<f32>::new(3, small()).unwrap();
        model.net.ensure_running().unwrap();
        let mut adam = AdamState::new();
        adam.step = 7;
        adam.m.insert("S1.w".into(), Tensor::full(&[3, 3, 3, 2], 0.5));
        adam.v.insert("guide.a".into(), Tensor::full(&[3, 16], 0.25));
        let ckpt = Checkpoint {
            model,
            adam: Some(adam),
            epoch: Some(4),
        };
        let back = decode(&encode(&ckpt), Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn non_binary_scale_survives() {
        let cfg = NetConfig {
            scale: 0.5,
            lowres: 32,
            depth: 2,
        };
        let ckpt = Checkpoint::model_only(Model::new(0, cfg).unwrap());
        assert_eq!(decode(&encode(&ckpt), Path::new("mem")).unwrap().model.config(), cfg);
    }

    #[test]
    fn rejects_version_truncation_and_junk() {
        let ckpt = Checkpoint::model_only(Model::new(0, small()).unwrap());
        let mut bytes = encode(&ckpt);
        let p = Path::new("x.ckpt");
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], p),
            Err(Error::Checkpoint { .. })
        ));
        bytes.push(0);
        assert!(decode(&bytes, p).is_err());
        bytes.pop();
        bytes[..4].copy_from_slice(&2u32.to_le_bytes());
        match decode(&bytes, p) {
            Err(e @ Error::CheckpointVersion { found: 2, expected: 1, .. }) => {
                assert!(e.to_string().contains("version 2"));
            }
            other => panic!("{other:?}"),
        }
    }
}
