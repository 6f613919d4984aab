//! Binary checkpoint: a text header of `key value` lines ending in a blank
//! line, then named little-endian f32 tensors, then the vocabulary.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use super::{LossKind, ModelConfig, ModelParams, NetParams, ReadoutConfig, ReadoutKind, SessionModel};
use crate::dataio::Vocab;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "sessgraph-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SessionModel,
    pub vocab: Vocab,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_u32(w: &mut impl Write, x: u32) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn write_u64(w: &mut impl Write, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    String::from_utf8(buf).map_err(|_| bad("string is not UTF-8"))
}

fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn save_checkpoint(path: &Path, model: &SessionModel, vocab: &Vocab) -> Result<()> {
    if vocab.len() != model.m() {
        return Err(Error::Shape(format!(
            "vocabulary has {} items but the model has {}",
            vocab.len(),
            model.m()
        )));
    }
    let cfg = &model.config;
    let mut tensors = vec![("phi", model.phi.view().into_dyn())];
    tensors.extend(model.params.tensors());

    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "format_version {CHECKPOINT_VERSION}")?;
        writeln!(w, "m {}", model.m())?;
        writeln!(w, "d {}", cfg.dim)?;
        writeln!(w, "steps {}", cfg.steps)?;
        writeln!(w, "readout {}", cfg.readout.kind)?;
        writeln!(w, "tau {}", cfg.readout.tau)?;
        writeln!(w, "loss {}", cfg.loss.as_str())?;
        writeln!(w, "tensors {}", tensors.len())?;
        writeln!(w)?;
        for (name, t) in &tensors {
            write_string(&mut w, name)?;
            write_u32(&mut w, t.ndim() as u32)?;
            for &dim in t.shape() {
                write_u64(&mut w, dim as u64)?;
            }
            for &x in t.iter() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        write_u64(&mut w, vocab.len() as u64)?;
        for (_, raw) in vocab.iter() {
            write_string(&mut w, raw)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

fn read_header(r: &mut impl Read) -> Result<HashMap<String, String>> {
    let mut lines = Vec::new();
    let mut line = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b).map_err(|_| bad("header is not terminated"))?;
        if b[0] != b'\n' {
            line.push(b[0]);
            continue;
        }
        let text = String::from_utf8(std::mem::take(&mut line)).map_err(|_| bad("header is not UTF-8"))?;
        if text.is_empty() {
            break;
        }
        lines.push(text);
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(bad("not a checkpoint file"));
    }
    lines[1..]
        .iter()
        .map(|l| {
            l.split_once(' ')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| bad(format!("malformed header line `{l}`")))
        })
        .collect()
}

fn field<T: std::str::FromStr>(header: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = header.get(key).ok_or_else(|| bad(format!("header lacks `{key}`")))?;
    raw.parse().map_err(|_| bad(format!("bad value `{raw}` for `{key}`")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(&mut r)?;
    let version: u32 = field(&header, "format_version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let m: usize = field(&header, "m")?;
    let kind: ReadoutKind = field::<String>(&header, "readout")?.parse()?;
    let loss: LossKind = field::<String>(&header, "loss")?.parse()?;
    let config = ModelConfig {
        dim: field(&header, "d")?,
        steps: field(&header, "steps")?,
        readout: ReadoutConfig {
            kind,
            tau: field(&header, "tau")?,
        },
        loss,
    };
    config.validate()?;
    let count: usize = field(&header, "tensors")?;

    let mut stored: HashMap<String, ArrayD<f64>> = HashMap::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| read_u64(&mut r).map(|x| x as usize)).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(|e| bad(format!("tensor `{name}` truncated: {e}")))?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad(e.to_string()))?;
        stored.insert(name, t);
    }
    let n_vocab = read_u64(&mut r)? as usize;
    let vocab: Vocab = (0..n_vocab).map(|_| read_string(&mut r)).collect::<Result<Vec<_>>>()?.into_iter().collect();
    if vocab.len() != m {
        return Err(bad(format!("vocabulary has {} items, header says {m}", vocab.len())));
    }

    let d = config.dim;
    let mut params = ModelParams {
        beta: Array2::zeros((m, d)),
        net: NetParams::init(d, kind, &mut crate::rng::stream(0, "checkpoint-shape")).zeros_like(),
    };
    let mut phi = Array2::<f64>::zeros((m, d));
    let mut targets = vec![("phi", phi.view_mut().into_dyn())];
    targets.extend(params.tensors_mut());
    if targets.len() != stored.len() {
        return Err(bad(format!(
            "expected {} tensors for a {kind} model, found {}",
            targets.len(),
            stored.len()
        )));
    }
    for (name, mut slot) in targets {
        let t = stored.get(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(bad(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.assign(t);
    }
    let model = SessionModel::new(config, phi, params)?;
    Ok(Checkpoint { model, vocab })
}
