//! SFW1 weights files: magic, u32 tensor count, then per tensor a u32 name
//! length, the UTF-8 name and an SFT1 blob.
//!
//! Every conv contributes `{name}.weight` and, when present, `{name}.bias`
//! and `{name}.bn.{gamma,beta,mean,var,eps}`. A `__mode__` tensor records
//! whether the weights are train-mode (0) or re-parameterized (1).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::conv::BatchNorm;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::config::ModelConfig;
use crate::model::network::SpikeYolo;
use crate::tensor::Tensor4;

const MAGIC: &[u8; 4] = b"SFW1";
const MODE_KEY: &str = "__mode__";

fn vector(v: &[f64]) -> Tensor4 {
    Tensor4::from_vec((1, 1, 1, v.len()), v.to_vec()).expect("finite parameters")
}

/// Flattens a model into named tensors.
pub fn named_tensors(model: &SpikeYolo) -> BTreeMap<String, Tensor4> {
    let mut out = BTreeMap::new();
    for conv in model.convs() {
        let s = &conv.spec;
        let w = Tensor4::from_vec((s.c_out, s.group_in(), s.k, s.k), s.weights.clone()).expect("finite weights");
        out.insert(format!("{}.weight", conv.name), w);
        if let Some(b) = &s.bias {
            out.insert(format!("{}.bias", conv.name), vector(b));
        }
        if let Some(bn) = &s.bn {
            for (field, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
                out.insert(format!("{}.bn.{field}", conv.name), vector(v));
            }
            out.insert(format!("{}.bn.eps", conv.name), vector(&[bn.eps]));
        }
    }
    let mode = if model.mode == Mode::Inference { 1.0 } else { 0.0 };
    out.insert(MODE_KEY.into(), vector(&[mode]));
    out
}

pub fn write_weights(model: &SpikeYolo, mut w: impl Write) -> Result<()> {
    let tensors = named_tensors(model);
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(&mut w)?;
    }
    Ok(())
}

pub fn save_weights(model: &SpikeYolo, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Parses an SFW1 stream into named tensors.
pub fn read_tensors(mut r: impl Read) -> Result<BTreeMap<String, Tensor4>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::parse(0, "missing SFW1 magic"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let mut off = 8;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len_end = off + 4;
        let len = bytes
            .get(off..len_end)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| Error::parse(off, "truncated name length"))?;
        let name = bytes
            .get(len_end..len_end + len)
            .ok_or_else(|| Error::parse(len_end, "truncated tensor name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::parse(len_end, "tensor name is not UTF-8"))?;
        off = len_end + len;
        let mut cursor = &bytes[off..];
        let before = cursor.len();
        let t = Tensor4::read_from(&mut cursor).map_err(|e| match e {
            Error::Parse { offset, message } => Error::parse(off + offset, message),
            other => other,
        })?;
        off += before - cursor.len();
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::parse(off, format!("duplicate tensor {name}")));
        }
    }
    if off != bytes.len() {
        return Err(Error::parse(off, "trailing bytes after last tensor"));
    }
    Ok(out)
}

fn take(map: &mut BTreeMap<String, Tensor4>, name: &str, len: usize) -> Result<Vec<f64>> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Config(format!("weights file lacks tensor {name}")))?;
    if t.len() != len {
        return Err(Error::Config(format!("tensor {name}: expected {len} values, found {}", t.len())));
    }
    Ok(t.into_vec())
}

/// Builds the model described by `config` and fills it from `tensors`.
pub fn model_from_tensors(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor4>) -> Result<SpikeYolo> {
    let mode = take(&mut tensors, MODE_KEY, 1)?[0];
    let mut model = SpikeYolo::new(config, 0)?;
    if mode == 1.0 {
        model = model.reparameterize()?;
    } else if mode != 0.0 {
        return Err(Error::Config(format!("unknown weights mode {mode}")));
    }
    for conv in model.convs_mut() {
        let name = conv.name.clone();
        let s = &mut conv.spec;
        s.weights = take(&mut tensors, &format!("{name}.weight"), s.weights.len())?;
        if let Some(b) = &mut s.bias {
            *b = take(&mut tensors, &format!("{name}.bias"), b.len())?;
        }
        if let Some(bn) = &mut s.bn {
            let n = bn.channels();
            let mut field = |f: &str| take(&mut tensors, &format!("{name}.bn.{f}"), n);
            let (gamma, beta, mean, var) = (field("gamma")?, field("beta")?, field("mean")?, field("var")?);
            let eps = take(&mut tensors, &format!("{name}.bn.eps"), 1)?[0];
            *bn = BatchNorm { gamma, beta, mean, var, eps };
            bn.affine()?;
        }
        s.validate()?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Config(format!("weights file has unexpected tensor {extra}")));
    }
    Ok(model)
}

pub fn load_weights(config: &ModelConfig, path: impl AsRef<Path>) -> Result<SpikeYolo> {
    let file = std::fs::File::open(path)?;
    model_from_tensors(config, read_tensors(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tiny_config;

    #[test]
    fn round_trip_both_modes() {
        let cfg = tiny_config();
        let m = SpikeYolo::new(&cfg, 5).unwrap();
        for model in [m.clone(), m.reparameterize().unwrap()] {
            let mut buf = Vec::new();
            write_weights(&model, &mut buf).unwrap();
            let back = model_from_tensors(&cfg, read_tensors(&buf[..]).unwrap()).unwrap();
            assert_eq!(back.mode, model.mode);
            // values are stored as f32, so compare the re-encoded bytes
            let mut again = Vec::new();
            write_weights(&back, &mut again).unwrap();
            assert_eq!(again, buf);
            for (a, b) in back.convs().iter().zip(model.convs()) {
                for (x, y) in a.spec.weights.iter().zip(&b.spec.weights) {
                    assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let cfg = tiny_config();
        let mut buf = Vec::new();
        write_weights(&SpikeYolo::new(&cfg, 5).unwrap(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensors(&bad[..]), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(read_tensors(&buf[..buf.len() - 3]), Err(Error::Parse { .. })));
        let mut other = cfg.clone();
        other.stem_channels += 1;
        assert!(matches!(model_from_tensors(&other, read_tensors(&buf[..]).unwrap()), Err(Error::Config(_))));
    }
}
