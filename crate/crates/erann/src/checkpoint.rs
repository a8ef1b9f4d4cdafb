//! "ERNN" checkpoint files: magic, format version, config block, named
//! float32 tensor records (learnables plus BatchNorm running stats), and an
//! optional EMA section with identical record layout.

use crate::error::{Error, Result};
use crate::model::{BnBuffers, ErannConfig, Head, ModelState};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"ERNN";
const VERSION: u32 = 1;
// fuzz-resistant structural limits; real models sit far below these
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_TENSORS: u32 = 1 << 20;

#[derive(Debug)]
pub struct Checkpoint {
    pub state: ModelState<f32>,
    /// EMA shadow tensors in state parameter order, when present.
    pub ema_shadow: Option<Vec<Tensor<f32>>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!("truncated: wanted {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized slice")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor<f32>)> {
    let name_len = r.u32()? as usize;
    if name_len > MAX_NAME {
        return Err(corrupt(format!("tensor name length {name_len} exceeds limit")));
    }
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| corrupt("tensor name is not UTF-8"))?
        .to_string();
    let rank = r.u32()? as usize;
    if rank > MAX_RANK {
        return Err(corrupt(format!("tensor '{name}' rank {rank} exceeds limit")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = r.u32()? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| corrupt(format!("tensor '{name}' dimension overflow")))?;
        shape.push(d);
    }
    let nbytes = numel
        .checked_mul(4)
        .ok_or_else(|| corrupt(format!("tensor '{name}' size overflow")))?;
    if nbytes > r.remaining() {
        return Err(corrupt(format!(
            "tensor '{name}' claims {nbytes} data bytes, {} remain",
            r.remaining()
        )));
    }
    let raw = r.take(nbytes)?;
    let data: Vec<f32> =
        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunked"))).collect();
    Ok((name, Tensor::from_vec(&shape, data)?))
}

fn read_section(r: &mut Reader) -> Result<Vec<(String, Tensor<f32>)>> {
    let n = r.u32()?;
    if n > MAX_TENSORS {
        return Err(corrupt(format!("tensor count {n} exceeds limit")));
    }
    let mut out = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        out.push(read_tensor(r)?);
    }
    Ok(out)
}

pub fn checkpoint_to_bytes(state: &ModelState<f32>, ema_shadow: Option<&[Tensor<f32>]>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(state.config.w as u32).to_le_bytes());
    out.extend_from_slice(&(state.config.s_m as u32).to_le_bytes());
    out.extend_from_slice(&(state.config.n_classes as u32).to_le_bytes());
    out.push(match state.config.head {
        Head::Sigmoid => 0,
        Head::Softmax => 1,
    });

    let n_tensors = state.params.len() + 2 * state.bn.len();
    out.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    for (pi, name) in state.plan.param_names.iter().enumerate() {
        let t = &state.params[pi];
        write_tensor(&mut out, name, t.shape(), &t.data);
    }
    for (bi, name) in state.plan.bn_names.iter().enumerate() {
        let buf = &state.bn[bi];
        write_tensor(
            &mut out,
            &format!("{name}.running_mean"),
            &[buf.running_mean.len()],
            &buf.running_mean,
        );
        write_tensor(
            &mut out,
            &format!("{name}.running_var"),
            &[buf.running_var.len()],
            &buf.running_var,
        );
    }

    match ema_shadow {
        Some(shadow) => {
            out.push(1);
            out.extend_from_slice(&(shadow.len() as u32).to_le_bytes());
            for (t, name) in shadow.iter().zip(&state.plan.param_names) {
                write_tensor(&mut out, name, t.shape(), &t.data);
            }
        }
        None => out.push(0),
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic (not an ERNN checkpoint)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let w = r.u32()? as usize;
    let s_m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let head = match r.u8()? {
        0 => Head::Sigmoid,
        1 => Head::Softmax,
        other => return Err(corrupt(format!("invalid head tag {other}"))),
    };
    let config =
        ErannConfig::new(w, s_m, n, head).map_err(|e| corrupt(format!("invalid config: {e}")))?;

    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
    for (name, t) in read_section(&mut r)? {
        if tensors.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor '{name}'")));
        }
    }

    let mut state = ModelState::<f32>::new(config)?;
    for (pi, name) in state.plan.param_names.iter().enumerate() {
        let t = tensors
            .remove(name)
            .ok_or_else(|| corrupt(format!("missing parameter tensor '{name}'")))?;
        if t.shape() != state.params[pi].shape() {
            return Err(corrupt(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                state.params[pi].shape()
            )));
        }
        state.params[pi] = t;
    }
    for (bi, name) in state.plan.bn_names.iter().enumerate() {
        let ch = state.plan.bn_channels[bi];
        let mut grab = |suffix: &str| -> Result<Vec<f32>> {
            let key = format!("{name}.{suffix}");
            let t = tensors.remove(&key).ok_or_else(|| corrupt(format!("missing '{key}'")))?;
            if t.shape() != [ch] {
                return Err(corrupt(format!("'{key}' has shape {:?}, expected [{ch}]", t.shape())));
            }
            Ok(t.data)
        };
        state.bn[bi] =
            BnBuffers { running_mean: grab("running_mean")?, running_var: grab("running_var")? };
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor '{extra}'")));
    }

    let ema_shadow = match r.u8()? {
        0 => None,
        1 => {
            let mut shadow_map: HashMap<String, Tensor<f32>> = HashMap::new();
            for (name, t) in read_section(&mut r)? {
                if shadow_map.insert(name.clone(), t).is_some() {
                    return Err(corrupt(format!("duplicate EMA tensor '{name}'")));
                }
            }
            let mut shadow = Vec::with_capacity(state.params.len());
            for (pi, name) in state.plan.param_names.iter().enumerate() {
                let t = shadow_map
                    .remove(name)
                    .ok_or_else(|| corrupt(format!("missing EMA tensor '{name}'")))?;
                if t.shape() != state.params[pi].shape() {
                    return Err(corrupt(format!("EMA tensor '{name}' shape mismatch")));
                }
                shadow.push(t);
            }
            if let Some(extra) = shadow_map.keys().next() {
                return Err(corrupt(format!("unexpected EMA tensor '{extra}'")));
            }
            Some(shadow)
        }
        other => return Err(corrupt(format!("invalid EMA flag {other}"))),
    };
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes after checkpoint", r.remaining())));
    }
    Ok(Checkpoint { state, ema_shadow })
}

pub fn save_checkpoint(
    state: &ModelState<f32>,
    ema_shadow: Option<&[Tensor<f32>]>,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(state, ema_shadow))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::RngStream;
    use crate::graph::BnMode;
    use crate::model::{forward, init_params, MEL_BINS};

    fn small_state(seed: u64) -> ModelState<f32> {
        let cfg = ErannConfig::new(1, 3, 4, Head::Softmax).unwrap();
        let mut rng = RngStream::new(seed);
        let mut st = init_params::<f32>(cfg, &mut rng).unwrap();
        // non-trivial running stats so the round-trip covers them
        for (bi, buf) in st.bn.iter_mut().enumerate() {
            for (i, v) in buf.running_mean.iter_mut().enumerate() {
                *v = (bi as f32) * 0.01 + (i as f32) * 0.001;
            }
            for (i, v) in buf.running_var.iter_mut().enumerate() {
                *v = 1.0 + (i as f32) * 0.002;
            }
        }
        st
    }

    #[test]
    fn roundtrip_bit_exact() {
        let st = small_state(1);
        let shadow: Vec<Tensor<f32>> = st.params.iter().map(|p| p.map(|v| v * 0.5)).collect();
        let bytes = checkpoint_to_bytes(&st, Some(&shadow));
        let loaded = checkpoint_from_bytes(&bytes).unwrap();
        let bytes2 = checkpoint_to_bytes(&loaded.state, loaded.ema_shadow.as_deref());
        assert_eq!(bytes, bytes2);
        assert_eq!(loaded.state.config, st.config);
        for (a, b) in loaded.ema_shadow.unwrap().iter().zip(&shadow) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn forward_survives_roundtrip() {
        let st = small_state(2);
        let spec = crate::dsp::LogMelSpec {
            n_mels: MEL_BINS,
            t_s: 128,
            t_seconds: 1,
            values: (0..MEL_BINS * 128).map(|i| ((i % 31) as f32) * 0.1 - 1.0).collect(),
        };
        let before = forward(&st, std::slice::from_ref(&spec), BnMode::Eval).unwrap();
        let loaded = checkpoint_from_bytes(&checkpoint_to_bytes(&st, None)).unwrap();
        let after = forward(&loaded.state, &[spec], BnMode::Eval).unwrap();
        assert_eq!(before.data, after.data);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let st = small_state(3);
        let bytes = checkpoint_to_bytes(&st, None);

        // truncation at various depths
        for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))),
                "cut at {cut} accepted"
            );
        }

        // wrong magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint_from_bytes(&bad).is_err());

        // wrong version
        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(checkpoint_from_bytes(&bad).is_err());

        // trailing garbage
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(checkpoint_from_bytes(&bad).is_err());

        // invalid head tag
        let mut bad = bytes;
        bad[16] = 7;
        assert!(checkpoint_from_bytes(&bad).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let st = small_state(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ernn");
        save_checkpoint(&st, None, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for (a, b) in loaded.state.params.iter().zip(&st.params) {
            assert_eq!(a.data, b.data);
        }
        assert!(loaded.ema_shadow.is_none());
    }
}
