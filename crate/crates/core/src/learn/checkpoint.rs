//! `TNET` checkpoint files: magic, version, a JSON header and raw
//! little-endian parameter and optimizer blocks.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{ParamBlock, TinyNet, TinyNetArch};
use super::optim::OptimizerState;
use super::train::{EpochRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: TinyNetArch,
    num_classes: usize,
    seed: u64,
    blocks: Vec<ParamBlock>,
    config: TrainConfig,
    epochs_completed: usize,
    optimizer_step: u64,
    history: Vec<EpochRecord>,
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn take_f64s(bytes: &[u8], pos: &mut usize, n: usize) -> Result<Vec<f64>> {
    let end = *pos + n * 8;
    if end > bytes.len() {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let v = bytes[*pos..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    *pos = end;
    Ok(v)
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        arch: state.net.arch().clone(),
        num_classes: state.net.num_classes(),
        seed: state.config.seed,
        blocks: state.net.layout().to_vec(),
        config: state.config.clone(),
        epochs_completed: state.epochs_completed,
        optimizer_step: state.optimizer.step,
        history: state.history.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + state.net.params().len() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put_f64s(&mut out, state.net.params());
    put_f64s(&mut out, &state.optimizer.first);
    put_f64s(&mut out, &state.optimizer.second);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a TNET checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..hend])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.num_classes != header.arch.num_classes {
        return Err(Error::Format(
            "checkpoint class count disagrees with architecture".into(),
        ));
    }
    let n: usize = header.blocks.iter().map(ParamBlock::len).sum();
    let mut pos = hend;
    let params = take_f64s(bytes, &mut pos, n)?;
    let first = take_f64s(bytes, &mut pos, n)?;
    let second = take_f64s(bytes, &mut pos, n)?;
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    let net = TinyNet::from_params(header.arch, params)?;
    let names_match = net.layout().len() == header.blocks.len()
        && net
            .layout()
            .iter()
            .zip(&header.blocks)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !names_match {
        return Err(Error::Format(
            "checkpoint parameter blocks do not match architecture".into(),
        ));
    }
    Ok(TrainState {
        net,
        optimizer: OptimizerState {
            step: header.optimizer_step,
            first,
            second,
        },
        config: header.config,
        epochs_completed: header.epochs_completed,
        history: header.history,
    })
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tnet.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
