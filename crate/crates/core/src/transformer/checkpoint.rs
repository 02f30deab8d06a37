//! Checkpoint container: magic, a length-prefixed JSON header, then named
//! little-endian f32 blobs in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::optim::AdamWState;
use super::params::Model;
use super::train::{TrainPosition, TrainRecord, TrainState};
use super::AuxHead;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STKCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AuxMeta {
    layer: usize,
    classes: usize,
    weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    dtype: String,
    model: ModelConfig,
    has_optimizer: bool,
    optimizer_step: u64,
    aux: Option<AuxMeta>,
    aux_optimizer_step: Option<u64>,
    position: TrainPosition,
    tensors: Vec<TensorEntry>,
    log: Vec<TrainRecord>,
}

fn push_f32(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a training state. Without `with_optimizer` the moments are
/// dropped and a load starts them from zero.
pub fn checkpoint_bytes(state: &TrainState, with_optimizer: bool) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blobs: Vec<&[f32]> = Vec::new();
    for (name, shape, span, _) in &state.model.layout.tensors {
        tensors.push(TensorEntry { name: name.clone(), shape: shape.clone(), len: span.len });
        blobs.push(&state.model.data[span.range()]);
    }
    let n = state.model.len();
    if with_optimizer {
        tensors.push(TensorEntry { name: "opt.m".into(), shape: vec![n], len: n });
        tensors.push(TensorEntry { name: "opt.v".into(), shape: vec![n], len: n });
        blobs.push(&state.opt.m);
        blobs.push(&state.opt.v);
    }
    if let Some(head) = &state.aux {
        let a = head.params.len();
        tensors.push(TensorEntry { name: "aux.params".into(), shape: vec![a], len: a });
        blobs.push(&head.params);
        if let (true, Some(o)) = (with_optimizer, &state.aux_opt) {
            tensors.push(TensorEntry { name: "aux.opt.m".into(), shape: vec![a], len: a });
            tensors.push(TensorEntry { name: "aux.opt.v".into(), shape: vec![a], len: a });
            blobs.push(&o.m);
            blobs.push(&o.v);
        }
    }
    let header = Header {
        schema_version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        model: state.model.cfg.clone(),
        has_optimizer: with_optimizer,
        optimizer_step: state.opt.step,
        aux: state.aux.as_ref().map(|h| AuxMeta { layer: h.layer, classes: h.classes, weight: h.weight }),
        aux_optimizer_step: state.aux_opt.as_ref().map(|o| o.step),
        position: state.position,
        tensors,
        log: state.log.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for b in blobs {
        push_f32(&mut out, b);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, state: &TrainState, with_optimizer: bool) -> Result<()> {
    let bytes = checkpoint_bytes(state, with_optimizer)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Data(format!("checkpoint: {}", msg.into()))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| malformed("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.schema_version != version || header.dtype != "f32" {
        return Err(Error::Config("unsupported checkpoint schema or dtype".into()));
    }
    header.model.validate()?;
    let mut cursor = 20 + hlen;
    let mut take = |len: usize| -> Result<Vec<f32>> {
        let raw = bytes.get(cursor..cursor + 4 * len).ok_or_else(|| malformed("truncated tensor data"))?;
        cursor += 4 * len;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    };

    let layout = header.model.layout();
    let mut entries = header.tensors.iter();
    let mut data = Vec::with_capacity(layout.total);
    for (name, shape, span, _) in &layout.tensors {
        let e = entries.next().ok_or_else(|| malformed("missing tensors"))?;
        if &e.name != name || &e.shape != shape || e.len != span.len {
            return Err(Error::Config(format!("tensor {} does not match config ({name})", e.name)));
        }
        data.extend(take(e.len)?);
    }
    let model = Model::from_data(&header.model, data)?;
    let mut next = |want: &str, len: usize| -> Result<Vec<f32>> {
        let e = entries.next().ok_or_else(|| malformed(format!("missing {want}")))?;
        if e.name != want || e.len != len {
            return Err(malformed(format!("expected {want}, found {}", e.name)));
        }
        take(len)
    };
    let n = model.len();
    let opt = if header.has_optimizer {
        AdamWState { step: header.optimizer_step, m: next("opt.m", n)?, v: next("opt.v", n)? }
    } else {
        AdamWState::new(n)
    };
    let (aux, aux_opt) = match &header.aux {
        Some(meta) => {
            let a = (header.model.d_model + 1) * meta.classes;
            let params = next("aux.params", a)?;
            let head = AuxHead { layer: meta.layer, classes: meta.classes, weight: meta.weight, params };
            let o = if header.has_optimizer {
                AdamWState { step: header.aux_optimizer_step.unwrap_or(0), m: next("aux.opt.m", a)?, v: next("aux.opt.v", a)? }
            } else {
                AdamWState::new(a)
            };
            (Some(head), Some(o))
        }
        None => (None, None),
    };
    if cursor != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    Ok(TrainState { model, opt, aux, aux_opt, position: header.position, log: header.log })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_checkpoint(&std::fs::read(path)?)
}

/// Load and require the stored model config to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if &state.model.cfg != expected {
        return Err(Error::Config(format!(
            "checkpoint model config {:?} does not match expected {:?}",
            state.model.cfg, expected
        )));
    }
    Ok(state)
}

/// Hex SHA-256 of the parameter bytes.
pub fn params_hash(model: &Model) -> String {
    hex::encode(Sha256::digest(model.to_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{forward, Capture, ModelConfig};

    fn state() -> TrainState {
        let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_mlp: 32, ..ModelConfig::small(8, 16, 4) };
        let mut st = TrainState::new(Model::init(&cfg).unwrap());
        st.opt.step = 3;
        st.opt.m.iter_mut().enumerate().for_each(|(i, m)| *m = i as f32 * 1e-3);
        st.aux = Some(AuxHead::init(16, 1, 2, 0.1, 9));
        st.aux_opt = Some(AdamWState::new(34));
        st.position.global_step = 3;
        st
    }

    #[test]
    fn round_trip_is_exact() {
        let st = state();
        let back = parse_checkpoint(&checkpoint_bytes(&st, true).unwrap()).unwrap();
        assert_eq!(back, st);
        let toks: &[u32] = &[1, 2, 3, 4];
        let a = forward(&st.model, &[toks], Capture::None).unwrap();
        let b = forward(&back.model, &[toks], Capture::None).unwrap();
        assert_eq!(a.logits, b.logits);
        let lean = parse_checkpoint(&checkpoint_bytes(&st, false).unwrap()).unwrap();
        assert_eq!(lean.model, st.model);
        assert!(lean.opt.m.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn mismatches_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let st = state();
        save_checkpoint(&path, &st, true).unwrap();
        let mut wrong = st.model.cfg.clone();
        wrong.d_model = 32;
        assert!(matches!(load_checkpoint_for(&path, &wrong), Err(Error::Config(_))));
        assert!(load_checkpoint_for(&path, &st.model.cfg).is_ok());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        assert!(matches!(parse_checkpoint(&bytes), Err(Error::Config(_))));
        let bytes = std::fs::read(&path).unwrap();
        assert!(parse_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }
}
