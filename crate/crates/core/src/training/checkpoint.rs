//! Checkpoint files.
//!
//! Layout: 8-byte magic, u32 format version, u64 metadata length, JSON
//! metadata, little-endian f32 tensor payload, and a SHA-256 digest of all
//! preceding bytes. Nothing is constructed until the digest checks out.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::amp::AmpState;
use super::optim::{Adam, Moments, OptimizerConfig};
use super::scheduler::SchedulerState;
use super::trainer::{EpochRecord, TrainingState};
use crate::error::{Error, Result};
use crate::models::{build_model, ModelConfig};

const MAGIC: &[u8; 8] = b"FSCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    epoch: u64,
    global_step: u64,
    seed: u64,
    optimizer: OptimizerConfig,
    optimizer_step: u64,
    scheduler: SchedulerState,
    amp: AmpState,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

/// The parts of a config that determine the checkpoint's tensors.
fn architecture(cfg: &ModelConfig) -> ModelConfig {
    let mut c = cfg.clone();
    c.pretrained = false;
    c.pretrained_path = None;
    c
}

pub fn encode_checkpoint(state: &TrainingState) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let mut push = |name: &str, kind: TensorKind, t: &Tensor| -> Result<()> {
        entries.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.dims().to_vec(),
            offset: payload.len(),
        });
        payload.extend(t.flatten_all()?.to_vec1::<f32>()?);
        Ok(())
    };
    let store = state.model.store();
    for p in store.params() {
        push(p.name(), TensorKind::Param, p.var().as_tensor())?;
    }
    for b in store.buffers() {
        push(b.name(), TensorKind::Buffer, &b.get())?;
    }
    for (name, m) in &state.optimizer.moments {
        push(name, TensorKind::AdamFirst, &m.first)?;
        push(name, TensorKind::AdamSecond, &m.second)?;
    }
    let meta = Meta {
        model: state.model.config().clone(),
        epoch: state.epoch,
        global_step: state.global_step,
        seed: state.seed,
        optimizer: state.optimizer.config.clone(),
        optimizer_step: state.optimizer.step,
        scheduler: state.scheduler.clone(),
        amp: state.amp.clone(),
        history: state.history.clone(),
        tensors: entries,
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN + meta.len() + 4 * payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(state: &TrainingState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainingState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

/// Reads only the model config from a checkpoint, after verifying it.
pub fn checkpoint_model_config(path: &Path) -> Result<ModelConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes)?.0.model)
}

fn parse(bytes: &[u8]) -> Result<(Meta, &[u8])> {
    if bytes.len() < PREAMBLE_LEN + DIGEST_LEN {
        return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("digest mismatch (truncated or corrupted file)".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let meta_end = PREAMBLE_LEN
        .checked_add(meta_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Integrity("metadata length exceeds file".into()))?;
    let meta: Meta = serde_json::from_slice(&body[PREAMBLE_LEN..meta_end])
        .map_err(|e| Error::Integrity(format!("metadata: {e}")))?;
    let payload = &body[meta_end..];
    if payload.len() % 4 != 0 {
        return Err(Error::Integrity("payload is not a whole number of f32 values".into()));
    }
    Ok((meta, payload))
}

pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TrainingState> {
    let (meta, payload) = parse(bytes)?;
    if let Some(exp) = expected {
        let (a, b) = (architecture(exp), architecture(&meta.model));
        if a != b {
            return Err(Error::ConfigMismatch(format!("checkpoint has {b:?}, requested {a:?}")));
        }
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let tensor = |e: &TensorEntry| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        let slice = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Integrity(format!("tensor '{}' exceeds payload", e.name)))?;
        Ok(Tensor::from_slice(slice, e.shape.as_slice(), &Device::Cpu)?)
    };

    let model = build_model(&architecture(&meta.model))?;
    let store = model.store();
    let mut optimizer = Adam::new(meta.optimizer.clone())?;
    optimizer.step = meta.optimizer_step;
    let mut firsts = std::collections::BTreeMap::new();
    let mut seen_params = 0;
    let mut seen_buffers = 0;
    for e in &meta.tensors {
        let t = tensor(e)?;
        match e.kind {
            TensorKind::Param => {
                let p = store
                    .param(&e.name)
                    .ok_or_else(|| Error::Integrity(format!("unknown parameter '{}'", e.name)))?;
                if p.var().dims() != t.dims() {
                    return Err(Error::Integrity(format!("parameter '{}' has the wrong shape", e.name)));
                }
                p.var().set(&t)?;
                seen_params += 1;
            }
            TensorKind::Buffer => {
                let b = store
                    .buffers()
                    .iter()
                    .find(|b| b.name() == e.name)
                    .ok_or_else(|| Error::Integrity(format!("unknown buffer '{}'", e.name)))?;
                b.set(t);
                seen_buffers += 1;
            }
            TensorKind::AdamFirst => {
                firsts.insert(e.name.clone(), t);
            }
            TensorKind::AdamSecond => {
                let first = firsts
                    .remove(&e.name)
                    .ok_or_else(|| Error::Integrity(format!("orphan second moment '{}'", e.name)))?;
                optimizer.moments.insert(e.name.clone(), Moments { first, second: t });
            }
        }
    }
    if seen_params != store.params().len() || seen_buffers != store.buffers().len() || !firsts.is_empty() {
        return Err(Error::Integrity("checkpoint does not cover every model tensor".into()));
    }
    Ok(TrainingState {
        model,
        optimizer,
        scheduler: meta.scheduler,
        amp: meta.amp,
        epoch: meta.epoch,
        global_step: meta.global_step,
        seed: meta.seed,
        history: meta.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::fixture::Toy;
    use crate::training::{fit, TrainConfig, TrainHooks};

    fn trained(toy: &Toy, epochs: u64) -> TrainingState {
        let mut st = TrainingState::new(&ModelConfig::tiny(), &TrainConfig::default()).unwrap();
        fit(&mut st, &toy.ctx(), epochs, &TrainHooks::default(), |_, _| Ok(())).unwrap();
        st
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let toy = Toy::new(5);
        let full = trained(&toy, 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&trained(&toy, 1), &path).unwrap();
        let mut resumed = load_checkpoint(&path, Some(&ModelConfig::tiny())).unwrap();
        assert_eq!(resumed.epoch, 1);
        fit(&mut resumed, &toy.ctx(), 3, &TrainHooks::default(), |_, _| Ok(())).unwrap();

        assert_eq!(full.model.weights_digest().unwrap(), resumed.model.weights_digest().unwrap());
        assert_eq!(full.history, resumed.history);
        assert_eq!(full.global_step, resumed.global_step);
        assert_eq!(encode_checkpoint(&full).unwrap(), encode_checkpoint(&resumed).unwrap());
    }

    #[test]
    fn truncated_file_fails_integrity() {
        let toy = Toy::new(0);
        let bytes = encode_checkpoint(&trained(&toy, 1)).unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut], None), Err(Error::Integrity(_))));
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 3] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped, None), Err(Error::Integrity(_))));
    }

    #[test]
    fn other_version_is_rejected() {
        let st = TrainingState::new(&ModelConfig::tiny(), &TrainConfig::default()).unwrap();
        let mut bytes = encode_checkpoint(&st).unwrap();
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(matches!(
            decode_checkpoint(&bytes, None),
            Err(Error::Version { found: 7, expected: CHECKPOINT_VERSION })
        ));
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let st = TrainingState::new(&ModelConfig::tiny(), &TrainConfig::default()).unwrap();
        let bytes = encode_checkpoint(&st).unwrap();
        let hybrid = ModelConfig::tiny().with_freq_branch(16);
        assert!(matches!(decode_checkpoint(&bytes, Some(&hybrid)), Err(Error::ConfigMismatch(_))));
        assert!(checkpoint_config_ok(&bytes));
    }

    fn checkpoint_config_ok(bytes: &[u8]) -> bool {
        let mut cfg = ModelConfig::tiny();
        cfg.pretrained_path = Some("/elsewhere".into());
        decode_checkpoint(bytes, Some(&cfg)).is_ok()
    }

    #[test]
    fn hybrid_round_trip_preserves_outputs() {
        let cfg = ModelConfig::tiny().with_freq_branch(16);
        let st = TrainingState::new(&cfg, &TrainConfig::default()).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&st).unwrap(), Some(&cfg)).unwrap();
        assert!(back.model.is_hybrid());
        assert_eq!(st.model.weights_digest().unwrap(), back.model.weights_digest().unwrap());
    }
}
