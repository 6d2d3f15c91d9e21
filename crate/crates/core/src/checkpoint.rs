//! Checkpoint persistence.
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic "PTRC" | u32 version=1 | u32 tensor count
//! per tensor:  u16 name len | name UTF-8 | u8 ndim | u32 dims.. | f32 data..
//! trailer:     u32 json len | json config blob
//! ```
//!
//! Tensors are written in canonical order (parameters, then Adam m, then
//! Adam v), so save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::model::{Model, ModelKind};
use crate::pointer::ModelConfig;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig};

const MAGIC: &[u8; 4] = b"PTRC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model_kind: ModelKind,
    model: ModelConfig,
    train: TrainConfig,
    adam_t: u64,
    adam_lr: f32,
    adam_beta1: f32,
    adam_beta2: f32,
    adam_eps: f32,
}

pub struct Checkpoint {
    pub model_kind: ModelKind,
    pub model: Model,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub adam: AdamState,
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize model parameters, optimizer state and both configs.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    adam: &AdamState,
) -> Result<(), CheckpointError> {
    let named = model.named_params();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&((named.len() * 3) as u32).to_le_bytes());
    for (name, t) in &named {
        write_tensor(&mut buf, name, t.shape(), t.data());
    }
    for ((name, t), m) in named.iter().zip(&adam.m) {
        write_tensor(&mut buf, &format!("adam.m.{name}"), t.shape(), m);
    }
    for ((name, t), v) in named.iter().zip(&adam.v) {
        write_tensor(&mut buf, &format!("adam.v.{name}"), t.shape(), v);
    }
    let meta = Meta {
        model_kind: model.kind(),
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        adam_t: adam.t,
        adam_lr: adam.lr,
        adam_beta1: adam.beta1,
        adam_beta2: adam.beta2,
        adam_eps: adam.eps,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, field: &'static str) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated { field },
                _ => CheckpointError::Io(e),
            })?;
        Ok(buf)
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, CheckpointError> {
        let b = self.bytes(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, CheckpointError> {
        let b = self.bytes(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.bytes(1, field)?[0])
    }
}

/// Read a checkpoint back; the restored model, config and optimizer state
/// are bit-exact copies of what was saved.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.bytes(name_len, "tensor name")?)
            .map_err(|e| CheckpointError::BadName(e.to_string()))?;
        let ndim = r.u8("tensor ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::BadConfig(format!("tensor {name}: {e}")))?;
        tensors.insert(name, t);
    }
    let json_len = r.u32("config length")? as usize;
    let json = r.bytes(json_len, "config blob")?;
    let meta: Meta =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    // rebuild the model skeleton, then overwrite every tensor by name
    let mut model = Model::init(meta.model_kind, &meta.model, 0)
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let mut missing: Vec<String> = Vec::new();
    let mut adam = AdamState::for_model(&model, meta.adam_lr);
    adam.t = meta.adam_t;
    adam.beta1 = meta.adam_beta1;
    adam.beta2 = meta.adam_beta2;
    adam.eps = meta.adam_eps;
    let mut idx = 0usize;
    {
        let (ms, vs) = (&mut adam.m, &mut adam.v);
        model.visit_mut(&mut |name, t| {
            match tensors.get(&name) {
                Some(stored) if stored.shape() == t.shape() => {
                    t.data_mut().copy_from_slice(stored.data());
                }
                _ => missing.push(name.clone()),
            }
            for (prefix, dst) in [("adam.m.", &mut ms[idx]), ("adam.v.", &mut vs[idx])] {
                match tensors.get(&format!("{prefix}{name}")) {
                    Some(stored) if stored.numel() == dst.len() => {
                        dst.copy_from_slice(stored.data());
                    }
                    _ => missing.push(format!("{prefix}{name}")),
                }
            }
            idx += 1;
        });
    }
    if let Some(name) = missing.first() {
        return Err(CheckpointError::BadConfig(format!(
            "missing or mismatched tensor '{name}'"
        )));
    }
    Ok(Checkpoint {
        model_kind: meta.model_kind,
        model,
        model_cfg: meta.model,
        train_cfg: meta.train,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::pointer::ScoringMode;
    use crate::tasks::TaskKind;
    use crate::train::{resolve_model_cfg, TaskConfig};

    fn setup() -> (Model, ModelConfig, TrainConfig) {
        let task = TaskConfig {
            kind: TaskKind::Copy,
            payload_symbols: 8,
            seq_len: 16,
            payload_len: 3,
            distance: 2,
            n_pairs: 0,
        };
        let mcfg = resolve_model_cfg(
            &ModelConfig {
                n_layers: 2,
                d_model: 16,
                n_heads: 4,
                scoring_mode: ScoringMode::Dense,
                ..ModelConfig::default()
            },
            &task,
        )
        .unwrap();
        let tcfg = TrainConfig {
            model_kind: ModelKind::Pointer,
            steps: 1,
            batch_size: 2,
            lr: 3e-4,
            tau_start: 1.0,
            tau_min: 0.1,
            tau_decay: 0.999,
            seed: 7,
            eval_every: 1,
            grad_clip: None,
            task,
        };
        let model = Model::init(ModelKind::Pointer, &mcfg, 7).unwrap();
        (model, mcfg, tcfg)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, mcfg, tcfg) = setup();
        let adam = AdamState::for_model(&model, tcfg.lr);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ptrc");
        let p2 = dir.path().join("b.ptrc");
        save_checkpoint(&p1, &model, &mcfg, &tcfg, &adam).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded.model, &loaded.model_cfg, &loaded.train_cfg, &loaded.adam)
            .unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn corrupt_magic_is_reported_not_crashed() {
        let (model, mcfg, tcfg) = setup();
        let adam = AdamState::for_model(&model, tcfg.lr);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ptrc");
        save_checkpoint(&p, &model, &mcfg, &tcfg, &adam).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::BadMagic(_))
        ));
    }

    #[test]
    fn unsupported_version_and_truncation_are_distinct() {
        let (model, mcfg, tcfg) = setup();
        let adam = AdamState::for_model(&model, tcfg.lr);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ptrc");
        save_checkpoint(&p, &model, &mcfg, &tcfg, &adam).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let mut wrong_version = bytes.clone();
        wrong_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&p, &wrong_version).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::UnsupportedVersion(9))
        ));

        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn loaded_model_evaluates_identically() {
        let (_, mcfg, tcfg) = setup();
        let out = crate::train::train_loop(&mcfg, &tcfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ptrc");
        save_checkpoint(&p, &out.model, &out.model_cfg, &tcfg, &out.adam).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        let batch = tcfg
            .task
            .generate(crate::rng::fanout(tcfg.seed, "eval", &[]), tcfg.batch_size)
            .unwrap();
        let (l1, a1) = crate::train::evaluate(&out.model, &out.model_cfg, &batch).unwrap();
        let (l2, a2) = crate::train::evaluate(&loaded.model, &loaded.model_cfg, &batch).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(a1, a2);
    }
}
