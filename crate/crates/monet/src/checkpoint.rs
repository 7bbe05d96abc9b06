//! Self-describing JSON checkpoint: every parameter tensor keyed by a
//! stable path string, plus the scale config and ablation mode the model
//! was built with. Round-trips are lossless (shortest-representation f64).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{MonetError, Result};
use crate::network::{AblationMode, Model};
use crate::pyramid::ScaleConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Training lifecycle tag carried for bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Pretrained,
    Trained,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ScaleConfig,
    pub ablation: AblationMode,
    pub phase: Phase,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, phase: Phase) -> Self {
        let params = model
            .param_blocks()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    ParamEntry {
                        shape: t.shape.clone(),
                        data: t.data.clone(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: model.cfg.clone(),
            ablation: model.mode,
            phase,
            params,
        }
    }

    /// Rebuilds the model; every block must be present with its exact shape.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(&self.config, self.ablation, 0)?;
        let mut remaining = self.params;
        for (name, tensor) in model.param_blocks_mut() {
            let entry = remaining.remove(&name).ok_or_else(|| {
                MonetError::Checkpoint(format!("missing parameter block '{name}'"))
            })?;
            if entry.shape != tensor.shape {
                return Err(MonetError::Checkpoint(format!(
                    "block '{name}' has shape {:?}, expected {:?}",
                    entry.shape, tensor.shape
                )));
            }
            if entry.data.iter().any(|v| !v.is_finite()) {
                return Err(MonetError::Checkpoint(format!(
                    "block '{name}' contains non-finite values"
                )));
            }
            tensor.data = entry.data;
            tensor.zero_grad();
        }
        if let Some(name) = remaining.keys().next() {
            return Err(MonetError::Checkpoint(format!(
                "unknown parameter block '{name}'"
            )));
        }
        Ok(model)
    }
}

pub fn save(model: &Model, phase: Phase, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::from_model(model, phase);
    let bytes = serde_json::to_vec(&ckpt)?;
    crate::checkpoint::write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<(Model, Phase)> {
    let bytes = std::fs::read(path)?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(MonetError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    let phase = ckpt.phase;
    Ok((ckpt.into_model()?, phase))
}

/// Writes via a temp file and rename so interrupted runs never leave a
/// truncated artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = ScaleConfig::new(16, 2, 1, 8).unwrap();
        let model = Model::new(&cfg, AblationMode::Full, 77).unwrap();
        let dir = std::env::temp_dir().join("monet-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        save(&model, Phase::Pretrained, &path).unwrap();
        let (loaded, phase) = load(&path).unwrap();
        assert_eq!(phase, Phase::Pretrained);
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.mode, model.mode);
        for ((na, ta), (nb, tb)) in model.param_blocks().iter().zip(loaded.param_blocks().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data, "block {na} drifted");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn wrong_config_param_set_is_rejected() {
        let cfg = ScaleConfig::new(16, 2, 1, 8).unwrap();
        let model = Model::new(&cfg, AblationMode::Full, 1).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, Phase::Init);
        ckpt.params.remove("head.up0.kernel");
        assert!(ckpt.into_model().is_err());

        let mut ckpt = Checkpoint::from_model(&model, Phase::Init);
        ckpt.params.insert(
            "stray.block".to_string(),
            ParamEntry {
                shape: vec![1],
                data: vec![0.0],
            },
        );
        assert!(ckpt.into_model().is_err());
    }
}
