//! Versioned binary checkpoints of a run.

use std::fs;
use std::io::Write;
use std::path::Path;

use cpl_tensor::Scalar;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{CplError, Result};
use crate::replay::{period_seed, RunState};

const MAGIC: &[u8; 8] = b"CPLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Scalar width recorded in the header so f32 and f64 files cannot be mixed.
fn scalar_tag<T: Scalar>() -> u8 {
    std::mem::size_of::<T>() as u8
}

/// A run snapshot together with the rng position of the next period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub state: RunState<T>,
    /// Seed of the rng stream the next period will use.
    pub next_period_seed: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(state: RunState<T>) -> Self {
        let next_period_seed = period_seed(state.options.seed, state.periods_done + 1);
        Self { state, next_period_seed }
    }

    pub fn num_tasks(&self) -> usize {
        self.state.model.num_tasks()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode::<T, _>(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode::<T, _>(bytes, Path::new("<memory>"))
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ck: Self = decode::<T, _>(&bytes, path)?;
        if ck.next_period_seed != period_seed(ck.state.options.seed, ck.state.periods_done + 1) {
            return Err(CplError::Checkpoint {
                path: path.to_path_buf(),
                reason: "rng position does not match the recorded period".into(),
            });
        }
        Ok(ck)
    }
}

fn encode<T: Scalar, S: Serialize>(value: &S) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(scalar_tag::<T>());
    bincode::serialize_into(&mut out, value).map_err(|e| CplError::Checkpoint {
        path: "<memory>".into(),
        reason: e.to_string(),
    })?;
    Ok(out)
}

fn decode<T: Scalar, S: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<S> {
    let err = |reason: String| CplError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(err(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    if bytes[12] != scalar_tag::<T>() {
        return Err(err(format!(
            "scalar width {} bytes, expected {}",
            bytes[12],
            scalar_tag::<T>()
        )));
    }
    bincode::deserialize(&bytes[13..]).map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{FrameGenerator, GeneratorConfig};
    use crate::replay::{RunOptions, TrainMode, TrainSchedule};
    use crate::world_model::{WorldModel, WorldModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> RunState<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = WorldModel::new(
            WorldModelConfig {
                resolution: 8,
                hidden: 4,
                layers: 1,
                latent_dim: 2,
                enc_channels: 2,
                summary_dim: 4,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let g = FrameGenerator::new(
            GeneratorConfig {
                resolution: 8,
                latent_dim: 2,
                enc_channels: 2,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        RunState::new(
            RunOptions::for_mode(TrainMode::CplFull, 5, 10, 11),
            TrainSchedule::desk_scale(),
            m,
            Some(g),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.ckpt");
        let ck = Checkpoint::new(state());
        ck.save(&p).unwrap();
        let back = Checkpoint::<f32>::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.state.model.params().fingerprint(), ck.state.model.params().fingerprint());
    }

    #[test]
    fn corrupt_or_foreign_files_are_rejected() {
        let bytes = Checkpoint::new(state()).to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(b"garbage").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::<f32>::from_bytes(&wrong_version).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }
}
