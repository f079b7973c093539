//! One-file training/inference state: model weights, optimizer moments, RNG
//! state, stage progress, and (after fitting) the scorer. Writes go to a
//! temp file in the same directory and are renamed into place, so a crash
//! mid-write never corrupts an existing checkpoint.

use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Stage;
use crate::model::Model;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::scorer::ScorerState;

/// Bumped whenever the serialized layout changes.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Checkpoint<F: Scalar> {
    pub version: u32,
    /// Element type the tensors were written with ("f32"/"f64").
    pub dtype: String,
    pub stage: Stage,
    /// Completed epochs within the current stage.
    pub epochs_done: u64,
    /// Batches composed so far in the current stage (keeps the rotating
    /// remainder assignment continuous across a resume).
    pub batches_emitted: u64,
    pub model: Model<F>,
    pub optimizer: Option<Adam<F>>,
    /// Training RNG (batching, augmentation, dropout), captured at an epoch
    /// boundary so a resumed run replays the same draws.
    pub rng: ChaCha8Rng,
    pub scorer: Option<ScorerState<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            serde_json::to_writer(&mut w, self)
                .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| {
            Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
        })?;
        let ckpt: Checkpoint<F> = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
        if ckpt.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, loader expects {}",
                ckpt.dtype,
                F::DTYPE
            )));
        }
        ckpt.model.validate_shapes()?;
        Ok(ckpt)
    }
}
