//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("feature extraction: {0}")]
    Feature(String),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error("synthesis: {0}")]
    Synth(String),
    #[error("encoder: {0}")]
    Encoder(String),
    #[error("non-finite activation leaving encoder block {block}")]
    NonFiniteActivation { block: usize },
    #[error("loss: {0}")]
    Loss(String),
    #[error(
        "non-finite loss at stage {stage} epoch {epoch} batch {batch} \
         (l_type={l_type}, l_id={l_id}, l_aug={l_aug})"
    )]
    NonFiniteLoss {
        stage: u8,
        epoch: u32,
        batch: usize,
        l_type: f64,
        l_id: f64,
        l_aug: f64,
    },
    #[error("training: {0}")]
    Train(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("scoring: {0}")]
    Score(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("t-sne: {0}")]
    Tsne(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
