//! The full multitask model: one conformer encoder shared by the identity,
//! type, and augmentation heads, all parameters in a single store. One model
//! is trained per target machine type; the machine-ID → class-index mapping
//! is fixed at init and travels with the model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, MachineType};
use crate::config::PipelineConfig;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::features::compute_log_mel;
use crate::heads::{ArcFaceHead, AugHead, TypeHead};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Model<F: Scalar> {
    pub store: ParamStore<F>,
    pub encoder: Encoder,
    pub arcface: ArcFaceHead,
    pub type_head: TypeHead,
    pub aug_head: AugHead,
    /// The machine type this model treats as normal.
    pub target_type: MachineType,
    /// Machine IDs in class-index order: `id_classes[k]` is the machine ID
    /// of ArcFace class `k`.
    pub id_classes: Vec<u32>,
    pub config: PipelineConfig,
}

impl<F: Scalar> Model<F> {
    /// Initializes all weights from the seed. The draw order (encoder, then
    /// heads) is part of the reproducibility contract.
    pub fn init(
        config: &PipelineConfig,
        target_type: MachineType,
        id_classes: Vec<u32>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if id_classes.is_empty() {
            return Err(Error::Train("no machine IDs for the target type".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, &mut rng, &config.encoder);
        let dim = config.encoder.embedding_dim;
        let arcface = ArcFaceHead::init(
            &mut store,
            &mut rng,
            id_classes.len(),
            dim,
            config.arcface.scale,
            config.arcface.margin,
        );
        let type_head = TypeHead::init(&mut store, &mut rng, dim);
        let aug_head = AugHead::init(&mut store, &mut rng, dim);
        Ok(Self {
            store,
            encoder,
            arcface,
            type_head,
            aug_head,
            target_type,
            id_classes,
            config: config.clone(),
        })
    }

    /// ArcFace class index of a machine ID, if this model knows it.
    pub fn id_class(&self, machine_id: u32) -> Option<usize> {
        self.id_classes.iter().position(|&id| id == machine_id)
    }

    /// Eval-mode embedding of one clip: log-mel frames through the encoder.
    pub fn embed_clip(&self, clip: &AudioClip<F>) -> Result<Vec<F>> {
        let feats = compute_log_mel(clip, &self.config.frontend)?;
        let (t, m) = (feats.shape()[0], feats.shape()[1]);
        let batch = feats.reshaped([1, t, m]);
        let emb = crate::encoder::embed_batch(&self.encoder, &self.store, &batch)?;
        Ok(emb.into_data())
    }

    /// Checks every stored tensor against a reference init from the same
    /// configuration — guards checkpoint loads against mismatched weights.
    pub fn validate_shapes(&self) -> Result<()> {
        let reference =
            Model::<F>::init(&self.config, self.target_type.clone(), self.id_classes.clone(), 0)?;
        if reference.store.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} != {} expected from the configuration",
                self.store.len(),
                reference.store.len()
            )));
        }
        for id in reference.store.ids() {
            let (name, want) = (reference.store.name(id), reference.store.get(id).shape());
            if self.store.name(id) != name {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: expected name {name}",
                    self.store.name(id)
                )));
            }
            let got = self.store.get(id).shape();
            if got != want {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {got:?} != expected {want:?}"
                )));
            }
            if !self.store.get(id).all_finite() {
                return Err(Error::Checkpoint(format!("parameter {name} has non-finite values")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            encoder: EncoderConfig { input_dim: 128, ..EncoderConfig::tiny() },
            ..Default::default()
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_config();
        let a = Model::<f64>::init(&cfg, "fan".into(), vec![0, 2, 4], 7).unwrap();
        let b = Model::<f64>::init(&cfg, "fan".into(), vec![0, 2, 4], 7).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.get(id), b.store.get(id), "{}", a.store.name(id));
        }
        let c = Model::<f64>::init(&cfg, "fan".into(), vec![0, 2, 4], 8).unwrap();
        let differs = a.store.ids().any(|id| a.store.get(id) != c.store.get(id));
        assert!(differs, "different seeds must give different weights");
    }

    #[test]
    fn id_class_lookup() {
        let cfg = tiny_config();
        let m = Model::<f64>::init(&cfg, "fan".into(), vec![0, 2, 4], 1).unwrap();
        assert_eq!(m.id_class(2), Some(1));
        assert_eq!(m.id_class(3), None);
        assert_eq!(m.arcface.num_classes, 3);
    }

    #[test]
    fn anchors_start_unit_norm() {
        let cfg = tiny_config();
        let m = Model::<f64>::init(&cfg, "fan".into(), vec![0, 1], 3).unwrap();
        let anchors = m.store.get(m.arcface.anchors);
        for k in 0..2 {
            let norm: f64 = anchors.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
