//! Two-stage training loop.
//!
//! Stage 1 trains the encoder with the identity and augmentation heads on
//! target-type normals only; the type head stays frozen (its parameters are
//! excluded from optimizer updates and its loss from the total). Stage 2
//! unfreezes everything and mixes in pseudo-anomalies — normal recordings of
//! the *other* machine types — so the type head learns a real boundary.
//!
//! Batches are balanced: normals are spread across machine IDs with per-ID
//! counts differing by at most one (the remainder rotates between batches so
//! counts equalize over an epoch), and stage-2 batches are half normals,
//! half pseudo-anomalies drawn with replacement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::augment::{apply_augmentation, sample_augmentation, AugmentationKind};
use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::features::compute_log_mel;
use crate::heads::{LossWeights, Stage};
use crate::model::Model;
use crate::nn::FwdCtx;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::scorer::ScorerState;
use crate::tensor::Tensor;

/// One training recording with its identity label.
#[derive(Clone, Debug)]
pub struct TrainItem<F: Scalar> {
    pub clip: AudioClip<F>,
    /// Machine ID within the target type; ignored for pseudo-anomalies.
    pub machine_id: u32,
}

/// In-memory training pools.
#[derive(Clone, Debug)]
pub struct TrainData<F: Scalar> {
    /// Target-type normal recordings.
    pub normals: Vec<TrainItem<F>>,
    /// Normal recordings of every other machine type (stage 2 only).
    pub pseudo: Vec<TrainItem<F>>,
}

impl<F: Scalar> Default for TrainData<F> {
    fn default() -> Self {
        Self { normals: Vec::new(), pseudo: Vec::new() }
    }
}

/// Loads the train split into memory: target-type normals become the normal
/// pool, every other type's normals become pseudo-anomalies.
pub fn load_train_data<F: Scalar>(
    manifest: &crate::manifest::DatasetManifest,
    target: &crate::audio::MachineType,
) -> Result<TrainData<F>> {
    use crate::manifest::Split;
    let mut data = TrainData::default();
    for (entry, clip) in manifest.load_clips::<F>(Split::Train, None)? {
        let item = TrainItem { clip, machine_id: entry.machine_id };
        if &entry.machine_type == target {
            data.normals.push(item);
        } else {
            data.pseudo.push(item);
        }
    }
    if data.normals.is_empty() {
        return Err(Error::Train(format!("no training normals for machine type {}", target.0)));
    }
    Ok(data)
}

/// Where a batch entry comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Normal,
    Pseudo,
}

/// One sample slot of a composed batch.
#[derive(Clone, Copy, Debug)]
pub struct PlanEntry {
    pub role: Role,
    /// Index into the corresponding pool of [`TrainData`].
    pub index: usize,
    /// ArcFace class for normals; `None` for pseudo-anomalies.
    pub id_class: Option<usize>,
}

/// A composed batch: entries plus the per-ID-class normal counts.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub entries: Vec<PlanEntry>,
    pub per_id_counts: Vec<usize>,
}

impl BatchPlan {
    /// Checks the balance contract: per-ID counts differ by ≤ 1, and in
    /// stage 2 exactly half the entries are pseudo-anomalies.
    pub fn validate(&self, stage: Stage, batch_size: usize) -> Result<()> {
        if self.entries.len() != batch_size {
            return Err(Error::Train(format!(
                "batch has {} entries, expected {batch_size}",
                self.entries.len()
            )));
        }
        let n_pseudo = self.entries.iter().filter(|e| e.role == Role::Pseudo).count();
        let want_pseudo = match stage {
            Stage::One => 0,
            Stage::Two => batch_size / 2,
        };
        if n_pseudo != want_pseudo {
            return Err(Error::Train(format!(
                "batch has {n_pseudo} pseudo-anomalies, expected {want_pseudo}"
            )));
        }
        let lo = self.per_id_counts.iter().min().unwrap_or(&0);
        let hi = self.per_id_counts.iter().max().unwrap_or(&0);
        if hi - lo > 1 {
            return Err(Error::Train(format!(
                "per-ID counts {:?} differ by more than one",
                self.per_id_counts
            )));
        }
        let from_counts: usize = self.per_id_counts.iter().sum();
        let n_normal = self.entries.len() - n_pseudo;
        if from_counts != n_normal {
            return Err(Error::Train(format!(
                "per-ID counts sum to {from_counts}, but batch holds {n_normal} normals"
            )));
        }
        Ok(())
    }
}

/// Draws balanced batches from per-ID queues that reshuffle every epoch.
#[derive(Clone, Debug)]
pub struct BatchComposer {
    /// Normal-pool indices grouped by ArcFace class.
    by_class: Vec<Vec<usize>>,
    /// Per-class queues for the current epoch (drawn from the back).
    queues: Vec<Vec<usize>>,
    batch_size: usize,
    normal_count: usize,
    /// Total batches composed in this stage; drives the rotating remainder.
    pub batches_emitted: u64,
}

impl BatchComposer {
    pub fn new<F: Scalar>(
        data: &TrainData<F>,
        id_classes: &[u32],
        batch_size: usize,
        batches_emitted: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Train("batch size must be positive".into()));
        }
        let mut by_class = vec![Vec::new(); id_classes.len()];
        for (i, item) in data.normals.iter().enumerate() {
            let class = id_classes.iter().position(|&id| id == item.machine_id).ok_or_else(
                || {
                    Error::Train(format!(
                        "normal clip has machine id {} outside the trained set",
                        item.machine_id
                    ))
                },
            )?;
            by_class[class].push(i);
        }
        for (class, ids) in by_class.iter().enumerate() {
            if ids.is_empty() {
                return Err(Error::Train(format!(
                    "machine id {} has no normal clips",
                    id_classes[class]
                )));
            }
        }
        Ok(Self {
            queues: vec![Vec::new(); by_class.len()],
            normal_count: data.normals.len(),
            by_class,
            batch_size,
            batches_emitted,
        })
    }

    /// Normal slots per batch at a given stage.
    pub fn normals_per_batch(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.batch_size,
            Stage::Two => self.batch_size / 2,
        }
    }

    /// Batches that constitute one pass over the normal pool.
    pub fn batches_per_epoch(&self, stage: Stage) -> usize {
        self.normal_count.div_ceil(self.normals_per_batch(stage)).max(1)
    }

    /// Reshuffles every per-ID queue for a new epoch.
    pub fn start_epoch(&mut self, rng: &mut ChaCha8Rng) {
        for (queue, pool) in self.queues.iter_mut().zip(&self.by_class) {
            let mut fresh = pool.clone();
            fresh.shuffle(rng);
            *queue = fresh;
        }
    }

    fn draw(&mut self, class: usize, rng: &mut ChaCha8Rng) -> usize {
        if self.queues[class].is_empty() {
            let mut fresh = self.by_class[class].clone();
            fresh.shuffle(rng);
            self.queues[class] = fresh;
        }
        self.queues[class].pop().unwrap()
    }

    /// Composes the next batch. Stage 2 needs a nonempty pseudo pool and an
    /// even batch size.
    pub fn compose(
        &mut self,
        stage: Stage,
        pseudo_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchPlan> {
        if stage == Stage::Two {
            if pseudo_len == 0 {
                return Err(Error::Train(
                    "stage 2 needs pseudo-anomalies, but no other machine type has normals"
                        .into(),
                ));
            }
            if self.batch_size % 2 != 0 {
                return Err(Error::Train(format!(
                    "stage 2 splits batches in half; batch size {} is odd",
                    self.batch_size
                )));
            }
        }
        let k = self.by_class.len();
        let n_normal = self.normals_per_batch(stage);
        let base = n_normal / k;
        let remainder = n_normal % k;
        let offset = ((self.batches_emitted as usize) * remainder) % k;
        let mut per_id_counts = vec![base; k];
        for j in 0..remainder {
            per_id_counts[(offset + j) % k] += 1;
        }

        let mut entries = Vec::with_capacity(self.batch_size);
        for class in 0..k {
            for _ in 0..per_id_counts[class] {
                entries.push(PlanEntry {
                    role: Role::Normal,
                    index: self.draw(class, rng),
                    id_class: Some(class),
                });
            }
        }
        if stage == Stage::Two {
            for _ in 0..self.batch_size / 2 {
                entries.push(PlanEntry {
                    role: Role::Pseudo,
                    index: rng.gen_range(0..pseudo_len),
                    id_class: None,
                });
            }
        }
        self.batches_emitted += 1;
        let plan = BatchPlan { entries, per_id_counts };
        plan.validate(stage, match stage {
            Stage::One => n_normal,
            Stage::Two => self.batch_size,
        })?;
        Ok(plan)
    }
}

/// Per-epoch mean losses, one line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub stage: u8,
    pub l_type: f64,
    pub l_id: f64,
    pub l_aug: f64,
    pub total: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.epoch, self.stage, self.l_type, self.l_id, self.l_aug, self.total
        )
    }
}

/// Everything a training run mutates, bundled for checkpoint/resume.
#[derive(Debug)]
pub struct TrainSession<F: Scalar> {
    pub model: Model<F>,
    pub optimizer: Adam<F>,
    pub rng: ChaCha8Rng,
    pub stage: Stage,
    /// Completed epochs within the current stage.
    pub epochs_done: u64,
    /// Batches composed within the current stage.
    pub batches_emitted: u64,
}

impl<F: Scalar> TrainSession<F> {
    /// Fresh session at the start of stage 1. The training RNG runs on its
    /// own stream so it never collides with init draws from the same seed.
    pub fn start(model: Model<F>) -> Self {
        let lr = model.config.train.learning_rate;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.train.seed);
        rng.set_stream(1);
        Self {
            optimizer: Adam::new(&model.store, lr),
            model,
            rng,
            stage: Stage::One,
            epochs_done: 0,
            batches_emitted: 0,
        }
    }

    /// Continues exactly where a checkpoint left off.
    pub fn resume(ckpt: Checkpoint<F>) -> Result<Self> {
        let lr = ckpt.model.config.train.learning_rate;
        let optimizer = match ckpt.optimizer {
            Some(o) => o,
            None => Adam::new(&ckpt.model.store, lr),
        };
        Ok(Self {
            model: ckpt.model,
            optimizer,
            rng: ckpt.rng,
            stage: ckpt.stage,
            epochs_done: ckpt.epochs_done,
            batches_emitted: ckpt.batches_emitted,
        })
    }

    pub fn to_checkpoint(&self, scorer: Option<ScorerState<F>>) -> Checkpoint<F> {
        Checkpoint {
            version: FORMAT_VERSION,
            dtype: F::DTYPE.into(),
            stage: self.stage,
            epochs_done: self.epochs_done,
            batches_emitted: self.batches_emitted,
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            rng: self.rng.clone(),
            scorer,
        }
    }

    /// Moves from stage 1 to stage 2, optionally resetting the optimizer so
    /// the newly unfrozen type head starts with clean moments.
    pub fn advance_stage(&mut self) {
        assert_eq!(self.stage, Stage::One, "already in stage 2");
        if self.model.config.train.reset_optimizer_between_stages {
            self.optimizer = Adam::new(&self.model.store, self.model.config.train.learning_rate);
        }
        self.stage = Stage::Two;
        self.epochs_done = 0;
        self.batches_emitted = 0;
    }

    /// Global epoch number for logging (stage 2 continues the count).
    fn global_epoch(&self) -> u64 {
        match self.stage {
            Stage::One => self.epochs_done,
            Stage::Two => self.model.config.train.stage1_epochs as u64 + self.epochs_done,
        }
    }

    /// Runs `count` epochs of the current stage and returns one log line per
    /// epoch. Stops at epoch boundaries, so the session can be checkpointed
    /// and resumed between any two calls.
    pub fn run_epochs(
        &mut self,
        data: &TrainData<F>,
        count: u64,
    ) -> Result<Vec<EpochLog>> {
        let cfg = self.model.config.train.clone();
        let weights =
            LossWeights { alpha: cfg.id_loss_weight, beta: cfg.aug_loss_weight };
        let mut composer = BatchComposer::new(
            data,
            &self.model.id_classes,
            cfg.batch_size,
            self.batches_emitted,
        )?;
        let frozen: &[&str] = match self.stage {
            Stage::One => &[crate::heads::TypeHead::PREFIX],
            Stage::Two => &[],
        };
        let mut logs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            composer.start_epoch(&mut self.rng);
            let batches = composer.batches_per_epoch(self.stage);
            let mut sums = [0.0f64; 4]; // l_type, l_id, l_aug, total
            for batch_idx in 0..batches {
                let plan = composer.compose(self.stage, data.pseudo.len(), &mut self.rng)?;
                let losses = self.train_step(data, &plan, &weights, frozen)?;
                if !losses.iter().all(|l| l.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        stage: match self.stage {
                            Stage::One => 1,
                            Stage::Two => 2,
                        },
                        epoch: (self.global_epoch() + 1) as u32,
                        batch: batch_idx,
                        l_type: losses[0],
                        l_id: losses[1],
                        l_aug: losses[2],
                    });
                }
                for (s, l) in sums.iter_mut().zip(losses) {
                    *s += l;
                }
            }
            self.batches_emitted = composer.batches_emitted;
            self.epochs_done += 1;
            let n = batches as f64;
            logs.push(EpochLog {
                epoch: self.global_epoch(),
                stage: match self.stage {
                    Stage::One => 1,
                    Stage::Two => 2,
                },
                l_type: sums[0] / n,
                l_id: sums[1] / n,
                l_aug: sums[2] / n,
                total: sums[3] / n,
            });
        }
        Ok(logs)
    }

    /// One optimizer step over a composed batch. Returns
    /// `[l_type, l_id, l_aug, total]` (means over their contributing rows).
    fn train_step(
        &mut self,
        data: &TrainData<F>,
        plan: &BatchPlan,
        weights: &LossWeights,
        frozen: &[&str],
    ) -> Result<[f64; 4]> {
        let cfg = &self.model.config;
        let b = plan.entries.len();

        // Augment every clip, then extract features. Augmentation draws come
        // from the session RNG in entry order, keeping runs reproducible.
        let mut features: Option<Tensor<F>> = None;
        let mut id_targets = Vec::with_capacity(b);
        let mut contributes = Vec::with_capacity(b);
        let mut type_labels = Vec::with_capacity(b);
        let mut aug_labels = Vec::with_capacity(b);
        for (row, entry) in plan.entries.iter().enumerate() {
            let item = match entry.role {
                Role::Normal => &data.normals[entry.index],
                Role::Pseudo => &data.pseudo[entry.index],
            };
            let spec = sample_augmentation(&mut self.rng, &cfg.augment, &AugmentationKind::ALL);
            let augmented = apply_augmentation(&item.clip, &spec, &cfg.augment, &cfg.frontend)?;
            let frames = compute_log_mel(&augmented.clip, &cfg.frontend)?;
            let (t, m) = (frames.shape()[0], frames.shape()[1]);
            let stacked = features.get_or_insert_with(|| Tensor::zeros([b, t, m]));
            if stacked.shape()[1] != t {
                return Err(Error::Train(format!(
                    "clip produces {t} frames where the batch has {}; all training clips \
                     must share one duration",
                    stacked.shape()[1]
                )));
            }
            stacked.data_mut()[row * t * m..(row + 1) * t * m].copy_from_slice(frames.data());
            id_targets.push(entry.id_class.unwrap_or(0));
            contributes.push(entry.role == Role::Normal);
            type_labels.push(entry.role == Role::Normal);
            aug_labels.push(augmented.augmentation_id as usize);
        }
        let features = features.expect("batch is nonempty");

        // Forward graph.
        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape);
        let mut ctx = FwdCtx::new(true, &mut self.rng);
        let x = tape.leaf(features);
        let emb = self.model.encoder.forward(&mut tape, &self.model.store, &bound, &mut ctx, x)?;

        let arc_logits =
            self.model
                .arcface
                .margin_logits_graph(&mut tape, &bound, emb, &id_targets, &contributes);
        let n_contrib = contributes.iter().filter(|&&c| c).count().max(1);
        let l_id_sum = tape.cross_entropy_sum(arc_logits, &id_targets, &contributes);
        let l_id = tape.scale(l_id_sum, F::of(1.0 / n_contrib as f64));

        let aug_logits = self.model.aug_head.logits_graph(&mut tape, &bound, emb);
        let all = vec![true; b];
        let l_aug_sum = tape.cross_entropy_sum(aug_logits, &aug_labels, &all);
        let l_aug = tape.scale(l_aug_sum, F::of(1.0 / b as f64));

        // The type head only enters the graph in stage 2; in stage 1 it is
        // frozen and there are no pseudo-anomalies to discriminate.
        let (l_type, l_type_val) = match self.stage {
            Stage::One => (None, 0.0),
            Stage::Two => {
                let type_logits = self.model.type_head.logits_graph(&mut tape, &bound, emb);
                let sum = tape.bce_with_logits_sum(type_logits, &type_labels);
                let l = tape.scale(sum, F::of(1.0 / b as f64));
                (Some(l), tape.value(l).item().as_f64())
            }
        };

        let id_w = tape.scale(l_id, F::of(weights.alpha));
        let aug_w = tape.scale(l_aug, F::of(weights.beta));
        let mut total = tape.add(id_w, aug_w);
        if let Some(lt) = l_type {
            total = tape.add(total, lt);
        }

        let l_id_val = tape.value(l_id).item().as_f64();
        let l_aug_val = tape.value(l_aug).item().as_f64();
        let total_val = tape.value(total).item().as_f64();
        if !total_val.is_finite() {
            return Ok([l_type_val, l_id_val, l_aug_val, total_val]);
        }

        // Backward + update.
        let grads = tape.backward(total);
        let per_param: Vec<Option<Tensor<F>>> =
            bound.iter().map(|&v| grads.get(v).cloned()).collect();
        self.optimizer.step(
            &mut self.model.store,
            &per_param,
            frozen,
            self.model.config.train.grad_clip,
        );
        // Batch-norm running statistics update outside the graph.
        for (mean_id, var_id, batch_mean, batch_var) in ctx.bn_updates.drain(..) {
            let m = F::of(crate::nn::BatchNorm::MOMENTUM);
            let one_m = F::one() - m;
            let rm = self.model.store.get_mut(mean_id);
            *rm = rm.scale(one_m).add(&batch_mean.scale(m));
            let rv = self.model.store.get_mut(var_id);
            *rv = rv.scale(one_m).add(&batch_var.scale(m));
        }
        self.model.arcface.renormalize_anchors(&mut self.model.store);

        Ok([l_type_val, l_id_val, l_aug_val, total_val])
    }

    /// Runs the remaining epochs of both stages per the configuration,
    /// optionally writing a checkpoint at every epoch boundary.
    pub fn train_full(
        &mut self,
        data: &TrainData<F>,
        checkpoint_path: Option<&std::path::Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        let mut run = |session: &mut Self, remaining: u64, logs: &mut Vec<EpochLog>| -> Result<()> {
            for _ in 0..remaining {
                let batch = session.run_epochs(data, 1)?;
                for log in batch {
                    on_epoch(&log);
                    logs.push(log);
                }
                if let Some(path) = checkpoint_path {
                    session.to_checkpoint(None).save(path)?;
                }
            }
            Ok(())
        };
        if self.stage == Stage::One {
            let total = self.model.config.train.stage1_epochs as u64;
            run(self, total.saturating_sub(self.epochs_done), &mut logs)?;
            self.advance_stage();
        }
        let total = self.model.config.train.stage2_epochs as u64;
        run(self, total.saturating_sub(self.epochs_done), &mut logs)?;
        if let Some(path) = checkpoint_path {
            self.to_checkpoint(None).save(path)?;
        }
        Ok(logs)
    }
}
