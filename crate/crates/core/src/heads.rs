//! The three classification heads over the embedding and their losses:
//! machine identity with an additive angular margin, binary machine type,
//! and augmentation identity. Each loss exists in two forms — a pure tensor
//! function the tests can oracle against, and a graph builder the trainer
//! differentiates through. Sum reduction throughout (mean available via a
//! flag on the pure forms).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, sigmoid_scalar, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cosines are clamped to ±(1 − COS_CLAMP) before `arccos` so its gradient
/// stays finite.
pub const COS_CLAMP: f64 = 1e-7;

/// Loss reduction over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    Sum,
    Mean,
}

// =========================================================================
// ArcFace identity head
// =========================================================================

/// Machine-ID classifier with unit-norm anchors, zero bias, and an additive
/// angular margin on the target class.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ArcFaceHead {
    pub anchors: ParamId,
    pub num_classes: usize,
    pub dim: usize,
    pub scale: f64,
    pub margin: f64,
}

impl ArcFaceHead {
    pub const PREFIX: &'static str = "arcface";

    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        num_classes: usize,
        dim: usize,
        scale: f64,
        margin: f64,
    ) -> Self {
        let mut anchors: Tensor<F> =
            crate::nn::uniform_init(rng, [num_classes, dim], dim);
        normalize_rows(&mut anchors);
        let anchors = store.insert(format!("{}.anchors", Self::PREFIX), anchors, true);
        Self { anchors, num_classes, dim, scale, margin }
    }

    /// Restores the unit-norm invariant after an optimizer step.
    pub fn renormalize_anchors<F: Scalar>(&self, store: &mut ParamStore<F>) {
        normalize_rows(store.get_mut(self.anchors));
    }

    /// Pure logits for one embedding. With a target, the target class gets
    /// the margin-modified logit `s*cos(theta + m)`; without one (inference)
    /// all logits are plain `s*cos(theta)`.
    pub fn logits<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &[F],
        target: Option<usize>,
    ) -> Result<Vec<F>> {
        assert_eq!(x.len(), self.dim);
        if let Some(t) = target {
            assert!(t < self.num_classes, "target class out of range");
        }
        let norm = x.iter().map(|&v| v * v).sum::<F>().sqrt();
        if norm == F::zero() {
            return Err(Error::Loss("zero-norm embedding".into()));
        }
        let anchors = store.get(self.anchors);
        let s = F::of(self.scale);
        let lim = F::of(1.0 - COS_CLAMP);
        let mut out = Vec::with_capacity(self.num_classes);
        for k in 0..self.num_classes {
            let row = anchors.row(k);
            let arow: F = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            let mut cos = F::zero();
            for (&xi, &wi) in x.iter().zip(row) {
                cos += xi * wi;
            }
            cos = (cos / (norm * arow)).max(-lim).min(lim);
            let logit = if target == Some(k) {
                let theta = cos.acos();
                s * cos_with_margin_tail(theta + F::of(self.margin), self.margin)
            } else {
                s * cos
            };
            out.push(logit);
        }
        Ok(out)
    }

    /// Graph path: margin logits for a batch `[B, dim]` of embeddings.
    /// `targets[i]` is ignored where `contributes[i]` is false.
    pub fn margin_logits_graph<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &[Var],
        x: Var,
        targets: &[usize],
        contributes: &[bool],
    ) -> Var {
        let b = tape.value(x).rows();
        assert_eq!(targets.len(), b);
        assert_eq!(contributes.len(), b);
        let xn = tape.l2_normalize_rows(x);
        let wn = tape.l2_normalize_rows(bound[self.anchors.0]);
        let wt = tape.permute(wn, &[1, 0]);
        let cos = tape.matmul(xn, wt); // [B, K]
        let lim = F::of(1.0 - COS_CLAMP);
        let cos = tape.clamp(cos, -lim, lim);

        // One-hot mask over (sample, class) marking where the margin applies.
        let mut mask = Tensor::<F>::zeros([b, self.num_classes]);
        for i in 0..b {
            if contributes[i] {
                mask.set2(i, targets[i], F::one());
            }
        }
        let theta = tape.arccos(cos);
        let theta_m = tape.add_scalar(theta, F::of(self.margin));
        let cos_m = tape.cos_margin_tail(theta_m, F::of(self.margin));
        let delta = tape.sub(cos_m, cos);
        let delta = tape.mul_mask(delta, mask);
        let with_margin = tape.add(cos, delta);
        tape.scale(with_margin, F::of(self.scale))
    }

    /// Graph path: plain scaled-cosine logits (inference form).
    pub fn plain_logits_graph<F: Scalar>(&self, tape: &mut Tape<F>, bound: &[Var], x: Var) -> Var {
        let xn = tape.l2_normalize_rows(x);
        let wn = tape.l2_normalize_rows(bound[self.anchors.0]);
        let wt = tape.permute(wn, &[1, 0]);
        let cos = tape.matmul(xn, wt);
        tape.scale(cos, F::of(self.scale))
    }
}

/// `cos(u)` continued past pi by a tangent line of slope `-sin(m)`, keeping
/// the margin penalty monotone in the angle.
pub fn cos_with_margin_tail<F: Scalar>(u: F, margin: f64) -> F {
    let pi = F::of(std::f64::consts::PI);
    if u <= pi {
        u.cos()
    } else {
        -F::one() - (u - pi) * F::of(margin).sin()
    }
}

fn normalize_rows<F: Scalar>(t: &mut Tensor<F>) {
    let (n, d) = (t.rows(), t.cols());
    for i in 0..n {
        let row = &mut t.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        if norm > F::zero() {
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
    }
}

// =========================================================================
// binary type head and augmentation head
// =========================================================================

/// Binary machine-type discriminator; emits a logit, probability via sigmoid.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TypeHead {
    pub lin: Linear,
}

impl TypeHead {
    pub const PREFIX: &'static str = "type_head";

    pub fn init<F: Scalar>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        Self { lin: Linear::init(store, rng, Self::PREFIX, dim, 1, true) }
    }

    /// Logits `[B]` on the graph.
    pub fn logits_graph<F: Scalar>(&self, tape: &mut Tape<F>, bound: &[Var], x: Var) -> Var {
        let b = tape.value(x).rows();
        let z = self.lin.forward(tape, bound, x);
        tape.reshape(z, [b])
    }

    /// Pure probability for one embedding, strictly inside (0, 1).
    pub fn probability<F: Scalar>(&self, store: &ParamStore<F>, x: &[F]) -> F {
        let w = store.get(self.lin.w);
        let b = store.get(self.lin.b.unwrap());
        let mut z = b.data()[0];
        for (i, &xi) in x.iter().enumerate() {
            z += xi * w.at2(i, 0);
        }
        sigmoid_scalar(z)
    }

    /// Pure logit for one embedding.
    pub fn logit<F: Scalar>(&self, store: &ParamStore<F>, x: &[F]) -> F {
        let w = store.get(self.lin.w);
        let b = store.get(self.lin.b.unwrap());
        let mut z = b.data()[0];
        for (i, &xi) in x.iter().enumerate() {
            z += xi * w.at2(i, 0);
        }
        z
    }
}

/// Augmentation-identity classifier over the fixed 9-class table.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AugHead {
    pub lin: Linear,
}

impl AugHead {
    pub const PREFIX: &'static str = "aug_head";
    pub const CLASSES: usize = crate::augment::AugmentationKind::COUNT;

    pub fn init<F: Scalar>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        Self { lin: Linear::init(store, rng, Self::PREFIX, dim, Self::CLASSES, true) }
    }

    pub fn logits_graph<F: Scalar>(&self, tape: &mut Tape<F>, bound: &[Var], x: Var) -> Var {
        self.lin.forward(tape, bound, x)
    }
}

// =========================================================================
// pure loss functions
// =========================================================================

/// Outcome of a loss evaluation; `contributed` is false when no sample in
/// the batch was eligible (the value is then 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue<F> {
    pub value: F,
    pub contributed: bool,
}

/// Cross-entropy over margin-modified (or plain) logits, summed over the
/// contributing rows of `[B, K]`.
pub fn arcface_loss<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    contributes: &[bool],
    reduction: Reduction,
) -> LossValue<F> {
    let (b, k) = (logits.rows(), logits.cols());
    assert_eq!(targets.len(), b);
    assert_eq!(contributes.len(), b);
    let mut total = F::zero();
    let mut n = 0usize;
    for i in 0..b {
        if !contributes[i] {
            continue;
        }
        assert!(targets[i] < k, "target class out of range");
        let row = logits.row(i);
        total += log_sum_exp(row) - row[targets[i]];
        n += 1;
    }
    if n == 0 {
        return LossValue { value: F::zero(), contributed: false };
    }
    if reduction == Reduction::Mean {
        total = total / F::of(n as f64);
    }
    LossValue { value: total, contributed: true }
}

/// Binary cross-entropy over probabilities in (0, 1), summed.
pub fn type_loss<F: Scalar>(probs: &[F], labels: &[bool], reduction: Reduction) -> Result<F> {
    assert_eq!(probs.len(), labels.len());
    let mut total = F::zero();
    for (&p, &y) in probs.iter().zip(labels) {
        if !(p > F::zero() && p < F::one()) {
            return Err(Error::Loss(format!(
                "type probability {} outside (0, 1)",
                p.as_f64()
            )));
        }
        total += if y { -p.ln() } else { -(F::one() - p).ln() };
    }
    if reduction == Reduction::Mean && !probs.is_empty() {
        total = total / F::of(probs.len() as f64);
    }
    Ok(total)
}

/// Numerically safe BCE from logits: `softplus(z) - y*z`, summed.
pub fn type_loss_from_logits<F: Scalar>(logits: &[F], labels: &[bool]) -> F {
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(z) - if y { z } else { F::zero() })
        .sum()
}

/// Plain softmax cross-entropy over `[B, 9]` augmentation logits, summed.
pub fn aug_loss<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<F> {
    let (b, k) = (logits.rows(), logits.cols());
    assert_eq!(labels.len(), b);
    let mut total = F::zero();
    for i in 0..b {
        if labels[i] >= k {
            return Err(Error::Loss(format!("augmentation label {} out of range", labels[i])));
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[labels[i]];
    }
    if reduction == Reduction::Mean && b > 0 {
        total = total / F::of(b as f64);
    }
    Ok(total)
}

/// Which training stage a loss evaluation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Type head frozen; its loss is excluded.
    One,
    /// All heads active.
    Two,
}

/// Loss weights for the identity and augmentation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

/// Total loss: `l_type + alpha*l_id + beta*l_aug` in stage 2; the type term
/// is dropped in stage 1.
pub fn total_loss<F: Scalar>(l_type: F, l_id: F, l_aug: F, w: &LossWeights, stage: Stage) -> F {
    let aux = F::of(w.alpha) * l_id + F::of(w.beta) * l_aug;
    match stage {
        Stage::One => aux,
        Stage::Two => l_type + aux,
    }
}
