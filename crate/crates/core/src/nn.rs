//! Neural-network building blocks over the autodiff tape.
//!
//! All weights live in a flat [`ParamStore`] addressed by [`ParamId`]; layer
//! structs hold only ids and dimensions. A forward pass binds every stored
//! tensor onto a fresh tape (`bind`), then layers look their nodes up by id.
//! This keeps parameter iteration order fixed — which the optimizer, the
//! checkpoint format, and the determinism guarantees all rely on — and makes
//! freezing a sub-network a name-prefix predicate rather than a graph
//! surgery problem.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
struct ParamEntry<F: Scalar> {
    name: String,
    tensor: Tensor<F>,
    /// Buffers (running statistics) are stored but never optimized.
    trainable: bool,
}

/// Ordered, named collection of parameter tensors and buffers.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Leafs every tensor onto the tape, in storage order. `bound[id.0]` is
    /// the graph node of parameter `id`.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.entries.iter().map(|e| tape.leaf(e.tensor.clone())).collect()
    }

    /// Casts every tensor to another scalar type, preserving names/order.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Per-forward-pass context: train/eval mode, the RNG driving dropout, and
/// the batch-norm statistics produced along the way (applied post-step).
pub struct FwdCtx<'a, F: Scalar> {
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
    /// `(mean_buffer, var_buffer, batch_mean, batch_var)` per batch-norm hit.
    pub bn_updates: Vec<(ParamId, ParamId, Tensor<F>, Tensor<F>)>,
}

impl<'a, F: Scalar> FwdCtx<'a, F> {
    pub fn new(train: bool, rng: &'a mut ChaCha8Rng) -> Self {
        Self { train, rng, bn_updates: Vec::new() }
    }
}

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn
/// in row-major order so layouts are reproducible.
pub fn uniform_init<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
) -> Tensor<F> {
    let shape = shape.into();
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data)
}

/// Inverted dropout; identity in eval mode or at p = 0.
pub fn dropout<F: Scalar>(tape: &mut Tape<F>, ctx: &mut FwdCtx<F>, x: Var, p: f64) -> Var {
    if !ctx.train || p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let scale = F::of(1.0 / keep);
    let data = (0..n)
        .map(|_| if ctx.rng.gen::<f64>() < keep { scale } else { F::zero() })
        .collect();
    tape.mul_mask(x, Tensor::new(shape, data))
}

// =========================================================================
// linear
// =========================================================================

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.insert(format!("{name}.w"), uniform_init(rng, [in_dim, out_dim], in_dim), true);
        let b = bias
            .then(|| store.insert(format!("{name}.b"), uniform_init(rng, [out_dim], in_dim), true));
        Self { w, b, in_dim, out_dim }
    }

    /// Applies to the last axis of `x` (any leading shape).
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &[Var], x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        assert_eq!(*shape.last().unwrap(), self.in_dim, "linear input dim");
        let lead: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, [lead, self.in_dim]);
        let mut y = tape.matmul(flat, bound[self.w.0]);
        if let Some(b) = self.b {
            y = tape.add_bias(y, bound[b.0]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, out_shape)
    }
}

// =========================================================================
// normalization layers
// =========================================================================

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full([dim], F::one()), true);
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros([dim]), true);
        Self { gamma, beta, dim }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &[Var], x: Var) -> Var {
        tape.layer_norm(x, bound[self.gamma.0], bound[self.beta.0], F::of(Self::EPS))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    /// Fraction of the batch statistic blended into the running buffers.
    pub const MOMENTUM: f64 = 0.1;

    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full([dim], F::one()), true);
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros([dim]), true);
        let running_mean = store.insert(format!("{name}.running_mean"), Tensor::zeros([dim]), false);
        let running_var =
            store.insert(format!("{name}.running_var"), Tensor::full([dim], F::one()), false);
        Self { gamma, beta, running_mean, running_var, dim }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        bound: &[Var],
        ctx: &mut FwdCtx<F>,
        x: Var,
    ) -> Var {
        if ctx.train {
            let (y, mean, var) =
                tape.batch_norm_train(x, bound[self.gamma.0], bound[self.beta.0], F::of(Self::EPS));
            ctx.bn_updates.push((self.running_mean, self.running_var, mean, var));
            y
        } else {
            tape.batch_norm_eval(
                x,
                bound[self.gamma.0],
                bound[self.beta.0],
                store.get(self.running_mean),
                store.get(self.running_var),
                F::of(Self::EPS),
            )
        }
    }
}

// =========================================================================
// attention
// =========================================================================

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
    pub model_dim: usize,
}

impl MultiHeadAttention {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        model_dim: usize,
        num_heads: usize,
    ) -> Self {
        assert_eq!(model_dim % num_heads, 0);
        Self {
            wq: Linear::init(store, rng, &format!("{name}.wq"), model_dim, model_dim, true),
            wk: Linear::init(store, rng, &format!("{name}.wk"), model_dim, model_dim, true),
            wv: Linear::init(store, rng, &format!("{name}.wv"), model_dim, model_dim, true),
            wo: Linear::init(store, rng, &format!("{name}.wo"), model_dim, model_dim, true),
            num_heads,
            model_dim,
        }
    }

    /// Self-attention over `[B, T, D]` without positional encoding.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &[Var], x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.model_dim);
        let h = self.num_heads;
        let dh = d / h;

        let split = |tape: &mut Tape<F>, v: Var| {
            let v = tape.reshape(v, [b, t, h, dh]);
            tape.permute(v, &[0, 2, 1, 3]) // [B, H, T, dh]
        };
        let q = self.wq.forward(tape, bound, x);
        let k = self.wk.forward(tape, bound, x);
        let v = self.wv.forward(tape, bound, x);
        let q = split(tape, q);
        let k = split(tape, k);
        let v = split(tape, v);

        let kt = tape.permute(k, &[0, 1, 3, 2]); // [B, H, dh, T]
        let scores = tape.bmm(q, kt); // [B, H, T, T]
        let scores = tape.scale(scores, F::of(1.0 / (dh as f64).sqrt()));
        let attn = tape.softmax_last(scores);
        let ctx_heads = tape.bmm(attn, v); // [B, H, T, dh]
        let merged = tape.permute(ctx_heads, &[0, 2, 1, 3]); // [B, T, H, dh]
        let merged = tape.reshape(merged, [b, t, d]);
        self.wo.forward(tape, bound, merged)
    }
}
