//! Conformer encoder with attentive statistical pooling.
//!
//! A linear stem projects log-mel frames to the model width; each conformer
//! block applies half-residual feed-forward, multi-head self-attention (no
//! positional encoding), a convolution module, a second half-residual
//! feed-forward, and a closing layer norm. Attentive statistical pooling
//! collapses time into a weighted mean and standard deviation, which a final
//! linear layer projects to the embedding.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{ConvNorm, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm, FwdCtx, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::nn::uniform_init;

/// Variance floor inside the pooled standard deviation.
pub const POOL_STD_EPS: f64 = 1e-6;

// =========================================================================
// sub-modules
// =========================================================================

/// Pre-norm feed-forward: LN -> linear -> swish -> dropout -> linear -> dropout.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
struct FeedForward {
    norm: LayerNorm,
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            norm: LayerNorm::init(store, &format!("{name}.norm"), dim),
            lin1: Linear::init(store, rng, &format!("{name}.lin1"), dim, hidden, true),
            lin2: Linear::init(store, rng, &format!("{name}.lin2"), hidden, dim, true),
        }
    }

    fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &[Var],
        ctx: &mut FwdCtx<F>,
        x: Var,
        p: f64,
    ) -> Var {
        let h = self.norm.forward(tape, bound, x);
        let h = self.lin1.forward(tape, bound, h);
        let h = tape.swish(h);
        let h = dropout(tape, ctx, h, p);
        let h = self.lin2.forward(tape, bound, h);
        dropout(tape, ctx, h, p)
    }
}

/// Conformer convolution module: LN -> pointwise to 2D -> GLU -> depthwise
/// conv -> norm -> swish -> pointwise -> dropout.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: crate::nn::ParamId,
    depthwise_bias: crate::nn::ParamId,
    conv_norm_batch: Option<BatchNorm>,
    conv_norm_layer: Option<LayerNorm>,
    pointwise_out: Linear,
}

impl ConvModule {
    fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        kernel: usize,
        which: ConvNorm,
    ) -> Self {
        let norm = LayerNorm::init(store, &format!("{name}.norm"), dim);
        let pointwise_in =
            Linear::init(store, rng, &format!("{name}.pointwise_in"), dim, 2 * dim, true);
        let depthwise = store.insert(
            format!("{name}.depthwise.w"),
            uniform_init(rng, [dim, kernel], kernel),
            true,
        );
        let depthwise_bias =
            store.insert(format!("{name}.depthwise.b"), uniform_init(rng, [dim], kernel), true);
        let (conv_norm_batch, conv_norm_layer) = match which {
            ConvNorm::Batch => (Some(BatchNorm::init(store, &format!("{name}.bn"), dim)), None),
            ConvNorm::Layer => (None, Some(LayerNorm::init(store, &format!("{name}.ln"), dim))),
        };
        let pointwise_out =
            Linear::init(store, rng, &format!("{name}.pointwise_out"), dim, dim, true);
        Self {
            norm,
            pointwise_in,
            depthwise,
            depthwise_bias,
            conv_norm_batch,
            conv_norm_layer,
            pointwise_out,
        }
    }

    fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        bound: &[Var],
        ctx: &mut FwdCtx<F>,
        x: Var,
        p: f64,
    ) -> Var {
        let h = self.norm.forward(tape, bound, x);
        let h = self.pointwise_in.forward(tape, bound, h);
        let h = tape.glu(h);
        let h = tape.depthwise_conv1d(h, bound[self.depthwise.0]);
        let h = tape.add_bias(h, bound[self.depthwise_bias.0]);
        let h = if let Some(bn) = &self.conv_norm_batch {
            bn.forward(tape, store, bound, ctx, h)
        } else {
            self.conv_norm_layer.as_ref().unwrap().forward(tape, bound, h)
        };
        let h = tape.swish(h);
        let h = self.pointwise_out.forward(tape, bound, h);
        dropout(tape, ctx, h, p)
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
struct ConformerBlock {
    ffn1: FeedForward,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    conv: ConvModule,
    ffn2: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerBlock {
    fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            ffn1: FeedForward::init(store, rng, &format!("{name}.ffn1"), d, cfg.ffn_dim),
            attn_norm: LayerNorm::init(store, &format!("{name}.attn_norm"), d),
            attn: MultiHeadAttention::init(store, rng, &format!("{name}.attn"), d, cfg.num_heads),
            conv: ConvModule::init(
                store,
                rng,
                &format!("{name}.conv"),
                d,
                cfg.conv_kernel,
                cfg.conv_norm,
            ),
            ffn2: FeedForward::init(store, rng, &format!("{name}.ffn2"), d, cfg.ffn_dim),
            final_norm: LayerNorm::init(store, &format!("{name}.final_norm"), d),
        }
    }

    fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        bound: &[Var],
        ctx: &mut FwdCtx<F>,
        x: Var,
        p: f64,
    ) -> Var {
        let half = F::of(0.5);
        let f1 = self.ffn1.forward(tape, bound, ctx, x, p);
        let f1 = tape.scale(f1, half);
        let x = tape.add(x, f1);

        let a = self.attn_norm.forward(tape, bound, x);
        let a = self.attn.forward(tape, bound, a);
        let a = dropout(tape, ctx, a, p);
        let x = tape.add(x, a);

        let c = self.conv.forward(tape, store, bound, ctx, x, p);
        let x = tape.add(x, c);

        let f2 = self.ffn2.forward(tape, bound, ctx, x, p);
        let f2 = tape.scale(f2, half);
        let x = tape.add(x, f2);

        self.final_norm.forward(tape, bound, x)
    }
}

/// Attentive statistical pooling: a tanh scorer produces per-frame logits,
/// softmax over time yields weights, and the weighted mean and standard
/// deviation are concatenated and projected to the embedding dimension.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AttentiveStatPool {
    score1: Linear,
    score2: Linear,
    proj: Linear,
    model_dim: usize,
}

impl AttentiveStatPool {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        model_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            score1: Linear::init(store, rng, &format!("{name}.score1"), model_dim, model_dim, true),
            score2: Linear::init(store, rng, &format!("{name}.score2"), model_dim, 1, true),
            proj: Linear::init(store, rng, &format!("{name}.proj"), 2 * model_dim, out_dim, true),
            model_dim,
        }
    }

    /// Pools `[B, T, D]` to `[B, out_dim]`. Returns the attention weights
    /// `[B, T]` alongside for inspection.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &[Var],
        x: Var,
    ) -> (Var, Var) {
        let shape = tape.value(x).shape().to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.model_dim);
        assert!(t >= 1, "pooling needs at least one frame");

        let e = self.score1.forward(tape, bound, x);
        let e = tape.tanh(e);
        let e = self.score2.forward(tape, bound, e); // [B, T, 1]
        let e = tape.reshape(e, [b, t]);
        let w = tape.softmax_last(e); // [B, T]

        let w_row = tape.reshape(w, [b, 1, t]);
        let mean = tape.bmm(w_row, x); // [B, 1, D]
        let mean = tape.reshape(mean, [b, d]);

        let x2 = tape.square(x);
        let ex2 = tape.bmm(w_row, x2);
        let ex2 = tape.reshape(ex2, [b, d]);
        let mean2 = tape.square(mean);
        let var = tape.sub(ex2, mean2);
        let var = tape.clamp(var, F::zero(), F::infinity());
        let var = tape.add_scalar(var, F::of(POOL_STD_EPS));
        let std = tape.sqrt(var);

        let stats = tape.concat_last(mean, std); // [B, 2D]
        (self.proj.forward(tape, bound, stats), w)
    }
}

// =========================================================================
// full encoder
// =========================================================================

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Encoder {
    stem: Linear,
    blocks: Vec<ConformerBlock>,
    pool: AttentiveStatPool,
    pub cfg: EncoderConfig,
}

impl Encoder {
    /// Parameter-name prefix in the store.
    pub const PREFIX: &'static str = "encoder";

    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
    ) -> Self {
        let p = Self::PREFIX;
        let stem =
            Linear::init(store, rng, &format!("{p}.stem"), cfg.input_dim, cfg.model_dim, true);
        let blocks = (0..cfg.num_blocks)
            .map(|i| ConformerBlock::init(store, rng, &format!("{p}.blocks.{i}"), cfg))
            .collect();
        let pool = AttentiveStatPool::init(
            store,
            rng,
            &format!("{p}.pool"),
            cfg.model_dim,
            cfg.embedding_dim,
        );
        Self { stem, blocks, pool, cfg: cfg.clone() }
    }

    /// Maps `[B, T, M]` log-mel input to `[B, embedding_dim]`. Checks every
    /// block output for finiteness and names the offending block on failure.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        bound: &[Var],
        ctx: &mut FwdCtx<F>,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 3 || shape[2] != self.cfg.input_dim {
            return Err(Error::Encoder(format!(
                "expected [B, T, {}] input, got {shape:?}",
                self.cfg.input_dim
            )));
        }
        let p = self.cfg.dropout;
        let mut h = self.stem.forward(tape, bound, x);
        h = dropout(tape, ctx, h, p);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, store, bound, ctx, h, p);
            if !tape.value(h).all_finite() {
                return Err(Error::NonFiniteActivation { block: i });
            }
        }
        let (emb, _) = self.pool.forward(tape, bound, h);
        if !tape.value(emb).all_finite() {
            return Err(Error::NonFiniteActivation { block: self.blocks.len() });
        }
        Ok(emb)
    }
}

/// Convenience eval-mode embedding extraction outside any training loop.
pub fn embed_batch<F: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<F>,
    frames: &Tensor<F>,
) -> Result<Tensor<F>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = FwdCtx::new(false, &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = tape.leaf(frames.clone());
    let emb = encoder.forward(&mut tape, store, &bound, &mut ctx, x)?;
    Ok(tape.value(emb).clone())
}
