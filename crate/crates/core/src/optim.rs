//! Adam optimizer over a [`ParamStore`], with name-prefix freezing and an
//! optional global gradient-norm clip. State (first/second moments, step
//! count) serializes into checkpoints so training can resume bit-exactly.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        let v = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` pairs with parameter id `i`; `None` (no path
    /// to the loss), non-trainable entries, and names starting with any of
    /// `frozen_prefixes` are skipped. Moments of skipped slots are untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[Option<Tensor<F>>],
        frozen_prefixes: &[&str],
        grad_clip: Option<f64>,
    ) {
        assert_eq!(grads.len(), store.len(), "gradient slot count");
        let active: Vec<usize> = store
            .ids()
            .filter(|&id| {
                store.is_trainable(id)
                    && grads[id.0].is_some()
                    && !frozen_prefixes.iter().any(|p| store.name(id).starts_with(p))
            })
            .map(|id| id.0)
            .collect();

        let clip_scale = match grad_clip {
            Some(max_norm) => {
                let mut sq = 0.0f64;
                for &i in &active {
                    for &g in grads[i].as_ref().unwrap().data() {
                        let g = g.as_f64();
                        sq += g * g;
                    }
                }
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.t += 1;
        let t = self.t as i32;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let correction1 = F::of(1.0 - self.beta1.powi(t));
        let correction2 = F::of(1.0 - self.beta2.powi(t));
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        let clip = F::of(clip_scale);

        for &i in &active {
            let g = grads[i].as_ref().unwrap();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(crate::nn::ParamId(i));
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                let gv = gv * clip;
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / correction1;
                let vhat = *vv / correction2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
