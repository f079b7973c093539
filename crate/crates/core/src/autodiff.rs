//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse, accumulating gradients. The op set is exactly what
//! the conformer encoder, the pooling layer, and the three heads need —
//! nothing speculative. Every op is single-threaded with a fixed reduction
//! order, which keeps training bit-reproducible under a fixed seed.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// `(upstream grad, parent values, node value) -> parent grads`.
type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[&Tensor<F>], &Tensor<F>) -> Vec<Tensor<F>>>;

struct Node<F: Scalar> {
    value: Tensor<F>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by one backward sweep, addressed by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, parents: Vec<Var>, backward: Option<BackwardFn<F>>) -> Var {
        self.nodes.push(Node { value, parents, backward });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input or parameter node.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Accumulates `d root / d node` for every node reachable from `root`.
    /// `root` must hold a single element.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_values: Vec<&Tensor<F>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let parent_grads = back(&g, &parent_values, &node.value);
                assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // =====================================================================
    // elementwise
    // =====================================================================

    /// Unary elementwise op; `df(x, y)` is the local derivative dy/dx.
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Var {
        let value = self.value(a).map(f);
        let back: BackwardFn<F> = Box::new(move |g, inputs, out| {
            let x = inputs[0];
            let mut gi = g.clone();
            for ((gv, &xv), &yv) in gi.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                *gv = *gv * df(xv, yv);
            }
            vec![gi]
        });
        self.push(value, vec![a], Some(back))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let back: BackwardFn<F> = Box::new(|g, _, _| vec![g.clone(), g.clone()]);
        self.push(value, vec![a, b], Some(back))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let back: BackwardFn<F> = Box::new(|g, _, _| vec![g.clone(), g.scale(-F::one())]);
        self.push(value, vec![a, b], Some(back))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let back: BackwardFn<F> = Box::new(|g, inputs, _| {
            vec![g.zip_map(inputs[1], |gv, y| gv * y), g.zip_map(inputs[0], |gv, x| gv * x)]
        });
        self.push(value, vec![a, b], Some(back))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.unary(a, move |x| x + c, |_, _| F::one())
    }

    /// Elementwise multiply by a constant tensor (dropout masks, class masks).
    pub fn mul_mask(&mut self, a: Var, mask: Tensor<F>) -> Var {
        assert_eq!(self.value(a).shape(), mask.shape(), "mask shape mismatch");
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        let back: BackwardFn<F> = Box::new(move |g, _, _| vec![g.zip_map(&mask, |gv, m| gv * m)]);
        self.push(value, vec![a], Some(back))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, |_, y| y * (F::one() - y))
    }

    /// `x * sigmoid(x)` (the conformer activation).
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid_scalar(x),
            |x, _| {
                let s = sigmoid_scalar(x);
                s * (F::one() + x * (F::one() - s))
            },
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| F::of(2.0) * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), |_, y| F::one() / (F::of(2.0) * y))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the band.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { F::one() } else { F::zero() },
        )
    }

    /// Inverse cosine. Inputs must already be clamped strictly inside (-1, 1).
    pub fn arccos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.acos(), |x, _| -F::one() / (F::one() - x * x).sqrt())
    }

    /// `cos(u)` continued past `u = pi` by the tangent line with slope
    /// `-sin(margin)`, keeping the angular-margin logit monotone in the angle.
    pub fn cos_margin_tail(&mut self, a: Var, margin: F) -> Var {
        let pi = F::of(std::f64::consts::PI);
        let slope = margin.sin();
        self.unary(
            a,
            move |u| if u <= pi { u.cos() } else { -F::one() - (u - pi) * slope },
            move |u, _| if u <= pi { -u.sin() } else { -slope },
        )
    }

    // =====================================================================
    // shape
    // =====================================================================

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let in_shape = self.value(a).shape().to_vec();
        let value = self.value(a).clone().reshaped(shape);
        let back: BackwardFn<F> =
            Box::new(move |g, _, _| vec![g.clone().reshaped(in_shape.clone())]);
        self.push(value, vec![a], Some(back))
    }

    /// Axis permutation with copy; backward applies the inverse permutation.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let value = permute_tensor(self.value(a), perm);
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let back: BackwardFn<F> = Box::new(move |g, _, _| vec![permute_tensor(g, &inverse)]);
        self.push(value, vec![a], Some(back))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rank(), vb.rank());
        let ra = va.shape().to_vec();
        let rb = vb.shape().to_vec();
        assert_eq!(&ra[..ra.len() - 1], &rb[..rb.len() - 1], "concat leading dims differ");
        let (da, db) = (ra[ra.len() - 1], rb[rb.len() - 1]);
        let lead: usize = ra[..ra.len() - 1].iter().product();
        let mut out_shape = ra.clone();
        *out_shape.last_mut().unwrap() = da + db;
        let mut data = Vec::with_capacity(lead * (da + db));
        for i in 0..lead {
            data.extend_from_slice(&va.data()[i * da..(i + 1) * da]);
            data.extend_from_slice(&vb.data()[i * db..(i + 1) * db]);
        }
        let value = Tensor::new(out_shape, data);
        let (sa, sb) = (ra, rb);
        let back: BackwardFn<F> = Box::new(move |g, _, _| {
            let mut ga = Tensor::zeros(sa.clone());
            let mut gb = Tensor::zeros(sb.clone());
            for i in 0..lead {
                let grow = &g.data()[i * (da + db)..(i + 1) * (da + db)];
                ga.data_mut()[i * da..(i + 1) * da].copy_from_slice(&grow[..da]);
                gb.data_mut()[i * db..(i + 1) * db].copy_from_slice(&grow[da..]);
            }
            vec![ga, gb]
        });
        self.push(value, vec![a, b], Some(back))
    }

    // =====================================================================
    // linear algebra
    // =====================================================================

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let back: BackwardFn<F> = Box::new(|g, inputs, _| {
            let (a, b) = (inputs[0], inputs[1]);
            vec![g.matmul(&b.transposed2()), a.transposed2().matmul(g)]
        });
        self.push(value, vec![a, b], Some(back))
    }

    /// Broadcast bias add: `[..., D] + [D]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(bias);
        let d = *va.shape().last().unwrap();
        assert_eq!(vb.shape(), &[d], "bias dim mismatch");
        let lead = va.len() / d;
        let mut value = va.clone();
        for i in 0..lead {
            for j in 0..d {
                let idx = i * d + j;
                let v = value.data()[idx] + vb.data()[j];
                value.data_mut()[idx] = v;
            }
        }
        let back: BackwardFn<F> = Box::new(move |g, _, _| {
            let mut gb = Tensor::zeros([d]);
            for i in 0..lead {
                for j in 0..d {
                    let v = gb.data()[j] + g.data()[i * d + j];
                    gb.data_mut()[j] = v;
                }
            }
            vec![g.clone(), gb]
        });
        self.push(value, vec![a, bias], Some(back))
    }

    /// Batched matmul: `[..., M, K] x [..., K, N] -> [..., M, N]` with equal
    /// leading dims.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let value = bmm_tensors(self.value(a), self.value(b), false, false);
        let back: BackwardFn<F> = Box::new(|g, inputs, _| {
            let (a, b) = (inputs[0], inputs[1]);
            // da = g b^T, db = a^T g
            vec![bmm_tensors(g, b, false, true), bmm_tensors(a, g, true, false)]
        });
        self.push(value, vec![a, b], Some(back))
    }

    // =====================================================================
    // reductions and normalizations
    // =====================================================================

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let back: BackwardFn<F> = Box::new(|g, inputs, _| {
            let gv = g.item();
            vec![Tensor::full(inputs[0].shape().to_vec(), gv)]
        });
        self.push(value, vec![a], Some(back))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = *va.shape().last().unwrap();
        let lead = va.len() / d;
        let mut value = va.clone();
        for i in 0..lead {
            softmax_row(&mut value.data_mut()[i * d..(i + 1) * d]);
        }
        let back: BackwardFn<F> = Box::new(move |g, _, out| {
            let mut gi = g.clone();
            for i in 0..lead {
                let y = &out.data()[i * d..(i + 1) * d];
                let grow = &mut gi.data_mut()[i * d..(i + 1) * d];
                let s: F = grow.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                for (gv, &yv) in grow.iter_mut().zip(y) {
                    *gv = yv * (*gv - s);
                }
            }
            vec![gi]
        });
        self.push(value, vec![a], Some(back))
    }

    /// L2-normalizes each row of an `[N, D]` tensor. Rows must be nonzero;
    /// callers validate before building the graph.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, d) = (va.rows(), va.cols());
        let mut value = va.clone();
        for i in 0..n {
            let row = &mut value.data_mut()[i * d..(i + 1) * d];
            let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
            for x in row.iter_mut() {
                *x = *x / norm;
            }
        }
        let back: BackwardFn<F> = Box::new(move |g, inputs, out| {
            let x = inputs[0];
            let mut gi = g.clone();
            for i in 0..n {
                let xrow = &x.data()[i * d..(i + 1) * d];
                let yrow = &out.data()[i * d..(i + 1) * d];
                let norm = xrow.iter().map(|&v| v * v).sum::<F>().sqrt();
                let grow = &mut gi.data_mut()[i * d..(i + 1) * d];
                let gy: F = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv = (*gv - yv * gy) / norm;
                }
            }
            vec![gi]
        });
        self.push(value, vec![a], Some(back))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        assert_eq!(self.value(gamma).shape(), &[d]);
        assert_eq!(self.value(beta).shape(), &[d]);
        let lead = vx.len() / d;
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();

        let mut value = vx.clone();
        let mut xhat = vec![F::zero(); vx.len()];
        let mut inv_std = vec![F::zero(); lead];
        let dn = F::of(d as f64);
        for i in 0..lead {
            let row = &mut value.data_mut()[i * d..(i + 1) * d];
            let mean: F = row.iter().copied().sum::<F>() / dn;
            let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for (j, v) in row.iter_mut().enumerate() {
                let h = (*v - mean) * istd;
                xhat[i * d + j] = h;
                *v = h * gdata[j] + bdata[j];
            }
        }

        let back: BackwardFn<F> = Box::new(move |g, _, _| {
            let mut gx = g.clone();
            let mut ggamma = Tensor::zeros([d]);
            let mut gbeta = Tensor::zeros([d]);
            for i in 0..lead {
                let grow = &g.data()[i * d..(i + 1) * d];
                let hrow = &xhat[i * d..(i + 1) * d];
                for j in 0..d {
                    let v = ggamma.data()[j] + grow[j] * hrow[j];
                    ggamma.data_mut()[j] = v;
                    let v = gbeta.data()[j] + grow[j];
                    gbeta.data_mut()[j] = v;
                }
                // dxhat = g * gamma; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                let mut m1 = F::zero();
                let mut m2 = F::zero();
                for j in 0..d {
                    let dh = grow[j] * gdata[j];
                    m1 += dh;
                    m2 += dh * hrow[j];
                }
                m1 = m1 / dn;
                m2 = m2 / dn;
                let gxrow = &mut gx.data_mut()[i * d..(i + 1) * d];
                for j in 0..d {
                    let dh = grow[j] * gdata[j];
                    gxrow[j] = inv_std[i] * (dh - m1 - hrow[j] * m2);
                }
            }
            vec![gx, ggamma, gbeta]
        });
        self.push(value, vec![x, gamma, beta], Some(back))
    }

    /// Batch normalization in training mode over all leading axes of an
    /// `[..., D]` tensor. Returns the node plus the batch mean and (biased)
    /// variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> (Var, Tensor<F>, Tensor<F>) {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        let lead = vx.len() / d;
        assert!(lead > 0);
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();
        let n = F::of(lead as f64);

        let mut mean = vec![F::zero(); d];
        for i in 0..lead {
            for j in 0..d {
                mean[j] += vx.data()[i * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m = *m / n;
        }
        let mut var = vec![F::zero(); d];
        for i in 0..lead {
            for j in 0..d {
                let c = vx.data()[i * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v = *v / n;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();

        let mut value = vx.clone();
        let mut xhat = vec![F::zero(); vx.len()];
        for i in 0..lead {
            for j in 0..d {
                let h = (vx.data()[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                value.data_mut()[i * d + j] = h * gdata[j] + bdata[j];
            }
        }

        let mean_t = Tensor::new([d], mean);
        let var_t = Tensor::new([d], var.clone());
        let istd = inv_std;
        let back: BackwardFn<F> = Box::new(move |g, _, _| {
            let mut ggamma = Tensor::zeros([d]);
            let mut gbeta = Tensor::zeros([d]);
            let mut sum_dh = vec![F::zero(); d];
            let mut sum_dh_h = vec![F::zero(); d];
            for i in 0..lead {
                for j in 0..d {
                    let gv = g.data()[i * d + j];
                    let h = xhat[i * d + j];
                    let v = ggamma.data()[j] + gv * h;
                    ggamma.data_mut()[j] = v;
                    let v = gbeta.data()[j] + gv;
                    gbeta.data_mut()[j] = v;
                    let dh = gv * gdata[j];
                    sum_dh[j] += dh;
                    sum_dh_h[j] += dh * h;
                }
            }
            let mut gx = g.clone();
            for i in 0..lead {
                for j in 0..d {
                    let dh = g.data()[i * d + j] * gdata[j];
                    gx.data_mut()[i * d + j] =
                        istd[j] * (dh - sum_dh[j] / n - xhat[i * d + j] * sum_dh_h[j] / n);
                }
            }
            vec![gx, ggamma, gbeta]
        });
        let var_node = self.push(value, vec![x, gamma, beta], Some(back));
        (var_node, mean_t, var_t)
    }

    /// Batch normalization in eval mode: running statistics are constants.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<F>,
        running_var: &Tensor<F>,
        eps: F,
    ) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        let lead = vx.len() / d;
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();
        let inv_std: Vec<F> =
            running_var.data().iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.data().to_vec();

        let mut value = vx.clone();
        let mut xhat = vec![F::zero(); vx.len()];
        for i in 0..lead {
            for j in 0..d {
                let h = (vx.data()[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                value.data_mut()[i * d + j] = h * gdata[j] + bdata[j];
            }
        }
        let back: BackwardFn<F> = Box::new(move |g, _, _| {
            let mut gx = g.clone();
            let mut ggamma = Tensor::zeros([d]);
            let mut gbeta = Tensor::zeros([d]);
            for i in 0..lead {
                for j in 0..d {
                    let gv = g.data()[i * d + j];
                    gx.data_mut()[i * d + j] = gv * gdata[j] * inv_std[j];
                    let v = ggamma.data()[j] + gv * xhat[i * d + j];
                    ggamma.data_mut()[j] = v;
                    let v = gbeta.data()[j] + gv;
                    gbeta.data_mut()[j] = v;
                }
            }
            vec![gx, ggamma, gbeta]
        });
        self.push(value, vec![x, gamma, beta], Some(back))
    }

    /// Gated linear unit over the last axis: splits `[..., 2D]` into halves
    /// `(a, b)` and returns `a * sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let two_d = *vx.shape().last().unwrap();
        assert_eq!(two_d % 2, 0, "glu needs an even channel count");
        let d = two_d / 2;
        let lead = vx.len() / two_d;
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = d;
        let mut data = Vec::with_capacity(lead * d);
        for i in 0..lead {
            let row = &vx.data()[i * two_d..(i + 1) * two_d];
            for j in 0..d {
                data.push(row[j] * sigmoid_scalar(row[d + j]));
            }
        }
        let value = Tensor::new(out_shape, data);
        let back: BackwardFn<F> = Box::new(move |g, inputs, _| {
            let x = inputs[0];
            let mut gx = Tensor::zeros(x.shape().to_vec());
            for i in 0..lead {
                let row = &x.data()[i * two_d..(i + 1) * two_d];
                let grow = &g.data()[i * d..(i + 1) * d];
                let gxrow = &mut gx.data_mut()[i * two_d..(i + 1) * two_d];
                for j in 0..d {
                    let s = sigmoid_scalar(row[d + j]);
                    gxrow[j] = grow[j] * s;
                    gxrow[d + j] = grow[j] * row[j] * s * (F::one() - s);
                }
            }
            vec![gx]
        });
        self.push(value, vec![x], Some(back))
    }

    /// Depthwise 1-D convolution along the time axis of `[B, T, D]` with an
    /// odd kernel `[D, K]` and zero "same" padding.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Var {
        let vx = self.value(x);
        let vk = self.value(kernel);
        assert_eq!(vx.rank(), 3);
        let (b, t, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(vk.rank(), 2);
        assert_eq!(vk.shape()[0], d, "kernel channel count");
        let k = vk.shape()[1];
        assert_eq!(k % 2, 1, "kernel size must be odd");
        let half = k / 2;

        let mut out = Tensor::zeros([b, t, d]);
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..k {
                    let src = ti as isize + j as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    let xrow = &vx.data()[(bi * t + src) * d..(bi * t + src + 1) * d];
                    let orow = &mut out.data_mut()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for di in 0..d {
                        orow[di] += vk.data()[di * k + j] * xrow[di];
                    }
                }
            }
        }
        let back: BackwardFn<F> = Box::new(move |g, inputs, _| {
            let (x, kern) = (inputs[0], inputs[1]);
            let mut gx = Tensor::zeros([b, t, d]);
            let mut gk = Tensor::zeros([d, k]);
            for bi in 0..b {
                for ti in 0..t {
                    let grow = &g.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for j in 0..k {
                        let src = ti as isize + j as isize - half as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        let xrow = &x.data()[(bi * t + src) * d..(bi * t + src + 1) * d];
                        let gxrow = &mut gx.data_mut()[(bi * t + src) * d..(bi * t + src + 1) * d];
                        for di in 0..d {
                            gxrow[di] += grow[di] * kern.data()[di * k + j];
                            let v = gk.data()[di * k + j] + grow[di] * xrow[di];
                            gk.data_mut()[di * k + j] = v;
                        }
                    }
                }
            }
            vec![gx, gk]
        });
        self.push(out, vec![x, kernel], Some(back))
    }

    // =====================================================================
    // losses
    // =====================================================================

    /// Summed cross-entropy over rows of `[N, K]` logits; rows with
    /// `mask[i] == false` contribute nothing (their target is ignored).
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Var {
        let vl = self.value(logits);
        let (n, k) = (vl.rows(), vl.cols());
        assert_eq!(targets.len(), n);
        assert_eq!(mask.len(), n);
        let mut total = F::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = vl.row(i);
            debug_assert!(targets[i] < k);
            total += log_sum_exp(row) - row[targets[i]];
        }
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        let back: BackwardFn<F> = Box::new(move |g, inputs, _| {
            let logits = inputs[0];
            let gv = g.item();
            let mut gl = Tensor::zeros([n, k]);
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                let mut probs = logits.row(i).to_vec();
                softmax_row(&mut probs);
                let grow = gl.row_mut(i);
                for (j, p) in probs.iter().enumerate() {
                    grow[j] = gv * *p;
                }
                grow[targets[i]] = grow[targets[i]] - gv;
            }
            vec![gl]
        });
        self.push(Tensor::scalar(total), vec![logits], Some(back))
    }

    /// Summed binary cross-entropy on logits of shape `[N]`:
    /// `sum_i softplus(z_i) - y_i z_i`, evaluated stably.
    pub fn bce_with_logits_sum(&mut self, logits: Var, labels: &[bool]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.len(), labels.len());
        let mut total = F::zero();
        for (&z, &y) in vl.data().iter().zip(labels) {
            total += softplus(z) - if y { z } else { F::zero() };
        }
        let labels = labels.to_vec();
        let back: BackwardFn<F> = Box::new(move |g, inputs, _| {
            let gv = g.item();
            let mut gl = inputs[0].clone();
            for (zs, &y) in gl.data_mut().iter_mut().zip(&labels) {
                let target = if y { F::one() } else { F::zero() };
                *zs = gv * (sigmoid_scalar(*zs) - target);
            }
            vec![gl]
        });
        self.push(Tensor::scalar(total), vec![logits], Some(back))
    }
}

// =========================================================================
// shared scalar helpers
// =========================================================================

pub(crate) fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_row<F: Scalar>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn permute_tensor<F: Scalar>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = Tensor::zeros(out_shape.clone());
    let mut idx = vec![0usize; rank];
    for flat in 0..t.len() {
        // idx is the multi-index in the *output* tensor
        let mut rem = flat;
        for i in 0..rank {
            let stride: usize = out_shape[i + 1..].iter().product();
            idx[i] = rem / stride;
            rem %= stride;
        }
        let mut src = 0usize;
        for i in 0..rank {
            src += idx[i] * in_strides[perm[i]];
        }
        out.data_mut()[flat] = t.data()[src];
    }
    out
}

/// Batched matmul over equal leading dims with optional transposes of the
/// trailing two axes.
fn bmm_tensors<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, ta: bool, tb: bool) -> Tensor<F> {
    let ra = a.rank();
    let rb = b.rank();
    assert!(ra >= 2 && rb >= 2);
    assert_eq!(a.shape()[..ra - 2], b.shape()[..rb - 2], "bmm leading dims differ");
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let (am, ak) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (bk, bn) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    let (m, k) = if ta { (ak, am) } else { (am, ak) };
    let (k2, n) = if tb { (bn, bk) } else { (bk, bn) };
    assert_eq!(k, k2, "bmm inner dims");

    let mut out_shape = a.shape()[..ra - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = Tensor::zeros(out_shape);
    let (asz, bsz, osz) = (am * ak, bk * bn, m * n);
    for g in 0..batch {
        let ab = &a.data()[g * asz..(g + 1) * asz];
        let bb = &b.data()[g * bsz..(g + 1) * bsz];
        let ob = &mut out.data_mut()[g * osz..(g + 1) * osz];
        for i in 0..m {
            for kk in 0..k {
                let av = if ta { ab[kk * ak + i] } else { ab[i * ak + kk] };
                for j in 0..n {
                    let bv = if tb { bb[j * bn + kk] } else { bb[kk * bn + j] };
                    ob[i * n + j] += av * bv;
                }
            }
        }
    }
    out
}
