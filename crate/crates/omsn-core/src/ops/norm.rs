//! Batch normalization over NCHW feature maps and (B, F) feature vectors.
//!
//! Training mode normalizes with biased batch statistics and folds them into
//! the running buffers by momentum; eval mode normalizes with the running
//! buffers alone. The per-channel reduction count is batch x height x width
//! (just batch for 2-D inputs) and must exceed one in training mode.

use crate::element::Element;
use crate::graph::{Backward, Graph, VarId};
use crate::tensor::{shape_err, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update running buffers.
    Training,
    /// Normalize with the stored running statistics.
    Eval,
}

fn channel_layout<T: Element>(x: &Tensor<T>) -> Result<(usize, usize, usize), TensorError> {
    match x.rank() {
        4 => Ok((x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3])),
        2 => Ok((x.shape()[0], x.shape()[1], 1)),
        _ => Err(shape_err(
            "batch_norm",
            "a 4-D (B,C,H,W) or 2-D (B,F) tensor",
            format!("{:?}", x.shape()),
        )),
    }
}

struct BatchNormBackward<T: Element> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

impl<T: Element> Backward<T> for BatchNormBackward<T> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = parents[0];
        let gamma = parents[1];
        let (b, c, plane) = channel_layout(x).expect("validated at forward");
        let count = T::from_usize(b * plane);
        let dy = grad_out.data();
        let xs = x.data();

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let m = self.mean[ci];
                let istd = self.inv_std[ci];
                for i in 0..plane {
                    let idx = base + i;
                    let xhat = (xs[idx] - m) * istd;
                    dbeta[ci] += dy[idx];
                    sum_dy_xhat[ci] += dy[idx] * xhat;
                }
                let _ = &mut dgamma;
            }
        }
        dgamma.copy_from_slice(&sum_dy_xhat);

        let gx = needs[0].then(|| {
            let mut g = Tensor::zeros(x.shape());
            if self.training {
                // dx = istd * gamma * (dy - mean(dy) - xhat * mean(dy * xhat))
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let m = self.mean[ci];
                        let istd = self.inv_std[ci];
                        let ga = gamma.data()[ci];
                        let mean_dy = dbeta[ci] / count;
                        let mean_dy_xhat = sum_dy_xhat[ci] / count;
                        for i in 0..plane {
                            let idx = base + i;
                            let xhat = (xs[idx] - m) * istd;
                            g.data_mut()[idx] =
                                ga * istd * (dy[idx] - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                }
            } else {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let scale = gamma.data()[ci] * self.inv_std[ci];
                        for i in 0..plane {
                            g.data_mut()[idx_of(base, i)] = dy[idx_of(base, i)] * scale;
                        }
                    }
                }
            }
            g
        });
        let ggamma = needs[1].then(|| {
            Tensor::new(gamma.shape().to_vec(), dgamma.clone()).expect("per-channel shape")
        });
        let gbeta = needs[2].then(|| {
            Tensor::new(gamma.shape().to_vec(), dbeta.clone()).expect("per-channel shape")
        });
        vec![gx, ggamma, gbeta]
    }
}

#[inline]
fn idx_of(base: usize, i: usize) -> usize {
    base + i
}

impl<T: Element> Graph<T> {
    /// Batch normalization. `gamma`, `beta`, `running_mean`, `running_var`
    /// are per-channel vectors; the running buffers are plain (non-gradient)
    /// nodes mutated in place during training.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: VarId,
        running_var: VarId,
        eps: T,
        momentum: T,
        mode: BatchNormMode,
    ) -> Result<VarId, TensorError> {
        let (b, c, plane) = channel_layout(self.value(x))?;
        for (name, id) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if self.value(id).len() != c {
                return Err(shape_err(
                    format!("batch_norm {name}"),
                    format!("{c} per-channel values"),
                    format!("{}", self.value(id).len()),
                ));
            }
        }
        let count = b * plane;
        let training = mode == BatchNormMode::Training;
        if training && count == 1 {
            return Err(TensorError::InvalidArgument(
                "batch_norm training mode needs batch*spatial > 1 (variance undefined)".into(),
            ));
        }

        let (mean, var) = if training {
            let xs = self.value(x).data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        mean[ci] += xs[base + i];
                    }
                }
            }
            let n = T::from_usize(count);
            for m in &mut mean {
                *m /= n;
            }
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        let d = xs[base + i] - mean[ci];
                        var[ci] += d * d;
                    }
                }
            }
            for v in &mut var {
                *v /= n;
            }
            // Fold into the running buffers.
            let one_minus = T::one() - momentum;
            let mut rm = self.value(running_mean).clone();
            let mut rv = self.value(running_var).clone();
            for ci in 0..c {
                rm.data_mut()[ci] = one_minus * rm.data()[ci] + momentum * mean[ci];
                rv.data_mut()[ci] = one_minus * rv.data()[ci] + momentum * var[ci];
            }
            self.set_value(running_mean, rm);
            self.set_value(running_var, rv);
            (mean, var)
        } else {
            (
                self.value(running_mean).data().to_vec(),
                self.value(running_var).data().to_vec(),
            )
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(self.value(x).shape());
        {
            let xs = self.value(x).data();
            let ga = self.value(gamma).data();
            let be = self.value(beta).data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let m = mean[ci];
                    let istd = inv_std[ci];
                    for i in 0..plane {
                        out.data_mut()[base + i] = ga[ci] * ((xs[base + i] - m) * istd) + be[ci];
                    }
                }
            }
        }
        Ok(self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(BatchNormBackward { mean, inv_std, training }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn_setup(c: usize) -> (Graph<f32>, VarId, VarId, VarId, VarId) {
        let mut g = Graph::new();
        let gamma = g.leaf(Tensor::full(&[c], 1.0), true);
        let beta = g.leaf(Tensor::zeros(&[c]), true);
        let rm = g.constant(Tensor::zeros(&[c]));
        let rv = g.constant(Tensor::full(&[c], 1.0));
        (g, gamma, beta, rm, rv)
    }

    #[test]
    fn training_mode_normalizes_per_channel() {
        let (mut g, gamma, beta, rm, rv) = bn_setup(2);
        let x = g.leaf(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f32).sin() * 3.0 + 1.0), true);
        let y = g
            .batch_norm(x, gamma, beta, rm, rv, 1e-5, 0.1, BatchNormMode::Training)
            .unwrap();
        let v = g.value(y);
        let plane = 9;
        for ci in 0..2 {
            let mut mean = 0.0f64;
            let mut var = 0.0f64;
            let mut vals = Vec::new();
            for bi in 0..2 {
                let base = (bi * 2 + ci) * plane;
                vals.extend(v.data()[base..base + plane].iter().map(|&v| v as f64));
            }
            for &v in &vals {
                mean += v;
            }
            mean /= vals.len() as f64;
            for &v in &vals {
                var += (v - mean) * (v - mean);
            }
            var /= vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ci} var {var}");
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let (mut g, gamma, beta, rm, rv) = bn_setup(1);
        let x = g.leaf(Tensor::full(&[1, 1, 4, 4], 5.0), true);
        let y = g
            .batch_norm(x, gamma, beta, rm, rv, 1e-5, 0.1, BatchNormMode::Training)
            .unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn eval_identity_statistics_pass_input_through() {
        let (mut g, gamma, beta, rm, rv) = bn_setup(3);
        let x = g.leaf(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f32 * 0.1), true);
        let y = g
            .batch_norm(x, gamma, beta, rm, rv, 1e-9, 0.1, BatchNormMode::Eval)
            .unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn training_rejects_singleton_reduction() {
        let (mut g, gamma, beta, rm, rv) = bn_setup(2);
        let x = g.leaf(Tensor::zeros(&[1, 2, 1, 1]), true);
        let r = g.batch_norm(x, gamma, beta, rm, rv, 1e-5, 0.1, BatchNormMode::Training);
        assert!(r.is_err());
    }

    #[test]
    fn running_stats_update_by_momentum() {
        let (mut g, gamma, beta, rm, rv) = bn_setup(1);
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 10.0), true);
        // constant channel: batch mean 10, batch var 0
        g.batch_norm(x, gamma, beta, rm, rv, 1e-5, 0.25, BatchNormMode::Training)
            .unwrap();
        assert!((g.value(rm).data()[0] - 2.5).abs() < 1e-6);
        assert!((g.value(rv).data()[0] - 0.75).abs() < 1e-6);
    }
}
