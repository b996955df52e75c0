//! Pointwise activations and axis softmax.

use crate::element::Element;
use crate::graph::{Backward, Graph, VarId};
use crate::tensor::{Tensor, TensorError};

struct ReluBackward;

impl<T: Element> Backward<T> for ReluBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        // Subgradient 0 at the kink.
        let mut g = grad_out.clone();
        for (gi, &xi) in g.data_mut().iter_mut().zip(parents[0].data()) {
            if xi <= T::zero() {
                *gi = T::zero();
            }
        }
        vec![Some(g)]
    }
}

struct SigmoidBackward<T: Element> {
    output: Tensor<T>,
}

impl<T: Element> Backward<T> for SigmoidBackward<T> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut g = grad_out.clone();
        for (gi, &yi) in g.data_mut().iter_mut().zip(self.output.data()) {
            *gi = *gi * yi * (T::one() - yi);
        }
        vec![Some(g)]
    }
}

struct SoftmaxBackward<T: Element> {
    output: Tensor<T>,
    axis: usize,
}

impl<T: Element> Backward<T> for SoftmaxBackward<T> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        // dx = y * (dy - sum(dy * y)) along the softmax axis.
        let shape = self.output.shape();
        let axis_len = shape[self.axis];
        let inner: usize = shape[self.axis + 1..].iter().product();
        let outer: usize = shape[..self.axis].iter().product();
        let mut g = Tensor::zeros(shape);
        let y = self.output.data();
        let dy = grad_out.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut dot = T::zero();
                for a in 0..axis_len {
                    let idx = base + a * inner;
                    dot += dy[idx] * y[idx];
                }
                for a in 0..axis_len {
                    let idx = base + a * inner;
                    g.data_mut()[idx] = y[idx] * (dy[idx] - dot);
                }
            }
        }
        vec![Some(g)]
    }
}

/// Numerically stable softmax along `axis`, as a plain function (shared by
/// the graph op and the fused loss kernels).
pub(crate) fn softmax_forward<T: Element>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = Tensor::zeros(shape);
    let xs = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = xs[base];
            for a in 1..axis_len {
                let v = xs[base + a * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for a in 0..axis_len {
                let idx = base + a * inner;
                let e = (xs[idx] - max).exp();
                out.data_mut()[idx] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out.data_mut()[base + a * inner] /= sum;
            }
        }
    }
    out
}

impl<T: Element> Graph<T> {
    pub fn relu(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(out, vec![x], Box::new(ReluBackward))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let saved = if self.any_requires_grad(&[x]) {
            out.clone()
        } else {
            Tensor::zeros(&[0])
        };
        self.push_op(out, vec![x], Box::new(SigmoidBackward { output: saved }))
    }

    /// Softmax along `axis`; output sums to one along that axis.
    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId, TensorError> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::InvalidArgument(format!(
                "softmax axis {axis} out of range for rank {}",
                v.rank()
            )));
        }
        let out = softmax_forward(v, axis);
        let saved = if self.any_requires_grad(&[x]) {
            out.clone()
        } else {
            Tensor::zeros(&[0])
        };
        Ok(self.push_op(out, vec![x], Box::new(SoftmaxBackward { output: saved, axis })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert!((g.value(y).item() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 5], 2.5));
        let y = g.softmax(x, 1).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_two_logits_closed_form() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3f32.ln()]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-6);
        assert!((v[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits: Vec<f32> = vec![0.3, -1.2, 2.0, 0.7];
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new(vec![1, 4], logits.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![1, 4], logits.iter().map(|v| v + 100.0).collect()).unwrap());
        let ya = g.softmax(a, 1).unwrap();
        let yb = g.softmax(b, 1).unwrap();
        let sum: f32 = g.value(ya).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for (x, y) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap(), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5, 2.0]);
        let m = g.mean_all(y);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.25, 0.25]);
    }
}
