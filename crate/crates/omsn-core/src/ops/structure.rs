//! Structural and elementwise ops: addition, affine combination, channel
//! concatenation/slicing, reshape, per-channel scaling, reductions.

use crate::element::Element;
use crate::graph::{Backward, Graph, VarId};
use crate::tensor::{shape_err, Tensor, TensorError};

struct AddBackward;

impl<T: Element> Backward<T> for AddBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        needs.iter().map(|&n| n.then(|| grad_out.clone())).collect()
    }
}

struct AxpyBackward<T> {
    alpha: T,
    beta: T,
}

impl<T: Element> Backward<T> for AxpyBackward<T> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let scale = |c: T| grad_out.map(|g| g * c);
        vec![
            needs[0].then(|| scale(self.alpha)),
            needs[1].then(|| scale(self.beta)),
        ]
    }
}

struct ScaleBackward<T> {
    factor: T,
}

impl<T: Element> Backward<T> for ScaleBackward<T> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad_out.map(|g| g * self.factor))]
    }
}

struct ConcatBackward {
    channel_offsets: Vec<usize>,
}

impl<T: Element> Backward<T> for ConcatBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (n, c_total, h, w) = grad_out.dims4("concat backward").expect("concat output is 4-D");
        let plane = h * w;
        parents
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if !needs[i] {
                    return None;
                }
                let ci = p.shape()[1];
                let off = self.channel_offsets[i];
                let mut g = Tensor::zeros(p.shape());
                for b in 0..n {
                    for c in 0..ci {
                        let src = ((b * c_total + off + c) * plane)..((b * c_total + off + c + 1) * plane);
                        let dst = ((b * ci + c) * plane)..((b * ci + c + 1) * plane);
                        g.data_mut()[dst].copy_from_slice(&grad_out.data()[src]);
                    }
                }
                Some(g)
            })
            .collect()
    }
}

struct NarrowBackward {
    axis: usize,
    start: usize,
}

impl<T: Element> Backward<T> for NarrowBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let parent_shape = parents[0].shape();
        let mut g = Tensor::zeros(parent_shape);
        let out_shape = grad_out.shape();
        let outer: usize = parent_shape[..self.axis].iter().product();
        let inner: usize = parent_shape[self.axis + 1..].iter().product();
        let parent_axis = parent_shape[self.axis];
        let len = out_shape[self.axis];
        for o in 0..outer {
            for a in 0..len {
                let dst = (o * parent_axis + self.start + a) * inner;
                let src = (o * len + a) * inner;
                g.data_mut()[dst..dst + inner].copy_from_slice(&grad_out.data()[src..src + inner]);
            }
        }
        vec![Some(g)]
    }
}

struct ReshapeBackward {
    input_shape: Vec<usize>,
}

impl<T: Element> Backward<T> for ReshapeBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad_out
            .clone()
            .reshaped(self.input_shape.clone())
            .expect("reshape backward: element count is unchanged");
        vec![Some(g)]
    }
}

struct ScaleChannelsBackward;

impl<T: Element> Backward<T> for ScaleChannelsBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = parents[0];
        let w = parents[1];
        let (n, c, h, wd) = x.dims4("scale_channels backward").expect("input is 4-D");
        let plane = h * wd;
        let gx = needs[0].then(|| {
            let mut g = Tensor::zeros(x.shape());
            for b in 0..n {
                for ch in 0..c {
                    let s = w.data()[b * c + ch];
                    let base = (b * c + ch) * plane;
                    for i in 0..plane {
                        g.data_mut()[base + i] = grad_out.data()[base + i] * s;
                    }
                }
            }
            g
        });
        let gw = needs[1].then(|| {
            let mut g = Tensor::zeros(w.shape());
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let mut acc = T::zero();
                    for i in 0..plane {
                        acc += grad_out.data()[base + i] * x.data()[base + i];
                    }
                    g.data_mut()[b * c + ch] = acc;
                }
            }
            g
        });
        vec![gx, gw]
    }
}

struct MeanBackward;

impl<T: Element> Backward<T> for MeanBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = parents[0];
        let scale = grad_out.item() / T::from_usize(x.len());
        vec![Some(Tensor::full(x.shape(), scale))]
    }
}

struct WeightedSumBackward<T> {
    weights: Vec<T>,
}

impl<T: Element> Backward<T> for WeightedSumBackward<T> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad_out.item();
        let mut out = Tensor::zeros(parents[0].shape());
        for (o, &w) in out.data_mut().iter_mut().zip(&self.weights) {
            *o = g * w;
        }
        vec![Some(out)]
    }
}

impl<T: Element> Graph<T> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let mut out = va.clone();
        for (o, &r) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += r;
        }
        Ok(self.push_op(out, vec![a, b], Box::new(AddBackward)))
    }

    /// `alpha * a + beta * b`, elementwise over same-shape tensors.
    pub fn axpy(&mut self, alpha: T, a: VarId, beta: T, b: VarId) -> Result<VarId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "axpy",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("axpy preserves shape");
        Ok(self.push_op(out, vec![a, b], Box::new(AxpyBackward { alpha, beta })))
    }

    pub fn scale(&mut self, x: VarId, factor: T) -> VarId {
        let out = self.value(x).map(|v| v * factor);
        self.push_op(out, vec![x], Box::new(ScaleBackward { factor }))
    }

    /// Concatenate 4-D tensors along the channel axis. All inputs must share
    /// batch and spatial extents; channel counts add in argument order.
    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArgument(
                "concat_channels needs at least one input".into(),
            ));
        }
        let (n0, _, h0, w0) = self.value(xs[0]).dims4("concat_channels")?;
        let mut channel_offsets = Vec::with_capacity(xs.len());
        let mut c_total = 0;
        for &x in xs {
            let (n, c, h, w) = self.value(x).dims4("concat_channels")?;
            if (n, h, w) != (n0, h0, w0) {
                return Err(shape_err(
                    "concat_channels",
                    format!("batch/spatial ({n0}, _, {h0}, {w0})"),
                    format!("({n}, {c}, {h}, {w})"),
                ));
            }
            channel_offsets.push(c_total);
            c_total += c;
        }
        let plane = h0 * w0;
        let mut out = Tensor::zeros(&[n0, c_total, h0, w0]);
        for (i, &x) in xs.iter().enumerate() {
            let v = self.value(x);
            let ci = v.shape()[1];
            let off = channel_offsets[i];
            for b in 0..n0 {
                let src = (b * ci * plane)..((b + 1) * ci * plane);
                let dst_start = (b * c_total + off) * plane;
                out.data_mut()[dst_start..dst_start + ci * plane].copy_from_slice(&v.data()[src]);
            }
        }
        Ok(self.push_op(out, xs.to_vec(), Box::new(ConcatBackward { channel_offsets })))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(
        &mut self,
        x: VarId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<VarId, TensorError> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::InvalidArgument(format!(
                "narrow axis {axis} out of range for rank {}",
                v.rank()
            )));
        }
        let extent = v.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::InvalidArgument(format!(
                "narrow [{start}, {}) exceeds axis extent {extent}",
                start + len
            )));
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let mut out = Tensor::zeros(&shape);
        for o in 0..outer {
            let src = (o * extent + start) * inner;
            let dst = o * len * inner;
            out.data_mut()[dst..dst + len * inner]
                .copy_from_slice(&v.data()[src..src + len * inner]);
        }
        Ok(self.push_op(out, vec![x], Box::new(NarrowBackward { axis, start })))
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId, TensorError> {
        let input_shape = self.value(x).shape().to_vec();
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(out, vec![x], Box::new(ReshapeBackward { input_shape })))
    }

    /// Multiply each (batch, channel) plane of `x: (B, C, H, W)` by the
    /// matching weight in `w: (B, C)`.
    pub fn scale_channels(&mut self, x: VarId, w: VarId) -> Result<VarId, TensorError> {
        let (n, c, h, wd) = self.value(x).dims4("scale_channels")?;
        let (wn, wc) = self.value(w).dims2("scale_channels weights")?;
        if (wn, wc) != (n, c) {
            return Err(shape_err(
                "scale_channels",
                format!("weights ({n}, {c})"),
                format!("({wn}, {wc})"),
            ));
        }
        let plane = h * wd;
        let mut out = self.value(x).clone();
        for b in 0..n {
            for ch in 0..c {
                let s = self.value(w).data()[b * c + ch];
                let base = (b * c + ch) * plane;
                for i in 0..plane {
                    out.data_mut()[base + i] *= s;
                }
            }
        }
        Ok(self.push_op(out, vec![x, w], Box::new(ScaleChannelsBackward)))
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let v = self.value(x);
        let mut acc = T::zero();
        for &e in v.data() {
            acc += e;
        }
        let out = Tensor::scalar(acc / T::from_usize(v.len()));
        self.push_op(out, vec![x], Box::new(MeanBackward))
    }

    /// Fixed-weight scalar reduction `sum_i w_i * x_i`, as a `[1]` tensor.
    pub fn weighted_sum(&mut self, x: VarId, weights: &[T]) -> Result<VarId, TensorError> {
        let v = self.value(x);
        if weights.len() != v.len() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights", v.len()),
                format!("{}", weights.len()),
            ));
        }
        let mut acc = T::zero();
        for (&e, &w) in v.data().iter().zip(weights) {
            acc += e * w;
        }
        let out = Tensor::scalar(acc);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(WeightedSumBackward {
                weights: weights.to_vec(),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with(shape: &[usize], data: Vec<f32>) -> (Graph<f32>, VarId) {
        let mut g = Graph::new();
        let id = g.leaf(Tensor::new(shape.to_vec(), data).unwrap(), true);
        (g, id)
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let (mut g, a) = graph_with(&[2, 2], vec![1.0; 4]);
        let b = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn concat_adds_channels_in_order() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32));
        let b = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| 100.0 + i as f32));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 2, 2]);
        assert_eq!(g.value(c).data()[0], 0.0);
        assert_eq!(g.value(c).data()[8], 100.0);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 2, 4, 5]));
        assert!(g.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn concat_single_input_is_identity() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32));
        let c = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn concat_then_narrow_roundtrips() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 3, 3], |i| i as f32));
        let b = g.constant(Tensor::from_fn(&[2, 4, 3, 3], |i| -(i as f32)));
        let cat = g.concat_channels(&[a, b]).unwrap();
        let ra = g.narrow(cat, 1, 0, 2).unwrap();
        let rb = g.narrow(cat, 1, 2, 4).unwrap();
        assert_eq!(g.value(ra), g.value(a));
        assert_eq!(g.value(rb), g.value(b));
    }

    #[test]
    fn mean_backward_is_uniform() {
        let (mut g, x) = graph_with(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = g.mean_all(x);
        assert!((g.value(m).item() - 3.5).abs() < 1e-6);
        g.backward(m).unwrap();
        for &v in g.grad(x).unwrap().data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-7);
        }
    }

    #[test]
    fn scale_channels_identity_with_unit_weights() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32 * 0.25), true);
        let w = g.leaf(Tensor::full(&[2, 3], 1.0), true);
        let y = g.scale_channels(x, w).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
