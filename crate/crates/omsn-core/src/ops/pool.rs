//! Spatial pooling: windowed max/average and global average.
//!
//! Ceil mode rounds the output extent up, letting windows hang off the
//! bottom/right edge; max treats the missing pixels as minus infinity and
//! average divides by the number of pixels actually covered. This is what
//! keeps the odd-extent scale ladder (e.g. 19 -> 10) exact.

use crate::element::Element;
use crate::graph::{Backward, Graph, VarId};
use crate::tensor::{Tensor, TensorError};

/// Square pooling window parameters.
#[derive(Clone, Copy, Debug)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub ceil_mode: bool,
}

/// Output extent of pooling one axis. In ceil mode the last window may be
/// partial but must still start inside the input.
pub fn pool_output_extent(extent: usize, spec: PoolSpec) -> Result<usize, TensorError> {
    if spec.kernel == 0 || spec.stride == 0 {
        return Err(TensorError::InvalidArgument(
            "pooling kernel and stride must be positive".into(),
        ));
    }
    if !spec.ceil_mode && spec.kernel > extent {
        return Err(TensorError::InvalidArgument(format!(
            "pooling kernel {} larger than input extent {}",
            spec.kernel, extent
        )));
    }
    let diff = extent as isize - spec.kernel as isize;
    let s = spec.stride as isize;
    let mut out = if spec.ceil_mode {
        // ceil(diff / s) + 1 for possibly negative diff
        (diff + s - 1).div_euclid(s) + 1
    } else {
        diff.div_euclid(s) + 1
    };
    while out > 1 && (out - 1) * s >= extent as isize {
        out -= 1;
    }
    if out < 1 {
        return Err(TensorError::InvalidArgument(format!(
            "pooling produces empty output for extent {} with {:?}",
            extent, spec
        )));
    }
    Ok(out as usize)
}

struct MaxPoolBackward {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl<T: Element> Backward<T> for MaxPoolBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut g = Tensor::zeros(&self.input_shape);
        for (i, &src) in self.argmax.iter().enumerate() {
            g.data_mut()[src] += grad_out.data()[i];
        }
        vec![Some(g)]
    }
}

struct AvgPoolBackward {
    input_shape: Vec<usize>,
    spec: PoolSpec,
}

impl<T: Element> Backward<T> for AvgPoolBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (h, w) = (self.input_shape[2], self.input_shape[3]);
        let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
        let nc = self.input_shape[0] * self.input_shape[1];
        let mut g = Tensor::zeros(&self.input_shape);
        for bc in 0..nc {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * self.spec.stride;
                    let x0 = ox * self.spec.stride;
                    let y1 = (y0 + self.spec.kernel).min(h);
                    let x1 = (x0 + self.spec.kernel).min(w);
                    let count = T::from_usize((y1 - y0) * (x1 - x0));
                    let share = grad_out.data()[out_base + oy * ow + ox] / count;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            g.data_mut()[in_base + y * w + x] += share;
                        }
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

struct GlobalAvgPoolBackward {
    input_shape: Vec<usize>,
}

impl<T: Element> Backward<T> for GlobalAvgPoolBackward {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let plane = self.input_shape[2] * self.input_shape[3];
        let scale = T::one() / T::from_usize(plane);
        let mut g = Tensor::zeros(&self.input_shape);
        for (bc, &go) in grad_out.data().iter().enumerate() {
            let share = go * scale;
            for v in &mut g.data_mut()[bc * plane..(bc + 1) * plane] {
                *v = share;
            }
        }
        vec![Some(g)]
    }
}

impl<T: Element> Graph<T> {
    /// Windowed maximum over each channel plane.
    pub fn max_pool(&mut self, x: VarId, spec: PoolSpec) -> Result<VarId, TensorError> {
        let (n, c, h, w) = self.value(x).dims4("max_pool")?;
        let oh = pool_output_extent(h, spec)?;
        let ow = pool_output_extent(w, spec)?;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let xs = self.value(x).data();
        for bc in 0..n * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * spec.stride;
                    let x0 = ox * spec.stride;
                    let y1 = (y0 + spec.kernel).min(h);
                    let x1 = (x0 + spec.kernel).min(w);
                    let mut best = xs[in_base + y0 * w + x0];
                    let mut best_idx = in_base + y0 * w + x0;
                    for y in y0..y1 {
                        for xk in x0..x1 {
                            let idx = in_base + y * w + xk;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.data_mut()[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx;
                }
            }
        }
        let input_shape = vec![n, c, h, w];
        Ok(self.push_op(out, vec![x], Box::new(MaxPoolBackward { input_shape, argmax })))
    }

    /// Windowed average; partial edge windows average over covered pixels.
    pub fn avg_pool(&mut self, x: VarId, spec: PoolSpec) -> Result<VarId, TensorError> {
        let (n, c, h, w) = self.value(x).dims4("avg_pool")?;
        let oh = pool_output_extent(h, spec)?;
        let ow = pool_output_extent(w, spec)?;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let xs = self.value(x).data();
        for bc in 0..n * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * spec.stride;
                    let x0 = ox * spec.stride;
                    let y1 = (y0 + spec.kernel).min(h);
                    let x1 = (x0 + spec.kernel).min(w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xk in x0..x1 {
                            acc += xs[in_base + y * w + xk];
                        }
                    }
                    out.data_mut()[out_base + oy * ow + ox] =
                        acc / T::from_usize((y1 - y0) * (x1 - x0));
                }
            }
        }
        let input_shape = vec![n, c, h, w];
        Ok(self.push_op(out, vec![x], Box::new(AvgPoolBackward { input_shape, spec })))
    }

    /// Per-channel spatial mean: `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, c]);
        let xs = self.value(x).data();
        for bc in 0..n * c {
            let mut acc = T::zero();
            for &v in &xs[bc * plane..(bc + 1) * plane] {
                acc += v;
            }
            out.data_mut()[bc] = acc / T::from_usize(plane);
        }
        let input_shape = vec![n, c, h, w];
        Ok(self.push_op(out, vec![x], Box::new(GlobalAvgPoolBackward { input_shape })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CEIL2: PoolSpec = PoolSpec { kernel: 2, stride: 2, ceil_mode: true };

    #[test]
    fn two_by_two_window_takes_max() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.max_pool(x, PoolSpec { kernel: 2, stride: 2, ceil_mode: false }).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 4.0);
    }

    #[test]
    fn ceil_mode_rounds_odd_extents_up() {
        assert_eq!(pool_output_extent(19, CEIL2).unwrap(), 10);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 19, 19], |i| i as f32));
        let y = g.max_pool(x, CEIL2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 10, 10]);
    }

    #[test]
    fn ceil_extent_formula_over_full_range() {
        for h in 1usize..=64 {
            let got = pool_output_extent(h, CEIL2).unwrap();
            let expect = ((h as f64 - 2.0) / 2.0).ceil() as usize + 1;
            assert_eq!(got, expect, "extent {h}");
        }
    }

    #[test]
    fn constant_image_pools_to_constant() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 2, 7, 7], 3.25));
        let y = g.max_pool(x, CEIL2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.25));
        let z = g.avg_pool(x, CEIL2).unwrap();
        assert!(g.value(z).data().iter().all(|&v| (v - 3.25).abs() < 1e-6));
    }

    #[test]
    fn oversized_kernel_rejected_without_ceil() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let r = g.max_pool(x, PoolSpec { kernel: 5, stride: 1, ceil_mode: false });
        assert!(r.is_err());
    }

    #[test]
    fn global_avg_pool_of_constant_channel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 4], -1.5));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v + 1.5).abs() < 1e-6));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 9.0, 3.0, 4.0]).unwrap(), true);
        let y = g.max_pool(x, PoolSpec { kernel: 2, stride: 2, ceil_mode: false }).unwrap();
        let m = g.mean_all(y);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
