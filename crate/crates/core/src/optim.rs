//! Gradient clipping and SGD with classical momentum.

use crate::tensor::{NumericError, ParamTensors};

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients<T: ParamTensors>(grads: &mut T, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for t in grads.tensors_mut() {
            t.scale(k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Sgd {
    /// `v ← m·v − lr·g`, then `p ← p + v`.
    pub fn step<T: ParamTensors>(
        &self,
        params: &mut T,
        velocity: &mut T,
        grads: &T,
    ) -> Result<(), NumericError> {
        let g = grads.named_tensors();
        let mut v = velocity.tensors_mut();
        let mut p = params.tensors_mut();
        if g.len() != v.len() || g.len() != p.len() {
            return Err(NumericError::Shape {
                op: "sgd",
                left: (p.len(), 1),
                right: (g.len(), 1),
            });
        }
        for ((pt, vt), (_, gt)) in p.iter_mut().zip(v.iter_mut()).zip(&g) {
            if pt.shape() != gt.shape() || vt.shape() != gt.shape() {
                return Err(NumericError::Shape {
                    op: "sgd",
                    left: pt.shape(),
                    right: gt.shape(),
                });
            }
        }
        for ((pt, vt), (_, gt)) in p.iter_mut().zip(v.iter_mut()).zip(&g) {
            for ((pv, vv), gv) in pt
                .as_mut_slice()
                .iter_mut()
                .zip(vt.as_mut_slice().iter_mut())
                .zip(gt.as_slice())
            {
                *vv = self.momentum * *vv - self.learning_rate * gv;
                *pv += *vv;
            }
        }
        Ok(())
    }
}
