//! Softmax and pixelwise categorical cross-entropy with an ignore sentinel.

use super::{GradFn, Real, Tensor};
use crate::error::{shape_err, Result};

/// Target value excluded from loss and gradient (same sentinel as label rasters).
pub const IGNORE_INDEX: u8 = 255;

pub struct CceOutput<T: Real> {
    pub loss: Tensor<T>,
    /// Number of pixels that contributed.
    pub valid: usize,
}

impl<T: Real> CceOutput<T> {
    /// Every pixel carried the ignore sentinel; loss and gradients are zero.
    pub fn is_empty(&self) -> bool {
        self.valid == 0
    }
}

/// Softmax over the channel axis of `[N,K,H,W]` logits (no gradient recorded).
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Vec<T>> {
    let [n, k, h, w] = logits.dims4()?;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    softmax_into(&x, &mut out, n, k, h * w);
    Ok(out)
}

/// Writes probabilities into `out` and returns per-pixel `(max, Σ exp)` pairs.
fn softmax_into<T: Real>(x: &[T], out: &mut [T], n: usize, k: usize, hw: usize) -> Vec<(T, T)> {
    let mut norm = vec![(T::neg_infinity(), T::zero()); n * hw];
    for b in 0..n {
        let planes = &x[b * k * hw..(b + 1) * k * hw];
        let outs = &mut out[b * k * hw..(b + 1) * k * hw];
        let norm = &mut norm[b * hw..(b + 1) * hw];
        for plane in planes.chunks_exact(hw) {
            for (m, &v) in norm.iter_mut().zip(plane) {
                m.0 = m.0.max(v);
            }
        }
        for (plane, dst) in planes.chunks_exact(hw).zip(outs.chunks_exact_mut(hw)) {
            for ((d, &v), m) in dst.iter_mut().zip(plane).zip(norm.iter_mut()) {
                *d = (v - m.0).exp();
                m.1 += *d;
            }
        }
        for dst in outs.chunks_exact_mut(hw) {
            for (d, m) in dst.iter_mut().zip(norm.iter()) {
                *d = *d / m.1;
            }
        }
    }
    norm
}

struct CceFn<T: Real> {
    logits: Tensor<T>,
    probs: Vec<T>,
    targets: Vec<u8>,
    valid: usize,
}

impl<T: Real> GradFn<T> for CceFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.logits]
    }

    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, k, h, w] = self.logits.dims4().expect("rank checked at construction");
        let hw = h * w;
        let mut gl = vec![T::zero(); n * k * hw];
        if self.valid == 0 {
            return vec![Some(gl)];
        }
        let s = g[0] / T::of(self.valid as f64);
        for b in 0..n {
            let tg = &self.targets[b * hw..(b + 1) * hw];
            for c in 0..k {
                let off = (b * k + c) * hw;
                let (dst, src) = (&mut gl[off..off + hw], &self.probs[off..off + hw]);
                for ((d, &p), &t) in dst.iter_mut().zip(src).zip(tg) {
                    if t != IGNORE_INDEX {
                        let onehot = if c == t as usize { T::one() } else { T::zero() };
                        *d = s * (p - onehot);
                    }
                }
            }
        }
        vec![Some(gl)]
    }
}

/// Mean over non-ignored pixels of `−log softmax(logits)[target]`.
///
/// `targets` is `[N,H,W]` flattened. When every pixel is ignored the loss is
/// zero with zero gradient and [`CceOutput::is_empty`] reports it.
pub fn softmax_cce<T: Real>(logits: &Tensor<T>, targets: &[u8]) -> Result<CceOutput<T>> {
    let [n, k, h, w] = logits.dims4()?;
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(shape_err!(
            "softmax_cce: {} targets for logits {:?}",
            targets.len(),
            logits.shape()
        ));
    }
    if let Some(bad) = targets.iter().find(|&&t| t != IGNORE_INDEX && t as usize >= k) {
        return Err(shape_err!("softmax_cce: target {bad} outside 0..{k}"));
    }
    let x = logits.data();
    let mut probs = vec![T::zero(); x.len()];
    let norm = softmax_into(&x, &mut probs, n, k, hw);
    let mut total = 0.0f64;
    let mut valid = 0usize;
    for b in 0..n {
        for p in 0..hw {
            let t = targets[b * hw + p];
            if t == IGNORE_INDEX {
                continue;
            }
            let (m, z) = norm[b * hw + p];
            total += z.ln().as_f64() + (m - x[(b * k + t as usize) * hw + p]).as_f64();
            valid += 1;
        }
    }
    drop(x);
    let loss = if valid == 0 { 0.0 } else { total / valid as f64 };
    let loss = Tensor::from_op(
        Vec::new(),
        vec![T::of(loss)],
        CceFn {
            logits: logits.clone(),
            probs,
            targets: targets.to_vec(),
            valid,
        },
    );
    Ok(CceOutput { loss, valid })
}
