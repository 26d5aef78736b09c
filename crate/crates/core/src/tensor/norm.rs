//! Per-channel batch normalization over (N, H, W).

use super::{GradFn, Real, Tensor};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean / variance with the count of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub updates: u64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }
}

pub struct BnOutput<T: Real> {
    pub output: Tensor<T>,
    /// Eval mode ran on initial statistics (mean 0, var 1) because no update happened yet.
    pub uninitialized_stats: bool,
}

struct BnFn<T: Real> {
    input: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    /// Normalized input x̂.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Real> GradFn<T> for BnFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input, &self.gamma, &self.beta]
    }

    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.input.dims4().expect("rank checked at construction");
        let hw = h * w;
        let m = T::of((n * hw) as f64);
        let gamma = self.gamma.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let s = (b * c + ch) * hw;
                for (&gi, &xi) in g[s..s + hw].iter().zip(&self.xhat[s..s + hw]) {
                    dgamma[ch] += gi * xi;
                    dbeta[ch] += gi;
                }
            }
        }
        let gx = self.input.requires_grad().then(|| {
            let mut gx = vec![T::zero(); g.len()];
            for b in 0..n {
                for ch in 0..c {
                    let s = (b * c + ch) * hw;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in s..s + hw {
                        gx[i] = if self.train {
                            // (γ/σ)/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                            k / m * (m * g[i] - dbeta[ch] - self.xhat[i] * dgamma[ch])
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            gx
        });
        vec![
            gx,
            self.gamma.requires_grad().then_some(dgamma),
            self.beta.requires_grad().then_some(dbeta),
        ]
    }
}

/// Batch normalization. Train mode normalizes by batch statistics and updates
/// `running` with `momentum` (unbiased variance); eval mode uses `running`.
pub fn batchnorm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: BnMode,
    momentum: f64,
    eps: f64,
) -> Result<BnOutput<T>> {
    let [n, c, h, w] = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || running.mean.len() != c || running.var.len() != c {
        return Err(shape_err!(
            "batchnorm2d: {c} channels but gamma {:?}, beta {:?}, running stats {}",
            gamma.shape(),
            beta.shape(),
            running.mean.len()
        ));
    }
    let hw = h * w;
    let count = n * hw;
    if mode == BnMode::Train && count < 2 {
        return Err(shape_err!("batchnorm2d: train mode needs at least 2 values per channel, got {count}"));
    }
    let x = input.data();
    let eps_t = T::of(eps);
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv = 1.0 / count as f64;
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    let o = (b * c + ch) * hw;
                    s += x[o..o + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s * inv;
                let mut ss = 0.0f64;
                for b in 0..n {
                    let o = (b * c + ch) * hw;
                    ss += x[o..o + hw].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                }
                mean[ch] = T::of(mu);
                var[ch] = T::of(ss * inv);
                let unbiased = ss / (count - 1) as f64;
                let rm = running.mean[ch].as_f64();
                let rv = running.var[ch].as_f64();
                running.mean[ch] = T::of((1.0 - momentum) * rm + momentum * mu);
                running.var[ch] = T::of((1.0 - momentum) * rv + momentum * unbiased);
            }
            running.updates += 1;
            (mean, var)
        }
        BnMode::Eval => (running.mean.clone(), running.var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let gd = gamma.data();
    let bd = beta.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
    }
    drop((x, gd, bd));
    let output = Tensor::from_op(
        vec![n, c, h, w],
        out,
        BnFn {
            input: input.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
            train: mode == BnMode::Train,
        },
    );
    Ok(BnOutput {
        output,
        uninitialized_stats: mode == BnMode::Eval && running.updates == 0,
    })
}
