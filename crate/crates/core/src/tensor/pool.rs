use super::{GradFn, Real, Tensor};
use crate::error::{invalid, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    /// Max pooling pads with −∞; average pooling pads with zeros counted in the divisor.
    pub padding: usize,
}

impl PoolParams {
    pub fn max(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolParams {
            kind: PoolKind::Max,
            kernel,
            stride,
            padding,
        }
    }

    pub fn average(kernel: usize, stride: usize) -> Self {
        PoolParams {
            kind: PoolKind::Average,
            kernel,
            stride,
            padding: 0,
        }
    }
}

struct PoolFn<T: Real> {
    input: Tensor<T>,
    p: PoolParams,
    out_dims: [usize; 4],
    /// Flat input index feeding each output element (max pooling only).
    argmax: Vec<usize>,
}

impl<T: Real> GradFn<T> for PoolFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.input.dims4().expect("rank checked at construction");
        let mut gi = vec![T::zero(); n * c * h * w];
        match self.p.kind {
            PoolKind::Max => {
                for (o, &src) in self.argmax.iter().enumerate() {
                    gi[src] += g[o];
                }
            }
            PoolKind::Average => {
                let [_, _, ho, wo] = self.out_dims;
                let k = self.p.kernel;
                let inv = T::one() / T::of((k * k) as f64);
                for plane in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(plane * ho + oy) * wo + ox] * inv;
                            for_window(oy, ox, self.p, h, w, |iy, ix| {
                                gi[(plane * h + iy) * w + ix] += gv;
                            });
                        }
                    }
                }
            }
        }
        vec![Some(gi)]
    }
}

/// Visits in-bounds input positions of one window in row-major order.
#[inline]
fn for_window(oy: usize, ox: usize, p: PoolParams, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    for ki in 0..p.kernel {
        let iy = (oy * p.stride + ki) as isize - p.padding as isize;
        if iy < 0 || iy as usize >= h {
            continue;
        }
        for kj in 0..p.kernel {
            let ix = (ox * p.stride + kj) as isize - p.padding as isize;
            if ix < 0 || ix as usize >= w {
                continue;
            }
            f(iy as usize, ix as usize);
        }
    }
}

/// Max or average pooling with floor output semantics.
pub fn pool2d<T: Real>(input: &Tensor<T>, p: PoolParams) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    if p.kernel == 0 || p.stride == 0 {
        return Err(invalid!("pool2d: kernel and stride must be >= 1 ({p:?})"));
    }
    if p.padding * 2 > p.kernel {
        return Err(invalid!("pool2d: padding {} exceeds half the kernel {}", p.padding, p.kernel));
    }
    let (ph, pw) = (h + 2 * p.padding, w + 2 * p.padding);
    if ph < p.kernel || pw < p.kernel {
        return Err(shape_err!(
            "pool2d: {}x{} window larger than padded input {ph}x{pw}",
            p.kernel,
            p.kernel
        ));
    }
    let ho = (ph - p.kernel) / p.stride + 1;
    let wo = (pw - p.kernel) / p.stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::new();
    let inv = T::one() / T::of((p.kernel * p.kernel) as f64);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                match p.kind {
                    PoolKind::Max => {
                        let mut best: Option<(T, usize)> = None;
                        for_window(oy, ox, p, h, w, |iy, ix| {
                            let idx = base + iy * w + ix;
                            let v = x[idx];
                            // strict comparison keeps the first maximum in row-major order
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        });
                        let (v, idx) = best.expect("padding < kernel guarantees an in-bounds tap");
                        out.push(v);
                        argmax.push(idx);
                    }
                    PoolKind::Average => {
                        let mut acc = T::zero();
                        for_window(oy, ox, p, h, w, |iy, ix| acc += x[base + iy * w + ix]);
                        out.push(acc * inv);
                    }
                }
            }
        }
    }
    drop(x);
    let out_dims = [n, c, ho, wo];
    Ok(Tensor::from_op(
        out_dims.to_vec(),
        out,
        PoolFn {
            input: input.clone(),
            p,
            out_dims,
            argmax,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool2d(&x, PoolParams::max(2, 2, 0)).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        y.backward_with(&[0.7]).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 0.7]);
    }

    #[test]
    fn average_pool_of_2x2() {
        let x = Tensor::<f64>::param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool2d(&x, PoolParams::average(2, 2)).unwrap();
        assert_eq!(y.to_vec(), vec![2.5]);
        y.backward_with(&[1.0]).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn constant_average_halves_resolution() {
        let x = Tensor::<f32>::full(&[2, 3, 8, 6], 1.75);
        let y = pool2d(&x, PoolParams::average(2, 2)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 3]);
        assert!(y.to_vec().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn tie_break_takes_first_index() {
        let x = Tensor::<f64>::param(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let y = pool2d(&x, PoolParams::max(2, 2, 0)).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn stem_pool_geometry() {
        let x = Tensor::<f32>::zeros(&[1, 1, 384, 384]);
        let y = pool2d(&x, PoolParams::max(3, 2, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 192, 192]);
    }

    #[test]
    fn window_larger_than_input_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        assert!(pool2d(&x, PoolParams::average(2, 2)).is_err());
    }
}
