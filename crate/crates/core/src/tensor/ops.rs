//! Elementwise arithmetic, reductions and channel shape utilities.

use super::{GradFn, Real, Tensor};
use crate::error::{shape_err, Result};

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

struct AddFn<T: Real>(Tensor<T>, Tensor<T>);

impl<T: Real> GradFn<T> for AddFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.0, &self.1]
    }
    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, AddFn(a.clone(), b.clone())))
}

struct MulFn<T: Real>(Tensor<T>, Tensor<T>);

impl<T: Real> GradFn<T> for MulFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.0, &self.1]
    }
    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        let a = self.0.data();
        let b = self.1.data();
        let ga = self.0.requires_grad().then(|| g.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect());
        let gb = self.1.requires_grad().then(|| g.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect());
        vec![ga, gb]
    }
}

/// Elementwise product.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, MulFn(a.clone(), b.clone())))
}

struct ScaleFn<T: Real>(Tensor<T>, T);

impl<T: Real> GradFn<T> for ScaleFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.0]
    }
    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&g| g * self.1).collect())]
    }
}

pub fn scale<T: Real>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(a.shape().to_vec(), data, ScaleFn(a.clone(), c))
}

struct ReluFn<T: Real>(Tensor<T>);

impl<T: Real> GradFn<T> for ReluFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.0]
    }
    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = self.0.data();
        vec![Some(
            g.iter()
                .zip(x.iter())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect(),
        )]
    }
}

pub fn relu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
    Tensor::from_op(a.shape().to_vec(), data, ReluFn(a.clone()))
}

struct SumFn<T: Real>(Tensor<T>, T);

impl<T: Real> GradFn<T> for SumFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.0]
    }
    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0] * self.1; self.0.numel()])]
    }
}

/// Sum of all elements, as a scalar.
pub fn sum<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.data().iter().copied().sum();
    Tensor::from_op(Vec::new(), vec![s], SumFn(a.clone(), T::one()))
}

pub fn mean<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let n = T::of(a.numel().max(1) as f64);
    let s: T = a.data().iter().copied().sum();
    Tensor::from_op(Vec::new(), vec![s / n], SumFn(a.clone(), T::one() / n))
}

struct ConcatFn<T: Real> {
    parts: Vec<Tensor<T>>,
    dims: [usize; 4],
}

impl<T: Real> GradFn<T> for ConcatFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        self.parts.iter().collect()
    }
    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, c_total, h, w] = self.dims;
        let hw = h * w;
        let mut out = Vec::with_capacity(self.parts.len());
        let mut offset = 0;
        for p in &self.parts {
            let c = p.shape()[1];
            if p.requires_grad() {
                let mut gp = Vec::with_capacity(n * c * hw);
                for b in 0..n {
                    let start = (b * c_total + offset) * hw;
                    gp.extend_from_slice(&g[start..start + c * hw]);
                }
                out.push(Some(gp));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

/// Concatenation along the channel axis of rank-4 tensors.
pub fn concat_channels<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let [n, _, h, w] = first.dims4()?;
    let mut c_total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(shape_err!("concat: {:?} incompatible with {:?}", p.shape(), first.shape()));
        }
        c_total += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c_total * hw);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            let d = p.data();
            data.extend_from_slice(&d[b * c * hw..(b + 1) * c * hw]);
        }
    }
    let dims = [n, c_total, h, w];
    Ok(Tensor::from_op(
        dims.to_vec(),
        data,
        ConcatFn {
            parts: parts.to_vec(),
            dims,
        },
    ))
}

struct NarrowFn<T: Real> {
    input: Tensor<T>,
    start: usize,
    len: usize,
}

impl<T: Real> GradFn<T> for NarrowFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }
    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.input.dims4().expect("rank checked at construction");
        let hw = h * w;
        let mut gi = vec![T::zero(); n * c * hw];
        for b in 0..n {
            let dst = (b * c + self.start) * hw;
            let src = b * self.len * hw;
            gi[dst..dst + self.len * hw].copy_from_slice(&g[src..src + self.len * hw]);
        }
        vec![Some(gi)]
    }
}

/// Channels `start..start+len` of a rank-4 tensor.
pub fn narrow_channels<T: Real>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = a.dims4()?;
    if len == 0 || start + len > c {
        return Err(shape_err!("narrow {start}..{} out of {c} channels", start + len));
    }
    let hw = h * w;
    let d = a.data();
    let mut data = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        let s = (b * c + start) * hw;
        data.extend_from_slice(&d[s..s + len * hw]);
    }
    drop(d);
    Ok(Tensor::from_op(
        vec![n, len, h, w],
        data,
        NarrowFn {
            input: a.clone(),
            start,
            len,
        },
    ))
}

pub fn select_channel<T: Real>(a: &Tensor<T>, channel: usize) -> Result<Tensor<T>> {
    narrow_channels(a, channel, 1)
}
