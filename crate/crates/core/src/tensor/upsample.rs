//! Bilinear upsampling with half-pixel centers and edge clamping.

use super::{GradFn, Real, Tensor};
use crate::error::{shape_err, Result};

/// Source coordinate of destination index `dest` when resizing `src_len → dst_len`:
/// `(dest + 0.5)·src/dst − 0.5`, clamped to `[0, src_len − 1]`.
pub fn bilinear_source(dest: usize, src_len: usize, dst_len: usize) -> f64 {
    let s = (dest as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    s.clamp(0.0, (src_len - 1) as f64)
}

#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn taps<T: Real>(src_len: usize, dst_len: usize) -> Vec<Tap<T>> {
    (0..dst_len)
        .map(|d| {
            let s = bilinear_source(d, src_len, dst_len);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            Tap {
                i0,
                i1,
                frac: T::of(s - i0 as f64),
            }
        })
        .collect()
}

// a + t·(b − a) is exact for a == b, so constant inputs stay constant.
#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

struct UpsampleFn<T: Real> {
    input: Tensor<T>,
    ys: Vec<Tap<T>>,
    xs: Vec<Tap<T>>,
}

impl<T: Real> GradFn<T> for UpsampleFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.input.dims4().expect("rank checked at construction");
        let (ho, wo) = (self.ys.len(), self.xs.len());
        let mut gi = vec![T::zero(); n * c * h * w];
        let one = T::one();
        // Separable: fold each output row onto source columns, then onto the two source rows.
        let mut row = vec![T::zero(); w];
        for plane in 0..n * c {
            let src = &mut gi[plane * h * w..(plane + 1) * h * w];
            for (oy, ty) in self.ys.iter().enumerate() {
                row.iter_mut().for_each(|v| *v = T::zero());
                let grow = &g[(plane * ho + oy) * wo..(plane * ho + oy + 1) * wo];
                for (gv, tx) in grow.iter().zip(&self.xs) {
                    row[tx.i0] += *gv * (one - tx.frac);
                    row[tx.i1] += *gv * tx.frac;
                }
                let (a, b) = (one - ty.frac, ty.frac);
                for (x, &r) in row.iter().enumerate() {
                    src[ty.i0 * w + x] += r * a;
                    src[ty.i1 * w + x] += r * b;
                }
            }
        }
        vec![Some(gi)]
    }
}

/// Resizes `[N,C,h,w]` to `[N,C,H,W]` with `H ≥ h`, `W ≥ w`.
pub fn bilinear_upsample<T: Real>(input: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let (ho, wo) = target;
    if ho < h || wo < w {
        return Err(shape_err!("bilinear_upsample: cannot downsample {h}x{w} to {ho}x{wo}"));
    }
    if h == 0 || w == 0 {
        return Err(shape_err!("bilinear_upsample: empty input"));
    }
    let ys = taps::<T>(h, ho);
    let xs = taps::<T>(w, wo);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    // Rows are interpolated along x once, then blended along y.
    let mut rows = vec![T::zero(); h * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for (y, dst) in rows.chunks_exact_mut(wo).enumerate() {
            let line = &src[y * w..(y + 1) * w];
            for (d, tx) in dst.iter_mut().zip(&xs) {
                *d = lerp(line[tx.i0], line[tx.i1], tx.frac);
            }
        }
        for ty in &ys {
            let (top, bot) = (&rows[ty.i0 * wo..(ty.i0 + 1) * wo], &rows[ty.i1 * wo..(ty.i1 + 1) * wo]);
            out.extend(top.iter().zip(bot).map(|(&a, &b)| lerp(a, b, ty.frac)));
        }
    }
    drop(x);
    Ok(Tensor::from_op(
        vec![n, c, ho, wo],
        out,
        UpsampleFn {
            input: input.clone(),
            ys,
            xs,
        },
    ))
}
