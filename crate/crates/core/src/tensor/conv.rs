//! 2-D cross-correlation with stride, zero padding and dilation (im2col + GEMM).

use super::{GradFn, Real, Tensor};
use crate::error::{invalid, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dParams {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with the padding that keeps spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv2dParams {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

/// `floor((len + 2P − D(k−1) − 1)/S) + 1`, or `None` when that is below 1.
pub fn conv_output_len(len: usize, kernel: usize, p: Conv2dParams) -> Option<usize> {
    let padded = len + 2 * p.padding;
    let extent = p.dilation * (kernel - 1) + 1;
    if padded < extent || p.stride == 0 {
        return None;
    }
    Some((padded - extent) / p.stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    p: Conv2dParams,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    /// Source coordinate for output index `o` and tap `t`, if inside the image.
    #[inline]
    fn src(o: usize, t: usize, p: Conv2dParams, len: usize) -> Option<usize> {
        let pos = (o * p.stride + t * p.dilation) as isize - p.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let Geometry { cin, h, w, k, ho, wo, p } = *self;
        let plane = ho * wo;
        for c in 0..cin {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * plane..][..plane];
                    for oy in 0..ho {
                        let out = &mut row[oy * wo..(oy + 1) * wo];
                        match Self::src(oy, ki, p, h) {
                            None => out.fill(T::zero()),
                            Some(iy) => {
                                let src_row = &xc[iy * w..(iy + 1) * w];
                                for (ox, o) in out.iter_mut().enumerate() {
                                    *o = match Self::src(ox, kj, p, w) {
                                        Some(ix) => src_row[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        let Geometry { cin, h, w, k, ho, wo, p } = *self;
        let plane = ho * wo;
        for c in 0..cin {
            let gc = &mut gx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * plane..][..plane];
                    for oy in 0..ho {
                        let Some(iy) = Self::src(oy, ki, p, h) else { continue };
                        let dst_row = &mut gc[iy * w..(iy + 1) * w];
                        for ox in 0..wo {
                            if let Some(ix) = Self::src(ox, kj, p, w) {
                                dst_row[ix] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dFn<T: Real> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    n: usize,
    cout: usize,
    geo: Geometry,
}

impl<T: Real> GradFn<T> for Conv2dFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.input, &self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    fn backward(&self, g: &[T]) -> Vec<Option<Vec<T>>> {
        let geo = self.geo;
        let (n, cout) = (self.n, self.cout);
        let ckk = geo.cin * geo.k * geo.k;
        let plane = geo.ho * geo.wo;
        let in_len = geo.cin * geo.h * geo.w;
        let x = self.input.data();
        let w = self.weight.data();

        let want_x = self.input.requires_grad();
        let want_w = self.weight.requires_grad();
        let mut gx = want_x.then(|| vec![T::zero(); n * in_len]);
        let mut gw = want_w.then(|| vec![T::zero(); cout * ckk]);
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
        let mut gcols = if want_x && !geo.is_pointwise() { vec![T::zero(); ckk * plane] } else { Vec::new() };

        for b in 0..n {
            let gb = &g[b * cout * plane..(b + 1) * cout * plane];
            let xb = &x[b * in_len..(b + 1) * in_len];
            if let Some(gw) = gw.as_mut() {
                let cols_b: &[T] = if geo.is_pointwise() {
                    xb
                } else {
                    geo.im2col(xb, &mut cols);
                    &cols
                };
                // gW (cout × ckk) += gY (cout × plane) · colsᵀ
                T::gemm(cout, plane, ckk, gb, false, cols_b, true, T::one(), gw);
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx[b * in_len..(b + 1) * in_len];
                if geo.is_pointwise() {
                    T::gemm(ckk, cout, plane, &w, true, gb, false, T::zero(), gxb);
                } else {
                    // gcols (ckk × plane) = Wᵀ · gY
                    T::gemm(ckk, cout, plane, &w, true, gb, false, T::zero(), &mut gcols);
                    geo.col2im(&gcols, gxb);
                }
            }
        }

        let mut out = vec![gx, gw];
        if let Some(bias) = &self.bias {
            out.push(bias.requires_grad().then(|| {
                let mut gbias = vec![T::zero(); cout];
                for b in 0..n {
                    for (co, acc) in gbias.iter_mut().enumerate() {
                        let s = (b * cout + co) * plane;
                        *acc += g[s..s + plane].iter().copied().sum::<T>();
                    }
                }
                gbias
            }));
        }
        out
    }
}

/// Cross-correlation of `input [N,Cin,H,W]` with `weight [Cout,Cin,k,k]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, p: Conv2dParams) -> Result<Tensor<T>> {
    let [n, cin, h, w] = input.dims4()?;
    let [cout, wcin, k, k2] = weight.dims4()?;
    if wcin != cin {
        return Err(shape_err!(
            "conv2d: input has {cin} channels but weight {:?} expects {wcin}",
            weight.shape()
        ));
    }
    if k != k2 || k == 0 {
        return Err(shape_err!("conv2d: kernel must be square and non-empty, got {k}x{k2}"));
    }
    if p.stride == 0 || p.dilation == 0 {
        return Err(invalid!("conv2d: stride and dilation must be >= 1 ({p:?})"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("conv2d: bias shape {:?}, expected [{cout}]", b.shape()));
        }
    }
    let (ho, wo) = match (conv_output_len(h, k, p), conv_output_len(w, k, p)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(shape_err!(
                "conv2d: non-positive output size for {h}x{w} input, kernel {k}, {p:?}"
            ))
        }
    };
    let geo = Geometry { cin, h, w, k, ho, wo, p };
    let ckk = cin * k * k;
    let plane = ho * wo;
    let in_len = cin * h * w;
    let mut out = vec![T::zero(); n * cout * plane];
    {
        let x = input.data();
        let wd = weight.data();
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
        for b in 0..n {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let cols_b: &[T] = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols
            };
            let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
            T::gemm(cout, ckk, plane, &wd, false, cols_b, false, T::zero(), ob);
            if let Some(bias) = bias {
                let bd = bias.data();
                for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, cout, ho, wo],
        out,
        Conv2dFn {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            n,
            cout,
            geo,
        },
    ))
}
