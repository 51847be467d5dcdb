//! Slice-level compute kernels shared by the eager primitives and the tape.
//! Layouts: matrices row-major, feature maps NHWC, conv weights `[kh, kw, cin, cout]`.

use crate::error::{dim_err, Result};
use crate::tensor::Real;

/// out[M×N] += a[M×K] · b[K×N]
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[M×K] += a[M×N] · b[K×N]ᵀ
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

/// out[K×N] += a[M×K]ᵀ · b[M×N]
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub(crate) fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(dim_err!("stride must be positive"));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(dim_err!(
            "non-positive output extent: input {n}, kernel {k}, padding {pad}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub depthwise: bool,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(dim_err!(
                "conv expects [B,H,W,C] input and [kh,kw,cin,cout] weight, got {x_shape:?} and {w_shape:?}"
            ));
        }
        let (batch, h, w, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (kh, kw, wcin, cout) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if depthwise {
            if wcin != 1 || cout != cin {
                return Err(dim_err!(
                    "depthwise conv needs weight [kh,kw,1,{cin}], got {w_shape:?}"
                ));
            }
        } else if wcin != cin {
            return Err(dim_err!(
                "conv weight expects {wcin} input channels, input has {cin}"
            ));
        }
        let oh = out_extent(h, kh, stride, pad)?;
        let ow = out_extent(w, kw, stride, pad)?;
        Ok(Self {
            batch,
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            depthwise,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.oh, self.ow, self.cout]
    }

    /// Input coordinate for an output coordinate and kernel tap, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.oh * g.ow * g.cout];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o_off = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                let orow = &mut out[o_off..o_off + g.cout];
                orow.copy_from_slice(bias);
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else {
                            continue;
                        };
                        let x_off = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let xrow = &x[x_off..x_off + g.cin];
                        let tap =
                            (ky * g.kw + kx) * if g.depthwise { g.cout } else { g.cin * g.cout };
                        if g.depthwise {
                            let wrow = &w[tap..tap + g.cout];
                            for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                                *o = *o + xv * wv;
                            }
                        } else {
                            for (ci, &xv) in xrow.iter().enumerate() {
                                if xv == T::zero() {
                                    continue;
                                }
                                let wrow = &w[tap + ci * g.cout..tap + (ci + 1) * g.cout];
                                for (o, &wv) in orow.iter_mut().zip(wrow) {
                                    *o = *o + xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for the given output gradient.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o_off = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                let grow = &dy[o_off..o_off + g.cout];
                if let Some(db) = db.as_deref_mut() {
                    for (d, &gv) in db.iter_mut().zip(grow) {
                        *d = *d + gv;
                    }
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else {
                            continue;
                        };
                        let x_off = ((b * g.h + iy) * g.w + ix) * g.cin;
                        if g.depthwise {
                            let tap = (ky * g.kw + kx) * g.cout;
                            for c in 0..g.cout {
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[x_off + c] = dx[x_off + c] + grow[c] * w[tap + c];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[tap + c] = dw[tap + c] + grow[c] * x[x_off + c];
                                }
                            }
                        } else {
                            let tap = (ky * g.kw + kx) * g.cin * g.cout;
                            for ci in 0..g.cin {
                                let wrow = tap + ci * g.cout;
                                if let Some(dx) = dx.as_deref_mut() {
                                    let mut acc = T::zero();
                                    for (&gv, &wv) in grow.iter().zip(&w[wrow..wrow + g.cout]) {
                                        acc = acc + gv * wv;
                                    }
                                    dx[x_off + ci] = dx[x_off + ci] + acc;
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    let xv = x[x_off + ci];
                                    if xv != T::zero() {
                                        for (d, &gv) in dw[wrow..wrow + g.cout].iter_mut().zip(grow)
                                        {
                                            *d = *d + xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
