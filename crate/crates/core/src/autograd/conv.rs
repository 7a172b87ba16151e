//! Convolution and pooling over `[C, H, W]` or `[B, C, H, W]` tensors.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Output extent of a convolution along one spatial axis, or a config error
/// when the geometry does not tile exactly.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "conv geometry: input {input}, kernel {kernel}, stride {stride}, padding {padding} \
             does not give an integral output size"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// `[N, C, H, W]` view of a rank-3 or rank-4 shape.
fn as_nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!("expected [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

impl Graph {
    pub(crate) fn conv_geom(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<ConvGeom> {
        let (batch, c_in, h, wd) = as_nchw(self.shape(x))?;
        let ws = self.shape(w);
        let [c_out, wc, kh, kw] = *ws else {
            return Err(Error::dim(format!("conv weight must be [Cout,Cin,kh,kw], got {ws:?}")));
        };
        if wc != c_in {
            return Err(Error::dim(format!(
                "conv weight expects {wc} input channels, input has {c_in}"
            )));
        }
        let oh = conv2d_output_size(h, kh, stride, padding)?;
        let ow = conv2d_output_size(wd, kw, stride, padding)?;
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    /// 2-D cross-correlation with optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [g.c_out] {
                return Err(Error::dim(format!("conv bias must be [{}]", g.c_out)));
            }
        }
        let (k, p) = (g.patch(), g.positions());
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; g.batch * g.c_out * p];
        let mut cols = vec![0.0; k * p];
        for n in 0..g.batch {
            im2col(&xd[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w], &g, &mut cols);
            let o = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
            tensor::gemm_nn(wd, &cols, o, g.c_out, k, p);
            if let Some(b) = b {
                let bd = self.value(b).data();
                for co in 0..g.c_out {
                    for v in &mut o[co * p..(co + 1) * p] {
                        *v += bd[co];
                    }
                }
            }
        }
        let shape = if self.value(x).ndim() == 3 {
            vec![g.c_out, g.oh, g.ow]
        } else {
            vec![g.batch, g.c_out, g.oh, g.ow]
        };
        let v = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        )
    }

    /// Per-window maximum. Ties resolve to the first window position in
    /// row-major order, which is also where the gradient is routed.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let (batch, c, h, w) = as_nchw(t.shape())?;
        if window == 0 || stride == 0 || h % stride != 0 || w % stride != 0 || h < window || w < window {
            return Err(Error::config(format!(
                "max_pool2d: {h}x{w} is not divisible by stride {stride} (window {window})"
            )));
        }
        let oh = conv2d_output_size(h, window, stride, 0)?;
        let ow = conv2d_output_size(w, window, stride, 0)?;
        let d = t.data();
        let planes = batch * c;
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (oy * stride) * w + ox * stride;
                    for ki in 0..window {
                        for kj in 0..window {
                            let idx = base + (oy * stride + ki) * w + ox * stride + kj;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = t.shape().to_vec();
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        let v = Tensor::new(&shape, out)?;
        self.push("max_pool2d", v, Op::MaxPool2d { x, argmax }, &[x])
    }
}
