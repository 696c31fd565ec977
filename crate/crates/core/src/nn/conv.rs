use serde::{Deserialize, Serialize};

use super::linear::dot;
use super::{check_grad_shape, Gradients, Mode, Module, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::{Prng, Tensor};

/// 2-D cross-correlation with zero padding.
///
/// Each sample is unrolled into a `[Cin*kh*kw, Ho*Wo]` patch matrix, so the
/// reduction order over a receptive field is `(cin, ki, kj)` row-major, the
/// same order a direct six-deep loop would use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct Conv2dCache {
    x: Tensor,
    out_hw: (usize, usize),
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Unrolls one sample `[Cin, H, W]` into `cols[k * out_len + pos]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let out_len = self.out_len();
        let mut k = 0;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut cols[k * out_len..(k + 1) * out_len];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    k += 1;
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto one sample's input gradient.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let out_len = self.out_len();
        let mut k = 0;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &cols[k * out_len..(k + 1) * out_len];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                    k += 1;
                }
            }
        }
    }
}

impl Conv2d {
    /// He-initialised `kernel x kernel` convolution with zero bias.
    pub fn he(cin: usize, cout: usize, kernel: usize, padding: usize, prng: &mut Prng) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Conv2d {
            weight: Tensor::gaussian(&[cout, cin, kernel, kernel], prng, 0.0, (2.0 / fan_in).sqrt()),
            bias: Tensor::zeros(&[cout]),
            stride: 1,
            padding,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [cout, _, _, _] = weight.dims4()?;
        if bias.shape() != [cout] {
            return Err(Error::shape(format!(
                "bias {:?} does not match {cout} output channels",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be >= 1"));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let [_, cin, h, w] = x.dims4()?;
        let [_, wcin, kh, kw] = self.weight.dims4()?;
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv expects {wcin} input channels, got {cin}"
            )));
        }
        if h + 2 * self.padding < kh || w + 2 * self.padding < kw {
            return Err(Error::shape(format!(
                "input {h}x{w} with padding {} is smaller than kernel {kh}x{kw}",
                self.padding
            )));
        }
        Ok(Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            ho: (h + 2 * self.padding - kh) / self.stride + 1,
            wo: (w + 2 * self.padding - kw) / self.stride + 1,
            stride: self.stride,
            pad: self.padding,
        })
    }

    pub fn conv2d_forward(&self, x: &Tensor) -> Result<(Tensor, Conv2dCache)> {
        let g = self.geometry(x)?;
        let n = x.shape()[0];
        let cout = self.out_channels();
        let (k, out_len) = (g.patch_len(), g.out_len());
        let in_len = g.cin * g.h * g.w;
        let w = self.weight.data();

        let mut y = vec![0.0; n * cout * out_len];
        let mut cols = vec![0.0; k * out_len];
        for (xs, ys) in x.data().chunks_exact(in_len).zip(y.chunks_exact_mut(cout * out_len)) {
            g.im2col(xs, &mut cols);
            for co in 0..cout {
                let out = &mut ys[co * out_len..(co + 1) * out_len];
                out.fill(self.bias.data()[co]);
                for (kk, &wv) in w[co * k..(co + 1) * k].iter().enumerate() {
                    let row = &cols[kk * out_len..(kk + 1) * out_len];
                    for (o, &c) in out.iter_mut().zip(row) {
                        *o += wv * c;
                    }
                }
            }
        }
        Ok((
            Tensor::new(vec![n, cout, g.ho, g.wo], y)?,
            Conv2dCache {
                x: x.clone(),
                out_hw: (g.ho, g.wo),
            },
        ))
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn conv2d_backward(&self, cache: &Conv2dCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let g = self.geometry(&cache.x)?;
        let n = cache.x.shape()[0];
        let cout = self.out_channels();
        check_grad_shape(dy, &[n, cout, cache.out_hw.0, cache.out_hw.1], "conv2d")?;
        let (k, out_len) = (g.patch_len(), g.out_len());
        let in_len = g.cin * g.h * g.w;
        let w = self.weight.data();

        let mut dx = vec![0.0; cache.x.len()];
        let mut dw = vec![0.0; cout * k];
        let mut db = vec![0.0; cout];
        let mut cols = vec![0.0; k * out_len];
        let mut dcols = vec![0.0; k * out_len];
        for ((xs, dys), dxs) in cache
            .x
            .data()
            .chunks_exact(in_len)
            .zip(dy.data().chunks_exact(cout * out_len))
            .zip(dx.chunks_exact_mut(in_len))
        {
            g.im2col(xs, &mut cols);
            dcols.fill(0.0);
            for co in 0..cout {
                let grad = &dys[co * out_len..(co + 1) * out_len];
                db[co] += grad.iter().sum::<f64>();
                for kk in 0..k {
                    let row = &cols[kk * out_len..(kk + 1) * out_len];
                    dw[co * k + kk] += dot(grad, row);
                    let wv = w[co * k + kk];
                    let drow = &mut dcols[kk * out_len..(kk + 1) * out_len];
                    for (d, &gv) in drow.iter_mut().zip(grad) {
                        *d += wv * gv;
                    }
                }
            }
            g.col2im(&dcols, dxs);
        }
        Ok((
            Tensor::new(cache.x.shape().to_vec(), dx)?,
            Tensor::new(self.weight.shape().to_vec(), dw)?,
            Tensor::new(vec![cout], db)?,
        ))
    }
}

impl Module for Conv2d {
    type Cache = Conv2dCache;

    fn apply(&self, x: &Tensor, _mode: Mode) -> Result<(Tensor, Conv2dCache)> {
        self.conv2d_forward(x)
    }

    fn backward(&self, cache: &Conv2dCache, dy: &Tensor) -> Result<Gradients> {
        let (dx, dw, db) = self.conv2d_backward(cache, dy)?;
        Ok(Gradients {
            dx,
            params: vec![dw, db],
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut::free("weight", &mut self.weight),
            ParamMut::free("bias", &mut self.bias),
        ]
    }
}
