//! Dense and transposed 2-D convolution via im2col / col2im and GEMM.

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Scalar, Tensor};

/// Geometry shared by [`Conv2d`] and [`ConvTranspose2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |n: usize| {
            (n + 2 * self.pad)
                .checked_sub(self.kernel)
                .map(|v| v / self.stride + 1)
        };
        Some((f(h)?, f(w)?))
    }

    pub fn deconv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |n: usize| ((n.max(1) - 1) * self.stride + self.kernel).checked_sub(2 * self.pad);
        Some((f(h)?, f(w)?))
    }
}

/// Gathers receptive fields of `src (c, hs, ws)` into
/// `cols (c·k·k, gh·gw)`; `cols[(ci,ky,kx), (gy,gx)] = src[ci, gy·s−p+ky, gx·s−p+kx]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Scalar>(
    src: &[F],
    c: usize,
    hs: usize,
    ws: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    cols: &mut [F],
) {
    let grid = gh * gw;
    debug_assert_eq!(cols.len(), c * k * k * grid);
    for ci in 0..c {
        let plane = &src[ci * hs * ws..(ci + 1) * hs * ws];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * grid;
                let out = &mut cols[row..row + grid];
                for gy in 0..gh {
                    let sy = (gy * stride + ky) as isize - pad as isize;
                    let line = &mut out[gy * gw..(gy + 1) * gw];
                    if sy < 0 || sy >= hs as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * ws..(sy as usize + 1) * ws];
                    for (gx, v) in line.iter_mut().enumerate() {
                        let sx = (gx * stride + kx) as isize - pad as isize;
                        *v = if sx < 0 || sx >= ws as isize {
                            F::zero()
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `dst (c, hs, ws)`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Scalar>(
    cols: &[F],
    c: usize,
    hs: usize,
    ws: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    dst: &mut [F],
) {
    let grid = gh * gw;
    for ci in 0..c {
        let plane = &mut dst[ci * hs * ws..(ci + 1) * hs * ws];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * grid;
                let src = &cols[row..row + grid];
                for gy in 0..gh {
                    let sy = (gy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= hs as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * ws..(sy as usize + 1) * ws];
                    for gx in 0..gw {
                        let sx = (gx * stride + kx) as isize - pad as isize;
                        if sx >= 0 && sx < ws as isize {
                            dst_row[sx as usize] = dst_row[sx as usize] + src[gy * gw + gx];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution with weights `(cout, cin·k·k)` at `w_off` and bias `(cout)` at `b_off`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub geom: ConvGeom,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv2d {
    pub fn param_count(&self) -> usize {
        let g = &self.geom;
        g.cout * g.cin * g.kernel * g.kernel + g.cout
    }

    /// Returns the output and the im2col buffer needed for the backward pass.
    pub fn forward<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> (Tensor<F>, Vec<F>) {
        let g = &self.geom;
        assert_eq!(x.c, g.cin, "conv input channels");
        let (ho, wo) = g.conv_out(x.h, x.w).expect("conv output size");
        let kk = g.cin * g.kernel * g.kernel;
        let grid = ho * wo;
        let mut cols = vec![F::zero(); kk * grid];
        im2col(&x.data, g.cin, x.h, x.w, g.kernel, g.stride, g.pad, ho, wo, &mut cols);
        let mut out = Tensor::zeros(g.cout, ho, wo);
        let weight = &params[self.w_off..self.w_off + g.cout * kk];
        matmul(g.cout, kk, grid, weight, &cols, &mut out.data, false);
        let bias = &params[self.b_off..self.b_off + g.cout];
        for (co, b) in bias.iter().enumerate() {
            for v in &mut out.data[co * grid..(co + 1) * grid] {
                *v = *v + *b;
            }
        }
        (out, cols)
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &[F],
        cols: &[F],
        in_shape: (usize, usize, usize),
        grad_out: &Tensor<F>,
        grads: &mut [F],
    ) -> Tensor<F> {
        let g = &self.geom;
        let kk = g.cin * g.kernel * g.kernel;
        let grid = grad_out.h * grad_out.w;
        matmul_a_bt(
            g.cout,
            grid,
            kk,
            &grad_out.data,
            cols,
            &mut grads[self.w_off..self.w_off + g.cout * kk],
            true,
        );
        for co in 0..g.cout {
            let s: F = grad_out.data[co * grid..(co + 1) * grid].iter().copied().sum();
            grads[self.b_off + co] = grads[self.b_off + co] + s;
        }
        let weight = &params[self.w_off..self.w_off + g.cout * kk];
        let mut dcols = vec![F::zero(); kk * grid];
        matmul_at_b(kk, g.cout, grid, weight, &grad_out.data, &mut dcols, false);
        let (c, h, w) = in_shape;
        let mut dx = Tensor::zeros(c, h, w);
        col2im(
            &dcols,
            c,
            h,
            w,
            g.kernel,
            g.stride,
            g.pad,
            grad_out.h,
            grad_out.w,
            &mut dx.data,
        );
        dx
    }
}

/// Transposed convolution with weights `(cin, cout·k·k)` and bias `(cout)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub geom: ConvGeom,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvTranspose2d {
    pub fn param_count(&self) -> usize {
        let g = &self.geom;
        g.cin * g.cout * g.kernel * g.kernel + g.cout
    }

    pub fn forward<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> Tensor<F> {
        let g = &self.geom;
        assert_eq!(x.c, g.cin, "deconv input channels");
        let (ho, wo) = g.deconv_out(x.h, x.w).expect("deconv output size");
        let ckk = g.cout * g.kernel * g.kernel;
        let grid = x.h * x.w;
        let weight = &params[self.w_off..self.w_off + g.cin * ckk];
        let mut cols = vec![F::zero(); ckk * grid];
        matmul_at_b(ckk, g.cin, grid, weight, &x.data, &mut cols, false);
        let mut out = Tensor::zeros(g.cout, ho, wo);
        col2im(&cols, g.cout, ho, wo, g.kernel, g.stride, g.pad, x.h, x.w, &mut out.data);
        let plane = ho * wo;
        for co in 0..g.cout {
            let b = params[self.b_off + co];
            for v in &mut out.data[co * plane..(co + 1) * plane] {
                *v = *v + b;
            }
        }
        out
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &[F],
        x: &Tensor<F>,
        grad_out: &Tensor<F>,
        grads: &mut [F],
    ) -> Tensor<F> {
        let g = &self.geom;
        let ckk = g.cout * g.kernel * g.kernel;
        let grid = x.h * x.w;
        let mut dcols = vec![F::zero(); ckk * grid];
        im2col(
            &grad_out.data,
            g.cout,
            grad_out.h,
            grad_out.w,
            g.kernel,
            g.stride,
            g.pad,
            x.h,
            x.w,
            &mut dcols,
        );
        matmul_a_bt(
            g.cin,
            grid,
            ckk,
            &x.data,
            &dcols,
            &mut grads[self.w_off..self.w_off + g.cin * ckk],
            true,
        );
        let plane = grad_out.h * grad_out.w;
        for co in 0..g.cout {
            let s: F = grad_out.data[co * plane..(co + 1) * plane].iter().copied().sum();
            grads[self.b_off + co] = grads[self.b_off + co] + s;
        }
        let weight = &params[self.w_off..self.w_off + g.cin * ckk];
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        matmul(g.cin, ckk, grid, weight, &dcols, &mut dx.data, false);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop convolution used as an oracle.
    fn conv_direct(x: &Tensor<f64>, w: &[f64], b: &[f64], g: &ConvGeom) -> Tensor<f64> {
        let (ho, wo) = g.conv_out(x.h, x.w).unwrap();
        let mut out = Tensor::zeros(g.cout, ho, wo);
        for co in 0..g.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..g.cin {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    acc += w[((co * g.cin + ci) * g.kernel + ky) * g.kernel + kx]
                                        * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                    }
                    out.data[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    /// Direct scatter definition of the transposed convolution.
    fn deconv_direct(x: &Tensor<f64>, w: &[f64], b: &[f64], g: &ConvGeom) -> Tensor<f64> {
        let (ho, wo) = g.deconv_out(x.h, x.w).unwrap();
        let mut out = Tensor::zeros(g.cout, ho, wo);
        for co in 0..g.cout {
            for v in &mut out.data[co * ho * wo..(co + 1) * ho * wo] {
                *v = b[co];
            }
        }
        for ci in 0..g.cin {
            for iy in 0..x.h {
                for ix in 0..x.w {
                    let v = x.data[(ci * x.h + iy) * x.w + ix];
                    for co in 0..g.cout {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let oy = (iy * g.stride + ky) as isize - g.pad as isize;
                                let ox = (ix * g.stride + kx) as isize - g.pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < ho && (ox as usize) < wo {
                                    out.data[(co * ho + oy as usize) * wo + ox as usize] += v
                                        * w[((ci * g.cout + co) * g.kernel + ky) * g.kernel + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn filled(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + phase) * 0.731).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let geom = ConvGeom { cin: 2, cout: 3, kernel: k, stride, pad };
            let layer = Conv2d { geom, w_off: 0, b_off: 3 * 2 * k * k };
            let params = filled(layer.param_count(), 0.3);
            let x = Tensor::from_vec(2, 7, 6, filled(84, 1.7));
            let (out, _) = layer.forward(&params, &x);
            let expect = conv_direct(&x, &params[..layer.b_off], &params[layer.b_off..], &geom);
            assert_eq!(out.shape(), expect.shape());
            for (a, b) in out.data.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_matches_scatter_definition_and_doubles_resolution() {
        let geom = ConvGeom { cin: 3, cout: 2, kernel: 4, stride: 2, pad: 1 };
        let layer = ConvTranspose2d { geom, w_off: 0, b_off: 3 * 2 * 16 };
        let params = filled(layer.param_count(), 0.9);
        let x = Tensor::from_vec(3, 4, 5, filled(60, 2.1));
        let out = layer.forward(&params, &x);
        assert_eq!(out.shape(), (2, 8, 10));
        let expect = deconv_direct(&x, &params[..layer.b_off], &params[layer.b_off..], &geom);
        for (a, b) in out.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k, s, p) = (2, 5, 6, 3, 2, 1);
        let geom = ConvGeom { cin: c, cout: 1, kernel: k, stride: s, pad: p };
        let (gh, gw) = geom.conv_out(h, w).unwrap();
        let x = filled(c * h * w, 0.1);
        let y = filled(c * k * k * gh * gw, 4.2);
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, s, p, gh, gw, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, s, p, gh, gw, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
