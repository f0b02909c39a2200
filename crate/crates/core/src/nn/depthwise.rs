use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Per-channel spatial convolution with weights `(c, k·k)` and no bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthwiseConv2d {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub w_off: usize,
}

impl DepthwiseConv2d {
    pub fn param_count(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |n: usize| {
            (n + 2 * self.pad)
                .checked_sub(self.kernel)
                .map(|v| v / self.stride + 1)
        };
        Some((f(h)?, f(w)?))
    }

    fn taps(&self, oy: usize, ox: usize, ky: usize, kx: usize, h: usize, w: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
            None
        } else {
            Some(iy as usize * w + ix as usize)
        }
    }

    pub fn forward<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.channels, "depthwise channels");
        let (ho, wo) = self.out_size(x.h, x.w).expect("depthwise output size");
        let k = self.kernel;
        let mut out = Tensor::zeros(x.c, ho, wo);
        for c in 0..x.c {
            let kern = &params[self.w_off + c * k * k..self.w_off + (c + 1) * k * k];
            let src = x.channel(c);
            let dst = &mut out.data[c * ho * wo..(c + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = F::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some(i) = self.taps(oy, ox, ky, kx, x.h, x.w) {
                                acc = acc + kern[ky * k + kx] * src[i];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
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
        let k = self.kernel;
        let (ho, wo) = (grad_out.h, grad_out.w);
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        for c in 0..x.c {
            let kern = &params[self.w_off + c * k * k..self.w_off + (c + 1) * k * k];
            let src = x.channel(c);
            let g = grad_out.channel(c);
            let dsrc = &mut dx.data[c * x.h * x.w..(c + 1) * x.h * x.w];
            let gk = &mut grads[self.w_off + c * k * k..self.w_off + (c + 1) * k * k];
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g[oy * wo + ox];
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some(i) = self.taps(oy, ox, ky, kx, x.h, x.w) {
                                gk[ky * k + kx] = gk[ky * k + kx] + go * src[i];
                                dsrc[i] = dsrc[i] + go * kern[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}
