use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalisation over `(channels / groups, H, W)` blocks of one sample,
/// followed by a per-channel affine map. Statistics never cross samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma_off: usize,
    pub beta_off: usize,
}

/// Saved normalised activations and per-group inverse standard deviations.
#[derive(Debug, Clone)]
pub struct NormCache<F> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<F>,
}

impl GroupNorm {
    /// Largest group count ≤ `preferred` that divides `channels`.
    pub fn groups_for(channels: usize, preferred: usize) -> usize {
        (1..=preferred.min(channels).max(1))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> (Tensor<F>, NormCache<F>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let per = self.channels / self.groups;
        let block = per * x.plane();
        let n = F::from_usize(block).unwrap();
        let eps = F::from_f64_lossy(GROUP_NORM_EPS);
        let mut xhat = Tensor::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let src = &x.data[g * block..(g + 1) * block];
            let mean = src.iter().copied().sum::<F>() / n;
            let var = src.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / n;
            let istd = F::one() / (var + eps).sqrt();
            for (d, s) in xhat.data[g * block..(g + 1) * block].iter_mut().zip(src) {
                *d = (*s - mean) * istd;
            }
            inv_std.push(istd);
        }
        let plane = x.plane();
        let mut out = xhat.clone();
        for c in 0..self.channels {
            let gamma = params[self.gamma_off + c];
            let beta = params[self.beta_off + c];
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = *v * gamma + beta;
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &[F],
        cache: &NormCache<F>,
        grad_out: &Tensor<F>,
        grads: &mut [F],
    ) -> Tensor<F> {
        let plane = grad_out.plane();
        let xhat = &cache.xhat;
        let mut dxhat = grad_out.clone();
        for c in 0..self.channels {
            let g = &grad_out.data[c * plane..(c + 1) * plane];
            let xh = &xhat.data[c * plane..(c + 1) * plane];
            let dgamma: F = g.iter().zip(xh).map(|(a, b)| *a * *b).sum();
            let dbeta: F = g.iter().copied().sum();
            grads[self.gamma_off + c] = grads[self.gamma_off + c] + dgamma;
            grads[self.beta_off + c] = grads[self.beta_off + c] + dbeta;
            let gamma = params[self.gamma_off + c];
            for v in &mut dxhat.data[c * plane..(c + 1) * plane] {
                *v = *v * gamma;
            }
        }
        let per = self.channels / self.groups;
        let block = per * plane;
        let n = F::from_usize(block).unwrap();
        let mut dx = Tensor::zeros(grad_out.c, grad_out.h, grad_out.w);
        for g in 0..self.groups {
            let r = g * block..(g + 1) * block;
            let dxh = &dxhat.data[r.clone()];
            let xh = &xhat.data[r.clone()];
            let sum_d: F = dxh.iter().copied().sum();
            let sum_dx: F = dxh.iter().zip(xh).map(|(a, b)| *a * *b).sum();
            let scale = cache.inv_std[g] / n;
            for ((d, a), b) in dx.data[r].iter_mut().zip(dxh).zip(xh) {
                *d = scale * (n * *a - sum_d - *b * sum_dx);
            }
        }
        dx
    }
}
