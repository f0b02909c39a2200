use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Fully connected layer on a `(features, 1, 1)` tensor; weights `(out, in)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Linear {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn forward<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.len(), self.inputs, "linear input width");
        let w = &params[self.w_off..self.w_off + self.inputs * self.outputs];
        let data = (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                params[self.b_off + o] + row.iter().zip(&x.data).map(|(a, b)| *a * *b).sum::<F>()
            })
            .collect();
        Tensor::from_vec(self.outputs, 1, 1, data)
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &[F],
        x: &Tensor<F>,
        grad_out: &Tensor<F>,
        grads: &mut [F],
    ) -> Tensor<F> {
        let w = &params[self.w_off..self.w_off + self.inputs * self.outputs];
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        for o in 0..self.outputs {
            let g = grad_out.data[o];
            grads[self.b_off + o] = grads[self.b_off + o] + g;
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grads[self.w_off + o * self.inputs..self.w_off + (o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] = grow[i] + g * x.data[i];
                dx.data[i] = dx.data[i] + g * row[i];
            }
        }
        dx
    }
}
