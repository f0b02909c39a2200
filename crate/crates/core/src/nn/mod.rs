//! Layer kernels over a flat parameter vector.
//!
//! Every layer is a plain descriptor holding offsets into one contiguous
//! parameter buffer, so the same network structure serves `f32` training,
//! `f64` gradient checks, the optimiser and checkpointing without copying.

pub mod conv;
pub mod depthwise;
pub mod linear;
pub mod norm;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

pub use conv::{Conv2d, ConvGeom, ConvTranspose2d};
pub use depthwise::DepthwiseConv2d;
pub use linear::Linear;
pub use norm::{GroupNorm, NormCache};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
    Depthwise(DepthwiseConv2d),
    Norm(GroupNorm),
    Relu,
    Linear(Linear),
    GlobalAvgPool,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual { body: Vec<Op>, shortcut: Vec<Op> },
}

/// Per-op state kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Saved<F> {
    Cols { cols: Vec<F>, in_shape: (usize, usize, usize) },
    Input(Tensor<F>),
    Norm(NormCache<F>),
    Output(Tensor<F>),
    Shape(usize, usize, usize),
    Residual { body: Vec<Saved<F>>, shortcut: Vec<Saved<F>> },
}

/// Hands out consecutive parameter offsets.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    next: usize,
}

impl ParamAlloc {
    pub fn new(start: usize) -> Self {
        Self { next: start }
    }

    pub fn take(&mut self, n: usize) -> usize {
        let off = self.next;
        self.next += n;
        off
    }

    pub fn position(&self) -> usize {
        self.next
    }

    pub fn conv(&mut self, geom: ConvGeom) -> Op {
        let w_off = self.take(geom.cout * geom.cin * geom.kernel * geom.kernel);
        let b_off = self.take(geom.cout);
        Op::Conv(Conv2d { geom, w_off, b_off })
    }

    pub fn deconv(&mut self, geom: ConvGeom) -> Op {
        let w_off = self.take(geom.cin * geom.cout * geom.kernel * geom.kernel);
        let b_off = self.take(geom.cout);
        Op::Deconv(ConvTranspose2d { geom, w_off, b_off })
    }

    pub fn depthwise(&mut self, channels: usize, kernel: usize, stride: usize, pad: usize) -> Op {
        let w_off = self.take(channels * kernel * kernel);
        Op::Depthwise(DepthwiseConv2d { channels, kernel, stride, pad, w_off })
    }

    pub fn norm(&mut self, channels: usize, preferred_groups: usize) -> Op {
        let gamma_off = self.take(channels);
        let beta_off = self.take(channels);
        Op::Norm(GroupNorm {
            channels,
            groups: GroupNorm::groups_for(channels, preferred_groups),
            gamma_off,
            beta_off,
        })
    }

    pub fn linear(&mut self, inputs: usize, outputs: usize) -> Op {
        let w_off = self.take(inputs * outputs);
        let b_off = self.take(outputs);
        Op::Linear(Linear { inputs, outputs, w_off, b_off })
    }
}

impl Op {
    pub fn param_count(&self) -> usize {
        match self {
            Op::Conv(c) => c.param_count(),
            Op::Deconv(d) => d.param_count(),
            Op::Depthwise(d) => d.param_count(),
            Op::Norm(n) => n.param_count(),
            Op::Linear(l) => l.param_count(),
            Op::Relu | Op::GlobalAvgPool => 0,
            Op::Residual { body, shortcut } => {
                body.iter().chain(shortcut).map(Op::param_count).sum()
            }
        }
    }

    /// Output shape for an input of shape `(c, h, w)`, or `None` if the op
    /// cannot accept it.
    pub fn out_shape(&self, (c, h, w): (usize, usize, usize)) -> Option<(usize, usize, usize)> {
        match self {
            Op::Conv(conv) => {
                (c == conv.geom.cin).then_some(())?;
                let (ho, wo) = conv.geom.conv_out(h, w)?;
                Some((conv.geom.cout, ho, wo))
            }
            Op::Deconv(d) => {
                (c == d.geom.cin).then_some(())?;
                let (ho, wo) = d.geom.deconv_out(h, w)?;
                Some((d.geom.cout, ho, wo))
            }
            Op::Depthwise(d) => {
                (c == d.channels).then_some(())?;
                let (ho, wo) = d.out_size(h, w)?;
                Some((c, ho, wo))
            }
            Op::Norm(n) => (c == n.channels).then_some((c, h, w)),
            Op::Relu => Some((c, h, w)),
            Op::Linear(l) => (c * h * w == l.inputs).then_some((l.outputs, 1, 1)),
            Op::GlobalAvgPool => Some((c, 1, 1)),
            Op::Residual { body, shortcut } => {
                let b = seq_out_shape(body, (c, h, w))?;
                let s = seq_out_shape(shortcut, (c, h, w))?;
                (b == s).then_some(b)
            }
        }
    }

    /// He-normal weights, zero biases, unit/zero norm affine.
    pub fn init<F: Scalar, R: Rng>(&self, params: &mut [F], rng: &mut R) {
        let mut he = |slice: &mut [F], fan_in: f64| {
            let std = (2.0 / fan_in.max(1.0)).sqrt();
            for v in slice {
                let z: f64 = StandardNormal.sample(rng);
                *v = F::from_f64_lossy(z * std);
            }
        };
        match self {
            Op::Conv(c) => {
                let g = &c.geom;
                let n = g.cout * g.cin * g.kernel * g.kernel;
                he(&mut params[c.w_off..c.w_off + n], (g.cin * g.kernel * g.kernel) as f64);
                params[c.b_off..c.b_off + g.cout].fill(F::zero());
            }
            Op::Deconv(d) => {
                let g = &d.geom;
                let n = g.cin * g.cout * g.kernel * g.kernel;
                let fan_in = (g.cin * g.kernel * g.kernel) as f64 / (g.stride * g.stride) as f64;
                he(&mut params[d.w_off..d.w_off + n], fan_in);
                params[d.b_off..d.b_off + g.cout].fill(F::zero());
            }
            Op::Depthwise(d) => {
                let n = d.param_count();
                he(&mut params[d.w_off..d.w_off + n], (d.kernel * d.kernel) as f64);
            }
            Op::Norm(n) => {
                params[n.gamma_off..n.gamma_off + n.channels].fill(F::one());
                params[n.beta_off..n.beta_off + n.channels].fill(F::zero());
            }
            Op::Linear(l) => {
                he(&mut params[l.w_off..l.w_off + l.inputs * l.outputs], l.inputs as f64);
                params[l.b_off..l.b_off + l.outputs].fill(F::zero());
            }
            Op::Relu | Op::GlobalAvgPool => {}
            Op::Residual { body, shortcut } => {
                for op in body.iter().chain(shortcut) {
                    op.init(params, rng);
                }
            }
        }
    }

    pub fn forward<F: Scalar>(&self, params: &[F], x: Tensor<F>) -> (Tensor<F>, Saved<F>) {
        match self {
            Op::Conv(conv) => {
                let in_shape = x.shape();
                let (y, cols) = conv.forward(params, &x);
                (y, Saved::Cols { cols, in_shape })
            }
            Op::Deconv(d) => {
                let y = d.forward(params, &x);
                (y, Saved::Input(x))
            }
            Op::Depthwise(d) => {
                let y = d.forward(params, &x);
                (y, Saved::Input(x))
            }
            Op::Norm(n) => {
                let (y, cache) = n.forward(params, &x);
                (y, Saved::Norm(cache))
            }
            Op::Relu => {
                let mut y = x;
                for v in &mut y.data {
                    *v = v.max(F::zero());
                }
                let saved = Saved::Output(y.clone());
                (y, saved)
            }
            Op::Linear(l) => {
                let y = l.forward(params, &x);
                (y, Saved::Input(x))
            }
            Op::GlobalAvgPool => {
                let plane = F::from_usize(x.plane()).unwrap();
                let data = (0..x.c)
                    .map(|c| x.channel(c).iter().copied().sum::<F>() / plane)
                    .collect();
                let shape = x.shape();
                (Tensor::from_vec(x.c, 1, 1, data), Saved::Shape(shape.0, shape.1, shape.2))
            }
            Op::Residual { body, shortcut } => {
                let (mut y, body_saved) = forward_seq(body, params, x.clone());
                let (s, short_saved) = forward_seq(shortcut, params, x);
                y.add_assign(&s);
                (
                    y,
                    Saved::Residual {
                        body: body_saved,
                        shortcut: short_saved,
                    },
                )
            }
        }
    }

    /// Forward pass that keeps no state; used in evaluation mode.
    pub fn infer<F: Scalar>(&self, params: &[F], x: Tensor<F>) -> Tensor<F> {
        match self {
            Op::Conv(conv) => conv.forward(params, &x).0,
            Op::Deconv(d) => d.forward(params, &x),
            Op::Depthwise(d) => d.forward(params, &x),
            Op::Norm(n) => n.forward(params, &x).0,
            Op::Relu => {
                let mut y = x;
                for v in &mut y.data {
                    *v = v.max(F::zero());
                }
                y
            }
            Op::Residual { body, shortcut } => {
                let mut y = infer_seq(body, params, x.clone());
                y.add_assign(&infer_seq(shortcut, params, x));
                y
            }
            Op::Linear(_) | Op::GlobalAvgPool => self.forward(params, x).0,
        }
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &[F],
        saved: &Saved<F>,
        grad: Tensor<F>,
        grads: &mut [F],
    ) -> Tensor<F> {
        match (self, saved) {
            (Op::Conv(conv), Saved::Cols { cols, in_shape }) => {
                conv.backward(params, cols, *in_shape, &grad, grads)
            }
            (Op::Deconv(d), Saved::Input(x)) => d.backward(params, x, &grad, grads),
            (Op::Depthwise(d), Saved::Input(x)) => d.backward(params, x, &grad, grads),
            (Op::Norm(n), Saved::Norm(cache)) => n.backward(params, cache, &grad, grads),
            (Op::Relu, Saved::Output(y)) => {
                let mut g = grad;
                for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                    if *yv <= F::zero() {
                        *gv = F::zero();
                    }
                }
                g
            }
            (Op::Linear(l), Saved::Input(x)) => l.backward(params, x, &grad, grads),
            (Op::GlobalAvgPool, Saved::Shape(c, h, w)) => {
                let plane = h * w;
                let inv = F::one() / F::from_usize(plane).unwrap();
                let mut dx = Tensor::zeros(*c, *h, *w);
                for ch in 0..*c {
                    let g = grad.data[ch] * inv;
                    dx.data[ch * plane..(ch + 1) * plane].fill(g);
                }
                dx
            }
            (Op::Residual { body, shortcut }, Saved::Residual { body: bs, shortcut: ss }) => {
                let mut dx = backward_seq(body, params, bs, grad.clone(), grads);
                dx.add_assign(&backward_seq(shortcut, params, ss, grad, grads));
                dx
            }
            _ => unreachable!("saved state does not match op"),
        }
    }
}

pub fn seq_out_shape(ops: &[Op], mut shape: (usize, usize, usize)) -> Option<(usize, usize, usize)> {
    for op in ops {
        shape = op.out_shape(shape)?;
        if shape.0 == 0 || shape.1 == 0 || shape.2 == 0 {
            return None;
        }
    }
    Some(shape)
}

pub fn seq_param_count(ops: &[Op]) -> usize {
    ops.iter().map(Op::param_count).sum()
}

pub fn init_seq<F: Scalar, R: Rng>(ops: &[Op], params: &mut [F], rng: &mut R) {
    for op in ops {
        op.init(params, rng);
    }
}

pub fn forward_seq<F: Scalar>(ops: &[Op], params: &[F], mut x: Tensor<F>) -> (Tensor<F>, Vec<Saved<F>>) {
    let mut saved = Vec::with_capacity(ops.len());
    for op in ops {
        let (y, s) = op.forward(params, x);
        saved.push(s);
        x = y;
    }
    (x, saved)
}

pub fn infer_seq<F: Scalar>(ops: &[Op], params: &[F], mut x: Tensor<F>) -> Tensor<F> {
    for op in ops {
        x = op.infer(params, x);
    }
    x
}

pub fn backward_seq<F: Scalar>(
    ops: &[Op],
    params: &[F],
    saved: &[Saved<F>],
    mut grad: Tensor<F>,
    grads: &mut [F],
) -> Tensor<F> {
    for (op, s) in ops.iter().zip(saved).rev() {
        grad = op.backward(params, s, grad, grads);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Central-difference check of every op's backward pass on
    /// `L = Σ r ⊙ op(x)` for a fixed random `r`.
    fn check_op(ops: Vec<Op>, n_params: usize, in_shape: (usize, usize, usize)) {
        let mut rng = seed::rng(11);
        let mut params = vec![0.0f64; n_params];
        init_seq(&ops, &mut params, &mut rng);
        for p in params.iter_mut() {
            *p += rng.gen_range(-0.1..0.1);
        }
        let (c, h, w) = in_shape;
        let x = Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let out_shape = seq_out_shape(&ops, in_shape).unwrap();
        let r: Vec<f64> = (0..out_shape.0 * out_shape.1 * out_shape.2)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let loss = |p: &[f64], x: &Tensor<f64>| -> f64 {
            let y = infer_seq(&ops, p, x.clone());
            y.data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, saved) = forward_seq(&ops, &params, x.clone());
        let mut grads = vec![0.0; n_params];
        let dx = backward_seq(&ops, &params, &saved, Tensor::from_vec(out_shape.0, out_shape.1, out_shape.2, r.clone()), &mut grads);
        let h_step = 1e-6;
        for i in 0..n_params {
            let mut pp = params.clone();
            pp[i] += h_step;
            let fp = loss(&pp, &x);
            pp[i] -= 2.0 * h_step;
            let fm = loss(&pp, &x);
            let fd = (fp - fm) / (2.0 * h_step);
            assert!((fd - grads[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", grads[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h_step;
            let fp = loss(&params, &xp);
            xp.data[i] -= 2.0 * h_step;
            let fm = loss(&params, &xp);
            let fd = (fp - fm) / (2.0 * h_step);
            assert!((fd - dx.data[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "input {i}: fd {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut a = ParamAlloc::default();
        let op = a.conv(ConvGeom { cin: 2, cout: 3, kernel: 3, stride: 2, pad: 1 });
        check_op(vec![op], a.position(), (2, 5, 5));
    }

    #[test]
    fn deconv_gradients() {
        let mut a = ParamAlloc::default();
        let op = a.deconv(ConvGeom { cin: 2, cout: 2, kernel: 4, stride: 2, pad: 1 });
        check_op(vec![op], a.position(), (2, 3, 3));
    }

    #[test]
    fn depthwise_norm_relu_gradients() {
        let mut a = ParamAlloc::default();
        let ops = vec![a.depthwise(4, 3, 2, 1), a.norm(4, 2), Op::Relu];
        check_op(ops, a.position(), (4, 5, 4));
    }

    #[test]
    fn head_gradients() {
        let mut a = ParamAlloc::default();
        let ops = vec![Op::GlobalAvgPool, a.linear(3, 4), Op::Relu, a.linear(4, 1)];
        check_op(ops, a.position(), (3, 2, 2));
    }

    #[test]
    fn residual_gradients() {
        let mut a = ParamAlloc::default();
        let body = vec![
            a.depthwise(2, 3, 2, 1),
            a.conv(ConvGeom { cin: 2, cout: 4, kernel: 1, stride: 1, pad: 0 }),
            a.norm(4, 2),
        ];
        let shortcut = vec![a.conv(ConvGeom { cin: 2, cout: 4, kernel: 1, stride: 2, pad: 0 })];
        check_op(vec![Op::Residual { body, shortcut }], a.position(), (2, 4, 4));
    }
}
