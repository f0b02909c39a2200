//! Dense single-sample tensors and the scalar abstraction used by every
//! kernel. Training runs in `f32`; `f64` exists for gradient checking.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type with a matrix-multiply kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    /// `C = alpha * A(m×k) B(k×n) + beta * C(m×n)` with explicit row/column
    /// strides, as in `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            #[allow(clippy::too_many_arguments)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too short");
                // SAFETY: the extents of all three operands were checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Row-major `C(m×n) = A(m×k) · B(k×n)` (overwrites C when `accumulate` is false).
pub fn matmul<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], accumulate: bool) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `C(m×n) = Aᵀ · B` where A is stored row-major as (k×m).
pub fn matmul_at_b<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], accumulate: bool) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `C(m×n) = A · Bᵀ` where B is stored row-major as (n×k).
pub fn matmul_a_bt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], accumulate: bool) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1);
}

/// A channel-major `(C, H, W)` tensor holding one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![F::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|x| G::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }
}

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}
