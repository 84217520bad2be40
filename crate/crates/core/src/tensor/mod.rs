//! Dense row-major N-d tensors with a minimal reverse-mode autodiff engine.
//!
//! The op surface is exactly what the restoration networks need: 2D/3D
//! convolution, LeakyReLU, Tanh, add, scale, channel concat, and L1 loss.
//! Training records ops on a [`Graph`] tape; inference runs the same code
//! with untraced values so intermediate buffers free as they go dead.
//!
//! Every op checks its output for NaN/Inf and fails instead of letting a
//! poisoned value propagate.

mod conv;
mod graph;
mod ops;

pub use graph::{Graph, Var};

use crate::error::{Error, Result};

/// Element type for tensors: f32 for training/inference, f64 for the
/// finite-difference test rig. Bridges to the matching BLAS-style GEMM.
pub trait Scalar: num_traits::Float + std::fmt::Debug + Send + Sync + 'static {
    /// General matrix multiply with explicit strides,
    /// `C = alpha * A(m,k) B(k,n) + beta * C(m,n)`.
    ///
    /// Strides are in elements; the slices must cover every index reachable
    /// from the given dimensions and strides.
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

    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("finite f64 fits any float type")
    }

    fn to_f64(self) -> f64 {
        num_traits::cast(self).expect("float widens to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
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
                // SAFETY: callers in this module size the slices to cover the
                // strided index space; checked here defensively.
                assert!(span(m, k, rsa, csa) <= a.len());
                assert!(span(k, n, rsb, csb) <= b.len());
                assert!(span(m, n, rsc, csc) <= c.len());
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Highest linear index touched by an (r x c) matrix with the given strides,
/// plus one.
fn span(r: usize, c: usize, rs: isize, cs: isize) -> usize {
    let last = (r as isize - 1) * rs + (c as isize - 1) * cs;
    debug_assert!(last >= 0, "negative strides are not used here");
    last as usize + 1
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Consume the tensor, keeping only its backing buffer.
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("Tensor::item", format!("shape {:?} is not scalar", self.shape)))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Reinterpret the buffer under a new shape of the same total size.
    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(
                "Tensor::into_reshaped",
                format!("{:?} ({} values) cannot view as {:?}", self.shape, self.data.len(), shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        // Multiplying by zero maps finite values to zero and NaN/infinity to
        // NaN; summing in independent lanes keeps the scan vectorizable.
        const LANES: usize = 16;
        let mut acc = [T::zero(); LANES];
        let chunks = self.data.chunks_exact(LANES);
        let rem = chunks.remainder();
        for ch in chunks {
            for lane in 0..LANES {
                acc[lane] = acc[lane] + ch[lane] * T::zero();
            }
        }
        let mut s = T::zero();
        for lane in 0..LANES {
            s = s + acc[lane];
        }
        for &v in rem {
            s = s + v * T::zero();
        }
        s == T::zero()
    }

    /// Elementwise convert, e.g. f32 weights to the f64 test rig and back.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn item_requires_single_element() {
        assert_eq!(Tensor::scalar(4.0f64).item().unwrap(), 4.0);
        assert!(Tensor::<f32>::zeros(&[2]).item().is_err());
    }

    #[test]
    fn gemm_matches_hand_multiplication() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // Transposed-A view computes A^T B.
        let mut ct = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 1, 2, &b, 2, 1, 0.0, &mut ct, 2, 1);
        assert_eq!(ct, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn cast_round_trips_exactly_representable_values() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.5, -2.25, 100.0]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
