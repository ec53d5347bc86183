//! Dense N-d arrays with reverse-mode automatic differentiation.
//!
//! The operation set is exactly what the coupling network needs: 2-d
//! convolution, a handful of elementwise ops, channel split/concat, pixel
//! shuffle/unshuffle and a scalar sum reduction. Ops run eagerly and are
//! recorded on a [`graph::Graph`] tape; [`graph::Graph::backward`] replays the
//! tape once in reverse. A finite-difference checker lives in [`gradcheck`].

pub mod gradcheck;
pub mod graph;
pub mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type of a tensor's payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating-point element types the tensor core runs on.
///
/// f32 is the training dtype; f64 exists so finite-difference oracles have
/// enough headroom to resolve gradients.
pub trait Scalar: num_traits::Float + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
    /// Largest input `exp` accepts before the result risks overflow.
    const EXP_INPUT_BOUND: f64;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Row-major `c = alpha * a(m,k) . b(k,n) + beta * c`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        unsafe {
            Self::gemm_strided(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    /// General strided gemm over raw pointers; rs/cs are row/column strides in
    /// elements. Callers guarantee the pointed-to regions are valid.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const EXP_INPUT_BOUND: f64 = 80.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const EXP_INPUT_BOUND: f64 = 700.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major N-d array.
///
/// Payloads are shared (`Arc`), so cloning a tensor is cheap; mutation goes
/// through [`Tensor::data_mut`], which copies only when the payload is shared.
/// Values are immutable once produced by an op — only gradient accumulation
/// writes after construction.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    /// Leaf tensors with `requires_grad` receive a gradient from `backward`.
    pub requires_grad: bool,
    /// Populated on leaves by `backward`; same shape as `data`.
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![T::zero(); numel]), requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), requires_grad: false, grad: None }
    }

    /// Builder-style `requires_grad` marker.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable payload access; copies if the payload is currently shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::<Vec<T>>::make_mut(&mut self.data).as_mut_slice()
    }

    /// Take the payload out, cloning only if it is shared.
    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data: Vec<T> = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), requires_grad: false, grad: None }
    }

    /// Cast by value through f64; used to move models between dtypes.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), requires_grad: false, grad: None }
    }

    /// Standard-normal draws scaled by `std`. Sampling happens in f64 so the
    /// stream is identical for f32 and f64 tensors under the same rng state.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel).map(|_| T::from_f64(normal.sample(rng) * std)).collect();
        Tensor { shape, data: Arc::new(data), requires_grad: false, grad: None }
    }
}

/// Fixed work-chunk length for elementwise parallel loops. Chunking is by
/// length, never by thread count, so results do not depend on parallelism.
pub(crate) const ELEMWISE_CHUNK: usize = 1 << 14;

/// Parallel elementwise map of one slice.
pub(crate) fn par_map<T: Scalar>(a: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    use rayon::prelude::*;
    (0..a.len())
        .into_par_iter()
        .with_min_len(ELEMWISE_CHUNK)
        .map(|i| f(a[i]))
        .collect()
}

/// Parallel elementwise map of two equally long slices.
pub(crate) fn par_zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), b.len());
    (0..a.len())
        .into_par_iter()
        .with_min_len(ELEMWISE_CHUNK)
        .map(|i| f(a[i], b[i]))
        .collect()
}

/// `acc += add`, elementwise, in parallel.
pub(crate) fn par_add_assign<T: Scalar>(acc: &mut [T], add: &[T]) {
    use rayon::prelude::*;
    debug_assert_eq!(acc.len(), add.len());
    acc.par_chunks_mut(ELEMWISE_CHUNK).zip(add.par_chunks(ELEMWISE_CHUNK)).for_each(|(a, b)| {
        for (a, &b) in a.iter_mut().zip(b) {
            *a = *a + b;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn data_mut_does_not_leak_into_clones() {
        let mut a = Tensor::<f32>::full(vec![4], 1.0);
        let b = a.clone();
        a.data_mut()[0] = 9.0;
        assert_eq!(b.data()[0], 1.0);
        assert_eq!(a.data()[0], 9.0);
    }

    #[test]
    fn randn_stream_is_dtype_independent() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let mut r2 = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn(vec![8], 0.5, &mut r1);
        let b = Tensor::<f64>::randn(vec![8], 0.5, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
