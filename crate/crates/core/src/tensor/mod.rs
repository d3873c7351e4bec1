//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable, row-major, reference-counted array of `f32`
//! (or `f64` in the gradient-checking shadow mode). All arithmetic goes
//! through a [`GradTape`], which records executed operations and replays
//! them in reverse to accumulate gradients.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{GradTape, Gradients, Padding, CLIP_EPS};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stable identity of a tensor value. Clones share the id; fresh results of
/// operations get fresh ids.
pub type TensorId = u64;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

/// Scalar element type of a tensor: `f32` for the production path, `f64`
/// for the gradient-checking shadow mode.
pub trait Element: num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static {
    const DTYPE_NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self;

    /// `c = a · b (+ c if accumulate)` over strided matrices, `c` row-major
    /// `[m, n]`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn check_gemm_bounds(m: usize, k: usize, n: usize, alen: usize, rsa: isize, csa: isize, blen: usize, rsb: isize, csb: isize, clen: usize) {
    let max_idx = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
    };
    assert!(m > 0 && k > 0 && n > 0, "gemm with empty dims");
    assert!(max_idx(m, k, rsa, csa) < alen, "gemm: a out of bounds");
    assert!(max_idx(k, n, rsb, csb) < blen, "gemm: b out of bounds");
    assert!(m * n <= clen, "gemm: c out of bounds");
}

impl Element for f32 {
    const DTYPE_NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        accumulate: bool,
    ) {
        check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len());
        let beta = if accumulate { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Element for f64 {
    const DTYPE_NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        accumulate: bool,
    ) {
        check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len());
        let beta = if accumulate { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Fill specification for [`Tensor::new`]. Seeded variants are reproducible
/// from their 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[lo, hi)`.
    Uniform { lo: f64, hi: f64, seed: u64 },
    /// He-uniform: uniform in `[-limit, limit]` with `limit = sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize, seed: u64 },
}

/// Dense n-dimensional array, row-major, immutable after construction.
///
/// Cloning is cheap (the buffer is shared) and preserves identity: a clone
/// is the same tensor as far as a [`GradTape`] is concerned.
#[derive(Debug, Clone)]
pub struct Tensor<E: Element = f32> {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Invalid("tensor shape must have at least one dimension".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::Invalid("tensor dimensions must be >= 1".into()));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Invalid(format!("tensor shape {shape:?} overflows element count")))?;
    }
    Ok(n)
}

impl<E: Element> Tensor<E> {
    /// Construct a tensor of `shape` filled per `init`.
    pub fn new(shape: &[usize], init: Init) -> Result<Self> {
        let n = checked_numel(shape)?;
        let data = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Constant(c) => vec![E::from_f64(c); n],
            Init::Uniform { lo, hi, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| E::from_f64(lo + rng.random::<f64>() * (hi - lo)))
                    .collect()
            }
            Init::HeUniform { fan_in, seed } => {
                if fan_in == 0 {
                    return Err(Error::Invalid("He init requires fan_in >= 1".into()));
                }
                let limit = (6.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| E::from_f64(-limit + rng.random::<f64>() * 2.0 * limit))
                    .collect()
            }
        };
        Ok(Self::wrap(shape.to_vec(), data))
    }

    /// Construct from an existing buffer; `data.len()` must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::wrap(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Init::Zeros)
    }

    pub fn filled(shape: &[usize], value: E) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Self::wrap(shape.to_vec(), vec![value; n]))
    }

    pub fn scalar(value: E) -> Self {
        Self::wrap(vec![1], vec![value])
    }

    pub(crate) fn wrap(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    /// Same buffer, new shape (element counts must agree), fresh identity.
    pub(crate) fn reshaped_view(&self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.len());
        Tensor {
            id: fresh_id(),
            shape,
            data: Arc::clone(&self.data),
            requires_grad: false,
        }
    }

    /// Mark this tensor as a differentiation leaf. Identity is preserved.
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of {} elements",
                self.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Replace the buffer contents, preserving identity and shape. Only the
    /// training loop uses this, under its single-writer contract.
    pub(crate) fn replace_data(&mut self, data: Vec<E>) {
        debug_assert_eq!(data.len(), self.len());
        self.data = Arc::new(data);
    }
}

impl<E: Element> PartialEq for Tensor<E> {
    /// Structural equality on shape and bit-level data (identity ignored).
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
