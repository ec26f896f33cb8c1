//! A small hand-written convolutional network stack: activations are stored
//! channel-major as `(C, B, H, W)` so a 3x3 convolution over the whole batch
//! is a single GEMM against the im2col matrix.

mod layers;
mod optim;
mod toy;
mod unet;

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub use layers::*;
pub use optim::{clip_grad_norm, Adam, Ema};
pub use toy::ToyNet;
pub use unet::{ArchConfig, UNet, UNetTape};

use crate::error::{DalError, Result};

/// Floating-point element type of the network (`f32` for training and
/// inference, `f64` for gradient checks).
pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;

    /// `C = alpha * A B + beta * C` with arbitrary strides.
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
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
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
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too short");
                // SAFETY: the asserts above bound every index the kernel
                // touches for non-negative strides, which is all we pass.
                unsafe {
                    $gemm(
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
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Activation tensor laid out `(C, B, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            b,
            h,
            w,
            data: vec![T::ZERO; c * b * h * w],
        }
    }

    pub fn zeros_like(other: &Act<T>) -> Self {
        Self::zeros(other.c, other.b, other.h, other.w)
    }

    /// Elements per channel (`B*H*W`).
    #[inline]
    pub fn plane(&self) -> usize {
        self.b * self.h * self.w
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Act<T>) -> bool {
        (self.c, self.b, self.h, self.w) == (other.c, other.b, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Act<T>) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Named, shaped parameters in one flat buffer so optimisers and EMA work on
/// a single slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pid {
    pub offset: usize,
    pub len: usize,
}

impl Pid {
    #[inline]
    pub fn of<'a, T>(&self, data: &'a [T]) -> &'a [T] {
        &data[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a, T>(&self, data: &'a mut [T]) -> &'a mut [T] {
        &mut data[self.offset..self.offset + self.len]
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            data: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: impl IntoIterator<Item = T>) -> Pid {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        self.data.extend(init.into_iter().take(len));
        assert_eq!(self.data.len(), offset + len, "initialiser too short");
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        Pid { offset, len }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::ZERO; self.data.len()]
    }

    /// Same layout with values converted to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Replaces values by name, checking that the layout matches exactly.
    pub fn load_named(&mut self, named: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(DalError::Format(format!(
                "checkpoint has {} tensors, architecture expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for (entry, (name, shape, values)) in self.entries.iter().zip(named) {
            if &entry.name != name || &entry.shape != shape || values.len() != entry.len {
                return Err(DalError::Format(format!(
                    "tensor `{name}` {shape:?} does not match `{}` {:?}",
                    entry.name, entry.shape
                )));
            }
            self.data[entry.offset..entry.offset + entry.len].copy_from_slice(values);
        }
        Ok(())
    }
}

/// Deterministic He-normal style initialiser.
pub(crate) fn normal_init<T: Real>(rng: &mut crate::rng::Rng, std: f64, n: usize) -> Vec<T> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(std * z)
        })
        .collect()
}

/// A trainable noise-prediction network.
pub trait EpsNet<T: Real>: Send + Sync {
    type Tape;
    fn forward(&self, p: &[T], x: &Act<T>, ts: &[f64]) -> (Act<T>, Self::Tape);
    fn backward(&self, p: &[T], g: &mut [T], tape: Self::Tape, dy: &Act<T>);
}

impl<T: Real> EpsNet<T> for UNet {
    type Tape = UNetTape<T>;
    fn forward(&self, p: &[T], x: &Act<T>, ts: &[f64]) -> (Act<T>, Self::Tape) {
        UNet::forward(self, p, x, ts)
    }
    fn backward(&self, p: &[T], g: &mut [T], tape: Self::Tape, dy: &Act<T>) {
        UNet::backward(self, p, g, tape, dy)
    }
}
