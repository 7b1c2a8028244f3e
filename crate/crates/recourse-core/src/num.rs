//! Scalar abstraction and small dense-vector helpers.
//!
//! All numerical code in this crate is generic over [`Real`], which is
//! implemented for `f32` and `f64`. Concrete `f64` aliases for the main
//! types live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar used throughout the crate.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` literal into the working scalar type.
#[inline]
pub fn real<R: Real>(x: f64) -> R {
    R::from_f64(x).expect("literal representable in scalar type")
}

#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm1<R: Real>(v: &[R]) -> R {
    v.iter().map(|x| x.abs()).sum()
}

#[inline]
pub fn norm2<R: Real>(v: &[R]) -> R {
    v.iter().map(|&x| x * x).sum::<R>().sqrt()
}

#[inline]
pub fn norm_inf<R: Real>(v: &[R]) -> R {
    v.iter().fold(R::zero(), |m, &x| m.max(x.abs()))
}

/// Scale `v` so that its 2-norm is at most `radius`. No-op for the zero vector.
pub fn project_l2_ball<R: Real>(v: &mut [R], radius: R) {
    let n = norm2(v);
    if n > radius && n > R::zero() {
        let s = radius / n;
        for x in v.iter_mut() {
            *x = *x * s;
        }
    }
}
