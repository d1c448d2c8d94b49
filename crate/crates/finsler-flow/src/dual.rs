//! Forward-mode automatic differentiation with nestable dual numbers.
//!
//! A dual number `a + b·ε` (ε² = 0) carries a value together with one
//! directional-derivative coefficient. Arithmetic on duals applies the chain
//! rule exactly, so derivatives are free of truncation error — only ordinary
//! floating-point roundoff remains.
//!
//! Higher and mixed derivatives come from *nesting*: `Dual<Dual<f64>>` tracks
//! two independent ε directions, `Dual<Dual<Dual<f64>>>` three, and so on.
//! Every function in this crate that must be differentiated is written
//! generically over [`Real`], which both `f64` and `Dual<T>` implement; the
//! caller chooses the derivative order by choosing the scalar type and
//! seeding ε components. Fiber (y) derivatives of the metric functions need
//! towers up to depth six: e.g. the y-Hessian of F²·Ric stacks two seeds on
//! top of the four the curvature itself consumes.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by `f64` and dual towers of any depth.
///
/// `value()` strips all ε layers (the nested primal); `scale` multiplies by a
/// plain constant without promoting it to a full tower, which keeps deep
/// towers cheap.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(c: f64) -> Self;
    fn value(&self) -> f64;
    fn scale(self, c: f64) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Real for f64 {
    fn from_f64(c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// One level of a dual tower: value `val` plus derivative coefficient `eps`
/// along this level's seed direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub val: T,
    pub eps: T,
}

impl<T: Real> Dual<T> {
    /// Lift a scalar with no dependence on this level's direction.
    pub fn constant(v: T) -> Self {
        Dual { val: v, eps: T::zero() }
    }

    /// Lift a scalar that *is* this level's seed variable (ε coefficient 1).
    pub fn active(v: T) -> Self {
        Dual { val: v, eps: T::one() }
    }
}

/// First- and second-level aliases; deeper towers are spelled out at use sites.
pub type D1 = Dual<f64>;
pub type D2 = Dual<D1>;
pub type D3 = Dual<D2>;

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    fn add(self, r: Self) -> Self {
        Dual { val: self.val + r.val, eps: self.eps + r.eps }
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, r: Self) -> Self {
        Dual { val: self.val - r.val, eps: self.eps - r.eps }
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, r: Self) -> Self {
        Dual {
            val: self.val * r.val,
            eps: self.val * r.eps + self.eps * r.val,
        }
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    fn div(self, r: Self) -> Self {
        let q = self.val / r.val;
        Dual { val: q, eps: (self.eps - q * r.eps) / r.val }
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual { val: -self.val, eps: -self.eps }
    }
}

impl<T: Real> Real for Dual<T> {
    fn from_f64(c: f64) -> Self {
        Dual { val: T::from_f64(c), eps: T::zero() }
    }
    fn value(&self) -> f64 {
        self.val.value()
    }
    fn scale(self, c: f64) -> Self {
        Dual { val: self.val.scale(c), eps: self.eps.scale(c) }
    }
    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        Dual { val: r, eps: self.eps.scale(0.5) / r }
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        Dual { val: e, eps: self.eps * e }
    }
    fn sin(self) -> Self {
        Dual { val: self.val.sin(), eps: self.eps * self.val.cos() }
    }
    fn cos(self) -> Self {
        Dual { val: self.val.cos(), eps: -(self.eps * self.val.sin()) }
    }
}

/// Lift an `f64` slice into any `Real` as constants.
pub fn lift_slice<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&v| T::from_f64(v)).collect()
}

/// Copy a scalar vector one dual level up, seeding component `seed`.
pub fn seed_component<T: Real>(v: &[T], seed: usize) -> Vec<Dual<T>> {
    v.iter()
        .enumerate()
        .map(|(i, &c)| if i == seed { Dual::active(c) } else { Dual::constant(c) })
        .collect()
}

/// Copy a scalar vector one dual level up with every component constant.
pub fn promote<T: Real>(v: &[T]) -> Vec<Dual<T>> {
    v.iter().map(|&c| Dual::constant(c)).collect()
}
