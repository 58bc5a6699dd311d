//! Forward-mode automatic differentiation with dual numbers.
//!
//! Code that must be differentiated exactly (loop-closure residuals, the
//! stability cost) is written generically over [`Scalar`]. Evaluating it with
//! [`Dual<f64>`] yields first derivatives; nesting as `Dual<Dual<f64>>` yields
//! second derivatives for the exact-Hessian mode.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic surface shared by `f64` and dual numbers.
///
/// Comparisons go through [`Scalar::re`] (the real part), which is the usual
/// convention for branching in forward-mode AD: control flow follows the
/// primal evaluation.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    /// Innermost real part.
    fn re(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    /// `acos` with the argument clamped to `[-1, 1]`; at the clamp boundary
    /// the derivative is taken as 0 (subgradient at the kink).
    fn acos_clamped(self) -> Self;
    /// `atan2(self, other)`.
    fn atan2(self, other: Self) -> Self;
    /// `max(0, self)` with subgradient 0 at the kink.
    fn max_zero(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn acos_clamped(self) -> Self {
        self.clamp(-1.0, 1.0).acos()
    }
    fn atan2(self, other: Self) -> Self {
        f64::atan2(self, other)
    }
    fn max_zero(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
}

/// Dual number `re + du * eps` with `eps^2 = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub du: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, du: T) -> Self {
        Self { re, du }
    }

    /// Lift a constant (zero derivative).
    pub fn constant(re: T) -> Self {
        Self {
            re,
            du: T::zero(),
        }
    }

    /// Seed a variable (unit derivative).
    pub fn variable(re: T) -> Self {
        Self { re, du: T::one() }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.re - rhs.re, self.du - rhs.du)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self::new(self.re * rhs.re, self.re * rhs.du + self.du * rhs.re)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = T::one() / rhs.re;
        Self::new(
            self.re * inv,
            (self.du * rhs.re - self.re * rhs.du) * inv * inv,
        )
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.re, -self.du)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn from_f64(v: f64) -> Self {
        Self::constant(T::from_f64(v))
    }
    fn re(self) -> f64 {
        self.re.re()
    }
    fn sin(self) -> Self {
        Self::new(self.re.sin(), self.du * self.re.cos())
    }
    fn cos(self) -> Self {
        Self::new(self.re.cos(), -(self.du * self.re.sin()))
    }
    fn sqrt(self) -> Self {
        let root = self.re.sqrt();
        let d = if root.re().abs() < 1e-300 {
            T::zero()
        } else {
            T::one() / (T::from_f64(2.0) * root)
        };
        Self::new(root, self.du * d)
    }
    fn acos_clamped(self) -> Self {
        let val = self.re.acos_clamped();
        let denom = T::one() - self.re * self.re;
        let d = if denom.re() < 1e-12 {
            T::zero()
        } else {
            -(T::one() / denom.sqrt())
        };
        Self::new(val, self.du * d)
    }
    fn atan2(self, other: Self) -> Self {
        let y = self;
        let x = other;
        let val = y.re.atan2(x.re);
        let r2 = x.re * x.re + y.re * y.re;
        let d = (x.re * y.du - y.re * x.du) / r2;
        Self::new(val, d)
    }
    fn max_zero(self) -> Self {
        if self.re() > 0.0 {
            self
        } else {
            Self::from_f64(0.0)
        }
    }
}

/// Small fixed-size vector helpers usable with any [`Scalar`].
pub mod vec3 {
    use super::Scalar;

    pub fn add<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    pub fn sub<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    pub fn scale<T: Scalar>(a: [T; 3], s: T) -> [T; 3] {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    pub fn dot<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    pub fn cross<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    pub fn norm<T: Scalar>(a: [T; 3]) -> T {
        dot(a, a).sqrt()
    }

    pub fn normalize<T: Scalar>(a: [T; 3]) -> [T; 3] {
        let n = norm(a);
        scale(a, T::one() / n)
    }

    /// Lift an `f64` vector into any scalar type as constants.
    pub fn lift<T: Scalar>(a: [f64; 3]) -> [T; 3] {
        [T::from_f64(a[0]), T::from_f64(a[1]), T::from_f64(a[2])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type D = Dual<f64>;

    #[test]
    fn product_and_chain_rules() {
        // d/dx [x^2 sin(x)] at x = 0.7
        let x = D::variable(0.7);
        let y = x * x * x.sin();
        let expected = 2.0 * 0.7 * 0.7f64.sin() + 0.7 * 0.7 * 0.7f64.cos();
        assert!((y.du - expected).abs() < 1e-14);
    }

    #[test]
    fn second_derivative_via_nesting() {
        // d^2/dx^2 [sin(x)] = -sin(x)
        let x: Dual<Dual<f64>> = Dual::new(Dual::variable(0.3), Dual::constant(1.0));
        let y = x.sin();
        assert!((y.du.du + 0.3f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn atan2_matches_finite_difference() {
        let h = 1e-7;
        let (y0, x0) = (0.4, -0.8);
        let fd = (f64::atan2(y0 + h, x0) - f64::atan2(y0 - h, x0)) / (2.0 * h);
        let d = D::variable(y0).atan2(D::constant(x0));
        assert!((d.du - fd).abs() < 1e-6);
    }

    #[test]
    fn hinge_subgradient_is_zero_at_kink() {
        let x = D::variable(0.0);
        assert_eq!(x.max_zero().du, 0.0);
        let x = D::variable(1.0);
        assert_eq!(x.max_zero().du, 1.0);
    }

    #[test]
    fn acos_clamps_out_of_range() {
        let x = D::new(1.0 + 1e-12, 1.0);
        let y = x.acos_clamped();
        assert_eq!(y.re, 0.0);
        assert_eq!(y.du, 0.0);
    }
}
