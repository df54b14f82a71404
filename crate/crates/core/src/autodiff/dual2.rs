//! Second-order forward-mode dual numbers with `K` tracked input directions.
//!
//! Only pure second derivatives ∂²f/∂x_k² are carried; mixed partials are not.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual2<const K: usize> {
    pub value: f64,
    pub d1: [f64; K],
    pub d2: [f64; K],
}

impl<const K: usize> Default for Dual2<K> {
    fn default() -> Self {
        Self::constant(0.0)
    }
}

impl<const K: usize> Dual2<K> {
    pub const fn constant(value: f64) -> Self {
        Dual2 {
            value,
            d1: [0.0; K],
            d2: [0.0; K],
        }
    }

    /// Independent variable along direction `axis`.
    pub fn variable(value: f64, axis: usize) -> Self {
        let mut d = Self::constant(value);
        d.d1[axis] = 1.0;
        d
    }

    /// Applies a scalar function given its value and first two derivatives at `self.value`.
    #[inline]
    pub fn chain(&self, f: f64, df: f64, d2f: f64) -> Self {
        let mut out = Self::constant(f);
        for k in 0..K {
            out.d1[k] = df * self.d1[k];
            out.d2[k] = d2f * self.d1[k] * self.d1[k] + df * self.d2[k];
        }
        out
    }

    /// `self += a * x`
    #[inline]
    pub fn axpy(&mut self, a: f64, x: &Self) {
        self.value += a * x.value;
        for k in 0..K {
            self.d1[k] += a * x.d1[k];
            self.d2[k] += a * x.d2[k];
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        let mut out = *self;
        out.value *= a;
        for k in 0..K {
            out.d1[k] *= a;
            out.d2[k] *= a;
        }
        out
    }

    pub fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    pub fn ln(&self) -> Self {
        let x = self.value;
        self.chain(x.ln(), 1.0 / x, -1.0 / (x * x))
    }

    pub fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.value))
    }

    pub fn powi(&self, n: i32) -> Self {
        let x = self.value;
        let nf = n as f64;
        self.chain(
            x.powi(n),
            nf * x.powi(n - 1),
            nf * (nf - 1.0) * x.powi(n - 2),
        )
    }

    pub fn sigmoid(&self) -> Self {
        let s = sigmoid(self.value);
        let ds = s * (1.0 - s);
        self.chain(s, ds, ds * (1.0 - 2.0 * s))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<const K: usize> Add for Dual2<K> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl<const K: usize> AddAssign for Dual2<K> {
    fn add_assign(&mut self, rhs: Self) {
        self.axpy(1.0, &rhs);
    }
}

impl<const K: usize> Add<f64> for Dual2<K> {
    type Output = Self;
    fn add(mut self, rhs: f64) -> Self {
        self.value += rhs;
        self
    }
}

impl<const K: usize> Sub for Dual2<K> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self.axpy(-1.0, &rhs);
        self
    }
}

impl<const K: usize> Neg for Dual2<K> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<const K: usize> Mul for Dual2<K> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::constant(self.value * rhs.value);
        for k in 0..K {
            out.d1[k] = self.d1[k] * rhs.value + self.value * rhs.d1[k];
            out.d2[k] = self.d2[k] * rhs.value
                + 2.0 * self.d1[k] * rhs.d1[k]
                + self.value * rhs.d2[k];
        }
        out
    }
}

impl<const K: usize> Mul<f64> for Dual2<K> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.scale(rhs)
    }
}

impl<const K: usize> Div for Dual2<K> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let r = rhs.value;
        let inv = rhs.chain(1.0 / r, -1.0 / (r * r), 2.0 / (r * r * r));
        self * inv
    }
}
