//! Closed real intervals with outward-widened arithmetic.
//!
//! Results of every operation are widened by a relative ulp-scale margin so
//! that enclosures survive floating-point rounding.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

const WIDEN: f64 = 4.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

fn widen(lo: f64, hi: f64) -> Interval {
    let m = WIDEN * lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    Interval {
        lo: lo - m,
        hi: hi + m,
    }
}

impl Interval {
    /// Interval spanning both endpoints, in either order.
    pub fn new(a: f64, b: f64) -> Self {
        Interval {
            lo: a.min(b),
            hi: a.max(b),
        }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    /// Symmetric interval `[-r, r]`.
    pub fn symmetric(r: f64) -> Self {
        Interval::new(-r.abs(), r.abs())
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Largest absolute value in the interval.
    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn scale(&self, k: f64) -> Interval {
        let (a, b) = (self.lo * k, self.hi * k);
        widen(a.min(b), a.max(b))
    }

    /// Square, tight at intervals straddling zero.
    pub fn sqr(&self) -> Interval {
        if self.lo >= 0.0 {
            widen(self.lo * self.lo, self.hi * self.hi)
        } else if self.hi <= 0.0 {
            widen(self.hi * self.hi, self.lo * self.lo)
        } else {
            widen(0.0, self.mag() * self.mag())
        }
    }

    pub fn powi(&self, n: u32) -> Interval {
        match n {
            0 => Interval::point(1.0),
            1 => *self,
            _ if n % 2 == 0 => self.sqr().powi(n / 2),
            _ => {
                // odd powers are monotone
                let (a, b) = (self.lo.powi(n as i32), self.hi.powi(n as i32));
                widen(a, b)
            }
        }
    }

    /// Gaussian bump `exp(-a)` for `a >= 0`, monotone decreasing.
    pub fn exp_neg(&self) -> Interval {
        let lo = (-self.hi).exp();
        let hi = (-self.lo.max(0.0)).exp();
        widen(lo, hi)
    }

    /// Expand about the midpoint by a factor `k >= 1`.
    pub fn inflate(&self, k: f64) -> Interval {
        let m = self.mid();
        let r = 0.5 * self.width() * k;
        widen(m - r, m + r)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, o: Interval) -> Interval {
        widen(self.lo + o.lo, self.hi + o.hi)
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, o: Interval) -> Interval {
        widen(self.lo - o.hi, self.hi - o.lo)
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval {
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, o: Interval) -> Interval {
        let c = [
            self.lo * o.lo,
            self.lo * o.hi,
            self.hi * o.lo,
            self.hi * o.hi,
        ];
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        widen(lo, hi)
    }
}

impl Mul<f64> for Interval {
    type Output = Interval;
    fn mul(self, k: f64) -> Interval {
        self.scale(k)
    }
}

impl Add<f64> for Interval {
    type Output = Interval;
    fn add(self, k: f64) -> Interval {
        widen(self.lo + k, self.hi + k)
    }
}

/// Scalars the demo vector fields are written against, so one definition
/// yields both a point evaluation and an interval enclosure.
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn sq(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn sq(self) -> Self {
        self * self
    }
}

impl Scalar for Interval {
    fn cst(v: f64) -> Self {
        Interval::point(v)
    }
    fn sq(self) -> Self {
        self.sqr()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_straddling_zero_is_nonnegative() {
        let s = Interval::new(-2.0, 1.0).sqr();
        assert!(s.lo() <= 0.0 && s.lo() > -1e-12);
        assert!(s.contains(4.0));
    }

    #[test]
    fn odd_power_keeps_sign() {
        let c = Interval::new(-1.0, 2.0).powi(3);
        assert!(c.contains(-1.0) && c.contains(8.0));
    }

    proptest! {
        #[test]
        fn products_enclose_pointwise(a in -5.0..5.0f64, b in 0.0..3.0f64,
                                      c in -5.0..5.0f64, d in 0.0..3.0f64,
                                      s in 0.0..1.0f64, t in 0.0..1.0f64) {
            let x = Interval::new(a, a + b);
            let y = Interval::new(c, c + d);
            let px = a + s * b;
            let py = c + t * d;
            prop_assert!((x * y).contains(px * py));
            prop_assert!((x + y).contains(px + py));
            prop_assert!((x - y).contains(px - py));
            prop_assert!(x.sqr().contains(px * px));
            prop_assert!(x.powi(3).contains(px.powi(3)));
        }
    }
}
