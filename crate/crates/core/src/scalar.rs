//! Scalar abstraction shared by the exact and floating-point backends.
//!
//! Everything that is pure algebra (tensors, composition, sparse polynomials,
//! Jacobians, kernels, fully-connected products) is written against
//! [`Scalar`], so the same code runs on `f64`, `f32` and [`BigRational`].
//! Routines that need square roots, eigenvalues or ODE integration are
//! written for `f64` directly.

use std::fmt::{Debug, Display};
use std::ops::Neg;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Num, One, Signed, ToPrimitive, Zero};
use serde_json::Value;

use crate::error::{Error, Result};

/// A field element usable as a tensor entry.
pub trait Scalar:
    Clone + Debug + Display + PartialEq + PartialOrd + Num + Signed + Neg<Output = Self> + Send + Sync + 'static
{
    /// `true` for arbitrary-precision exact types.
    const EXACT: bool;

    fn from_f64(x: f64) -> Self;

    fn to_f64(&self) -> f64;

    fn from_i64(x: i64) -> Self;

    /// JSON encoding: numbers for floats, decimal or `p/q` strings for exact types.
    fn to_json(&self) -> Value;

    fn from_json(v: &Value) -> Result<Self>;

    fn is_zero_exact(&self) -> bool {
        self.is_zero()
    }
}

macro_rules! impl_float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const EXACT: bool = false;

            fn from_f64(x: f64) -> Self {
                x as $t
            }

            fn to_f64(&self) -> f64 {
                *self as f64
            }

            fn from_i64(x: i64) -> Self {
                x as $t
            }

            fn to_json(&self) -> Value {
                serde_json::Number::from_f64(*self as f64)
                    .map(Value::Number)
                    .unwrap_or(Value::Null)
            }

            fn from_json(v: &Value) -> Result<Self> {
                match v {
                    Value::Number(n) => n
                        .as_f64()
                        .map(|x| x as $t)
                        .ok_or_else(|| Error::Parse(format!("not a finite number: {n}"))),
                    Value::String(s) => parse_rational(s).map(|q| num_traits::ToPrimitive::to_f64(&q).unwrap_or(f64::NAN) as $t),
                    other => Err(Error::Parse(format!("expected a number, found {other}"))),
                }
            }
        }
    };
}

impl_float_scalar!(f64);
impl_float_scalar!(f32);

impl Scalar for BigRational {
    const EXACT: bool = true;

    /// Exact binary expansion of the float.
    fn from_f64(x: f64) -> Self {
        <BigRational as FromPrimitive>::from_f64(x).expect("finite float")
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }

    fn from_i64(x: i64) -> Self {
        BigRational::from_integer(BigInt::from(x))
    }

    fn to_json(&self) -> Value {
        Value::String(format_rational(self))
    }

    fn from_json(v: &Value) -> Result<Self> {
        match v {
            Value::String(s) => parse_rational(s),
            // Integers in JSON are exact; other numbers are read through their
            // decimal text so "0.1" stays 1/10.
            Value::Number(n) => parse_rational(&n.to_string()),
            other => Err(Error::Parse(format!("expected a rational, found {other}"))),
        }
    }
}

/// `p/q`, or just `p` for integers.
pub fn format_rational(q: &BigRational) -> String {
    if q.denom().is_one() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

/// Parses `p`, `p/q`, or a decimal literal with optional exponent (`-1.25e-3`) exactly.
pub fn parse_rational(s: &str) -> Result<BigRational> {
    let s = s.trim();
    let bad = || Error::Parse(format!("invalid rational literal {s:?}"));
    if let Some((p, q)) = s.split_once('/') {
        let p: BigInt = p.trim().parse().map_err(|_| bad())?;
        let q: BigInt = q.trim().parse().map_err(|_| bad())?;
        if q.is_zero() {
            return Err(Error::Parse(format!("zero denominator in {s:?}")));
        }
        return Ok(BigRational::new(p, q));
    }
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (s, 0),
    };
    let (negative, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let all: BigInt = format!("{int_part}{frac_part}").parse().map_err(|_| bad())?;
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10u32);
    let mut q = if scale >= 0 {
        BigRational::from_integer(all * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(all, num_traits::pow(ten, (-scale) as usize))
    };
    if negative {
        q = -q;
    }
    Ok(q)
}

/// Convenience constructor for exact literals in tests and examples.
pub fn rat(p: i64, q: i64) -> BigRational {
    BigRational::new(BigInt::from(p), BigInt::from(q))
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (x, y)| acc + x.clone() * y.clone())
}

pub(crate) fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rational_forms() {
        assert_eq!(parse_rational("3/4").unwrap(), rat(3, 4));
        assert_eq!(parse_rational("-0.75").unwrap(), rat(-3, 4));
        assert_eq!(parse_rational("15/4").unwrap(), rat(15, 4));
        assert_eq!(parse_rational("2").unwrap(), rat(2, 1));
        assert_eq!(parse_rational("1.5e2").unwrap(), rat(150, 1));
        assert_eq!(parse_rational("25e-2").unwrap(), rat(1, 4));
        assert!(parse_rational("1/0").is_err());
        assert!(parse_rational("abc").is_err());
        assert!(parse_rational(".").is_err());
    }

    #[test]
    fn rational_json_round_trip() {
        let q = rat(-7, 3);
        let v = q.to_json();
        assert_eq!(v, Value::String("-7/3".into()));
        assert_eq!(BigRational::from_json(&v).unwrap(), q);
        let decimal: Value = serde_json::from_str("0.1").unwrap();
        assert_eq!(BigRational::from_json(&decimal).unwrap(), rat(1, 10));
    }

    #[test]
    fn float_json() {
        assert_eq!(f64::from_json(&serde_json::json!(1.5)).unwrap(), 1.5);
        assert_eq!(f64::from_json(&serde_json::json!("1/4")).unwrap(), 0.25);
        assert!(f64::from_json(&serde_json::json!([1])).is_err());
    }
}
