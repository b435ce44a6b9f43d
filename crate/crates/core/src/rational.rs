//! Exact rational numbers for configuration values (vote weights, approval
//! thresholds) so that tallies and eligibility checks never depend on
//! floating-point rounding.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::de::{self, Visitor};
use serde::{Deserializer, Serializer};

pub type Rational = Ratio<i64>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid rational literal {0:?}")]
pub struct ParseRationalError(pub String);

/// Parses `"3/2"`, `"0.95"`, `"1"` or `"-2.5"` into an exact rational.
pub fn parse_rational(text: &str) -> Result<Rational, ParseRationalError> {
    let err = || ParseRationalError(text.to_string());
    let text = text.trim();
    if let Some((num, den)) = text.split_once('/') {
        let num = i64::from_str(num.trim()).map_err(|_| err())?;
        let den = i64::from_str(den.trim()).map_err(|_| err())?;
        if den == 0 {
            return Err(err());
        }
        return Ok(Rational::new(num, den));
    }
    let (negative, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return Err(err());
    }
    if frac_part.len() > 15 {
        return Err(err());
    }
    let digits = format!("{int_part}{frac_part}");
    let numer = if digits.is_empty() { 0 } else { i64::from_str(&digits).map_err(|_| err())? };
    let denom = 10i64.pow(frac_part.len() as u32);
    let value = Rational::new(numer, denom);
    Ok(if negative { -value } else { value })
}

pub fn format_rational(value: &Rational) -> String {
    if *value.denom() == 1 {
        value.numer().to_string()
    } else {
        format!("{}/{}", value.numer(), value.denom())
    }
}

pub fn to_f64(value: &Rational) -> f64 {
    *value.numer() as f64 / *value.denom() as f64
}

/// Serde adapter: written as `"3/2"`, read from a string or a JSON number.
pub mod serde_text {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Rational, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_rational(value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Rational, D::Error> {
        deserializer.deserialize_any(RationalVisitor)
    }

    struct RationalVisitor;

    impl Visitor<'_> for RationalVisitor {
        type Value = Rational;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a rational as \"p/q\", a decimal string, or a number")
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<Rational, E> {
            parse_rational(v).map_err(E::custom)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<Rational, E> {
            Ok(Rational::from_integer(v))
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<Rational, E> {
            i64::try_from(v).map(Rational::from_integer).map_err(|_| E::custom("rational out of range"))
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<Rational, E> {
            // Shortest round-trip formatting recovers the decimal literal.
            parse_rational(&format!("{v}")).map_err(E::custom)
        }
    }
}
