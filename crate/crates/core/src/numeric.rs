//! Signed base-10 scientific notation used for every numeric cell.
//!
//! The canonical form is `[+-]D.DDDDe[+-]XX`: one mantissa digit, four
//! fraction digits (five significant digits in total), and an exponent of
//! at least two digits. Rounding is round-half-to-even on the exact binary
//! value of the input.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumericError {
    #[error("non-finite numeric")]
    NonFinite,
    #[error("not a number: {0:?}")]
    NotANumber(String),
}

/// Number of digits after the mantissa point.
pub const FRACTION_DIGITS: usize = 4;

/// Formats a finite real as canonical scientific notation.
///
/// Zero (including negative zero) is always `+0.0000e+00`.
pub fn format_scientific(x: f64) -> Result<String, NumericError> {
    if !x.is_finite() {
        return Err(NumericError::NonFinite);
    }
    if x == 0.0 {
        return Ok("+0.0000e+00".to_string());
    }
    // std's exact-precision formatter is correctly rounded (half-to-even on
    // the exact binary value); we only rearrange its layout.
    let raw = format!("{:.*e}", FRACTION_DIGITS, x.abs());
    let (mantissa, exponent) = raw
        .split_once('e')
        .expect("exponent formatting always contains 'e'");
    let exponent: i32 = exponent.parse().expect("std exponent is an integer");

    let mut out = String::with_capacity(12);
    out.push(if x.is_sign_negative() { '-' } else { '+' });
    out.push_str(mantissa);
    out.push('e');
    out.push(if exponent < 0 { '-' } else { '+' });
    write!(out, "{:02}", exponent.unsigned_abs()).expect("writing to a String cannot fail");
    Ok(out)
}

/// Parses canonical scientific notation, plain decimals, or integers.
///
/// Surrounding whitespace and a missing leading sign are tolerated so that
/// slightly malformed generations still decode. The result is the closest
/// binary float to the decimal value.
pub fn parse_scientific(s: &str) -> Result<f64, NumericError> {
    let t = s.trim();
    if !looks_numeric(t) {
        return Err(NumericError::NotANumber(s.to_string()));
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(NumericError::NotANumber(s.to_string())),
    }
}

/// True when `s` is a finite real in integer, decimal or exponent notation.
pub fn is_numeric(s: &str) -> bool {
    parse_scientific(s).is_ok()
}

/// True when `s` is exactly in canonical form, e.g. `+3.1416e+03`.
pub fn is_canonical(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() < 11 {
        return false;
    }
    let sign = |c: u8| c == b'+' || c == b'-';
    sign(b[0])
        && b[1].is_ascii_digit()
        && b[2] == b'.'
        && b[3..7].iter().all(u8::is_ascii_digit)
        && b[7] == b'e'
        && sign(b[8])
        && b[9..].iter().all(u8::is_ascii_digit)
}

// Rejects the textual forms f64::from_str accepts beyond plain numerals
// ("inf", "NaN", "infinity").
fn looks_numeric(t: &str) -> bool {
    let body = t.strip_prefix(['+', '-']).unwrap_or(t);
    let mut digits = 0usize;
    let mut seen_dot = false;
    let mut chars = body.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            '0'..='9' => digits += 1,
            '.' if !seen_dot => seen_dot = true,
            _ => break,
        }
        chars.next();
    }
    if digits == 0 {
        return false;
    }
    match chars.next() {
        None => true,
        Some('e' | 'E') => {
            let rest: String = chars.collect();
            let exp = rest.strip_prefix(['+', '-']).unwrap_or(&rest);
            !exp.is_empty() && exp.bytes().all(|b| b.is_ascii_digit())
        }
        Some(_) => false,
    }
}
