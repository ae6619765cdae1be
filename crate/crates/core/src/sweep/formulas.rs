//! Closed-form cost model of a full-factorial option tree.
//!
//! For option counts `x = [x_1, ..., x_n]`:
//!
//! | quantity | formula |
//! |---|---|
//! | leaves `L` | `prod_i x_i` |
//! | standard steps `S_std` | `n * prod_i x_i` |
//! | rollback steps `S_rb` | `sum_i prod_{j<=i} x_j` (tree edges) |
//! | efficiency `eta` | `S_std / S_rb` |
//!
//! All arithmetic is exact.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormulaError {
    #[error("option-count list is empty")]
    Empty,
    #[error("option count at step {0} is zero")]
    ZeroOptions(usize),
    #[error("alpha must be at least 2, got {0}")]
    AlphaTooSmall(u64),
}

fn check(x: &[u64]) -> Result<(), FormulaError> {
    if x.is_empty() {
        return Err(FormulaError::Empty);
    }
    match x.iter().position(|&xi| xi == 0) {
        Some(i) => Err(FormulaError::ZeroOptions(i + 1)),
        None => Ok(()),
    }
}

/// All option-index vectors, lexicographically ordered.
pub fn enumerate_leaves(x: &[usize]) -> Vec<Vec<usize>> {
    let total = x.iter().product::<usize>();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut current = vec![0; x.len()];
    loop {
        out.push(current.clone());
        // Odometer increment from the last position.
        let mut i = x.len();
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            current[i] += 1;
            if current[i] < x[i] {
                break;
            }
            current[i] = 0;
        }
    }
}

pub fn predicted_leaf_count(x: &[u64]) -> Result<BigUint, FormulaError> {
    check(x)?;
    Ok(x.iter().fold(BigUint::one(), |acc, &xi| acc * xi))
}

pub fn predicted_steps_standard(x: &[u64]) -> Result<BigUint, FormulaError> {
    Ok(predicted_leaf_count(x)? * x.len())
}

/// Nodes per layer, `prod_{j<=i} x_j` for `i = 1..=n`.
pub fn layer_widths(x: &[u64]) -> Result<Vec<BigUint>, FormulaError> {
    check(x)?;
    let mut width = BigUint::one();
    Ok(x.iter()
        .map(|&xi| {
            width *= xi;
            width.clone()
        })
        .collect())
}

pub fn predicted_steps_rollback(x: &[u64]) -> Result<BigUint, FormulaError> {
    Ok(layer_widths(x)?.into_iter().fold(BigUint::zero(), |acc, w| acc + w))
}

pub fn efficiency(x: &[u64]) -> Result<BigRational, FormulaError> {
    let std = predicted_steps_standard(x)?;
    let rb = predicted_steps_rollback(x)?;
    Ok(BigRational::new(std.into(), rb.into()))
}

/// Limit of `eta / n` for uniform branching `alpha` as `n` grows.
pub fn efficiency_per_step_limit(alpha: u64) -> Result<BigRational, FormulaError> {
    if alpha < 2 {
        return Err(FormulaError::AlphaTooSmall(alpha));
    }
    Ok(BigRational::new((alpha - 1).into(), alpha.into()))
}

/// `[alpha; n]`.
pub fn uniform(alpha: u64, n: usize) -> Vec<u64> {
    vec![alpha; n]
}

pub fn to_u64s(x: &[usize]) -> Vec<u64> {
    x.iter().map(|&xi| xi as u64).collect()
}

fn pow10(k: i64) -> BigRational {
    let p = BigInt::from(10u32).pow(k.unsigned_abs() as u32);
    if k >= 0 {
        BigRational::from_integer(p)
    } else {
        BigRational::new(BigInt::one(), p)
    }
}

/// Decimal rendering with `sig` significant digits, rounded half away from
/// zero, trailing zeros dropped; like C's `%.{sig}g`.
pub fn to_decimal(r: &BigRational, sig: u32) -> String {
    assert!(sig >= 1, "need at least one significant digit");
    if r.is_zero() {
        return "0".into();
    }
    let a = r.abs();
    let mut e = a.numer().to_string().len() as i64 - a.denom().to_string().len() as i64;
    while a < pow10(e) {
        e -= 1;
    }
    while a >= pow10(e + 1) {
        e += 1;
    }
    let half = BigRational::new(BigInt::one(), BigInt::from(2u32));
    let mut q = (a * pow10(sig as i64 - 1 - e) + half).floor().to_integer();
    let limit = BigInt::from(10u32).pow(sig);
    if q >= limit {
        q /= 10u32;
        e += 1;
    }
    let digits = q.to_string();
    let body = if e < -4 || e >= sig as i64 {
        let (head, tail) = digits.split_at(1);
        let tail = tail.trim_end_matches('0');
        let mantissa = if tail.is_empty() { head.to_owned() } else { format!("{head}.{tail}") };
        format!("{mantissa}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    } else if e >= 0 {
        let (int, frac) = digits.split_at(e as usize + 1);
        let frac = frac.trim_end_matches('0');
        if frac.is_empty() { int.to_owned() } else { format!("{int}.{frac}") }
    } else {
        let frac = format!("{}{digits}", "0".repeat((-e - 1) as usize));
        format!("0.{}", frac.trim_end_matches('0'))
    };
    if r.is_negative() { format!("-{body}") } else { body }
}

/// `p/q` in lowest terms, or `p` when `q = 1`.
pub fn ratio_string(r: &BigRational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}
