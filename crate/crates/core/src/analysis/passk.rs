use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PassAtKError {
    #[error("k = {k} exceeds the number of samples n = {n}")]
    KExceedsSamples { n: u64, k: u64 },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("correct count c = {c} exceeds the number of samples n = {n}")]
    CorrectExceedsSamples { n: u64, c: u64 },
}

fn check(n: u64, c: u64, k: u64) -> Result<(), PassAtKError> {
    if k == 0 {
        return Err(PassAtKError::ZeroK);
    }
    if k > n {
        return Err(PassAtKError::KExceedsSamples { n, k });
    }
    if c > n {
        return Err(PassAtKError::CorrectExceedsSamples { n, c });
    }
    Ok(())
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)`.
///
/// Uses the product form `1 - prod_{i=n-c+1}^{n} (1 - k/i)`, which never
/// materializes binomial coefficients.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, PassAtKError> {
    check(n, c, k)?;
    if n - c < k {
        return Ok(1.0);
    }
    let prod: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - prod)
}

/// Exact rational value of [`pass_at_k`], via the same product form.
pub fn pass_at_k_exact(n: u64, c: u64, k: u64) -> Result<BigRational, PassAtKError> {
    check(n, c, k)?;
    if n - c < k {
        return Ok(BigRational::one());
    }
    let mut prod = BigRational::one();
    for i in n - c + 1..=n {
        prod *= BigRational::new(BigInt::from(i - k), BigInt::from(i));
    }
    Ok(BigRational::one() - prod)
}

/// Dataset-level pass@k: mean of per-example estimates over `(n, c)` pairs.
pub fn mean_pass_at_k(per_example: &[(u64, u64)], k: u64) -> Result<f64, PassAtKError> {
    if per_example.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &(n, c) in per_example {
        sum += pass_at_k(n, c, k)?;
    }
    Ok(sum / per_example.len() as f64)
}
