//! Small statistics helpers: exact binomial tail test and moment summaries.

/// One-sided exact binomial tail: `P(X >= k)` for `X ~ Bin(n, p)`.
/// Computed in log space to stay stable for large `n`.
pub fn binomial_tail(n: usize, k: usize, p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "probability out of range");
    assert!(k <= n + 1);
    if k == 0 {
        return 1.0;
    }
    if p == 0.0 {
        return 0.0;
    }
    if p == 1.0 {
        return 1.0;
    }
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let mut tail = 0.0;
    for i in k..=n {
        let ln_pmf = ln_choose(n, i) + i as f64 * ln_p + (n - i) as f64 * ln_q;
        tail += ln_pmf.exp();
    }
    tail.min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 points.
pub fn stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_small_cases() {
        // P(Bin(10, 0.5) >= 8) = (45 + 10 + 1) / 1024
        let want = 56.0 / 1024.0;
        assert!((binomial_tail(10, 8, 0.5) - want).abs() < 1e-12);
        assert_eq!(binomial_tail(10, 0, 0.3), 1.0);
        assert!((binomial_tail(4, 4, 0.5) - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn large_n_is_stable() {
        let p = binomial_tail(2000, 200, 0.05);
        assert!(p > 0.0 && p < 1.0);
        // far-above-chance counts give vanishing p-values
        assert!(binomial_tail(1500, 300, 0.05) < 1e-20);
    }

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((stddev(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(stddev(&[5.0]), 0.0);
    }
}
