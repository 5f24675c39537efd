//! Rank correlation used by the κ-sensitivity report.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = 0.5 * (i + j) as f64 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationTest {
    pub rho: f64,
    pub n: usize,
    /// One-sided p-value for a positive correlation (t approximation).
    pub p_positive: f64,
}

/// Spearman's ρ with a one-sided test against zero. `None` for fewer than
/// three pairs or a constant variable.
pub fn spearman_test(x: &[f64], y: &[f64]) -> Option<CorrelationTest> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return None;
    }
    let rho = pearson(&ranks(x), &ranks(y))?.clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_positive = if rho >= 1.0 {
        0.0
    } else if rho <= -1.0 {
        1.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        1.0 - StudentsT::new(0.0, 1.0, df).ok()?.cdf(t)
    };
    Some(CorrelationTest { rho, n, p_positive })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn perfect_and_reversed_orderings() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let t = spearman_test(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap();
        assert_eq!(t.rho, 1.0);
        assert_eq!(t.p_positive, 0.0);
        let t = spearman_test(&x, &[5.0, 3.0, 2.0, 1.0, 0.0]).unwrap();
        assert_eq!(t.rho, -1.0);
        assert!(spearman_test(&x, &[1.0; 5]).is_none());
    }

    #[test]
    fn p_value_matches_t_distribution() {
        // ρ = 0.5 with n = 12: t = 0.5·sqrt(10/0.75) = 1.8257, one-sided p ≈ 0.0490
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let y = [1.0, 0.0, 3.0, 2.0, 11.0, 4.0, 5.0, 10.0, 6.0, 9.0, 8.0, 7.0];
        let t = spearman_test(&x, &y).unwrap();
        let expected_rho = 1.0 - 6.0 * [1, 1, 1, 1, 49, 1, 1, 9, 4, 0, 4, 16].iter().sum::<i32>() as f64 / (12.0 * 143.0);
        assert!((t.rho - expected_rho).abs() < 1e-12);
        let tt = t.rho * (10.0 / (1.0 - t.rho * t.rho)).sqrt();
        let reference = 1.0 - StudentsT::new(0.0, 1.0, 10.0).unwrap().cdf(tt);
        assert!((t.p_positive - reference).abs() < 1e-15);
        assert!(t.p_positive > 0.0 && t.p_positive < 0.5);
    }
}
