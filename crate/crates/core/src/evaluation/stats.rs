use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation (divisor `n`).
pub fn population_sd(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Sample standard deviation (divisor `n - 1`).
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Largest non-zero difference count for which the null distribution is enumerated.
const EXACT_LIMIT: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_nonzero: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided paired Wilcoxon signed-rank test on `a - b`. Zero differences
/// are dropped and ties get mid-ranks; the null distribution is enumerated
/// for up to 50 non-zero differences, otherwise a tie-corrected normal
/// approximation is used. All-zero differences give `p = 1`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("unpaired samples: {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in paired samples".into()));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n_nonzero: 0,
            w_plus: 0.0,
            p_value: 1.0,
            exact: true,
        });
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    // Doubled mid-ranks keep everything integral.
    let mut ranks2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        ranks2[i..=j].iter_mut().for_each(|r| *r = r2);
        i = j + 1;
    }
    let w2: u64 = d.iter().zip(&ranks2).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = ranks2.iter().sum();
    let w_plus = w2 as f64 / 2.0;
    if n <= EXACT_LIMIT {
        // Number of sign assignments reaching each doubled rank sum.
        let mut counts = vec![0f64; total2 as usize + 1];
        counts[0] = 1.0;
        for &r in &ranks2 {
            for s in (r as usize..=total2 as usize).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let all: f64 = counts.iter().sum();
        let lo = w2.min(total2 - w2) as usize;
        let tail: f64 = counts[..=lo].iter().sum::<f64>() / all;
        return Ok(WilcoxonResult {
            n_nonzero: n,
            w_plus,
            p_value: (2.0 * tail).min(1.0),
            exact: true,
        });
    }
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut tie = 0.0;
    let mut i = 0;
    while i < n {
        let t = ranks2[i..].iter().take_while(|&&r| r == ranks2[i]).count() as f64;
        tie += t * t * t - t;
        i += t as usize;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(WilcoxonResult {
        n_nonzero: n,
        w_plus,
        p_value: (2.0 * (1.0 - normal.cdf(z))).min(1.0),
        exact: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sd_conventions() {
        let v = [76.54, 70.64, 79.75, 77.70, 75.54];
        assert!((mean(&v) - 76.034).abs() < 1e-9);
        assert!((population_sd(&v) - 3.04).abs() < 0.01);
        assert!((sample_sd(&v) - 3.40).abs() < 0.01);
        assert_eq!(population_sd(&[2.0; 5]), 0.0);
    }

    #[test]
    fn identical_samples_give_p_one() {
        let a = [0.5, 0.7, 0.9];
        assert_eq!(wilcoxon_signed_rank(&a, &a).unwrap().p_value, 1.0);
        assert!(wilcoxon_signed_rank(&a, &a[..2]).is_err());
    }

    #[test]
    fn all_positive_differences_exact_tail() {
        let b: Vec<f64> = (0..20).map(|i| i as f64 * 0.01).collect();
        let a: Vec<f64> = b.iter().enumerate().map(|(i, v)| v + 0.1 + i as f64 * 0.001).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.exact);
        assert_eq!(r.w_plus, 210.0);
        assert!((r.p_value - 2.0 / 2f64.powi(20)).abs() < 1e-15);
        let s = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(s.p_value, r.p_value);
    }

    #[test]
    fn small_exact_distribution() {
        // n = 3, ranks 1..3: W+ = 1 has P(W+ <= 1) = 2/8.
        let r = wilcoxon_signed_rank(&[1.0, -2.0, -3.0], &[0.0; 3]).unwrap();
        assert_eq!(r.w_plus, 1.0);
        assert!((r.p_value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normal_approximation_for_large_samples() {
        let a: Vec<f64> = (0..80).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v - 0.05 + (i % 7) as f64 * 0.001).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 1e-6);
    }
}
