//! Pairwise dependence and joint-normality measures between two channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64], min_n: usize, what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "{what}: lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min_n {
        return Err(Error::Precondition(format!(
            "{what} needs n >= {min_n}, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2, "pearson")?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateSample("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Henze–Zirkler smoothing bandwidth `β = ((n(2d + 1))/4)^{1/(d+4)} / √2`.
pub fn hz_bandwidth(n: usize, d: usize) -> f64 {
    let (n, d) = (n as f64, d as f64);
    (n * (2.0 * d + 1.0) / 4.0).powf(1.0 / (d + 4.0)) / std::f64::consts::SQRT_2
}

/// Negative Henze–Zirkler statistic of the bivariate sample `(x, y)`;
/// higher means closer to jointly normal.
///
/// Uses the maximum-likelihood (1/n) covariance, so the statistic is
/// invariant under invertible affine maps of the pair.
pub fn hz_statistic(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 8, "hz_statistic")?;
    let n = x.len();
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    sxx /= nf;
    syy /= nf;
    sxy /= nf;
    let det = sxx * syy - sxy * sxy;
    if !(det > 1e-12 * sxx * syy) || !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::DegenerateSample("singular covariance in HZ statistic".into()));
    }
    // S⁻¹ entries.
    let (ixx, iyy, ixy) = (syy / det, sxx / det, -sxy / det);
    let mahal = |dx: f64, dy: f64| dx * dx * ixx + 2.0 * dx * dy * ixy + dy * dy * iyy;

    let d = 2.0;
    let beta = hz_bandwidth(n, 2);
    let b2 = beta * beta;

    let mut pair_sum = 0.0;
    for i in 0..n {
        // Diagonal terms contribute exp(0) = 1; off-diagonals are symmetric.
        let mut row = 0.0;
        for j in (i + 1)..n {
            row += (-0.5 * b2 * mahal(x[i] - x[j], y[i] - y[j])).exp();
        }
        pair_sum += 1.0 + 2.0 * row;
    }
    let mut centre_sum = 0.0;
    for i in 0..n {
        centre_sum += (-b2 / (2.0 * (1.0 + b2)) * mahal(x[i] - mx, y[i] - my)).exp();
    }
    let hz = pair_sum / nf - 2.0 * (1.0 + b2).powf(-d / 2.0) * centre_sum
        + nf * (1.0 + 2.0 * b2).powf(-d / 2.0);
    Ok(-hz)
}

/// Equal-width bin index of every value over the value range.
fn discretize(v: &[f64], bins: usize) -> Result<Vec<usize>> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::DegenerateSample("AMI of a zero-range variable".into()));
    }
    Ok(v.iter()
        .map(|&a| (((a - lo) / range * bins as f64) as usize).min(bins - 1))
        .collect())
}

/// Order-independent sum: sorts the terms first so that equal multisets of
/// terms give bit-identical totals.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Adjusted mutual information with `⌊√n⌋` equal-width bins per variable.
///
/// Chance correction uses the expected mutual information under the
/// hypergeometric permutation model; normalization uses the arithmetic mean
/// of the two entropies.
pub fn adjusted_mutual_information(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 16, "adjusted_mutual_information")?;
    let n = x.len();
    let bins = (n as f64).sqrt().floor() as usize;
    let bx = discretize(x, bins)?;
    let by = discretize(y, bins)?;

    let mut table = vec![0usize; bins * bins];
    for (&i, &j) in bx.iter().zip(&by) {
        table[i * bins + j] += 1;
    }
    let a: Vec<usize> = (0..bins).map(|i| (0..bins).map(|j| table[i * bins + j]).sum()).collect();
    let b: Vec<usize> = (0..bins).map(|j| (0..bins).map(|i| table[i * bins + j]).sum()).collect();
    let nf = n as f64;

    let entropy = |counts: &[usize]| {
        canonical_sum(
            counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / nf;
                    -p * p.ln()
                })
                .collect(),
        )
    };
    let (hx, hy) = (entropy(&a), entropy(&b));

    let mi = canonical_sum(
        (0..bins * bins)
            .filter(|&k| table[k] > 0)
            .map(|k| {
                let (i, j) = (k / bins, k % bins);
                let nij = table[k] as f64;
                nij / nf * (nf * nij / (a[i] as f64 * b[j] as f64)).ln()
            })
            .collect(),
    );

    // ln k! for k = 0..=n.
    let mut lnfact = vec![0.0; n + 1];
    for k in 1..=n {
        lnfact[k] = lnfact[k - 1] + (k as f64).ln();
    }
    let mut emi_terms = Vec::new();
    for &ai in a.iter().filter(|&&c| c > 0) {
        for &bj in b.iter().filter(|&&c| c > 0) {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            let fixed = (lnfact[ai] + lnfact[bj]) + (lnfact[n - ai] + lnfact[n - bj]) - lnfact[n];
            let ab = ai as f64 * bj as f64;
            for nij in lo..=hi {
                let log_p = fixed
                    - lnfact[nij]
                    - (lnfact[ai - nij] + lnfact[bj - nij])
                    - lnfact[n + nij - ai - bj];
                let nijf = nij as f64;
                emi_terms.push(nijf / nf * (nf * nijf / ab).ln() * log_p.exp());
            }
        }
    }
    let emi = canonical_sum(emi_terms);

    let denom = 0.5 * (hx + hy) - emi;
    if denom.abs() < 1e-15 {
        // Both partitions trivial: perfectly (and trivially) matched.
        return Ok(if (mi - emi).abs() < 1e-15 { 1.0 } else { 0.0 });
    }
    Ok((mi - emi) / denom)
}

/// Correlation, joint normality and dependence of one channel pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub pearson_rho: f64,
    pub hz_neg: f64,
    pub ami: f64,
}

pub fn pair_stats(x: &[f64], y: &[f64]) -> Result<PairStats> {
    Ok(PairStats {
        pearson_rho: pearson(x, y)?,
        hz_neg: hz_statistic(x, y)?,
        ami: adjusted_mutual_information(x, y)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_pair_is_singular_for_hz() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64).cos()).collect();
        assert!(matches!(hz_statistic(&x, &x), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn ami_errors() {
        let x: Vec<f64> = (0..32).map(|i| i as f64).collect();
        assert!(matches!(
            adjusted_mutual_information(&x, &[1.0; 32]),
            Err(Error::DegenerateSample(_))
        ));
        assert!(adjusted_mutual_information(&x[..10], &x[..10]).is_err());
        assert!(adjusted_mutual_information(&x, &x[..20]).is_err());
    }

    #[test]
    fn hz_bandwidth_matches_closed_form() {
        let b = hz_bandwidth(100, 2);
        assert!((b - (125.0f64).powf(1.0 / 6.0) / 2f64.sqrt()).abs() < 1e-14);
    }
}
