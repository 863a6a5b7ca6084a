#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

pub fn exponentials(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let d = Exp::new(1.0).unwrap();
    (0..n).map(|_| d.sample(&mut r)).collect()
}

pub fn lognormals(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let d = LogNormal::new(0.0, sigma).unwrap();
    (0..n).map(|_| d.sample(&mut r)).collect()
}

pub fn uniforms(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..n).map(|_| r.gen::<f64>()).collect()
}

/// Zero mean, unit biased variance.
pub fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| (x - m) / s).collect()
}

/// Textbook Yeo–Johnson via `powf`/`ln`, without the cancellation-safe
/// rewrites of the library.
pub fn psi_naive(h: f64, l: f64) -> f64 {
    if h >= 0.0 {
        if l.abs() < 1e-300 {
            (1.0 + h).ln()
        } else {
            ((1.0 + h).powf(l) - 1.0) / l
        }
    } else if (l - 2.0).abs() < 1e-300 {
        -(1.0 - h).ln()
    } else {
        -((1.0 - h).powf(2.0 - l) - 1.0) / (2.0 - l)
    }
}

/// Profile NLL written out from its definition.
pub fn nll_naive(h: &[f64], l: f64) -> f64 {
    let n = h.len() as f64;
    let x: Vec<f64> = h.iter().map(|&v| psi_naive(v, l)).collect();
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    let jac: f64 = h.iter().map(|&v| v.signum() * (1.0 + v.abs()).ln()).sum::<f64>();
    0.5 * ((2.0 * std::f64::consts::PI).ln() + 1.0) + 0.5 * var.ln() - (l - 1.0) / n * jac
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}
