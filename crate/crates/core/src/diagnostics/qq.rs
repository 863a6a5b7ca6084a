use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Wichura, AS 241 (PPND16). Coefficients in increasing powers.
const A: [f64; 8] = [
    3.387_132_872_796_366_5,
    133.141_667_891_784_38,
    1_971.590_950_306_551_3,
    13_731.693_765_509_46,
    45_921.953_931_549_87,
    67_265.770_927_008_7,
    33_430.575_583_588_13,
    2_509.080_928_730_122_7,
];
const B: [f64; 8] = [
    1.0,
    42.313_330_701_600_91,
    687.187_007_492_057_9,
    5_394.196_021_424_751,
    21_213.794_301_586_596,
    39_307.895_800_092_71,
    28_729.085_735_721_943,
    5_226.495_278_852_546,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_6,
    4.630_337_846_156_545,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    0.241_780_725_177_450_6,
    0.022_723_844_989_269_184,
    7.745_450_142_783_414e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    0.689_767_334_985_1,
    0.148_103_976_427_480_07,
    0.015_198_666_563_616_457,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_8e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    0.296_560_571_828_504_9,
    0.026_532_189_526_576_124,
    0.001_242_660_947_388_078_4,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F: [f64; 8] = [
    1.0,
    0.599_832_206_555_887_9,
    0.136_929_880_922_735_8,
    0.014_875_361_290_850_615,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_8e-15,
];

fn poly(c: &[f64; 8], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

/// Inverse standard normal CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile probability must lie in (0, 1), got {p}")));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return Ok(q * poly(&A, r) / poly(&B, r));
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let v = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    Ok(if q < 0.0 { -v } else { v })
}

/// Line fit through the normal Q–Q plot of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqResult {
    pub r2: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Q–Q R²: pairs the order statistics with `Φ⁻¹((i − 0.5)/n)` and fits a
/// least-squares line.
pub fn qq_r2(sample: &[f64]) -> Result<QqResult> {
    let n = sample.len();
    if n < 8 {
        return Err(Error::Precondition(format!("Q-Q fit needs n >= 8, got {n}")));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite value in Q-Q sample".into()));
    }
    let mut ys = sample.to_vec();
    ys.sort_by(f64::total_cmp);
    let nf = n as f64;
    let qs = (1..=n)
        .map(|i| normal_quantile((i as f64 - 0.5) / nf))
        .collect::<Result<Vec<_>>>()?;

    let qm = qs.iter().sum::<f64>() / nf;
    let ym = ys.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (q, y) in qs.iter().zip(&ys) {
        let (dq, dy) = (q - qm, y - ym);
        sxx += dq * dq;
        syy += dy * dy;
        sxy += dq * dy;
    }
    let scale = ys.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if !(syy > (scale * scale) * nf * 1e-24) || syy == 0.0 {
        return Err(Error::DegenerateSample("Q-Q R² is undefined for a constant sample".into()));
    }
    let slope = sxy / sxx;
    Ok(QqResult {
        r2: (sxy * sxy / (sxx * syy)).min(1.0),
        slope,
        intercept: ym - slope * qm,
        n,
    })
}
