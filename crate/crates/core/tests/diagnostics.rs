mod common;

use common::*;
use normalnorm::diagnostics::*;
use normalnorm::{Error, NoiseStream, Result, Tensor};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Discrete, Hypergeometric, Normal};

#[test]
fn quantile_function_matches_an_independent_inverse_cdf() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    for k in 1..1000 {
        let p = k as f64 / 1000.0;
        assert!((normal_quantile(p).unwrap() - normal.inverse_cdf(p)).abs() < 1e-9, "p = {p}");
    }
    // High-precision references at the exact binary value of each p.
    for (p, want) in [
        (1e-300, -37.047_096_299_361_2),
        (1e-10, -6.361_340_902_404_057),
        (0.001, -3.090_232_306_167_813_6),
        (0.023, -1.995_393_310_167_824_7),
        (0.1, -1.281_551_565_544_600_4),
        (0.5, 0.0),
        (0.975, 1.959_963_984_540_054_3),
        (0.9999999, 5.199_337_582_290_661),
    ] {
        let got = normal_quantile(p).unwrap();
        assert!((got - want).abs() <= 1e-14 * want.abs().max(1.0), "p = {p}: {got}");
    }
    assert!(matches!(normal_quantile(0.0), Err(Error::Domain(_))));
    assert!(matches!(normal_quantile(1.0), Err(Error::Domain(_))));
}

/// R² of the Q–Q line computed from scratch.
fn qq_r2_oracle(v: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut ys = v.to_vec();
    ys.sort_by(f64::total_cmp);
    let n = ys.len() as f64;
    let qs: Vec<f64> = (0..ys.len()).map(|i| normal.inverse_cdf((i as f64 + 0.5) / n)).collect();
    let r = pearson_naive(&qs, &ys);
    r * r
}

fn pearson_naive(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn qq_r2_matches_the_reference() {
    for (seed, v) in [(0, normals(500, 0)), (1, exponentials(300, 1)), (2, uniforms(64, 2))] {
        let got = qq_r2(&v).unwrap().r2;
        assert!((got - qq_r2_oracle(&v)).abs() < 1e-9, "seed {seed}");
    }
    assert!(qq_r2(&normals(2000, 3)).unwrap().r2 > 0.995);
    assert!(qq_r2(&exponentials(2000, 3)).unwrap().r2 < 0.95);
    assert!(matches!(qq_r2(&[1.0; 20]), Err(Error::DegenerateSample(_))));
    assert!(matches!(qq_r2(&[1.0, 2.0, 3.0]), Err(Error::Precondition(_))));
}

#[test]
fn pearson_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
    assert!((pearson(&x, &[8.0, 6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::DegenerateSample(_))));
    assert!(matches!(pearson(&x, &[1.0; 3]), Err(Error::Shape(_))));
    let (a, b) = (normals(400, 5), exponentials(400, 6));
    assert!((pearson(&a, &b).unwrap() - pearson_naive(&a, &b)).abs() < 1e-13);
}

/// Henze–Zirkler statistic written straight from its definition.
fn hz_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let nf = n as f64;
    let (mx, my) = (x.iter().sum::<f64>() / nf, y.iter().sum::<f64>() / nf);
    let s = |a: &[f64], ma: f64, b: &[f64], mb: f64| a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / nf;
    let (sxx, syy, sxy) = (s(x, mx, x, mx), s(y, my, y, my), s(x, mx, y, my));
    let det = sxx * syy - sxy * sxy;
    let inv = [[syy / det, -sxy / det], [-sxy / det, sxx / det]];
    let d2 = |u: f64, v: f64| u * (inv[0][0] * u + inv[0][1] * v) + v * (inv[1][0] * u + inv[1][1] * v);
    let beta = (1.0 / 2f64.sqrt()) * ((2.0 * 2.0 + 1.0) * nf / 4.0).powf(1.0 / 6.0);
    let b2 = beta * beta;
    let mut t1 = 0.0;
    for i in 0..n {
        for j in 0..n {
            t1 += (-b2 / 2.0 * d2(x[i] - x[j], y[i] - y[j])).exp();
        }
    }
    let t2: f64 = (0..n).map(|i| (-b2 / (2.0 * (1.0 + b2)) * d2(x[i] - mx, y[i] - my)).exp()).sum();
    nf * (t1 / (nf * nf) - 2.0 / (1.0 + b2) * t2 / nf + 1.0 / (1.0 + 2.0 * b2))
}

#[test]
fn hz_matches_the_reference_and_prefers_normal_pairs() {
    let (a, b) = (normals(300, 1), normals(300, 2));
    let got = hz_statistic(&a, &b).unwrap();
    assert!(rel_err(-got, hz_oracle(&a, &b)) < 1e-10);
    let (c, d) = (exponentials(300, 1), exponentials(300, 2));
    assert!(rel_err(-hz_statistic(&c, &d).unwrap(), hz_oracle(&c, &d)) < 1e-10);
    assert!(got > hz_statistic(&c, &d).unwrap());
    assert!((hz_bandwidth(300, 2) - (1.0 / 2f64.sqrt()) * (5.0 * 300.0 / 4.0f64).powf(1.0 / 6.0)).abs() < 1e-14);
}

/// Equal-width binning and AMI with hypergeometric chance correction,
/// independently of the library code.
fn ami_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let bins = (n as f64).sqrt().floor() as usize;
    let bin = |v: &[f64]| -> Vec<usize> {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        v.iter().map(|a| (((a - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)).collect()
    };
    let (bx, by) = (bin(x), bin(y));
    let mut t = vec![vec![0u64; bins]; bins];
    for (i, j) in bx.into_iter().zip(by) {
        t[i][j] += 1;
    }
    let a: Vec<u64> = t.iter().map(|r| r.iter().sum()).collect();
    let b: Vec<u64> = (0..bins).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let nf = n as f64;
    let h = |c: &[u64]| -> f64 { c.iter().filter(|&&k| k > 0).map(|&k| { let p = k as f64 / nf; -p * p.ln() }).sum() };
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            if t[i][j] > 0 {
                let k = t[i][j] as f64;
                mi += k / nf * (nf * k / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    let mut emi = 0.0;
    for &ai in a.iter().filter(|&&k| k > 0) {
        for &bj in b.iter().filter(|&&k| k > 0) {
            let hg = Hypergeometric::new(n as u64, ai, bj).unwrap();
            for k in 1..=ai.min(bj) {
                let kf = k as f64;
                emi += kf / nf * (nf * kf / (ai as f64 * bj as f64)).ln() * hg.pmf(k);
            }
        }
    }
    (mi - emi) / (0.5 * (h(&a) + h(&b)) - emi)
}

#[test]
fn ami_matches_the_reference() {
    let x = normals(400, 1);
    let y: Vec<f64> = normals(400, 2).iter().zip(&x).map(|(e, v)| v * v + 0.3 * e).collect();
    let got = adjusted_mutual_information(&x, &y).unwrap();
    assert!((got - ami_oracle(&x, &y)).abs() < 1e-8, "{got} vs {}", ami_oracle(&x, &y));
    assert!(got > 0.1);
    assert!((adjusted_mutual_information(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let indep = adjusted_mutual_information(&normals(2000, 3), &normals(2000, 4)).unwrap();
    assert!(indep.abs() < 0.02, "{indep}");
    // Pearson misses the quadratic dependence AMI detects.
    assert!(pearson(&x, &y).unwrap().abs() < 0.2);
}

#[test]
fn ami_rejects_short_or_constant_input() {
    assert!(matches!(adjusted_mutual_information(&[1.0; 5], &[2.0; 5]), Err(Error::Precondition(_))));
    assert!(matches!(adjusted_mutual_information(&[1.0; 32], &normals(32, 0)), Err(Error::DegenerateSample(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn qq_r2_is_affine_invariant(seed in 0u64..1000, a in 0.01f64..100.0, neg in any::<bool>(), b in -50.0f64..50.0) {
        let v = exponentials(64, seed);
        let a = if neg { -a } else { a };
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        prop_assert!((qq_r2(&v).unwrap().r2 - qq_r2(&w).unwrap().r2).abs() < 1e-10);
    }

    #[test]
    fn pearson_is_affine_invariant(seed in 0u64..1000, a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let (x, y) = (normals(50, seed), exponentials(50, seed + 1));
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson(&x, &y).unwrap() - pearson(&xs, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hz_is_invariant_under_invertible_linear_maps(
        seed in 0u64..1000,
        m in prop::array::uniform4(-3.0f64..3.0),
        shift in prop::array::uniform2(-10.0f64..10.0),
    ) {
        let det = m[0] * m[3] - m[1] * m[2];
        prop_assume!(det.abs() > 0.3);
        let (x, y) = (lognormals(60, 0.5, seed), normals(60, seed + 7));
        let u: Vec<f64> = x.iter().zip(&y).map(|(a, b)| m[0] * a + m[1] * b + shift[0]).collect();
        let v: Vec<f64> = x.iter().zip(&y).map(|(a, b)| m[2] * a + m[3] * b + shift[1]).collect();
        let (p, q) = (hz_statistic(&x, &y).unwrap(), hz_statistic(&u, &v).unwrap());
        prop_assert!(rel_err(p, q) < 1e-8, "{} vs {}", p, q);
    }

    #[test]
    fn ami_is_symmetric(seed in 0u64..1000, n in 16usize..200) {
        let x = lognormals(n, 1.0, seed);
        let y: Vec<f64> = normals(n, seed + 3).iter().zip(&x).map(|(e, v)| v + e).collect();
        let (a, b) = (adjusted_mutual_information(&x, &y).unwrap(), adjusted_mutual_information(&y, &x).unwrap());
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(a <= 1.0 + 1e-12);
    }
}

/// Two linear layers: layer 0 is the input, layer 1 is `input · W`.
struct LinearToy {
    w: Vec<Vec<f64>>,
}

impl LinearToy {
    fn apply(&self, t: &Tensor) -> Tensor {
        let (n, d, m) = (t.batch(), self.w.len(), self.w[0].len());
        Tensor::from_fn(vec![n, m], |k| {
            let (r, j) = (k / m, k % m);
            (0..d).map(|i| t.data()[r * d + i] * self.w[i][j]).sum()
        })
    }
}

impl ProbeNetwork for LinearToy {
    fn num_layers(&self) -> usize {
        2
    }
    fn layer_outputs(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![input.clone(), self.apply(input)])
    }
    fn propagate(&self, from: usize, value: &Tensor, to: usize) -> Result<Tensor> {
        assert_eq!((from, to), (0, 1));
        Ok(self.apply(value))
    }
    fn normality_probes(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.layer_outputs(input)
    }
}

fn toy() -> (LinearToy, Tensor) {
    let w = vec![vec![1.0, -2.0, 0.5], vec![0.3, 1.0, 1.0], vec![-1.0, 0.2, 2.0], vec![0.7, 0.7, -0.4]];
    let data = Tensor::new(vec![10, 4], normals(40, 21).iter().map(|v| v + 0.5).collect()).unwrap();
    (LinearToy { w }, data)
}

#[test]
fn zeta_matches_the_closed_form_for_a_linear_map() {
    let (net, data) = toy();
    let scales = global_unit_scales(&net, &data, 0, 4).unwrap();
    for u in 0..4 {
        let col: Vec<f64> = (0..10).map(|r| data.data()[r * 4 + u]).collect();
        let m = col.iter().sum::<f64>() / 10.0;
        let mad = col.iter().map(|v| (v - m).abs()).sum::<f64>() / 10.0;
        assert!((scales[u] - mad).abs() < 1e-15);
    }
    let cfg = RobustnessConfig { delta: 0.5, draws: 4, batch_size: 3, seed: 9 };
    let report = noise_robustness(&net, &data, 0, &[1], &scales, &cfg).unwrap();
    let fx = net.apply(&data);
    let mut means = Vec::new();
    for t in 0..4 {
        let s = NoiseStream::new(9, NoiseStream::robustness_stream_id(0, t));
        let mut acc = 0.0;
        for r in 0..10 {
            let eps: Vec<f64> = (0..4).map(|u| s.gaussian_at((r * 4 + u) as u64) * 0.5 * scales[u]).collect();
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..3 {
                num += (0..4).map(|i| eps[i] * net.w[i][j]).sum::<f64>().abs();
                den += fx.data()[r * 3 + j].abs();
            }
            acc += num / den;
        }
        means.push(acc / 10.0);
    }
    let mean = means.iter().sum::<f64>() / 4.0;
    let se = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 3.0 / 4.0).sqrt();
    let e = &report.entries[0];
    assert!((e.mean_zeta - mean).abs() < 1e-12, "{} vs {mean}", e.mean_zeta);
    assert!((e.std_error - se).abs() < 1e-12);
    assert_eq!((e.inject_layer, e.probe_layer, e.draws), (0, 1, 4));
}

#[test]
fn zero_noise_gives_zero_zeta() {
    let (net, data) = toy();
    let scales = global_unit_scales(&net, &data, 0, 256).unwrap();
    let cfg = RobustnessConfig { delta: 0.0, draws: 3, batch_size: 256, seed: 0 };
    let e = &noise_robustness(&net, &data, 0, &[1], &scales, &cfg).unwrap().entries[0];
    assert_eq!(e.mean_zeta, 0.0);
    assert_eq!(e.std_error, 0.0);
}

#[test]
fn zeta_scales_linearly_through_a_linear_map() {
    let (net, data) = toy();
    let scales = global_unit_scales(&net, &data, 0, 256).unwrap();
    let run = |delta: f64, scales: &[f64]| {
        let cfg = RobustnessConfig { delta, draws: 5, batch_size: 256, seed: 1 };
        noise_robustness(&net, &data, 0, &[1], scales, &cfg).unwrap().entries[0].mean_zeta
    };
    let base = run(0.25, &scales);
    assert!((run(0.5, &scales) - 2.0 * base).abs() < 1e-12);
    let doubled: Vec<f64> = scales.iter().map(|s| 2.0 * s).collect();
    assert!((run(0.25, &doubled) - 2.0 * base).abs() < 1e-12);
    // Batch size does not change which draw a row receives.
    let small = RobustnessConfig { delta: 0.25, draws: 5, batch_size: 3, seed: 1 };
    let z = noise_robustness(&net, &data, 0, &[1], &scales, &small).unwrap().entries[0].mean_zeta;
    assert!((z - base).abs() < 1e-12);
}

#[test]
fn robustness_rejects_bad_configurations() {
    let (net, data) = toy();
    let scales = vec![1.0; 4];
    let cfg = RobustnessConfig::default();
    assert!(matches!(noise_robustness(&net, &data, 1, &[1], &scales, &cfg), Err(Error::Config(_))));
    assert!(matches!(noise_robustness(&net, &data, 0, &[0], &scales, &cfg), Err(Error::Config(_))));
    let none = RobustnessConfig { draws: 0, ..cfg };
    assert!(matches!(noise_robustness(&net, &data, 0, &[1], &scales, &none), Err(Error::Config(_))));
    assert!(matches!(noise_robustness(&net, &data, 0, &[1], &[1.0; 3], &cfg), Err(Error::Shape(_))));
    let zeros = Tensor::zeros(vec![3, 4]);
    assert!(matches!(noise_robustness(&net, &zeros, 0, &[1], &scales, &cfg), Err(Error::DegenerateSample(_))));
}

/// Probes that are exactly normal at layer 0 and exponential at layer 1,
/// plus a dead channel.
struct FixedProbes;

impl ProbeNetwork for FixedProbes {
    fn num_layers(&self) -> usize {
        2
    }
    fn layer_outputs(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.normality_probes(input)
    }
    fn propagate(&self, _: usize, value: &Tensor, _: usize) -> Result<Tensor> {
        Ok(value.clone())
    }
    fn normality_probes(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let n = input.batch();
        let seed = input.data()[0] as u64;
        let z = normals(3 * n, seed);
        let e = exponentials(3 * n, seed);
        let layer0 = Tensor::from_fn(vec![n, 3], |k| if k % 3 == 2 { 0.0 } else { z[k] });
        let layer1 = Tensor::from_fn(vec![n, 3], |k| e[k]);
        Ok(vec![layer0, layer1])
    }
}

#[test]
fn layer_aggregate_skips_dead_channels_and_ranks_layers() {
    let batches: Vec<Tensor> = (0..4).map(|b| Tensor::from_fn(vec![500, 1], |_| b as f64)).collect();
    let cfg = DiagnosticsConfig { channels_per_layer: 3, batches: 4, pairs_per_layer: 1, seed: 0 };
    let r2 = layer_r2_aggregate(&FixedProbes, &batches, &cfg).unwrap();
    assert!(r2[0] > 0.99 && r2[1] < 0.95, "{r2:?}");

    let report = diagnose(&FixedProbes, &batches, &cfg).unwrap();
    assert_eq!(report.layers[0].r2_count, 4 * 2);
    assert_eq!(report.layers[1].r2_count, 4 * 3);
    assert!((report.layers[0].mean_r2 - r2[0]).abs() < 1e-15);
    let pairs: Vec<_> = report.records.iter().filter(|r| r.batch == "all").collect();
    assert!(pairs.iter().all(|r| r.channel.contains(':')));
    assert!(report.layers[1].mean_ami.is_some());

    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("layer,channel,batch,metric,value\n"));
    assert_eq!(text.lines().count(), report.records.len() + 1);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["layers"].as_array().unwrap().len(), 2);
}

#[test]
fn channel_sampling_is_seeded() {
    let batches: Vec<Tensor> = (0..2).map(|b| Tensor::from_fn(vec![100, 1], |_| b as f64)).collect();
    let cfg = DiagnosticsConfig { channels_per_layer: 2, batches: 2, pairs_per_layer: 1, seed: 5 };
    let a = diagnose(&FixedProbes, &batches, &cfg).unwrap();
    let b = diagnose(&FixedProbes, &batches, &cfg).unwrap();
    assert_eq!(a, b);
}
