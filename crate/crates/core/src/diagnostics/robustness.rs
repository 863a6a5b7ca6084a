//! Noise robustness ζ: relative ℓ₁ discrepancy at a later layer caused by
//! Gaussian noise injected into an earlier layer's normalized outputs.

use serde::{Deserialize, Serialize};

use super::ProbeNetwork;
use crate::error::{Error, Result};
use crate::noise_rng::NoiseStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub inject_layer: usize,
    pub probe_layer: usize,
    pub mean_zeta: f64,
    /// Standard error of the mean over the Monte Carlo draws.
    pub std_error: f64,
    pub delta: f64,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RobustnessReport {
    pub entries: Vec<RobustnessEntry>,
}

#[derive(Debug, Clone)]
pub struct RobustnessConfig {
    pub delta: f64,
    pub draws: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self { delta: 0.5, draws: 6, batch_size: 256, seed: 0 }
    }
}

pub(crate) fn rows(t: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
    let per = t.len() / t.batch().max(1);
    let mut shape = t.shape().to_vec();
    shape[0] = r1 - r0;
    Tensor::new(shape, t.data()[r0 * per..r1 * per].to_vec())
}

/// Per-unit mean absolute deviation of layer `layer`'s outputs over `data`,
/// the global noise scale used by [`noise_robustness`].
pub fn global_unit_scales(
    net: &dyn ProbeNetwork,
    data: &Tensor,
    layer: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let n = data.batch();
    if n == 0 {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let mut outputs: Vec<f64> = Vec::new();
    let mut per_row = 0;
    for r0 in (0..n).step_by(batch_size.max(1)) {
        let r1 = (r0 + batch_size).min(n);
        let out = net.layer_outputs(&rows(data, r0, r1)?)?;
        let t = out.get(layer).ok_or_else(|| {
            Error::Precondition(format!("network has no layer {layer}"))
        })?;
        per_row = t.len() / t.batch();
        outputs.extend_from_slice(t.data());
    }
    let nf = n as f64;
    let mut scales = vec![0.0; per_row];
    for (u, s) in scales.iter_mut().enumerate() {
        let mean = (0..n).map(|r| outputs[r * per_row + u]).sum::<f64>() / nf;
        *s = (0..n).map(|r| (outputs[r * per_row + u] - mean).abs()).sum::<f64>() / nf;
    }
    Ok(scales)
}

/// ζ for every `(inject_layer, probe)` pair, averaged over the rows of
/// `data` and over `config.draws` noise draws.
///
/// For draw `t`, unit `u` of row `r` receives `z·δ·scales[u]` with `z` taken
/// from stream `robustness_stream_id(inject_layer, t)` at index
/// `r·units + u`.
pub fn noise_robustness(
    net: &dyn ProbeNetwork,
    data: &Tensor,
    inject_layer: usize,
    probe_layers: &[usize],
    scales: &[f64],
    config: &RobustnessConfig,
) -> Result<RobustnessReport> {
    if config.draws == 0 {
        return Err(Error::Config("need at least one Monte Carlo draw".into()));
    }
    if !(config.delta >= 0.0) {
        return Err(Error::Config(format!("delta must be >= 0, got {}", config.delta)));
    }
    if inject_layer >= net.num_layers() {
        return Err(Error::Config(format!("no layer {inject_layer} to inject noise into")));
    }
    for &l in probe_layers {
        if l <= inject_layer || l >= net.num_layers() {
            return Err(Error::Config(format!(
                "probe layer {l} must come after layer {inject_layer} and exist"
            )));
        }
    }
    let n = data.batch();
    if n == 0 {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let bs = config.batch_size.max(1);

    // draw_means[p][t]
    let mut draw_means = vec![vec![0.0; config.draws]; probe_layers.len()];
    for t in 0..config.draws {
        let stream = NoiseStream::new(
            config.seed,
            NoiseStream::robustness_stream_id(inject_layer, t),
        );
        let mut sums = vec![0.0; probe_layers.len()];
        for r0 in (0..n).step_by(bs) {
            let r1 = (r0 + bs).min(n);
            let clean = net.layer_outputs(&rows(data, r0, r1)?)?;
            let x = &clean[inject_layer];
            let units = x.len() / x.batch();
            if scales.len() != units {
                return Err(Error::Shape(format!(
                    "{} noise scales for {units} units",
                    scales.len()
                )));
            }
            let mut y = x.clone();
            for (k, v) in y.data_mut().iter_mut().enumerate() {
                let z = stream.gaussian_at((r0 * units + k) as u64);
                *v += z * config.delta * scales[k % units];
            }
            for (p, &l) in probe_layers.iter().enumerate() {
                let fx = &clean[l];
                let fy = net.propagate(inject_layer, &y, l)?;
                let per = fx.len() / fx.batch();
                for r in 0..(r1 - r0) {
                    let a = &fx.data()[r * per..(r + 1) * per];
                    let b = &fy.data()[r * per..(r + 1) * per];
                    let den: f64 = a.iter().map(|v| v.abs()).sum();
                    if den == 0.0 {
                        return Err(Error::DegenerateSample(format!(
                            "zero l1 norm at probe layer {l}, row {}",
                            r0 + r
                        )));
                    }
                    let num: f64 = a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum();
                    sums[p] += num / den;
                }
            }
        }
        for (p, s) in sums.into_iter().enumerate() {
            draw_means[p][t] = s / n as f64;
        }
    }

    let entries = probe_layers
        .iter()
        .zip(draw_means)
        .map(|(&l, ms)| {
            let tf = ms.len() as f64;
            let mean = ms.iter().sum::<f64>() / tf;
            let std_error = if ms.len() > 1 {
                let var = ms.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (tf - 1.0);
                (var / tf).sqrt()
            } else {
                0.0
            };
            RobustnessEntry {
                inject_layer,
                probe_layer: l,
                mean_zeta: mean,
                std_error,
                delta: config.delta,
                draws: config.draws,
            }
        })
        .collect();
    Ok(RobustnessReport { entries })
}
