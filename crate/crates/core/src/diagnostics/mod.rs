//! Normality, independence and robustness measurements on layer activations.

mod dependence;
mod qq;
mod robustness;

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dependence::{
    adjusted_mutual_information, hz_bandwidth, hz_statistic, pair_stats, pearson, PairStats,
};
pub use qq::{normal_quantile, qq_r2, QqResult};
pub use robustness::{
    global_unit_scales, noise_robustness, RobustnessConfig, RobustnessEntry, RobustnessReport,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A network exposing its per-layer activations for probing.
///
/// Layers are indexed `0..num_layers()`. All methods run in evaluation mode.
pub trait ProbeNetwork {
    fn num_layers(&self) -> usize;

    /// Post-normalization output of every layer for a batch of inputs.
    fn layer_outputs(&self, input: &Tensor) -> Result<Vec<Tensor>>;

    /// Maps the output of layer `from` to the output of layer `to > from`.
    fn propagate(&self, from: usize, value: &Tensor, to: usize) -> Result<Tensor>;

    /// Values whose normality is assessed at each layer: post-power-transform
    /// (pre-affine) for normality layers, normalized pre-affine values for
    /// conventional layers, raw pre-activations otherwise.
    fn normality_probes(&self, input: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub channels_per_layer: usize,
    pub batches: usize,
    /// Channel pairs per layer for the dependence measures.
    pub pairs_per_layer: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { channels_per_layer: 20, batches: 10, pairs_per_layer: 10, seed: 0 }
    }
}

/// One row of the long-format output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub layer: usize,
    /// A channel index, or `i:j` for a channel pair.
    pub channel: String,
    /// Batch index, or `all` for measures over the pooled batches.
    pub batch: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub mean_r2: f64,
    /// Channel/batch combinations that entered `mean_r2`.
    pub r2_count: usize,
    pub mean_abs_pearson: Option<f64>,
    pub mean_hz_neg: Option<f64>,
    pub mean_ami: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub config: DiagnosticsConfig,
    pub layers: Vec<LayerSummary>,
    pub records: Vec<Record>,
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-format CSV with columns `layer,channel,batch,metric,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "channel", "batch", "metric", "value"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.layer.to_string(),
                r.channel.clone(),
                r.batch.clone(),
                r.metric.clone(),
                format!("{:e}", r.value),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Values of channel `c` (all batch and spatial positions).
fn channel_values(t: &Tensor, c: usize) -> Vec<f64> {
    t.data()
        .iter()
        .enumerate()
        .filter(|&(i, _)| t.channel_of(i) == c)
        .map(|(_, &v)| v)
        .collect()
}

fn pick_channels(width: usize, k: usize, seed: u64, layer: usize) -> Vec<usize> {
    if width <= k {
        return (0..width).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((layer as u64) << 32));
    let mut chosen = sample(&mut rng, width, k).into_vec();
    chosen.sort_unstable();
    chosen
}

fn probe_all(net: &dyn ProbeNetwork, batches: &[Tensor], limit: usize) -> Result<Vec<Vec<Tensor>>> {
    if batches.is_empty() {
        return Err(Error::Precondition("no evaluation batches".into()));
    }
    batches.iter().take(limit.max(1)).map(|b| net.normality_probes(b)).collect()
}

fn r2_records(
    probes: &[Vec<Tensor>],
    layers: usize,
    config: &DiagnosticsConfig,
) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for layer in 0..layers {
        let width = probes[0][layer].channels();
        let channels = pick_channels(width, config.channels_per_layer, config.seed, layer);
        for (b, per_layer) in probes.iter().enumerate() {
            for &c in &channels {
                match qq_r2(&channel_values(&per_layer[layer], c)) {
                    Ok(q) => records.push(Record {
                        layer,
                        channel: c.to_string(),
                        batch: b.to_string(),
                        metric: "qq_r2".into(),
                        value: q.r2,
                    }),
                    // Dead or constant units carry no normality information.
                    Err(Error::DegenerateSample(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(records)
}

fn mean_of(records: &[Record], layer: usize, metric: &str, map: fn(f64) -> f64) -> (f64, usize) {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.layer == layer && r.metric == metric)
        .map(|r| map(r.value))
        .collect();
    if vals.is_empty() {
        (f64::NAN, 0)
    } else {
        (vals.iter().sum::<f64>() / vals.len() as f64, vals.len())
    }
}

/// Mean Q–Q R² per layer over `channels_per_layer` seeded channels and the
/// first `batches` evaluation batches. Degenerate channels are skipped; a
/// layer with none left reports NaN.
pub fn layer_r2_aggregate(
    net: &dyn ProbeNetwork,
    batches: &[Tensor],
    config: &DiagnosticsConfig,
) -> Result<Vec<f64>> {
    let probes = probe_all(net, batches, config.batches)?;
    let records = r2_records(&probes, net.num_layers(), config)?;
    Ok((0..net.num_layers()).map(|l| mean_of(&records, l, "qq_r2", |v| v).0).collect())
}

/// Full report: per-channel R² plus pairwise Pearson, −HZ and AMI on seeded
/// channel pairs, pooled over the evaluation batches.
pub fn diagnose(
    net: &dyn ProbeNetwork,
    batches: &[Tensor],
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsReport> {
    let probes = probe_all(net, batches, config.batches)?;
    let layers = net.num_layers();
    let mut records = r2_records(&probes, layers, config)?;

    for layer in 0..layers {
        let width = probes[0][layer].channels();
        if width < 2 {
            continue;
        }
        let chosen = pick_channels(width, 2 * config.pairs_per_layer, config.seed ^ 0x9e37, layer);
        let pooled: Vec<Vec<f64>> = chosen
            .iter()
            .map(|&c| probes.iter().flat_map(|p| channel_values(&p[layer], c)).collect())
            .collect();
        for k in (0..chosen.len().saturating_sub(1)).step_by(2) {
            let stats = match pair_stats(&pooled[k], &pooled[k + 1]) {
                Ok(s) => s,
                Err(Error::DegenerateSample(_)) | Err(Error::Precondition(_)) => continue,
                Err(e) => return Err(e),
            };
            let channel = format!("{}:{}", chosen[k], chosen[k + 1]);
            for (metric, value) in
                [("pearson", stats.pearson_rho), ("hz_neg", stats.hz_neg), ("ami", stats.ami)]
            {
                records.push(Record {
                    layer,
                    channel: channel.clone(),
                    batch: "all".into(),
                    metric: metric.into(),
                    value,
                });
            }
        }
    }

    let opt = |(m, n): (f64, usize)| (n > 0).then_some(m);
    let summaries = (0..layers)
        .map(|l| {
            let (mean_r2, r2_count) = mean_of(&records, l, "qq_r2", |v| v);
            LayerSummary {
                layer: l,
                mean_r2,
                r2_count,
                mean_abs_pearson: opt(mean_of(&records, l, "pearson", f64::abs)),
                mean_hz_neg: opt(mean_of(&records, l, "hz_neg", |v| v)),
                mean_ami: opt(mean_of(&records, l, "ami", |v| v)),
            }
        })
        .collect();
    Ok(DiagnosticsReport { config: config.clone(), layers: summaries, records })
}
