//! `--data` specifications.

use std::path::Path;

use anyhow::{bail, Context, Result};
use normalnorm::data::{self, default_feature_names, Dataset, SynthKind};

use crate::config::UsageError;

pub const DEFAULT_SYNTH_ROWS: usize = 12_000;

/// Loads a CSV path, `idx:<images>,<labels>` or `synth:<kind>[:<n>]`.
/// Synthetic draws use `seed`.
pub fn load(spec: &str, seed: u64) -> Result<(Dataset, Vec<String>)> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let mut parts = rest.splitn(2, ':');
        let kind: SynthKind = parts.next().unwrap_or_default().parse()?;
        let n = match parts.next() {
            Some(n) => n
                .parse()
                .map_err(|_| UsageError(format!("bad row count in data spec {spec:?}")))?,
            None => DEFAULT_SYNTH_ROWS,
        };
        let d = data::synth_dataset(kind, n, seed)?;
        let names = default_feature_names(d.dim());
        return Ok((d, names));
    }
    if let Some(rest) = spec.strip_prefix("idx:") {
        let Some((images, labels)) = rest.split_once(',') else {
            bail!(UsageError(format!("expected idx:<images>,<labels>, got {spec:?}")));
        };
        let d = data::read_idx(Path::new(images), Path::new(labels))
            .with_context(|| format!("reading IDX files {images}, {labels}"))?;
        let names = default_feature_names(d.dim());
        return Ok((d, names));
    }
    let csv = data::read_csv(Path::new(spec)).with_context(|| format!("reading {spec}"))?;
    Ok((csv.dataset, csv.names))
}
