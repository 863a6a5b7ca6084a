use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use normalnorm::checkpoint;
use normalnorm::data::{write_csv, Dataset};
use normalnorm::diagnostics::{
    diagnose, global_unit_scales, noise_robustness, qq_r2, DiagnosticsConfig, ProbeNetwork,
    QqResult, RobustnessConfig, RobustnessReport,
};
use normalnorm::nn::{build_mlp, train, Mlp, MlpSpec, NormConfig, NormKind, TrainConfig};
use normalnorm::normalization::{
    ConventionalNorm, GroupingMode, GroupingSpec, NoiseMode, NormalityNorm, DEFAULT_GROUP_SIZE,
};
use normalnorm::power_transform::{
    estimate_lambda, grid_search_lambda, nll, psi, yeo_johnson_inverse, Sample, LAMBDA_MAX,
    LAMBDA_MIN,
};
use normalnorm::{NoiseStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, UsageError};
use crate::source::{self, DEFAULT_SYNTH_ROWS};

const ORACLE_STEP: f64 = 1e-3;
const DEFAULT_EVAL_BATCH: usize = 128;

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| UsageError(format!("missing required option --{flag}")).into())
}

fn single_alpha(cfg: &mut RunConfig) -> Result<f64> {
    let a = cfg.alpha.get_or_insert_with(|| vec![1.0]);
    match a.as_slice() {
        [x] => Ok(*x),
        _ => bail!(UsageError("this command takes a single --alpha".into())),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Prints `report` and, with `--out`, saves it beside the resolved config.
fn emit(cfg: &RunConfig, name: &str, report: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    if let Some(out) = &cfg.out {
        write_json(&out.join(format!("{name}.json")), report)?;
        cfg.write_resolved(out, name)?;
    }
    Ok(())
}

fn selected_columns(names: &[String], wanted: &Option<Vec<String>>) -> Result<Vec<usize>> {
    match wanted {
        None => Ok((0..names.len()).collect()),
        Some(w) => w
            .iter()
            .map(|c| {
                names.iter().position(|n| n == c).ok_or_else(|| {
                    normalnorm::Error::Parse(format!("no column named {c:?}")).into()
                })
            })
            .collect(),
    }
}

fn column(d: &Dataset, j: usize) -> Vec<f64> {
    (0..d.len()).map(|i| d.row(i)[j]).collect()
}

#[derive(Serialize)]
struct ColumnFit {
    column: String,
    n: usize,
    lambda_hat: f64,
    d1: f64,
    d2: f64,
    nll_at_1: f64,
    nll_at_lambda_hat: f64,
    clamped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_nll: Option<f64>,
}

pub fn fit_lambda(mut cfg: RunConfig) -> Result<()> {
    let input = required(&cfg.input, "input")?.clone();
    let alpha = single_alpha(&mut cfg)?;
    let csv = normalnorm::data::read_csv(&input)
        .with_context(|| format!("reading {}", input.display()))?;
    let mut fits = Vec::new();
    for j in selected_columns(&csv.names, &cfg.columns)? {
        let name = &csv.names[j];
        let sample = Sample::standardized(&column(&csv.dataset, j))
            .with_context(|| format!("column {name:?}"))?;
        let est = estimate_lambda(&sample, alpha)?;
        let (oracle_lambda, oracle_nll) = if cfg.oracle {
            let (l, v) = grid_search_lambda(&sample, LAMBDA_MIN, LAMBDA_MAX, ORACLE_STEP)?;
            (Some(l), Some(v))
        } else {
            (None, None)
        };
        fits.push(ColumnFit {
            column: name.clone(),
            n: sample.len(),
            lambda_hat: est.lambda_hat,
            d1: est.d1,
            d2: est.d2,
            nll_at_1: est.nll_at_1,
            nll_at_lambda_hat: nll(&sample, est.lambda_hat)?,
            clamped: est.clamped,
            oracle_lambda,
            oracle_nll,
        });
    }
    emit(&cfg, "fit_lambda", &fits)
}

/// Per-column parameters needed to undo `gaussianize`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ColumnParams {
    pub column: String,
    pub mean: f64,
    pub variance: f64,
    pub lambda: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GaussianizeParams {
    pub alpha: f64,
    pub columns: Vec<ColumnParams>,
}

#[derive(Serialize)]
struct ColumnReport {
    column: String,
    lambda: f64,
    qq_before: QqResult,
    qq_after: QqResult,
}

fn params_path(cfg: &RunConfig, output: &Path) -> PathBuf {
    cfg.params.clone().unwrap_or_else(|| {
        let mut p = output.as_os_str().to_owned();
        p.push(".params.json");
        PathBuf::from(p)
    })
}

pub fn gaussianize(mut cfg: RunConfig) -> Result<()> {
    let input = required(&cfg.input, "input")?.clone();
    let output = required(&cfg.output, "output")?.clone();
    let csv = normalnorm::data::read_csv(&input)
        .with_context(|| format!("reading {}", input.display()))?;
    let mut data = csv.dataset.clone();
    let cols = selected_columns(&csv.names, &cfg.columns)?;
    let d = data.dim();

    if cfg.inverse {
        let path = params_path(&cfg, &input);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading parameters {}", path.display()))?;
        let params: GaussianizeParams = serde_json::from_str(&text)
            .map_err(|e| normalnorm::Error::Parse(format!("{}: {e}", path.display())))?;
        for p in &params.columns {
            let j = selected_columns(&csv.names, &Some(vec![p.column.clone()]))?[0];
            for i in 0..data.len() {
                let v = &mut data.features.data_mut()[i * d + j];
                *v = yeo_johnson_inverse(*v, p.lambda)
                    .with_context(|| format!("row {}, column {:?}", i + 1, p.column))?;
            }
        }
        write_csv(&output, &data, &csv.names, csv.has_label)?;
        cfg.params = Some(path);
        return emit(&cfg, "gaussianize", &params);
    }

    let alpha = single_alpha(&mut cfg)?;
    let mut params = GaussianizeParams { alpha, columns: Vec::new() };
    let mut reports = Vec::new();
    for j in cols {
        let name = &csv.names[j];
        let (sample, mean, variance) = Sample::standardized_with_moments(&column(&data, j))
            .with_context(|| format!("column {name:?}"))?;
        let lambda = estimate_lambda(&sample, alpha)?.lambda_hat;
        let transformed: Vec<f64> = sample.values().iter().map(|&h| psi(h, lambda)).collect();
        reports.push(ColumnReport {
            column: name.clone(),
            lambda,
            qq_before: qq_r2(sample.values())?,
            qq_after: qq_r2(&transformed)?,
        });
        for (i, v) in transformed.into_iter().enumerate() {
            data.features.data_mut()[i * d + j] = v;
        }
        params.columns.push(ColumnParams { column: name.clone(), mean, variance, lambda });
    }
    write_csv(&output, &data, &csv.names, csv.has_label)?;
    let ppath = params_path(&cfg, &output);
    write_json(&ppath, &params)?;
    cfg.params = Some(ppath);
    emit(&cfg, "gaussianize", &reports)
}

fn norm_config(cfg: &mut RunConfig, alpha: f64) -> Result<NormConfig> {
    let kind: NormKind = cfg.norm.get_or_insert_with(|| "normality".into()).parse()?;
    let mode: GroupingMode = cfg.grouping.get_or_insert_with(|| "batch".into()).parse()?;
    let grouping = if mode == GroupingMode::Group {
        GroupingSpec::group(*cfg.group_size.get_or_insert(DEFAULT_GROUP_SIZE))
    } else {
        GroupingSpec::new(mode)
    };
    let noise_name = cfg.noise_mode.get_or_insert_with(|| "scaled".into()).clone();
    let p = if noise_name == "dropout" { *cfg.dropout_p.get_or_insert(0.9) } else { 1.0 };
    let defaults = NormConfig::default();
    Ok(NormConfig {
        kind,
        grouping,
        alpha,
        xi: *cfg.xi.get_or_insert(defaults.xi),
        noise_mode: NoiseMode::parse(&noise_name, p)?,
        ..defaults
    })
}

fn train_config(cfg: &mut RunConfig) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        learning_rate: *cfg.lr.get_or_insert(d.learning_rate),
        momentum: *cfg.momentum.get_or_insert(d.momentum),
        weight_decay: *cfg.weight_decay.get_or_insert(d.weight_decay),
        batch_size: *cfg.batch_size.get_or_insert(d.batch_size),
        epochs: *cfg.epochs.get_or_insert(d.epochs),
        seed: *cfg.seed.get_or_insert(d.seed),
        lr_decay_factor: *cfg.lr_decay_factor.get_or_insert(d.lr_decay_factor),
        lr_decay_every: *cfg.lr_decay_every.get_or_insert(d.lr_decay_every),
    }
}

/// Training and optional validation sets per `--data`, `--val-data` and
/// `--val-split`.
fn train_val(cfg: &mut RunConfig, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    if cfg.data.is_none() {
        cfg.data = Some(format!("synth:skewed-features:{DEFAULT_SYNTH_ROWS}"));
        cfg.val_split.get_or_insert(DEFAULT_SYNTH_ROWS / 6);
    }
    let (all, _) = source::load(cfg.data.as_deref().expect("set above"), seed)?;
    if let Some(v) = &cfg.val_data {
        return Ok((all, Some(source::load(v, seed.wrapping_add(1))?.0)));
    }
    match cfg.val_split {
        Some(k) if k > 0 => {
            if k >= all.len() {
                bail!(UsageError(format!("--val-split {k} leaves no training rows")));
            }
            let (tr, va) = all.split(all.len() - k)?;
            Ok((tr, Some(va)))
        }
        _ => Ok((all, None)),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    alpha: f64,
    log: PathBuf,
    checkpoint: PathBuf,
    final_train_loss: f64,
    final_val_acc: Option<f64>,
}

pub fn train_cmd(mut cfg: RunConfig) -> Result<()> {
    let out = required(&cfg.out, "out")?.clone();
    let tc = train_config(&mut cfg);
    let alphas = cfg.alpha.get_or_insert_with(|| vec![1.0]).clone();
    if alphas.is_empty() {
        bail!(UsageError("--alpha needs at least one value".into()));
    }
    let (train_set, val_set) = train_val(&mut cfg, tc.seed)?;
    let hidden = cfg.hidden.get_or_insert_with(|| vec![64, 64, 64]).clone();
    let mut norms = Vec::new();
    for &a in &alphas {
        norms.push(norm_config(&mut cfg, a)?);
    }
    std::fs::create_dir_all(&out)?;
    cfg.write_resolved(&out, "train")?;

    let mut summaries = Vec::new();
    for (alpha, norm) in alphas.iter().zip(norms) {
        let dir = if alphas.len() == 1 { out.clone() } else { out.join(format!("alpha_{alpha}")) };
        std::fs::create_dir_all(&dir)?;
        let spec = MlpSpec::new(train_set.dim(), hidden.clone(), train_set.classes, norm);
        let mut model = build_mlp(&spec, tc.seed)?;
        let log = train(&mut model, &train_set, val_set.as_ref(), &tc)?;
        let log_path = dir.join("train_log.csv");
        std::fs::write(&log_path, log.to_csv())?;
        let ck = dir.join("checkpoint.bin");
        let meta = serde_json::json!({ "train": tc, "data": cfg.data });
        checkpoint::save(&ck, &model, meta)?;
        summaries.push(TrainSummary {
            alpha: *alpha,
            log: log_path,
            checkpoint: ck,
            final_train_loss: log.records.last().map_or(f64::NAN, |r| r.train_loss),
            final_val_acc: log.final_val_acc(),
        });
    }
    println!("{}", serde_json::to_string_pretty(&summaries)?);
    write_json(&out.join("train_summary.json"), &summaries)
}

fn load_model(cfg: &RunConfig) -> Result<Mlp> {
    let path = required(&cfg.checkpoint, "checkpoint")?;
    let (model, _) = checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn eval_data(cfg: &mut RunConfig, seed: u64) -> Result<Dataset> {
    let spec = required(&cfg.data, "data")?.clone();
    Ok(source::load(&spec, seed)?.0)
}

pub fn diagnose_cmd(mut cfg: RunConfig) -> Result<()> {
    let seed = *cfg.seed.get_or_insert(0);
    let model = load_model(&cfg)?;
    let data = eval_data(&mut cfg, seed)?;
    let dc = DiagnosticsConfig {
        channels_per_layer: *cfg.channels.get_or_insert(20),
        batches: *cfg.batches.get_or_insert(10),
        seed,
        ..DiagnosticsConfig::default()
    };
    let bs = *cfg.batch_size.get_or_insert(DEFAULT_EVAL_BATCH);
    let report = diagnose(&model, &data.batches(bs), &dc)?;
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("diagnostics.json"), report.to_json()? + "\n")?;
        report.write_csv(std::fs::File::create(out.join("diagnostics.csv"))?)?;
        cfg.write_resolved(out, "diagnose")?;
    }
    println!("{}", serde_json::to_string_pretty(&report.layers)?);
    Ok(())
}

pub fn robustness_cmd(mut cfg: RunConfig) -> Result<()> {
    let seed = *cfg.seed.get_or_insert(0);
    let model = load_model(&cfg)?;
    let data = eval_data(&mut cfg, seed)?;
    let scale_data = match cfg.scale_data.clone() {
        Some(s) => source::load(&s, seed)?.0,
        None => data.clone(),
    };
    let layers = model.num_layers();
    if layers < 2 {
        bail!(UsageError("robustness needs a model with at least two hidden layers".into()));
    }
    let rc = RobustnessConfig {
        delta: *cfg.delta.get_or_insert(0.5),
        draws: *cfg.draws.get_or_insert(6),
        batch_size: *cfg.batch_size.get_or_insert(DEFAULT_EVAL_BATCH),
        seed,
    };
    let inject = cfg.inject.get_or_insert_with(|| (0..layers - 1).collect()).clone();
    let mut report = RobustnessReport::default();
    for &k in &inject {
        let probes: Vec<usize> = match &cfg.probe {
            Some(p) => p.iter().copied().filter(|&l| l > k).collect(),
            None => (k + 1..layers).collect(),
        };
        if probes.is_empty() {
            continue;
        }
        let scales = global_unit_scales(&model, &scale_data.features, k, rc.batch_size)?;
        let r = noise_robustness(&model, &data.features, k, &probes, &scales, &rc)?;
        report.entries.extend(r.entries);
    }
    emit(&cfg, "robustness", &report)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub channels: usize,
    pub repeats: usize,
    pub normality_s: f64,
    pub conventional_s: f64,
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn bench_cmd(mut cfg: RunConfig) -> Result<()> {
    let seed = *cfg.seed.get_or_insert(0);
    let sizes = cfg.sizes.get_or_insert_with(|| vec![1024, 4096, 16384]).clone();
    let width = *cfg.width.get_or_insert(64);
    let repeats = (*cfg.repeats.get_or_insert(5)).max(1);
    let mut rows = Vec::new();
    for &n in &sizes {
        if n < 2 {
            bail!(UsageError("bench sizes must be >= 2".into()));
        }
        // Skewed input: exp of a standard normal draw.
        let z = NoiseStream::new(seed, u64::MAX).sample_vec(0, n * width);
        let x = Tensor::new(vec![n, width], z.into_iter().map(f64::exp).collect())?;
        let grouping = GroupingSpec::new(GroupingMode::Batch);
        let normality = NormalityNorm::new(width, grouping);
        let conventional = ConventionalNorm::new(width, grouping);
        let noise = NoiseStream::new(seed, 0);
        let (mut tn, mut tc) = (Vec::new(), Vec::new());
        for _ in 0..repeats {
            let t = Instant::now();
            std::hint::black_box(normality.forward_batch_stats(&x, &noise)?);
            tn.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            std::hint::black_box(conventional.forward_batch_stats(&x)?);
            tc.push(t.elapsed().as_secs_f64());
        }
        let (a, b) = (median(tn), median(tc));
        rows.push(BenchRow {
            n,
            channels: width,
            repeats,
            normality_s: a,
            conventional_s: b,
            ratio: a / b,
        });
    }
    let mut csv = String::from("n,channels,repeats,normality_s,conventional_s,ratio\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.9},{:.9},{:.4}\n",
            r.n, r.channels, r.repeats, r.normality_s, r.conventional_s, r.ratio
        ));
    }
    print!("{csv}");
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("bench.csv"), &csv)?;
        cfg.write_resolved(out, "bench")?;
    }
    Ok(())
}
