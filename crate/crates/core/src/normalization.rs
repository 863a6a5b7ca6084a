//! Normality normalization layer and its conventional counterpart.
//!
//! A training forward runs, per normalization group:
//! normalize → estimate λ̂ → ψ(h; λ̂) → noise scale `s` (no gradient)
//! → noise → per-channel affine.
//!
//! In `batch` grouping each channel is one group and running (μ, σ², λ) are
//! tracked for evaluation. In the per-sample groupings (`layer`, `instance`,
//! `group`) evaluation recomputes statistics from the input itself, exactly
//! like the conventional layers they augment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_rng::NoiseStream;
use crate::power_transform::{
    estimate_lambda_for_layer, psi, psi_dh, LambdaEstimate,
};
use crate::tensor::Tensor;

/// Inputs at least this large are processed group-parallel.
const PAR_MIN_ELEMENTS: usize = 1 << 15;

/// Mean of a standard half-normal distribution, `√(2/π)`.
pub const HALF_NORMAL_MEAN: f64 = 0.797_884_560_802_865_4;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_XI: f64 = 0.4;
pub const DEFAULT_GROUP_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMode {
    Batch,
    Layer,
    Instance,
    Group,
}

impl std::str::FromStr for GroupingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "layer" => Ok(Self::Layer),
            "instance" => Ok(Self::Instance),
            "group" => Ok(Self::Group),
            other => Err(Error::Config(format!("unknown grouping mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingSpec {
    pub mode: GroupingMode,
    /// Channels per block; only read in `group` mode.
    pub group_size: usize,
}

impl Default for GroupingSpec {
    fn default() -> Self {
        Self { mode: GroupingMode::Batch, group_size: DEFAULT_GROUP_SIZE }
    }
}

impl GroupingSpec {
    pub fn new(mode: GroupingMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn group(group_size: usize) -> Self {
        Self { mode: GroupingMode::Group, group_size }
    }
}

/// Partitions the flat indices of a `(batch, channels, spatial...)` tensor
/// into normalization groups.
///
/// Group order: per channel for `batch`; per sample for `layer`; per
/// (sample, channel) for `instance`; per (sample, channel block) for `group`.
pub fn resolve_groups(shape: &[usize], spec: &GroupingSpec) -> Result<Vec<Vec<usize>>> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "normalization needs (batch, channels, ...), got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("empty axis in shape {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    let sp: usize = shape[2..].iter().product();
    let flat = |bi: usize, ci: usize, si: usize| (bi * c + ci) * sp + si;

    let groups = match spec.mode {
        GroupingMode::Batch => (0..c)
            .map(|ci| {
                (0..b)
                    .flat_map(|bi| (0..sp).map(move |si| flat(bi, ci, si)))
                    .collect()
            })
            .collect(),
        GroupingMode::Layer => (0..b)
            .map(|bi| (0..c * sp).map(|k| bi * c * sp + k).collect())
            .collect(),
        GroupingMode::Instance => (0..b)
            .flat_map(|bi| (0..c).map(move |ci| (0..sp).map(|si| flat(bi, ci, si)).collect()))
            .collect(),
        GroupingMode::Group => {
            let gs = spec.group_size;
            if gs == 0 || c % gs != 0 {
                return Err(Error::Shape(format!(
                    "{c} channels are not divisible into groups of {gs}"
                )));
            }
            (0..b)
                .flat_map(|bi| {
                    (0..c / gs).map(move |g| {
                        (0..gs * sp).map(|k| (bi * c + g * gs) * sp + k).collect()
                    })
                })
                .collect()
        }
    };
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseMode {
    /// `y = x + z·ξ·s` with `s` the group's mean absolute deviation.
    Scaled,
    /// `y = x + z·ξ·√(2/π)`.
    Unscaled,
    /// `y = x·(1 + z·√((1 − p)/p))` with retention rate `p`.
    GaussianDropout { p: f64 },
    None,
}

impl NoiseMode {
    pub fn parse(name: &str, p: f64) -> Result<Self> {
        match name {
            "scaled" => Ok(Self::Scaled),
            "unscaled" => Ok(Self::Unscaled),
            "dropout" | "gaussian_dropout" => Ok(Self::GaussianDropout { p }),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown noise mode {other:?}"))),
        }
    }
}

/// Learnable affine, hyperparameters and running statistics of one
/// normality normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayerState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub xi: f64,
    pub alpha: f64,
    pub noise_mode: NoiseMode,
    pub momentum: f64,
    pub running_mu: Vec<f64>,
    pub running_sigma2: Vec<f64>,
    pub running_lambda: Vec<f64>,
    /// Number of training forwards folded into the running statistics.
    pub steps: u64,
}

impl NormLayerState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: DEFAULT_EPS,
            xi: DEFAULT_XI,
            alpha: 1.0,
            noise_mode: NoiseMode::Scaled,
            momentum: DEFAULT_MOMENTUM,
            running_mu: vec![0.0; channels],
            running_sigma2: vec![1.0; channels],
            running_lambda: vec![1.0; channels],
            steps: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if [self.beta.len(), self.running_mu.len(), self.running_sigma2.len(), self.running_lambda.len()]
            .iter()
            .any(|&l| l != c)
        {
            return Err(Error::Shape("per-channel state vectors differ in length".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be >= 0, got {}", self.xi)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in (0, 1), got {}",
                self.momentum
            )));
        }
        if let NoiseMode::GaussianDropout { p } = self.noise_mode {
            check_retention(p)?;
        }
        Ok(())
    }

    fn noise_active(&self) -> bool {
        match self.noise_mode {
            NoiseMode::Scaled | NoiseMode::Unscaled => self.xi > 0.0,
            NoiseMode::GaussianDropout { p } => p < 1.0,
            NoiseMode::None => false,
        }
    }
}

fn check_retention(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("retention rate must lie in (0, 1], got {p}")))
    }
}

/// `(1/N)·Σ|x_i − x̄|`, the zero-centered ℓ₁ dispersion of a group.
pub fn noise_scale(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).abs()).sum::<f64>() / n
}

/// Applies the training-time noise of `mode` to one group, given its noise
/// scale `s` and pre-drawn standard normals `z` (one per element).
pub fn apply_noise(x: &[f64], s: f64, mode: NoiseMode, xi: f64, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != x.len() {
        return Err(Error::Shape(format!("{} noise draws for {} values", z.len(), x.len())));
    }
    Ok(match mode {
        NoiseMode::None => x.to_vec(),
        NoiseMode::Scaled | NoiseMode::Unscaled if xi == 0.0 => x.to_vec(),
        NoiseMode::Scaled => x.iter().zip(z).map(|(x, z)| x + z * xi * s).collect(),
        NoiseMode::Unscaled => {
            x.iter().zip(z).map(|(x, z)| x + z * xi * HALF_NORMAL_MEAN).collect()
        }
        NoiseMode::GaussianDropout { p } => {
            check_retention(p)?;
            let c = ((1.0 - p) / p).sqrt();
            x.iter().zip(z).map(|(x, z)| x * (1.0 + z * c)).collect()
        }
    })
}

/// Intermediates of a training forward, needed by [`NormalityNorm::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub shape: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    /// Group index of every element.
    pub group_of: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub estimates: Vec<LambdaEstimate>,
    pub lambda: Vec<f64>,
    pub s: Vec<f64>,
    pub h: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Noise draws by flat index; empty when no noise was applied.
    pub z: Vec<f64>,
}

/// Values that the stop-gradient contract holds constant.
#[derive(Debug, Clone, Copy)]
struct Frozen<'a> {
    lambda: &'a [f64],
    s: &'a [f64],
    z: &'a [f64],
}

struct GroupOut {
    mean: f64,
    var: f64,
    inv_std: f64,
    estimate: LambdaEstimate,
    h: Vec<f64>,
    x: Vec<f64>,
    s: f64,
}

/// Group mean and biased variance, accumulated in index order.
fn group_moments(data: &[f64], idx: &[usize]) -> (f64, f64) {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| data[i]).sum::<f64>() / n;
    let var = idx.iter().map(|&i| (data[i] - mean) * (data[i] - mean)).sum::<f64>() / n;
    (mean, var)
}

fn map_groups<T: Send>(
    groups: &[Vec<usize>],
    total: usize,
    f: impl Fn(usize, &[usize]) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if total >= PAR_MIN_ELEMENTS {
        groups.par_iter().enumerate().map(|(g, idx)| f(g, idx)).collect()
    } else {
        groups.iter().enumerate().map(|(g, idx)| f(g, idx)).collect()
    }
}

fn group_index(groups: &[Vec<usize>], len: usize) -> Vec<usize> {
    let mut group_of = vec![0; len];
    for (g, idx) in groups.iter().enumerate() {
        for &i in idx {
            group_of[i] = g;
        }
    }
    group_of
}

fn check_group_sizes(groups: &[Vec<usize>]) -> Result<()> {
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::Shape(format!(
            "normalization group of size {} (need at least 2)",
            g.len()
        )));
    }
    Ok(())
}

/// Shared normalization backward for one group: gradient wrt the layer input
/// given the gradient wrt `h = (u − μ̂)/√(σ̂² + ε)`, with μ̂ and σ̂² depending
/// on the input.
fn normalize_backward(idx: &[usize], h: &[f64], grad_h: &[f64], inv_std: f64, out: &mut [f64]) {
    let n = idx.len() as f64;
    let mean_g = idx.iter().map(|&i| grad_h[i]).sum::<f64>() / n;
    let mean_gh = idx.iter().map(|&i| grad_h[i] * h[i]).sum::<f64>() / n;
    for &i in idx {
        out[i] = inv_std * (grad_h[i] - mean_g - h[i] * mean_gh);
    }
}

fn check_input(input: &Tensor, channels: usize) -> Result<()> {
    if input.shape().len() < 2 || input.channels() != channels {
        return Err(Error::Shape(format!(
            "layer has {channels} channels, input shape is {:?}",
            input.shape()
        )));
    }
    if input.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite layer input".into()));
    }
    Ok(())
}

/// Normality normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityNorm {
    pub state: NormLayerState,
    pub grouping: GroupingSpec,
}

impl NormalityNorm {
    pub fn new(channels: usize, grouping: GroupingSpec) -> Self {
        Self { state: NormLayerState::new(channels), grouping }
    }

    pub fn with_state(state: NormLayerState, grouping: GroupingSpec) -> Result<Self> {
        state.validate()?;
        Ok(Self { state, grouping })
    }

    pub fn channels(&self) -> usize {
        self.state.channels()
    }

    /// Training forward that also folds this minibatch into the running
    /// statistics.
    pub fn forward_train(
        &mut self,
        input: &Tensor,
        noise: &NoiseStream,
    ) -> Result<(Tensor, ForwardCache)> {
        let (out, cache) = self.forward_batch_stats(input, noise)?;
        self.update_running(&cache);
        Ok((out, cache))
    }

    /// Training-mode forward (minibatch statistics, noise) without touching
    /// the running statistics.
    pub fn forward_batch_stats(
        &self,
        input: &Tensor,
        noise: &NoiseStream,
    ) -> Result<(Tensor, ForwardCache)> {
        self.forward_impl(input, Some(noise), None)
    }

    /// Recomputes the training forward on `input` while holding λ̂, `s` and
    /// the noise draws fixed at the values recorded in `cache`. This is the
    /// function whose exact derivative [`Self::backward`] computes.
    pub fn forward_frozen(&self, input: &Tensor, cache: &ForwardCache) -> Result<Tensor> {
        if input.shape() != cache.shape.as_slice() {
            return Err(Error::Shape("frozen forward on a different shape".into()));
        }
        let frozen = Frozen { lambda: &cache.lambda, s: &cache.s, z: &cache.z };
        Ok(self.forward_impl(input, None, Some(frozen))?.0)
    }

    fn forward_impl(
        &self,
        input: &Tensor,
        noise: Option<&NoiseStream>,
        frozen: Option<Frozen<'_>>,
    ) -> Result<(Tensor, ForwardCache)> {
        self.state.validate()?;
        check_input(input, self.channels())?;
        let groups = resolve_groups(input.shape(), &self.grouping)?;
        check_group_sizes(&groups)?;
        let data = input.data();
        let eps = self.state.eps;
        let alpha = self.state.alpha;

        let outs = map_groups(&groups, data.len(), |g, idx| {
            let (mean, var) = group_moments(data, idx);
            let inv_std = 1.0 / (var + eps).sqrt();
            let h: Vec<f64> = idx.iter().map(|&i| (data[i] - mean) * inv_std).collect();
            let estimate = match frozen {
                Some(f) => LambdaEstimate {
                    lambda_hat: f.lambda[g],
                    nll_at_1: f64::NAN,
                    d1: f64::NAN,
                    d2: f64::NAN,
                    clamped: false,
                    alpha_used: alpha,
                },
                None => estimate_lambda_for_layer(&h, alpha)?,
            };
            let lambda = estimate.lambda_hat;
            let x: Vec<f64> = h.iter().map(|&v| psi(v, lambda)).collect();
            let s = match (frozen, self.state.noise_mode) {
                (Some(f), _) => f.s[g],
                (None, NoiseMode::Unscaled) => HALF_NORMAL_MEAN,
                (None, _) => noise_scale(&x),
            };
            Ok(GroupOut { mean, var, inv_std, estimate, h, x, s })
        })?;

        let len = data.len();
        let mut h = vec![0.0; len];
        let mut x = vec![0.0; len];
        for (idx, o) in groups.iter().zip(&outs) {
            for (k, &i) in idx.iter().enumerate() {
                h[i] = o.h[k];
                x[i] = o.x[k];
            }
        }
        let group_of = group_index(&groups, len);

        let z = match (frozen, noise) {
            (Some(f), _) => f.z.to_vec(),
            (None, Some(stream)) if self.state.noise_active() => stream.sample_vec(0, len),
            _ => Vec::new(),
        };
        let y = if z.is_empty() {
            x.clone()
        } else {
            let xi = self.state.xi;
            match self.state.noise_mode {
                NoiseMode::GaussianDropout { p } => {
                    let c = ((1.0 - p) / p).sqrt();
                    x.iter().zip(&z).map(|(x, z)| x * (1.0 + z * c)).collect()
                }
                NoiseMode::None => x.clone(),
                NoiseMode::Scaled | NoiseMode::Unscaled => x
                    .iter()
                    .zip(&z)
                    .zip(&group_of)
                    .map(|((x, z), &g)| x + z * xi * outs[g].s)
                    .collect(),
            }
        };

        let mut out = vec![0.0; len];
        for (i, v) in out.iter_mut().enumerate() {
            let c = input.channel_of(i);
            *v = self.state.gamma[c] * y[i] + self.state.beta[c];
        }

        let cache = ForwardCache {
            shape: input.shape().to_vec(),
            group_of,
            mean: outs.iter().map(|o| o.mean).collect(),
            var: outs.iter().map(|o| o.var).collect(),
            inv_std: outs.iter().map(|o| o.inv_std).collect(),
            lambda: outs.iter().map(|o| o.estimate.lambda_hat).collect(),
            estimates: outs.iter().map(|o| o.estimate).collect(),
            s: outs.iter().map(|o| o.s).collect(),
            groups,
            h,
            x,
            y,
            z,
        };
        Ok((Tensor::new(input.shape().to_vec(), out)?, cache))
    }

    /// `running ← (1 − m)·running + m·minibatch` for μ, σ² and λ
    /// (per-channel groups only).
    pub fn update_running(&mut self, cache: &ForwardCache) {
        let st = &mut self.state;
        if self.grouping.mode == GroupingMode::Batch {
            let m = st.momentum;
            for c in 0..st.gamma.len() {
                st.running_mu[c] = (1.0 - m) * st.running_mu[c] + m * cache.mean[c];
                st.running_sigma2[c] = (1.0 - m) * st.running_sigma2[c] + m * cache.var[c];
                st.running_lambda[c] = (1.0 - m) * st.running_lambda[c] + m * cache.lambda[c];
            }
        }
        st.steps += 1;
    }

    /// Evaluation forward: no noise, no randomness, no state change.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval_probe(input)?.0)
    }

    /// Evaluation forward that also returns the post-transform, pre-affine
    /// values `x`.
    pub fn forward_eval_probe(&self, input: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.state.validate()?;
        check_input(input, self.channels())?;
        let st = &self.state;
        let data = input.data();
        let mut x = vec![0.0; data.len()];
        match self.grouping.mode {
            GroupingMode::Batch => {
                if st.steps == 0 {
                    return Err(Error::Uninitialized(
                        "batch-grouped layer evaluated before any training step".into(),
                    ));
                }
                for (i, xv) in x.iter_mut().enumerate() {
                    let c = input.channel_of(i);
                    let inv_std = 1.0 / (st.running_sigma2[c] + st.eps).sqrt();
                    *xv = psi((data[i] - st.running_mu[c]) * inv_std, st.running_lambda[c]);
                }
            }
            _ => {
                let groups = resolve_groups(input.shape(), &self.grouping)?;
                check_group_sizes(&groups)?;
                let per_group = map_groups(&groups, data.len(), |_, idx| {
                    let (mean, var) = group_moments(data, idx);
                    let inv_std = 1.0 / (var + st.eps).sqrt();
                    let h: Vec<f64> = idx.iter().map(|&i| (data[i] - mean) * inv_std).collect();
                    let lambda = estimate_lambda_for_layer(&h, st.alpha)?.lambda_hat;
                    Ok(h.into_iter().map(|v| psi(v, lambda)).collect::<Vec<_>>())
                })?;
                for (idx, xs) in groups.iter().zip(per_group) {
                    for (&i, v) in idx.iter().zip(xs) {
                        x[i] = v;
                    }
                }
            }
        }
        let out = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = input.channel_of(i);
                st.gamma[c] * v + st.beta[c]
            })
            .collect();
        Ok((Tensor::new(input.shape().to_vec(), out)?, x))
    }

    /// Gradients wrt the input, γ and β. λ̂, `s` and the noise draws are
    /// constants; the normalization statistics are not.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        if grad_out.shape() != cache.shape.as_slice() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match forward shape {:?}",
                grad_out.shape(),
                cache.shape
            )));
        }
        let st = &self.state;
        let g = grad_out.data();
        let channels = st.channels();
        let mut grad_gamma = vec![0.0; channels];
        let mut grad_beta = vec![0.0; channels];
        let mut grad_h = vec![0.0; g.len()];
        let dropout = match st.noise_mode {
            NoiseMode::GaussianDropout { p } if !cache.z.is_empty() => Some(((1.0 - p) / p).sqrt()),
            _ => None,
        };
        for i in 0..g.len() {
            let c = grad_out.channel_of(i);
            grad_gamma[c] += g[i] * cache.y[i];
            grad_beta[c] += g[i];
            let mut gx = g[i] * st.gamma[c];
            if let Some(k) = dropout {
                gx *= 1.0 + cache.z[i] * k;
            }
            grad_h[i] = gx * psi_dh(cache.h[i], cache.lambda[cache.group_of[i]]);
        }
        let mut grad_in = vec![0.0; g.len()];
        for (gi, idx) in cache.groups.iter().enumerate() {
            normalize_backward(idx, &cache.h, &grad_h, cache.inv_std[gi], &mut grad_in);
        }
        Ok((Tensor::new(cache.shape.clone(), grad_in)?, grad_gamma, grad_beta))
    }
}

/// Intermediates of a conventional normalization forward.
#[derive(Debug, Clone)]
pub struct ConventionalCache {
    pub shape: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub h: Vec<f64>,
}

/// Batch/layer/instance/group normalization without the power transform
/// and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionalNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub running_mu: Vec<f64>,
    pub running_sigma2: Vec<f64>,
    pub steps: u64,
    pub grouping: GroupingSpec,
}

impl ConventionalNorm {
    pub fn new(channels: usize, grouping: GroupingSpec) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            running_mu: vec![0.0; channels],
            running_sigma2: vec![1.0; channels],
            steps: 0,
            grouping,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_batch_stats(&self, input: &Tensor) -> Result<(Tensor, ConventionalCache)> {
        check_input(input, self.channels())?;
        let groups = resolve_groups(input.shape(), &self.grouping)?;
        check_group_sizes(&groups)?;
        let data = input.data();
        let mut h = vec![0.0; data.len()];
        let mut mean = Vec::with_capacity(groups.len());
        let mut var = Vec::with_capacity(groups.len());
        let mut inv_std = Vec::with_capacity(groups.len());
        for idx in &groups {
            let (m, v) = group_moments(data, idx);
            let r = 1.0 / (v + self.eps).sqrt();
            for &i in idx {
                h[i] = (data[i] - m) * r;
            }
            mean.push(m);
            var.push(v);
            inv_std.push(r);
        }
        let out = h
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = input.channel_of(i);
                self.gamma[c] * v + self.beta[c]
            })
            .collect();
        let cache = ConventionalCache { shape: input.shape().to_vec(), groups, mean, var, inv_std, h };
        Ok((Tensor::new(input.shape().to_vec(), out)?, cache))
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, ConventionalCache)> {
        let (out, cache) = self.forward_batch_stats(input)?;
        self.update_running(&cache);
        Ok((out, cache))
    }

    pub fn update_running(&mut self, cache: &ConventionalCache) {
        if self.grouping.mode == GroupingMode::Batch {
            let m = self.momentum;
            for c in 0..self.gamma.len() {
                self.running_mu[c] = (1.0 - m) * self.running_mu[c] + m * cache.mean[c];
                self.running_sigma2[c] = (1.0 - m) * self.running_sigma2[c] + m * cache.var[c];
            }
        }
        self.steps += 1;
    }

    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval_probe(input)?.0)
    }

    /// Evaluation forward that also returns the normalized, pre-affine values.
    pub fn forward_eval_probe(&self, input: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if self.grouping.mode != GroupingMode::Batch {
            let (out, cache) = self.forward_batch_stats(input)?;
            return Ok((out, cache.h));
        }
        check_input(input, self.channels())?;
        if self.steps == 0 {
            return Err(Error::Uninitialized(
                "batch-grouped layer evaluated before any training step".into(),
            ));
        }
        let data = input.data();
        let h: Vec<f64> = (0..data.len())
            .map(|i| {
                let c = input.channel_of(i);
                (data[i] - self.running_mu[c]) * (1.0 / (self.running_sigma2[c] + self.eps).sqrt())
            })
            .collect();
        let out = h
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = input.channel_of(i);
                self.gamma[c] * v + self.beta[c]
            })
            .collect();
        Ok((Tensor::new(input.shape().to_vec(), out)?, h))
    }

    pub fn backward(
        &self,
        cache: &ConventionalCache,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        if grad_out.shape() != cache.shape.as_slice() {
            return Err(Error::Shape("gradient shape does not match forward shape".into()));
        }
        let g = grad_out.data();
        let mut grad_gamma = vec![0.0; self.channels()];
        let mut grad_beta = vec![0.0; self.channels()];
        let mut grad_h = vec![0.0; g.len()];
        for i in 0..g.len() {
            let c = grad_out.channel_of(i);
            grad_gamma[c] += g[i] * cache.h[i];
            grad_beta[c] += g[i];
            grad_h[i] = g[i] * self.gamma[c];
        }
        let mut grad_in = vec![0.0; g.len()];
        for (gi, idx) in cache.groups.iter().enumerate() {
            normalize_backward(idx, &cache.h, &grad_h, cache.inv_std[gi], &mut grad_in);
        }
        Ok((Tensor::new(cache.shape.clone(), grad_in)?, grad_gamma, grad_beta))
    }
}
