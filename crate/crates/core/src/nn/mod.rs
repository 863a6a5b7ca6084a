//! Small MLP built on the tape, with pre-activation normalization layers.

mod tape;
mod train;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use tape::{softmax_cross_entropy, Node, NodeId, Op, ParamRef, Tape};
pub use train::{
    evaluate, gradient_check, train, EpochRecord, GradCheckReport, Sgd, TrainConfig, TrainingLog,
};

use crate::diagnostics::ProbeNetwork;
use crate::error::{Error, Result};
use crate::noise_rng::NoiseStream;
use crate::normalization::{
    ConventionalNorm, ForwardCache, GroupingSpec, NoiseMode, NormLayerState, NormalityNorm,
    DEFAULT_EPS, DEFAULT_MOMENTUM, DEFAULT_XI,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Conventional,
    Normality,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "conventional" => Ok(Self::Conventional),
            "normality" => Ok(Self::Normality),
            _ => Err(Error::Config(format!(
                "unknown normalization {s:?} (expected none, conventional or normality)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Normalization settings of one hidden layer. `alpha`, `xi` and
/// `noise_mode` only matter for the normality kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub kind: NormKind,
    pub grouping: GroupingSpec,
    pub alpha: f64,
    pub xi: f64,
    pub noise_mode: NoiseMode,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            kind: NormKind::Normality,
            grouping: GroupingSpec::default(),
            alpha: 1.0,
            xi: DEFAULT_XI,
            noise_mode: NoiseMode::Scaled,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl NormConfig {
    pub fn of_kind(kind: NormKind) -> Self {
        Self { kind, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// One entry per hidden layer.
    pub norms: Vec<NormConfig>,
    pub activation: Activation,
}

impl MlpSpec {
    /// Every hidden layer gets the same normalization.
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize, norm: NormConfig) -> Self {
        let norms = vec![norm; hidden.len()];
        Self { input_dim, hidden, classes, norms, activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if self.norms.len() != self.hidden.len() {
            return Err(Error::Config(format!(
                "{} normalization configs for {} hidden layers",
                self.norms.len(),
                self.hidden.len()
            )));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `[fan_in, fan_out]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NormLayer {
    None,
    Conventional(ConventionalNorm),
    Normality(NormalityNorm),
}

impl NormLayer {
    fn build(cfg: &NormConfig, width: usize) -> Result<Self> {
        Ok(match cfg.kind {
            NormKind::None => NormLayer::None,
            NormKind::Conventional => {
                let mut l = ConventionalNorm::new(width, cfg.grouping);
                l.eps = cfg.eps;
                l.momentum = cfg.momentum;
                NormLayer::Conventional(l)
            }
            NormKind::Normality => {
                let state = NormLayerState {
                    eps: cfg.eps,
                    xi: cfg.xi,
                    alpha: cfg.alpha,
                    noise_mode: cfg.noise_mode,
                    momentum: cfg.momentum,
                    ..NormLayerState::new(width)
                };
                NormLayer::Normality(NormalityNorm::with_state(state, cfg.grouping)?)
            }
        })
    }

    fn affine(&self) -> Option<(&[f64], &[f64])> {
        match self {
            NormLayer::None => None,
            NormLayer::Conventional(l) => Some((&l.gamma, &l.beta)),
            NormLayer::Normality(l) => Some((&l.state.gamma, &l.state.beta)),
        }
    }
}

/// Result of one tape-recorded forward pass.
#[derive(Debug, Clone)]
pub struct TapeRun {
    pub tape: Tape,
    pub loss: NodeId,
    pub logits: NodeId,
    pub params: Vec<(ParamRef, NodeId)>,
}

impl TapeRun {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }

    /// Normality-layer caches by hidden-layer index.
    fn normality_caches(&self) -> Vec<Option<&ForwardCache>> {
        let mut out = Vec::new();
        for n in self.tape.nodes() {
            match &n.op {
                Op::Normality { cache, .. } => out.push(Some(cache.as_ref())),
                Op::Conventional { .. } => out.push(None),
                _ => {}
            }
        }
        out
    }
}

/// Dense layers interleaved with normalization and activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub dense: Vec<Dense>,
    pub norms: Vec<NormLayer>,
}

/// Deterministic model from `seed`: weights uniform on `±√(6/fan_in)`,
/// zero biases, unit γ and zero β.
pub fn build_mlp(spec: &MlpSpec, seed: u64) -> Result<Mlp> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = spec.widths();
    let dense = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-a, a);
            Dense {
                fan_in,
                fan_out,
                weight: (0..fan_in * fan_out).map(|_| u.sample(&mut rng)).collect(),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    let norms = spec
        .norms
        .iter()
        .zip(&spec.hidden)
        .map(|(cfg, &w)| NormLayer::build(cfg, w))
        .collect::<Result<_>>()?;
    Ok(Mlp { spec: spec.clone(), dense, norms })
}

fn dense_forward(d: &Dense, x: &Tensor) -> Result<Tensor> {
    let b = x.batch();
    if x.shape() != [b, d.fan_in] {
        return Err(Error::Shape(format!("input {:?} for a layer of fan-in {}", x.shape(), d.fan_in)));
    }
    let mut y = tape::matmul(x.data(), &d.weight, b, d.fan_in, d.fan_out);
    for (i, v) in y.iter_mut().enumerate() {
        *v += d.bias[i % d.fan_out];
    }
    Tensor::new(vec![b, d.fan_out], y)
}

/// Per-hidden-layer values recorded by an evaluation forward.
#[derive(Debug, Clone)]
pub struct EvalTrace {
    /// Normalization outputs (pre-activations when a layer has none).
    pub outputs: Vec<Tensor>,
    /// Pre-affine normalized values, see [`ProbeNetwork::normality_probes`].
    pub probes: Vec<Tensor>,
    pub logits: Tensor,
}

impl Mlp {
    pub fn hidden_layers(&self) -> usize {
        self.spec.hidden.len()
    }

    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for l in 0..self.dense.len() {
            out.push(ParamRef::Weight(l));
            out.push(ParamRef::Bias(l));
            if l < self.norms.len() && self.norms[l].affine().is_some() {
                out.push(ParamRef::Gamma(l));
                out.push(ParamRef::Beta(l));
            }
        }
        out
    }

    pub fn param(&self, p: ParamRef) -> &[f64] {
        match p {
            ParamRef::Weight(l) => &self.dense[l].weight,
            ParamRef::Bias(l) => &self.dense[l].bias,
            ParamRef::Gamma(l) => self.norms[l].affine().expect("normalized layer").0,
            ParamRef::Beta(l) => self.norms[l].affine().expect("normalized layer").1,
        }
    }

    pub fn param_mut(&mut self, p: ParamRef) -> &mut [f64] {
        match p {
            ParamRef::Weight(l) => &mut self.dense[l].weight,
            ParamRef::Bias(l) => &mut self.dense[l].bias,
            ParamRef::Gamma(l) | ParamRef::Beta(l) => {
                let gamma = matches!(p, ParamRef::Gamma(_));
                match &mut self.norms[l] {
                    NormLayer::None => panic!("layer {l} has no affine parameters"),
                    NormLayer::Conventional(n) => {
                        if gamma {
                            &mut n.gamma
                        } else {
                            &mut n.beta
                        }
                    }
                    NormLayer::Normality(n) => {
                        if gamma {
                            &mut n.state.gamma
                        } else {
                            &mut n.state.beta
                        }
                    }
                }
            }
        }
    }

    fn param_shape(&self, p: ParamRef) -> Vec<usize> {
        match p {
            ParamRef::Weight(l) => vec![self.dense[l].fan_in, self.dense[l].fan_out],
            _ => vec![self.param(p).len()],
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.param_refs().iter().map(|&p| self.param(p).len()).sum()
    }

    /// Training-mode forward recorded on a tape. Normality layer `l` draws
    /// its noise from stream `l` at `step`. Running statistics are updated
    /// only when `update_running` is set.
    pub fn forward_tape(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        seed: u64,
        step: u64,
        update_running: bool,
    ) -> Result<TapeRun> {
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let mut h = tape.input(x.clone());
        let activation = self.spec.activation;
        for l in 0..self.dense.len() {
            let w = tape.param(ParamRef::Weight(l), Tensor::new(self.param_shape(ParamRef::Weight(l)), self.dense[l].weight.clone())?);
            let b = tape.param(ParamRef::Bias(l), Tensor::new(vec![self.dense[l].fan_out], self.dense[l].bias.clone())?);
            params.push((ParamRef::Weight(l), w));
            params.push((ParamRef::Bias(l), b));
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if l == self.norms.len() {
                break;
            }
            if let Some((gv, bv)) = self.norms[l].affine() {
                let c = gv.len();
                let g = tape.param(ParamRef::Gamma(l), Tensor::new(vec![c], gv.to_vec())?);
                let be = tape.param(ParamRef::Beta(l), Tensor::new(vec![c], bv.to_vec())?);
                params.push((ParamRef::Gamma(l), g));
                params.push((ParamRef::Beta(l), be));
                h = match &mut self.norms[l] {
                    NormLayer::Conventional(n) => tape.conventional(h, g, be, n, update_running)?,
                    NormLayer::Normality(n) => {
                        let stream = NoiseStream::new(seed, l as u64).at_step(step);
                        tape.normality(h, g, be, n, &stream, update_running)?
                    }
                    NormLayer::None => unreachable!(),
                };
            }
            if activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        let loss = tape.softmax_cross_entropy(h, labels)?;
        Ok(TapeRun { tape, loss, logits: h, params })
    }

    /// Loss of the training forward with every normality layer's λ̂, noise
    /// scale and noise draws frozen at the values recorded in `run`.
    pub fn loss_frozen(&self, x: &Tensor, labels: &[usize], run: &TapeRun) -> Result<f64> {
        let caches = run.normality_caches();
        let mut h = x.clone();
        let mut k = 0;
        for l in 0..self.dense.len() {
            h = dense_forward(&self.dense[l], &h)?;
            if l == self.norms.len() {
                break;
            }
            match &self.norms[l] {
                NormLayer::None => {}
                NormLayer::Conventional(n) => {
                    h = n.forward_batch_stats(&h)?.0;
                    k += 1;
                }
                NormLayer::Normality(n) => {
                    let cache = caches[k].ok_or_else(|| Error::Shape("tape/model mismatch".into()))?;
                    h = n.forward_frozen(&h, cache)?;
                    k += 1;
                }
            }
            if self.spec.activation == Activation::Relu {
                for v in h.data_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(softmax_cross_entropy(&h, labels)?.0)
    }

    /// Evaluation forward from the output of hidden layer `from` (or the
    /// input when `from` is `None`) through hidden layer `to`, or to the
    /// logits when `to` is `None`.
    fn eval_range(
        &self,
        start: &Tensor,
        from: Option<usize>,
        to: Option<usize>,
        mut trace: Option<&mut EvalTrace>,
    ) -> Result<Tensor> {
        let act = |t: &mut Tensor| {
            if self.spec.activation == Activation::Relu {
                for v in t.data_mut() {
                    *v = v.max(0.0);
                }
            }
        };
        let mut h = start.clone();
        if from.is_some() {
            act(&mut h);
        }
        let first = from.map_or(0, |f| f + 1);
        let last = to.unwrap_or(self.dense.len() - 1);
        for l in first..=last {
            h = dense_forward(&self.dense[l], &h)?;
            if l == self.norms.len() {
                break;
            }
            let probe;
            (h, probe) = match &self.norms[l] {
                NormLayer::None => (h.clone(), h),
                NormLayer::Conventional(n) => {
                    let (y, p) = n.forward_eval_probe(&h)?;
                    let shape = y.shape().to_vec();
                    (y, Tensor::new(shape, p)?)
                }
                NormLayer::Normality(n) => {
                    let (y, p) = n.forward_eval_probe(&h)?;
                    let shape = y.shape().to_vec();
                    (y, Tensor::new(shape, p)?)
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.outputs.push(h.clone());
                t.probes.push(probe);
            }
            if Some(l) != to {
                act(&mut h);
            }
        }
        Ok(h)
    }

    /// Evaluation-mode logits: running statistics, no noise, no randomness.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_range(x, None, None, None)
    }

    pub fn eval_trace(&self, x: &Tensor) -> Result<EvalTrace> {
        let mut trace = EvalTrace { outputs: Vec::new(), probes: Vec::new(), logits: Tensor::zeros(vec![0]) };
        trace.logits = self.eval_range(x, None, None, Some(&mut trace))?;
        Ok(trace)
    }

    /// Every parameter and running statistic under a stable name.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .param_refs()
            .into_iter()
            .map(|p| (p.to_string(), self.param_shape(p), self.param(p).to_vec()))
            .collect();
        for (l, n) in self.norms.iter().enumerate() {
            let mut push = |name: &str, v: &[f64]| {
                out.push((format!("norm{l}.{name}"), vec![v.len()], v.to_vec()));
            };
            match n {
                NormLayer::None => {}
                NormLayer::Conventional(c) => {
                    push("running_mu", &c.running_mu);
                    push("running_sigma2", &c.running_sigma2);
                }
                NormLayer::Normality(c) => {
                    push("running_mu", &c.state.running_mu);
                    push("running_sigma2", &c.state.running_sigma2);
                    push("running_lambda", &c.state.running_lambda);
                }
            }
        }
        out
    }

    /// Inverse of [`Self::named_tensors`]; every name must be present with
    /// the matching length.
    pub fn load_named(&mut self, tensors: &[(String, Vec<f64>)]) -> Result<()> {
        let names: Vec<(String, Vec<usize>, Vec<f64>)> = self.named_tensors();
        for (name, _, current) in names {
            let (_, v) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks tensor {name}")))?;
            if v.len() != current.len() {
                return Err(Error::Shape(format!(
                    "tensor {name} has {} values, model expects {}",
                    v.len(),
                    current.len()
                )));
            }
            *self.named_slot(&name)? = v.clone();
        }
        Ok(())
    }

    fn named_slot(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        let bad = || Error::Parse(format!("unknown tensor name {name}"));
        let (layer, field) = name.split_once('.').ok_or_else(bad)?;
        if let Some(l) = layer.strip_prefix("dense") {
            let l: usize = l.parse().map_err(|_| bad())?;
            let d = self.dense.get_mut(l).ok_or_else(bad)?;
            return match field {
                "weight" => Ok(&mut d.weight),
                "bias" => Ok(&mut d.bias),
                _ => Err(bad()),
            };
        }
        let l: usize = layer.strip_prefix("norm").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        match self.norms.get_mut(l).ok_or_else(bad)? {
            NormLayer::None => Err(bad()),
            NormLayer::Conventional(c) => match field {
                "gamma" => Ok(&mut c.gamma),
                "beta" => Ok(&mut c.beta),
                "running_mu" => Ok(&mut c.running_mu),
                "running_sigma2" => Ok(&mut c.running_sigma2),
                _ => Err(bad()),
            },
            NormLayer::Normality(c) => match field {
                "gamma" => Ok(&mut c.state.gamma),
                "beta" => Ok(&mut c.state.beta),
                "running_mu" => Ok(&mut c.state.running_mu),
                "running_sigma2" => Ok(&mut c.state.running_sigma2),
                "running_lambda" => Ok(&mut c.state.running_lambda),
                _ => Err(bad()),
            },
        }
    }

    /// Training forwards folded into each layer's running statistics.
    pub fn norm_steps(&self) -> Vec<u64> {
        self.norms
            .iter()
            .map(|n| match n {
                NormLayer::None => 0,
                NormLayer::Conventional(c) => c.steps,
                NormLayer::Normality(c) => c.state.steps,
            })
            .collect()
    }

    pub fn set_norm_steps(&mut self, steps: &[u64]) -> Result<()> {
        if steps.len() != self.norms.len() {
            return Err(Error::Shape("step counts do not match the layer count".into()));
        }
        for (n, &s) in self.norms.iter_mut().zip(steps) {
            match n {
                NormLayer::None => {}
                NormLayer::Conventional(c) => c.steps = s,
                NormLayer::Normality(c) => c.state.steps = s,
            }
        }
        Ok(())
    }
}

impl ProbeNetwork for Mlp {
    fn num_layers(&self) -> usize {
        self.hidden_layers()
    }

    fn layer_outputs(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.eval_trace(input)?.outputs)
    }

    fn propagate(&self, from: usize, value: &Tensor, to: usize) -> Result<Tensor> {
        if to <= from || to >= self.hidden_layers() {
            return Err(Error::Config(format!("cannot propagate from layer {from} to {to}")));
        }
        self.eval_range(value, Some(from), Some(to), None)
    }

    fn normality_probes(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.eval_trace(input)?.probes)
    }
}
