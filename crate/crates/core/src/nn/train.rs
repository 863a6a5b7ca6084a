use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mlp, ParamRef, TapeRun};
use crate::data::{shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::nn::softmax_cross_entropy;
use crate::tensor::Tensor;

/// Keeps the shuffling stream apart from the initialization stream when
/// both are derived from the same user seed.
const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Multiplies the learning rate every `lr_decay_every` epochs
    /// (0 disables the schedule).
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 10,
            seed: 0,
            lr_decay_factor: 0.1,
            lr_decay_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.learning_rate) || !nonneg(self.weight_decay) {
            return Err(Error::Config("learning rate and weight decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr decay factor must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.learning_rate,
            k => self.learning_rate * self.lr_decay_factor.powi((epoch / k) as i32),
        }
    }
}

/// SGD with heavy-ball momentum and coupled weight decay:
/// `g ← g + wd·w; v ← μ·v + g; w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    refs: Vec<ParamRef>,
    velocity: Vec<Vec<f64>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(model: &Mlp, momentum: f64, weight_decay: f64) -> Self {
        let refs = model.param_refs();
        let velocity = refs.iter().map(|&p| vec![0.0; model.param(p).len()]).collect();
        Self { refs, velocity, momentum, weight_decay }
    }

    /// Applies one update from the gradients on `run`'s tape. Parameters
    /// the loss does not reach get a zero gradient.
    pub fn step(&mut self, model: &mut Mlp, run: &TapeRun, lr: f64) {
        for (k, &p) in self.refs.iter().enumerate() {
            let grad = run
                .params
                .iter()
                .find(|(q, _)| *q == p)
                .and_then(|&(_, id)| run.tape.grad(id))
                .map(|g| g.data());
            let v = &mut self.velocity[k];
            let w = model.param_mut(p);
            for i in 0..w.len() {
                let g = grad.map_or(0.0, |g| g[i]) + self.weight_decay * w[i];
                v[i] = self.momentum * v[i] + g;
                w[i] -= lr * v[i];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut s = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                r.train_loss,
                r.train_acc,
                opt(r.val_loss),
                opt(r.val_acc)
            ));
        }
        s
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.val_acc)
    }
}

fn check_dataset(model: &Mlp, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Precondition(format!("{what} set is empty")));
    }
    if data.dim() != model.spec.input_dim {
        return Err(Error::Shape(format!(
            "{what} set has {} features, model expects {}",
            data.dim(),
            model.spec.input_dim
        )));
    }
    if data.labels.iter().any(|&y| y >= model.spec.classes) {
        return Err(Error::Domain(format!(
            "{what} labels exceed the model's {} classes",
            model.spec.classes
        )));
    }
    Ok(())
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.channels();
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = &logits.data()[r * k..(r + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count()
}

/// Mean loss and accuracy in evaluation mode.
pub fn evaluate(model: &Mlp, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    check_dataset(model, data, "evaluation")?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut hits) = (0.0, 0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.gather(chunk);
        let logits = model.predict(&x)?;
        loss += softmax_cross_entropy(&logits, &y)?.0 * chunk.len() as f64;
        hits += correct(&logits, &y);
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

/// Minibatch SGD. Each epoch reshuffles; a trailing partial batch is
/// dropped. A non-finite loss aborts with [`Error::Divergence`].
pub fn train(
    model: &mut Mlp,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainingLog> {
    config.validate()?;
    check_dataset(model, train_set, "training")?;
    if let Some(v) = val_set {
        check_dataset(model, v, "validation")?;
    }
    if train_set.len() < config.batch_size {
        return Err(Error::Precondition(format!(
            "training set of {} rows is smaller than one batch of {}",
            train_set.len(),
            config.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut sgd = Sgd::new(model, config.momentum, config.weight_decay);
    let mut log = TrainingLog::default();
    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let order = shuffled_indices(train_set.len(), &mut rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0, 0);
        for chunk in order.chunks_exact(config.batch_size) {
            let (x, y) = train_set.gather(chunk);
            let mut run = model.forward_tape(&x, &y, config.seed, step, true)?;
            let loss = run.loss_value();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            run.tape.backward(run.loss)?;
            sgd.step(model, &run, lr);
            loss_sum += loss * chunk.len() as f64;
            hits += correct(run.tape.value(run.logits), &y);
            seen += chunk.len();
            step += 1;
        }
        let (val_loss, val_acc) = match val_set {
            Some(v) => {
                let (l, a) = evaluate(model, v, config.batch_size)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        log.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: hits as f64 / seen as f64,
            val_loss,
            val_acc,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares tape gradients of every parameter against a five-point central
/// difference of the training loss. Normality layers keep λ̂, the noise
/// scale and the noise draws fixed, as in the backward pass.
pub fn gradient_check(model: &Mlp, x: &Tensor, labels: &[usize], seed: u64) -> Result<GradCheckReport> {
    const H: f64 = 1e-4;
    let mut m = model.clone();
    let mut run = m.forward_tape(x, labels, seed, 0, false)?;
    run.tape.backward(run.loss)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for &(p, id) in &run.params {
        let analytic = run.tape.grad(id).map(|g| g.data().to_vec());
        for i in 0..m.param(p).len() {
            let base = m.param(p)[i];
            let mut at = |delta: f64| -> Result<f64> {
                m.param_mut(p)[i] = base + delta;
                let l = m.loss_frozen(x, labels, &run);
                m.param_mut(p)[i] = base;
                l
            };
            let numeric =
                (-at(2.0 * H)? + 8.0 * at(H)? - 8.0 * at(-H)? + at(-2.0 * H)?) / (12.0 * H);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = p.to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
