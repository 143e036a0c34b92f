//! Losses, Adam, the training loop and occlusion-based weak labels.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::graph::{batches, DatasetSplit, Graph, SplitName};
use crate::layers::{Bound, ParamStore};
use crate::model::{Model, ModelConfig};
use crate::pooling::PoolMode;
use crate::scalar::Scalar;
use crate::seeding::substream;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Floor applied to predicted attention inside the KL logarithm.
pub const KL_CLAMP: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    None,
    Gt,
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs at whose start the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub beta: f64,
    pub supervision: Supervision,
    pub seed: u64,
    /// Validation accuracy is computed every this many epochs and after the last; 0 disables it.
    pub eval_every: usize,
    /// Parameters whose names start with any of these prefixes are not updated.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 1e-4,
            epochs: 100,
            decay_epochs: vec![90],
            decay_factor: 0.1,
            beta: 100.0,
            supervision: Supervision::None,
            seed: 0,
            eval_every: 1,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and nonnegative", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and nonnegative".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs must be strictly increasing".into());
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("decay_epochs must be smaller than epochs".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

/// `(pred - label)^2`.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, label: f64) -> Result<Var> {
    let y = tape.constant(Tensor::scalar(T::from_f64_lossy(label)));
    let d = tape.sub(pred, y)?;
    let sq = tape.mul(d, d)?;
    tape.sum(sq)
}

fn check_target(alpha_gt: &[f64]) -> Result<bool> {
    if let Some((i, v)) = alpha_gt.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Config(format!("attention target entry {i} is {v}")));
    }
    Ok(alpha_gt.iter().any(|&v| v > 0.0))
}

/// `(beta / N) * sum_i gt_i log(gt_i / alpha_i)` on the tape.
///
/// Returns `None` when the target is all zero, in which case the term is skipped.
pub fn kl_attention_loss<T: Scalar>(
    tape: &mut Tape<T>,
    alpha_gt: &[f64],
    alpha: Var,
    beta: f64,
    n: usize,
) -> Result<Option<Var>> {
    let shape = tape.shape(alpha);
    if shape != (alpha_gt.len(), 1) {
        return Err(Error::shape("kl_attention_loss", shape, (alpha_gt.len(), 1)));
    }
    if !check_target(alpha_gt)? {
        return Ok(None);
    }
    let entropy_part: f64 = alpha_gt.iter().filter(|&&g| g > 0.0).map(|&g| g * g.ln()).sum();
    let gt = tape.constant(Tensor::column(alpha_gt.iter().map(|&g| T::from_f64_lossy(g)).collect()));
    let clamped = tape.clamp_min(alpha, T::from_f64_lossy(KL_CLAMP));
    let logs = tape.log(clamped)?;
    let weighted = tape.mul(gt, logs)?;
    let cross = tape.sum(weighted)?;
    let scale = beta / n as f64;
    let neg = tape.scale(cross, T::from_f64_lossy(-scale));
    let c = tape.constant(Tensor::scalar(T::from_f64_lossy(scale * entropy_part)));
    Ok(Some(tape.add(neg, c)?))
}

/// Plain-value form of [`kl_attention_loss`]; 0 for an all-zero target.
pub fn kl_value(alpha_gt: &[f64], alpha: &[f64], beta: f64, n: usize) -> Result<f64> {
    if alpha_gt.len() != alpha.len() {
        return Err(Error::shape("kl_value", (alpha_gt.len(), 1), (alpha.len(), 1)));
    }
    check_target(alpha_gt)?;
    let s: f64 =
        alpha_gt.iter().zip(alpha).filter(|(&g, _)| g > 0.0).map(|(&g, &a)| g * (g.ln() - a.max(KL_CLAMP).ln())).sum();
    Ok(beta / n as f64 * s)
}

/// Adam moments for every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One Adam update with L2 regularization folded into the gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let all = vec![true; params.len()];
    adam_step_masked(params, grads, state, lr, weight_decay, &all)
}

/// [`adam_step`] touching only parameters with `update[i]` set.
pub fn adam_step_masked<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
    update: &[bool],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || update.len() != params.len() {
        return Err(Error::Config("adam_step: parameter, gradient and state counts differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(ADAM_BETA1);
    let b2 = T::from_f64_lossy(ADAM_BETA2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - ADAM_BETA1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - ADAM_BETA2.powi(t));
    let lr = T::from_f64_lossy(lr);
    let wd = T::from_f64_lossy(weight_decay);
    let eps = T::from_f64_lossy(ADAM_EPS);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        if !update[i] {
            continue;
        }
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k] + wd * *w;
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-graph attention targets aligned with a split by graph index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLabels {
    pub split: SplitName,
    pub alphas: Vec<Vec<f64>>,
}

pub const WEAK_FORMAT_VERSION: u32 = 1;

/// One line of a weak-label file; every line is self-describing.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeakLine {
    format_version: u32,
    split: SplitName,
    graph: usize,
    alpha: Vec<f64>,
}

impl WeakLabels {
    pub fn validate_against(&self, split: &DatasetSplit) -> Result<()> {
        if self.alphas.len() != split.len() {
            return Err(Error::Config(format!(
                "weak labels cover {} graphs, split {} has {}",
                self.alphas.len(),
                split.name,
                split.len()
            )));
        }
        for (i, (a, g)) in self.alphas.iter().zip(&split.graphs).enumerate() {
            if a.len() != g.n() {
                return Err(Error::Config(format!("weak label {i} has {} entries for {} nodes", a.len(), g.n())));
            }
        }
        Ok(())
    }

    /// JSON Lines, one graph per line in split order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for (graph, alpha) in self.alphas.iter().enumerate() {
            let line = WeakLine { format_version: WEAK_FORMAT_VERSION, split: self.split, graph, alpha: alpha.clone() };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WeakLabels> {
        let parse = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut split = None;
        let mut alphas = Vec::new();
        for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let rec: WeakLine = serde_json::from_str(&line?).map_err(|e| parse(i + 1, e.to_string()))?;
            if rec.format_version != WEAK_FORMAT_VERSION {
                return Err(parse(i + 1, format!("unsupported format version {}", rec.format_version)));
            }
            if *split.get_or_insert(rec.split) != rec.split {
                return Err(parse(i + 1, format!("mixed splits in one file ({})", rec.split)));
            }
            if rec.graph != i {
                return Err(parse(i + 1, format!("expected graph {i}, found {}", rec.graph)));
            }
            let sum: f64 = rec.alpha.iter().sum();
            if rec.alpha.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(parse(i + 1, format!("alpha is not a probability vector (sum {sum})")));
            }
            alphas.push(rec.alpha);
        }
        let split = split.ok_or_else(|| parse(1, "no weak labels in file".into()))?;
        Ok(WeakLabels { split, alphas })
    }
}

/// Inputs of one training run besides the configurations.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a DatasetSplit,
    pub val: Option<&'a DatasetSplit>,
    pub weak: Option<&'a WeakLabels>,
    pub label_range: [i64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
}

/// Restricts a stage target to the kept nodes and renormalizes; all-zero stays all-zero.
pub fn restrict_target(target: &[f64], kept: &[usize]) -> Vec<f64> {
    let sub: Vec<f64> = kept.iter().map(|&i| target[i]).collect();
    let s: f64 = sub.iter().sum();
    if s > 0.0 {
        sub.iter().map(|v| v / s).collect()
    } else {
        sub
    }
}

pub fn train<T: Scalar>(model_cfg: &ModelConfig, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with(model_cfg, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    model_cfg: &ModelConfig,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = Model::new(model_cfg.clone(), &mut substream(cfg.seed, "init"))?;
    train_model(model, data, cfg, &mut on_epoch)
}

/// Trains an already initialized model.
pub fn train_model<T: Scalar>(
    mut model: Model<T>,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let train = data.train;
    if train.feature_dim != model.config.in_dim {
        return Err(Error::Config(format!(
            "model expects {} input features, split {} has {}",
            model.config.in_dim, train.name, train.feature_dim
        )));
    }
    let targets: Option<Vec<&[f64]>> = match cfg.supervision {
        Supervision::None => None,
        Supervision::Gt => Some(
            train
                .graphs
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    g.gt_attention().ok_or_else(|| Error::Config(format!("supervision gt: graph {i} has no gt_attn")))
                })
                .collect::<Result<_>>()?,
        ),
        Supervision::Weak => {
            let weak = data.weak.ok_or_else(|| Error::Config("supervision weak needs weak labels".into()))?;
            weak.validate_against(train)?;
            Some(weak.alphas.iter().map(Vec::as_slice).collect())
        }
    };
    if targets.is_some() && model.num_stages() == 0 {
        return Err(Error::Config("attention supervision needs a pooling model".into()));
    }

    let update: Vec<bool> = model
        .params
        .ids()
        .map(|id| !cfg.freeze.iter().any(|f| model.params.name(id).starts_with(f.as_str())))
        .collect();
    let mut order_rng = substream(cfg.seed, "data-order");
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for i in (1..order.len()).rev() {
            order.swap(i, rand::Rng::random_range(&mut order_rng, 0..=i));
        }
        let mut epoch_loss = 0.0;
        for (b, batch) in batches(&order, cfg.batch_size).enumerate() {
            let mut grads: Vec<Tensor<T>> =
                model.params.values().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            for &gi in batch {
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape);
                let target = targets.as_ref().map(|t| t[gi]);
                let loss = graph_loss(&model, &mut tape, &bound, &train.graphs[gi], target, cfg.beta)?;
                let value = tape.value(loss).item().to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                epoch_loss += value;
                tape.backward(loss)?;
                for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
                    if let Some(g) = tape.grad(v) {
                        acc.add_assign(g);
                    }
                }
            }
            let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
            for g in &mut grads {
                g.scale_assign(inv);
            }
            adam_step_masked(&mut model.params, &grads, &mut adam, lr, cfg.weight_decay, &update)?;
        }
        let last = epoch + 1 == cfg.epochs;
        let val_acc = match data.val {
            Some(val) if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) => {
                Some(accuracy(&model, val, data.label_range)?)
            }
            _ => None,
        };
        let rec = EpochRecord { epoch, train_loss: epoch_loss / train.len().max(1) as f64, val_acc, lr };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { model, history })
}

/// Total loss of one graph: MSE plus one KL term per pooling stage.
pub fn graph_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    graph: &Graph,
    target: Option<&[f64]>,
    beta: f64,
) -> Result<Var> {
    let out = model.forward_bound(tape, bound, graph)?;
    let mut loss = mse_loss(tape, out.prediction, graph.target())?;
    if let (Some(target), true) = (target, beta > 0.0) {
        let mut stage_target = target.to_vec();
        for stage in &out.stages {
            let n = stage_target.len();
            if let Some(kl) = kl_attention_loss(tape, &stage_target, stage.alpha, beta, n)? {
                loss = tape.add(loss, kl)?;
            }
            stage_target = restrict_target(&stage_target, &stage.kept);
        }
    }
    Ok(loss)
}

/// Normalized absolute prediction change when each node is removed in turn.
pub fn occlusion_attention<T: Scalar>(model_b: &Model<T>, graph: &Graph) -> Result<Vec<f64>> {
    if model_b.config.pool.mode != PoolMode::None {
        return Err(Error::Config("occlusion needs a model without pooling layers".into()));
    }
    let n = graph.n();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let (y, _) = model_b.predict(graph)?;
    let occluded =
        (0..n).map(|i| Ok(model_b.predict(&graph.remove_single_node(i)?)?.0)).collect::<Result<Vec<f64>>>()?;
    Ok(occlusion_from_predictions(y, &occluded))
}

/// `|y_i - y| / sum_j |y_j - y|`, uniform when the sum vanishes.
pub fn occlusion_from_predictions(y: f64, occluded: &[f64]) -> Vec<f64> {
    let n = occluded.len();
    let diffs: Vec<f64> = occluded.iter().map(|yi| (yi - y).abs()).collect();
    let total: f64 = diffs.iter().sum();
    if total > 0.0 && total.is_finite() {
        diffs.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

/// Occlusion attention for every graph of `split`, on up to `jobs` threads.
pub fn occlusion_labels<T: Scalar>(model_b: &Model<T>, split: &DatasetSplit, jobs: usize) -> Result<WeakLabels> {
    let alphas = parallel_map(&split.graphs, jobs, |g| occlusion_attention(model_b, g))?;
    Ok(WeakLabels { split: split.name, alphas })
}

/// Order-preserving map over `items` using scoped threads.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct WeakSupOutcome<T> {
    pub model_a: TrainOutcome<T>,
    pub model_b: TrainOutcome<T>,
    pub labels: WeakLabels,
}

/// Trains global-pool model B, derives occlusion labels on the training split
/// and trains attention model A against them.
pub fn weaksup_pipeline<T: Scalar>(
    cfg_a: &ModelConfig,
    cfg_b: &ModelConfig,
    data: TrainData<'_>,
    train_a: &TrainConfig,
    train_b: &TrainConfig,
    jobs: usize,
) -> Result<WeakSupOutcome<T>> {
    check_pair(cfg_a, cfg_b)?;
    let b_cfg = TrainConfig { supervision: Supervision::None, ..train_b.clone() };
    let model_b = train::<T>(cfg_b, TrainData { weak: None, ..data }, &b_cfg)?;
    let labels = occlusion_labels(&model_b.model, data.train, jobs)?;
    let a_cfg = TrainConfig { supervision: Supervision::Weak, ..train_a.clone() };
    let model_a = train::<T>(cfg_a, TrainData { weak: Some(&labels), ..data }, &a_cfg)?;
    Ok(WeakSupOutcome { model_a, model_b, labels })
}

/// Model B must be model A's convolution stack without pooling.
pub fn check_pair(cfg_a: &ModelConfig, cfg_b: &ModelConfig) -> Result<()> {
    if cfg_b.pool.mode != PoolMode::None || cfg_b.attention.is_some() {
        return Err(Error::Config("model B must use global pooling only".into()));
    }
    let same = cfg_a.conv == cfg_b.conv
        && cfg_a.in_dim == cfg_b.in_dim
        && cfg_a.filters == cfg_b.filters
        && cfg_a.k == cfg_b.k
        && cfg_a.mlp_hidden == cfg_b.mlp_hidden
        && cfg_a.readout == cfg_b.readout;
    if !same {
        return Err(Error::Config("models A and B must share the convolution architecture".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_colors, ColorsConfig};
    use crate::graph::Topology;
    use crate::layers::{ConvKind, Readout};
    use crate::model::{AttentionKind, AttentionSpec, PoolSpec};
    use crate::oracle::gradient_check;
    use crate::testutil::rand_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gin_cfg(pool: PoolSpec, attention: bool) -> ModelConfig {
        ModelConfig {
            conv: ConvKind::Gin,
            in_dim: 4,
            filters: vec![8, 8],
            k: None,
            mlp_hidden: Some(8),
            readout: Readout::Sum,
            pool,
            attention: attention.then_some(AttentionSpec {
                kind: AttentionKind::LinearProjection,
                gnn_spec: None,
                projection_dim: Some(4),
            }),
        }
    }

    fn threshold(t: f64) -> PoolSpec {
        PoolSpec { mode: PoolMode::Threshold, r: None, alpha_tilde: Some(t), layers_after: vec![0] }
    }

    fn tiny_colors() -> crate::datasets::Dataset {
        gen_colors(&ColorsConfig { n_train: 40, n_val: 20, n_test: 10, seed: 3, ..Default::default() }).unwrap()
    }

    #[test]
    fn mse_examples_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::scalar(3.0));
        let l = mse_loss(&mut tape, p, 5.0).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap().item(), -4.0);
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::scalar(5.0));
        let l = mse_loss(&mut tape, p, 5.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn kl_examples() {
        assert!((kl_value(&[1.0, 0.0], &[0.5, 0.5], 100.0, 2).unwrap() - 50.0 * 2f64.ln()).abs() < 1e-12);
        assert!((kl_value(&[1.0, 0.0], &[0.5, 0.5], 100.0, 2).unwrap() - 34.657).abs() < 1e-3);
        assert_eq!(kl_value(&[0.3, 0.7], &[0.3, 0.7], 100.0, 2).unwrap(), 0.0);
        assert!(kl_value(&[-0.1, 1.1], &[0.5, 0.5], 1.0, 2).is_err());

        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::column(vec![0.5, 0.5]));
        let l = kl_attention_loss(&mut tape, &[1.0, 0.0], a, 100.0, 2).unwrap().unwrap();
        assert!((tape.value(l).item() - 50.0 * 2f64.ln()).abs() < 1e-12);
        assert!(kl_attention_loss(&mut tape, &[0.0, 0.0], a, 100.0, 2).unwrap().is_none());
        let tiny = tape.constant(Tensor::column(vec![1.0, 1e-30]));
        let l = kl_attention_loss(&mut tape, &[0.0, 1.0], tiny, 1.0, 2).unwrap().unwrap();
        assert!((tape.value(l).item() - 0.5 * 1e15f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_linear_in_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(1..12);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let alpha = crate::autodiff::softmax_values(&raw);
            let mut gt: Vec<f64> =
                (0..n).map(|_| if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 }).collect();
            let s: f64 = gt.iter().sum();
            if s == 0.0 {
                continue;
            }
            gt.iter_mut().for_each(|v| *v /= s);
            let beta = rng.random_range(0.1..200.0);
            let one = kl_value(&gt, &alpha, beta, n).unwrap();
            assert!(one >= -1e-12);
            assert_eq!(kl_value(&gt, &alpha, 2.0 * beta, n).unwrap(), 2.0 * one);
            assert!(kl_value(&gt, &gt, beta, n).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn kl_gradient_wrt_pre_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pre = rand_tensor(&mut rng, 6, 1);
            let gt = [0.0, 0.25, 0.25, 0.0, 0.5, 0.0];
            let err = gradient_check(&[pre], 1e-5, |tape, v| {
                let a = tape.softmax(v[0])?;
                Ok(kl_attention_loss(tape, &gt, a, 100.0, 6)?.expect("nonzero target"))
            })
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn adam_examples() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &[Tensor::scalar(0.0)], &mut st, 1e-3, 0.0).unwrap();
        assert_eq!(store.values()[0].item(), 1.0);

        // f(w) = w^2 at w = 1: the bias-corrected first step moves w by lr.
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &[Tensor::scalar(2.0)], &mut st, 1e-3, 0.0).unwrap();
        assert!((store.values()[0].item() - (1.0 - 1e-3)).abs() < 1e-10);

        let before = store.values()[0].clone();
        adam_step(&mut store, &[Tensor::scalar(0.7)], &mut st, 0.0, 0.0).unwrap();
        assert_eq!(store.values()[0], before);

        // Zero gradient with weight decay drifts toward zero.
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &[Tensor::scalar(0.0)], &mut st, 1e-3, 1e-4).unwrap();
        assert!(store.values()[0].item() < before.item());
    }

    #[test]
    fn schedule_and_config_checks() {
        let cfg = TrainConfig { epochs: 100, decay_epochs: vec![85, 95], ..Default::default() };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(85) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(99) - 1e-5).abs() < 1e-18);
        assert!(TrainConfig { decay_epochs: vec![95, 85], ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { decay_epochs: vec![100], ..cfg }.validate().is_err());
    }

    #[test]
    fn occlusion_arithmetic() {
        assert_eq!(occlusion_from_predictions(5.0, &[5.0, 4.0, 5.0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(occlusion_from_predictions(2.0, &[2.0, 2.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn occlusion_constant_model_is_uniform_and_permutation_consistent() {
        let cfg = gin_cfg(PoolSpec::none(), false);
        let mut model: Model<f64> = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = tiny_colors().splits[0].graphs[3].clone();
        assert_eq!(occlusion_attention(&model, &g.drop_nodes(&[0]).unwrap()).unwrap(), vec![1.0]);

        let alpha = occlusion_attention(&model, &g).unwrap();
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let n = g.n();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let edges = g.edges().iter().map(|e| [inv[e[0]], inv[e[1]]]).collect();
        let feats = perm.iter().flat_map(|&o| g.feature_row(o).to_vec()).collect();
        let pg = Graph::new(Topology::new(n, edges).unwrap(), 4, feats, g.label(), None).unwrap();
        let palpha = occlusion_attention(&model, &pg).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((palpha[new] - alpha[old]).abs() < 1e-9);
        }

        let w = model.params.find("head.weight").unwrap();
        *model.params.get_mut(w) = Tensor::zeros(8, 1);
        let flat = occlusion_attention(&model, &g).unwrap();
        assert!(flat.iter().all(|&a| a == 1.0 / n as f64));

        let pooled = Model::<f64>::new(gin_cfg(threshold(0.0), true), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(occlusion_attention(&pooled, &g).is_err());
    }

    #[test]
    fn full_loss_gradient_check() {
        let ds = tiny_colors();
        let g = ds.splits[0].graphs.iter().find(|g| g.label() > 0 && g.n() <= 8).unwrap().clone();
        let cfg = ModelConfig { filters: vec![5, 5], mlp_hidden: Some(6), ..gin_cfg(threshold(0.0), true) };
        let model: Model<f64> = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let gt = g.gt_attention().unwrap().to_vec();
        let err = gradient_check(model.params.values(), 1e-5, |tape, vars| {
            graph_loss(&model, tape, &Bound::from_vars(vars.to_vec()), &g, Some(&gt), 100.0)
        })
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn beta_zero_equals_unsupervised() {
        let ds = tiny_colors();
        let data = TrainData { train: &ds.splits[0], val: None, weak: None, label_range: [0, 10] };
        let base = TrainConfig { epochs: 3, decay_epochs: vec![], batch_size: 8, seed: 2, ..Default::default() };
        let cfg = gin_cfg(threshold(0.05), true);
        let a: TrainOutcome<f64> =
            train(&cfg, data, &TrainConfig { supervision: Supervision::Gt, beta: 0.0, ..base.clone() }).unwrap();
        let b: TrainOutcome<f64> = train(&cfg, data, &base).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params.values(), b.model.params.values());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = tiny_colors();
        let data = TrainData { train: &ds.splits[0], val: Some(&ds.splits[1]), weak: None, label_range: [0, 10] };
        let cfg = TrainConfig {
            epochs: 8,
            decay_epochs: vec![6],
            batch_size: 8,
            supervision: Supervision::Gt,
            seed: 1,
            eval_every: 4,
            ..Default::default()
        };
        let m = gin_cfg(threshold(0.05), true);
        let a: TrainOutcome<f64> = train(&m, data, &cfg).unwrap();
        let b: TrainOutcome<f64> = train(&m, data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
        let evals: Vec<usize> = a.history.iter().filter(|r| r.val_acc.is_some()).map(|r| r.epoch).collect();
        assert_eq!(evals, vec![3, 7]);
        assert!((a.history[7].lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn frozen_parameters_stay_fixed() {
        let ds = tiny_colors();
        let data = TrainData { train: &ds.splits[0], val: None, weak: None, label_range: [0, 10] };
        let cfg = TrainConfig { epochs: 2, decay_epochs: vec![], freeze: vec!["attn".into()], ..Default::default() };
        let m = gin_cfg(threshold(0.05), true);
        let init: Model<f64> = Model::new(m.clone(), &mut substream(cfg.seed, "init")).unwrap();
        let out: TrainOutcome<f64> = train(&m, data, &cfg).unwrap();
        let p = init.params.find("attn0.p").unwrap();
        assert_eq!(out.model.params.get(p), init.params.get(p));
        let h = init.params.find("head.weight").unwrap();
        assert_ne!(out.model.params.get(h), init.params.get(h));
    }

    #[test]
    fn supervision_requirements() {
        let ds = tiny_colors();
        let data = TrainData { train: &ds.splits[0], val: None, weak: None, label_range: [0, 10] };
        let cfg = TrainConfig { epochs: 1, decay_epochs: vec![], supervision: Supervision::Weak, ..Default::default() };
        assert!(train::<f64>(&gin_cfg(threshold(0.05), true), data, &cfg).is_err());
        let cfg = TrainConfig { supervision: Supervision::Gt, ..cfg };
        assert!(train::<f64>(&gin_cfg(PoolSpec::none(), false), data, &cfg).is_err());
        let stripped: Vec<Graph> = ds.splits[0]
            .graphs
            .iter()
            .map(|g| Graph::new(g.topology().clone(), 4, g.features().to_vec(), g.label(), None).unwrap())
            .collect();
        let split = DatasetSplit::new(SplitName::Train, 4, stripped).unwrap();
        let data = TrainData { train: &split, ..data };
        assert!(train::<f64>(&gin_cfg(threshold(0.05), true), data, &cfg).is_err());
    }

    #[test]
    fn weak_pipeline_and_label_files() {
        let ds = tiny_colors();
        let data = TrainData { train: &ds.splits[0], val: None, weak: None, label_range: [0, 10] };
        let tc = TrainConfig { epochs: 2, decay_epochs: vec![], ..Default::default() };
        let a = gin_cfg(threshold(0.05), true);
        let b = gin_cfg(PoolSpec::none(), false);
        assert!(check_pair(&a, &a).is_err());
        let out: WeakSupOutcome<f64> = weaksup_pipeline(&a, &b, data, &tc, &tc, 2).unwrap();
        out.labels.validate_against(&ds.splits[0]).unwrap();
        let serial = occlusion_labels(&out.model_b.model, &ds.splits[0], 1).unwrap();
        assert_eq!(serial, out.labels);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weak.jsonl");
        out.labels.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), ds.splits[0].len());
        assert_eq!(WeakLabels::load(&path).unwrap(), out.labels);
        let again: WeakSupOutcome<f64> = weaksup_pipeline(&a, &b, data, &tc, &tc, 1).unwrap();
        let path2 = dir.path().join("weak2.jsonl");
        again.labels.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
