//! Losses, the ADAM optimizer and the mini-batch training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Answer, Head, Model, QaItem, VideoFeatures};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

/// `Σₙ max(0, 1 + sₙ − s_p)` over the incorrect candidates.
pub fn hinge_pairwise_loss(positive: f64, negatives: &[f64]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Invalid("hinge loss needs at least one negative score".into()));
    }
    Ok(negatives.iter().map(|s| (1.0 + s - positive).max(0.0)).sum())
}

/// `(pred − gold)²`.
pub fn l2_count_loss(pred: f64, gold: u8) -> f64 {
    (pred - gold as f64).powi(2)
}

/// `−ln p[gold]`.
pub fn softmax_xent_loss(distribution: &[f64], gold: usize) -> Result<f64> {
    let p = *distribution
        .get(gold)
        .ok_or_else(|| Error::Invalid(format!("gold index {gold} outside {} classes", distribution.len())))?;
    Ok(-p.ln())
}

/// Graph form of [`hinge_pairwise_loss`].
pub fn hinge_loss_node(g: &mut Graph, positive: Var, negatives: &[Var]) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Invalid("hinge loss needs at least one negative score".into()));
    }
    let mut total: Option<Var> = None;
    for &n in negatives {
        let diff = g.sub(n, positive)?;
        let margin = g.add_scalar(diff, 1.0)?;
        let term = g.relu(margin)?;
        let term = g.sum(term)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Graph form of [`l2_count_loss`].
pub fn l2_loss_node(g: &mut Graph, pred: Var, gold: u8) -> Result<Var> {
    let diff = g.add_scalar(pred, -(gold as f64))?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

/// Softmax cross-entropy on `[1, V]` logits.
pub fn xent_loss_node(g: &mut Graph, logits: Var, gold: usize) -> Result<Var> {
    let cols = g.shape(logits)[1];
    if gold >= cols {
        return Err(Error::Invalid(format!("gold index {gold} outside {cols} classes")));
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.slice(lp, 1, gold, 1)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0)
}

/// Task loss of one item in an existing forward context.
pub fn item_loss(model: &Model, ctx: &mut Ctx<'_>, item: &QaItem, features: &VideoFeatures) -> Result<Var> {
    let out = model.run(ctx, item, features)?;
    match (&out.head, &item.answer) {
        (Head::Count(pred), Answer::Count { label }) => l2_loss_node(&mut ctx.graph, *pred, *label),
        (Head::Choice(scores), Answer::Choice { gold, .. }) => {
            let negatives: Vec<Var> = scores.iter().enumerate().filter(|(i, _)| i != gold).map(|(_, v)| *v).collect();
            hinge_loss_node(&mut ctx.graph, scores[*gold], &negatives)
        }
        (Head::Word(logits), Answer::Word { word }) => {
            let gold = model
                .answers
                .index(word)
                .ok_or_else(|| Error::Invalid(format!("answer `{word}` is not in the model's answer vocabulary")))?;
            xent_loss_node(&mut ctx.graph, *logits, gold)
        }
        _ => Err(Error::Invalid(format!("item {} has an answer of the wrong kind", item.id))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    /// One bias-corrected ADAM update. Parameters and moments are kept at
    /// single precision so a saved checkpoint resumes exactly.
    pub fn adam_step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Invalid(format!(
                "adam: {} parameter blocks, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((id, g), (m, v)) in params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let p = params.get_mut(id);
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    primitive: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..gd.len() {
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gd[i];
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gd[i] * gd[i];
                m.data_mut()[i] = mi as f32 as f64;
                v.data_mut()[i] = vi as f32 as f64;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                pd[i] = (pd[i] - update) as f32 as f64;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Validation interval in steps; 0 disables validation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 16, adam: AdamConfig::default(), clip_norm: Some(10.0), eval_every: 0 }
    }
}

/// One training example: an item and the features of its episode.
#[derive(Clone, Copy)]
pub struct Sample<'a> {
    pub item: &'a QaItem,
    pub features: &'a VideoFeatures,
}

/// Periodic validation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `(global step, mean batch loss)` before each update.
    pub losses: Vec<(usize, f64)>,
    pub validation: Vec<ValidationPoint>,
}

/// Loss and parameter gradients of one item.
fn item_gradients(
    model: &Model,
    sample: Sample<'_>,
    dropout_rng: Option<rng::StreamRng>,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let store = model.store();
    let mut ctx = match dropout_rng {
        Some(r) => Ctx::training(store, model.config.dropout, r),
        None => Ctx::inference(store),
    };
    let loss = item_loss(model, &mut ctx, sample.item, sample.features)?;
    let value = ctx.graph.value(loss).item();
    let grads = ctx.graph.backward(loss)?;
    let per_param = store.ids().map(|id| grads.param(id).cloned()).collect();
    Ok((value, per_param))
}

/// Mean loss and mean gradients over `batch` (sequential reduction, so the
/// result does not depend on thread scheduling).
pub fn batch_gradients(
    model: &Model,
    batch: &[Sample<'_>],
    seed: u64,
    step: usize,
    training: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let work = |(k, s): (usize, &Sample<'_>)| {
        let r = training.then(|| rng::stream(seed, &format!("train/dropout/{step}/{k}")));
        item_gradients(model, *s, r)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = {
        use rayon::prelude::*;
        batch.par_iter().enumerate().map(work).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = batch.iter().enumerate().map(work).collect();

    let store = model.store();
    let mut total = 0.0;
    let mut sums: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (acc, g) in sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                acc.add_assign(&g);
            }
        }
    }
    let n = batch.len() as f64;
    for s in &mut sums {
        for v in s.data_mut() {
            *v /= n;
        }
    }
    Ok((total / n, sums))
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Sample order for epoch `epoch`, shuffled from the `train/shuffle` stream.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &format!("train/shuffle/{epoch}")));
    order
}

/// Trains `model` in place for `config.steps` steps, continuing from
/// `optimizer.step`. Batches walk seeded per-epoch permutations of `data`.
pub fn train(
    model: &mut Model,
    optimizer: &mut OptimizerState,
    data: &[Sample<'_>],
    config: &TrainConfig,
    seed: u64,
    validation: Option<&[Sample<'_>]>,
) -> Result<TrainLog> {
    if data.is_empty() && config.steps > 0 {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("train.batch_size must be positive".into()));
    }
    for s in data {
        s.item.validate()?;
    }
    let mut log = TrainLog::default();
    let start = optimizer.step as usize;
    let n = data.len();
    let mut cached_epoch = usize::MAX;
    let mut order = Vec::new();
    for step in start..start + config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for k in 0..config.batch_size {
            let pos = step * config.batch_size + k;
            let epoch = pos / n;
            if epoch != cached_epoch {
                order = epoch_order(seed, epoch, n);
                cached_epoch = epoch;
            }
            batch.push(data[order[pos % n]]);
        }
        let training = model.config.dropout > 0.0;
        let (loss, mut grads) = match batch_gradients(model, &batch, seed, step, training) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        log.losses.push((step, loss));
        if let Some(max) = config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        optimizer.adam_step(&mut model.params.store, &grads)?;
        if let Some(val) = validation {
            if config.eval_every > 0 && (step + 1) % config.eval_every == 0 && !val.is_empty() {
                log.validation.push(validate(model, val, step + 1)?);
            }
        }
    }
    Ok(log)
}

fn validate(model: &Model, data: &[Sample<'_>], step: usize) -> Result<ValidationPoint> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in data {
        let mut ctx = Ctx::inference(model.store());
        let l = item_loss(model, &mut ctx, s.item, s.features)?;
        loss += ctx.graph.value(l).item();
        if model.predict(s.item, s.features)?.is_correct(&s.item.answer) {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok(ValidationPoint { step, loss: loss / n, accuracy: 100.0 * correct as f64 / n })
}

/// Two-column `step loss` text.
pub fn format_loss_curve(losses: &[(usize, f64)]) -> String {
    let mut s = String::from("# step loss\n");
    for (step, loss) in losses {
        s.push_str(&format!("{step} {loss:.17e}\n"));
    }
    s
}
