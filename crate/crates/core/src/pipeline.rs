//! Training schedules, embedding import and whole-model gradient checks.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{GradcheckSettings, RunConfig, TrainSettings};
use crate::error::{Error, Result};
use crate::graph::{finite_diff_grad, relative_error, Gradients, Primitive};
use crate::model::{Answer, Model, ModelConfig, QaItem, Task, Variant, VideoFeatures};
use crate::nn::Ctx;
use crate::qagen::{EmbeddingProvider, HashEmbedding, MapEmbedding};
use crate::rng;
use crate::synth::{self, Dataset, Difficulty, EpisodeKind, QaHooks, RenderSpec, Split, COLORS};
use crate::tensor::Tensor;
use crate::train::{self, item_loss, OptimizerState, Sample, TrainLog};

/// The dataset a run works on: the `dataset` directory when set, otherwise
/// one built in memory from the data settings and the root seed.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.dataset {
        Some(dir) => synth::read_dataset(dir),
        None => synth::build_dataset(&config.data, config.seed),
    }
}

/// Samples of `split`, restricted to `task` when given.
pub fn task_samples<'a>(split: &'a Split, task: Option<Task>) -> Result<Vec<Sample<'a>>> {
    let mut samples = split.samples()?;
    if let Some(t) = task {
        samples.retain(|s| s.item.task == t);
    }
    Ok(samples)
}

/// A trained model with its optimizer and curve.
pub struct Fitted {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub log: TrainLog,
}

/// Trains a fresh model for `config`.
///
/// The spatial-temporal variant trains in two phases: the temporal variant
/// alone for `settings.steps`, then the full model, initialized from the
/// first phase, for `settings.finetune_steps` with a fresh optimizer. Loss
/// steps of the second phase continue the first phase's numbering.
pub fn fit(
    config: ModelConfig,
    settings: &TrainSettings,
    data: &[Sample<'_>],
    validation: Option<&[Sample<'_>]>,
    seed: u64,
    embeddings: Option<&MapEmbedding>,
) -> Result<Fitted> {
    if config.variant != Variant::SpatialTemporal {
        let mut model = Model::new(config, seed)?;
        if let Some(e) = embeddings {
            import_embeddings(&mut model, e)?;
        }
        let mut optimizer = OptimizerState::new(settings.adam(), model.store());
        let log =
            train::train(&mut model, &mut optimizer, data, &settings.train_config(settings.steps), seed, validation)?;
        return Ok(Fitted { model, optimizer, log });
    }

    let first = fit(
        ModelConfig { variant: Variant::Temporal, ..config.clone() },
        settings,
        data,
        validation,
        seed,
        embeddings,
    )?;
    let mut model = Model::new(config, seed)?;
    model.params.store.copy_matching(first.model.store());
    let mut optimizer = OptimizerState::new(settings.adam(), model.store());
    let phase_seed = rng::derive_seed(seed, "train/finetune");
    let mut second = train::train(
        &mut model,
        &mut optimizer,
        data,
        &settings.train_config(settings.finetune_steps),
        phase_seed,
        validation,
    )?;
    let offset = settings.steps;
    let mut log = first.log;
    log.losses.extend(second.losses.drain(..).map(|(s, l)| (s + offset, l)));
    log.validation.extend(second.validation.drain(..).map(|mut v| {
        v.step += offset;
        v
    }));
    Ok(Fitted { model, optimizer, log })
}

/// Overwrites the embedding rows of every in-vocabulary token found in
/// `table`; returns how many rows were set.
pub fn import_embeddings(model: &mut Model, table: &MapEmbedding) -> Result<usize> {
    let dim = model.params.embedding.dim;
    if table.dim() != dim {
        return Err(Error::DimMismatch { field: "embed_dim".into(), stored: table.dim(), requested: dim });
    }
    let rows: Vec<(usize, &[f64])> = model
        .config
        .tokens
        .iter()
        .filter(|t| model.vocab.contains(t))
        .filter_map(|t| Some((model.vocab.id(t), table.vector(t)?)))
        .collect();
    let embedding = model.params.embedding.clone();
    embedding.import(&mut model.params.store, rows)
}

/// Check result for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
}

/// Check result for one field of the model's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub field: String,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub variant: Variant,
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            let verdict = if b.passed { "pass" } else { "FAIL" };
            s.push_str(&format!(
                "{:<16} {:<14} {verdict}  max rel err {:.3e}\n",
                self.variant.key(),
                b.field,
                b.max_rel_error
            ));
        }
        s
    }
}

/// One small item per task, rendered at the gradcheck dims.
pub fn gradcheck_fixture(
    settings: &GradcheckSettings,
    seed: u64,
) -> Result<(Vec<QaItem>, BTreeMap<String, VideoFeatures>)> {
    let spec = RenderSpec {
        grid: settings.grid,
        frame_channels: settings.frame_channels,
        clip_channels: settings.clip_channels,
        ..RenderSpec::default()
    };
    let difficulty = Difficulty { steps: settings.steps, ..Difficulty::default() };
    let provider = HashEmbedding::new(16, spec.codebook_seed);
    let corpus = synth::lexicon_corpus();
    let hooks = QaHooks { provider: &provider, corpus: &corpus };
    let mut items = Vec::new();
    let mut features = BTreeMap::new();
    for task in Task::ALL {
        let id = format!("gradcheck-{}", task.key());
        let mut found = None;
        // Short episodes can lack a positive count; redraw until each task has an item.
        for attempt in 0..64u64 {
            let ep_seed = rng::derive_seed(seed, &format!("gradcheck/{}/{attempt}", task.key()));
            let ep = synth::generate_episode(EpisodeKind::for_task(task), &difficulty, &spec, &id, ep_seed)?;
            let qa = synth::derive_qa(&ep, &hooks)?;
            if let Some(item) =
                qa.into_iter().find(|q| q.task == task && !matches!(q.answer, Answer::Count { label: 0 }))
            {
                found = Some((item, synth::render_features(&ep, &spec)?));
                break;
            }
        }
        let (item, f) =
            found.ok_or_else(|| Error::Invalid(format!("no {} item at {} steps", task.key(), settings.steps)))?;
        features.insert(item.episode_id.clone(), f);
        items.push(item);
    }
    Ok((items, features))
}

/// Model configuration of the gradient check for `variant`.
pub fn gradcheck_config(settings: &GradcheckSettings, variant: Variant, items: &[QaItem]) -> ModelConfig {
    let (tokens, _) = synth::vocabularies(items);
    ModelConfig {
        variant,
        hidden: settings.hidden,
        embed_dim: settings.embed_dim,
        attention_hidden: settings.attention_hidden,
        frame_channels: settings.frame_channels,
        clip_channels: settings.clip_channels,
        grid: settings.grid,
        dropout: 0.0,
        tokens,
        answers: COLORS.iter().map(|c| c.to_string()).collect(),
    }
}

fn fault_name(name: &str) -> Result<&'static str> {
    const KNOWN: [Primitive; 12] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::MatMul,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Relu,
        Primitive::Log,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::Sum,
        Primitive::Mean,
    ];
    KNOWN
        .iter()
        .map(Primitive::name)
        .find(|n| *n == name)
        .ok_or_else(|| Error::Config(format!("gradcheck.corrupt: unknown primitive `{name}`")))
}

fn task_loss(
    model: &Model,
    item: &QaItem,
    features: &VideoFeatures,
    fault: Option<&'static str>,
    with_grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    let mut ctx = Ctx::inference(model.store());
    if let Some(p) = fault {
        ctx.graph.inject_adjoint_fault(p);
    }
    let loss = item_loss(model, &mut ctx, item, features)?;
    let value = ctx.graph.value(loss).item();
    let grads = if with_grads { Some(ctx.graph.backward(loss)?) } else { None };
    Ok((value, grads))
}

/// Compares analytic and central-difference gradients of each task's loss
/// for every parameter scalar of `variant`.
pub fn gradcheck(settings: &GradcheckSettings, variant: Variant, seed: u64) -> Result<GradcheckReport> {
    let (items, features) = gradcheck_fixture(settings, seed)?;
    let mut model = Model::new(gradcheck_config(settings, variant, &items), seed)?;
    let normal = Normal::new(0.0, settings.param_scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut r = rng::stream(seed, "gradcheck/params");
    let ids: Vec<_> = model.store().ids().collect();
    for &id in &ids {
        for v in model.params.store.get_mut(id).data_mut() {
            *v = normal.sample(&mut r);
        }
    }
    let fault = settings.corrupt.as_deref().map(fault_name).transpose()?;
    let mut analytic = Vec::with_capacity(items.len());
    for item in &items {
        let (_, g) = task_loss(&model, item, &features[&item.episode_id], fault, true)?;
        analytic.push(g.expect("gradients requested"));
    }

    let mut blocks = Vec::new();
    for (field, field_ids) in model.params.fields() {
        let mut tensors = Vec::new();
        for id in field_ids {
            let name = model.store().name(id).to_string();
            let x = model.store().get(id).clone();
            let mut max_rel_error: f64 = 0.0;
            for (item, grads) in items.iter().zip(&analytic) {
                let f = &features[&item.episode_id];
                let numeric = finite_diff_grad(
                    |probe| {
                        *model.params.store.get_mut(id) = probe.clone();
                        Ok(task_loss(&model, item, f, None, false)?.0)
                    },
                    &x,
                    settings.eps,
                )?;
                *model.params.store.get_mut(id) = x.clone();
                let zero = Tensor::zeros(x.shape());
                let a = grads.param(id).unwrap_or(&zero);
                for (&a, &n) in a.data().iter().zip(numeric.data()) {
                    max_rel_error = max_rel_error.max(relative_error(a, n, settings.floor));
                }
            }
            tensors.push(TensorCheck { name, scalars: x.numel(), max_rel_error });
        }
        let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
        blocks.push(BlockCheck {
            field: field.to_string(),
            tensors,
            max_rel_error,
            passed: max_rel_error < settings.tolerance,
        });
    }
    Ok(GradcheckReport { variant, tolerance: settings.tolerance, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_cover_each_block_once() {
        let s = GradcheckSettings::default();
        let (items, _) = gradcheck_fixture(&s, 3).unwrap();
        assert_eq!(items.len(), 4);
        let m = Model::new(gradcheck_config(&s, Variant::SpatialTemporal, &items), 0).unwrap();
        let names: Vec<_> = m.params.fields().iter().map(|(f, _)| *f).collect();
        assert_eq!(
            names,
            ["video", "text", "embedding", "spatial", "temporal", "temporal_proj", "choice", "count", "word"]
        );
        let mut seen: Vec<_> = m.params.fields().into_iter().flat_map(|(_, ids)| ids).collect();
        seen.sort_by_key(|id| id.index());
        seen.dedup();
        assert_eq!(seen.len(), m.store().len());
    }

    #[test]
    fn unknown_fault_is_a_config_error() {
        assert!(fault_name("tanh").is_ok());
        assert!(matches!(fault_name("cosh"), Err(Error::Config(_))));
    }
}
