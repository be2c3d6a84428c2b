//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string so the page needs no generated
//! TypeScript glue beyond what `wasm-bindgen` emits. The plain Rust
//! functions behind the exports are public and tested natively.

use serde::Serialize;
use stvqa::config::RunConfig;
use stvqa::model::{Answer, Model, Prediction, QaItem, Task, Variant, VideoFeatures};
use stvqa::pipeline::fit;
use stvqa::qagen::{select_distractor_verbs, verb_similarities, HashEmbedding};
use stvqa::synth::{
    action_verbs, build_dataset, derive_qa, generate_episode, lexicon_corpus, render_features, Difficulty, EpisodeKind,
    QaHooks, RenderSpec, TaskCounts,
};
use stvqa::{Error, Result};
use wasm_bindgen::prelude::wasm_bindgen;
use wasm_bindgen::JsError;

/// One rendered episode reduced to a per-step, per-cell energy map.
#[derive(Debug, Serialize)]
pub struct Heatmap {
    pub id: String,
    pub grid: usize,
    pub actor_cell: usize,
    pub needle: Option<usize>,
    pub question: String,
    pub answer: String,
    /// `energy[t][cell]`: L2 norm of the concatenated clip and frame features.
    pub energy: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct AttentionDemo {
    pub variant: String,
    pub steps_trained: usize,
    pub final_loss: f64,
    pub question: String,
    pub answer: String,
    pub predicted: String,
    pub correct: bool,
    pub needle: Option<usize>,
    pub grid: usize,
    pub spatial: Vec<Vec<f64>>,
    pub temporal: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct DistractorDemo {
    pub answer: String,
    pub threshold: f64,
    /// Vocabulary verbs with their cosine similarity to the answer, most similar first.
    pub similarities: Vec<(String, f64)>,
    pub chosen: Vec<String>,
}

fn answer_text(answer: &Answer) -> String {
    match answer {
        Answer::Count { label } => label.to_string(),
        Answer::Choice { candidates, gold } => candidates[*gold].join(" "),
        Answer::Word { word } => word.clone(),
    }
}

fn prediction_text(pred: &Prediction, answer: &Answer) -> String {
    match (pred, answer) {
        (Prediction::Count { value }, _) => format!("{value:.2}"),
        (Prediction::Choice { index, .. }, Answer::Choice { candidates, .. }) => candidates[*index].join(" "),
        (Prediction::Choice { index, .. }, _) => index.to_string(),
        (Prediction::Word { word, .. }, _) => word.clone(),
    }
}

fn energy(features: &VideoFeatures) -> Vec<Vec<f64>> {
    (0..features.steps())
        .map(|t| {
            let clip = &features.clip_grid[t];
            let frame = &features.frame_grid[t];
            let (cs, cf) = (features.clip_channels(), features.frame_channels());
            (0..clip.shape()[0])
                .map(|i| {
                    let c = &clip.data()[i * cs..(i + 1) * cs];
                    let f = &frame.data()[i * cf..(i + 1) * cf];
                    c.iter().chain(f).map(|x| x * x).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect()
}

/// Generates the episode behind `task` questions for `seed` and its heatmap.
pub fn episode_heatmap(task: &str, seed: u64, steps: usize, noise: f64) -> Result<Heatmap> {
    let task = Task::parse(task)?;
    let spec = RenderSpec { noise, ..RenderSpec::default() };
    let mut difficulty = Difficulty { steps, ..Difficulty::default() };
    if task == Task::Action {
        difficulty.count_weights[0] = 0.0;
    }
    let ep = generate_episode(EpisodeKind::for_task(task), &difficulty, &spec, &format!("demo-{seed}"), seed)?;
    let features = render_features(&ep, &spec)?;
    let provider = HashEmbedding::new(50, spec.codebook_seed);
    let corpus = lexicon_corpus();
    let items = derive_qa(&ep, &QaHooks { provider: &provider, corpus: &corpus })?;
    let item = items
        .iter()
        .find(|it| it.task == task)
        .ok_or_else(|| Error::Invalid(format!("episode {} has no {task} question", ep.id)))?;
    Ok(Heatmap {
        id: ep.id.clone(),
        grid: ep.grid,
        actor_cell: ep.actor_cell,
        needle: ep.needle,
        question: item.question.join(" "),
        answer: answer_text(&item.answer),
        energy: energy(&features),
    })
}

fn needle_of(item: &QaItem, seed: u64, config: &RunConfig) -> Option<usize> {
    let kind = EpisodeKind::for_task(item.task);
    let difficulty = &config.data.difficulty;
    // Episode seeds are not stored with the item, so regenerate from the id the
    // same way the dataset builder derives them.
    let ep_seed = stvqa::rng::derive_seed(seed, &format!("synth/episode/{}", item.episode_id));
    generate_episode(kind, difficulty, &config.data.render, &item.episode_id, ep_seed).ok()?.needle
}

/// Trains a small `variant` model on a tiny `task` dataset for `steps`
/// steps, then traces its attention on the first test question.
pub fn attention_masks(variant: &str, task: &str, seed: u64, steps: usize) -> Result<AttentionDemo> {
    let variant = Variant::parse(variant)?;
    let task = Task::parse(task)?;
    let mut config = RunConfig::default();
    config.seed = seed;
    let mut counts = TaskCounts { count: 0, action: 0, transition: 0, frameqa: 0 };
    match task {
        Task::Count => counts.count = 48,
        Task::Action => counts.action = 48,
        Task::Transition => counts.transition = 48,
        Task::FrameQa => counts.frameqa = 48,
    }
    config.data.train = counts;
    config.data.test = TaskCounts {
        count: counts.count.min(1),
        action: counts.action.min(1),
        transition: counts.transition.min(1),
        frameqa: counts.frameqa.min(1),
    };
    config.data.difficulty.steps = 8;
    config.model.hidden = 12;
    config.model.embed_dim = 12;
    config.model.attention_hidden = 12;
    config.model.dropout = 0.0;
    config.train.steps = steps;
    config.train.finetune_steps = steps / 2;
    config.train.batch_size = 8;

    let ds = build_dataset(&config.data, seed)?;
    let (tokens, answers) = ds.vocabularies();
    let mc = config.model_config(variant, tokens, answers);
    let train = ds.train.samples()?;
    let fitted = fit(mc, &config.train, &train, None, seed, None)?;
    let model: &Model = &fitted.model;
    let test = ds.test.samples()?;
    let sample = test.first().ok_or_else(|| Error::Invalid("empty demo test split".into()))?;
    let (pred, trace) = model.predict_traced(sample.item, sample.features)?;
    Ok(AttentionDemo {
        variant: variant.key().to_string(),
        steps_trained: fitted.log.losses.last().map_or(0, |l| l.0 + 1),
        final_loss: fitted.log.losses.last().map_or(f64::NAN, |l| l.1),
        question: sample.item.question.join(" "),
        answer: answer_text(&sample.item.answer),
        predicted: prediction_text(&pred, &sample.item.answer),
        correct: pred.is_correct(&sample.item.answer),
        needle: needle_of(sample.item, seed, &config),
        grid: config.data.render.grid,
        spatial: trace.spatial,
        temporal: trace.temporal,
    })
}

/// Ranks the action verbs by similarity to `answer` and picks distractors.
pub fn distractors(answer: &str, dim: usize, seed: u64) -> Result<DistractorDemo> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let provider = HashEmbedding::new(dim, seed);
    let vocab = action_verbs();
    let (mut similarities, threshold) = verb_similarities(answer, &vocab, &provider)?;
    let chosen = select_distractor_verbs(answer, &vocab, &provider)?;
    similarities.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(DistractorDemo { answer: answer.to_string(), threshold, similarities, chosen })
}

fn to_js<T: Serialize>(value: Result<T>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = episodeHeatmap)]
pub fn episode_heatmap_js(task: &str, seed: u32, steps: u32, noise: f64) -> Result<String, JsError> {
    to_js(episode_heatmap(task, seed.into(), steps as usize, noise))
}

#[wasm_bindgen(js_name = attentionMasks)]
pub fn attention_masks_js(variant: &str, task: &str, seed: u32, steps: u32) -> Result<String, JsError> {
    to_js(attention_masks(variant, task, seed.into(), steps as usize))
}

#[wasm_bindgen(js_name = distractors)]
pub fn distractors_js(answer: &str, dim: u32, seed: u32) -> Result<String, JsError> {
    to_js(distractors(answer, dim as usize, seed.into()))
}

/// The verbs the distractor picker can be asked about.
#[wasm_bindgen(js_name = actionVerbs)]
pub fn action_verbs_js() -> String {
    serde_json::to_string(&action_verbs()).expect("strings serialize")
}
