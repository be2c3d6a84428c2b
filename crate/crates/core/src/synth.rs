//! Procedural episodes with known ground truth, rendered into grid features.
//!
//! An episode is a latent track of segments measured in *beats*; each beat
//! lasts `frames_per_beat` raw frames. Rendering maps every subject, action,
//! state, color and the needle marker to fixed prototype vectors and places
//! them on a `G × G` grid. The frame stream samples every `stride`-th raw
//! frame; the clip stream averages motion prototypes over a 16-frame window
//! centred on the same frame.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Answer, QaItem, Task, VideoFeatures, MAX_COUNT};
use crate::qagen::{
    self, instantiate_template, make_zero_count_items, multiple_choice, select_candidate_phrases,
    select_distractor_verbs, EmbeddingProvider, HashEmbedding, PhraseRecord, Slots, TemplateKind,
};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::tokenize;

/// Raw frames averaged by one clip descriptor.
pub const CLIP_WINDOW: usize = 16;

pub const SUBJECTS: [&str; 6] = ["man", "woman", "girl", "boy", "cat", "dog"];

/// Action phrases as `(verb, object)`.
pub const ACTIONS: [(&str, &str); 22] = [
    ("jump", ""),
    ("wave", "hand"),
    ("wave", "flag"),
    ("nod", "head"),
    ("clap", "hands"),
    ("kick", "ball"),
    ("kick", "door"),
    ("throw", "ball"),
    ("spin", ""),
    ("shake", "head"),
    ("shake", "box"),
    ("punch", "bag"),
    ("dance", ""),
    ("blink", ""),
    ("bounce", "ball"),
    ("stomp", "foot"),
    ("swing", "bat"),
    ("swing", "arms"),
    ("flip", "coin"),
    ("hop", ""),
    ("throw", "stick"),
    ("punch", "air"),
];

pub const STATES: [&str; 12] = [
    "sitting", "standing", "smiling", "running", "walking", "lying", "crying", "laughing", "sleeping", "eating",
    "talking", "singing",
];

pub const COLORS: [&str; 11] =
    ["red", "blue", "green", "yellow", "black", "white", "orange", "purple", "pink", "brown", "gray"];

/// Distinct verbs of [`ACTIONS`], sorted.
pub fn action_verbs() -> Vec<String> {
    ACTIONS.iter().map(|(v, _)| v.to_string()).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn phrase_of(action: usize) -> String {
    let (v, o) = ACTIONS[action];
    if o.is_empty() {
        v.to_string()
    } else {
        format!("{v} {o}")
    }
}

/// Every action phrase as a corpus record.
pub fn lexicon_corpus() -> Vec<PhraseRecord> {
    ACTIONS.iter().map(|(v, o)| PhraseRecord::new("lexicon", "", v, o)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeKind {
    /// One action repeated a known number of times.
    Repetition,
    /// A marked beat showing a state change.
    Transition,
    /// A marked beat showing the subject's color.
    Frame,
}

impl EpisodeKind {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Count | Task::Action => EpisodeKind::Repetition,
            Task::Transition => EpisodeKind::Transition,
            Task::FrameQa => EpisodeKind::Frame,
        }
    }
}

/// What the actor does during a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Act {
    Action(usize),
    State(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeKind {
    Color(usize),
    State(usize),
}

/// Something shown at a grid cell for the duration of a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub cell: usize,
    pub kind: AttributeKind,
}

/// A run of beats. An `Action` act with `repeats = k` spans `2k − 1` beats
/// and is visible on every other beat; a `State` act is visible throughout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub act: Option<Act>,
    pub repeats: u8,
    pub beats: usize,
    pub attributes: Vec<Attribute>,
    /// Marker prototype shown on the actor cell.
    pub marked: bool,
}

/// Labels fixed at generation time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub count: Option<u8>,
    /// Repeated action, or for count-0 episodes the action the question asks about.
    pub action: Option<usize>,
    pub transition: Option<(usize, usize)>,
    pub color: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticEpisode {
    pub id: String,
    pub kind: EpisodeKind,
    pub seed: u64,
    pub subject: usize,
    pub actor_cell: usize,
    pub grid: usize,
    pub steps: usize,
    pub stride: usize,
    pub frames_per_beat: usize,
    pub segments: Vec<Segment>,
    /// Sampled step showing the marked beat.
    pub needle: Option<usize>,
    pub truth: Truth,
}

impl SyntheticEpisode {
    pub fn raw_frames(&self) -> usize {
        self.steps * self.stride
    }

    pub fn beats(&self) -> usize {
        self.raw_frames().div_ceil(self.frames_per_beat)
    }

    /// Per-beat `(segment index, offset within segment)`.
    pub fn beat_index(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.beats());
        for (s, seg) in self.segments.iter().enumerate() {
            for j in 0..seg.beats {
                out.push((s, j));
            }
        }
        out
    }

    /// Actor act visible at beat `(segment, offset)`.
    pub fn visible_act(&self, segment: usize, offset: usize) -> Option<Act> {
        match self.segments[segment].act {
            Some(Act::Action(a)) if offset.is_multiple_of(2) => Some(Act::Action(a)),
            Some(Act::Action(_)) => None,
            other => other,
        }
    }
}

/// Geometry and channel layout of rendered features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub grid: usize,
    pub frame_channels: usize,
    pub clip_channels: usize,
    pub frames_per_beat: usize,
    pub stride: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub codebook_seed: u64,
    /// Selects the noise realization; rendering is a pure function of it.
    pub noise_seed: u64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            grid: 3,
            frame_channels: 16,
            clip_channels: 8,
            frames_per_beat: 4,
            stride: 4,
            noise: 0.05,
            codebook_seed: 0,
            noise_seed: 0,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.frame_channels == 0 || self.clip_channels == 0 {
            return Err(Error::Config("render grid and channel counts must be positive".into()));
        }
        if self.stride == 0 || self.frames_per_beat == 0 {
            return Err(Error::Config("render stride and frames_per_beat must be at least 1".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("render noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Episode length and label distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Difficulty {
    pub steps: usize,
    /// Relative weights of count labels `0..=10`.
    pub count_weights: Vec<f64>,
    pub force_count: Option<u8>,
}

impl Default for Difficulty {
    fn default() -> Self {
        Self { steps: 24, count_weights: vec![1.0; MAX_COUNT as usize + 1], force_count: None }
    }
}

/// Longest count that fits in `beats` beats.
pub fn max_count(beats: usize) -> u8 {
    (beats.div_ceil(2)).min(MAX_COUNT as usize) as u8
}

fn draw_count(d: &Difficulty, beats: usize, r: &mut impl Rng) -> Result<u8> {
    let limit = max_count(beats);
    if let Some(k) = d.force_count {
        if k > limit {
            return Err(Error::Invalid(format!("count {k} does not fit in {beats} beats")));
        }
        return Ok(k);
    }
    if d.count_weights.len() != MAX_COUNT as usize + 1 || d.count_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config(format!("count_weights needs {} non-negative entries", MAX_COUNT + 1)));
    }
    let feasible = &d.count_weights[..=limit as usize];
    let total: f64 = feasible.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config(format!("no positive count weight at or below {limit}")));
    }
    let mut u = r.random::<f64>() * total;
    for (k, w) in feasible.iter().enumerate() {
        if u < *w {
            return Ok(k as u8);
        }
        u -= w;
    }
    Ok(feasible.iter().rposition(|w| *w > 0.0).expect("positive total") as u8)
}

/// Draws one episode; deterministic in `seed`.
pub fn generate_episode(
    kind: EpisodeKind,
    difficulty: &Difficulty,
    spec: &RenderSpec,
    id: &str,
    seed: u64,
) -> Result<SyntheticEpisode> {
    spec.validate()?;
    if difficulty.steps == 0 {
        return Err(Error::Config("episode steps must be positive".into()));
    }
    let mut r = rng::stream(seed, "synth/episode");
    let cells = spec.grid * spec.grid;
    let mut ep = SyntheticEpisode {
        id: id.to_string(),
        kind,
        seed,
        subject: r.random_range(0..SUBJECTS.len()),
        actor_cell: r.random_range(0..cells),
        grid: spec.grid,
        steps: difficulty.steps,
        stride: spec.stride,
        frames_per_beat: spec.frames_per_beat,
        segments: Vec::new(),
        needle: None,
        truth: Truth { count: None, action: None, transition: None, color: None },
    };
    let beats = ep.beats();
    let other_cell = |r: &mut rng::StreamRng, actor: usize| {
        if cells == 1 {
            actor
        } else {
            (actor + r.random_range(1..cells)) % cells
        }
    };
    match kind {
        EpisodeKind::Repetition => {
            let count = draw_count(difficulty, beats, &mut r)?;
            let action = r.random_range(0..ACTIONS.len());
            let idle = Some(Act::State(r.random_range(0..STATES.len())));
            let clutter = vec![Attribute {
                cell: other_cell(&mut r, ep.actor_cell),
                kind: AttributeKind::Color(r.random_range(0..COLORS.len())),
            }];
            let span = if count == 0 { 0 } else { 2 * count as usize - 1 };
            let start = r.random_range(0..=beats - span);
            let seg = |act, repeats, beats| Segment { act, repeats, beats, attributes: clutter.clone(), marked: false };
            if start > 0 {
                ep.segments.push(seg(idle, 0, start));
            }
            if count > 0 {
                ep.segments.push(seg(Some(Act::Action(action)), count, span));
            }
            if beats > start + span {
                ep.segments.push(seg(idle, 0, beats - start - span));
            }
            ep.truth.count = Some(count);
            ep.truth.action = Some(action);
        }
        EpisodeKind::Transition | EpisodeKind::Frame => {
            let needle_step = r.random_range(0..ep.steps);
            let needle_beat = needle_step * spec.stride / spec.frames_per_beat;
            let neighbor = (ep.actor_cell + 1) % cells;
            let (prev, next) = {
                let a = r.random_range(0..STATES.len());
                let b = (a + r.random_range(1..STATES.len())) % STATES.len();
                (a, b)
            };
            let gold_color = r.random_range(0..COLORS.len());
            for b in 0..beats {
                let marked = b == needle_beat;
                let segment = match kind {
                    EpisodeKind::Transition if marked => Segment {
                        act: Some(Act::State(prev)),
                        repeats: 0,
                        beats: 1,
                        attributes: vec![Attribute { cell: neighbor, kind: AttributeKind::State(next) }],
                        marked,
                    },
                    EpisodeKind::Transition => Segment {
                        act: Some(Act::State(r.random_range(0..STATES.len()))),
                        repeats: 0,
                        beats: 1,
                        attributes: vec![Attribute {
                            cell: neighbor,
                            kind: AttributeKind::State(r.random_range(0..STATES.len())),
                        }],
                        marked,
                    },
                    _ => {
                        let color = if marked { gold_color } else { r.random_range(0..COLORS.len()) };
                        Segment {
                            act: None,
                            repeats: 0,
                            beats: 1,
                            attributes: vec![Attribute { cell: ep.actor_cell, kind: AttributeKind::Color(color) }],
                            marked,
                        }
                    }
                };
                ep.segments.push(segment);
            }
            ep.needle = Some(needle_step);
            if kind == EpisodeKind::Transition {
                ep.truth.transition = Some((prev, next));
            } else {
                ep.truth.color = Some(gold_color);
            }
        }
    }
    Ok(ep)
}

/// Fixed prototype vectors for every renderable symbol.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub subject: Vec<Vec<f64>>,
    pub action_app: Vec<Vec<f64>>,
    pub action_motion: Vec<Vec<f64>>,
    pub state_app: Vec<Vec<f64>>,
    pub state_motion: Vec<Vec<f64>>,
    pub color_app: Vec<Vec<f64>>,
    pub marker: Vec<f64>,
}

impl Codebook {
    pub fn new(spec: &RenderSpec) -> Self {
        let table = |name: &str, rows: usize, dim: usize| -> Vec<Vec<f64>> {
            let mut r = rng::stream(spec.codebook_seed, &format!("synth/codebook/{name}"));
            (0..rows).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
        };
        let (cf, cs) = (spec.frame_channels, spec.clip_channels);
        Self {
            subject: table("subject", SUBJECTS.len(), cf),
            action_app: table("action/appearance", ACTIONS.len(), cf),
            action_motion: table("action/motion", ACTIONS.len(), cs),
            state_app: table("state/appearance", STATES.len(), cf),
            state_motion: table("state/motion", STATES.len(), cs),
            color_app: table("color/appearance", COLORS.len(), cf),
            marker: table("marker", 1, cf).remove(0),
        }
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Noise-free appearance and motion of every cell at one beat, as
/// `[cells × C_f]` and `[cells × C_s]` row-major buffers.
pub fn beat_content(ep: &SyntheticEpisode, book: &Codebook, segment: usize, offset: usize) -> (Vec<f64>, Vec<f64>) {
    let cells = ep.grid * ep.grid;
    let (cf, cs) = (book.marker.len(), book.action_motion[0].len());
    let mut app = vec![0.0; cells * cf];
    let mut mot = vec![0.0; cells * cs];
    let seg = &ep.segments[segment];
    let actor = ep.actor_cell;
    add(&mut app[actor * cf..(actor + 1) * cf], &book.subject[ep.subject]);
    match ep.visible_act(segment, offset) {
        Some(Act::Action(a)) => {
            add(&mut app[actor * cf..(actor + 1) * cf], &book.action_app[a]);
            add(&mut mot[actor * cs..(actor + 1) * cs], &book.action_motion[a]);
        }
        Some(Act::State(s)) => {
            add(&mut app[actor * cf..(actor + 1) * cf], &book.state_app[s]);
            add(&mut mot[actor * cs..(actor + 1) * cs], &book.state_motion[s]);
        }
        None => {}
    }
    if seg.marked {
        add(&mut app[actor * cf..(actor + 1) * cf], &book.marker);
    }
    for at in &seg.attributes {
        let c = at.cell;
        match at.kind {
            AttributeKind::Color(k) => add(&mut app[c * cf..(c + 1) * cf], &book.color_app[k]),
            AttributeKind::State(s) => {
                add(&mut app[c * cf..(c + 1) * cf], &book.state_app[s]);
                add(&mut mot[c * cs..(c + 1) * cs], &book.state_motion[s]);
            }
        }
    }
    (app, mot)
}

/// Raw frames averaged by the clip descriptor of step `t`, clamped to the
/// episode (the first and last frames pad the window).
pub fn clip_window(t: usize, stride: usize, raw_frames: usize) -> impl Iterator<Item = usize> {
    let centre = (t * stride) as isize;
    let half = (CLIP_WINDOW / 2) as isize;
    (centre - half..centre + half).map(move |f| f.clamp(0, raw_frames as isize - 1) as usize)
}

/// Renders `ep` into grid and pooled features.
pub fn render_features(ep: &SyntheticEpisode, spec: &RenderSpec) -> Result<VideoFeatures> {
    render_with(ep, spec, &Codebook::new(spec))
}

pub fn render_with(ep: &SyntheticEpisode, spec: &RenderSpec, book: &Codebook) -> Result<VideoFeatures> {
    spec.validate()?;
    if spec.grid != ep.grid || spec.stride != ep.stride || spec.frames_per_beat != ep.frames_per_beat {
        return Err(Error::Invalid(format!(
            "episode {} was generated for grid {}, stride {}, {} frames per beat; spec has {}, {}, {}",
            ep.id, ep.grid, ep.stride, ep.frames_per_beat, spec.grid, spec.stride, spec.frames_per_beat
        )));
    }
    let index = ep.beat_index();
    if index.len() != ep.beats() {
        return Err(Error::Invalid(format!("episode {} covers {} of {} beats", ep.id, index.len(), ep.beats())));
    }
    if book.marker.len() != spec.frame_channels || book.action_motion[0].len() != spec.clip_channels {
        return Err(Error::Invalid("codebook does not match the render spec channels".into()));
    }
    let contents: Vec<(Vec<f64>, Vec<f64>)> = index.iter().map(|&(s, j)| beat_content(ep, book, s, j)).collect();
    let beat_of = |f: usize| f / ep.frames_per_beat;
    let cells = ep.grid * ep.grid;
    let raw = ep.raw_frames();

    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("render noise: {e}")))?;
    let mut nr = rng::stream(rng::derive_seed(ep.seed, "render"), &format!("noise/{}", spec.noise_seed));
    let mut finish = |mut v: Vec<f64>, cols: usize| -> Result<Tensor> {
        if spec.noise > 0.0 {
            for x in &mut v {
                *x += noise.sample(&mut nr);
            }
        }
        let mut t = Tensor::new(&[cells, cols], v)?;
        t.round_to_f32();
        Ok(t)
    };

    let mut frames = Vec::with_capacity(ep.steps);
    let mut clips = Vec::with_capacity(ep.steps);
    for t in 0..ep.steps {
        frames.push(finish(contents[beat_of(t * ep.stride)].0.clone(), spec.frame_channels)?);
        let mut acc = vec![0.0; cells * spec.clip_channels];
        for f in clip_window(t, ep.stride, raw) {
            add(&mut acc, &contents[beat_of(f)].1);
        }
        let acc = acc.into_iter().map(|v| v / CLIP_WINDOW as f64).collect();
        clips.push(finish(acc, spec.clip_channels)?);
    }
    VideoFeatures::from_grids(ep.grid, frames, clips)
}

/// Resources shared by QA derivation.
pub struct QaHooks<'a> {
    pub provider: &'a dyn EmbeddingProvider,
    pub corpus: &'a [PhraseRecord],
}

fn item(ep: &SyntheticEpisode, suffix: &str, task: Task, question: &str, answer: Answer) -> QaItem {
    QaItem { id: format!("{}/{suffix}", ep.id), episode_id: ep.id.clone(), task, question: tokenize(question), answer }
}

/// Every QA item the episode supports.
pub fn derive_qa(ep: &SyntheticEpisode, hooks: &QaHooks<'_>) -> Result<Vec<QaItem>> {
    let subject = SUBJECTS[ep.subject].to_string();
    let mut r = rng::stream(ep.seed, "synth/qa");
    let mut items = Vec::new();
    if let (Some(count), Some(action)) = (ep.truth.count, ep.truth.action) {
        let (verb, object) = ACTIONS[action];
        let slots = Slots {
            subject: Some(subject.clone()),
            verb: Some(verb.into()),
            object: object.into(),
            repeat: Some(count),
            ..Slots::default()
        };
        let (q, _) = instantiate_template(TemplateKind::Count, &slots)?;
        items.push(item(ep, "count", Task::Count, &q, Answer::Count { label: count }));
        if count > 0 {
            let (q, gold) = instantiate_template(TemplateKind::Action, &slots)?;
            let verbs = select_distractor_verbs(verb, &action_verbs(), hooks.provider)?;
            let phrases = select_candidate_phrases(&verbs, hooks.corpus, hooks.provider, &gold)?;
            items.push(item(ep, "action", Task::Action, &q, multiple_choice(&gold, &phrases, &mut r)?));
        }
    }
    if let Some((prev, next)) = ep.truth.transition {
        let states: Vec<String> = STATES.iter().map(|s| s.to_string()).collect();
        let slots = Slots {
            subject: Some(subject.clone()),
            previous: Some(STATES[prev].into()),
            next: Some(STATES[next].into()),
            ..Slots::default()
        };
        for (suffix, kind) in [("before", TemplateKind::TransitionBefore), ("after", TemplateKind::TransitionAfter)] {
            let (q, gold) = instantiate_template(kind, &slots)?;
            let distractors = select_distractor_verbs(&gold, &states, hooks.provider)?;
            items.push(item(ep, suffix, Task::Transition, &q, multiple_choice(&gold, &distractors, &mut r)?));
        }
    }
    if let Some(color) = ep.truth.color {
        let slots = Slots { subject: Some(subject), attribute: Some(COLORS[color].into()), ..Slots::default() };
        let (q, gold) = instantiate_template(TemplateKind::FrameColor, &slots)?;
        items.push(item(ep, "frameqa", Task::FrameQa, &q, Answer::Word { word: gold }));
    }
    Ok(items)
}

/// Items per task in one split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskCounts {
    pub count: usize,
    pub action: usize,
    pub transition: usize,
    pub frameqa: usize,
}

impl TaskCounts {
    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::Count => self.count,
            Task::Action => self.action,
            Task::Transition => self.transition,
            Task::FrameQa => self.frameqa,
        }
    }

    pub fn total(&self) -> usize {
        self.count + self.action + self.transition + self.frameqa
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: TaskCounts,
    pub test: TaskCounts,
    /// Exact share of count items answered 0 by pairing questions with
    /// non-repeating episodes.
    pub zero_count_fraction: f64,
    pub difficulty: Difficulty,
    pub render: RenderSpec,
    /// Dimension of the pseudo-embeddings that rank distractors.
    pub embedding_dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let split = |n| TaskCounts { count: n, action: n, transition: n, frameqa: n };
        Self {
            train: split(200),
            test: split(50),
            zero_count_fraction: 0.1,
            difficulty: Difficulty::default(),
            render: RenderSpec::default(),
            embedding_dim: 50,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if !(0.0..=1.0).contains(&self.zero_count_fraction) {
            return Err(Error::Config(format!(
                "zero_count_fraction must be in [0, 1], got {}",
                self.zero_count_fraction
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }
}

/// One generated split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub items: Vec<QaItem>,
    pub episodes: BTreeMap<String, VideoFeatures>,
}

impl Split {
    pub fn samples(&self) -> Result<Vec<crate::train::Sample<'_>>> {
        self.items
            .iter()
            .map(|item| {
                let features = self.episodes.get(&item.episode_id).ok_or_else(|| {
                    Error::Invalid(format!("item {} references unknown episode {}", item.id, item.episode_id))
                })?;
                Ok(crate::train::Sample { item, features })
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    /// Token and answer vocabularies of the training split.
    pub fn vocabularies(&self) -> (Vec<String>, Vec<String>) {
        vocabularies(&self.train.items)
    }
}

/// Sorted question and candidate tokens, and sorted gold words, of `items`.
pub fn vocabularies(items: &[QaItem]) -> (Vec<String>, Vec<String>) {
    let mut tokens = BTreeSet::new();
    let mut words = BTreeSet::new();
    for it in items {
        tokens.extend(it.question.iter().cloned());
        match &it.answer {
            Answer::Choice { candidates, .. } => tokens.extend(candidates.iter().flatten().cloned()),
            Answer::Word { word } => {
                words.insert(word.clone());
            }
            Answer::Count { .. } => {}
        }
    }
    (tokens.into_iter().collect(), words.into_iter().collect())
}

fn build_split(config: &DataConfig, seed: u64, split: &str, counts: &TaskCounts, hooks: &QaHooks<'_>) -> Result<Split> {
    let book = Codebook::new(&config.render);
    let mut out = Split::default();
    let add_episode = |out: &mut Split, ep: &SyntheticEpisode| -> Result<()> {
        let f = render_with(ep, &config.render, &book)?;
        out.episodes.insert(ep.id.clone(), f);
        Ok(())
    };
    let mut positive = config.difficulty.clone();
    positive.force_count = None;
    if let Some(w) = positive.count_weights.first_mut() {
        *w = 0.0;
    }
    for task in [Task::Count, Task::Action, Task::Transition, Task::FrameQa] {
        let wanted = counts.get(task);
        let zero = if task == Task::Count { (wanted as f64 * config.zero_count_fraction).round() as usize } else { 0 };
        let difficulty = if matches!(task, Task::Count | Task::Action) { &positive } else { &config.difficulty };
        let mut task_items = Vec::with_capacity(wanted);
        let mut i = 0;
        while task_items.len() < wanted - zero {
            let id = format!("{split}-{}-{i:05}", task.key());
            let ep_seed = rng::derive_seed(seed, &format!("synth/episode/{id}"));
            let ep = generate_episode(EpisodeKind::for_task(task), difficulty, &config.render, &id, ep_seed)?;
            let derived: Vec<QaItem> = derive_qa(&ep, hooks)?.into_iter().filter(|it| it.task == task).collect();
            add_episode(&mut out, &ep)?;
            task_items.extend(derived.into_iter().take(wanted - zero - task_items.len()));
            i += 1;
        }
        if zero > 0 {
            let mut zero_difficulty = config.difficulty.clone();
            zero_difficulty.force_count = Some(0);
            let mut ids = Vec::with_capacity(zero);
            for j in 0..zero {
                let id = format!("{split}-count0-{j:05}");
                let ep_seed = rng::derive_seed(seed, &format!("synth/episode/{id}"));
                let ep = generate_episode(EpisodeKind::Repetition, &zero_difficulty, &config.render, &id, ep_seed)?;
                add_episode(&mut out, &ep)?;
                ids.push(id);
            }
            let pool = count_question_pool()?;
            let mut r = rng::stream(seed, &format!("synth/zero-count/{split}"));
            task_items.extend(make_zero_count_items(&pool, &ids, &mut r)?);
        }
        out.items.extend(task_items);
    }
    Ok(out)
}

/// Count questions over every subject and action of the lexicon.
pub fn count_question_pool() -> Result<Vec<Vec<String>>> {
    let mut pool = Vec::new();
    for s in SUBJECTS {
        for (v, o) in ACTIONS {
            let slots = Slots {
                subject: Some(s.into()),
                verb: Some(v.into()),
                object: o.into(),
                repeat: Some(0),
                ..Slots::default()
            };
            pool.push(tokenize(&instantiate_template(TemplateKind::Count, &slots)?.0));
        }
    }
    Ok(pool)
}

/// Generates both splits; all randomness derives from `seed`.
pub fn build_dataset(config: &DataConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let provider = HashEmbedding::new(config.embedding_dim, config.render.codebook_seed);
    let corpus = lexicon_corpus();
    let hooks = QaHooks { provider: &provider, corpus: &corpus };
    let train = build_split(config, seed, "train", &config.train, &hooks)?;
    let test = build_split(config, seed, "test", &config.test, &hooks)?;
    if let Some(id) = train.episodes.keys().find(|k| test.episodes.contains_key(*k)) {
        return Err(Error::Invalid(format!("episode {id} appears in both splits")));
    }
    Ok(Dataset { train, test })
}

/// One manifest line: a QA item and the path of its feature blob relative to
/// the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub features: String,
    #[serde(flatten)]
    pub item: QaItem,
}

pub const FEATURE_MAGIC: &[u8; 8] = b"STVQAFEA";
pub const FEATURE_VERSION: u32 = 1;

/// Feature blob: magic, version, then `u32` steps, grid, frame channels and
/// clip channels, then all frame grids and all clip grids as `f32`.
pub fn features_to_bytes(f: &VideoFeatures) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION as usize, f.steps(), f.grid, f.frame_channels(), f.clip_channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in f.frame_grid.iter().chain(&f.clip_grid) {
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn features_from_bytes(bytes: &[u8], path: &Path) -> Result<VideoFeatures> {
    let fail = |message: String| Error::Parse { path: path.to_path_buf(), line: 0, message };
    if bytes.len() < 28 || &bytes[..8] != FEATURE_MAGIC {
        return Err(fail("not a feature blob".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (version, steps, grid, cf, cs) = (word(0), word(1), word(2), word(3), word(4));
    if version != FEATURE_VERSION as usize {
        return Err(fail(format!("unsupported feature blob version {version}")));
    }
    let cells = grid * grid;
    let expected = 28 + 4 * steps * cells * (cf + cs);
    if bytes.len() != expected {
        return Err(fail(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut values = bytes[28..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut take = |cols: usize| -> Result<Vec<Tensor>> {
        (0..steps).map(|_| Tensor::new(&[cells, cols], values.by_ref().take(cells * cols).collect())).collect()
    };
    let frames = take(cf)?;
    let clips = take(cs)?;
    VideoFeatures::from_grids(grid, frames, clips)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `train.jsonl`, `test.jsonl`, `corpus.jsonl` and `features/*.bin`
/// under `dir`, which must not already contain a manifest.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for name in ["train.jsonl", "test.jsonl"] {
        if dir.join(name).exists() {
            return Err(Error::Invalid(format!("{} already exists; refusing to overwrite", dir.join(name).display())));
        }
    }
    let features = dir.join("features");
    std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    for (name, split) in [("train", &ds.train), ("test", &ds.test)] {
        for (id, f) in &split.episodes {
            write_file(&features.join(format!("{id}.bin")), &features_to_bytes(f))?;
        }
        let records: Vec<ManifestRecord> = split
            .items
            .iter()
            .map(|it| ManifestRecord { features: format!("features/{}.bin", it.episode_id), item: it.clone() })
            .collect();
        crate::jsonl::write(&dir.join(format!("{name}.jsonl")), &records)?;
    }
    crate::jsonl::write(&dir.join("corpus.jsonl"), &lexicon_corpus())
}

/// Reads one split manifest and the feature blobs it references.
pub fn read_split(manifest: &Path) -> Result<Split> {
    if !manifest.exists() {
        return Err(Error::io(manifest, std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found")));
    }
    let records: Vec<ManifestRecord> = crate::jsonl::read(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut split = Split::default();
    for (i, rec) in records.into_iter().enumerate() {
        rec.item.validate().map_err(|e| Error::Parse {
            path: manifest.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !split.episodes.contains_key(&rec.item.episode_id) {
            let path = base.join(&rec.features);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            split.episodes.insert(rec.item.episode_id.clone(), features_from_bytes(&bytes, &path)?);
        }
        split.items.push(rec.item);
    }
    Ok(split)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset { train: read_split(&dir.join("train.jsonl"))?, test: read_split(&dir.join("test.jsonl"))? })
}

/// Shuffled copy of `items`, seeded.
pub fn shuffled<T: Clone>(items: &[T], seed: u64, name: &str) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut rng::stream(seed, name));
    v
}

pub use qagen::NUM_DISTRACTORS;
