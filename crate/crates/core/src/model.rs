//! The ST-VQA model: dual-LSTM video and text encoders, optional spatial and
//! temporal attention, and the three answer decoders.
//!
//! Data flow for one item:
//!
//! 1. Spatial variants first run the text encoder over the question from a
//!    zero state; its final combined state conditions a per-step attention
//!    mask over grid cells, and the attended cell features feed the video
//!    encoder.
//! 2. The video encoder produces one combined state per step. Its final
//!    recurrent state initializes the question encoder.
//! 3. Temporal variants attend over the video states with the question state
//!    and fuse the result with it by elementwise sum.
//! 4. Open-ended word questions decode from the (fused) question state.
//!    Multiple-choice candidates and the count query are encoded by the
//!    answer encoder, prefixed by `<boa>`, starting from the (fused) question
//!    state, and decoded from the final answer state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{AttentionMlp, Ctx, DualLstm, DualState, Embedding, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::{AnswerVocab, Vocab, BOA};

pub const NUM_CHOICES: usize = 5;
pub const MAX_COUNT: u8 = 10;

/// The seven ablation variants, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Text,
    Resnet,
    C3d,
    Concat,
    Spatial,
    Temporal,
    SpatialTemporal,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Text,
        Variant::Resnet,
        Variant::C3d,
        Variant::Concat,
        Variant::Spatial,
        Variant::Temporal,
        Variant::SpatialTemporal,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Text => "text",
            Variant::Resnet => "resnet",
            Variant::C3d => "c3d",
            Variant::Concat => "concat",
            Variant::Spatial => "spatial",
            Variant::Temporal => "temporal",
            Variant::SpatialTemporal => "spatial-temporal",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Text => "ST-VQA-Text",
            Variant::Resnet => "ST-VQA-ResNet",
            Variant::C3d => "ST-VQA-C3D",
            Variant::Concat => "ST-VQA-Concat",
            Variant::Spatial => "ST-VQA-Sp.",
            Variant::Temporal => "ST-VQA-Tp.",
            Variant::SpatialTemporal => "ST-VQA-Sp.Tp.",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let k = s.to_ascii_lowercase();
        Variant::ALL.into_iter().find(|v| v.key() == k || v.label().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.key()).collect();
            Error::Invalid(format!("unknown variant `{s}`; valid variants: {}", valid.join(", ")))
        })
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, Variant::Spatial | Variant::SpatialTemporal)
    }

    pub fn uses_temporal(self) -> bool {
        matches!(self, Variant::Temporal | Variant::SpatialTemporal)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Count,
    Action,
    Transition,
    FrameQa,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Count, Task::Action, Task::Transition, Task::FrameQa];

    pub fn key(self) -> &'static str {
        match self {
            Task::Count => "count",
            Task::Action => "action",
            Task::Transition => "transition",
            Task::FrameQa => "frameqa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.key() == s.to_ascii_lowercase()).ok_or_else(|| {
            Error::Invalid(format!("unknown task `{s}`; valid tasks: count, action, transition, frameqa"))
        })
    }

    pub fn is_multiple_choice(self) -> bool {
        matches!(self, Task::Action | Task::Transition)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// Per-step video descriptors. Grids are `[G·G, C]` with cells in row-major
/// order; pooled views are `[1, C]` spatial means of the grids.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub grid: usize,
    pub frame_grid: Vec<Tensor>,
    pub frame_pooled: Vec<Tensor>,
    pub clip_grid: Vec<Tensor>,
    pub clip_pooled: Vec<Tensor>,
}

impl VideoFeatures {
    /// Builds all four views from the two grid streams.
    pub fn from_grids(grid: usize, frame_grid: Vec<Tensor>, clip_grid: Vec<Tensor>) -> Result<Self> {
        if frame_grid.is_empty() || frame_grid.len() != clip_grid.len() {
            return Err(Error::Invalid(format!(
                "frame and clip streams must be non-empty and equally long ({} vs {})",
                frame_grid.len(),
                clip_grid.len()
            )));
        }
        let cells = grid * grid;
        for t in frame_grid.iter().chain(&clip_grid) {
            if t.rank() != 2 || t.shape()[0] != cells {
                return Err(Error::Shape(format!("grid feature {:?} does not have {cells} cells", t.shape())));
            }
        }
        let frame_pooled = frame_grid.iter().map(spatial_mean).collect();
        let clip_pooled = clip_grid.iter().map(spatial_mean).collect();
        Ok(Self { grid, frame_grid, frame_pooled, clip_grid, clip_pooled })
    }

    pub fn steps(&self) -> usize {
        self.frame_grid.len()
    }

    pub fn frame_channels(&self) -> usize {
        self.frame_grid[0].shape()[1]
    }

    pub fn clip_channels(&self) -> usize {
        self.clip_grid[0].shape()[1]
    }

    /// Single-step features holding the temporal mean of every view.
    pub fn aggregate(&self) -> Self {
        let avg = |ts: &[Tensor]| {
            let mut acc = Tensor::zeros(ts[0].shape());
            for t in ts {
                acc.add_assign(t);
            }
            let n = ts.len() as f64;
            vec![acc.map(|v| v / n)]
        };
        Self::from_grids(self.grid, avg(&self.frame_grid), avg(&self.clip_grid)).expect("consistent")
    }

    /// Single-step features of step `t`.
    pub fn frame(&self, t: usize) -> Self {
        Self {
            grid: self.grid,
            frame_grid: vec![self.frame_grid[t].clone()],
            frame_pooled: vec![self.frame_pooled[t].clone()],
            clip_grid: vec![self.clip_grid[t].clone()],
            clip_pooled: vec![self.clip_pooled[t].clone()],
        }
    }
}

pub fn spatial_mean(grid: &Tensor) -> Tensor {
    let (rows, cols) = (grid.shape()[0], grid.shape()[1]);
    let mut out = vec![0.0; cols];
    for row in grid.data().chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row(&out.iter().map(|v| v / rows as f64).collect::<Vec<_>>())
}

/// Gold answer of a [`QaItem`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Answer {
    Count { label: u8 },
    Choice { candidates: Vec<Vec<String>>, gold: usize },
    Word { word: String },
}

/// One question instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub episode_id: String,
    pub task: Task,
    pub question: Vec<String>,
    pub answer: Answer,
}

impl QaItem {
    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() {
            return Err(Error::Invalid(format!("item {}: empty question", self.id)));
        }
        match (&self.answer, self.task) {
            (Answer::Count { label }, Task::Count) if *label <= MAX_COUNT => Ok(()),
            (Answer::Count { label }, Task::Count) => {
                Err(Error::Invalid(format!("item {}: count label {label} exceeds {MAX_COUNT}", self.id)))
            }
            (Answer::Choice { candidates, gold }, t) if t.is_multiple_choice() => {
                if candidates.len() != NUM_CHOICES || *gold >= NUM_CHOICES {
                    return Err(Error::Invalid(format!(
                        "item {}: need {NUM_CHOICES} candidates with one gold, got {} (gold {gold})",
                        self.id,
                        candidates.len()
                    )));
                }
                if candidates.iter().any(Vec::is_empty) {
                    return Err(Error::Invalid(format!("item {}: empty candidate", self.id)));
                }
                Ok(())
            }
            (Answer::Word { .. }, Task::FrameQa) => Ok(()),
            (a, t) => Err(Error::Invalid(format!("item {}: task {t} cannot carry answer {a:?}", self.id))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Hidden size `D` of every LSTM layer; combined states have `2D` entries.
    pub hidden: usize,
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub frame_channels: usize,
    pub clip_channels: usize,
    pub grid: usize,
    pub dropout: f64,
    /// Text tokens, excluding the `<unk>` and `<boa>` specials.
    pub tokens: Vec<String>,
    /// Output classes of the word decoder.
    pub answers: Vec<String>,
}

impl ModelConfig {
    pub fn video_input_dim(&self) -> usize {
        match self.variant {
            Variant::Resnet => self.frame_channels,
            Variant::C3d => self.clip_channels,
            _ => self.frame_channels + self.clip_channels,
        }
    }

    pub fn combined(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("attention_hidden", self.attention_hidden),
            ("frame_channels", self.frame_channels),
            ("clip_channels", self.clip_channels),
            ("grid", self.grid),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Every learnable weight of one variant.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub store: ParamStore,
    pub video: DualLstm,
    pub text: DualLstm,
    pub embedding: Embedding,
    pub spatial: Option<AttentionMlp>,
    pub temporal: Option<AttentionMlp>,
    /// `W_α`, `[2D, 2D]`.
    pub temporal_proj: Option<ParamId>,
    /// Multiple-choice scorer `W_s` (no bias).
    pub choice: Linear,
    /// Count regressor `W_s`, `b_s`.
    pub count: Linear,
    /// Word classifier `W_o`, `b_o`.
    pub word: Linear,
}

impl ModelParams {
    pub fn declare(config: &ModelConfig, vocab_rows: usize, answers: usize, rng: &mut impl rand::Rng) -> Self {
        let mut store = ParamStore::new();
        let d = config.hidden;
        let two_d = config.combined();
        let video = DualLstm::declare(&mut store, "video_lstm", config.video_input_dim(), d, rng);
        let text = DualLstm::declare(&mut store, "text_lstm", config.embed_dim, d, rng);
        let embedding = Embedding::declare(&mut store, "embedding", vocab_rows, config.embed_dim, rng);
        let spatial = config.variant.uses_spatial().then(|| {
            let key = config.frame_channels + config.clip_channels;
            AttentionMlp::declare(&mut store, "spatial_att", two_d, key, config.attention_hidden, rng)
        });
        let temporal = config
            .variant
            .uses_temporal()
            .then(|| AttentionMlp::declare(&mut store, "temporal_att", two_d, two_d, config.attention_hidden, rng));
        let temporal_proj = config.variant.uses_temporal().then(|| {
            store.declare("temporal_att.proj", &[two_d, two_d], Init::Normal(crate::nn::DENSE_INIT_SIGMA), rng)
        });
        let choice = Linear::declare(&mut store, "choice", two_d, 1, false, rng);
        let count = Linear::declare(&mut store, "count", two_d, 1, true, rng);
        let word = Linear::declare(&mut store, "word", two_d, answers, true, rng);
        Self { store, video, text, embedding, spatial, temporal, temporal_proj, choice, count, word }
    }
}

impl ModelParams {
    /// Parameter tensors grouped by the field that owns them; fields absent
    /// from this variant are skipped.
    pub fn fields(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut out = vec![
            ("video", self.video.param_ids()),
            ("text", self.text.param_ids()),
            ("embedding", vec![self.embedding.table]),
        ];
        if let Some(a) = &self.spatial {
            out.push(("spatial", a.param_ids()));
        }
        if let Some(a) = &self.temporal {
            out.push(("temporal", a.param_ids()));
        }
        if let Some(p) = self.temporal_proj {
            out.push(("temporal_proj", vec![p]));
        }
        out.push(("choice", self.choice.param_ids()));
        out.push(("count", self.count.param_ids()));
        out.push(("word", self.word.param_ids()));
        out
    }
}

/// Output of [`Model::encode_video`].
pub struct VideoEncoding {
    pub states: Vec<Var>,
    pub last: DualState,
    /// One `[1, G·G]` mask per step for spatial variants, empty otherwise.
    pub spatial_masks: Vec<Var>,
}

/// Output of [`Model::encode_text`].
pub struct TextEncoding {
    pub question: DualState,
    /// Combined final question state `h_N^q`, `[1, 2D]`.
    pub question_state: Var,
    /// Combined final answer state `h_M^a` when an answer was encoded.
    pub answer_state: Option<Var>,
}

/// Decoder outputs of one forward pass, still in the graph.
pub enum Head {
    Count(Var),
    Choice(Vec<Var>),
    Word(Var),
}

pub struct Outputs {
    pub head: Head,
    pub spatial_masks: Vec<Var>,
    pub temporal_mask: Option<Var>,
}

/// A decoded answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prediction {
    Count { value: f64 },
    Choice { scores: Vec<f64>, index: usize },
    Word { distribution: Vec<f64>, index: usize, word: String },
}

impl Prediction {
    /// Whether this prediction answers `item` correctly (count: the readable
    /// integer equals the label).
    pub fn is_correct(&self, answer: &Answer) -> bool {
        match (self, answer) {
            (Prediction::Count { value }, Answer::Count { label }) => readable_count(*value) == *label,
            (Prediction::Choice { index, .. }, Answer::Choice { gold, .. }) => index == gold,
            (Prediction::Word { word, .. }, Answer::Word { word: gold }) => word == gold,
            _ => false,
        }
    }
}

/// Nearest integer clamped to the label range.
pub fn readable_count(value: f64) -> u8 {
    value.round().clamp(0.0, MAX_COUNT as f64) as u8
}

/// Index of the maximum, ties resolved to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Vocab,
    pub answers: AnswerVocab,
}

impl Model {
    /// Fresh parameters drawn from the `model/init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(&config.tokens);
        let answers = AnswerVocab::new(&config.answers);
        let mut rng = rng::stream(seed, "model/init");
        let params = ModelParams::declare(&config, vocab.len(), answers.len(), &mut rng);
        Ok(Self { config, params, vocab, answers })
    }

    /// A model with `config`'s layout whose parameters are replaced by `store`.
    pub fn with_params(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.store.load_from(store)?;
        Ok(m)
    }

    pub fn store(&self) -> &ParamStore {
        &self.params.store
    }

    fn check_features(&self, f: &VideoFeatures) -> Result<()> {
        let c = &self.config;
        if f.frame_channels() != c.frame_channels || f.clip_channels() != c.clip_channels {
            return Err(Error::Shape(format!(
                "features have {}+{} channels, model expects {}+{}",
                f.frame_channels(),
                f.clip_channels(),
                c.frame_channels,
                c.clip_channels
            )));
        }
        if c.variant.uses_spatial() && f.grid != c.grid {
            return Err(Error::Shape(format!("features have a {0}x{0} grid, model expects {1}x{1}", f.grid, c.grid)));
        }
        Ok(())
    }

    fn embed(&self, ctx: &mut Ctx<'_>, tokens: &[String]) -> Result<Vec<Var>> {
        tokens.iter().map(|t| self.params.embedding.lookup(ctx, self.vocab.id(t))).collect()
    }

    /// Runs the video encoder. `question` is required for spatial variants.
    pub fn encode_video(
        &self,
        ctx: &mut Ctx<'_>,
        features: &VideoFeatures,
        question: Option<&[String]>,
    ) -> Result<VideoEncoding> {
        self.check_features(features)?;
        let c = &self.config;
        let mut spatial_masks = Vec::new();
        let mut inputs = Vec::with_capacity(features.steps());
        if c.variant.uses_spatial() {
            let question = question.ok_or_else(|| Error::Invalid("spatial attention needs the question".into()))?;
            let zero = DualState::zeros(&mut ctx.graph, c.hidden);
            let tokens = self.embed(ctx, question)?;
            let prepass = self.params.text.encode(ctx, &tokens, zero)?;
            let text_state = *prepass.states.last().expect("non-empty question");
            for t in 0..features.steps() {
                let cells = cell_features(features, t)?;
                let (attended, mask) = self.spatial_attend(ctx, text_state, &cells)?;
                inputs.push(attended);
                spatial_masks.push(mask);
            }
        } else {
            for t in 0..features.steps() {
                let x = match c.variant {
                    Variant::Text => Tensor::zeros(&[1, c.video_input_dim()]),
                    Variant::Resnet => features.frame_pooled[t].clone(),
                    Variant::C3d => features.clip_pooled[t].clone(),
                    _ => concat_rows(&features.clip_pooled[t], &features.frame_pooled[t]),
                };
                inputs.push(ctx.graph.constant(x));
            }
        }
        let zero = DualState::zeros(&mut ctx.graph, c.hidden);
        let enc = self.params.video.encode(ctx, &inputs, zero)?;
        Ok(VideoEncoding { states: enc.states, last: enc.last, spatial_masks })
    }

    /// Attends over the `[G·G, C]` cell features of one step; returns the
    /// `[1, C]` attended vector and the `[1, G·G]` mask.
    pub fn spatial_attend(&self, ctx: &mut Ctx<'_>, text_state: Var, cells: &Tensor) -> Result<(Var, Var)> {
        let att =
            self.params.spatial.as_ref().ok_or_else(|| Error::Invalid("variant has no spatial attention".into()))?;
        let keys = ctx.graph.constant(cells.clone());
        let mask = att.weights(ctx, text_state, keys)?;
        let attended = ctx.graph.matmul(mask, keys)?;
        Ok((attended, mask))
    }

    /// Encodes the question from `init`, then the optional answer (with a
    /// `<boa>` prefix) from the final question state.
    pub fn encode_text(
        &self,
        ctx: &mut Ctx<'_>,
        question: &[String],
        answer: Option<&[String]>,
        init: DualState,
    ) -> Result<TextEncoding> {
        if question.is_empty() {
            return Err(Error::Invalid("empty question".into()));
        }
        let tokens = self.embed(ctx, question)?;
        let q = self.params.text.encode(ctx, &tokens, init)?;
        let question_state = *q.states.last().expect("non-empty");
        let answer_state = match answer {
            Some(a) => Some(self.encode_answer(ctx, a, q.last)?),
            None => None,
        };
        Ok(TextEncoding { question: q.last, question_state, answer_state })
    }

    /// `<boa>` followed by `answer`, encoded from `init`; returns `h_M^a`.
    pub fn encode_answer(&self, ctx: &mut Ctx<'_>, answer: &[String], init: DualState) -> Result<Var> {
        let mut tokens = vec![self.params.embedding.lookup(ctx, self.vocab.boa())?];
        tokens.extend(self.embed(ctx, answer)?);
        let a = self.params.text.encode(ctx, &tokens, init)?;
        Ok(*a.states.last().expect("non-empty"))
    }

    /// `tanh(α · H_v · W_α) ⊕ query` with `α` the attention of `query` over
    /// the video states. Returns the fused `[1, 2D]` vector and the `[1, T]`
    /// mask.
    pub fn temporal_attend(&self, ctx: &mut Ctx<'_>, query: Var, video_states: &[Var]) -> Result<(Var, Var)> {
        let att =
            self.params.temporal.as_ref().ok_or_else(|| Error::Invalid("variant has no temporal attention".into()))?;
        let proj = self.params.temporal_proj.expect("declared with temporal attention");
        if video_states.is_empty() {
            return Err(Error::Invalid("temporal attention over an empty state sequence".into()));
        }
        let keys = ctx.graph.concat(video_states, 0)?;
        let mask = att.weights(ctx, query, keys)?;
        let w = ctx.param(proj);
        let g = &mut ctx.graph;
        let pooled = g.matmul(mask, keys)?;
        let projected = g.matmul(pooled, w)?;
        let signal = g.tanh(projected)?;
        let fused = g.add(signal, query)?;
        Ok((fused, mask))
    }

    /// Multiple-choice score `W_sᵀ h`.
    pub fn decode_choice(&self, ctx: &mut Ctx<'_>, h: Var) -> Result<Var> {
        self.params.choice.forward(ctx, h)
    }

    /// Count regression `W_sᵀ h + b_s`.
    pub fn decode_count(&self, ctx: &mut Ctx<'_>, h: Var) -> Result<Var> {
        self.params.count.forward(ctx, h)
    }

    /// Word logits `W_oᵀ h + b_o`; the distribution is their softmax.
    pub fn decode_word_logits(&self, ctx: &mut Ctx<'_>, h: Var) -> Result<Var> {
        self.params.word.forward(ctx, h)
    }

    /// Builds the full forward graph for `item`.
    pub fn run(&self, ctx: &mut Ctx<'_>, item: &QaItem, features: &VideoFeatures) -> Result<Outputs> {
        item.validate()?;
        let c = &self.config;
        let video = self.encode_video(ctx, features, Some(&item.question))?;
        let text = self.encode_text(ctx, &item.question, None, video.last)?;

        let (query, temporal_mask) = if c.variant.uses_temporal() {
            let (fused, mask) = self.temporal_attend(ctx, text.question_state, &video.states)?;
            (fused, Some(mask))
        } else {
            (text.question_state, None)
        };
        // Answer encoding starts from the question state, with its hidden
        // halves replaced by the fused vector under temporal attention.
        let answer_init = if c.variant.uses_temporal() {
            text.question.with_combined(&mut ctx.graph, query, c.hidden)?
        } else {
            text.question
        };

        let head = match &item.answer {
            Answer::Word { .. } => Head::Word(self.decode_word_logits(ctx, query)?),
            Answer::Count { .. } => {
                let h = self.encode_answer(ctx, &[], answer_init)?;
                Head::Count(self.decode_count(ctx, h)?)
            }
            Answer::Choice { candidates, .. } => {
                let mut scores = Vec::with_capacity(candidates.len());
                for cand in candidates {
                    let h = self.encode_answer(ctx, cand, answer_init)?;
                    scores.push(self.decode_choice(ctx, h)?);
                }
                Head::Choice(scores)
            }
        };
        Ok(Outputs { head, spatial_masks: video.spatial_masks, temporal_mask })
    }

    /// Reads a decoded answer out of a finished graph.
    pub fn read_prediction(&self, ctx: &mut Ctx<'_>, head: &Head) -> Result<Prediction> {
        Ok(match head {
            Head::Count(v) => Prediction::Count { value: ctx.graph.value(*v).item() },
            Head::Choice(vs) => {
                let scores: Vec<f64> = vs.iter().map(|v| ctx.graph.value(*v).item()).collect();
                let index = argmax(&scores);
                Prediction::Choice { scores, index }
            }
            Head::Word(logits) => {
                let dist = ctx.graph.softmax(*logits)?;
                let distribution = ctx.graph.value(dist).data().to_vec();
                let index = argmax(&distribution);
                Prediction::Word { word: self.answers.word(index).to_string(), distribution, index }
            }
        })
    }

    /// Inference-mode prediction.
    pub fn predict(&self, item: &QaItem, features: &VideoFeatures) -> Result<Prediction> {
        Ok(self.predict_traced(item, features)?.0)
    }

    /// Prediction together with the attention masks it used.
    pub fn predict_traced(&self, item: &QaItem, features: &VideoFeatures) -> Result<(Prediction, AttentionTrace)> {
        let mut ctx = Ctx::inference(&self.params.store);
        let out = self.run(&mut ctx, item, features)?;
        let pred = self.read_prediction(&mut ctx, &out.head)?;
        let trace = AttentionTrace {
            spatial: out.spatial_masks.iter().map(|m| ctx.graph.value(*m).data().to_vec()).collect(),
            temporal: out.temporal_mask.map(|m| ctx.graph.value(m).data().to_vec()),
        };
        Ok((pred, trace))
    }
}

/// Attention masks of one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub spatial: Vec<Vec<f64>>,
    pub temporal: Option<Vec<f64>>,
}

/// `[G·G, C_s + C_f]` cell features of step `t`, clip channels first.
pub fn cell_features(features: &VideoFeatures, t: usize) -> Result<Tensor> {
    let clip = &features.clip_grid[t];
    let frame = &features.frame_grid[t];
    let (cells, cs) = (clip.shape()[0], clip.shape()[1]);
    let cf = frame.shape()[1];
    let mut data = Vec::with_capacity(cells * (cs + cf));
    for i in 0..cells {
        data.extend_from_slice(&clip.data()[i * cs..(i + 1) * cs]);
        data.extend_from_slice(&frame.data()[i * cf..(i + 1) * cf]);
    }
    Tensor::new(&[cells, cs + cf], data)
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut v = a.data().to_vec();
    v.extend_from_slice(b.data());
    Tensor::row(&v)
}

/// Candidate answer tokens with the begin-of-answer marker, as the answer
/// encoder sees them.
pub fn with_boa(answer: &[String]) -> Vec<String> {
    std::iter::once(BOA.to_string()).chain(answer.iter().cloned()).collect()
}
