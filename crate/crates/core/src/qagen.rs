//! Template questions and multiple-choice distractors over a phrase corpus.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Answer, QaItem, Task, NUM_CHOICES};
use crate::rng;
use crate::vocab::tokenize;

/// Distractors per multiple-choice item.
pub const NUM_DISTRACTORS: usize = NUM_CHOICES - 1;

/// One verb phrase of the corpus and the clip it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseRecord {
    pub episode_id: String,
    pub subject: String,
    pub verb: String,
    #[serde(default)]
    pub object: String,
    pub phrase: String,
}

impl PhraseRecord {
    pub fn new(episode_id: &str, subject: &str, verb: &str, object: &str) -> Self {
        let phrase = if object.is_empty() { verb.to_string() } else { format!("{verb} {object}") };
        Self {
            episode_id: episode_id.into(),
            subject: subject.into(),
            verb: verb.into(),
            object: object.into(),
            phrase,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.verb.trim().is_empty() || self.phrase.trim().is_empty() {
            return Err(Error::Invalid(format!(
                "phrase record from `{}` has an empty verb or phrase",
                self.episode_id
            )));
        }
        Ok(())
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<PhraseRecord>> {
    let records: Vec<PhraseRecord> = crate::jsonl::read(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
    }
    Ok(records)
}

/// Question templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Count,
    Action,
    TransitionBefore,
    TransitionAfter,
    FrameColor,
}

impl TemplateKind {
    pub fn task(self) -> Task {
        match self {
            TemplateKind::Count => Task::Count,
            TemplateKind::Action => Task::Action,
            TemplateKind::TransitionBefore | TemplateKind::TransitionAfter => Task::Transition,
            TemplateKind::FrameColor => Task::FrameQa,
        }
    }
}

/// Template slot values; which ones are required depends on the template.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Slots {
    pub subject: Option<String>,
    pub verb: Option<String>,
    /// May be empty for intransitive verbs.
    pub object: String,
    pub repeat: Option<u8>,
    pub previous: Option<String>,
    pub next: Option<String>,
    pub attribute: Option<String>,
}

fn need<'a>(slot: &'a Option<String>, name: &str, kind: TemplateKind) -> Result<&'a str> {
    match slot.as_deref() {
        Some(s) if !s.trim().is_empty() => Ok(s),
        _ => Err(Error::Invalid(format!("template {kind:?} needs the `{name}` slot"))),
    }
}

fn join(words: &[&str]) -> String {
    words.iter().filter(|w| !w.is_empty()).copied().collect::<Vec<_>>().join(" ")
}

/// Fills `kind` with `slots`; returns `(question, answer)`.
pub fn instantiate_template(kind: TemplateKind, slots: &Slots) -> Result<(String, String)> {
    let sub = need(&slots.subject, "subject", kind)?;
    if sub.split_whitespace().count() != 1 {
        return Err(Error::Invalid(format!("subject `{sub}` must be a single word")));
    }
    Ok(match kind {
        TemplateKind::Count => {
            let verb = need(&slots.verb, "verb", kind)?;
            let repeat = slots.repeat.ok_or_else(|| Error::Invalid("template Count needs the `repeat` slot".into()))?;
            (join(&["How many times does the", sub, verb, &slots.object, "?"]), repeat.to_string())
        }
        TemplateKind::Action => {
            let verb = need(&slots.verb, "verb", kind)?;
            let repeat =
                slots.repeat.ok_or_else(|| Error::Invalid("template Action needs the `repeat` slot".into()))?;
            (format!("What does the {sub} do {repeat} times ?"), join(&[verb, &slots.object]))
        }
        TemplateKind::TransitionBefore => {
            let prev = need(&slots.previous, "previous", kind)?;
            let next = need(&slots.next, "next", kind)?;
            (format!("What does the {sub} do before {next} ?"), prev.to_string())
        }
        TemplateKind::TransitionAfter => {
            let prev = need(&slots.previous, "previous", kind)?;
            let next = need(&slots.next, "next", kind)?;
            (format!("What does the {sub} do after {prev} ?"), next.to_string())
        }
        TemplateKind::FrameColor => {
            let attr = need(&slots.attribute, "attribute", kind)?;
            (format!("What color is the {sub} ?"), attr.to_string())
        }
    })
}

/// Recovers the template and slots from a question/answer pair produced by
/// [`instantiate_template`].
pub fn parse_template(question: &str, answer: &str) -> Option<(TemplateKind, Slots)> {
    let w: Vec<&str> = question.split_whitespace().collect();
    let some = |s: &str| Some(s.to_string());
    if w.last() != Some(&"?") {
        return None;
    }
    let body = &w[..w.len() - 1];
    match body {
        ["How", "many", "times", "does", "the", sub, verb, object @ ..] => Some((
            TemplateKind::Count,
            Slots {
                subject: some(sub),
                verb: some(verb),
                object: object.join(" "),
                repeat: answer.parse().ok(),
                ..Slots::default()
            },
        )),
        ["What", "does", "the", sub, "do", n, "times"] => {
            let mut a = answer.split_whitespace();
            let verb = a.next()?;
            Some((
                TemplateKind::Action,
                Slots {
                    subject: some(sub),
                    verb: some(verb),
                    object: a.collect::<Vec<_>>().join(" "),
                    repeat: n.parse().ok(),
                    ..Slots::default()
                },
            ))
        }
        ["What", "does", "the", sub, "do", "before", rest @ ..] => Some((
            TemplateKind::TransitionBefore,
            Slots { subject: some(sub), previous: some(answer), next: Some(rest.join(" ")), ..Slots::default() },
        )),
        ["What", "does", "the", sub, "do", "after", rest @ ..] => Some((
            TemplateKind::TransitionAfter,
            Slots { subject: some(sub), previous: Some(rest.join(" ")), next: some(answer), ..Slots::default() },
        )),
        ["What", "color", "is", "the", sub] => {
            Some((TemplateKind::FrameColor, Slots { subject: some(sub), attribute: some(answer), ..Slots::default() }))
        }
        _ => None,
    }
}

/// Word and phrase vectors of a fixed dimension.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn word(&self, word: &str) -> Vec<f64>;
    /// Defaults to the mean of the token vectors.
    fn phrase(&self, phrase: &str) -> Vec<f64> {
        let tokens = tokenize(phrase);
        let mut acc = vec![0.0; self.dim()];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.word(t)) {
                *a += v;
            }
        }
        let n = tokens.len().max(1) as f64;
        nonzero(acc.into_iter().map(|v| v / n).collect(), phrase)
    }
}

/// Replaces a zero vector with a tiny deterministic one keyed by `key`.
pub fn nonzero(v: Vec<f64>, key: &str) -> Vec<f64> {
    if v.iter().any(|x| *x != 0.0) {
        return v;
    }
    let mut r = rng::stream(0, &format!("embedding/zero/{key}"));
    (0..v.len()).map(|_| 1e-9 * r.sample::<f64, _>(StandardNormal)).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Deterministic pseudo-embeddings: each word gets a standard normal vector
/// seeded by the word itself.
#[derive(Clone, Debug)]
pub struct HashEmbedding {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedding {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl EmbeddingProvider for HashEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn word(&self, word: &str) -> Vec<f64> {
        let mut r = rng::stream(self.seed, &format!("embedding/word/{word}"));
        (0..self.dim).map(|_| StandardNormal.sample(&mut r)).collect()
    }
}

/// Word vectors loaded from `token v1 ... vn` text; unknown words fall back
/// to a [`HashEmbedding`] of the same dimension.
#[derive(Clone, Debug)]
pub struct MapEmbedding {
    dim: usize,
    words: HashMap<String, Vec<f64>>,
    fallback: HashEmbedding,
}

impl MapEmbedding {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut words = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let fail = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
            let v: Vec<f64> =
                parts.map(|p| p.parse::<f64>().map_err(|e| fail(format!("`{p}`: {e}")))).collect::<Result<_>>()?;
            if v.is_empty() {
                return Err(fail(format!("token `{token}` has no vector")));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => return Err(fail(format!("expected {d} values, found {}", v.len()))),
                _ => {}
            }
            words.insert(token.to_lowercase(), nonzero(v, token));
        }
        let dim =
            dim.ok_or_else(|| Error::Parse { path: path.to_path_buf(), line: 0, message: "no vectors".into() })?;
        Ok(Self { dim, words, fallback: HashEmbedding::new(dim, 0) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The loaded vector of `word`, if any.
    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.words.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl EmbeddingProvider for MapEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn word(&self, word: &str) -> Vec<f64> {
        match self.words.get(&word.to_lowercase()) {
            Some(v) => v.clone(),
            None => self.fallback.word(word),
        }
    }
}

/// Linearly interpolated percentile `q ∈ [0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Similarity of each (sorted, de-duplicated) vocabulary verb to `answer`
/// and the median of those similarities.
pub fn verb_similarities(
    answer: &str,
    vocab: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<(Vec<(String, f64)>, f64)> {
    let verbs: BTreeSet<&str> = vocab.iter().map(String::as_str).collect();
    if verbs.is_empty() {
        return Err(Error::DistractorShortfall { needed: NUM_DISTRACTORS, found: 0 });
    }
    let a = nonzero(provider.word(answer), answer);
    let sims: Vec<(String, f64)> =
        verbs.into_iter().map(|v| (v.to_string(), cosine(&a, &nonzero(provider.word(v), v)))).collect();
    let threshold = percentile(&sims.iter().map(|s| s.1).collect::<Vec<_>>(), 50.0);
    Ok((sims, threshold))
}

/// Greedy diverse distractor verbs: candidates must be strictly less similar
/// to `answer` than the median vocabulary similarity; the first pick is the
/// least similar to `answer`, each later pick the one with the lowest mean
/// similarity to those already picked. Ties go to the lexicographically
/// smaller verb.
pub fn select_distractor_verbs(
    answer: &str,
    vocab: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<String>> {
    let (sims, threshold) = verb_similarities(answer, vocab, provider)?;
    let eligible: Vec<(String, f64)> = sims.into_iter().filter(|(v, s)| *s < threshold && v != answer).collect();
    if eligible.len() < NUM_DISTRACTORS {
        return Err(Error::DistractorShortfall { needed: NUM_DISTRACTORS, found: eligible.len() });
    }
    let vectors: Vec<Vec<f64>> = eligible.iter().map(|(v, _)| nonzero(provider.word(v), v)).collect();
    let mut picked: Vec<usize> = Vec::with_capacity(NUM_DISTRACTORS);
    while picked.len() < NUM_DISTRACTORS {
        let mut best: Option<(f64, usize)> = None;
        for i in (0..eligible.len()).filter(|i| !picked.contains(i)) {
            let score = if picked.is_empty() {
                eligible[i].1
            } else {
                picked.iter().map(|&j| cosine(&vectors[i], &vectors[j])).sum::<f64>() / picked.len() as f64
            };
            // `eligible` is sorted, so strict `<` keeps the smaller verb on ties.
            if best.is_none_or(|(b, _)| score < b) {
                best = Some((score, i));
            }
        }
        picked.push(best.expect("enough eligible verbs").1);
    }
    Ok(picked.into_iter().map(|i| eligible[i].0.clone()).collect())
}

/// For each verb, the corpus phrase using it that is most similar to
/// `anchor`. Ties go to the lexicographically smaller phrase.
pub fn select_candidate_phrases(
    verbs: &[String],
    corpus: &[PhraseRecord],
    provider: &dyn EmbeddingProvider,
    anchor: &str,
) -> Result<Vec<String>> {
    let a = provider.phrase(anchor);
    verbs
        .iter()
        .map(|verb| {
            let phrases: BTreeSet<&str> =
                corpus.iter().filter(|r| &r.verb == verb).map(|r| r.phrase.as_str()).collect();
            let mut best: Option<(f64, &str)> = None;
            for p in phrases {
                let s = cosine(&a, &provider.phrase(p));
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, p));
                }
            }
            best.map(|(_, p)| p.to_string())
                .ok_or_else(|| Error::Invalid(format!("no corpus phrase uses the verb `{verb}`")))
        })
        .collect()
}

fn normalized(s: &str) -> String {
    tokenize(s).join(" ")
}

/// Places `gold` among the distractors at a uniformly random position.
pub fn multiple_choice(gold: &str, distractors: &[String], rng: &mut impl Rng) -> Result<Answer> {
    if distractors.len() != NUM_DISTRACTORS {
        return Err(Error::Invalid(format!("need {NUM_DISTRACTORS} distractors, got {}", distractors.len())));
    }
    let g = normalized(gold);
    if let Some(d) = distractors.iter().find(|d| normalized(d) == g) {
        return Err(Error::Invalid(format!("distractor `{d}` repeats the gold answer")));
    }
    let position = rng.random_range(0..NUM_CHOICES);
    let mut candidates: Vec<Vec<String>> = distractors.iter().map(|d| tokenize(d)).collect();
    candidates.insert(position, tokenize(gold));
    Ok(Answer::Choice { candidates, gold: position })
}

/// Pairs every non-repeating episode with a count question drawn uniformly
/// from `question_pool`; all labels are 0.
pub fn make_zero_count_items(
    question_pool: &[Vec<String>],
    episode_ids: &[String],
    rng: &mut impl Rng,
) -> Result<Vec<QaItem>> {
    if question_pool.is_empty() || episode_ids.is_empty() {
        return Err(Error::Invalid("zero-count items need a non-empty question pool and episode list".into()));
    }
    Ok(episode_ids
        .iter()
        .map(|ep| QaItem {
            id: format!("{ep}/count"),
            episode_id: ep.clone(),
            task: Task::Count,
            question: question_pool[rng.random_range(0..question_pool.len())].clone(),
            answer: Answer::Count { label: 0 },
        })
        .collect())
}
