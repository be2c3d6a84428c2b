//! Metrics, prediction dumps and ablation tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Answer, Model, Prediction, QaItem, Task, Variant, VideoFeatures};
use crate::train::Sample;

/// `100 · #(pred = gold) / N`.
pub fn accuracy<T: PartialEq>(predictions: &[T], golds: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), golds.len())?;
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / golds.len() as f64)
}

/// Mean of `(pred − gold)²`.
pub fn mean_l2(predictions: &[f64], golds: &[u8]) -> Result<f64> {
    check_lengths(predictions.len(), golds.len())?;
    Ok(predictions.iter().zip(golds).map(|(p, g)| (p - *g as f64).powi(2)).sum::<f64>() / golds.len() as f64)
}

/// `100 · 1/N Σᵢ 1/Mᵢ Σⱼ 𝟙[y_ij = y*_i]` over videos `i` with `Mᵢ` per-frame
/// predictions each.
pub fn avg_frame_accuracy<T: PartialEq>(per_frame: &[Vec<T>], golds: &[T]) -> Result<f64> {
    check_lengths(per_frame.len(), golds.len())?;
    let mut total = 0.0;
    for (i, (frames, gold)) in per_frame.iter().zip(golds).enumerate() {
        if frames.is_empty() {
            return Err(Error::Invalid(format!("video {i} has no per-frame predictions")));
        }
        total += frames.iter().filter(|p| *p == gold).count() as f64 / frames.len() as f64;
    }
    Ok(100.0 * total / golds.len() as f64)
}

fn check_lengths(p: usize, g: usize) -> Result<()> {
    if p != g {
        return Err(Error::Invalid(format!("{p} predictions for {g} gold answers")));
    }
    if g == 0 {
        return Err(Error::Invalid("no items to score".into()));
    }
    Ok(())
}

/// How video features reach the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// The full step sequence.
    #[default]
    Full,
    /// Features averaged over all steps, given as a single step.
    Aggr,
    /// Every step answered on its own; scored by [`avg_frame_accuracy`].
    Avg,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Protocol::Full),
            "aggr" => Ok(Protocol::Aggr),
            "avg" => Ok(Protocol::Avg),
            _ => Err(Error::Config(format!("unknown protocol `{s}` (expected full, aggr or avg)"))),
        }
    }
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub item_id: String,
    pub task: Task,
    pub variant: Variant,
    pub prediction: Prediction,
    /// Per-frame predictions under the `avg` protocol.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_frame: Vec<Prediction>,
    pub gold: Answer,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.prediction.is_correct(&self.gold)
    }
}

/// Runs `model` over `samples`.
pub fn predict_all(model: &Model, samples: &[Sample<'_>], protocol: Protocol) -> Result<Vec<PredictionRecord>> {
    let one = |s: &Sample<'_>| -> Result<PredictionRecord> {
        let (prediction, per_frame) = match protocol {
            Protocol::Full => (model.predict(s.item, s.features)?, Vec::new()),
            Protocol::Aggr => (model.predict(s.item, &s.features.aggregate())?, Vec::new()),
            Protocol::Avg => {
                let frames: Vec<Prediction> = (0..s.features.steps())
                    .map(|t| model.predict(s.item, &s.features.frame(t)))
                    .collect::<Result<_>>()?;
                (frames[0].clone(), frames)
            }
        };
        Ok(PredictionRecord {
            item_id: s.item.id.clone(),
            task: s.item.task,
            variant: model.config.variant,
            prediction,
            per_frame,
            gold: s.item.answer.clone(),
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        samples.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    samples.iter().map(one).collect()
}

/// Metric of one task: mean squared error for counting, accuracy otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: Task,
    pub value: f64,
    pub items: usize,
}

/// Per-task metrics of a prediction dump.
pub fn task_metrics(records: &[PredictionRecord]) -> Result<Vec<TaskMetric>> {
    let mut by_task: BTreeMap<Task, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task).or_default().push(r);
    }
    by_task
        .into_iter()
        .map(|(task, rs)| {
            let value = if task == Task::Count {
                let mut preds = Vec::with_capacity(rs.len());
                let mut golds = Vec::with_capacity(rs.len());
                for r in &rs {
                    match (&r.prediction, &r.gold) {
                        (Prediction::Count { value }, Answer::Count { label }) => {
                            preds.push(*value);
                            golds.push(*label);
                        }
                        _ => return Err(Error::Invalid(format!("count record {} is not a count", r.item_id))),
                    }
                }
                mean_l2(&preds, &golds)?
            } else if rs.iter().all(|r| !r.per_frame.is_empty()) {
                let per_frame: Vec<Vec<bool>> =
                    rs.iter().map(|r| r.per_frame.iter().map(|p| p.is_correct(&r.gold)).collect()).collect();
                avg_frame_accuracy(&per_frame, &vec![true; rs.len()])?
            } else {
                let hits: Vec<bool> = rs.iter().map(|r| r.correct()).collect();
                accuracy(&hits, &vec![true; rs.len()])?
            };
            Ok(TaskMetric { task, value, items: rs.len() })
        })
        .collect()
}

/// Metric of `task` for `model` on the samples of that task.
pub fn evaluate_task(model: &Model, samples: &[Sample<'_>], task: Task, protocol: Protocol) -> Result<TaskMetric> {
    let subset: Vec<Sample<'_>> = samples.iter().copied().filter(|s| s.item.task == task).collect();
    if subset.is_empty() {
        return Err(Error::Invalid(format!("no {task} items to evaluate")));
    }
    let records = predict_all(model, &subset, protocol)?;
    Ok(task_metrics(&records)?.remove(0))
}

/// One `(variant, task)` cell aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub variant: Variant,
    pub task: Task,
    pub mean: f64,
    pub stdev: f64,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub items: usize,
}

impl ReportCell {
    pub fn from_values(variant: Variant, task: Task, seeds: &[u64], values: Vec<f64>, items: usize) -> Result<Self> {
        if values.is_empty() || values.len() != seeds.len() {
            return Err(Error::Invalid(format!("{} values for {} seeds", values.len(), seeds.len())));
        }
        for v in &values {
            let ok = if task == Task::Count { *v >= 0.0 } else { (0.0..=100.0).contains(v) };
            if !ok {
                return Err(Error::Invalid(format!("metric {v} out of range for {task}")));
            }
        }
        let (mean, stdev) = mean_stdev(&values);
        Ok(Self { variant, task, mean, stdev, values, seeds: seeds.to_vec(), items })
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<ReportCell>,
    pub seeds: Vec<u64>,
}

pub const TASK_ORDER: [Task; 4] = Task::ALL;

fn task_header(t: Task) -> &'static str {
    match t {
        Task::Count => "Count (l2)",
        Task::Action => "Action",
        Task::Transition => "Trans.",
        Task::FrameQa => "FrameQA",
    }
}

impl EvalReport {
    pub fn cell(&self, variant: Variant, task: Task) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.variant == variant && c.task == task)
    }

    /// Variants present, in declaration order.
    pub fn variants(&self) -> Vec<Variant> {
        Variant::ALL.into_iter().filter(|v| self.cells.iter().any(|c| c.variant == *v)).collect()
    }

    pub fn tasks(&self) -> Vec<Task> {
        TASK_ORDER.into_iter().filter(|t| self.cells.iter().any(|c| c.task == *t)).collect()
    }

    /// Aligned plain-text table; rows follow the declared variant order.
    pub fn render_table(&self) -> String {
        let tasks = self.tasks();
        let mut rows = vec![std::iter::once("Model".to_string())
            .chain(tasks.iter().map(|t| task_header(*t).to_string()))
            .collect::<Vec<_>>()];
        for v in self.variants() {
            let mut row = vec![v.label().to_string()];
            for t in &tasks {
                row.push(match self.cell(v, *t) {
                    Some(c) if c.values.len() > 1 => format!("{:.2} ± {:.2}", c.mean, c.stdev),
                    Some(c) => format!("{:.2}", c.mean),
                    None => "-".to_string(),
                });
            }
            rows.push(row);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let pad = widths[j] - s.chars().count();
                    if j == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        if !self.seeds.is_empty() {
            let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!("seeds: {}\n", seeds.join(", ")));
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        crate::jsonl::to_string(&self.cells)
    }
}

/// Runs `cell` for every requested variant, task and seed; `cell` returns
/// the metric and the number of evaluated items.
pub fn ablation_report(
    variants: &[Variant],
    tasks: &[Task],
    seeds: &[u64],
    mut cell: impl FnMut(Variant, Task, u64) -> Result<(f64, usize)>,
) -> Result<EvalReport> {
    if variants.is_empty() || tasks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant, task and seed".into()));
    }
    let mut ordered: Vec<Variant> = Variant::ALL.into_iter().filter(|v| variants.contains(v)).collect();
    ordered.dedup();
    let mut cells = Vec::new();
    for v in ordered {
        for t in TASK_ORDER.into_iter().filter(|t| tasks.contains(t)) {
            let mut values = Vec::with_capacity(seeds.len());
            let mut items = 0;
            for &s in seeds {
                let (m, n) = cell(v, t, s)?;
                values.push(m);
                items = n;
            }
            cells.push(ReportCell::from_values(v, t, seeds, values, items)?);
        }
    }
    Ok(EvalReport { cells, seeds: seeds.to_vec() })
}

/// Features as the protocol presents them (the `avg` protocol is handled per
/// step by [`predict_all`]).
pub fn protocol_features(f: &VideoFeatures, protocol: Protocol) -> VideoFeatures {
    match protocol {
        Protocol::Aggr => f.aggregate(),
        _ => f.clone(),
    }
}

/// Uniform random multiple-choice guesses, for calibrating chance level.
pub fn random_choice_accuracy(items: &[QaItem], rng: &mut impl rand::Rng) -> Result<f64> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for it in items {
        if let Answer::Choice { candidates, gold } = &it.answer {
            preds.push(rng.random_range(0..candidates.len()));
            golds.push(*gold);
        }
    }
    accuracy(&preds, &golds)
}
