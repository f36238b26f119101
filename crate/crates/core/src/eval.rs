//! Zero-shot multiple-choice scoring by per-choice log-likelihood.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Anything that produces next-token logits `[t, vocab]` for a sequence.
pub trait LogitSource {
    fn context_len(&self) -> usize;
    fn sequence_logits(&self, tokens: &[u32]) -> Result<Tensor>;
}

impl LogitSource for Model {
    fn context_len(&self) -> usize {
        self.cfg.context_len
    }

    fn sequence_logits(&self, tokens: &[u32]) -> Result<Tensor> {
        self.logits(tokens, None, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McItem {
    pub context: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McTask {
    pub name: String,
    pub items: Vec<McItem>,
}

impl McTask {
    pub fn new(name: impl Into<String>, items: Vec<McItem>) -> Result<Self> {
        let task = Self {
            name: name.into(),
            items,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.choices.len() < 2 {
                return Err(Error::Validation(format!(
                    "item {i} has fewer than 2 choices"
                )));
            }
            if item.answer >= item.choices.len() {
                return Err(Error::Validation(format!(
                    "item {i}: answer {} but only {} choices",
                    item.answer,
                    item.choices.len()
                )));
            }
        }
        Ok(())
    }

    /// One JSON object per line: `{"context": [...], "choices": [[...], ...], "answer": k}`.
    pub fn from_jsonl(name: impl Into<String>, reader: impl BufRead) -> Result<Self> {
        let mut items = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item: McItem = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            items.push(item);
        }
        Self::new(name, items)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .map_or_else(|| "task".to_string(), |s| s.to_string_lossy().into_owned());
        let file = crate::fsutil::open(path)?;
        Self::from_jsonl(name, std::io::BufReader::new(file))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = row
        .iter()
        .map(|&x| (x as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row[target] as f64 - lse
}

/// Sum and per-token mean of `log P(choice | context)`.
pub fn choice_loglik(
    model: &impl LogitSource,
    context: &[u32],
    choice: &[u32],
) -> Result<(f64, f64)> {
    if choice.is_empty() {
        return Err(Error::Contract("empty choice has nothing to score".into()));
    }
    if context.is_empty() {
        return Err(Error::Contract(
            "scoring needs at least one context token".into(),
        ));
    }
    let total = context.len() + choice.len();
    if total > model.context_len() {
        return Err(Error::Range(format!(
            "context ({}) + choice ({}) exceed the window of {}",
            context.len(),
            choice.len(),
            model.context_len()
        )));
    }
    // The last choice token is only ever a target.
    let mut seq = Vec::with_capacity(total - 1);
    seq.extend_from_slice(context);
    seq.extend_from_slice(&choice[..choice.len() - 1]);
    let logits = model.sequence_logits(&seq)?;
    let sum: f64 = choice
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_softmax_at(logits.row(context.len() - 1 + i), tok as usize))
        .sum();
    Ok((sum, sum / choice.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub task: String,
    pub items: usize,
    /// Fraction correct ranking by summed log-likelihood.
    pub accuracy: f64,
    /// Fraction correct ranking by per-token mean log-likelihood.
    pub normalized_accuracy: f64,
    pub predictions: Vec<usize>,
    pub normalized_predictions: Vec<usize>,
    /// Summed score of the answer minus the best other choice.
    pub margins: Vec<f64>,
}

/// First index holding the maximum.
fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Scores every item both raw and length-normalized. Ties go to the lowest
/// choice index.
pub fn evaluate(model: &impl LogitSource, task: &McTask) -> Result<ScoreReport> {
    task.validate()?;
    let mut report = ScoreReport {
        task: task.name.clone(),
        items: task.items.len(),
        accuracy: 0.0,
        normalized_accuracy: 0.0,
        predictions: Vec::with_capacity(task.items.len()),
        normalized_predictions: Vec::with_capacity(task.items.len()),
        margins: Vec::with_capacity(task.items.len()),
    };
    let (mut raw_ok, mut norm_ok) = (0usize, 0usize);
    for item in &task.items {
        let scores = item
            .choices
            .iter()
            .map(|c| choice_loglik(model, &item.context, c))
            .collect::<Result<Vec<_>>>()?;
        let sums: Vec<f64> = scores.iter().map(|s| s.0).collect();
        let means: Vec<f64> = scores.iter().map(|s| s.1).collect();
        let (p, q) = (first_argmax(&sums), first_argmax(&means));
        raw_ok += (p == item.answer) as usize;
        norm_ok += (q == item.answer) as usize;
        let best_other = sums
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != item.answer)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        report.margins.push(sums[item.answer] - best_other);
        report.predictions.push(p);
        report.normalized_predictions.push(q);
    }
    if !task.items.is_empty() {
        report.accuracy = raw_ok as f64 / task.items.len() as f64;
        report.normalized_accuracy = norm_ok as f64 / task.items.len() as f64;
    }
    Ok(report)
}
