//! Nearest-prototype classification (k-nn with k = 1 over class means).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::embedding::{unit_normalize, Embedding, Metric};
use crate::error::{Error, Result};
use crate::protocol::LabeledEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub predicted_class: u32,
    /// Distance (L2) or similarity (cosine) to the winning prototype.
    pub score: f64,
    pub runner_up_class: Option<u32>,
    /// `|score(runner_up) - score(winner)|`, zero without a runner-up.
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Every prototype is a candidate.
    #[default]
    Agnostic,
    /// Only the prototypes of the query's own task are candidates.
    Aware,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "agnostic" | "task-agnostic" => Ok(EvalMode::Agnostic),
            "aware" | "task-aware" => Ok(EvalMode::Aware),
            other => Err(Error::Validation(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierOptions {
    pub metric: Metric,
    /// Unit-normalize prototypes and queries before matching.
    pub normalize: bool,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        ClassifierOptions {
            metric: Metric::L2,
            normalize: false,
        }
    }
}

/// A read-only view of a bank prepared for matching.
#[derive(Clone, Debug)]
pub struct Classifier {
    /// Ascending by prototype id; the scan order fixes the tie rule.
    entries: Vec<(u32, Embedding)>,
    dim: usize,
    options: ClassifierOptions,
    /// Prototype id -> class label a hit is judged against.
    labels: BTreeMap<u32, u32>,
}

impl Classifier {
    pub fn new(bank: &MemoryBank, options: ClassifierOptions) -> Result<Self> {
        let dim = bank
            .dim()
            .filter(|_| !bank.is_empty())
            .ok_or(Error::EmptyBank)?;
        let entries = bank
            .prototypes()
            .map(|p| {
                let v = if options.normalize {
                    unit_normalize(p.mean())?
                } else {
                    p.mean().clone()
                };
                Ok((p.class_id(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = entries.iter().map(|(id, _)| (*id, *id)).collect();
        Ok(Classifier {
            entries,
            dim,
            options,
            labels,
        })
    }

    /// Overrides the label a prototype answers for (identity by default).
    /// Used when prototypes are pseudo-classes.
    pub fn with_labels(mut self, labels: BTreeMap<u32, u32>) -> Self {
        for (id, label) in labels {
            if let Some(slot) = self.labels.get_mut(&id) {
                *slot = label;
            }
        }
        self
    }

    pub fn options(&self) -> ClassifierOptions {
        self.options
    }

    pub fn label_of(&self, prototype: u32) -> Option<u32> {
        self.labels.get(&prototype).copied()
    }

    fn prepare(&self, query: &Embedding) -> Result<Option<Embedding>> {
        query.check_dim(self.dim)?;
        if self.options.normalize {
            unit_normalize(query).map(Some)
        } else {
            Ok(None)
        }
    }

    fn scan<F>(&self, query: &Embedding, keep: F) -> Result<Prediction>
    where
        F: Fn(u32) -> bool,
    {
        let normalized = self.prepare(query)?;
        let query = normalized.as_ref().unwrap_or(query);
        let metric = self.options.metric;
        let mut best: Option<(u32, f64)> = None;
        let mut second: Option<(u32, f64)> = None;
        for (id, proto) in self.entries.iter().filter(|(id, _)| keep(*id)) {
            let s = metric.score(query, proto)?;
            match best {
                Some((_, b)) if !metric.better(s, b) => {
                    if second.is_none_or(|(_, r)| metric.better(s, r)) {
                        second = Some((*id, s));
                    }
                }
                _ => {
                    second = best;
                    best = Some((*id, s));
                }
            }
        }
        let (predicted_class, score) = best.ok_or(Error::EmptyBank)?;
        Ok(Prediction {
            predicted_class,
            score,
            runner_up_class: second.map(|(c, _)| c),
            margin: second.map_or(0.0, |(_, r)| (r - score).abs()),
        })
    }

    /// Best prototype over the whole bank; ties go to the lowest id.
    pub fn predict(&self, query: &Embedding) -> Result<Prediction> {
        self.scan(query, |_| true)
    }

    /// Best prototype among `allowed`.
    pub fn predict_task_aware(
        &self,
        query: &Embedding,
        allowed: &BTreeSet<u32>,
    ) -> Result<Prediction> {
        self.scan(query, |id| allowed.contains(&id))
    }

    /// Scores `test` against all prototypes, or against `allowed` only.
    ///
    /// Examples whose true class no candidate prototype answers for are
    /// counted as misses and listed in [`AccuracyReport::missing_classes`].
    pub fn evaluate(
        &self,
        test: &[LabeledEmbedding],
        allowed: Option<&BTreeSet<u32>>,
    ) -> Result<AccuracyReport> {
        if test.is_empty() {
            return Err(Error::Validation(
                "cannot evaluate an empty test set".into(),
            ));
        }
        let answerable: BTreeSet<u32> = self
            .labels
            .iter()
            .filter(|(id, _)| allowed.is_none_or(|a| a.contains(id)))
            .map(|(_, &label)| label)
            .collect();
        let mut report = AccuracyReport::default();
        for x in test {
            let pred = match allowed {
                None => self.predict(&x.embedding)?,
                Some(a) => self.predict_task_aware(&x.embedding, a)?,
            };
            let hit = self.label_of(pred.predicted_class) == Some(x.label);
            report.record(x.label, hit);
            if !answerable.contains(&x.label) {
                report.missing_classes.insert(x.label);
            }
        }
        Ok(report)
    }
}

pub fn predict(bank: &MemoryBank, query: &Embedding, metric: Metric) -> Result<Prediction> {
    Classifier::new(
        bank,
        ClassifierOptions {
            metric,
            normalize: false,
        },
    )?
    .predict(query)
}

pub fn predict_task_aware(
    bank: &MemoryBank,
    query: &Embedding,
    allowed_classes: &BTreeSet<u32>,
    metric: Metric,
) -> Result<Prediction> {
    Classifier::new(
        bank,
        ClassifierOptions {
            metric,
            normalize: false,
        },
    )?
    .predict_task_aware(query, allowed_classes)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTally {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub hits: u64,
    pub total: u64,
    pub per_class: BTreeMap<u32, ClassTally>,
    /// True classes that no candidate prototype could have predicted.
    pub missing_classes: BTreeSet<u32>,
}

impl AccuracyReport {
    fn record(&mut self, label: u32, hit: bool) {
        let tally = self.per_class.entry(label).or_default();
        if hit {
            tally.hits += 1;
            self.hits += 1;
        } else {
            tally.misses += 1;
        }
        self.total += 1;
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.hits as f64 / self.total as f64
    }

    /// Commutative, associative combination of two reports.
    pub fn merge(&mut self, other: &AccuracyReport) {
        self.hits += other.hits;
        self.total += other.total;
        for (c, t) in &other.per_class {
            let e = self.per_class.entry(*c).or_default();
            e.hits += t.hits;
            e.misses += t.misses;
        }
        self.missing_classes.extend(&other.missing_classes);
    }
}
