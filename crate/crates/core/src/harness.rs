//! End-to-end runs: train task by task, evaluate on every task seen so far,
//! and collect the results into a [`RunReport`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::EmbeddingDataset;
use crate::bank::{BankOptions, MemoryBank, MemoryFootprint};
use crate::classifier::{AccuracyReport, ClassTally, Classifier, ClassifierOptions, EvalMode};
use crate::cluster::{pseudo_group, PseudoClassId};
use crate::embedding::Metric;
use crate::error::{Error, Result};
use crate::protocol::{
    make_nc_scenario, partition_by_classes, validate_stream, LabeledEmbedding, Task, TaskStream,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub tasks: usize,
    pub metric: Metric,
    pub mode: EvalMode,
    pub strict_nc: bool,
    pub normalize: bool,
    pub unsupervised: bool,
    /// Clusters per task in unsupervised mode.
    pub k: Option<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            test: None,
            tasks: 5,
            metric: Metric::L2,
            mode: EvalMode::Agnostic,
            strict_nc: true,
            normalize: false,
            unsupervised: false,
            k: None,
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::Validation("tasks must be at least 1".into()));
        }
        match (self.unsupervised, self.k) {
            (true, None) | (true, Some(0)) => {
                Err(Error::Validation("unsupervised mode needs k >= 1".into()))
            }
            (false, Some(_)) => Err(Error::Validation(
                "k is only meaningful with unsupervised".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn bank_options(&self) -> BankOptions {
        BankOptions {
            strict_nc: self.strict_nc,
            normalize_features: self.normalize,
        }
    }

    pub fn classifier_options(&self) -> ClassifierOptions {
        ClassifierOptions {
            metric: self.metric,
            normalize: self.normalize,
        }
    }

    fn clusters(&self) -> Option<usize> {
        self.k.filter(|_| self.unsupervised)
    }
}

/// What training leaves behind besides the bank itself: which prototypes
/// each task contributed and which label each prototype answers for.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    /// True class ids per training task.
    pub class_groups: Vec<Vec<u32>>,
    /// Prototype ids added by each training task.
    pub task_prototypes: Vec<Vec<u32>>,
    /// Prototype id -> label. Identity in supervised mode.
    pub labels: BTreeMap<u32, u32>,
    /// Cluster purity per task, unsupervised mode only.
    pub purity: Vec<f64>,
    pub clusters_per_task: Option<usize>,
    pub bank_options: BankOptions,
}

/// Incremental learner: a memory bank plus bookkeeping. Holds no trainable
/// parameters; the only state that changes is each prototype's sum and count.
#[derive(Clone, Debug)]
pub struct Learner {
    bank: MemoryBank,
    manifest: BankManifest,
    seed: u64,
    examples_seen: u64,
}

impl Learner {
    pub fn new(config: &RunConfig) -> Self {
        Learner {
            bank: MemoryBank::new(config.bank_options()),
            manifest: BankManifest {
                clusters_per_task: config.clusters(),
                bank_options: config.bank_options(),
                ..BankManifest::default()
            },
            seed: config.seed,
            examples_seen: 0,
        }
    }

    /// Rebuilds a learner from a restored bank and its manifest.
    pub fn from_parts(bank: MemoryBank, manifest: BankManifest) -> Result<Self> {
        let listed: BTreeSet<u32> = manifest.task_prototypes.iter().flatten().copied().collect();
        let present: BTreeSet<u32> = bank.class_ids().into_iter().collect();
        if listed != present {
            return Err(Error::Validation(
                "manifest prototypes do not match the bank's classes".into(),
            ));
        }
        let examples_seen = bank.total_count();
        Ok(Learner {
            bank,
            manifest,
            seed: 0,
            examples_seen,
        })
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn manifest(&self) -> &BankManifest {
        &self.manifest
    }

    pub fn tasks_trained(&self) -> usize {
        self.manifest.task_prototypes.len()
    }

    pub fn examples_seen(&self) -> u64 {
        self.examples_seen
    }

    /// One pass of batch reordering and prototype accumulation over `task`.
    pub fn train_task(&mut self, task: &Task) -> Result<()> {
        let mut added = Vec::new();
        match self.manifest.clusters_per_task {
            None => {
                for (class_id, group) in task.group_by_class() {
                    self.bank.observe_class_group(class_id, group)?;
                    self.manifest.labels.insert(class_id, class_id);
                    added.push(class_id);
                }
            }
            Some(k) => {
                let seed = self.seed.wrapping_add(task.task_id() as u64);
                let grouping = pseudo_group(task, k, seed)?;
                for (pid, group) in grouping.groups {
                    if group.is_empty() {
                        continue;
                    }
                    let id = pid.encode(k)?;
                    self.bank.observe_class_group(id, group)?;
                    if let Some(&label) = grouping.majority_label.get(&pid) {
                        self.manifest.labels.insert(id, label);
                    }
                    added.push(id);
                }
                self.manifest.purity.push(grouping.purity);
            }
        }
        self.examples_seen += task.examples().len() as u64;
        self.manifest.class_groups.push(task.class_ids().to_vec());
        self.manifest.task_prototypes.push(added);
        Ok(())
    }

    pub fn classifier(&self, options: ClassifierOptions) -> Result<Classifier> {
        Ok(Classifier::new(&self.bank, options)?.with_labels(self.manifest.labels.clone()))
    }
}

/// Runs the training phase over a whole stream.
pub fn run_training(stream: &TaskStream, config: &RunConfig) -> Result<Learner> {
    validate_stream(stream, config.strict_nc).into_result()?;
    let mut learner = Learner::new(config);
    for task in stream.tasks() {
        learner.train_task(task)?;
    }
    Ok(learner)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub after_task: usize,
    /// Accuracy on each task's test split `0..=after_task`; `None` when that
    /// split has no examples.
    pub accuracies: Vec<Option<f64>>,
}

/// One row of the accuracy matrix: evaluates the current learner on the test
/// splits of tasks `0..=after_task`.
pub fn run_evaluation(
    learner: &Learner,
    test: &TaskStream,
    config: &RunConfig,
    after_task: usize,
) -> Result<(MatrixRow, AccuracyReport)> {
    if after_task >= test.len() || after_task >= learner.tasks_trained() {
        return Err(Error::Validation(format!(
            "cannot evaluate after task {after_task}: {} trained, {} test splits",
            learner.tasks_trained(),
            test.len()
        )));
    }
    let clf = learner.classifier(config.classifier_options())?;
    let mut row = Vec::with_capacity(after_task + 1);
    let mut combined = AccuracyReport::default();
    for (j, task) in test.tasks()[..=after_task].iter().enumerate() {
        if task.examples().is_empty() {
            row.push(None);
            continue;
        }
        let allowed: Option<BTreeSet<u32>> = match config.mode {
            EvalMode::Agnostic => None,
            EvalMode::Aware => Some(
                learner.manifest.task_prototypes[j]
                    .iter()
                    .copied()
                    .collect(),
            ),
        };
        let r = clf.evaluate(task.examples(), allowed.as_ref())?;
        row.push(Some(r.accuracy()));
        combined.merge(&r);
    }
    Ok((
        MatrixRow {
            after_task,
            accuracies: row,
        },
        combined,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub classes: Vec<u32>,
    pub train_examples: usize,
    pub test_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dim: usize,
    pub backbone_tag: String,
    pub train_records: u64,
    pub test_records: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_ms: f64,
    pub eval_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub tasks: Vec<TaskSummary>,
    pub accuracy_matrix: Vec<MatrixRow>,
    /// Top-1 accuracy over the whole test set with the final bank.
    pub final_accuracy: f64,
    /// Mean of the last matrix row.
    pub final_average_accuracy: f64,
    pub per_class: BTreeMap<u32, ClassTally>,
    /// Test classes the final bank cannot predict; their examples are misses.
    pub missing_classes: Vec<u32>,
    pub unassigned_test_examples: u64,
    pub memory: MemoryFootprint,
    pub purity: Option<Vec<f64>>,
    pub timing: Option<Timing>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The report with wall-clock figures removed; identical inputs give
    /// byte-identical output.
    pub fn to_deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.timing = None;
        r.to_json()
    }

    /// The accuracy matrix as CSV; cells above the diagonal are empty.
    pub fn matrix_csv(&self) -> String {
        let n = self.tasks.len();
        let mut out = String::from("after_task");
        for j in 0..n {
            out.push_str(&format!(",task_{j}"));
        }
        out.push('\n');
        for row in &self.accuracy_matrix {
            out.push_str(&row.after_task.to_string());
            for j in 0..n {
                out.push(',');
                if let Some(Some(a)) = row.accuracies.get(j) {
                    out.push_str(&format!("{a}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn final_figures(
    config: &RunConfig,
    last_row: &MatrixRow,
    mut combined: AccuracyReport,
    unassigned: &[LabeledEmbedding],
    learner: &Learner,
) -> Result<(f64, f64, AccuracyReport)> {
    if !unassigned.is_empty() {
        let mut extra = match config.mode {
            EvalMode::Agnostic => learner
                .classifier(config.classifier_options())?
                .evaluate(unassigned, None)?,
            // no task to restrict to: unanswerable by construction
            EvalMode::Aware => {
                let mut r = AccuracyReport::default();
                for x in unassigned {
                    r.total += 1;
                    r.per_class.entry(x.label).or_default().misses += 1;
                }
                r
            }
        };
        extra
            .missing_classes
            .extend(unassigned.iter().map(|x| x.label));
        combined.merge(&extra);
    }
    let defined: Vec<f64> = last_row.accuracies.iter().flatten().copied().collect();
    let avg = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok((combined.accuracy(), avg, combined))
}

fn summarize_tasks(
    train_groups: &[Vec<u32>],
    train_counts: &[usize],
    test: &TaskStream,
) -> Vec<TaskSummary> {
    train_groups
        .iter()
        .enumerate()
        .map(|(i, classes)| TaskSummary {
            task: i,
            classes: classes.clone(),
            train_examples: train_counts.get(i).copied().unwrap_or(0),
            test_examples: test.tasks()[i].examples().len(),
        })
        .collect()
}

/// Full run: build the scenario, then alternate training on task `i` and
/// evaluating on test splits `0..=i`.
pub fn run_benchmark(
    train: EmbeddingDataset,
    test: EmbeddingDataset,
    config: &RunConfig,
) -> Result<RunReport> {
    config.validate()?;
    if train.dim() != test.dim() {
        return Err(Error::Dimension {
            expected: train.dim(),
            actual: test.dim(),
        });
    }
    let dataset = DatasetSummary {
        dim: train.dim(),
        backbone_tag: train.backbone_tag().to_string(),
        train_records: train.len() as u64,
        test_records: test.len() as u64,
    };
    let stream = make_nc_scenario(train.into_records(), config.tasks, None)?;
    validate_stream(&stream, config.strict_nc).into_result()?;
    let groups = stream.class_groups();
    let (test_stream, unassigned) = partition_by_classes(test.into_records(), &groups)?;

    let mut learner = Learner::new(config);
    let mut matrix = Vec::with_capacity(stream.len());
    let (mut train_time, mut eval_time) = (Duration::ZERO, Duration::ZERO);
    let mut last = None;
    for (i, task) in stream.tasks().iter().enumerate() {
        let t0 = Instant::now();
        learner.train_task(task)?;
        let t1 = Instant::now();
        let (row, combined) = run_evaluation(&learner, &test_stream, config, i)?;
        eval_time += t1.elapsed();
        train_time += t1 - t0;
        matrix.push(row);
        last = Some(combined);
    }
    debug_assert_eq!(learner.examples_seen(), stream.num_examples() as u64);

    let t0 = Instant::now();
    let last_row = matrix.last().expect("at least one task").clone();
    let (final_accuracy, final_average_accuracy, combined) = final_figures(
        config,
        &last_row,
        last.unwrap_or_default(),
        &unassigned,
        &learner,
    )?;
    eval_time += t0.elapsed();

    let train_counts: Vec<usize> = stream.tasks().iter().map(|t| t.examples().len()).collect();
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "bench".into(),
        config: config.clone(),
        dataset,
        tasks: summarize_tasks(&groups, &train_counts, &test_stream),
        accuracy_matrix: matrix,
        final_accuracy,
        final_average_accuracy,
        per_class: combined.per_class,
        missing_classes: combined.missing_classes.into_iter().collect(),
        unassigned_test_examples: unassigned.len() as u64,
        memory: learner.bank().memory(),
        purity: config.clusters().map(|_| learner.manifest.purity.clone()),
        timing: Some(Timing {
            train_ms: millis(train_time),
            eval_ms: millis(eval_time),
        }),
    })
}

/// Evaluates a trained learner (typically restored from disk) on `test`,
/// producing a report with the single final row of the accuracy matrix.
pub fn evaluate_learner(
    learner: &Learner,
    test: EmbeddingDataset,
    config: &RunConfig,
) -> Result<RunReport> {
    let t0 = Instant::now();
    let bank_dim = learner.bank().dim().ok_or(Error::EmptyBank)?;
    if bank_dim != test.dim() {
        return Err(Error::Dimension {
            expected: bank_dim,
            actual: test.dim(),
        });
    }
    let groups = learner.manifest.class_groups.clone();
    if groups.is_empty() {
        return Err(Error::EmptyBank);
    }
    let dataset = DatasetSummary {
        dim: test.dim(),
        backbone_tag: test.backbone_tag().to_string(),
        train_records: learner.examples_seen(),
        test_records: test.len() as u64,
    };
    let (test_stream, unassigned) = partition_by_classes(test.into_records(), &groups)?;
    let last = groups.len() - 1;
    let (row, combined) = run_evaluation(learner, &test_stream, config, last)?;
    let (final_accuracy, final_average_accuracy, combined) =
        final_figures(config, &row, combined, &unassigned, learner)?;

    let train_counts: Vec<usize> = learner
        .manifest
        .task_prototypes
        .iter()
        .map(|ids| {
            ids.iter()
                .filter_map(|&id| learner.bank().get(id))
                .map(|p| p.count() as usize)
                .sum()
        })
        .collect();
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "eval".into(),
        config: config.clone(),
        dataset,
        tasks: summarize_tasks(&groups, &train_counts, &test_stream),
        accuracy_matrix: vec![row],
        final_accuracy,
        final_average_accuracy,
        per_class: combined.per_class,
        missing_classes: combined.missing_classes.into_iter().collect(),
        unassigned_test_examples: unassigned.len() as u64,
        memory: learner.bank().memory(),
        purity: learner
            .manifest
            .clusters_per_task
            .map(|_| learner.manifest.purity.clone()),
        timing: Some(Timing {
            train_ms: 0.0,
            eval_ms: millis(t0.elapsed()),
        }),
    })
}

/// Which task of the training stream contributed `prototype`.
pub fn prototype_task(manifest: &BankManifest, prototype: u32) -> Option<usize> {
    match manifest.clusters_per_task {
        Some(k) => Some(PseudoClassId::decode(prototype, k).task),
        None => manifest
            .task_prototypes
            .iter()
            .position(|ids| ids.contains(&prototype)),
    }
}
