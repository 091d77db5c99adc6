//! New-classes (NC) class-incremental scenarios.
//!
//! A [`TaskStream`] is an ordered list of tasks whose class sets are
//! pairwise disjoint, and in which every example appears exactly once.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use indexmap::IndexMap;
use serde::Serialize;

use crate::embedding::Embedding;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub example_id: u64,
    pub label: u32,
    pub embedding: Embedding,
}

impl LabeledEmbedding {
    pub fn new(example_id: u64, label: u32, embedding: Embedding) -> Self {
        LabeledEmbedding {
            example_id,
            label,
            embedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    task_id: usize,
    class_ids: Vec<u32>,
    examples: Vec<LabeledEmbedding>,
}

impl Task {
    /// `class_ids` must be non-empty and unique, and every example label must
    /// belong to it. Classes without examples are allowed.
    pub fn new(
        task_id: usize,
        class_ids: Vec<u32>,
        examples: Vec<LabeledEmbedding>,
    ) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::Validation(format!("task {task_id} has no classes")));
        }
        let set: BTreeSet<u32> = class_ids.iter().copied().collect();
        if set.len() != class_ids.len() {
            return Err(Error::Validation(format!(
                "task {task_id} lists a class more than once"
            )));
        }
        if let Some(x) = examples.iter().find(|x| !set.contains(&x.label)) {
            return Err(Error::Validation(format!(
                "example {} has label {} outside task {task_id}'s classes",
                x.example_id, x.label
            )));
        }
        Ok(Task {
            task_id,
            class_ids,
            examples,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn examples(&self) -> &[LabeledEmbedding] {
        &self.examples
    }

    pub fn contains_class(&self, class_id: u32) -> bool {
        self.class_ids.contains(&class_id)
    }

    /// Batch reordering: one group per class, in `class_ids` order, each
    /// group keeping the input order of its members.
    pub fn group_by_class(&self) -> IndexMap<u32, Vec<&Embedding>> {
        let mut groups: IndexMap<u32, Vec<&Embedding>> =
            self.class_ids.iter().map(|&c| (c, Vec::new())).collect();
        for x in &self.examples {
            // labels are checked against class_ids in Task::new
            groups[&x.label].push(&x.embedding);
        }
        groups
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
}

impl TaskStream {
    /// Builds a stream without checking cross-task constraints; see
    /// [`validate_stream`].
    pub fn new(tasks: Vec<Task>) -> Self {
        TaskStream { tasks }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn num_examples(&self) -> usize {
        self.tasks.iter().map(|t| t.examples.len()).sum()
    }

    pub fn class_groups(&self) -> Vec<Vec<u32>> {
        self.tasks.iter().map(|t| t.class_ids.clone()).collect()
    }

    /// Dimension of the first example, if any.
    pub fn dim(&self) -> Option<usize> {
        self.tasks
            .iter()
            .flat_map(|t| t.examples.first())
            .map(|x| x.embedding.dim())
            .next()
    }
}

/// Sizes of `n_tasks` contiguous class groups; earlier tasks take the
/// remainder one class each.
pub fn split_sizes(n_classes: usize, n_tasks: usize) -> Result<Vec<usize>> {
    if n_tasks == 0 || n_tasks > n_classes {
        return Err(Error::Split {
            classes: n_classes,
            tasks: n_tasks,
        });
    }
    let (base, extra) = (n_classes / n_tasks, n_classes % n_tasks);
    Ok((0..n_tasks)
        .map(|i| base + usize::from(i < extra))
        .collect())
}

/// Splits `class_order` into contiguous groups per [`split_sizes`].
pub fn split_classes(class_order: &[u32], n_tasks: usize) -> Result<Vec<Vec<u32>>> {
    let sizes = split_sizes(class_order.len(), n_tasks)?;
    let mut rest = class_order;
    Ok(sizes
        .into_iter()
        .map(|n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        })
        .collect())
}

/// Distributes `examples` into tasks defined by `class_groups`, preserving
/// input order. Examples whose label is in no group are returned separately.
pub fn partition_by_classes(
    examples: Vec<LabeledEmbedding>,
    class_groups: &[Vec<u32>],
) -> Result<(TaskStream, Vec<LabeledEmbedding>)> {
    let mut owner = HashMap::new();
    for (t, group) in class_groups.iter().enumerate() {
        for &c in group {
            if let Some(prev) = owner.insert(c, t) {
                return Err(Error::Validation(format!(
                    "class {c} assigned to both task {prev} and task {t}"
                )));
            }
        }
    }
    let mut buckets: Vec<Vec<LabeledEmbedding>> = vec![Vec::new(); class_groups.len()];
    let mut unassigned = Vec::new();
    for x in examples {
        match owner.get(&x.label) {
            Some(&t) => buckets[t].push(x),
            None => unassigned.push(x),
        }
    }
    let tasks = class_groups
        .iter()
        .zip(buckets)
        .enumerate()
        .map(|(t, (group, xs))| Task::new(t, group.clone(), xs))
        .collect::<Result<Vec<_>>>()?;
    Ok((TaskStream::new(tasks), unassigned))
}

/// Builds an NC scenario: classes (ascending id unless `class_order` is
/// given) are cut into `n_tasks` contiguous groups, remainder first.
pub fn make_nc_scenario(
    examples: Vec<LabeledEmbedding>,
    n_tasks: usize,
    class_order: Option<&[u32]>,
) -> Result<TaskStream> {
    let present: BTreeSet<u32> = examples.iter().map(|x| x.label).collect();
    let order: Vec<u32> = match class_order {
        None => present.iter().copied().collect(),
        Some(order) => {
            let mut seen = BTreeSet::new();
            for &c in order {
                if !present.contains(&c) {
                    return Err(Error::Validation(format!(
                        "class_order names class {c}, which has no examples"
                    )));
                }
                if !seen.insert(c) {
                    return Err(Error::Validation(format!(
                        "class_order lists class {c} twice"
                    )));
                }
            }
            if seen.len() != present.len() {
                let missing: Vec<u32> = present.difference(&seen).copied().collect();
                return Err(Error::Validation(format!(
                    "class_order is missing classes {missing:?}"
                )));
            }
            order.to_vec()
        }
    };
    let groups = split_classes(&order, n_tasks)?;
    let (stream, unassigned) = partition_by_classes(examples, &groups)?;
    debug_assert!(unassigned.is_empty());
    Ok(stream)
}

pub fn group_by_class(task: &Task) -> IndexMap<u32, Vec<&Embedding>> {
    task.group_by_class()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IssueKind {
    /// A class shows up in more than one task.
    ClassReappears {
        class_id: u32,
        first_task: usize,
        task: usize,
    },
    /// An example id is delivered more than once (online constraint).
    DuplicateExample {
        example_id: u64,
        first_task: usize,
        task: usize,
    },
    DimensionMismatch {
        task: usize,
        example_id: u64,
        expected: usize,
        actual: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub severity: Severity,
    #[serde(flatten)]
    pub kind: IssueKind,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.kind {
            IssueKind::ClassReappears {
                class_id,
                first_task,
                task,
            } => write!(
                f,
                "{sev}: class {class_id} in task {first_task} reappears in task {task}"
            ),
            IssueKind::DuplicateExample {
                example_id,
                first_task,
                task,
            } => write!(
                f,
                "{sev}: example {example_id} from task {first_task} delivered again in task {task}"
            ),
            IssueKind::DimensionMismatch {
                task,
                example_id,
                expected,
                actual,
            } => write!(
                f,
                "{sev}: example {example_id} in task {task} has dim {actual}, expected {expected}"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    /// `Err(Protocol)` listing every error-severity issue.
    pub fn into_result(self) -> Result<Vec<Issue>> {
        if self.has_errors() {
            let msg = self
                .errors()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::Protocol(msg));
        }
        Ok(self.issues)
    }
}

/// Checks class disjointness, example-id uniqueness, and dimension
/// consistency. With `strict_nc == false`, class reappearance is only a
/// warning.
pub fn validate_stream(stream: &TaskStream, strict_nc: bool) -> ValidationReport {
    let mut issues = Vec::new();
    let mut class_home: HashMap<u32, usize> = HashMap::new();
    let mut example_home: HashMap<u64, usize> = HashMap::new();
    let dim = stream.dim();

    for task in stream.tasks() {
        let t = task.task_id();
        for &c in task.class_ids() {
            match class_home.get(&c) {
                Some(&first) => issues.push(Issue {
                    severity: if strict_nc {
                        Severity::Error
                    } else {
                        Severity::Warning
                    },
                    kind: IssueKind::ClassReappears {
                        class_id: c,
                        first_task: first,
                        task: t,
                    },
                }),
                None => {
                    class_home.insert(c, t);
                }
            }
        }
        for x in task.examples() {
            match example_home.get(&x.example_id) {
                Some(&first) => issues.push(Issue {
                    severity: Severity::Error,
                    kind: IssueKind::DuplicateExample {
                        example_id: x.example_id,
                        first_task: first,
                        task: t,
                    },
                }),
                None => {
                    example_home.insert(x.example_id, t);
                }
            }
            if let Some(d) = dim {
                if x.embedding.dim() != d {
                    issues.push(Issue {
                        severity: Severity::Error,
                        kind: IssueKind::DimensionMismatch {
                            task: t,
                            example_id: x.example_id,
                            expected: d,
                            actual: x.embedding.dim(),
                        },
                    });
                }
            }
        }
    }
    ValidationReport { issues }
}
