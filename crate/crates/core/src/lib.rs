//! Training-free class-incremental learning on top of frozen pretrained
//! embeddings.
//!
//! Training groups each task's examples by class and folds them into a
//! per-class running mean (the prototype). Prediction returns the class of
//! the nearest prototype. No parameter is ever updated.

pub mod backend;
pub mod bank;
pub mod classifier;
pub mod cluster;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod protocol;

pub use backend::{
    read_embeddings, synth_gaussian, write_embeddings, EmbeddingDataset, SynthParams, SynthSplit,
};
pub use bank::{per_class_bytes, BankOptions, ClassPrototype, MemoryBank, MemoryFootprint};
pub use classifier::{
    predict, predict_task_aware, AccuracyReport, Classifier, ClassifierOptions, EvalMode,
    Prediction,
};
pub use cluster::{kmeans, pseudo_group, ClusterAssignment, KMeansParams, PseudoClassId};
pub use embedding::{cosine_similarity, l2_distance, unit_normalize, Embedding, Metric};
pub use error::{Error, Result};
pub use harness::{
    run_benchmark, run_evaluation, run_training, BankManifest, Learner, RunConfig, RunReport,
};
pub use protocol::{
    group_by_class, make_nc_scenario, validate_stream, LabeledEmbedding, Task, TaskStream,
};
