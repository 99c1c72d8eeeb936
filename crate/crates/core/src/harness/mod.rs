//! Data, configuration, training and evaluation around [`crate::model::MoceModel`].

mod ablation;
mod config;
mod corpus;
mod dataset;
mod metrics;
mod pipeline;
mod tokenizer;

pub use ablation::{ablation_run, AblationRow, AblationTable, Staging, TokenRouting};
pub use config::{EmbedField, EmbeddingSource, RunConfig, RUN_KEYS};
pub use corpus::{
    planted_blobs, skewed_corpus, two_dialect_corpus, two_dialect_split, vocabulary_blob_corpus,
    Dialect, PlantedBlobs, DIALECT_WORDS,
};
pub use dataset::{
    dataset_to_string, ingest_dataset, parse_dataset, write_dataset, InstructionRecord,
};
pub use metrics::{EvalMetrics, MetricsReport, RouteAccumulator, RouterLoad, StepMetrics};
pub use pipeline::{
    evaluate, fit_clustering, greedy_decode, heldout_loss, load_trained, pipeline_train,
    predict_groups, route_stats, train_on_records, EmbedSettings, RouteStats, TrainOutcome,
    CHECKPOINT_DIR, CONFIG_FILE, ELBOW_FILE, METRICS_FILE, SUMMARY_FILE, VOCAB_FILE,
};
pub use tokenizer::{Vocab, BOS, EOS, SEP, UNK};
