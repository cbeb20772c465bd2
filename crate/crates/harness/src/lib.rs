//! Synthetic corpus management, preprocessing, classifier training,
//! evaluation, ablation suites and artifact output.

pub mod ablation;
pub mod artifacts;
pub mod augment;
pub mod cam;
pub mod classifier;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod preprocess;
pub mod train;

pub use ablation::{run_ablation_suite, run_variant, standard_variants, AblationRow, AblationTable, SuiteSettings, Variant, VariantKind};
pub use augment::{augment, AugmentSpec, Transform};
pub use classifier::{NaiveCnn, NaiveConfig, SlideClassifier};
pub use corpus::{synthetic_corpus, CorpusConfig, CorpusSlide, Split};
pub use data::{collate, EncodingMode, SlideSample};
pub use error::{HarnessError, Result};
pub use eval::{evaluate, EvalReport, SlideScore};
pub use experiment::{prepare, ExperimentConfig, PreparedCorpus};
pub use preprocess::{PreparedSlide, PreprocessConfig, ScaeStage, SlideMeta};
pub use train::{predict, train_classifier, EpochRecord, TrainOutcome, TrainingConfig};
