//! Dataset preparation and evaluation for fine-tuning a review summarizer.
//!
//! The crate covers the offline half of the workflow: loading review dumps,
//! clustering them into fixed-size product rows, moderating content, turning
//! rows and annotations into prompt/completion pairs, and scoring generated
//! summaries.

pub mod clustering;
pub mod corpus;
pub mod evaluation;
pub mod moderation;
pub mod par;
pub mod prompting;
pub mod text;

pub use clustering::{ClusterModel, KMeansParams, ProductRow, TfidfMatrix};
pub use corpus::{CategoryCorpus, ColumnMap, InputFormat, Review};
pub use evaluation::{EmbedScore, Embedder, ScoreTriple, StaticEmbedder};
pub use moderation::{Action, LabelLogProbs, ModerationResult, SafetyClassifier};
pub use prompting::{Annotation, TrainingExample, PROMPT_END, SEPARATOR, STOP};
