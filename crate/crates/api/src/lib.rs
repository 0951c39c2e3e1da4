//! Remote side of the review-summarizer workflow: a retrying client for an
//! OpenAI-compatible API (file upload, fine-tune jobs, completions), remote
//! classifier and embedder adapters, and a scriptable mock server.

pub mod finetune;
pub mod http;
pub mod inference;
pub mod mock;
pub mod remote;

pub use finetune::{FineTuneClient, FineTuneJob, Hyperparams, JobStatus, Ledger, LedgerEntry};
pub use http::{ApiClient, ApiConfig, ApiError, RetryPolicy};
pub use inference::{CompletionRequest, InferenceClient, InferenceSettings, SummaryOutcome, SummaryResult};
pub use mock::{CapturedRequest, MockServer, ResponseSpec, Script};
pub use remote::{RemoteClassifier, RemoteEmbedder};
