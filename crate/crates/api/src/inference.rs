//! Completion requests against a fine-tuned model and parsing of the
//! returned summaries.

use std::time::Instant;

use reviewtune_core::evaluation::CompletionSource;
use reviewtune_core::par::bounded_map;
use reviewtune_core::prompting::{build_prompt_with_prefix, parse_completion, ParseError, PROMPT_END, STOP};
use reviewtune_core::Annotation;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::http::{ApiClient, ApiError};

pub const DEFAULT_MAX_TOKENS: u32 = 300;
pub const DEFAULT_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            stop: vec![STOP.to_owned()],
        }
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        if !self.stop.iter().any(|s| s == STOP) {
            return Err(ApiError::Validation("stop list must contain the completion stop sequence".into()));
        }
        if !self.prompt.ends_with(PROMPT_END) {
            return Err(ApiError::Validation("prompt must end with the prompt-end marker".into()));
        }
        if self.model.trim().is_empty() {
            return Err(ApiError::Validation("model must be set".into()));
        }
        Ok(())
    }
}

/// Decoding settings shared by a batch of summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSettings {
    pub max_tokens: u32,
    pub temperature: f64,
    /// Required number of reviews per request when `strict` is set.
    pub group_size: usize,
    pub strict: bool,
    pub prompt_prefix: String,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            group_size: 15,
            strict: true,
            prompt_prefix: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummaryOutcome {
    Parsed { annotation: Annotation },
    ParseFailure { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryResult {
    pub outcome: SummaryOutcome,
    pub raw_text: String,
    pub model: String,
    pub latency_ms: u64,
}

impl SummaryResult {
    pub fn annotation(&self) -> Option<&Annotation> {
        match &self.outcome {
            SummaryOutcome::Parsed { annotation } => Some(annotation),
            SummaryOutcome::ParseFailure { .. } => None,
        }
    }
}

/// Cuts `text` at the first occurrence of any stop sequence.
pub fn truncate_at_stop<'t>(text: &'t str, stops: &[String]) -> &'t str {
    let cut = stops.iter().filter(|s| !s.is_empty()).filter_map(|s| text.find(s.as_str())).min().unwrap_or(text.len());
    &text[..cut]
}

pub struct InferenceClient<'a> {
    api: &'a ApiClient,
}

impl<'a> InferenceClient<'a> {
    pub fn new(api: &'a ApiClient) -> Self {
        Self { api }
    }

    /// Returns the first choice's text, truncated at the first stop sequence.
    pub fn complete(&self, req: &CompletionRequest) -> Result<String, ApiError> {
        req.validate()?;
        let url = self.api.url("/completions");
        let body = json!({
            "model": req.model,
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "stop": req.stop,
        });
        let resp = self.api.send_json("completions", |http| Ok(http.post(&url).json(&body)))?;
        let text = resp.pointer("/choices/0/text").and_then(Value::as_str).ok_or_else(|| ApiError::Protocol {
            endpoint: "completions".into(),
            message: "response has no choices[0].text".into(),
        })?;
        Ok(truncate_at_stop(text, &req.stop).to_owned())
    }

    /// Prompt → completion → parse. Unparseable output becomes a
    /// [`SummaryOutcome::ParseFailure`] carrying the raw text.
    pub fn summarize_reviews<S: AsRef<str>>(
        &self,
        model: &str,
        reviews: &[S],
        settings: &InferenceSettings,
    ) -> Result<SummaryResult, ApiError> {
        if settings.strict && reviews.len() != settings.group_size {
            return Err(ApiError::Validation(format!(
                "expected {} reviews, got {}",
                settings.group_size,
                reviews.len()
            )));
        }
        let prompt = build_prompt_with_prefix(&settings.prompt_prefix, reviews)
            .map_err(|e| ApiError::Validation(e.to_string()))?;
        let mut req = CompletionRequest::new(model, prompt);
        req.max_tokens = settings.max_tokens;
        req.temperature = settings.temperature;
        let start = Instant::now();
        let raw_text = self.complete(&req)?;
        let latency_ms = start.elapsed().as_millis() as u64;
        let outcome = match parse_completion(&raw_text) {
            Ok(annotation) if annotation.validate().is_ok() => SummaryOutcome::Parsed { annotation },
            Ok(_) => SummaryOutcome::ParseFailure { reason: "parsed annotation is invalid".into() },
            Err(ParseError { reason, .. }) => SummaryOutcome::ParseFailure { reason },
        };
        Ok(SummaryResult { outcome, raw_text, model: model.to_owned(), latency_ms })
    }

    /// Summarizes many review sets with at most `max_in_flight` requests at
    /// once; results are in input order.
    pub fn summarize_batch(
        &self,
        model: &str,
        batch: &[Vec<String>],
        settings: &InferenceSettings,
        max_in_flight: usize,
    ) -> Vec<Result<SummaryResult, ApiError>> {
        bounded_map(batch, max_in_flight, |reviews| self.summarize_reviews(model, reviews, settings))
    }
}

/// Adapts the inference client for the evaluation sweep.
pub struct ModelSource<'a> {
    pub client: InferenceClient<'a>,
    pub settings: InferenceSettings,
}

impl CompletionSource for ModelSource<'_> {
    fn generate(&self, model: &str, prompt: &str) -> Result<String, String> {
        let mut req = CompletionRequest::new(model, prompt);
        req.max_tokens = self.settings.max_tokens;
        req.temperature = self.settings.temperature;
        self.client.complete(&req).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_truncation() {
        let stops = vec![STOP.to_owned()];
        assert_eq!(truncate_at_stop("Verdict: ok\nEND more", &stops), "Verdict: ok");
        assert_eq!(truncate_at_stop("no stop", &stops), "no stop");
        let many = vec!["zz".to_owned(), "b".to_owned()];
        assert_eq!(truncate_at_stop("abczz", &many), "a");
    }

    #[test]
    fn request_validation() {
        let ok = CompletionRequest::new("m", "x\n\n###\n\n");
        ok.validate().unwrap();
        assert!(CompletionRequest { stop: vec![], ..ok.clone() }.validate().is_err());
        assert!(CompletionRequest { prompt: "x".into(), ..ok }.validate().is_err());
    }
}
