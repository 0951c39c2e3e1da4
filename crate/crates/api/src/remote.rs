//! Remote implementations of the moderation classifier and the token
//! embedder.

use reviewtune_core::evaluation::{Embedder, EvalError};
use reviewtune_core::moderation::{ClassifyError, LabelLogProbs, SafetyClassifier};
use serde_json::{json, Value};

use crate::http::ApiClient;

/// Posts `{"text": ..}` to `<prefix>/classify` and expects
/// `{"logprobs": [lp0, lp1, lp2]}` back.
pub struct RemoteClassifier<'a> {
    api: &'a ApiClient,
    path: String,
}

impl<'a> RemoteClassifier<'a> {
    pub fn new(api: &'a ApiClient) -> Self {
        Self::with_path(api, "/classify")
    }

    pub fn with_path(api: &'a ApiClient, path: impl Into<String>) -> Self {
        Self { api, path: path.into() }
    }
}

impl SafetyClassifier for RemoteClassifier<'_> {
    fn classify(&self, text: &str) -> Result<LabelLogProbs, ClassifyError> {
        let url = self.api.url(&self.path);
        let body = json!({ "text": text });
        let resp = self
            .api
            .send_json("classify", |http| Ok(http.post(&url).json(&body)))
            .map_err(|e| ClassifyError(e.to_string()))?;
        let lps: Vec<f64> = resp
            .get("logprobs")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        let [lp0, lp1, lp2] = lps[..] else {
            return Err(ClassifyError(format!("expected 3 log-probabilities, got {resp}")));
        };
        LabelLogProbs::new(lp0, lp1, lp2).map_err(|e| ClassifyError(e.to_string()))
    }
}

/// Embeds tokens through `<prefix>/embeddings`.
pub struct RemoteEmbedder<'a> {
    api: &'a ApiClient,
    model: String,
    dim: usize,
}

impl<'a> RemoteEmbedder<'a> {
    /// Probes the endpoint once to learn the vector dimension.
    pub fn connect(api: &'a ApiClient, model: impl Into<String>) -> Result<Self, EvalError> {
        let mut e = Self { api, model: model.into(), dim: 0 };
        let probe = e.fetch(&["probe".to_owned()])?;
        e.dim = probe[0].len();
        Ok(e)
    }

    fn fetch(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, EvalError> {
        let url = self.api.url("/embeddings");
        let body = json!({ "model": self.model, "input": tokens });
        let resp = self
            .api
            .send_json("embeddings", |http| Ok(http.post(&url).json(&body)))
            .map_err(|e| EvalError::Embed(e.to_string()))?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EvalError::Embed("response has no data array".into()))?;
        let mut out = vec![Vec::new(); tokens.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let vector: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_f64).collect())
                .ok_or_else(|| EvalError::Embed("item without embedding".into()))?;
            let slot = out.get_mut(idx).ok_or_else(|| EvalError::Embed(format!("index {idx} out of range")))?;
            *slot = vector;
        }
        if out.iter().any(Vec::is_empty) {
            return Err(EvalError::Embed("missing vectors in response".into()));
        }
        Ok(out)
    }
}

impl Embedder for RemoteEmbedder<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, EvalError> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        self.fetch(tokens)
    }
}
