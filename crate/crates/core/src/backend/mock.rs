use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{check_context, strip_stop, Backend, BackendError, FinishReason, GenerationRequest, GenerationResult};
use crate::numeric::{format_scientific, is_canonical, parse_scientific};
use crate::serializer::{parse_prompt, SerializationConfig};

/// How `mock_knn` aggregates exemplar targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockMode {
    /// Mean when every exemplar target is canonical numeric, else majority.
    #[default]
    Auto,
    Majority,
    Mean,
}

/// Answers by reading the exemplar rows back out of the prompt: the most
/// frequent target, or the mean of numeric targets. Majority ties go to the
/// label that appears first in the prompt.
///
/// Assumes the target is the last cell of each row.
#[derive(Debug, Clone)]
pub struct MockKnnBackend {
    serialization: SerializationConfig,
    mode: MockMode,
    context_limit: Option<usize>,
}

impl MockKnnBackend {
    pub fn new(serialization: SerializationConfig, mode: MockMode) -> Self {
        Self { serialization, mode, context_limit: None }
    }

    pub fn with_context_limit(mut self, limit: Option<usize>) -> Self {
        self.context_limit = limit;
        self
    }

    fn answer(&self, prompt: &str) -> String {
        let parsed = parse_prompt(prompt, &self.serialization);
        let targets: Vec<&str> = parsed.exemplars.iter().filter_map(|r| r.last().copied()).collect();
        if targets.is_empty() {
            return String::new();
        }
        let numeric = match self.mode {
            MockMode::Mean => true,
            MockMode::Majority => false,
            MockMode::Auto => targets.iter().all(|t| is_canonical(t)),
        };
        if numeric {
            let values: Vec<f64> = targets.iter().filter_map(|t| parse_scientific(t).ok()).collect();
            if !values.is_empty() {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                if let Ok(s) = format_scientific(mean) {
                    return s;
                }
            }
        }
        majority(&targets).to_string()
    }
}

pub(crate) fn majority<'a>(labels: &[&'a str]) -> &'a str {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        counts.entry(l).or_insert((0, i)).0 += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(l, _)| l)
        .unwrap_or_default()
}

impl Backend for MockKnnBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        check_context(self, &request.prompt, self.context_limit)?;
        let mut text = self.answer(&request.prompt);
        strip_stop(&mut text, &request.stop_sequence);
        Ok(GenerationResult { text, finish_reason: FinishReason::Stop, latency_ms: 0, detail: None })
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn name(&self) -> String {
        "mock_knn".to_string()
    }
}

/// Always answers with a fixed string.
#[derive(Debug, Clone)]
pub struct MockEchoBackend {
    reply: String,
    context_limit: Option<usize>,
}

impl MockEchoBackend {
    pub fn new(reply: impl Into<String>) -> Self {
        Self { reply: reply.into(), context_limit: None }
    }

    pub fn with_context_limit(mut self, limit: Option<usize>) -> Self {
        self.context_limit = limit;
        self
    }
}

impl Backend for MockEchoBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        check_context(self, &request.prompt, self.context_limit)?;
        let mut text = self.reply.clone();
        strip_stop(&mut text, &request.stop_sequence);
        Ok(GenerationResult { text, finish_reason: FinishReason::Stop, latency_ms: 0, detail: None })
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn name(&self) -> String {
        "mock_echo".to_string()
    }
}
