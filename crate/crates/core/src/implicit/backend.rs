//! LLM backends: the wire contract is `POST {"prompt": "..."}` answered by
//! `{"label": "yes"|"no"}`.

use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;

pub const ENV_URL: &str = "CROSSDIFF_LLM_URL";
pub const ENV_API_KEY: &str = "CROSSDIFF_LLM_API_KEY";

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("http status {0}")]
    Status(u16),
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("backend unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: BackendError },
    #[error("unparseable backend response: {0:?}")]
    Unparseable(String),
}

/// Sends one prompt and returns the raw response body.
pub trait LlmBackend: Send + Sync {
    fn send(&self, prompt: &str) -> Result<String, BackendError>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubled after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Deserialize)]
struct LabelBody {
    label: String,
}

pub fn parse_label(body: &str) -> Result<bool, LlmError> {
    let parsed: LabelBody =
        serde_json::from_str(body).map_err(|_| LlmError::Unparseable(body.to_string()))?;
    match parsed.label.trim().to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(LlmError::Unparseable(body.to_string())),
    }
}

/// Fills `{text}` in the template, sends it and parses the label. Transport
/// failures are retried with exponential backoff; a malformed answer is not.
pub fn llm_classify(
    text: &str,
    backend: &dyn LlmBackend,
    template: &str,
    retry: &RetryPolicy,
) -> Result<bool, LlmError> {
    let prompt = template.replace("{text}", text);
    let mut delay = retry.base_delay;
    let mut last = BackendError::Network("no attempt made".into());
    for attempt in 0..retry.attempts {
        if attempt > 0 && !delay.is_zero() {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match backend.send(&prompt) {
            Ok(body) => return parse_label(&body),
            Err(e) => last = e,
        }
    }
    Err(LlmError::Unavailable {
        attempts: retry.attempts,
        last,
    })
}

/// HTTP JSON backend.
#[derive(Clone, Debug)]
pub struct HttpBackend {
    pub url: String,
    pub api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            url: url.into(),
            api_key,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    /// Reads the endpoint and optional key from the environment.
    pub fn from_env(timeout: Duration) -> Option<Self> {
        let url = std::env::var(ENV_URL).ok().filter(|u| !u.is_empty())?;
        Some(Self::new(url, std::env::var(ENV_API_KEY).ok(), timeout))
    }
}

impl LlmBackend for HttpBackend {
    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        let body = serde_json::json!({ "prompt": prompt }).to_string();
        let mut req = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Network(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(BackendError::Status(status));
        }
        resp.body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Network(e.to_string()))
    }
}

/// Replays a fixed list of responses (the last one repeats) and records every prompt.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    script: Vec<Result<String, BackendError>>,
    calls: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new(script: Vec<Result<String, BackendError>>) -> Self {
        Self {
            script,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn always(body: &str) -> Self {
        Self::new(vec![Ok(body.to_string())])
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }
}

impl LlmBackend for ScriptedBackend {
    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        let mut calls = self.calls.lock().unwrap();
        let i = calls.len().min(self.script.len().saturating_sub(1));
        calls.push(prompt.to_string());
        self.script
            .get(i)
            .cloned()
            .unwrap_or_else(|| Err(BackendError::Network("empty script".into())))
    }
}

/// Backend from a closure over the prompt.
pub struct FnBackend<F>(pub F);

impl<F> LlmBackend for FnBackend<F>
where
    F: Fn(&str) -> Result<String, BackendError> + Send + Sync,
{
    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        (self.0)(prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::ZERO,
        }
    }

    #[test]
    fn yes_no_and_garbage() {
        let yes = ScriptedBackend::always(r#"{"label": "yes"}"#);
        assert!(llm_classify("x", &yes, "{text}", &fast()).unwrap());
        let no = ScriptedBackend::always(r#"{"label":"no"}"#);
        assert!(!llm_classify("x", &no, "{text}", &fast()).unwrap());
        let junk = ScriptedBackend::always("sure thing!");
        assert!(matches!(
            llm_classify("x", &junk, "{text}", &fast()),
            Err(LlmError::Unparseable(_))
        ));
        assert_eq!(junk.calls().len(), 1);
    }

    #[test]
    fn three_timeouts_are_unavailable() {
        let b = ScriptedBackend::new(vec![Err(BackendError::Timeout)]);
        let err = llm_classify("x", &b, "{text}", &fast()).unwrap_err();
        assert_eq!(
            err,
            LlmError::Unavailable {
                attempts: 3,
                last: BackendError::Timeout
            }
        );
        assert_eq!(b.calls().len(), 3);
    }

    #[test]
    fn recovers_after_one_timeout() {
        let b = ScriptedBackend::new(vec![
            Err(BackendError::Timeout),
            Ok(r#"{"label":"yes"}"#.into()),
        ]);
        assert!(llm_classify("the vase", &b, "Q: {text}", &fast()).unwrap());
        assert_eq!(
            b.calls(),
            vec!["Q: the vase".to_string(), "Q: the vase".to_string()]
        );
    }
}
