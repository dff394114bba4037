//! Generation-service clients: an HTTP chat-completions client and a
//! deterministic offline mock.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use cfaug_core::corpus::split_words;
use cfaug_core::prompt::{ChatRequest, GenerationService, ServiceError};
use cfaug_core::toy;

/// The only place the service key is read from.
pub const API_KEY_ENV: &str = "CFAUG_API_KEY";

pub struct HttpService {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
    concurrency: usize,
}

impl HttpService {
    /// Reads the key from [`API_KEY_ENV`]; fails if it is unset or empty.
    pub fn from_env(endpoint: &str, concurrency: usize, timeout: Duration) -> Result<Self, String> {
        let api_key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| format!("{API_KEY_ENV} is not set"))?;
        Ok(Self::with_key(endpoint, api_key, concurrency, timeout))
    }

    fn with_key(endpoint: &str, api_key: String, concurrency: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            agent,
            concurrency: concurrency.max(1),
        }
    }
}

fn transport_error(e: ureq::Error) -> ServiceError {
    use ureq::Error as E;
    match e {
        E::Timeout(_) | E::Io(_) | E::ConnectionFailed | E::HostNotFound => {
            ServiceError::retryable(e.to_string())
        }
        _ => ServiceError::fatal(e.to_string()),
    }
}

/// Completion text from either an OpenAI-style `choices[0].message.content`
/// or a bare `completion` field.
fn completion_text(body: &serde_json::Value) -> Option<String> {
    body.pointer("/choices/0/message/content")
        .or_else(|| body.get("completion"))
        .and_then(|v| v.as_str())
        .map(str::to_owned)
}

impl GenerationService for HttpService {
    fn complete(&self, request: &ChatRequest) -> Result<String, ServiceError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(request)
            .map_err(transport_error)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport_error)?;
        if status == 429 || status >= 500 {
            return Err(ServiceError::retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(ServiceError::fatal(format!("HTTP {status}: {}", text.trim())));
        }
        let body: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| ServiceError::fatal(format!("response is not JSON: {e}")))?;
        completion_text(&body).ok_or_else(|| ServiceError::fatal("response has no completion text"))
    }

    fn complete_batch(&self, requests: &[ChatRequest]) -> Vec<Result<String, ServiceError>> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<String, ServiceError>>>> =
            Mutex::new(vec![None; requests.len()]);
        std::thread::scope(|s| {
            for _ in 0..self.concurrency.min(requests.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(req) = requests.get(i) else { break };
                    let r = self.complete(req);
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .expect("results lock")
            .into_iter()
            .map(|r| r.expect("every request completed"))
            .collect()
    }
}

/// Offline stand-in for a chat model. It flips polarity words from the
/// built-in toy lexicon plus any word substitutions it can read off the
/// demonstrations in the prompt, so it responds to prompt changes while
/// staying a pure function of the request.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockService;

/// Demonstrations and query parsed back out of a rendered prompt.
struct ParsedPrompt<'a> {
    demos: Vec<(&'a str, &'a str)>,
    query: &'a str,
}

fn parse_prompt(content: &str) -> ParsedPrompt<'_> {
    let mut blocks = content.split("Example: ").skip(1).peekable();
    let mut demos = Vec::new();
    let mut query = "";
    while let Some(block) = blocks.next() {
        if blocks.peek().is_none() {
            query = block.trim_end().trim_end_matches("Counterfactual:").trim();
        } else if let Some((src, cf)) = block.split_once("\n\nCounterfactual: ") {
            demos.push((src.trim(), cf.trim()));
        }
    }
    ParsedPrompt { demos, query }
}

impl MockService {
    /// Word substitutions from demonstrations whose two sides have the same
    /// number of words.
    fn learned(demos: &[(&str, &str)]) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        for (src, cf) in demos {
            let a = split_words(src);
            let b = split_words(cf);
            if a.len() != b.len() {
                continue;
            }
            for (x, y) in a.into_iter().zip(b) {
                if x != y {
                    map.insert(x, y);
                }
            }
        }
        map
    }

    /// Rewrites `text` word by word, keeping punctuation and leading
    /// capitals.
    pub fn flip(text: &str, learned: &BTreeMap<String, String>) -> String {
        let mut out = String::with_capacity(text.len());
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut String| {
            if word.is_empty() {
                return;
            }
            let lower = word.to_lowercase();
            let replacement = learned
                .get(&lower)
                .map(String::as_str)
                .or_else(|| toy::flip_word(&lower));
            match replacement {
                Some(r) if word.starts_with(char::is_uppercase) => {
                    let mut cs = r.chars();
                    if let Some(c) = cs.next() {
                        out.extend(c.to_uppercase());
                        out.push_str(cs.as_str());
                    }
                }
                Some(r) => out.push_str(r),
                None => out.push_str(word),
            }
            word.clear();
        };
        for c in text.chars() {
            if c.is_alphanumeric() || c == '\'' {
                word.push(c);
            } else {
                flush(&mut word, &mut out);
                out.push(c);
            }
        }
        flush(&mut word, &mut out);
        out
    }
}

impl GenerationService for MockService {
    fn complete(&self, request: &ChatRequest) -> Result<String, ServiceError> {
        let content = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .ok_or_else(|| ServiceError::fatal("request has no messages"))?;
        let parsed = parse_prompt(content);
        Ok(Self::flip(parsed.query, &Self::learned(&parsed.demos)))
    }
}
