//! Access to every LLM/LVM agent role through one chat-completion endpoint.
//!
//! A [`Gateway`] renders role prompts, consults the content-addressed
//! [`ReplyCache`], bounds the number of in-flight backend calls and retries
//! transient failures with exponential backoff. Backends are either a live
//! HTTP endpoint ([`LiveBackend`]) or the scripted [`MockBackend`].

mod cache;
mod live;
mod mock;
mod prompt;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, TransportError};

pub use cache::ReplyCache;
pub use live::{chat_request_body, LiveBackend, LiveConfig};
pub use mock::{load_mock_fixtures, MockBackend, MockRule};
pub use prompt::{placeholders, render_prompt, PromptError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleName {
    Classify,
    Summarize,
    DescribeOrgan,
    JudgeConditions,
    CorruptDescription,
    RegenerateReport,
}

impl RoleName {
    pub const ALL: [RoleName; 6] = [
        RoleName::Classify,
        RoleName::Summarize,
        RoleName::DescribeOrgan,
        RoleName::JudgeConditions,
        RoleName::CorruptDescription,
        RoleName::RegenerateReport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleName::Classify => "classify",
            RoleName::Summarize => "summarize",
            RoleName::DescribeOrgan => "describe_organ",
            RoleName::JudgeConditions => "judge_conditions",
            RoleName::CorruptDescription => "corrupt_description",
            RoleName::RegenerateReport => "regenerate_report",
        }
    }

    /// Only the vision roles may carry image attachments.
    pub fn expects_images(self) -> bool {
        !matches!(self, RoleName::Classify | RoleName::Summarize)
    }

    pub fn default_temperature(self) -> f64 {
        match self {
            RoleName::CorruptDescription => 0.7,
            _ => 0.0,
        }
    }

    fn builtin_template(self) -> &'static str {
        match self {
            RoleName::Classify => include_str!("../../prompts/classify.txt"),
            RoleName::Summarize => include_str!("../../prompts/summarize.txt"),
            RoleName::DescribeOrgan => include_str!("../../prompts/describe_organ.txt"),
            RoleName::JudgeConditions => include_str!("../../prompts/judge_conditions.txt"),
            RoleName::CorruptDescription => include_str!("../../prompts/corrupt_description.txt"),
            RoleName::RegenerateReport => include_str!("../../prompts/regenerate_report.txt"),
        }
    }
}

impl fmt::Display for RoleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoleName::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent role {s:?}")))
    }
}

/// A role's system preamble and user prompt template.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRole {
    pub name: RoleName,
    pub preamble: String,
    pub prompt_template: String,
    pub temperature: f64,
}

impl AgentRole {
    /// Parses a prompt file: system preamble, a `---` line, then the template.
    pub fn from_text(name: RoleName, text: &str) -> Result<Self> {
        let (preamble, template) = text
            .split_once("\n---\n")
            .ok_or_else(|| Error::Config(format!("prompt for {name} lacks a '---' separator")))?;
        placeholders(template).map_err(|e| Error::Config(format!("prompt for {name}: {e}")))?;
        Ok(AgentRole {
            name,
            preamble: preamble.trim().to_string(),
            prompt_template: template.trim_end().to_string(),
            temperature: name.default_temperature(),
        })
    }

    pub fn builtin(name: RoleName) -> Self {
        Self::from_text(name, name.builtin_template()).expect("bundled prompts are well formed")
    }

    pub fn expects_images(&self) -> bool {
        self.name.expects_images()
    }
}

/// The full role set a gateway serves.
#[derive(Debug, Clone)]
pub struct Roles(BTreeMap<RoleName, AgentRole>);

impl Roles {
    pub fn builtin() -> Self {
        Roles(RoleName::ALL.into_iter().map(|n| (n, AgentRole::builtin(n))).collect())
    }

    /// Bundled roles, with any `<role>.txt` found in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut roles = Self::builtin();
        for name in RoleName::ALL {
            let path = dir.join(format!("{}.txt", name.as_str()));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                roles.0.insert(name, AgentRole::from_text(name, &text)?);
            }
        }
        Ok(roles)
    }

    pub fn get(&self, name: RoleName) -> &AgentRole {
        &self.0[&name]
    }

    pub fn get_mut(&mut self, name: RoleName) -> &mut AgentRole {
        self.0.get_mut(&name).expect("all roles present")
    }
}

/// A fully rendered call to one agent role.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRequest {
    pub role: RoleName,
    pub system: String,
    pub prompt: String,
    pub fills: BTreeMap<String, String>,
    pub image_refs: Vec<String>,
    pub temperature: f64,
    pub cache_key: String,
}

impl AgentRequest {
    pub fn new(role: &AgentRole, fills: BTreeMap<String, String>, image_refs: Vec<String>) -> Result<Self> {
        if !image_refs.is_empty() && !role.expects_images() {
            return Err(Error::Internal(format!("role {} does not take images", role.name)));
        }
        let prompt = render_prompt(&role.prompt_template, &fills)
            .map_err(|e| Error::Internal(format!("rendering {} prompt: {e}", role.name)))?;
        let cache_key = cache_key(role.name, &prompt, &image_refs);
        Ok(AgentRequest {
            role: role.name,
            system: role.preamble.clone(),
            prompt,
            fills,
            image_refs,
            temperature: role.temperature,
            cache_key,
        })
    }

    pub fn fill(&self, name: &str) -> &str {
        self.fills.get(name).map(String::as_str).unwrap_or("")
    }
}

/// Hex SHA-256 over length-prefixed role name, rendered prompt and image refs.
pub fn cache_key(role: RoleName, prompt: &str, image_refs: &[String]) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(role.as_str().as_bytes());
    field(prompt.as_bytes());
    for r in image_refs {
        field(r.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentReply {
    pub text: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: rate limits, 5xx, timeouts, dropped connections.
    Transient {
        status: Option<u16>,
        message: String,
    },
    Fatal {
        status: Option<u16>,
        message: String,
    },
}

pub trait Backend: Send + Sync {
    fn send(&self, request: &AgentRequest) -> std::result::Result<String, BackendError>;
}

impl<F> Backend for F
where
    F: Fn(&AgentRequest) -> std::result::Result<String, BackendError> + Send + Sync,
{
    fn send(&self, request: &AgentRequest) -> std::result::Result<String, BackendError> {
        self(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub budget: u32,
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            budget: 4,
            backoff_base: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, retry: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32 << retry.min(16))
    }
}

/// Counting limit on outstanding backend calls.
struct InFlight {
    limit: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        InFlight {
            limit: limit.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    roles: Roles,
    cache: ReplyCache,
    retry: RetryPolicy,
    in_flight: InFlight,
}

impl Gateway {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Gateway {
            backend: Box::new(backend),
            roles: Roles::builtin(),
            cache: ReplyCache::in_memory(),
            retry: RetryPolicy::default(),
            in_flight: InFlight::new(8),
        }
    }

    pub fn with_roles(mut self, roles: Roles) -> Self {
        self.roles = roles;
        self
    }

    pub fn with_cache(mut self, cache: ReplyCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = InFlight::new(limit);
        self
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    /// Builds a request for `role`; images are dropped for text-only roles.
    pub fn request(
        &self,
        role: RoleName,
        fills: BTreeMap<String, String>,
        image_refs: &[String],
    ) -> Result<AgentRequest> {
        let images = if role.expects_images() {
            image_refs.to_vec()
        } else {
            Vec::new()
        };
        AgentRequest::new(self.roles.get(role), fills, images)
    }

    /// Convenience wrapper: build the request and complete it.
    pub fn call(&self, role: RoleName, fills: BTreeMap<String, String>, image_refs: &[String]) -> Result<AgentReply> {
        let request = self.request(role, fills, image_refs)?;
        Ok(self.complete(&request)?)
    }

    pub fn complete(&self, request: &AgentRequest) -> std::result::Result<AgentReply, TransportError> {
        let started = Instant::now();
        let _key_guard = self.cache.lock_key(&request.cache_key);
        if let Some(text) = self.cache.get(&request.cache_key) {
            return Ok(AgentReply {
                text,
                latency_ms: started.elapsed().as_millis() as u64,
                from_cache: true,
            });
        }
        let mut attempts = 0;
        loop {
            attempts += 1;
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.backend.send(request)
            };
            match outcome {
                Ok(text) => {
                    if let Err(e) = self.cache.put(&request.cache_key, request.role, &text) {
                        log::warn!("could not persist cached reply: {e}");
                    }
                    return Ok(AgentReply {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        from_cache: false,
                    });
                }
                Err(BackendError::Transient { status, message }) => {
                    if attempts > self.retry.budget {
                        return Err(TransportError {
                            status,
                            attempts,
                            message,
                        });
                    }
                    log::debug!("{} attempt {attempts} failed transiently: {message}", request.role);
                    std::thread::sleep(self.retry.delay(attempts - 1));
                }
                Err(BackendError::Fatal { status, message }) => {
                    return Err(TransportError {
                        status,
                        attempts,
                        message,
                    });
                }
            }
        }
    }
}

/// Helper for building fill maps.
pub fn fills<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
    use std::sync::Arc;

    fn classify_fills() -> BTreeMap<String, String> {
        fills([
            ("sentence", "The heart is enlarged.".into()),
            ("labels", "heart\nlungs".into()),
        ])
    }

    #[test]
    fn builtin_roles_parse() {
        for name in RoleName::ALL {
            let role = AgentRole::builtin(name);
            assert!(!role.preamble.is_empty());
            assert!(!placeholders(&role.prompt_template).unwrap().is_empty());
        }
        assert_eq!(AgentRole::builtin(RoleName::CorruptDescription).temperature, 0.7);
        assert_eq!(AgentRole::builtin(RoleName::Classify).temperature, 0.0);
    }

    #[test]
    fn cache_hit_on_second_call() {
        let calls = Arc::new(AtomicU32::new(0));
        let c = calls.clone();
        let gw = Gateway::new(move |_: &AgentRequest| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok("heart".to_string())
        });
        let a = gw.call(RoleName::Classify, classify_fills(), &[]).unwrap();
        let b = gw.call(RoleName::Classify, classify_fills(), &[]).unwrap();
        assert!(!a.from_cache);
        assert!(b.from_cache);
        assert_eq!(a.text, b.text);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retry_budget_exhausted() {
        let gw = Gateway::new(|_: &AgentRequest| {
            Err(BackendError::Transient {
                status: Some(429),
                message: "slow down".into(),
            })
        })
        .with_retry(RetryPolicy {
            budget: 4,
            backoff_base: Duration::ZERO,
        });
        let err = gw
            .complete(&gw.request(RoleName::Classify, classify_fills(), &[]).unwrap())
            .unwrap_err();
        assert_eq!(err.attempts, 5);
        assert_eq!(err.status, Some(429));
    }

    #[test]
    fn recovers_within_budget_and_fatal_stops() {
        let n = Arc::new(AtomicU32::new(0));
        let n2 = n.clone();
        let gw = Gateway::new(move |_: &AgentRequest| {
            if n2.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(BackendError::Transient {
                    status: Some(503),
                    message: "busy".into(),
                })
            } else {
                Ok("ok".into())
            }
        })
        .with_retry(RetryPolicy {
            budget: 2,
            backoff_base: Duration::ZERO,
        });
        assert_eq!(gw.call(RoleName::Classify, classify_fills(), &[]).unwrap().text, "ok");

        let gw = Gateway::new(|_: &AgentRequest| {
            Err(BackendError::Fatal {
                status: Some(401),
                message: "no key".into(),
            })
        });
        let err = gw
            .complete(&gw.request(RoleName::Classify, classify_fills(), &[]).unwrap())
            .unwrap_err();
        assert_eq!((err.attempts, err.status), (1, Some(401)));
    }

    #[test]
    fn cache_key_depends_on_inputs() {
        let k = cache_key(RoleName::Classify, "p", &[]);
        assert_eq!(k, cache_key(RoleName::Classify, "p", &[]));
        assert_ne!(k, cache_key(RoleName::Summarize, "p", &[]));
        assert_ne!(k, cache_key(RoleName::Classify, "p", &["a.png".into()]));
    }

    #[test]
    fn text_roles_drop_images() {
        let gw = Gateway::new(|_: &AgentRequest| Ok(String::new()));
        let r = gw
            .request(RoleName::Classify, classify_fills(), &["x.png".into()])
            .unwrap();
        assert!(r.image_refs.is_empty());
        let role = AgentRole::builtin(RoleName::Classify);
        assert!(AgentRequest::new(&role, classify_fills(), vec!["x.png".into()]).is_err());
    }

    #[test]
    fn in_flight_budget_is_respected() {
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (l, p) = (live.clone(), peak.clone());
        let gw = Gateway::new(move |_: &AgentRequest| {
            let now = l.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(15));
            l.fetch_sub(1, Ordering::SeqCst);
            Ok("x".into())
        })
        .with_max_in_flight(3);
        std::thread::scope(|s| {
            for i in 0..24 {
                let gw = &gw;
                s.spawn(move || {
                    let f = fills([("sentence", format!("s{i}")), ("labels", "a".into())]);
                    gw.call(RoleName::Classify, f, &[]).unwrap();
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert!(peak.load(Ordering::SeqCst) >= 2);
    }
}
