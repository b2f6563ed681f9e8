use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::Deserialize;

use super::prompt::render_lenient;
use super::{AgentRequest, Backend, BackendError, RoleName};
use crate::error::{Error, Result};
use crate::metrics::keyword::{mention, Mention};
use crate::seed::sha256_hex;

type ScriptFn = dyn Fn(&AgentRequest) -> std::result::Result<String, BackendError> + Send + Sync;

/// How a mock backend answers one role when no fixture matches.
#[derive(Clone)]
pub enum MockRule {
    Fixed(String),
    /// Reply with the named fill verbatim.
    Echo(String),
    /// Reply with a template rendered against the request fills.
    Template(String),
    /// Pick the listed label sharing the most words with the sentence.
    KeywordClassify,
    /// Judge each listed condition by keyword and negation in the ground truth.
    KeywordJudge,
    /// First `n` words of the first listed sentence.
    FirstWords(usize),
    /// Ground-truth text of the report named by the `report_id` fill.
    EchoGroundTruth,
    Script(Arc<ScriptFn>),
}

impl fmt::Debug for MockRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MockRule::Fixed(t) => write!(f, "Fixed({t:?})"),
            MockRule::Echo(n) => write!(f, "Echo({n:?})"),
            MockRule::Template(t) => write!(f, "Template({t:?})"),
            MockRule::KeywordClassify => f.write_str("KeywordClassify"),
            MockRule::KeywordJudge => f.write_str("KeywordJudge"),
            MockRule::FirstWords(n) => write!(f, "FirstWords({n})"),
            MockRule::EchoGroundTruth => f.write_str("EchoGroundTruth"),
            MockRule::Script(_) => f.write_str("Script(..)"),
        }
    }
}

impl FromStr for MockRule {
    type Err = Error;

    /// `fixed:<text>`, `echo:<fill>`, `template:<text>`, `first_words:<n>`,
    /// `keyword_classify`, `keyword_judge`, `echo_ground_truth`, `empty`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let need = || {
            arg.map(str::to_string)
                .ok_or_else(|| Error::Config(format!("mock rule {s:?} needs an argument")))
        };
        Ok(match head {
            "fixed" => MockRule::Fixed(need()?),
            "echo" => MockRule::Echo(need()?),
            "template" => MockRule::Template(need()?),
            "first_words" => MockRule::FirstWords(
                need()?
                    .parse()
                    .map_err(|_| Error::Config(format!("bad word count in {s:?}")))?,
            ),
            "keyword_classify" => MockRule::KeywordClassify,
            "keyword_judge" => MockRule::KeywordJudge,
            "echo_ground_truth" => MockRule::EchoGroundTruth,
            "empty" => MockRule::Fixed(String::new()),
            _ => return Err(Error::Config(format!("unknown mock rule {s:?}"))),
        })
    }
}

/// Deterministic stand-in for the remote model. Replies come from, in
/// order: a fixture keyed by the SHA-256 of the rendered prompt, the role's
/// rule, then the default reply.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    fixtures: HashMap<String, String>,
    rules: BTreeMap<RoleName, MockRule>,
    default_reply: Option<String>,
    ground_truth: HashMap<String, String>,
}

#[derive(Deserialize)]
struct FixtureLine {
    prompt_hash: String,
    reply: String,
}

/// Reads `{"prompt_hash": str, "reply": str}` lines.
pub fn load_mock_fixtures(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: FixtureLine = serde_json::from_str(line)
            .map_err(|e| Error::Schema(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.insert(f.prompt_hash, f.reply);
    }
    Ok(out)
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rules that drive the whole pipeline from the reports themselves.
    pub fn standard() -> Self {
        Self::new()
            .rule(RoleName::Classify, MockRule::KeywordClassify)
            .rule(RoleName::Summarize, MockRule::FirstWords(4))
            .rule(
                RoleName::DescribeOrgan,
                MockRule::Template(
                    "On review of the images, the {organ} findings agree with the report: {ground_truth}".into(),
                ),
            )
            .rule(RoleName::JudgeConditions, MockRule::KeywordJudge)
            .rule(
                RoleName::CorruptDescription,
                MockRule::Template("On review of the images, the {organ} shows a new acute abnormality.".into()),
            )
            .rule(RoleName::RegenerateReport, MockRule::EchoGroundTruth)
    }

    pub fn rule(mut self, role: RoleName, rule: MockRule) -> Self {
        self.rules.insert(role, rule);
        self
    }

    pub fn script<F>(self, role: RoleName, f: F) -> Self
    where
        F: Fn(&AgentRequest) -> std::result::Result<String, BackendError> + Send + Sync + 'static,
    {
        self.rule(role, MockRule::Script(Arc::new(f)))
    }

    pub fn fixture(mut self, prompt: &str, reply: impl Into<String>) -> Self {
        self.fixtures.insert(sha256_hex(prompt), reply.into());
        self
    }

    pub fn fixtures(mut self, fixtures: HashMap<String, String>) -> Self {
        self.fixtures.extend(fixtures);
        self
    }

    pub fn default_reply(mut self, reply: impl Into<String>) -> Self {
        self.default_reply = Some(reply.into());
        self
    }

    pub fn ground_truth<'a>(mut self, reports: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        self.ground_truth
            .extend(reports.into_iter().map(|(id, text)| (id.to_string(), text.to_string())));
        self
    }

    fn apply(&self, rule: &MockRule, req: &AgentRequest) -> std::result::Result<String, BackendError> {
        Ok(match rule {
            MockRule::Fixed(t) => t.clone(),
            MockRule::Echo(name) => req.fill(name).to_string(),
            MockRule::Template(t) => render_lenient(t, &req.fills),
            MockRule::KeywordClassify => keyword_classify(req.fill("sentence"), req.fill("labels")),
            MockRule::KeywordJudge => keyword_judge(req.fill("ground_truth"), req.fill("conditions")),
            MockRule::FirstWords(n) => first_words(req.fill("sentences"), *n),
            MockRule::EchoGroundTruth => {
                self.ground_truth
                    .get(req.fill("report_id"))
                    .cloned()
                    .ok_or_else(|| BackendError::Fatal {
                        status: None,
                        message: format!("mock has no ground truth for report {:?}", req.fill("report_id")),
                    })?
            }
            MockRule::Script(f) => f(req)?,
        })
    }
}

impl Backend for MockBackend {
    fn send(&self, req: &AgentRequest) -> std::result::Result<String, BackendError> {
        if let Some(reply) = self.fixtures.get(&sha256_hex(&req.prompt)) {
            return Ok(reply.clone());
        }
        if let Some(rule) = self.rules.get(&req.role) {
            return self.apply(rule, req);
        }
        self.default_reply.clone().ok_or_else(|| BackendError::Fatal {
            status: None,
            message: format!("mock has no reply for role {}", req.role),
        })
    }
}

fn label_words(label: &str) -> Vec<String> {
    crate::corpus::tokenize(label)
        .into_iter()
        .filter(|t| t.chars().count() >= 3 && t.chars().all(char::is_alphanumeric))
        .collect()
}

fn keyword_classify(sentence: &str, labels: &str) -> String {
    let words = crate::corpus::tokenize(sentence);
    let mut best: Option<(usize, &str)> = None;
    for line in labels.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let leaf = line.rsplit(" / ").next().unwrap_or(line);
        let score = label_words(leaf)
            .iter()
            .filter(|lw| {
                words
                    .iter()
                    .any(|w| w == *lw || w.strip_suffix('s') == Some(lw.as_str()))
            })
            .count();
        if score > 0 && best.is_none_or(|(b, _)| score > b) {
            best = Some((score, line));
        }
    }
    best.map(|(_, l)| l.to_string()).unwrap_or_else(|| "none".into())
}

fn keyword_judge(ground_truth: &str, conditions: &str) -> String {
    let sentences = crate::corpus::segment_text(ground_truth);
    let mut lines = Vec::new();
    for label in conditions.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let positive = sentences.iter().find(|s| mention(s, label) == Some(Mention::Positive));
        match positive {
            Some(s) => lines.push(format!("{label}\tyes\t{s}")),
            None => lines.push(format!("{label}\tno\tNo {label} is seen.")),
        }
    }
    lines.join("\n")
}

fn first_words(sentences: &str, n: usize) -> String {
    let first = sentences.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let first = first.trim_start_matches("- ");
    first
        .split_whitespace()
        .take(n)
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}
