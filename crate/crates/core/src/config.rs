//! Pipeline configuration (TOML). `${NAME}` anywhere in the file is replaced
//! by the environment variable `NAME`; relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::agent::{
    load_mock_fixtures, Gateway, LiveBackend, LiveConfig, MockBackend, MockRule, ReplyCache, RetryPolicy, RoleName,
    Roles,
};
use crate::corpus::SplitSpec;
use crate::error::{Error, Result};
use crate::export::Composition;
use crate::reasoning::DEFAULT_GATE_THRESHOLD;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub split: SplitsConfig,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub export: ExportConfig,
    #[serde(default)]
    pub curation: CurationConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub iu_xray: Option<PathBuf>,
    pub mimic_cxr: Option<PathBuf>,
    pub kg: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsConfig {
    pub iu_xray: Option<SplitConfig>,
    pub mimic_cxr: Option<SplitConfig>,
}

/// Either `ratios = "7:1:2"` (with optional `seed`) or `official = "path"`.
/// A corpus without a split section keeps the splits stored in its file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: Option<String>,
    pub seed: Option<u64>,
    pub official: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    /// Empty keeps every organ of the graph.
    #[serde(default)]
    pub keep_organs: Vec<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    pub seed: Option<u64>,
}

fn default_k() -> usize {
    3
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            keep_organs: Vec::new(),
            k: default_k(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default)]
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub attach_images_for_regeneration: bool,
    #[serde(default)]
    pub mock: MockConfig,
}

fn default_timeout() -> u64 {
    120
}
fn default_retry_budget() -> u32 {
    4
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_in_flight() -> usize {
    8
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            backend: BackendKind::Mock,
            endpoint: None,
            model: None,
            api_key: None,
            api_key_env: None,
            timeout_s: default_timeout(),
            retry_budget: default_retry_budget(),
            backoff_base_ms: default_backoff_ms(),
            max_in_flight: default_in_flight(),
            cache_dir: None,
            prompts_dir: None,
            attach_images_for_regeneration: false,
            mock: MockConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    pub fixtures: Option<PathBuf>,
    /// Role name to rule, e.g. `summarize = "first_words:6"`.
    #[serde(default)]
    pub rules: BTreeMap<String, String>,
    pub default_reply: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_GATE_THRESHOLD
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            threshold: default_threshold(),
        }
    }
}

/// Reports drawn per corpus from the train split; unset takes all of them.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub n_iu: Option<usize>,
    pub n_mimic: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    #[serde(default)]
    pub composition: Composition,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationConfig {
    #[serde(default)]
    pub require_approval: bool,
    #[serde(default = "default_bind")]
    pub bind: String,
}

fn default_bind() -> String {
    "127.0.0.1:8077".into()
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            require_approval: false,
            bind: default_bind(),
        }
    }
}

/// Replaces `${NAME}` with the value of the environment variable `NAME`.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Config("unterminated ${...} in config".into()))?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(format!("invalid variable name {name:?} in config")));
        }
        let value = lookup(name).ok_or_else(|| Error::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn must_exist(p: &Path, what: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", p.display())))
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses config text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let text = interpolate_env(text, |k| std::env::var(k).ok())?;
        let mut c: Config = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        resolve(base, &mut c.output_dir);
        for p in [&mut c.corpus.iu_xray, &mut c.corpus.mimic_cxr].into_iter().flatten() {
            resolve(base, p);
        }
        resolve(base, &mut c.corpus.kg);
        for s in [&mut c.split.iu_xray, &mut c.split.mimic_cxr].into_iter().flatten() {
            if let Some(p) = &mut s.official {
                resolve(base, p);
            }
        }
        for p in [
            &mut c.agent.cache_dir,
            &mut c.agent.prompts_dir,
            &mut c.agent.mock.fixtures,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        Ok(c)
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.corpus.iu_xray.is_none() && self.corpus.mimic_cxr.is_none() {
            return Err(Error::Config("no corpus configured".into()));
        }
        for p in [&self.corpus.iu_xray, &self.corpus.mimic_cxr].into_iter().flatten() {
            must_exist(p, "corpus file")?;
        }
        must_exist(&self.corpus.kg, "knowledge graph")?;
        self.split_spec_iu()?;
        self.split_spec_mimic()?;
        if self.tree.k == 0 {
            return Err(Error::Config("tree.k must be at least 1".into()));
        }
        let t = self.gate.threshold;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Config(format!(
                "gate threshold {t} must be a finite non-negative number"
            )));
        }
        if self.agent.max_in_flight == 0 {
            return Err(Error::Config("agent.max_in_flight must be at least 1".into()));
        }
        if let Some(p) = &self.agent.prompts_dir {
            must_exist(p, "prompts directory")?;
        }
        if let Some(p) = &self.agent.mock.fixtures {
            must_exist(p, "mock fixture file")?;
        }
        for (role, rule) in &self.agent.mock.rules {
            role.parse::<RoleName>()?;
            rule.parse::<MockRule>()?;
        }
        if self.agent.backend == BackendKind::Live {
            if self.agent.endpoint.is_none() || self.agent.model.is_none() {
                return Err(Error::Config(
                    "live backend needs agent.endpoint and agent.model".into(),
                ));
            }
            self.api_key()?;
        }
        Ok(())
    }

    /// Thresholds above 1 are allowed; they make the gate reject everything.
    pub fn check_threshold(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Config(format!(
                "gate threshold {t} must be a finite non-negative number"
            )));
        }
        if t > 1.0 {
            log::warn!("gate threshold {t} exceeds 1; no sample can pass");
        }
        Ok(())
    }

    fn split_spec(&self, s: &Option<SplitConfig>, name: &str) -> Result<Option<SplitSpec>> {
        let Some(s) = s else { return Ok(None) };
        match (&s.ratios, &s.official) {
            (Some(r), None) => SplitSpec::parse_ratios(r, s.seed.unwrap_or(self.seed)).map(Some),
            (None, Some(p)) => {
                must_exist(p, "official split file")?;
                Ok(Some(SplitSpec::OfficialFile { file_path: p.clone() }))
            }
            _ => Err(Error::Config(format!(
                "split.{name} needs exactly one of `ratios` or `official`"
            ))),
        }
    }

    pub fn split_spec_iu(&self) -> Result<Option<SplitSpec>> {
        self.split_spec(&self.split.iu_xray, "iu_xray")
    }

    pub fn split_spec_mimic(&self) -> Result<Option<SplitSpec>> {
        self.split_spec(&self.split.mimic_cxr, "mimic_cxr")
    }

    pub fn tree_seed(&self) -> u64 {
        self.tree.seed.unwrap_or(self.seed)
    }

    fn api_key(&self) -> Result<Option<String>> {
        if let Some(k) = &self.agent.api_key {
            return Ok(Some(k.clone()));
        }
        match &self.agent.api_key_env {
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| Error::Config(format!("environment variable {var} is not set"))),
            None => Ok(None),
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    /// Builds the gateway. `ground_truth` feeds mock rules that echo the
    /// source report and is ignored by the live backend.
    pub fn gateway<'a>(&self, ground_truth: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Gateway> {
        let a = &self.agent;
        let gateway = match a.backend {
            BackendKind::Mock => {
                let mut mock = MockBackend::standard().ground_truth(ground_truth);
                for (role, rule) in &a.mock.rules {
                    mock = mock.rule(role.parse()?, rule.parse()?);
                }
                if let Some(p) = &a.mock.fixtures {
                    mock = mock.fixtures(load_mock_fixtures(p)?);
                }
                if let Some(d) = &a.mock.default_reply {
                    mock = mock.default_reply(d.clone());
                }
                Gateway::new(mock)
            }
            BackendKind::Live => {
                let missing = |f: &str| Error::Config(format!("live backend needs agent.{f}"));
                let config = LiveConfig {
                    endpoint: a.endpoint.clone().ok_or_else(|| missing("endpoint"))?,
                    model: a.model.clone().ok_or_else(|| missing("model"))?,
                    api_key: self.api_key()?,
                    timeout: Duration::from_secs(a.timeout_s),
                };
                let backend = LiveBackend::new(config).map_err(|e| Error::Config(format!("http client: {e}")))?;
                Gateway::new(backend)
            }
        };
        let roles = match &a.prompts_dir {
            Some(dir) => Roles::with_overrides(dir)?,
            None => Roles::builtin(),
        };
        let cache = match &a.cache_dir {
            Some(dir) => ReplyCache::on_disk(dir.clone()),
            None => ReplyCache::in_memory(),
        };
        Ok(gateway
            .with_roles(roles)
            .with_cache(cache)
            .with_retry(RetryPolicy {
                budget: a.retry_budget,
                backoff_base: Duration::from_millis(a.backoff_base_ms),
            })
            .with_max_in_flight(a.max_in_flight))
    }
}
