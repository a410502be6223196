//! Chat-provider bridge: prompt templates, retries, a concurrency limiter,
//! and parsers for the translation, direct-QA, quiz and perturbation replies.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use num_bigint::BigInt;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audit::{Position, QuizItem};
use crate::corpus::{Blocklist, Verdict};
use crate::parser::parse_program_with_id;
use crate::term::Program;

// ---------------------------------------------------------------------------
// templates

pub const TEMPLATE_IDS: [&str; 6] = [
    "quiz",
    "dcq_perturb",
    "direct_numeric",
    "direct_entail",
    "to_facts_entail",
    "to_facts_numeric",
];

/// Files making up each template, relative to a templates directory.
fn template_files(id: &str) -> (&'static str, &'static str) {
    match id {
        "quiz" => ("quiz.system.txt", "quiz.user.txt"),
        "dcq_perturb" => ("dcq_perturb.system.txt", "dcq_perturb.user.txt"),
        "direct_numeric" => ("direct.system.txt", "direct_numeric.user.txt"),
        "direct_entail" => ("direct.system.txt", "direct_entail.user.txt"),
        "to_facts_entail" => ("to_facts_entail.system.txt", "to_facts.user.txt"),
        "to_facts_numeric" => ("to_facts_numeric.system.txt", "to_facts.user.txt"),
        _ => unreachable!("unknown template id {id}"),
    }
}

fn builtin_template_file(name: &str) -> &'static str {
    match name {
        "quiz.system.txt" => include_str!("../templates/quiz.system.txt"),
        "quiz.user.txt" => include_str!("../templates/quiz.user.txt"),
        "dcq_perturb.system.txt" => include_str!("../templates/dcq_perturb.system.txt"),
        "dcq_perturb.user.txt" => include_str!("../templates/dcq_perturb.user.txt"),
        "direct.system.txt" => include_str!("../templates/direct.system.txt"),
        "direct_numeric.user.txt" => include_str!("../templates/direct_numeric.user.txt"),
        "direct_entail.user.txt" => include_str!("../templates/direct_entail.user.txt"),
        "to_facts_entail.system.txt" => include_str!("../templates/to_facts_entail.system.txt"),
        "to_facts_numeric.system.txt" => include_str!("../templates/to_facts_numeric.system.txt"),
        "to_facts.user.txt" => include_str!("../templates/to_facts.user.txt"),
        _ => unreachable!("unknown template file {name}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub system_text: String,
    pub user_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unknown template `{0}`")]
    Unknown(String),
    #[error("template {template}: placeholder {placeholder} left unfilled")]
    Unfilled {
        template: String,
        placeholder: String,
    },
    #[error("{0}")]
    Io(String),
}

fn placeholder_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{[A-Z_]+\}\}|\{[a-z_]+\}").unwrap())
}

impl PromptTemplate {
    /// Names of the placeholders, braces included, in order of appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for text in [&self.system_text, &self.user_text] {
            for m in placeholder_re().find_iter(text) {
                if !out.iter().any(|p| p == m.as_str()) {
                    out.push(m.as_str().to_string());
                }
            }
        }
        out
    }

    /// Fills placeholders in one pass; values are keyed without braces
    /// (`case_text`, `EVENTS_PL`). Inserted text is never rescanned.
    pub fn render(&self, vars: &BTreeMap<&str, &str>) -> Result<(String, String), TemplateError> {
        Ok((
            self.fill(&self.system_text, vars)?,
            self.fill(&self.user_text, vars)?,
        ))
    }

    fn fill(&self, text: &str, vars: &BTreeMap<&str, &str>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for m in placeholder_re().find_iter(text) {
            let key = m.as_str().trim_matches(|c| c == '{' || c == '}');
            let value = vars.get(key).ok_or_else(|| TemplateError::Unfilled {
                template: self.id.clone(),
                placeholder: m.as_str().to_string(),
            })?;
            out.push_str(&text[last..m.start()]);
            out.push_str(value);
            last = m.end();
        }
        out.push_str(&text[last..]);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    map: BTreeMap<String, PromptTemplate>,
}

impl Default for Templates {
    fn default() -> Self {
        Templates::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Templates {
        Templates::assemble(|name| Ok(builtin_template_file(name).to_string()))
            .expect("bundled templates")
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Templates, TemplateError> {
        let dir = dir.as_ref();
        Templates::assemble(|name| {
            let path = dir.join(name);
            std::fs::read_to_string(&path)
                .map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))
        })
    }

    fn assemble(
        read: impl Fn(&str) -> Result<String, TemplateError>,
    ) -> Result<Templates, TemplateError> {
        let mut map = BTreeMap::new();
        for id in TEMPLATE_IDS {
            let (sys, user) = template_files(id);
            map.insert(
                id.to_string(),
                PromptTemplate {
                    id: id.to_string(),
                    system_text: read(sys)?,
                    user_text: read(user)?,
                },
            );
        }
        Ok(Templates { map })
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, TemplateError> {
        self.map
            .get(id)
            .ok_or_else(|| TemplateError::Unknown(id.to_string()))
    }

    pub fn render(
        &self,
        id: &str,
        vars: &BTreeMap<&str, &str>,
    ) -> Result<(String, String), TemplateError> {
        self.get(id)?.render(vars)
    }
}

// ---------------------------------------------------------------------------
// providers

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("provider failure: {0}")]
    Fatal(String),
    #[error("no canned response matches the prompt")]
    NoMockMatch,
    #[error("gave up after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
}

impl ProviderError {
    fn retryable(&self) -> bool {
        matches!(self, ProviderError::Transient(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Value>,
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;
    fn chat(
        &self,
        cfg: &ProviderConfig,
        system: &str,
        user: &str,
    ) -> Result<ChatResponse, ProviderError>;
}

/// Provider settings. The API key itself is never stored here, only the
/// name of the environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider: String,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub max_retries: u32,
    pub request_timeout_ms: u64,
    pub concurrent_cap: usize,
    pub temperature: f64,
    pub retry_base_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            provider: "mock".into(),
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "TAXLOG_API_KEY".into(),
            max_retries: 3,
            request_timeout_ms: 60_000,
            concurrent_cap: 4,
            temperature: 0.0,
            retry_base_ms: 500,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct MockRule {
    contains: String,
    response: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct MockFile {
    #[serde(default)]
    rules: Vec<MockRule>,
    #[serde(default)]
    default: Option<String>,
}

/// Offline provider: the first rule whose `contains` text occurs in the
/// user prompt (or, failing that, the system prompt) answers.
#[derive(Debug, Clone, Default)]
pub struct MockProvider {
    rules: Vec<(String, String)>,
    default: Option<String>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(mut self, contains: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push((contains.into(), response.into()));
        self
    }

    pub fn default_response(mut self, response: impl Into<String>) -> Self {
        self.default = Some(response.into());
        self
    }

    /// `{"rules":[{"contains":..,"response":..}], "default":..}`
    pub fn from_json(text: &str) -> Result<MockProvider, String> {
        let f: MockFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok(MockProvider {
            rules: f
                .rules
                .into_iter()
                .map(|r| (r.contains, r.response))
                .collect(),
            default: f.default,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MockProvider, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        MockProvider::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

impl ChatProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn chat(
        &self,
        _cfg: &ProviderConfig,
        system: &str,
        user: &str,
    ) -> Result<ChatResponse, ProviderError> {
        let hit = self
            .rules
            .iter()
            .find(|(needle, _)| user.contains(needle.as_str()))
            .or_else(|| {
                self.rules
                    .iter()
                    .find(|(needle, _)| system.contains(needle.as_str()))
            });
        match hit.map(|(_, r)| r).or(self.default.as_ref()) {
            Some(text) => Ok(ChatResponse {
                text: text.clone(),
                usage: None,
            }),
            None => Err(ProviderError::NoMockMatch),
        }
    }
}

/// OpenAI-compatible chat-completions endpoint with bearer auth.
#[cfg(feature = "http")]
pub struct HttpProvider {
    key: String,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("key", &"[REDACTED]")
            .finish()
    }
}

#[cfg(feature = "http")]
impl HttpProvider {
    /// Reads the key from the environment variable named in `cfg`.
    pub fn from_env(cfg: &ProviderConfig) -> Result<HttpProvider, ProviderError> {
        let key = std::env::var(&cfg.api_key_env).map_err(|_| {
            ProviderError::Fatal(format!(
                "environment variable {} is not set",
                cfg.api_key_env
            ))
        })?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.request_timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpProvider { key, agent })
    }

    pub fn key(&self) -> &str {
        &self.key
    }
}

#[cfg(feature = "http")]
impl ChatProvider for HttpProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn chat(
        &self,
        cfg: &ProviderConfig,
        system: &str,
        user: &str,
    ) -> Result<ChatResponse, ProviderError> {
        let body = serde_json::json!({
            "model": cfg.model,
            "temperature": cfg.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut resp = self
            .agent
            .post(&cfg.endpoint)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(&body)
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(ProviderError::Transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(ProviderError::Fatal(format!(
                "HTTP {status}: {}",
                truncate(&text, 200)
            )));
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| ProviderError::Fatal(e.to_string()))?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                ProviderError::Fatal("response has no choices[0].message.content".into())
            })?;
        Ok(ChatResponse {
            text: content.to_string(),
            usage: v.get("usage").cloned(),
        })
    }
}

#[cfg_attr(not(feature = "http"), allow(dead_code))]
fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

// ---------------------------------------------------------------------------
// bridge: limiter, retries, audit log

#[derive(Debug)]
pub struct Limiter {
    cap: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(cap: usize) -> Limiter {
        Limiter {
            cap: cap.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub seq: usize,
    pub attempt: u32,
    pub ok: bool,
    pub response: String,
    pub usage: Option<Value>,
    pub error: Option<String>,
}

pub struct Bridge {
    provider: Arc<dyn ChatProvider>,
    pub cfg: ProviderConfig,
    pub templates: Templates,
    limiter: Limiter,
    audit: Mutex<Vec<AuditEntry>>,
    secrets: Vec<String>,
}

impl Bridge {
    pub fn new(
        provider: Arc<dyn ChatProvider>,
        cfg: ProviderConfig,
        templates: Templates,
    ) -> Bridge {
        let secrets = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .into_iter()
            .collect();
        Bridge {
            provider,
            limiter: Limiter::new(cfg.concurrent_cap),
            cfg,
            templates,
            audit: Mutex::new(Vec::new()),
            secrets,
        }
    }

    pub fn mock(provider: MockProvider) -> Bridge {
        let cfg = ProviderConfig {
            retry_base_ms: 0,
            ..ProviderConfig::default()
        };
        Bridge::new(Arc::new(provider), cfg, Templates::builtin())
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    /// Text with every known secret replaced.
    pub fn redact(&self, text: &str) -> String {
        self.secrets.iter().fold(text.to_string(), |acc, s| {
            acc.replace(s.as_str(), "[REDACTED]")
        })
    }

    /// Sends one chat request, retrying transient failures with exponential
    /// backoff (`retry_base_ms * 2^k`).
    pub fn complete(&self, system: &str, user: &str) -> Result<String, ProviderError> {
        let _permit = self.limiter.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = self.provider.chat(&self.cfg, system, user);
            self.record(attempt, &result);
            match result {
                Ok(resp) => return Ok(resp.text),
                Err(e) if e.retryable() && attempt <= self.cfg.max_retries => {
                    let delay = self
                        .cfg
                        .retry_base_ms
                        .saturating_mul(1 << (attempt - 1).min(16));
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
                Err(e) if e.retryable() => {
                    return Err(ProviderError::Exhausted {
                        attempts: attempt,
                        last: self.redact(&e.to_string()),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn record(&self, attempt: u32, result: &Result<ChatResponse, ProviderError>) {
        let mut log = self.audit.lock().unwrap();
        let seq = log.len();
        let entry = match result {
            Ok(r) => AuditEntry {
                seq,
                attempt,
                ok: true,
                response: self.redact(&r.text),
                usage: r.usage.clone(),
                error: None,
            },
            Err(e) => AuditEntry {
                seq,
                attempt,
                ok: false,
                response: String::new(),
                usage: None,
                error: Some(self.redact(&e.to_string())),
            },
        };
        log::debug!("provider call {seq} attempt {attempt} ok={}", entry.ok);
        log.push(entry);
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.audit.lock().unwrap().clone()
    }
}

// ---------------------------------------------------------------------------
// tasks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Entail,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TranslationError {
    #[error("provider: {0}")]
    Provider(ProviderError),
    #[error("template: {0}")]
    Template(TemplateError),
    #[error("{message}")]
    Invalid { message: String, raw: String },
}

/// Reference code inserted into the translation prompts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceCode {
    pub events_pl: String,
    pub utils_pl: String,
}

pub fn strip_code_fences(text: &str) -> String {
    let trimmed = text.trim();
    if !trimmed.contains("```") {
        return trimmed.to_string();
    }
    let mut out = Vec::new();
    let mut inside = false;
    let mut saw_fence = false;
    for line in trimmed.lines() {
        if line.trim_start().starts_with("```") {
            inside = !inside;
            saw_fence = true;
            continue;
        }
        if inside || !saw_fence {
            out.push(line);
        }
    }
    out.join("\n").trim().to_string()
}

/// `s152_c_1` -> `section 152(c)(1)`.
pub fn section_citation(functor: &str) -> Option<String> {
    let rest = functor.strip_prefix('s')?;
    let mut parts = rest.split('_');
    let number = parts
        .next()
        .filter(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()))?;
    let mut out = format!("section {number}");
    for p in parts {
        if p.is_empty() {
            return None;
        }
        out.push_str(&format!("({p})"));
    }
    Some(out)
}

/// Validates a translation reply: facts only, and computed predicates only
/// where the case text cites the matching section.
pub fn parse_translation(
    raw: &str,
    case_text: &str,
    blocklist: &Blocklist,
) -> Result<Program, TranslationError> {
    let invalid = |message: String| TranslationError::Invalid {
        message,
        raw: raw.to_string(),
    };
    let body = strip_code_fences(raw);
    let program = parse_program_with_id(&body, "translation")
        .map_err(|e| invalid(format!("parse error {e}")))?;
    if let Some(rule) = program.clauses.iter().find(|c| !c.is_fact()) {
        return Err(invalid(format!(
            "translation emitted a rule for {}/{}",
            rule.key().0,
            rule.key().1
        )));
    }
    let lowered = case_text.to_lowercase();
    for c in &program.clauses {
        let (name, arity) = c.key();
        if blocklist.blocks(name, arity) {
            let cited = section_citation(name).is_some_and(|cite| lowered.contains(&cite));
            if !cited {
                return Err(invalid(format!(
                    "translation asserts computed predicate {name}/{arity}"
                )));
            }
        }
    }
    Ok(program)
}

pub fn translate_case(
    bridge: &Bridge,
    case_text: &str,
    question: &str,
    task: Task,
    reference: &ReferenceCode,
    blocklist: &Blocklist,
) -> Result<Program, TranslationError> {
    let id = match task {
        Task::Entail => "to_facts_entail",
        Task::Numeric => "to_facts_numeric",
    };
    let vars = BTreeMap::from([
        ("case_text", case_text),
        ("question", question),
        ("EVENTS_PL", reference.events_pl.as_str()),
        ("UTILS_PL", reference.utils_pl.as_str()),
    ]);
    let (system, user) = bridge
        .templates
        .render(id, &vars)
        .map_err(TranslationError::Template)?;
    let raw = bridge
        .complete(&system, &user)
        .map_err(TranslationError::Provider)?;
    parse_translation(&raw, case_text, blocklist)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinalAnswer {
    Verdict(Verdict),
    Value(BigInt),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectAnswer {
    pub reasoning: String,
    pub final_answer: FinalAnswer,
    pub confidence: f64,
    /// Parsed only after falling back to the first embedded JSON object.
    pub lenient: bool,
    /// A fractional numeric answer was rounded half-up.
    pub rounded: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DirectQaError {
    #[error("provider: {0}")]
    Provider(ProviderError),
    #[error("template: {0}")]
    Template(TemplateError),
    #[error("{message}")]
    Malformed { message: String, raw: String },
}

/// First balanced `{...}` object in `text`, respecting JSON strings.
pub fn first_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &text[open..=i];
                        if serde_json::from_str::<Value>(candidate).is_ok() {
                            return Some(candidate);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        start = open + 1;
    }
    None
}

fn parse_final_answer(v: &Value, task: Task) -> Result<(FinalAnswer, bool), String> {
    match task {
        Task::Entail => match v.as_str() {
            Some("Entailment") => Ok((FinalAnswer::Verdict(Verdict::Entailment), false)),
            Some("Contradiction") => Ok((FinalAnswer::Verdict(Verdict::Contradiction), false)),
            _ => Err(format!(
                "final_answer {v} is not Entailment or Contradiction"
            )),
        },
        Task::Numeric => match v {
            Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Ok((FinalAnswer::Value(i.into()), false))
                } else if let Some(u) = n.as_u64() {
                    Ok((FinalAnswer::Value(u.into()), false))
                } else {
                    let f = n
                        .as_f64()
                        .filter(|f| f.is_finite())
                        .ok_or("final_answer is not finite")?;
                    let r = (f + 0.5).floor();
                    let i = BigInt::from(r as i128);
                    Ok((FinalAnswer::Value(i), true))
                }
            }
            Value::String(s) => {
                let digits = s.strip_prefix('-').unwrap_or(s);
                if !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) {
                    Ok((
                        FinalAnswer::Value(s.parse().expect("checked digits")),
                        false,
                    ))
                } else {
                    Err(format!("final_answer {s:?} is not a valid integer"))
                }
            }
            _ => Err(format!("final_answer {v} is not a valid integer")),
        },
    }
}

fn direct_from_value(v: &Value, task: Task) -> Result<DirectAnswer, String> {
    let obj = v.as_object().ok_or("reply is not a JSON object")?;
    let reasoning = obj
        .get("reasoning")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    let fa = obj.get("final_answer").ok_or("final_answer missing")?;
    let (final_answer, rounded) = parse_final_answer(fa, task)?;
    let confidence = obj
        .get("confidence")
        .and_then(Value::as_f64)
        .ok_or("confidence missing or not a number")?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(format!("confidence {confidence} outside [0,1]"));
    }
    Ok(DirectAnswer {
        reasoning,
        final_answer,
        confidence,
        lenient: false,
        rounded,
    })
}

/// Strict JSON first, then the first embedded object.
pub fn parse_direct_answer(raw: &str, task: Task) -> Result<DirectAnswer, DirectQaError> {
    let malformed = |message: String| DirectQaError::Malformed {
        message,
        raw: raw.to_string(),
    };
    if let Ok(v) = serde_json::from_str::<Value>(raw.trim()) {
        return direct_from_value(&v, task).map_err(malformed);
    }
    let obj = first_json_object(raw).ok_or_else(|| malformed("no JSON object in reply".into()))?;
    let v: Value = serde_json::from_str(obj).expect("validated by first_json_object");
    let mut ans = direct_from_value(&v, task).map_err(malformed)?;
    ans.lenient = true;
    Ok(ans)
}

pub fn direct_qa(
    bridge: &Bridge,
    statute_text: &str,
    case_text: &str,
    question: &str,
    task: Task,
) -> Result<DirectAnswer, DirectQaError> {
    let id = match task {
        Task::Entail => "direct_entail",
        Task::Numeric => "direct_numeric",
    };
    let vars = BTreeMap::from([
        ("statute_text", statute_text),
        ("case_text", case_text),
        ("question", question),
    ]);
    let (system, user) = bridge
        .templates
        .render(id, &vars)
        .map_err(DirectQaError::Template)?;
    let raw = bridge
        .complete(&system, &user)
        .map_err(DirectQaError::Provider)?;
    parse_direct_answer(&raw, task)
}

/// Strict `{"answer": "X"}` with X in A-E, any case.
pub fn parse_quiz_answer(raw: &str) -> Option<Position> {
    let v: Value = serde_json::from_str(raw.trim()).ok()?;
    let obj = v.as_object()?;
    if obj.len() != 1 {
        return None;
    }
    obj.get("answer")?.as_str()?.parse().ok()
}

/// Continuation lines of an option are indented to sit under its text.
pub fn indent_option(text: &str) -> String {
    text.replace('\n', "\n   ")
}

pub fn render_quiz(
    templates: &Templates,
    item: &QuizItem,
    split_name: &str,
    dataset_name: &str,
) -> Result<(String, String), TemplateError> {
    let opts: Vec<String> = item
        .options
        .iter()
        .take(4)
        .map(|o| indent_option(o))
        .collect();
    let vars = BTreeMap::from([
        ("split_name", split_name),
        ("dataset_name", dataset_name),
        ("option_a", opts[0].as_str()),
        ("option_b", opts[1].as_str()),
        ("option_c", opts[2].as_str()),
        ("option_d", opts[3].as_str()),
    ]);
    templates.render("quiz", &vars)
}

/// `None` is a non-response: provider failure or an unparseable reply.
pub fn take_quiz(
    bridge: &Bridge,
    item: &QuizItem,
    split_name: &str,
    dataset_name: &str,
) -> Option<Position> {
    let (system, user) = render_quiz(&bridge.templates, item, split_name, dataset_name).ok()?;
    match bridge.complete(&system, &user) {
        Ok(raw) => {
            let parsed = parse_quiz_answer(&raw);
            if parsed.is_none() {
                log::warn!(
                    "quiz item {}: unparseable reply recorded as non-response",
                    item.id
                );
            }
            parsed
        }
        Err(e) => {
            log::warn!("quiz item {}: {e}", item.id);
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub text: String,
    #[serde(default)]
    pub changes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PerturbError {
    #[error("provider: {0}")]
    Provider(ProviderError),
    #[error("template: {0}")]
    Template(TemplateError),
    #[error("{message}")]
    Rejected { message: String, raw: String },
}

fn protected_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"(?i)\$?\d[\d,]*(?:\.\d+)?%?",
            r"|(?:section|§)\s*\d+(?:\([A-Za-z0-9]+\))*",
            r"|\b(?:january|february|march|april|may|june|july|august|september|october|november|december|jan|feb|mar|apr|jun|jul|aug|sep|sept|oct|nov|dec)\b",
        ))
        .unwrap()
    })
}

/// Numerals, dates and citations, in order, case-folded.
pub fn protected_spans(text: &str) -> Vec<String> {
    protected_re()
        .find_iter(text)
        .map(|m| m.as_str().to_lowercase())
        .collect()
}

pub fn validate_perturbations(input: &str, raw: &str) -> Result<Vec<Perturbation>, PerturbError> {
    let reject = |message: String| PerturbError::Rejected {
        message,
        raw: raw.to_string(),
    };
    let text = strip_code_fences(raw);
    let v: Value = serde_json::from_str(&text)
        .or_else(|_| {
            first_json_object(&text)
                .map(serde_json::from_str)
                .unwrap_or_else(|| serde_json::from_str(""))
        })
        .map_err(|e| reject(format!("reply is not JSON: {e}")))?;
    let list: Vec<Perturbation> = v
        .get("perturbations")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| reject(format!("bad perturbations array: {e}")))?
        .ok_or_else(|| reject("perturbations missing".into()))?;
    validate_variants(
        input,
        &list.iter().map(|p| p.text.clone()).collect::<Vec<_>>(),
    )
    .map_err(reject)?;
    Ok(list)
}

/// Exactly four distinct variants, none equal to the input, with numerals,
/// dates and citations untouched.
pub fn validate_variants(input: &str, variants: &[String]) -> Result<(), String> {
    if variants.len() != 4 {
        return Err(format!("expected 4 perturbations, got {}", variants.len()));
    }
    let spans = protected_spans(input);
    for (i, v) in variants.iter().enumerate() {
        if v == input {
            return Err(format!("perturbation {} equals the input", i + 1));
        }
        if variants[..i].contains(v) {
            return Err(format!("perturbation {} duplicates an earlier one", i + 1));
        }
        if protected_spans(v) != spans {
            return Err(format!(
                "perturbation {} alters a numeral, date or citation",
                i + 1
            ));
        }
    }
    Ok(())
}

pub fn generate_perturbations(
    bridge: &Bridge,
    text: &str,
) -> Result<Vec<Perturbation>, PerturbError> {
    let vars = BTreeMap::from([("text", text)]);
    let (system, user) = bridge
        .templates
        .render("dcq_perturb", &vars)
        .map_err(PerturbError::Template)?;
    let raw = bridge
        .complete(&system, &user)
        .map_err(PerturbError::Provider)?;
    validate_perturbations(text, &raw)
}

/// Convenience for tests and offline runs: canned replies keyed by case id.
pub fn mock_from_map(map: &HashMap<String, String>) -> MockProvider {
    let mut keys: Vec<&String> = map.keys().collect();
    keys.sort();
    keys.into_iter().fold(MockProvider::new(), |m, k| {
        m.rule(k.clone(), map[k].clone())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl ChatProvider for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn chat(
            &self,
            _: &ProviderConfig,
            _: &str,
            _: &str,
        ) -> Result<ChatResponse, ProviderError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(ProviderError::Transient(format!("boom {n}")))
            } else {
                Ok(ChatResponse {
                    text: "ok".into(),
                    usage: None,
                })
            }
        }
    }

    fn flaky_bridge(failures: u32, max_retries: u32) -> Bridge {
        let cfg = ProviderConfig {
            max_retries,
            retry_base_ms: 0,
            ..ProviderConfig::default()
        };
        Bridge::new(
            Arc::new(Flaky {
                failures,
                calls: AtomicU32::new(0),
            }),
            cfg,
            Templates::builtin(),
        )
    }

    #[test]
    fn retries_then_succeeds() {
        let b = flaky_bridge(2, 3);
        assert_eq!(b.complete("s", "u").unwrap(), "ok");
        assert_eq!(b.audit_log().len(), 3);
    }

    #[test]
    fn retries_exhaust() {
        let b = flaky_bridge(10, 3);
        assert!(matches!(
            b.complete("s", "u"),
            Err(ProviderError::Exhausted { attempts: 4, .. })
        ));
    }

    #[test]
    fn mock_returns_canned_text() {
        let b = Bridge::mock(
            MockProvider::new()
                .rule("alice", "facts")
                .default_response("{}"),
        );
        assert_eq!(b.complete("sys", "about alice").unwrap(), "facts");
        assert_eq!(b.complete("sys", "about bob").unwrap(), "{}");
        let none = Bridge::mock(MockProvider::new());
        assert_eq!(none.complete("s", "u"), Err(ProviderError::NoMockMatch));
    }

    #[test]
    fn every_template_placeholder_is_known() {
        let t = Templates::builtin();
        let allowed = [
            "{statute_text}",
            "{case_text}",
            "{question}",
            "{option_a}",
            "{option_b}",
            "{option_c}",
            "{option_d}",
            "{split_name}",
            "{dataset_name}",
            "{text}",
            "{{EVENTS_PL}}",
            "{{UTILS_PL}}",
        ];
        for id in TEMPLATE_IDS {
            for p in t.get(id).unwrap().placeholders() {
                assert!(allowed.contains(&p.as_str()), "{id}: {p}");
            }
        }
    }

    #[test]
    fn rendering_requires_every_placeholder() {
        let t = Templates::builtin();
        let err = t
            .render(
                "direct_numeric",
                &BTreeMap::from([("statute_text", "S"), ("case_text", "C")]),
            )
            .unwrap_err();
        assert_eq!(
            err,
            TemplateError::Unfilled {
                template: "direct_numeric".into(),
                placeholder: "{question}".into()
            }
        );
    }

    #[test]
    fn inserted_values_are_not_rescanned() {
        let t = Templates::builtin();
        let (_, user) = t
            .render(
                "direct_numeric",
                &BTreeMap::from([
                    ("statute_text", "{question}"),
                    ("case_text", "C"),
                    ("question", "Q"),
                ]),
            )
            .unwrap();
        assert!(user.contains("[STATUTE]\n{question}\n"));
    }

    #[test]
    fn quiz_prompt_matches_worked_example() {
        let item = QuizItem {
            id: "x".into(),
            options: vec![
                "Text: Alice is entitled to an exemption under section 151(b) during the year 2015.\nNo additional taxpayer is entitled to a deduction for Alice during 2015.\nQuestion: Alice's exemption amount under section 151(d)(1) is equal to $0\nAnswer: Contradiction".into(),
                "Text: Alice is entitled to an exemption under section 151(b) for the year 2015.\nNo additional taxpayer is entitled to a deduction regarding Alice in 2015.\nQuestion: Alice's exemption amount under section 151(d)(1) is equivalent to $0\nAnswer: Contradiction".into(),
                "Text: Alice is entitled to an exemption under section 151(b) during the year 2015.\nNo other taxpayer is entitled to a deduction for Alice during 2015.\nQuestion: Alice's exemption amount under section 151(d)(1) is equivalent to $0\nAnswer: Contradiction".into(),
                "Text: Alice is entitled to an exemption under section 151(b) for the year 2015.\nNo additional taxpayer is entitled to a deduction for Alice for 2015.\nQuestion: Alice's exemption amount under section 151(d)(1) is equivalent to $0\nAnswer: Contradiction".into(),
                crate::audit::NONE_OPTION.into(),
            ],
            original_position: None,
            source_case_id: "alice".into(),
        };
        let (system, user) =
            render_quiz(&Templates::builtin(), &item, "entailment", "SARA").unwrap();
        assert_eq!(
            system,
            include_str!("../fixtures/quiz_example/quiz_example.system.txt")
        );
        assert_eq!(
            user,
            include_str!("../fixtures/quiz_example/quiz_example.user.txt")
        );
    }

    #[test]
    fn translation_contract() {
        let bl = Blocklist::parse("s151/*\ns152/*\n").unwrap();
        let facts = "```prolog\nincome_(e). agent_(e,alice). amount_(e,72500).\n```";
        assert_eq!(parse_translation(facts, "text", &bl).unwrap().len(), 3);
        assert!(matches!(
            parse_translation("s151(alice) :- true.", "text", &bl),
            Err(TranslationError::Invalid { .. })
        ));
        assert!(parse_translation("s151(alice,2015).", "Alice is entitled.", &bl).is_err());
        assert!(parse_translation(
            "s152_c_1(bob,alice).",
            "Bob satisfies section 152(c)(1).",
            &bl
        )
        .is_ok());
        assert!(parse_translation("foo(", "t", &bl).is_err());
    }

    #[test]
    fn citations() {
        assert_eq!(
            section_citation("s152_c_1").as_deref(),
            Some("section 152(c)(1)")
        );
        assert_eq!(section_citation("s63").as_deref(), Some("section 63"));
        assert_eq!(section_citation("spouse"), None);
    }

    #[test]
    fn direct_answers() {
        let ok = parse_direct_answer(
            r#"{"reasoning":"...","final_answer":14000,"confidence":0.9}"#,
            Task::Numeric,
        )
        .unwrap();
        assert_eq!(ok.final_answer, FinalAnswer::Value(14000.into()));
        assert!(!ok.lenient);
        let ent = parse_direct_answer(
            r#"{"reasoning":"r","final_answer":"Entailment","confidence":1}"#,
            Task::Entail,
        )
        .unwrap();
        assert_eq!(ent.final_answer, FinalAnswer::Verdict(Verdict::Entailment));
        assert!(parse_direct_answer(
            r#"{"reasoning":"r","final_answer":"$14,000","confidence":0.5}"#,
            Task::Numeric
        )
        .is_err());
        assert!(parse_direct_answer(
            r#"{"final_answer":"entailed","confidence":0.5}"#,
            Task::Entail
        )
        .is_err());
        assert!(
            parse_direct_answer(r#"{"final_answer":1,"confidence":1.5}"#, Task::Numeric).is_err()
        );
        let lenient = parse_direct_answer(
            "Sure! {\"reasoning\":\"a {b}\",\"final_answer\":\"3000\",\"confidence\":0.2} done",
            Task::Numeric,
        )
        .unwrap();
        assert!(lenient.lenient);
        assert_eq!(lenient.final_answer, FinalAnswer::Value(3000.into()));
        let rounded =
            parse_direct_answer(r#"{"final_answer":10.5,"confidence":0.1}"#, Task::Numeric)
                .unwrap();
        assert_eq!(rounded.final_answer, FinalAnswer::Value(11.into()));
        assert!(rounded.rounded);
        assert!(parse_direct_answer("no json here", Task::Numeric).is_err());
    }

    #[test]
    fn quiz_answers() {
        assert_eq!(parse_quiz_answer(r#"{"answer": "E"}"#), Some(Position::E));
        assert_eq!(parse_quiz_answer(r#"{"answer":"c"}"#), Some(Position::C));
        assert_eq!(parse_quiz_answer("The answer is B"), None);
        assert_eq!(parse_quiz_answer(r#"{"answer":"F"}"#), None);
        assert_eq!(parse_quiz_answer(r#"{"answer":"A","why":"x"}"#), None);
    }

    #[test]
    fn perturbation_validation() {
        let input = "Alice was paid $1,000 in 2015 under section 151(b).";
        let good = [
            "Alice was compensated $1,000 in 2015 under section 151(b).",
            "Alice was paid $1,000 during 2015 under section 151(b).",
            "Alice was paid $1,000 for 2015 under section 151(b).",
            "Alice was compensated $1,000 during 2015 under section 151(b).",
        ];
        let json = |texts: &[&str]| {
            serde_json::json!({"perturbations": texts.iter().map(|t| serde_json::json!({"text": t, "changes": []})).collect::<Vec<_>>()}).to_string()
        };
        assert_eq!(
            validate_perturbations(input, &json(&good)).unwrap().len(),
            4
        );
        assert!(validate_perturbations(input, &json(&good[..3])).is_err());
        let mut bad = good;
        bad[2] = "Alice was paid $1,500 for 2015 under section 151(b).";
        assert!(validate_perturbations(input, &json(&bad)).is_err());
        bad = good;
        bad[1] = input;
        assert!(validate_perturbations(input, &json(&bad)).is_err());
        bad = good;
        bad[3] = good[0];
        assert!(validate_perturbations(input, &json(&bad)).is_err());
    }

    #[test]
    fn limiter_caps_concurrency() {
        let lim = Limiter::new(2);
        let peak = AtomicU32::new(0);
        let cur = AtomicU32::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = lim.acquire();
                    let now = cur.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    cur.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn secrets_are_redacted() {
        let cfg = ProviderConfig {
            api_key_env: "TAXLOG_TEST_SECRET_REDACT".into(),
            retry_base_ms: 0,
            ..ProviderConfig::default()
        };
        // SAFETY: test-local variable name, set before any reader runs.
        unsafe { std::env::set_var("TAXLOG_TEST_SECRET_REDACT", "sk-test-123") };
        let b = Bridge::new(
            Arc::new(MockProvider::new().default_response("echo sk-test-123")),
            cfg.clone(),
            Templates::builtin(),
        );
        b.complete("s", "u").unwrap();
        let log = serde_json::to_string(&b.audit_log()).unwrap();
        let config = serde_json::to_string(&cfg).unwrap();
        assert!(!log.contains("sk-test-123") && log.contains("[REDACTED]"));
        assert!(!config.contains("sk-test-123"));
    }
}
