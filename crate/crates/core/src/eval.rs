//! Replay harness for LongMemEval-format datasets.
//!
//! Each instance gets a fresh in-memory engine. Its haystack sessions are
//! ingested in date order through [`MemoryEngine::record_turn`], one minute
//! apart within a session; the question is then asked in a new session,
//! answered by the provider from the rendered context and judged against
//! the reference answer.
//!
//! Only the `single-session-user` and `knowledge-update` categories are
//! scored; other instances are listed as skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use chrono::{Duration, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::config::{Config, ProviderKind};
use crate::engine::{EngineError, MemoryEngine, TurnRequest};
use crate::provider::{ChatExchange, Provider, ProviderError, Task};
use crate::store::Role;
use crate::template::PromptTemplate;
use crate::time::{self, Timestamp};
use crate::tokens::count_tokens;

pub const DEFAULT_ANSWER_TEMPLATE: &str = include_str!("../assets/answer_prompt.txt");
pub const DEFAULT_JUDGE_TEMPLATE: &str = include_str!("../assets/judge_prompt.txt");

pub const REPORT_FORMAT_VERSION: u32 = 1;

const EVAL_USER: &str = "user";
const NO_REPLY: &str = "(no reply)";
const ANSWER_MAX_TOKENS: u32 = 128;
const DATE_FORMAT: &str = "%Y/%m/%d (%a) %H:%M";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("reading dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset is not a JSON array of instances: {0}")]
    Format(String),

    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SingleSessionUser,
    KnowledgeUpdate,
}

impl Category {
    pub const ALL: [Category; 2] = [Category::SingleSessionUser, Category::KnowledgeUpdate];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::SingleSessionUser => "single_session_user",
            Category::KnowledgeUpdate => "knowledge_update",
        }
    }

    /// The spelling used in dataset files.
    pub fn dataset_name(self) -> &'static str {
        match self {
            Category::SingleSessionUser => "single-session-user",
            Category::KnowledgeUpdate => "knowledge-update",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    /// Accepts both `knowledge-update` and `knowledge_update`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "single_session_user" => Ok(Category::SingleSessionUser),
            "knowledge_update" => Ok(Category::KnowledgeUpdate),
            other => Err(format!("unsupported question type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Memoria,
    FullContext,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Memoria => "memoria",
            Mode::FullContext => "full-context",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "memoria" | "memory" => Ok(Mode::Memoria),
            "full-context" | "full" => Ok(Mode::FullContext),
            other => Err(format!("unknown mode {other:?} (expected memoria or full-context)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub date: Timestamp,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub question_id: String,
    pub category: Category,
    pub question: String,
    pub answer: String,
    pub question_date: Timestamp,
    pub sessions: Vec<Session>,
}

/// One element of a LongMemEval JSON array.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawInstance {
    question_id: String,
    question_type: String,
    question: String,
    answer: Value,
    question_date: String,
    #[serde(default)]
    haystack_session_ids: Vec<String>,
    haystack_dates: Vec<String>,
    haystack_sessions: Vec<Vec<RawTurn>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    answer_session_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTurn {
    role: String,
    content: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    has_answer: bool,
}

/// Parse `2023/05/20 (Sat) 02:21`, also accepting RFC 3339.
pub fn parse_dataset_date(text: &str) -> Result<Timestamp, String> {
    let text = text.trim();
    if let Ok(naive) = NaiveDateTime::parse_from_str(text, DATE_FORMAT) {
        return Ok(Utc.from_utc_datetime(&naive));
    }
    chrono::DateTime::parse_from_rfc3339(text)
        .map(|d| time::truncate_millis(d.with_timezone(&Utc)))
        .map_err(|_| format!("unparseable date {text:?}"))
}

pub fn format_dataset_date(ts: &Timestamp) -> String {
    ts.format(DATE_FORMAT).to_string()
}

fn answer_text(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RawInstance {
    fn into_instance(self) -> Result<EvalInstance, String> {
        let category: Category = self.question_type.parse()?;
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.haystack_sessions.is_empty() {
            return Err("no haystack sessions".into());
        }
        if self.haystack_dates.len() != self.haystack_sessions.len() {
            return Err(format!(
                "{} haystack dates for {} sessions",
                self.haystack_dates.len(),
                self.haystack_sessions.len()
            ));
        }
        let mut sessions = Vec::with_capacity(self.haystack_sessions.len());
        for (i, (turns, date)) in self.haystack_sessions.into_iter().zip(&self.haystack_dates).enumerate() {
            let turns = turns
                .into_iter()
                .map(|t| {
                    let role = match t.role.as_str() {
                        "user" => Role::User,
                        "assistant" => Role::Assistant,
                        other => return Err(format!("unknown role {other:?}")),
                    };
                    Ok(Turn { role, content: t.content })
                })
                .collect::<Result<Vec<_>, String>>()?;
            sessions.push(Session {
                session_id: self
                    .haystack_session_ids
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("session-{i}")),
                date: parse_dataset_date(date)?,
                turns,
            });
        }
        Ok(EvalInstance {
            question_id: self.question_id,
            category,
            question: self.question,
            answer: answer_text(&self.answer),
            question_date: parse_dataset_date(&self.question_date)?,
            sessions,
        })
    }
}

impl EvalInstance {
    fn to_raw(&self) -> RawInstance {
        RawInstance {
            question_id: self.question_id.clone(),
            question_type: self.category.dataset_name().to_string(),
            question: self.question.clone(),
            answer: Value::String(self.answer.clone()),
            question_date: format_dataset_date(&self.question_date),
            haystack_session_ids: self.sessions.iter().map(|s| s.session_id.clone()).collect(),
            haystack_dates: self.sessions.iter().map(|s| format_dataset_date(&s.date)).collect(),
            haystack_sessions: self
                .sessions
                .iter()
                .map(|s| {
                    s.turns
                        .iter()
                        .map(|t| RawTurn {
                            role: t.role.as_str().to_string(),
                            has_answer: t.role == Role::User && contains_ci(&t.content, &self.answer),
                            content: t.content.clone(),
                        })
                        .collect()
                })
                .collect(),
            answer_session_ids: Vec::new(),
        }
    }
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    !needle.trim().is_empty() && haystack.to_lowercase().contains(&needle.trim().to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedInstance {
    pub question_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub instances: Vec<EvalInstance>,
    pub skipped: Vec<SkippedInstance>,
}

impl Dataset {
    /// Parse a JSON array; malformed or unsupported elements are skipped
    /// with a reason.
    pub fn from_json_str(text: &str) -> Result<Self, EvalError> {
        let items: Vec<Value> = serde_json::from_str(text).map_err(|e| EvalError::Format(e.to_string()))?;
        let mut dataset = Dataset::default();
        for (i, item) in items.into_iter().enumerate() {
            let question_id = item.get("question_id").and_then(Value::as_str).map(str::to_string);
            let parsed = serde_json::from_value::<RawInstance>(item)
                .map_err(|e| e.to_string())
                .and_then(RawInstance::into_instance);
            match parsed {
                Ok(instance) => dataset.instances.push(instance),
                Err(reason) => {
                    log::info!("skipping dataset entry {i} ({question_id:?}): {reason}");
                    dataset.skipped.push(SkippedInstance { question_id, reason });
                }
            }
        }
        Ok(dataset)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}

/// Serialize instances in the LongMemEval array format.
pub fn instances_to_json(instances: &[EvalInstance]) -> String {
    let raw: Vec<RawInstance> = instances.iter().map(EvalInstance::to_raw).collect();
    serde_json::to_string_pretty(&raw).expect("dataset serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: Mode,
    /// Score only these categories; empty means all supported ones.
    pub categories: Vec<Category>,
    /// Also run with decay disabled and report the difference.
    pub compare_ablation: bool,
    /// Include wall-clock timings (makes the report nondeterministic).
    pub timing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Memoria,
            categories: Vec::new(),
            compare_ablation: false,
            timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub question_id: String,
    pub category: Category,
    pub question: String,
    pub ground_truth: String,
    pub answer: String,
    pub correct: bool,
    pub context_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub total: usize,
    pub correct: usize,
    #[serde(with = "accuracy_field")]
    pub accuracy: Option<f64>,
}

impl CategoryStats {
    fn from_results<'a>(results: impl Iterator<Item = &'a InstanceResult>) -> Self {
        let (mut total, mut correct) = (0, 0);
        for r in results {
            total += 1;
            correct += usize::from(r.correct);
        }
        Self {
            total,
            correct,
            accuracy: ratio(correct, total),
        }
    }
}

fn ratio(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Accuracy is a number, or the string `"n/a"` when nothing was scored.
mod accuracy_field {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => s.serialize_f64(*v),
            None => s.serialize_str("n/a"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Value::deserialize(d)? {
            Value::Number(n) => Ok(n.as_f64()),
            Value::String(s) if s == "n/a" => Ok(None),
            other => Err(serde::de::Error::custom(format!("bad accuracy {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Mean wall time of building the context for a question.
    pub mean_retrieval_ms: f64,
    /// Mean wall time of the answering provider call.
    pub mean_answer_ms: f64,
    /// Mean wall time of ingesting one instance's haystack.
    pub mean_ingest_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub mode: Mode,
    pub provider: ProviderKind,
    pub chat_model: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub k: usize,
    pub decay_rate: f64,
    pub context_max_tokens: usize,
    pub summary_max_tokens: u32,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub decay_rate: f64,
    pub total: usize,
    pub correct: usize,
    #[serde(with = "accuracy_field")]
    pub accuracy: Option<f64>,
    pub categories: BTreeMap<Category, CategoryStats>,
    /// Main run accuracy minus ablation accuracy, per category.
    pub delta: BTreeMap<Category, f64>,
    pub results: Vec<InstanceResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config: ConfigEcho,
    pub total: usize,
    pub correct: usize,
    #[serde(with = "accuracy_field")]
    pub accuracy: Option<f64>,
    pub categories: BTreeMap<Category, CategoryStats>,
    /// Mean token count of the context handed to the answering call.
    pub mean_context_tokens: f64,
    pub max_context_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    pub skipped: Vec<SkippedInstance>,
    pub results: Vec<InstanceResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let pct = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{:.1}%", v * 100.0));
        let mut out = String::new();
        out.push_str(&format!(
            "mode: {}  provider: {}  k: {}  decay_rate: {}\n",
            self.config.mode.as_str(),
            self.config.provider,
            self.config.k,
            self.config.decay_rate
        ));
        out.push_str(&format!("{:<22} {:>6} {:>8} {:>9}\n", "category", "total", "correct", "accuracy"));
        for (cat, stats) in &self.categories {
            out.push_str(&format!(
                "{:<22} {:>6} {:>8} {:>9}\n",
                cat.as_str(),
                stats.total,
                stats.correct,
                pct(stats.accuracy)
            ));
        }
        out.push_str(&format!(
            "{:<22} {:>6} {:>8} {:>9}\n",
            "overall",
            self.total,
            self.correct,
            pct(self.accuracy)
        ));
        out.push_str(&format!(
            "mean context tokens: {:.1} (max {})\n",
            self.mean_context_tokens, self.max_context_tokens
        ));
        if let Some(t) = &self.timing {
            out.push_str(&format!(
                "mean retrieval: {:.2} ms  mean answer: {:.2} ms  mean ingest: {:.2} ms\n",
                t.mean_retrieval_ms, t.mean_answer_ms, t.mean_ingest_ms
            ));
        }
        if !self.skipped.is_empty() {
            out.push_str(&format!("skipped: {}\n", self.skipped.len()));
        }
        if let Some(ab) = &self.ablation {
            out.push_str(&format!("no-decay ablation: {} overall\n", pct(ab.accuracy)));
            for (cat, d) in &ab.delta {
                out.push_str(&format!("  {:<20} delta {:+.1} pts\n", cat.as_str(), d * 100.0));
            }
        }
        out
    }
}

/// One rendered line per message, oldest first.
pub fn render_transcript<'a>(turns: impl IntoIterator<Item = (Role, &'a str)>) -> String {
    let mut out = String::from("[CONVERSATION HISTORY]\n");
    for (role, content) in turns {
        out.push_str(role.as_str());
        out.push_str(": ");
        out.push_str(content);
        out.push('\n');
    }
    out
}

/// Pair user messages with the following assistant reply. Assistant
/// messages with no preceding user message are dropped.
pub fn pair_turns(turns: &[Turn]) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let mut pending: Option<&str> = None;
    for turn in turns {
        match turn.role {
            Role::User => {
                if let Some(user) = pending.take() {
                    pairs.push((user.to_string(), NO_REPLY.to_string()));
                }
                if !turn.content.trim().is_empty() {
                    pending = Some(&turn.content);
                }
            }
            Role::Assistant => {
                if let Some(user) = pending.take() {
                    let reply = if turn.content.trim().is_empty() { NO_REPLY } else { &turn.content };
                    pairs.push((user.to_string(), reply.to_string()));
                }
            }
        }
    }
    if let Some(user) = pending {
        pairs.push((user.to_string(), NO_REPLY.to_string()));
    }
    pairs
}

/// Replays datasets against fresh engines built from one config.
pub struct Evaluator {
    config: Config,
    provider: Arc<dyn Provider>,
    answer_template: PromptTemplate,
    judge_template: PromptTemplate,
}

struct Outcome {
    result: InstanceResult,
    retrieval_ms: f64,
    answer_ms: f64,
    ingest_ms: f64,
}

impl Evaluator {
    pub fn new(config: Config, provider: Arc<dyn Provider>) -> Self {
        Self {
            config,
            provider,
            answer_template: PromptTemplate::new(DEFAULT_ANSWER_TEMPLATE),
            judge_template: PromptTemplate::new(DEFAULT_JUDGE_TEMPLATE),
        }
    }


    pub fn with_templates(mut self, answer: PromptTemplate, judge: PromptTemplate) -> Self {
        self.answer_template = answer;
        self.judge_template = judge;
        self
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn run(&self, dataset: &Dataset, options: &EvalOptions) -> Result<EvalReport, EvalError> {
        let started = Instant::now();
        let mut skipped = dataset.skipped.clone();
        let mut selected = Vec::new();
        for instance in &dataset.instances {
            if options.categories.is_empty() || options.categories.contains(&instance.category) {
                selected.push(instance);
            } else {
                skipped.push(SkippedInstance {
                    question_id: Some(instance.question_id.clone()),
                    reason: format!("category {} filtered out", instance.category),
                });
            }
        }

        let outcomes = self.run_all(&self.config, &selected, options.mode)?;
        let results: Vec<InstanceResult> = outcomes.iter().map(|o| o.result.clone()).collect();
        let categories = per_category(&results);

        let ablation = if options.compare_ablation {
            let mut config = self.config.clone();
            config.retrieval.decay_rate = 0.0;
            let ab_results: Vec<InstanceResult> = self
                .run_all(&config, &selected, options.mode)?
                .into_iter()
                .map(|o| o.result)
                .collect();
            let ab_categories = per_category(&ab_results);
            let delta = categories
                .iter()
                .filter_map(|(cat, main)| {
                    let ab = ab_categories.get(cat)?;
                    Some((*cat, main.accuracy? - ab.accuracy?))
                })
                .collect();
            let correct = ab_results.iter().filter(|r| r.correct).count();
            Some(AblationReport {
                decay_rate: 0.0,
                total: ab_results.len(),
                correct,
                accuracy: ratio(correct, ab_results.len()),
                categories: ab_categories,
                delta,
                results: ab_results,
            })
        } else {
            None
        };

        let n = outcomes.len().max(1) as f64;
        let timing = options.timing.then(|| Timing {
            mean_retrieval_ms: outcomes.iter().map(|o| o.retrieval_ms).sum::<f64>() / n,
            mean_answer_ms: outcomes.iter().map(|o| o.answer_ms).sum::<f64>() / n,
            mean_ingest_ms: outcomes.iter().map(|o| o.ingest_ms).sum::<f64>() / n,
            total_ms: started.elapsed().as_secs_f64() * 1000.0,
        });
        let correct = results.iter().filter(|r| r.correct).count();
        Ok(EvalReport {
            format_version: REPORT_FORMAT_VERSION,
            config: self.echo(options),
            total: results.len(),
            correct,
            accuracy: ratio(correct, results.len()),
            categories,
            mean_context_tokens: if results.is_empty() {
                0.0
            } else {
                results.iter().map(|r| r.context_tokens as f64).sum::<f64>() / results.len() as f64
            },
            max_context_tokens: results.iter().map(|r| r.context_tokens).max().unwrap_or(0),
            timing,
            skipped,
            results,
            ablation,
        })
    }

    fn echo(&self, options: &EvalOptions) -> ConfigEcho {
        let c = &self.config;
        ConfigEcho {
            mode: options.mode,
            provider: self.provider.kind(),
            chat_model: c.provider.chat_model.clone(),
            embed_model: c.provider.embed_model.clone(),
            embed_dim: c.provider.embed_dim,
            k: c.retrieval.k,
            decay_rate: c.retrieval.decay_rate,
            context_max_tokens: c.context.max_tokens,
            summary_max_tokens: c.summary.max_tokens,
            categories: if options.categories.is_empty() {
                Category::ALL.to_vec()
            } else {
                options.categories.clone()
            },
        }
    }

    fn run_all(&self, config: &Config, instances: &[&EvalInstance], mode: Mode) -> Result<Vec<Outcome>, EvalError> {
        instances.iter().map(|i| self.run_instance(config, i, mode)).collect()
    }

    fn run_instance(&self, config: &Config, instance: &EvalInstance, mode: Mode) -> Result<Outcome, EvalError> {
        let ingest_start = Instant::now();
        let mut sessions: Vec<&Session> = instance.sessions.iter().collect();
        sessions.sort_by_key(|s| s.date);

        let mut ingest_error = None;
        let (context, retrieval_ms) = match mode {
            Mode::FullContext => {
                let turns = sessions
                    .iter()
                    .flat_map(|s| s.turns.iter().map(|t| (t.role, t.content.as_str())));
                (render_transcript(turns), 0.0)
            }
            Mode::Memoria => {
                let engine = MemoryEngine::in_memory(config.clone(), self.provider.clone())?;
                let mut last: Option<Timestamp> = None;
                for session in &sessions {
                    for (i, (user, assistant)) in pair_turns(&session.turns).into_iter().enumerate() {
                        let mut at = session.date + Duration::minutes(i as i64);
                        if let Some(prev) = last {
                            at = at.max(prev);
                        }
                        last = Some(at);
                        let request = TurnRequest::new(EVAL_USER, &session.session_id, user, at);
                        let receipt = engine.record_turn(&request, &assistant)?;
                        if let Some(f) = receipt.failures.first() {
                            ingest_error.get_or_insert_with(|| format!("ingest {:?}: {}", f.stage, f.error));
                        }
                    }
                }
                let asked_at = last.map_or(instance.question_date, |l| l.max(instance.question_date));
                let request = TurnRequest::new(
                    EVAL_USER,
                    format!("question-{}", instance.question_id),
                    instance.question.clone(),
                    asked_at,
                );
                let retrieval_start = Instant::now();
                let context = engine.retrieve_context(&request)?;
                (context.rendered_context, retrieval_start.elapsed().as_secs_f64() * 1000.0)
            }
        };
        let ingest_ms = ingest_start.elapsed().as_secs_f64() * 1000.0 - retrieval_ms;

        let answer_start = Instant::now();
        let answered = self.answer(&instance.question, &context);
        let answer_ms = answer_start.elapsed().as_secs_f64() * 1000.0;
        let (answer, correct, error) = match answered {
            Ok(answer) => match self.judge(instance, &answer) {
                Ok(correct) => (answer, correct, ingest_error),
                Err(e) => (answer, false, Some(format!("judge: {e}"))),
            },
            Err(e) => (String::new(), false, Some(format!("answer: {e}"))),
        };
        Ok(Outcome {
            result: InstanceResult {
                question_id: instance.question_id.clone(),
                category: instance.category,
                question: instance.question.clone(),
                ground_truth: instance.answer.clone(),
                answer,
                correct,
                context_tokens: count_tokens(&context),
                error,
            },
            retrieval_ms,
            answer_ms,
            ingest_ms,
        })
    }

    fn answer(&self, question: &str, context: &str) -> Result<String, ProviderError> {
        let prompt = self
            .answer_template
            .render(&[("context", context), ("question", question)]);
        let exchange = ChatExchange::new(
            "You answer questions about a user from the memory you are given.",
            prompt,
            Task::Answer {
                question: question.to_string(),
                context: context.to_string(),
            },
        )
        .with_max_output_tokens(ANSWER_MAX_TOKENS);
        Ok(self.provider.chat_complete(&exchange)?.text.trim().to_string())
    }

    /// The mock provider judges by case-insensitive substring; a live
    /// model gets the judge prompt and must reply yes or no.
    fn judge(&self, instance: &EvalInstance, answer: &str) -> Result<bool, ProviderError> {
        if answer.is_empty() {
            return Ok(false);
        }
        let prompt = self.judge_template.render(&[
            ("question", &instance.question),
            ("ground_truth", &instance.answer),
            ("answer", answer),
        ]);
        let exchange = ChatExchange::new(
            "You grade answers against a reference. Reply yes or no.",
            prompt,
            Task::Judge {
                question: instance.question.clone(),
                answer: answer.to_string(),
                ground_truth: instance.answer.clone(),
            },
        )
        .with_max_output_tokens(4);
        let reply = self.provider.chat_complete(&exchange)?.text;
        Ok(reply.trim().to_ascii_lowercase().starts_with("yes"))
    }
}

fn per_category(results: &[InstanceResult]) -> BTreeMap<Category, CategoryStats> {
    Category::ALL
        .iter()
        .filter(|c| results.iter().any(|r| r.category == **c))
        .map(|c| (*c, CategoryStats::from_results(results.iter().filter(|r| r.category == *c))))
        .collect()
}

const PROFILE_FACTS: &[(&str, &str, &str)] = &[
    ("dog", "is", "Biscuit"),
    ("cat", "is", "Mochi"),
    ("car", "is", "a red Volvo"),
    ("bike", "is", "a blue Trek"),
    ("boat", "is", "the Seagull"),
    ("hometown", "is", "Lisbon"),
    ("sister", "is", "Clara"),
    ("employer", "is", "Northwind"),
    ("dentist", "is", "Dr Okafor"),
    ("neighbor", "is", "Mr Haddad"),
];

/// (item, verb, old place, new place, answer word)
const MOVED_ITEMS: &[(&str, &str, &str, &str, &str)] = &[
    ("shoes", "are", "under the bed", "in the closet", "closet"),
    ("keys", "are", "on the hook", "in the drawer", "drawer"),
    ("passport", "is", "in the safe", "in the desk", "desk"),
    ("umbrella", "is", "by the door", "in the car", "car"),
    ("laptop", "is", "on the shelf", "in the backpack", "backpack"),
    ("wallet", "is", "on the table", "in the jacket", "jacket"),
    ("guitar", "is", "in the attic", "in the studio", "studio"),
    ("camera", "is", "in the bag", "on the tripod", "tripod"),
    ("glasses", "are", "on the nightstand", "in the case", "case"),
    ("notebooks", "are", "in the basement", "on the bookshelf", "bookshelf"),
];

const SMALL_TALK: &[(&str, &str)] = &[
    ("Can you recommend a movie for tonight?", "A light comedy could be a good pick."),
    ("What should I cook for dinner?", "A quick vegetable stir fry works well."),
    ("Any tips for sleeping better?", "Try keeping a regular bedtime."),
];

fn base_date() -> Timestamp {
    Utc.with_ymd_and_hms(2023, 5, 1, 9, 0, 0).single().expect("valid date")
}

fn user_turn(text: String) -> Turn {
    Turn { role: Role::User, content: text }
}

fn assistant_turn(text: &str) -> Turn {
    Turn {
        role: Role::Assistant,
        content: text.to_string(),
    }
}

fn profile_sentence(i: usize) -> String {
    let (subject, verb, value) = PROFILE_FACTS[i % PROFILE_FACTS.len()];
    format!("My {subject} {verb} {value}.")
}

/// A deterministic dataset with planted answers for the offline provider.
///
/// Profile questions ask about one planted fact among unrelated ones.
/// Update questions state where an item is kept, then revise it a week
/// later; the stale statement is worded closer to the question, so only
/// recency weighting recovers the revised answer.
pub fn synthetic_dataset(single_session_user: usize, knowledge_update: usize) -> Vec<EvalInstance> {
    let mut out = Vec::new();
    for i in 0..single_session_user {
        let day = base_date() + Duration::days(i as i64);
        let (subject, _, value) = PROFILE_FACTS[i % PROFILE_FACTS.len()];
        let (chat_q, chat_a) = SMALL_TALK[i % SMALL_TALK.len()];
        let sessions = vec![
            Session {
                session_id: format!("ssu-{i}-a"),
                date: day,
                turns: vec![
                    user_turn(profile_sentence(i + 3)),
                    assistant_turn("Thanks for telling me."),
                    user_turn(chat_q.to_string()),
                    assistant_turn(chat_a),
                ],
            },
            Session {
                session_id: format!("ssu-{i}-b"),
                date: day + Duration::hours(2),
                turns: vec![
                    user_turn(format!("{} I mention it because it came up today.", profile_sentence(i))),
                    assistant_turn("Good to know."),
                    user_turn(profile_sentence(i + 6)),
                    assistant_turn("Noted."),
                ],
            },
        ];
        out.push(EvalInstance {
            question_id: format!("ssu-{i:02}"),
            category: Category::SingleSessionUser,
            question: format!("What is my {subject}?"),
            answer: value.to_string(),
            question_date: day + Duration::days(1),
            sessions,
        });
    }
    for i in 0..knowledge_update {
        let day = base_date() + Duration::days(100 + i as i64);
        let (item, verb, old, new, answer) = MOVED_ITEMS[i % MOVED_ITEMS.len()];
        let (chat_q, chat_a) = SMALL_TALK[i % SMALL_TALK.len()];
        let sessions = vec![
            Session {
                session_id: format!("ku-{i}-a"),
                date: day,
                turns: vec![
                    user_turn(format!("My {item} {verb} kept {old}.")),
                    assistant_turn("Got it."),
                    user_turn(profile_sentence(i)),
                    assistant_turn("Nice."),
                ],
            },
            Session {
                session_id: format!("ku-{i}-b"),
                date: day + Duration::days(7),
                turns: vec![
                    user_turn(chat_q.to_string()),
                    assistant_turn(chat_a),
                    user_turn(format!("My {item} {verb} {new}.")),
                    assistant_turn("Thanks for the update."),
                ],
            },
        ];
        out.push(EvalInstance {
            question_id: format!("ku-{i:02}"),
            category: Category::KnowledgeUpdate,
            question: format!("Where {verb} my {item} kept?"),
            answer: answer.to_string(),
            question_date: day + Duration::days(8),
            sessions,
        });
    }
    out
}
