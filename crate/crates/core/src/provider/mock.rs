//! Deterministic offline provider.
//!
//! Rules, all pure functions of the request:
//!
//! - extraction: pattern matcher over `X is Y`, `my X is Y` and `I <verb> X`
//!   sentences, one `subject|predicate|object` line per match (`NONE` when
//!   nothing matches);
//! - summarization: prior summary followed by
//!   `User said: <12 tokens>. Assistant said: <12 tokens>.`, with the oldest
//!   sentences dropped once the result exceeds `max_output_tokens`;
//! - answering: the heaviest knowledge line that shares a content word with
//!   the question, falling back to the last overlapping plain context line;
//! - judging: case-insensitive substring match of the ground truth;
//! - embeddings: hashed bag of lowercased tokens into `dimension` buckets,
//!   L2-normalized.

use crate::config::ProviderKind;
use crate::tokens::{count_tokens, first_tokens};

use super::{ChatExchange, Completion, Embedding, Provider, ProviderError, Task, TokenUsage};

const SNIPPET_TOKENS: usize = 12;

const COPULAS: &[&str] = &["is", "are", "am", "was", "were"];

const PREPOSITIONS: &[&str] = &[
    "in", "on", "under", "at", "from", "with", "to", "of", "near", "inside", "behind", "by",
    "for", "into", "above", "below",
];

const QUESTION_WORDS: &[&str] = &[
    "what", "where", "when", "who", "whom", "whose", "why", "how", "which", "do", "does", "did",
    "can", "could", "would", "should", "will",
];

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "i", "me", "my", "mine", "you", "your", "we", "our", "it", "its", "is",
    "are", "am", "was", "were", "be", "been", "do", "does", "did", "what", "where", "when", "who",
    "whom", "whose", "why", "how", "which", "to", "of", "in", "on", "at", "for", "with", "and",
    "or", "that", "this", "these", "those", "now", "currently", "still", "kept", "keep", "have",
    "has", "had", "can", "could", "would", "should", "will", "there", "about", "tell", "remind",
    "please",
];

/// Offline provider whose every output is a pure function of its input.
#[derive(Debug, Clone)]
pub struct MockProvider {
    dimension: usize,
    seed: u64,
}

impl MockProvider {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "mock embedding dimension must be positive");
        Self { dimension, seed }
    }

    fn bucket(&self, token: &str) -> usize {
        // FNV-1a over the seed bytes followed by the token bytes.
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash = OFFSET;
        for byte in self.seed.to_le_bytes().iter().chain(token.as_bytes()) {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(PRIME);
        }
        (hash % self.dimension as u64) as usize
    }

    fn reply(&self, exchange: &ChatExchange) -> String {
        match &exchange.task {
            Task::General => format!(
                "[mock reply] {}",
                first_tokens(&exchange.user_text, SNIPPET_TOKENS)
            ),
            Task::ExtractTriplets { message } => {
                let lines: Vec<String> = extract_pattern_triplets(message)
                    .into_iter()
                    .map(|[s, p, o]| format!("{s}|{p}|{o}"))
                    .collect();
                if lines.is_empty() {
                    "NONE".to_string()
                } else {
                    lines.join("\n")
                }
            }
            Task::Summarize { prior, user_text, assistant_text } => mock_summary(
                prior.as_deref(),
                user_text,
                assistant_text,
                exchange.max_output_tokens as usize,
            ),
            Task::Answer { question, context } => mock_answer(question, context),
            Task::Judge { answer, ground_truth, .. } => {
                if substring_match(answer, ground_truth) {
                    "yes".to_string()
                } else {
                    "no".to_string()
                }
            }
        }
    }
}

impl Provider for MockProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Mock
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn chat_complete(&self, exchange: &ChatExchange) -> Result<Completion, ProviderError> {
        exchange.validate()?;
        let text = self.reply(exchange);
        let prompt = count_tokens(&exchange.system_text) + count_tokens(&exchange.user_text);
        let usage = TokenUsage::new(prompt as u64, count_tokens(&text) as u64);
        Ok(Completion { text, usage })
    }

    fn embed(&self, text: &str) -> Result<Embedding, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let mut values = vec![0.0f64; self.dimension];
        for raw in text.split_whitespace() {
            let lowered = raw.to_lowercase();
            let trimmed = trim_punctuation(&lowered);
            let token = if trimmed.is_empty() { lowered.as_str() } else { trimmed };
            values[self.bucket(token)] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        Embedding::new(values)
    }
}

fn trim_punctuation(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

fn is_one_of(token: &str, set: &[&str]) -> bool {
    let lowered = token.to_lowercase();
    set.contains(&lowered.as_str())
}

/// Sentences of `text` paired with whether they ended in a question mark.
fn sentences(text: &str) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        match c {
            '.' | '!' | '?' | ';' | '\n' => {
                out.push((std::mem::take(&mut current), c == '?'));
            }
            _ => current.push(c),
        }
    }
    out.push((current, false));
    out.into_iter()
        .map(|(s, q)| (s.trim().trim_matches(',').trim().to_string(), q))
        .filter(|(s, _)| !s.is_empty())
        .collect()
}

/// The pattern extractor behind the mock's triplet-extraction answers.
///
/// Per sentence (questions skipped):
/// - `I <verb> [prep] X` gives `(I, <verb> [prep], X)`;
/// - otherwise the first copula splits `X <copula> [prep] Y` into
///   `(X, <copula> [prep], Y)`, which covers `my X is Y`.
pub fn extract_pattern_triplets(text: &str) -> Vec<[String; 3]> {
    let mut out = Vec::new();
    for (sentence, is_question) in sentences(text) {
        if is_question {
            continue;
        }
        let tokens: Vec<String> = sentence
            .split_whitespace()
            .map(|t| t.replace('|', "/"))
            .collect();
        if tokens.len() < 3 || is_one_of(&tokens[0], QUESTION_WORDS) {
            continue;
        }
        if let Some(triplet) = first_person(&tokens).or_else(|| copula(&tokens)) {
            out.push(triplet);
        }
    }
    out
}

fn split_predicate(tokens: &[String], verb_at: usize, subject: String) -> Option<[String; 3]> {
    let mut object_at = verb_at + 1;
    let mut predicate = tokens[verb_at].clone();
    if object_at + 1 < tokens.len() && is_one_of(&tokens[object_at], PREPOSITIONS) {
        predicate = format!("{predicate} {}", tokens[object_at]);
        object_at += 1;
    }
    let object = tokens[object_at..].join(" ");
    let object = object.trim_matches(',').trim().to_string();
    if subject.is_empty() || object.is_empty() {
        return None;
    }
    Some([subject, predicate, object])
}

fn first_person(tokens: &[String]) -> Option<[String; 3]> {
    if tokens[0] != "I" && tokens[0] != "i" {
        return None;
    }
    if is_one_of(&tokens[1], COPULAS) {
        return None;
    }
    split_predicate(tokens, 1, tokens[0].clone())
}

fn copula(tokens: &[String]) -> Option<[String; 3]> {
    let at = tokens
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, t)| is_one_of(t, COPULAS))
        .map(|(i, _)| i)?;
    if at + 1 >= tokens.len() {
        return None;
    }
    let subject = tokens[..at].join(" ").trim_matches(',').trim().to_string();
    split_predicate(tokens, at, subject)
}

fn snippet(text: &str) -> String {
    first_tokens(text, SNIPPET_TOKENS)
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .to_string()
}

fn mock_summary(prior: Option<&str>, user_text: &str, assistant_text: &str, max_tokens: usize) -> String {
    let sentence = format!(
        "User said: {}. Assistant said: {}.",
        snippet(user_text),
        snippet(assistant_text)
    );
    let full = match prior.map(str::trim).filter(|p| !p.is_empty()) {
        Some(p) => format!("{p} {sentence}"),
        None => sentence,
    };
    bound_summary(&full, max_tokens.max(1))
}

/// Drop whole leading sentences until the text fits `max_tokens`; a single
/// oversized sentence keeps its last `max_tokens` tokens.
fn bound_summary(text: &str, max_tokens: usize) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() <= max_tokens {
        return tokens.join(" ");
    }
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.ends_with(['.', '!', '?']) && tokens.len() - (i + 1) <= max_tokens {
            start = i + 1;
            break;
        }
    }
    if start == 0 || start == tokens.len() {
        start = tokens.len() - max_tokens;
    }
    tokens[start..].join(" ")
}

fn content_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| trim_punctuation(&t.to_lowercase()).to_string())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

fn overlap(question: &[String], text: &str) -> usize {
    let words = content_words(text);
    question.iter().filter(|q| words.contains(q)).count()
}

/// Parse a rendered knowledge line `(s, p, o) [weight=0.1234]`.
fn knowledge_line(line: &str) -> Option<(String, f64)> {
    let line = line.trim();
    let inner = line.strip_prefix('(')?;
    let (body, weight) = inner.rsplit_once(") [weight=")?;
    let weight: f64 = weight.strip_suffix(']')?.parse().ok()?;
    Some((body.replace(", ", " "), weight))
}

fn mock_answer(question: &str, context: &str) -> String {
    let wanted = content_words(question);
    let mut best: Option<(String, f64)> = None;
    let mut fallback: Option<(String, usize)> = None;
    for line in context.lines() {
        if let Some((fact, weight)) = knowledge_line(line) {
            if overlap(&wanted, &fact) == 0 {
                continue;
            }
            if best.as_ref().is_none_or(|(_, w)| weight > *w) {
                best = Some((fact, weight));
            }
        } else if !line.trim_start().starts_with('[') {
            let score = overlap(&wanted, line);
            if score > 0 && fallback.as_ref().is_none_or(|(_, s)| score >= *s) {
                fallback = Some((line.trim().to_string(), score));
            }
        }
    }
    match (best, fallback) {
        (Some((fact, _)), _) => format!("From memory: {fact}"),
        (None, Some((line, _))) => format!("From context: {line}"),
        (None, None) => "I don't know.".to_string(),
    }
}

/// Case-insensitive containment of `needle` in `haystack`.
pub(crate) fn substring_match(haystack: &str, needle: &str) -> bool {
    let needle = needle.trim().to_lowercase();
    !needle.is_empty() && haystack.to_lowercase().contains(&needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock() -> MockProvider {
        MockProvider::new(256, 0)
    }

    fn extract(text: &str) -> Vec<(String, String, String)> {
        extract_pattern_triplets(text)
            .into_iter()
            .map(|[s, p, o]| (s, p, o))
            .collect()
    }

    fn t(s: &str, p: &str, o: &str) -> (String, String, String) {
        (s.into(), p.into(), o.into())
    }

    #[test]
    fn extracts_copula_with_preposition() {
        assert_eq!(
            extract("my shoes are under the bed"),
            vec![t("my shoes", "are under", "the bed")]
        );
    }

    #[test]
    fn extracts_first_person_and_possessive() {
        assert_eq!(
            extract("I live in Paris. My dog is Rex"),
            vec![t("I", "live in", "Paris"), t("My dog", "is", "Rex")]
        );
        assert_eq!(
            extract("I completed my degree in 2023!"),
            vec![t("I", "completed", "my degree in 2023")]
        );
    }

    #[test]
    fn skips_questions_and_noise() {
        assert!(extract("????").is_empty());
        assert!(extract("Where are my shoes?").is_empty());
        assert!(extract("hello there").is_empty());
        assert!(extract("I am").is_empty());
    }

    #[test]
    fn pipes_never_leak_into_fields() {
        for [s, p, o] in extract_pattern_triplets("my a|b is c|d") {
            assert!(!s.contains('|') && !p.contains('|') && !o.contains('|'));
        }
    }

    #[test]
    fn general_reply_is_templated() {
        let c = mock()
            .chat_complete(&ChatExchange::new("", "hello", Task::General))
            .unwrap();
        assert_eq!(c.text, "[mock reply] hello");
        assert_eq!(c.usage, TokenUsage::new(1, 3));
    }

    #[test]
    fn extraction_without_match_says_none() {
        let ex = ChatExchange::new("", "????", Task::ExtractTriplets { message: "????".into() });
        assert_eq!(mock().chat_complete(&ex).unwrap().text, "NONE");
    }

    #[test]
    fn summary_creation_and_append() {
        let first = mock_summary(None, "I live in Paris.", "Nice city!", 200);
        assert_eq!(first, "User said: I live in Paris. Assistant said: Nice city.");
        let second = mock_summary(Some(&first), "My dog is Rex", "Cute", 200);
        assert_eq!(
            second,
            "User said: I live in Paris. Assistant said: Nice city. \
             User said: My dog is Rex. Assistant said: Cute."
        );
    }

    #[test]
    fn summary_snippets_take_twelve_tokens() {
        let long = (1..=20).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let s = mock_summary(None, &long, "ok", 200);
        assert_eq!(
            s,
            "User said: w1 w2 w3 w4 w5 w6 w7 w8 w9 w10 w11 w12. Assistant said: ok."
        );
    }

    #[test]
    fn summary_bound_drops_oldest_sentences() {
        let mut s: Option<String> = None;
        for i in 0..10 {
            s = Some(mock_summary(s.as_deref(), &format!("turn {i}"), "fine", 20));
            assert!(count_tokens(s.as_ref().unwrap()) <= 20);
        }
        let s = s.unwrap();
        assert!(s.ends_with("User said: turn 9. Assistant said: fine."), "{s}");
        assert!(!s.contains("turn 0"));
    }

    #[test]
    fn answer_prefers_heaviest_relevant_fact() {
        let context = "[SESSION SUMMARY]\nnone\n[USER KNOWLEDGE]\n\
            (my shoes, are under, the bed) [weight=0.4950]\n\
            (my shoes, are in, the closet) [weight=0.5050]\n\
            (My dog, is, Rex) [weight=0.9000]\n";
        assert_eq!(
            mock_answer("Where are my shoes?", context),
            "From memory: my shoes are in the closet"
        );
    }

    #[test]
    fn answer_ties_keep_context_order() {
        let context = "[USER KNOWLEDGE]\n(a shoes, is, x) [weight=0.5000]\n(b shoes, is, y) [weight=0.5000]";
        assert_eq!(mock_answer("shoes?", context), "From memory: a shoes is x");
    }

    #[test]
    fn answer_falls_back_to_plain_lines() {
        let context = "user: my car is red\nassistant: ok\nuser: my car is blue";
        assert_eq!(mock_answer("what color is my car", context), "From context: user: my car is blue");
        assert_eq!(mock_answer("what color is my car", ""), "I don't know.");
    }

    #[test]
    fn judge_is_case_insensitive_substring() {
        assert!(substring_match("It is in the Closet.", "closet"));
        assert!(!substring_match("under the bed", "closet"));
        assert!(!substring_match("anything", "  "));
    }

    #[test]
    fn embeddings_are_unit_and_count_invariant() {
        let m = mock();
        let a = m.embed("a a").unwrap();
        let b = m.embed("a").unwrap();
        assert_eq!(a, b);
        for text in ["a", "hello world", "my shoes are under the bed", "????"] {
            assert!((m.embed(text).unwrap().norm() - 1.0).abs() < 1e-9);
        }
        assert_eq!(m.embed("  "), Err(ProviderError::EmptyText));
    }

    #[test]
    fn punctuation_does_not_change_buckets() {
        let m = mock();
        assert_eq!(m.embed("Shoes?").unwrap(), m.embed("shoes").unwrap());
    }

    #[test]
    fn distinct_buckets_are_orthogonal() {
        // FNV-1a buckets computed independently (Python) for seed 0, D = 256.
        let m = mock();
        assert_eq!(m.bucket("apple"), 223);
        assert_eq!(m.bucket("zebra"), 207);
        let a = m.embed("apple").unwrap();
        let z = m.embed("zebra").unwrap();
        let cos: f64 = a.values().iter().zip(z.values()).map(|(x, y)| x * y).sum();
        assert!(cos < 1.0);
        assert_eq!(cos, 0.0);
    }

    #[test]
    fn seed_changes_hashing() {
        let a = MockProvider::new(256, 0);
        let b = MockProvider::new(256, 7);
        let words = ["alpha", "beta", "gamma", "delta", "epsilon"];
        assert!(words.iter().any(|w| a.bucket(w) != b.bucket(w)));
    }

    #[test]
    fn deterministic_bytes() {
        let m = mock();
        let ex = ChatExchange::new("s", "u", Task::Summarize {
            prior: Some("Earlier.".into()),
            user_text: "I like tea".into(),
            assistant_text: "Noted".into(),
        });
        let a = serde_json::to_vec(&m.chat_complete(&ex).unwrap()).unwrap();
        let b = serde_json::to_vec(&m.chat_complete(&ex).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
