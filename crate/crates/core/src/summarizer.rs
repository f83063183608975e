//! Rolling session summary: one provider call per recorded turn, folding
//! the new (user, assistant) pair into the previous summary.

use serde::{Deserialize, Serialize};

use crate::provider::{ChatExchange, Provider, ProviderError, Task, TokenUsage};
use crate::template::PromptTemplate;

pub const DEFAULT_SUMMARY_TEMPLATE: &str = include_str!("../assets/summary_prompt.txt");

const SUMMARY_SYSTEM: &str = "You write concise, factual conversation summaries.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryUpdate {
    pub prior_summary: Option<String>,
    pub user_text: String,
    pub assistant_text: String,
}

#[derive(Debug, Clone)]
pub struct Summarizer {
    template: PromptTemplate,
    max_tokens: u32,
}

impl Summarizer {
    pub fn new(template: PromptTemplate, max_tokens: u32) -> Self {
        Self { template, max_tokens }
    }

    /// Create (no prior) or extend the summary with one turn.
    pub fn update_summary(
        &self,
        provider: &dyn Provider,
        input: &SummaryUpdate,
    ) -> Result<(String, TokenUsage), ProviderError> {
        if input.user_text.trim().is_empty() || input.assistant_text.trim().is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let prior = input.prior_summary.as_deref().unwrap_or("");
        let turn = format!("User: {}\nAssistant: {}", input.user_text, input.assistant_text);
        let prompt = self
            .template
            .render(&[("prior_summary", prior), ("turn", &turn)]);
        let exchange = ChatExchange::new(
            SUMMARY_SYSTEM,
            prompt,
            Task::Summarize {
                prior: input.prior_summary.clone(),
                user_text: input.user_text.clone(),
                assistant_text: input.assistant_text.clone(),
            },
        )
        .with_max_output_tokens(self.max_tokens);
        let completion = provider.chat_complete(&exchange)?;
        Ok((completion.text.trim().to_string(), completion.usage))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::MockProvider;

    fn summarizer() -> Summarizer {
        Summarizer::new(PromptTemplate::new(DEFAULT_SUMMARY_TEMPLATE), 500)
    }

    fn update(prior: Option<&str>, user: &str, assistant: &str) -> SummaryUpdate {
        SummaryUpdate {
            prior_summary: prior.map(str::to_string),
            user_text: user.into(),
            assistant_text: assistant.into(),
        }
    }

    #[test]
    fn creates_then_appends() {
        let p = MockProvider::new(16, 0);
        let s = summarizer();
        let (first, _) = s.update_summary(&p, &update(None, "I live in Paris", "Lovely")).unwrap();
        assert_eq!(first, "User said: I live in Paris. Assistant said: Lovely.");
        let (second, _) = s
            .update_summary(&p, &update(Some(&first), "My dog is Rex", "Cute"))
            .unwrap();
        assert!(second.starts_with(&first));
        assert!(second.ends_with("User said: My dog is Rex. Assistant said: Cute."));
    }

    #[test]
    fn three_updates_fold() {
        // Fold oracle: apply the mock sentence rule by hand three times.
        let turns = [("a b c", "x"), ("d e", "y z"), ("f", "w")];
        let mut expected = String::new();
        for (u, a) in turns {
            if !expected.is_empty() {
                expected.push(' ');
            }
            expected.push_str(&format!("User said: {u}. Assistant said: {a}."));
        }
        let p = MockProvider::new(16, 0);
        let s = summarizer();
        let mut summary = None;
        for (u, a) in turns {
            summary = Some(s.update_summary(&p, &update(summary.as_deref(), u, a)).unwrap().0);
        }
        assert_eq!(summary.unwrap(), expected);
    }

    #[test]
    fn empty_sides_rejected() {
        let p = MockProvider::new(16, 0);
        assert_eq!(
            summarizer().update_summary(&p, &update(None, "hi", " ")),
            Err(ProviderError::EmptyText)
        );
    }
}
