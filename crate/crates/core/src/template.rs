//! Prompt templates with `{slot}` placeholders.

use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    /// Load from `path` when given, else use `default`.
    pub fn load_or(path: Option<&Path>, default: &str) -> std::io::Result<Self> {
        match path {
            Some(p) => Ok(Self::new(std::fs::read_to_string(p)?)),
            None => Ok(Self::new(default)),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Replace every `{name}` with its value. Slots are filled in one pass,
    /// so values containing braces are left alone.
    pub fn render(&self, slots: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let filled = after.find('}').and_then(|close| {
                let name = &after[..close];
                slots
                    .iter()
                    .find(|(slot, _)| *slot == name)
                    .map(|(_, value)| (value, close))
            });
            match filled {
                Some((value, close)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}
