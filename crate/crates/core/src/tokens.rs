//! Whitespace token accounting.
//!
//! Every token count in this crate (context budgets, mock usage, eval
//! reports) uses this rule so numbers stay comparable across modules.

/// Number of whitespace-separated tokens in `text`.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// The first `n` whitespace tokens of `text`, joined by single spaces.
pub fn first_tokens(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

/// The last `n` whitespace tokens of `text`, joined by single spaces.
pub fn last_tokens(text: &str, n: usize) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let start = tokens.len().saturating_sub(n);
    tokens[start..].join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_runs_of_whitespace_once() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("  a \n\t b  "), 2);
    }

    #[test]
    fn first_and_last() {
        assert_eq!(first_tokens("a b  c d", 2), "a b");
        assert_eq!(last_tokens("a b  c d", 2), "c d");
        assert_eq!(last_tokens("a", 5), "a");
    }
}
