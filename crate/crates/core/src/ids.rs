//! Deterministic identifiers.
//!
//! Ids are derived from their logical position (owner plus sequence
//! number) so that replaying a transcript into a fresh store reproduces the
//! same ids byte for byte.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn derive(kind: &str, parts: &[&str], seq: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.update(seq.to_le_bytes());
    let digest = hasher.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{}-{hex}", &kind[..1])
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(MessageId);
string_id!(TripletId);

impl MessageId {
    /// Id of the `seq`-th message (0-based) of `(user_name, session_id)`.
    pub fn derive(user_name: &str, session_id: &str, seq: u64) -> Self {
        Self(derive("message", &[user_name, session_id], seq))
    }
}

impl TripletId {
    /// Id of the `seq`-th triplet (0-based) stored for `user_name`.
    pub fn derive(user_name: &str, seq: u64) -> Self {
        Self(derive("triplet", &[user_name], seq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_distinct() {
        assert_eq!(MessageId::derive("u", "s", 0), MessageId::derive("u", "s", 0));
        assert_ne!(MessageId::derive("u", "s", 0), MessageId::derive("u", "s", 1));
        // Length prefixes keep ("a/b","c") and ("a","b/c") apart.
        assert_ne!(MessageId::derive("a/b", "c", 0), MessageId::derive("a", "b/c", 0));
        assert!(TripletId::derive("u", 3).as_str().starts_with("t-"));
        assert!(MessageId::derive("u", "s", 3).as_str().starts_with("m-"));
    }
}
