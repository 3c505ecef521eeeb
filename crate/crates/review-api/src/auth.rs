//! Pre-shared bearer tokens mapped to evaluator ids and roles.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Evaluator,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub evaluator_id: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub evaluator_id: String,
    pub role: Role,
}

#[derive(Debug, Clone, Default)]
pub struct Tokens {
    by_token: HashMap<String, Principal>,
}

#[derive(Deserialize)]
struct TokenFile {
    tokens: Vec<TokenEntry>,
}

impl Tokens {
    pub fn new(entries: impl IntoIterator<Item = TokenEntry>) -> Self {
        Self {
            by_token: entries
                .into_iter()
                .map(|e| {
                    (
                        e.token,
                        Principal {
                            evaluator_id: e.evaluator_id,
                            role: e.role,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Read `{"tokens": [{"token", "evaluator_id", "role"}, ...]}`.
    pub fn read_entries(path: impl AsRef<Path>) -> Result<Vec<TokenEntry>, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let file: TokenFile = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if file.tokens.iter().any(|t| t.token.is_empty()) {
            return Err(format!("{}: empty token", path.display()));
        }
        Ok(file.tokens)
    }

    pub fn is_empty(&self) -> bool {
        self.by_token.is_empty()
    }

    /// Resolve an `Authorization` header value.
    pub fn authenticate(&self, header: Option<&str>) -> Option<Principal> {
        let token = header?.strip_prefix("Bearer ")?.trim();
        self.by_token.get(token).cloned()
    }
}
