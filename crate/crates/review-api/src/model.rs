use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five rubric categories, each scored 1 to 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Clarity,
    Conciseness,
    Correctness,
    CitationsContext,
    Contribution,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Clarity,
        Category::Conciseness,
        Category::Correctness,
        Category::CitationsContext,
        Category::Contribution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Clarity => "clarity",
            Category::Conciseness => "conciseness",
            Category::Correctness => "correctness",
            Category::CitationsContext => "citations_context",
            Category::Contribution => "contribution",
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

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

/// An extraction output under review. `method` and `model` are never sent
/// to evaluators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub virus: String,
    pub protein: String,
    pub mutations: Vec<String>,
    pub reasoning: String,
    pub method: String,
    pub model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Completed,
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(Status::Pending),
            "completed" => Ok(Status::Completed),
            _ => Err(format!("unknown status {s:?}; expected pending or completed")),
        }
    }
}

/// Evaluator-facing view of an item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub virus: String,
    pub protein: String,
    pub mutations: Vec<String>,
    pub reasoning: String,
    pub status: Status,
}

impl ItemView {
    pub fn new(item: &ReviewItem, status: Status) -> Self {
        Self {
            item_id: item.item_id.clone(),
            virus: item.virus.clone(),
            protein: item.protein.clone(),
            mutations: item.mutations.clone(),
            reasoning: item.reasoning.clone(),
            status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluation {
    pub item_id: String,
    pub evaluator_id: String,
    pub scores: BTreeMap<Category, u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub submitted_at: String,
}

/// Submission body; validated field by field so errors can name the
/// offending category.
#[derive(Debug, Deserialize)]
pub struct Submission {
    #[serde(default)]
    pub scores: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvalidSubmission {
    pub category: Option<String>,
    pub message: String,
}

impl Submission {
    pub fn validate(&self) -> Result<BTreeMap<Category, u8>, InvalidSubmission> {
        for key in self.scores.keys() {
            if key.parse::<Category>().is_err() {
                return Err(InvalidSubmission {
                    category: Some(key.clone()),
                    message: format!("unknown category {key:?}"),
                });
            }
        }
        let mut out = BTreeMap::new();
        for c in Category::ALL {
            let invalid = |message: String| InvalidSubmission {
                category: Some(c.to_string()),
                message,
            };
            let value = self
                .scores
                .get(c.as_str())
                .ok_or_else(|| invalid(format!("missing score for {c}")))?;
            let score = value
                .as_u64()
                .filter(|s| (1..=5).contains(s))
                .ok_or_else(|| invalid(format!("score for {c} must be an integer from 1 to 5, got {value}")))?;
            out.insert(c, score as u8);
        }
        Ok(out)
    }
}
