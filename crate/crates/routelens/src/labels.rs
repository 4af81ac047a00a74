//! Category labels for rendering (`labels.json`).
//!
//! ```json
//! {"categories": [
//!   {"name": "time separator", "seq_ids": [20, 21], "token_ids": [7]},
//!   {"name": "first block", "token_ranges": [[0, 120]]}
//! ]}
//! ```
//!
//! A token belongs to a category when its sequence is listed or its capture
//! index falls in one of the half-open ranges (every token when neither is
//! given), and, if `token_ids` is non-empty, its id is listed.

use routelens_core::TokenMeta;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seq_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_ranges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub categories: Vec<CategorySpec>,
}

impl CategorySpec {
    pub fn contains(&self, index: usize, meta: &TokenMeta) -> bool {
        let located = (self.seq_ids.is_empty() && self.token_ranges.is_empty())
            || self.seq_ids.contains(&meta.seq_id)
            || self
                .token_ranges
                .iter()
                .any(|&(a, b)| (a..b).contains(&index));
        located && (self.token_ids.is_empty() || self.token_ids.contains(&meta.token_id))
    }
}

impl Labels {
    /// Checks names are unique and ranges fit a capture of `tokens` tokens.
    pub fn validate(&self, tokens: usize) -> Result<(), String> {
        for (i, c) in self.categories.iter().enumerate() {
            if self.categories[..i].iter().any(|o| o.name == c.name) {
                return Err(format!("duplicate category {:?}", c.name));
            }
            if let Some(&(a, b)) = self.categories[i]
                .token_ranges
                .iter()
                .find(|&&(a, b)| a > b || b > tokens)
            {
                return Err(format!(
                    "category {:?}: token range {a}..{b} outside 0..{tokens}",
                    c.name
                ));
            }
        }
        Ok(())
    }

    /// Member token indices of each category, in capture order.
    pub fn members(&self, meta: &[TokenMeta]) -> Vec<(String, Vec<usize>)> {
        self.categories
            .iter()
            .map(|c| {
                let idx = meta
                    .iter()
                    .enumerate()
                    .filter(|(i, m)| c.contains(*i, m))
                    .map(|(i, _)| i)
                    .collect();
                (c.name.clone(), idx)
            })
            .collect()
    }
}
