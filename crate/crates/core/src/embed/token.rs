use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_display_name, label_id, LabeledActivity};

/// Embedding vocabulary unit: (activity cluster, developer, subsystem).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActivityToken {
    pub label: usize,
    pub sender_id: String,
    pub subsystem: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenGranularity {
    #[default]
    LabelSenderSubsystem,
    /// Drops the sender, pooling developers within a subsystem.
    LabelSubsystem,
}

impl ActivityToken {
    pub fn new(label: usize, sender_id: impl Into<String>, subsystem: impl Into<String>) -> Self {
        Self { label, sender_id: sender_id.into(), subsystem: subsystem.into() }
    }

    pub fn from_activity(a: &LabeledActivity, granularity: TokenGranularity) -> Self {
        match granularity {
            TokenGranularity::LabelSenderSubsystem => Self::new(a.label, &a.sender_id, &a.subsystem),
            TokenGranularity::LabelSubsystem => Self::new(a.label, "", &a.subsystem),
        }
    }

    /// Display initialism such as `CCGAU`: initials of the activity name,
    /// the developer and the first listed subsystem area. `label_names`
    /// are cluster names (`Y_0 (Code Contribution)`); without one the label
    /// renders as `Y0`.
    pub fn initialism(&self, label_names: &[String]) -> String {
        let label = match label_names.get(self.label) {
            Some(name) => initials(cluster_display_name(name)),
            None => initials(&label_id(self.label)),
        };
        let area = self.subsystem.split(',').next().unwrap_or("");
        format!("{label}{}{}", initials(&self.sender_id), initials(area))
    }
}

impl fmt::Display for ActivityToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", label_id(self.label), self.sender_id, self.subsystem)
    }
}

fn initials(text: &str) -> String {
    text.split(|c: char| !c.is_alphanumeric())
        .filter_map(|w| w.chars().next())
        .flat_map(char::to_uppercase)
        .collect()
}

/// Tokens of one slice in first-appearance order with per-token event counts.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    pub tokens: Vec<ActivityToken>,
    pub counts: Vec<usize>,
    index: HashMap<ActivityToken, usize>,
}

impl Vocabulary {
    /// Returns the vocabulary and the token id of every event.
    pub fn build(events: &[LabeledActivity], granularity: TokenGranularity) -> (Self, Vec<usize>) {
        let mut vocab = Vocabulary::default();
        let ids = events
            .iter()
            .map(|e| vocab.insert(ActivityToken::from_activity(e, granularity)))
            .collect();
        (vocab, ids)
    }

    fn insert(&mut self, token: ActivityToken) -> usize {
        if let Some(&id) = self.index.get(&token) {
            self.counts[id] += 1;
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        self.counts.push(1);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
