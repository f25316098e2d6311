//! Utterances exchanged in a session.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::scenario::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    Learner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Prompt text taken from the scenario.
    Scripted,
    /// Follow-up produced by the generation stage.
    Generated,
    LearnerOpen,
    LearnerOption,
}

impl Origin {
    pub fn speaker(self) -> Speaker {
        match self {
            Origin::Scripted | Origin::Generated => Speaker::System,
            Origin::LearnerOpen | Origin::LearnerOption => Speaker::Learner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    pub origin: Origin,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_id: Option<String>,
    pub node_id: NodeId,
    pub timestamp: DateTime<Utc>,
}

impl Turn {
    /// Whitespace-delimited token count.
    pub fn word_count(&self) -> usize {
        word_count(&self.text)
    }

    /// Checks the per-turn invariants: speaker agrees with origin, and an
    /// option id is present exactly for option picks.
    pub fn is_well_formed(&self) -> bool {
        self.speaker == self.origin.speaker() && (self.origin == Origin::LearnerOption) == self.option_id.is_some()
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Source of turn timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always returns the same instant; used for replays and tests.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}
