//! The fetch/no-fetch policy: state construction and serialization, a small
//! dropout network with analytic gradients, action sampling, MC-dropout
//! inference, and REINFORCE training with discounted returns and entropy
//! regularization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, RetrievalIndex};
use crate::error::{Error, Result};
use crate::util::write_atomic;

mod net;
mod train;

pub use net::{
    pg_loss, DropoutMode, PgExample, PolicyGrads, PolicyNet, SampledAction, ACTION_DIM,
    FEATURE_DIM, HIDDEN_DIM,
};
pub use train::{train_policy, PolicyTrainConfig};

/// The two policy actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Fetch,
    NoFetch,
}

impl Action {
    pub fn token(&self) -> &'static str {
        match self {
            Action::Fetch => "[FETCH]",
            Action::NoFetch => "[NO_FETCH]",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "[FETCH]" => Some(Action::Fetch),
            "[NO_FETCH]" => Some(Action::NoFetch),
            _ => None,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Action::Fetch => 0,
            Action::NoFetch => 1,
        }
    }
}

/// Policy input: up to two previous (query, action) pairs in chronological
/// order, the current query, and the derived feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub prev: Vec<(String, Action)>,
    pub current_query: String,
    pub features: [f64; FEATURE_DIM],
}

impl PolicyState {
    /// The canonical on-disk state string; see [`serialize_state`].
    pub fn serialized(&self) -> String {
        serialize_state(&self.prev, &self.current_query)
    }
}

/// Renders a state as
/// `[CLS] <q1> [SEP] <ACTION1> <q2> [SEP] <ACTION2> <q3> [SEP]`,
/// with earlier queries first. Query texts must not contain the reserved
/// `[CLS]`/`[SEP]`/action tokens.
pub fn serialize_state(prev: &[(String, Action)], current_query: &str) -> String {
    let mut out = String::from("[CLS] ");
    for (query, action) in prev {
        out.push_str(query);
        out.push_str(" [SEP] ");
        out.push_str(action.token());
        out.push(' ');
    }
    out.push_str(current_query);
    out.push_str(" [SEP]");
    out
}

/// Inverse of [`serialize_state`].
pub fn parse_state(serialized: &str) -> Result<(Vec<(String, Action)>, String)> {
    let invalid = |detail: &str| Error::Validation(format!("bad state string: {detail}"));
    let body = serialized
        .strip_prefix("[CLS] ")
        .ok_or_else(|| invalid("missing [CLS] prefix"))?;
    let body = body
        .strip_suffix(" [SEP]")
        .ok_or_else(|| invalid("missing [SEP] suffix"))?;
    let mut prev = Vec::new();
    let mut segments = body.split(" [SEP] ");
    let mut pending = segments
        .next()
        .ok_or_else(|| invalid("empty body"))?
        .to_string();
    for segment in segments {
        let (token, rest) = segment
            .split_once(' ')
            .ok_or_else(|| invalid("segment lacks an action token"))?;
        let action = Action::from_token(token).ok_or_else(|| invalid("unknown action token"))?;
        prev.push((pending, action));
        pending = rest.to_string();
    }
    if prev.len() > 2 {
        return Err(invalid("more than two previous queries"));
    }
    Ok((prev, pending))
}

/// Builds the policy state for `current_query`.
///
/// Features, with "newest previous" the immediately preceding step:
/// 1. top-1 retrieval score of the current query
/// 2. top-1 score of the newest previous query (0 if absent)
/// 3. top-1 score of the older previous query (0 if absent)
/// 4. base cosine(current, newest previous query) (0 if absent)
/// 5. base cosine(current, older previous query) (0 if absent)
/// 6. newest previous action: +1 FETCH, 0 NO_FETCH, -1 absent
/// 7. older previous action, same encoding
/// 8. max projected similarity between the current query and the QnA text of
///    any FAQ id in `history_contexts` (0 if none)
pub fn featurize(
    prev: &[(String, Action)],
    current_query: &str,
    index: &RetrievalIndex<'_>,
    history_contexts: &[String],
) -> Result<PolicyState> {
    debug_assert!(prev.len() <= 2);
    let top1 = |text: &str| -> Result<f64> { Ok(index.query(text, 1)?.top1().1) };

    let current_vec = index.store().embed(current_query);
    let mut features = [0.0f64; FEATURE_DIM];
    features[0] = top1(current_query)?;
    features[5] = -1.0;
    features[6] = -1.0;

    // prev is chronological; walk newest-first into the feature slots.
    for (slot, (query, action)) in prev.iter().rev().enumerate().take(2) {
        features[1 + slot] = top1(query)?;
        features[3 + slot] = cosine(&current_vec, &index.store().embed(query))?;
        features[5 + slot] = match action {
            Action::Fetch => 1.0,
            Action::NoFetch => 0.0,
        };
    }

    if !history_contexts.is_empty() {
        let projected = index.project_query(current_query)?;
        let mut best = f64::NEG_INFINITY;
        for faq_id in history_contexts {
            best = best.max(index.similarity_to(&projected, faq_id)?);
        }
        features[7] = best;
    }

    Ok(PolicyState {
        prev: prev.to_vec(),
        current_query: current_query.to_string(),
        features,
    })
}

/// Discounted suffix sums: G_t = sum_{k>=0} gamma^k * r_{t+k}, starting at
/// the reward earned at step t.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    assert!(
        (0.0..=1.0).contains(&gamma),
        "gamma must be in [0, 1], got {gamma}"
    );
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (idx, &reward) in rewards.iter().enumerate().rev() {
        acc = reward + gamma * acc;
        out[idx] = acc;
    }
    out
}

/// One (state, action, reward) step of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub state: PolicyState,
    pub action: Action,
    pub reward: f64,
    pub log_prob: f64,
}

/// A full sampled episode over one session script.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub session_id: String,
    pub sample_index: usize,
    pub steps: Vec<RolloutStep>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn from_steps(
        session_id: impl Into<String>,
        sample_index: usize,
        steps: Vec<RolloutStep>,
        gamma: f64,
    ) -> Self {
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
        Self {
            session_id: session_id.into(),
            sample_index,
            returns: returns(&rewards, gamma),
            steps,
        }
    }
}

/// One line of the rollout dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub state_serialized: String,
    pub action: Action,
    pub reward: f64,
    pub session_id: String,
    pub step_index: usize,
}

/// Writes trajectories as JSON lines of
/// `{state_serialized, action, reward, session_id, step_index}`.
pub fn write_rollout_jsonl(trajectories: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for trajectory in trajectories {
        for (step_index, step) in trajectory.steps.iter().enumerate() {
            let record = RolloutRecord {
                state_serialized: step.state.serialized(),
                action: step.action,
                reward: step.reward,
                session_id: trajectory.session_id.clone(),
                step_index,
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Reads a rollout dataset written by [`write_rollout_jsonl`].
pub fn read_rollout_jsonl(path: impl AsRef<Path>) -> Result<Vec<RolloutRecord>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                detail: e.to_string(),
            })
        })
        .collect()
}
