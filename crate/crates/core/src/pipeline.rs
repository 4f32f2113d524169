//! The RAG environment: conversation history, prompt assembly, a
//! deterministic simulated LLM behind a pluggable client boundary, the
//! reward oracle, token accounting, and trajectory generation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::corpus::FaqCorpus;
use crate::error::{Error, Result};
use crate::gate::Route;
use crate::policy::Action;

mod client;
mod env;
mod tokens;

pub use client::{
    greeting_text, oracle_evaluate, refusal_text, simulated_llm, AnswerClient, AnswerRequest,
    AnswerResponse, EvaluatorClient, EvaluatorRequest, EvaluatorResponse, TextEvaluator,
};
pub use env::{
    evaluate_setting, rollout, rollout_and_train, run_step, write_ledger_csv, write_trace_csv,
    Components, LlmBackend, RolloutTrainConfig, RunMode, SessionEnv, SettingReport, StepInput,
    StepOutcome, TraceRow,
};
pub use tokens::count_tokens;

/// One answered query as kept in the conversation window.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationTurn {
    pub query: String,
    pub answer: String,
    /// FAQ ids whose text was made available at this turn: the retrieved
    /// top-k for FETCH, the emitted FAQ for STATIC, empty for NO_FETCH.
    pub fetched_context: Vec<String>,
    pub route: Route,
}

/// The most recent two conversation turns, FIFO-evicted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    turns: VecDeque<ConversationTurn>,
}

pub const HISTORY_CAPACITY: usize = 2;

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, turn: ConversationTurn) {
        debug_assert!(
            turn.route != Route::NoFetch || turn.fetched_context.is_empty(),
            "NO_FETCH turns carry no context"
        );
        if self.turns.len() == HISTORY_CAPACITY {
            self.turns.pop_front();
        }
        self.turns.push_back(turn);
    }

    /// Turns oldest-first.
    pub fn turns(&self) -> impl Iterator<Item = &ConversationTurn> {
        self.turns.iter()
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// FAQ ids available from the window, oldest turn first, deduplicated.
    pub fn context_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for turn in &self.turns {
            for id in &turn.fetched_context {
                if !ids.contains(id) {
                    ids.push(id.clone());
                }
            }
        }
        ids
    }
}

/// One FAQ rendered into the prompt context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFaq {
    pub faq_id: String,
    pub question: String,
    pub answer: String,
}

impl ContextFaq {
    fn rendered(&self) -> String {
        format!("Context: Q: {} A: {}", self.question, self.answer)
    }
}

/// Fixed instruction strings around every prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub system_text: String,
    pub post_prompt: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            system_text: "You are a support assistant for credit card questions. \
                          Answer using the FAQ context and the conversation history. \
                          If the information is not available, say that you do not know."
                .to_string(),
            post_prompt: "Instruction: Answer only using the information available.".to_string(),
        }
    }
}

/// A fully assembled LLM prompt plus its token count.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub post_prompt: String,
    pub history: History,
    pub context_faqs: Vec<ContextFaq>,
    pub current_query: String,
    rendered: String,
    input_tokens: usize,
}

impl PromptBundle {
    pub fn rendered(&self) -> &str {
        &self.rendered
    }

    pub fn input_tokens(&self) -> usize {
        self.input_tokens
    }
}

/// Renders the prompt in a fixed order: system text, history turns
/// oldest-first (query, that turn's context FAQs, answer), current context
/// FAQs, current query, post prompt. Pieces are newline-joined so token
/// counts are additive per piece.
pub fn assemble_prompt(
    config: &PromptConfig,
    corpus: &FaqCorpus,
    history: &History,
    context: &[ContextFaq],
    query: &str,
) -> PromptBundle {
    let mut lines: Vec<String> = vec![config.system_text.clone()];
    for turn in history.turns() {
        lines.push(format!("User: {}", turn.query));
        for faq_id in &turn.fetched_context {
            if let Some(entry) = corpus.get(faq_id) {
                lines.push(
                    ContextFaq {
                        faq_id: entry.id.clone(),
                        question: entry.question.clone(),
                        answer: entry.answer.clone(),
                    }
                    .rendered(),
                );
            }
        }
        lines.push(format!("Bot: {}", turn.answer));
    }
    for faq in context {
        lines.push(faq.rendered());
    }
    lines.push(format!("User: {query}"));
    lines.push(config.post_prompt.clone());

    let rendered = lines.join("\n");
    let input_tokens = count_tokens(&rendered);
    PromptBundle {
        system_text: config.system_text.clone(),
        post_prompt: config.post_prompt.clone(),
        history: history.clone(),
        context_faqs: context.to_vec(),
        current_query: query.to_string(),
        rendered,
        input_tokens,
    }
}

/// Per-call token accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub route: Route,
}

/// Totals over a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub calls: usize,
}

impl LedgerTotals {
    pub fn total_tokens(&self) -> usize {
        self.input_tokens + self.output_tokens
    }
}

/// Ordered per-call token records for one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenLedger {
    per_call: Vec<LedgerEntry>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        debug_assert!(
            entry.route != Route::Static || (entry.input_tokens == 0 && entry.output_tokens == 0),
            "STATIC routes contribute zero LLM tokens"
        );
        self.per_call.push(entry);
    }

    pub fn per_call(&self) -> &[LedgerEntry] {
        &self.per_call
    }

    pub fn totals(&self) -> LedgerTotals {
        let mut totals = LedgerTotals::default();
        for entry in &self.per_call {
            totals.input_tokens += entry.input_tokens;
            totals.output_tokens += entry.output_tokens;
            if entry.route != Route::Static {
                totals.calls += 1;
            }
        }
        totals
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Good,
    Bad,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Good => "GOOD",
            Verdict::Bad => "BAD",
        }
    }
}

/// An evaluator verdict with its reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRating {
    pub verdict: Verdict,
    pub reason: String,
}

/// Numeric rewards for the three (action, rating) outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub fetch_reward: f64,
    pub no_fetch_good: f64,
    pub no_fetch_bad: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            fetch_reward: 0.1,
            no_fetch_good: 2.0,
            no_fetch_bad: -1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.no_fetch_good > self.fetch_reward
            && self.fetch_reward > 0.0
            && 0.0 > self.no_fetch_bad
        {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "rewards must satisfy no_fetch_good > fetch_reward > 0 > no_fetch_bad, got {self:?}"
            )))
        }
    }
}

/// Maps an action and (for NO_FETCH) its rating to a numeric reward. A FETCH
/// never takes a rating; a NO_FETCH always requires one.
pub fn reward(action: Action, rating: Option<&EvalRating>, config: &RewardConfig) -> Result<f64> {
    match (action, rating) {
        (Action::Fetch, None) => Ok(config.fetch_reward),
        (Action::Fetch, Some(_)) => Err(Error::UnexpectedRating),
        (Action::NoFetch, Some(rating)) => Ok(match rating.verdict {
            Verdict::Good => config.no_fetch_good,
            Verdict::Bad => config.no_fetch_bad,
        }),
        (Action::NoFetch, None) => Err(Error::MissingRating),
    }
}
