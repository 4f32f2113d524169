//! Environment execution: stepping sessions through the gate, generating
//! training rollouts, and measuring settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::client::{
    oracle_evaluate, simulated_llm, AnswerClient, AnswerRequest, EvaluatorClient, EvaluatorRequest,
};
use super::{
    assemble_prompt, count_tokens, reward, ContextFaq, ConversationTurn, EvalRating, History,
    LedgerEntry, PromptConfig, RewardConfig, TokenLedger, Verdict,
};
use crate::corpus::{FaqCorpus, QueryStep, SessionScript, StepKind};
use crate::embedding::{EmbeddingStore, ProjectionHead, RetrievalIndex, RetrievalResult};
use crate::error::{Error, Result};
use crate::exec;
use crate::gate::{decide, GateConfig, GateDecision, GateMode, PolicyChoice, Route};
use crate::policy::{
    featurize, train_policy, Action, PolicyNet, PolicyTrainConfig, RolloutStep, Trajectory,
};
use crate::seeds;
use crate::util::write_atomic;

pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_MC_PASSES: usize = 10;

/// Which answer/evaluation implementation the environment calls.
pub enum LlmBackend<'a> {
    /// The in-process deterministic simulator and step-annotation oracle.
    Simulator,
    /// External clients over the record boundary.
    External {
        llm: &'a dyn AnswerClient,
        evaluator: &'a dyn EvaluatorClient,
    },
}

/// Everything a run needs: corpus, retrieval, prompts, rewards, backend.
pub struct Components<'a> {
    corpus: &'a FaqCorpus,
    index: RetrievalIndex<'a>,
    pub prompt: PromptConfig,
    pub rewards: RewardConfig,
    pub k: usize,
    pub mc_passes: usize,
    pub backend: LlmBackend<'a>,
}

impl<'a> Components<'a> {
    pub fn new(
        store: &'a EmbeddingStore,
        head: &'a ProjectionHead,
        corpus: &'a FaqCorpus,
    ) -> Result<Self> {
        let rewards = RewardConfig::default();
        rewards.validate()?;
        Ok(Self {
            corpus,
            index: RetrievalIndex::new(store, head, corpus)?,
            prompt: PromptConfig::default(),
            rewards,
            k: DEFAULT_TOP_K,
            mc_passes: DEFAULT_MC_PASSES,
            backend: LlmBackend::Simulator,
        })
    }

    pub fn corpus(&self) -> &FaqCorpus {
        self.corpus
    }

    pub fn index(&self) -> &RetrievalIndex<'a> {
        &self.index
    }

    fn effective_k(&self) -> usize {
        self.k.clamp(1, self.corpus.len())
    }
}

/// Mutable per-run state: the conversation window and the token ledger.
#[derive(Debug, Clone, Default)]
pub struct SessionEnv {
    pub history: History,
    pub ledger: TokenLedger,
}

impl SessionEnv {
    pub fn new() -> Self {
        Self::default()
    }

    /// The policy-visible previous (query, action) pairs, oldest first.
    /// STATIC turns count as FETCH: their context was made available.
    pub fn policy_prev(&self) -> Vec<(String, Action)> {
        self.history
            .turns()
            .map(|turn| {
                let action = match turn.route {
                    Route::NoFetch => Action::NoFetch,
                    Route::Fetch | Route::Static => Action::Fetch,
                };
                (turn.query.clone(), action)
            })
            .collect()
    }
}

/// A step to execute: scripted (annotated, ratable) or free text.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a> {
    Scripted(&'a QueryStep),
    Free(&'a str),
}

impl<'a> StepInput<'a> {
    pub fn text(&self) -> &'a str {
        match self {
            StepInput::Scripted(step) => &step.text,
            StepInput::Free(text) => text,
        }
    }

    pub fn scripted(&self) -> Option<&'a QueryStep> {
        match self {
            StepInput::Scripted(step) => Some(step),
            StepInput::Free(_) => None,
        }
    }
}

/// Whether a step runs under training rules (rate only NO_FETCH, produce a
/// reward) or reporting rules (rate every scripted step, no reward).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Report,
}

/// What one executed step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub answer: String,
    pub decision: GateDecision,
    pub rating: Option<EvalRating>,
    pub reward: Option<f64>,
    pub input_tokens: usize,
    pub output_tokens: usize,
}

fn context_faqs(corpus: &FaqCorpus, result: &RetrievalResult) -> Vec<ContextFaq> {
    result
        .ranked()
        .iter()
        .filter_map(|(id, _)| corpus.get(id))
        .map(|entry| ContextFaq {
            faq_id: entry.id.clone(),
            question: entry.question.clone(),
            answer: entry.answer.clone(),
        })
        .collect()
}

fn target_of(step: &QueryStep) -> Option<&str> {
    step.target_faq_id.as_deref()
}

fn rate_step(
    components: &Components,
    step: &QueryStep,
    route: Route,
    context_available: bool,
    answer: &str,
    bundle_context: &[ContextFaq],
    history: &History,
) -> Result<EvalRating> {
    match &components.backend {
        LlmBackend::Simulator => Ok(oracle_evaluate(
            components.corpus,
            step,
            route,
            context_available,
            answer,
        )),
        LlmBackend::External { evaluator, .. } => {
            let request = EvaluatorRequest {
                query: step.text.clone(),
                answer: answer.to_string(),
                context_texts: bundle_context
                    .iter()
                    .map(|c| format!("Q: {} A: {}", c.question, c.answer))
                    .collect(),
                history_texts: history
                    .turns()
                    .flat_map(|turn| {
                        let mut texts = vec![format!("User: {}", turn.query)];
                        for id in &turn.fetched_context {
                            if let Some(entry) = components.corpus.get(id) {
                                texts.push(format!("Q: {} A: {}", entry.question, entry.answer));
                            }
                        }
                        texts.push(format!("Bot: {}", turn.answer));
                        texts
                    })
                    .collect(),
            };
            let response = evaluator.evaluate(&request)?;
            Ok(EvalRating {
                verdict: response.verdict,
                reason: response.reason,
            })
        }
    }
}

/// Executes one query: retrieves, routes through the gate, answers, rates,
/// and updates the history and ledger.
pub fn run_step(
    env: &mut SessionEnv,
    input: StepInput<'_>,
    gate_config: &GateConfig,
    policy: Option<&PolicyChoice>,
    components: &Components,
    mode: RunMode,
) -> Result<StepOutcome> {
    let query = input.text();
    let topk = components.index.query(query, components.effective_k())?;
    let (top1_id, top1_score) = topk.top1();
    let decision = decide(gate_config, (top1_id, top1_score), policy)?;
    let history_ids = env.history.context_ids();

    let (answer, input_tokens, output_tokens, fetched, bundle_context, context_available) =
        match decision.route {
            Route::Static => {
                let entry = components
                    .corpus
                    .get(top1_id)
                    .expect("top1 comes from the corpus");
                let available = input
                    .scripted()
                    .and_then(target_of)
                    .map(|target| target == entry.id)
                    .unwrap_or(false);
                let context = vec![ContextFaq {
                    faq_id: entry.id.clone(),
                    question: entry.question.clone(),
                    answer: entry.answer.clone(),
                }];
                (
                    entry.answer.clone(),
                    0,
                    0,
                    vec![entry.id.clone()],
                    context,
                    available,
                )
            }
            Route::Fetch => {
                let context = context_faqs(components.corpus, &topk);
                let bundle = assemble_prompt(
                    &components.prompt,
                    components.corpus,
                    &env.history,
                    &context,
                    query,
                );
                let answer = match &components.backend {
                    LlmBackend::Simulator => {
                        simulated_llm(&bundle, components.corpus, input.scripted())
                    }
                    LlmBackend::External { llm, .. } => {
                        llm.answer(&AnswerRequest {
                            prompt_text: bundle.rendered().to_string(),
                        })?
                        .answer_text
                    }
                };
                let available = input
                    .scripted()
                    .and_then(target_of)
                    .map(|target| {
                        topk.contains(target) || history_ids.iter().any(|id| id == target)
                    })
                    .unwrap_or(false);
                let out = count_tokens(&answer);
                (
                    answer,
                    bundle.input_tokens(),
                    out,
                    topk.ids(),
                    context,
                    available,
                )
            }
            Route::NoFetch => {
                let bundle = assemble_prompt(
                    &components.prompt,
                    components.corpus,
                    &env.history,
                    &[],
                    query,
                );
                let answer = match &components.backend {
                    LlmBackend::Simulator => {
                        simulated_llm(&bundle, components.corpus, input.scripted())
                    }
                    LlmBackend::External { llm, .. } => {
                        llm.answer(&AnswerRequest {
                            prompt_text: bundle.rendered().to_string(),
                        })?
                        .answer_text
                    }
                };
                let available = input
                    .scripted()
                    .and_then(target_of)
                    .map(|target| history_ids.iter().any(|id| id == target))
                    .unwrap_or(false);
                let out = count_tokens(&answer);
                (
                    answer,
                    bundle.input_tokens(),
                    out,
                    Vec::new(),
                    Vec::new(),
                    available,
                )
            }
        };

    let rating = match (mode, input.scripted()) {
        (RunMode::Train, Some(step)) if decision.route == Route::NoFetch => Some(rate_step(
            components,
            step,
            decision.route,
            context_available,
            &answer,
            &bundle_context,
            &env.history,
        )?),
        (RunMode::Report, Some(step)) => Some(rate_step(
            components,
            step,
            decision.route,
            context_available,
            &answer,
            &bundle_context,
            &env.history,
        )?),
        _ => None,
    };

    let step_reward = if mode == RunMode::Train {
        match decision.route {
            Route::Fetch => Some(reward(Action::Fetch, None, &components.rewards)?),
            Route::NoFetch => Some(reward(
                Action::NoFetch,
                rating.as_ref(),
                &components.rewards,
            )?),
            Route::Static => None,
        }
    } else {
        None
    };

    env.ledger.record(LedgerEntry {
        input_tokens,
        output_tokens,
        route: decision.route,
    });
    env.history.push(ConversationTurn {
        query: query.to_string(),
        answer: answer.clone(),
        fetched_context: fetched,
        route: decision.route,
    });

    Ok(StepOutcome {
        answer,
        decision,
        rating,
        reward: step_reward,
        input_tokens,
        output_tokens,
    })
}

/// Samples `samples` independent seeded trajectories of `session` under the
/// current policy (every step routed by a sampled action). Trajectory `s`
/// uses the derived stream `seeds::derive(seed, s)`, so results do not depend
/// on scheduling.
pub fn rollout(
    session: &SessionScript,
    net: &PolicyNet,
    samples: usize,
    seed: u64,
    components: &Components,
    gamma: f64,
) -> Result<Vec<Trajectory>> {
    if samples == 0 {
        return Err(Error::Validation("samples must be at least 1".into()));
    }
    let results: Vec<Result<Trajectory>> = exec::map_indexed(samples, |sample| {
        let sample_seed = seeds::derive(seed, sample as u64);
        let mut env = SessionEnv::new();
        let gate_config = GateConfig::new(GateMode::PolicyOnly, crate::gate::DEFAULT_THRESHOLD);
        let mut steps = Vec::with_capacity(session.steps.len());
        for (t, step) in session.steps.iter().enumerate() {
            let prev = env.policy_prev();
            let contexts = env.history.context_ids();
            let state = featurize(&prev, &step.text, &components.index, &contexts)?;
            let sampled = net.sample_action(&state, seeds::derive2(sample_seed, t as u64, 0));
            let choice = PolicyChoice {
                action: sampled.action,
                probs: sampled.probs,
            };
            let outcome = run_step(
                &mut env,
                StepInput::Scripted(step),
                &gate_config,
                Some(&choice),
                components,
                RunMode::Train,
            )?;
            steps.push(RolloutStep {
                state,
                action: sampled.action,
                reward: outcome.reward.expect("policy routes always earn a reward"),
                log_prob: sampled.log_prob,
            });
        }
        Ok(Trajectory::from_steps(
            session.id.clone(),
            sample,
            steps,
            gamma,
        ))
    });
    results.into_iter().collect()
}

/// Configuration for the iterated rollout/train loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RolloutTrainConfig {
    /// Rollout/update rounds; later rounds sample from the updated policy.
    pub rounds: usize,
    /// Trajectories per session per round.
    pub samples_per_round: usize,
    pub rollout_seed: u64,
    pub train: PolicyTrainConfig,
}

impl Default for RolloutTrainConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            samples_per_round: 3,
            rollout_seed: 17,
            train: PolicyTrainConfig::default(),
        }
    }
}

/// REINFORCE over the sessions: each round samples trajectories from the
/// current policy and applies [`train_policy`]. Returns the trained network,
/// every generated trajectory (rounds in order, then session file order,
/// then sample index), and the concatenated loss trace.
pub fn rollout_and_train(
    net: &PolicyNet,
    sessions: &[SessionScript],
    components: &Components,
    config: &RolloutTrainConfig,
) -> Result<(PolicyNet, Vec<Trajectory>, Vec<f64>)> {
    if sessions.is_empty() {
        return Err(Error::InsufficientData("no sessions to roll out".into()));
    }
    if config.rounds == 0 {
        return Err(Error::Validation("rounds must be at least 1".into()));
    }
    let mut current = net.clone();
    let mut all_trajectories = Vec::new();
    let mut full_trace = Vec::new();
    for round in 0..config.rounds {
        let mut round_trajectories = Vec::new();
        for (session_idx, session) in sessions.iter().enumerate() {
            let seed = seeds::derive2(config.rollout_seed, round as u64, session_idx as u64);
            round_trajectories.extend(rollout(
                session,
                &current,
                config.samples_per_round,
                seed,
                components,
                config.train.gamma,
            )?);
        }
        let train_config = PolicyTrainConfig {
            seed: seeds::derive(config.train.seed, round as u64),
            ..config.train
        };
        let (updated, trace) = train_policy(&current, &round_trajectories, &train_config)?;
        current = updated;
        all_trajectories.extend(round_trajectories);
        full_trace.extend(trace);
    }
    Ok((current, all_trajectories, full_trace))
}

/// One evaluated step in a report run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub session_id: String,
    pub step_index: usize,
    pub query: String,
    pub kind: StepKind,
    pub route: Route,
    pub p_fetch: Option<f64>,
    pub p_no_fetch: Option<f64>,
    pub top1_id: String,
    pub top1_score: f64,
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub verdict: Option<Verdict>,
}

/// Aggregate result of running every session under one setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: GateMode,
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub total_tokens: usize,
    /// Fraction of steps rated GOOD.
    pub accuracy: f64,
    /// 1 - tokens/tokens(ALL_FETCH); 0 for the baseline itself.
    pub saving_vs_all_fetch: f64,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

struct SessionRun {
    rows: Vec<TraceRow>,
}

fn run_session_report(
    session: &SessionScript,
    session_idx: usize,
    mode: GateMode,
    threshold: f64,
    net: Option<&PolicyNet>,
    components: &Components,
    seed: u64,
) -> Result<SessionRun> {
    let gate_config = GateConfig::new(mode, threshold);
    let mut env = SessionEnv::new();
    let mut rows = Vec::with_capacity(session.steps.len());
    for (t, step) in session.steps.iter().enumerate() {
        // The policy is consulted only when the gate can reach it: always
        // under POLICY_ONLY, below the threshold under SIMTHR_POLICY.
        let consult = match mode {
            GateMode::PolicyOnly => true,
            GateMode::SimThrPolicy => {
                let top1 = components.index.query(&step.text, 1)?.top1().1;
                top1 < threshold
            }
            GateMode::AllFetch | GateMode::SimThr => false,
        };
        let choice = if consult {
            let net = net.ok_or_else(|| Error::MissingPolicyAction {
                mode: mode.as_str().to_string(),
            })?;
            let prev = env.policy_prev();
            let contexts = env.history.context_ids();
            let state = featurize(&prev, &step.text, &components.index, &contexts)?;
            let probs = net.mc_predict(
                &state,
                components.mc_passes,
                seeds::derive2(seed, session_idx as u64, t as u64),
            );
            let action = if probs.0 >= probs.1 {
                Action::Fetch
            } else {
                Action::NoFetch
            };
            Some(PolicyChoice { action, probs })
        } else {
            None
        };
        let outcome = run_step(
            &mut env,
            StepInput::Scripted(step),
            &gate_config,
            choice.as_ref(),
            components,
            RunMode::Report,
        )?;
        rows.push(TraceRow {
            session_id: session.id.clone(),
            step_index: t,
            query: step.text.clone(),
            kind: step.kind,
            route: outcome.decision.route,
            p_fetch: outcome.decision.policy_probs.map(|p| p.0),
            p_no_fetch: outcome.decision.policy_probs.map(|p| p.1),
            top1_id: outcome.decision.top1.0.clone(),
            top1_score: outcome.decision.top1.1,
            input_tokens: outcome.input_tokens,
            output_tokens: outcome.output_tokens,
            verdict: outcome.rating.as_ref().map(|r| r.verdict),
        });
    }
    Ok(SessionRun { rows })
}

fn run_all_sessions(
    sessions: &[SessionScript],
    mode: GateMode,
    threshold: f64,
    net: Option<&PolicyNet>,
    components: &Components,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    let indexed: Vec<(usize, &SessionScript)> = sessions.iter().enumerate().collect();
    let runs = exec::map_ordered(&indexed, |(idx, session)| {
        run_session_report(session, *idx, mode, threshold, net, components, seed)
    });
    let mut rows = Vec::new();
    for run in runs {
        rows.extend(run?.rows);
    }
    Ok(rows)
}

/// Runs every session under `mode` with MC-dropout argmax actions and
/// aggregates token usage and oracle accuracy over all steps. The saving is
/// measured against an internally-run ALL_FETCH baseline on the same
/// sessions.
pub fn evaluate_setting(
    sessions: &[SessionScript],
    mode: GateMode,
    threshold: f64,
    net: Option<&PolicyNet>,
    components: &Components,
    seed: u64,
) -> Result<SettingReport> {
    if sessions.is_empty() {
        return Err(Error::InsufficientData("no sessions to evaluate".into()));
    }
    let rows = run_all_sessions(sessions, mode, threshold, net, components, seed)?;
    let input_tokens: usize = rows.iter().map(|r| r.input_tokens).sum();
    let output_tokens: usize = rows.iter().map(|r| r.output_tokens).sum();
    let total_tokens = input_tokens + output_tokens;
    let rated = rows.iter().filter(|r| r.verdict.is_some()).count();
    let good = rows
        .iter()
        .filter(|r| r.verdict == Some(Verdict::Good))
        .count();
    let accuracy = if rated == 0 {
        0.0
    } else {
        good as f64 / rated as f64
    };

    let saving_vs_all_fetch = if mode == GateMode::AllFetch {
        0.0
    } else {
        let baseline = run_all_sessions(
            sessions,
            GateMode::AllFetch,
            threshold,
            None,
            components,
            seed,
        )?;
        let baseline_total: usize = baseline
            .iter()
            .map(|r| r.input_tokens + r.output_tokens)
            .sum();
        if baseline_total == 0 {
            0.0
        } else {
            1.0 - total_tokens as f64 / baseline_total as f64
        }
    };

    Ok(SettingReport {
        setting: mode,
        input_tokens,
        output_tokens,
        total_tokens,
        accuracy,
        saving_vs_all_fetch,
        trace: rows,
    })
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Ledger export: `step,route,input_tokens,output_tokens,verdict` with one
/// row per executed step, in run order.
pub fn write_ledger_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("step,route,input_tokens,output_tokens,verdict\n");
    for (step, row) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            step,
            row.route.as_str(),
            row.input_tokens,
            row.output_tokens,
            row.verdict.map(|v| v.as_str()).unwrap_or(""),
        ));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Full per-step action trace with policy probabilities and retrieval scores.
pub fn write_trace_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from(
        "session_id,step_index,query,kind,route,p_fetch,p_no_fetch,top1_id,top1_score,input_tokens,output_tokens,verdict\n",
    );
    for row in rows {
        let kind = match row.kind {
            StepKind::Domain => "DOMAIN",
            StepKind::Followup => "FOLLOWUP",
            StepKind::Ood => "OOD",
            StepKind::Greeting => "GREETING",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6},{},{},{}\n",
            csv_escape(&row.session_id),
            row.step_index,
            csv_escape(&row.query),
            kind,
            row.route.as_str(),
            row.p_fetch.map(|p| format!("{p:.6}")).unwrap_or_default(),
            row.p_no_fetch
                .map(|p| format!("{p:.6}"))
                .unwrap_or_default(),
            csv_escape(&row.top1_id),
            row.top1_score,
            row.input_tokens,
            row.output_tokens,
            row.verdict.map(|v| v.as_str()).unwrap_or(""),
        ));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}
