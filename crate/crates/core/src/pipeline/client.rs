//! The pluggable LLM/evaluator boundary and the built-in deterministic
//! substitutes.
//!
//! A real HTTP LLM or evaluator can be dropped in by implementing
//! [`AnswerClient`] / [`EvaluatorClient`] over the request/response records.
//! In-repo runs use [`simulated_llm`] and [`oracle_evaluate`], which consult
//! the scripted step annotations instead of a model.

use serde::{Deserialize, Serialize};

use super::{EvalRating, PromptBundle, Verdict};
use crate::corpus::{FaqCorpus, QueryStep, StepKind};
use crate::error::Result;
use crate::gate::Route;

/// Request over the answer-generation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub prompt_text: String,
}

/// Response over the answer-generation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub answer_text: String,
}

/// Answer-generation client (the LLM side of the pipeline).
pub trait AnswerClient: Send + Sync {
    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResponse>;
}

/// Request over the evaluation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorRequest {
    pub query: String,
    pub answer: String,
    pub context_texts: Vec<String>,
    pub history_texts: Vec<String>,
}

/// Response over the evaluation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorResponse {
    pub verdict: Verdict,
    pub reason: String,
}

/// Answer-quality judge (the GPT-4 slot in the original pipeline).
pub trait EvaluatorClient: Send + Sync {
    fn evaluate(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse>;
}

/// Canonical refusal for unanswerable and out-of-domain queries.
pub fn refusal_text() -> &'static str {
    "I am sorry, but I do not know the answer to that from the information available. \
     Is there anything about the card I can help with?"
}

/// Canonical greeting reply.
pub fn greeting_text() -> &'static str {
    "Hello! How can I help you with the card today?"
}

fn effective_target(step: &QueryStep) -> Option<&str> {
    step.target_faq_id.as_deref()
}

fn target_available(bundle: &PromptBundle, target: &str) -> bool {
    bundle.context_faqs.iter().any(|c| c.faq_id == target)
        || bundle
            .history
            .turns()
            .any(|turn| turn.fetched_context.iter().any(|id| id == target))
}

/// Deterministic stand-in for the answer LLM.
///
/// Scripted steps resolve through their annotations: OOD queries get the
/// refusal, greetings get the greeting, and a domain query gets its target
/// FAQ's answer verbatim when that FAQ's text is available in the current
/// context or the conversation history, otherwise the refusal. Unscripted
/// queries (`step = None`) answer from the top context FAQ when present.
pub fn simulated_llm(
    bundle: &PromptBundle,
    corpus: &FaqCorpus,
    step: Option<&QueryStep>,
) -> String {
    let Some(step) = step else {
        return match bundle.context_faqs.first() {
            Some(faq) => faq.answer.clone(),
            None => refusal_text().to_string(),
        };
    };
    match step.kind {
        StepKind::Ood => refusal_text().to_string(),
        StepKind::Greeting => greeting_text().to_string(),
        StepKind::Domain | StepKind::Followup => {
            let Some(target) = effective_target(step) else {
                return refusal_text().to_string();
            };
            if target_available(bundle, target) {
                match corpus.get(target) {
                    Some(entry) => entry.answer.clone(),
                    None => refusal_text().to_string(),
                }
            } else {
                refusal_text().to_string()
            }
        }
    }
}

/// Deterministic stand-in for the evaluation model, using step annotations.
///
/// GOOD iff the step is OOD/GREETING and the answer is the matching canned
/// reply, or the step's target FAQ was available to the LLM and the answer
/// is exactly that FAQ's answer text.
pub fn oracle_evaluate(
    corpus: &FaqCorpus,
    step: &QueryStep,
    route: Route,
    context_available: bool,
    answer: &str,
) -> EvalRating {
    let good = |reason: &str| EvalRating {
        verdict: Verdict::Good,
        reason: reason.to_string(),
    };
    let bad = |reason: &str| EvalRating {
        verdict: Verdict::Bad,
        reason: reason.to_string(),
    };
    match step.kind {
        StepKind::Ood => {
            if answer == refusal_text() {
                good("out-of-domain query answered with the expected refusal")
            } else {
                bad("out-of-domain query must be refused, got a substantive answer")
            }
        }
        StepKind::Greeting => {
            if answer == greeting_text() {
                good("greeting answered with the expected greeting")
            } else {
                bad("greeting got an unexpected reply")
            }
        }
        StepKind::Domain | StepKind::Followup => {
            let Some(target) = effective_target(step) else {
                return bad("domain step carries no target FAQ");
            };
            let Some(entry) = corpus.get(target) else {
                return bad("target FAQ not found in the corpus");
            };
            if !context_available {
                return bad(&format!(
                    "no context for FAQ \"{target}\" was available to the {} call",
                    route.as_str()
                ));
            }
            if answer == entry.answer {
                good("answer matches the target FAQ exactly")
            } else {
                bad("answer deviates from the information in the FAQ context")
            }
        }
    }
}

/// Text-only evaluator over the external boundary: no step annotations, just
/// the request record. GOOD iff the answer is a canned reply or appears
/// verbatim inside the provided context or history texts.
#[derive(Debug, Clone, Copy, Default)]
pub struct TextEvaluator;

impl EvaluatorClient for TextEvaluator {
    fn evaluate(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse> {
        let supported = request.answer == refusal_text()
            || request.answer == greeting_text()
            || request
                .context_texts
                .iter()
                .chain(request.history_texts.iter())
                .any(|text| text.contains(&request.answer));
        Ok(if supported {
            EvaluatorResponse {
                verdict: Verdict::Good,
                reason: "answer is grounded in the supplied texts".to_string(),
            }
        } else {
            EvaluatorResponse {
                verdict: Verdict::Bad,
                reason: "answer is not supported by the supplied texts".to_string(),
            }
        })
    }
}
