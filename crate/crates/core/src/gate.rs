//! Per-query routing among STATIC, FETCH, and NO_FETCH.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Action;

pub const DEFAULT_THRESHOLD: f64 = 0.92;

/// How a step is answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Route {
    /// Answer directly from the top-1 FAQ; no LLM call.
    Static,
    /// Full RAG: retrieve context and call the LLM.
    Fetch,
    /// Call the LLM without fresh context.
    NoFetch,
}

impl Route {
    pub fn as_str(&self) -> &'static str {
        match self {
            Route::Static => "STATIC",
            Route::Fetch => "FETCH",
            Route::NoFetch => "NO_FETCH",
        }
    }
}

/// Gating strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GateMode {
    AllFetch,
    SimThr,
    SimThrPolicy,
    PolicyOnly,
}

impl GateMode {
    pub fn uses_policy(&self) -> bool {
        matches!(self, GateMode::SimThrPolicy | GateMode::PolicyOnly)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GateMode::AllFetch => "ALL_FETCH",
            GateMode::SimThr => "SIMTHR",
            GateMode::SimThrPolicy => "SIMTHR_POLICY",
            GateMode::PolicyOnly => "POLICY_ONLY",
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "all-fetch" => Ok(GateMode::AllFetch),
            "simthr" => Ok(GateMode::SimThr),
            "simthr-policy" => Ok(GateMode::SimThrPolicy),
            "policy-only" => Ok(GateMode::PolicyOnly),
            other => Err(Error::Validation(format!(
                "unknown mode \"{other}\" (expected all-fetch, simthr, simthr-policy, or policy-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub threshold: f64,
    pub mode: GateMode,
}

impl GateConfig {
    pub fn new(mode: GateMode, threshold: f64) -> Self {
        Self { threshold, mode }
    }
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            mode: GateMode::SimThrPolicy,
        }
    }
}

/// A policy network's verdict for the current step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyChoice {
    pub action: Action,
    /// (p_fetch, p_no_fetch), summing to 1.
    pub probs: (f64, f64),
}

/// The chosen route plus what it was based on.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub route: Route,
    pub top1: (String, f64),
    pub policy_probs: Option<(f64, f64)>,
}

/// Pure routing function. The threshold comparison is `>=`, and the policy is
/// consulted only when the threshold shortcut did not fire.
pub fn decide(
    config: &GateConfig,
    top1: (&str, f64),
    policy: Option<&PolicyChoice>,
) -> Result<GateDecision> {
    let (top1_id, score) = top1;
    let top1 = (top1_id.to_string(), score);
    let static_hit = score >= config.threshold;

    let with_policy = |route_needed: bool| -> Result<GateDecision> {
        match policy {
            Some(choice) => Ok(GateDecision {
                route: match choice.action {
                    Action::Fetch => Route::Fetch,
                    Action::NoFetch => Route::NoFetch,
                },
                top1: top1.clone(),
                policy_probs: Some(choice.probs),
            }),
            None if route_needed => Err(Error::MissingPolicyAction {
                mode: config.mode.as_str().to_string(),
            }),
            None => unreachable!("route_needed is always true when called without a choice"),
        }
    };

    match config.mode {
        GateMode::AllFetch => Ok(GateDecision {
            route: Route::Fetch,
            top1,
            policy_probs: None,
        }),
        GateMode::SimThr => Ok(GateDecision {
            route: if static_hit {
                Route::Static
            } else {
                Route::Fetch
            },
            top1,
            policy_probs: None,
        }),
        GateMode::SimThrPolicy => {
            if static_hit {
                Ok(GateDecision {
                    route: Route::Static,
                    top1,
                    policy_probs: None,
                })
            } else {
                with_policy(true)
            }
        }
        GateMode::PolicyOnly => with_policy(true),
    }
}
