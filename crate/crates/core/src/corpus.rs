//! FAQ corpus, paraphrase pairs, and annotated chat-session scripts.
//!
//! All types here are immutable after load and safe to share across threads.
//! File formats: the FAQ file is a JSON array of `{"id","question","answer"}`;
//! the session file is a JSON array of
//! `{"id","steps":[{"text","kind","target_faq_id"?,"depends_on"?}]}`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::util::write_atomic;

/// One retrievable knowledge unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaqEntry {
    pub id: String,
    pub question: String,
    pub answer: String,
}

impl FaqEntry {
    /// The question-plus-answer text that FAQ vectors embed.
    pub fn qna_text(&self) -> String {
        format!("{} {}", self.question, self.answer)
    }
}

/// A validated set of FAQ entries with unique, non-empty ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaqCorpus {
    name: String,
    entries: Vec<FaqEntry>,
    by_id: BTreeMap<String, usize>,
}

impl FaqCorpus {
    pub fn new(name: impl Into<String>, entries: Vec<FaqEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut by_id = BTreeMap::new();
        for (idx, entry) in entries.iter().enumerate() {
            if entry.id.is_empty() {
                return Err(Error::Validation(format!(
                    "FAQ at position {idx} has an empty id"
                )));
            }
            if entry.question.is_empty() || entry.answer.is_empty() {
                return Err(Error::Validation(format!(
                    "FAQ \"{}\" has an empty question or answer",
                    entry.id
                )));
            }
            if by_id.insert(entry.id.clone(), idx).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate FAQ id \"{}\"",
                    entry.id
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            entries,
            by_id,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FaqEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&FaqEntry> {
        self.by_id.get(id).map(|&idx| &self.entries[idx])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }
}

/// Which view of the FAQ a training query is paired against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    #[serde(rename = "QUERY_QUESTION")]
    QueryQuestion,
    #[serde(rename = "QUERY_QNA")]
    QueryQna,
}

/// A positive training pair: a query known to be answered by `faq_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphrasePair {
    pub query: String,
    pub faq_id: String,
    pub pair_kind: PairKind,
}

/// Step classification driving the reward oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepKind {
    Domain,
    Followup,
    Ood,
    Greeting,
}

/// One scripted user query with ground-truth annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStep {
    pub text: String,
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_faq_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depends_on: Option<usize>,
}

/// An ordered, annotated chat session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionScript {
    pub id: String,
    pub steps: Vec<QueryStep>,
}

impl SessionScript {
    /// Checks the per-step invariants against `corpus`.
    pub fn validate(&self, corpus: &FaqCorpus) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Validation(format!(
                "session \"{}\" has no steps",
                self.id
            )));
        }
        for (idx, step) in self.steps.iter().enumerate() {
            match step.kind {
                StepKind::Domain | StepKind::Followup => match &step.target_faq_id {
                    None => {
                        return Err(Error::Validation(format!(
                            "session \"{}\" step {idx} ({:?}) is missing target_faq_id",
                            self.id, step.kind
                        )))
                    }
                    Some(target) if !corpus.contains(target) => {
                        return Err(Error::Validation(format!(
                            "session \"{}\" step {idx} targets unknown FAQ \"{target}\"",
                            self.id
                        )))
                    }
                    Some(_) => {}
                },
                StepKind::Ood | StepKind::Greeting => {
                    if step.target_faq_id.is_some() {
                        return Err(Error::Validation(format!(
                            "session \"{}\" step {idx} ({:?}) must not carry target_faq_id",
                            self.id, step.kind
                        )));
                    }
                }
            }
            if let Some(dep) = step.depends_on {
                if dep >= idx {
                    return Err(Error::Validation(format!(
                        "session \"{}\" step {idx} depends_on {dep}, which is not strictly earlier",
                        self.id
                    )));
                }
            }
            if step.kind == StepKind::Followup {
                self.check_dependency_chain(idx)?;
            }
        }
        Ok(())
    }

    // A FOLLOWUP must resolve, through depends_on links, to a DOMAIN step.
    fn check_dependency_chain(&self, idx: usize) -> Result<()> {
        let mut at = idx;
        loop {
            let step = &self.steps[at];
            match step.kind {
                StepKind::Domain => return Ok(()),
                StepKind::Followup => match step.depends_on {
                    Some(dep) if dep < at => at = dep,
                    _ => {
                        return Err(Error::Validation(format!(
                            "session \"{}\" step {idx}: FOLLOWUP chain breaks at step {at}",
                            self.id
                        )))
                    }
                },
                _ => {
                    return Err(Error::Validation(format!(
                        "session \"{}\" step {idx}: dependency chain ends at non-DOMAIN step {at}",
                        self.id
                    )))
                }
            }
        }
    }
}

fn parse_error(path: &Path, err: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        detail: err.to_string(),
    }
}

/// Loads and validates a FAQ file. The corpus name is the file stem.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<FaqCorpus> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path)?;
    let entries: Vec<FaqEntry> = serde_json::from_str(&raw).map_err(|e| parse_error(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    FaqCorpus::new(name, entries)
}

/// Writes a corpus in the FAQ file format.
pub fn write_corpus(corpus: &FaqCorpus, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(corpus.entries()).expect("corpus serializes");
    write_atomic(path.as_ref(), json.as_bytes())
}

/// Loads session scripts and validates them against `corpus`, preserving
/// declared order.
pub fn load_sessions(path: impl AsRef<Path>, corpus: &FaqCorpus) -> Result<Vec<SessionScript>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path)?;
    let sessions: Vec<SessionScript> =
        serde_json::from_str(&raw).map_err(|e| parse_error(path, e))?;
    for session in &sessions {
        session.validate(corpus)?;
    }
    Ok(sessions)
}

/// Writes session scripts in the session file format.
pub fn write_sessions(sessions: &[SessionScript], path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(sessions).expect("sessions serialize");
    write_atomic(path.as_ref(), json.as_bytes())
}

/// Returns a seeded permutation of `session` in which every step that depends
/// on an earlier step stays glued immediately after its dependency, so the
/// reward oracle's ground truth stays well-defined. `depends_on` indices are
/// remapped to the new positions.
pub fn shuffle_session(session: &SessionScript, seed: u64) -> SessionScript {
    // Blocks: a step with depends_on joins its dependency's block, everything
    // else starts a new block. Shuffling permutes whole blocks.
    let mut block_of: Vec<usize> = Vec::with_capacity(session.steps.len());
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for (idx, step) in session.steps.iter().enumerate() {
        match step.depends_on {
            Some(dep) => {
                let block = block_of[dep];
                blocks[block].push(idx);
                block_of.push(block);
            }
            None => {
                block_of.push(blocks.len());
                blocks.push(vec![idx]);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0));
    blocks.shuffle(&mut rng);

    let order: Vec<usize> = blocks.into_iter().flatten().collect();
    let mut new_pos = vec![0usize; order.len()];
    for (new_idx, &old_idx) in order.iter().enumerate() {
        new_pos[old_idx] = new_idx;
    }
    let steps = order
        .iter()
        .map(|&old_idx| {
            let mut step = session.steps[old_idx].clone();
            step.depends_on = step.depends_on.map(|dep| new_pos[dep]);
            step
        })
        .collect();
    SessionScript {
        id: session.id.clone(),
        steps,
    }
}

mod paraphrase;
pub use paraphrase::{synth_paraphrases, synth_paraphrases_with, ParaphraseOptions};

#[cfg(test)]
mod tests {
    use super::*;

    fn faq(id: &str, q: &str, a: &str) -> FaqEntry {
        FaqEntry {
            id: id.into(),
            question: q.into(),
            answer: a.into(),
        }
    }

    fn three_faq_corpus() -> FaqCorpus {
        FaqCorpus::new(
            "test",
            vec![
                faq("fee", "is there an annual fee", "Yes, 600 rupees per year."),
                faq("otp", "why is the otp not arriving", "Check your network."),
                faq("apply", "how do i apply for the card", "Use the app."),
            ],
        )
        .unwrap()
    }

    #[test]
    fn load_corpus_accepts_well_formed_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("faqs.json");
        write_corpus(&three_faq_corpus(), &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.name(), "faqs");
        assert_eq!(loaded.entries(), three_faq_corpus().entries());
    }

    #[test]
    fn duplicate_id_names_the_offender() {
        let err = FaqCorpus::new("dup", vec![faq("faq1", "q", "a"), faq("faq1", "q2", "a2")])
            .unwrap_err();
        assert!(err.to_string().contains("faq1"), "{err}");
    }

    #[test]
    fn malformed_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{not json").unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn sessions_load_and_validate() {
        let corpus = three_faq_corpus();
        let session = SessionScript {
            id: "s1".into(),
            steps: vec![
                QueryStep {
                    text: "is there annual fee".into(),
                    kind: StepKind::Domain,
                    target_faq_id: Some("fee".into()),
                    depends_on: None,
                },
                QueryStep {
                    text: "can you reduce it".into(),
                    kind: StepKind::Followup,
                    target_faq_id: Some("fee".into()),
                    depends_on: Some(0),
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.json");
        write_sessions(std::slice::from_ref(&session), &path).unwrap();
        let loaded = load_sessions(&path, &corpus).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].steps.len(), 2);
    }

    #[test]
    fn empty_steps_is_a_validation_error() {
        let corpus = three_faq_corpus();
        let session = SessionScript {
            id: "s".into(),
            steps: vec![],
        };
        assert!(session.validate(&corpus).is_err());
    }

    #[test]
    fn self_dependency_is_rejected() {
        let corpus = three_faq_corpus();
        let session = SessionScript {
            id: "s".into(),
            steps: vec![
                QueryStep {
                    text: "is there annual fee".into(),
                    kind: StepKind::Domain,
                    target_faq_id: Some("fee".into()),
                    depends_on: None,
                },
                QueryStep {
                    text: "loop".into(),
                    kind: StepKind::Followup,
                    target_faq_id: Some("fee".into()),
                    depends_on: Some(1),
                },
            ],
        };
        assert!(session.validate(&corpus).is_err());
    }

    #[test]
    fn dangling_target_is_rejected() {
        let corpus = three_faq_corpus();
        let session = SessionScript {
            id: "s".into(),
            steps: vec![QueryStep {
                text: "q".into(),
                kind: StepKind::Domain,
                target_faq_id: Some("nope".into()),
                depends_on: None,
            }],
        };
        let err = session.validate(&corpus).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn shuffle_single_step_is_identity() {
        let session = SessionScript {
            id: "one".into(),
            steps: vec![QueryStep {
                text: "hi".into(),
                kind: StepKind::Greeting,
                target_faq_id: None,
                depends_on: None,
            }],
        };
        for seed in 0..5 {
            assert_eq!(shuffle_session(&session, seed), session);
        }
    }

    #[test]
    fn shuffle_keeps_followups_adjacent_after_dependency_for_all_seeds() {
        let corpus = three_faq_corpus();
        let session = SessionScript {
            id: "s".into(),
            steps: vec![
                QueryStep {
                    text: "is there annual fee".into(),
                    kind: StepKind::Domain,
                    target_faq_id: Some("fee".into()),
                    depends_on: None,
                },
                QueryStep {
                    text: "can you reduce it".into(),
                    kind: StepKind::Followup,
                    target_faq_id: Some("fee".into()),
                    depends_on: Some(0),
                },
                QueryStep {
                    text: "how do i apply".into(),
                    kind: StepKind::Domain,
                    target_faq_id: Some("apply".into()),
                    depends_on: None,
                },
                QueryStep {
                    text: "hows the weather".into(),
                    kind: StepKind::Ood,
                    target_faq_id: None,
                    depends_on: None,
                },
            ],
        };
        for seed in 0..100 {
            let shuffled = shuffle_session(&session, seed);
            shuffled.validate(&corpus).unwrap();
            let dep_pos = shuffled
                .steps
                .iter()
                .position(|s| s.text == "is there annual fee")
                .unwrap();
            let follow_pos = shuffled
                .steps
                .iter()
                .position(|s| s.text == "can you reduce it")
                .unwrap();
            assert_eq!(follow_pos, dep_pos + 1, "seed {seed}");
            assert_eq!(shuffled.steps[follow_pos].depends_on, Some(dep_pos));
            // Identical seeds give identical outputs.
            assert_eq!(shuffled, shuffle_session(&session, seed));
        }
    }

    #[test]
    fn shuffle_is_a_permutation_of_the_step_multiset() {
        let session = SessionScript {
            id: "s".into(),
            steps: (0..7)
                .map(|i| QueryStep {
                    text: format!("query {i}"),
                    kind: StepKind::Ood,
                    target_faq_id: None,
                    depends_on: None,
                })
                .collect(),
        };
        let shuffled = shuffle_session(&session, 3);
        let mut orig: Vec<_> = session.steps.iter().map(|s| s.text.clone()).collect();
        let mut perm: Vec<_> = shuffled.steps.iter().map(|s| s.text.clone()).collect();
        orig.sort();
        perm.sort();
        assert_eq!(orig, perm);
    }
}

#[cfg(test)]
pub(crate) use tests_support::*;
