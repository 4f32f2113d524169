//! Bundled synthetic fixtures: a ten-FAQ card-support corpus, six training
//! sessions, one test session, and an out-of-domain query list. Everything
//! the harness and the acceptance suite need ships in-repo.

use crate::corpus::{FaqCorpus, FaqEntry, SessionScript};
use crate::error::Result;

const CORPUS_JSON: &str = include_str!("../fixtures/corpus.json");
const TRAIN_SESSIONS_JSON: &str = include_str!("../fixtures/train_sessions.json");
const TEST_SESSIONS_JSON: &str = include_str!("../fixtures/test_sessions.json");
const OOD_QUERIES_JSON: &str = include_str!("../fixtures/ood_queries.json");

pub fn bundled_corpus() -> FaqCorpus {
    let entries: Vec<FaqEntry> = serde_json::from_str(CORPUS_JSON).expect("bundled corpus parses");
    FaqCorpus::new("bundled", entries).expect("bundled corpus validates")
}

fn load_bundled_sessions(raw: &str, corpus: &FaqCorpus) -> Result<Vec<SessionScript>> {
    let sessions: Vec<SessionScript> = serde_json::from_str(raw).expect("bundled sessions parse");
    for session in &sessions {
        session.validate(corpus)?;
    }
    Ok(sessions)
}

pub fn bundled_train_sessions() -> Vec<SessionScript> {
    load_bundled_sessions(TRAIN_SESSIONS_JSON, &bundled_corpus())
        .expect("bundled training sessions validate")
}

pub fn bundled_test_sessions() -> Vec<SessionScript> {
    load_bundled_sessions(TEST_SESSIONS_JSON, &bundled_corpus())
        .expect("bundled test sessions validate")
}

pub fn bundled_ood_queries() -> Vec<String> {
    serde_json::from_str(OOD_QUERIES_JSON).expect("bundled OOD queries parse")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::StepKind;

    #[test]
    fn bundled_fixtures_load_and_validate() {
        let corpus = bundled_corpus();
        assert_eq!(corpus.len(), 10);
        let train = bundled_train_sessions();
        assert_eq!(train.len(), 6);
        let total_steps: usize = train.iter().map(|s| s.steps.len()).sum();
        assert_eq!(total_steps, 96);
        let test = bundled_test_sessions();
        assert_eq!(test.len(), 1);
        assert!(test[0].steps.len() >= 30);
        assert!(!bundled_ood_queries().is_empty());
    }

    #[test]
    fn test_session_mixes_all_step_kinds() {
        let test = bundled_test_sessions();
        for kind in [
            StepKind::Domain,
            StepKind::Followup,
            StepKind::Ood,
            StepKind::Greeting,
        ] {
            assert!(
                test[0].steps.iter().any(|s| s.kind == kind),
                "missing {kind:?}"
            );
        }
    }
}
