//! Acceptance suite: every release criterion as one test with a printed
//! pass/fail line. Run with `cargo test -p raggate-cli --test acceptance`.

use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use raggate_core::corpus::{
    shuffle_session, synth_paraphrases, FaqCorpus, PairKind, ParaphrasePair, QueryStep,
    SessionScript, StepKind,
};
use raggate_core::embedding::{
    eval_retrieval, infonce_loss, ood_separation, train_head, triplet_loss, EmbeddingStore,
    EmbeddingVector, HeadTrainConfig, OodSeparation, ProjectionHead, RetrievalIndex,
    RetrievalMetrics,
};
use raggate_core::fixtures;
use raggate_core::gate::GateMode;
use raggate_core::pipeline::{
    evaluate_setting, reward, rollout_and_train, Components, EvalRating, RewardConfig,
    RolloutTrainConfig, Verdict,
};
use raggate_core::policy::{
    featurize, pg_loss, returns, Action, DropoutMode, PgExample, PolicyNet, PolicyTrainConfig,
};

fn check(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion:02} [{}] {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn lcg(state: &mut u64) -> f64 {
    *state = state
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

// ---------------------------------------------------------------------------
// Shared trained artifacts (built once; the heavy criteria reuse them).

struct Trained {
    corpus: FaqCorpus,
    store: EmbeddingStore,
    head: ProjectionHead,
    net: PolicyNet,
    before: RetrievalMetrics,
    after: RetrievalMetrics,
    sep_before: OodSeparation,
    sep_after: OodSeparation,
    head_train_time: Duration,
}

fn training_pairs(corpus: &FaqCorpus, seed: u64) -> Vec<ParaphrasePair> {
    let mut pairs = synth_paraphrases(corpus, 12, seed);
    for entry in corpus.entries() {
        for kind in [PairKind::QueryQuestion, PairKind::QueryQna] {
            pairs.push(ParaphrasePair {
                query: entry.question.clone(),
                faq_id: entry.id.clone(),
                pair_kind: kind,
            });
        }
    }
    pairs
}

fn held_out(corpus: &FaqCorpus, seed: u64) -> Vec<(String, String)> {
    synth_paraphrases(corpus, 4, seed + 10_000)
        .into_iter()
        .map(|p| (p.query, p.faq_id))
        .collect()
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let seed = 17;
        let corpus = fixtures::bundled_corpus();
        let store = EmbeddingStore::new(256);
        let identity = ProjectionHead::identity(256);
        let pairs = training_pairs(&corpus, seed);
        let eval_queries = held_out(&corpus, seed);
        let in_domain: Vec<String> = eval_queries.iter().map(|(q, _)| q.clone()).collect();
        let ood = fixtures::bundled_ood_queries();

        let before = eval_retrieval(&store, &identity, &corpus, &eval_queries).unwrap();
        let sep_before = ood_separation(&store, &identity, &corpus, &in_domain, &ood).unwrap();

        let started = Instant::now();
        let (head, _) = train_head(
            &identity,
            &pairs,
            &store,
            &corpus,
            &HeadTrainConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let head_train_time = started.elapsed();

        let after = eval_retrieval(&store, &head, &corpus, &eval_queries).unwrap();
        let sep_after = ood_separation(&store, &head, &corpus, &in_domain, &ood).unwrap();

        let components = Components::new(&store, &head, &corpus).unwrap();
        let mut sessions = fixtures::bundled_train_sessions();
        let shuffled: Vec<SessionScript> = sessions
            .iter()
            .enumerate()
            .map(|(i, s)| shuffle_session(s, 1000 + i as u64))
            .collect();
        sessions.extend(shuffled);
        let (net, _, _) = rollout_and_train(
            &PolicyNet::init(seed),
            &sessions,
            &components,
            &RolloutTrainConfig {
                rounds: 3,
                samples_per_round: 3,
                rollout_seed: seed,
                train: PolicyTrainConfig::default(),
            },
        )
        .unwrap();

        Trained {
            corpus,
            store,
            head,
            net,
            before,
            after,
            sep_before,
            sep_after,
            head_train_time,
        }
    })
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_reward_shaping_exactness() {
    let config = RewardConfig::default();
    let good = EvalRating {
        verdict: Verdict::Good,
        reason: String::new(),
    };
    let bad = EvalRating {
        verdict: Verdict::Bad,
        reason: String::new(),
    };
    let fetch = reward(Action::Fetch, None, &config).unwrap();
    let no_fetch_good = reward(Action::NoFetch, Some(&good), &config).unwrap();
    let no_fetch_bad = reward(Action::NoFetch, Some(&bad), &config).unwrap();
    let pass = fetch == 0.1 && no_fetch_good == 2.0 && no_fetch_bad == -1.0;
    check(
        1,
        "reward shaping",
        pass,
        &format!("FETCH={fetch}, NO_FETCH+GOOD={no_fetch_good}, NO_FETCH+BAD={no_fetch_bad}"),
    );
}

#[test]
fn acceptance_02_return_oracle() {
    let g = returns(&[0.1, 2.0], 0.1);
    let worked = (g[0] - 0.3).abs() < 1e-12 && (g[1] - 2.0).abs() < 1e-12;

    let mut state = 0xACCE_0002u64;
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let len = 1 + (case % 20);
        let rewards: Vec<f64> = (0..len).map(|_| lcg(&mut state) * 4.0).collect();
        let gamma = [0.0, 0.1, 0.5, 0.9, 1.0][case % 5];
        let g = returns(&rewards, gamma);
        for t in 0..len {
            let next = if t + 1 < len { g[t + 1] } else { 0.0 };
            worst = worst.max((g[t] - (rewards[t] + gamma * next)).abs());
        }
    }
    let pass = worked && worst < 1e-12;
    check(
        2,
        "return oracle",
        pass,
        &format!("returns([0.1, 2], 0.1) = {g:?}; worst recursion residual {worst:.2e} over 1000 sequences"),
    );
}

fn ev(values: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(ndarray_from(values)).unwrap()
}

fn ndarray_from(values: &[f64]) -> ndarray::Array1<f64> {
    ndarray::Array1::from_vec(values.to_vec())
}

fn random_head(d: usize, state: &mut u64) -> ProjectionHead {
    let w = ndarray::Array2::from_shape_fn((d, d), |(r, c)| {
        lcg(state) * 0.6 + if r == c { 1.0 } else { 0.0 }
    });
    ProjectionHead::new(w, 0.1, 8).unwrap()
}

#[test]
fn acceptance_03_gradient_suites() {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let started = Instant::now();
    let mut state = 0xACCE_0003u64;
    let d = 4;

    // infoNCE: 20 random miniature instances.
    let mut worst_infonce: f64 = 0.0;
    for _ in 0..20 {
        let head = random_head(d, &mut state);
        let pairs: Vec<(EmbeddingVector, EmbeddingVector)> = (0..2)
            .map(|_| {
                (
                    ev(&(0..d).map(|_| lcg(&mut state)).collect::<Vec<_>>()),
                    ev(&(0..d).map(|_| lcg(&mut state)).collect::<Vec<_>>()),
                )
            })
            .collect();
        let (_, grad) = infonce_loss(&head, &pairs).unwrap();
        for r in 0..d {
            for c in 0..d {
                let mut wp = head.weights().clone();
                wp[[r, c]] += STEP;
                let mut wm = head.weights().clone();
                wm[[r, c]] -= STEP;
                let lp = infonce_loss(&ProjectionHead::new(wp, 0.1, 8).unwrap(), &pairs)
                    .unwrap()
                    .0;
                let lm = infonce_loss(&ProjectionHead::new(wm, 0.1, 8).unwrap(), &pairs)
                    .unwrap()
                    .0;
                let fd = (lp - lm) / (2.0 * STEP);
                let denom = fd.abs().max(grad[[r, c]].abs()).max(1e-8);
                worst_infonce = worst_infonce.max((fd - grad[[r, c]]).abs() / denom);
            }
        }
    }

    // Triplet: 20 instances with the hinge strictly active.
    let mut worst_triplet: f64 = 0.0;
    let mut active = 0;
    while active < 20 {
        let head = random_head(d, &mut state);
        let a = ev(&(0..d).map(|_| lcg(&mut state)).collect::<Vec<_>>());
        let p = ev(&(0..d).map(|_| lcg(&mut state)).collect::<Vec<_>>());
        let n = ev(&(0..d).map(|_| lcg(&mut state)).collect::<Vec<_>>());
        let (loss, grad) = triplet_loss(&head, &a, &p, &n, 0.5).unwrap();
        if loss < 0.05 {
            continue;
        }
        active += 1;
        for r in 0..d {
            for c in 0..d {
                let mut wp = head.weights().clone();
                wp[[r, c]] += STEP;
                let mut wm = head.weights().clone();
                wm[[r, c]] -= STEP;
                let lp = triplet_loss(&ProjectionHead::new(wp, 0.1, 8).unwrap(), &a, &p, &n, 0.5)
                    .unwrap()
                    .0;
                let lm = triplet_loss(&ProjectionHead::new(wm, 0.1, 8).unwrap(), &a, &p, &n, 0.5)
                    .unwrap()
                    .0;
                let fd = (lp - lm) / (2.0 * STEP);
                let denom = fd.abs().max(grad[[r, c]].abs()).max(1e-8);
                worst_triplet = worst_triplet.max((fd - grad[[r, c]]).abs() / denom);
            }
        }
    }

    // Policy gradient: 20 random miniature nets and batches. Parameters are
    // perturbed through the public save/load surface.
    let dir = tempfile::tempdir().unwrap();
    let net_path = dir.path().join("net.json");
    let perturb = |net: &PolicyNet, field: &str, idx: usize, eps: f64| -> PolicyNet {
        net.save(&net_path).unwrap();
        let mut value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&net_path).unwrap()).unwrap();
        let current = value[field][idx].as_f64().unwrap();
        value[field][idx] = serde_json::json!(current + eps);
        std::fs::write(&net_path, serde_json::to_string(&value).unwrap()).unwrap();
        PolicyNet::load(&net_path).unwrap()
    };

    let mut worst_pg: f64 = 0.0;
    for instance in 0..20u64 {
        let net = PolicyNet::init(3000 + instance);
        let examples: Vec<PgExample> = (0..3)
            .map(|i| PgExample {
                features: std::array::from_fn(|_| lcg(&mut state)),
                action: if (i + instance as usize).is_multiple_of(2) {
                    Action::Fetch
                } else {
                    Action::NoFetch
                },
                ret: [2.0, -1.0, 0.1][i],
            })
            .collect();
        let mask_seed = 500 + instance;
        let (_, grads) = pg_loss(&net, &examples, 0.1, mask_seed).unwrap();

        let mut probes: Vec<(&str, usize, f64)> = Vec::new();
        for (i, j) in [(0usize, 0usize), (3, 7), (7, 15), (5, 3)] {
            probes.push(("w1", i * 16 + j, grads.w1[[i, j]]));
        }
        for j in [0usize, 9, 15] {
            probes.push(("b1", j, grads.b1[j]));
        }
        for (j, k) in [(0usize, 0usize), (9, 1), (15, 0)] {
            probes.push(("w2", j * 2 + k, grads.w2[[j, k]]));
        }
        for k in [0usize, 1] {
            probes.push(("b2", k, grads.b2[k]));
        }
        for (field, idx, analytic) in probes {
            let plus = perturb(&net, field, idx, STEP);
            let minus = perturb(&net, field, idx, -STEP);
            let lp = pg_loss(&plus, &examples, 0.1, mask_seed).unwrap().0;
            let lm = pg_loss(&minus, &examples, 0.1, mask_seed).unwrap().0;
            let fd = (lp - lm) / (2.0 * STEP);
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            worst_pg = worst_pg.max((fd - analytic).abs() / denom);
        }
    }

    let elapsed = started.elapsed();
    let pass = worst_infonce < TOL
        && worst_triplet < TOL
        && worst_pg < TOL
        && elapsed < Duration::from_secs(10);
    check(
        3,
        "gradient suites",
        pass,
        &format!(
            "max relative error: infoNCE {worst_infonce:.2e}, triplet {worst_triplet:.2e}, policy {worst_pg:.2e}; elapsed {elapsed:?}"
        ),
    );
}

#[test]
fn acceptance_04_infonce_symmetry_case() {
    let head = ProjectionHead::identity(6);
    let v = ev(&[0.5, -0.25, 1.0, 0.0, 0.3, -0.7]);
    let pairs: Vec<_> = (0..8).map(|_| (v.clone(), v.clone())).collect();
    let (loss, _) = infonce_loss(&head, &pairs).unwrap();
    let ratio = (-loss).exp();
    let pass = (loss - (15.0f64).ln()).abs() < 1e-9 && (ratio - 1.0 / 15.0).abs() < 1e-9;
    check(
        4,
        "infoNCE symmetry",
        pass,
        &format!(
            "loss = {loss:.12} (ln 15 = {:.12}), per-view ratio = {ratio:.12}",
            (15.0f64).ln()
        ),
    );
}

#[test]
fn acceptance_05_retrieval_improvement() {
    let t = trained();
    let improvement = t.after.top1 - t.before.top1;
    let pass =
        improvement >= 0.15 && t.after.top1 >= 0.90 && t.head_train_time < Duration::from_secs(60);
    check(
        5,
        "retrieval improvement",
        pass,
        &format!(
            "held-out top-1 {:.3} -> {:.3} (+{:.3}); training took {:?}",
            t.before.top1, t.after.top1, improvement, t.head_train_time
        ),
    );
}

#[test]
fn acceptance_06_ood_separation() {
    let t = trained();
    let pass = t.sep_after.gap() > t.sep_before.gap() && t.sep_after.gap() >= 0.10;
    check(
        6,
        "OOD separation",
        pass,
        &format!(
            "gap {:.3} -> {:.3} (in {:.3}/ood {:.3} -> in {:.3}/ood {:.3})",
            t.sep_before.gap(),
            t.sep_after.gap(),
            t.sep_before.mean_top1_in,
            t.sep_before.mean_top1_ood,
            t.sep_after.mean_top1_in,
            t.sep_after.mean_top1_ood
        ),
    );
}

#[test]
fn acceptance_07_end_to_end_savings_ordering() {
    let t = trained();
    let started = Instant::now();
    let components = Components::new(&t.store, &t.head, &t.corpus).unwrap();
    let sessions = fixtures::bundled_test_sessions();
    let mut reports = Vec::new();
    for mode in [GateMode::AllFetch, GateMode::SimThr, GateMode::SimThrPolicy] {
        reports
            .push(evaluate_setting(&sessions, mode, 0.92, Some(&t.net), &components, 17).unwrap());
    }
    let elapsed = started.elapsed() + t.head_train_time;
    let (all, simthr, policy) = (&reports[0], &reports[1], &reports[2]);
    let pass = policy.total_tokens < simthr.total_tokens
        && simthr.total_tokens < all.total_tokens
        && policy.saving_vs_all_fetch >= 0.20
        && policy.accuracy >= all.accuracy
        && elapsed < Duration::from_secs(300);
    check(
        7,
        "end-to-end savings ordering",
        pass,
        &format!(
            "tokens {} (SIMTHR_POLICY) < {} (SIMTHR) < {} (ALL_FETCH); saving {:.1}%; accuracy {:.3} vs {:.3}; elapsed {elapsed:?}",
            policy.total_tokens,
            simthr.total_tokens,
            all.total_tokens,
            policy.saving_vs_all_fetch * 100.0,
            policy.accuracy,
            all.accuracy
        ),
    );
}

#[test]
fn acceptance_08_follow_up_behavior() {
    let t = trained();
    let components = Components::new(&t.store, &t.head, &t.corpus).unwrap();
    // Three queries answered by the same FAQ; context should be fetched only
    // for the first.
    let session = SessionScript {
        id: "same-faq".into(),
        steps: vec![
            QueryStep {
                text: "what cashback will i get on swiggy".into(),
                kind: StepKind::Domain,
                target_faq_id: Some("cashback".into()),
                depends_on: None,
            },
            QueryStep {
                text: "what about pvr".into(),
                kind: StepKind::Domain,
                target_faq_id: Some("cashback".into()),
                depends_on: Some(0),
            },
            QueryStep {
                text: "how much on curefit".into(),
                kind: StepKind::Domain,
                target_faq_id: Some("cashback".into()),
                depends_on: Some(0),
            },
        ],
    };
    session.validate(&t.corpus).unwrap();
    let report = evaluate_setting(
        std::slice::from_ref(&session),
        GateMode::SimThrPolicy,
        0.92,
        Some(&t.net),
        &components,
        17,
    )
    .unwrap();
    let routes: Vec<&str> = report.trace.iter().map(|r| r.route.as_str()).collect();
    let all_good = report
        .trace
        .iter()
        .all(|r| r.verdict == Some(Verdict::Good));
    let pass = routes == ["FETCH", "NO_FETCH", "NO_FETCH"] && all_good;
    check(
        8,
        "follow-up behavior",
        pass,
        &format!("decisions {routes:?}, all GOOD = {all_good}"),
    );
}

#[test]
fn acceptance_09_policy_convergence_sanity() {
    let t = trained();
    let components = Components::new(&t.store, &t.head, &t.corpus).unwrap();
    let index = RetrievalIndex::new(&t.store, &t.head, &t.corpus).unwrap();

    // World where NO_FETCH is always GOOD: out-of-domain sessions.
    let ood_session = SessionScript {
        id: "all-ood".into(),
        steps: fixtures::bundled_ood_queries()
            .into_iter()
            .take(8)
            .map(|text| QueryStep {
                text,
                kind: StepKind::Ood,
                target_faq_id: None,
                depends_on: None,
            })
            .collect(),
    };
    let (good_net, _, _) = rollout_and_train(
        &PolicyNet::init(5),
        std::slice::from_ref(&ood_session),
        &components,
        &RolloutTrainConfig {
            rounds: 3,
            samples_per_round: 24,
            rollout_seed: 5,
            train: PolicyTrainConfig::default(),
        },
    )
    .unwrap();
    let mut worst_no_fetch: f64 = 1.0;
    for step in &ood_session.steps {
        let state = featurize(&[], &step.text, &index, &[]).unwrap();
        let (_, p_no_fetch) = good_net.forward(&state, DropoutMode::Off);
        worst_no_fetch = worst_no_fetch.min(p_no_fetch);
    }

    // World where NO_FETCH is always BAD: fresh single-step domain sessions,
    // so no context is ever available without fetching.
    let bad_sessions: Vec<SessionScript> = t
        .corpus
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| SessionScript {
            id: format!("bad-{i}"),
            steps: vec![QueryStep {
                text: synth_paraphrases(&t.corpus, 1, 70 + i as u64)
                    .into_iter()
                    .find(|p| p.faq_id == e.id)
                    .unwrap()
                    .query,
                kind: StepKind::Domain,
                target_faq_id: Some(e.id.clone()),
                depends_on: None,
            }],
        })
        .collect();
    let (bad_net, _, _) = rollout_and_train(
        &PolicyNet::init(6),
        &bad_sessions,
        &components,
        &RolloutTrainConfig {
            rounds: 3,
            samples_per_round: 20,
            rollout_seed: 6,
            train: PolicyTrainConfig::default(),
        },
    )
    .unwrap();
    let mut worst_fetch: f64 = 1.0;
    for session in &bad_sessions {
        let state = featurize(&[], &session.steps[0].text, &index, &[]).unwrap();
        let (p_fetch, _) = bad_net.forward(&state, DropoutMode::Off);
        worst_fetch = worst_fetch.min(p_fetch);
    }

    let pass = worst_no_fetch > 0.9 && worst_fetch > 0.9;
    check(
        9,
        "policy convergence sanity",
        pass,
        &format!("GOOD world worst p_no_fetch {worst_no_fetch:.4}; BAD world worst p_fetch {worst_fetch:.4}"),
    );
}

#[test]
fn acceptance_10_cli_determinism() {
    let binary = env!("CARGO_BIN_EXE_raggate");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_arg = out.to_str().unwrap();

    let run = |args: &[&str]| {
        let output = Command::new(binary)
            .args(args)
            .output()
            .expect("binary runs");
        assert!(
            output.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&output.stderr)
        );
    };
    let snapshot = |names: &[&str]| -> Vec<Vec<u8>> {
        names
            .iter()
            .map(|name| std::fs::read(out.join(name)).expect(name))
            .collect()
    };

    run(&["embed-train", "--out", out_arg]);
    run(&["policy-train", "--out", out_arg]);
    let train_files = ["rollouts.jsonl", "policy.json", "loss_trace.json"];
    let first_train = snapshot(&train_files);
    run(&["policy-train", "--out", out_arg]);
    let second_train = snapshot(&train_files);

    run(&["report", "--out", out_arg]);
    let report_files = ["report.json", "trace.csv"];
    let first_report = snapshot(&report_files);
    run(&["report", "--out", out_arg]);
    let second_report = snapshot(&report_files);

    let trains_match = first_train == second_train;
    let reports_match = first_report == second_report;
    let pass = trains_match && reports_match;
    check(
        10,
        "CLI determinism",
        pass,
        &format!(
            "policy-train outputs byte-identical: {trains_match}; report outputs byte-identical: {reports_match}"
        ),
    );
}
