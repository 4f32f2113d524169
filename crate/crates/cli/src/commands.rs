//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::{BufRead, Write as _};

use serde::{Deserialize, Serialize};

use raggate_core::corpus::{
    load_corpus, load_sessions, shuffle_session, synth_paraphrases, FaqCorpus, PairKind,
    ParaphrasePair, QueryStep, SessionScript,
};
use raggate_core::embedding::{
    eval_retrieval, ood_separation, train_head, EmbeddingStore, HeadTrainConfig, OodSeparation,
    ProjectionHead, RetrievalMetrics,
};
use raggate_core::error::{Error, Result};
use raggate_core::fixtures;
use raggate_core::gate::{GateConfig, GateMode};
use raggate_core::pipeline::{
    evaluate_setting, rollout_and_train, run_step, write_ledger_csv, write_trace_csv, Components,
    RolloutTrainConfig, RunMode, SessionEnv, SettingReport, StepInput,
};
use raggate_core::policy::{featurize, write_rollout_jsonl, Action, PolicyNet, PolicyTrainConfig};
use raggate_core::seeds;
use raggate_core::util::write_atomic;

use crate::config::RunConfig;

fn resolve_corpus(config: &RunConfig) -> Result<FaqCorpus> {
    match &config.corpus {
        Some(path) => load_corpus(path),
        None => Ok(fixtures::bundled_corpus()),
    }
}

fn resolve_train_sessions(config: &RunConfig, corpus: &FaqCorpus) -> Result<Vec<SessionScript>> {
    match &config.sessions {
        Some(path) => load_sessions(path, corpus),
        None => Ok(fixtures::bundled_train_sessions()),
    }
}

fn resolve_test_sessions(config: &RunConfig, corpus: &FaqCorpus) -> Result<Vec<SessionScript>> {
    match &config.test_sessions {
        Some(path) => load_sessions(path, corpus),
        None => Ok(fixtures::bundled_test_sessions()),
    }
}

fn resolve_store(config: &RunConfig) -> Result<EmbeddingStore> {
    match &config.embeddings {
        Some(path) => EmbeddingStore::load(path),
        None => Ok(EmbeddingStore::new(config.dimension)),
    }
}

fn load_trained_head(config: &RunConfig) -> Result<ProjectionHead> {
    let path = config.head_path();
    if !path.exists() {
        return Err(Error::Validation(format!(
            "no trained head at {} (run `raggate embed-train` first or pass --head)",
            path.display()
        )));
    }
    ProjectionHead::load(&path)
}

fn load_trained_policy(config: &RunConfig) -> Result<PolicyNet> {
    let path = config.policy_path();
    if !path.exists() {
        return Err(Error::Validation(format!(
            "no trained policy at {} (run `raggate policy-train` first or pass --policy)",
            path.display()
        )));
    }
    PolicyNet::load(&path)
}

/// Synthetic paraphrases plus a verbatim question anchor per FAQ and kind.
fn training_pairs(corpus: &FaqCorpus, config: &RunConfig) -> Vec<ParaphrasePair> {
    let mut pairs = synth_paraphrases(corpus, config.per_faq, config.seed);
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

/// Held-out labeled queries from an independent generator stream.
fn held_out_queries(corpus: &FaqCorpus, config: &RunConfig) -> Vec<(String, String)> {
    synth_paraphrases(corpus, config.eval_per_faq, config.seed + 10_000)
        .into_iter()
        .map(|p| (p.query, p.faq_id))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedMetrics {
    top1: f64,
    top3: f64,
    mean_top1_in: f64,
    mean_top1_ood: f64,
    separation_gap: f64,
}

impl EmbedMetrics {
    fn from_parts(retrieval: RetrievalMetrics, separation: OodSeparation) -> Self {
        Self {
            top1: retrieval.top1,
            top3: retrieval.top3,
            mean_top1_in: separation.mean_top1_in,
            mean_top1_ood: separation.mean_top1_ood,
            separation_gap: separation.gap(),
        }
    }
}

fn measure_head(
    store: &EmbeddingStore,
    head: &ProjectionHead,
    corpus: &FaqCorpus,
    held_out: &[(String, String)],
    ood: &[String],
) -> Result<EmbedMetrics> {
    let retrieval = eval_retrieval(store, head, corpus, held_out)?;
    let in_domain: Vec<String> = held_out.iter().map(|(q, _)| q.clone()).collect();
    let separation = ood_separation(store, head, corpus, &in_domain, ood)?;
    Ok(EmbedMetrics::from_parts(retrieval, separation))
}

fn print_metrics(label: &str, metrics: &EmbedMetrics) {
    println!(
        "  {label:<8} top1 {:.3}  top3 {:.3}  | mean top-1 in-domain {:.3}  ood {:.3}  gap {:.3}",
        metrics.top1,
        metrics.top3,
        metrics.mean_top1_in,
        metrics.mean_top1_ood,
        metrics.separation_gap
    );
}

#[derive(Serialize)]
struct EmbedReportFile {
    loss: raggate_core::embedding::LossKind,
    epochs: usize,
    learning_rate: f64,
    before: EmbedMetrics,
    after: EmbedMetrics,
    first_epoch_loss: f64,
    last_epoch_loss: f64,
}

pub fn cmd_embed_train(config: &RunConfig) -> Result<()> {
    let corpus = resolve_corpus(config)?;
    let store = resolve_store(config)?;
    let identity = ProjectionHead::identity_with(store.dimension(), config.tau, config.batch_size)?;
    let pairs = training_pairs(&corpus, config);
    let held_out = held_out_queries(&corpus, config);
    let ood = fixtures::bundled_ood_queries();

    let train_config = HeadTrainConfig {
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        loss: config.loss,
        seed: config.seed,
        margin: config.margin,
    };
    let before = measure_head(&store, &identity, &corpus, &held_out, &ood)?;
    let (trained, trace) = train_head(&identity, &pairs, &store, &corpus, &train_config)?;
    let after = measure_head(&store, &trained, &corpus, &held_out, &ood)?;

    trained.save(config.head_path())?;
    println!(
        "trained retrieval head on {} pairs ({:?}, {} epochs, lr {})",
        pairs.len(),
        config.loss,
        config.epochs,
        config.learning_rate
    );
    print_metrics("before", &before);
    print_metrics("after", &after);
    println!(
        "  loss     {:.4} -> {:.4}",
        trace.first().unwrap_or(&0.0),
        trace.last().unwrap_or(&0.0)
    );
    println!("head written to {}", config.head_path().display());

    let report = EmbedReportFile {
        loss: config.loss,
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        before,
        after,
        first_epoch_loss: *trace.first().unwrap_or(&0.0),
        last_epoch_loss: *trace.last().unwrap_or(&0.0),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&config.out.join("embed_metrics.json"), json.as_bytes())?;
    Ok(())
}

pub fn cmd_embed_eval(config: &RunConfig) -> Result<()> {
    let corpus = resolve_corpus(config)?;
    let store = resolve_store(config)?;
    let head = load_trained_head(config)?;
    let identity = ProjectionHead::identity_with(store.dimension(), config.tau, config.batch_size)?;
    let held_out = held_out_queries(&corpus, config);
    let ood = fixtures::bundled_ood_queries();
    println!("retrieval metrics on {} held-out queries:", held_out.len());
    print_metrics(
        "identity",
        &measure_head(&store, &identity, &corpus, &held_out, &ood)?,
    );
    print_metrics(
        "trained",
        &measure_head(&store, &head, &corpus, &held_out, &ood)?,
    );
    Ok(())
}

fn augmented_sessions(config: &RunConfig, sessions: Vec<SessionScript>) -> Vec<SessionScript> {
    if !config.augment_shuffles {
        return sessions;
    }
    let shuffled: Vec<SessionScript> = sessions
        .iter()
        .enumerate()
        .map(|(i, s)| shuffle_session(s, 1000 + i as u64))
        .collect();
    let mut all = sessions;
    all.extend(shuffled);
    all
}

fn build_components<'a>(
    config: &RunConfig,
    store: &'a EmbeddingStore,
    head: &'a ProjectionHead,
    corpus: &'a FaqCorpus,
) -> Result<Components<'a>> {
    let mut components = Components::new(store, head, corpus)?;
    components.k = config.k;
    components.mc_passes = config.mc_passes;
    Ok(components)
}

pub fn cmd_policy_train(config: &RunConfig) -> Result<()> {
    let corpus = resolve_corpus(config)?;
    let store = resolve_store(config)?;
    let head = load_trained_head(config)?;
    let sessions = resolve_train_sessions(config, &corpus)?;
    if sessions.is_empty() {
        return Err(Error::InsufficientData("no training sessions".into()));
    }
    let sessions = augmented_sessions(config, sessions);
    let components = build_components(config, &store, &head, &corpus)?;

    let net = PolicyNet::init(config.seed).with_dropout_rate(config.dropout_rate)?;
    let rt_config = RolloutTrainConfig {
        rounds: config.rounds,
        samples_per_round: config.samples,
        rollout_seed: config.seed,
        train: PolicyTrainConfig {
            epochs: config.policy_epochs,
            learning_rate: config.policy_learning_rate,
            lambda: config.lambda,
            gamma: config.gamma,
            seed: config.seed,
            batch_size: config.policy_batch_size,
        },
    };
    let (trained, trajectories, trace) =
        rollout_and_train(&net, &sessions, &components, &rt_config)?;

    let tuples: usize = trajectories.iter().map(|t| t.steps.len()).sum();
    write_rollout_jsonl(&trajectories, config.out.join("rollouts.jsonl"))?;
    trained.save(config.policy_path())?;
    let trace_json = serde_json::to_string_pretty(&trace).expect("trace serializes");
    write_atomic(&config.out.join("loss_trace.json"), trace_json.as_bytes())?;

    println!(
        "rolled out {} sessions x {} rounds x {} samples -> {} (state, action, reward) tuples",
        sessions.len(),
        config.rounds,
        config.samples,
        tuples
    );
    println!(
        "policy loss {:.4} -> {:.4} over {} updates",
        trace.first().unwrap_or(&0.0),
        trace.last().unwrap_or(&0.0),
        trace.len()
    );
    println!(
        "wrote {}, {}, {}",
        config.out.join("rollouts.jsonl").display(),
        config.policy_path().display(),
        config.out.join("loss_trace.json").display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    setting: String,
    tokens: usize,
    saving: f64,
    accuracy: f64,
}

fn saving_cell(mode: GateMode, saving: f64) -> String {
    if mode == GateMode::AllFetch {
        "-".to_string()
    } else {
        format!("~{:.0}%", saving * 100.0)
    }
}

fn print_report_table(reports: &[SettingReport]) {
    println!(
        "{:<14} {:>10} {:>8} {:>9}",
        "setting", "# tokens", "saving", "accuracy"
    );
    for report in reports {
        println!(
            "{:<14} {:>10} {:>8} {:>9.3}",
            report.setting.as_str(),
            report.total_tokens,
            saving_cell(report.setting, report.saving_vs_all_fetch),
            report.accuracy
        );
    }
}

pub fn cmd_report(config: &RunConfig) -> Result<()> {
    let corpus = resolve_corpus(config)?;
    let store = resolve_store(config)?;
    let head = load_trained_head(config)?;
    let policy = load_trained_policy(config)?;
    let sessions = resolve_test_sessions(config, &corpus)?;
    let components = build_components(config, &store, &head, &corpus)?;

    let mut reports = Vec::new();
    for mode in [GateMode::AllFetch, GateMode::SimThr, GateMode::SimThrPolicy] {
        reports.push(evaluate_setting(
            &sessions,
            mode,
            config.threshold,
            Some(&policy),
            &components,
            config.seed,
        )?);
    }
    print_report_table(&reports);

    let rows: Vec<ReportRow> = reports
        .iter()
        .map(|r| ReportRow {
            setting: r.setting.as_str().to_string(),
            tokens: r.total_tokens,
            saving: r.saving_vs_all_fetch,
            accuracy: r.accuracy,
        })
        .collect();
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_atomic(&config.out.join("report.json"), json.as_bytes())?;

    let policy_trace = &reports[2].trace;
    write_trace_csv(policy_trace, config.out.join("trace.csv"))?;
    println!();
    println!("per-step actions ({}):", GateMode::SimThrPolicy.as_str());
    for row in policy_trace {
        println!(
            "  {:>2} {:<9} {:<8} top1 {:<12} {:.3}  {}",
            row.step_index,
            format!("{:?}", row.kind).to_uppercase(),
            row.route.as_str(),
            row.top1_id,
            row.top1_score,
            row.query
        );
    }
    println!(
        "wrote {} and {}",
        config.out.join("report.json").display(),
        config.out.join("trace.csv").display()
    );
    Ok(())
}

pub fn cmd_simulate(config: &RunConfig) -> Result<()> {
    let corpus = resolve_corpus(config)?;
    let store = resolve_store(config)?;
    let head = load_trained_head(config)?;
    let policy = if config.mode.uses_policy() {
        Some(load_trained_policy(config)?)
    } else {
        None
    };
    let sessions = resolve_test_sessions(config, &corpus)?;
    let components = build_components(config, &store, &head, &corpus)?;

    let report = evaluate_setting(
        &sessions,
        config.mode,
        config.threshold,
        policy.as_ref(),
        &components,
        config.seed,
    )?;
    println!(
        "{}: {} steps, {} tokens (input {}, output {}), saving {:.3}, accuracy {:.3}",
        report.setting.as_str(),
        report.trace.len(),
        report.total_tokens,
        report.input_tokens,
        report.output_tokens,
        report.saving_vs_all_fetch,
        report.accuracy
    );
    write_ledger_csv(&report.trace, config.out.join("ledger.csv"))?;
    println!(
        "ledger written to {}",
        config.out.join("ledger.csv").display()
    );
    Ok(())
}

pub fn cmd_repl(config: &RunConfig) -> Result<()> {
    let corpus = resolve_corpus(config)?;
    let store = resolve_store(config)?;
    let head = load_trained_head(config)?;
    let policy = if config.mode.uses_policy() {
        Some(load_trained_policy(config)?)
    } else {
        None
    };
    let components = build_components(config, &store, &head, &corpus)?;

    // Exact-text lookup so scripted queries keep their annotations.
    let mut scripted: BTreeMap<String, QueryStep> = BTreeMap::new();
    for session in resolve_train_sessions(config, &corpus)?
        .into_iter()
        .chain(resolve_test_sessions(config, &corpus)?)
    {
        for step in session.steps {
            scripted.entry(step.text.clone()).or_insert(step);
        }
    }

    let gate_config = GateConfig::new(config.mode, config.threshold);
    let mut env = SessionEnv::new();
    let stdin = std::io::stdin();
    let mut turn = 0u64;
    println!(
        "interactive mode ({}, threshold {}); type a query, or \"exit\" to quit",
        config.mode.as_str(),
        config.threshold
    );
    print!("> ");
    std::io::stdout().flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        let query = line.trim();
        if query.is_empty() {
            print!("> ");
            std::io::stdout().flush()?;
            continue;
        }
        if query == "exit" {
            break;
        }
        match repl_step(
            query,
            &scripted,
            &mut env,
            &gate_config,
            policy.as_ref(),
            &components,
            config,
            turn,
        ) {
            Ok(()) => {}
            Err(err) => println!("error: {err}"),
        }
        turn += 1;
        print!("> ");
        std::io::stdout().flush()?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn repl_step(
    query: &str,
    scripted: &BTreeMap<String, QueryStep>,
    env: &mut SessionEnv,
    gate_config: &GateConfig,
    policy: Option<&PolicyNet>,
    components: &Components<'_>,
    config: &RunConfig,
    turn: u64,
) -> Result<()> {
    let step = scripted.get(query);
    let input = match step {
        Some(step) => StepInput::Scripted(step),
        None => StepInput::Free(query),
    };
    let consult = match gate_config.mode {
        GateMode::PolicyOnly => true,
        GateMode::SimThrPolicy => {
            components.index().query(query, 1)?.top1().1 < gate_config.threshold
        }
        _ => false,
    };
    let choice = if consult {
        let net = policy.ok_or_else(|| Error::MissingPolicyAction {
            mode: gate_config.mode.as_str().to_string(),
        })?;
        let prev = env.policy_prev();
        let contexts = env.history.context_ids();
        let state = featurize(&prev, query, components.index(), &contexts)?;
        let probs = net.mc_predict(
            &state,
            components.mc_passes,
            seeds::derive2(config.seed, u64::MAX, turn),
        );
        let action = if probs.0 >= probs.1 {
            Action::Fetch
        } else {
            Action::NoFetch
        };
        Some(raggate_core::gate::PolicyChoice { action, probs })
    } else {
        None
    };
    let outcome = run_step(
        env,
        input,
        gate_config,
        choice.as_ref(),
        components,
        RunMode::Report,
    )?;
    println!("{}", outcome.answer);
    let probs = outcome
        .decision
        .policy_probs
        .map(|(f, n)| format!("p_fetch {f:.3}, p_no_fetch {n:.3}"))
        .unwrap_or_else(|| "policy not consulted".to_string());
    println!(
        "[route {} | top1 {} {:.3} | {} | +{} input, +{} output tokens{}]",
        outcome.decision.route.as_str(),
        outcome.decision.top1.0,
        outcome.decision.top1.1,
        probs,
        outcome.input_tokens,
        outcome.output_tokens,
        outcome
            .rating
            .as_ref()
            .map(|r| format!(" | rated {}", r.verdict.as_str()))
            .unwrap_or_default(),
    );
    Ok(())
}
