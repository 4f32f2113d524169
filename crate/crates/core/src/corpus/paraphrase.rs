//! Deterministic templated paraphrase generation for training pairs.
//!
//! Paraphrases are built from the source question by seeded synonym
//! substitution, filler templates, and an optional Hinglish function-word
//! pass. At least one content word of the source always survives, so every
//! generated query stays lexically anchored to its FAQ.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FaqCorpus, PairKind, ParaphrasePair};
use crate::seeds;

/// Generic-word synonym table. Domain nouns (otp, emi, cashback, ...) are
/// deliberately absent so they survive substitution.
const SYNONYMS: &[(&str, &[&str])] = &[
    ("annual", &["yearly", "per year"]),
    ("fee", &["charge", "charges"]),
    ("fees", &["charges"]),
    ("charges", &["fees", "penalty"]),
    ("benefits", &["perks", "advantages"]),
    ("offer", &["give", "provide"]),
    ("reduce", &["lower", "bring down"]),
    ("increase", &["raise", "bump up"]),
    ("apply", &["sign up", "register"]),
    ("receiving", &["getting"]),
    ("arrive", &["come", "show up"]),
    ("download", &["get", "save"]),
    ("convert", &["change", "switch"]),
    ("purchase", &["spend", "buying"]),
    ("monthly", &["month wise"]),
    ("lost", &["missing", "misplaced"]),
    ("stolen", &["theft"]),
    ("eligible", &["qualified", "allowed"]),
    ("phone", &["mobile", "number"]),
    ("payment", &["bill payment"]),
    ("late", &["delayed", "missed"]),
];

/// Leading/trailing filler templates; `{}` is the substituted core.
const TEMPLATES: &[&str] = &[
    "{}",
    "please tell me {}",
    "i want to know {}",
    "can you tell me {}",
    "{} please",
    "quick question {}",
    "hey {}",
    "one thing {}",
    "btw {}",
    "{} for this card",
    "need info {}",
    "tell me {} na",
];

/// Function-word substitutions for the Hinglish pass. Content words are
/// untouched.
const HINGLISH: &[(&str, &str)] = &[
    ("what", "kya"),
    ("is", "hai"),
    ("are", "hai"),
    ("how", "kaise"),
    ("why", "kyu"),
    ("can", "kya"),
    ("you", "aap"),
    ("i", "main"),
    ("my", "mera"),
    ("me", "mujhe"),
    ("tell", "batao"),
    ("please", "zara"),
    ("not", "nahi"),
    ("the", ""),
    ("there", ""),
    ("do", "karna"),
    ("for", "ke liye"),
    ("on", "pe"),
];

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "am", "was", "do", "does", "did", "i", "my", "me", "you",
    "your", "it", "for", "on", "in", "of", "to", "what", "how", "why", "when", "who", "can",
    "there", "this", "that", "and", "or", "if", "not", "into", "with",
];

/// Knobs for [`synth_paraphrases_with`].
#[derive(Debug, Clone, Copy)]
pub struct ParaphraseOptions {
    /// Apply the Hinglish pass to every n-th paraphrase of each FAQ.
    /// `0` disables the pass.
    pub hinglish_every: usize,
    /// Probability that a lexicon word is substituted.
    pub substitution_rate: f64,
    /// Probability that the paraphrase drops its stopwords entirely
    /// (keyword-style query).
    pub stopword_drop_rate: f64,
}

impl Default for ParaphraseOptions {
    fn default() -> Self {
        Self {
            hinglish_every: 4,
            substitution_rate: 0.9,
            stopword_drop_rate: 0.35,
        }
    }
}

fn normalize(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_content_word(word: &str) -> bool {
    !STOPWORDS.contains(&word)
}

fn lookup_synonyms(word: &str) -> Option<&'static [&'static str]> {
    SYNONYMS
        .iter()
        .find(|(key, _)| *key == word)
        .map(|(_, alts)| *alts)
}

fn substitute_words(words: &[String], rate: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut planned: Vec<Option<&'static str>> = words
        .iter()
        .map(|w| match lookup_synonyms(w) {
            Some(alts) if rng.gen::<f64>() < rate => Some(alts[rng.gen_range(0..alts.len())]),
            _ => None,
        })
        .collect();
    // Keep at least one content word verbatim.
    let survives = words
        .iter()
        .zip(&planned)
        .any(|(w, sub)| is_content_word(w) && sub.is_none());
    if !survives {
        if let Some(first) =
            (0..words.len()).find(|&i| is_content_word(&words[i]) && planned[i].is_some())
        {
            planned[first] = None;
        }
    }
    words
        .iter()
        .zip(planned)
        .map(|(w, sub)| sub.map(str::to_string).unwrap_or_else(|| w.clone()))
        .collect()
}

fn hinglish_pass(text: &str) -> String {
    let mapped: Vec<&str> = text
        .split_whitespace()
        .map(|w| {
            HINGLISH
                .iter()
                .find(|(en, _)| *en == w)
                .map(|(_, hi)| *hi)
                .unwrap_or(w)
        })
        .filter(|w| !w.is_empty())
        .collect();
    mapped.join(" ")
}

fn generate_one(
    question: &str,
    hinglish: bool,
    options: &ParaphraseOptions,
    rng: &mut ChaCha8Rng,
) -> String {
    let source = normalize(question);
    let words: Vec<String> = source.split_whitespace().map(str::to_string).collect();
    for _attempt in 0..8 {
        let substituted = substitute_words(&words, options.substitution_rate, rng);
        let keyword_style = rng.gen::<f64>() < options.stopword_drop_rate;
        let kept: Vec<&String> = if keyword_style {
            let kept: Vec<&String> = substituted.iter().filter(|w| is_content_word(w)).collect();
            if kept.is_empty() {
                substituted.iter().collect()
            } else {
                kept
            }
        } else {
            substituted.iter().collect()
        };
        let core = kept
            .iter()
            .map(|w| w.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let mut candidate = template.replace("{}", &core);
        if hinglish {
            candidate = hinglish_pass(&candidate);
        }
        let candidate = normalize(&candidate);
        if candidate != source {
            return candidate;
        }
    }
    // Every attempt collapsed back onto the source; force a filler prefix.
    normalize(&format!("quick question {source}"))
}

/// [`synth_paraphrases`] with explicit options.
pub fn synth_paraphrases_with(
    corpus: &FaqCorpus,
    per_faq: usize,
    seed: u64,
    options: ParaphraseOptions,
) -> Vec<ParaphrasePair> {
    assert!(per_faq >= 1, "per_faq must be at least 1");
    let mut pairs = Vec::with_capacity(corpus.len() * per_faq * 2);
    for (faq_idx, entry) in corpus.entries().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, faq_idx as u64));
        for j in 0..per_faq {
            for (k, kind) in [PairKind::QueryQuestion, PairKind::QueryQna]
                .into_iter()
                .enumerate()
            {
                let ordinal = j * 2 + k;
                let hinglish = options.hinglish_every > 0
                    && ordinal % options.hinglish_every == options.hinglish_every - 1;
                let query = generate_one(&entry.question, hinglish, &options, &mut rng);
                pairs.push(ParaphrasePair {
                    query,
                    faq_id: entry.id.clone(),
                    pair_kind: kind,
                });
            }
        }
    }
    pairs
}

/// Generates `per_faq` pairs of each pair kind per FAQ, deterministically
/// under `seed`. Every paraphrase is lexically distinct from its source
/// question while sharing at least one content word with it.
pub fn synth_paraphrases(corpus: &FaqCorpus, per_faq: usize, seed: u64) -> Vec<ParaphrasePair> {
    synth_paraphrases_with(corpus, per_faq, seed, ParaphraseOptions::default())
}
