//! Mini-batch gradient descent on the projection head.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{infonce_core, triplet_core};
use super::{EmbeddingStore, EmbeddingVector, ProjectionHead};
use crate::corpus::{FaqCorpus, PairKind, ParaphrasePair};
use crate::error::{Error, Result};
use crate::exec;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    Infonce,
    Triplet,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Hinge margin for the triplet baseline.
    pub margin: f64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            learning_rate: 0.2,
            loss: LossKind::Infonce,
            seed: 17,
            margin: 0.2,
        }
    }
}

/// Trains the projection weights on paraphrase pairs with plain SGD over
/// shuffled mini-batches of the head's batch size, mixing both pair kinds.
/// Deterministic under `config.seed`; returns the updated head and the
/// per-epoch mean batch loss.
pub fn train_head(
    head: &ProjectionHead,
    pairs: &[ParaphrasePair],
    store: &EmbeddingStore,
    corpus: &FaqCorpus,
    config: &HeadTrainConfig,
) -> Result<(ProjectionHead, Vec<f64>)> {
    let batch_size = head.batch_size();
    if pairs.len() < batch_size {
        return Err(Error::InsufficientData(format!(
            "need at least {batch_size} pairs, got {}",
            pairs.len()
        )));
    }
    for pair in pairs {
        if !corpus.contains(&pair.faq_id) {
            return Err(Error::Validation(format!(
                "pair references unknown FAQ id \"{}\"",
                pair.faq_id
            )));
        }
    }
    if config.loss == LossKind::Triplet && corpus.len() < 2 {
        return Err(Error::InsufficientData(
            "triplet loss needs at least two FAQs for negatives".into(),
        ));
    }

    // Resolve all embeddings once; training only touches W.
    let resolved: Vec<(EmbeddingVector, EmbeddingVector)> = exec::map_ordered(pairs, |pair| {
        let entry = corpus.get(&pair.faq_id).expect("validated above");
        let target = match pair.pair_kind {
            PairKind::QueryQuestion => store.embed(&entry.question),
            PairKind::QueryQna => store.embed(&entry.qna_text()),
        };
        (store.embed(&pair.query), target)
    });
    let qna_vectors: Vec<EmbeddingVector> =
        exec::map_ordered(corpus.entries(), |e| store.embed(&e.qna_text()));
    let faq_index_of: Vec<usize> = pairs
        .iter()
        .map(|p| {
            corpus
                .entries()
                .iter()
                .position(|e| e.id == p.faq_id)
                .expect("validated above")
        })
        .collect();

    let mut w = head.weights().clone();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive2(config.seed, epoch as u64, 0));
        let mut negative_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive2(config.seed, epoch as u64, 1));
        let batches_idx = epoch_batches(&faq_index_of, corpus.len(), batch_size, &mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in batches_idx.iter().map(Vec::as_slice) {
            if chunk.len() < 2 {
                continue;
            }
            let (loss, grad) = match config.loss {
                LossKind::Infonce => {
                    let views: Vec<&Array1<f64>> = chunk
                        .iter()
                        .flat_map(|&i| {
                            let (a, p) = &resolved[i];
                            [a.values(), p.values()]
                        })
                        .collect();
                    infonce_core(&w, head.tau(), &views)?
                }
                LossKind::Triplet => {
                    let mut total = 0.0;
                    let mut grad = Array2::<f64>::zeros((w.nrows(), w.ncols()));
                    for &i in chunk {
                        let (anchor, positive) = &resolved[i];
                        let negative = loop {
                            let j = negative_rng.gen_range(0..corpus.len());
                            if j != faq_index_of[i] {
                                break &qna_vectors[j];
                            }
                        };
                        let (l, g) = triplet_core(
                            &w,
                            anchor.values(),
                            positive.values(),
                            negative.values(),
                            config.margin,
                        )?;
                        total += l;
                        grad += &g;
                    }
                    let scale = 1.0 / chunk.len() as f64;
                    (total * scale, grad * scale)
                }
            };
            w.scaled_add(-config.learning_rate, &grad);
            epoch_loss += loss;
            batches += 1;
        }
        trace.push(epoch_loss / batches.max(1) as f64);
    }
    let trained = ProjectionHead::new(w, head.tau(), batch_size)?;
    Ok((trained, trace))
}

// Batches deal at most one pair per FAQ, so views of the same FAQ never act
// as in-batch negatives for each other. Pops are seeded-shuffled; order is
// deterministic.
fn epoch_batches(
    faq_index_of: &[usize],
    faq_count: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); faq_count];
    for (pair_idx, &faq) in faq_index_of.iter().enumerate() {
        queues[faq].push(pair_idx);
    }
    for queue in &mut queues {
        queue.shuffle(rng);
    }
    let mut batches = Vec::new();
    loop {
        let mut alive: Vec<usize> = (0..faq_count).filter(|&f| !queues[f].is_empty()).collect();
        if alive.is_empty() {
            break;
        }
        alive.shuffle(rng);
        for chunk in alive.chunks(batch_size) {
            let batch: Vec<usize> = chunk
                .iter()
                .map(|&faq| queues[faq].pop().expect("alive queue"))
                .collect();
            batches.push(batch);
        }
    }
    batches
}
