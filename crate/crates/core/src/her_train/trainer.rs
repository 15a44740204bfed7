use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, TrainingHistory};
use super::loss::{loss_and_gradient, EmbeddedTriplet};
use super::{TrainConfig, TrainError};
use crate::embedder::{similarity, EmbeddingVector, ProjectionHead};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrieverMetrics {
    /// Fraction of triplets with sim(x, e+) > sim(x, e-).
    pub pairwise_accuracy: f64,
    /// Mean reciprocal rank of e+ against all validation negatives.
    pub mrr: f64,
    pub n: usize,
}

impl RetrieverMetrics {
    /// Selection order: pairwise accuracy, then MRR.
    fn better_than(&self, other: &Self) -> bool {
        self.pairwise_accuracy > other.pairwise_accuracy
            || (self.pairwise_accuracy == other.pairwise_accuracy && self.mrr > other.mrr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub batch_losses: Vec<f64>,
    pub validation: RetrieverMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: TrainingHistory,
}

pub fn evaluate_retriever(
    head: &ProjectionHead,
    validation: &[EmbeddedTriplet],
) -> Result<RetrieverMetrics, TrainError> {
    if validation.is_empty() {
        return Err(TrainError::InsufficientData("empty validation set".into()));
    }
    let proj = |v: &EmbeddingVector| head.project(v);
    let queries = validation.iter().map(|t| proj(&t.query)).collect::<Result<Vec<_>, _>>()?;
    let positives = validation.iter().map(|t| proj(&t.positive)).collect::<Result<Vec<_>, _>>()?;
    let negatives = validation.iter().map(|t| proj(&t.negative)).collect::<Result<Vec<_>, _>>()?;
    let mut correct = 0usize;
    let mut rr = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let sp = similarity(q, &positives[i])?;
        if sp > similarity(q, &negatives[i])? {
            correct += 1;
        }
        let mut above = 0usize;
        for n in &negatives {
            if similarity(q, n)? > sp {
                above += 1;
            }
        }
        rr += 1.0 / (above + 1) as f64;
    }
    let n = validation.len();
    Ok(RetrieverMetrics {
        pairwise_accuracy: correct as f64 / n as f64,
        mrr: rr / n as f64,
        n,
    })
}

/// Seeded shuffle, then the last `fraction` (at least one item) becomes validation.
pub fn split_validation<T: Clone>(items: &[T], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let n_val = ((items.len() as f64 * fraction).ceil() as usize).clamp(1, items.len().max(1));
    let cut = items.len().saturating_sub(n_val);
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    (pick(&order[..cut]), pick(&order[cut..]))
}

/// Trains a head from the identity. Each epoch reshuffles the training split
/// and steps Adam once per full batch (the trailing remainder is dropped); the
/// head is then scored on the held-out split. The initial identity head is
/// scored as epoch 0 and competes for selection, and ties keep the earlier epoch.
pub fn train(
    config: &TrainConfig,
    triplets: &[EmbeddedTriplet],
    base_model_id: &str,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let dim = triplets
        .first()
        .map(|t| t.query.dim())
        .ok_or_else(|| TrainError::InsufficientData("no triplets".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_set, val_set) = split_validation(triplets, config.validation_fraction, &mut rng);
    if train_set.len() < config.batch_size {
        return Err(TrainError::InsufficientData(format!(
            "{} training triplets after holding out {} for validation; batch size is {}",
            train_set.len(),
            val_set.len(),
            config.batch_size
        )));
    }

    let config_hash = config.config_hash();
    let mut head = ProjectionHead::identity(dim, base_model_id);
    let baseline = evaluate_retriever(&head, &val_set)?;
    let mut best = Checkpoint {
        head: head.clone(),
        epoch: 0,
        validation_metric: baseline.pairwise_accuracy,
        validation_mrr: baseline.mrr,
        config_hash: config_hash.clone(),
    };
    let mut best_metrics = baseline;
    let mut state = AdamState::new(dim * dim);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for chunk in order.chunks_exact(config.batch_size) {
            let batch: Vec<EmbeddedTriplet> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grad) = loss_and_gradient(&head, &batch, config.batch_size, config.temperature)?;
            let (w, s) = adam_step(&state, head.weights(), &grad, config)?;
            state = s;
            head = ProjectionHead::from_weights(dim, w, base_model_id, epoch as u32)?;
            batch_losses.push(loss);
        }
        let validation = evaluate_retriever(&head, &val_set)?;
        let mean_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        tracing::info!(epoch, mean_loss, acc = validation.pairwise_accuracy, mrr = validation.mrr, "epoch done");
        if validation.better_than(&best_metrics) {
            best_metrics = validation;
            best = Checkpoint {
                head: head.clone(),
                epoch,
                validation_metric: validation.pairwise_accuracy,
                validation_mrr: validation.mrr,
                config_hash: config_hash.clone(),
            };
        }
        epochs.push(EpochRecord {
            epoch,
            steps: batch_losses.len(),
            mean_loss,
            batch_losses,
            validation,
        });
    }

    let history = TrainingHistory {
        config: config.clone(),
        config_hash,
        n_train: train_set.len(),
        n_validation: val_set.len(),
        baseline,
        epochs,
        best_epoch: best.epoch,
        best: best_metrics,
    };
    Ok(TrainOutcome { best, history })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn random_triplets(n: usize, d: usize, seed: u64) -> Vec<EmbeddedTriplet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rv = || EmbeddingVector::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (0..n)
            .map(|_| EmbeddedTriplet { query: rv(), positive: rv(), negative: rv() })
            .collect()
    }

    #[test]
    fn perfect_ordering_scores_one() {
        let v = |x: &[f64]| EmbeddingVector::new(x.to_vec()).unwrap();
        let t = EmbeddedTriplet { query: v(&[1.0, 0.0]), positive: v(&[1.0, 0.1]), negative: v(&[-1.0, 0.0]) };
        let m = evaluate_retriever(&ProjectionHead::identity(2, "m"), std::slice::from_ref(&t)).unwrap();
        assert_eq!((m.pairwise_accuracy, m.mrr), (1.0, 1.0));
        let m = evaluate_retriever(&ProjectionHead::identity(2, "m"), &[t.clone(), t]).unwrap();
        assert_eq!(m.pairwise_accuracy, 1.0);
        assert!(evaluate_retriever(&ProjectionHead::identity(2, "m"), &[]).is_err());
    }

    #[test]
    fn identity_head_on_noise_is_chance() {
        let m = evaluate_retriever(&ProjectionHead::identity(8, "m"), &random_triplets(500, 8, 3)).unwrap();
        assert!((m.pairwise_accuracy - 0.5).abs() <= 0.1, "{m:?}");
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, batch_size: 8, seed: 5, ..TrainConfig::default() };
        let data = random_triplets(60, 4, 1);
        let out = train(&cfg, &data, "m").unwrap();
        assert!(out.best.head.is_identity());
        assert_eq!(out.history.epochs[0].validation, out.history.baseline);
        assert_eq!(out.best.validation_metric, out.history.baseline.pairwise_accuracy);
    }

    #[test]
    fn insufficient_data_is_reported() {
        let cfg = TrainConfig { batch_size: 32, ..TrainConfig::default() };
        let err = train(&cfg, &random_triplets(20, 4, 1), "m").unwrap_err();
        assert!(err.to_string().contains("insufficient data"));
    }

    #[test]
    fn best_epoch_dominates_history() {
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 4, batch_size: 8, seed: 2, ..TrainConfig::default() };
        let out = train(&cfg, &random_triplets(100, 4, 9), "m").unwrap();
        for e in &out.history.epochs {
            assert!(out.best.validation_metric >= e.validation.pairwise_accuracy);
            assert_eq!(e.steps, out.history.n_train / 8);
        }
        assert!(out.best.validation_metric >= out.history.baseline.pairwise_accuracy);
    }
}
