use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{Adam, DropoutMask, Head};
use super::{Model, TrainConfig};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging::ScreeningImage;

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: ScreeningImage,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub history: TrainHistory,
}

struct Encoded {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn encode(
    model: &Model,
    items: &[LabeledImage],
    preprocess: &(dyn Fn(&ScreeningImage) -> ScreeningImage + Sync),
) -> Result<Encoded> {
    let features = items
        .par_iter()
        .map(|item| model.features(&preprocess(&item.image)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Encoded {
        features,
        labels: items.iter().map(|i| i.label.index()).collect(),
    })
}

fn accuracy(head: &Head, data: &Encoded) -> (f64, f64) {
    let correct = data
        .features
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| {
            let p = head.predict_proba(x);
            usize::from(p[1] > p[0]) == y
        })
        .count();
    let loss = head.eval_loss(&data.features, &data.labels).total();
    (correct as f64 / data.labels.len() as f64, loss)
}

/// Trains the head on `train`, keeping the weights of the epoch with the
/// best validation accuracy (ties go to the lower validation loss).
///
/// The backbone is frozen, so every image is preprocessed and encoded once.
pub fn train(
    mut model: Model,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &TrainConfig,
    preprocess: &(dyn Fn(&ScreeningImage) -> ScreeningImage + Sync),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training("training and validation sets must be non-empty".into()));
    }
    for label in Label::ALL {
        if !train.iter().any(|i| i.label == label) {
            return Err(Error::Training(format!(
                "training set has no {label} images; both classes are required"
            )));
        }
    }

    let train_set = encode(&model, train, preprocess)?;
    let val_set = encode(&model, val, preprocess)?;
    tracing::info!(train = train.len(), val = val.len(), "encoded training images");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = model.head.clone();
    let mut adam = Adam::new(&head, cfg.momentum, cfg.second_moment_decay, cfg.adam_epsilon);
    let rate = head.spec().dropout_rate;
    let units = head.units();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, f64, Head)> = None;
    let mut first_step = true;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| train_set.features[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let mask = DropoutMask::sample(&mut rng, chunk.len(), units, rate);
            let pass = head.forward_backward(&xs, &ys, &mask);
            let loss = pass.loss.total();
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, step {steps}: {:?}",
                    pass.loss
                )));
            }
            adam.apply(&mut head, &pass.grads, lr);
            if first_step {
                head.set_moving_stats(&pass.batch_mean, &pass.batch_var);
                first_step = false;
            } else {
                head.update_moving_stats(&pass.batch_mean, &pass.batch_var);
            }
            loss_sum += loss * chunk.len() as f64;
            correct += pass
                .probabilities
                .iter()
                .zip(&ys)
                .filter(|(p, &y)| usize::from(p[1] > p[0]) == y)
                .count();
            steps += 1;
        }

        let (val_accuracy, val_loss) = accuracy(&head, &val_set);
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            steps,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        };
        tracing::info!(?record, "epoch finished");
        history.epochs.push(record);

        let better = match &best {
            None => true,
            Some((acc, loss, _)) => val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss),
        };
        if better {
            best = Some((val_accuracy, val_loss, head.clone()));
            history.best_epoch = epoch;
        }
    }

    if let Some((_, _, kept)) = best {
        model.head = kept;
    }
    model.mark_trained(cfg.clone(), None);
    Ok(TrainedModel { model, history })
}
