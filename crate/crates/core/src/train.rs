//! Mini-batch training with ADAM, class-weighted cross-entropy, per-epoch
//! fuzzy-rule refits and early stopping on validation cross-entropy.
//!
//! A [`Trainer`] holds everything that evolves during training (weights,
//! optimizer moments, RNG, activation buffer, history), so saving it after
//! any epoch and loading it later continues exactly as if uninterrupted.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::autodiff::{AdamState, Graph, ParamStore};
use crate::data::EpochSet;
use crate::error::{Error, Result};
use crate::eval::{accuracy, cross_entropy};
use crate::fnb::{ActivationBuffer, FcmConfig};
use crate::layers::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassBalance {
    /// Natural class frequencies, loss weighted by `N / (2 N_c)`.
    Weighted,
    /// Natural frequencies, plain mean loss.
    Natural,
    /// Each epoch draws as many non-targets as there are targets.
    Undersample,
}

impl std::str::FromStr for ClassBalance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(ClassBalance::Weighted),
            "natural" => Ok(ClassBalance::Natural),
            "undersample" => Ok(ClassBalance::Undersample),
            _ => Err(Error::invalid(format!(
                "unknown class balance `{s}` (valid: weighted, natural, undersample)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation CE.
    pub patience: usize,
    pub balance: ClassBalance,
    pub fcm: FcmConfig,
    pub buffer_capacity: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-4,
            max_epochs: 200,
            patience: 20,
            balance: ClassBalance::Weighted,
            fcm: FcmConfig::default(),
            buffer_capacity: ActivationBuffer::DEFAULT_CAPACITY,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be ≥ 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean (weighted) mini-batch loss in training mode.
    pub train_ce: f64,
    pub train_accuracy: f64,
    pub val_ce: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Probabilities and metrics of a model on a labelled set (inference mode).
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub probs: Vec<Vec<f64>>,
    pub preds: Vec<usize>,
    pub accuracy: f64,
    pub cross_entropy: f64,
}

pub fn score(model: &Model, set: &EpochSet, batch: usize) -> Result<Scored> {
    let mut probs = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let p = model.predict_proba(&set.batch(chunk)?)?;
        probs.extend((0..chunk.len()).map(|i| p.row(i).to_vec()));
    }
    let labels = set.labels();
    let preds: Vec<usize> = probs.iter().map(|p| usize::from(p[1] > p[0])).collect();
    Ok(Scored {
        accuracy: accuracy(&preds, &labels)?,
        cross_entropy: cross_entropy(&probs, &labels)?,
        preds,
        probs,
    })
}

/// Reject splits that share a recording run.
pub fn check_disjoint(sets: &[&EpochSet]) -> Result<()> {
    let mut owner = std::collections::HashMap::new();
    for (i, s) in sets.iter().enumerate() {
        let runs: HashSet<_> = s
            .epochs
            .iter()
            .map(|e| (e.meta.subject, e.meta.session, e.meta.run))
            .collect();
        for r in runs {
            if let Some(j) = owner.insert(r, i) {
                return Err(Error::invalid(format!(
                    "splits {j} and {i} both contain subject {} session {} run {}",
                    r.0, r.1, r.2
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub history: History,
    adam: AdamState,
    rng: ChaCha8Rng,
    buffer: ActivationBuffer,
    best: Option<(f64, ParamStore)>,
    since_best: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: AdamState::new(config.lr),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            buffer: ActivationBuffer::new(
                config.buffer_capacity,
                config.seed ^ 0x9e37_79b9_7f4a_7c15,
            ),
            best: None,
            since_best: 0,
            history: History::default(),
            model,
            config,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.epochs.len()
    }

    pub fn is_finished(&self) -> bool {
        self.history.stopped_early || self.epochs_done() >= self.config.max_epochs
    }

    fn class_weights(&self, train: &EpochSet) -> Result<[f64; 2]> {
        let counts = train.class_counts();
        if counts.contains(&0) {
            return Err(Error::invalid(format!(
                "training set needs both classes, got counts {counts:?}"
            )));
        }
        Ok(match self.config.balance {
            ClassBalance::Weighted => {
                let n = train.len() as f64;
                [n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)]
            }
            ClassBalance::Natural | ClassBalance::Undersample => [1.0, 1.0],
        })
    }

    fn epoch_order(&mut self, train: &EpochSet) -> Vec<usize> {
        let mut idx: Vec<usize> = match self.config.balance {
            ClassBalance::Undersample => {
                let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
                    (0..train.len()).partition(|&i| train.epochs[i].target);
                neg.shuffle(&mut self.rng);
                neg.truncate(pos.len());
                pos.append(&mut neg);
                pos
            }
            _ => (0..train.len()).collect(),
        };
        idx.shuffle(&mut self.rng);
        idx
    }

    /// Loss of one batch before any update (used to sanity-check initialization).
    pub fn batch_loss(&self, train: &EpochSet, idx: &[usize]) -> Result<f64> {
        let weights = self.class_weights(train)?;
        let mut g = Graph::new();
        let x = g.constant(train.batch(idx)?);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.model.forward(&mut g, x, Mode::Infer, &mut rng)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.epochs[i].label()).collect();
        let loss = g.softmax_cross_entropy(pass.logits, &labels, &weights)?;
        Ok(g.value(loss).item())
    }

    /// One pass over `train`, the fuzzy-rule refit, then validation.
    pub fn run_epoch(&mut self, train: &EpochSet, val: &EpochSet) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid(
                "training and validation sets must be non-empty",
            ));
        }
        check_disjoint(&[train, val])?;
        let weights = self.class_weights(train)?;
        let order = self.epoch_order(train);
        let fnb = self.model.fnb();
        let (mut loss_sum, mut weight_sum, mut hits) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.epochs[i].label()).collect();
            let mut g = Graph::new();
            let x = g.constant(train.batch(chunk)?);
            let pass = self.model.forward(&mut g, x, Mode::Train, &mut self.rng)?;
            let loss = g.softmax_cross_entropy(pass.logits, &labels, &weights)?;
            let w: f64 = labels.iter().map(|&y| weights[y]).sum();
            loss_sum += g.value(loss).item() * w;
            weight_sum += w;
            let probs = g.value(pass.probs);
            hits += labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| usize::from(probs.row(i)[1] > probs.row(i)[0]) == y)
                .count();
            if let Some(v) = pass.fnb_input {
                self.buffer.collect_rows(g.value(v), Mode::Train);
            }
            let grads = g.backward(loss)?;
            self.adam.step(&mut self.model.params, grads.params())?;
            self.model.apply_bn_stats(&pass.bn_stats)?;
        }
        if let Some(block) = fnb {
            block.epoch_end_update(
                &mut self.model.params,
                &mut self.buffer,
                &self.config.fcm,
                &mut self.rng,
            )?;
        }
        let v = score(&self.model, val, self.config.batch_size.max(256))?;
        let record = EpochRecord {
            epoch: self.epochs_done() + 1,
            train_ce: loss_sum / weight_sum,
            train_accuracy: 100.0 * hits as f64 / order.len() as f64,
            val_ce: v.cross_entropy,
            val_accuracy: v.accuracy,
        };
        log::info!(
            "epoch {}: train CE {:.4} acc {:.1}%, val CE {:.4} acc {:.1}%",
            record.epoch,
            record.train_ce,
            record.train_accuracy,
            record.val_ce,
            record.val_accuracy
        );
        if self
            .best
            .as_ref()
            .map_or(true, |(ce, _)| record.val_ce < *ce)
        {
            self.best = Some((record.val_ce, self.model.params.clone()));
            self.history.best_epoch = Some(record.epoch);
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if self.since_best >= self.config.patience {
                self.history.stopped_early = true;
            }
        }
        self.history.epochs.push(record.clone());
        Ok(record)
    }

    /// Train until the epoch budget or patience runs out, calling
    /// `after_epoch` after each epoch (e.g. to save a resumable state).
    pub fn fit_with(
        &mut self,
        train: &EpochSet,
        val: &EpochSet,
        mut after_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(train, val)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn fit(&mut self, train: &EpochSet, val: &EpochSet) -> Result<()> {
        self.fit_with(train, val, |_| Ok(()))
    }

    /// The model with the best-validation weights, and the history.
    pub fn finish(mut self) -> (Model, History) {
        if let Some((_, params)) = self.best.take() {
            self.model.params = params;
        }
        (self.model, self.history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Train a fresh model; returns the best-validation model and the history.
pub fn train(
    model: Model,
    train: &EpochSet,
    val: &EpochSet,
    config: TrainConfig,
) -> Result<(Model, History)> {
    let mut t = Trainer::new(model, config)?;
    t.fit(train, val)?;
    Ok(t.finish())
}
