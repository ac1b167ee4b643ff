use std::time::Instant;

use log::{debug, error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, FoldTag, SplitPlan, SynergySample};
use crate::error::{Error, Result};
use crate::hypernet::Hypergraph;
use crate::metrics::{evaluate, EvalResult, MetricRow};
use crate::tensor::{bce_value, AdamW, Matrix, ParamStore, Tape};

use super::{augment, bce_loss, Model, ModelInputs, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss over the augmented training set before the first update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based; 0 means no epoch improved on the untrained model.
    pub best_epoch: usize,
    pub best_validation: EvalResult,
    pub stop_reason: StopReason,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn last_epoch(&self) -> usize {
        self.epochs.len()
    }
}

/// A trained model together with the graph it was trained on.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub propagation: Matrix,
    pub report: TrainReport,
}

/// Seed for one run of a fold.
pub fn derive_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Propagation matrix of the training hypergraph.
pub fn training_propagation(data: &Dataset, train: &[SynergySample], config: &TrainConfig) -> Result<Matrix> {
    let inputs_layout = crate::hypernet::NodeLayout {
        drugs: data.drugs.len(),
        cells: data.cells.len(),
        diseases: data.diseases.len(),
    };
    let hg = Hypergraph::build(
        inputs_layout,
        train,
        &data.drug_disease,
        config.effective_interaction_weight(),
    )?;
    Ok(hg.propagation_matrix())
}

fn validation_metrics(
    model: &Model,
    inputs: &ModelInputs,
    propagation: &Matrix,
    samples: &[SynergySample],
) -> Result<EvalResult> {
    let scores = model.predict(inputs, propagation, samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    evaluate(&scores, &labels).map_err(|e| match e {
        Error::UndefinedMetric(m) => Error::Config(format!("validation set is degenerate: {m}")),
        e => e,
    })
}

fn mean_loss(model: &Model, inputs: &ModelInputs, propagation: &Matrix, samples: &[SynergySample]) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape)?;
    let refined = model.refined(&mut tape, &bind, inputs, propagation)?;
    let triples: Vec<_> = samples.iter().map(|s| (s.drug_a, s.drug_b, s.cell)).collect();
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let out = model.score(&mut tape, &bind, refined, &triples, false, &mut unused)?;
    let y: Vec<f64> = samples.iter().map(|s| s.label as u8 as f64).collect();
    Ok(bce_value(tape.value(out).column(0).as_slice().unwrap(), &y))
}

/// Mini-batch training with early stopping on validation AUROC. Returns the
/// best-validation parameters.
pub fn train(
    data_inputs: &ModelInputs,
    propagation: Matrix,
    train: &[SynergySample],
    validation: &[SynergySample],
    config: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    if validation.is_empty() {
        return Err(Error::Config("empty validation split".into()));
    }
    if train.iter().any(|s| s.fold_tag != Some(FoldTag::Train)) {
        return Err(Error::Contract("training samples must be tagged for training".into()));
    }
    let start = Instant::now();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut model = Model::new(config, data_inputs.dims(), &mut init_rng)?;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut samples = augment(train);

    let initial_train_loss = mean_loss(&model, data_inputs, &propagation, &samples)?;
    let mut best_validation = validation_metrics(&model, data_inputs, &propagation, validation)?;
    let mut best_store: ParamStore = model.store.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in samples.chunks(config.batch_size).enumerate() {
            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let bind = model.store.bind(&mut tape)?;
                let refined = model.refined(&mut tape, &bind, data_inputs, &propagation)?;
                let triples: Vec<_> = batch.iter().map(|s| (s.drug_a, s.drug_b, s.cell)).collect();
                let pred = model.score(&mut tape, &bind, refined, &triples, true, &mut rng)?;
                let labels: Vec<bool> = batch.iter().map(|s| s.label).collect();
                let loss = bce_loss(&mut tape, pred, &labels)?;
                let grads = tape.backward(loss)?;
                model.store.accumulate(&bind, &grads);
                Ok(tape.scalar(loss))
            };
            let loss = step().inspect_err(|e| {
                if let Error::NonFinite { op } = e {
                    error!("training diverged at epoch {epoch}, batch {b}: non-finite `{op}`");
                }
            })?;
            opt.step(&mut model.store);
            total += loss * batch.len() as f64;
        }
        let train_loss = total / samples.len() as f64;
        let val = validation_metrics(&model, data_inputs, &propagation, validation)?;
        debug!(
            "epoch {epoch}: loss {train_loss:.5}, val auroc {:.4}, auprc {:.4}, f1 {:.4}",
            val.auroc, val.auprc, val.f1
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation: val,
        });
        if val.auroc > best_validation.auroc {
            best_validation = val;
            best_epoch = epoch;
            best_store = model.store.clone();
        } else if epoch - best_epoch >= config.early_stop_patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    model.store = best_store;
    let report = TrainReport {
        initial_train_loss,
        epochs,
        best_epoch,
        best_validation,
        stop_reason,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(Trained {
        model,
        propagation,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub trained: Trained,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    /// Fold with the highest validation AUROC.
    pub best_fold: usize,
    /// Best fold's model on the held-out test set; `None` if it is empty.
    pub test: Option<EvalResult>,
}

impl CvOutcome {
    pub fn validation_aurocs(&self) -> Vec<f64> {
        self.folds
            .iter()
            .map(|f| f.trained.report.best_validation.auroc)
            .collect()
    }

    pub fn mean_validation_auroc(&self) -> f64 {
        let v = self.validation_aurocs();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn best(&self) -> &FoldOutcome {
        &self.folds[self.best_fold]
    }

    /// One row per fold (best validation metrics) and a `test` row when a
    /// test set exists.
    pub fn metric_rows(&self, mode: &str) -> Vec<MetricRow> {
        let mut rows: Vec<MetricRow> = self
            .folds
            .iter()
            .map(|f| MetricRow::new(mode, f.fold.to_string(), &f.trained.report.best_validation))
            .collect();
        if let Some(t) = &self.test {
            rows.push(MetricRow::new(mode, "test", t));
        }
        rows
    }
}

/// Trains one fold of `plan`.
pub fn train_fold(
    data: &Dataset,
    inputs: &ModelInputs,
    plan: &SplitPlan,
    fold: usize,
    config: &TrainConfig,
) -> Result<FoldOutcome> {
    let (train_set, val_set, _) = plan.tagged(&data.samples, fold);
    let propagation = training_propagation(data, &train_set, config)?;
    info!(
        "{} fold {fold}: {} train, {} validation samples",
        plan.mode,
        train_set.len(),
        val_set.len()
    );
    let trained = train(
        inputs,
        propagation,
        &train_set,
        &val_set,
        config,
        derive_seed(config.seed, fold),
    )?;
    info!(
        "{} fold {fold}: best epoch {} of {}, validation auroc {:.4}",
        plan.mode,
        trained.report.best_epoch,
        trained.report.last_epoch(),
        trained.report.best_validation.auroc
    );
    Ok(FoldOutcome { fold, trained })
}

/// Five-fold cross-validation followed by test evaluation of the best fold.
/// Folds run on up to `jobs` threads.
pub fn cross_validate(data: &Dataset, plan: &SplitPlan, config: &TrainConfig, jobs: usize) -> Result<CvOutcome> {
    let inputs = ModelInputs::from_dataset(data)?;
    let n = plan.folds.len();
    let jobs = jobs.clamp(1, n.max(1));
    let mut results: Vec<Option<Result<FoldOutcome>>> = (0..n).map(|_| None).collect();
    for chunk in (0..n).collect::<Vec<_>>().chunks(jobs) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&f| {
                    let inputs = &inputs;
                    (f, scope.spawn(move || train_fold(data, inputs, plan, f, config)))
                })
                .collect();
            for (f, h) in handles {
                results[f] = Some(h.join().expect("fold worker panicked"));
            }
        });
    }
    let folds = results.into_iter().map(|r| r.unwrap()).collect::<Result<Vec<_>>>()?;
    let best_fold = (0..folds.len())
        .max_by(|&a, &b| {
            let (x, y) = (
                folds[a].trained.report.best_validation.auroc,
                folds[b].trained.report.best_validation.auroc,
            );
            x.total_cmp(&y).then(b.cmp(&a))
        })
        .ok_or_else(|| Error::Config("split plan has no folds".into()))?;
    let (_, _, test_set) = plan.tagged(&data.samples, best_fold);
    let test = if test_set.is_empty() {
        None
    } else {
        let best = &folds[best_fold].trained;
        let scores = best.model.predict(&inputs, &best.propagation, &test_set)?;
        let labels: Vec<bool> = test_set.iter().map(|s| s.label).collect();
        Some(evaluate(&scores, &labels)?)
    };
    Ok(CvOutcome { folds, best_fold, test })
}
