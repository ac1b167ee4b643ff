//! Model, loss, training loop, grid search and checkpoints on a small
//! synthetic dataset.

use std::collections::BTreeSet;

use hypersyn::datasets::{make_split, synth_dataset, Dataset, FoldTag, SplitMode, SplitPlan, SynergySample, SynthSpec};
use hypersyn::synergy::{
    augment, bce_loss, cross_validate, derive_seed, grid_search, train, train_fold, training_propagation, Ablation,
    Checkpoint, CheckpointHeader, Grid, Model, ModelInputs, StopReason, TrainConfig,
};
use hypersyn::tensor::{Matrix, Tape};
use hypersyn::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

struct Fixture {
    _dir: tempfile::TempDir,
    data: Dataset,
    inputs: ModelInputs,
    plan: SplitPlan,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        drugs: 16,
        cells: 8,
        diseases: 4,
        samples: 600,
        genes: 12,
        disease_dim: 6,
        seed: 3,
        ..SynthSpec::default()
    };
    let paths = synth_dataset(&spec).unwrap().write(dir.path()).unwrap();
    let data = Dataset::load(&paths).unwrap();
    let inputs = ModelInputs::from_dataset(&data).unwrap();
    let plan = make_split(&data.samples, SplitMode::Random, 1).unwrap();
    Fixture {
        _dir: dir,
        data,
        inputs,
        plan,
    }
}

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 4,
        early_stop_patience: 4,
        batch_size: 128,
        common_dim: 8,
        heads: 2,
        gtn_layers: 1,
        refinement_layers: 2,
        head_hidden: vec![8],
        ..TrainConfig::new(seed)
    }
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

fn store_bits(model: &Model) -> Vec<Vec<u64>> {
    model.store.iter().map(|(_, t)| bits(t.value())).collect()
}

#[test]
fn zero_learning_rate_is_a_null_optimizer() {
    let fx = fixture();
    let config = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 3,
        ..tiny(5)
    };
    let (tr, va, _) = fx.plan.tagged(&fx.data.samples, 0);
    let p = training_propagation(&fx.data, &tr, &config).unwrap();
    let trained = train(&fx.inputs, p, &tr, &va, &config, 5).unwrap();
    let fresh = Model::new(&config, fx.inputs.dims(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(store_bits(&trained.model), store_bits(&fresh));
    let first = trained.report.epochs[0].validation;
    assert!(trained.report.epochs.iter().all(|e| e.validation == first));
}

#[test]
fn training_reduces_loss() {
    let fx = fixture();
    let config = TrainConfig {
        max_epochs: 8,
        early_stop_patience: 8,
        ..tiny(2)
    };
    let outcome = train_fold(&fx.data, &fx.inputs, &fx.plan, 0, &config).unwrap();
    let report = &outcome.trained.report;
    assert!(report.losses().iter().all(|l| l.is_finite()));
    assert!(
        *report.losses().last().unwrap() < report.initial_train_loss,
        "{:?} vs {}",
        report.losses(),
        report.initial_train_loss
    );
    assert!(report.best_epoch <= report.last_epoch());
}

#[test]
fn same_seed_gives_bit_identical_runs() {
    let fx = fixture();
    let a = train_fold(&fx.data, &fx.inputs, &fx.plan, 1, &tiny(9)).unwrap();
    let b = train_fold(&fx.data, &fx.inputs, &fx.plan, 1, &tiny(9)).unwrap();
    let la: Vec<u64> = a.trained.report.losses().iter().map(|v| v.to_bits()).collect();
    let lb: Vec<u64> = b.trained.report.losses().iter().map(|v| v.to_bits()).collect();
    assert_eq!(la, lb);
    assert_eq!(store_bits(&a.trained.model), store_bits(&b.trained.model));
    let c = train_fold(&fx.data, &fx.inputs, &fx.plan, 1, &tiny(10)).unwrap();
    assert_ne!(store_bits(&a.trained.model), store_bits(&c.trained.model));
}

#[test]
fn early_stopping_respects_patience() {
    let fx = fixture();
    let config = TrainConfig {
        learning_rate: 2e-2,
        max_epochs: 40,
        early_stop_patience: 2,
        ..tiny(4)
    };
    let r = train_fold(&fx.data, &fx.inputs, &fx.plan, 2, &config)
        .unwrap()
        .trained
        .report;
    assert!(r.last_epoch() <= r.best_epoch + config.early_stop_patience);
    if r.stop_reason == StopReason::EarlyStop {
        assert_eq!(r.last_epoch(), r.best_epoch + config.early_stop_patience);
    } else {
        assert_eq!(r.last_epoch(), config.max_epochs);
    }
    let best = r
        .epochs
        .iter()
        .map(|e| e.validation.auroc)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(r.best_validation.auroc >= best);
}

#[test]
fn train_rejects_bad_inputs() {
    let fx = fixture();
    let config = tiny(0);
    let (tr, va, _) = fx.plan.tagged(&fx.data.samples, 0);
    let p = training_propagation(&fx.data, &tr, &config).unwrap();
    assert!(matches!(
        train(&fx.inputs, p.clone(), &[], &va, &config, 0),
        Err(Error::Contract(_))
    ));
    let untagged: Vec<SynergySample> = fx.plan.folds[0]
        .train
        .iter()
        .map(|&i| fx.data.samples[i].clone())
        .collect();
    assert!(matches!(
        train(&fx.inputs, p, &untagged, &va, &config, 0),
        Err(Error::Contract(_))
    ));
    // Held-out samples never reach the hypergraph.
    assert!(matches!(
        training_propagation(&fx.data, &va, &config),
        Err(Error::Contract(_))
    ));
}

fn one_step_grads(fx: &Fixture, config: &TrainConfig) -> (Model, BTreeSet<String>) {
    let model = Model::new(config, fx.inputs.dims(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (tr, _, _) = fx.plan.tagged(&fx.data.samples, 0);
    let p = training_propagation(&fx.data, &tr, config).unwrap();
    let batch: Vec<SynergySample> = augment(&tr).into_iter().take(config.batch_size).collect();
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape).unwrap();
    let refined = model.refined(&mut tape, &bind, &fx.inputs, &p).unwrap();
    let triples: Vec<_> = batch.iter().map(|s| (s.drug_a, s.drug_b, s.cell)).collect();
    let pred = model
        .score(
            &mut tape,
            &bind,
            refined,
            &triples,
            true,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
    let labels: Vec<bool> = batch.iter().map(|s| s.label).collect();
    let loss = bce_loss(&mut tape, pred, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let dead = model
        .store
        .ids()
        .filter(|&id| grads.get_or_zeros(&tape, bind[id]).iter().all(|&g| g == 0.0))
        .map(|id| model.store.name(id).to_string())
        .collect();
    (model, dead)
}

#[test]
fn every_parameter_receives_gradient_unless_ablated() {
    let fx = fixture();
    let (model, dead) = one_step_grads(&fx, &tiny(0));
    assert!(dead.is_empty(), "dead parameters: {dead:?}");
    assert!(model.store.len() > 10);

    let names = |m: &Model, pat: &[&str]| -> BTreeSet<String> {
        m.store
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| pat.iter().any(|p| n.contains(p)))
            .collect()
    };
    for ablation in Ablation::ALL {
        let config = tiny(0).with_ablation(ablation);
        let (model, dead) = one_step_grads(&fx, &config);
        let expected = match ablation {
            Ablation::NoTransformer => names(&model, &["w_query", "w_key"]),
            Ablation::NoDisease => names(&model, &["disease."]),
            Ablation::NoResidual | Ablation::PlainResidual => names(&model, &["w_gate", "b_gate"]),
        };
        assert!(!expected.is_empty());
        assert_eq!(dead, expected, "{}", ablation.name());
    }
}

#[test]
fn symmetrized_scores_are_order_invariant() {
    let fx = fixture();
    let config = tiny(0);
    let model = Model::new(&config, fx.inputs.dims(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (tr, _, _) = fx.plan.tagged(&fx.data.samples, 0);
    let p = training_propagation(&fx.data, &tr, &config).unwrap();
    let forward: Vec<SynergySample> = fx.data.samples.iter().take(50).cloned().collect();
    let swapped: Vec<SynergySample> = forward
        .iter()
        .map(|s| SynergySample {
            drug_a: s.drug_b,
            drug_b: s.drug_a,
            ..s.clone()
        })
        .collect();
    let a = model.predict(&fx.inputs, &p, &forward).unwrap();
    let b = model.predict(&fx.inputs, &p, &swapped).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|&s| s > 0.0 && s < 1.0));

    let mut zeroed = model.clone();
    let last = zeroed.head.layers.last().unwrap().clone();
    zeroed.store.get_mut(last.weight).value_mut().fill(0.0);
    zeroed.store.get_mut(last.bias).value_mut().fill(0.0);
    assert!(zeroed
        .predict(&fx.inputs, &p, &forward)
        .unwrap()
        .iter()
        .all(|&s| s == 0.5));

    let bad = vec![SynergySample::new(0, 999, 0, 1.0)];
    assert!(matches!(
        model.predict(&fx.inputs, &p, &bad),
        Err(Error::Reference { .. })
    ));
}

#[test]
fn augment_examples() {
    let s = SynergySample::new(1, 2, 0, 50.0);
    let out = augment(std::slice::from_ref(&s));
    assert_eq!(out.len(), 2);
    assert_eq!((out[0].drug_a, out[0].drug_b), (1, 2));
    assert_eq!(
        (out[1].drug_a, out[1].drug_b, out[1].cell, out[1].label),
        (2, 1, 0, true)
    );
    assert!(augment(&[]).is_empty());
    assert_eq!(augment(&[SynergySample::new(3, 3, 1, 40.0)]).len(), 1);
}

proptest! {
    #[test]
    fn augment_doubles_and_keeps_balance(raw in prop::collection::vec((0usize..6, 0usize..6, 0usize..3, -50.0f64..80.0), 0..40)) {
        let samples: Vec<SynergySample> = raw.iter().map(|&(a, b, c, s)| SynergySample::new(a, b, c, s)).collect();
        let out = augment(&samples);
        let asym = samples.iter().filter(|s| s.drug_a != s.drug_b).count();
        prop_assert_eq!(out.len(), samples.len() + asym);
        let pos = |v: &[SynergySample]| v.iter().filter(|s| s.label).count();
        let pos_asym = samples.iter().filter(|s| s.label && s.drug_a != s.drug_b).count();
        prop_assert_eq!(pos(&out), pos(&samples) + pos_asym);
    }

    #[test]
    fn bce_is_nonnegative(p in prop::collection::vec(1e-9f64..1.0, 1..20), seed in any::<u64>()) {
        let labels: Vec<bool> = p.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
        let mut t = Tape::new();
        let v = t.constant(Matrix::from_shape_vec((p.len(), 1), p.clone()).unwrap()).unwrap();
        let l = bce_loss(&mut t, v, &labels).unwrap();
        prop_assert!(t.scalar(l) >= 0.0);
    }
}

fn bce_of(p: &[f64], y: &[bool]) -> f64 {
    let mut t = Tape::new();
    let v = t
        .constant(Matrix::from_shape_vec((p.len(), 1), p.to_vec()).unwrap())
        .unwrap();
    let l = bce_loss(&mut t, v, y).unwrap();
    t.scalar(l)
}

#[test]
fn bce_examples() {
    assert!(bce_of(&[1.0 - 1e-12], &[true]) < 1e-11);
    assert!((bce_of(&[0.5, 0.5], &[true, false]) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((bce_of(&[0.9], &[false]) - 10f64.ln()).abs() < 1e-12);
    assert_eq!(bce_of(&[1.0], &[true]), -(1.0f64 - 1e-12).ln());
    let mut t = Tape::new();
    let v = t.constant(Matrix::zeros((0, 1))).unwrap();
    assert!(matches!(bce_loss(&mut t, v, &[]), Err(Error::Contract(_))));
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let fx = fixture();
    let outcome = train_fold(&fx.data, &fx.inputs, &fx.plan, 0, &tiny(6)).unwrap();
    let ckpt = Checkpoint {
        header: CheckpointHeader {
            config: tiny(6),
            dims: fx.inputs.dims(),
            drugs: fx.data.drugs.ids().to_vec(),
            cells: fx.data.cells.ids().to_vec(),
            diseases: fx.data.diseases.ids().to_vec(),
            fold: 0,
            data_digest: fx.data.digest.clone(),
        },
        model: outcome.trained.model.clone(),
    };
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.header, ckpt.header);
    assert_eq!(store_bits(&back.model), store_bits(&ckpt.model));
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let (_, _, test) = fx.plan.tagged(&fx.data.samples, 0);
    let p = &outcome.trained.propagation;
    assert_eq!(
        back.model.predict(&fx.inputs, p, &test).unwrap(),
        ckpt.model.predict(&fx.inputs, p, &test).unwrap()
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Integrity(_))
    ));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Integrity(_))));
}

#[test]
fn cross_validation_reports_best_fold_on_test() {
    let fx = fixture();
    let config = TrainConfig {
        max_epochs: 2,
        ..tiny(8)
    };
    let cv = cross_validate(&fx.data, &fx.plan, &config, 2).unwrap();
    assert_eq!(cv.folds.len(), 5);
    let aurocs = cv.validation_aurocs();
    let top = aurocs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(aurocs[cv.best_fold], top);
    let test = cv.test.unwrap();
    assert_eq!(test.counts.total(), fx.plan.test.len());

    // Threads do not change results.
    let serial = cross_validate(&fx.data, &fx.plan, &config, 1).unwrap();
    assert_eq!(serial.validation_aurocs(), aurocs);
    assert_eq!(serial.test, cv.test);
    assert_ne!(derive_seed(8, 0), derive_seed(8, 1));
}

#[test]
fn grid_search_singleton_and_null_optimizer() {
    let fx = fixture();
    let base = TrainConfig {
        max_epochs: 3,
        ..tiny(7)
    };
    let mut grid = Grid::new();
    grid.insert("heads".into(), vec![json!(2)]);
    let r = grid_search(&fx.data, &fx.plan, &base, &grid, 2).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.best_config(), &base);

    let mut grid = Grid::new();
    grid.insert("learning_rate".into(), vec![json!(0.0), json!(3e-3)]);
    let r = grid_search(&fx.data, &fx.plan, &base, &grid, 2).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(
        r.best,
        1,
        "{:?}",
        r.rows.iter().map(|r| r.mean_auroc).collect::<Vec<_>>()
    );
    assert_eq!(r.best_config().learning_rate, 3e-3);
    assert_eq!(r.best_config().seed, base.seed ^ 1);
}

#[test]
fn fold_tags_survive_tagging() {
    let fx = fixture();
    let (tr, _, _) = fx.plan.tagged(&fx.data.samples, 3);
    assert!(tr.iter().all(|s| s.fold_tag == Some(FoldTag::Train)));
}
