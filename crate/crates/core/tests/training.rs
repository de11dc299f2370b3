use molt_core::data::{generate_train_test, Dataset, SplitData, SyntheticSpec};
use molt_core::experiment::fit;
use molt_core::model::Model;
use molt_core::numerics::ParamId;
use molt_core::robustness::{run_scenarios, standard_scenarios, MetricsReport};
use molt_core::training::{
    load_checkpoint, log_csv, save_checkpoint, Checkpoint, ModelKind, Toggles, TrainConfig, Trainer,
};

fn data(seed: u64, n: usize) -> (Dataset, Dataset) {
    generate_train_test(
        &SyntheticSpec {
            num_samples: n,
            seed,
            ..SyntheticSpec::default()
        },
        n / 2,
    )
    .unwrap()
}

fn config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        ..TrainConfig::default()
    }
}

fn trainer(cfg: TrainConfig, ds: &Dataset) -> (Trainer, molt_core::data::EncodedDataset) {
    let model = Model::for_dataset(cfg, ds).unwrap();
    let enc = model.encode(ds).unwrap();
    (Trainer::new(model), enc)
}

#[test]
fn encoder_weights_never_move() {
    let (ds, _) = data(1, 64);
    let (mut t, enc) = trainer(config(1, 3), &ds);
    let ids: Vec<ParamId> = t.model.encoder_param_ids();
    assert!(!ids.is_empty());
    assert!(ids.iter().all(|&id| t.model.store.is_frozen(id)));
    let before: Vec<_> = ids.iter().map(|&id| t.model.store.value(id).clone()).collect();
    let tunable_before: Vec<_> = t.model.store.tunable_ids().map(|id| t.model.store.value(id).clone()).collect();
    t.run(&enc).unwrap();
    for (id, b) in ids.iter().zip(&before) {
        assert_eq!(t.model.store.value(*id), b);
    }
    let moved = t
        .model
        .store
        .tunable_ids()
        .zip(&tunable_before)
        .filter(|(id, b)| t.model.store.value(*id) != *b)
        .count();
    assert_eq!(moved, tunable_before.len());
}

#[test]
fn same_seed_same_log_and_report_bytes() {
    let (ds, test) = data(2, 64);
    let split = SplitData::Raw(test);
    let run = || {
        let trained = fit(config(2, 3), &SplitData::Raw(ds.clone())).unwrap();
        let rows = run_scenarios(&trained.model, &split, &standard_scenarios(4)).unwrap();
        let report = MetricsReport {
            config_hash: trained.model.config.hash(),
            rows,
        };
        (log_csv(&trained.log), report.to_json(), report.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (ds, _) = data(3, 48);
    let (full, enc) = trainer(config(3, 4), &ds);
    let full = {
        let mut t = full;
        t.run(&enc).unwrap();
        t
    };

    let (mut half, _) = trainer(config(3, 4), &ds);
    half.run_epoch(&enc).unwrap();
    half.run_epoch(&enc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.molc");
    save_checkpoint(&path, &half).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    assert_eq!(resumed, half);
    resumed.run(&enc).unwrap();

    assert_eq!(resumed.log, full.log);
    assert_eq!(resumed.adam, full.adam);
    assert_eq!(resumed.model.store, full.model.store);
    let a = Checkpoint::from_trainer(&resumed).to_bytes();
    assert_eq!(a, Checkpoint::from_trainer(&full).to_bytes());
}

#[test]
fn fifty_steps_reduce_the_loss() {
    let (ds, _) = data(4, 64);
    let (mut t, enc) = trainer(
        TrainConfig {
            batch_size: 64,
            ..config(4, 1)
        },
        &ds,
    );
    let batch: Vec<_> = enc.samples.iter().collect();
    let first = t.step(&batch).unwrap().loss_total;
    let mut last = first;
    for _ in 1..50 {
        last = t.step(&batch).unwrap().loss_total;
    }
    assert!(last < first, "{last} vs {first}");
}

#[test]
fn loss_falls_for_every_toggle_configuration() {
    let (ds, _) = data(5, 160);
    let mut grid = Toggles::ablation_grid();
    grid.push((
        "nothing-but-ce",
        Toggles {
            cross_attention: false,
            cca_loss: false,
            learnable_m: false,
            fusion: false,
            fbp: false,
        },
    ));
    for kind in [ModelKind::Molt, ModelKind::Baseline] {
        for (name, toggles) in &grid {
            let cfg = TrainConfig {
                toggles: *toggles,
                model: kind,
                ..config(5, 20)
            };
            let (t, enc) = trainer(cfg, &ds);
            let t = {
                let mut t = t;
                t.run(&enc).unwrap();
                t
            };
            let mean = |r: &[molt_core::training::EpochLog]| r.iter().map(|e| e.loss_total).sum::<f64>() / r.len() as f64;
            let (head, tail) = (mean(&t.log[..10]), mean(&t.log[10..]));
            assert!(tail < head, "{kind:?} {name}: {tail} >= {head}");
        }
    }
}

#[test]
fn zero_alpha_matches_disabled_correlation_loss() {
    let (ds, _) = data(6, 32);
    let mut zero = config(6, 1);
    zero.weights.alpha = 0.0;
    let mut off = config(6, 1);
    off.toggles.cca_loss = false;
    let (a, enc) = trainer(zero, &ds);
    let (b, _) = trainer(off, &ds);
    let batch: Vec<_> = enc.samples.iter().collect();
    let (sa, ga) = a.model.batch_gradients(&batch).unwrap();
    let (sb, gb) = b.model.batch_gradients(&batch).unwrap();
    assert_eq!(ga, gb);
    // The correlation term is still logged.
    assert!(sa.loss_cca < 0.0);
    assert_eq!(sa.loss_cca, sb.loss_cca);
    assert_eq!(sa.loss_total, sa.loss_ce * 0.9);
}

#[test]
fn no_gradient_path_is_rejected() {
    let mut c = config(0, 1);
    c.weights.beta = 0.0;
    c.toggles.cca_loss = false;
    let (ds, _) = data(0, 8);
    let err = Model::for_dataset(c, &ds).unwrap_err();
    assert!(err.to_string().contains("no gradient path"));
}

#[test]
fn clean_scenario_equals_plain_evaluation() {
    let (ds, test) = data(7, 48);
    let trained = fit(config(7, 2), &SplitData::Raw(ds)).unwrap();
    let split = SplitData::Raw(test);
    let rows = run_scenarios(&trained.model, &split, &standard_scenarios(0)[..1]).unwrap();
    let plain = molt_core::experiment::score(&trained.model, &split).unwrap();
    assert_eq!(rows[0].metrics, plain);
    let logits = trained.model.predict(&trained.model.prepare(&split).unwrap(), Default::default()).unwrap();
    let SplitData::Raw(test) = &split else { unreachable!() };
    let hits = logits.iter().zip(&test.samples).filter(|(z, s)| trained.model.is_correct(z, &s.label)).count();
    assert_eq!(plain.accuracy, hits as f64 / test.len() as f64);
}
