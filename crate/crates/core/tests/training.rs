use made_core::attribute_schema::AttributeVocabulary;
use made_core::benchmark::Benchmark;
use made_core::checkpoint::Checkpoint;
use made_core::config::RunConfig;
use made_core::evalproto::{embed_images, Setting};
use made_core::losses::LossConfig;
use made_core::synthdata::{GenConfig, Split};
use made_core::trainer::{train, LAST_GOOD_CHECKPOINT};
use made_core::Error;

fn small_bench(ids: usize, train_ids: usize, seed: u64) -> Benchmark {
    let gen = GenConfig {
        num_identities: ids,
        num_train_identities: train_ids,
        seed,
        ..Default::default()
    };
    Benchmark::render(&gen, &AttributeVocabulary::bundled()).unwrap()
}

fn toy_config(pairs: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set("checkpoint_every", "0").unwrap();
    for (k, v) in pairs {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn two_identities_train_below_chance_level_id_loss() {
    let bench = small_bench(4, 2, 3);
    let data = bench.train_set().unwrap();
    assert_eq!(data.num_classes(), 2);
    let cfg = toy_config(&[("epochs", "30")]);
    let vocab = cfg.vocabulary().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &data,
        &vocab,
        &cfg.model_config(vocab.len(), 2),
        &cfg.train_config(),
        &cfg.loss,
        dir.path(),
    )
    .unwrap();
    let last_epoch = &out.losses[out.losses.len() - 3..];
    let final_id = last_epoch.iter().map(|l| l.id).sum::<f64>() / last_epoch.len() as f64;
    assert!(final_id < 2f64.ln(), "final L_id {final_id}");
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let bench = small_bench(4, 2, 4);
    let data = bench.train_set().unwrap();
    // weight decay is an explicit parameter shrinkage, separate from the loss
    let cfg = toy_config(&[("epochs", "2"), ("lambda_id", "0"), ("lambda_tri", "0"), ("weight_decay", "0")]);
    let vocab = cfg.vocabulary().unwrap();
    let model_cfg = cfg.model_config(vocab.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&data, &vocab, &model_cfg, &cfg.train_config(), &cfg.loss, dir.path()).unwrap();

    let mut init_rng = made_core::rng::stream(cfg.seed, "init", &[]);
    let initial = made_core::model::Model::new(model_cfg, &mut init_rng).unwrap();
    assert_eq!(out.model.params, initial.params);
    assert!(out.losses.iter().all(|l| l.total == 0.0));
}

#[test]
fn runaway_learning_rate_aborts_and_keeps_last_good_parameters() {
    let bench = small_bench(4, 2, 5);
    let data = bench.train_set().unwrap();
    let cfg = toy_config(&[("epochs", "3"), ("base_lr", "1e300"), ("warmup_lr", "1e300"), ("warmup_epochs", "0")]);
    let vocab = cfg.vocabulary().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = train(
        &data,
        &vocab,
        &cfg.model_config(vocab.len(), 2),
        &cfg.train_config(),
        &cfg.loss,
        dir.path(),
    )
    .err()
    .expect("training diverges");
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let kept = Checkpoint::load(&dir.path().join(LAST_GOOD_CHECKPOINT)).unwrap();
    assert!(kept.model.params.is_finite());
}

#[test]
fn identical_seeds_give_identical_trajectories_and_other_seeds_differ() {
    let bench = small_bench(6, 3, 6);
    let data = bench.train_set().unwrap();
    let vocab = AttributeVocabulary::bundled();
    let run = |seed: &str| {
        let cfg = toy_config(&[("epochs", "2"), ("seed", seed), ("workers", "1")]);
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &data,
            &vocab,
            &cfg.model_config(vocab.len(), 3),
            &cfg.train_config(),
            &cfg.loss,
            dir.path(),
        )
        .unwrap();
        out.losses.iter().map(|l| l.total.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run("1"), run("1"));
    assert_ne!(run("1"), run("2"));
}

#[test]
fn gradients_do_not_depend_on_the_worker_count() {
    let bench = small_bench(6, 3, 7);
    let data = bench.train_set().unwrap();
    let vocab = AttributeVocabulary::bundled();
    let run = |workers: &str| {
        let cfg = toy_config(&[("epochs", "1"), ("workers", workers)]);
        let dir = tempfile::tempdir().unwrap();
        train(
            &data,
            &vocab,
            &cfg.model_config(vocab.len(), 3),
            &cfg.train_config(),
            &cfg.loss,
            dir.path(),
        )
        .unwrap()
        .model
        .params
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn checkpoint_round_trip_preserves_inference_embeddings() {
    let bench = small_bench(6, 3, 8);
    let cfg = toy_config(&[("epochs", "1")]);
    let dir = tempfile::tempdir().unwrap();
    let run = bench.run(&cfg, dir.path()).unwrap();
    let loaded = Checkpoint::load(&run.outcome.checkpoint).unwrap();
    assert_eq!(loaded.model.params, run.outcome.model.params);
    assert_eq!(loaded.meta.get("mask_ratio").map(String::as_str), Some("1"));
    assert_eq!(loaded.meta.get("description_policy").map(String::as_str), Some("masked"));

    let (records, images) = bench.split(Split::Query);
    let a = embed_images(&run.outcome.model, &records, &images).unwrap();
    let b = embed_images(&loaded.model, &records, &images).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.feature == y.feature));
    assert_eq!(run.metrics.len(), Setting::ALL.len());
}

#[test]
fn loss_config_rejects_negative_weights() {
    let bad = LossConfig {
        lambda_id: -1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}
