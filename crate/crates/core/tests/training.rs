use dt2::datagen::{generate_corpus, ClassCatalog, GeneratorConfig, SplitSizes};
use dt2::model::{ModelDims, ParamGroup};
use dt2::trainer::{initial_params, run, stage1, Strategy, TrainConfig, TrainCorpus, TrainLog};

fn bundle() -> dt2::datagen::CorpusBundle {
    generate_corpus(
        &GeneratorConfig::new(ClassCatalog::desk()),
        2,
        SplitSizes {
            train: 600,
            val: 100,
            test: 100,
        },
    )
    .unwrap()
}

#[test]
fn stage1_losses_fall_below_chance() {
    let bundle = bundle();
    let corpus = TrainCorpus::from(&bundle);
    let config = TrainConfig {
        strategy: Strategy::SingleSrs,
        stage1_epochs: 4,
        stage1_batch_relations: 128,
        ..TrainConfig::default()
    };
    let dims = ModelDims::desk(corpus.entity_classes, corpus.predicate_classes);
    let mut log = TrainLog::default();
    stage1(
        initial_params(dims, &config).unwrap(),
        &corpus,
        &config,
        &mut log,
        None,
    )
    .unwrap();
    let last = log.rows.last().unwrap();
    let entity = last.loss_ent_student.unwrap();
    let predicate = last.loss_pred.unwrap();
    assert!(
        entity < (corpus.entity_classes as f64).ln(),
        "entity loss {entity}"
    );
    assert!(
        predicate < (corpus.predicate_classes as f64).ln(),
        "predicate loss {predicate}"
    );
    let first = &log.rows[0];
    assert!(entity < first.loss_ent_student.unwrap());
    assert!(predicate < first.loss_pred.unwrap());
}

#[test]
fn full_runs_are_reproducible() {
    let bundle = bundle();
    let corpus = TrainCorpus::from(&bundle);
    let dims = ModelDims::desk(corpus.entity_classes, corpus.predicate_classes);
    for strategy in Strategy::ALL {
        let config = TrainConfig {
            strategy,
            stage1_epochs: 2,
            max_alternations: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = run(&config, dims, &corpus, None).unwrap();
        let b = run(&config, dims, &corpus, None).unwrap();
        assert_eq!(a.log.rows, b.log.rows, "{strategy}");
        for g in ParamGroup::ALL {
            assert_eq!(
                a.params.group_hash(g),
                b.params.group_hash(g),
                "{strategy} {g:?}"
            );
        }
    }
}

#[test]
fn learning_rate_schedule_is_exact() {
    let config = TrainConfig::default();
    for epoch in 0..40 {
        let expected = config.adam.lr * 0.5f64.powi((epoch / 5) as i32);
        assert_eq!(config.learning_rate(epoch), expected);
    }
}
