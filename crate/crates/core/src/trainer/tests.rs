use super::*;
use crate::datagen::{generate_corpus, ClassCatalog, GeneratorConfig, SplitSizes};
use crate::numerics::gradcheck::{central_difference, relative_error, FD_STEP};
use crate::sampling::plan_cbs;

fn tiny_bundle(seed: u64) -> CorpusBundle {
    generate_corpus(
        &GeneratorConfig::new(ClassCatalog::desk()),
        seed,
        SplitSizes {
            train: 160,
            val: 40,
            test: 40,
        },
    )
    .unwrap()
}

fn tiny_config(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        stage1_epochs: 2,
        max_alternations: 2,
        stage1_batch_relations: 64,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn dims_for(bundle: &CorpusBundle) -> ModelDims {
    ModelDims::desk(
        bundle.manifest.entity_classes,
        bundle.manifest.predicate_classes,
    )
}

fn stage1_params(bundle: &CorpusBundle, config: &TrainConfig) -> ModelParams {
    let corpus = TrainCorpus::from(bundle);
    let params = initial_params(dims_for(bundle), config).unwrap();
    stage1(params, &corpus, config, &mut TrainLog::default(), None)
        .unwrap()
        .last
}

fn groups_except(params: &ModelParams, skip: &[ParamGroup]) -> Vec<String> {
    ParamGroup::ALL
        .into_iter()
        .filter(|g| !skip.contains(g))
        .map(|g| params.group_hash(g))
        .collect()
}

#[test]
fn learning_rate_halves_every_five_epochs() {
    let c = TrainConfig::default();
    assert_eq!(c.learning_rate(0), 1e-3);
    assert_eq!(c.learning_rate(4), 1e-3);
    assert_eq!(c.learning_rate(5), 5e-4);
    assert_eq!(c.learning_rate(12), 2.5e-4);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut slot = AdamSlot::new(3);
    let mut p = vec![0.3, -1.7, 2.0];
    let before = p.clone();
    for _ in 0..5 {
        slot.update(&mut p, &[0.0; 3], 1e-3, &AdamConfig::default());
    }
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut slot = AdamSlot::new(3);
    let mut p = vec![0.0; 3];
    slot.update(&mut p, &[2.0, -0.5, 1e-3], 0.01, &AdamConfig::default());
    for (v, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((v - sign * 0.01).abs() < 1e-6, "{v}");
    }
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
    }
    assert!("dt2".parse::<Strategy>().is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let c = tiny_config(Strategy::Dt2IndepCbs);
    let text = toml::to_string(&c).unwrap();
    let back: TrainConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, c);
    let partial: TrainConfig = toml::from_str("alpha = 0.5\nstrategy = \"single-srs\"").unwrap();
    assert_eq!(partial.alpha, 0.5);
    assert_eq!(partial.beta, 1.0);
    assert!(toml::from_str::<TrainConfig>("alhpa = 0.5").is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    for c in [
        TrainConfig {
            alpha: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            tau_s: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_decay_every: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
    }
}

#[test]
fn stage1_loss_averages_within_then_across_scenes() {
    let bundle = tiny_bundle(1);
    let config = tiny_config(Strategy::SingleSrs);
    let params = initial_params(dims_for(&bundle), &config).unwrap();
    let scenes: Vec<&Scene> = bundle.train.iter().take(4).collect();
    assert!(scenes
        .windows(2)
        .any(|w| w[0].relations.len() != w[1].relations.len()));
    let (loss, _, _) = stage1_batch(&params, &scenes, Task::PredCls, NormMode::Eval).unwrap();

    let mut entity = 0.0;
    let mut predicate = 0.0;
    for scene in &scenes {
        let pairs: Vec<(usize, usize)> = scene
            .relations
            .iter()
            .map(|r| (r.subject, r.object))
            .collect();
        let f = params.forward_scene(scene, Task::PredCls, &pairs).unwrap();
        let e: f64 = scene
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| -f.entity_probs.row(i)[e.class].ln())
            .sum();
        entity += e / scene.entities.len() as f64;
        let p: f64 = scene
            .relations
            .iter()
            .enumerate()
            .map(|(i, r)| -f.predicate_probs.row(i)[r.predicate].ln())
            .sum();
        predicate += p / scene.relations.len() as f64;
    }
    entity /= scenes.len() as f64;
    predicate /= scenes.len() as f64;
    assert!(
        (loss.entity - entity).abs() < 1e-10,
        "{} vs {entity}",
        loss.entity
    );
    assert!(
        (loss.predicate - predicate).abs() < 1e-10,
        "{} vs {predicate}",
        loss.predicate
    );
}

#[test]
fn stage1_never_touches_teacher_and_stage2_copies_student() {
    let bundle = tiny_bundle(2);
    let config = tiny_config(Strategy::Dt2Acbs);
    let init = initial_params(dims_for(&bundle), &config).unwrap();
    let trained = stage1_params(&bundle, &config);
    assert_eq!(
        trained.group_hash(ParamGroup::TeacherClassifier),
        init.group_hash(ParamGroup::TeacherClassifier)
    );
    assert_ne!(trained.entity_classifier, init.entity_classifier);
    let state = Stage2::enter(trained.clone(), TrainCorpus::from(&bundle), &config).unwrap();
    assert_eq!(state.params().teacher_classifier, trained.entity_classifier);
}

fn plans(state: &Stage2, config: &TrainConfig, alternation: usize) -> (EpochPlan, EpochPlan) {
    plan_acbs(
        &state.predicate_map,
        &state.entity_map,
        &config.acbs,
        alternation,
        9,
    )
    .unwrap()
}

#[test]
fn acbs_steps_update_only_their_matrices() {
    let bundle = tiny_bundle(4);
    let config = tiny_config(Strategy::Dt2Acbs);
    let start = stage1_params(&bundle, &config);
    let mut state = Stage2::enter(start, TrainCorpus::from(&bundle), &config).unwrap();
    let (p_terms, e_terms) = stage2_terms(&config);
    for alternation in 0..3 {
        let (p_plan, e_plan) = plans(&state, &config, alternation);
        let before = state.params().clone();
        state.p_step(&p_plan, 1e-3, p_terms).unwrap();
        let frozen = [
            ParamGroup::PredicateClassifier,
            ParamGroup::TeacherClassifier,
        ];
        assert_eq!(
            groups_except(&before, &frozen),
            groups_except(state.params(), &frozen)
        );
        assert!(
            state
                .params()
                .group_distance(&before, ParamGroup::PredicateClassifier)
                > 0.0
        );
        assert!(
            state
                .params()
                .group_distance(&before, ParamGroup::TeacherClassifier)
                > 0.0
        );

        let before = state.params().clone();
        state.e_step(&e_plan, 1e-3, e_terms.unwrap()).unwrap();
        let frozen = [ParamGroup::EntityClassifier];
        assert_eq!(
            groups_except(&before, &frozen),
            groups_except(state.params(), &frozen)
        );
        assert!(
            state
                .params()
                .group_distance(&before, ParamGroup::EntityClassifier)
                > 0.0
        );
    }
}

#[test]
fn zero_beta_leaves_teacher_bit_identical() {
    let bundle = tiny_bundle(5);
    let config = TrainConfig {
        beta: 0.0,
        ..tiny_config(Strategy::Dt2Acbs)
    };
    let mut state = Stage2::enter(
        stage1_params(&bundle, &config),
        TrainCorpus::from(&bundle),
        &config,
    )
    .unwrap();
    let before = state.params().teacher_classifier.clone();
    let (p_plan, _) = plans(&state, &config, 0);
    let (p_terms, _) = stage2_terms(&config);
    state.p_step(&p_plan, 1e-3, p_terms).unwrap();
    assert_eq!(state.params().teacher_classifier, before);
}

#[test]
fn zero_alpha_e_step_ignores_teacher() {
    let bundle = tiny_bundle(6);
    let config = TrainConfig {
        alpha: 0.0,
        ..tiny_config(Strategy::Dt2Acbs)
    };
    let start = stage1_params(&bundle, &config);
    let corpus = TrainCorpus::from(&bundle);
    let mut a = Stage2::enter(start.clone(), corpus, &config).unwrap();
    let mut b = Stage2::enter(start, corpus, &config).unwrap();
    b.params.teacher_classifier.scale(-3.0);
    let (_, e_plan) = plans(&a, &config, 0);
    let (_, e_terms) = stage2_terms(&config);
    a.e_step(&e_plan, 1e-3, e_terms.unwrap()).unwrap();
    b.e_step(&e_plan, 1e-3, e_terms.unwrap()).unwrap();
    assert_eq!(a.params().entity_classifier, b.params().entity_classifier);
}

fn check_gradient(
    state: &mut Stage2,
    which: fn(&mut ModelParams) -> &mut Tensor2,
    analytic: &Tensor2,
    loss: &dyn Fn(&Stage2) -> f64,
) {
    let x0 = which(&mut state.params).data().to_vec();
    let fd = central_difference(&x0, FD_STEP, |x| {
        which(&mut state.params).data_mut().copy_from_slice(x);
        loss(state)
    });
    which(&mut state.params).data_mut().copy_from_slice(&x0);
    let err = relative_error(analytic.data(), &fd);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn stage2_batch_gradients_match_finite_differences() {
    let bundle = tiny_bundle(7);
    let config = tiny_config(Strategy::Dt2Acbs);
    let mut state = Stage2::enter(
        stage1_params(&bundle, &config),
        TrainCorpus::from(&bundle),
        &config,
    )
    .unwrap();
    // make the two entity heads differ so distillation has a gradient
    let (_, e_plan) = plans(&state, &config, 0);
    let (p_terms, e_terms) = stage2_terms(&config);
    state.e_step(&e_plan, 1e-2, e_terms.unwrap()).unwrap();

    let (p_plan, e_plan) = plans(&state, &config, 1);
    let rows = state.relation_rows(&p_plan.batches[0]).unwrap();
    let b = state.p_batch(&rows, p_terms).unwrap();
    let total = |s: &Stage2| {
        let b = s.p_batch(&rows, p_terms).unwrap();
        b.loss_pred + b.loss_entity.map_or(0.0, |(_, l, w)| l * w)
    };
    check_gradient(
        &mut state,
        |p| &mut p.predicate_classifier,
        &b.grad_predicate,
        &total,
    );
    let (head, g) = b.head.unwrap();
    assert_eq!(head, EntityHead::Teacher);
    check_gradient(&mut state, |p| &mut p.teacher_classifier, &g, &total);

    let rows = state.entity_rows(&e_plan.batches[0]).unwrap();
    let terms = e_terms.unwrap();
    let b = state.e_batch(&rows, terms).unwrap();
    assert!(b.kd.unwrap() > 0.0);
    let total = |s: &Stage2| s.e_batch(&rows, terms).unwrap().total;
    check_gradient(&mut state, |p| &mut p.entity_classifier, &b.grad, &total);
}

#[test]
fn sgcls_relation_cache_matches_scene_forward() {
    let bundle = tiny_bundle(8);
    let config = tiny_config(Strategy::Dt2Acbs);
    let mut state = Stage2::enter(
        stage1_params(&bundle, &config),
        TrainCorpus::from(&bundle),
        &config,
    )
    .unwrap();
    let (p_plan, e_plan) = plans(&state, &config, 0);
    let (p_terms, e_terms) = stage2_terms(&config);
    state.e_step(&e_plan, 5e-2, e_terms.unwrap()).unwrap();
    state.p_step(&p_plan, 1e-3, p_terms).unwrap();
    state.refresh_relation_features().unwrap();
    let probs = softmax_rows(
        &state
            .relation_features
            .matmul(&state.params.predicate_classifier)
            .unwrap(),
        1.0,
    )
    .unwrap();
    for (scene_id, scene) in bundle.train.iter().enumerate().take(20) {
        let pairs: Vec<(usize, usize)> = scene
            .relations
            .iter()
            .map(|r| (r.subject, r.object))
            .collect();
        let f = state
            .params()
            .forward_scene(scene, Task::SgCls, &pairs)
            .unwrap();
        for slot in 0..pairs.len() {
            let row = state.relation_row(scene_id, slot);
            for (a, b) in probs.row(row).iter().zip(f.predicate_probs.row(slot)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn non_finite_parameters_abort_with_diagnostics() {
    let bundle = tiny_bundle(9);
    let config = tiny_config(Strategy::Dt2Acbs);
    let mut state = Stage2::enter(
        stage1_params(&bundle, &config),
        TrainCorpus::from(&bundle),
        &config,
    )
    .unwrap();
    state.params.predicate_classifier.data_mut()[0] = f64::NAN;
    let (p_plan, _) = plans(&state, &config, 0);
    let (p_terms, _) = stage2_terms(&config);
    match state.p_step(&p_plan, 1e-3, p_terms) {
        Err(TrainError::NonFinite { phase, params }) => {
            assert!(phase.starts_with("p-step"));
            assert!(params.predicate_classifier.data()[0].is_nan());
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn strategies_map_to_documented_steps() {
    let terms = |s| stage2_terms(&tiny_config(s));
    assert_eq!(
        terms(Strategy::Dt2PredicateCbs).0.entity,
        Some((EntityHead::Student, 1.0))
    );
    assert!(terms(Strategy::Dt2PredicateCbs).1.is_none());
    assert_eq!(terms(Strategy::Dt2IndepCbs).0.entity, None);
    assert_eq!(terms(Strategy::Dt2IndepCbs).1.unwrap().kd_weight, 0.0);
    let (p, e) = terms(Strategy::Dt2Acbs);
    assert_eq!(p.entity, Some((EntityHead::Teacher, 1.0)));
    assert_eq!(e.unwrap().head, EntityHead::Student);
    assert_eq!(e.unwrap().kd_weight, 0.2);
    let flipped = stage2_terms(&TrainConfig {
        e_step_teacher: true,
        ..tiny_config(Strategy::Dt2Acbs)
    });
    assert_eq!(flipped.0.entity, Some((EntityHead::Student, 1.0)));
    assert_eq!(flipped.1.unwrap().head, EntityHead::Teacher);
}

#[test]
fn runs_are_deterministic_and_best_reproduces() {
    let bundle = tiny_bundle(10);
    let corpus = TrainCorpus::from(&bundle);
    for strategy in Strategy::ALL {
        let config = tiny_config(strategy);
        let a = run(&config, dims_for(&bundle), &corpus, None).unwrap();
        let b = run(&config, dims_for(&bundle), &corpus, None).unwrap();
        assert_eq!(a.log, b.log, "{strategy}");
        for g in ParamGroup::ALL {
            assert_eq!(a.params.group_hash(g), b.params.group_hash(g));
        }
        assert!(a.log.validation_curve().contains(&a.best_validation));
        assert_eq!(
            validate(&a.params, &corpus, &config).unwrap(),
            a.best_validation
        );
        assert!(a.params.all_finite());
    }
}

#[test]
fn single_indep_cbs_trains_every_joint_group() {
    let bundle = tiny_bundle(11);
    let corpus = TrainCorpus::from(&bundle);
    let config = tiny_config(Strategy::SingleIndepCbs);
    let init = initial_params(dims_for(&bundle), &config).unwrap();
    let out = run(&config, dims_for(&bundle), &corpus, None).unwrap();
    for g in JOINT_GROUPS {
        assert!(out.params.group_distance(&init, g) > 0.0, "{}", g.name());
    }
    assert_eq!(
        out.params
            .group_distance(&init, ParamGroup::TeacherClassifier),
        0.0
    );
}

#[test]
fn checkpoints_and_log_are_written() {
    let bundle = tiny_bundle(12);
    let corpus = TrainCorpus::from(&bundle);
    let config = tiny_config(Strategy::Dt2Acbs);
    let dir = tempfile::tempdir().unwrap();
    let sink = CheckpointSink {
        dir: dir.path().to_path_buf(),
    };
    let out = run(&config, dims_for(&bundle), &corpus, Some(&sink)).unwrap();
    let (best, manifest) = crate::model::load_checkpoint(&dir.path().join("best.json")).unwrap();
    assert_eq!(
        manifest.meta.validation_mr_at_100,
        Some(out.best_validation)
    );
    assert_eq!(best.entity_classifier, out.params.entity_classifier);
    assert!(dir.path().join("alternation_000.json").exists());
    let log_path = dir.path().join("log.csv");
    out.log.write_csv(&log_path).unwrap();
    let text = std::fs::read_to_string(&log_path).unwrap();
    assert_eq!(text.lines().count(), out.log.rows.len() + 1);
    assert!(text.starts_with("strategy,stage,phase,epoch,lr"));
}

#[test]
fn cbs_plans_feed_stage2_without_rare_predicates() {
    let bundle = tiny_bundle(13);
    let config = tiny_config(Strategy::Dt2Acbs);
    let state = Stage2::enter(
        stage1_params(&bundle, &config),
        TrainCorpus::from(&bundle),
        &config,
    )
    .unwrap();
    let plan = plan_cbs(&state.predicate_map, 5, 4, 1).unwrap();
    let rare: Vec<bool> = bundle
        .manifest
        .train
        .predicate_counts
        .iter()
        .map(|&c| c < 5)
        .collect();
    for batch in &plan.batches {
        for row in state.relation_rows(batch).unwrap() {
            assert!(!rare[state.relation_predicate[row]]);
        }
    }
}
