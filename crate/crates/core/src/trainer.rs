//! Two-stage decoupled training.
//!
//! Stage 1 trains the whole network under standard random sampling. Stage 2
//! freezes the feature extractors and re-balances the classifier matrices
//! with class-balanced plans: either the alternating predicate/entity
//! scheme with a teacher entity classifier and distillation, or one of the
//! simpler ablation schemes. Single-stage strategies train everything under
//! the named sampling from scratch.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{CorpusBundle, Scene};
use crate::evaluation::{evaluate, Candidates, EvalConfig, EvalError};
use crate::model::{
    init_params, pair_boxes, save_checkpoint, BatchInput, CheckpointMeta, LogitGrads, ModelDims,
    ModelError, ModelParams, ParamGroup, RelationInput, Task,
};
use crate::numerics::{
    argmax, cross_entropy, cross_entropy_logit_grad, kl_divergence, kl_student_logit_grad,
    softmax_rows, NormMode, NumericsError, Tensor2,
};
use crate::sampling::{
    alternation_seed, plan_acbs, plan_cbs, plan_srs, AcbsConfig, Axis, ClassIndexMap, EpochPlan,
    InstanceKind, SamplingError,
};
use crate::seed::{derive_seed, stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite value during {phase}")]
    NonFinite {
        phase: String,
        params: Box<ModelParams>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SingleSrs,
    SingleIndepCbs,
    Dt2PredicateCbs,
    Dt2IndepCbs,
    Dt2Acbs,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::SingleSrs,
        Strategy::SingleIndepCbs,
        Strategy::Dt2PredicateCbs,
        Strategy::Dt2IndepCbs,
        Strategy::Dt2Acbs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SingleSrs => "single-srs",
            Strategy::SingleIndepCbs => "single-indep-cbs",
            Strategy::Dt2PredicateCbs => "dt2-predicate-cbs",
            Strategy::Dt2IndepCbs => "dt2-indep-cbs",
            Strategy::Dt2Acbs => "dt2-acbs",
        }
    }

    pub fn is_two_stage(self) -> bool {
        matches!(
            self,
            Strategy::Dt2PredicateCbs | Strategy::Dt2IndepCbs | Strategy::Dt2Acbs
        )
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown strategy '{s}'"))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Protocol used both for the embedding input during training and for
    /// validation.
    pub task: Task,
    /// Distillation weight.
    pub alpha: f64,
    /// Teacher entity-loss weight in the predicate step.
    pub beta: f64,
    /// Distillation temperature.
    pub tau_s: f64,
    pub adam: AdamConfig,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub stage1_epochs: usize,
    /// Target relations per stage-1 batch; converted to whole scenes.
    pub stage1_batch_relations: usize,
    pub max_alternations: usize,
    pub patience: usize,
    pub acbs: AcbsConfig,
    pub validation_k: usize,
    pub seed: u64,
    /// Debug variant: the entity-balanced step trains the teacher and the
    /// predicate-balanced step trains the served entity classifier.
    pub e_step_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dt2Acbs,
            task: Task::SgCls,
            alpha: 0.2,
            beta: 1.0,
            tau_s: 10.0,
            adam: AdamConfig::default(),
            lr_decay: 0.5,
            lr_decay_every: 5,
            stage1_epochs: 30,
            stage1_batch_relations: 256,
            max_alternations: 30,
            patience: 5,
            acbs: AcbsConfig::default(),
            validation_k: 100,
            seed: 0,
            e_step_teacher: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.tau_s > 0.0 && self.tau_s.is_finite()) {
            return bad("tau_s must be positive");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.lr_decay_every == 0 || self.stage1_batch_relations == 0 || self.validation_k == 0 {
            return bad("lr_decay_every, stage1_batch_relations and validation_k must be positive");
        }
        if self.acbs.predicate_per_class == 0 || self.acbs.entity_per_class == 0 {
            return bad("per-class quotas must be positive");
        }
        Ok(())
    }

    /// `lr0 · decay^⌊epoch / every⌋`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.adam.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Adam moments and step count for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn update(&mut self, param: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Adam over every trainable tensor of a model.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        Self {
            config,
            slots: params
                .tensors()
                .iter()
                .map(|t| AdamSlot::new(t.data.len()))
                .collect(),
        }
    }

    /// Updates the trainable tensors whose group is in `groups`.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        lr: f64,
        groups: &[ParamGroup],
    ) {
        let grads = grads.tensors();
        for ((slot, (group, trainable, data)), g) in
            self.slots.iter_mut().zip(params.tensors_mut()).zip(&grads)
        {
            if trainable && groups.contains(&group) {
                slot.update(data, g.data, lr, &self.config);
            }
        }
    }
}

/// One CSV row per training phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub strategy: String,
    pub stage: String,
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub loss_pred: Option<f64>,
    pub loss_ent_teacher: Option<f64>,
    pub loss_ent_student: Option<f64>,
    pub loss_kd: Option<f64>,
    pub clamped: usize,
    pub val_mean_recall: Option<f64>,
    pub delta_semantic: f64,
    pub delta_appearance: f64,
    pub delta_entity_classifier: f64,
    pub delta_teacher_classifier: f64,
    pub delta_semantic_embedding: f64,
    pub delta_bbox_embedding: f64,
    pub delta_predicate_head: f64,
    pub delta_predicate_classifier: f64,
}

/// Append-only training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Validation mean recall of every row that has one, in order.
    pub fn validation_curve(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.val_mean_recall).collect()
    }
}

/// Mean losses of one phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseStats {
    pub batches: usize,
    pub loss_pred: Option<f64>,
    pub loss_ent_teacher: Option<f64>,
    pub loss_ent_student: Option<f64>,
    pub loss_kd: Option<f64>,
    pub clamped: usize,
}

#[derive(Default)]
struct PhaseAccumulator {
    batches: usize,
    sums: [Option<f64>; 4],
    clamped: usize,
}

impl PhaseAccumulator {
    fn add(&mut self, which: usize, v: f64) {
        *self.sums[which].get_or_insert(0.0) += v;
    }

    fn finish(self) -> PhaseStats {
        let n = self.batches.max(1) as f64;
        let mean = |s: Option<f64>| s.map(|v| v / n);
        PhaseStats {
            batches: self.batches,
            loss_pred: mean(self.sums[0]),
            loss_ent_teacher: mean(self.sums[1]),
            loss_ent_student: mean(self.sums[2]),
            loss_kd: mean(self.sums[3]),
            clamped: self.clamped,
        }
    }
}

const PRED: usize = 0;
const ENT_TEACHER: usize = 1;
const ENT_STUDENT: usize = 2;
const KD: usize = 3;

/// Training and validation scenes with class counts.
#[derive(Debug, Clone, Copy)]
pub struct TrainCorpus<'a> {
    pub train: &'a [Scene],
    pub val: &'a [Scene],
    pub entity_classes: usize,
    pub predicate_classes: usize,
}

impl<'a> From<&'a CorpusBundle> for TrainCorpus<'a> {
    fn from(b: &'a CorpusBundle) -> Self {
        Self {
            train: &b.train,
            val: &b.val,
            entity_classes: b.manifest.entity_classes,
            predicate_classes: b.manifest.predicate_classes,
        }
    }
}

impl TrainCorpus<'_> {
    pub fn predicate_frequency(&self) -> Vec<usize> {
        let mut f = vec![0; self.predicate_classes];
        for r in self.train.iter().flat_map(|s| &s.relations) {
            f[r.predicate] += 1;
        }
        f
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(TrainError::Config(
                "training and validation splits must be nonempty".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted cross-entropy over rows; returns the loss, the logit gradient
/// at temperature one and the number of clamped probabilities.
fn weighted_cross_entropy(
    probs: &Tensor2,
    targets: &[usize],
    weights: &[f64],
) -> Result<(f64, Tensor2, usize), TrainError> {
    let mut grad = Tensor2::zeros(probs.rows(), probs.cols());
    let mut loss = 0.0;
    let mut clamped = 0;
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        let l = cross_entropy(probs.row(r), t)?;
        loss += w * l.value;
        clamped += usize::from(l.clamped);
        for (g, d) in grad
            .row_mut(r)
            .iter_mut()
            .zip(cross_entropy_logit_grad(probs.row(r), t, 1.0))
        {
            *g = w * d;
        }
    }
    Ok((loss, grad, clamped))
}

fn check_finite(value: f64, phase: &str, params: &ModelParams) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            phase: phase.to_string(),
            params: Box::new(params.clone()),
        })
    }
}

/// Losses of a stage-1 batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Loss {
    pub entity: f64,
    pub predicate: f64,
    pub clamped: usize,
}

/// Entity and predicate cross-entropy over a batch of whole scenes, each
/// averaged within its scene and then over scenes, with gradients.
pub fn stage1_batch(
    params: &ModelParams,
    scenes: &[&Scene],
    task: Task,
    mode: NormMode,
) -> Result<(Stage1Loss, ModelParams, Option<crate::numerics::BatchStats>), TrainError> {
    let n_img = scenes.len() as f64;
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    let mut entity_weights = Vec::new();
    let mut relations = Vec::new();
    let mut predicates = Vec::new();
    let mut relation_weights = Vec::new();
    for scene in scenes {
        let offset = rows.len();
        let we = 1.0 / (n_img * scene.entities.len() as f64);
        for e in &scene.entities {
            rows.push(e.feature.clone());
            classes.push(e.class);
            entity_weights.push(we);
        }
        let wr = 1.0 / (n_img * scene.relations.len().max(1) as f64);
        for r in &scene.relations {
            relations.push(RelationInput {
                subject: offset + r.subject,
                object: offset + r.object,
                boxes: pair_boxes(
                    &scene.entities[r.subject].bbox,
                    &scene.entities[r.object].bbox,
                ),
            });
            predicates.push(r.predicate);
            relation_weights.push(wr);
        }
    }
    let input = BatchInput {
        features: Tensor2::from_rows(&rows)?,
        classes,
        relations,
    };
    let (out, tape, stats) = params.forward_batch(&input, task, mode)?;
    let (entity, gs, c1) =
        weighted_cross_entropy(&out.student_probs, &input.classes, &entity_weights)?;
    let (predicate, gp, c2) =
        weighted_cross_entropy(&out.predicate_probs, &predicates, &relation_weights)?;
    let grads = params.backward_batch(
        tape,
        &LogitGrads {
            student: Some(gs),
            teacher: None,
            predicate: (!predicates.is_empty()).then_some(gp),
        },
    )?;
    Ok((
        Stage1Loss {
            entity,
            predicate,
            clamped: c1 + c2,
        },
        grads,
        stats,
    ))
}

/// Groups trained jointly in stage 1 and by single-stage strategies.
const JOINT_GROUPS: [ParamGroup; 7] = [
    ParamGroup::Semantic,
    ParamGroup::Appearance,
    ParamGroup::EntityClassifier,
    ParamGroup::SemanticEmbedding,
    ParamGroup::BboxEmbedding,
    ParamGroup::PredicateHead,
    ParamGroup::PredicateClassifier,
];

fn deltas(row: &mut LogRow, before: &ModelParams, after: &ModelParams) {
    let d = |g| after.group_distance(before, g);
    row.delta_semantic = d(ParamGroup::Semantic);
    row.delta_appearance = d(ParamGroup::Appearance);
    row.delta_entity_classifier = d(ParamGroup::EntityClassifier);
    row.delta_teacher_classifier = d(ParamGroup::TeacherClassifier);
    row.delta_semantic_embedding = d(ParamGroup::SemanticEmbedding);
    row.delta_bbox_embedding = d(ParamGroup::BboxEmbedding);
    row.delta_predicate_head = d(ParamGroup::PredicateHead);
    row.delta_predicate_classifier = d(ParamGroup::PredicateClassifier);
}

#[allow(clippy::too_many_arguments)]
fn log_row(
    strategy: Strategy,
    stage: &str,
    phase: &str,
    epoch: usize,
    lr: f64,
    stats: &PhaseStats,
    before: &ModelParams,
    after: &ModelParams,
) -> LogRow {
    let mut row = LogRow {
        strategy: strategy.to_string(),
        stage: stage.to_string(),
        phase: phase.to_string(),
        epoch,
        lr,
        batches: stats.batches,
        loss_pred: stats.loss_pred,
        loss_ent_teacher: stats.loss_ent_teacher,
        loss_ent_student: stats.loss_ent_student,
        loss_kd: stats.loss_kd,
        clamped: stats.clamped,
        val_mean_recall: None,
        delta_semantic: 0.0,
        delta_appearance: 0.0,
        delta_entity_classifier: 0.0,
        delta_teacher_classifier: 0.0,
        delta_semantic_embedding: 0.0,
        delta_bbox_embedding: 0.0,
        delta_predicate_head: 0.0,
        delta_predicate_classifier: 0.0,
    };
    deltas(&mut row, before, after);
    row
}

/// Validation mean recall at the configured K.
pub fn validate(
    params: &ModelParams,
    corpus: &TrainCorpus,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let eval = EvalConfig {
        task: config.task,
        ks: vec![config.validation_k],
        candidates: Candidates::Annotated,
    };
    let report = evaluate(
        params,
        corpus.val,
        &eval,
        &corpus.predicate_frequency(),
        "validation",
    )?;
    Ok(report.metrics[0].mean_recall)
}

/// Scenes per stage-1 batch so that a batch holds about the target number
/// of relations.
pub fn stage1_scenes_per_batch(corpus: &TrainCorpus, config: &TrainConfig) -> usize {
    let relations: usize = corpus.train.iter().map(|s| s.relations.len()).sum();
    let mean = relations as f64 / corpus.train.len() as f64;
    ((config.stage1_batch_relations as f64 / mean).round() as usize).max(1)
}

fn scenes_of_batch<'a>(
    corpus: &TrainCorpus<'a>,
    batch: &[crate::sampling::InstanceIndex],
) -> Vec<&'a Scene> {
    let mut ids: Vec<usize> = batch.iter().map(|i| i.scene).collect();
    ids.dedup();
    ids.into_iter().map(|i| &corpus.train[i]).collect()
}

/// Selection by validation score: strictly better wins, earliest on ties.
struct BestTracker {
    best: Option<(f64, usize, ModelParams)>,
    since_best: usize,
}

impl BestTracker {
    fn new() -> Self {
        Self {
            best: None,
            since_best: 0,
        }
    }

    fn offer(&mut self, score: f64, index: usize, params: &ModelParams) -> bool {
        let better = self.best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if better {
            self.best = Some((score, index, params.clone()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        better
    }
}

/// Result of stage 1.
#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    /// Parameters after the last epoch.
    pub last: ModelParams,
    /// Best-validation epoch parameters.
    pub best: ModelParams,
    pub best_validation: f64,
    pub best_epoch: usize,
}

/// Checkpoint destination for a run.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
}

impl CheckpointSink {
    fn save(
        &self,
        name: &str,
        params: &ModelParams,
        meta: &CheckpointMeta,
    ) -> Result<(), TrainError> {
        save_checkpoint(params, meta, &self.dir.join(format!("{name}.json")))?;
        Ok(())
    }
}

/// Stage 1: everything except the teacher classifier under SRS, with
/// validation after every epoch.
pub fn stage1(
    mut params: ModelParams,
    corpus: &TrainCorpus,
    config: &TrainConfig,
    log: &mut TrainLog,
    sink: Option<&CheckpointSink>,
) -> Result<Stage1Outcome, TrainError> {
    config.validate()?;
    corpus.validate()?;
    let seed = derive_seed(config.seed, stream::STAGE1);
    let per_batch = stage1_scenes_per_batch(corpus, config);
    let mut adam = Adam::new(config.adam, &params);
    let mut tracker = BestTracker::new();
    let mut steps = 0u64;
    for epoch in 0..config.stage1_epochs {
        let lr = config.learning_rate(epoch);
        let plan = plan_srs(corpus.train, per_batch, derive_seed(seed, epoch as u64))?;
        let before = params.clone();
        let mut acc = PhaseAccumulator::default();
        for batch in &plan.batches {
            let scenes = scenes_of_batch(corpus, batch);
            let (loss, grads, stats) =
                stage1_batch(&params, &scenes, config.task, NormMode::Train)?;
            check_finite(loss.entity + loss.predicate, "stage1", &params)?;
            adam.step(&mut params, &grads, lr, &JOINT_GROUPS);
            if let Some(stats) = stats {
                params.predicate_norm.update_running(&stats);
            }
            check_finite(
                if params.all_finite() { 0.0 } else { f64::NAN },
                "stage1 update",
                &params,
            )?;
            acc.batches += 1;
            acc.add(ENT_STUDENT, loss.entity);
            acc.add(PRED, loss.predicate);
            acc.clamped += loss.clamped;
            steps += 1;
        }
        let stats = acc.finish();
        let mut row = log_row(
            config.strategy,
            "stage1",
            "srs",
            epoch,
            lr,
            &stats,
            &before,
            &params,
        );
        let val = validate(&params, corpus, config)?;
        row.val_mean_recall = Some(val);
        log.rows.push(row);
        log::info!(
            "stage1 epoch {epoch}: val mR@{} {val:.4}",
            config.validation_k
        );
        if tracker.offer(val, epoch, &params) {
            if let Some(sink) = sink {
                sink.save(
                    "best",
                    &params,
                    &meta(config, "stage1", epoch, 0, steps, Some(val)),
                )?;
            }
        }
    }
    let (best_validation, best_epoch, best) = tracker
        .best
        .ok_or_else(|| TrainError::Config("stage1_epochs must be positive".into()))?;
    if let Some(sink) = sink {
        sink.save(
            "stage1_last",
            &params,
            &meta(config, "stage1", config.stage1_epochs - 1, 0, steps, None),
        )?;
    }
    Ok(Stage1Outcome {
        last: params,
        best,
        best_validation,
        best_epoch,
    })
}

fn meta(
    config: &TrainConfig,
    stage: &str,
    epoch: usize,
    alternation: usize,
    steps: u64,
    val: Option<f64>,
) -> CheckpointMeta {
    CheckpointMeta {
        strategy: config.strategy.to_string(),
        stage: stage.to_string(),
        epoch,
        alternation,
        optimizer_steps: steps,
        validation_mr_at_100: val,
    }
}

/// Which entity classifier a stage-2 loss trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityHead {
    Student,
    Teacher,
}

impl EntityHead {
    fn other(self) -> Self {
        match self {
            EntityHead::Student => EntityHead::Teacher,
            EntityHead::Teacher => EntityHead::Student,
        }
    }
}

/// Predicate-balanced step: predicate loss on the predicate classifier plus
/// an optional weighted entity loss over both entities of every sampled
/// relation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PStepTerms {
    pub entity: Option<(EntityHead, f64)>,
}

/// Entity-balanced step on one entity head, with optional distillation
/// toward the other head at temperature `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EStepTerms {
    pub head: EntityHead,
    pub kd_weight: f64,
    pub tau: f64,
}

/// Stage-2 state: frozen-extractor features cached per training entity and
/// relation, and optimizer slots for the three classifier matrices.
pub struct Stage2<'a> {
    config: &'a TrainConfig,
    params: ModelParams,
    scene_entity_offset: Vec<usize>,
    scene_relation_offset: Vec<usize>,
    entity_classes: Vec<usize>,
    entity_pre: Tensor2,
    entity_pair_appearance: Tensor2,
    relation_subject: Vec<usize>,
    relation_object: Vec<usize>,
    relation_boxes: Tensor2,
    relation_predicate: Vec<usize>,
    relation_features: Tensor2,
    embedded: Option<Vec<usize>>,
    student_slot: AdamSlot,
    teacher_slot: AdamSlot,
    predicate_slot: AdamSlot,
    pub predicate_map: ClassIndexMap,
    pub entity_map: ClassIndexMap,
}

impl<'a> Stage2<'a> {
    /// Enters stage 2: copies the student entity classifier into the
    /// teacher and caches frozen features.
    pub fn enter(
        mut params: ModelParams,
        corpus: TrainCorpus<'a>,
        config: &'a TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        corpus.validate()?;
        params.teacher_classifier = params.entity_classifier.clone();
        let mut rows = Vec::new();
        let mut entity_classes = Vec::new();
        let mut scene_entity_offset = Vec::with_capacity(corpus.train.len());
        let mut scene_relation_offset = Vec::with_capacity(corpus.train.len());
        let (mut subj, mut obj, mut boxes, mut preds) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for scene in corpus.train {
            let offset = rows.len();
            scene_entity_offset.push(offset);
            scene_relation_offset.push(preds.len());
            for e in &scene.entities {
                rows.push(e.feature.clone());
                entity_classes.push(e.class);
            }
            for r in &scene.relations {
                subj.push(offset + r.subject);
                obj.push(offset + r.object);
                boxes.push(
                    pair_boxes(
                        &scene.entities[r.subject].bbox,
                        &scene.entities[r.object].bbox,
                    )
                    .to_vec(),
                );
                preds.push(r.predicate);
            }
        }
        let x = Tensor2::from_rows(&rows)?;
        let entity_pre = params.semantic_features(&x)?;
        let entity_pair_appearance = params.appearance_features(&x)?;
        let predicate_map =
            ClassIndexMap::build(corpus.train, Axis::Predicate, corpus.predicate_classes);
        let entity_map = ClassIndexMap::build(corpus.train, Axis::Entity, corpus.entity_classes);
        let sizes = (
            params.entity_classifier.data().len(),
            params.predicate_classifier.data().len(),
        );
        let mut stage = Self {
            config,
            params,
            scene_entity_offset,
            scene_relation_offset,
            entity_classes,
            entity_pre,
            entity_pair_appearance,
            relation_subject: subj,
            relation_object: obj,
            relation_boxes: Tensor2::from_rows(&boxes)?,
            relation_predicate: preds,
            relation_features: Tensor2::zeros(0, 0),
            embedded: None,
            student_slot: AdamSlot::new(sizes.0),
            teacher_slot: AdamSlot::new(sizes.0),
            predicate_slot: AdamSlot::new(sizes.1),
            predicate_map,
            entity_map,
        };
        stage.refresh_relation_features()?;
        Ok(stage)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Recomputes relation features when the embedded entity classes have
    /// changed (SGCls embeds the student argmax, which the entity steps move).
    fn refresh_relation_features(&mut self) -> Result<(), TrainError> {
        let labels: Vec<usize> = match self.config.task {
            Task::PredCls => self.entity_classes.clone(),
            Task::SgCls => {
                let logits = self.entity_pre.matmul(&self.params.entity_classifier)?;
                (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
            }
        };
        if self.embedded.as_ref() == Some(&labels) {
            return Ok(());
        }
        let embedded = self.params.embed_classes(&labels)?;
        let ent = Tensor2::concat_cols(&[&self.entity_pair_appearance, &embedded])?;
        self.relation_features = self.params.predicate_features_eval(
            &ent.select_rows(&self.relation_subject),
            &ent.select_rows(&self.relation_object),
            &self.relation_boxes,
        )?;
        self.embedded = Some(labels);
        Ok(())
    }

    fn entity_row(&self, scene: usize, slot: usize) -> usize {
        self.scene_entity_offset[scene] + slot
    }

    fn relation_row(&self, scene: usize, slot: usize) -> usize {
        self.scene_relation_offset[scene] + slot
    }

    fn head_matrix(&self, head: EntityHead) -> &Tensor2 {
        match head {
            EntityHead::Student => &self.params.entity_classifier,
            EntityHead::Teacher => &self.params.teacher_classifier,
        }
    }

    fn update_head(&mut self, head: EntityHead, grad: &Tensor2, lr: f64) {
        let cfg = self.config.adam;
        match head {
            EntityHead::Student => self.student_slot.update(
                self.params.entity_classifier.data_mut(),
                grad.data(),
                lr,
                &cfg,
            ),
            EntityHead::Teacher => self.teacher_slot.update(
                self.params.teacher_classifier.data_mut(),
                grad.data(),
                lr,
                &cfg,
            ),
        }
    }

    fn relation_rows(
        &self,
        batch: &[crate::sampling::InstanceIndex],
    ) -> Result<Vec<usize>, TrainError> {
        batch
            .iter()
            .map(|i| match i.kind {
                InstanceKind::Relation(slot) => Ok(self.relation_row(i.scene, slot)),
                InstanceKind::Entity(_) => Err(TrainError::Config(
                    "entity instance in a predicate plan".into(),
                )),
            })
            .collect()
    }

    fn entity_rows(
        &self,
        batch: &[crate::sampling::InstanceIndex],
    ) -> Result<Vec<usize>, TrainError> {
        batch
            .iter()
            .map(|i| match i.kind {
                InstanceKind::Entity(slot) => Ok(self.entity_row(i.scene, slot)),
                InstanceKind::Relation(_) => Err(TrainError::Config(
                    "relation instance in an entity plan".into(),
                )),
            })
            .collect()
    }

    /// Mean entity cross-entropy of `rows` under one head, scaled by
    /// `weight`, with the head's gradient.
    fn entity_loss(
        &self,
        rows: &[usize],
        head: EntityHead,
        weight: f64,
    ) -> Result<(f64, Tensor2, usize), TrainError> {
        let pre = self.entity_pre.select_rows(rows);
        let probs = softmax_rows(&pre.matmul(self.head_matrix(head))?, 1.0)?;
        let targets: Vec<usize> = rows.iter().map(|&r| self.entity_classes[r]).collect();
        let w = vec![weight / rows.len() as f64; rows.len()];
        let (loss, g, clamped) = weighted_cross_entropy(&probs, &targets, &w)?;
        Ok((loss, pre.matmul_tn(&g)?, clamped))
    }

    /// Loss and gradients of one predicate-balanced batch of relation rows.
    fn p_batch(&self, rows: &[usize], terms: PStepTerms) -> Result<PBatch, TrainError> {
        let f = self.relation_features.select_rows(rows);
        let probs = softmax_rows(&f.matmul(&self.params.predicate_classifier)?, 1.0)?;
        let targets: Vec<usize> = rows.iter().map(|&r| self.relation_predicate[r]).collect();
        let w = vec![1.0 / rows.len() as f64; rows.len()];
        let (loss_pred, g, mut clamped) = weighted_cross_entropy(&probs, &targets, &w)?;
        let mut out = PBatch {
            loss_pred,
            loss_entity: None,
            clamped: 0,
            grad_predicate: f.matmul_tn(&g)?,
            head: None,
        };
        if let Some((head, weight)) = terms.entity.filter(|(_, w)| *w > 0.0) {
            let ents: Vec<usize> = rows
                .iter()
                .map(|&r| self.relation_subject[r])
                .chain(rows.iter().map(|&r| self.relation_object[r]))
                .collect();
            let (loss, grad, c) = self.entity_loss(&ents, head, weight)?;
            clamped += c;
            out.loss_entity = Some((head, loss / weight, weight));
            out.head = Some((head, grad));
        }
        out.clamped = clamped;
        Ok(out)
    }

    /// Loss and gradient of one entity-balanced batch of entity rows.
    fn e_batch(&self, rows: &[usize], terms: EStepTerms) -> Result<EBatch, TrainError> {
        let (loss, mut grad, mut clamped) = self.entity_loss(rows, terms.head, 1.0)?;
        let mut kd = None;
        if terms.kd_weight > 0.0 {
            let pre = self.entity_pre.select_rows(rows);
            let trained = softmax_rows(&pre.matmul(self.head_matrix(terms.head))?, terms.tau)?;
            let fixed = softmax_rows(
                &pre.matmul(self.head_matrix(terms.head.other()))?,
                terms.tau,
            )?;
            let n = rows.len() as f64;
            let mut g = Tensor2::zeros(trained.rows(), trained.cols());
            let mut value = 0.0;
            for r in 0..trained.rows() {
                let l = kl_divergence(trained.row(r), fixed.row(r))?;
                value += l.value / n;
                clamped += usize::from(l.clamped);
                for (slot, v) in g.row_mut(r).iter_mut().zip(kl_student_logit_grad(
                    trained.row(r),
                    fixed.row(r),
                    terms.tau,
                )) {
                    *slot = terms.kd_weight * v / n;
                }
            }
            grad.add_assign(&pre.matmul_tn(&g)?)?;
            kd = Some(value);
        }
        Ok(EBatch {
            loss,
            kd,
            total: loss + terms.kd_weight * kd.unwrap_or(0.0),
            clamped,
            grad,
        })
    }

    fn check_params(&self, phase: &str) -> Result<(), TrainError> {
        let finite = [
            &self.params.entity_classifier,
            &self.params.teacher_classifier,
            &self.params.predicate_classifier,
        ]
        .iter()
        .all(|t| t.data().iter().all(|v| v.is_finite()));
        check_finite(if finite { 0.0 } else { f64::NAN }, phase, &self.params)
    }

    /// One pass over a predicate-balanced plan.
    pub fn p_step(
        &mut self,
        plan: &EpochPlan,
        lr: f64,
        terms: PStepTerms,
    ) -> Result<PhaseStats, TrainError> {
        self.refresh_relation_features()?;
        let mut acc = PhaseAccumulator::default();
        for batch in &plan.batches {
            let rows = self.relation_rows(batch)?;
            let b = self.p_batch(&rows, terms)?;
            let mut total = b.loss_pred;
            acc.add(PRED, b.loss_pred);
            if let Some((head, loss, weight)) = b.loss_entity {
                acc.add(
                    if head == EntityHead::Teacher {
                        ENT_TEACHER
                    } else {
                        ENT_STUDENT
                    },
                    loss,
                );
                total += weight * loss;
            }
            acc.clamped += b.clamped;
            check_finite(total, "p-step", &self.params)?;
            let cfg = self.config.adam;
            self.predicate_slot.update(
                self.params.predicate_classifier.data_mut(),
                b.grad_predicate.data(),
                lr,
                &cfg,
            );
            if let Some((head, grad)) = b.head {
                self.update_head(head, &grad, lr);
            }
            self.check_params("p-step update")?;
            acc.batches += 1;
        }
        Ok(acc.finish())
    }

    /// One pass over an entity-balanced plan.
    pub fn e_step(
        &mut self,
        plan: &EpochPlan,
        lr: f64,
        terms: EStepTerms,
    ) -> Result<PhaseStats, TrainError> {
        let mut acc = PhaseAccumulator::default();
        for batch in &plan.batches {
            let rows = self.entity_rows(batch)?;
            let b = self.e_batch(&rows, terms)?;
            acc.add(
                if terms.head == EntityHead::Student {
                    ENT_STUDENT
                } else {
                    ENT_TEACHER
                },
                b.loss,
            );
            if let Some(kd) = b.kd {
                acc.add(KD, kd);
            }
            acc.clamped += b.clamped;
            check_finite(b.total, "e-step", &self.params)?;
            self.update_head(terms.head, &b.grad, lr);
            self.check_params("e-step update")?;
            acc.batches += 1;
        }
        Ok(acc.finish())
    }
}

struct PBatch {
    loss_pred: f64,
    /// Head, unweighted mean loss and weight.
    loss_entity: Option<(EntityHead, f64, f64)>,
    clamped: usize,
    grad_predicate: Tensor2,
    head: Option<(EntityHead, Tensor2)>,
}

struct EBatch {
    loss: f64,
    kd: Option<f64>,
    total: f64,
    clamped: usize,
    grad: Tensor2,
}

/// Outcome of a full run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters.
    pub params: ModelParams,
    pub best_validation: f64,
    /// Epoch or alternation index of the best checkpoint.
    pub best_index: usize,
    pub log: TrainLog,
}

/// Stage 2 of a two-stage strategy, starting from stage-1 parameters.
pub fn stage2(
    params: ModelParams,
    corpus: &TrainCorpus,
    config: &TrainConfig,
    log: &mut TrainLog,
    sink: Option<&CheckpointSink>,
) -> Result<(ModelParams, f64, usize), TrainError> {
    if !config.strategy.is_two_stage() {
        return Err(TrainError::Config(format!(
            "{} has no second stage",
            config.strategy
        )));
    }
    let seed = derive_seed(config.seed, stream::STAGE2);
    let mut state = Stage2::enter(params, *corpus, config)?;
    let (p_terms, e_terms) = stage2_terms(config);
    let mut tracker = BestTracker::new();
    for alternation in 0..config.max_alternations {
        let lr = config.learning_rate(alternation);
        let (p_plan, e_plan) = plan_acbs(
            &state.predicate_map,
            &state.entity_map,
            &config.acbs,
            alternation,
            seed,
        )?;
        let before = state.params().clone();
        let stats = state.p_step(&p_plan, lr, p_terms)?;
        let after_p = state.params().clone();
        log.rows.push(log_row(
            config.strategy,
            "stage2",
            "p-step",
            alternation,
            lr,
            &stats,
            &before,
            &after_p,
        ));
        if let Some(terms) = e_terms {
            let stats = state.e_step(&e_plan, lr, terms)?;
            log.rows.push(log_row(
                config.strategy,
                "stage2",
                "e-step",
                alternation,
                lr,
                &stats,
                &after_p,
                state.params(),
            ));
        }
        let val = validate(state.params(), corpus, config)?;
        log.rows.last_mut().expect("row pushed").val_mean_recall = Some(val);
        log::info!(
            "alternation {alternation}: val mR@{} {val:.4}",
            config.validation_k
        );
        let m = meta(config, "stage2", 0, alternation, 0, Some(val));
        if let Some(sink) = sink {
            sink.save(&format!("alternation_{alternation:03}"), state.params(), &m)?;
        }
        if tracker.offer(val, alternation, state.params()) {
            if let Some(sink) = sink {
                sink.save("best", state.params(), &m)?;
            }
        }
        if tracker.since_best >= config.patience {
            break;
        }
    }
    let (best, index, params) = tracker
        .best
        .ok_or_else(|| TrainError::Config("max_alternations must be positive".into()))?;
    Ok((params, best, index))
}

/// Loss terms of the stage-2 steps for a two-stage strategy.
pub fn stage2_terms(config: &TrainConfig) -> (PStepTerms, Option<EStepTerms>) {
    match config.strategy {
        Strategy::Dt2PredicateCbs => (
            PStepTerms {
                entity: Some((EntityHead::Student, 1.0)),
            },
            None,
        ),
        Strategy::Dt2IndepCbs => (
            PStepTerms { entity: None },
            Some(EStepTerms {
                head: EntityHead::Student,
                kd_weight: 0.0,
                tau: config.tau_s,
            }),
        ),
        _ if config.e_step_teacher => (
            PStepTerms {
                entity: Some((EntityHead::Student, config.beta)),
            },
            Some(EStepTerms {
                head: EntityHead::Teacher,
                kd_weight: config.alpha,
                tau: config.tau_s,
            }),
        ),
        _ => (
            PStepTerms {
                entity: Some((EntityHead::Teacher, config.beta)),
            },
            Some(EStepTerms {
                head: EntityHead::Student,
                kd_weight: config.alpha,
                tau: config.tau_s,
            }),
        ),
    }
}

/// Joint training from scratch with predicate-balanced batches for the
/// predicate loss interleaved with entity-balanced batches for the entity
/// loss.
pub fn single_indep_cbs(
    mut params: ModelParams,
    corpus: &TrainCorpus,
    config: &TrainConfig,
    log: &mut TrainLog,
    sink: Option<&CheckpointSink>,
) -> Result<(ModelParams, f64, usize), TrainError> {
    config.validate()?;
    corpus.validate()?;
    let seed = derive_seed(config.seed, stream::STAGE1);
    let pmap = ClassIndexMap::build(corpus.train, Axis::Predicate, corpus.predicate_classes);
    let emap = ClassIndexMap::build(corpus.train, Axis::Entity, corpus.entity_classes);
    let mut adam = Adam::new(config.adam, &params);
    let mut tracker = BestTracker::new();
    let mut steps = 0u64;
    for epoch in 0..config.stage1_epochs {
        let lr = config.learning_rate(epoch);
        let pb = config
            .acbs
            .predicate_batches
            .unwrap_or_else(|| pmap.natural_batches(config.acbs.predicate_per_class));
        let eb = config
            .acbs
            .entity_batches
            .unwrap_or_else(|| emap.natural_batches(config.acbs.entity_per_class));
        let p_plan = plan_cbs(
            &pmap,
            config.acbs.predicate_per_class,
            pb,
            alternation_seed(seed, epoch, Axis::Predicate),
        )?;
        let e_plan = plan_cbs(
            &emap,
            config.acbs.entity_per_class,
            eb,
            alternation_seed(seed, epoch, Axis::Entity),
        )?;
        let before = params.clone();
        let mut acc = PhaseAccumulator::default();
        for i in 0..p_plan.batches.len().max(e_plan.batches.len()) {
            if let Some(batch) = p_plan.batches.get(i) {
                let input = relation_batch(corpus.train, batch)?;
                let (out, tape, stats) =
                    params.forward_batch(&input.0, config.task, NormMode::Train)?;
                let w = vec![1.0 / input.1.len() as f64; input.1.len()];
                let (loss, g, clamped) =
                    weighted_cross_entropy(&out.predicate_probs, &input.1, &w)?;
                check_finite(loss, "single-stage predicate batch", &params)?;
                let grads = params.backward_batch(
                    tape,
                    &LogitGrads {
                        predicate: Some(g),
                        ..Default::default()
                    },
                )?;
                adam.step(&mut params, &grads, lr, &JOINT_GROUPS);
                if let Some(stats) = stats {
                    params.predicate_norm.update_running(&stats);
                }
                acc.add(PRED, loss);
                acc.clamped += clamped;
                steps += 1;
            }
            if let Some(batch) = e_plan.batches.get(i) {
                let input = entity_batch(corpus.train, batch)?;
                let (out, tape, _) = params.forward_batch(&input, config.task, NormMode::Train)?;
                let w = vec![1.0 / input.classes.len() as f64; input.classes.len()];
                let (loss, g, clamped) =
                    weighted_cross_entropy(&out.student_probs, &input.classes, &w)?;
                check_finite(loss, "single-stage entity batch", &params)?;
                let grads = params.backward_batch(
                    tape,
                    &LogitGrads {
                        student: Some(g),
                        ..Default::default()
                    },
                )?;
                adam.step(&mut params, &grads, lr, &JOINT_GROUPS);
                acc.add(ENT_STUDENT, loss);
                acc.clamped += clamped;
                steps += 1;
            }
            acc.batches += 1;
        }
        let stats = acc.finish();
        let mut row = log_row(
            config.strategy,
            "single",
            "indep-cbs",
            epoch,
            lr,
            &stats,
            &before,
            &params,
        );
        let val = validate(&params, corpus, config)?;
        row.val_mean_recall = Some(val);
        log.rows.push(row);
        log::info!(
            "single-stage epoch {epoch}: val mR@{} {val:.4}",
            config.validation_k
        );
        let m = meta(config, "single", epoch, 0, steps, Some(val));
        if tracker.offer(val, epoch, &params) {
            if let Some(sink) = sink {
                sink.save("best", &params, &m)?;
            }
        }
        if tracker.since_best >= config.patience.max(1) * 2 && epoch + 1 >= config.stage1_epochs / 2
        {
            break;
        }
    }
    let (best, index, params) = tracker
        .best
        .ok_or_else(|| TrainError::Config("stage1_epochs must be positive".into()))?;
    Ok((params, best, index))
}

/// Both entities of every sampled relation as separate rows.
fn relation_batch(
    scenes: &[Scene],
    batch: &[crate::sampling::InstanceIndex],
) -> Result<(BatchInput, Vec<usize>), TrainError> {
    let mut rows = Vec::with_capacity(2 * batch.len());
    let mut classes = Vec::with_capacity(2 * batch.len());
    let mut relations = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for idx in batch {
        let InstanceKind::Relation(slot) = idx.kind else {
            return Err(TrainError::Config(
                "entity instance in a predicate plan".into(),
            ));
        };
        let scene = &scenes[idx.scene];
        let r = &scene.relations[slot];
        let (s, o) = (&scene.entities[r.subject], &scene.entities[r.object]);
        let base = rows.len();
        rows.push(s.feature.clone());
        rows.push(o.feature.clone());
        classes.push(s.class);
        classes.push(o.class);
        relations.push(RelationInput {
            subject: base,
            object: base + 1,
            boxes: pair_boxes(&s.bbox, &o.bbox),
        });
        targets.push(r.predicate);
    }
    Ok((
        BatchInput {
            features: Tensor2::from_rows(&rows)?,
            classes,
            relations,
        },
        targets,
    ))
}

fn entity_batch(
    scenes: &[Scene],
    batch: &[crate::sampling::InstanceIndex],
) -> Result<BatchInput, TrainError> {
    let mut rows = Vec::with_capacity(batch.len());
    let mut classes = Vec::with_capacity(batch.len());
    for idx in batch {
        let InstanceKind::Entity(slot) = idx.kind else {
            return Err(TrainError::Config(
                "relation instance in an entity plan".into(),
            ));
        };
        let e = &scenes[idx.scene].entities[slot];
        rows.push(e.feature.clone());
        classes.push(e.class);
    }
    Ok(BatchInput {
        features: Tensor2::from_rows(&rows)?,
        classes,
        relations: Vec::new(),
    })
}

/// Initial parameters of a run.
pub fn initial_params(dims: ModelDims, config: &TrainConfig) -> Result<ModelParams, TrainError> {
    Ok(init_params(
        dims,
        derive_seed(config.seed, stream::MODEL_INIT),
    )?)
}

/// Runs a strategy end to end and returns the best-validation parameters.
pub fn run(
    config: &TrainConfig,
    dims: ModelDims,
    corpus: &TrainCorpus,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dims.entity_classes != corpus.entity_classes
        || dims.predicate_classes != corpus.predicate_classes
    {
        return Err(TrainError::Config(
            "model class counts differ from the corpus".into(),
        ));
    }
    let params = initial_params(dims, config)?;
    let mut log = TrainLog::default();
    let (params, best_validation, best_index) = match config.strategy {
        Strategy::SingleSrs => {
            let s1 = stage1(params, corpus, config, &mut log, sink)?;
            (s1.best, s1.best_validation, s1.best_epoch)
        }
        Strategy::SingleIndepCbs => single_indep_cbs(params, corpus, config, &mut log, sink)?,
        _ => {
            let s1 = stage1(params, corpus, config, &mut log, sink)?;
            stage2(s1.last, corpus, config, &mut log, sink)?
        }
    };
    Ok(TrainOutcome {
        params,
        best_validation,
        best_index,
        log,
    })
}

/// Runs stage 2 of a two-stage strategy from shared stage-1 parameters.
pub fn run_from_stage1(
    config: &TrainConfig,
    stage1_params: ModelParams,
    corpus: &TrainCorpus,
) -> Result<TrainOutcome, TrainError> {
    let mut log = TrainLog::default();
    let (params, best_validation, best_index) =
        stage2(stage1_params, corpus, config, &mut log, None)?;
    Ok(TrainOutcome {
        params,
        best_validation,
        best_index,
        log,
    })
}

#[cfg(test)]
mod tests;
