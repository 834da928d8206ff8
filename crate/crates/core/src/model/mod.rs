//! The relation network: an entity encoder with semantic and appearance
//! branches, a box embedding, a predicate feature head, and three bias-free
//! classifier matrices (entity student, entity teacher, predicate).

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{BBox, Scene};
use crate::numerics::{
    argmax, softmax_rows, Activation, ActivationTape, BatchNormTape, BatchStats, LinearTape,
    NormMode, NumericsError, Tensor2,
};

pub use checkpoint::{
    check_dims, load_checkpoint, save_checkpoint, CheckpointManifest, CheckpointMeta,
    CHECKPOINT_FORMAT_VERSION,
};
pub use params::{init_params, ModelDims, ModelParams, ParamGroup};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Evaluation / training protocol.
///
/// In `PredCls` ground-truth entity classes feed the semantic embedding; in
/// `SgCls` the argmax of the student entity classifier does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    PredCls,
    SgCls,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::PredCls => "predcls",
            Task::SgCls => "sgcls",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predcls" => Ok(Task::PredCls),
            "sgcls" => Ok(Task::SgCls),
            other => Err(format!(
                "unknown task '{other}' (expected predcls or sgcls)"
            )),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Source of the one-hot class fed to the semantic embedding.
#[derive(Debug, Clone, Copy)]
pub enum EncodeMode {
    /// Ground-truth class (PredCls).
    PredCls(usize),
    /// Argmax of the student entity classifier (SGCls).
    SgCls,
}

/// Output of [`ModelParams::encode_entity`].
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEncoding {
    pub student_probs: Vec<f64>,
    pub teacher_probs: Vec<f64>,
    /// Class fed to the semantic embedding.
    pub embedded_class: usize,
    /// `[appearance, semantic]` feature of the entity.
    pub pair_feature: Vec<f64>,
}

/// Eval-mode forward of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub entity_probs: Tensor2,
    pub teacher_probs: Tensor2,
    /// Classes fed to the semantic embedding per entity.
    pub embedded_classes: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub predicate_probs: Tensor2,
}

/// Eight box coordinates `[subject, object]` of an ordered pair.
pub fn pair_boxes(subject: &BBox, object: &BBox) -> [f64; 8] {
    let mut out = [0.0; 8];
    out[..4].copy_from_slice(&subject.0);
    out[4..].copy_from_slice(&object.0);
    out
}

/// One relation of a training batch, referencing rows of the entity batch.
#[derive(Debug, Clone, Copy)]
pub struct RelationInput {
    pub subject: usize,
    pub object: usize,
    pub boxes: [f64; 8],
}

/// Flattened entities and relations of a batch.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub features: Tensor2,
    pub classes: Vec<usize>,
    pub relations: Vec<RelationInput>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub semantic: Tensor2,
    pub student_probs: Tensor2,
    pub teacher_probs: Tensor2,
    pub embedded_classes: Vec<usize>,
    pub predicate_probs: Tensor2,
}

struct BranchTape {
    first: LinearTape,
    first_act: ActivationTape,
    second: LinearTape,
    second_act: ActivationTape,
}

struct PredicateTape {
    embedding: LinearTape,
    bbox: LinearTape,
    hidden: LinearTape,
    norm: BatchNormTape,
    hidden_act: ActivationTape,
    out: LinearTape,
    out_act: ActivationTape,
    predicate_feature: Tensor2,
    pairs: Vec<(usize, usize)>,
}

/// Forward intermediates of [`ModelParams::forward_batch`].
pub struct BatchTape {
    semantic_branch: BranchTape,
    appearance_branch: Option<BranchTape>,
    semantic: Tensor2,
    predicate: Option<PredicateTape>,
    entities: usize,
}

/// Loss gradients with respect to the three logit blocks of a batch.
#[derive(Debug, Clone, Default)]
pub struct LogitGrads {
    pub student: Option<Tensor2>,
    pub teacher: Option<Tensor2>,
    pub predicate: Option<Tensor2>,
}

impl ModelParams {
    fn branch_forward(
        layers: &[crate::numerics::Linear],
        x: &Tensor2,
    ) -> Result<(Tensor2, BranchTape), ModelError> {
        let (h, first) = layers[0].forward(x)?;
        let (h, first_act) = Activation::Relu.forward(&h);
        let (h, second) = layers[1].forward(&h)?;
        let (h, second_act) = Activation::Relu.forward(&h);
        Ok((
            h,
            BranchTape {
                first,
                first_act,
                second,
                second_act,
            },
        ))
    }

    fn branch_apply(
        layers: &[crate::numerics::Linear],
        x: &Tensor2,
    ) -> Result<Tensor2, ModelError> {
        let h = Activation::Relu.apply(&layers[0].apply(x)?);
        Ok(Activation::Relu.apply(&layers[1].apply(&h)?))
    }

    fn branch_backward(
        layers: &[crate::numerics::Linear],
        grads: &mut [crate::numerics::Linear],
        tape: BranchTape,
        grad_out: &Tensor2,
    ) -> Result<(), ModelError> {
        let g = tape.second_act.backward(grad_out)?;
        let (g, second) = layers[1].backward(tape.second, &g)?;
        let g = tape.first_act.backward(&g)?;
        let first = layers[0].backward_params(tape.first, &g)?;
        grads[1].weight.add_assign(&second.weight)?;
        add_vec(&mut grads[1].bias, &second.bias);
        grads[0].weight.add_assign(&first.weight)?;
        add_vec(&mut grads[0].bias, &first.bias);
        Ok(())
    }

    fn check_features(&self, x: &Tensor2) -> Result<(), ModelError> {
        if x.cols() != self.dims.backbone_width {
            return Err(NumericsError::Shape {
                op: "encode_entity",
                expected: format!("backbone width {}", self.dims.backbone_width),
                got: format!("{}", x.cols()),
            }
            .into());
        }
        Ok(())
    }

    /// Semantic-branch output (the entity pre-classifier vector).
    pub fn semantic_features(&self, x: &Tensor2) -> Result<Tensor2, ModelError> {
        self.check_features(x)?;
        Self::branch_apply(&self.semantic, x)
    }

    /// Appearance-branch output; zero columns when the branch is disabled.
    pub fn appearance_features(&self, x: &Tensor2) -> Result<Tensor2, ModelError> {
        self.check_features(x)?;
        if self.appearance.is_empty() {
            return Ok(Tensor2::zeros(x.rows(), 0));
        }
        Self::branch_apply(&self.appearance, x)
    }

    pub fn one_hot(&self, classes: &[usize]) -> Tensor2 {
        let mut t = Tensor2::zeros(classes.len(), self.dims.entity_classes);
        for (r, &c) in classes.iter().enumerate() {
            t.set(r, c, 1.0);
        }
        t
    }

    /// Semantic embedding of class labels.
    pub fn embed_classes(&self, classes: &[usize]) -> Result<Tensor2, ModelError> {
        Ok(self.semantic_embedding.apply(&self.one_hot(classes))?)
    }

    /// Eval-mode predicate feature for rows of subject features,
    /// object features and 8-coordinate boxes.
    pub fn predicate_features_eval(
        &self,
        subject: &Tensor2,
        object: &Tensor2,
        boxes: &Tensor2,
    ) -> Result<Tensor2, ModelError> {
        let bbox = self.bbox_embedding.apply(boxes)?;
        let joint = Tensor2::concat_cols(&[subject, object, &bbox])?;
        let h = self.predicate_hidden.apply(&joint)?;
        let h = self.predicate_norm.apply_eval(&h)?;
        let h = Activation::Relu.apply(&h);
        let h = self.predicate_out.apply(&h)?;
        Ok(Activation::Tanh.apply(&h))
    }

    fn embed_labels(&self, student_probs: &Tensor2, gt: &[usize], task: Task) -> Vec<usize> {
        match task {
            Task::PredCls => gt.to_vec(),
            Task::SgCls => (0..student_probs.rows())
                .map(|r| student_probs.argmax_row(r))
                .collect(),
        }
    }

    /// Encodes a single entity in eval mode.
    pub fn encode_entity(
        &self,
        feature: &[f64],
        mode: EncodeMode,
    ) -> Result<EntityEncoding, ModelError> {
        let x = Tensor2::row_vector(feature);
        let pre = self.semantic_features(&x)?;
        let student = softmax_rows(&pre.matmul(&self.entity_classifier)?, 1.0)?;
        let teacher = softmax_rows(&pre.matmul(&self.teacher_classifier)?, 1.0)?;
        let class = match mode {
            EncodeMode::PredCls(c) => {
                if c >= self.dims.entity_classes {
                    return Err(NumericsError::Shape {
                        op: "encode_entity",
                        expected: format!("class below {}", self.dims.entity_classes),
                        got: format!("{c}"),
                    }
                    .into());
                }
                c
            }
            EncodeMode::SgCls => argmax(student.row(0)),
        };
        let semantic = self.embed_classes(&[class])?;
        let appearance = self.appearance_features(&x)?;
        let pair = Tensor2::concat_cols(&[&appearance, &semantic])?;
        Ok(EntityEncoding {
            student_probs: student.into_data(),
            teacher_probs: teacher.into_data(),
            embedded_class: class,
            pair_feature: pair.into_data(),
        })
    }

    /// Predicate probabilities for an ordered pair in eval mode.
    pub fn classify_predicate(
        &self,
        subject: &[f64],
        object: &[f64],
        subject_box: &BBox,
        object_box: &BBox,
    ) -> Result<Vec<f64>, ModelError> {
        let width = self.dims.entity_feature_width();
        if subject.len() != width || object.len() != width {
            return Err(NumericsError::Shape {
                op: "classify_predicate",
                expected: format!("entity features of width {width}"),
                got: format!("{} and {}", subject.len(), object.len()),
            }
            .into());
        }
        if !subject_box.is_valid() || !object_box.is_valid() {
            return Err(ModelError::InvalidDims("invalid bounding box".into()));
        }
        let boxes = Tensor2::row_vector(&pair_boxes(subject_box, object_box));
        let f = self.predicate_features_eval(
            &Tensor2::row_vector(subject),
            &Tensor2::row_vector(object),
            &boxes,
        )?;
        Ok(softmax_rows(&f.matmul(&self.predicate_classifier)?, 1.0)?.into_data())
    }

    /// Eval-mode forward of a scene over the given ordered pairs.
    pub fn forward_scene(
        &self,
        scene: &Scene,
        task: Task,
        pairs: &[(usize, usize)],
    ) -> Result<ForwardResult, ModelError> {
        let rows: Vec<Vec<f64>> = scene.entities.iter().map(|e| e.feature.clone()).collect();
        let x = Tensor2::from_rows(&rows)?;
        let gt: Vec<usize> = scene.entities.iter().map(|e| e.class).collect();
        let pre = self.semantic_features(&x)?;
        let student = softmax_rows(&pre.matmul(&self.entity_classifier)?, 1.0)?;
        let teacher = softmax_rows(&pre.matmul(&self.teacher_classifier)?, 1.0)?;
        let labels = self.embed_labels(&student, &gt, task);
        let semantic = self.embed_classes(&labels)?;
        let appearance = self.appearance_features(&x)?;
        let ent = Tensor2::concat_cols(&[&appearance, &semantic])?;
        let subj: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let obj: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let box_rows: Vec<Vec<f64>> = pairs
            .iter()
            .map(|&(s, o)| pair_boxes(&scene.entities[s].bbox, &scene.entities[o].bbox).to_vec())
            .collect();
        let predicate_probs = if pairs.is_empty() {
            Tensor2::zeros(0, self.dims.predicate_classes)
        } else {
            let f = self.predicate_features_eval(
                &ent.select_rows(&subj),
                &ent.select_rows(&obj),
                &Tensor2::from_rows(&box_rows)?,
            )?;
            softmax_rows(&f.matmul(&self.predicate_classifier)?, 1.0)?
        };
        Ok(ForwardResult {
            entity_probs: student,
            teacher_probs: teacher,
            embedded_classes: labels,
            pairs: pairs.to_vec(),
            predicate_probs,
        })
    }

    /// Full forward over a batch with a tape for [`ModelParams::backward_batch`].
    ///
    /// A batch without relations skips the predicate head. In train mode
    /// the returned [`BatchStats`] must be applied to the predicate batch
    /// norm by the caller after the parameter update.
    pub fn forward_batch(
        &self,
        input: &BatchInput,
        task: Task,
        mode: NormMode,
    ) -> Result<(BatchOutput, BatchTape, Option<BatchStats>), ModelError> {
        self.check_features(&input.features)?;
        let n = input.features.rows();
        let (semantic, semantic_branch) = Self::branch_forward(&self.semantic, &input.features)?;
        let student_probs = softmax_rows(&semantic.matmul(&self.entity_classifier)?, 1.0)?;
        let teacher_probs = softmax_rows(&semantic.matmul(&self.teacher_classifier)?, 1.0)?;
        let labels = self.embed_labels(&student_probs, &input.classes, task);
        let mut output = BatchOutput {
            semantic: semantic.clone(),
            student_probs,
            teacher_probs,
            embedded_classes: labels,
            predicate_probs: Tensor2::zeros(0, self.dims.predicate_classes),
        };
        let mut tape = BatchTape {
            semantic_branch,
            appearance_branch: None,
            semantic,
            predicate: None,
            entities: n,
        };
        if input.relations.is_empty() {
            return Ok((output, tape, None));
        }

        let (embedded, embedding) = self
            .semantic_embedding
            .forward(&self.one_hot(&output.embedded_classes))?;
        let appearance = if self.appearance.is_empty() {
            Tensor2::zeros(n, 0)
        } else {
            let (a, t) = Self::branch_forward(&self.appearance, &input.features)?;
            tape.appearance_branch = Some(t);
            a
        };
        let ent = Tensor2::concat_cols(&[&appearance, &embedded])?;

        let pairs: Vec<(usize, usize)> = input
            .relations
            .iter()
            .map(|r| (r.subject, r.object))
            .collect();
        let subj: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let obj: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let box_rows: Vec<Vec<f64>> = input.relations.iter().map(|r| r.boxes.to_vec()).collect();
        let (bbox, bbox_tape) = self
            .bbox_embedding
            .forward(&Tensor2::from_rows(&box_rows)?)?;
        let joint =
            Tensor2::concat_cols(&[&ent.select_rows(&subj), &ent.select_rows(&obj), &bbox])?;
        let (h, hidden) = self.predicate_hidden.forward(&joint)?;
        let (h, norm, stats) = match mode {
            NormMode::Train => {
                let (h, tape, stats) = self.predicate_norm.forward_train(&h)?;
                (h, tape, Some(stats))
            }
            NormMode::Eval => {
                let (h, tape) = self.predicate_norm.forward_eval(&h)?;
                (h, tape, None)
            }
        };
        let (h, hidden_act) = Activation::Relu.forward(&h);
        let (h, out) = self.predicate_out.forward(&h)?;
        let (predicate_feature, out_act) = Activation::Tanh.forward(&h);
        output.predicate_probs =
            softmax_rows(&predicate_feature.matmul(&self.predicate_classifier)?, 1.0)?;
        tape.predicate = Some(PredicateTape {
            embedding,
            bbox: bbox_tape,
            hidden,
            norm,
            hidden_act,
            out,
            out_act,
            predicate_feature,
            pairs,
        });
        Ok((output, tape, stats))
    }

    /// Backpropagates logit gradients into a zero-initialized gradient
    /// container. No gradient crosses the argmax feeding the embedding.
    pub fn backward_batch(
        &self,
        tape: BatchTape,
        seeds: &LogitGrads,
    ) -> Result<ModelParams, ModelError> {
        let mut grads = self.zeros_like();
        let mut grad_semantic: Option<Tensor2> = None;

        if let Some(g) = &seeds.student {
            grads.entity_classifier = tape.semantic.matmul_tn(g)?;
            grad_semantic = Some(g.matmul_nt(&self.entity_classifier)?);
        }
        if let Some(g) = &seeds.teacher {
            grads.teacher_classifier = tape.semantic.matmul_tn(g)?;
            let d = g.matmul_nt(&self.teacher_classifier)?;
            match &mut grad_semantic {
                Some(acc) => acc.add_assign(&d)?,
                None => grad_semantic = Some(d),
            }
        }
        if let (Some(g), Some(pt)) = (&seeds.predicate, tape.predicate) {
            grads.predicate_classifier = pt.predicate_feature.matmul_tn(g)?;
            let d = g.matmul_nt(&self.predicate_classifier)?;
            let d = pt.out_act.backward(&d)?;
            let (d, out) = self.predicate_out.backward(pt.out, &d)?;
            grads.predicate_out.weight = out.weight;
            grads.predicate_out.bias = out.bias;
            let d = pt.hidden_act.backward(&d)?;
            let (d, norm) = self.predicate_norm.backward(pt.norm, &d)?;
            grads.predicate_norm.gamma = norm.gamma;
            grads.predicate_norm.beta = norm.beta;
            let (d_joint, hidden) = self.predicate_hidden.backward(pt.hidden, &d)?;
            grads.predicate_hidden.weight = hidden.weight;
            grads.predicate_hidden.bias = hidden.bias;

            let ef = self.dims.entity_feature_width();
            let d_bbox = d_joint.slice_cols(2 * ef, self.dims.bbox_embed_width);
            let bbox = self.bbox_embedding.backward_params(pt.bbox, &d_bbox)?;
            grads.bbox_embedding.weight = bbox.weight;
            grads.bbox_embedding.bias = bbox.bias;

            let mut d_ent = Tensor2::zeros(tape.entities, ef);
            for (r, &(s, o)) in pt.pairs.iter().enumerate() {
                let row = d_joint.row(r);
                for (acc, v) in d_ent.row_mut(s).iter_mut().zip(&row[..ef]) {
                    *acc += v;
                }
                for (acc, v) in d_ent.row_mut(o).iter_mut().zip(&row[ef..2 * ef]) {
                    *acc += v;
                }
            }
            let aw = self.dims.appearance_width;
            let d_embedded = d_ent.slice_cols(aw, self.dims.semantic_width);
            let emb = self
                .semantic_embedding
                .backward_params(pt.embedding, &d_embedded)?;
            grads.semantic_embedding.weight = emb.weight;
            grads.semantic_embedding.bias = emb.bias;
            if let Some(app_tape) = tape.appearance_branch {
                let d_app = d_ent.slice_cols(0, aw);
                Self::branch_backward(&self.appearance, &mut grads.appearance, app_tape, &d_app)?;
            }
        }
        if let Some(g) = grad_semantic {
            Self::branch_backward(
                &self.semantic,
                &mut grads.semantic,
                tape.semantic_branch,
                &g,
            )?;
        }
        Ok(grads)
    }
}

fn add_vec(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
