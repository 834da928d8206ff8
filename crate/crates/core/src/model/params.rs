use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::numerics::{fan_in_uniform_matrix, BatchNorm, Linear, Tensor2};
use crate::seed::{derive_seed, rng_from_seed};

/// Layer widths and class counts.
///
/// `appearance_width == 0` disables the appearance branch; the entity
/// feature is then the semantic embedding alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub backbone_width: usize,
    pub semantic_width: usize,
    pub appearance_width: usize,
    pub bbox_embed_width: usize,
    pub predicate_hidden_width: usize,
    pub predicate_feat_width: usize,
    pub entity_classes: usize,
    pub predicate_classes: usize,
}

impl ModelDims {
    pub fn desk(entity_classes: usize, predicate_classes: usize) -> Self {
        Self {
            backbone_width: 32,
            semantic_width: 16,
            appearance_width: 16,
            bbox_embed_width: 8,
            predicate_hidden_width: 64,
            predicate_feat_width: 32,
            entity_classes,
            predicate_classes,
        }
    }

    /// 128-wide semantic and appearance features, a 520-wide joint pair
    /// vector reduced to 256 and then 128.
    pub fn full_size(entity_classes: usize, predicate_classes: usize) -> Self {
        Self {
            backbone_width: 1024,
            semantic_width: 128,
            appearance_width: 128,
            bbox_embed_width: 8,
            predicate_hidden_width: 256,
            predicate_feat_width: 128,
            entity_classes,
            predicate_classes,
        }
    }

    pub fn without_appearance(mut self) -> Self {
        self.appearance_width = 0;
        self
    }

    pub fn has_appearance(&self) -> bool {
        self.appearance_width > 0
    }

    /// Width of `[appearance, semantic]` for one entity.
    pub fn entity_feature_width(&self) -> usize {
        self.appearance_width + self.semantic_width
    }

    /// Width of the subject–object–box joint vector.
    pub fn joint_width(&self) -> usize {
        2 * self.entity_feature_width() + self.bbox_embed_width
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("backbone_width", self.backbone_width),
            ("semantic_width", self.semantic_width),
            ("bbox_embed_width", self.bbox_embed_width),
            ("predicate_hidden_width", self.predicate_hidden_width),
            ("predicate_feat_width", self.predicate_feat_width),
            ("entity_classes", self.entity_classes),
            ("predicate_classes", self.predicate_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidDims(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Trainable parameter count (batch-norm running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let dense = |i: usize, o: usize| i * o + o;
        let branch = |w: usize| dense(self.backbone_width, w) + dense(w, w);
        let appearance = if self.has_appearance() {
            branch(self.appearance_width)
        } else {
            0
        };
        branch(self.semantic_width)
            + appearance
            + 2 * self.semantic_width * self.entity_classes
            + dense(self.entity_classes, self.semantic_width)
            + dense(8, self.bbox_embed_width)
            + dense(self.joint_width(), self.predicate_hidden_width)
            + 2 * self.predicate_hidden_width
            + dense(self.predicate_hidden_width, self.predicate_feat_width)
            + self.predicate_feat_width * self.predicate_classes
    }
}

/// Parameter groups, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Semantic branch.
    Semantic,
    /// Appearance branch.
    Appearance,
    /// Student entity classifier.
    EntityClassifier,
    /// Teacher entity classifier.
    TeacherClassifier,
    /// One-hot class embedding.
    SemanticEmbedding,
    /// Box embedding.
    BboxEmbedding,
    /// Predicate feature head (dense, batch norm, dense).
    PredicateHead,
    /// Predicate classifier.
    PredicateClassifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Semantic,
        ParamGroup::Appearance,
        ParamGroup::EntityClassifier,
        ParamGroup::TeacherClassifier,
        ParamGroup::SemanticEmbedding,
        ParamGroup::BboxEmbedding,
        ParamGroup::PredicateHead,
        ParamGroup::PredicateClassifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Semantic => "semantic",
            ParamGroup::Appearance => "appearance",
            ParamGroup::EntityClassifier => "entity_classifier",
            ParamGroup::TeacherClassifier => "teacher_classifier",
            ParamGroup::SemanticEmbedding => "semantic_embedding",
            ParamGroup::BboxEmbedding => "bbox_embedding",
            ParamGroup::PredicateHead => "predicate_head",
            ParamGroup::PredicateClassifier => "predicate_classifier",
        }
    }

    /// The feature extractors frozen during classifier re-balancing.
    pub fn is_feature_extractor(self) -> bool {
        matches!(
            self,
            ParamGroup::Semantic
                | ParamGroup::Appearance
                | ParamGroup::SemanticEmbedding
                | ParamGroup::BboxEmbedding
                | ParamGroup::PredicateHead
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub semantic: Vec<Linear>,
    /// Empty when the appearance branch is disabled.
    pub appearance: Vec<Linear>,
    pub entity_classifier: Tensor2,
    pub teacher_classifier: Tensor2,
    pub semantic_embedding: Linear,
    pub bbox_embedding: Linear,
    pub predicate_hidden: Linear,
    pub predicate_norm: BatchNorm,
    pub predicate_out: Linear,
    pub predicate_classifier: Tensor2,
}

/// Random initialization: fan-in uniform weights, zero biases, identity
/// batch norm, and the teacher classifier copied from the student.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams, ModelError> {
    dims.validate()?;
    let rng_for = |group: ParamGroup| rng_from_seed(derive_seed(seed, group as u64));
    let mut rng = rng_for(ParamGroup::Semantic);
    let semantic = vec![
        Linear::fan_in_uniform(dims.backbone_width, dims.semantic_width, &mut rng),
        Linear::fan_in_uniform(dims.semantic_width, dims.semantic_width, &mut rng),
    ];
    let appearance = if dims.has_appearance() {
        let mut rng = rng_for(ParamGroup::Appearance);
        vec![
            Linear::fan_in_uniform(dims.backbone_width, dims.appearance_width, &mut rng),
            Linear::fan_in_uniform(dims.appearance_width, dims.appearance_width, &mut rng),
        ]
    } else {
        Vec::new()
    };
    let entity_classifier = fan_in_uniform_matrix(
        dims.semantic_width,
        dims.entity_classes,
        &mut rng_for(ParamGroup::EntityClassifier),
    );
    let mut rng = rng_for(ParamGroup::PredicateHead);
    let predicate_hidden =
        Linear::fan_in_uniform(dims.joint_width(), dims.predicate_hidden_width, &mut rng);
    let predicate_out = Linear::fan_in_uniform(
        dims.predicate_hidden_width,
        dims.predicate_feat_width,
        &mut rng,
    );
    Ok(ModelParams {
        dims,
        semantic,
        appearance,
        teacher_classifier: entity_classifier.clone(),
        entity_classifier,
        semantic_embedding: Linear::fan_in_uniform(
            dims.entity_classes,
            dims.semantic_width,
            &mut rng_for(ParamGroup::SemanticEmbedding),
        ),
        bbox_embedding: Linear::fan_in_uniform(
            8,
            dims.bbox_embed_width,
            &mut rng_for(ParamGroup::BboxEmbedding),
        ),
        predicate_hidden,
        predicate_norm: BatchNorm::new(dims.predicate_hidden_width),
        predicate_out,
        predicate_classifier: fan_in_uniform_matrix(
            dims.predicate_feat_width,
            dims.predicate_classes,
            &mut rng_for(ParamGroup::PredicateClassifier),
        ),
    })
}

/// A named tensor inside [`ModelParams`].
pub struct TensorView<'a> {
    pub group: ParamGroup,
    pub name: String,
    pub trainable: bool,
    pub data: &'a [f64],
}

fn matrix_view<'a>(group: ParamGroup, name: &str, t: &'a Tensor2) -> TensorView<'a> {
    TensorView {
        group,
        name: name.to_string(),
        trainable: true,
        data: t.data(),
    }
}

fn linear_views<'a>(out: &mut Vec<TensorView<'a>>, group: ParamGroup, name: &str, l: &'a Linear) {
    out.push(TensorView {
        group,
        name: format!("{name}.weight"),
        trainable: true,
        data: l.weight.data(),
    });
    out.push(TensorView {
        group,
        name: format!("{name}.bias"),
        trainable: true,
        data: &l.bias,
    });
}

impl ModelParams {
    /// Same shapes, all values zero (gradient and optimizer-moment buffers).
    pub fn zeros_like(&self) -> Self {
        let zl = |l: &Linear| Linear::zeros(l.inputs(), l.outputs());
        let zt = |t: &Tensor2| Tensor2::zeros(t.rows(), t.cols());
        let w = self.dims.predicate_hidden_width;
        Self {
            dims: self.dims,
            semantic: self.semantic.iter().map(zl).collect(),
            appearance: self.appearance.iter().map(zl).collect(),
            entity_classifier: zt(&self.entity_classifier),
            teacher_classifier: zt(&self.teacher_classifier),
            semantic_embedding: zl(&self.semantic_embedding),
            bbox_embedding: zl(&self.bbox_embedding),
            predicate_hidden: zl(&self.predicate_hidden),
            predicate_norm: BatchNorm {
                gamma: vec![0.0; w],
                beta: vec![0.0; w],
                running_mean: vec![0.0; w],
                running_var: vec![0.0; w],
            },
            predicate_out: zl(&self.predicate_out),
            predicate_classifier: zt(&self.predicate_classifier),
        }
    }

    /// Every tensor in fixed order, including batch-norm running statistics.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.semantic.iter().enumerate() {
            linear_views(&mut out, ParamGroup::Semantic, &format!("semantic.{i}"), l);
        }
        for (i, l) in self.appearance.iter().enumerate() {
            linear_views(
                &mut out,
                ParamGroup::Appearance,
                &format!("appearance.{i}"),
                l,
            );
        }
        out.push(matrix_view(
            ParamGroup::EntityClassifier,
            "entity_classifier",
            &self.entity_classifier,
        ));
        out.push(matrix_view(
            ParamGroup::TeacherClassifier,
            "teacher_classifier",
            &self.teacher_classifier,
        ));
        linear_views(
            &mut out,
            ParamGroup::SemanticEmbedding,
            "semantic_embedding",
            &self.semantic_embedding,
        );
        linear_views(
            &mut out,
            ParamGroup::BboxEmbedding,
            "bbox_embedding",
            &self.bbox_embedding,
        );
        linear_views(
            &mut out,
            ParamGroup::PredicateHead,
            "predicate_hidden",
            &self.predicate_hidden,
        );
        let norm = &self.predicate_norm;
        for (name, data, trainable) in [
            ("predicate_norm.gamma", &norm.gamma, true),
            ("predicate_norm.beta", &norm.beta, true),
            ("predicate_norm.running_mean", &norm.running_mean, false),
            ("predicate_norm.running_var", &norm.running_var, false),
        ] {
            out.push(TensorView {
                group: ParamGroup::PredicateHead,
                name: name.to_string(),
                trainable,
                data,
            });
        }
        linear_views(
            &mut out,
            ParamGroup::PredicateHead,
            "predicate_out",
            &self.predicate_out,
        );
        out.push(matrix_view(
            ParamGroup::PredicateClassifier,
            "predicate_classifier",
            &self.predicate_classifier,
        ));
        out
    }

    /// Mutable views of every tensor, in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, bool, &mut [f64])> {
        let mut out: Vec<(ParamGroup, bool, &mut [f64])> = Vec::new();
        for l in &mut self.semantic {
            out.push((ParamGroup::Semantic, true, l.weight.data_mut()));
            out.push((ParamGroup::Semantic, true, &mut l.bias));
        }
        for l in &mut self.appearance {
            out.push((ParamGroup::Appearance, true, l.weight.data_mut()));
            out.push((ParamGroup::Appearance, true, &mut l.bias));
        }
        out.push((
            ParamGroup::EntityClassifier,
            true,
            self.entity_classifier.data_mut(),
        ));
        out.push((
            ParamGroup::TeacherClassifier,
            true,
            self.teacher_classifier.data_mut(),
        ));
        out.push((
            ParamGroup::SemanticEmbedding,
            true,
            self.semantic_embedding.weight.data_mut(),
        ));
        out.push((
            ParamGroup::SemanticEmbedding,
            true,
            &mut self.semantic_embedding.bias,
        ));
        out.push((
            ParamGroup::BboxEmbedding,
            true,
            self.bbox_embedding.weight.data_mut(),
        ));
        out.push((
            ParamGroup::BboxEmbedding,
            true,
            &mut self.bbox_embedding.bias,
        ));
        out.push((
            ParamGroup::PredicateHead,
            true,
            self.predicate_hidden.weight.data_mut(),
        ));
        out.push((
            ParamGroup::PredicateHead,
            true,
            &mut self.predicate_hidden.bias,
        ));
        let norm = &mut self.predicate_norm;
        out.push((ParamGroup::PredicateHead, true, &mut norm.gamma));
        out.push((ParamGroup::PredicateHead, true, &mut norm.beta));
        out.push((ParamGroup::PredicateHead, false, &mut norm.running_mean));
        out.push((ParamGroup::PredicateHead, false, &mut norm.running_var));
        out.push((
            ParamGroup::PredicateHead,
            true,
            self.predicate_out.weight.data_mut(),
        ));
        out.push((
            ParamGroup::PredicateHead,
            true,
            &mut self.predicate_out.bias,
        ));
        out.push((
            ParamGroup::PredicateClassifier,
            true,
            self.predicate_classifier.data_mut(),
        ));
        out
    }

    /// Number of trainable scalars actually allocated.
    pub fn parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.data.len())
            .sum()
    }

    /// SHA-256 over the little-endian bytes of every tensor in `group`.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for view in self.tensors().iter().filter(|t| t.group == group) {
            for v in view.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// L2 norm of the difference to `other` within one group.
    pub fn group_distance(&self, other: &ModelParams, group: ParamGroup) -> f64 {
        let a = self.tensors();
        let b = other.tensors();
        a.iter()
            .zip(&b)
            .filter(|(x, _)| x.group == group)
            .flat_map(|(x, y)| x.data.iter().zip(y.data))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}
