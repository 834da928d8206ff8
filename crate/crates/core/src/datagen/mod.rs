//! Synthetic long-tailed scene-graph corpora.
//!
//! A [`GroundTruthWorld`] stands in for the image distribution: entity
//! classes follow a zipf prior, each class has a prototype feature vector,
//! and predicates are drawn from a table conditioned on the two entity
//! classes and their coarse layout. Entities taking part in a relation have
//! that predicate's appearance direction mixed into their feature, so
//! appearance carries predicate evidence the class labels do not.

mod io;
mod world;
mod zipf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{
    generate_corpus, read_corpus, read_manifest, read_world, write_corpus, write_manifest,
    write_world, CorpusBundle, CorpusManifest, SplitSizes, SplitStats, CORPUS_FORMAT_VERSION,
    RARE_PREDICATE_THRESHOLD,
};
pub use world::{
    build_world, sample_scene, ClassCatalog, GeneratorConfig, GroundTruthWorld, SpatialBin,
    SpatialRule,
};
pub use zipf::{fit_zipf_exponent, zipf_weights};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("could not separate class prototypes after {attempts} resamples")]
    PrototypeSeparation { attempts: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Normalized `[x1, y1, x2, y2]` box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn width(&self) -> f64 {
        self.0[2] - self.0[0]
    }

    pub fn height(&self) -> f64 {
        self.0[3] - self.0[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center_y(&self) -> f64 {
        0.5 * (self.0[1] + self.0[3])
    }

    pub fn is_valid(&self) -> bool {
        let [x1, y1, x2, y2] = self.0;
        self.0.iter().all(|v| (0.0..=1.0).contains(v)) && x1 < x2 && y1 < y2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInstance {
    #[serde(rename = "c")]
    pub class: usize,
    #[serde(rename = "b")]
    pub bbox: BBox,
    #[serde(rename = "f")]
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationTriplet {
    #[serde(rename = "s")]
    pub subject: usize,
    #[serde(rename = "o")]
    pub object: usize,
    #[serde(rename = "p")]
    pub predicate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub entities: Vec<EntityInstance>,
    pub relations: Vec<RelationTriplet>,
}

impl Scene {
    /// Checks every structural invariant of a scene.
    pub fn validate(
        &self,
        entity_classes: usize,
        predicate_classes: usize,
        feature_width: usize,
    ) -> Result<(), DatagenError> {
        let bad = |msg: String| Err(DatagenError::InvalidScene(msg));
        if self.entities.len() < 2 {
            return bad(format!("{} entities, need at least 2", self.entities.len()));
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.class >= entity_classes {
                return bad(format!("entity {i} has class {}", e.class));
            }
            if !e.bbox.is_valid() {
                return bad(format!("entity {i} has invalid box {:?}", e.bbox.0));
            }
            if e.feature.len() != feature_width {
                return bad(format!(
                    "entity {i} feature width {} != {feature_width}",
                    e.feature.len()
                ));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (j, r) in self.relations.iter().enumerate() {
            if r.subject >= self.entities.len() || r.object >= self.entities.len() {
                return bad(format!("relation {j} references a missing entity"));
            }
            if r.subject == r.object {
                return bad(format!("relation {j} links entity {} to itself", r.subject));
            }
            if r.predicate >= predicate_classes {
                return bad(format!("relation {j} has predicate {}", r.predicate));
            }
            if !seen.insert((r.subject, r.object)) {
                return bad(format!(
                    "duplicate ordered pair ({}, {})",
                    r.subject, r.object
                ));
            }
        }
        Ok(())
    }
}
