//! Epoch plans: standard random sampling over scenes, class-balanced sampling
//! over entity or predicate instances, and the alternating pair of balanced
//! plans used by classifier re-balancing.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Scene, RARE_PREDICATE_THRESHOLD};
use crate::seed::{derive_seed, rng_from_seed, stream};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("cannot plan an epoch over an empty corpus")]
    EmptyCorpus,
    #[error("no eligible {0} classes")]
    NoEligibleClasses(Axis),
    #[error("invalid sampling configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Entity,
    Predicate,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Entity => "entity",
            Axis::Predicate => "predicate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Entity(usize),
    Relation(usize),
}

/// One entity or relation slot of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceIndex {
    pub scene: usize,
    pub kind: InstanceKind,
}

impl InstanceIndex {
    pub fn entity(scene: usize, slot: usize) -> Self {
        Self {
            scene,
            kind: InstanceKind::Entity(slot),
        }
    }

    pub fn relation(scene: usize, slot: usize) -> Self {
        Self {
            scene,
            kind: InstanceKind::Relation(slot),
        }
    }

    pub fn is_valid(&self, scenes: &[Scene]) -> bool {
        scenes.get(self.scene).is_some_and(|s| match self.kind {
            InstanceKind::Entity(i) => i < s.entities.len(),
            InstanceKind::Relation(i) => i < s.relations.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    Srs,
    EntityCbs,
    PredicateCbs,
}

impl PlanKind {
    fn balanced(axis: Axis) -> Self {
        match axis {
            Axis::Entity => PlanKind::EntityCbs,
            Axis::Predicate => PlanKind::PredicateCbs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub kind: PlanKind,
    pub seed: u64,
    pub batches: Vec<Vec<InstanceIndex>>,
}

impl EpochPlan {
    pub fn instance_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Instances grouped by class along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndexMap {
    pub axis: Axis,
    pub instances: Vec<Vec<InstanceIndex>>,
    pub eligible: Vec<bool>,
}

impl ClassIndexMap {
    /// Predicate classes need at least [`RARE_PREDICATE_THRESHOLD`] instances
    /// to be eligible; entity classes need one.
    pub fn build(scenes: &[Scene], axis: Axis, classes: usize) -> Self {
        let mut instances = vec![Vec::new(); classes];
        for (si, scene) in scenes.iter().enumerate() {
            match axis {
                Axis::Entity => {
                    for (slot, e) in scene.entities.iter().enumerate() {
                        instances[e.class].push(InstanceIndex::entity(si, slot));
                    }
                }
                Axis::Predicate => {
                    for (slot, r) in scene.relations.iter().enumerate() {
                        instances[r.predicate].push(InstanceIndex::relation(si, slot));
                    }
                }
            }
        }
        let threshold = match axis {
            Axis::Entity => 1,
            Axis::Predicate => RARE_PREDICATE_THRESHOLD,
        };
        let eligible = instances.iter().map(|v| v.len() >= threshold).collect();
        Self {
            axis,
            instances,
            eligible,
        }
    }

    pub fn eligible_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.eligible
            .iter()
            .enumerate()
            .filter(|(_, &e)| e)
            .map(|(c, _)| c)
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible.iter().filter(|&&e| e).count()
    }

    pub fn total_instances(&self) -> usize {
        self.instances.iter().map(Vec::len).sum()
    }

    /// Batches needed for one balanced pass to draw as many instances as
    /// the axis holds.
    pub fn natural_batches(&self, per_class: usize) -> usize {
        let batch = per_class * self.eligible_count();
        if batch == 0 {
            0
        } else {
            self.total_instances().div_ceil(batch).max(1)
        }
    }
}

/// A uniform permutation of scenes chunked into batches of `batch_size`
/// scenes; each scene contributes all its entities, then all its relations.
pub fn plan_srs(
    scenes: &[Scene],
    batch_size: usize,
    seed: u64,
) -> Result<EpochPlan, SamplingError> {
    if scenes.is_empty() {
        return Err(SamplingError::EmptyCorpus);
    }
    if batch_size == 0 {
        return Err(SamplingError::InvalidConfig(
            "batch size must be positive".into(),
        ));
    }
    let order = scene_permutation(scenes.len(), seed);
    let batches = order
        .chunks(batch_size)
        .map(|chunk| {
            chunk
                .iter()
                .flat_map(|&si| {
                    let s = &scenes[si];
                    (0..s.entities.len())
                        .map(move |e| InstanceIndex::entity(si, e))
                        .chain((0..s.relations.len()).map(move |r| InstanceIndex::relation(si, r)))
                })
                .collect()
        })
        .collect();
    Ok(EpochPlan {
        kind: PlanKind::Srs,
        seed,
        batches,
    })
}

/// The scene order used by [`plan_srs`].
pub fn scene_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    order
}

/// Class-balanced plan: every batch holds exactly `per_class` instances of
/// each eligible class (ascending class order), drawn uniformly with
/// replacement from the class pool.
pub fn plan_cbs(
    map: &ClassIndexMap,
    per_class: usize,
    batches: usize,
    seed: u64,
) -> Result<EpochPlan, SamplingError> {
    if per_class == 0 {
        return Err(SamplingError::InvalidConfig(
            "per_class must be positive".into(),
        ));
    }
    let classes: Vec<usize> = map.eligible_classes().collect();
    if classes.is_empty() {
        return Err(SamplingError::NoEligibleClasses(map.axis));
    }
    let mut rng = rng_from_seed(seed);
    let batches = (0..batches)
        .map(|_| {
            let mut batch = Vec::with_capacity(per_class * classes.len());
            for &c in &classes {
                let pool = &map.instances[c];
                for _ in 0..per_class {
                    batch.push(pool[rng.random_range(0..pool.len())]);
                }
            }
            batch
        })
        .collect();
    Ok(EpochPlan {
        kind: PlanKind::balanced(map.axis),
        seed,
        batches,
    })
}

/// Quotas and batch counts for the alternating plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcbsConfig {
    pub predicate_per_class: usize,
    pub entity_per_class: usize,
    /// Batches per P-step; `None` means one natural balanced pass.
    pub predicate_batches: Option<usize>,
    /// Batches per E-step; `None` means one natural balanced pass.
    pub entity_batches: Option<usize>,
}

impl Default for AcbsConfig {
    fn default() -> Self {
        Self {
            predicate_per_class: 5,
            entity_per_class: 2,
            predicate_batches: None,
            entity_batches: None,
        }
    }
}

/// Seed of the predicate- or entity-balanced plan of one alternation.
pub fn alternation_seed(seed: u64, alternation: usize, axis: Axis) -> u64 {
    let base = derive_seed(seed, alternation as u64);
    match axis {
        Axis::Predicate => derive_seed(base, stream::PREDICATE_PLAN),
        Axis::Entity => derive_seed(base, stream::ENTITY_PLAN),
    }
}

/// Predicate-balanced and entity-balanced plans for one alternation.
pub fn plan_acbs(
    predicates: &ClassIndexMap,
    entities: &ClassIndexMap,
    config: &AcbsConfig,
    alternation: usize,
    seed: u64,
) -> Result<(EpochPlan, EpochPlan), SamplingError> {
    let pb = config
        .predicate_batches
        .unwrap_or_else(|| predicates.natural_batches(config.predicate_per_class));
    let eb = config
        .entity_batches
        .unwrap_or_else(|| entities.natural_batches(config.entity_per_class));
    let p = plan_cbs(
        predicates,
        config.predicate_per_class,
        pb,
        alternation_seed(seed, alternation, Axis::Predicate),
    )?;
    let e = plan_cbs(
        entities,
        config.entity_per_class,
        eb,
        alternation_seed(seed, alternation, Axis::Entity),
    )?;
    Ok((p, e))
}
