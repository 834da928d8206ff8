use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::zipf::zipf_weights;
use super::{BBox, DatagenError, EntityInstance, RelationTriplet, Scene};
use crate::seed::rng_from_seed;

const MIN_PROTOTYPE_DISTANCE: f64 = 0.5;
const MAX_PROTOTYPE_RESAMPLES: usize = 1000;

/// Class counts and long-tail exponents of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub entity_classes: usize,
    pub predicate_classes: usize,
    pub entity_exponent: f64,
    pub predicate_exponent: f64,
}

impl ClassCatalog {
    /// 20 entity and 15 predicate classes.
    pub fn desk() -> Self {
        Self {
            entity_classes: 20,
            predicate_classes: 15,
            entity_exponent: 1.2,
            predicate_exponent: 1.8,
        }
    }

    /// 150 entity and 50 predicate classes with exponents fit to a 35×
    /// entity spread and a 12,000× predicate spread.
    pub fn full_scale() -> Self {
        Self {
            entity_classes: 150,
            predicate_classes: 50,
            entity_exponent: super::fit_zipf_exponent(150, 35.0).expect("fit"),
            predicate_exponent: super::fit_zipf_exponent(50, 12_000.0).expect("fit"),
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.entity_classes < 3 || self.predicate_classes < 3 {
            return Err(DatagenError::InvalidCatalog(format!(
                "need at least 3 entity and 3 predicate classes, got {} and {}",
                self.entity_classes, self.predicate_classes
            )));
        }
        if !(self.entity_exponent > 0.0 && self.predicate_exponent > 0.0) {
            return Err(DatagenError::InvalidCatalog(
                "zipf exponents must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything that shapes generated scenes besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub catalog: ClassCatalog,
    /// Width of the synthetic backbone feature `f_e`.
    pub backbone_width: usize,
    /// Expected norm of each class prototype.
    pub prototype_scale: f64,
    /// Per-dimension standard deviation of feature noise.
    pub feature_noise: f64,
    /// Weight of the predicate directions added to participating entities.
    pub appearance_strength: f64,
    /// Probability mass of the dominant predicate of each class pair.
    pub dominant_mass: f64,
    /// Fraction of the largest admissible spatial modulation, in `[0, 1]`.
    pub spatial_strength: f64,
    pub min_entities: usize,
    pub max_entities: usize,
    pub min_relations: usize,
    pub max_relations: usize,
    pub min_box_area: f64,
    pub max_box_area: f64,
}

impl GeneratorConfig {
    pub fn new(catalog: ClassCatalog) -> Self {
        Self {
            catalog,
            backbone_width: 32,
            prototype_scale: 1.0,
            feature_noise: 0.3,
            appearance_strength: 0.5,
            dominant_mass: 0.4,
            spatial_strength: 0.9,
            min_entities: 3,
            max_entities: 8,
            min_relations: 2,
            max_relations: 6,
            min_box_area: 0.01,
            max_box_area: 0.25,
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        self.catalog.validate()?;
        let bad = |msg: &str| Err(DatagenError::InvalidCatalog(msg.to_string()));
        if self.backbone_width == 0 {
            return bad("backbone width must be positive");
        }
        if self.min_entities < 2 || self.min_entities > self.max_entities {
            return bad("entity count range must start at 2 or more");
        }
        if self.min_relations < 1 || self.min_relations > self.max_relations {
            return bad("relation count range is empty");
        }
        if self.max_relations > self.min_entities * (self.min_entities - 1) {
            return bad("relation count can exceed the available ordered pairs");
        }
        if !(0.0..=1.0).contains(&self.dominant_mass)
            || !(0.0..=1.0).contains(&self.spatial_strength)
        {
            return bad("dominant mass and spatial strength must lie in [0, 1]");
        }
        if !(self.min_box_area > 0.0
            && self.min_box_area <= self.max_box_area
            && self.max_box_area <= 0.25)
        {
            return bad("box area range must lie in (0, 0.25]");
        }
        if self.feature_noise < 0.0 || self.appearance_strength < 0.0 || self.prototype_scale <= 0.0
        {
            return bad("noise and strengths must be nonnegative, prototype scale positive");
        }
        Ok(())
    }
}

/// Coarse relative layout of a subject box with respect to an object box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpatialBin {
    /// Subject center lies above the object center (smaller y).
    pub above: bool,
    /// Subject box has the larger area.
    pub larger: bool,
}

impl SpatialBin {
    pub const COUNT: usize = 4;

    pub fn of(subject: &BBox, object: &BBox) -> Self {
        Self {
            above: subject.center_y() < object.center_y(),
            larger: subject.area() > object.area(),
        }
    }

    pub fn index(self) -> usize {
        usize::from(self.above) * 2 + usize::from(self.larger)
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            above: i & 2 != 0,
            larger: i & 1 != 0,
        }
    }

    fn signs(self) -> (f64, f64) {
        (
            if self.above { 1.0 } else { -1.0 },
            if self.larger { 1.0 } else { -1.0 },
        )
    }
}

/// Per-predicate preference for subjects above / larger than objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialRule {
    pub vertical: f64,
    pub size: f64,
}

/// The hidden generative process behind a corpus.
///
/// The predicate of a relation with subject class `s`, object class `o` and
/// spatial bin `b` is drawn from
/// `d·[p = dominant(s, o)] + (1 − d)·q(p)·(1 + vertical_p·σ_b + size_p·ζ_b)`
/// where `σ_b, ζ_b ∈ {±1}` are the layout signs. Both signs flip when the two
/// boxes are swapped and boxes are i.i.d., so the modulation averages out and
/// the predicate marginal stays `d·M + (1 − d)·q`, which is matched to the
/// configured zipf prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthWorld {
    pub config: GeneratorConfig,
    pub entity_prior: Vec<f64>,
    pub predicate_prior: Vec<f64>,
    pub prototypes: Vec<Vec<f64>>,
    pub appearance_directions: Vec<Vec<f64>>,
    pub spatial_rules: Vec<SpatialRule>,
    /// Dominant predicate per ordered class pair, row-major `[s][o]`.
    pub dominant: Vec<usize>,
    /// Residual predicate distribution `q`.
    pub residual: Vec<f64>,
}

impl GroundTruthWorld {
    pub fn entity_classes(&self) -> usize {
        self.config.catalog.entity_classes
    }

    pub fn predicate_classes(&self) -> usize {
        self.config.catalog.predicate_classes
    }

    pub fn dominant_predicate(&self, subject_class: usize, object_class: usize) -> usize {
        self.dominant[subject_class * self.entity_classes() + object_class]
    }

    /// Conditional predicate distribution for one table cell.
    pub fn predicate_distribution(
        &self,
        subject_class: usize,
        object_class: usize,
        bin: SpatialBin,
    ) -> Vec<f64> {
        let d = self.config.dominant_mass;
        let (sv, sz) = bin.signs();
        let dom = self.dominant_predicate(subject_class, object_class);
        self.residual
            .iter()
            .zip(&self.spatial_rules)
            .enumerate()
            .map(|(p, (&q, rule))| {
                let base = (1.0 - d) * q * (1.0 + rule.vertical * sv + rule.size * sz);
                if p == dom {
                    base + d
                } else {
                    base
                }
            })
            .collect()
    }

    /// Full table indexed `[s][o][bin][p]`, flattened row-major.
    pub fn conditional_table(&self) -> Vec<f64> {
        let c = self.entity_classes();
        let mut out = Vec::with_capacity(c * c * SpatialBin::COUNT * self.predicate_classes());
        for s in 0..c {
            for o in 0..c {
                for b in 0..SpatialBin::COUNT {
                    out.extend(self.predicate_distribution(s, o, SpatialBin::from_index(b)));
                }
            }
        }
        out
    }

    /// Predicate marginal implied by the table under the entity prior.
    pub fn implied_predicate_marginal(&self) -> Vec<f64> {
        let c = self.entity_classes();
        let d = self.config.dominant_mass;
        let mut out: Vec<f64> = self.residual.iter().map(|q| (1.0 - d) * q).collect();
        for s in 0..c {
            for o in 0..c {
                out[self.dominant_predicate(s, o)] +=
                    d * self.entity_prior[s] * self.entity_prior[o];
            }
        }
        out
    }
}

fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Builds the hidden world for a catalog. Deterministic in `(config, seed)`.
pub fn build_world(config: &GeneratorConfig, seed: u64) -> Result<GroundTruthWorld, DatagenError> {
    config.validate()?;
    let cat = &config.catalog;
    let c = cat.entity_classes;
    let p = cat.predicate_classes;
    let width = config.backbone_width;
    let mut rng = rng_from_seed(seed);

    let entity_prior = zipf_weights(c, cat.entity_exponent)?;
    let predicate_prior = zipf_weights(p, cat.predicate_exponent)?;

    let proto_scale = config.prototype_scale / (width as f64).sqrt();
    let mut prototypes = None;
    for _ in 0..MAX_PROTOTYPE_RESAMPLES {
        let candidate: Vec<Vec<f64>> = (0..c)
            .map(|_| gaussian_vector(&mut rng, width, proto_scale))
            .collect();
        let separated = (0..c).all(|i| {
            (i + 1..c).all(|j| distance(&candidate[i], &candidate[j]) > MIN_PROTOTYPE_DISTANCE)
        });
        if separated {
            prototypes = Some(candidate);
            break;
        }
    }
    let prototypes = prototypes.ok_or(DatagenError::PrototypeSeparation {
        attempts: MAX_PROTOTYPE_RESAMPLES,
    })?;

    let appearance_directions: Vec<Vec<f64>> = (0..p)
        .map(|_| {
            let v = gaussian_vector(&mut rng, width, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    // Dominant predicates: walk class pairs from most to least probable and
    // hand each to the predicate with the largest unfilled prior mass. Rare
    // predicates end up owning rare class pairs.
    let mut pairs: Vec<(usize, usize, f64)> = (0..c)
        .flat_map(|s| (0..c).map(move |o| (s, o)))
        .map(|(s, o)| (s, o, entity_prior[s] * entity_prior[o]))
        .collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut dominant = vec![0usize; c * c];
    let mut owned = vec![0.0; p];
    for &(s, o, mass) in &pairs {
        let mut best = 0;
        for k in 1..p {
            if predicate_prior[k] - owned[k] > predicate_prior[best] - owned[best] {
                best = k;
            }
        }
        dominant[s * c + o] = best;
        owned[best] += mass;
    }

    let d = config.dominant_mass;
    let residual = if d < 1.0 {
        let raw: Vec<f64> = predicate_prior
            .iter()
            .zip(&owned)
            .map(|(z, m)| ((z - d * m) / (1.0 - d)).max(0.0))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|q| q / total).collect()
    } else {
        vec![1.0 / p as f64; p]
    };

    let signs: Vec<(f64, f64)> = (0..p)
        .map(|_| {
            let v = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (v, s)
        })
        .collect();
    let mean_v: f64 = residual.iter().zip(&signs).map(|(q, s)| q * s.0).sum();
    let mean_s: f64 = residual.iter().zip(&signs).map(|(q, s)| q * s.1).sum();
    let worst = signs
        .iter()
        .map(|(v, s)| (v - mean_v).abs() + (s - mean_s).abs())
        .fold(0.0, f64::max);
    let kappa = if worst > 0.0 {
        config.spatial_strength / worst
    } else {
        0.0
    };
    let spatial_rules = signs
        .iter()
        .map(|(v, s)| SpatialRule {
            vertical: kappa * (v - mean_v),
            size: kappa * (s - mean_s),
        })
        .collect();

    Ok(GroundTruthWorld {
        config: config.clone(),
        entity_prior,
        predicate_prior,
        prototypes,
        appearance_directions,
        spatial_rules,
        dominant,
        residual,
    })
}

fn sample_box<R: Rng + ?Sized>(rng: &mut R, cfg: &GeneratorConfig) -> BBox {
    let area = rng.random_range(cfg.min_box_area..=cfg.max_box_area);
    let aspect = rng.random_range(0.5f64.ln()..=2f64.ln()).exp();
    let w = (area * aspect).sqrt();
    let h = area / w;
    let x1 = rng.random_range(0.0..=(1.0 - w));
    let y1 = rng.random_range(0.0..=(1.0 - h));
    BBox([x1, y1, x1 + w, y1 + h])
}

/// Samples one scene. Deterministic in `(world, seed)`.
pub fn sample_scene(world: &GroundTruthWorld, seed: u64) -> Scene {
    let cfg = &world.config;
    let mut rng = rng_from_seed(seed);
    let entity_dist = WeightedIndex::new(&world.entity_prior).expect("valid prior");

    let n = rng.random_range(cfg.min_entities..=cfg.max_entities);
    let mut classes = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    for _ in 0..n {
        classes.push(entity_dist.sample(&mut rng));
        boxes.push(sample_box(&mut rng, cfg));
    }

    let pair_count = n * (n - 1);
    let r = rng
        .random_range(cfg.min_relations..=cfg.max_relations)
        .min(pair_count);
    let mut chosen = rand::seq::index::sample(&mut rng, pair_count, r).into_vec();
    chosen.sort_unstable();
    let mut relations = Vec::with_capacity(r);
    for code in chosen {
        let subject = code / (n - 1);
        let mut object = code % (n - 1);
        if object >= subject {
            object += 1;
        }
        let bin = SpatialBin::of(&boxes[subject], &boxes[object]);
        let dist = world.predicate_distribution(classes[subject], classes[object], bin);
        let predicate = WeightedIndex::new(&dist)
            .expect("valid conditional")
            .sample(&mut rng);
        relations.push(RelationTriplet {
            subject,
            object,
            predicate,
        });
    }

    let mut entities = Vec::with_capacity(n);
    for (slot, (&class, bbox)) in classes.iter().zip(boxes).enumerate() {
        let mut feature = world.prototypes[class].clone();
        for v in feature.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += cfg.feature_noise * z;
        }
        for rel in relations
            .iter()
            .filter(|rel| rel.subject == slot || rel.object == slot)
        {
            for (v, d) in feature
                .iter_mut()
                .zip(&world.appearance_directions[rel.predicate])
            {
                *v += cfg.appearance_strength * d;
            }
        }
        entities.push(EntityInstance {
            class,
            bbox,
            feature,
        });
    }

    Scene {
        entities,
        relations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(seed: u64) -> GroundTruthWorld {
        let mut cfg = GeneratorConfig::new(ClassCatalog {
            entity_classes: 5,
            predicate_classes: 4,
            entity_exponent: 1.2,
            predicate_exponent: 1.8,
        });
        cfg.backbone_width = 8;
        build_world(&cfg, seed).unwrap()
    }

    #[test]
    fn deterministic() {
        assert_eq!(small_world(7), small_world(7));
        assert_ne!(small_world(7), small_world(8));
    }

    #[test]
    fn top1_conditional_at_least_point_four() {
        let w = small_world(7);
        for s in 0..5 {
            for o in 0..5 {
                // marginal over layouts as well as every individual layout
                let mut marginal = [0.0; 4];
                for b in 0..SpatialBin::COUNT {
                    let dist = w.predicate_distribution(s, o, SpatialBin::from_index(b));
                    assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(dist.iter().all(|&x| x >= 0.0));
                    assert!(dist.iter().copied().fold(0.0, f64::max) >= 0.4);
                    for (m, x) in marginal.iter_mut().zip(&dist) {
                        *m += x / 4.0;
                    }
                }
                assert!(marginal.iter().copied().fold(0.0, f64::max) >= 0.4);
            }
        }
    }

    #[test]
    fn prototypes_separated() {
        let w = small_world(3);
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(distance(&w.prototypes[i], &w.prototypes[j]) > 0.5);
            }
        }
    }

    #[test]
    fn unreachable_separation_errors() {
        let mut cfg = GeneratorConfig::new(ClassCatalog::desk());
        cfg.prototype_scale = 0.05;
        assert!(matches!(
            build_world(&cfg, 1),
            Err(DatagenError::PrototypeSeparation { .. })
        ));
    }

    #[test]
    fn implied_marginal_matches_prior() {
        let w = build_world(&GeneratorConfig::new(ClassCatalog::desk()), 11).unwrap();
        let implied = w.implied_predicate_marginal();
        let tv: f64 = implied
            .iter()
            .zip(&w.predicate_prior)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn scenes_are_valid() {
        let w = small_world(5);
        for seed in 0..500 {
            sample_scene(&w, seed).validate(5, 4, 8).unwrap();
        }
    }
}
