use dt2::datagen::{
    build_world, generate_corpus, sample_scene, zipf_weights, ClassCatalog, CorpusBundle,
    GeneratorConfig, GroundTruthWorld, Scene, SpatialBin, SplitSizes,
};
use dt2::evaluation::{assign_buckets, Bucket};
use dt2::numerics::{argmax, softmax_temp};
use dt2::seed::derive_seed;
use dt2::trainer::{AdamConfig, AdamSlot};

fn desk_world(seed: u64) -> GroundTruthWorld {
    build_world(&GeneratorConfig::new(ClassCatalog::desk()), seed).unwrap()
}

fn sample(world: &GroundTruthWorld, seed: u64, count: u64) -> Vec<Scene> {
    (0..count)
        .map(|i| sample_scene(world, derive_seed(seed, i)))
        .collect()
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

fn frequencies(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

fn entity_counts(scenes: &[Scene], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for e in scenes.iter().flat_map(|s| &s.entities) {
        counts[e.class] += 1;
    }
    counts
}

fn predicate_counts(scenes: &[Scene], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for r in scenes.iter().flat_map(|s| &s.relations) {
        counts[r.predicate] += 1;
    }
    counts
}

fn ratio(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    max / min
}

#[test]
fn every_table_cell_is_learnable_above_chance() {
    let mut cfg = GeneratorConfig::new(ClassCatalog {
        entity_classes: 5,
        predicate_classes: 4,
        entity_exponent: 1.2,
        predicate_exponent: 1.8,
    });
    cfg.backbone_width = 8;
    for world in [build_world(&cfg, 7).unwrap(), desk_world(0)] {
        for row in world.conditional_table().chunks(world.predicate_classes()) {
            let top = row.iter().cloned().fold(0.0, f64::max);
            assert!(top >= 0.4, "top-1 conditional {top}");
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn entity_frequencies_match_prior() {
    let world = desk_world(1);
    let scenes = sample(&world, 2, 10_000);
    let freq = frequencies(&entity_counts(&scenes, world.entity_classes()));
    let tv = total_variation(&freq, &world.entity_prior);
    assert!(tv < 0.02, "entity TV {tv}");
}

#[test]
fn predicate_marginal_matches_zipf_prior() {
    let world = desk_world(3);
    let mut scenes = Vec::new();
    let mut seed = 0;
    while scenes
        .iter()
        .map(|s: &Scene| s.relations.len())
        .sum::<usize>()
        < 100_000
    {
        scenes.push(sample_scene(&world, derive_seed(4, seed)));
        seed += 1;
    }
    let freq = frequencies(&predicate_counts(&scenes, world.predicate_classes()));
    let zipf = zipf_weights(
        world.predicate_classes(),
        world.config.catalog.predicate_exponent,
    )
    .unwrap();
    let tv = total_variation(&freq, &zipf);
    assert!(tv < 0.02, "predicate TV {tv}");
}

#[test]
fn configured_imbalance_is_reproduced() {
    let world = desk_world(5);
    let scenes = sample(&world, 6, 30_000);
    let entities = entity_counts(&scenes, world.entity_classes());
    let predicates = predicate_counts(&scenes, world.predicate_classes());
    assert!(entities.iter().sum::<usize>() >= 50_000);
    assert!(predicates.iter().sum::<usize>() >= 50_000);
    for (counts, prior) in [
        (entities, &world.entity_prior),
        (predicates, &world.predicate_prior),
    ] {
        let target = ratio(prior);
        let got = ratio(&frequencies(&counts));
        assert!(
            (got / target - 1.0).abs() < 0.10,
            "ratio {got} vs target {target}"
        );
    }
}

fn desk_bundle(train: usize, test: usize) -> CorpusBundle {
    generate_corpus(
        &GeneratorConfig::new(ClassCatalog::desk()),
        0,
        SplitSizes {
            train,
            val: 10,
            test,
        },
    )
    .unwrap()
}

#[test]
fn bayes_oracle_beats_the_learnability_floor() {
    let bundle = desk_bundle(10, 500);
    let world = &bundle.world;
    let (mut hits, mut total) = (0, 0);
    for scene in &bundle.test {
        for r in &scene.relations {
            let (s, o) = (&scene.entities[r.subject], &scene.entities[r.object]);
            let dist =
                world.predicate_distribution(s.class, o.class, SpatialBin::of(&s.bbox, &o.bbox));
            hits += usize::from(argmax(&dist) == r.predicate);
            total += 1;
        }
    }
    let accuracy = hits as f64 / total as f64;
    assert!(accuracy >= 0.4, "oracle accuracy {accuracy}");
}

/// One relation as a table cell (subject class, object class, layout bin)
/// plus the concatenated entity features.
struct Example {
    cell: usize,
    features: Vec<f64>,
    label: usize,
}

fn examples(scenes: &[Scene], classes: usize) -> Vec<Example> {
    scenes
        .iter()
        .flat_map(|scene| {
            scene.relations.iter().map(|r| {
                let (s, o) = (&scene.entities[r.subject], &scene.entities[r.object]);
                let bin = SpatialBin::of(&s.bbox, &o.bbox).index();
                Example {
                    cell: (s.class * classes + o.class) * SpatialBin::COUNT + bin,
                    features: s.feature.iter().chain(&o.feature).copied().collect(),
                    label: r.predicate,
                }
            })
        })
        .collect()
}

/// Class-weighted softmax regression with a free logit vector per table
/// cell and, optionally, a linear term on the entity features.
struct Probe {
    cells: Vec<f64>,
    weights: Vec<f64>,
    use_features: bool,
    classes: usize,
    width: usize,
}

impl Probe {
    fn logits(&self, x: &Example) -> Vec<f64> {
        let mut z = self.cells[x.cell * self.classes..(x.cell + 1) * self.classes].to_vec();
        if self.use_features {
            for (p, zp) in z.iter_mut().enumerate() {
                let row = &self.weights[p * self.width..(p + 1) * self.width];
                *zp += row.iter().zip(&x.features).map(|(w, f)| w * f).sum::<f64>();
            }
        }
        z
    }

    fn fit(data: &[Example], cells: usize, classes: usize, use_features: bool) -> Self {
        let width = data[0].features.len();
        let mut probe = Probe {
            cells: vec![0.0; cells * classes],
            weights: vec![0.0; classes * width],
            use_features,
            classes,
            width,
        };
        let mut counts = vec![0usize; classes];
        for x in data {
            counts[x.label] += 1;
        }
        let class_weight: Vec<f64> = counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    0.0
                } else {
                    data.len() as f64 / (classes * n) as f64
                }
            })
            .collect();
        let adam = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let (mut cell_slot, mut weight_slot) = (
            AdamSlot::new(probe.cells.len()),
            AdamSlot::new(probe.weights.len()),
        );
        for _ in 0..150 {
            let mut g_cells = vec![0.0; probe.cells.len()];
            let mut g_weights = vec![0.0; probe.weights.len()];
            for x in data {
                let p = softmax_temp(&probe.logits(x), 1.0).unwrap();
                let scale = class_weight[x.label] / data.len() as f64;
                for (c, &pc) in p.iter().enumerate() {
                    let g = scale * (pc - if c == x.label { 1.0 } else { 0.0 });
                    g_cells[x.cell * classes + c] += g;
                    if use_features {
                        for (gw, f) in g_weights[c * width..(c + 1) * width]
                            .iter_mut()
                            .zip(&x.features)
                        {
                            *gw += g * f;
                        }
                    }
                }
            }
            cell_slot.update(&mut probe.cells, &g_cells, adam.lr, &adam);
            if use_features {
                weight_slot.update(&mut probe.weights, &g_weights, adam.lr, &adam);
            }
        }
        probe
    }

    /// Mean per-class accuracy over the given classes.
    fn class_accuracy(&self, data: &[Example], classes: &[usize]) -> f64 {
        let per_class: Vec<f64> = classes
            .iter()
            .filter_map(|&c| {
                let of_class: Vec<&Example> = data.iter().filter(|x| x.label == c).collect();
                (!of_class.is_empty()).then(|| {
                    of_class
                        .iter()
                        .filter(|x| argmax(&self.logits(x)) == c)
                        .count() as f64
                        / of_class.len() as f64
                })
            })
            .collect();
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

#[test]
fn appearance_directions_carry_tail_predicate_signal() {
    let bundle = desk_bundle(5000, 5000);
    let (c, p) = (
        bundle.world.entity_classes(),
        bundle.world.predicate_classes(),
    );
    let cells = c * c * SpatialBin::COUNT;
    let train = examples(&bundle.train, c);
    let test = examples(&bundle.test, c);
    let tail: Vec<usize> = assign_buckets(&predicate_counts(&bundle.train, p))
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == Bucket::Tail)
        .map(|(i, _)| i)
        .collect();
    let labels_only = Probe::fit(&train, cells, p, false).class_accuracy(&test, &tail);
    let with_features = Probe::fit(&train, cells, p, true).class_accuracy(&test, &tail);
    assert!(
        with_features - labels_only >= 0.05,
        "tail accuracy labels-only {labels_only:.3}, with features {with_features:.3}"
    );
}
