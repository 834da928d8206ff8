use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::world::{build_world, sample_scene, GeneratorConfig, GroundTruthWorld};
use super::{DatagenError, Scene};
use crate::seed::{derive_seed, stream};

pub const CORPUS_FORMAT_VERSION: &str = "1";
/// Predicate classes with fewer training instances are ignored by the
/// class-balanced samplers.
pub const RARE_PREDICATE_THRESHOLD: usize = 5;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WORLD_FILE: &str = "world.json";

/// Writes one scene per line.
pub fn write_corpus(scenes: &[Scene], path: &Path) -> Result<(), DatagenError> {
    let mut out = BufWriter::new(File::create(path)?);
    for scene in scenes {
        serde_json::to_writer(&mut out, scene)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON Lines corpus. Blank lines are skipped; a malformed line is
/// reported with its 1-based line number.
pub fn read_corpus(path: &Path) -> Result<Vec<Scene>, DatagenError> {
    let reader = BufReader::new(File::open(path)?);
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| DatagenError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 5000,
            val: 500,
            test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub scenes: usize,
    pub entities: usize,
    pub relations: usize,
    pub entity_counts: Vec<usize>,
    pub predicate_counts: Vec<usize>,
}

impl SplitStats {
    pub fn from_scenes(scenes: &[Scene], entity_classes: usize, predicate_classes: usize) -> Self {
        let mut entity_counts = vec![0; entity_classes];
        let mut predicate_counts = vec![0; predicate_classes];
        let mut entities = 0;
        let mut relations = 0;
        for scene in scenes {
            for e in &scene.entities {
                entity_counts[e.class] += 1;
                entities += 1;
            }
            for r in &scene.relations {
                predicate_counts[r.predicate] += 1;
                relations += 1;
            }
        }
        Self {
            scenes: scenes.len(),
            entities,
            relations,
            entity_counts,
            predicate_counts,
        }
    }
}

/// Side manifest describing a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: String,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub entity_classes: usize,
    pub predicate_classes: usize,
    pub train: SplitStats,
    pub val: SplitStats,
    pub test: SplitStats,
    pub rare_predicate_threshold: usize,
    /// `true` for predicate classes with fewer than the threshold of
    /// training instances.
    pub rare_predicates: Vec<bool>,
    /// Training predicate counts with rare classes zeroed out.
    pub filtered_predicate_counts: Vec<usize>,
}

impl CorpusManifest {
    pub fn build(
        generator: &GeneratorConfig,
        seed: u64,
        train: &[Scene],
        val: &[Scene],
        test: &[Scene],
    ) -> Self {
        let c = generator.catalog.entity_classes;
        let p = generator.catalog.predicate_classes;
        let train = SplitStats::from_scenes(train, c, p);
        let rare_predicates: Vec<bool> = train
            .predicate_counts
            .iter()
            .map(|&n| n < RARE_PREDICATE_THRESHOLD)
            .collect();
        let filtered_predicate_counts = train
            .predicate_counts
            .iter()
            .zip(&rare_predicates)
            .map(|(&n, &rare)| if rare { 0 } else { n })
            .collect();
        Self {
            format_version: CORPUS_FORMAT_VERSION.to_string(),
            seed,
            generator: generator.clone(),
            entity_classes: c,
            predicate_classes: p,
            train,
            val: SplitStats::from_scenes(val, c, p),
            test: SplitStats::from_scenes(test, c, p),
            rare_predicate_threshold: RARE_PREDICATE_THRESHOLD,
            rare_predicates,
            filtered_predicate_counts,
        }
    }
}

pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<(), DatagenError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest, DatagenError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_world(world: &GroundTruthWorld, path: &Path) -> Result<(), DatagenError> {
    let mut text = serde_json::to_string(world)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_world(path: &Path) -> Result<GroundTruthWorld, DatagenError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// A generated world with its three splits.
#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub world: GroundTruthWorld,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    pub manifest: CorpusManifest,
}

fn sample_split(world: &GroundTruthWorld, split_seed: u64, count: usize) -> Vec<Scene> {
    (0..count as u64)
        .map(|i| sample_scene(world, derive_seed(split_seed, i)))
        .collect()
}

/// Generates a world and its splits from one master seed.
///
/// The world uses `derive_seed(seed, 0)`, split `k` (train 1, val 2,
/// test 3) uses `derive_seed(seed, k)`, and scene `i` of a split uses
/// `derive_seed(split_seed, i)`.
pub fn generate_corpus(
    config: &GeneratorConfig,
    seed: u64,
    sizes: SplitSizes,
) -> Result<CorpusBundle, DatagenError> {
    let world = build_world(config, derive_seed(seed, stream::WORLD))?;
    let train = sample_split(&world, derive_seed(seed, stream::TRAIN_SPLIT), sizes.train);
    let val = sample_split(&world, derive_seed(seed, stream::VAL_SPLIT), sizes.val);
    let test = sample_split(&world, derive_seed(seed, stream::TEST_SPLIT), sizes.test);
    let manifest = CorpusManifest::build(config, seed, &train, &val, &test);
    Ok(CorpusBundle {
        world,
        train,
        val,
        test,
        manifest,
    })
}

impl CorpusBundle {
    pub fn write_dir(&self, dir: &Path) -> Result<(), DatagenError> {
        std::fs::create_dir_all(dir)?;
        write_corpus(&self.train, &dir.join(TRAIN_FILE))?;
        write_corpus(&self.val, &dir.join(VAL_FILE))?;
        write_corpus(&self.test, &dir.join(TEST_FILE))?;
        write_manifest(&self.manifest, &dir.join(MANIFEST_FILE))?;
        write_world(&self.world, &dir.join(WORLD_FILE))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, DatagenError> {
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != CORPUS_FORMAT_VERSION {
            return Err(DatagenError::InvalidCatalog(format!(
                "unsupported corpus format version {}",
                manifest.format_version
            )));
        }
        let world = read_world(&dir.join(WORLD_FILE))?;
        let bundle = Self {
            train: read_corpus(&dir.join(TRAIN_FILE))?,
            val: read_corpus(&dir.join(VAL_FILE))?,
            test: read_corpus(&dir.join(TEST_FILE))?,
            world,
            manifest,
        };
        let (c, p, w) = (
            bundle.manifest.entity_classes,
            bundle.manifest.predicate_classes,
            bundle.manifest.generator.backbone_width,
        );
        for split in [&bundle.train, &bundle.val, &bundle.test] {
            for scene in split {
                scene.validate(c, p, w)?;
            }
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::ClassCatalog;

    fn tiny_bundle() -> CorpusBundle {
        let mut cfg = GeneratorConfig::new(ClassCatalog::desk());
        cfg.backbone_width = 6;
        generate_corpus(
            &cfg,
            9,
            SplitSizes {
                train: 100,
                val: 5,
                test: 5,
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&bundle.train, &path).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), bundle.train);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn corrupt_line_is_named() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        write_corpus(&bundle.train[..5], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"entities\": [oops";
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = read_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn manifest_counts_sum() {
        let m = tiny_bundle().manifest;
        for split in [&m.train, &m.val, &m.test] {
            assert_eq!(split.entity_counts.iter().sum::<usize>(), split.entities);
            assert_eq!(
                split.predicate_counts.iter().sum::<usize>(),
                split.relations
            );
        }
        for (i, &rare) in m.rare_predicates.iter().enumerate() {
            assert_eq!(rare, m.train.predicate_counts[i] < RARE_PREDICATE_THRESHOLD);
        }
    }

    #[test]
    fn bundle_dir_round_trip() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        bundle.write_dir(dir.path()).unwrap();
        let back = CorpusBundle::read_dir(dir.path()).unwrap();
        assert_eq!(back.train, bundle.train);
        assert_eq!(back.world, bundle.world);
        assert_eq!(back.manifest, bundle.manifest);
    }
}
