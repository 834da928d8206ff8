//! Triplet ranking, recall and mean recall at K, and the head/middle/tail
//! breakdown by training frequency.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Scene;
use crate::model::{ForwardResult, ModelError, ModelParams, Task};
use crate::numerics::{argmax, Tensor2};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("the evaluation set holds no relations")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {message}")]
    Report { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which ordered pairs of a scene are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Candidates {
    /// Pairs carrying a ground-truth relation.
    #[default]
    Annotated,
    /// Every ordered pair of distinct entities.
    AllPairs,
}

pub fn candidate_pairs(scene: &Scene, candidates: Candidates) -> Vec<(usize, usize)> {
    match candidates {
        Candidates::Annotated => scene
            .relations
            .iter()
            .map(|r| (r.subject, r.object))
            .collect(),
        Candidates::AllPairs => {
            let n = scene.entities.len();
            (0..n)
                .flat_map(|s| (0..n).filter(move |&o| o != s).map(move |o| (s, o)))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    /// Position of the pair in the forward result.
    pub pair: usize,
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
    pub subject_class: usize,
    pub object_class: usize,
}

/// Anything that can produce eval-mode probabilities for a scene.
pub trait Scorer {
    fn score_scene(
        &self,
        scene: &Scene,
        task: Task,
        pairs: &[(usize, usize)],
    ) -> Result<ForwardResult, ModelError>;
}

impl Scorer for ModelParams {
    fn score_scene(
        &self,
        scene: &Scene,
        task: Task,
        pairs: &[(usize, usize)],
    ) -> Result<ForwardResult, ModelError> {
        self.forward_scene(scene, task, pairs)
    }
}

/// Puts all mass on the ground-truth entity classes and, for annotated
/// pairs, the ground-truth predicate. Unannotated pairs get a uniform
/// predicate distribution.
#[derive(Debug, Clone, Copy)]
pub struct OracleScorer {
    pub entity_classes: usize,
    pub predicate_classes: usize,
}

impl Scorer for OracleScorer {
    fn score_scene(
        &self,
        scene: &Scene,
        _task: Task,
        pairs: &[(usize, usize)],
    ) -> Result<ForwardResult, ModelError> {
        let mut entity_probs = Tensor2::zeros(scene.entities.len(), self.entity_classes);
        for (i, e) in scene.entities.iter().enumerate() {
            entity_probs.set(i, e.class, 1.0);
        }
        let mut predicate_probs = Tensor2::zeros(pairs.len(), self.predicate_classes);
        for (r, &(s, o)) in pairs.iter().enumerate() {
            match scene
                .relations
                .iter()
                .find(|t| t.subject == s && t.object == o)
            {
                Some(t) => predicate_probs.set(r, t.predicate, 1.0),
                None => predicate_probs
                    .row_mut(r)
                    .fill(1.0 / self.predicate_classes as f64),
            }
        }
        Ok(ForwardResult {
            teacher_probs: entity_probs.clone(),
            embedded_classes: scene.entities.iter().map(|e| e.class).collect(),
            entity_probs,
            pairs: pairs.to_vec(),
            predicate_probs,
        })
    }
}

fn ranking_order(a: &ScoredTriplet, b: &ScoredTriplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.pair.cmp(&b.pair))
        .then(a.predicate.cmp(&b.predicate))
}

/// Graph-constrained ranking: the best predicate of each pair (lowest id on
/// ties), sorted by score descending, then pair index, then predicate id.
///
/// PredCls scores are the predicate probability and carry ground-truth
/// classes; SGCls scores multiply in both entity argmax probabilities.
pub fn rank_triplets(
    scene: &Scene,
    forward: &ForwardResult,
    task: Task,
    k: usize,
) -> Result<Vec<ScoredTriplet>, EvalError> {
    if k < 1 {
        return Err(EvalError::InvalidParameter("K must be at least 1".into()));
    }
    let mut ranked: Vec<ScoredTriplet> = forward
        .pairs
        .iter()
        .enumerate()
        .map(|(i, &(s, o))| {
            let probs = forward.predicate_probs.row(i);
            let predicate = argmax(probs);
            let (subject_class, object_class, entity_score) = match task {
                Task::PredCls => (scene.entities[s].class, scene.entities[o].class, 1.0),
                Task::SgCls => {
                    let (es, eo) = (forward.entity_probs.row(s), forward.entity_probs.row(o));
                    let (cs, co) = (argmax(es), argmax(eo));
                    (cs, co, es[cs] * eo[co])
                }
            };
            ScoredTriplet {
                pair: i,
                subject: s,
                object: o,
                predicate,
                score: entity_score * probs[predicate],
                subject_class,
                object_class,
            }
        })
        .collect();
    ranked.sort_by(ranking_order);
    ranked.truncate(k);
    Ok(ranked)
}

/// Per-predicate-class matched and total ground-truth counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub matched: Vec<usize>,
    pub total: Vec<usize>,
}

impl ClassCounts {
    pub fn new(predicate_classes: usize) -> Self {
        Self {
            matched: vec![0; predicate_classes],
            total: vec![0; predicate_classes],
        }
    }
}

/// Adds one scene's ground truth to `counts`. A triplet matches when some
/// ranked triplet has its subject, object and predicate and, in SGCls, both
/// predicted classes are correct. Each ground-truth triplet counts once.
pub fn match_and_count(
    ranked: &[ScoredTriplet],
    scene: &Scene,
    task: Task,
    counts: &mut ClassCounts,
) {
    for gt in &scene.relations {
        counts.total[gt.predicate] += 1;
        let hit = ranked.iter().any(|t| {
            t.subject == gt.subject
                && t.object == gt.object
                && t.predicate == gt.predicate
                && (task == Task::PredCls
                    || (t.subject_class == scene.entities[gt.subject].class
                        && t.object_class == scene.entities[gt.object].class))
        });
        if hit {
            counts.matched[gt.predicate] += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Head,
    Middle,
    Tail,
}

impl Bucket {
    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Head => "head",
            Bucket::Middle => "middle",
            Bucket::Tail => "tail",
        }
    }
}

/// Head, middle and tail sizes: `⌊P/3⌋`, then half the rest rounded up.
pub fn bucket_sizes(classes: usize) -> (usize, usize, usize) {
    let head = classes / 3;
    let middle = (classes - head).div_ceil(2);
    (head, middle, classes - head - middle)
}

/// Class ids ordered by training frequency (descending, ties by id).
pub fn frequency_order(frequency: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frequency.len()).collect();
    order.sort_by(|&a, &b| frequency[b].cmp(&frequency[a]).then(a.cmp(&b)));
    order
}

/// Bucket of every class given training frequencies.
pub fn assign_buckets(frequency: &[usize]) -> Vec<Bucket> {
    let (head, middle, _) = bucket_sizes(frequency.len());
    let mut out = vec![Bucket::Tail; frequency.len()];
    for (rank, c) in frequency_order(frequency).into_iter().enumerate() {
        out[c] = if rank < head {
            Bucket::Head
        } else if rank < head + middle {
            Bucket::Middle
        } else {
            Bucket::Tail
        };
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub mean_recall: f64,
    pub matched: Vec<usize>,
    /// `None` for classes without test instances.
    pub class_recall: Vec<Option<f64>>,
    pub head_mean_recall: Option<f64>,
    pub middle_mean_recall: Option<f64>,
    pub tail_mean_recall: Option<f64>,
}

/// Recall and mean recall from counts. Classes without ground truth are
/// left out of every mean.
pub fn aggregate(
    counts: &ClassCounts,
    k: usize,
    buckets: &[Bucket],
) -> Result<KMetrics, EvalError> {
    let total: usize = counts.total.iter().sum();
    if total == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    let matched: usize = counts.matched.iter().sum();
    let class_recall: Vec<Option<f64>> = counts
        .matched
        .iter()
        .zip(&counts.total)
        .map(|(&m, &t)| (t > 0).then(|| m as f64 / t as f64))
        .collect();
    let bucket_mean = |b: Bucket| {
        mean(
            class_recall
                .iter()
                .zip(buckets)
                .filter(|(_, &cb)| cb == b)
                .filter_map(|(r, _)| *r),
        )
    };
    Ok(KMetrics {
        k,
        recall: matched as f64 / total as f64,
        mean_recall: mean(class_recall.iter().filter_map(|r| *r))
            .expect("some class has ground truth"),
        matched: counts.matched.clone(),
        head_mean_recall: bucket_mean(Bucket::Head),
        middle_mean_recall: bucket_mean(Bucket::Middle),
        tail_mean_recall: bucket_mean(Bucket::Tail),
        class_recall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub task: Task,
    pub ks: Vec<usize>,
    pub candidates: Candidates,
}

impl EvalConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            ks: vec![20, 50, 100],
            candidates: Candidates::Annotated,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(EvalError::InvalidParameter(
                "K list must be nonempty and positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub task: Task,
    pub candidates: Candidates,
    pub ks: Vec<usize>,
    pub train_frequency: Vec<usize>,
    pub frequency_rank: Vec<usize>,
    pub buckets: Vec<Bucket>,
    pub total: Vec<usize>,
    pub metrics: Vec<KMetrics>,
    pub entity_accuracy: f64,
    pub pair_accuracy: f64,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }
}

/// Evaluates a scorer over a split.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    scenes: &[Scene],
    config: &EvalConfig,
    train_frequency: &[usize],
    label: &str,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let classes = train_frequency.len();
    let mut counts: Vec<ClassCounts> = config
        .ks
        .iter()
        .map(|_| ClassCounts::new(classes))
        .collect();
    let max_k = *config.ks.iter().max().expect("validated");
    let (mut entities, mut entity_hits, mut pairs, mut pair_hits) =
        (0usize, 0usize, 0usize, 0usize);
    for scene in scenes {
        let candidate = candidate_pairs(scene, config.candidates);
        let forward = scorer.score_scene(scene, config.task, &candidate)?;
        let ranked = rank_triplets(scene, &forward, config.task, max_k)?;
        for (i, &k) in config.ks.iter().enumerate() {
            let cut = &ranked[..k.min(ranked.len())];
            match_and_count(cut, scene, config.task, &mut counts[i]);
        }
        let predicted: Vec<usize> = (0..scene.entities.len())
            .map(|r| argmax(forward.entity_probs.row(r)))
            .collect();
        for (e, &p) in scene.entities.iter().zip(&predicted) {
            entities += 1;
            entity_hits += usize::from(e.class == p);
        }
        for r in &scene.relations {
            pairs += 1;
            pair_hits += usize::from(
                predicted[r.subject] == scene.entities[r.subject].class
                    && predicted[r.object] == scene.entities[r.object].class,
            );
        }
    }
    let buckets = assign_buckets(train_frequency);
    let metrics = config
        .ks
        .iter()
        .zip(&counts)
        .map(|(&k, c)| aggregate(c, k, &buckets))
        .collect::<Result<Vec<_>, _>>()?;
    let mut frequency_rank = vec![0; classes];
    for (rank, c) in frequency_order(train_frequency).into_iter().enumerate() {
        frequency_rank[c] = rank;
    }
    Ok(EvalReport {
        label: label.to_string(),
        task: config.task,
        candidates: config.candidates,
        ks: config.ks.clone(),
        train_frequency: train_frequency.to_vec(),
        frequency_rank,
        buckets,
        total: counts[0].total.clone(),
        metrics,
        entity_accuracy: entity_hits as f64 / entities.max(1) as f64,
        pair_accuracy: pair_hits as f64 / pairs.max(1) as f64,
    })
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EvalError::Report {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn fmt_recall(r: Option<f64>) -> String {
    r.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// One row per predicate class: id, frequency rank, bucket, total, then
/// matched and recall for every K.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "class".to_string(),
        "frequency_rank".into(),
        "bucket".into(),
        "train_frequency".into(),
        "total".into(),
    ];
    for m in &report.metrics {
        header.push(format!("matched@{}", m.k));
        header.push(format!("recall@{}", m.k));
    }
    w.write_record(&header)?;
    for c in 0..report.total.len() {
        let mut row = vec![
            c.to_string(),
            report.frequency_rank[c].to_string(),
            report.buckets[c].as_str().to_string(),
            report.train_frequency[c].to_string(),
            report.total[c].to_string(),
        ];
        for m in &report.metrics {
            row.push(m.matched[c].to_string());
            row.push(fmt_recall(m.class_recall[c]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-class recall at the largest K in frequency order, for histograms.
pub fn write_plot_csv(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let last = report
        .metrics
        .iter()
        .max_by_key(|m| m.k)
        .expect("nonempty K list");
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "frequency_rank",
        "class",
        "bucket",
        format!("recall@{}", last.k).as_str(),
    ])?;
    for (rank, c) in frequency_order(&report.train_frequency)
        .into_iter()
        .enumerate()
    {
        w.write_record([
            rank.to_string(),
            c.to_string(),
            report.buckets[c].as_str().to_string(),
            fmt_recall(last.class_recall[c]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub task: Task,
    pub mean_recall: Vec<f64>,
    pub head: Option<f64>,
    pub middle: Option<f64>,
    pub tail: Option<f64>,
    pub entity_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub ks: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
}

/// Merges reports with identical K lists, sorted by mean recall at the
/// largest K (descending, ties by label).
pub fn compare_reports(reports: &[(String, EvalReport)]) -> Result<ComparisonTable, EvalError> {
    let Some((_, first)) = reports.first() else {
        return Err(EvalError::InvalidParameter("no reports to compare".into()));
    };
    let ks = first.ks.clone();
    let mut rows = Vec::new();
    for (path, r) in reports {
        if r.ks != ks {
            return Err(EvalError::Report {
                path: path.clone(),
                message: format!("K list {:?} differs from {:?}", r.ks, ks),
            });
        }
        let last = r.metrics.last().expect("nonempty K list");
        rows.push(ComparisonRow {
            label: r.label.clone(),
            task: r.task,
            mean_recall: r.metrics.iter().map(|m| m.mean_recall).collect(),
            head: last.head_mean_recall,
            middle: last.middle_mean_recall,
            tail: last.tail_mean_recall,
            entity_accuracy: r.entity_accuracy,
        });
    }
    rows.sort_by(|a, b| {
        b.mean_recall
            .last()
            .unwrap()
            .total_cmp(a.mean_recall.last().unwrap())
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(ComparisonTable { ks, rows })
}

impl ComparisonTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| strategy | task |");
        for k in &self.ks {
            out.push_str(&format!(" mR@{k} |"));
        }
        out.push_str(" head | middle | tail | entity acc |\n|---|---|");
        out.push_str(&"---|".repeat(self.ks.len() + 4));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("| {} | {} |", row.label, row.task));
            for v in &row.mean_recall {
                out.push_str(&format!(" {:.4} |", v));
            }
            for v in [row.head, row.middle, row.tail] {
                out.push_str(&format!(
                    " {} |",
                    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
                ));
            }
            out.push_str(&format!(" {:.4} |\n", row.entity_accuracy));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["strategy".to_string(), "task".into()];
        header.extend(self.ks.iter().map(|k| format!("mR@{k}")));
        header.extend(["head", "middle", "tail", "entity_accuracy"].map(String::from));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.label.clone(), row.task.to_string()];
            rec.extend(row.mean_recall.iter().map(|v| format!("{v:.6}")));
            rec.extend([row.head, row.middle, row.tail].map(fmt_recall));
            rec.push(format!("{:.6}", row.entity_accuracy));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
