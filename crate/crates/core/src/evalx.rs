//! Localization scoring and Shapley attribution over training components.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::{detect, Detection, PostProcConfig};
use crate::trainer::{predict, train, Component, ComponentSet, TrainConfig};
use crate::voldata::{distance, ClassCatalog, ParticleLabel, Tomogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceMode {
    /// A hit lies within the ground-truth particle's own radius.
    #[default]
    PerClassRadius,
    Fixed(f64),
}

impl FromStr for ToleranceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "radius" {
            return Ok(Self::PerClassRadius);
        }
        match s.parse::<f64>() {
            Ok(d) if d >= 0.0 && d.is_finite() => Ok(Self::Fixed(d)),
            _ => Err(Error::invalid("eval.tolerance", format!("'{s}' (expected radius or a distance)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub detection: usize,
    pub label: usize,
    pub distance: f64,
}

/// Indices refer to the slices passed to [`match_detections`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_labels: Vec<usize>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn false_positives(&self) -> usize {
        self.unmatched_detections.len()
    }

    pub fn false_negatives(&self) -> usize {
        self.unmatched_labels.len()
    }
}

/// Greedy one-to-one matching in ascending distance over same-class pairs
/// within tolerance; distance ties go to the lower detection, then label index.
pub fn match_detections(dets: &[Detection], labels: &[ParticleLabel], mode: ToleranceMode) -> MatchResult {
    let mut cand: Vec<MatchedPair> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, l) in labels.iter().enumerate() {
            if d.class_id != l.class_id {
                continue;
            }
            let dist = distance(d.center, l.center);
            let tol = match mode {
                ToleranceMode::PerClassRadius => l.radius_vox,
                ToleranceMode::Fixed(t) => t,
            };
            if dist <= tol {
                cand.push(MatchedPair {
                    detection: i,
                    label: j,
                    distance: dist,
                });
            }
        }
    }
    cand.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.detection.cmp(&b.detection))
            .then(a.label.cmp(&b.label))
    });
    let mut det_used = vec![false; dets.len()];
    let mut lab_used = vec![false; labels.len()];
    let mut pairs = Vec::new();
    for c in cand {
        if !det_used[c.detection] && !lab_used[c.label] {
            det_used[c.detection] = true;
            lab_used[c.label] = true;
            pairs.push(c);
        }
    }
    MatchResult {
        pairs,
        unmatched_detections: (0..dets.len()).filter(|&i| !det_used[i]).collect(),
        unmatched_labels: (0..labels.len()).filter(|&j| !lab_used[j]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn scores_from_counts(tp: usize, fp: usize, fn_: usize) -> Scores {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Scores {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
    }
}

/// Precision, recall and F1; empty denominators give 0.
pub fn f1_score(m: &MatchResult) -> Scores {
    scores_from_counts(m.true_positives(), m.false_positives(), m.false_negatives())
}

/// Overall scores followed by one row per class.
pub fn class_scores(
    dets: &[Detection],
    labels: &[ParticleLabel],
    catalog: &ClassCatalog,
    mode: ToleranceMode,
) -> (Scores, Vec<(u8, Scores)>) {
    let m = match_detections(dets, labels, mode);
    let per_class = catalog
        .entries()
        .iter()
        .map(|e| {
            let tp = m.pairs.iter().filter(|p| dets[p.detection].class_id == e.id).count();
            let fp = m.unmatched_detections.iter().filter(|&&i| dets[i].class_id == e.id).count();
            let fn_ = m.unmatched_labels.iter().filter(|&&j| labels[j].class_id == e.id).count();
            (e.id, scores_from_counts(tp, fp, fn_))
        })
        .collect();
    (f1_score(&m), per_class)
}

pub fn metrics_tsv(overall: &Scores, per_class: &[(u8, Scores)], catalog: &ClassCatalog) -> String {
    let mut s = String::from("class\ttp\tfp\tfn\tprecision\trecall\tf1\n");
    let mut row = |name: &str, c: &Scores| {
        writeln!(
            s,
            "{name}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            c.tp, c.fp, c.fn_, c.precision, c.recall, c.f1
        )
        .expect("string write");
    };
    for (id, c) in per_class {
        row(catalog.name(*id).unwrap_or("?"), c);
    }
    row("all", overall);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyRow {
    pub component: String,
    /// Weighted mean of `v(S)` over subsets without the component.
    pub weighted_baseline: f64,
    /// Weighted mean of `v(S ∪ {i})` over the same subsets.
    pub weighted_with: f64,
    pub marginal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub rows: Vec<ShapleyRow>,
    /// `v(S)` in subset bitmask order.
    pub subset_scores: Vec<(ComponentSet, f64)>,
    /// Weight by the size of the subset without the component.
    pub weights: Vec<f64>,
}

impl ShapleyReport {
    pub fn phi(&self, c: Component) -> f64 {
        self.rows
            .iter()
            .find(|r| r.component == c.name())
            .map(|r| r.marginal)
            .expect("one row per component")
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("component\tweighted_baseline\tweighted_with\tmarginal\n");
        for r in &self.rows {
            writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}", r.component, r.weighted_baseline, r.weighted_with, r.marginal)
                .expect("string write");
        }
        s
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Shapley values of the three components from all eight subset scores.
pub fn shapley_values(v: &BTreeMap<ComponentSet, f64>) -> Result<ShapleyReport> {
    let n = Component::ALL.len();
    let subsets: Vec<ComponentSet> = ComponentSet::all_subsets().collect();
    for s in &subsets {
        if !v.contains_key(s) {
            return Err(Error::invalid("scores", format!("missing score for subset {s}")));
        }
    }
    let weights: Vec<f64> = (0..n).map(|k| factorial(k) * factorial(n - k - 1) / factorial(n)).collect();
    let rows = Component::ALL
        .iter()
        .map(|&c| {
            let (mut base, mut with) = (0.0, 0.0);
            for s in subsets.iter().filter(|s| !s.contains(c)) {
                let w = weights[s.len()];
                base += w * v[s];
                with += w * v[&s.with(c)];
            }
            ShapleyRow {
                component: c.name().to_string(),
                weighted_baseline: base,
                weighted_with: with,
                marginal: with - base,
            }
        })
        .collect();
    Ok(ShapleyReport {
        rows,
        subset_scores: subsets.iter().map(|s| (*s, v[s])).collect(),
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub subset: ComponentSet,
    pub seeds: Vec<u64>,
    pub f1: Vec<f64>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub subsets: Vec<SubsetResult>,
    /// Present when all eight subsets were evaluated.
    pub shapley: Option<ShapleyReport>,
}

impl AblationResult {
    pub fn subsets_tsv(&self) -> String {
        let mut s = String::from("subset\tSSP\tVI\tCG\tmean_f1\tper_seed_f1\n");
        for r in &self.subsets {
            let flags = Component::ALL.map(|c| u8::from(r.subset.contains(c)));
            let per: Vec<String> = r.f1.iter().map(|f| format!("{f:.6}")).collect();
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.6}\t{}",
                r.subset,
                flags[0],
                flags[1],
                flags[2],
                r.mean_f1,
                per.join(",")
            )
            .expect("string write");
        }
        s
    }
}

/// Training data and held-out evaluation volumes for an ablation.
pub struct AblationData<'a> {
    pub tomogram: &'a Tomogram,
    pub labels: &'a [ParticleLabel],
    pub heldout: &'a [(Tomogram, Vec<ParticleLabel>)],
    pub catalog: &'a ClassCatalog,
}

/// Mean F1 of a trained model over held-out volumes.
pub fn evaluate_model(
    params: &crate::model::ModelParams,
    cfg: &TrainConfig,
    heldout: &[(Tomogram, Vec<ParticleLabel>)],
    catalog: &ClassCatalog,
    post: &PostProcConfig,
    tolerance: ToleranceMode,
) -> Result<f64> {
    let mut total = 0.0;
    for (tomo, gt) in heldout {
        let probs = predict(params, tomo, cfg.subvolume, cfg.stride)?;
        let dets = detect(&probs, catalog, post)?;
        total += f1_score(&match_detections(&dets, gt, tolerance)).f1;
    }
    Ok(total / heldout.len().max(1) as f64)
}

/// Trains one model per subset and seed, averages held-out F1 over seeds
/// and, when all eight subsets are present, attributes it with Shapley values.
pub fn ablation_run(
    base: &TrainConfig,
    data: &AblationData<'_>,
    subsets: &[ComponentSet],
    seeds: &[u64],
    post: &PostProcConfig,
    tolerance: ToleranceMode,
) -> Result<AblationResult> {
    if subsets.is_empty() || seeds.is_empty() || data.heldout.is_empty() {
        return Err(Error::invalid("ablate", "need at least one subset, seed and held-out volume"));
    }
    let mut results = Vec::with_capacity(subsets.len());
    for &subset in subsets {
        let mut f1 = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.components = subset;
            cfg.seed = seed;
            let (params, _) = train(&cfg, data.tomogram, data.labels, data.catalog)?;
            let score = evaluate_model(&params, &cfg, data.heldout, data.catalog, post, tolerance)?;
            log::info!("ablation {subset} seed {seed}: F1 {score:.4}");
            f1.push(score);
        }
        let mean_f1 = f1.iter().sum::<f64>() / f1.len() as f64;
        results.push(SubsetResult {
            subset,
            seeds: seeds.to_vec(),
            f1,
            mean_f1,
        });
    }
    let scores: BTreeMap<ComponentSet, f64> = results.iter().map(|r| (r.subset, r.mean_f1)).collect();
    let shapley = (scores.len() == 8).then(|| shapley_values(&scores)).transpose()?;
    Ok(AblationResult {
        subsets: results,
        shapley,
    })
}
