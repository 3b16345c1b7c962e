//! Grounding and diagnosis evaluation.
//!
//! Grounding: greedy one-to-one IoU matching, instance-level F1 over the
//! lesion instances of positive images and image-level accuracy over all
//! images, at several IoU thresholds. A match needs IoU ≥ τ and the same
//! category. Diagnosis: overall accuracy over all classes, "no lesion"
//! included.
//!
//! Both scoring modes reduce to one prediction per image: the agent's single
//! box, or the detector's top-ranked detection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Scene, EXPORT_CANVAS};
use crate::geometry::{iou, BBox};
use crate::label::Category;
use crate::reward::GroundedOutput;
use crate::toolsim::{detection_order, Detection};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

/// Slack allowed when checking COCO boxes against image bounds, in pixels.
const BOUNDS_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("malformed JSON{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Json { line: Option<usize>, message: String },
    #[error("image {image_id}: missing or invalid width/height")]
    MissingDims { image_id: u64 },
    #[error("image {image_id}: box {bbox:?} lies outside the {width}x{height} image")]
    OutOfBounds {
        image_id: u64,
        bbox: [f64; 4],
        width: f64,
        height: f64,
    },
    #[error("image {image_id}: degenerate box {bbox:?}")]
    DegenerateBox { image_id: u64, bbox: [f64; 4] },
    #[error("unknown category id {0}")]
    UnknownCategory(i64),
    #[error("unknown image id {0}")]
    UnknownImage(u64),
    #[error("duplicate image id {0}")]
    DuplicateImage(u64),
    #[error("line {line}: {message}")]
    Prediction { line: usize, message: String },
    #[error("image {image_id}: positive image carries several categories")]
    MultiCategory { image_id: u64 },
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
}

fn json_err(e: serde_json::Error) -> EvalError {
    EvalError::Json {
        line: Some(e.line()),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BBox,
    pub category: Category,
}

/// Ground truth: per image, zero or more lesion instances.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    pub num_categories: usize,
    pub images: BTreeMap<u64, Vec<Instance>>,
}

impl GroundTruthSet {
    /// Image-level class; a positive image must carry a single category.
    pub fn image_class(&self, image_id: u64) -> Result<Category, EvalError> {
        let inst = self
            .images
            .get(&image_id)
            .ok_or(EvalError::UnknownImage(image_id))?;
        let cats: BTreeSet<Category> = inst.iter().map(|i| i.category).collect();
        match cats.len() {
            0 => Ok(Category::NEGATIVE),
            1 => Ok(*cats.iter().next().expect("one element")),
            _ => Err(EvalError::MultiCategory { image_id }),
        }
    }

    pub fn from_scenes(scenes: &[Scene]) -> Self {
        let num_categories = scenes.iter().map(|s| s.num_categories as usize).max().unwrap_or(0);
        let images = scenes
            .iter()
            .map(|s| {
                let inst = s
                    .gt
                    .iter()
                    .map(|(bbox, category)| Instance {
                        bbox: *bbox,
                        category: *category,
                    })
                    .collect();
                (s.image_id, inst)
            })
            .collect();
        Self {
            num_categories,
            images,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One box (or "no lesion") per image.
    Agent,
    /// Ranked detection list per image; the top-ranked entry is scored.
    Detector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImagePrediction {
    Agent(GroundedOutput),
    Detector(Vec<Detection>),
}

impl ImagePrediction {
    /// The single scored prediction, `None` meaning "no lesion".
    pub fn scored(&self) -> Option<Instance> {
        match self {
            ImagePrediction::Agent(out) => out.bbox.map(|bbox| Instance {
                bbox,
                category: out.category,
            }),
            ImagePrediction::Detector(dets) => dets
                .iter()
                .min_by(|a, b| detection_order(a, b))
                .map(|d| Instance {
                    bbox: d.bbox,
                    category: d.label,
                }),
        }
    }

    pub fn class(&self) -> Category {
        self.scored().map_or(Category::NEGATIVE, |i| i.category)
    }
}

/// Predictions keyed by image id. Images without an entry count as "no
/// lesion".
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub images: BTreeMap<u64, ImagePrediction>,
}

impl PredictionSet {
    fn check_against(&self, gt: &GroundTruthSet) -> Result<(), EvalError> {
        match self.images.keys().find(|id| !gt.images.contains_key(id)) {
            Some(id) => Err(EvalError::UnknownImage(*id)),
            None => Ok(()),
        }
    }

    fn scored(&self, image_id: u64) -> Option<Instance> {
        self.images.get(&image_id).and_then(ImagePrediction::scored)
    }

    fn class(&self, image_id: u64) -> Category {
        self.images
            .get(&image_id)
            .map_or(Category::NEGATIVE, ImagePrediction::class)
    }
}

/// Greedy one-to-one matching. Candidate pairs share a category and have
/// IoU ≥ τ; they are taken in order of descending IoU, ties going to the
/// lower ground-truth index and then the lower prediction index. Returns
/// `(gt_index, pred_index)` pairs in the order taken.
pub fn match_instances(gt: &[Instance], preds: &[Instance], tau: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            if g.category != p.category {
                continue;
            }
            let v = iou(&g.bbox, &p.bbox);
            if v >= tau {
                pairs.push((v, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut out = Vec::new();
    for (_, gi, pi) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            out.push((gi, pi));
        }
    }
    out
}

/// `2PR/(P+R)`, 0 when undefined.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub tau: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub instance_f1: f64,
    pub images_correct: usize,
    pub images: usize,
    pub image_accuracy: f64,
}

/// Instance counts pool over positive images; predictions on negative
/// images only affect image accuracy.
pub fn grounding_metrics(
    gt: &GroundTruthSet,
    pred: &PredictionSet,
    thresholds: &[f64],
) -> Result<Vec<ThresholdMetrics>, EvalError> {
    pred.check_against(gt)?;
    let mut out = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(EvalError::Threshold(tau));
        }
        let (mut tp, mut fp, mut fn_, mut correct) = (0, 0, 0, 0);
        for (&image_id, instances) in &gt.images {
            let p: Vec<Instance> = pred.scored(image_id).into_iter().collect();
            if instances.is_empty() {
                if p.is_empty() {
                    correct += 1;
                }
                continue;
            }
            let m = match_instances(instances, &p, tau).len();
            tp += m;
            fp += p.len() - m;
            fn_ += instances.len() - m;
            if m > 0 {
                correct += 1;
            }
        }
        out.push(ThresholdMetrics {
            tau,
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            instance_f1: f1_score(tp, fp, fn_),
            images_correct: correct,
            images: gt.images.len(),
            image_accuracy: ratio(correct, gt.images.len()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisMetrics {
    pub overall_accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[truth][predicted]`, classes `0..=K`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn diagnosis_accuracy(gt: &GroundTruthSet, pred: &PredictionSet) -> Result<DiagnosisMetrics, EvalError> {
    pred.check_against(gt)?;
    let classes = gt.num_categories + 1;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0;
    for &image_id in gt.images.keys() {
        let truth = gt.image_class(image_id)?;
        let guess = pred.class(image_id);
        if guess.index() >= classes {
            return Err(EvalError::UnknownCategory(i64::from(guess.0)));
        }
        confusion[truth.index()][guess.index()] += 1;
        if truth == guess {
            correct += 1;
        }
    }
    let total = gt.images.len();
    Ok(DiagnosisMetrics {
        overall_accuracy: ratio(correct, total),
        correct,
        total,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub grounding: Vec<ThresholdMetrics>,
    pub diagnosis: DiagnosisMetrics,
}

pub fn evaluate(
    gt: &GroundTruthSet,
    pred: &PredictionSet,
    mode: Mode,
    thresholds: &[f64],
) -> Result<MetricsReport, EvalError> {
    Ok(MetricsReport {
        mode,
        grounding: grounding_metrics(gt, pred, thresholds)?,
        diagnosis: diagnosis_accuracy(gt, pred)?,
    })
}

impl MetricsReport {
    /// Long-format CSV: `metric,threshold,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,threshold,value\n");
        for t in &self.grounding {
            for (name, v) in [
                ("tp", t.tp as f64),
                ("fp", t.fp as f64),
                ("fn", t.fn_ as f64),
                ("precision", t.precision),
                ("recall", t.recall),
                ("instance_f1", t.instance_f1),
                ("image_accuracy", t.image_accuracy),
            ] {
                let _ = writeln!(s, "{name},{},{v}", t.tau);
            }
        }
        let d = &self.diagnosis;
        let _ = writeln!(s, "diagnosis_accuracy,,{}", d.overall_accuracy);
        let _ = writeln!(s, "diagnosis_correct,,{}", d.correct);
        let _ = writeln!(s, "diagnosis_total,,{}", d.total);
        for (t, row) in d.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                let _ = writeln!(s, "confusion_{t}_{p},,{n}");
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {:?}", self.mode);
        let _ = writeln!(
            s,
            "{:>6}  {:>5}  {:>5}  {:>5}  {:>9}  {:>7}  {:>11}  {:>9}",
            "tau", "tp", "fp", "fn", "precision", "recall", "instance_f1", "image_acc"
        );
        for t in &self.grounding {
            let _ = writeln!(
                s,
                "{:>6.2}  {:>5}  {:>5}  {:>5}  {:>9.4}  {:>7.4}  {:>11.4}  {:>9.4}",
                t.tau, t.tp, t.fp, t.fn_, t.precision, t.recall, t.instance_f1, t.image_accuracy
            );
        }
        let d = &self.diagnosis;
        let _ = writeln!(
            s,
            "diagnosis accuracy: {:.4} ({}/{})",
            d.overall_accuracy, d.correct, d.total
        );
        let _ = writeln!(s, "confusion (rows = truth, cols = predicted):");
        for row in &d.confusion {
            let cells: Vec<String> = row.iter().map(|n| format!("{n:>5}")).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }
}

// COCO subset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default)]
    pub height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: i64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// COCO-results entry for detector-mode predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: i64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Agent-mode prediction line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub image_id: u64,
    pub bbox: Option<[f64; 4]>,
    pub label: u32,
}

/// Image dimensions and the contiguous category mapping of an ingested
/// COCO file, needed to read detector results in the same frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CocoFrame {
    pub dims: BTreeMap<u64, (f64, f64)>,
    /// COCO category id to contiguous id `1..=K`.
    pub category_map: BTreeMap<i64, Category>,
}

impl CocoFrame {
    fn category(&self, id: i64) -> Result<Category, EvalError> {
        self.category_map
            .get(&id)
            .copied()
            .ok_or(EvalError::UnknownCategory(id))
    }

    /// Absolute `[x, y, w, h]` to normalized corners.
    fn normalize(&self, image_id: u64, xywh: [f64; 4]) -> Result<BBox, EvalError> {
        let &(w, h) = self
            .dims
            .get(&image_id)
            .ok_or(EvalError::UnknownImage(image_id))?;
        let [x, y, bw, bh] = xywh;
        if !xywh.iter().all(|v| v.is_finite()) || bw <= 0.0 || bh <= 0.0 {
            return Err(EvalError::DegenerateBox { image_id, bbox: xywh });
        }
        if x < -BOUNDS_SLACK || y < -BOUNDS_SLACK || x + bw > w + BOUNDS_SLACK || y + bh > h + BOUNDS_SLACK {
            return Err(EvalError::OutOfBounds {
                image_id,
                bbox: xywh,
                width: w,
                height: h,
            });
        }
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        BBox::new(clamp(x / w), clamp(y / h), clamp((x + bw) / w), clamp((y + bh) / h))
            .map_err(|_| EvalError::DegenerateBox { image_id, bbox: xywh })
    }
}

/// Parses a COCO subset into ground truth. Category ids are remapped to
/// `1..=K` in ascending id order; images without annotations are negative.
pub fn ingest_coco_str(text: &str) -> Result<(GroundTruthSet, CocoFrame), EvalError> {
    let ds: CocoDataset = serde_json::from_str(text).map_err(json_err)?;
    let mut frame = CocoFrame::default();
    let mut cat_ids: Vec<i64> = ds.categories.iter().map(|c| c.id).collect();
    cat_ids.sort_unstable();
    cat_ids.dedup();
    for (i, id) in cat_ids.iter().enumerate() {
        frame.category_map.insert(*id, Category(i as u32 + 1));
    }
    let mut gt = GroundTruthSet {
        num_categories: cat_ids.len(),
        images: BTreeMap::new(),
    };
    for img in &ds.images {
        let (w, h) = match (img.width, img.height) {
            (Some(w), Some(h)) if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() => (w, h),
            _ => return Err(EvalError::MissingDims { image_id: img.id }),
        };
        if frame.dims.insert(img.id, (w, h)).is_some() {
            return Err(EvalError::DuplicateImage(img.id));
        }
        gt.images.insert(img.id, Vec::new());
    }
    for ann in &ds.annotations {
        let category = frame.category(ann.category_id)?;
        let bbox = frame.normalize(ann.image_id, ann.bbox)?;
        gt.images
            .get_mut(&ann.image_id)
            .ok_or(EvalError::UnknownImage(ann.image_id))?
            .push(Instance { bbox, category });
    }
    Ok((gt, frame))
}

/// Parses detector results (COCO-results list, absolute `[x, y, w, h]`) in
/// the frame of an ingested ground-truth file.
pub fn ingest_detector_str(text: &str, frame: &CocoFrame) -> Result<PredictionSet, EvalError> {
    let results: Vec<CocoResult> = serde_json::from_str(text).map_err(json_err)?;
    let mut per_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for r in results {
        let bbox = frame.normalize(r.image_id, r.bbox)?;
        let label = frame.category(r.category_id)?;
        if !r.score.is_finite() {
            return Err(EvalError::Json {
                line: None,
                message: format!("image {}: non-finite score", r.image_id),
            });
        }
        per_image.entry(r.image_id).or_default().push(Detection {
            bbox,
            label,
            confidence: r.score,
        });
    }
    let images = per_image
        .into_iter()
        .map(|(id, mut dets)| {
            dets.sort_by(detection_order);
            (id, ImagePrediction::Detector(dets))
        })
        .collect();
    Ok(PredictionSet { images })
}

/// Parses agent predictions, one JSON object per line with normalized
/// corner boxes. Blank lines are skipped.
pub fn ingest_agent_str(text: &str, num_categories: usize) -> Result<PredictionSet, EvalError> {
    let mut images = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Prediction {
            line: lineno,
            message,
        };
        let rec: AgentRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.label as usize > num_categories {
            return Err(err(format!("label {} outside 0..={num_categories}", rec.label)));
        }
        let category = Category(rec.label);
        let out = match (category.is_negative(), rec.bbox) {
            (true, _) => GroundedOutput::negative(),
            (false, None) => return Err(err("positive label without a box".into())),
            (false, Some([x1, y1, x2, y2])) => {
                let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| err(e.to_string()))?;
                GroundedOutput::new(bbox, category)
            }
        };
        if images.insert(rec.image_id, ImagePrediction::Agent(out)).is_some() {
            return Err(err(format!("duplicate image id {}", rec.image_id)));
        }
    }
    Ok(PredictionSet { images })
}

fn to_xywh(b: &BBox) -> [f64; 4] {
    [
        b.x1() * EXPORT_CANVAS,
        b.y1() * EXPORT_CANVAS,
        b.width() * EXPORT_CANVAS,
        b.height() * EXPORT_CANVAS,
    ]
}

/// Exports scenes as a COCO subset on a nominal square canvas.
pub fn export_coco(scenes: &[Scene]) -> CocoDataset {
    let k = scenes.iter().map(|s| s.num_categories).max().unwrap_or(0);
    let mut annotations = Vec::new();
    let images = scenes
        .iter()
        .map(|s| {
            if let Some((b, c)) = &s.gt {
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: s.image_id,
                    category_id: i64::from(c.0),
                    bbox: to_xywh(b),
                });
            }
            CocoImage {
                id: s.image_id,
                file_name: Some(format!("{}.png", s.scene_id)),
                width: Some(EXPORT_CANVAS),
                height: Some(EXPORT_CANVAS),
            }
        })
        .collect();
    let categories = (1..=k)
        .map(|c| CocoCategory {
            id: i64::from(c),
            name: format!("lesion_{c}"),
        })
        .collect();
    CocoDataset {
        images,
        annotations,
        categories,
    }
}

/// Agent predictions as JSON lines.
pub fn export_agent(records: &[(u64, GroundedOutput)]) -> String {
    let mut s = String::new();
    for (image_id, out) in records {
        let rec = AgentRecord {
            image_id: *image_id,
            bbox: out.bbox.map(|b| b.corners()),
            label: out.category.0,
        };
        s.push_str(&serde_json::to_string(&rec).expect("serializable"));
        s.push('\n');
    }
    s
}

/// Detector responses as a COCO-results list on the nominal canvas.
pub fn export_detector(records: &[(u64, Vec<Detection>)]) -> Vec<CocoResult> {
    records
        .iter()
        .flat_map(|(image_id, dets)| {
            dets.iter().map(move |d| CocoResult {
                image_id: *image_id,
                category_id: i64::from(d.label.0),
                bbox: to_xywh(&d.bbox),
                score: d.confidence,
            })
        })
        .collect()
}
