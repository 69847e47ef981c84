//! Detection matching, PR curves, AP/mAP, size-bucket metrics and the
//! cross-dataset degradation figure.
//!
//! Each subclass is scored only on frames from the source that labels its
//! family, since the other source leaves those objects unannotated.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Frame, SourceTag};
use crate::geometry::{iou, score_order, size_bucket, BBox, SizeBucket};
use crate::head::{Detection, InferConfig};
use crate::taxonomy::{GlobalClass, Taxonomy};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("single-task mAP must be positive, got {0}")]
    ZeroSingleTask(f64),
    #[error("mAP values must be finite and in [0, 1], got {0}")]
    OutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_match: f64,
    /// Score at which size-bucket precision and recall are read off.
    pub operating_score: f64,
    pub infer: InferConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_match: 0.5,
            operating_score: 0.5,
            infer: InferConfig::default(),
        }
    }
}

/// Canonical detection order: score descending, then box, then subclass.
pub fn canonical_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        score_order(&(dets[a].bbox, dets[a].score), &(dets[b].bbox, dets[b].score))
            .then(dets[a].subclass.cmp(&dets[b].subclass))
            .then(a.cmp(&b))
    });
    idx
}

/// TP flags for the detections of one frame, aligned with `dets`.
///
/// Detections are visited in canonical order; each takes the highest-IoU
/// unmatched ground truth of its own subclass with IoU at least `iou_threshold`
/// (lowest index on ties).
pub fn match_detections(dets: &[Detection], gt: &[(BBox, usize)], iou_threshold: f64) -> Vec<bool> {
    assign(dets, gt, iou_threshold).iter().map(Option::is_some).collect()
}

/// The ground-truth index each detection takes under the greedy pass.
pub fn assign(dets: &[Detection], gt: &[(BBox, usize)], iou_threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt.len()];
    let mut out = vec![None; dets.len()];
    for i in canonical_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, (g, k)) in gt.iter().enumerate() {
            if taken[j] || *k != d.subclass {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per detection, by descending score.
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
}

impl PrCurve {
    /// `scored` holds (score, is-TP) pairs; ties keep their given order.
    pub fn from_scored(scored: &[(f64, bool)], n_gt: usize) -> Self {
        let mut sorted = scored.to_vec();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut tp = 0usize;
        let points = sorted
            .iter()
            .enumerate()
            .map(|(i, &(s, hit))| {
                tp += hit as usize;
                PrPoint {
                    threshold: s,
                    precision: tp as f64 / (i + 1) as f64,
                    recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                }
            })
            .collect();
        Self { points, n_gt }
    }
}

/// All-point interpolated AP; `None` when the class has no ground truth.
pub fn average_precision(curve: &PrCurve) -> Option<f64> {
    if curve.n_gt == 0 {
        return None;
    }
    let n = curve.points.len();
    let mut envelope = vec![0.0; n];
    let mut running: f64 = 0.0;
    for i in (0..n).rev() {
        running = running.max(curve.points[i].precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in curve.points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    Some(ap.clamp(0.0, 1.0))
}

/// Unweighted mean of the defined APs.
pub fn map_over_classes(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub detections: usize,
    pub true_positives: usize,
    pub ground_truth: usize,
    pub matched: usize,
}

impl BucketCounts {
    pub fn precision(&self) -> Option<f64> {
        (self.detections > 0).then(|| self.true_positives as f64 / self.detections as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.ground_truth > 0).then(|| self.matched as f64 / self.ground_truth as f64)
    }

    fn add(&mut self, o: &BucketCounts) {
        self.detections += o.detections;
        self.true_positives += o.true_positives;
        self.ground_truth += o.ground_truth;
        self.matched += o.matched;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub bucket: SizeBucket,
    pub counts: BucketCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl BucketMetrics {
    fn from_counts(bucket: SizeBucket, counts: BucketCounts) -> Self {
        Self {
            bucket,
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
        }
    }
}

fn bucket_index(b: &BBox) -> usize {
    match size_bucket(b) {
        SizeBucket::Small => 0,
        SizeBucket::Medium => 1,
        SizeBucket::Large => 2,
    }
}

/// Bucket counts for one frame at `operating_score`: detections bucket by
/// their own area, ground truth by its area.
pub fn frame_bucket_counts(
    dets: &[Detection],
    gt: &[(BBox, usize)],
    operating_score: f64,
    iou_threshold: f64,
) -> [BucketCounts; 3] {
    let kept: Vec<Detection> = dets.iter().filter(|d| d.score >= operating_score).cloned().collect();
    let taken = assign(&kept, gt, iou_threshold);
    let mut matched_gt = vec![false; gt.len()];
    for j in taken.iter().flatten() {
        matched_gt[*j] = true;
    }
    let mut out = [BucketCounts::default(); 3];
    for (d, hit) in kept.iter().zip(&taken) {
        let b = &mut out[bucket_index(&d.bbox)];
        b.detections += 1;
        b.true_positives += hit.is_some() as usize;
    }
    for ((g, _), m) in gt.iter().zip(&matched_gt) {
        let b = &mut out[bucket_index(g)];
        b.ground_truth += 1;
        b.matched += *m as usize;
    }
    out
}

/// One frame's detections and its visible ground truth as `(box, subclass)`.
pub type FrameDetections = (Vec<Detection>, Vec<(BBox, usize)>);

/// Per-bucket precision and recall over a set of frames, each given as its
/// detections and visible ground truth.
pub fn size_bucket_metrics(
    frames: &[FrameDetections],
    operating_score: f64,
    iou_threshold: f64,
) -> [BucketMetrics; 3] {
    let mut total = [BucketCounts::default(); 3];
    for (dets, gt) in frames {
        for (t, c) in total.iter_mut().zip(frame_bucket_counts(dets, gt, operating_score, iou_threshold)) {
            t.add(&c);
        }
    }
    let b = SizeBucket::ALL;
    [
        BucketMetrics::from_counts(b[0], total[0]),
        BucketMetrics::from_counts(b[1], total[1]),
        BucketMetrics::from_counts(b[2], total[2]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub subclass: usize,
    pub name: String,
    pub global: GlobalClass,
    pub n_gt: usize,
    pub n_det: usize,
    /// `None` for classes without ground truth; they are left out of every mAP.
    pub ap: Option<f64>,
    pub buckets: [BucketCounts; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub light_map: Option<f64>,
    pub sign_map: Option<f64>,
    /// Mean over every class with ground truth.
    pub total_map: Option<f64>,
    pub buckets: [BucketMetrics; 3],
    pub operating_score: f64,
    pub iou_match: f64,
    pub excluded_classes: Vec<String>,
    #[serde(skip)]
    pub curves: Vec<PrCurve>,
}

type FrameClassKey = (u64, usize);

/// Scores `dets` against the visible ground truth of `frames`.
pub fn evaluate(frames: &[Frame], dets: &[Detection], taxonomy: &Taxonomy, config: &EvalConfig) -> EvalReport {
    let source_of: BTreeMap<u64, SourceTag> = frames.iter().map(|f| (f.id, f.source)).collect();
    let mut det_groups: BTreeMap<FrameClassKey, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        let Ok(g) = taxonomy.global_of(d.subclass) else { continue };
        if source_of.get(&d.frame).is_some_and(|s| s.labelled_global() == g) {
            det_groups.entry((d.frame, d.subclass)).or_default().push(d.clone());
        }
    }
    let mut gt_groups: BTreeMap<FrameClassKey, Vec<(BBox, usize)>> = BTreeMap::new();
    for f in frames {
        for a in f.visible() {
            gt_groups.entry((f.id, a.subclass)).or_default().push((a.bbox, a.subclass));
        }
    }

    let mut classes = Vec::with_capacity(taxonomy.len());
    let mut curves = Vec::with_capacity(taxonomy.len());
    let mut total_buckets = [BucketCounts::default(); 3];
    for k in 0..taxonomy.len() {
        let g = taxonomy.global_of(k).expect("index in range");
        let mut scored = Vec::new();
        let mut buckets = [BucketCounts::default(); 3];
        let mut n_gt = 0;
        let mut n_det = 0;
        for f in frames.iter().filter(|f| f.source.labelled_global() == g) {
            let d = det_groups.get(&(f.id, k)).map(Vec::as_slice).unwrap_or(&[]);
            let gt = gt_groups.get(&(f.id, k)).map(Vec::as_slice).unwrap_or(&[]);
            n_gt += gt.len();
            n_det += d.len();
            let tp = match_detections(d, gt, config.iou_match);
            for i in canonical_order(d) {
                scored.push((d[i].score, tp[i]));
            }
            for (b, c) in buckets.iter_mut().zip(frame_bucket_counts(d, gt, config.operating_score, config.iou_match)) {
                b.add(&c);
            }
        }
        let curve = PrCurve::from_scored(&scored, n_gt);
        for (t, b) in total_buckets.iter_mut().zip(&buckets) {
            t.add(b);
        }
        classes.push(ClassReport {
            subclass: k,
            name: taxonomy.name(k).unwrap_or_default().to_string(),
            global: g,
            n_gt,
            n_det,
            ap: average_precision(&curve),
            buckets,
        });
        curves.push(curve);
    }
    let side = |g: GlobalClass| {
        let aps: Vec<Option<f64>> = classes.iter().filter(|c| c.global == g).map(|c| c.ap).collect();
        map_over_classes(&aps)
    };
    let all: Vec<Option<f64>> = classes.iter().map(|c| c.ap).collect();
    let b = SizeBucket::ALL;
    EvalReport {
        light_map: side(GlobalClass::Light),
        sign_map: side(GlobalClass::Sign),
        total_map: map_over_classes(&all),
        buckets: [
            BucketMetrics::from_counts(b[0], total_buckets[0]),
            BucketMetrics::from_counts(b[1], total_buckets[1]),
            BucketMetrics::from_counts(b[2], total_buckets[2]),
        ],
        operating_score: config.operating_score,
        iou_match: config.iou_match,
        excluded_classes: classes.iter().filter(|c| c.ap.is_none()).map(|c| c.name.clone()).collect(),
        classes,
        curves,
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

impl EvalReport {
    /// One row per class per size bucket.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,global,ap,bucket,detections,true_positives,ground_truth,matched,precision,recall\n");
        for c in &self.classes {
            for (bucket, counts) in SizeBucket::ALL.iter().zip(&c.buckets) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    c.name,
                    c.global,
                    opt(c.ap),
                    bucket.name(),
                    counts.detections,
                    counts.true_positives,
                    counts.ground_truth,
                    counts.matched,
                    opt(counts.precision()),
                    opt(counts.recall())
                );
            }
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "light_map": self.light_map,
            "sign_map": self.sign_map,
            "total_map": self.total_map,
            "iou_match": self.iou_match,
            "operating_score": self.operating_score,
            "buckets": self.buckets.iter().map(|b| serde_json::json!({
                "bucket": b.bucket.name(),
                "precision": b.precision,
                "recall": b.recall,
                "detections": b.counts.detections,
                "ground_truth": b.counts.ground_truth,
            })).collect::<Vec<_>>(),
            "excluded_classes": self.excluded_classes,
        })
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("class,threshold,precision,recall\n");
        for (c, curve) in self.classes.iter().zip(&self.curves) {
            for p in &curve.points {
                let _ = writeln!(out, "{},{},{},{}", c.name, p.threshold, p.precision, p.recall);
            }
        }
        out
    }
}

/// Mean relative mAP loss of the joint model against single-task models,
/// in percent.
pub fn degradation_report(single: (f64, f64), joint: (f64, f64)) -> Result<f64, EvalError> {
    for v in [single.0, single.1, joint.0, joint.1] {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(EvalError::OutOfRange(v));
        }
    }
    for s in [single.0, single.1] {
        if s <= 0.0 {
            return Err(EvalError::ZeroSingleTask(s));
        }
    }
    let loss = |s: f64, j: f64| 1.0 - j / s;
    Ok(100.0 * 0.5 * (loss(single.0, joint.0) + loss(single.1, joint.1)))
}
