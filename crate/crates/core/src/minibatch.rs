//! Proposal sampling, positive/negative selection, balancing and target
//! assignment, plus measurement of negatives that cover unlabeled objects.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, FeatureOracle, Frame};
use crate::geometry::{encode_offsets, iou, BBox, BoxDelta};
use crate::taxonomy::{GlobalClass, Taxonomy, TaxonomyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiniBatchError {
    #[error("positive proposal {0} has no matched ground truth")]
    Unmatched(usize),
    #[error("no negatives selected, contamination rate undefined")]
    NoNegatives,
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// A candidate box with its features and best overlap against the frame's
/// visible ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub features: Vec<f64>,
    pub max_iou: f64,
    /// Index into the visible ground truth; set iff `max_iou > 0`.
    pub matched: Option<usize>,
}

impl Proposal {
    pub fn new(bbox: BBox, features: Vec<f64>, visible_gt: &[Annotation]) -> Self {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in visible_gt.iter().enumerate() {
            let v = iou(&bbox, &g.bbox);
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        Self {
            bbox,
            features,
            max_iou: best.map_or(0.0, |(_, v)| v),
            matched: best.map(|(i, _)| i),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Maximum number of proposals per frame.
    pub cap: usize,
    /// Share of the cap spent on jittered ground-truth copies.
    pub jitter_fraction: f64,
    /// Jitter standard deviations, relative to box size; cycled per proposal.
    pub jitter_scales: Vec<f64>,
    /// Side-length range (log-uniform) of the uniform random boxes.
    pub random_side: (f64, f64),
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            cap: 50,
            jitter_fraction: 0.5,
            jitter_scales: vec![0.1, 0.3],
            random_side: (8.0, 256.0),
        }
    }
}

fn jittered<R: Rng>(gt: &BBox, scale: f64, frame: &Frame, rng: &mut R) -> Option<BBox> {
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    let mut n = || -> f64 { rng.sample(StandardNormal) };
    let cx = cx + scale * w * n();
    let cy = cy + scale * h * n();
    let w = w * (scale * n()).exp();
    let h = h * (scale * n()).exp();
    BBox::from_center(cx, cy, w, h).ok()?.clip(frame.width, frame.height)
}

fn uniform_box<R: Rng>(frame: &Frame, (lo, hi): (f64, f64), rng: &mut R) -> Option<BBox> {
    let mut side = || if lo < hi { rng.random_range(lo.ln()..hi.ln()).exp() } else { lo };
    let w = side().min(frame.width);
    let h = side().min(frame.height);
    let x1 = rng.random_range(0.0..=(frame.width - w));
    let y1 = rng.random_range(0.0..=(frame.height - h));
    BBox::new(x1, y1, x1 + w, y1 + h).ok()?.clip(frame.width, frame.height)
}

/// Stand-in for a region proposal network: jittered copies of the visible
/// ground truth followed by uniform random boxes, at most `config.cap`.
pub fn sample_proposals<R: Rng>(
    frame: &Frame,
    oracle: &FeatureOracle,
    config: &SamplerConfig,
    rng: &mut R,
) -> Vec<Proposal> {
    let visible = frame.visible_gt();
    let n_jitter = if visible.is_empty() || config.jitter_scales.is_empty() {
        0
    } else {
        ((config.cap as f64) * config.jitter_fraction).round() as usize
    }
    .min(config.cap);
    let mut boxes = Vec::with_capacity(config.cap);
    for i in 0..n_jitter {
        let gt = &visible[i % visible.len()].bbox;
        let scale = config.jitter_scales[(i / visible.len()) % config.jitter_scales.len()];
        if let Some(b) = jittered(gt, scale, frame, rng) {
            boxes.push(b);
        }
    }
    while boxes.len() < config.cap {
        if let Some(b) = uniform_box(frame, config.random_side, rng) {
            boxes.push(b);
        }
    }
    boxes
        .into_iter()
        .map(|b| {
            let features = oracle.features(frame, &b, rng);
            Proposal::new(b, features, &visible)
        })
        .collect()
}

/// Which negative window applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    /// Negatives with max IoU in `[0, neg_upper]`.
    Baseline,
    /// Negatives with max IoU in `[bg_lower, neg_upper]`.
    BackgroundThreshold,
}

impl SelectMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectMode::Baseline => "baseline",
            SelectMode::BackgroundThreshold => "threshold",
        }
    }
}

/// IoU windows for mini-batch membership. All bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionWindows {
    pub pos_lower: f64,
    pub neg_upper: f64,
    pub bg_lower: f64,
}

impl Default for SelectionWindows {
    fn default() -> Self {
        Self {
            pos_lower: 0.7,
            neg_upper: 0.3,
            bg_lower: 0.01,
        }
    }
}

/// Indices into a proposal list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }
}

pub fn select(proposals: &[Proposal], windows: &SelectionWindows, mode: SelectMode) -> Selection {
    let neg_lower = match mode {
        SelectMode::Baseline => 0.0,
        SelectMode::BackgroundThreshold => windows.bg_lower,
    };
    let mut out = Selection::default();
    for (i, p) in proposals.iter().enumerate() {
        if p.max_iou >= windows.pos_lower {
            out.positives.push(i);
        } else if p.max_iou >= neg_lower && p.max_iou <= windows.neg_upper {
            out.negatives.push(i);
        }
    }
    out
}

pub fn select_baseline(proposals: &[Proposal]) -> Selection {
    select(proposals, &SelectionWindows::default(), SelectMode::Baseline)
}

pub fn select_background_threshold(proposals: &[Proposal]) -> Selection {
    select(proposals, &SelectionWindows::default(), SelectMode::BackgroundThreshold)
}

fn sample_sorted<R: Rng>(pool: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    if amount >= pool.len() {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// Samples up to `floor(pos_fraction * batch_size)` positives and fills the
/// rest with negatives; a short pool is taken whole and the other fills in.
pub fn balance<R: Rng>(selection: &Selection, batch_size: usize, pos_fraction: f64, rng: &mut R) -> Selection {
    let quota = ((pos_fraction * batch_size as f64).floor() as usize).min(batch_size);
    let mut n_pos = selection.positives.len().min(quota);
    let n_neg = selection.negatives.len().min(batch_size - n_pos);
    n_pos = selection.positives.len().min(batch_size - n_neg);
    Selection {
        positives: sample_sorted(&selection.positives, n_pos, rng),
        negatives: sample_sorted(&selection.negatives, n_neg, rng),
    }
}

/// A mini-batch member with its classification and regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub proposal: Proposal,
    pub global: GlobalClass,
    /// Subclass target; `None` for background.
    pub subclass: Option<usize>,
    pub regression: Option<BoxDelta>,
    /// Indicator gating the regression loss.
    pub p_star: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiniBatch {
    pub positives: Vec<Labeled>,
    pub negatives: Vec<Labeled>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positives first, then negatives. Loss inputs follow this order.
    pub fn members(&self) -> impl Iterator<Item = &Labeled> {
        self.positives.iter().chain(self.negatives.iter())
    }
}

/// Labels a balanced selection. Positives whose max IoU reaches
/// `regression_iou` receive `p* = 1`.
pub fn assign_targets(
    proposals: &[Proposal],
    selection: &Selection,
    visible_gt: &[Annotation],
    taxonomy: &Taxonomy,
    regression_iou: f64,
) -> Result<MiniBatch, MiniBatchError> {
    let mut batch = MiniBatch::default();
    for &i in &selection.positives {
        let p = &proposals[i];
        let gt = p
            .matched
            .and_then(|m| visible_gt.get(m))
            .ok_or(MiniBatchError::Unmatched(i))?;
        batch.positives.push(Labeled {
            proposal: p.clone(),
            global: taxonomy.global_of(gt.subclass)?,
            subclass: Some(gt.subclass),
            regression: Some(encode_offsets(&p.bbox, &gt.bbox)),
            p_star: p.max_iou >= regression_iou,
        });
    }
    for &i in &selection.negatives {
        batch.negatives.push(Labeled {
            proposal: proposals[i].clone(),
            global: GlobalClass::Background,
            subclass: None,
            regression: None,
            p_star: false,
        });
    }
    Ok(batch)
}

/// Everything needed to turn a frame into a labeled mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub sampler: SamplerConfig,
    pub windows: SelectionWindows,
    pub select: SelectMode,
    pub batch_size: usize,
    pub pos_fraction: f64,
    /// IoU at which a positive also regresses (`p*`).
    pub regression_iou: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            windows: SelectionWindows::default(),
            select: SelectMode::BackgroundThreshold,
            batch_size: 64,
            pos_fraction: 0.25,
            regression_iou: 0.7,
        }
    }
}

/// sample → select → balance → assign.
pub fn build_minibatch<R: Rng>(
    frame: &Frame,
    oracle: &FeatureOracle,
    taxonomy: &Taxonomy,
    config: &BatchConfig,
    rng: &mut R,
) -> Result<MiniBatch, MiniBatchError> {
    let proposals = sample_proposals(frame, oracle, &config.sampler, rng);
    let selection = select(&proposals, &config.windows, config.select);
    let balanced = balance(&selection, config.batch_size, config.pos_fraction, rng);
    assign_targets(&proposals, &balanced, &frame.visible_gt(), taxonomy, config.regression_iou)
}

pub const DEFAULT_CONTAMINATION_IOU: f64 = 0.3;

/// True when `negative` overlaps some hidden annotation of `frame` above `threshold`.
pub fn is_contaminated(frame: &Frame, negative: &BBox, threshold: f64) -> bool {
    frame.hidden().any(|h| iou(negative, &h.bbox) > threshold)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationTally {
    pub negatives: usize,
    pub contaminated: usize,
}

impl ContaminationTally {
    pub fn add_frame<'a>(&mut self, frame: &Frame, negatives: impl IntoIterator<Item = &'a BBox>, threshold: f64) {
        for b in negatives {
            self.negatives += 1;
            self.contaminated += is_contaminated(frame, b, threshold) as usize;
        }
    }

    pub fn merge(&mut self, other: &ContaminationTally) {
        self.negatives += other.negatives;
        self.contaminated += other.contaminated;
    }

    pub fn rate(&self) -> Result<f64, MiniBatchError> {
        if self.negatives == 0 {
            Err(MiniBatchError::NoNegatives)
        } else {
            Ok(self.contaminated as f64 / self.negatives as f64)
        }
    }
}

/// Fraction of selected negatives, over all given frames, that cover a hidden object.
pub fn contamination_rate<'a>(
    batches: impl IntoIterator<Item = (&'a Frame, &'a MiniBatch)>,
    threshold: f64,
) -> Result<f64, MiniBatchError> {
    let mut tally = ContaminationTally::default();
    for (frame, batch) in batches {
        tally.add_frame(frame, batch.negatives.iter().map(|n| &n.proposal.bbox), threshold);
    }
    tally.rate()
}
