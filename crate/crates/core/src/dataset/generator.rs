use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, Annotation, Dataset, DatasetError, Frame, SourceTag};
use crate::geometry::BBox;
use crate::rng::{derive_seed, StreamRng};
use crate::taxonomy::{GlobalClass, Taxonomy};
use rand::SeedableRng;

const OBJECT_ATTEMPTS: usize = 200;
const FRAME_ATTEMPTS: usize = 50;

/// Parameters of the synthetic scene generator and feature oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub width: f64,
    pub height: f64,
    /// Inclusive range of lights per frame.
    pub lights_per_frame: (usize, usize),
    pub signs_per_frame: (usize, usize),
    /// Light box width range (log-uniform); height is `light_aspect * width`.
    pub light_width: (f64, f64),
    pub light_aspect: f64,
    /// Sign box side range (log-uniform), square boxes.
    pub sign_side: (f64, f64),
    /// Required axis gap between a hidden and a visible object, as a
    /// multiple of the longer side of the two boxes.
    pub separation: f64,
    /// Probability that a frame places a hidden object inside the margin.
    pub violation_prob: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub prototype_seed: u64,
    /// Squared weight of the component shared by every foreground prototype,
    /// i.e. the cosine between prototypes of different families.
    pub object_share: f64,
    /// Squared weight of the per-family component; siblings have cosine
    /// `object_share + family_share`.
    pub family_share: f64,
    /// Gain on the offset sub-vector of the features.
    pub offset_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 480.0,
            lights_per_frame: (1, 3),
            signs_per_frame: (1, 3),
            light_width: (8.0, 40.0),
            light_aspect: 2.2,
            sign_side: (12.0, 128.0),
            separation: 1.0,
            violation_prob: 0.07,
            feature_dim: 64,
            feature_noise: 0.25,
            prototype_seed: 2018,
            object_share: 0.0,
            family_share: 0.5,
            offset_gain: 4.0,
        }
    }
}

/// Minimum offset sub-vector plus prototype space.
pub const MIN_FEATURE_DIM: usize = 8;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Config(m.to_string()));
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad("frame dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.violation_prob) {
            return bad("violation_prob must lie in [0, 1]");
        }
        if !(self.object_share >= 0.0 && self.family_share >= 0.0 && self.object_share + self.family_share <= 1.0) {
            return bad("object_share and family_share must be non-negative and sum to at most 1");
        }
        if self.feature_dim < MIN_FEATURE_DIM {
            return bad("feature_dim must be at least 8");
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative");
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad("separation must be finite and non-negative");
        }
        if !self.offset_gain.is_finite() {
            return bad("offset_gain must be finite");
        }
        for (name, (lo, hi)) in [("lights_per_frame", self.lights_per_frame), ("signs_per_frame", self.signs_per_frame)] {
            if lo > hi {
                return bad(&format!("{name}: min exceeds max"));
            }
        }
        let (lw0, lw1) = self.light_width;
        let (s0, s1) = self.sign_side;
        if !(lw0 > 0.0 && lw0 <= lw1 && s0 > 0.0 && s0 <= s1 && self.light_aspect > 0.0) {
            return bad("object size ranges must be positive and ordered");
        }
        if lw1 >= self.width || lw1 * self.light_aspect >= self.height || s1 >= self.width.min(self.height) {
            return bad("largest object does not fit in the frame");
        }
        Ok(())
    }

    /// Margin below which a hidden/visible pair counts as a violation.
    pub fn margin(&self, a: &BBox, b: &BBox) -> f64 {
        self.separation * a.long_side().max(b.long_side())
    }
}

/// True when some hidden annotation lies within the separation margin of a
/// visible one.
pub fn violates_separation(frame: &Frame, config: &GeneratorConfig) -> bool {
    frame.hidden().any(|h| {
        frame
            .visible()
            .any(|v| v.bbox.gap(&h.bbox) < config.margin(&v.bbox, &h.bbox))
    })
}

fn log_uniform(rng: &mut StreamRng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo.ln()..hi.ln()).exp()
    }
}

fn object_size(config: &GeneratorConfig, global: GlobalClass, rng: &mut StreamRng) -> (f64, f64) {
    match global {
        GlobalClass::Light => {
            let w = log_uniform(rng, config.light_width);
            (w, w * config.light_aspect)
        }
        _ => {
            let s = log_uniform(rng, config.sign_side);
            (s, s)
        }
    }
}

fn quantized_box(config: &GeneratorConfig, x1: f64, y1: f64, w: f64, h: f64) -> Option<BBox> {
    let b = BBox::new(quantize(x1), quantize(y1), quantize(x1 + w), quantize(y1 + h)).ok()?;
    b.within(config.width, config.height).then_some(b)
}

fn random_placement(config: &GeneratorConfig, (w, h): (f64, f64), rng: &mut StreamRng) -> Option<BBox> {
    let x1 = rng.random_range(0.0..=(config.width - w));
    let y1 = rng.random_range(0.0..=(config.height - h));
    quantized_box(config, x1, y1, w, h)
}

/// A box adjacent to `anchor` with axis gap drawn from `[0, margin)`.
fn placement_near(
    config: &GeneratorConfig,
    anchor: &BBox,
    (w, h): (f64, f64),
    rng: &mut StreamRng,
) -> Option<BBox> {
    let margin = config.separation * anchor.long_side().max(w.max(h));
    let gap = if margin > 0.0 { rng.random_range(0.0..margin) } else { 0.0 };
    let (x1, y1) = match rng.random_range(0..4) {
        0 => (anchor.x2() + gap, rng.random_range(anchor.y1() - h..=anchor.y2())),
        1 => (anchor.x1() - gap - w, rng.random_range(anchor.y1() - h..=anchor.y2())),
        2 => (rng.random_range(anchor.x1() - w..=anchor.x2()), anchor.y2() + gap),
        _ => (rng.random_range(anchor.x1() - w..=anchor.x2()), anchor.y1() - gap - h),
    };
    if x1 < 0.0 || y1 < 0.0 {
        return None;
    }
    quantized_box(config, x1, y1, w, h)
}

fn draw_subclass(taxonomy: &Taxonomy, global: GlobalClass, rng: &mut StreamRng) -> usize {
    let family = taxonomy.family(global);
    family[rng.random_range(0..family.len())]
}

fn try_frame(
    config: &GeneratorConfig,
    taxonomy: &Taxonomy,
    source: SourceTag,
    rng: &mut StreamRng,
) -> Option<Vec<Annotation>> {
    let shown = source.labelled_global();
    let unshown = match shown {
        GlobalClass::Light => GlobalClass::Sign,
        _ => GlobalClass::Light,
    };
    let count = |g: GlobalClass, rng: &mut StreamRng| {
        let (lo, hi) = match g {
            GlobalClass::Light => config.lights_per_frame,
            _ => config.signs_per_frame,
        };
        rng.random_range(lo..=hi)
    };
    let n_visible = count(shown, rng);
    let n_hidden = count(unshown, rng);
    let violate = rng.random_bool(config.violation_prob);

    let mut placed: Vec<Annotation> = Vec::with_capacity(n_visible + n_hidden);
    let free = |b: &BBox, placed: &[Annotation]| placed.iter().all(|a| a.bbox.intersection_area(b) == 0.0);

    for _ in 0..n_visible {
        let size = object_size(config, shown, rng);
        let bbox = (0..OBJECT_ATTEMPTS)
            .filter_map(|_| random_placement(config, size, rng))
            .find(|b| free(b, &placed))?;
        let subclass = draw_subclass(taxonomy, shown, rng);
        placed.push(Annotation { bbox, subclass, visible: true });
    }

    let visible: Vec<BBox> = placed.iter().map(|a| a.bbox).collect();
    let clear_of_visible =
        |b: &BBox| visible.iter().all(|v| v.gap(b) >= config.margin(v, b));

    for k in 0..n_hidden {
        let size = object_size(config, unshown, rng);
        let bbox = if violate && k == 0 && !visible.is_empty() {
            let anchor = visible[rng.random_range(0..visible.len())];
            (0..OBJECT_ATTEMPTS)
                .filter_map(|_| placement_near(config, &anchor, size, rng))
                .find(|b| free(b, &placed) && anchor.gap(b) < config.margin(&anchor, b))?
        } else {
            (0..OBJECT_ATTEMPTS)
                .filter_map(|_| random_placement(config, size, rng))
                .find(|b| free(b, &placed) && clear_of_visible(b))?
        };
        let subclass = draw_subclass(taxonomy, unshown, rng);
        placed.push(Annotation { bbox, subclass, visible: false });
    }
    Some(placed)
}

fn generate_frame(
    config: &GeneratorConfig,
    taxonomy: &Taxonomy,
    index: u64,
    seed: u64,
) -> Result<Frame, DatasetError> {
    let frame_seed = derive_seed(seed, "frame", index);
    let mut rng = StreamRng::seed_from_u64(frame_seed);
    let source = if index.is_multiple_of(2) { SourceTag::Lights } else { SourceTag::Signs };
    for _ in 0..FRAME_ATTEMPTS {
        if let Some(annotations) = try_frame(config, taxonomy, source, &mut rng) {
            return Ok(Frame {
                id: index,
                width: quantize(config.width),
                height: quantize(config.height),
                source,
                annotations,
                seed: frame_seed,
            });
        }
    }
    Err(DatasetError::Infeasible {
        frame: index,
        attempts: FRAME_ATTEMPTS,
    })
}

/// Generates `n_frames` synthetic frames, alternating lights-set and
/// signs-set sources. Each frame derives its own seed from `(seed, index)`.
pub fn generate_synthetic(
    config: &GeneratorConfig,
    taxonomy: &Taxonomy,
    n_frames: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    config.validate()?;
    let frames = (0..n_frames as u64)
        .map(|i| generate_frame(config, taxonomy, i, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        taxonomy: taxonomy.clone(),
        config: config.clone(),
        frames,
    })
}
