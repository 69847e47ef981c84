use rand::Rng;
use rand_distr::StandardNormal;

use super::{Frame, GeneratorConfig};
use crate::geometry::{encode_offsets, iou, BBox};
use crate::rng::stream;
use crate::taxonomy::{GlobalClass, Taxonomy};

/// Trailing feature entries carrying the offset sub-vector.
pub const OFFSET_DIMS: usize = 4;

/// Stand-in for crop-and-resize CNN features.
///
/// The leading `d - 4` entries mix class prototypes by IoU with every oracle
/// object (visible or hidden) plus a background prototype weighted by
/// `1 - max IoU`. The trailing four entries hold the regression offsets to
/// the best-overlapping object, scaled by that IoU and `offset_gain`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOracle {
    dim: usize,
    noise: f64,
    offset_gain: f64,
    prototypes: Vec<Vec<f64>>,
    background: Vec<f64>,
}

fn unit_vector<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

impl FeatureOracle {
    pub fn new(config: &GeneratorConfig, taxonomy: &Taxonomy) -> Self {
        let dim = config.feature_dim;
        let proto_dim = dim - OFFSET_DIMS;
        let mut rng = stream(config.prototype_seed, "prototypes", 0);
        let background = unit_vector(&mut rng, proto_dim);
        let light = unit_vector(&mut rng, proto_dim);
        let sign = unit_vector(&mut rng, proto_dim);
        let object = unit_vector(&mut rng, proto_dim);
        let (o, a) = (config.object_share.sqrt(), config.family_share.sqrt());
        let b = (1.0 - config.object_share - config.family_share).max(0.0).sqrt();
        let prototypes = taxonomy
            .entries()
            .map(|(_, g)| {
                let family = if g == GlobalClass::Light { &light } else { &sign };
                let own = unit_vector(&mut rng, proto_dim);
                let mut p: Vec<f64> = (0..proto_dim).map(|i| o * object[i] + a * family[i] + b * own[i]).collect();
                normalize(&mut p);
                p
            })
            .collect();
        Self {
            dim,
            noise: config.feature_noise,
            offset_gain: config.offset_gain,
            prototypes,
            background,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, subclass: usize) -> &[f64] {
        &self.prototypes[subclass]
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn offset_gain(&self) -> f64 {
        self.offset_gain
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Noise-free features of `proposal` in `frame`.
    pub fn clean_features(&self, frame: &Frame, proposal: &BBox) -> Vec<f64> {
        let proto_dim = self.dim - OFFSET_DIMS;
        let mut h = vec![0.0; self.dim];
        let mut best: Option<(f64, &BBox)> = None;
        for a in &frame.annotations {
            let w = iou(proposal, &a.bbox);
            if w > 0.0 {
                for (x, p) in h[..proto_dim].iter_mut().zip(&self.prototypes[a.subclass]) {
                    *x += w * p;
                }
                if best.is_none_or(|(bw, _)| w > bw) {
                    best = Some((w, &a.bbox));
                }
            }
        }
        let max_iou = best.map_or(0.0, |(w, _)| w);
        for (x, p) in h[..proto_dim].iter_mut().zip(&self.background) {
            *x += (1.0 - max_iou) * p;
        }
        if let Some((w, target)) = best {
            let delta = encode_offsets(proposal, target).to_array();
            for (x, d) in h[proto_dim..].iter_mut().zip(delta) {
                *x = self.offset_gain * w * d;
            }
        }
        h
    }

    pub fn features<R: Rng>(&self, frame: &Frame, proposal: &BBox, rng: &mut R) -> Vec<f64> {
        let mut h = self.clean_features(frame, proposal);
        if self.noise > 0.0 {
            for x in &mut h {
                let z: f64 = rng.sample(StandardNormal);
                *x += self.noise * z;
            }
        }
        h
    }
}
