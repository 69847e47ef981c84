//! A small differentiable detection head over proposal features.
//!
//! One optional shared hidden layer (ReLU) feeds parallel affine maps: a
//! class-agnostic box regressor and either a 3-way global classifier next to
//! a K-way subclass classifier (hierarchical layout) or a single (K+1)-way
//! classifier (flat layout). Parameters live in one contiguous buffer with a
//! matching momentum buffer.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_atomic, Dataset, FeatureOracle, Frame};
use crate::eval::{evaluate, EvalConfig};
use crate::geometry::{decode_offsets, nms_indices, BBox, BoxDelta};
use crate::losses::{argmax, flat_loss, hierarchical_loss, softmax, HeadOutput, LossBreakdown, LossError, LossOptions, OutputGrad};
use crate::minibatch::{build_minibatch, BatchConfig, MiniBatch, MiniBatchError, SamplerConfig};
use crate::rng::{derive_seed, stream};
use crate::taxonomy::{GlobalClass, Taxonomy};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("feature vector has length {got}, head expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite gradient at step {step}: {detail}")]
    NonFiniteGradient { step: usize, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset taxonomy does not match the head taxonomy")]
    TaxonomyMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    MiniBatch(#[from] MiniBatchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Flat,
    #[serde(rename = "hier")]
    Hierarchical,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Flat => "flat",
            LossMode::Hierarchical => "hier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub feature_dim: usize,
    pub hidden: Option<usize>,
    pub subclasses: usize,
    pub mode: LossMode,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: usize,
    bias: usize,
    rows: usize,
    cols: usize,
}

impl Layer {
    fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    fn apply(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let w = &params[self.weight..self.weight + self.rows * self.cols];
        let b = &params[self.bias..self.bias + self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * self.cols..(r + 1) * self.cols];
            *o = b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients for upstream `dout` at input `x`, and
    /// adds `W^T dout` into `dx` when given.
    fn backward(&self, params: &[f64], x: &[f64], dout: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        for (r, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let gw = &mut grad[self.weight + r * self.cols..self.weight + (r + 1) * self.cols];
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += d * xi;
            }
            grad[self.bias + r] += d;
        }
        if let Some(dx) = dx {
            let w = &params[self.weight..self.weight + self.rows * self.cols];
            for (r, &d) in dout.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (acc, wi) in dx.iter_mut().zip(&w[r * self.cols..(r + 1) * self.cols]) {
                    *acc += d * wi;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    hidden: Option<Layer>,
    global: Option<Layer>,
    classes: Layer,
    regression: Layer,
    total: usize,
}

impl Layout {
    fn new(shape: &HeadShape) -> Self {
        let mut offset = 0;
        let mut layer = |rows: usize, cols: usize| {
            let l = Layer {
                weight: offset,
                bias: offset + rows * cols,
                rows,
                cols,
            };
            offset += l.len();
            l
        };
        let hidden = shape.hidden.map(|h| layer(h, shape.feature_dim));
        let width = shape.hidden.unwrap_or(shape.feature_dim);
        let (global, n_classes) = match shape.mode {
            LossMode::Hierarchical => (Some(layer(GlobalClass::COUNT, width)), shape.subclasses),
            LossMode::Flat => (None, shape.subclasses + 1),
        };
        let classes = layer(n_classes, width);
        let regression = layer(4, width);
        Layout {
            hidden,
            global,
            classes,
            regression,
            total: offset,
        }
    }

    fn named(&self) -> Vec<(&'static str, Layer)> {
        let mut v = Vec::new();
        if let Some(h) = self.hidden {
            v.push(("hidden", h));
        }
        if let Some(g) = self.global {
            v.push(("global", g));
        }
        v.push(("classes", self.classes));
        v.push(("regression", self.regression));
        v
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre_activation: Vec<f64>,
    activation: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Head {
    shape: HeadShape,
    layout: Layout,
    params: Vec<f64>,
    velocity: Vec<f64>,
}

impl PartialEq for Head {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.params == other.params && self.velocity == other.velocity
    }
}

impl Head {
    pub fn zeros(shape: HeadShape) -> Self {
        let layout = Layout::new(&shape);
        Self {
            shape,
            layout,
            params: vec![0.0; layout.total],
            velocity: vec![0.0; layout.total],
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng>(shape: HeadShape, rng: &mut R) -> Self {
        let mut head = Self::zeros(shape);
        for (_, l) in head.layout.named() {
            let bound = 1.0 / (l.cols as f64).sqrt();
            for w in &mut head.params[l.weight..l.bias] {
                *w = rng.random_range(-bound..bound);
            }
        }
        head
    }

    pub fn shape(&self) -> &HeadShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn forward_cached(&self, h: &[f64]) -> Result<(HeadOutput, ForwardCache), HeadError> {
        if h.len() != self.shape.feature_dim {
            return Err(HeadError::Shape {
                expected: self.shape.feature_dim,
                got: h.len(),
            });
        }
        let (pre, act) = match self.layout.hidden {
            Some(l) => {
                let mut z = vec![0.0; l.rows];
                l.apply(&self.params, h, &mut z);
                let a = z.iter().map(|x| x.max(0.0)).collect();
                (z, a)
            }
            None => (Vec::new(), h.to_vec()),
        };
        let mut out = HeadOutput::default();
        if let Some(l) = self.layout.global {
            out.global = vec![0.0; l.rows];
            l.apply(&self.params, &act, &mut out.global);
        }
        out.classes = vec![0.0; self.layout.classes.rows];
        self.layout.classes.apply(&self.params, &act, &mut out.classes);
        let mut d = [0.0; 4];
        self.layout.regression.apply(&self.params, &act, &mut d);
        out.delta = BoxDelta::from_array(d);
        Ok((
            out,
            ForwardCache {
                input: h.to_vec(),
                pre_activation: pre,
                activation: act,
            },
        ))
    }

    pub fn forward(&self, h: &[f64]) -> Result<HeadOutput, HeadError> {
        Ok(self.forward_cached(h)?.0)
    }

    /// Adds the parameter gradient for output gradient `dout` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, dout: &OutputGrad, grad: &mut [f64]) {
        let act = &cache.activation;
        let mut dact = self.layout.hidden.map(|l| vec![0.0; l.rows]);
        let mut run = |layer: Layer, d: &[f64], dact: &mut Option<Vec<f64>>| {
            layer.backward(&self.params, act, d, grad, dact.as_deref_mut());
        };
        if let Some(l) = self.layout.global {
            run(l, &dout.global, &mut dact);
        }
        run(self.layout.classes, &dout.classes, &mut dact);
        run(self.layout.regression, &dout.delta.to_array(), &mut dact);
        if let (Some(l), Some(mut da)) = (self.layout.hidden, dact) {
            for (g, z) in da.iter_mut().zip(&cache.pre_activation) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
            l.backward(&self.params, &cache.input, &da, grad, None);
        }
    }

    /// Classic momentum: `v <- mu v + g`, `w <- w - lr v`.
    pub fn apply_momentum(&mut self, grad: &[f64], learning_rate: f64, momentum: f64) {
        for ((w, v), g) in self.params.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = momentum * *v + g;
            *w -= learning_rate * *v;
        }
    }

    /// Loss and parameter gradient of `batch` without updating anything.
    pub fn loss_and_gradient(
        &self,
        batch: &MiniBatch,
        options: &LossOptions,
    ) -> Result<(LossBreakdown, Vec<f64>), HeadError> {
        let mut outputs = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for m in batch.members() {
            let (o, c) = self.forward_cached(&m.proposal.features)?;
            outputs.push(o);
            caches.push(c);
        }
        let (breakdown, dout) = match self.shape.mode {
            LossMode::Flat => flat_loss(batch, &outputs, options.lambda)?,
            LossMode::Hierarchical => hierarchical_loss(batch, &outputs, options)?,
        };
        let mut grad = vec![0.0; self.params.len()];
        for (c, d) in caches.iter().zip(&dout) {
            self.backward(c, d, &mut grad);
        }
        Ok((breakdown, grad))
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "lightsign-head\tversion=1\tmode={}\tfeature_dim={}\thidden={}\tsubclasses={}",
            self.shape.mode.name(),
            self.shape.feature_dim,
            self.shape.hidden.map_or("none".to_string(), |h| h.to_string()),
            self.shape.subclasses
        );
        for (name, l) in self.layout.named() {
            for (part, start, end, rows, cols) in [
                ("weight", l.weight, l.bias, l.rows, l.cols),
                ("bias", l.bias, l.bias + l.rows, l.rows, 1),
            ] {
                let _ = writeln!(out, "tensor\t{name}.{part}\t{rows}\t{cols}");
                let values: Vec<String> = self.params[start..end].iter().map(|x| format!("{x:e}")).collect();
                out.push_str(&values.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), HeadError> {
        write_atomic(path, self.to_checkpoint().as_bytes())?;
        Ok(())
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, HeadError> {
        let bad = |m: &str| HeadError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty checkpoint"))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 6 || fields[0] != "lightsign-head" || fields[1] != "version=1" {
            return Err(bad("unrecognised header"));
        }
        let value = |i: usize, key: &str| -> Result<&str, HeadError> {
            fields[i]
                .strip_prefix(key)
                .and_then(|s| s.strip_prefix('='))
                .ok_or_else(|| HeadError::Checkpoint(format!("expected `{key}=` in header")))
        };
        let mode = match value(2, "mode")? {
            "flat" => LossMode::Flat,
            "hier" => LossMode::Hierarchical,
            other => return Err(HeadError::Checkpoint(format!("unknown mode `{other}`"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| HeadError::Checkpoint(format!("bad number `{s}`")));
        let feature_dim = num(value(3, "feature_dim")?)?;
        let hidden = match value(4, "hidden")? {
            "none" => None,
            s => Some(num(s)?),
        };
        let subclasses = num(value(5, "subclasses")?)?;
        let mut head = Head::zeros(HeadShape {
            feature_dim,
            hidden,
            subclasses,
            mode,
        });
        for (name, l) in head.layout.named() {
            for (part, start, end, rows, cols) in [
                ("weight", l.weight, l.bias, l.rows, l.cols),
                ("bias", l.bias, l.bias + l.rows, l.rows, 1),
            ] {
                let expect = format!("tensor\t{name}.{part}\t{rows}\t{cols}");
                if lines.next() != Some(expect.as_str()) {
                    return Err(HeadError::Checkpoint(format!("expected `{expect}`")));
                }
                let data = lines.next().ok_or_else(|| bad("truncated checkpoint"))?;
                let values: Vec<f64> = data
                    .split(' ')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|_| HeadError::Checkpoint(format!("bad value `{s}`"))))
                    .collect::<Result<_, _>>()?;
                if values.len() != end - start || values.iter().any(|v| !v.is_finite()) {
                    return Err(HeadError::Checkpoint(format!("tensor {name}.{part} has wrong size or non-finite values")));
                }
                head.params[start..end].copy_from_slice(&values);
            }
        }
        Ok(head)
    }

    pub fn load(path: &Path) -> Result<Self, HeadError> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: BatchConfig,
    pub loss: LossMode,
    /// Base regression weight; the hierarchical loss uses twice this value.
    pub lambda: f64,
    pub hidden: Option<usize>,
    pub count_background_in_n_dagger: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch: BatchConfig::default(),
            loss: LossMode::Hierarchical,
            lambda: 1.0,
            hidden: Some(64),
            count_background_in_n_dagger: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HeadError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HeadError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch.batch_size == 0 {
            return Err(HeadError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.batch.pos_fraction) {
            return Err(HeadError::Config("positive fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        let factor = match self.loss {
            LossMode::Flat => 1.0,
            LossMode::Hierarchical => 2.0,
        };
        LossOptions {
            lambda: self.lambda * factor,
            count_background_in_n_dagger: self.count_background_in_n_dagger,
        }
    }
}

/// One optimisation step on `batch`; returns the loss before the update.
pub fn train_step(head: &mut Head, batch: &MiniBatch, config: &TrainConfig, step: usize) -> Result<LossBreakdown, HeadError> {
    let (breakdown, grad) = head.loss_and_gradient(batch, &config.loss_options())?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(HeadError::NonFiniteGradient {
            step,
            detail: format!("parameter {i} has gradient {}", grad[i]),
        });
    }
    head.apply_momentum(&grad, config.learning_rate, config.momentum);
    Ok(breakdown)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub frame: u64,
    pub loss: LossRecord,
}

/// [`LossBreakdown`] without the per-member gates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub global_term: f64,
    pub subclass_term: f64,
    pub regression_term: f64,
    pub n_tot: usize,
    pub n_pos: usize,
    pub n_dagger: usize,
}

impl From<&LossBreakdown> for LossRecord {
    fn from(b: &LossBreakdown) -> Self {
        Self {
            total: b.total,
            global_term: b.global_term,
            subclass_term: b.subclass_term,
            regression_term: b.regression_term,
            n_tot: b.n_tot,
            n_pos: b.n_pos,
            n_dagger: b.n_dagger,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub median_total: f64,
    pub mean_total: f64,
    /// Total mAP on the held-out frames, when any were given.
    pub held_out_map: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,total,global_term,subclass_term,regression_term,n_tot,n_pos,n_dagger\n");
        for s in &self.steps {
            let l = &s.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.epoch, s.step, l.total, l.global_term, l.subclass_term, l.regression_term, l.n_tot, l.n_pos, l.n_dagger
            );
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,steps,median_total,mean_total,held_out_map\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch,
                e.steps,
                e.median_total,
                e.mean_total,
                e.held_out_map.map_or(String::new(), |m| m.to_string())
            );
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn head_shape(config: &TrainConfig, feature_dim: usize, taxonomy: &Taxonomy) -> HeadShape {
    HeadShape {
        feature_dim,
        hidden: config.hidden,
        subclasses: taxonomy.len(),
        mode: config.loss,
    }
}

/// Trains a fresh head on every frame of `dataset`.
///
/// Frames are visited in a seeded shuffled order each epoch; each frame is
/// turned into a mini-batch (skipped when empty) and used for one step. With
/// `held_out`, every epoch summary also records its total mAP.
pub fn train(
    dataset: &Dataset,
    taxonomy: &Taxonomy,
    config: &TrainConfig,
    held_out: Option<(&[Frame], &EvalConfig)>,
) -> Result<(Head, TrainLog), HeadError> {
    config.validate()?;
    if &dataset.taxonomy != taxonomy {
        return Err(HeadError::TaxonomyMismatch);
    }
    let oracle = FeatureOracle::new(&dataset.config, taxonomy);
    let shape = head_shape(config, oracle.dim(), taxonomy);
    let mut head = Head::init(shape, &mut stream(config.seed, "init", 0));
    let mut log = TrainLog::default();
    if dataset.frames.is_empty() {
        return Ok((head, log));
    }
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.frames.len()).collect();
        order.shuffle(&mut stream(config.seed, "shuffle", epoch as u64));
        let epoch_seed = derive_seed(config.seed, "proposals", epoch as u64);
        let mut totals = Vec::with_capacity(order.len());
        for &i in &order {
            let frame = &dataset.frames[i];
            let mut rng = stream(epoch_seed, "frame", frame.id);
            let batch = build_minibatch(frame, &oracle, taxonomy, &config.batch, &mut rng)?;
            if batch.is_empty() {
                continue;
            }
            let b = train_step(&mut head, &batch, config, step)?;
            totals.push(b.total);
            log.steps.push(StepRecord {
                epoch,
                step,
                frame: frame.id,
                loss: LossRecord::from(&b),
            });
            step += 1;
        }
        let held_out_map = held_out.map(|(frames, eval_cfg)| {
            let dets = infer_frames(&head, frames, &oracle, taxonomy, &eval_cfg.infer);
            evaluate(frames, &dets, taxonomy, eval_cfg).total_map.unwrap_or(0.0)
        });
        log.epochs.push(EpochSummary {
            epoch,
            steps: totals.len(),
            median_total: median(&totals),
            mean_total: if totals.is_empty() { f64::NAN } else { totals.iter().sum::<f64>() / totals.len() as f64 },
            held_out_map,
        });
    }
    Ok((head, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub subclass: usize,
    pub score: f64,
    pub frame: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub sampler: SamplerConfig,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            score_threshold: 0.01,
            nms_iou: crate::geometry::DEFAULT_NMS_IOU,
            seed: 0,
        }
    }
}

/// Predicted subclass and score for one proposal, or `None` for background.
pub fn classify(head: &Head, output: &HeadOutput, taxonomy: &Taxonomy) -> Option<(GlobalClass, usize, f64)> {
    match head.shape.mode {
        LossMode::Hierarchical => {
            let pg = softmax(&output.global);
            let g = GlobalClass::from_index(argmax(&output.global))?;
            let family = taxonomy.family(g);
            if family.is_empty() {
                return None;
            }
            let logits: Vec<f64> = family.iter().map(|&k| output.classes[k]).collect();
            let ps = softmax(&logits);
            let j = argmax(&logits);
            Some((g, family[j], pg[g.index()] * ps[j]))
        }
        LossMode::Flat => {
            let p = softmax(&output.classes);
            let k = argmax(&output.classes);
            if k >= taxonomy.len() {
                return None;
            }
            Some((taxonomy.global_of(k).ok()?, k, p[k]))
        }
    }
}

/// Detects objects in `frame`: classify every proposal, drop background,
/// regress the box, then per-class NMS and the score threshold.
pub fn infer<R: Rng>(
    head: &Head,
    frame: &Frame,
    oracle: &FeatureOracle,
    taxonomy: &Taxonomy,
    config: &InferConfig,
    rng: &mut R,
) -> Vec<Detection> {
    let proposals = crate::minibatch::sample_proposals(frame, oracle, &config.sampler, rng);
    let mut per_class: Vec<Vec<(BBox, f64)>> = vec![Vec::new(); taxonomy.len()];
    for p in &proposals {
        let Ok(out) = head.forward(&p.features) else { continue };
        let Some((_, k, score)) = classify(head, &out, taxonomy) else { continue };
        if score.is_nan() || score <= 0.0 || score < config.score_threshold {
            continue;
        }
        let Some(bbox) = decode_offsets(&out.delta.clamped(), &p.bbox).ok().and_then(|b| b.clip(frame.width, frame.height)) else {
            continue;
        };
        per_class[k].push((bbox, score.min(1.0)));
    }
    let mut dets = Vec::new();
    for (k, cands) in per_class.iter().enumerate() {
        for i in nms_indices(cands, config.nms_iou) {
            dets.push(Detection {
                bbox: cands[i].0,
                subclass: k,
                score: cands[i].1,
                frame: frame.id,
            });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.bbox.lex_cmp(&b.bbox)).then(a.subclass.cmp(&b.subclass)));
    dets
}

/// Runs [`infer`] over `frames` with per-frame seeded proposal streams.
pub fn infer_frames(
    head: &Head,
    frames: &[Frame],
    oracle: &FeatureOracle,
    taxonomy: &Taxonomy,
    config: &InferConfig,
) -> Vec<Detection> {
    frames
        .iter()
        .flat_map(|f| infer(head, f, oracle, taxonomy, config, &mut stream(config.seed, "infer", f.id)))
        .collect()
}
