//! Classification and regression losses with analytic gradients with respect
//! to the head's raw outputs.
//!
//! The flat loss is the usual two-stage detector objective over one
//! `(K + 1)`-way classifier. The hierarchical loss replaces it with a 3-way
//! global term over every member, a `K`-way subclass term that only counts
//! positives whose global class was predicted correctly (the gate `p†`), and
//! the same regression term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoxDelta;
use crate::minibatch::MiniBatch;
use crate::taxonomy::GlobalClass;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("non-finite logits")]
    NonFinite,
    #[error("label {label} out of range for {n} logits")]
    Label { label: usize, n: usize },
    #[error("{outputs} head outputs for {members} mini-batch members")]
    Misaligned { outputs: usize, members: usize },
    #[error("expected {expected} logits, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("positive member without a subclass or regression target")]
    MissingTarget,
}

/// Raw head outputs for one proposal.
///
/// In hierarchical layout `global` holds 3 logits (LIGHT, SIGN, BACKGROUND)
/// and `classes` holds K subclass logits. In flat layout `global` is empty
/// and `classes` holds K + 1 logits, background last.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadOutput {
    pub global: Vec<f64>,
    pub classes: Vec<f64>,
    pub delta: BoxDelta,
}

/// Gradient of a loss with respect to one [`HeadOutput`]; same layout.
pub type OutputGrad = HeadOutput;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Classification term: global CE (hierarchical) or the single CE (flat).
    pub global_term: f64,
    pub subclass_term: f64,
    pub regression_term: f64,
    pub n_tot: usize,
    pub n_pos: usize,
    pub n_dagger: usize,
    /// Per-member `p†`, positives first. All false in flat mode.
    pub gates: Vec<bool>,
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), LossError> {
    if label >= logits.len() {
        return Err(LossError::Label {
            label,
            n: logits.len(),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    let lse = m + sum.ln();
    let value = (lse - logits[label]).max(0.0);
    let mut grad: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((value, grad))
}

/// Summed per-coordinate smooth L1 of `t - v` and its gradient in `t`.
pub fn smooth_l1(t: &BoxDelta, v: &BoxDelta) -> (f64, [f64; 4]) {
    let (t, v) = (t.to_array(), v.to_array());
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for j in 0..4 {
        let x = t[j] - v[j];
        if x.abs() < 1.0 {
            value += 0.5 * x * x;
            grad[j] = x;
        } else {
            value += x.abs() - 0.5;
            grad[j] = x.signum();
        }
    }
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    /// Weight on the regression term, used as given.
    pub lambda: f64,
    /// Count correctly classified background members in `N†` (they add no loss).
    pub count_background_in_n_dagger: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            count_background_in_n_dagger: false,
        }
    }
}

fn zero_grads(outputs: &[HeadOutput]) -> Vec<OutputGrad> {
    outputs
        .iter()
        .map(|o| OutputGrad {
            global: vec![0.0; o.global.len()],
            classes: vec![0.0; o.classes.len()],
            delta: BoxDelta::default(),
        })
        .collect()
}

fn check_alignment(batch: &MiniBatch, outputs: &[HeadOutput]) -> Result<(), LossError> {
    if batch.len() != outputs.len() {
        return Err(LossError::Misaligned {
            outputs: outputs.len(),
            members: batch.len(),
        });
    }
    Ok(())
}

/// Adds the regression term; returns `(term, N+)`.
fn regression_term(
    batch: &MiniBatch,
    outputs: &[HeadOutput],
    lambda: f64,
    grads: &mut [OutputGrad],
) -> Result<(f64, usize), LossError> {
    let n_pos = batch.members().filter(|m| m.p_star).count();
    if n_pos == 0 {
        return Ok((0.0, 0));
    }
    let scale = lambda / n_pos as f64;
    let mut sum = 0.0;
    for (i, m) in batch.members().enumerate() {
        if !m.p_star {
            continue;
        }
        let target = m.regression.ok_or(LossError::MissingTarget)?;
        let (v, g) = smooth_l1(&outputs[i].delta, &target);
        sum += v;
        grads[i].delta = BoxDelta::from_array(g.map(|x| scale * x));
    }
    Ok((scale * sum, n_pos))
}

/// Flat objective: `(1/N_tot) Σ CE(p_i, u_i) + λ (1/N+) Σ p*_i L1s(t_i, v_i)`.
pub fn flat_loss(
    batch: &MiniBatch,
    outputs: &[HeadOutput],
    lambda: f64,
) -> Result<(LossBreakdown, Vec<OutputGrad>), LossError> {
    check_alignment(batch, outputs)?;
    let mut grads = zero_grads(outputs);
    let n_tot = batch.len();
    let mut cls = 0.0;
    if n_tot > 0 {
        let inv = 1.0 / n_tot as f64;
        for (i, m) in batch.members().enumerate() {
            let n_classes = outputs[i].classes.len();
            let label = match m.global {
                GlobalClass::Background => n_classes.saturating_sub(1),
                _ => m.subclass.ok_or(LossError::MissingTarget)?,
            };
            let (v, g) = cross_entropy(&outputs[i].classes, label)?;
            cls += v;
            grads[i].classes = g.into_iter().map(|x| inv * x).collect();
        }
        cls *= inv;
    }
    let (reg, n_pos) = regression_term(batch, outputs, lambda, &mut grads)?;
    Ok((
        LossBreakdown {
            total: cls + reg,
            global_term: cls,
            subclass_term: 0.0,
            regression_term: reg,
            n_tot,
            n_pos,
            n_dagger: 0,
            gates: vec![false; n_tot],
        },
        grads,
    ))
}

/// Hierarchical objective with the `p†` gate on the subclass term. The gate
/// is read off `argmax(global)` and treated as a constant.
pub fn hierarchical_loss(
    batch: &MiniBatch,
    outputs: &[HeadOutput],
    options: &LossOptions,
) -> Result<(LossBreakdown, Vec<OutputGrad>), LossError> {
    check_alignment(batch, outputs)?;
    let mut grads = zero_grads(outputs);
    let n_tot = batch.len();
    let mut gates = Vec::with_capacity(n_tot);
    let mut global_sum = 0.0;
    let mut n_dagger = 0;
    let inv_tot = if n_tot > 0 { 1.0 / n_tot as f64 } else { 0.0 };
    for (i, m) in batch.members().enumerate() {
        let o = &outputs[i];
        if o.global.len() != GlobalClass::COUNT {
            return Err(LossError::Shape {
                expected: GlobalClass::COUNT,
                got: o.global.len(),
            });
        }
        let (v, g) = cross_entropy(&o.global, m.global.index())?;
        global_sum += v;
        grads[i].global = g.into_iter().map(|x| inv_tot * x).collect();
        let correct = argmax(&o.global) == m.global.index();
        let gate = correct && m.global != GlobalClass::Background;
        if gate || (correct && options.count_background_in_n_dagger) {
            n_dagger += 1;
        }
        gates.push(gate);
    }
    let global_term = global_sum * inv_tot;

    let mut subclass_term = 0.0;
    if n_dagger > 0 {
        let inv = 1.0 / n_dagger as f64;
        let mut sum = 0.0;
        for (i, m) in batch.members().enumerate() {
            if !gates[i] {
                continue;
            }
            let label = m.subclass.ok_or(LossError::MissingTarget)?;
            let (v, g) = cross_entropy(&outputs[i].classes, label)?;
            sum += v;
            grads[i].classes = g.into_iter().map(|x| inv * x).collect();
        }
        subclass_term = sum * inv;
    }

    let (reg, n_pos) = regression_term(batch, outputs, options.lambda, &mut grads)?;
    Ok((
        LossBreakdown {
            total: global_term + subclass_term + reg,
            global_term,
            subclass_term,
            regression_term: reg,
            n_tot,
            n_pos,
            n_dagger,
            gates,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::minibatch::{Labeled, Proposal};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn member(global: GlobalClass, subclass: Option<usize>, v: Option<BoxDelta>) -> Labeled {
        Labeled {
            proposal: Proposal {
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                features: vec![],
                max_iou: if subclass.is_some() { 0.8 } else { 0.0 },
                matched: subclass.map(|_| 0),
            },
            global,
            subclass,
            regression: v,
            p_star: subclass.is_some(),
        }
    }

    #[test]
    fn cross_entropy_values() {
        let (v, _) = cross_entropy(&[0.3; 7], 2).unwrap();
        assert!((v - 7f64.ln()).abs() < 1e-12);
        let (v, g) = cross_entropy(&[500.0, 0.0, 0.0], 0).unwrap();
        assert!(v < 1e-200);
        assert!(g.iter().all(|x| x.abs() < 1e-200));
        assert_eq!(cross_entropy(&[f64::NAN, 0.0], 0), Err(LossError::NonFinite));
        assert!(matches!(cross_entropy(&[0.0], 1), Err(LossError::Label { .. })));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = cross_entropy(&logits, 3).unwrap();
        let h = 1e-5;
        for j in 0..5 {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[j] += h;
            dn[j] -= h;
            let num = (cross_entropy(&up, 3).unwrap().0 - cross_entropy(&dn, 3).unwrap().0) / (2.0 * h);
            assert!((num - g[j]).abs() / g[j].abs().max(num.abs()) < 1e-6);
        }
    }

    #[test]
    fn smooth_l1_values() {
        let z = BoxDelta::default();
        assert_eq!(smooth_l1(&z, &z).0, 0.0);
        assert_eq!(smooth_l1(&BoxDelta::new(0.5, 0.0, 0.0, 0.0), &z).0, 0.125);
        let (v, g) = smooth_l1(&BoxDelta::new(2.0, 0.0, 0.0, 0.0), &z);
        assert_eq!(v, 1.5);
        assert_eq!(g, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn flat_single_negative_uniform() {
        let batch = MiniBatch {
            positives: vec![],
            negatives: vec![member(GlobalClass::Background, None, None)],
        };
        let out = vec![HeadOutput {
            global: vec![],
            classes: vec![0.0; 51],
            delta: BoxDelta::new(0.3, 0.1, 0.0, 0.0),
        }];
        let (l, g) = flat_loss(&batch, &out, 1.0).unwrap();
        assert!((l.total - 51f64.ln()).abs() < 1e-12);
        assert_eq!(l.regression_term, 0.0);
        assert_eq!(g[0].delta, BoxDelta::default());
    }

    #[test]
    fn hierarchical_gate_closes_on_wrong_global() {
        let v = BoxDelta::new(0.1, 0.0, 0.0, 0.0);
        let batch = MiniBatch {
            positives: vec![member(GlobalClass::Light, Some(1), Some(v))],
            negatives: vec![],
        };
        let out = vec![HeadOutput {
            global: vec![0.0, 2.0, 0.0],
            classes: vec![0.0; 50],
            delta: BoxDelta::default(),
        }];
        let (l, g) = hierarchical_loss(&batch, &out, &LossOptions { lambda: 2.0, ..Default::default() }).unwrap();
        assert_eq!(l.gates, vec![false]);
        assert_eq!(l.subclass_term, 0.0);
        assert_eq!(l.n_dagger, 0);
        let ce = cross_entropy(&[0.0, 2.0, 0.0], 0).unwrap().0;
        assert!((l.total - (ce + 2.0 * 0.5 * 0.01)).abs() < 1e-12);
        assert!(g[0].classes.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hierarchical_uniform_subclass_term() {
        let batch = MiniBatch {
            positives: vec![member(GlobalClass::Sign, Some(30), Some(BoxDelta::default()))],
            negatives: vec![],
        };
        let out = vec![HeadOutput {
            global: vec![0.0, 3.0, 0.0],
            classes: vec![0.0; 50],
            delta: BoxDelta::default(),
        }];
        let (l, _) = hierarchical_loss(&batch, &out, &LossOptions::default()).unwrap();
        assert_eq!(l.gates, vec![true]);
        assert!((l.subclass_term - 50f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn background_counting_option() {
        let batch = MiniBatch {
            positives: vec![member(GlobalClass::Sign, Some(30), Some(BoxDelta::default()))],
            negatives: vec![member(GlobalClass::Background, None, None)],
        };
        let out = vec![
            HeadOutput {
                global: vec![0.0, 3.0, 0.0],
                classes: vec![0.0; 50],
                delta: BoxDelta::default(),
            },
            HeadOutput {
                global: vec![0.0, 0.0, 3.0],
                classes: vec![0.0; 50],
                delta: BoxDelta::default(),
            },
        ];
        let excl = hierarchical_loss(&batch, &out, &LossOptions::default()).unwrap().0;
        let incl = hierarchical_loss(
            &batch,
            &out,
            &LossOptions {
                count_background_in_n_dagger: true,
                ..Default::default()
            },
        )
        .unwrap()
        .0;
        assert_eq!((excl.n_dagger, incl.n_dagger), (1, 2));
        assert!((incl.subclass_term - excl.subclass_term / 2.0).abs() < 1e-12);
    }

    #[test]
    fn misaligned_outputs_rejected() {
        let batch = MiniBatch {
            positives: vec![],
            negatives: vec![member(GlobalClass::Background, None, None)],
        };
        assert!(matches!(flat_loss(&batch, &[], 1.0), Err(LossError::Misaligned { .. })));
    }
}
