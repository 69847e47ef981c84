//! Independent reference implementations and random instance builders shared
//! by the integration suites.
#![allow(dead_code)]

use lightsign::eval::{average_precision, match_detections, PrCurve};
use lightsign::geometry::{BBox, BoxDelta};
use lightsign::head::Detection;
use lightsign::losses::{flat_loss, hierarchical_loss, HeadOutput, LossOptions};
use lightsign::minibatch::{select, Labeled, MiniBatch, Proposal, SelectMode, SelectionWindows};
use lightsign::dataset::Annotation;
use lightsign::taxonomy::GlobalClass;
use rand::Rng;

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.coords();
    let [bx1, by1, bx2, by2] = b.coords();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Integer-cornered random box inside a 100 x 100 canvas.
pub fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let x1 = rng.random_range(0..90) as f64;
    let y1 = rng.random_range(0..90) as f64;
    let w = rng.random_range(1..=(100 - x1 as i32).min(40)) as f64;
    let h = rng.random_range(1..=(100 - y1 as i32).min(40)) as f64;
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// A box near `b`: an exact copy, a shifted copy, or a fresh random box.
pub fn near_box<R: Rng>(rng: &mut R, b: &BBox) -> BBox {
    match rng.random_range(0..4) {
        0 => *b,
        1 | 2 => {
            let s = rng.random_range(-8..=8) as f64;
            let t = rng.random_range(-8..=8) as f64;
            BBox::new(b.x1() + s, b.y1() + t, b.x2() + s, b.y2() + t).unwrap()
        }
        _ => random_box(rng),
    }
}

/// Checks both selection rules against a per-proposal, per-GT brute force on
/// `cases` random instances. Returns the number of instances checked.
pub fn check_selection<R: Rng>(rng: &mut R, cases: usize) -> Result<usize, String> {
    let w = SelectionWindows::default();
    for case in 0..cases {
        let n_gt = rng.random_range(0..=3);
        let gt: Vec<Annotation> = (0..n_gt)
            .map(|_| Annotation { bbox: random_box(rng), subclass: 0, visible: true })
            .collect();
        let n_prop = rng.random_range(0..=10);
        let boxes: Vec<BBox> = (0..n_prop)
            .map(|_| if gt.is_empty() { random_box(rng) } else { { let j = rng.random_range(0..gt.len()); near_box(rng, &gt[j].bbox) } })
            .collect();
        let proposals: Vec<Proposal> = boxes.iter().map(|b| Proposal::new(*b, Vec::new(), &gt)).collect();

        let mut pos = Vec::new();
        let mut neg5 = Vec::new();
        let mut neg6 = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            let mut m: f64 = 0.0;
            for g in &gt {
                m = m.max(oracle_iou(b, &g.bbox));
            }
            if (0.7..=1.0).contains(&m) {
                pos.push(i);
            }
            if (0.0..=0.3).contains(&m) {
                neg5.push(i);
            }
            if (0.01..=0.3).contains(&m) {
                neg6.push(i);
            }
        }
        let b = select(&proposals, &w, SelectMode::Baseline);
        let t = select(&proposals, &w, SelectMode::BackgroundThreshold);
        if b.positives != pos || b.negatives != neg5 {
            return Err(format!("case {case}: baseline selection {b:?} vs oracle pos {pos:?} neg {neg5:?}"));
        }
        if t.positives != pos || t.negatives != neg6 {
            return Err(format!("case {case}: threshold selection {t:?} vs oracle pos {pos:?} neg {neg6:?}"));
        }
        if !t.negatives.iter().all(|i| b.negatives.contains(i)) {
            return Err(format!("case {case}: threshold negatives not a subset of baseline negatives"));
        }
        if b.positives.iter().any(|i| b.negatives.contains(i)) {
            return Err(format!("case {case}: proposal in both sets"));
        }
    }
    Ok(cases)
}

/// Reference greedy matcher: rank by score then box, and let each detection
/// take the best remaining same-class GT at or above the threshold.
pub fn oracle_match(dets: &[Detection], gt: &[(BBox, usize)], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].bbox.coords().partial_cmp(&dets[b].bbox.coords()).unwrap())
            .then(dets[a].subclass.cmp(&dets[b].subclass))
            .then(a.cmp(&b))
    });
    let mut used = vec![false; gt.len()];
    let mut flags = vec![false; dets.len()];
    for i in order {
        let candidates: Vec<(usize, f64)> = gt
            .iter()
            .enumerate()
            .filter(|(j, (_, k))| !used[*j] && *k == dets[i].subclass)
            .map(|(j, (g, _))| (j, oracle_iou(&dets[i].bbox, g)))
            .filter(|(_, o)| *o >= thr)
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (j, o) in candidates {
            if best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// All-point AP by direct enumeration: for every TP rank, the best
/// precision achieved at that rank or any later one, averaged over GT.
pub fn oracle_ap(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let precisions: Vec<f64> = (0..s.len())
        .map(|i| s[..=i].iter().filter(|x| x.1).count() as f64 / (i + 1) as f64)
        .collect();
    let mut total = 0.0;
    for i in 0..s.len() {
        if s[i].1 {
            total += precisions[i..].iter().copied().fold(0.0, f64::max);
        }
    }
    total / n_gt as f64
}

/// Matching and AP against the reference on `cases` random instances with
/// at most 6 detections and 3 GT.
pub fn check_evaluator<R: Rng>(rng: &mut R, cases: usize) -> Result<usize, String> {
    for case in 0..cases {
        let gt: Vec<(BBox, usize)> = (0..rng.random_range(0..=3)).map(|_| (random_box(rng), rng.random_range(0..2))).collect();
        let dets: Vec<Detection> = (0..rng.random_range(0..=6))
            .map(|_| {
                let bbox = if gt.is_empty() { random_box(rng) } else { { let j = rng.random_range(0..gt.len()); near_box(rng, &gt[j].0) } };
                Detection { bbox, subclass: rng.random_range(0..2), score: rng.random_range(1..=1000) as f64 / 1000.0, frame: 0 }
            })
            .collect();
        let got = match_detections(&dets, &gt, 0.5);
        let want = oracle_match(&dets, &gt, 0.5);
        if got != want {
            return Err(format!("case {case}: match {got:?} vs oracle {want:?}"));
        }
        for k in 0..2 {
            let n_gt = gt.iter().filter(|g| g.1 == k).count();
            if n_gt == 0 {
                continue;
            }
            let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].subclass == k).collect();
            // equal scores: keep the matcher's canonical order so both sides rank ties alike
            idx.sort_by(|&a, &b| {
                dets[b].score.partial_cmp(&dets[a].score).unwrap().then(dets[a].bbox.coords().partial_cmp(&dets[b].bbox.coords()).unwrap())
            });
            let scored: Vec<(f64, bool)> = idx.iter().map(|&i| (dets[i].score, got[i])).collect();
            let ap = average_precision(&PrCurve::from_scored(&scored, n_gt)).unwrap();
            let want = oracle_ap(&scored, n_gt);
            if (ap - want).abs() > 1e-9 {
                return Err(format!("case {case} class {k}: AP {ap} vs oracle {want}"));
            }
        }
    }
    Ok(cases)
}

fn labeled(global: GlobalClass, subclass: Option<usize>, target: Option<BoxDelta>) -> Labeled {
    Labeled {
        proposal: Proposal {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            features: Vec::new(),
            max_iou: if subclass.is_some() { 0.8 } else { 0.1 },
            matched: subclass.map(|_| 0),
        },
        global,
        subclass,
        regression: target,
        p_star: target.is_some(),
    }
}

/// Random labeled batch over 2 light + 3 sign subclasses, with raw outputs
/// in either layout. Regression residuals stay clear of the smooth-L1 kink.
pub fn random_loss_case<R: Rng>(rng: &mut R, flat: bool) -> (MiniBatch, Vec<HeadOutput>) {
    let k = 5;
    let mut batch = MiniBatch::default();
    let n_pos = rng.random_range(0..6);
    let n_neg = rng.random_range(if n_pos == 0 { 1 } else { 0 }..6);
    let mut outputs = Vec::new();
    let output = |rng: &mut R| {
        let delta = BoxDelta::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        if flat {
            HeadOutput { global: Vec::new(), classes: (0..=k).map(|_| rng.random_range(-3.0..3.0)).collect(), delta }
        } else {
            HeadOutput {
                global: (0..3).map(|_| rng.random_range(-3.0..3.0)).collect(),
                classes: (0..k).map(|_| rng.random_range(-3.0..3.0)).collect(),
                delta,
            }
        }
    };
    for _ in 0..n_pos {
        let sub = rng.random_range(0..k);
        let global = if sub < 2 { GlobalClass::Light } else { GlobalClass::Sign };
        let o = output(rng);
        // keep every residual at least 0.01 away from |x| = 1
        let mut t = [0.0; 4];
        for (ti, pi) in t.iter_mut().zip(o.delta.to_array()) {
            loop {
                let c = rng.random_range(-1.5..1.5);
                if ((pi - c).abs() - 1.0).abs() > 0.01 {
                    *ti = c;
                    break;
                }
            }
        }
        let target = rng.random_bool(0.8).then_some(BoxDelta::from_array(t));
        batch.positives.push(labeled(global, Some(sub), target));
        outputs.push(o);
    }
    for _ in 0..n_neg {
        batch.negatives.push(labeled(GlobalClass::Background, None, None));
        outputs.push(output(rng));
    }
    (batch, outputs)
}

/// True when every member's top global logit leads the runner-up by `margin`.
pub fn gate_stable(outputs: &[HeadOutput], margin: f64) -> bool {
    outputs.iter().all(|o| {
        if o.global.is_empty() {
            return true;
        }
        let mut g = o.global.clone();
        g.sort_by(|a, b| b.partial_cmp(a).unwrap());
        g[0] - g[1] > margin
    })
}

fn total(batch: &MiniBatch, outputs: &[HeadOutput], flat: bool) -> f64 {
    let opts = LossOptions { lambda: if flat { 1.0 } else { 2.0 }, ..Default::default() };
    if flat {
        flat_loss(batch, outputs, opts.lambda).unwrap().0.total
    } else {
        hierarchical_loss(batch, outputs, &opts).unwrap().0.total
    }
}

/// Largest relative error between analytic and central-difference
/// gradients over every output coordinate of one batch.
pub fn max_gradient_error(batch: &MiniBatch, outputs: &[HeadOutput], flat: bool, h: f64) -> f64 {
    let opts = LossOptions { lambda: if flat { 1.0 } else { 2.0 }, ..Default::default() };
    let grads = if flat {
        flat_loss(batch, outputs, opts.lambda).unwrap().1
    } else {
        hierarchical_loss(batch, outputs, &opts).unwrap().1
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut worst: f64 = 0.0;
    for i in 0..outputs.len() {
        for j in 0..outputs[i].global.len() {
            let (mut up, mut dn) = (outputs.to_vec(), outputs.to_vec());
            up[i].global[j] += h;
            dn[i].global[j] -= h;
            let n = (total(batch, &up, flat) - total(batch, &dn, flat)) / (2.0 * h);
            worst = worst.max(rel(grads[i].global[j], n));
        }
        for j in 0..outputs[i].classes.len() {
            let (mut up, mut dn) = (outputs.to_vec(), outputs.to_vec());
            up[i].classes[j] += h;
            dn[i].classes[j] -= h;
            let n = (total(batch, &up, flat) - total(batch, &dn, flat)) / (2.0 * h);
            worst = worst.max(rel(grads[i].classes[j], n));
        }
        for j in 0..4 {
            let (mut up, mut dn) = (outputs.to_vec(), outputs.to_vec());
            let mut a = up[i].delta.to_array();
            a[j] += h;
            up[i].delta = BoxDelta::from_array(a);
            let mut b = dn[i].delta.to_array();
            b[j] -= h;
            dn[i].delta = BoxDelta::from_array(b);
            let n = (total(batch, &up, flat) - total(batch, &dn, flat)) / (2.0 * h);
            worst = worst.max(rel(grads[i].delta.to_array()[j], n));
        }
    }
    worst
}
