//! Box IoU, AP@R40, orientation errors, and label-set evaluation.

pub mod harness;

use crate::geom::wrap_angle;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("box has non-positive or non-finite dimensions: {0:?}")]
    DegenerateBox([f64; 3]),
}

/// Yaw-rotated 3D box; `dims` = (length along heading, width, height).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3d {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl Box3d {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.dims.iter().all(|d| d.is_finite() && *d > 0.0) && self.center.iter().all(|c| c.is_finite()) && self.yaw.is_finite() {
            Ok(())
        } else {
            Err(MetricsError::DegenerateBox(self.dims))
        }
    }

    /// BEV corners, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.dims[0] / 2.0, self.dims[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.center[2] - self.dims[2] / 2.0, self.center[2] + self.dims[2] / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn area_bev(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let a = c * dx + s * dy;
        let b = -s * dx + c * dy;
        a.abs() <= self.dims[0] / 2.0 && b.abs() <= self.dims[1] / 2.0 && (p[2] - self.center[2]).abs() <= self.dims[2] / 2.0
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (p[i], p[(i + 1) % n]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    s.abs() / 2.0
}

/// Sutherland–Hodgman clip of a polygon against a convex counter-clockwise one.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn bev_intersection(a: &Box3d, b: &Box3d) -> f64 {
    polygon_area(&clip_convex(&a.corners_bev(), &b.corners_bev()))
}

pub fn iou_bev(a: &Box3d, b: &Box3d) -> Result<f64, MetricsError> {
    a.validate()?;
    b.validate()?;
    let inter = bev_intersection(a, b);
    Ok((inter / (a.area_bev() + b.area_bev() - inter)).clamp(0.0, 1.0))
}

pub fn iou_3d(a: &Box3d, b: &Box3d) -> Result<f64, MetricsError> {
    a.validate()?;
    b.validate()?;
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = bev_intersection(a, b) * dz;
    Ok((inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0))
}

/// `|wrap(pred - gt)|`; the dagger variant ignores front/back flips.
pub fn orientation_error(yaw_pred: f64, yaw_gt: f64, dagger: bool) -> f64 {
    let d = wrap_angle(yaw_pred - yaw_gt).abs();
    if dagger {
        d.min(PI - d)
    } else {
        d
    }
}

/// AP over 40 recall positions from predictions already flagged true/false
/// positive. `None` when there is no ground truth.
pub fn ap_r40(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&i, &j| scored[j].0.total_cmp(&scored[i].0));
    let mut curve = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += usize::from(scored[i].1);
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // running max of precision from the tail
    let mut best = vec![0.0f64; curve.len() + 1];
    for k in (0..curve.len()).rev() {
        best[k] = best[k + 1].max(curve[k].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 1..=40 {
        let r = r as f64 / 40.0;
        while k < curve.len() && curve[k].0 < r - 1e-12 {
            k += 1;
        }
        sum += best[k];
    }
    Some(sum / 40.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box3d, b: &Box3d) -> f64 {
        match self {
            IouKind::Bev => iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
        .unwrap_or(0.0)
    }
}

/// Greedy matching in descending confidence: each prediction takes the
/// highest-IoU unmatched ground truth if that IoU reaches `threshold`.
/// Returns, per prediction, the matched ground-truth index.
pub fn greedy_match(preds: &[(f64, Box3d)], gts: &[Box3d], kind: IouKind, threshold: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].0.total_cmp(&preds[i].0));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = kind.iou(&preds[i].1, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= threshold {
                taken[g] = true;
                out[i] = Some(g);
            }
        }
    }
    out
}

/// Predictions and ground truth of one scene.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    pub preds: Vec<(f64, Box3d)>,
    pub gts: Vec<Box3d>,
}

/// AP pooled across frames for one IoU kind and threshold.
pub fn ap_frames(frames: &[Frame], kind: IouKind, threshold: f64) -> Option<f64> {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        n_gt += f.gts.len();
        let m = greedy_match(&f.preds, &f.gts, kind, threshold);
        scored.extend(f.preds.iter().zip(&m).map(|((c, _), g)| (*c, g.is_some())));
    }
    ap_r40(&scored, n_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub kind: IouKind,
    pub threshold: f64,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Vec<ApEntry>,
    pub mean_iou_3d: f64,
    pub mean_iou_bev: f64,
    pub translation_error: f64,
    pub size_error: f64,
    pub orientation_error: f64,
    pub orientation_error_dagger: f64,
    /// Counts at 3D IoU and the first threshold.
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// `1 - IoU` after aligning centers and yaws.
pub fn size_error(a: &Box3d, b: &Box3d) -> f64 {
    let inter: f64 = (0..3).map(|k| a.dims[k].min(b.dims[k])).product();
    1.0 - inter / (a.volume() + b.volume() - inter)
}

/// AP per (kind, threshold). Errors and mean IoUs are averaged over pairs
/// matched with 3D IoU at the first threshold; with no matches they are 0.
pub fn evaluate(frames: &[Frame], thresholds: &[f64]) -> EvalReport {
    let mut ap = Vec::new();
    for kind in [IouKind::Bev, IouKind::ThreeD] {
        for &t in thresholds {
            ap.push(ApEntry {
                kind,
                threshold: t,
                ap: ap_frames(frames, kind, t),
            });
        }
    }
    let t0 = thresholds.first().copied().unwrap_or(0.5);
    let (mut tp, mut fp, mut n_gt) = (0, 0, 0);
    let mut sums = [0.0; 6];
    for f in frames {
        n_gt += f.gts.len();
        for (i, g) in greedy_match(&f.preds, &f.gts, IouKind::ThreeD, t0).into_iter().enumerate() {
            let Some(g) = g else {
                fp += 1;
                continue;
            };
            tp += 1;
            let (p, gt) = (&f.preds[i].1, &f.gts[g]);
            let d = (0..3).map(|k| (p.center[k] - gt.center[k]).powi(2)).sum::<f64>().sqrt();
            let vals = [
                IouKind::ThreeD.iou(p, gt),
                IouKind::Bev.iou(p, gt),
                d,
                size_error(p, gt),
                orientation_error(p.yaw, gt.yaw, false),
                orientation_error(p.yaw, gt.yaw, true),
            ];
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
        }
    }
    let mean = |s: f64| if tp == 0 { 0.0 } else { s / tp as f64 };
    EvalReport {
        ap,
        mean_iou_3d: mean(sums[0]),
        mean_iou_bev: mean(sums[1]),
        translation_error: mean(sums[2]),
        size_error: mean(sums[3]),
        orientation_error: mean(sums[4]),
        orientation_error_dagger: mean(sums[5]),
        tp,
        fp,
        fn_: n_gt - tp,
    }
}

impl EvalReport {
    pub fn ap_at(&self, kind: IouKind, threshold: f64) -> Option<f64> {
        self.ap.iter().find(|e| e.kind == kind && e.threshold == threshold).and_then(|e| e.ap)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for e in &self.ap {
            let k = match e.kind {
                IouKind::Bev => "BEV",
                IouKind::ThreeD => "3D",
            };
            let v = e.ap.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            s.push_str(&format!("AP_{k}@{:.2}  {v}\n", e.threshold));
        }
        s.push_str(&format!("mean IoU 3D   {:.4}\nmean IoU BEV  {:.4}\n", self.mean_iou_3d, self.mean_iou_bev));
        s.push_str(&format!("ATE (m)       {:.4}\nASE           {:.4}\n", self.translation_error, self.size_error));
        s.push_str(&format!("AOE (rad)     {:.4}\nAOE-dagger    {:.4}\n", self.orientation_error, self.orientation_error_dagger));
        s.push_str(&format!("TP {}  FP {}  FN {}\n", self.tp, self.fp, self.fn_));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, yaw: f64) -> Box3d {
        Box3d { center: [x, y, z], dims: [l, w, h], yaw }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert!((iou_3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = bx(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert!((iou_3d(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou_bev(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let c = bx(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0);
        assert!((iou_bev(&a, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!((iou_3d(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // square rotated 45 degrees inside its circumscribed square
        let r = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 4.0);
        let big = bx(0.0, 0.0, 0.0, 2f64.sqrt(), 2f64.sqrt(), 1.0, 0.0);
        assert!((iou_bev(&r, &big).unwrap() - 0.5).abs() < 1e-12);
        let far = bx(5.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.3);
        assert_eq!(iou_3d(&a, &far).unwrap(), 0.0);
        assert!(matches!(iou_3d(&a, &bx(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0)), Err(MetricsError::DegenerateBox(_))));
    }

    #[test]
    fn orientation_examples() {
        assert!((orientation_error(PI, 0.0, false) - PI).abs() < 1e-12);
        assert!(orientation_error(PI, 0.0, true).abs() < 1e-12);
        assert_eq!(orientation_error(0.3, 0.3, true), 0.0);
        assert!((orientation_error(PI / 4.0, 0.0, false) - PI / 4.0).abs() < 1e-15);
        assert!((orientation_error(PI / 4.0, 0.0, true) - PI / 4.0).abs() < 1e-15);
        for k in -360..=360 {
            let d = (k as f64).to_radians();
            let (s, g) = (orientation_error(d, 0.0, false), orientation_error(d, 0.0, true));
            assert!(g <= s + 1e-15 && (0.0..=PI / 2.0 + 1e-15).contains(&g) && (0.0..=PI + 1e-15).contains(&s));
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(ap_r40(&[(0.9, true), (0.1, true)], 2), Some(1.0));
        assert_eq!(ap_r40(&[(0.9, false)], 2), Some(0.0));
        assert_eq!(ap_r40(&[], 0), None);
        // 2 GT: TP, FP, TP -> precision 1 up to recall 1/2, then 2/3
        let ap = ap_r40(&[(0.9, true), (0.5, false), (0.2, true)], 2).unwrap();
        assert!((ap - (20.0 + 20.0 * 2.0 / 3.0) / 40.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_eval() {
        let gts = vec![bx(10.0, 1.0, 0.8, 4.0, 1.8, 1.5, 0.2), bx(20.0, -3.0, 0.7, 3.8, 1.7, 1.4, -2.0)];
        let frames = vec![Frame { preds: gts.iter().map(|b| (0.8, *b)).collect(), gts: gts.clone() }];
        let r = evaluate(&frames, &[0.5, 0.7]);
        assert!(r.ap.iter().all(|e| e.ap == Some(1.0)));
        assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
        assert_eq!(r.translation_error, 0.0);
        assert_eq!(r.orientation_error, 0.0);
        assert!(r.size_error.abs() < 1e-15);
        assert!((r.mean_iou_3d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matching_prefers_confident_and_best_iou() {
        let gts = vec![bx(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0)];
        let preds = vec![(0.2, bx(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0)), (0.9, bx(0.5, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0))];
        let m = greedy_match(&preds, &gts, IouKind::ThreeD, 0.5);
        assert_eq!(m, vec![None, Some(0)]);
    }

    fn arb_box() -> impl Strategy<Value = Box3d> {
        (-2.0..2.0f64, -2.0..2.0f64, -1.0..1.0f64, 0.5..4.0f64, 0.5..2.0f64, 0.5..2.0f64, -PI..PI)
            .prop_map(|(x, y, z, l, w, h, t)| bx(x, y, z, l, w, h, t))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (iou_3d(&a, &b).unwrap(), iou_3d(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
            let (ab, ba) = (iou_bev(&a, &b).unwrap(), iou_bev(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn iou_rigid_invariance(a in arb_box(), b in arb_box(), rho in -PI..PI) {
            let rot = |q: &Box3d| {
                let (s, c) = rho.sin_cos();
                bx(c * q.center[0] - s * q.center[1], s * q.center[0] + c * q.center[1], q.center[2], q.dims[0], q.dims[1], q.dims[2], q.yaw + rho)
            };
            prop_assert!((iou_3d(&a, &b).unwrap() - iou_3d(&rot(&a), &rot(&b)).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn ap_monotone_under_confident_hit(flags in proptest::collection::vec((0.0..1.0f64, any::<bool>()), 0..12), extra in 1usize..4) {
            let tp = flags.iter().filter(|f| f.1).count();
            let n_gt = tp + extra;
            let base = ap_r40(&flags, n_gt).unwrap();
            let mut more = flags.clone();
            more.push((2.0, true));
            prop_assert!(ap_r40(&more, n_gt).unwrap() >= base - 1e-15);
        }
    }
}
