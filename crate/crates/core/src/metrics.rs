//! Point-tracking, segmentation and flow metrics.

use std::fmt::Write as _;

use crate::correspondence::FlowField;
use crate::error::{Error, Result};

/// How per-point outcomes are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// One fraction over every visible point of every video.
    AllPoints,
    /// Fraction per video, then the mean over videos.
    PerVideoMean,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::AllPoints => "all-points",
            Aggregation::PerVideoMean => "per-video-mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub per_video: Vec<f64>,
    pub aggregation: Aggregation,
}

/// Predicted and ground-truth trajectories of one video, indexed
/// `[point][frame]`, in image pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoTracks {
    pub pred: Vec<Vec<(f32, f32)>>,
    pub gt: Vec<Vec<(f32, f32)>>,
    pub visible: Vec<Vec<bool>>,
    /// Per-frame scale `A` for PCK; unused by the other metrics.
    pub scale: Vec<f64>,
}

impl VideoTracks {
    fn check(&self) -> Result<()> {
        if self.pred.len() != self.gt.len() || self.gt.len() != self.visible.len() {
            return Err(Error::invalid("tracks: point counts differ"));
        }
        for ((p, g), v) in self.pred.iter().zip(&self.gt).zip(&self.visible) {
            if p.len() != g.len() || g.len() != v.len() {
                return Err(Error::invalid("tracks: frame counts differ"));
            }
        }
        Ok(())
    }

    fn errors(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pred
            .iter()
            .zip(&self.gt)
            .zip(&self.visible)
            .flat_map(|((p, g), v)| {
                p.iter().zip(g).zip(v).enumerate().filter(|(_, (_, &vis))| vis).map(|(t, ((a, b), _))| {
                    let (du, dv) = ((a.0 - b.0) as f64, (a.1 - b.1) as f64);
                    (t, (du * du + dv * dv).sqrt())
                })
            })
    }
}

fn aggregate(name: String, hits: &[(f64, usize)], agg: Aggregation) -> Result<EvalReport> {
    let total: usize = hits.iter().map(|h| h.1).sum();
    if total == 0 {
        return Err(Error::NoValidPixels("no visible points"));
    }
    let per_video: Vec<f64> = hits
        .iter()
        .filter(|h| h.1 > 0)
        .map(|(s, n)| s / *n as f64)
        .collect();
    let value = match agg {
        Aggregation::AllPoints => hits.iter().map(|h| h.0).sum::<f64>() / total as f64,
        Aggregation::PerVideoMean => per_video.iter().sum::<f64>() / per_video.len() as f64,
    };
    Ok(EvalReport {
        metric: name,
        value,
        per_video,
        aggregation: agg,
    })
}

/// Fraction of visible points with `|pred - gt| <= alpha * sqrt(A)`.
pub fn pck(videos: &[VideoTracks], alpha: f64, agg: Aggregation) -> Result<EvalReport> {
    let mut hits = Vec::with_capacity(videos.len());
    for v in videos {
        v.check()?;
        let frames = v.gt.first().map_or(0, |g| g.len());
        if v.scale.len() != frames || v.scale.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("pck: need a positive scale A per frame"));
        }
        let (mut s, mut n) = (0.0, 0);
        for (t, e) in v.errors() {
            n += 1;
            if e <= alpha * v.scale[t].sqrt() {
                s += 1.0;
            }
        }
        hits.push((s, n));
    }
    aggregate(format!("pck@{alpha}"), &hits, agg)
}

pub const DELTA_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Mean over `thresholds` of the fraction of visible points with error
/// strictly below the threshold.
pub fn delta_avg(videos: &[VideoTracks], thresholds: &[f64], agg: Aggregation) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::invalid("delta_avg needs at least one threshold"));
    }
    let mut hits = Vec::with_capacity(videos.len());
    for v in videos {
        v.check()?;
        let (mut s, mut n) = (0.0, 0);
        for (_, e) in v.errors() {
            n += 1;
            s += thresholds.iter().filter(|&&th| e < th).count() as f64 / thresholds.len() as f64;
        }
        hits.push((s, n));
    }
    aggregate("delta_avg".into(), &hits, agg)
}

fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_masks(pred: &[Vec<u8>], gt: &[Vec<u8>]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid("mask sequences must be non-empty and of equal length"));
    }
    if pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::invalid("mask extents differ"));
    }
    Ok(())
}

fn object_mask(labels: &[u8], obj: u8) -> Vec<bool> {
    labels.iter().map(|&l| l == obj).collect()
}

/// Mean IoU over objects `1..=objects` and frames. A frame where both masks
/// of an object are empty scores 1.
pub fn jaccard(pred: &[Vec<u8>], gt: &[Vec<u8>], objects: u8) -> Result<EvalReport> {
    check_masks(pred, gt)?;
    let mut per_object = Vec::new();
    for obj in 1..=objects {
        let s: f64 = pred
            .iter()
            .zip(gt)
            .map(|(p, g)| iou(&object_mask(p, obj), &object_mask(g, obj)))
            .sum();
        per_object.push(s / pred.len() as f64);
    }
    let value = per_object.iter().sum::<f64>() / per_object.len().max(1) as f64;
    Ok(EvalReport {
        metric: "J".into(),
        value,
        per_video: vec![value],
        aggregation: Aggregation::AllPoints,
    })
}

/// Mask pixels with a 4-neighbour outside the mask (image border counts as outside).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let outside = |yy: isize, xx: isize| {
                yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || !mask[yy as usize * w + xx as usize]
            };
            let (yi, xi) = (y as isize, x as isize);
            out[y * w + x] = outside(yi - 1, xi) || outside(yi + 1, xi) || outside(yi, xi - 1) || outside(yi, xi + 1);
        }
    }
    out
}

/// Square dilation by `r` pixels.
pub fn dilate(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|xx| mask[y * w + xx]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

fn f_measure(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: usize) -> f64 {
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let (dp, dg) = (dilate(&bp, h, w, tol), dilate(&bg, h, w, tol));
    let precision = bp.iter().zip(&dg).filter(|(a, b)| **a && **b).count() as f64 / np as f64;
    let recall = bg.iter().zip(&dp).filter(|(a, b)| **a && **b).count() as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Boundary F-measure with matches accepted within `tol` pixels.
pub fn boundary_f(pred: &[Vec<u8>], gt: &[Vec<u8>], h: usize, w: usize, objects: u8, tol: usize) -> Result<EvalReport> {
    check_masks(pred, gt)?;
    if pred[0].len() != h * w {
        return Err(Error::shape("boundary_f", &[h * w], &[pred[0].len()]));
    }
    let mut per_object = Vec::new();
    for obj in 1..=objects {
        let s: f64 = pred
            .iter()
            .zip(gt)
            .map(|(p, g)| f_measure(&object_mask(p, obj), &object_mask(g, obj), h, w, tol))
            .sum();
        per_object.push(s / pred.len() as f64);
    }
    let value = per_object.iter().sum::<f64>() / per_object.len().max(1) as f64;
    Ok(EvalReport {
        metric: "F".into(),
        value,
        per_video: vec![value],
        aggregation: Aggregation::AllPoints,
    })
}

/// Mean endpoint error over `valid` pixels.
pub fn epe(pred: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<f64> {
    if pred.vectors().shape() != gt.vectors().shape() || valid.len() != gt.h() * gt.w() {
        return Err(Error::shape("epe", gt.vectors().shape(), pred.vectors().shape()));
    }
    let (mut s, mut n) = (0.0f64, 0usize);
    for ((p, g), &ok) in pred.vectors().data().chunks(2).zip(gt.vectors().data().chunks(2)).zip(valid) {
        if ok {
            let (du, dv) = ((p[0] - g[0]) as f64, (p[1] - g[1]) as f64);
            s += (du * du + dv * dv).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels("epe"));
    }
    Ok(s / n as f64)
}

/// Aligned text table followed by `name=value` lines.
pub fn format_reports(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>12} {:>16} {:>7}", "metric", "value", "aggregation", "videos");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:>12.6} {:>16} {:>7}",
            r.metric,
            r.value,
            r.aggregation.to_string(),
            r.per_video.len()
        );
    }
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}.{}={}", r.metric, r.aggregation, r.value);
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::Tensor;

    fn video(errs: &[f32]) -> VideoTracks {
        let gt: Vec<Vec<(f32, f32)>> = errs.iter().map(|_| vec![(10.0, 10.0)]).collect();
        let pred = errs.iter().map(|&e| vec![(10.0 + e, 10.0)]).collect();
        VideoTracks {
            visible: vec![vec![true]; errs.len()],
            pred,
            gt,
            scale: vec![100.0],
        }
    }

    #[test]
    fn pck_examples() {
        let exact = video(&[0.0, 0.0]);
        assert_eq!(pck(&[exact], 0.1, Aggregation::AllPoints).unwrap().value, 1.0);
        // alpha * sqrt(A) = 1.0
        let off = video(&[1.0 + 1e-4, 1.0 + 1e-4]);
        assert_eq!(pck(&[off], 0.1, Aggregation::AllPoints).unwrap().value, 0.0);
        let half = video(&[0.0, 50.0]);
        assert_eq!(pck(&[half], 0.1, Aggregation::AllPoints).unwrap().value, 0.5);
    }

    #[test]
    fn delta_examples() {
        let d = |e: f32| delta_avg(&[video(&[e, e])], &DELTA_THRESHOLDS, Aggregation::AllPoints).unwrap().value;
        assert_eq!(d(0.0), 1.0);
        assert!((d(3.0) - 0.6).abs() < 1e-9);
        assert_eq!(d(20.0), 0.0);
        let mut hidden = video(&[0.0]);
        hidden.visible[0][0] = false;
        assert!(delta_avg(&[hidden], &DELTA_THRESHOLDS, Aggregation::AllPoints).is_err());
    }

    #[test]
    fn aggregation_modes_differ_as_documented() {
        // video A: 1 point exact; video B: 3 points, all far
        let a = video(&[0.0]);
        let b = video(&[30.0, 30.0, 30.0]);
        let all = delta_avg(&[a.clone(), b.clone()], &DELTA_THRESHOLDS, Aggregation::AllPoints).unwrap();
        let per = delta_avg(&[a, b], &DELTA_THRESHOLDS, Aggregation::PerVideoMean).unwrap();
        assert_eq!(all.value, 0.25);
        assert_eq!(per.value, 0.5);
        assert_eq!(per.per_video, vec![1.0, 0.0]);
    }

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<u8> {
        (0..h * w)
            .map(|i| ((y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))) as u8)
            .collect()
    }

    #[test]
    fn jaccard_examples() {
        let a = rect(10, 10, 2, 6, 2, 6);
        assert_eq!(jaccard(&[a.clone()], &[a.clone()], 1).unwrap().value, 1.0);
        let far = rect(10, 10, 7, 9, 7, 9);
        assert_eq!(jaccard(&[a.clone()], &[far], 1).unwrap().value, 0.0);
        // 4x4 squares overlapping in a 4x2 strip
        let shifted = rect(10, 10, 2, 6, 4, 8);
        assert!((jaccard(&[a], &[shifted], 1).unwrap().value - 1.0 / 3.0).abs() < 1e-12);
        let empty = vec![0u8; 100];
        assert_eq!(jaccard(&[empty.clone()], &[empty], 1).unwrap().value, 1.0);
    }

    #[test]
    fn boundary_f_examples() {
        let gt = rect(20, 20, 4, 16, 4, 16);
        assert_eq!(boundary_f(&[gt.clone()], &[gt.clone()], 20, 20, 1, 2).unwrap().value, 1.0);
        let inner = rect(20, 20, 5, 15, 5, 15);
        assert_eq!(boundary_f(&[inner], &[gt.clone()], 20, 20, 1, 2).unwrap().value, 1.0);
        let far = rect(20, 20, 0, 2, 0, 2);
        let small = rect(20, 20, 17, 20, 17, 20);
        assert_eq!(boundary_f(&[far], &[small], 20, 20, 1, 2).unwrap().value, 0.0);
    }

    #[test]
    fn epe_examples() {
        let gt = FlowField::new(Tensor::from_fn(&[3, 3, 2], |i| i as f32 * 0.1)).unwrap();
        let valid = vec![true; 9];
        assert_eq!(epe(&gt, &gt, &valid).unwrap(), 0.0);
        let shifted = FlowField::new(Tensor::from_fn(&[3, 3, 2], |i| i as f32 * 0.1 + if i % 2 == 0 { 1.0 } else { 0.0 })).unwrap();
        assert!((epe(&shifted, &gt, &valid).unwrap() - 1.0).abs() < 1e-6);
        assert!(epe(&gt, &gt, &[false; 9]).is_err());
    }

    #[test]
    fn report_formatting() {
        let r = EvalReport {
            metric: "epe".into(),
            value: 1.5,
            per_video: vec![1.5],
            aggregation: Aggregation::AllPoints,
        };
        let s = format_reports(&[r]);
        assert!(s.contains("epe.all-points=1.5"));
        assert!(s.starts_with("metric"));
    }

    proptest! {
        #[test]
        fn single_threshold_delta_is_plain_fraction(errs in proptest::collection::vec(0.0f32..10.0, 1..20), th in 0.5f64..8.0) {
            let v = video(&errs);
            let d = delta_avg(&[v], &[th], Aggregation::AllPoints).unwrap().value;
            let frac = errs.iter().filter(|&&e| (e as f64) < th).count() as f64 / errs.len() as f64;
            prop_assert!((d - frac).abs() < 1e-12);
        }

        #[test]
        fn fractions_bounded_and_monotone(errs in proptest::collection::vec(0.0f32..40.0, 1..20), a in 0.01f64..0.5, b in 0.01f64..0.5) {
            let v = video(&errs);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p_lo = pck(&[v.clone()], lo, Aggregation::AllPoints).unwrap().value;
            let p_hi = pck(&[v.clone()], hi, Aggregation::AllPoints).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&p_lo) && p_lo <= p_hi);
            let d = delta_avg(&[v], &DELTA_THRESHOLDS, Aggregation::PerVideoMean).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn point_order_does_not_matter(errs in proptest::collection::vec(0.0f32..20.0, 2..12)) {
            let v = video(&errs);
            let mut rev = v.clone();
            rev.pred.reverse();
            rev.gt.reverse();
            rev.visible.reverse();
            let a = delta_avg(&[v], &DELTA_THRESHOLDS, Aggregation::AllPoints).unwrap().value;
            let b = delta_avg(&[rev], &DELTA_THRESHOLDS, Aggregation::AllPoints).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
