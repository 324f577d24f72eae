//! Detection matching and the log-average miss-rate protocol with
//! All/Day/Night splits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SceneType;
use crate::model::{box_iou, Detection};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ground truth in any image: miss rate undefined")]
    NoGroundTruth,
    #[error("no images")]
    NoImages,
}

/// Everything the matcher needs from one image. Detections must be sorted
/// by score descending.
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub kept_gt: Vec<(f64, f64, f64, f64)>,
    pub ignored_gt: Vec<(f64, f64, f64, f64)>,
    pub scene_type: SceneType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ignored: usize,
}

/// Greedy matching in score order. A detection takes the highest-IoU
/// unmatched kept GT at IoU >= threshold; failing that, overlap with an
/// ignored GT discards it from both counts; otherwise it is a false
/// positive. Ties in IoU break toward the earlier GT index.
pub fn match_detections(
    detections: &[Detection],
    kept_gt: &[(f64, f64, f64, f64)],
    ignored_gt: &[(f64, f64, f64, f64)],
    iou_threshold: f64,
) -> MatchCounts {
    debug_assert!(
        detections.windows(2).all(|w| w[0].score >= w[1].score),
        "detections must be sorted by score descending"
    );
    let mut gt_taken = vec![false; kept_gt.len()];
    let mut counts = MatchCounts { tp: 0, fp: 0, fn_: 0, ignored: 0 };
    for det in detections {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in kept_gt.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let iou = box_iou(det.bbox, *gt);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            counts.tp += 1;
        } else if ignored_gt.iter().any(|g| box_iou(det.bbox, *g) >= iou_threshold) {
            counts.ignored += 1;
        } else {
            counts.fp += 1;
        }
    }
    counts.fn_ = gt_taken.iter().filter(|&&t| !t).count();
    counts
}

/// The 9 reference FPPI points, log-uniform in [1e-2, 1].
pub fn reference_fppi_points() -> [f64; 9] {
    let mut pts = [0.0; 9];
    for (k, p) in pts.iter_mut().enumerate() {
        *p = 10f64.powf(-2.0 + 0.25 * k as f64);
    }
    pts
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrFppiCurve {
    pub points: Vec<(f64, f64)>, // (fppi, miss_rate)
}

/// Sweep score thresholds over all detection scores; sample the resulting
/// (fppi, miss rate) trace at the 9 reference points by taking the lowest
/// miss rate achieved at FPPI <= the reference (right-continuous
/// envelope). Reference points below every achievable FPPI use the
/// miss rate at the smallest threshold.
pub fn mr_fppi_curve(
    results: &[ImageResult],
    iou_threshold: f64,
) -> Result<MrFppiCurve, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoImages);
    }
    let total_gt: usize = results.iter().map(|r| r.kept_gt.len()).sum();
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let n_images = results.len() as f64;

    let mut thresholds: Vec<f64> = results
        .iter()
        .flat_map(|r| r.detections.iter().map(|d| d.score))
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    // (fppi, miss rate) at each threshold, thresholds descending so fppi
    // is non-decreasing along the trace
    let mut trace: Vec<(f64, f64)> = Vec::with_capacity(thresholds.len() + 1);
    let eval_at = |thr: f64| {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for r in results {
            let dets: Vec<Detection> =
                r.detections.iter().filter(|d| d.score >= thr).cloned().collect();
            let c = match_detections(&dets, &r.kept_gt, &r.ignored_gt, iou_threshold);
            tp += c.tp;
            fp += c.fp;
            fn_ += c.fn_;
        }
        (fp as f64 / n_images, fn_ as f64 / (tp + fn_) as f64)
    };
    // the all-rejected operating point anchors the left end of the trace
    trace.push((0.0, 1.0));
    for &thr in &thresholds {
        trace.push(eval_at(thr));
    }

    let points = reference_fppi_points()
        .iter()
        .map(|&ref_fppi| {
            let mr = trace
                .iter()
                .filter(|(fppi, _)| *fppi <= ref_fppi)
                .map(|&(_, mr)| mr)
                .fold(f64::INFINITY, f64::min);
            (ref_fppi, if mr.is_finite() { mr } else { trace.last().unwrap().1 })
        })
        .collect();
    Ok(MrFppiCurve { points })
}

/// Miss-rate floor applied before taking logs.
pub const MR_FLOOR: f64 = 1e-4;

/// Geometric mean of the curve's miss rates: exp(mean(ln(max(mr, 1e-4)))).
pub fn log_average_miss_rate(curve: &MrFppiCurve) -> f64 {
    assert_eq!(curve.points.len(), 9, "curve must have 9 points");
    let mean_ln = curve
        .points
        .iter()
        .map(|&(_, mr)| mr.max(MR_FLOOR).ln())
        .sum::<f64>()
        / curve.points.len() as f64;
    mean_ln.exp()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitReport {
    pub all: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub day: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub night: Option<f64>,
}

/// LAMR over all images and over the day/night subsets. Dual scenes count
/// toward All only; an empty split is absent rather than zero.
pub fn split_report(results: &[ImageResult], iou_threshold: f64) -> Result<SplitReport, EvalError> {
    let lamr = |subset: Vec<&ImageResult>| -> Result<Option<f64>, EvalError> {
        if subset.is_empty() || subset.iter().all(|r| r.kept_gt.is_empty()) {
            return Ok(None);
        }
        let owned: Vec<ImageResult> = subset
            .into_iter()
            .map(|r| ImageResult {
                detections: r.detections.clone(),
                kept_gt: r.kept_gt.clone(),
                ignored_gt: r.ignored_gt.clone(),
                scene_type: r.scene_type,
            })
            .collect();
        Ok(Some(log_average_miss_rate(&mr_fppi_curve(&owned, iou_threshold)?)))
    };
    let all = lamr(results.iter().collect())?.ok_or(EvalError::NoGroundTruth)?;
    let day = lamr(results.iter().filter(|r| r.scene_type == SceneType::Day).collect())?;
    let night = lamr(results.iter().filter(|r| r.scene_type == SceneType::Night).collect())?;
    Ok(SplitReport { all, day, night })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn det(bbox: (f64, f64, f64, f64), score: f64) -> Detection {
        Detection { bbox, score }
    }

    #[test]
    fn exact_detection_is_tp() {
        let gt = vec![(10.0, 10.0, 20.0, 30.0)];
        let c = match_detections(&[det(gt[0], 0.9)], &gt, &[], 0.5);
        assert_eq!(c, MatchCounts { tp: 1, fp: 0, fn_: 0, ignored: 0 });
    }

    #[test]
    fn double_detection_second_is_fp() {
        let gt = vec![(10.0, 10.0, 20.0, 30.0)];
        let dets = [det(gt[0], 0.9), det((10.5, 10.0, 20.5, 30.0), 0.8)];
        let c = match_detections(&dets, &gt, &[], 0.5);
        assert_eq!(c, MatchCounts { tp: 1, fp: 1, fn_: 0, ignored: 0 });
    }

    #[test]
    fn ignored_gt_absorbs_detection() {
        let ignored = vec![(10.0, 10.0, 20.0, 30.0)];
        let c = match_detections(&[det(ignored[0], 0.9)], &[], &ignored, 0.5);
        assert_eq!(c, MatchCounts { tp: 0, fp: 0, fn_: 0, ignored: 1 });
        // and a stray detection is still an FP
        let c = match_detections(&[det((50.0, 50.0, 60.0, 70.0), 0.9)], &[], &ignored, 0.5);
        assert_eq!(c.fp, 1);
    }

    /// Brute-force re-implementation of the greedy rule for cross-checking.
    fn greedy_oracle(
        dets: &[Detection],
        kept: &[(f64, f64, f64, f64)],
        ignored: &[(f64, f64, f64, f64)],
        thr: f64,
    ) -> MatchCounts {
        let mut taken = vec![false; kept.len()];
        let mut c = MatchCounts { tp: 0, fp: 0, fn_: 0, ignored: 0 };
        for d in dets {
            let ious: Vec<(usize, f64)> = kept
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, g)| (i, box_iou(d.bbox, *g)))
                .filter(|(_, v)| *v >= thr)
                .collect();
            if let Some(&(i, _)) = ious.iter().max_by(|a, b| {
                a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0))
            }) {
                taken[i] = true;
                c.tp += 1;
            } else if ignored.iter().any(|g| box_iou(d.bbox, *g) >= thr) {
                c.ignored += 1;
            } else {
                c.fp += 1;
            }
        }
        c.fn_ = taken.iter().filter(|&&t| !t).count();
        c
    }

    #[test]
    fn matching_agrees_with_oracle_on_random_fixtures() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..200 {
            let mk_box = |rng: &mut ChaCha12Rng| {
                let x = rng.gen_range(0.0..80.0);
                let y = rng.gen_range(0.0..60.0);
                let w = rng.gen_range(5.0..20.0);
                let h = rng.gen_range(10.0..40.0);
                (x, y, x + w, y + h)
            };
            let kept: Vec<_> = (0..4).map(|_| mk_box(&mut rng)).collect();
            let ignored: Vec<_> = (0..2).map(|_| mk_box(&mut rng)).collect();
            let mut dets: Vec<Detection> = (0..5)
                .map(|_| {
                    let base = kept[rng.gen_range(0..kept.len())];
                    let jx = rng.gen_range(-6.0..6.0);
                    let jy = rng.gen_range(-6.0..6.0);
                    det((base.0 + jx, base.1 + jy, base.2 + jx, base.3 + jy), rng.gen())
                })
                .collect();
            dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let got = match_detections(&dets, &kept, &ignored, 0.5);
            let want = greedy_oracle(&dets, &kept, &ignored, 0.5);
            assert_eq!(got, want);
            assert_eq!(got.tp + got.fn_, kept.len());
            assert_eq!(got.tp + got.fp + got.ignored, dets.len());
        }
    }

    fn one_image(dets: Vec<Detection>, gt: Vec<(f64, f64, f64, f64)>) -> ImageResult {
        ImageResult { detections: dets, kept_gt: gt, ignored_gt: vec![], scene_type: SceneType::Day }
    }

    #[test]
    fn perfect_detector_curve_is_zero() {
        let gt = (10.0, 10.0, 20.0, 30.0);
        let results = vec![one_image(vec![det(gt, 0.95)], vec![gt])];
        let curve = mr_fppi_curve(&results, 0.5).unwrap();
        assert!(curve.points.iter().all(|&(_, mr)| mr == 0.0));
        assert!((log_average_miss_rate(&curve) - MR_FLOOR).abs() < 1e-15);
    }

    #[test]
    fn silent_detector_curve_is_one() {
        let results = vec![one_image(vec![], vec![(10.0, 10.0, 20.0, 30.0)])];
        let curve = mr_fppi_curve(&results, 0.5).unwrap();
        assert!(curve.points.iter().all(|&(_, mr)| mr == 1.0));
        assert_eq!(log_average_miss_rate(&curve), 1.0);
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let results = vec![one_image(vec![det((0.0, 0.0, 5.0, 5.0), 0.5)], vec![])];
        assert!(matches!(mr_fppi_curve(&results, 0.5), Err(EvalError::NoGroundTruth)));
        assert!(matches!(mr_fppi_curve(&[], 0.5), Err(EvalError::NoImages)));
    }

    #[test]
    fn three_image_hand_fixture() {
        // image 1: GT hit at 0.9; image 2: GT hit at 0.6 plus FP at 0.8;
        // image 3: GT never hit.
        let g1 = (10.0, 10.0, 20.0, 30.0);
        let g2 = (40.0, 10.0, 50.0, 30.0);
        let g3 = (70.0, 10.0, 80.0, 30.0);
        let results = vec![
            one_image(vec![det(g1, 0.9)], vec![g1]),
            one_image(vec![det((0.0, 0.0, 5.0, 5.0), 0.8), det(g2, 0.6)], vec![g2]),
            one_image(vec![], vec![g3]),
        ];
        // threshold sweep by hand:
        //   thr=0.9: tp=1 fn=2 fp=0 -> (fppi 0,    mr 2/3)
        //   thr=0.8: tp=1 fn=2 fp=1 -> (fppi 1/3,  mr 2/3)
        //   thr=0.6: tp=2 fn=1 fp=1 -> (fppi 1/3,  mr 1/3)
        // envelope: ref fppi < 1/3 -> 2/3; ref fppi >= 1/3 -> 1/3.
        let curve = mr_fppi_curve(&results, 0.5).unwrap();
        for &(fppi, mr) in &curve.points {
            let want = if fppi < 1.0 / 3.0 { 2.0 / 3.0 } else { 1.0 / 3.0 };
            assert!((mr - want).abs() < 1e-12, "fppi {fppi}: mr {mr} want {want}");
        }
        // LAMR: 7 ref points below 1/3 (1e-2 .. 10^-0.5 ~= 0.316), 2 above
        let want_lamr = ((7.0 * (2.0f64 / 3.0).ln() + 2.0 * (1.0f64 / 3.0).ln()) / 9.0).exp();
        assert!((log_average_miss_rate(&curve) - want_lamr).abs() < 1e-12);
    }

    #[test]
    fn lamr_direct_formula_fixture() {
        let mrs = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let curve = MrFppiCurve {
            points: reference_fppi_points().iter().zip(mrs).map(|(&f, m)| (f, m)).collect(),
        };
        let want = (mrs.iter().map(|m: &f64| m.ln()).sum::<f64>() / 9.0).exp();
        assert!((log_average_miss_rate(&curve) - want).abs() < 1e-14);
        assert!((want - 0.4147).abs() < 1e-3); // sanity on the order of magnitude
    }

    #[test]
    fn lamr_monotone_in_removed_tp() {
        let g1 = (10.0, 10.0, 20.0, 30.0);
        let g2 = (40.0, 10.0, 50.0, 30.0);
        let full = vec![
            one_image(vec![det(g1, 0.9)], vec![g1]),
            one_image(vec![det(g2, 0.7)], vec![g2]),
        ];
        let reduced = vec![
            one_image(vec![det(g1, 0.9)], vec![g1]),
            one_image(vec![], vec![g2]),
        ];
        let a = log_average_miss_rate(&mr_fppi_curve(&full, 0.5).unwrap());
        let b = log_average_miss_rate(&mr_fppi_curve(&reduced, 0.5).unwrap());
        assert!(b >= a);
    }

    #[test]
    fn split_report_day_night_and_dual() {
        let g = (10.0, 10.0, 20.0, 30.0);
        let mk = |st: SceneType, hit: bool| ImageResult {
            detections: if hit { vec![det(g, 0.9)] } else { vec![] },
            kept_gt: vec![g],
            ignored_gt: vec![],
            scene_type: st,
        };
        // all-day dataset: night absent
        let day_only = vec![mk(SceneType::Day, true), mk(SceneType::Day, false)];
        let r = split_report(&day_only, 0.5).unwrap();
        assert!(r.day.is_some());
        assert!(r.night.is_none());
        assert_eq!(r.all, r.day.unwrap());

        // symmetric behavior in both splits -> equal numbers
        let sym = vec![
            mk(SceneType::Day, true),
            mk(SceneType::Day, false),
            mk(SceneType::Night, true),
            mk(SceneType::Night, false),
        ];
        let r = split_report(&sym, 0.5).unwrap();
        assert_eq!(r.day.unwrap(), r.night.unwrap());

        // mixed fixture equals per-split recomputation; dual affects All only
        let mixed = vec![
            mk(SceneType::Day, true),
            mk(SceneType::Night, false),
            mk(SceneType::Dual, false),
        ];
        let r = split_report(&mixed, 0.5).unwrap();
        let day_only: Vec<ImageResult> = vec![mk(SceneType::Day, true)];
        let night_only: Vec<ImageResult> = vec![mk(SceneType::Night, false)];
        assert_eq!(
            r.day.unwrap(),
            log_average_miss_rate(&mr_fppi_curve(&day_only, 0.5).unwrap())
        );
        assert_eq!(
            r.night.unwrap(),
            log_average_miss_rate(&mr_fppi_curve(&night_only, 0.5).unwrap())
        );
        assert!(r.all > r.day.unwrap()); // the dual miss drags All up
    }
}
