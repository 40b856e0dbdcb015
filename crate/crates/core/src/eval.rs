//! Detection metrics: average precision (per class, all-points
//! interpolation), mAP over the 0.50:0.05:0.95 IoU ladder, log-average
//! miss rate over 9 log-uniform FPPI samples, and the SNR probe used to
//! audit spectrum removal on synthetic scenes.

use crate::detect::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// IoU thresholds for the mAP ladder.
pub fn map_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// The 9 FPPI reference points, log-uniform over [1e-2, 1e0].
pub fn fppi_reference_points() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-2.0 + k as f64 / 4.0)).collect()
}

fn score_order(dets: &[(usize, BBox)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: ties keep (image, insertion) order
    order.sort_by(|&a, &b| {
        dets[b].1.score
            .partial_cmp(&dets[a].1.score)
            .expect("non-finite score")
    });
    order
}

/// Greedy matching of one class at one IoU threshold. Returns TP flags
/// in global score order plus the ground-truth count.
fn match_class(
    dets_per_image: &[Vec<BBox>],
    gts_per_image: &[Vec<BBox>],
    class_id: Option<usize>,
    iou_thr: f64,
) -> (Vec<bool>, usize) {
    let keep = |b: &BBox| class_id.map_or(true, |c| b.class_id == c);
    let mut flat: Vec<(usize, BBox)> = Vec::new();
    for (img, dets) in dets_per_image.iter().enumerate() {
        for d in dets.iter().filter(|d| keep(d)) {
            flat.push((img, *d));
        }
    }
    let order = score_order(&flat);

    let gts: Vec<Vec<&BBox>> = gts_per_image
        .iter()
        .map(|g| g.iter().filter(|b| keep(b)).collect())
        .collect();
    let n_gt: usize = gts.iter().map(|g| g.len()).sum();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();

    let mut tp = Vec::with_capacity(order.len());
    for &oi in &order {
        let (img, det) = &flat[oi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts[*img].iter().enumerate() {
            if taken[*img][gi] {
                continue;
            }
            let ov = iou(det, gt);
            if ov >= iou_thr && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[*img][gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    (tp, n_gt)
}

/// All-points interpolated AP from TP flags in score order.
fn ap_from_flags(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    if tp.is_empty() {
        return 0.0;
    }
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp.len()); // (recall, precision)
    let (mut tps, mut fps) = (0usize, 0usize);
    for &t in tp {
        if t {
            tps += 1;
        } else {
            fps += 1;
        }
        points.push((
            tps as f64 / n_gt as f64,
            tps as f64 / (tps + fps) as f64,
        ));
    }
    // precision envelope from the right, integrate recall increments
    let mut ap = 0.0;
    let mut max_p = 0.0f64;
    let mut prev_r = points.last().unwrap().0;
    for &(r, p) in points.iter().rev() {
        max_p = max_p.max(p);
        ap += (prev_r - r) * max_p;
        prev_r = r;
    }
    ap += prev_r * max_p; // segment from recall 0 to the first point
    ap
}

/// Per-class AP at one IoU threshold.
pub fn average_precision(
    dets_per_image: &[Vec<BBox>],
    gts_per_image: &[Vec<BBox>],
    class_id: usize,
    iou_thr: f64,
) -> f64 {
    let (tp, n_gt) = match_class(dets_per_image, gts_per_image, Some(class_id), iou_thr);
    ap_from_flags(&tp, n_gt)
}

/// Classes that appear in the ground truth, ascending.
pub fn gt_classes(gts_per_image: &[Vec<BBox>]) -> Vec<usize> {
    let mut cs: Vec<usize> = gts_per_image
        .iter()
        .flat_map(|g| g.iter().map(|b| b.class_id))
        .collect();
    cs.sort_unstable();
    cs.dedup();
    cs
}

/// Mean AP over ground-truth classes at one threshold.
pub fn mean_average_precision(
    dets_per_image: &[Vec<BBox>],
    gts_per_image: &[Vec<BBox>],
    iou_thr: f64,
) -> f64 {
    let classes = gt_classes(gts_per_image);
    if classes.is_empty() {
        return 0.0;
    }
    classes
        .iter()
        .map(|&c| average_precision(dets_per_image, gts_per_image, c, iou_thr))
        .sum::<f64>()
        / classes.len() as f64
}

/// mAP over the IoU ladder 0.50:0.05:0.95.
pub fn map_over_thresholds(dets_per_image: &[Vec<BBox>], gts_per_image: &[Vec<BBox>]) -> f64 {
    let thrs = map_iou_thresholds();
    thrs.iter()
        .map(|&t| mean_average_precision(dets_per_image, gts_per_image, t))
        .sum::<f64>()
        / thrs.len() as f64
}

/// Log-average miss rate over the 9 FPPI reference points
/// (class-agnostic matching). Errors when no ground truth exists.
pub fn log_average_miss_rate(
    dets_per_image: &[Vec<BBox>],
    gts_per_image: &[Vec<BBox>],
    iou_thr: f64,
) -> Result<f64> {
    let n_images = gts_per_image.len();
    let (tp, n_gt) = match_class(dets_per_image, gts_per_image, None, iou_thr);
    if n_gt == 0 {
        return Err(Error::data(
            "log-average miss rate undefined: zero ground-truth instances",
        ));
    }

    // operating points as the score cutoff sweeps down, plus the empty
    // prefix (miss rate 1 at FPPI 0)
    let mut curve: Vec<(f64, f64)> = vec![(0.0, 1.0)]; // (fppi, mr)
    let (mut tps, mut fps) = (0usize, 0usize);
    for &t in &tp {
        if t {
            tps += 1;
        } else {
            fps += 1;
        }
        curve.push((
            fps as f64 / n_images as f64,
            1.0 - tps as f64 / n_gt as f64,
        ));
    }

    let mut log_sum = 0.0;
    for f in fppi_reference_points() {
        let mr = curve
            .iter()
            .filter(|(fppi, _)| *fppi <= f)
            .map(|&(_, mr)| mr)
            .fold(1.0f64, f64::min);
        log_sum += mr.max(1e-10).ln();
    }
    Ok((log_sum / 9.0).exp())
}

/// 10·log10(Σ reference² / Σ (image − reference)²); +inf when the
/// residual is exactly zero.
pub fn snr_db(image: &Tensor, reference: &Tensor) -> f64 {
    assert!(
        image.dims() == reference.dims(),
        "snr: dims differ, {:?} vs {:?}",
        image.dims(),
        reference.dims()
    );
    image.with_data(|a| {
        reference.with_data(|r| {
            let signal: f64 = r.iter().map(|v| v * v).sum();
            let noise: f64 = a.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum();
            if noise == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (signal / noise).log10()
            }
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: usize) -> BBox {
        BBox {
            x1,
            y1,
            x2,
            y2,
            score,
            class_id,
        }
    }

    #[test]
    fn perfect_detections_score_ap_one() {
        let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0, 1.0, 0), bx(20.0, 20.0, 30.0, 30.0, 1.0, 0)]];
        let dets = vec![vec![
            bx(0.0, 0.0, 10.0, 10.0, 0.9, 0),
            bx(20.0, 20.0, 30.0, 30.0, 0.8, 0),
        ]];
        assert_eq!(average_precision(&dets, &gts, 0, 0.5), 1.0);
    }

    #[test]
    fn no_detections_scores_zero() {
        let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0, 1.0, 0)]];
        let dets = vec![vec![]];
        assert_eq!(average_precision(&dets, &gts, 0, 0.5), 0.0);
    }

    /// Independent PR construction + dense-grid envelope integration.
    fn ap_bruteforce(dets: &[Vec<BBox>], gts: &[Vec<BBox>], class: usize, thr: f64) -> f64 {
        // same greedy matching convention, re-derived independently
        let mut all: Vec<(f64, usize, BBox)> = Vec::new();
        for (i, d) in dets.iter().enumerate() {
            for b in d.iter().filter(|b| b.class_id == class) {
                all.push((b.score, i, *b));
            }
        }
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut used: Vec<Vec<bool>> = gts
            .iter()
            .map(|g| vec![false; g.len()])
            .collect();
        let n_gt = gts
            .iter()
            .flat_map(|g| g.iter())
            .filter(|b| b.class_id == class)
            .count();
        let mut pr: Vec<(f64, f64)> = Vec::new();
        let (mut tp, mut fp) = (0.0, 0.0);
        for (_, img, det) in &all {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts[*img].iter().enumerate() {
                if gt.class_id != *det1_class(det) || used[*img][gi] {
                    continue;
                }
                let ov = iou(det, gt);
                if ov >= thr && best.map_or(true, |(_, b)| ov > b) {
                    best = Some((gi, ov));
                }
            }
            if let Some((gi, _)) = best {
                used[*img][gi] = true;
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            pr.push((tp / n_gt as f64, tp / (tp + fp)));
        }
        // dense grid over recall, envelope precision
        let grid = 200_000;
        let mut total = 0.0;
        for i in 0..grid {
            let r = (i as f64 + 0.5) / grid as f64;
            let p = pr
                .iter()
                .filter(|(rr, _)| *rr >= r)
                .map(|&(_, pp)| pp)
                .fold(0.0f64, f64::max);
            total += p;
        }
        total / grid as f64
    }

    fn det1_class(b: &BBox) -> &usize {
        &b.class_id
    }

    #[test]
    fn crafted_scenario_matches_bruteforce_integration() {
        // 3 gts, 5 detections: hit, hit, miss, duplicate-hit, hit
        let gts = vec![vec![
            bx(0.0, 0.0, 10.0, 10.0, 1.0, 0),
            bx(20.0, 0.0, 30.0, 10.0, 1.0, 0),
            bx(40.0, 0.0, 50.0, 10.0, 1.0, 0),
        ]];
        let dets = vec![vec![
            bx(0.0, 0.0, 10.0, 10.0, 0.95, 0),  // TP
            bx(20.5, 0.0, 30.0, 10.0, 0.9, 0),  // TP
            bx(60.0, 60.0, 70.0, 70.0, 0.85, 0), // FP
            bx(0.5, 0.0, 10.0, 10.0, 0.8, 0),   // duplicate -> FP
            bx(40.0, 0.5, 50.0, 10.0, 0.75, 0), // TP
        ]];
        let fast = average_precision(&dets, &gts, 0, 0.5);
        let slow = ap_bruteforce(&dets, &gts, 0, 0.5);
        assert!(
            (fast - slow).abs() < 1e-4,
            "AP {fast} vs brute-force {slow}"
        );
        // hand computation: PR points (1/3,1), (2/3,1), (2/3,2/3),
        // (2/3,1/2), (3/3,3/5): AP = 1/3·1 + 1/3·1 + 1/3·0.6
        assert!((fast - (1.0 / 3.0 + 1.0 / 3.0 + 0.6 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn removing_a_false_positive_never_hurts_ap() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let gts = vec![vec![
                bx(0.0, 0.0, 10.0, 10.0, 1.0, 0),
                bx(20.0, 0.0, 30.0, 10.0, 1.0, 0),
            ]];
            let mut dets: Vec<BBox> = vec![
                bx(0.0, 0.0, 10.0, 10.0, rng.next_f64(), 0),
                bx(90.0, 90.0, 99.0, 99.0, rng.next_f64(), 0), // fp
                bx(20.0, 0.0, 30.0, 10.0, rng.next_f64(), 0),
            ];
            let with_fp = average_precision(&[dets.clone()], &gts, 0, 0.5);
            dets.remove(1);
            let without_fp = average_precision(&[dets], &gts, 0, 0.5);
            assert!(without_fp >= with_fp - 1e-12);
        }
    }

    #[test]
    fn map_ladder_has_ten_thresholds() {
        let t = map_iou_thresholds();
        assert_eq!(t.len(), 10);
        assert!((t[0] - 0.5).abs() < 1e-12);
        assert!((t[9] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn fppi_points_are_nine_log_uniform() {
        let f = fppi_reference_points();
        assert_eq!(f.len(), 9);
        assert!((f[0] - 0.01).abs() < 1e-12);
        assert!((f[8] - 1.0).abs() < 1e-9);
        for w in f.windows(2) {
            assert!(((w[1] / w[0]).log10() - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_detector_hits_clamp_floor() {
        let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0, 1.0, 0)]; 10];
        let dets: Vec<Vec<BBox>> = gts.clone();
        let mr = log_average_miss_rate(&dets, &gts, 0.5).unwrap();
        assert!(mr <= 1e-9, "expected clamp floor, got {mr}");
    }

    #[test]
    fn silent_detector_misses_everything() {
        let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0, 1.0, 0)]; 5];
        let dets: Vec<Vec<BBox>> = vec![vec![]; 5];
        let mr = log_average_miss_rate(&dets, &gts, 0.5).unwrap();
        assert_eq!(mr, 1.0);
    }

    #[test]
    fn zero_ground_truth_is_an_error() {
        let gts: Vec<Vec<BBox>> = vec![vec![]; 3];
        let dets: Vec<Vec<BBox>> = vec![vec![]; 3];
        assert!(log_average_miss_rate(&dets, &gts, 0.5).is_err());
    }

    /// Direct sweep oracle: recompute (FPPI, MR) at every cutoff from
    /// scratch and sample the reference points.
    fn lamr_bruteforce(dets: &[Vec<BBox>], gts: &[Vec<BBox>], thr: f64) -> f64 {
        let mut scores: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
        scores.push(f64::INFINITY);
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let n_images = gts.len() as f64;
        let n_gt: f64 = gts.iter().map(|g| g.len()).sum::<usize>() as f64;

        let mut ops: Vec<(f64, f64)> = Vec::new();
        for &cutoff in &scores {
            let kept: Vec<Vec<BBox>> = dets
                .iter()
                .map(|d| d.iter().copied().filter(|b| b.score >= cutoff).collect())
                .collect();
            let (mut tp, mut fp) = (0.0, 0.0);
            for (img, dimg) in kept.iter().enumerate() {
                let mut order: Vec<usize> = (0..dimg.len()).collect();
                order.sort_by(|&a, &b| dimg[b].score.partial_cmp(&dimg[a].score).unwrap());
                let mut used = vec![false; gts[img].len()];
                for &di in &order {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, gt) in gts[img].iter().enumerate() {
                        if used[gi] {
                            continue;
                        }
                        let ov = iou(&dimg[di], gt);
                        if ov >= thr && best.map_or(true, |(_, b)| ov > b) {
                            best = Some((gi, ov));
                        }
                    }
                    if let Some((gi, _)) = best {
                        used[gi] = true;
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            ops.push((fp / n_images, 1.0 - tp / n_gt));
        }

        let mut log_sum = 0.0;
        for f in fppi_reference_points() {
            let mr = ops
                .iter()
                .filter(|(fppi, _)| *fppi <= f)
                .map(|&(_, m)| m)
                .fold(1.0f64, f64::min);
            log_sum += mr.max(1e-10).ln();
        }
        (log_sum / 9.0).exp()
    }

    #[test]
    fn planted_corpus_matches_direct_sweep() {
        let mut rng = Rng::new(6);
        let mut gts: Vec<Vec<BBox>> = Vec::new();
        let mut dets: Vec<Vec<BBox>> = Vec::new();
        for _ in 0..20 {
            let n = 1 + rng.below(3);
            let mut g = Vec::new();
            let mut d = Vec::new();
            for _ in 0..n {
                let x = rng.uniform(0.0, 50.0);
                let y = rng.uniform(0.0, 50.0);
                g.push(bx(x, y, x + 10.0, y + 10.0, 1.0, 0));
                if rng.next_f64() < 0.8 {
                    // jittered hit with a planted score
                    d.push(bx(x + 1.0, y, x + 11.0, y + 10.0, rng.next_f64(), 0));
                }
            }
            for _ in 0..rng.below(3) {
                let x = rng.uniform(60.0, 90.0);
                let y = rng.uniform(60.0, 90.0);
                d.push(bx(x, y, x + 8.0, y + 8.0, rng.next_f64(), 0));
            }
            gts.push(g);
            dets.push(d);
        }
        let fast = log_average_miss_rate(&dets, &gts, 0.5).unwrap();
        let slow = lamr_bruteforce(&dets, &gts, 0.5);
        assert!(
            (fast - slow).abs() < 1e-12,
            "MR {fast} vs direct sweep {slow}"
        );
    }

    #[test]
    fn detecting_a_missed_gt_never_raises_mr() {
        let gts = vec![
            vec![bx(0.0, 0.0, 10.0, 10.0, 1.0, 0)],
            vec![bx(0.0, 0.0, 10.0, 10.0, 1.0, 0)],
        ];
        let before = vec![vec![bx(0.0, 0.0, 10.0, 10.0, 0.9, 0)], vec![]];
        let after = vec![
            vec![bx(0.0, 0.0, 10.0, 10.0, 0.9, 0)],
            vec![bx(0.0, 0.0, 10.0, 10.0, 0.8, 0)],
        ];
        let a = log_average_miss_rate(&before, &gts, 0.5).unwrap();
        let b = log_average_miss_rate(&after, &gts, 0.5).unwrap();
        assert!(b <= a + 1e-12);
    }

    #[test]
    fn snr_basics() {
        let r = Tensor::new(&[1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(snr_db(&r, &r), f64::INFINITY);

        // residual energy equals reference energy -> 0 dB
        let img = Tensor::new(&[1, 2, 2], vec![2.0, 0.0, 2.0, 0.0]);
        let refr = Tensor::new(&[1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        assert!((snr_db(&img, &refr) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn snr_matches_analytic_expectation_for_gaussian_noise() {
        let mut rng = Rng::new(7);
        let n = 4096;
        let reference = Tensor::new(&[1, 64, 64], vec![0.5; n]);
        let sigma = 0.05;
        let expected = 10.0 * ((0.25 * n as f64) / (n as f64 * sigma * sigma)).log10();
        let mut mean = 0.0;
        for _ in 0..100 {
            let noisy: Vec<f64> = (0..n).map(|_| 0.5 + sigma * rng.normal()).collect();
            mean += snr_db(&Tensor::new(&[1, 64, 64], noisy), &reference);
        }
        mean /= 100.0;
        assert!(
            (mean - expected).abs() < 0.5,
            "measured {mean:.3} dB vs analytic {expected:.3} dB"
        );
    }
}
