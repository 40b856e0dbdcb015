//! Minimal single-stage detection head: 1x1 convolutions over the fused
//! feature produce per-cell objectness, box offsets, and class logits.
//! The decoder reconstructs boxes and prunes them with greedy NMS.

use crate::nn::Conv2d;
use crate::rng::Rng;
use crate::tensor::{Parameter, Tensor};

/// Axis-aligned scored box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Per-cell training targets on an S×S grid.
pub struct GridTarget {
    pub size: usize,
    /// 1.0 where a box center lands, else 0.0.
    pub objectness: Vec<f64>,
    /// Row-major `[4, S, S]`: (tx, ty, tw, th), defined only on positives.
    pub offsets: Vec<f64>,
    /// Class id per positive cell (unspecified elsewhere).
    pub class_id: Vec<usize>,
}

/// Raw head predictions split by role.
pub struct HeadOutput {
    pub objectness: Tensor,
    pub offsets: Tensor,
    pub class_logits: Tensor,
}

/// Two 1x1 convolutions with a nonlinearity between: per-cell
/// predictions with a little mixing capacity, no spatial growth.
pub struct DetectHead {
    pub mix: Conv2d,
    pub pred: Conv2d,
    pub classes: usize,
}

impl DetectHead {
    pub fn new(prefix: &str, in_channels: usize, classes: usize, rng: &mut Rng) -> DetectHead {
        DetectHead {
            mix: Conv2d::new(&format!("{prefix}.mix"), in_channels, in_channels, 1, 1, 0, rng),
            pred: Conv2d::new(&format!("{prefix}.pred"), in_channels, 5 + classes, 1, 1, 0, rng),
            classes,
        }
    }

    pub fn forward(&self, fused: &Tensor) -> HeadOutput {
        let pred = self.pred.forward(&self.mix.forward(fused).silu());
        HeadOutput {
            objectness: pred.slice_channels(0, 1),
            offsets: pred.slice_channels(1, 5),
            class_logits: pred.slice_channels(5, 5 + self.classes),
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.mix.params();
        p.extend(self.pred.params());
        p
    }
}

/// Rasterize boxes onto the grid: the cell containing each center goes
/// positive; collisions keep the larger box, ties the lower class id.
pub fn assign_targets(boxes: &[BBox], grid: usize, img_h: usize, img_w: usize) -> GridTarget {
    let cell_h = img_h as f64 / grid as f64;
    let cell_w = img_w as f64 / grid as f64;
    let mut objectness = vec![0.0; grid * grid];
    let mut offsets = vec![0.0; 4 * grid * grid];
    let mut class_id = vec![0usize; grid * grid];
    let mut claimed: Vec<Option<&BBox>> = vec![None; grid * grid];

    for b in boxes {
        let cx = 0.5 * (b.x1 + b.x2);
        let cy = 0.5 * (b.y1 + b.y2);
        let ci = ((cx / cell_w) as usize).min(grid - 1);
        let ri = ((cy / cell_h) as usize).min(grid - 1);
        let cell = ri * grid + ci;
        let replace = match claimed[cell] {
            None => true,
            Some(prev) => {
                let (pa, na) = (prev.area(), b.area());
                na > pa || (na == pa && b.class_id < prev.class_id)
            }
        };
        if !replace {
            continue;
        }
        claimed[cell] = Some(b);
        objectness[cell] = 1.0;
        class_id[cell] = b.class_id;
        let n = grid * grid;
        offsets[cell] = cx / cell_w - ci as f64;
        offsets[n + cell] = cy / cell_h - ri as f64;
        offsets[2 * n + cell] = ((b.x2 - b.x1) / cell_w).ln();
        offsets[3 * n + cell] = ((b.y2 - b.y1) / cell_h).ln();
    }

    GridTarget {
        size: grid,
        objectness,
        offsets,
        class_id,
    }
}

/// Invert the target encoding for one cell.
fn decode_cell(
    offsets: &[f64],
    cell: usize,
    grid: usize,
    cell_h: f64,
    cell_w: f64,
) -> (f64, f64, f64, f64) {
    let n = grid * grid;
    let (ri, ci) = (cell / grid, cell % grid);
    let cx = (ci as f64 + offsets[cell]) * cell_w;
    let cy = (ri as f64 + offsets[n + cell]) * cell_h;
    let w = offsets[2 * n + cell].exp() * cell_w;
    let h = offsets[3 * n + cell].exp() * cell_h;
    (cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression within each class.
pub fn nms(mut dets: Vec<BBox>, iou_thr: f64) -> Vec<BBox> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("non-finite score"));
    let mut keep: Vec<BBox> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou(k, &d) > iou_thr);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Head predictions (plain buffers) -> scored, NMS-pruned boxes.
pub fn decode(
    objectness: &[f64],
    offsets: &[f64],
    class_logits: &[f64],
    classes: usize,
    grid: usize,
    img_h: usize,
    img_w: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Vec<BBox> {
    let n = grid * grid;
    assert_eq!(objectness.len(), n, "objectness plane size");
    assert_eq!(offsets.len(), 4 * n, "offset plane size");
    assert_eq!(class_logits.len(), classes * n, "class plane size");
    let cell_h = img_h as f64 / grid as f64;
    let cell_w = img_w as f64 / grid as f64;

    let mut dets = Vec::new();
    for cell in 0..n {
        let obj = crate::tensor::sigmoid(objectness[cell]);
        let (mut best_c, mut best_p) = (0usize, f64::NEG_INFINITY);
        for c in 0..classes {
            let p = class_logits[c * n + cell];
            if p > best_p {
                best_p = p;
                best_c = c;
            }
        }
        let score = obj * crate::tensor::sigmoid(best_p);
        if score < score_threshold {
            continue;
        }
        let (x1, y1, x2, y2) = decode_cell(offsets, cell, grid, cell_h, cell_w);
        if x2 <= x1 || y2 <= y1 {
            continue;
        }
        dets.push(BBox {
            x1,
            y1,
            x2,
            y2,
            score,
            class_id: best_c,
        });
    }
    nms(dets, nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::zero_params;

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
    fn head_preserves_spatial_dims_and_zero_init_is_half() {
        let mut rng = Rng::new(1);
        let head = DetectHead::new("head", 8, 2, &mut rng);
        zero_params(&head.params());
        let c = Tensor::new(&[8, 16, 16], vec![0.3; 8 * 256]);
        let out = head.forward(&c);
        assert_eq!(out.objectness.dims(), &[1, 16, 16]);
        assert_eq!(out.offsets.dims(), &[4, 16, 16]);
        assert_eq!(out.class_logits.dims(), &[2, 16, 16]);
        assert!(out
            .objectness
            .sigmoid()
            .to_vec()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn head_gradcheck() {
        let mut rng = Rng::new(2);
        let head = DetectHead::new("head", 3, 2, &mut rng);
        let c = Tensor::new(&[3, 4, 4], (0..48).map(|i| (i as f64 * 0.17).sin()).collect());
        let probe = Tensor::new(&[7 * 16], (0..112).map(|i| (i as f64 * 0.11).cos()).collect());
        let params = head.params();
        gradcheck::assert_param_grads_match(
            || {
                let out = head.forward(&c);
                Tensor::concat_channels(&[out.objectness, out.offsets, out.class_logits])
                    .flatten()
                    .mul(&probe)
                    .sum()
            },
            &params,
            1e-3,
        );
    }

    #[test]
    fn single_centered_box_marks_one_cell() {
        let b = bx(24.0, 24.0, 40.0, 40.0, 1.0, 0);
        let t = assign_targets(&[b], 16, 64, 64);
        let positives: Vec<usize> = t
            .objectness
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(positives, vec![8 * 16 + 8]); // center (32,32) -> cell (8,8)
    }

    #[test]
    fn empty_box_list_gives_all_negative() {
        let t = assign_targets(&[], 8, 64, 64);
        assert!(t.objectness.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collision_keeps_larger_box_then_lower_class() {
        let small = bx(30.0, 30.0, 34.0, 34.0, 1.0, 0);
        let large = bx(24.0, 24.0, 40.0, 40.0, 1.0, 1);
        let t = assign_targets(&[small, large], 16, 64, 64);
        let cell = 8 * 16 + 8;
        assert_eq!(t.class_id[cell], 1, "larger box must win");

        let a = bx(24.0, 24.0, 40.0, 40.0, 1.0, 1);
        let b = bx(26.0, 26.0, 42.0, 42.0, 1.0, 0); // same area, lower class
        let t2 = assign_targets(&[a, b], 16, 64, 64);
        assert_eq!(t2.class_id[8 * 16 + 8], 0);
    }

    #[test]
    fn encode_decode_roundtrip_within_half_pixel() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let w = rng.uniform(5.0, 30.0);
            let h = rng.uniform(5.0, 30.0);
            let x1 = rng.uniform(0.0, 64.0 - w);
            let y1 = rng.uniform(0.0, 64.0 - h);
            let b = bx(x1, y1, x1 + w, y1 + h, 1.0, 0);
            let t = assign_targets(&[b], 16, 64, 64);
            let cell = t
                .objectness
                .iter()
                .position(|&v| v == 1.0)
                .expect("one positive");
            let (dx1, dy1, dx2, dy2) = decode_cell(&t.offsets, cell, 16, 4.0, 4.0);
            assert!((dx1 - b.x1).abs() < 0.5);
            assert!((dy1 - b.y1).abs() < 0.5);
            assert!((dx2 - b.x2).abs() < 0.5);
            assert!((dy2 - b.y2).abs() < 0.5);
        }
    }

    #[test]
    fn decode_of_strongly_negative_logits_is_empty() {
        let n = 16 * 16;
        let dets = decode(
            &vec![-50.0; n],
            &vec![0.2; 4 * n],
            &vec![0.0; 2 * n],
            2,
            16,
            64,
            64,
            0.05,
            0.5,
        );
        assert!(dets.is_empty());
    }

    #[test]
    fn nms_collapses_identical_boxes() {
        let a = bx(10.0, 10.0, 20.0, 20.0, 0.9, 0);
        let b = bx(10.0, 10.0, 20.0, 20.0, 0.8, 0);
        let kept = nms(vec![a, b], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_other_classes() {
        let a = bx(10.0, 10.0, 20.0, 20.0, 0.9, 0);
        let b = bx(10.0, 10.0, 20.0, 20.0, 0.8, 1);
        assert_eq!(nms(vec![a, b], 0.5).len(), 2);
    }

    /// Exhaustive reference: for every candidate in score order, compare
    /// against all previously kept boxes with freshly recomputed IoU.
    fn nms_reference(dets: &[BBox], thr: f64) -> Vec<BBox> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
        let mut kept: Vec<BBox> = Vec::new();
        'outer: for &i in &order {
            for k in &kept {
                if k.class_id == dets[i].class_id && iou(k, &dets[i]) > thr {
                    continue 'outer;
                }
            }
            kept.push(dets[i]);
        }
        kept
    }

    #[test]
    fn nms_matches_bruteforce_on_random_sets() {
        let mut rng = Rng::new(4);
        for trial in 0..30 {
            let n = 1 + rng.below(40);
            let dets: Vec<BBox> = (0..n)
                .map(|_| {
                    let x1 = rng.uniform(0.0, 50.0);
                    let y1 = rng.uniform(0.0, 50.0);
                    bx(
                        x1,
                        y1,
                        x1 + rng.uniform(2.0, 14.0),
                        y1 + rng.uniform(2.0, 14.0),
                        rng.next_f64(),
                        rng.below(2),
                    )
                })
                .collect();
            let fast = nms(dets.clone(), 0.4);
            let slow = nms_reference(&dets, 0.4);
            assert_eq!(fast, slow, "trial {trial}");
        }
    }

    #[test]
    fn iou_basics() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 1.0, 0);
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = bx(5.0, 5.0, 6.0, 6.0, 1.0, 0);
        assert_eq!(iou(&a, &disjoint), 0.0);
        let half = bx(0.5, 0.0, 1.5, 1.0, 1.0, 0);
        assert!((iou(&a, &half) - 1.0 / 3.0).abs() < 1e-12);
    }
}
