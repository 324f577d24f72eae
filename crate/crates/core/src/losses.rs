//! The four loss components and their weighted composition: class-balanced
//! BCE for the score map, IoU losses, repulsion loss for boxes, and the
//! regularizer hook.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{emax, emin, Node, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain violation: {0}")]
    Domain(String),
}

/// Weights of the composite loss: alpha (repulsion), beta (BCE),
/// gamma (IoU), delta (regularizer).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 1.0, gamma: 1.0, delta: 0.1 }
    }
}

/// Dense supervision targets built from ground-truth boxes.
pub struct GroundTruthMaps {
    /// 1 inside shrunk GT boxes, else 0. [H, W]
    pub positive_mask: Tensor,
    /// Per-pixel target side distances (l, t, r, b). [4, H, W]
    pub target_distances: Tensor,
    /// Index of the assigned GT per positive pixel (usize::MAX elsewhere).
    pub assignment: Vec<usize>,
    pub gt_boxes: Vec<(f64, f64, f64, f64)>,
}

/// Shrink factor for the positive region (40% about the center).
const SHRINK: f64 = 0.4;

impl GroundTruthMaps {
    /// Build targets for an image. Pixels inside a shrunk GT box are
    /// positive; overlaps are assigned to the smallest-area box.
    pub fn build(h: usize, w: usize, gt_boxes: &[(f64, f64, f64, f64)]) -> GroundTruthMaps {
        let mut mask = Tensor::zeros(&[h, w]);
        let mut dist = Tensor::zeros(&[4, h, w]);
        let mut assignment = vec![usize::MAX; h * w];
        // process larger boxes first so smaller boxes win ties
        let mut order: Vec<usize> = (0..gt_boxes.len()).collect();
        order.sort_by(|&a, &b| {
            let area = |i: usize| {
                let (x1, y1, x2, y2) = gt_boxes[i];
                (x2 - x1) * (y2 - y1)
            };
            area(b).partial_cmp(&area(a)).unwrap()
        });
        for gi in order {
            let (x1, y1, x2, y2) = gt_boxes[gi];
            let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
            let (hw, hh) = ((x2 - x1) / 2.0 * (1.0 - SHRINK), (y2 - y1) / 2.0 * (1.0 - SHRINK));
            let r0 = (cy - hh).ceil().max(0.0) as usize;
            let r1 = ((cy + hh).floor() as usize).min(h.saturating_sub(1));
            let c0 = (cx - hw).ceil().max(0.0) as usize;
            let c1 = ((cx + hw).floor() as usize).min(w.saturating_sub(1));
            for r in r0..=r1.min(h - 1) {
                for c in c0..=c1.min(w - 1) {
                    mask.data_mut()[r * w + c] = 1.0;
                    assignment[r * w + c] = gi;
                    let (fc, fr) = (c as f64, r as f64);
                    dist.data_mut()[(0 * h + r) * w + c] = fc - x1;
                    dist.data_mut()[(1 * h + r) * w + c] = fr - y1;
                    dist.data_mut()[(2 * h + r) * w + c] = x2 - fc;
                    dist.data_mut()[(3 * h + r) * w + c] = y2 - fr;
                }
            }
        }
        GroundTruthMaps {
            positive_mask: mask,
            target_distances: dist,
            assignment,
            gt_boxes: gt_boxes.to_vec(),
        }
    }

    pub fn num_positive(&self) -> usize {
        self.positive_mask.data().iter().filter(|&&v| v > 0.0).count()
    }
}

fn clamp_unit(x: &Node, eps: f64) -> Node {
    emin(&emax(x, &Node::scalar(eps).broadcast_to(x.shape())),
         &Node::scalar(1.0 - eps).broadcast_to(x.shape()))
}

/// Class-balanced BCE over the score map.
/// lambda = -(2/N) (w+ sum_pos log s + w- sum_neg log(1-s)),
/// w+ = N_neg/N, w- = N_pos/N. An empty class zeroes the opposite term's
/// weight, so the value stays finite and gradient-safe.
pub fn class_balanced_bce(score_map: &Node, positive_mask: &Tensor) -> Result<Node, LossError> {
    if score_map.shape() != positive_mask.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "score {:?} vs mask {:?}",
            score_map.shape(),
            positive_mask.shape()
        )));
    }
    let n = positive_mask.numel() as f64;
    let n_pos = positive_mask.data().iter().filter(|&&v| v > 0.0).count() as f64;
    let n_neg = n - n_pos;
    let w_pos = n_neg / n;
    let w_neg = n_pos / n;
    let mask = Node::constant(positive_mask.clone());
    let inv_mask = Node::scalar(1.0).broadcast_to(mask.shape()).sub(&mask);
    let s = clamp_unit(score_map, 1e-7);
    let one_minus = Node::scalar(1.0).broadcast_to(s.shape()).sub(&s);
    let pos_term = mask.mul(&s.log()).sum().scale(w_pos);
    let neg_term = inv_mask.mul(&one_minus.log()).sum().scale(w_neg);
    Ok(pos_term.add(&neg_term).scale(-2.0 / n))
}

/// Mean squared error of the IoU map over positive pixels.
pub fn iou_map_loss(iou_map: &Node, target_iou: &Tensor, positive_mask: &Tensor) -> Node {
    assert_eq!(iou_map.shape(), positive_mask.shape(), "iou map shape");
    assert_eq!(target_iou.shape(), positive_mask.shape(), "iou target shape");
    let n_pos = positive_mask.data().iter().filter(|&&v| v > 0.0).count();
    if n_pos == 0 {
        return Node::scalar(0.0);
    }
    let mask = Node::constant(positive_mask.clone());
    let target = Node::constant(target_iou.clone());
    let diff = iou_map.sub(&target);
    mask.mul(&diff.mul(&diff)).sum().scale(1.0 / n_pos as f64)
}

/// Per-pixel IoU from the 4-distance parameterization, as a graph node.
/// Inputs are [4, H, W] maps; IoU is clamped at >= 1e-7.
fn distance_iou_map(pred: &Node, target: &Node) -> Node {
    let sl = |m: &Node, i: usize| m.slice(i, 1);
    let (pl, pt, pr, pb) = (sl(pred, 0), sl(pred, 1), sl(pred, 2), sl(pred, 3));
    let (tl, tt, tr, tb) = (sl(target, 0), sl(target, 1), sl(target, 2), sl(target, 3));
    let iw = emin(&pl, &tl).add(&emin(&pr, &tr));
    let ih = emin(&pt, &tt).add(&emin(&pb, &tb));
    let inter = iw.mul(&ih);
    let area_p = pl.add(&pr).mul(&pt.add(&pb));
    let area_t = tl.add(&tr).mul(&tt.add(&tb));
    let union = area_p.add(&area_t).sub(&inter);
    let iou = inter.div(&union);
    emax(&iou, &Node::scalar(1e-7).broadcast_to(iou.shape()))
}

/// Box regression loss: mean of -ln IoU(pred, target) over positive pixels.
pub fn box_iou_loss(pred_distances: &Node, target_distances: &Tensor, positive_mask: &Tensor) -> Node {
    assert_eq!(pred_distances.shape(), target_distances.shape(), "bbox map shape");
    let n_pos = positive_mask.data().iter().filter(|&&v| v > 0.0).count();
    if n_pos == 0 {
        return Node::scalar(0.0);
    }
    let (h, w) = (positive_mask.shape()[0], positive_mask.shape()[1]);
    let target = Node::constant(target_distances.clone());
    let iou = distance_iou_map(pred_distances, &target).reshape(&[h, w]);
    let mask = Node::constant(positive_mask.clone());
    mask.mul(&iou.log().neg()).sum().scale(1.0 / n_pos as f64)
}

/// Scalar-valued IoU of -ln IoU target for the IoU-map head: computed from
/// frozen predicted distances (teacher forcing the map toward the current
/// localization quality).
pub fn target_iou_tensor(pred_distances: &Tensor, target_distances: &Tensor, positive_mask: &Tensor) -> Tensor {
    let (h, w) = (positive_mask.shape()[0], positive_mask.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            if positive_mask.data()[r * w + c] == 0.0 {
                continue;
            }
            let d = |m: &Tensor, i: usize| m.data()[(i * h + r) * w + c];
            let (pl, pt, pr, pb) = (d(pred_distances, 0), d(pred_distances, 1), d(pred_distances, 2), d(pred_distances, 3));
            let (tl, tt, tr, tb) = (d(target_distances, 0), d(target_distances, 1), d(target_distances, 2), d(target_distances, 3));
            let inter = (pl.min(tl) + pr.min(tr)) * (pt.min(tt) + pb.min(tb));
            let union = (pl + pr) * (pt + pb) + (tl + tr) * (tt + tb) - inter;
            out.data_mut()[r * w + c] = if union > 0.0 { (inter / union).max(0.0) } else { 0.0 };
        }
    }
    out
}

/// Smoothed logarithm of the repulsion loss:
/// -ln(1-x) for x <= sigma_s, linear continuation beyond.
pub fn smooth_ln(x: &Node, sigma_s: f64) -> Result<Node, LossError> {
    if !(0.0..1.0).contains(&sigma_s) {
        return Err(LossError::Domain(format!("sigma_s {sigma_s} outside [0,1)")));
    }
    let sig = Node::scalar(sigma_s).broadcast_to(x.shape());
    let one = Node::scalar(1.0).broadcast_to(x.shape());
    // m = 1 where x <= sigma_s
    let m = sig.ge_mask(x);
    // guard the log argument so the unused branch stays finite
    let ln_branch = one.sub(x).log().neg();
    let lin_branch = x
        .sub(&sig)
        .scale(1.0 / (1.0 - sigma_s))
        .add(&Node::scalar(-(1.0 - sigma_s).ln()).broadcast_to(x.shape()));
    Ok(m.mul(&ln_branch).add(&one.sub(&m).mul(&lin_branch)))
}

/// Value-level smooth_ln for oracles.
pub fn smooth_ln_value(x: f64, sigma_s: f64) -> f64 {
    if x <= sigma_s {
        -(1.0 - x).ln()
    } else {
        (x - sigma_s) / (1.0 - sigma_s) - (1.0 - sigma_s).ln()
    }
}

/// An axis-aligned box of graph nodes (x1, y1, x2, y2), each a scalar node.
#[derive(Clone)]
pub struct BoxNode {
    pub x1: Node,
    pub y1: Node,
    pub x2: Node,
    pub y2: Node,
}

impl BoxNode {
    pub fn from_values(b: (f64, f64, f64, f64)) -> BoxNode {
        BoxNode {
            x1: Node::scalar(b.0),
            y1: Node::scalar(b.1),
            x2: Node::scalar(b.2),
            y2: Node::scalar(b.3),
        }
    }

    fn area(&self) -> Node {
        self.x2.sub(&self.x1).relu().mul(&self.y2.sub(&self.y1).relu())
    }

    fn intersection(&self, other: &BoxNode) -> Node {
        let iw = emin(&self.x2, &other.x2).sub(&emax(&self.x1, &other.x1)).relu();
        let ih = emin(&self.y2, &other.y2).sub(&emax(&self.y1, &other.y1)).relu();
        iw.mul(&ih)
    }

    pub fn iou(&self, other: &BoxNode) -> Node {
        let inter = self.intersection(other);
        let union = self.area().add(&other.area()).sub(&inter);
        inter.div(&union)
    }

    /// Intersection over the *other* (ground-truth) box area.
    pub fn iog(&self, gt: &BoxNode) -> Node {
        self.intersection(gt).div(&gt.area())
    }
}

/// Predicted box with the ground-truth identity it is assigned to.
pub struct AssignedBox {
    pub box_node: BoxNode,
    pub gt_index: usize,
}

fn smooth_l1(d: &Node) -> Node {
    // 0.5 d^2 for |d| < 1, |d| - 0.5 beyond
    let a = d.abs();
    let one = Node::scalar(1.0).broadcast_to(a.shape());
    let m = one.ge_mask(&a);
    let quad = d.mul(d).scale(0.5);
    let lin = a.sub(&Node::scalar(0.5).broadcast_to(a.shape()));
    m.mul(&quad).add(&one.sub(&m).mul(&lin))
}

/// Repulsion loss: attraction to the assigned GT plus smooth-ln penalties on
/// IoG toward the nearest non-assigned GT and on IoU between predictions
/// with different assignments.
pub fn repulsion_loss(
    predictions: &[AssignedBox],
    gt_boxes: &[(f64, f64, f64, f64)],
    sigma_gt: f64,
    sigma_box: f64,
) -> Result<Node, LossError> {
    let gt_nodes: Vec<BoxNode> = gt_boxes.iter().map(|&b| BoxNode::from_values(b)).collect();
    let mut attract = Node::scalar(0.0);
    let mut n_attract = 0usize;
    let mut rep_gt = Node::scalar(0.0);
    let mut n_rep_gt = 0usize;
    for p in predictions {
        let gt = gt_boxes[p.gt_index];
        let gw = (gt.2 - gt.0).max(1e-6);
        let gh = (gt.3 - gt.1).max(1e-6);
        // attraction: smooth-L1 of size-normalized coordinate deltas
        let deltas = [
            p.box_node.x1.sub(&Node::scalar(gt.0)).scale(1.0 / gw),
            p.box_node.y1.sub(&Node::scalar(gt.1)).scale(1.0 / gh),
            p.box_node.x2.sub(&Node::scalar(gt.2)).scale(1.0 / gw),
            p.box_node.y2.sub(&Node::scalar(gt.3)).scale(1.0 / gh),
        ];
        for d in deltas {
            attract = attract.add(&smooth_l1(&d));
        }
        n_attract += 4;
        // repulsion from the worst (largest-IoG) non-assigned GT
        let mut best: Option<Node> = None;
        for (gi, g) in gt_nodes.iter().enumerate() {
            if gi == p.gt_index {
                continue;
            }
            let iog = p.box_node.iog(g);
            best = Some(match best {
                None => iog,
                Some(b) => emax(&b, &iog),
            });
        }
        if let Some(iog) = best {
            let x = emin(&iog, &Node::scalar(1.0 - 1e-7));
            rep_gt = rep_gt.add(&smooth_ln(&x, sigma_gt)?);
            n_rep_gt += 1;
        }
    }
    // repulsion between predictions with different assignments
    let mut rep_box = Node::scalar(0.0);
    let mut n_rep_box = 0usize;
    for i in 0..predictions.len() {
        for j in (i + 1)..predictions.len() {
            if predictions[i].gt_index == predictions[j].gt_index {
                continue;
            }
            let iou = predictions[i].box_node.iou(&predictions[j].box_node);
            let x = emin(&iou, &Node::scalar(1.0 - 1e-7));
            rep_box = rep_box.add(&smooth_ln(&x, sigma_box)?);
            n_rep_box += 1;
        }
    }
    let mut total = Node::scalar(0.0);
    if n_attract > 0 {
        total = total.add(&attract.scale(1.0 / n_attract as f64));
    }
    if n_rep_gt > 0 {
        total = total.add(&rep_gt.scale(1.0 / n_rep_gt as f64));
    }
    if n_rep_box > 0 {
        total = total.add(&rep_box.scale(1.0 / n_rep_box as f64));
    }
    Ok(total)
}

/// Weighted composition of the four parts:
/// alpha rep + beta bce + delta regu + gamma iou.
pub fn total_loss(rep: &Node, bce: &Node, regu: &Node, iou: &Node, w: &LossWeights) -> Node {
    rep.scale(w.alpha)
        .add(&bce.scale(w.beta))
        .add(&regu.scale(w.delta))
        .add(&iou.scale(w.gamma))
}
