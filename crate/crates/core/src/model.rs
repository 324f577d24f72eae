//! Two-stream toy detector: per-modality conv encoders, calibrated feature
//! fusion, and decoupled score/IoU vs bounding-box head streams.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::tensor::{Node, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
}

/// Encoder output channels (per modality).
pub const FEAT_CHANNELS: usize = 32;
/// Encoder downsampling factor (three stride-2 convs).
pub const DOWNSAMPLE: usize = 8;

/// Named parameter registry. Leaves are mutable in place, so the optimizer
/// can update them between steps while graphs keep referring to them.
#[derive(Default)]
pub struct ParamSet {
    items: Vec<(String, Node)>,
}

impl ParamSet {
    pub fn register(&mut self, name: &str, t: Tensor) -> Node {
        assert!(
            !self.items.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        let node = Node::leaf(t);
        self.items.push((name.to_string(), node.clone()));
        node
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Node)> {
        self.items.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Node> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|(_, p)| p.numel()).sum()
    }
}

struct ConvLayer {
    weight: Node,
    bias: Node,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn new(
        params: &mut ParamSet,
        name: &str,
        co: usize,
        ci: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut StdRng,
    ) -> ConvLayer {
        let fan_in = (ci * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::new(
            &[co, ci, k, k],
            (0..co * ci * k * k).map(|_| gauss(rng) * std).collect(),
        );
        ConvLayer {
            weight: params.register(&format!("{name}.w"), w),
            bias: params.register(&format!("{name}.b"), Tensor::zeros(&[co])),
            stride,
            pad,
        }
    }

    fn apply(&self, x: &Node) -> Node {
        let y = x.conv2d(&self.weight, self.stride, self.pad);
        y.add(&self.bias.broadcast_to(y.shape()))
    }
}

struct TConvLayer {
    weight: Node,
    bias: Node,
    stride: usize,
}

impl TConvLayer {
    fn new(params: &mut ParamSet, name: &str, ci: usize, co: usize, k: usize, stride: usize, rng: &mut StdRng) -> TConvLayer {
        let fan_in = (ci * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::new(
            &[ci, co, k, k],
            (0..ci * co * k * k).map(|_| gauss(rng) * std).collect(),
        );
        TConvLayer {
            weight: params.register(&format!("{name}.w"), w),
            bias: params.register(&format!("{name}.b"), Tensor::zeros(&[co])),
            stride,
        }
    }

    fn apply(&self, x: &Node) -> Node {
        let y = x.transposed_conv2d(&self.weight, self.stride, 0);
        y.add(&self.bias.broadcast_to(y.shape()))
    }
}

fn gauss(rng: &mut StdRng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Three conv blocks, kernel 3 stride 2, channels 1 -> 8 -> 16 -> 32.
pub struct Encoder {
    blocks: Vec<ConvLayer>,
}

impl Encoder {
    fn new(params: &mut ParamSet, name: &str, rng: &mut StdRng) -> Encoder {
        let chans = [1usize, 8, 16, 32];
        let blocks = (0..3)
            .map(|i| ConvLayer::new(params, &format!("{name}.c{i}"), chans[i + 1], chans[i], 3, 2, 1, rng))
            .collect();
        Encoder { blocks }
    }

    pub fn encode(&self, image: &Node) -> Result<Node, ModelError> {
        let sh = image.shape();
        if sh.len() != 3 || sh[0] != 1 {
            return Err(ModelError::BadDimensions(format!("expected 1xHxW image, got {sh:?}")));
        }
        if sh[1] % DOWNSAMPLE != 0 || sh[2] % DOWNSAMPLE != 0 {
            return Err(ModelError::BadDimensions(format!(
                "H and W must be divisible by {DOWNSAMPLE}, got {}x{}",
                sh[1], sh[2]
            )));
        }
        let mut x = image.clone();
        for b in &self.blocks {
            x = b.apply(&x).relu();
        }
        Ok(x)
    }
}

/// Calibration MLP + 1x1 fusion conv.
pub struct Fusion {
    mlp_w1: Node,
    mlp_b1: Node,
    mlp_w2: Node,
    mlp_b2: Node,
    reduce: ConvLayer,
}

/// Outputs of the fusion unit.
pub struct Fused {
    /// Calibration vector over 2*FEAT_CHANNELS channels, each in (0,1).
    pub sigma: Node,
    pub phi_v: Node,
    pub phi_t: Node,
    /// Fused latent, FEAT_CHANNELS x h x w.
    pub latent: Node,
}

impl Fusion {
    fn new(params: &mut ParamSet, rng: &mut StdRng) -> Fusion {
        let c2 = 2 * FEAT_CHANNELS;
        let hidden = 32;
        let mk = |rng: &mut StdRng, rows: usize, cols: usize| {
            let std = (2.0 / cols as f64).sqrt();
            Tensor::new(&[rows, cols], (0..rows * cols).map(|_| gauss(rng) * std).collect())
        };
        Fusion {
            mlp_w1: params.register("fuse.mlp.w1", mk(rng, hidden, c2)),
            mlp_b1: params.register("fuse.mlp.b1", Tensor::zeros(&[hidden, 1])),
            mlp_w2: params.register("fuse.mlp.w2", mk(rng, c2, hidden)),
            mlp_b2: params.register("fuse.mlp.b2", Tensor::zeros(&[c2, 1])),
            reduce: ConvLayer::new(params, "fuse.reduce", FEAT_CHANNELS, c2, 1, 1, 0, rng),
        }
    }

    /// Calibration vector from global-average-pooled features of both streams.
    fn calibration(&self, z_v: &Node, z_t: &Node) -> Node {
        let cat = Node::concat(&[z_v.clone(), z_t.clone()]);
        let hw = (cat.shape()[1] * cat.shape()[2]) as f64;
        let gap = cat.sum_to_prefix(1).scale(1.0 / hw); // [2C]
        let col = gap.reshape(&[2 * FEAT_CHANNELS, 1]);
        let h = self.mlp_w1.matmul(&col).add(&self.mlp_b1).relu();
        let out = self.mlp_w2.matmul(&h).add(&self.mlp_b2).sigmoid();
        out.reshape(&[2 * FEAT_CHANNELS])
    }

    pub fn fuse(&self, z_v: &Node, z_t: &Node) -> Result<Fused, ModelError> {
        if z_v.shape() != z_t.shape() {
            return Err(ModelError::BadDimensions(format!(
                "modality feature shapes differ: {:?} vs {:?}",
                z_v.shape(),
                z_t.shape()
            )));
        }
        let sigma = self.calibration(z_v, z_t);
        Ok(self.fuse_with_sigma(z_v, z_t, &sigma))
    }

    /// Fusion with an externally supplied calibration vector (used by tests).
    pub fn fuse_with_sigma(&self, z_v: &Node, z_t: &Node, sigma: &Node) -> Fused {
        let sig_v = sigma.slice(0, FEAT_CHANNELS).broadcast_to(z_v.shape());
        let sig_t = sigma.slice(FEAT_CHANNELS, FEAT_CHANNELS).broadcast_to(z_t.shape());
        let phi_v = z_v.mul(&sig_v);
        let phi_t = z_t.mul(&sig_t);
        let latent = self.reduce.apply(&Node::concat(&[phi_v.clone(), phi_t.clone()]));
        Fused { sigma: sigma.clone(), phi_v, phi_t, latent }
    }
}

/// Dense per-pixel maps produced by the decoupled head streams.
pub struct DetectionMaps {
    /// [H, W] in (0,1)
    pub score: Node,
    /// [H, W] in (0,1)
    pub iou: Node,
    /// [4, H, W], non-negative distances (left, top, right, bottom)
    pub bbox: Node,
}

struct HeadStream {
    blocks: Vec<TConvLayer>,
}

impl HeadStream {
    fn new(params: &mut ParamSet, name: &str, rng: &mut StdRng) -> HeadStream {
        let chans = [FEAT_CHANNELS, 16, 8, 4];
        let blocks = (0..3)
            .map(|i| TConvLayer::new(params, &format!("{name}.d{i}"), chans[i], chans[i + 1], 2, 2, rng))
            .collect();
        HeadStream { blocks }
    }

    fn apply(&self, latent: &Node) -> Node {
        let mut x = latent.clone();
        for b in &self.blocks {
            x = b.apply(&x).relu();
        }
        x
    }
}

/// Decoupled heads: stream A carries score + IoU, stream B carries boxes.
pub struct Heads {
    stream_a: HeadStream,
    stream_b: HeadStream,
    score_proj: ConvLayer,
    iou_proj: ConvLayer,
    box_proj: ConvLayer,
}

impl Heads {
    fn new(params: &mut ParamSet, rng: &mut StdRng) -> Heads {
        let h = Heads {
            stream_a: HeadStream::new(params, "head.a", rng),
            stream_b: HeadStream::new(params, "head.b", rng),
            score_proj: ConvLayer::new(params, "head.score", 1, 4, 1, 1, 0, rng),
            iou_proj: ConvLayer::new(params, "head.iou", 1, 4, 1, 1, 0, rng),
            box_proj: ConvLayer::new(params, "head.box", 4, 4, 1, 1, 0, rng),
        };
        // start the box head in the live region of the relu
        h.box_proj.bias.set_value(Tensor::full(&[4], 4.0));
        h
    }

    pub fn detect(&self, latent: &Node) -> Result<DetectionMaps, ModelError> {
        if latent.shape().len() != 3 || latent.shape()[0] != FEAT_CHANNELS {
            return Err(ModelError::BadDimensions(format!(
                "latent must be {FEAT_CHANNELS}xhxw, got {:?}",
                latent.shape()
            )));
        }
        let a = self.stream_a.apply(latent);
        let b = self.stream_b.apply(latent);
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let score = self.score_proj.apply(&a).sigmoid().reshape(&[h, w]);
        let iou = self.iou_proj.apply(&a).sigmoid().reshape(&[h, w]);
        let bbox = self.box_proj.apply(&b).relu();
        Ok(DetectionMaps { score, iou, bbox })
    }
}

/// The full detector with its parameter registry.
pub struct Detector {
    pub encoder_v: Encoder,
    pub encoder_t: Encoder,
    pub fusion: Fusion,
    pub heads: Heads,
    pub params: ParamSet,
}

/// Full forward-pass handles, including the per-modality features the
/// regularizer perturbs.
pub struct ForwardPass {
    pub z_v: Node,
    pub z_t: Node,
    pub fused: Fused,
    pub maps: DetectionMaps,
}

impl Detector {
    pub fn new(seed: u64) -> Detector {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let encoder_v = Encoder::new(&mut params, "enc_v", &mut rng);
        let encoder_t = Encoder::new(&mut params, "enc_t", &mut rng);
        let fusion = Fusion::new(&mut params, &mut rng);
        let heads = Heads::new(&mut params, &mut rng);
        Detector { encoder_v, encoder_t, fusion, heads, params }
    }

    pub fn forward(&self, visible: &Node, thermal: &Node) -> Result<ForwardPass, ModelError> {
        let z_v = self.encoder_v.encode(visible)?;
        let z_t = self.encoder_t.encode(thermal)?;
        let fused = self.fusion.fuse(&z_v, &z_t)?;
        let maps = self.heads.detect(&fused.latent)?;
        Ok(ForwardPass { z_v, z_t, fused, maps })
    }

    /// Head of the network from encoder features onward; the regularizer
    /// calls this with perturbed features.
    pub fn from_features(&self, z_v: &Node, z_t: &Node) -> Result<DetectionMaps, ModelError> {
        let fused = self.fusion.fuse(z_v, z_t)?;
        self.heads.detect(&fused.latent)
    }
}

// ---------------------------------------------------------------------------
// Decoding and NMS
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// (x1, y1, x2, y2) in pixels, x1 < x2 and y1 < y2, clipped to bounds.
    pub bbox: (f64, f64, f64, f64),
    pub score: f64,
}

pub fn box_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0) * (a.3 - a.1);
    let area_b = (b.2 - b.0) * (b.3 - b.1);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Anchor-free decoding: each pixel above threshold emits a box from its
/// four side distances, scored by score * IoU-map quality.
pub fn decode_detections(
    score: &Tensor,
    iou: &Tensor,
    bbox: &Tensor,
    score_threshold: f64,
) -> Vec<Detection> {
    let (h, w) = (score.shape()[0], score.shape()[1]);
    assert_eq!(iou.shape(), score.shape(), "iou map shape");
    assert_eq!(bbox.shape(), &[4, h, w], "bbox map shape");
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let s = score.data()[r * w + c];
            if s <= score_threshold {
                continue;
            }
            let l = bbox.data()[bbox.idx3(0, r, c)];
            let t = bbox.data()[bbox.idx3(1, r, c)];
            let rt = bbox.data()[bbox.idx3(2, r, c)];
            let b = bbox.data()[bbox.idx3(3, r, c)];
            let x1 = (c as f64 - l).clamp(0.0, w as f64);
            let y1 = (r as f64 - t).clamp(0.0, h as f64);
            let x2 = (c as f64 + rt).clamp(0.0, w as f64);
            let y2 = (r as f64 + b).clamp(0.0, h as f64);
            if x2 <= x1 || y2 <= y1 {
                continue;
            }
            let q = iou.data()[r * w + c];
            out.push(Detection { bbox: (x1, y1, x2, y2), score: s * q });
        }
    }
    out
}

/// Greedy descending-score suppression; survivors have pairwise IoU <= threshold.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| box_iou(k.bbox, d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward_scalar, Evaluator};

    fn zero_image(h: usize, w: usize) -> Node {
        Node::constant(Tensor::zeros(&[1, h, w]))
    }

    #[test]
    fn encode_shapes() {
        let det = Detector::new(7);
        let z = det.encoder_v.encode(&zero_image(96, 96)).unwrap();
        assert_eq!(z.shape(), &[32, 12, 12]);
        assert!(det.encoder_v.encode(&zero_image(50, 96)).is_err());
    }

    #[test]
    fn zero_image_zero_params_gives_zero_features() {
        let det = Detector::new(7);
        for (name, p) in det.params.iter() {
            if name.starts_with("enc_v") {
                p.set_value(Tensor::zeros(p.shape()));
            }
        }
        let z = det.encoder_v.encode(&zero_image(32, 32)).unwrap();
        let v = Evaluator::new().eval(&z).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn heads_upsample_to_input_size() {
        let det = Detector::new(3);
        let latent = Node::constant(Tensor::zeros(&[32, 12, 12]));
        let maps = det.heads.detect(&latent).unwrap();
        assert_eq!(maps.score.shape(), &[96, 96]);
        assert_eq!(maps.bbox.shape(), &[4, 96, 96]);
    }

    #[test]
    fn zero_latent_zero_params_scores_half() {
        let det = Detector::new(3);
        for (name, p) in det.params.iter() {
            if name.starts_with("head") {
                p.set_value(Tensor::zeros(p.shape()));
            }
        }
        let latent = Node::constant(Tensor::zeros(&[32, 8, 8]));
        let maps = det.heads.detect(&latent).unwrap();
        let s = Evaluator::new().eval(&maps.score).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn sigma_in_open_unit_interval() {
        let det = Detector::new(21);
        let img = Node::constant(Tensor::new(
            &[1, 32, 32],
            (0..1024).map(|i| ((i * 37 % 97) as f64) / 97.0).collect(),
        ));
        let pass = det.forward(&img, &img).unwrap();
        let sigma = Evaluator::new().eval(&pass.fused.sigma).unwrap();
        assert_eq!(sigma.numel(), 64);
        assert!(sigma.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn identity_calibration_matches_plain_concat() {
        let det = Detector::new(5);
        let z_v = Node::constant(Tensor::new(&[32, 2, 2], (0..128).map(|i| i as f64 * 0.01).collect()));
        let z_t = Node::constant(Tensor::new(&[32, 2, 2], (0..128).map(|i| (i as f64 * 0.02).sin()).collect()));
        let ones = Node::constant(Tensor::full(&[64], 1.0));
        let fused = det.fusion.fuse_with_sigma(&z_v, &z_t, &ones);
        let direct = det.fusion.reduce.apply(&Node::concat(&[z_v.clone(), z_t.clone()]));
        let mut ev = Evaluator::new();
        let a = ev.eval(&fused.latent).unwrap();
        let b = ev.eval(&direct).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_calibration_leaves_only_bias() {
        let det = Detector::new(5);
        let z_v = Node::constant(Tensor::full(&[32, 2, 2], 0.7));
        let z_t = Node::constant(Tensor::full(&[32, 2, 2], -0.3));
        let zeros = Node::constant(Tensor::zeros(&[64]));
        let fused = det.fusion.fuse_with_sigma(&z_v, &z_t, &zeros);
        let v = Evaluator::new().eval(&fused.latent).unwrap();
        let bias = det.params.get("fuse.reduce.b").unwrap().leaf_value();
        for ch in 0..32 {
            for px in 0..4 {
                assert!((v.data()[ch * 4 + px] - bias.data()[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn thermal_pathway_is_live() {
        let det = Detector::new(9);
        let z_v = Node::constant(Tensor::full(&[32, 2, 2], 0.4));
        let z_t = Node::leaf(Tensor::full(&[32, 2, 2], -0.2));
        let fused = det.fusion.fuse(&z_v, &z_t).unwrap();
        let loss = fused.latent.sq_norm();
        let g = backward_scalar(&loss).wrt_or_zero(&z_t);
        let gv = Evaluator::new().eval(&g).unwrap();
        assert!(gv.data().iter().any(|&v| v.abs() > 1e-9));
    }

    #[test]
    fn stream_b_gradient_does_not_reach_stream_a_params() {
        let det = Detector::new(13);
        let latent = Node::constant(Tensor::new(
            &[32, 4, 4],
            (0..512).map(|i| ((i * 29 % 101) as f64) / 101.0 - 0.5).collect(),
        ));
        let maps = det.heads.detect(&latent).unwrap();
        let loss = maps.bbox.sq_norm();
        let grads = backward_scalar(&loss);
        let a_w = det.params.get("head.a.d0.w").unwrap();
        assert!(grads.is_unreachable(a_w));
        let b_w = det.params.get("head.b.d0.w").unwrap();
        assert!(!grads.is_unreachable(b_w));
    }

    #[test]
    fn decode_basic() {
        let mut score = Tensor::zeros(&[30, 40]);
        let mut iou = Tensor::zeros(&[30, 40]);
        let mut bbox = Tensor::zeros(&[4, 30, 40]);
        // single pixel (r=10, c=20) with distances (5,5,5,5)
        score.data_mut()[10 * 40 + 20] = 0.9;
        iou.data_mut()[10 * 40 + 20] = 1.0;
        for ch in 0..4 {
            bbox.data_mut()[(ch * 30 + 10) * 40 + 20] = 5.0;
        }
        let dets = decode_detections(&score, &iou, &bbox, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, (15.0, 5.0, 25.0, 15.0));
        assert!((dets[0].score - 0.9).abs() < 1e-12);

        // all below threshold -> empty
        assert!(decode_detections(&score, &iou, &bbox, 0.95).is_empty());
    }

    #[test]
    fn nms_keeps_best_of_identical_and_all_disjoint() {
        let a = Detection { bbox: (0.0, 0.0, 10.0, 10.0), score: 0.9 };
        let b = Detection { bbox: (0.0, 0.0, 10.0, 10.0), score: 0.8 };
        let kept = nms(vec![b, a], 0.5);
        assert_eq!(kept.len(), 1);
        assert!((kept[0].score - 0.9).abs() < 1e-12);

        let c = Detection { bbox: (20.0, 20.0, 30.0, 30.0), score: 0.7 };
        let kept = nms(vec![a, c], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_matches_brute_force() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(99);
        use rand::Rng;
        for _ in 0..20 {
            let dets: Vec<Detection> = (0..10)
                .map(|_| {
                    let x1: f64 = rng.gen_range(0.0..50.0);
                    let y1: f64 = rng.gen_range(0.0..50.0);
                    Detection {
                        bbox: (x1, y1, x1 + rng.gen_range(5.0..30.0), y1 + rng.gen_range(5.0..30.0)),
                        score: rng.gen_range(0.01..1.0),
                    }
                })
                .collect();
            let fast = nms(dets.clone(), 0.5);
            // O(n^2) oracle: repeatedly take the highest-score remaining box,
            // drop everything overlapping it above the threshold.
            let mut rest = dets;
            rest.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let mut oracle = Vec::new();
            while let Some(best) = rest.first().cloned() {
                oracle.push(best);
                rest.retain(|d| box_iou(best.bbox, d.bbox) <= 0.5);
            }
            assert_eq!(fast.len(), oracle.len());
            for (x, y) in fast.iter().zip(&oracle) {
                assert_eq!(x.bbox, y.bbox);
            }
        }
    }
}
