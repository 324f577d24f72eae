//! Optimizer, training loop, checkpointing, evaluation driver, and the
//! numerical verification suites behind `verify`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    curriculum_order, load_manifest, load_sample, DataError, ManifestEntry, Sample,
};
use crate::eval::{
    mr_fppi_curve, split_report, EvalError, ImageResult, MrFppiCurve,
    SplitReport,
};
use crate::losses::{
    box_iou_loss, class_balanced_bce, iou_map_loss, repulsion_loss, target_iou_tensor, total_loss,
    AssignedBox, BoxNode, GroundTruthMaps, LossWeights,
};
use crate::model::{decode_detections, nms, Detector, ModelError};
use crate::regularizer::{
    fisher_information_mc, functional_entropy_mc, lambda_regu, lambda_regu_fd_oracle,
    lambda_regu_report, evaluate_report, EstimatorKind, ExpLinear, GaussianMeasure, LinearSoftmax,
    Posterior, ProductMeasure, RegularizerConfig, RegularizerReport, SigmoidLinear,
};
use crate::tensor::{
    backward_scalar, double_backward_suite, first_order_suite, Evaluator, Node, Tensor,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("shape mismatch for `{0}`")]
    ShapeMismatch(String),
    #[error("training diverged at step {step}: total loss {total}")]
    Diverged { step: usize, total: f64 },
    #[error("checkpoint is missing entry `{0}`")]
    MissingEntry(String),
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Default)]
pub struct AdamState {
    pub m: HashMap<String, Tensor>,
    pub v: HashMap<String, Tensor>,
    pub t: u64,
}

/// Standard bias-corrected adaptive-moment update, applied in parameter
/// registration order so trajectories are reproducible.
pub fn adam_step(
    params: &crate::model::ParamSet,
    grads: &HashMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), HarnessError> {
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for (name, node) in params.iter() {
        let value = node.leaf_value();
        let g = match grads.get(name) {
            Some(g) => g,
            None => continue, // unreachable parameter: zero gradient
        };
        if g.shape() != value.shape() {
            return Err(HarnessError::ShapeMismatch(name.to_string()));
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(value.shape()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(value.shape()));
        let mut new_value = value.clone();
        for i in 0..g.numel() {
            let gi = g.data()[i];
            m.data_mut()[i] = hyper.beta1 * m.data()[i] + (1.0 - hyper.beta1) * gi;
            v.data_mut()[i] = hyper.beta2 * v.data()[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            new_value.data_mut()[i] -=
                hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
        node.set_value(new_value);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training configuration

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_checkpoint_every() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    /// Difficulty-curriculum fraction schedule; `null` disables it.
    #[serde(default)]
    pub curriculum: Option<Vec<f64>>,
    pub dataset: String,
    pub checkpoint: String,
    pub metrics: String,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Optional hard cap on total optimization steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Optional final learning rate; when set, the step size follows a
    /// cosine schedule from `learning_rate` down to this value over the
    /// planned steps. Left unset, the learning rate is constant.
    #[serde(default)]
    pub final_learning_rate: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.learning_rate <= 0.0 {
            return Err(HarnessError::BadConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(HarnessError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::BadConfig("batch_size must be >= 1".into()));
        }
        if let Some(f) = self.final_learning_rate {
            if f <= 0.0 || f > self.learning_rate {
                return Err(HarnessError::BadConfig(
                    "final_learning_rate must be in (0, learning_rate]".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn digest(&self) -> u32 {
        fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811C_9DC5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

// ---------------------------------------------------------------------------
// Checkpoints (MMBD container with reserved entry names)

pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub opt_m: Vec<(String, Tensor)>,
    pub opt_v: Vec<(String, Tensor)>,
    pub step: u64,
    pub config_digest: u32,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), HarnessError> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in &ckpt.params {
        entries.push((format!("param/{name}"), t.clone()));
    }
    for (name, t) in &ckpt.opt_m {
        entries.push((format!("opt/m/{name}"), t.clone()));
    }
    for (name, t) in &ckpt.opt_v {
        entries.push((format!("opt/v/{name}"), t.clone()));
    }
    entries.push((
        "meta/step".to_string(),
        Tensor::from_vec(vec![ckpt.step as f64, ckpt.config_digest as f64]),
    ));
    crate::data::write_container(path, &entries)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let entries = crate::data::read_container(path)?;
    let mut ckpt = Checkpoint {
        params: Vec::new(),
        opt_m: Vec::new(),
        opt_v: Vec::new(),
        step: 0,
        config_digest: 0,
    };
    let mut saw_meta = false;
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix("param/") {
            ckpt.params.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("opt/m/") {
            ckpt.opt_m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("opt/v/") {
            ckpt.opt_v.push((rest.to_string(), t));
        } else if name == "meta/step" {
            ckpt.step = t.data()[0] as u64;
            ckpt.config_digest = *t.data().get(1).unwrap_or(&0.0) as u32;
            saw_meta = true;
        }
    }
    if !saw_meta {
        return Err(HarnessError::MissingEntry("meta/step".into()));
    }
    Ok(ckpt)
}

pub fn checkpoint_from(detector: &Detector, state: &AdamState, digest: u32) -> Checkpoint {
    let params: Vec<(String, Tensor)> = detector
        .params
        .iter()
        .map(|(n, node)| (n.to_string(), node.leaf_value()))
        .collect();
    let named = |map: &HashMap<String, Tensor>| -> Vec<(String, Tensor)> {
        detector
            .params
            .iter()
            .filter_map(|(n, _)| map.get(n).map(|t| (n.to_string(), t.clone())))
            .collect()
    };
    Checkpoint {
        params,
        opt_m: named(&state.m),
        opt_v: named(&state.v),
        step: state.t,
        config_digest: digest,
    }
}

pub fn apply_checkpoint(detector: &Detector, ckpt: &Checkpoint) -> Result<AdamState, HarnessError> {
    for (name, t) in &ckpt.params {
        let node = detector
            .params
            .get(name)
            .ok_or_else(|| HarnessError::MissingEntry(format!("param/{name}")))?;
        if node.leaf_value().shape() != t.shape() {
            return Err(HarnessError::ShapeMismatch(name.clone()));
        }
        node.set_value(t.clone());
    }
    let mut state = AdamState { t: ckpt.step, ..AdamState::default() };
    for (name, t) in &ckpt.opt_m {
        state.m.insert(name.clone(), t.clone());
    }
    for (name, t) in &ckpt.opt_v {
        state.v.insert(name.clone(), t.clone());
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Training

pub const METRICS_HEADER: &str =
    "step,lambda_rep,lambda_bce,lambda_iou,lambda_regu,lambda_regu_v,lambda_regu_t,balance_ratio,total";

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub lambda_rep: f64,
    pub lambda_bce: f64,
    pub lambda_iou: f64,
    pub lambda_regu: f64,
    pub lambda_regu_v: f64,
    pub lambda_regu_t: f64,
    pub balance_ratio: f64,
    pub total: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lambda_rep,
            self.lambda_bce,
            self.lambda_iou,
            self.lambda_regu,
            self.lambda_regu_v,
            self.lambda_regu_t,
            self.balance_ratio,
            self.total
        )
    }
}

struct DetectorPosterior<'a> {
    detector: &'a Detector,
}

impl Posterior for DetectorPosterior<'_> {
    /// Spatial predictive distribution: the score map normalized over pixel
    /// locations ("where is the pedestrian"). Scalar summaries of the map
    /// saturate and leave the entropy/Fisher terms with no usable gradient.
    fn predict(&self, z_v: &Node, z_t: &Node) -> Node {
        let maps = self.detector.from_features(z_v, z_t).expect("feature shapes");
        let n = maps.score.shape().iter().product::<usize>();
        let flat = maps.score.reshape(&[n]);
        flat.div(&flat.sum().broadcast_to(&[n]))
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 32)).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z ^ (z >> 32)
}

/// Per-feature perturbation measure from batch feature statistics:
/// std = variance_scale * per-feature std across the batch (floored so the
/// measure stays non-degenerate).
fn batch_measure(
    feats_v: &[Tensor],
    feats_t: &[Tensor],
    variance_scale: f64,
) -> ProductMeasure {
    let per_feature_std = |feats: &[Tensor]| -> Vec<f64> {
        let dim = feats[0].numel();
        let n = feats.len() as f64;
        let mut out = Vec::with_capacity(dim);
        for i in 0..dim {
            let mean: f64 = feats.iter().map(|f| f.data()[i]).sum::<f64>() / n;
            let var: f64 =
                feats.iter().map(|f| (f.data()[i] - mean).powi(2)).sum::<f64>() / n;
            out.push((variance_scale * var.sqrt()).max(1e-3));
        }
        out
    };
    ProductMeasure {
        visible: GaussianMeasure::centered(per_feature_std(feats_v)),
        thermal: GaussianMeasure::centered(per_feature_std(feats_t)),
    }
}

/// Predicted box at one map pixel, as graph nodes (for the repulsion term).
fn box_at_pixel(bbox_map: &Node, r: usize, c: usize) -> BoxNode {
    let shape = bbox_map.shape();
    let (h, w) = (shape[1], shape[2]);
    let channel = |ch: usize| {
        let mut onehot = Tensor::zeros(&[h, w]);
        onehot.data_mut()[r * w + c] = 1.0;
        bbox_map.slice(ch, 1).reshape(&[h, w]).mul(&Node::constant(onehot)).sum()
    };
    let (l, t, rd, b) = (channel(0), channel(1), channel(2), channel(3));
    BoxNode {
        x1: Node::scalar(c as f64).sub(&l),
        y1: Node::scalar(r as f64).sub(&t),
        x2: Node::scalar(c as f64).add(&rd),
        y2: Node::scalar(r as f64).add(&b),
    }
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub final_step: usize,
}

/// Run the full training loop described by `config`; returns the metrics log
/// and leaves the final checkpoint + CSV on disk.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let dataset_dir = Path::new(&config.dataset);
    let manifest = load_manifest(dataset_dir)?;
    if manifest.is_empty() {
        return Err(HarnessError::BadConfig("dataset is empty".into()));
    }
    let samples: Vec<Sample> = manifest
        .iter()
        .map(|e| load_sample(&dataset_dir.join(&e.file), e.scene_type, e.difficulty))
        .collect::<Result<_, _>>()?;

    let epochs = epoch_plan(&manifest, config)?;

    let detector = Detector::new(mix_seed(config.seed, 0x0D_E7));
    let mut state = AdamState::default();
    let hyper = config.hyper();
    let digest = config.digest();

    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut step = 0usize;
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let planned: usize = epochs
        .iter()
        .map(|e| e.chunks(config.batch_size).count())
        .sum::<usize>()
        .min(max_steps)
        .max(1);

    'outer: for epoch in epochs {
        for batch in epoch.chunks(config.batch_size) {
            if step >= max_steps {
                break 'outer;
            }
            let (row, grads, diverged) = train_step(&detector, &samples, batch, config, step)?;
            let total = row.total;
            metrics.push(row);
            if diverged || !total.is_finite() || total.abs() > 1e6 {
                flush_metrics(&config.metrics, &metrics)?;
                let ckpt = checkpoint_from(&detector, &state, digest);
                save_checkpoint(Path::new(&config.checkpoint), &ckpt)?;
                return Err(HarnessError::Diverged { step, total });
            }
            let hyper_t = match config.final_learning_rate {
                Some(lr_final) => {
                    let t = step as f64 / planned as f64;
                    let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                    AdamHyper {
                        learning_rate: lr_final + (hyper.learning_rate - lr_final) * cos,
                        ..hyper
                    }
                }
                None => hyper,
            };
            adam_step(&detector.params, &grads, &mut state, &hyper_t)?;

            step += 1;
            if step % config.checkpoint_every == 0 {
                let ckpt = checkpoint_from(&detector, &state, digest);
                save_checkpoint(Path::new(&config.checkpoint), &ckpt)?;
            }
        }
    }

    flush_metrics(&config.metrics, &metrics)?;
    let ckpt = checkpoint_from(&detector, &state, digest);
    save_checkpoint(Path::new(&config.checkpoint), &ckpt)?;
    Ok(TrainOutcome { metrics, final_step: step })
}

fn epoch_plan(
    manifest: &[ManifestEntry],
    config: &TrainConfig,
) -> Result<Vec<Vec<usize>>, HarnessError> {
    match &config.curriculum {
        Some(schedule) => {
            // cycle through the schedule so `epochs` may exceed its length
            let base = curriculum_order(manifest, schedule, mix_seed(config.seed, 0xC0_11))?;
            let mut out = Vec::with_capacity(config.epochs);
            for e in 0..config.epochs {
                if e < base.len() {
                    out.push(base[e].clone());
                } else {
                    out.push(shuffled_indices(manifest.len(), mix_seed(config.seed, 0xE0 + e as u64)));
                }
            }
            Ok(out)
        }
        None => Ok((0..config.epochs)
            .map(|e| shuffled_indices(manifest.len(), mix_seed(config.seed, 0xE0 + e as u64)))
            .collect()),
    }
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

struct BatchGraphs {
    rep: Node,
    bce: Node,
    iou: Node,
    regu_report: RegularizerReport,
    total: Node,
    ev: Evaluator,
}

/// Build the loss graph for one batch. The regularizer enters the loss graph
/// only when delta > 0; otherwise it is evaluated diagnostically on the side
/// (with its own RNG stream) so trajectories are independent of its config.
fn batch_graphs(
    detector: &Detector,
    samples: &[Sample],
    batch: &[usize],
    config: &TrainConfig,
    step: usize,
) -> Result<BatchGraphs, HarnessError> {
    let mut ev = Evaluator::new();
    let mut rep_terms = Vec::new();
    let mut bce_terms = Vec::new();
    let mut iou_terms = Vec::new();
    let mut feats_v: Vec<Tensor> = Vec::new();
    let mut feats_t: Vec<Tensor> = Vec::new();
    let mut passes = Vec::new();

    for &si in batch {
        let s = &samples[si];
        let (h, w) = (s.visible.shape()[1], s.visible.shape()[2]);
        let pass = detector
            .forward(&Node::constant(s.visible.clone()), &Node::constant(s.thermal.clone()))?;
        let boxes: Vec<(f64, f64, f64, f64)> =
            s.gt_boxes.iter().map(|b| (b.x1, b.y1, b.x2, b.y2)).collect();
        let gt = GroundTruthMaps::build(h, w, &boxes);

        let bce = class_balanced_bce(&pass.maps.score, &gt.positive_mask)
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;

        let bbox_val = ev.eval(&pass.maps.bbox).expect("forward").as_ref().clone();
        let tgt_iou = target_iou_tensor(&bbox_val, &gt.target_distances, &gt.positive_mask);
        let iou_m = iou_map_loss(&pass.maps.iou, &tgt_iou, &gt.positive_mask);
        let iou_b = box_iou_loss(&pass.maps.bbox, &gt.target_distances, &gt.positive_mask);
        let iou = iou_m.add(&iou_b);

        // repulsion over per-GT decoded boxes at the GT centers
        let preds: Vec<AssignedBox> = boxes
            .iter()
            .enumerate()
            .map(|(gi, b)| {
                let r = (((b.1 + b.3) / 2.0) as usize).min(h - 1);
                let c = (((b.0 + b.2) / 2.0) as usize).min(w - 1);
                AssignedBox { box_node: box_at_pixel(&pass.maps.bbox, r, c), gt_index: gi }
            })
            .collect();
        let rep = repulsion_loss(&preds, &boxes, 0.5, 0.5)
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;

        feats_v.push(ev.eval(&pass.z_v).expect("forward").as_ref().clone());
        feats_t.push(ev.eval(&pass.z_t).expect("forward").as_ref().clone());
        rep_terms.push(rep);
        bce_terms.push(bce);
        iou_terms.push(iou);
        passes.push(pass);
    }

    let mean_of = |terms: &[Node]| {
        let mut acc = Node::scalar(0.0);
        for t in terms {
            acc = acc.add(t);
        }
        acc.scale(1.0 / terms.len() as f64)
    };
    let rep = mean_of(&rep_terms);
    let bce = mean_of(&bce_terms);
    let iou = mean_of(&iou_terms);

    // regularizer: K samples distributed across the batch
    let measure = batch_measure(&feats_v, &feats_t, config.regularizer.variance_scale);
    let k_per_sample = (config.regularizer.sample_count / batch.len()).max(2);
    let per_sample_cfg = RegularizerConfig {
        sample_count: k_per_sample,
        ..config.regularizer.clone()
    };
    let mut regu_rng = StdRng::seed_from_u64(mix_seed(config.seed, 0x5EED ^ step as u64));
    let posterior = DetectorPosterior { detector };
    let mut totals = Vec::new();
    let mut visibles = Vec::new();
    let mut thermals = Vec::new();
    let mut sens = Vec::new();
    let mut terms_v = Vec::new();
    let mut terms_t = Vec::new();
    for pass in &passes {
        let nodes = lambda_regu(
            &posterior,
            &pass.z_v,
            &pass.z_t,
            &measure,
            &per_sample_cfg,
            &mut regu_rng,
            &mut ev,
        );
        totals.push(nodes.total.clone());
        visibles.push(nodes.visible.clone());
        thermals.push(nodes.thermal.clone());
        sens.push(nodes.sensitivity.clone());
        terms_v.extend(nodes.terms_visible);
        terms_t.extend(nodes.terms_thermal);
    }
    let regu_nodes = crate::regularizer::LambdaNodes {
        total: mean_of(&totals),
        visible: mean_of(&visibles),
        thermal: mean_of(&thermals),
        sensitivity: mean_of(&sens),
        terms_visible: terms_v,
        terms_thermal: terms_t,
    };
    let regu_report = evaluate_report(&mut ev, &regu_nodes);

    let delta_active = config.weights.delta != 0.0;
    let regu_in_loss = if delta_active { regu_nodes.total.clone() } else { Node::scalar(0.0) };
    let total = total_loss(&rep, &bce, &regu_in_loss, &iou, &config.weights);

    Ok(BatchGraphs { rep, bce, iou, regu_report, total, ev })
}

fn train_step(
    detector: &Detector,
    samples: &[Sample],
    batch: &[usize],
    config: &TrainConfig,
    step: usize,
) -> Result<(MetricsRow, HashMap<String, Tensor>, bool), HarnessError> {
    let mut g = batch_graphs(detector, samples, batch, config, step)?;
    let lambda_rep = g.ev.scalar(&g.rep).expect("eval");
    let lambda_bce = g.ev.scalar(&g.bce).expect("eval");
    let lambda_iou = g.ev.scalar(&g.iou).expect("eval");
    let total = g.ev.scalar(&g.total).expect("eval");
    let row = MetricsRow {
        step,
        lambda_rep,
        lambda_bce,
        lambda_iou,
        lambda_regu: g.regu_report.lambda_total,
        lambda_regu_v: g.regu_report.lambda_visible,
        lambda_regu_t: g.regu_report.lambda_thermal,
        balance_ratio: g.regu_report.balance_ratio,
        total,
    };
    let grads = backward_scalar(&g.total);
    let mut out = HashMap::new();
    let mut diverged = false;
    for (name, node) in detector.params.iter() {
        if grads.is_unreachable(node) {
            continue;
        }
        let gt = g.ev.eval(&grads.wrt_or_zero(node)).expect("grad eval").as_ref().clone();
        if gt.data().iter().any(|v| !v.is_finite()) {
            diverged = true;
        }
        out.insert(name.to_string(), gt);
    }
    Ok((row, out, diverged))
}

pub fn flush_metrics(path: &str, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    if let Some(parent) = Path::new(path).parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation driver

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub min_height: f64,
    pub max_per_image: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            score_threshold: 0.1,
            min_height: 24.0,
            max_per_image: 10,
        }
    }
}

pub fn infer_sample(detector: &Detector, sample: &Sample, cfg: &EvalConfig) -> Vec<crate::model::Detection> {
    let mut ev = Evaluator::new();
    let pass = detector
        .forward(&Node::constant(sample.visible.clone()), &Node::constant(sample.thermal.clone()))
        .expect("forward");
    let score = ev.eval(&pass.maps.score).expect("eval").as_ref().clone();
    let iou = ev.eval(&pass.maps.iou).expect("eval").as_ref().clone();
    let bbox = ev.eval(&pass.maps.bbox).expect("eval").as_ref().clone();
    let dets = decode_detections(&score, &iou, &bbox, cfg.score_threshold);
    let mut kept = nms(dets, cfg.iou_threshold);
    kept.truncate(cfg.max_per_image);
    kept
}

/// Run inference over a dataset and score it under the reasonable setup.
pub fn evaluate(
    detector: &Detector,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<(SplitReport, MrFppiCurve), HarnessError> {
    let results: Vec<ImageResult> = samples
        .iter()
        .map(|s| {
            let detections = infer_sample(detector, s, cfg);
            let mut kept = Vec::new();
            let mut ignored = Vec::new();
            for b in &s.gt_boxes {
                let bb = (b.x1, b.y1, b.x2, b.y2);
                if b.y2 - b.y1 >= cfg.min_height && !b.occluded {
                    kept.push(bb);
                } else {
                    ignored.push(bb);
                }
            }
            ImageResult { detections, kept_gt: kept, ignored_gt: ignored, scene_type: s.scene_type }
        })
        .collect();
    let report = split_report(&results, cfg.iou_threshold)?;
    let curve = mr_fppi_curve(&results, cfg.iou_threshold)?;
    Ok((report, curve))
}

pub fn curve_csv(curve: &MrFppiCurve) -> String {
    let mut out = String::from("fppi,miss_rate\n");
    for &(f, m) in &curve.points {
        out.push_str(&format!("{f},{m}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Verification suites

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

pub fn verify_gradients(quick: bool) -> Vec<Check> {
    let (n1, n2) = if quick { (20, 8) } else { (100, 30) };
    let first = first_order_suite(n1, 2024, 1e-4);
    let second = double_backward_suite(n2, 2025, 1e-3);
    vec![
        check(
            "gradcheck-first-order",
            first.passed(),
            format!("{} graphs, max rel err {:.3e}", first.graphs, first.max_rel_err),
        ),
        check(
            "gradcheck-double-backward",
            second.passed(),
            format!("{} graphs, max rel err {:.3e}", second.graphs, second.max_rel_err),
        ),
    ]
}

/// Closed-form anchor: f = exp(a x) under a standard Gaussian has entropy
/// and half-Fisher both equal to (a^2/2) e^{a^2/2}.
pub fn verify_log_sobolev(quick: bool) -> Vec<Check> {
    let (k, tol) = if quick { (20_000, 0.05) } else { (100_000, 0.02) };
    let a = 0.7;
    let field = ExpLinear { coeff: vec![a] };
    let measure = GaussianMeasure::standard(1);
    let closed = (a * a / 2.0) * (a * a / 2.0f64).exp();
    let ent = functional_entropy_mc(&field, &measure, k, &mut StdRng::seed_from_u64(31));
    let fisher = fisher_information_mc(&field, &measure, k, &mut StdRng::seed_from_u64(32));
    let e_rel = (ent.mean - closed).abs() / closed;
    let f_rel = (0.5 * fisher.mean - closed).abs() / closed;
    vec![
        check(
            "log-sobolev-equality-entropy",
            e_rel < tol,
            format!("entropy {:.5} vs closed form {closed:.5} (rel {:.3}%)", ent.mean, 100.0 * e_rel),
        ),
        check(
            "log-sobolev-equality-fisher",
            f_rel < tol,
            format!(
                "half-Fisher {:.5} vs closed form {closed:.5} (rel {:.3}%)",
                0.5 * fisher.mean,
                100.0 * f_rel
            ),
        ),
    ]
}

/// Entropy >= 0 and entropy <= half Fisher + 3 combined standard errors over
/// random positive fields.
pub fn verify_bound(quick: bool) -> Vec<Check> {
    let (fields, k) = if quick { (100, 1000) } else { (1000, 2000) };
    let mut rng = StdRng::seed_from_u64(77);
    let mut neg_violations = 0usize;
    let mut bound_violations = 0usize;
    for i in 0..fields {
        let dim = rng.gen_range(1..=4);
        let measure = GaussianMeasure::standard(dim);
        let entropy;
        let fisher;
        if rng.gen_bool(0.5) {
            let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let f = ExpLinear { coeff: w };
            entropy =
                functional_entropy_mc(&f, &measure, k, &mut StdRng::seed_from_u64(1000 + i as u64));
            fisher =
                fisher_information_mc(&f, &measure, k, &mut StdRng::seed_from_u64(1000 + i as u64));
        } else {
            let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let b = rng.gen_range(0.05..1.0);
            let f = SigmoidLinear { coeff: w, offset: b };
            entropy =
                functional_entropy_mc(&f, &measure, k, &mut StdRng::seed_from_u64(1000 + i as u64));
            fisher =
                fisher_information_mc(&f, &measure, k, &mut StdRng::seed_from_u64(1000 + i as u64));
        }
        if entropy.mean < -1e-9 {
            neg_violations += 1;
        }
        let combined_se = (entropy.std_err.powi(2) + (0.5 * fisher.std_err).powi(2)).sqrt();
        if entropy.mean > 0.5 * fisher.mean + 3.0 * combined_se {
            bound_violations += 1;
        }
    }
    vec![
        check(
            "entropy-non-negative",
            neg_violations == 0,
            format!("{neg_violations}/{fields} violations"),
        ),
        check(
            "log-sobolev-bound",
            bound_violations == 0,
            format!("{bound_violations}/{fields} violations at 3 combined SE"),
        ),
    ]
}

/// Pathwise estimator against the finite-difference oracle on toy models.
pub fn verify_estimator_agreement(quick: bool) -> Vec<Check> {
    let models = if quick { 3 } else { 10 };
    let mut rng = StdRng::seed_from_u64(4242);
    let mut failures = Vec::new();
    for i in 0..models {
        let dim = rng.gen_range(2..=4);
        let w_v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_t: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = rng.gen_range(-0.5..0.5);
        let post = LinearSoftmax { w_v, w_t, bias };
        let z_v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z_t: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let measure = ProductMeasure {
            visible: GaussianMeasure::centered(vec![0.5; dim]),
            thermal: GaussianMeasure::centered(vec![0.5; dim]),
        };
        let cfg = RegularizerConfig {
            sample_count: 4000,
            estimator: EstimatorKind::Pathwise,
            ..RegularizerConfig::default()
        };
        let pathwise = lambda_regu_report(&post, &z_v, &z_t, &measure, &cfg, 900 + i as u64);
        let mut orng = StdRng::seed_from_u64(1900 + i as u64);
        let oracle =
            lambda_regu_fd_oracle(&post, &z_v, &z_t, &measure, 4000, 1e-5, &mut orng);
        let combined = (pathwise.std_err.powi(2) + oracle.std_err.powi(2)).sqrt();
        let gap = (pathwise.lambda_total - oracle.lambda_total).abs();
        if gap > 3.0 * combined {
            failures.push(format!(
                "model {i}: |{:.5} - {:.5}| > 3*{:.5}",
                pathwise.lambda_total, oracle.lambda_total, combined
            ));
        }
    }
    vec![check(
        "estimator-agreement",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{models} toy models within 3 combined SE")
        } else {
            failures.join("; ")
        },
    )]
}

/// Reported standard error should scale as K^{-1/2} within a factor of 2
/// per decade of K.
pub fn verify_mc_convergence(quick: bool) -> Vec<Check> {
    let (ks, reruns): (&[usize], usize) =
        if quick { (&[100, 1000], 10) } else { (&[100, 1000, 10_000], 20) };
    let post = LinearSoftmax { w_v: vec![0.8, -0.4], w_t: vec![0.3, 0.6], bias: 0.1 };
    let z_v = [0.2, -0.1];
    let z_t = [0.4, 0.3];
    let measure = ProductMeasure {
        visible: GaussianMeasure::centered(vec![0.5, 0.5]),
        thermal: GaussianMeasure::centered(vec![0.5, 0.5]),
    };
    let mut mean_se = Vec::new();
    for (ki, &k) in ks.iter().enumerate() {
        let mut ses = Vec::new();
        for r in 0..reruns {
            let cfg = RegularizerConfig { sample_count: k, ..RegularizerConfig::default() };
            let rep = lambda_regu_report(
                &post,
                &z_v,
                &z_t,
                &measure,
                &cfg,
                5000 + (ki * reruns + r) as u64,
            );
            ses.push(rep.std_err);
        }
        mean_se.push(ses.iter().sum::<f64>() / ses.len() as f64);
    }
    let sqrt10 = 10f64.sqrt();
    let mut ok = true;
    let mut detail = Vec::new();
    for pair in mean_se.windows(2) {
        let ratio = pair[0] / pair[1];
        detail.push(format!("{ratio:.2}x"));
        if ratio < sqrt10 / 2.0 || ratio > sqrt10 * 2.0 {
            ok = false;
        }
    }
    vec![check(
        "mc-se-scaling",
        ok,
        format!("SE shrink per decade: {} (want ~{sqrt10:.2}x within 2x)", detail.join(", ")),
    )]
}

pub fn run_verification(quick: bool) -> Vec<Check> {
    let mut checks = Vec::new();
    checks.extend(verify_gradients(quick));
    checks.extend(verify_log_sobolev(quick));
    checks.extend(verify_bound(quick));
    checks.extend(verify_estimator_agreement(quick));
    checks.extend(verify_mc_convergence(quick));
    checks
}
