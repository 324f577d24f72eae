//! Functional entropy, Fisher information under product Gaussian measures,
//! softmax sensitivity, and the Monte-Carlo modality-balance regularizer
//! with its per-modality decomposition.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{backward_scalar, Evaluator, Node, Tensor};

#[derive(Debug, Error)]
pub enum RegError {
    #[error("distribution not normalized: sums to {0}")]
    NonNormalized(f64),
    #[error("negative probability {0}")]
    NegativeProbability(f64),
    #[error("non-positive sample {0} for functional entropy")]
    NonPositiveSample(f64),
    #[error("sample count must be >= 2")]
    TooFewSamples,
}

// ---------------------------------------------------------------------------
// Measures
// ---------------------------------------------------------------------------

/// Diagonal Gaussian over a feature block.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> GaussianMeasure {
        assert_eq!(mean.len(), std.len());
        assert!(std.iter().all(|&s| s > 0.0), "variance must be positive");
        GaussianMeasure { mean, std }
    }

    pub fn standard(dim: usize) -> GaussianMeasure {
        GaussianMeasure { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Centered at zero; used for additive feature noise.
    pub fn centered(std: Vec<f64>) -> GaussianMeasure {
        let dim = std.len();
        GaussianMeasure::new(vec![0.0; dim], std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut StdRng) -> Vec<f64> {
        (0..self.dim()).map(|i| self.mean[i] + self.std[i] * gauss(rng)).collect()
    }
}

/// Independent per-modality Gaussian blocks; sampling draws each block
/// independently (tensorization).
#[derive(Debug, Clone)]
pub struct ProductMeasure {
    pub visible: GaussianMeasure,
    pub thermal: GaussianMeasure,
}

impl ProductMeasure {
    pub fn dim(&self) -> usize {
        self.visible.dim() + self.thermal.dim()
    }

    pub fn sample(&self, rng: &mut StdRng) -> (Vec<f64>, Vec<f64>) {
        (self.visible.sample(rng), self.thermal.sample(rng))
    }
}

pub fn gauss(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Elementary quantities
// ---------------------------------------------------------------------------

/// Cross entropy H(g, p) = -sum_y g(y) log p(y), p clamped at 1e-12.
pub fn cross_entropy_h(g: &[f64], p: &[f64]) -> Result<f64, RegError> {
    for dist in [g, p] {
        if let Some(&v) = dist.iter().find(|v| **v < 0.0) {
            return Err(RegError::NegativeProbability(v));
        }
        let s: f64 = dist.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(RegError::NonNormalized(s));
        }
    }
    Ok(g.iter().zip(p).map(|(&gi, &pi)| -gi * pi.max(1e-12).ln()).sum())
}

/// Monte-Carlo functional entropy E[f log f] - E[f] log E[f] from positive
/// samples drawn i.i.d. under the measure. Tiny negative rounding residue is
/// clamped to zero.
pub fn functional_entropy(f_values: &[f64]) -> Result<f64, RegError> {
    if f_values.len() < 2 {
        return Err(RegError::TooFewSamples);
    }
    if let Some(&v) = f_values.iter().find(|v| **v <= 0.0) {
        return Err(RegError::NonPositiveSample(v));
    }
    let n = f_values.len() as f64;
    let mean_f: f64 = f_values.iter().sum::<f64>() / n;
    let mean_flogf: f64 = f_values.iter().map(|&f| f * f.ln()).sum::<f64>() / n;
    let e = mean_flogf - mean_f * mean_f.ln();
    if e < 0.0 && e > -1e-9 {
        Ok(0.0)
    } else {
        Ok(e)
    }
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

fn mc_of(values: &[f64]) -> McEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    McEstimate { mean, std_err: (var / n).sqrt(), samples: values.len() }
}

/// Positive scalar function of a flat feature vector, with a gradient.
pub trait ScalarField {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;
}

/// f(x) = exp(a . x); the log-Sobolev equality case under a standard Gaussian.
pub struct ExpLinear {
    pub coeff: Vec<f64>,
}

impl ScalarField for ExpLinear {
    fn dim(&self) -> usize {
        self.coeff.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.coeff.iter().zip(x).map(|(a, v)| a * v).sum::<f64>().exp()
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let f = self.value(x);
        self.coeff.iter().map(|a| a * f).collect()
    }
}

/// f(x) = softmax-style positive composition c + sigmoid(a . x).
pub struct SigmoidLinear {
    pub coeff: Vec<f64>,
    pub offset: f64,
}

impl ScalarField for SigmoidLinear {
    fn dim(&self) -> usize {
        self.coeff.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let t: f64 = self.coeff.iter().zip(x).map(|(a, v)| a * v).sum();
        self.offset + 1.0 / (1.0 + (-t).exp())
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let t: f64 = self.coeff.iter().zip(x).map(|(a, v)| a * v).sum();
        let s = 1.0 / (1.0 + (-t).exp());
        let d = s * (1.0 - s);
        self.coeff.iter().map(|a| a * d).collect()
    }
}

/// Monte-Carlo functional entropy of a field under a Gaussian measure,
/// with a delta-method standard error.
pub fn functional_entropy_mc(
    field: &dyn ScalarField,
    measure: &GaussianMeasure,
    k: usize,
    rng: &mut StdRng,
) -> McEstimate {
    let values: Vec<f64> = (0..k).map(|_| field.value(&measure.sample(rng))).collect();
    let n = k as f64;
    let mean_f = values.iter().sum::<f64>() / n;
    // influence function of E[f log f] - E[f] log E[f]
    let infl: Vec<f64> = values
        .iter()
        .map(|&f| f * f.max(1e-300).ln() - (1.0 + mean_f.max(1e-300).ln()) * f)
        .collect();
    let raw = mc_of(&infl);
    let mean = values.iter().map(|&f| f * f.max(1e-300).ln()).sum::<f64>() / n
        - mean_f * mean_f.max(1e-300).ln();
    let mean = if mean < 0.0 && mean > -1e-9 { 0.0 } else { mean };
    McEstimate { mean, std_err: raw.std_err, samples: k }
}

/// Monte-Carlo Fisher integrand E[ ||grad f||^2 / f ]. The caller applies the
/// 1/2 factor of the log-Sobolev bound.
pub fn fisher_information_mc(
    field: &dyn ScalarField,
    measure: &GaussianMeasure,
    k: usize,
    rng: &mut StdRng,
) -> McEstimate {
    let mut saturated = false;
    let values: Vec<f64> = (0..k)
        .map(|_| {
            let x = measure.sample(rng);
            let f = field.value(&x);
            let g2: f64 = field.grad(&x).iter().map(|v| v * v).sum();
            let denom = if f < 1e-12 {
                saturated = true;
                1e-12
            } else {
                f
            };
            g2 / denom
        })
        .collect();
    let _ = saturated;
    mc_of(&values)
}

// ---------------------------------------------------------------------------
// Sensitivity and the regularizer
// ---------------------------------------------------------------------------

/// Model posterior expressed over graph nodes so the regularizer stays
/// differentiable end to end.
pub trait Posterior {
    /// Predictive distribution given the two feature blocks: a node whose
    /// elements are strictly positive and sum to 1. A detector returns its
    /// normalized score map (a distribution over locations); binary toy
    /// models return the 2-vector (p, 1-p).
    fn predict(&self, z_v: &Node, z_t: &Node) -> Node;
}

/// Linear-sigmoid toy posterior used by oracles and tests; predicts the
/// binary distribution (sigmoid(u), 1 - sigmoid(u)) of a linear logit u.
pub struct LinearSoftmax {
    pub w_v: Vec<f64>,
    pub w_t: Vec<f64>,
    pub bias: f64,
}

impl Posterior for LinearSoftmax {
    fn predict(&self, z_v: &Node, z_t: &Node) -> Node {
        let wv = Node::constant(Tensor::from_vec(self.w_v.clone()));
        let wt = Node::constant(Tensor::from_vec(self.w_t.clone()));
        let p = wv
            .mul(z_v)
            .sum()
            .add(&wt.mul(z_t).sum())
            .add(&Node::scalar(self.bias))
            .sigmoid()
            .reshape(&[1]);
        let q = Node::constant(Tensor::from_vec(vec![1.0])).sub(&p);
        Node::concat(&[p, q])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Pathwise,
    FiniteDifferenceOracle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    /// Number of Monte-Carlo samples K (>= 2).
    pub sample_count: usize,
    /// variance = (variance_scale * per-feature batch std)^2
    pub variance_scale: f64,
    pub estimator: EstimatorKind,
    /// When set, regularizer gradients stop at the latent features instead of
    /// flowing into the encoders.
    #[serde(default)]
    pub stop_at_features: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            sample_count: 16,
            variance_scale: 0.5,
            estimator: EstimatorKind::Pathwise,
            stop_at_features: false,
        }
    }
}

/// Graph nodes produced by the regularizer; `total = visible + thermal`
/// holds exactly by construction.
pub struct LambdaNodes {
    pub total: Node,
    pub visible: Node,
    pub thermal: Node,
    pub sensitivity: Node,
    pub terms_visible: Vec<Node>,
    pub terms_thermal: Vec<Node>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularizerReport {
    pub lambda_total: f64,
    pub lambda_visible: f64,
    pub lambda_thermal: f64,
    pub sensitivity: f64,
    pub balance_ratio: f64,
    pub std_err: f64,
}

/// Cross entropy H(q, p) = -sum_i q_i ln p_i as a graph node; q is detached
/// and both arguments are distributions of the same shape.
fn h_cross(q_detached: &Node, p: &Node) -> Node {
    q_detached.mul(&p.log()).sum().neg()
}

/// Sensitivity S = H(mean predictive under perturbations, prediction at the
/// unperturbed features).
pub fn sensitivity(
    posterior: &dyn Posterior,
    z_v: &Node,
    z_t: &Node,
    measure: &ProductMeasure,
    k: usize,
    rng: &mut StdRng,
) -> Node {
    let p0 = posterior.predict(z_v, z_t);
    let mut acc: Option<Node> = None;
    for _ in 0..k {
        let (ev, et) = measure.sample(rng);
        let xv = z_v.add(&Node::constant(Tensor::new(z_v.shape(), ev)));
        let xt = z_t.add(&Node::constant(Tensor::new(z_t.shape(), et)));
        let p = posterior.predict(&xv, &xt);
        acc = Some(match acc {
            Some(a) => a.add(&p),
            None => p,
        });
    }
    let p_bar = acc.expect("k >= 1").scale(1.0 / k as f64).detach();
    h_cross(&p_bar, &p0)
}

/// Pathwise Monte-Carlo estimator of the Fisher-form regularizer
/// E_u[ ||grad_X S||^2 / S ], decomposed into visible and thermal gradient
/// blocks. The returned nodes are differentiable w.r.t. model parameters
/// (double backward through the per-sample gradients).
pub fn lambda_regu(
    posterior: &dyn Posterior,
    z_v: &Node,
    z_t: &Node,
    measure: &ProductMeasure,
    config: &RegularizerConfig,
    rng: &mut StdRng,
    ev: &mut Evaluator,
) -> LambdaNodes {
    let k = config.sample_count.max(2);
    let (z_v, z_t) = if config.stop_at_features {
        (z_v.detach(), z_t.detach())
    } else {
        (z_v.clone(), z_t.clone())
    };

    // perturbed feature points and their predictions
    let mut xs = Vec::with_capacity(k);
    let mut preds = Vec::with_capacity(k);
    for _ in 0..k {
        let (e_v, e_t) = measure.sample(rng);
        let xv = z_v.add(&Node::constant(Tensor::new(z_v.shape(), e_v)));
        let xt = z_t.add(&Node::constant(Tensor::new(z_t.shape(), e_t)));
        let p = posterior.predict(&xv, &xt);
        xs.push((xv, xt));
        preds.push(p);
    }
    // Reference distribution: mean predictive under the measure. It is held
    // fixed (the gradient flows through the second argument of H only), so it
    // is folded to a constant here; keeping it symbolic would drag every
    // per-sample backward pass across all K prediction graphs.
    let mut p_bar_val: Option<Vec<f64>> = None;
    for p in &preds {
        let t = ev.eval(p).expect("regularizer forward");
        match p_bar_val.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(t.data()) {
                    *a += v;
                }
            }
            None => p_bar_val = Some(t.data().to_vec()),
        }
    }
    let mut p_bar_val = p_bar_val.expect("k >= 2");
    for v in p_bar_val.iter_mut() {
        *v /= k as f64;
    }
    let p_bar = Node::constant(Tensor::new(preds[0].shape(), p_bar_val));

    let mut terms_v = Vec::with_capacity(k);
    let mut terms_t = Vec::with_capacity(k);
    for ((xv, xt), p) in xs.iter().zip(&preds) {
        let s = h_cross(&p_bar, p);
        let grads = backward_scalar(&s);
        let gv = grads.wrt_or_zero(xv);
        let gt = grads.wrt_or_zero(xt);
        terms_v.push(gv.sq_norm().div(&s));
        terms_t.push(gt.sq_norm().div(&s));
    }
    let mean_of = |terms: &[Node]| {
        let mut acc = Node::scalar(0.0);
        for t in terms {
            acc = acc.add(t);
        }
        acc.scale(1.0 / terms.len() as f64)
    };
    let visible = mean_of(&terms_v);
    let thermal = mean_of(&terms_t);
    let total = visible.add(&thermal);
    let sens = {
        let p0 = posterior.predict(&z_v, &z_t);
        h_cross(&p_bar, &p0)
    };
    LambdaNodes {
        total,
        visible,
        thermal,
        sensitivity: sens,
        terms_visible: terms_v,
        terms_thermal: terms_t,
    }
}

/// Evaluate the regularizer nodes into a scalar report.
pub fn evaluate_report(ev: &mut Evaluator, nodes: &LambdaNodes) -> RegularizerReport {
    let lambda_visible = ev.scalar(&nodes.visible).expect("regularizer eval");
    let lambda_thermal = ev.scalar(&nodes.thermal).expect("regularizer eval");
    let lambda_total = ev.scalar(&nodes.total).expect("regularizer eval");
    let sens = ev.scalar(&nodes.sensitivity).expect("regularizer eval");
    let per_term: Vec<f64> = nodes
        .terms_visible
        .iter()
        .zip(&nodes.terms_thermal)
        .map(|(a, b)| ev.scalar(a).unwrap() + ev.scalar(b).unwrap())
        .collect();
    let se = mc_of(&per_term).std_err;
    let hi = lambda_visible.max(lambda_thermal);
    let lo = lambda_visible.min(lambda_thermal);
    RegularizerReport {
        lambda_total,
        lambda_visible,
        lambda_thermal,
        sensitivity: sens,
        balance_ratio: hi / lo.max(1e-12),
        std_err: se,
    }
}

/// Finite-difference oracle estimator of the same quantity: identical
/// sampling scheme, but per-sample gradients of S come from central
/// differences on the value function instead of the backward pass.
pub fn lambda_regu_fd_oracle(
    posterior: &dyn Posterior,
    z_v: &[f64],
    z_t: &[f64],
    measure: &ProductMeasure,
    k: usize,
    step: f64,
    rng: &mut StdRng,
) -> RegularizerReport {
    let value_at = |xv: &[f64], xt: &[f64]| -> Vec<f64> {
        let nv = Node::constant(Tensor::from_vec(xv.to_vec()));
        let nt = Node::constant(Tensor::from_vec(xt.to_vec()));
        Evaluator::new().eval(&posterior.predict(&nv, &nt)).unwrap().data().to_vec()
    };
    // sample points
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
        .map(|_| {
            let (ev, et) = measure.sample(rng);
            (
                ev.iter().zip(z_v).map(|(e, z)| e + z).collect(),
                et.iter().zip(z_t).map(|(e, z)| e + z).collect(),
            )
        })
        .collect();
    let mut p_bar = value_at(&samples[0].0, &samples[0].1);
    for (xv, xt) in &samples[1..] {
        for (a, v) in p_bar.iter_mut().zip(value_at(xv, xt)) {
            *a += v;
        }
    }
    for v in p_bar.iter_mut() {
        *v /= k as f64;
    }
    let s_of = |xv: &[f64], xt: &[f64]| -> f64 {
        let p = value_at(xv, xt);
        -p_bar.iter().zip(&p).map(|(q, pi)| q * pi.clamp(1e-12, 1.0).ln()).sum::<f64>()
    };
    let mut terms_v = Vec::with_capacity(k);
    let mut terms_t = Vec::with_capacity(k);
    for (xv, xt) in &samples {
        let s = s_of(xv, xt);
        let mut g2v = 0.0;
        let mut probe = xv.clone();
        for i in 0..probe.len() {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = s_of(&probe, xt);
            probe[i] = orig - step;
            let down = s_of(&probe, xt);
            probe[i] = orig;
            g2v += ((up - down) / (2.0 * step)).powi(2);
        }
        let mut g2t = 0.0;
        let mut probe = xt.clone();
        for i in 0..probe.len() {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = s_of(xv, &probe);
            probe[i] = orig - step;
            let down = s_of(xv, &probe);
            probe[i] = orig;
            g2t += ((up - down) / (2.0 * step)).powi(2);
        }
        terms_v.push(g2v / s.max(1e-12));
        terms_t.push(g2t / s.max(1e-12));
    }
    let v = mc_of(&terms_v);
    let t = mc_of(&terms_t);
    let per_term: Vec<f64> = terms_v.iter().zip(&terms_t).map(|(a, b)| a + b).collect();
    let total = mc_of(&per_term);
    let p0 = value_at(z_v, z_t);
    let sens = -p_bar.iter().zip(&p0).map(|(q, pi)| q * pi.clamp(1e-12, 1.0).ln()).sum::<f64>();
    RegularizerReport {
        lambda_total: total.mean,
        lambda_visible: v.mean,
        lambda_thermal: t.mean,
        sensitivity: sens,
        balance_ratio: v.mean.max(t.mean) / v.mean.min(t.mean).max(1e-12),
        std_err: total.std_err,
    }
}

/// Convenience: evaluate the pathwise estimator on a toy posterior with
/// vector features, returning the report.
pub fn lambda_regu_report(
    posterior: &dyn Posterior,
    z_v: &[f64],
    z_t: &[f64],
    measure: &ProductMeasure,
    config: &RegularizerConfig,
    seed: u64,
) -> RegularizerReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let nv = Node::constant(Tensor::from_vec(z_v.to_vec()));
    let nt = Node::constant(Tensor::from_vec(z_t.to_vec()));
    let mut ev = Evaluator::new();
    let nodes = lambda_regu(posterior, &nv, &nt, measure, config, &mut rng, &mut ev);
    evaluate_report(&mut ev, &nodes)
}
