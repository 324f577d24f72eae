//! Randomized graph generation and gradient checking against finite
//! differences. Used by the verification suites and the test oracles.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::graph::{backward_scalar, emax, emin};
use super::{finite_diff_grad, Evaluator, Node, Tensor};

const LEAF_DIM: usize = 4;

fn random_leaf(rng: &mut StdRng) -> Node {
    let data: Vec<f64> = (0..LEAF_DIM)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Node::leaf(Tensor::from_vec(data))
}

/// Build a random scalar-valued graph over `n_leaves` rank-1 leaves.
/// Every op kind is reachable; domains are kept safe (log of 1+x^2,
/// division by 1+x^2, squashed exponents).
pub fn random_graph(rng: &mut StdRng, depth: usize) -> (Node, Vec<Node>) {
    let n_leaves = rng.gen_range(2..=3);
    let leaves: Vec<Node> = (0..n_leaves).map(|_| random_leaf(rng)).collect();
    let mut pool: Vec<Node> = leaves.clone();
    for _ in 0..depth {
        let a = pool[rng.gen_range(0..pool.len())].clone();
        let b = pool[rng.gen_range(0..pool.len())].clone();
        let one = Node::scalar(1.0).broadcast_to(a.shape());
        let next = match rng.gen_range(0..14) {
            0 => a.add(&b),
            1 => a.sub(&b),
            2 => a.mul(&b),
            // safe division: denominator >= 1
            3 => a.div(&b.mul(&b).add(&one)),
            4 => a.relu(),
            5 => a.sigmoid(),
            // squash before exponentiation so chains cannot overflow
            6 => a.sigmoid().exp(),
            7 => a.mul(&a).add(&one).log(),
            8 => a.softmax(),
            9 => emax(&a, &b),
            10 => emin(&a, &b),
            // matmul + transpose round trip through a 2x2 view
            11 => {
                let m = a.reshape(&[2, 2]);
                let n = b.reshape(&[2, 2]);
                m.matmul(&n.transpose()).reshape(&[LEAF_DIM])
            }
            // conv2d through a 1x2x2 view, restored via sum + broadcast
            12 => {
                let img = a.reshape(&[1, 2, 2]);
                let ker = b.slice(0, 1).reshape(&[1, 1, 1, 1]);
                let c = img.conv2d(&ker, 1, 1);
                c.sum().broadcast_to(&[LEAF_DIM]).add(&a.scale(0.5))
            }
            // concat + slice + max_all
            _ => {
                let cat = Node::concat(&[a.clone(), b.clone()]);
                let sl = cat.slice(1, LEAF_DIM);
                sl.add(&cat.max_all().broadcast_to(&[LEAF_DIM]).scale(0.1))
            }
        };
        pool.push(next);
    }
    let root = pool.last().unwrap().mean().sigmoid().add(&pool.last().unwrap().mean().scale(0.25));
    (root, leaves)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub graphs: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// First-order gradcheck: backward() vs central finite differences on
/// `n_graphs` random graphs.
pub fn first_order_suite(n_graphs: usize, seed: u64, tol: f64) -> CheckReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut failures = 0;
    for _ in 0..n_graphs {
        let depth = rng.gen_range(3..=6);
        let (root, leaves) = random_graph(&mut rng, depth);
        let grads = backward_scalar(&root);
        let mut graph_ok = true;
        for leaf in &leaves {
            let analytic = Evaluator::new().eval(&grads.wrt_or_zero(leaf)).unwrap();
            let base = leaf.leaf_value();
            let fd = finite_diff_grad(
                |t| {
                    leaf.set_value(t.clone());
                    Evaluator::new().scalar(&root).unwrap()
                },
                &base,
                1e-5,
            );
            leaf.set_value(base);
            for (a, f) in analytic.data().iter().zip(fd.data()) {
                let e = rel_err(*a, *f);
                max_err = max_err.max(e);
                if e >= tol {
                    graph_ok = false;
                }
            }
        }
        if !graph_ok {
            failures += 1;
        }
    }
    CheckReport { graphs: n_graphs, max_rel_err: max_err, failures }
}

/// Double-backward check: gradient of the gradient-squared-norm vs finite
/// differences of backward() outputs.
pub fn double_backward_suite(n_graphs: usize, seed: u64, tol: f64) -> CheckReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut failures = 0;
    for _ in 0..n_graphs {
        let depth = rng.gen_range(2..=4);
        let (root, leaves) = random_graph(&mut rng, depth);
        let g1 = backward_scalar(&root);
        // lambda = sum over leaves of ||d root / d leaf||^2
        let mut lambda = Node::scalar(0.0);
        for leaf in &leaves {
            lambda = lambda.add(&g1.wrt_or_zero(leaf).sq_norm());
        }
        let g2 = backward_scalar(&lambda);
        let mut graph_ok = true;
        for leaf in &leaves {
            let analytic = Evaluator::new().eval(&g2.wrt_or_zero(leaf)).unwrap();
            let base = leaf.leaf_value();
            let fd = finite_diff_grad(
                |t| {
                    leaf.set_value(t.clone());
                    Evaluator::new().scalar(&lambda).unwrap()
                },
                &base,
                1e-5,
            );
            leaf.set_value(base);
            for (a, f) in analytic.data().iter().zip(fd.data()) {
                let e = rel_err(*a, *f);
                max_err = max_err.max(e);
                if e >= tol {
                    graph_ok = false;
                }
            }
        }
        if !graph_ok {
            failures += 1;
        }
    }
    CheckReport { graphs: n_graphs, max_rel_err: max_err, failures }
}
