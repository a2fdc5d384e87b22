//! Gaussian quadrature rules built by the Golub-Welsch eigenvalue method,
//! plus graded rules for integrands with integrable endpoint singularities.

use nalgebra::DMatrix;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Nodes and weights of a fixed quadrature rule, nodes ascending.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    /// Affine image of a rule on [-1, 1] onto [a, b].
    pub fn scaled_to(&self, a: f64, b: f64) -> QuadRule {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        QuadRule {
            nodes: self.nodes.iter().map(|&x| c + h * x).collect(),
            weights: self.weights.iter().map(|&w| w * h).collect(),
        }
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Rule for a symmetric Jacobi matrix with the given off-diagonal. Total mass
/// is the integral of the weight function; node symmetry about 0 is enforced
/// exactly so paired contributions cancel bitwise.
fn golub_welsch(offdiag: &[f64], total_mass: f64) -> QuadRule {
    let n = offdiag.len() + 1;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for (k, &b) in offdiag.iter().enumerate() {
        jac[(k, k + 1)] = b;
        jac[(k + 1, k)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let wsum: f64 = pairs.iter().map(|p| p.1).sum();
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs
        .iter()
        .map(|p| p.1 * total_mass / wsum)
        .collect();
    let half = n / 2;
    for i in 0..half {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[half] = 0.0;
    }
    QuadRule { nodes, weights }
}

/// Gauss-Hermite rule: sum_i w_i f(z_i) approximates the integral of
/// f(z) exp(-z^2) over the line. Weights sum to sqrt(pi).
pub fn gauss_hermite(n: usize) -> QuadRule {
    assert!(n >= 1, "rule order must be positive");
    let offdiag: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&offdiag, std::f64::consts::PI.sqrt())
}

/// Gauss-Legendre rule on [-1, 1]. Weights sum to 2.
pub fn gauss_legendre(n: usize) -> QuadRule {
    assert!(n >= 1, "rule order must be positive");
    let offdiag: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&offdiag, 2.0)
}

type RuleCache = Mutex<HashMap<(u8, usize), Arc<QuadRule>>>;

fn cache() -> &'static RuleCache {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cached(kind: u8, n: usize, build: impl FnOnce() -> QuadRule) -> Arc<QuadRule> {
    let mut map = cache().lock().expect("quadrature cache poisoned");
    map.entry((kind, n))
        .or_insert_with(|| Arc::new(build()))
        .clone()
}

pub fn gauss_hermite_cached(n: usize) -> Arc<QuadRule> {
    cached(0, n, || gauss_hermite(n))
}

pub fn gauss_legendre_cached(n: usize) -> Arc<QuadRule> {
    cached(1, n, || gauss_legendre(n))
}

/// Rule for the integral over [a, b] of an integrand with an integrable
/// algebraic singularity no worse than (s-a)^(-mu), 0 <= mu < 1, at the left
/// endpoint. The substitution s = a + (b-a) v^(1/(1-mu)) with Gauss-Legendre
/// in v clusters nodes at a and keeps the transformed integrand bounded.
pub fn graded_rule_left(a: f64, b: f64, mu: f64, n: usize) -> QuadRule {
    assert!(b > a, "empty interval");
    assert!((0.0..1.0).contains(&mu), "singularity order must be in [0, 1)");
    let p = 1.0 / (1.0 - mu);
    let base = gauss_legendre_cached(n);
    let len = b - a;
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (&x, &w) in base.nodes.iter().zip(&base.weights) {
        let v = 0.5 * (x + 1.0);
        nodes.push(a + len * v.powf(p));
        weights.push(0.5 * w * len * p * v.powf(p - 1.0));
    }
    QuadRule { nodes, weights }
}

/// Mirror of `graded_rule_left` with the singularity at the right endpoint.
pub fn graded_rule_right(a: f64, b: f64, mu: f64, n: usize) -> QuadRule {
    let left = graded_rule_left(0.0, b - a, mu, n);
    let mut nodes: Vec<f64> = left.nodes.iter().map(|&s| b - s).collect();
    let mut weights = left.weights;
    nodes.reverse();
    weights.reverse();
    QuadRule { nodes, weights }
}

/// Time mesh t_j = total * (j/m)^exponent, j = 0..=m, clustered at 0 for
/// exponent > 1.
pub fn graded_mesh(total: f64, m: usize, exponent: f64) -> Vec<f64> {
    assert!(m >= 1 && total > 0.0 && exponent >= 1.0);
    (0..=m)
        .map(|j| total * (j as f64 / m as f64).powf(exponent))
        .collect()
}
