//! Odd symmetric mollification preserving the Dirichlet boundary, and
//! K-convergence diagnostics (uniform convergence on compacts together with
//! a uniform sup bound).
//!
//! The mollified function is the convolution of the odd extension of
//! phi * chi (chi a smooth cutoff vanishing near the wall) with a tensor
//! bump kernel, evaluated by a fixed symmetric quadrature over the kernel
//! support. Discrete per-axis weight normalization makes the sup-norm bound
//! hold exactly for the computed sums, and summing the first axis in
//! mirrored pairs makes the boundary value exactly zero in floating point.

use crate::func::HalfSpaceFn;
use crate::model::HalfSpacePoint;
use crate::quad;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum ApproxError {
    #[error("mollifier indices must all be at least 1")]
    BadIndex,
    #[error("projection dimension {n_proj} exceeds the ambient dimension {dim}")]
    ProjectionTooLarge { n_proj: usize, dim: usize },
}

/// Indices of one member of the approximating family: cutoff index h
/// (cutoff active on [1/h, 2/h]), projection dimension, and mollifier
/// radius index k (kernel support radius 1/k).
#[derive(Debug, Clone, Copy)]
pub struct MollifierSpec {
    pub h: usize,
    pub n_proj: usize,
    pub k: usize,
}

impl MollifierSpec {
    pub fn validate(&self, dim: usize) -> Result<(), ApproxError> {
        if self.h < 1 || self.n_proj < 1 || self.k < 1 {
            return Err(ApproxError::BadIndex);
        }
        if self.n_proj > dim {
            return Err(ApproxError::ProjectionTooLarge {
                n_proj: self.n_proj,
                dim,
            });
        }
        Ok(())
    }
}

/// Quintic smoothstep cutoff: 0 below eps, 1 above 2*eps, C^2 in between.
fn chi(a: f64, eps: f64) -> f64 {
    let w = (a - eps) / eps;
    if w <= 0.0 {
        0.0
    } else if w >= 1.0 {
        1.0
    } else {
        w * w * w * (10.0 + w * (-15.0 + 6.0 * w))
    }
}

/// Unnormalized 1-D bump profile on |u| < 1/k.
fn bump(u: f64, k: f64) -> f64 {
    let s = k * u;
    let r = 1.0 - s * s;
    if r <= 0.0 {
        0.0
    } else {
        (-1.0 / r).exp()
    }
}

/// Nodes per kernel axis; odd so the center node sits exactly at zero.
const AXIS_NODES: usize = 25;

/// The mollified odd extension, evaluable on all of R^n (its restriction to
/// the half-space is the approximant; evaluating at negative x1 exposes the
/// odd symmetry).
#[derive(Clone)]
pub struct MollifiedFn {
    phi: HalfSpaceFn,
    dim: usize,
    n_proj: usize,
    eps: f64,
    /// Symmetric quadrature offsets over the kernel support, ascending.
    nodes: Vec<f64>,
    /// Discretely normalized kernel weights; they sum to 1 per axis.
    weights: Vec<f64>,
}

impl MollifiedFn {
    pub fn bound(&self) -> f64 {
        self.phi.bound()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Odd extension of the cutoff datum, exact under sign flip.
    fn extension(&self, z1: f64, transverse: &[f64]) -> f64 {
        if z1 >= 0.0 {
            self.phi.eval(z1, transverse) * chi(z1, self.eps)
        } else {
            -(self.phi.eval(-z1, transverse) * chi(-z1, self.eps))
        }
    }

    /// Value at a full-space point (length = ambient dimension). The first
    /// axis is summed in mirrored node pairs, so at x1 = 0 every pair
    /// cancels exactly and the result is floating-point zero.
    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "point dimension mismatch");
        let q = self.nodes.len();
        let half = q / 2;
        let n_trans = self.n_proj - 1;
        // evaluation coordinates beyond the projection are zero
        let mut zt = vec![0.0; self.dim - 1];
        let mut idx = vec![0usize; n_trans];
        let mut total = 0.0;
        loop {
            let mut wt = 1.0;
            for (a, &i) in idx.iter().enumerate() {
                wt *= self.weights[i];
                zt[a] = x[a + 1] - self.nodes[i];
            }
            let mut s1 = 0.0;
            for j in 0..half {
                let pair = self.extension(x[0] - self.nodes[j], &zt)
                    + self.extension(x[0] - self.nodes[q - 1 - j], &zt);
                s1 += self.weights[j] * pair;
            }
            s1 += self.weights[half] * self.extension(x[0], &zt);
            total += wt * s1;
            // odometer over the transverse kernel axes
            let mut carry = 0;
            while carry < n_trans {
                idx[carry] += 1;
                if idx[carry] < q {
                    break;
                }
                idx[carry] = 0;
                carry += 1;
            }
            if carry == n_trans {
                break;
            }
        }
        total
    }

    /// Restriction to the half-space.
    pub fn eval_half(&self, x: &HalfSpacePoint) -> f64 {
        let mut full = Vec::with_capacity(self.dim);
        full.push(x.x1());
        full.extend_from_slice(x.transverse());
        self.eval(&full)
    }
}

/// Builds the mollified odd extension of phi * chi for one index triple.
pub fn mollify_odd(
    phi: &HalfSpaceFn,
    spec: &MollifierSpec,
    dim: usize,
) -> Result<MollifiedFn, ApproxError> {
    spec.validate(dim)?;
    let k = spec.k as f64;
    let rule = quad::gauss_legendre_cached(AXIS_NODES).scaled_to(-1.0 / k, 1.0 / k);
    let raw: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&u, &w)| w * bump(u, k))
        .collect();
    let mass: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|&v| v / mass).collect();
    Ok(MollifiedFn {
        phi: phi.clone(),
        dim,
        n_proj: spec.n_proj,
        eps: 1.0 / spec.h as f64,
        nodes: rule.nodes,
        weights,
    })
}

/// K-convergence diagnostic: sup bound held by every member, deviation from
/// the limit per sequence index and compact, and a verdict requiring the
/// deviations to decrease monotonically to at most tol on every compact.
#[derive(Debug, Clone)]
pub struct KconvReport {
    pub sup_ok: bool,
    /// deviations[i][c] = max |f_i - limit| over compact c.
    pub deviations: Vec<Vec<f64>>,
    pub pass: bool,
}

pub fn kconv_diagnostic(
    sequence: &[&dyn Fn(&HalfSpacePoint) -> f64],
    limit: &dyn Fn(&HalfSpacePoint) -> f64,
    compacts: &[Vec<HalfSpacePoint>],
    bound: f64,
    tol: f64,
) -> KconvReport {
    let mut sup_ok = true;
    let mut deviations = Vec::with_capacity(sequence.len());
    for f in sequence {
        let mut per_compact = Vec::with_capacity(compacts.len());
        for compact in compacts {
            let mut dev = 0.0f64;
            for x in compact {
                let v = f(x);
                if v.abs() > bound * (1.0 + 1e-12) {
                    sup_ok = false;
                }
                dev = dev.max((v - limit(x)).abs());
            }
            per_compact.push(dev);
        }
        deviations.push(per_compact);
    }
    let mut pass = sup_ok && !sequence.is_empty();
    for c in 0..compacts.len() {
        for i in 1..deviations.len() {
            if deviations[i][c] > deviations[i - 1][c] {
                pass = false;
            }
        }
        if let Some(last) = deviations.last() {
            if last[c] > tol {
                pass = false;
            }
        }
    }
    KconvReport {
        sup_ok,
        deviations,
        pass,
    }
}
