//! Dirichlet semigroup of the linear diffusion killed on leaving {x1 > 0}.
//!
//! The transition splits into a boundary coordinate, handled by an image
//! kernel (difference of a Gaussian and its reflection, which vanishes on the
//! plane), and independent transverse Gaussian coordinates. The action on a
//! bounded field is computed by a windowed panel rule in the boundary
//! coordinate tensored with Gauss-Hermite rules transversely. Gradients use
//! the analytic kernel derivative in the boundary coordinate and
//! Richardson-extrapolated central differences transversely.

use crate::func::HalfSpaceFn;
use crate::model::{self, HalfSpacePoint, Model};
use crate::quad::{self, QuadRule};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SemigroupError {
    #[error("nonpositive time: t = {0}")]
    NonpositiveTime(f64),
    #[error("kernel domain violation: theta = {theta} must be >= 0 and xi = {xi} must be > 0")]
    KernelDomain { theta: f64, xi: f64 },
    #[error("quadrature underresolved: {0}")]
    QuadratureUnderresolved(&'static str),
    #[error("gradient requested on boundary")]
    GradientOnBoundary,
    #[error("dimension mismatch: model dim {model_dim}, point dim {point_dim}")]
    DimensionMismatch { model_dim: usize, point_dim: usize },
    #[error("survival probability requested at negative x1 = {0}")]
    NegativeSource(f64),
}

/// Boundary-coordinate data of the killed transition over time t: the mean
/// scale e^(alpha t) and the accumulated noise variance g(t).
#[derive(Debug, Clone, Copy)]
pub struct RadialKernel {
    t: f64,
    mean_scale: f64,
    g: f64,
}

impl RadialKernel {
    pub fn new(model: &Model, t: f64) -> Result<Self, SemigroupError> {
        if !t.is_finite() || t <= 0.0 {
            return Err(SemigroupError::NonpositiveTime(t));
        }
        Ok(RadialKernel {
            t,
            mean_scale: (model.alpha() * t).exp(),
            g: model::variance(model.alpha(), model.lam1(), t),
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Accumulated variance g(t) of the boundary coordinate.
    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn mean_scale(&self) -> f64 {
        self.mean_scale
    }

    /// Killed transition density of the boundary coordinate from theta >= 0
    /// to xi > 0: Gaussian at the propagated mean minus its mirror image.
    /// Identically zero at theta = 0, which is exact here because the two
    /// exponentials coincide bitwise.
    pub fn evaluate(&self, theta: f64, xi: f64) -> Result<f64, SemigroupError> {
        if !theta.is_finite() || !xi.is_finite() || theta < 0.0 || xi <= 0.0 {
            return Err(SemigroupError::KernelDomain { theta, xi });
        }
        Ok(self.evaluate_unchecked(theta, xi))
    }

    #[inline]
    pub(crate) fn evaluate_unchecked(&self, theta: f64, xi: f64) -> f64 {
        let m = theta * self.mean_scale;
        let inv2g = 0.5 / self.g;
        let d = xi - m;
        let s = xi + m;
        let norm = (2.0 * PI * self.g).sqrt().recip();
        norm * ((-d * d * inv2g).exp() - (-s * s * inv2g).exp())
    }

    /// Derivative of `evaluate` in the source theta.
    pub fn d_theta(&self, theta: f64, xi: f64) -> Result<f64, SemigroupError> {
        if !theta.is_finite() || !xi.is_finite() || theta < 0.0 || xi <= 0.0 {
            return Err(SemigroupError::KernelDomain { theta, xi });
        }
        Ok(self.d_theta_unchecked(theta, xi))
    }

    #[inline]
    pub(crate) fn d_theta_unchecked(&self, theta: f64, xi: f64) -> f64 {
        let m = theta * self.mean_scale;
        let inv2g = 0.5 / self.g;
        let d = xi - m;
        let s = xi + m;
        let norm = (2.0 * PI * self.g).sqrt().recip();
        norm * self.mean_scale / self.g
            * (d * (-d * d * inv2g).exp() + s * (-s * s * inv2g).exp())
    }

    /// Probability that the boundary coordinate started at x1 >= 0 has not
    /// left the half-line by time t; the mass of `evaluate` over xi > 0.
    pub fn survival(&self, x1: f64) -> Result<f64, SemigroupError> {
        if !x1.is_finite() || x1 < 0.0 {
            return Err(SemigroupError::NegativeSource(x1));
        }
        Ok(libm::erf(x1 * self.mean_scale / (2.0 * self.g).sqrt()))
    }
}

/// Mean scales e^(a_k t) and variances q_k(t) of the transverse Gaussian
/// coordinates over time t.
#[derive(Debug, Clone)]
pub struct TransversePropagator {
    mean_scales: Vec<f64>,
    variances: Vec<f64>,
}

impl TransversePropagator {
    pub fn new(model: &Model, t: f64) -> Result<Self, SemigroupError> {
        if !t.is_finite() || t <= 0.0 {
            return Err(SemigroupError::NonpositiveTime(t));
        }
        let mean_scales = model.a()[1..].iter().map(|&a| (a * t).exp()).collect();
        let variances = model.a()[1..]
            .iter()
            .zip(&model.lam()[1..])
            .map(|(&a, &lam)| model::variance(a, lam, t))
            .collect();
        Ok(TransversePropagator {
            mean_scales,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean_scales.len()
    }

    pub fn mean_scales(&self) -> &[f64] {
        &self.mean_scales
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

/// Tensor-quadrature resolution: Gauss-Hermite order per transverse
/// coordinate, total node budget for the boundary-coordinate integral, and
/// the window half-width in units of the kernel standard deviation.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub n_hermite: usize,
    pub n_radial: usize,
    pub radial_cutoff: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            n_hermite: 16,
            n_radial: 128,
            radial_cutoff: 8.0,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<(), SemigroupError> {
        if self.n_hermite < 2 {
            return Err(SemigroupError::QuadratureUnderresolved(
                "n_hermite must be at least 2",
            ));
        }
        if self.n_radial < 8 {
            return Err(SemigroupError::QuadratureUnderresolved(
                "n_radial must be at least 8",
            ));
        }
        if !(self.radial_cutoff >= 6.0) {
            return Err(SemigroupError::QuadratureUnderresolved(
                "radial_cutoff must be at least 6",
            ));
        }
        Ok(())
    }
}

/// The Dirichlet semigroup applied by quadrature.
pub struct KilledSemigroup<'m> {
    model: &'m Model,
    quad: QuadratureSpec,
    gh: Arc<QuadRule>,
    gh_weight_sum: f64,
}

/// Ratio of the central-difference step to the transverse smoothing scale.
const FD_STEP_RATIO: f64 = 0.25;

impl<'m> KilledSemigroup<'m> {
    pub fn new(model: &'m Model, quad: QuadratureSpec) -> Result<Self, SemigroupError> {
        quad.validate()?;
        let gh = quad::gauss_hermite_cached(quad.n_hermite);
        let gh_weight_sum = gh.weights.iter().sum();
        Ok(KilledSemigroup {
            model,
            quad,
            gh,
            gh_weight_sum,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn quad(&self) -> QuadratureSpec {
        self.quad
    }

    fn check_point(&self, x: &HalfSpacePoint) -> Result<(), SemigroupError> {
        if x.dim() != self.model.dim() {
            return Err(SemigroupError::DimensionMismatch {
                model_dim: self.model.dim(),
                point_dim: x.dim(),
            });
        }
        Ok(())
    }

    /// Expectation of f over paths still alive at time t, started at x.
    /// Exactly zero on the boundary plane; a contraction in the sup norm.
    pub fn apply(&self, t: f64, f: &HalfSpaceFn, x: &HalfSpacePoint) -> Result<f64, SemigroupError> {
        self.check_point(x)?;
        let kernel = RadialKernel::new(self.model, t)?;
        if x.on_boundary() {
            return Ok(0.0);
        }
        let trans = TransversePropagator::new(self.model, t)?;
        let radial = self.radial_rule(&kernel, x.x1(), f.radial_breakpoints());
        let kw = self.kernel_weights(&kernel, x.x1(), &radial);
        Ok(self.tensor_sum(&trans, x.transverse(), &radial.nodes, &kw, |xi, yp| {
            f.eval(xi, yp)
        }))
    }

    /// Gradient at an interior point: boundary component by the analytic
    /// kernel derivative, transverse components by central differences with
    /// one Richardson extrapolation. Errors on the boundary plane; see
    /// `gradient_one_sided` for the flagged boundary variant.
    pub fn gradient(
        &self,
        t: f64,
        f: &HalfSpaceFn,
        x: &HalfSpacePoint,
    ) -> Result<Vec<f64>, SemigroupError> {
        if x.on_boundary() {
            self.check_point(x)?;
            return Err(SemigroupError::GradientOnBoundary);
        }
        self.gradient_components(t, f, x)
    }

    /// Gradient without the boundary guard: on the wall the first component
    /// is the one-sided limit (the kernel derivative extends continuously to
    /// theta = 0) and the tangential components vanish because the field is
    /// zero on the whole plane.
    pub(crate) fn gradient_components(
        &self,
        t: f64,
        f: &HalfSpaceFn,
        x: &HalfSpacePoint,
    ) -> Result<Vec<f64>, SemigroupError> {
        self.check_point(x)?;
        let kernel = RadialKernel::new(self.model, t)?;
        let trans = TransversePropagator::new(self.model, t)?;
        let radial = self.radial_rule(&kernel, x.x1(), f.radial_breakpoints());
        let kw = self.kernel_weights(&kernel, x.x1(), &radial);
        let dw: Vec<f64> = radial
            .nodes
            .iter()
            .zip(&radial.weights)
            .map(|(&xi, &w)| w * kernel.d_theta_unchecked(x.x1(), xi))
            .collect();

        let mut grad = vec![0.0; self.model.dim()];
        grad[0] = self.tensor_sum(&trans, x.transverse(), &radial.nodes, &dw, |xi, yp| {
            f.eval(xi, yp)
        });

        if x.on_boundary() {
            return Ok(grad);
        }
        let mut xp = x.transverse().to_vec();
        for k in 0..trans.dim() {
            let h = FD_STEP_RATIO * trans.variances()[k].sqrt();
            let base = xp[k];
            let mut shifted = |s: f64| {
                xp[k] = base + s;
                let v = self.tensor_sum(&trans, &xp, &radial.nodes, &kw, |xi, yp| f.eval(xi, yp));
                xp[k] = base;
                v
            };
            let d1 = (shifted(h) - shifted(-h)) / (2.0 * h);
            let d2 = (shifted(2.0 * h) - shifted(-2.0 * h)) / (4.0 * h);
            grad[k + 1] = (4.0 * d1 - d2) / 3.0;
        }
        Ok(grad)
    }

    /// One-sided boundary gradient, flagged by name: second-order difference
    /// in the wall-normal direction using the exact zero on the plane; the
    /// tangential components vanish because the field is zero on the whole
    /// plane. Errors unless x lies on the boundary.
    pub fn gradient_one_sided(
        &self,
        t: f64,
        f: &HalfSpaceFn,
        x: &HalfSpacePoint,
    ) -> Result<Vec<f64>, SemigroupError> {
        self.check_point(x)?;
        if !x.on_boundary() {
            return Err(SemigroupError::GradientOnBoundary);
        }
        let kernel = RadialKernel::new(self.model, t)?;
        let h = FD_STEP_RATIO * kernel.g().sqrt() / kernel.mean_scale();
        let p1 = self.apply(t, f, &HalfSpacePoint::new(h, x.transverse().to_vec()).unwrap())?;
        let p2 = self.apply(
            t,
            f,
            &HalfSpacePoint::new(2.0 * h, x.transverse().to_vec()).unwrap(),
        )?;
        let mut grad = vec![0.0; self.model.dim()];
        grad[0] = (4.0 * p1 - p2) / (2.0 * h);
        Ok(grad)
    }

    /// Window for the boundary-coordinate integral, split at declared jump
    /// locations and into panels no wider than two kernel standard
    /// deviations, with Gauss-Legendre orders sharing the n_radial budget.
    fn radial_rule(&self, kernel: &RadialKernel, x1: f64, breakpoints: &[f64]) -> QuadRule {
        let m = x1 * kernel.mean_scale();
        let sigma = kernel.g().sqrt();
        let lo = (m - self.quad.radial_cutoff * sigma).max(0.0);
        let hi = m + self.quad.radial_cutoff * sigma;
        let mut cuts = vec![lo];
        for &b in breakpoints {
            if b > lo && b < hi {
                cuts.push(b);
            }
        }
        cuts.push(hi);
        let total_len = hi - lo;
        let mut nodes = Vec::with_capacity(self.quad.n_radial + 16);
        let mut weights = Vec::with_capacity(self.quad.n_radial + 16);
        for piece in cuts.windows(2) {
            let (p, q) = (piece[0], piece[1]);
            if q - p <= 1e-14 * total_len {
                continue;
            }
            let n_panels = ((q - p) / (2.0 * sigma)).ceil().max(1.0) as usize;
            let share = self.quad.n_radial as f64 * (q - p) / total_len;
            let order = ((share / n_panels as f64).round() as usize).clamp(6, 200);
            let base = quad::gauss_legendre_cached(order);
            for i in 0..n_panels {
                let a = p + (q - p) * i as f64 / n_panels as f64;
                let b = p + (q - p) * (i + 1) as f64 / n_panels as f64;
                let panel = base.scaled_to(a, b);
                nodes.extend_from_slice(&panel.nodes);
                weights.extend_from_slice(&panel.weights);
            }
        }
        QuadRule { nodes, weights }
    }

    /// Quadrature weights multiplied by the kernel, with the total mass capped
    /// at 1 so the discrete operator stays a sup-norm contraction.
    fn kernel_weights(&self, kernel: &RadialKernel, x1: f64, radial: &QuadRule) -> Vec<f64> {
        let mut kw: Vec<f64> = radial
            .nodes
            .iter()
            .zip(&radial.weights)
            .map(|(&xi, &w)| w * kernel.evaluate_unchecked(x1, xi))
            .collect();
        let mass: f64 = kw.iter().sum();
        if mass > 1.0 {
            let s = mass.recip();
            for w in &mut kw {
                *w *= s;
            }
        }
        kw
    }

    /// Sum over the Gauss-Hermite tensor grid of the transverse coordinates
    /// of the weighted boundary-coordinate integral of f.
    fn tensor_sum(
        &self,
        trans: &TransversePropagator,
        xp: &[f64],
        radial_nodes: &[f64],
        kernel_weights: &[f64],
        f: impl Fn(f64, &[f64]) -> f64,
    ) -> f64 {
        let d = trans.dim();
        if d == 0 {
            return radial_nodes
                .iter()
                .zip(kernel_weights)
                .map(|(&xi, &w)| w * f(xi, &[]))
                .sum();
        }
        let sds: Vec<f64> = trans
            .variances()
            .iter()
            .map(|&q| (2.0 * q).sqrt())
            .collect();
        let mut idx = vec![0usize; d];
        let mut y = vec![0.0; d];
        let mut acc = 0.0;
        'outer: loop {
            let mut wgh = 1.0;
            for k in 0..d {
                wgh *= self.gh.weights[idx[k]] / self.gh_weight_sum;
                y[k] = trans.mean_scales()[k] * xp[k] + sds[k] * self.gh.nodes[idx[k]];
            }
            let inner: f64 = radial_nodes
                .iter()
                .zip(kernel_weights)
                .map(|(&xi, &w)| w * f(xi, &y))
                .sum();
            acc += wgh * inner;
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < self.gh.nodes.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == d {
                    break 'outer;
                }
            }
        }
        acc
    }
}

/// Upper bound on the gradient constant of the semigroup: the sup over a
/// dyadic time grid of t^delta times the vector norm of the componentwise
/// operator norms |D_k P_t| = L1 mass of the k-th kernel derivative. Bounds
/// |D P_t f| <= C t^(-delta) sup|f| for every bounded f.
pub fn gradient_constant(model: &Model) -> f64 {
    let mut best = 0.0f64;
    for j in 0..=40 {
        let t = model.horizon() * 0.5f64.powi(j);
        let kernel = RadialKernel::new(model, t).expect("positive time");
        let trans = TransversePropagator::new(model, t).expect("positive time");
        let r = radial_derivative_mass_sup(&kernel);
        let mut s2 = r * r;
        for k in 0..trans.dim() {
            let e = trans.mean_scales()[k];
            s2 += 2.0 / PI * e * e / trans.variances()[k];
        }
        best = best.max(t.powf(model.delta()) * s2.sqrt());
    }
    best
}

fn radial_derivative_mass_sup(kernel: &RadialKernel) -> f64 {
    let sigma = kernel.g().sqrt();
    (0..=100)
        .map(|i| {
            let x1 = i as f64 * 0.06 * sigma / kernel.mean_scale();
            radial_derivative_mass(kernel, x1)
        })
        .fold(0.0f64, f64::max)
}

/// L1 mass over xi > 0 of the kernel derivative in theta at source x1,
/// by panels narrow enough that the single interior kink of |d_theta| is
/// harmless at the accuracy the constant needs.
fn radial_derivative_mass(kernel: &RadialKernel, x1: f64) -> f64 {
    let sigma = kernel.g().sqrt();
    let hi = x1 * kernel.mean_scale() + 10.0 * sigma;
    let n_panels = (2.0 * hi / sigma).ceil() as usize;
    let base = quad::gauss_legendre_cached(8);
    let mut acc = 0.0;
    for i in 0..n_panels {
        let a = hi * i as f64 / n_panels as f64;
        let b = hi * (i + 1) as f64 / n_panels as f64;
        acc += base
            .scaled_to(a, b)
            .integrate(|xi| kernel.d_theta_unchecked(x1, xi).abs());
    }
    acc
}
