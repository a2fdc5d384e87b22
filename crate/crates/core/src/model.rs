//! Diagonal linear-diffusion model on the half-space {x1 > 0}: drift
//! coefficients, noise intensities, the gradient-smoothing exponent, and the
//! admissibility checks that certify it.

use thiserror::Error;

/// Raw model data before validation.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub dim: usize,
    pub a: Vec<f64>,
    pub lam: Vec<f64>,
    /// Gradient-smoothing exponent; None searches the coarse grid
    /// {0.05, 0.10, ..., 0.95} for the smallest admissible value.
    pub delta: Option<f64>,
    pub horizon: f64,
}

/// Validated model. Construct only through [`Model::validate`].
#[derive(Debug, Clone)]
pub struct Model {
    dim: usize,
    a: Vec<f64>,
    lam: Vec<f64>,
    delta: f64,
    horizon: f64,
    hyp_constant: f64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("empty truncation: dim must be at least 1")]
    EmptyTruncation,
    #[error("coefficient length mismatch: {field} has {got} entries, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate noise: lam[{index}] = {value} must be positive and finite")]
    DegenerateNoise { index: usize, value: f64 },
    #[error("nonfinite drift coefficient a[{index}]")]
    NonfiniteDrift { index: usize },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("smoothing exponent {0} is outside (0, 1)")]
    ExponentOutOfRange(f64),
    #[error(
        "smoothing exponent {0} does not bound t^delta * sup_k e^(a_k t) / sqrt(q_k(t)) near t = 0"
    )]
    ExponentRejected(f64),
    #[error("no smoothing exponent in (0, 1) bounds the weighted gradient constant")]
    ExponentNotCertifiable,
    #[error("point outside the closed half-space or nonfinite: x1 = {0}")]
    PointOutsideDomain(f64),
}

/// Variance of one coordinate of the linear transition over time t:
/// lam * (e^(2 a t) - 1) / (2 a), continued by lam * t at a = 0.
pub(crate) fn variance(a: f64, lam: f64, t: f64) -> f64 {
    if a == 0.0 {
        lam * t
    } else {
        lam * f64::exp_m1(2.0 * a * t) / (2.0 * a)
    }
}

/// log of `variance`, stable for extreme arguments.
fn ln_variance(a: f64, lam: f64, t: f64) -> f64 {
    if a == 0.0 {
        return lam.ln() + t.ln();
    }
    let z = 2.0 * a.abs() * t;
    let base = (lam / (2.0 * a.abs())).ln();
    if a > 0.0 {
        // ln(e^z - 1)
        let tail = if z > 700.0 { z } else { f64::exp_m1(z).ln() };
        base + tail
    } else {
        // ln(1 - e^(-z))
        base + (-f64::exp_m1(-z)).ln()
    }
}

/// ln of h(t) = t^delta * max_k e^(a_k t) / sqrt(q_k(t)).
fn ln_weighted_bound(a: &[f64], lam: &[f64], delta: f64, t: f64) -> f64 {
    let best = a
        .iter()
        .zip(lam)
        .map(|(&ak, &lk)| ak * t - 0.5 * ln_variance(ak, lk, t))
        .fold(f64::NEG_INFINITY, f64::max);
    delta * t.ln() + best
}

const DYADIC_LEVELS: u32 = 48;
const TAIL_GAPS: u32 = 8;
/// Accepted growth of h per dyadic refinement toward t = 0, in log2 units.
/// h behaves like t^(delta - 1/2) there, so admissible exponents give slope
/// <= 0 and the closest rejected grid exponent gives slope +0.05.
const SLOPE_TOLERANCE: f64 = 0.01;

/// True when t^delta * sup_k e^(a_k t)/sqrt(q_k(t)) stays bounded as t -> 0,
/// decided by the tail slope of h on the dyadic grid t = T 2^-j.
fn exponent_admissible(a: &[f64], lam: &[f64], horizon: f64, delta: f64) -> bool {
    let lh: Vec<f64> = (0..=DYADIC_LEVELS)
        .map(|j| ln_weighted_bound(a, lam, delta, horizon * 0.5f64.powi(j as i32)))
        .collect();
    let last = lh.len() - 1;
    let first = last - TAIL_GAPS as usize;
    let mean_gap = (lh[last] - lh[first]) / TAIL_GAPS as f64;
    mean_gap <= SLOPE_TOLERANCE * std::f64::consts::LN_2
}

impl Model {
    /// Check the model data and certify the smoothing exponent. When
    /// `spec.delta` is absent, the smallest admissible value on the grid
    /// {0.05, ..., 0.95} is selected; any model with all lam[k] > 0 admits
    /// delta = 1/2.
    pub fn validate(spec: ModelSpec) -> Result<Model, ModelError> {
        if spec.dim == 0 {
            return Err(ModelError::EmptyTruncation);
        }
        if spec.a.len() != spec.dim {
            return Err(ModelError::LengthMismatch {
                field: "a",
                expected: spec.dim,
                got: spec.a.len(),
            });
        }
        if spec.lam.len() != spec.dim {
            return Err(ModelError::LengthMismatch {
                field: "lam",
                expected: spec.dim,
                got: spec.lam.len(),
            });
        }
        for (k, &l) in spec.lam.iter().enumerate() {
            if !(l > 0.0) || !l.is_finite() {
                return Err(ModelError::DegenerateNoise { index: k, value: l });
            }
        }
        for (k, &ak) in spec.a.iter().enumerate() {
            if !ak.is_finite() {
                return Err(ModelError::NonfiniteDrift { index: k });
            }
        }
        if !(spec.horizon > 0.0) || !spec.horizon.is_finite() {
            return Err(ModelError::BadHorizon(spec.horizon));
        }

        let delta = match spec.delta {
            Some(d) => {
                if !(0.0 < d && d < 1.0) {
                    return Err(ModelError::ExponentOutOfRange(d));
                }
                if !exponent_admissible(&spec.a, &spec.lam, spec.horizon, d) {
                    return Err(ModelError::ExponentRejected(d));
                }
                d
            }
            None => (1..20)
                .map(|i| i as f64 * 0.05)
                .find(|&d| exponent_admissible(&spec.a, &spec.lam, spec.horizon, d))
                .ok_or(ModelError::ExponentNotCertifiable)?,
        };

        let hyp_constant = (0..=DYADIC_LEVELS)
            .map(|j| {
                ln_weighted_bound(
                    &spec.a,
                    &spec.lam,
                    delta,
                    spec.horizon * 0.5f64.powi(j as i32),
                )
                .exp()
            })
            .fold(0.0f64, f64::max);

        Ok(Model {
            dim: spec.dim,
            a: spec.a,
            lam: spec.lam,
            delta,
            horizon: spec.horizon,
            hyp_constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn lam(&self) -> &[f64] {
        &self.lam
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Certified constant: max over the dyadic time grid of
    /// t^delta * sup_k e^(a_k t)/sqrt(q_k(t)).
    pub fn hyp_constant(&self) -> f64 {
        self.hyp_constant
    }

    /// Drift coefficient of the boundary coordinate.
    pub fn alpha(&self) -> f64 {
        self.a[0]
    }

    /// Noise intensity of the boundary coordinate.
    pub fn lam1(&self) -> f64 {
        self.lam[0]
    }

    /// Per-coordinate transition variances over time t >= 0.
    pub fn variance_profile(&self, t: f64) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.lam)
            .map(|(&a, &lam)| variance(a, lam, t))
            .collect()
    }
}

/// Point of the closed half-space: boundary coordinate x1 >= 0 plus the
/// transverse coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpacePoint {
    x1: f64,
    transverse: Vec<f64>,
}

impl HalfSpacePoint {
    pub fn new(x1: f64, transverse: Vec<f64>) -> Result<Self, ModelError> {
        if !x1.is_finite() || x1 < 0.0 {
            return Err(ModelError::PointOutsideDomain(x1));
        }
        if transverse.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::PointOutsideDomain(x1));
        }
        Ok(HalfSpacePoint { x1, transverse })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn transverse(&self) -> &[f64] {
        &self.transverse
    }

    pub fn dim(&self) -> usize {
        1 + self.transverse.len()
    }

    pub fn on_boundary(&self) -> bool {
        self.x1 == 0.0
    }
}
