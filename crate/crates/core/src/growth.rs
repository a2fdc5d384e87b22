//! Spatial growth example on the circle: Fourier-Galerkin truncation of the
//! operator d^2/dxi^2 + A(xi), rotation into the eigenbasis so the first
//! coordinate is the projection on the principal eigenvector, and a
//! consumption control problem on the resulting half-space.
//!
//! The solver layer minimizes costs, so the running gain U0 enters negated;
//! scenario reports negate back and present gains.

use crate::control::{
    estimate_cost, simulate_controlled, synthesize_feedback, verify, ControlError,
    ControlProblem, ControlSet, Policy, VerificationReport, VerifyConfig,
};
use crate::func::HalfSpaceFn;
use crate::hjb::{solve_mild, ConvergenceReport, GridFunction, HjbError, SolverConfig};
use crate::mc::McConfig;
use crate::model::{HalfSpacePoint, Model, ModelSpec};
use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

/// Pointwise running gain: (time, capital density, consumption density).
pub type GainFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;

#[derive(Debug, Clone, Error)]
pub enum GrowthError {
    #[error("bad growth spec: {0}")]
    BadSpec(&'static str),
    #[error("principal eigenvector positivity failed (refine n_modes)")]
    PositivityFailed,
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
}

/// Inputs of the growth example. `a_samples` holds the productivity A(xi)
/// on the uniform grid xi_i = 2 pi i / N over [0, 2 pi); `q_scale` assigns
/// the noise eigenvalue of each mode in the returned (sorted) eigen order,
/// principal mode first.
#[derive(Clone)]
pub struct GrowthSpec {
    pub a_samples: Vec<f64>,
    pub n_modes: usize,
    pub m_cap: f64,
    pub q_scale: Vec<f64>,
    pub horizon: f64,
    pub u0: Arc<GainFn>,
    pub u0_bound: f64,
}

impl std::fmt::Debug for GrowthSpec {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("GrowthSpec")
            .field("n_samples", &self.a_samples.len())
            .field("n_modes", &self.n_modes)
            .field("m_cap", &self.m_cap)
            .field("q_scale", &self.q_scale)
            .field("horizon", &self.horizon)
            .field("u0_bound", &self.u0_bound)
            .finish()
    }
}

impl GrowthSpec {
    fn validate(&self) -> Result<(), GrowthError> {
        if self.n_modes == 0 || self.n_modes % 2 == 0 {
            return Err(GrowthError::BadSpec("n_modes must be odd and positive"));
        }
        if self.a_samples.len() < 2 * self.n_modes {
            return Err(GrowthError::BadSpec(
                "productivity grid too coarse for the mode count",
            ));
        }
        if self.a_samples.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(GrowthError::BadSpec(
                "productivity samples must be finite and nonnegative",
            ));
        }
        if self.q_scale.len() != self.n_modes {
            return Err(GrowthError::BadSpec("q_scale must list one value per mode"));
        }
        if self.q_scale.iter().any(|q| !(*q > 0.0) || !q.is_finite()) {
            return Err(GrowthError::BadSpec("q_scale entries must be positive"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(GrowthError::BadSpec("horizon must be positive"));
        }
        if !(self.m_cap >= 0.0) || !self.m_cap.is_finite() {
            return Err(GrowthError::BadSpec("control cap must be nonnegative"));
        }
        if !(self.u0_bound >= 0.0) || !self.u0_bound.is_finite() {
            return Err(GrowthError::BadSpec("gain bound must be nonnegative"));
        }
        Ok(())
    }
}

/// Real Fourier basis on [0, 2 pi): index 0 is the constant, indices
/// 2j-1 and 2j are cos(j xi) and sin(j xi), all L2-normalized.
fn fourier_samples(n_modes: usize, xi: &[f64]) -> Vec<Vec<f64>> {
    let c0 = 1.0 / (2.0 * PI).sqrt();
    let cj = 1.0 / PI.sqrt();
    (0..n_modes)
        .map(|p| {
            xi.iter()
                .map(|&x| {
                    if p == 0 {
                        c0
                    } else {
                        let j = p.div_ceil(2) as f64;
                        if p % 2 == 1 {
                            cj * (j * x).cos()
                        } else {
                            cj * (j * x).sin()
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Galerkin matrix of d^2/dxi^2 + A(xi): diagonal -j^2 frequencies plus the
/// productivity coupling by the periodic rectangle rule. Mirrored entries
/// are copied, so the output is symmetric bitwise.
pub(crate) fn assemble_galerkin(a_samples: &[f64], n_modes: usize) -> DMatrix<f64> {
    let n_s = a_samples.len();
    let dxi = 2.0 * PI / n_s as f64;
    let xi: Vec<f64> = (0..n_s).map(|i| dxi * i as f64).collect();
    let basis = fourier_samples(n_modes, &xi);
    let mut mat = DMatrix::zeros(n_modes, n_modes);
    for p in 0..n_modes {
        let j = p.div_ceil(2) as f64;
        mat[(p, p)] = -j * j;
        for q in p..n_modes {
            let coupling: f64 = (0..n_s)
                .map(|i| a_samples[i] * basis[p][i] * basis[q][i])
                .sum::<f64>()
                * dxi;
            mat[(p, q)] += coupling;
            if q > p {
                mat[(q, p)] = mat[(p, q)];
            }
        }
    }
    mat
}

/// Eigen data and sampled basis of the rotated coordinates. Mode 0 is the
/// principal eigenvector; `mode_samples[m][i]` evaluates rotated mode m at
/// grid point xi_i, so capital profiles reconstruct as
/// k(xi_i) = sum_m coords[m] * mode_samples[m][i].
#[derive(Debug, Clone)]
pub struct GrowthBasis {
    pub xi: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Columns are eigenvectors in Fourier coordinates, principal first.
    pub rotation: DMatrix<f64>,
    /// Principal eigenvector on the xi grid, strictly positive.
    pub ybar: Vec<f64>,
    pub mode_samples: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl GrowthBasis {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Capital profile on the xi grid from rotated coordinates.
    pub fn reconstruct(&self, coords: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coords.len(), self.n_modes());
        debug_assert_eq!(out.len(), self.xi.len());
        out.fill(0.0);
        for (c, mode) in coords.iter().zip(&self.mode_samples) {
            for (o, b) in out.iter_mut().zip(mode) {
                *o += c * b;
            }
        }
    }

    /// Rotated coordinates of a sampled profile (L2 projection by the
    /// periodic rectangle rule); inverts `reconstruct` for profiles in the
    /// truncated span.
    pub fn project(&self, profile: &[f64]) -> Vec<f64> {
        debug_assert_eq!(profile.len(), self.xi.len());
        let dxi = 2.0 * PI / self.xi.len() as f64;
        self.mode_samples
            .iter()
            .map(|mode| {
                mode.iter()
                    .zip(profile)
                    .map(|(b, k)| b * k)
                    .sum::<f64>()
                    * dxi
            })
            .collect()
    }
}

/// Builds the truncated model: assembles and diagonalizes the Galerkin
/// matrix, orients the principal eigenvector positive, rotates so the first
/// coordinate is the projection on it, and wraps consumption control with
/// drift -u on the box [0, M]^n and running cost the negated spatial
/// quadrature of U0 (consumption densities clipped at zero).
pub fn build_growth_model(
    spec: &GrowthSpec,
) -> Result<(Model, ControlProblem, GrowthBasis), GrowthError> {
    spec.validate()?;
    let n = spec.n_modes;
    let n_s = spec.a_samples.len();
    let dxi = 2.0 * PI / n_s as f64;
    let xi: Vec<f64> = (0..n_s).map(|i| dxi * i as f64).collect();

    let mat = assemble_galerkin(&spec.a_samples, n);
    let eig = SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut rotation = DMatrix::zeros(n, n);
    for (m, &i) in order.iter().enumerate() {
        rotation.set_column(m, &eig.eigenvectors.column(i));
    }

    let fourier = fourier_samples(n, &xi);
    let sample_mode = |col: usize, rotation: &DMatrix<f64>| -> Vec<f64> {
        (0..n_s)
            .map(|i| (0..n).map(|p| rotation[(p, col)] * fourier[p][i]).sum())
            .collect()
    };
    let mut ybar = sample_mode(0, &rotation);
    if ybar.iter().sum::<f64>() < 0.0 {
        let flipped = -rotation.column(0).clone_owned();
        rotation.set_column(0, &flipped);
        for v in &mut ybar {
            *v = -*v;
        }
    }
    if ybar.iter().any(|v| !(*v > 0.0)) {
        return Err(GrowthError::PositivityFailed);
    }
    let ortho_defect = (rotation.transpose() * &rotation - DMatrix::identity(n, n))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(
        ortho_defect <= 1e-12,
        "eigenbasis rotation lost orthonormality: {ortho_defect:.3e}"
    );

    let mode_samples: Vec<Vec<f64>> = (0..n).map(|m| sample_mode(m, &rotation)).collect();

    let mut warnings = Vec::new();
    let mut saw_negative = false;
    let mut saw_nonzero_at_rest = false;
    for &s in &[0.0, 0.5 * spec.horizon, spec.horizon] {
        for &k in &[0.0, 0.5, 2.0] {
            if (spec.u0)(s, k, 0.0).abs() > 1e-12 {
                saw_nonzero_at_rest = true;
            }
            for &c in &[0.0, 0.3, spec.m_cap.max(0.3)] {
                if (spec.u0)(s, k, c) < -1e-12 {
                    saw_negative = true;
                }
            }
        }
    }
    if saw_negative {
        warnings.push("running gain is negative on a sampled tuple".to_string());
    }
    if saw_nonzero_at_rest {
        warnings
            .push("running gain at zero consumption is nonzero on a sampled tuple".to_string());
    }

    let basis = GrowthBasis {
        xi,
        eigenvalues: eigenvalues.clone(),
        rotation,
        ybar,
        mode_samples,
        warnings,
    };

    let model = Model::validate(ModelSpec {
        dim: n,
        a: eigenvalues,
        lam: spec.q_scale.clone(),
        delta: None,
        horizon: spec.horizon,
    })
    .map_err(|_| GrowthError::BadSpec("eigen data rejected by the model layer"))?;

    let u_set = ControlSet::Box {
        lo: vec![0.0; n],
        hi: vec![spec.m_cap; n],
    };
    let b_bound = spec.m_cap * (n as f64).sqrt();
    let ell_bound = 2.0 * PI * spec.u0_bound;
    let modes_b = basis.mode_samples.clone();
    let modes_ell = basis.mode_samples.clone();
    let u0 = spec.u0.clone();
    let problem = ControlProblem::new(
        model.clone(),
        u_set,
        b_bound,
        ell_bound,
        1e-9,
        HalfSpaceFn::constant(0.0),
        move |_s, _x1, _xp, u, out| {
            debug_assert_eq!(u.len(), modes_b.len());
            for (o, v) in out.iter_mut().zip(u) {
                *o = -v;
            }
        },
        move |s, x1, xp, u| {
            let n_s = modes_ell[0].len();
            let dxi = 2.0 * PI / n_s as f64;
            let mut total = 0.0;
            for i in 0..n_s {
                let mut k = x1 * modes_ell[0][i];
                let mut c = u[0] * modes_ell[0][i];
                for m in 1..modes_ell.len() {
                    k += xp[m - 1] * modes_ell[m][i];
                    c += u[m] * modes_ell[m][i];
                }
                total += u0(s, k, c.max(0.0));
            }
            -total * dxi
        },
    )?;

    Ok((model, problem, basis))
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub solver: SolverConfig,
    pub mc: McConfig,
    pub grid_tol: f64,
    /// Initial capital profiles as rotated coordinates, principal first.
    pub initial_states: Vec<Vec<f64>>,
}

/// End-to-end scenario output. Gains negate the solver's costs back into
/// the maximization convention.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub eigenvalues: Vec<f64>,
    pub xi: Vec<f64>,
    pub solve: ConvergenceReport,
    pub verification: VerificationReport,
    /// Value function at each initial state, as a gain.
    pub values: Vec<f64>,
    /// Feedback-policy Monte Carlo gain and standard error per state.
    pub gains: Vec<(f64, f64)>,
    /// Feedback consumption density at time zero on the xi grid per state.
    pub consumption: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Builds the model, solves the backward equation, synthesizes feedback,
/// and verifies it against the no-consumption policy at each initial state.
pub fn run_growth_scenario(
    spec: &GrowthSpec,
    cfg: &ScenarioConfig,
) -> Result<(ScenarioReport, GridFunction), GrowthError> {
    let (model, problem, basis) = build_growth_model(spec)?;
    let n = spec.n_modes;
    let semilinear = problem.hjb_problem()?;
    let (solution, solve) = solve_mild(&semilinear, &cfg.solver)?;

    let mut test_points = Vec::with_capacity(cfg.initial_states.len());
    for coords in &cfg.initial_states {
        if coords.len() != n {
            return Err(GrowthError::BadSpec(
                "initial state dimension must equal n_modes",
            ));
        }
        let point = HalfSpacePoint::new(coords[0], coords[1..].to_vec())
            .map_err(|_| GrowthError::BadSpec("initial state outside the half-space"))?;
        test_points.push((0.0, point));
    }

    let feedback = synthesize_feedback(&problem, &solution);
    let policies = vec![feedback.clone(), Policy::constant(vec![0.0; n])];
    let vcfg = VerifyConfig {
        mc: cfg.mc,
        grid_tol: cfg.grid_tol,
    };
    let verification = verify(&problem, &solution, &policies, &test_points, &vcfg)?;

    let horizon = model.horizon();
    let mut values = Vec::with_capacity(test_points.len());
    let mut gains = Vec::with_capacity(test_points.len());
    let mut consumption = Vec::with_capacity(test_points.len());
    let mut u = vec![0.0; n];
    for (t0, point) in &test_points {
        values.push(-solution.value_at(horizon - t0, point));
        let (j, se) = estimate_cost(&problem, *t0, point, &feedback, &cfg.mc)?;
        gains.push((-j, se));
        feedback.eval(*t0, point.x1(), point.transverse(), &mut u);
        let mut c = vec![0.0; basis.xi.len()];
        basis.reconstruct(&u, &mut c);
        for v in &mut c {
            *v = v.max(0.0);
        }
        consumption.push(c);
    }

    let report = ScenarioReport {
        eigenvalues: basis.eigenvalues.clone(),
        xi: basis.xi.clone(),
        solve,
        verification,
        values,
        gains,
        consumption,
        warnings: basis.warnings.clone(),
    };
    Ok((report, solution))
}

/// Keeps the simulation entry point visible from this module for CLI use.
pub fn simulate_growth_policy(
    problem: &ControlProblem,
    x0: &HalfSpacePoint,
    policy: &Policy,
    cfg: &McConfig,
) -> Result<(f64, f64), GrowthError> {
    let batch = simulate_controlled(problem, 0.0, x0, policy, cfg)?;
    let (mean, se) = crate::stats::mean_and_stderr(&batch.costs);
    Ok((-mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::hamiltonian_min;
    use crate::grid::GridSpec;
    use crate::semigroup::QuadratureSpec;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_spec(a: f64, n_modes: usize) -> GrowthSpec {
        GrowthSpec {
            a_samples: vec![a; 16],
            n_modes,
            m_cap: 0.5,
            q_scale: vec![1.0; n_modes],
            horizon: 1.0,
            u0: Arc::new(|_, k: f64, _| k.tanh()),
            u0_bound: 1.0,
        }
    }

    #[test]
    fn constant_productivity_spectrum_is_exact() {
        let a = 0.7;
        let (model, _, basis) = build_growth_model(&flat_spec(a, 5)).unwrap();
        let want = [a, a - 1.0, a - 1.0, a - 4.0, a - 4.0];
        for (ev, w) in basis.eigenvalues.iter().zip(&want) {
            assert!(
                (ev - w).abs() <= 1e-10 * (1.0 + w.abs()),
                "eigenvalue {ev} vs {w}"
            );
        }
        assert_eq!(model.a(), basis.eigenvalues.as_slice());
        // the principal eigenvector of a flat productivity is constant
        let mean = basis.ybar.iter().sum::<f64>() / basis.ybar.len() as f64;
        for v in &basis.ybar {
            assert_abs_diff_eq!(*v, mean, epsilon = 1e-10);
        }
        assert!(mean > 0.0);
    }

    #[test]
    fn galerkin_matrix_is_symmetric_bitwise() {
        let n_s = 64;
        let a: Vec<f64> = (0..n_s)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / n_s as f64;
                1.0 + 0.3 * x.cos() + 0.1 * (2.0 * x).sin()
            })
            .collect();
        let mat = assemble_galerkin(&a, 7);
        for p in 0..7 {
            for q in 0..7 {
                assert_eq!(mat[(p, q)].to_bits(), mat[(q, p)].to_bits());
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal_and_reads_the_principal_coordinate() {
        let n_s = 48;
        let mut spec = flat_spec(1.0, 5);
        spec.a_samples = (0..n_s)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / n_s as f64;
                1.0 + 0.4 * x.cos()
            })
            .collect();
        let (_, _, basis) = build_growth_model(&spec).unwrap();
        let n = basis.n_modes();
        let defect = (basis.rotation.transpose() * &basis.rotation
            - DMatrix::identity(n, n))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(defect <= 1e-12, "orthonormality defect {defect:.3e}");
        // half-space membership is coordinate-1 positivity: the projection
        // of a reconstructed profile on ybar equals its first coordinate
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dxi = 2.0 * PI / n_s as f64;
        for _ in 0..10 {
            let coords: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let mut profile = vec![0.0; n_s];
            basis.reconstruct(&coords, &mut profile);
            let inner: f64 = profile
                .iter()
                .zip(&basis.ybar)
                .map(|(k, y)| k * y)
                .sum::<f64>()
                * dxi;
            assert_abs_diff_eq!(inner, coords[0], epsilon = 1e-10);
        }
    }

    #[test]
    fn projection_inverts_reconstruction() {
        let (_, _, basis) = build_growth_model(&flat_spec(0.5, 5)).unwrap();
        let coords = vec![1.2, -0.3, 0.4, 0.05, -0.6];
        let mut profile = vec![0.0; basis.xi.len()];
        basis.reconstruct(&coords, &mut profile);
        let back = basis.project(&profile);
        for (b, c) in back.iter().zip(&coords) {
            assert_abs_diff_eq!(*b, *c, epsilon = 1e-10);
        }
    }

    #[test]
    fn perturbed_productivity_moves_the_top_pair_quadratically() {
        let a = 1.0;
        let eps = 1e-3;
        let n_s = 64;
        let mut spec = flat_spec(a, 5);
        spec.a_samples = (0..n_s)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / n_s as f64;
                a + eps * x.cos()
            })
            .collect();
        let (_, _, basis) = build_growth_model(&spec).unwrap();
        // the first-order shift vanishes (cos integrates to zero against
        // the flat eigenvector), so the top eigenvalue moves at order eps^2
        assert!(
            (basis.eigenvalues[0] - a).abs() <= 10.0 * eps * eps,
            "top eigenvalue moved by {:.3e}",
            (basis.eigenvalues[0] - a).abs()
        );
        let mean = basis.ybar.iter().sum::<f64>() / basis.ybar.len() as f64;
        let dev = basis
            .ybar
            .iter()
            .fold(0.0f64, |m, v| m.max((v - mean).abs()));
        assert!(dev / mean <= 10.0 * eps, "ybar deviation {dev:.3e}");
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut s = flat_spec(1.0, 5);
        s.n_modes = 4;
        assert!(matches!(
            build_growth_model(&s),
            Err(GrowthError::BadSpec(_))
        ));
        let mut s = flat_spec(1.0, 5);
        s.a_samples = vec![1.0; 9];
        assert!(matches!(
            build_growth_model(&s),
            Err(GrowthError::BadSpec(
                "productivity grid too coarse for the mode count"
            ))
        ));
        let mut s = flat_spec(1.0, 5);
        s.a_samples[3] = -0.2;
        assert!(matches!(
            build_growth_model(&s),
            Err(GrowthError::BadSpec(_))
        ));
        let mut s = flat_spec(1.0, 5);
        s.q_scale = vec![1.0; 4];
        assert!(matches!(
            build_growth_model(&s),
            Err(GrowthError::BadSpec(_))
        ));
    }

    #[test]
    fn gain_sample_checks_emit_warnings() {
        let mut s = flat_spec(1.0, 3);
        s.u0 = Arc::new(|_, _, c: f64| c - 0.5);
        s.u0_bound = 10.0;
        let (_, _, basis) = build_growth_model(&s).unwrap();
        assert!(basis
            .warnings
            .iter()
            .any(|w| w.contains("negative")));
        assert!(basis
            .warnings
            .iter()
            .any(|w| w.contains("zero consumption")));
        let mut s = flat_spec(1.0, 3);
        s.u0 = Arc::new(|_, _, c: f64| c.min(1.0));
        let (_, _, basis) = build_growth_model(&s).unwrap();
        assert!(basis.warnings.is_empty());
    }

    #[test]
    fn equal_noise_scales_give_a_scalar_covariance() {
        let (model, _, _) = build_growth_model(&flat_spec(0.5, 3)).unwrap();
        assert!(model.lam().iter().all(|&l| l == 1.0));
    }

    #[test]
    fn consumption_argmin_is_bang_bang_for_consumption_free_gain() {
        // U0 independent of c makes the Hamiltonian linear in u on the box,
        // so each coordinate sits at 0 or at the cap by the sign of the
        // matching momentum component
        let m_cap = 0.8;
        let mut spec = flat_spec(1.0, 3);
        spec.m_cap = m_cap;
        let (_, problem, _) = build_growth_model(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let p: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let xp: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() - 0.5).collect();
            let (_, u) = hamiltonian_min(&problem, 0.3, 1.0, &xp, &p);
            for (ui, pi) in u.iter().zip(&p) {
                if pi.abs() <= 1e-6 {
                    continue;
                }
                // drift is -u: the u-term of the Hamiltonian is -<p, u>
                let want = if *pi > 0.0 { m_cap } else { 0.0 };
                assert!(
                    (ui - want).abs() <= 1e-9,
                    "component {ui} vs bang-bang {want} at momentum {pi}"
                );
            }
        }
    }

    fn tiny_solver_cfg(n_modes: usize, transverse_nodes: usize) -> SolverConfig {
        SolverConfig {
            beta: None,
            tol: 1e-5,
            max_iters: 30,
            mesh_grading: None,
            time_intervals: 4,
            grid: GridSpec {
                x1_max: 8.0,
                x1_nodes: 27,
                transverse_half_width: vec![3.0; n_modes - 1],
                transverse_nodes: vec![transverse_nodes; n_modes - 1],
            },
            quad: QuadratureSpec {
                n_hermite: 8,
                n_radial: 48,
                radial_cutoff: 8.0,
            },
            start_from_zero: false,
        }
    }

    #[test]
    fn zero_cap_scenario_matches_the_uncontrolled_gain() {
        // M = 0 collapses the box to the singleton zero consumption, so the
        // value must match a plain Monte Carlo run of the uncontrolled gain
        let mut spec = flat_spec(0.5, 3);
        spec.m_cap = 0.0;
        let cfg = ScenarioConfig {
            solver: tiny_solver_cfg(3, 13),
            mc: McConfig {
                n_paths: 4_000,
                n_steps: 32,
                seed: 17,
                bridge_correction: true,
            },
            grid_tol: 0.03,
            initial_states: vec![vec![1.0, 0.2, -0.1], vec![0.0, 0.0, 0.0]],
        };
        let (report, _) = run_growth_scenario(&spec, &cfg).unwrap();
        assert!(report.solve.converged);
        assert!(
            report.verification.all_pass,
            "verification entries: {:?}",
            report.verification.entries
        );
        // interior state: solved value vs direct simulation
        let (gain, se) = report.gains[0];
        assert!(
            (report.values[0] - gain).abs() <= 3.0 * se + cfg.grid_tol,
            "value {} vs gain {} (se {})",
            report.values[0],
            gain,
            se
        );
        assert!(report.values[0] > 0.0, "positive capital earns a gain");
        // boundary state is stopped at once: zero value, zero consumption
        assert_eq!(report.values[1], 0.0);
        assert_eq!(report.gains[1].0, 0.0);
        assert!(report.consumption[1].iter().all(|&c| c == 0.0));
    }

    #[test]
    fn feedback_consumption_field_is_nonnegative_and_reported() {
        let mut spec = flat_spec(0.8, 3);
        spec.m_cap = 0.4;
        let cfg = ScenarioConfig {
            solver: tiny_solver_cfg(3, 7),
            mc: McConfig {
                n_paths: 1_000,
                n_steps: 8,
                seed: 19,
                bridge_correction: true,
            },
            grid_tol: 0.05,
            initial_states: vec![vec![1.5, 0.0, 0.0]],
        };
        let (report, _) = run_growth_scenario(&spec, &cfg).unwrap();
        assert_eq!(report.consumption.len(), 1);
        assert_eq!(report.consumption[0].len(), report.xi.len());
        assert!(report.consumption[0].iter().all(|&c| c >= 0.0));
        assert!(report.solve.converged);
    }
}
