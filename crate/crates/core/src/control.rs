//! Exit-time optimal control on the half-space: Hamiltonians, feedback
//! synthesis from a solved backward equation, controlled-path simulation
//! with exit detection, cost estimation, and the statistical verification
//! harness built on the fundamental identity
//! J = v + E integral of (current-value Hamiltonian minus its infimum).
//!
//! Simulation splits each step into the exact linear transition (as in the
//! Monte Carlo oracle) plus an Euler increment for the control drift, so the
//! two agree path-for-path when the drift vanishes.

use crate::func::HalfSpaceFn;
use crate::hjb::{GridFunction, HjbError, Orientation, SemilinearProblem};
use crate::mc::{self, McConfig};
use crate::model::{HalfSpacePoint, Model};
use crate::stats;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use thiserror::Error;

/// Drift signature: (t, x1, transverse, control, output vector).
pub type DriftFn = dyn Fn(f64, f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// Running cost signature: (t, x1, transverse, control).
pub type RunningCostFn = dyn Fn(f64, f64, &[f64], &[f64]) -> f64 + Send + Sync;
/// Policy signature: (t, x1, transverse, control output).
pub type PolicyMapFn = dyn Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync;

#[derive(Debug, Clone, Error)]
pub enum ControlError {
    #[error("inadmissible control")]
    InadmissibleControl,
    #[error("initial state outside domain")]
    InitialStateOutsideDomain,
    #[error("drift exceeds its declared bound by {excess:.3e} on a sampled tuple")]
    DriftBoundViolated { excess: f64 },
    #[error("drift exceeds its declared Lipschitz constant by {excess:.3e} on a sampled pair")]
    DriftLipschitzViolated { excess: f64 },
    #[error("running cost exceeds its declared bound by {excess:.3e} on a sampled tuple")]
    CostBoundViolated { excess: f64 },
    #[error("bad control problem: {0}")]
    BadProblem(&'static str),
    #[error(transparent)]
    Hjb(#[from] HjbError),
}

/// Control set: a finite list of points or a coordinate box.
#[derive(Debug, Clone)]
pub enum ControlSet {
    Finite(Vec<Vec<f64>>),
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl ControlSet {
    pub fn dim_u(&self) -> usize {
        match self {
            ControlSet::Finite(points) => points.first().map_or(0, |p| p.len()),
            ControlSet::Box { lo, .. } => lo.len(),
        }
    }

    fn validate(&self) -> Result<(), ControlError> {
        match self {
            ControlSet::Finite(points) => {
                let Some(first) = points.first() else {
                    return Err(ControlError::BadProblem("control set must be nonempty"));
                };
                if first.is_empty() {
                    return Err(ControlError::BadProblem(
                        "control points must have at least one coordinate",
                    ));
                }
                if points.iter().any(|p| p.len() != first.len()) {
                    return Err(ControlError::BadProblem(
                        "control points must share one dimension",
                    ));
                }
                if points.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(ControlError::BadProblem("control points must be finite"));
                }
            }
            ControlSet::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(ControlError::BadProblem(
                        "control box bounds must be nonempty and congruent",
                    ));
                }
                for (l, h) in lo.iter().zip(hi) {
                    if !(l.is_finite() && h.is_finite() && l <= h) {
                        return Err(ControlError::BadProblem(
                            "control box requires finite lo <= hi",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        if u.len() != self.dim_u() {
            return false;
        }
        match self {
            ControlSet::Finite(points) => points.iter().any(|p| p.as_slice() == u),
            ControlSet::Box { lo, hi } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (l, h))| *v >= *l && *v <= *h),
        }
    }

    /// Fixed tie-break element: lowest index / lower corner.
    fn lowest(&self) -> Vec<f64> {
        match self {
            ControlSet::Finite(points) => points[0].clone(),
            ControlSet::Box { lo, .. } => lo.clone(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            ControlSet::Finite(points) => points[rng.gen_range(0..points.len())].clone(),
            ControlSet::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l + (h - l) * rng.gen::<f64>())
                .collect(),
        }
    }
}

/// The exit-time control problem: model dynamics plus bounded control drift,
/// bounded running cost, terminal cost on the open half-space, and declared
/// bounds spot-checked at construction.
#[derive(Clone)]
pub struct ControlProblem {
    model: Model,
    u_set: ControlSet,
    b: Arc<DriftFn>,
    ell: Arc<RunningCostFn>,
    phi: HalfSpaceFn,
    l_b: f64,
    b_bound: f64,
    ell_bound: f64,
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("ControlProblem")
            .field("model", &self.model)
            .field("u_set", &self.u_set)
            .field("l_b", &self.l_b)
            .field("b_bound", &self.b_bound)
            .field("ell_bound", &self.ell_bound)
            .finish()
    }
}

#[allow(clippy::too_many_arguments)]
impl ControlProblem {
    pub fn new(
        model: Model,
        u_set: ControlSet,
        b_bound: f64,
        ell_bound: f64,
        l_b: f64,
        phi: HalfSpaceFn,
        b: impl Fn(f64, f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        ell: impl Fn(f64, f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, ControlError> {
        u_set.validate()?;
        if !(b_bound >= 0.0) || !b_bound.is_finite() {
            return Err(ControlError::BadProblem("drift bound must be nonnegative"));
        }
        if !(ell_bound >= 0.0) || !ell_bound.is_finite() {
            return Err(ControlError::BadProblem("cost bound must be nonnegative"));
        }
        if !(l_b > 0.0) || !l_b.is_finite() {
            return Err(ControlError::BadProblem(
                "drift Lipschitz constant must be positive",
            ));
        }
        let problem = ControlProblem {
            model,
            u_set,
            b: Arc::new(b),
            ell: Arc::new(ell),
            phi,
            l_b,
            b_bound,
            ell_bound,
        };
        problem.spot_check()?;
        Ok(problem)
    }

    fn spot_check(&self) -> Result<(), ControlError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
        let d = self.model.dim();
        let t_max = self.model.horizon();
        let mut ba = vec![0.0; d];
        let mut bb = vec![0.0; d];
        for _ in 0..48 {
            let t = rng.gen::<f64>() * t_max;
            let u = self.u_set.sample(&mut rng);
            let xa1 = rng.gen::<f64>() * 3.0;
            let xap: Vec<f64> = (1..d).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
            let xb1 = rng.gen::<f64>() * 3.0;
            let xbp: Vec<f64> = (1..d).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
            (self.b)(t, xa1, &xap, &u, &mut ba);
            (self.b)(t, xb1, &xbp, &u, &mut bb);
            let bnorm = ba.iter().map(|v| v * v).sum::<f64>().sqrt();
            if bnorm > self.b_bound * (1.0 + 1e-12) + 1e-12 {
                return Err(ControlError::DriftBoundViolated {
                    excess: bnorm - self.b_bound,
                });
            }
            let mut dx = (xa1 - xb1) * (xa1 - xb1);
            for (a, b) in xap.iter().zip(&xbp) {
                dx += (a - b) * (a - b);
            }
            let dx = dx.sqrt();
            let db = ba
                .iter()
                .zip(&bb)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            let allowance = self.l_b * dx * (1.0 + 1e-6) + 1e-9;
            if db > allowance {
                return Err(ControlError::DriftLipschitzViolated {
                    excess: db - allowance,
                });
            }
            let cost = (self.ell)(t, xa1, &xap, &u);
            if cost.abs() > self.ell_bound * (1.0 + 1e-12) + 1e-12 {
                return Err(ControlError::CostBoundViolated {
                    excess: cost.abs() - self.ell_bound,
                });
            }
        }
        Ok(())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn control_set(&self) -> &ControlSet {
        &self.u_set
    }

    pub fn terminal_cost(&self) -> &HalfSpaceFn {
        &self.phi
    }

    pub fn drift_bound(&self) -> f64 {
        self.b_bound
    }

    pub fn cost_bound(&self) -> f64 {
        self.ell_bound
    }

    /// The semilinear terminal-value problem whose mild solution is the
    /// value function: nonlinearity F(t, x, z) = min over controls of the
    /// current-value Hamiltonian at momentum z.
    pub fn hjb_problem(&self) -> Result<SemilinearProblem, ControlError> {
        let cp = self.clone();
        let lipschitz = self.b_bound.max(1e-12);
        let growth = self.b_bound.max(self.ell_bound).max(1e-12);
        Ok(SemilinearProblem::new(
            self.model.clone(),
            lipschitz,
            growth,
            self.phi.clone(),
            Orientation::Terminal,
            move |t, x1, xp, _y, z| hamiltonian_min(&cp, t, x1, xp, z).0,
        )?)
    }
}

fn cv_value(
    problem: &ControlProblem,
    t: f64,
    x1: f64,
    xp: &[f64],
    p: &[f64],
    u: &[f64],
    bbuf: &mut [f64],
) -> f64 {
    (problem.b)(t, x1, xp, u, bbuf);
    let dot: f64 = p.iter().zip(bbuf.iter()).map(|(a, b)| a * b).sum();
    dot + (problem.ell)(t, x1, xp, u)
}

/// Current-value Hamiltonian: inner product of the momentum with the drift,
/// plus the running cost.
pub fn hamiltonian_cv(
    problem: &ControlProblem,
    t: f64,
    x1: f64,
    xp: &[f64],
    p: &[f64],
    u: &[f64],
) -> Result<f64, ControlError> {
    if !problem.u_set.contains(u) {
        return Err(ControlError::InadmissibleControl);
    }
    let mut bbuf = vec![0.0; problem.model.dim()];
    Ok(cv_value(problem, t, x1, xp, p, u, &mut bbuf))
}

const GOLDEN_INV: f64 = 0.618_033_988_749_894_8;

fn golden_min(lo: f64, hi: f64, f: &mut impl FnMut(f64) -> f64) -> (f64, f64) {
    let (mut lo, mut hi) = (lo, hi);
    let mut x1 = hi - GOLDEN_INV * (hi - lo);
    let mut x2 = lo + GOLDEN_INV * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > 1e-8 {
        if f1 > f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN_INV * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN_INV * (hi - lo);
            f1 = f(x1);
        }
    }
    let xm = 0.5 * (lo + hi);
    (xm, f(xm))
}

/// Minimized Hamiltonian and a minimizer. Finite sets are scanned with
/// lowest-index tie-breaking; boxes start from a coarse lattice and refine
/// by coordinate-descent golden section to 1e-8 in control space. The
/// returned value is the evaluation at the returned point.
pub fn hamiltonian_min(
    problem: &ControlProblem,
    t: f64,
    x1: f64,
    xp: &[f64],
    p: &[f64],
) -> (f64, Vec<f64>) {
    let mut bbuf = vec![0.0; problem.model.dim()];
    match &problem.u_set {
        ControlSet::Finite(points) => {
            let mut best = f64::INFINITY;
            let mut best_idx = 0;
            for (i, u) in points.iter().enumerate() {
                let v = cv_value(problem, t, x1, xp, p, u, &mut bbuf);
                if v < best {
                    best = v;
                    best_idx = i;
                }
            }
            (best, points[best_idx].clone())
        }
        ControlSet::Box { lo, hi } => {
            let m = lo.len();
            // the lattice only seeds the descent basin (refinement below does
            // the precision work), so thin it as the axis count grows
            let seed_nodes = match m {
                1 => 9,
                2 => 5,
                _ => 3,
            };
            let per_axis: Vec<usize> = lo
                .iter()
                .zip(hi)
                .map(|(l, h)| if h - l < 1e-13 { 1 } else { seed_nodes })
                .collect();
            let mut best = f64::INFINITY;
            let mut best_u = lo.clone();
            let mut idx = vec![0usize; m];
            let mut u = vec![0.0; m];
            loop {
                for i in 0..m {
                    u[i] = if per_axis[i] == 1 {
                        lo[i]
                    } else {
                        lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / (per_axis[i] - 1) as f64
                    };
                }
                let v = cv_value(problem, t, x1, xp, p, &u, &mut bbuf);
                if v < best {
                    best = v;
                    best_u.copy_from_slice(&u);
                }
                let mut carry = 0;
                while carry < m {
                    idx[carry] += 1;
                    if idx[carry] < per_axis[carry] {
                        break;
                    }
                    idx[carry] = 0;
                    carry += 1;
                }
                if carry == m {
                    break;
                }
            }
            for _ in 0..3 {
                let before = best;
                for i in 0..m {
                    if hi[i] - lo[i] < 1e-13 {
                        continue;
                    }
                    let mut trial = best_u.clone();
                    let (xi, vi) = golden_min(lo[i], hi[i], &mut |ui| {
                        trial[i] = ui;
                        cv_value(problem, t, x1, xp, p, &trial, &mut bbuf)
                    });
                    if vi < best {
                        best = vi;
                        best_u[i] = xi;
                    }
                }
                if before - best < 1e-12 {
                    break;
                }
            }
            // the stored value must be the evaluation at the stored point
            best = cv_value(problem, t, x1, xp, p, &best_u, &mut bbuf);
            (best, best_u)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Feedback,
    Constant,
    Custom,
}

/// A deterministic control policy; the map writes a point of the control
/// set for any queried (time, state).
#[derive(Clone)]
pub struct Policy {
    pub kind: PolicyKind,
    dim_u: usize,
    map: Arc<PolicyMapFn>,
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("Policy")
            .field("kind", &self.kind)
            .field("dim_u", &self.dim_u)
            .finish()
    }
}

impl Policy {
    pub fn constant(u: Vec<f64>) -> Policy {
        let dim_u = u.len();
        Policy {
            kind: PolicyKind::Constant,
            dim_u,
            map: Arc::new(move |_, _, _, out: &mut [f64]| out.copy_from_slice(&u)),
        }
    }

    pub fn custom(
        dim_u: usize,
        f: impl Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Policy {
        Policy {
            kind: PolicyKind::Custom,
            dim_u,
            map: Arc::new(f),
        }
    }

    pub fn dim_u(&self) -> usize {
        self.dim_u
    }

    pub fn eval(&self, t: f64, x1: f64, xp: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim_u);
        (self.map)(t, x1, xp, out);
    }
}

/// Closed-loop policy from a solved value function: the control minimizing
/// the current-value Hamiltonian at the interpolated gradient. The solution
/// must come from `hjb_problem` for this control problem, so its time axis
/// is reversed (v(t, x) = solution at T - t). Queries outside the grid use
/// the solution's flat extrapolation; boundary states return a fixed element
/// since the state is already stopped there.
pub fn synthesize_feedback(problem: &ControlProblem, solution: &GridFunction) -> Policy {
    let cp = problem.clone();
    let sol = Arc::new(solution.clone());
    let horizon = problem.model.horizon();
    let dim = problem.model.dim();
    let lowest = problem.u_set.lowest();
    let dim_u = problem.u_set.dim_u();
    Policy {
        kind: PolicyKind::Feedback,
        dim_u,
        map: Arc::new(move |t, x1, xp, out: &mut [f64]| {
            if x1 <= 0.0 {
                out.copy_from_slice(&lowest);
                return;
            }
            let mut p = vec![0.0; dim];
            sol.gradient_at_parts(horizon - t, x1, xp, &mut p);
            let (_, u) = hamiltonian_min(&cp, t, x1, xp, &p);
            out.copy_from_slice(&u);
        }),
    }
}

/// One controlled-path batch: exit times (None means the path survived to
/// the horizon), accumulated costs, and the surviving final states. Full
/// trajectories are not retained; batch sizes of 1e5 paths would make them
/// the dominant memory cost.
#[derive(Debug, Clone)]
pub struct SimulationBatch {
    pub config: McConfig,
    pub exit_times: Vec<Option<f64>>,
    pub costs: Vec<f64>,
    pub final_states: Vec<Option<Vec<f64>>>,
}

impl SimulationBatch {
    pub fn alive_fraction(&self) -> f64 {
        let alive = self.exit_times.iter().filter(|e| e.is_none()).count();
        alive as f64 / self.exit_times.len() as f64
    }
}

struct PathAccumulators {
    exit_times: Vec<Option<f64>>,
    costs: Vec<f64>,
    gaps: Vec<f64>,
    final_states: Vec<Option<Vec<f64>>>,
}

/// Shared path loop: exact linear half-step plus Euler control drift,
/// bridge-corrected exit on the wall coordinate, trapezoid running cost.
/// When a solution is supplied, the Hamiltonian gap
/// F_cv(s, X, Dv, u) - F(s, X, Dv) is integrated along each path with the
/// same trapezoid scheme.
fn run_paths(
    problem: &ControlProblem,
    t0: f64,
    x0: &HalfSpacePoint,
    policy: &Policy,
    cfg: &McConfig,
    gap_solution: Option<&GridFunction>,
) -> Result<PathAccumulators, ControlError> {
    let model = &problem.model;
    let horizon = model.horizon();
    if x0.x1() < 0.0 {
        return Err(ControlError::InitialStateOutsideDomain);
    }
    if x0.dim() != model.dim() {
        return Err(ControlError::BadProblem("state dimension mismatch"));
    }
    if policy.dim_u != problem.u_set.dim_u() {
        return Err(ControlError::BadProblem("policy control dimension mismatch"));
    }
    if !(t0 >= 0.0 && t0 < horizon) {
        return Err(ControlError::BadProblem(
            "start time must lie in [0, horizon)",
        ));
    }
    assert!(cfg.n_paths >= 2, "need at least two paths");
    assert!(cfg.n_steps >= 1, "need at least one step");

    let n_paths = cfg.n_paths;
    let mut acc = PathAccumulators {
        exit_times: vec![None; n_paths],
        costs: vec![0.0; n_paths],
        gaps: vec![0.0; n_paths],
        final_states: vec![None; n_paths],
    };
    if x0.on_boundary() {
        acc.exit_times = vec![Some(t0); n_paths];
        return Ok(acc);
    }

    let d = model.dim();
    let dt = (horizon - t0) / cfg.n_steps as f64;
    let (scales, sds) = mc::transition(model, dt);
    let lam1 = model.lam1();
    let mut coords = vec![0.0; d];
    let mut u = vec![0.0; policy.dim_u];
    let mut bbuf = vec![0.0; d];
    let mut pbuf = vec![0.0; d];
    let gap_at = |s: f64, coords: &[f64], u: &[f64], bbuf: &mut [f64], pbuf: &mut [f64]| {
        let Some(sol) = gap_solution else {
            return 0.0;
        };
        sol.gradient_at_parts(horizon - s, coords[0], &coords[1..], pbuf);
        let (fmin, _) = hamiltonian_min(problem, s, coords[0], &coords[1..], pbuf);
        let fcv = cv_value(problem, s, coords[0], &coords[1..], pbuf, u, bbuf);
        let gap = fcv - fmin;
        debug_assert!(gap > -1e-6, "Hamiltonian gap {gap} below the search slack");
        gap.max(0.0)
    };

    for p in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(p as u64);
        coords[0] = x0.x1();
        coords[1..].copy_from_slice(x0.transverse());
        policy.eval(t0, coords[0], &coords[1..], &mut u);
        let mut ell_left = (problem.ell)(t0, coords[0], &coords[1..], &u);
        let mut gap_left = gap_at(t0, &coords, &u, &mut bbuf, &mut pbuf);
        let mut cost = 0.0;
        let mut gap_sum = 0.0;
        let mut alive = true;
        for j in 0..cfg.n_steps {
            let s = t0 + j as f64 * dt;
            (problem.b)(s, coords[0], &coords[1..], &u, &mut bbuf);
            let x1_old = coords[0];
            mc::step_coords(&mut coords, &scales, &sds, &mut rng);
            for (c, bk) in coords.iter_mut().zip(&bbuf) {
                *c += bk * dt;
            }
            if coords[0] <= 0.0 {
                // linear crossing time inside the step
                let tau = s + dt * x1_old / (x1_old - coords[0]);
                acc.exit_times[p] = Some(tau);
                cost += ell_left * (tau - s);
                gap_sum += gap_left * (tau - s);
                alive = false;
                break;
            }
            if cfg.bridge_correction {
                let draw: f64 = rng.gen();
                if draw < mc::bridge_kill_prob(x1_old, coords[0], lam1, dt) {
                    let tau = s + 0.5 * dt;
                    acc.exit_times[p] = Some(tau);
                    cost += ell_left * 0.5 * dt;
                    gap_sum += gap_left * 0.5 * dt;
                    alive = false;
                    break;
                }
            }
            let s_next = t0 + (j + 1) as f64 * dt;
            policy.eval(s_next, coords[0], &coords[1..], &mut u);
            let ell_right = (problem.ell)(s_next, coords[0], &coords[1..], &u);
            let gap_right = gap_at(s_next, &coords, &u, &mut bbuf, &mut pbuf);
            cost += 0.5 * dt * (ell_left + ell_right);
            gap_sum += 0.5 * dt * (gap_left + gap_right);
            ell_left = ell_right;
            gap_left = gap_right;
        }
        if alive {
            cost += problem.phi.eval(coords[0], &coords[1..]);
            acc.final_states[p] = Some(coords.clone());
        }
        acc.costs[p] = cost;
        acc.gaps[p] = gap_sum;
    }
    Ok(acc)
}

/// Simulates the closed-loop dynamics under a policy; deterministic in
/// (problem, policy, cfg).
pub fn simulate_controlled(
    problem: &ControlProblem,
    t0: f64,
    x0: &HalfSpacePoint,
    policy: &Policy,
    cfg: &McConfig,
) -> Result<SimulationBatch, ControlError> {
    let acc = run_paths(problem, t0, x0, policy, cfg, None)?;
    Ok(SimulationBatch {
        config: *cfg,
        exit_times: acc.exit_times,
        costs: acc.costs,
        final_states: acc.final_states,
    })
}

/// Monte Carlo cost of a policy from one start point: mean and standard
/// error of running cost up to exit plus terminal cost on survival.
pub fn estimate_cost(
    problem: &ControlProblem,
    t0: f64,
    x0: &HalfSpacePoint,
    policy: &Policy,
    cfg: &McConfig,
) -> Result<(f64, f64), ControlError> {
    let batch = simulate_controlled(problem, t0, x0, policy, cfg)?;
    Ok(stats::mean_and_stderr(&batch.costs))
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    pub mc: McConfig,
    /// Allowance for grid interpolation and time-rule bias, added to the
    /// statistical tolerance of every check.
    pub grid_tol: f64,
}

/// One (test point, policy) row of the verification report.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub point: usize,
    pub policy: usize,
    /// Value function at the test point (solution interpolation).
    pub v: f64,
    /// Monte Carlo cost of the policy and its standard error.
    pub j: f64,
    pub std_error: f64,
    /// v <= J + 3 sigma + grid_tol (value lower-bounds every policy).
    pub lower_bound_ok: bool,
    /// |J - v| <= 3 sigma + grid_tol, checked for feedback policies only.
    pub optimality_ok: Option<bool>,
    /// |mean(cost - gap integral) - v| and its pass flag: the fundamental
    /// identity J = v + E[gap] tested with a per-path combined estimator.
    pub identity_residual: f64,
    pub identity_stderr: f64,
    pub identity_ok: bool,
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub entries: Vec<CheckEntry>,
    pub all_pass: bool,
}

/// Statistical verification of a solved value function against simulated
/// policies: the lower-bound inequality for every policy, near-optimality of
/// the synthesized feedback, and the fundamental identity with the
/// Hamiltonian gap integrated along the same paths.
pub fn verify(
    problem: &ControlProblem,
    solution: &GridFunction,
    policies: &[Policy],
    test_points: &[(f64, HalfSpacePoint)],
    cfg: &VerifyConfig,
) -> Result<VerificationReport, ControlError> {
    let horizon = problem.model.horizon();
    let mut entries = Vec::with_capacity(test_points.len() * policies.len());
    let mut all_pass = true;
    for (pi, (t0, x0)) in test_points.iter().enumerate() {
        let v = solution.value_at(horizon - t0, x0);
        for (qi, policy) in policies.iter().enumerate() {
            // a feedback policy's control attains the Hamiltonian minimum
            // it was synthesized from, so its gap integrand is identically
            // zero and need not be re-evaluated along paths
            let gap_solution = if policy.kind == PolicyKind::Feedback {
                None
            } else {
                Some(solution)
            };
            let acc = run_paths(problem, *t0, x0, policy, &cfg.mc, gap_solution)?;
            let (j, se) = stats::mean_and_stderr(&acc.costs);
            let lower_bound_ok = v <= j + 3.0 * se + cfg.grid_tol;
            let optimality_ok = (policy.kind == PolicyKind::Feedback)
                .then(|| (j - v).abs() <= 3.0 * se + cfg.grid_tol);
            let combined: Vec<f64> = acc
                .costs
                .iter()
                .zip(&acc.gaps)
                .map(|(c, g)| c - g)
                .collect();
            let (md, sd) = stats::mean_and_stderr(&combined);
            let identity_residual = (md - v).abs();
            let identity_ok = identity_residual <= 3.0 * sd + cfg.grid_tol;
            all_pass &= lower_bound_ok && optimality_ok.unwrap_or(true) && identity_ok;
            entries.push(CheckEntry {
                point: pi,
                policy: qi,
                v,
                j,
                std_error: se,
                lower_bound_ok,
                optimality_ok,
                identity_residual,
                identity_stderr: sd,
                identity_ok,
            });
        }
    }
    Ok(VerificationReport { entries, all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::{solve_mild, SolverConfig};
    use crate::grid::GridSpec;
    use crate::model::ModelSpec;
    use crate::quad;
    use crate::semigroup::{KilledSemigroup, QuadratureSpec, RadialKernel};
    use approx::assert_abs_diff_eq;

    fn model1() -> Model {
        Model::validate(ModelSpec {
            dim: 1,
            a: vec![0.0],
            lam: vec![1.0],
            delta: None,
            horizon: 1.0,
        })
        .unwrap()
    }

    fn lq_problem(m_cap: f64) -> ControlProblem {
        ControlProblem::new(
            model1(),
            ControlSet::Box {
                lo: vec![0.0],
                hi: vec![m_cap],
            },
            m_cap,
            0.5 * m_cap * m_cap,
            1e-9,
            HalfSpaceFn::new(1.0, |x1, _| x1.tanh()),
            |_, _, _, u, out| out[0] = -u[0],
            |_, _, _, u| 0.5 * u[0] * u[0],
        )
        .unwrap()
    }

    fn pinned_problem(u0: f64, ell_c: f64) -> ControlProblem {
        // singleton control set: b = -u0 constant, running cost constant
        ControlProblem::new(
            model1(),
            ControlSet::Finite(vec![vec![u0]]),
            u0.abs().max(1e-9),
            ell_c.abs().max(1e-9),
            1e-9,
            HalfSpaceFn::new(1.0, |x1, _| x1.tanh()),
            |_, _, _, u, out| out[0] = -u[0],
            move |_, _, _, _| ell_c,
        )
        .unwrap()
    }

    fn lq_solver_cfg() -> SolverConfig {
        SolverConfig {
            beta: None,
            tol: 1e-6,
            max_iters: 40,
            mesh_grading: None,
            time_intervals: 6,
            grid: GridSpec {
                x1_max: 10.0,
                x1_nodes: 41,
                transverse_half_width: vec![],
                transverse_nodes: vec![],
            },
            quad: QuadratureSpec::default(),
            start_from_zero: false,
        }
    }

    #[test]
    fn current_value_hamiltonian_arithmetic() {
        let problem = lq_problem(1.0);
        // b = -u, ell = u^2/2, p = 1, u = 0.5: -0.5 + 0.125
        let v = hamiltonian_cv(&problem, 0.3, 1.0, &[], &[1.0], &[0.5]).unwrap();
        assert_abs_diff_eq!(v, -0.375, epsilon = 1e-15);
        // p = 0 leaves only the running cost
        let v = hamiltonian_cv(&problem, 0.3, 1.0, &[], &[0.0], &[0.5]).unwrap();
        assert_abs_diff_eq!(v, 0.125, epsilon = 1e-15);
        assert!(matches!(
            hamiltonian_cv(&problem, 0.3, 1.0, &[], &[1.0], &[1.5]),
            Err(ControlError::InadmissibleControl)
        ));
    }

    #[test]
    fn hamiltonian_min_matches_the_clamped_closed_form() {
        let m_cap = 1.0;
        let problem = lq_problem(m_cap);
        for p in [-0.5, 0.3, 0.7, 1.5] {
            let (value, u) = hamiltonian_min(&problem, 0.2, 1.0, &[], &[p]);
            let ustar = p.clamp(0.0, m_cap);
            assert_abs_diff_eq!(u[0], ustar, epsilon = 1e-7);
            assert_abs_diff_eq!(value, -p * ustar + 0.5 * ustar * ustar, epsilon = 1e-9);
        }
    }

    #[test]
    fn finite_scan_breaks_ties_at_the_lowest_index() {
        let problem = ControlProblem::new(
            model1(),
            ControlSet::Finite(vec![vec![1.0], vec![-1.0], vec![0.0]]),
            1.0,
            1.0,
            1e-9,
            HalfSpaceFn::constant(0.0),
            |_, _, _, u, out| out[0] = u[0],
            // cost is even in u, so u = 1 and u = -1 tie
            |_, _, _, u| u[0] * u[0],
        )
        .unwrap();
        let (value, u) = hamiltonian_min(&problem, 0.0, 1.0, &[], &[0.0]);
        assert_eq!(u, vec![0.0]);
        assert_eq!(value, 0.0);
        // at zero momentum the quadratic cost ties u = 1 against u = -1
        let two = ControlProblem::new(
            model1(),
            ControlSet::Finite(vec![vec![1.0], vec![-1.0]]),
            1.0,
            1.0,
            1e-9,
            HalfSpaceFn::constant(0.0),
            |_, _, _, u, out| out[0] = u[0],
            |_, _, _, u| u[0] * u[0],
        )
        .unwrap();
        let (_, u) = hamiltonian_min(&two, 0.0, 1.0, &[], &[0.0]);
        assert_eq!(u, vec![1.0], "tie must resolve to the first element");
    }

    #[test]
    fn minimized_hamiltonian_is_lipschitz_and_bounded_in_momentum() {
        let problem = lq_problem(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p1 = rng.gen::<f64>() * 6.0 - 3.0;
            let p2 = rng.gen::<f64>() * 6.0 - 3.0;
            let (f1, _) = hamiltonian_min(&problem, 0.1, 1.0, &[], &[p1]);
            let (f2, _) = hamiltonian_min(&problem, 0.1, 1.0, &[], &[p2]);
            assert!(
                (f1 - f2).abs() <= problem.drift_bound() * (p1 - p2).abs() + 1e-7,
                "|F(p1) - F(p2)| too large at {p1}, {p2}"
            );
            assert!(f1.abs() <= problem.drift_bound() * p1.abs() + problem.cost_bound() + 1e-8);
        }
    }

    #[test]
    fn hamiltonian_gap_is_nonnegative() {
        let problem = lq_problem(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bbuf = [0.0];
        for _ in 0..300 {
            let p = rng.gen::<f64>() * 6.0 - 3.0;
            let u = rng.gen::<f64>();
            let (fmin, _) = hamiltonian_min(&problem, 0.1, 1.0, &[], &[p]);
            let fcv = cv_value(&problem, 0.1, 1.0, &[], &[p], &[u], &mut bbuf);
            assert!(fcv - fmin >= -1e-8, "gap {} at p {p} u {u}", fcv - fmin);
        }
    }

    #[test]
    fn boundary_start_exits_immediately_with_zero_cost() {
        let problem = lq_problem(1.0);
        let batch = simulate_controlled(
            &problem,
            0.0,
            &HalfSpacePoint::new(0.0, vec![]).unwrap(),
            &Policy::constant(vec![0.0]),
            &McConfig {
                n_paths: 16,
                n_steps: 8,
                seed: 1,
                bridge_correction: true,
            },
        )
        .unwrap();
        assert!(batch.exit_times.iter().all(|e| *e == Some(0.0)));
        assert!(batch.costs.iter().all(|&c| c == 0.0));
        assert!(batch.final_states.iter().all(|s| s.is_none()));
    }

    #[test]
    fn uncontrolled_survival_matches_the_kernel() {
        // u = 0 removes the drift, phi = 1, ell = 0: the cost estimate is
        // the survival probability of the killed linear process
        let problem = ControlProblem::new(
            model1(),
            ControlSet::Finite(vec![vec![0.0]]),
            1e-9,
            1e-9,
            1e-9,
            HalfSpaceFn::constant(1.0),
            |_, _, _, u, out| out[0] = -u[0],
            |_, _, _, _| 0.0,
        )
        .unwrap();
        let x0 = HalfSpacePoint::new(0.9, vec![]).unwrap();
        let (j, se) = estimate_cost(
            &problem,
            0.0,
            &x0,
            &Policy::constant(vec![0.0]),
            &McConfig {
                n_paths: 60_000,
                n_steps: 16,
                seed: 12,
                bridge_correction: true,
            },
        )
        .unwrap();
        let exact = RadialKernel::new(problem.model(), 1.0)
            .unwrap()
            .survival(0.9)
            .unwrap();
        assert!((j - exact).abs() < 3.0 * se, "j {j} exact {exact} se {se}");
    }

    #[test]
    fn occupation_time_matches_the_survival_integral() {
        // ell = 1, phi = 0: J = E[T and tau] - t0 = integral of survival
        let problem = ControlProblem::new(
            model1(),
            ControlSet::Finite(vec![vec![0.0]]),
            1e-9,
            1.0,
            1e-9,
            HalfSpaceFn::constant(0.0),
            |_, _, _, u, out| out[0] = -u[0],
            |_, _, _, _| 1.0,
        )
        .unwrap();
        let x0 = HalfSpacePoint::new(0.8, vec![]).unwrap();
        let (j, se) = estimate_cost(
            &problem,
            0.0,
            &x0,
            &Policy::constant(vec![0.0]),
            &McConfig {
                n_paths: 40_000,
                n_steps: 128,
                seed: 23,
                bridge_correction: true,
            },
        )
        .unwrap();
        let gl = quad::gauss_legendre_cached(40);
        let mut want = 0.0;
        for pnl in 0..8 {
            let a = pnl as f64 / 8.0;
            let b = (pnl + 1) as f64 / 8.0;
            want += gl.scaled_to(a, b).integrate(|s| {
                RadialKernel::new(problem.model(), s)
                    .unwrap()
                    .survival(0.8)
                    .unwrap()
            });
        }
        assert!(
            (j - want).abs() < 3.0 * se + 0.01,
            "j {j} want {want} se {se}"
        );
    }

    #[test]
    fn constant_drift_reproduces_the_mean_shift() {
        // far from the wall the kill is negligible; ell = x1 makes the cost
        // the integrated mean path, linear in time and hence exactly
        // captured by the trapezoid rule
        let problem = ControlProblem::new(
            model1(),
            ControlSet::Finite(vec![vec![0.5]]),
            0.5,
            20.0,
            1e-9,
            HalfSpaceFn::constant(0.0),
            |_, _, _, u, out| out[0] = -u[0],
            |_, x1, _, _| x1.clamp(-20.0, 20.0),
        )
        .unwrap();
        let x0 = HalfSpacePoint::new(8.0, vec![]).unwrap();
        let (j, se) = estimate_cost(
            &problem,
            0.0,
            &x0,
            &Policy::constant(vec![0.5]),
            &McConfig {
                n_paths: 30_000,
                n_steps: 64,
                seed: 31,
                bridge_correction: true,
            },
        )
        .unwrap();
        // integral of (8 - 0.5 s) over [0, 1]
        let want = 8.0 - 0.25;
        assert!((j - want).abs() < 3.0 * se, "j {j} want {want} se {se}");
    }

    #[test]
    fn batches_are_bit_reproducible() {
        let problem = lq_problem(1.0);
        let x0 = HalfSpacePoint::new(1.0, vec![]).unwrap();
        let cfg = McConfig {
            n_paths: 500,
            n_steps: 32,
            seed: 77,
            bridge_correction: true,
        };
        let pol = Policy::constant(vec![0.7]);
        let a = simulate_controlled(&problem, 0.0, &x0, &pol, &cfg).unwrap();
        let b = simulate_controlled(&problem, 0.0, &x0, &pol, &cfg).unwrap();
        assert_eq!(a.exit_times, b.exit_times);
        for (ca, cb) in a.costs.iter().zip(&b.costs) {
            assert_eq!(ca.to_bits(), cb.to_bits());
        }
    }

    #[test]
    fn exit_times_are_monotone_in_the_start_height() {
        // common random numbers, x-independent drift, hard kill only: the
        // coupled paths keep their ordering, so exit times are ordered
        let problem = lq_problem(1.0);
        let cfg = McConfig {
            n_paths: 2_000,
            n_steps: 32,
            seed: 41,
            bridge_correction: false,
        };
        let pol = Policy::constant(vec![0.3]);
        let low = simulate_controlled(
            &problem,
            0.0,
            &HalfSpacePoint::new(0.5, vec![]).unwrap(),
            &pol,
            &cfg,
        )
        .unwrap();
        let high = simulate_controlled(
            &problem,
            0.0,
            &HalfSpacePoint::new(1.0, vec![]).unwrap(),
            &pol,
            &cfg,
        )
        .unwrap();
        for (lo, hi) in low.exit_times.iter().zip(&high.exit_times) {
            let lo_t = lo.unwrap_or(1.0);
            let hi_t = hi.unwrap_or(1.0);
            assert!(lo_t <= hi_t + 1e-12, "exit order violated: {lo_t} > {hi_t}");
        }
    }

    #[test]
    fn step_refinement_keeps_the_estimate_within_noise() {
        let problem = lq_problem(1.0);
        let x0 = HalfSpacePoint::new(1.2, vec![]).unwrap();
        let pol = Policy::constant(vec![0.5]);
        let coarse = estimate_cost(
            &problem,
            0.0,
            &x0,
            &pol,
            &McConfig {
                n_paths: 30_000,
                n_steps: 64,
                seed: 51,
                bridge_correction: true,
            },
        )
        .unwrap();
        let fine = estimate_cost(
            &problem,
            0.0,
            &x0,
            &pol,
            &McConfig {
                n_paths: 30_000,
                n_steps: 128,
                seed: 51,
                bridge_correction: true,
            },
        )
        .unwrap();
        assert!(
            (coarse.0 - fine.0).abs() < 2.0 * (coarse.1 + fine.1),
            "step bias visible: {} vs {}",
            coarse.0,
            fine.0
        );
    }

    #[test]
    fn constant_nonlinearity_round_trip_fixes_the_orientation() {
        // singleton control with b = 0 and ell = c: the value function is
        // v(t, x) = P_(T-t) phi + c * integral of survival, which pins down
        // the terminal orientation and the sign of the Hamiltonian term
        let c_val = 0.25;
        let problem = pinned_problem(0.0, c_val);
        let semilinear = problem.hjb_problem().unwrap();
        let (sol, report) = solve_mild(&semilinear, &lq_solver_cfg()).unwrap();
        assert!(report.converged);
        let sg = KilledSemigroup::new(problem.model(), QuadratureSpec::default()).unwrap();
        let gl = quad::gauss_legendre_cached(40);
        for &(t, x1) in &[(0.0, 1.0), (0.5, 2.0)] {
            let x = HalfSpacePoint::new(x1, vec![]).unwrap();
            let gap = 1.0 - t;
            let base = sg.apply(gap, problem.terminal_cost(), &x).unwrap();
            let mut conv = 0.0;
            for pnl in 0..6 {
                let a = gap * pnl as f64 / 6.0;
                let b = gap * (pnl + 1) as f64 / 6.0;
                conv += gl.scaled_to(a, b).integrate(|s| {
                    RadialKernel::new(problem.model(), s)
                        .unwrap()
                        .survival(x1)
                        .unwrap()
                });
            }
            let want = base + c_val * conv;
            // v(t, x) reads the reversed-time solution at T - t
            let got = sol.value_at(1.0 - t, &x);
            assert_abs_diff_eq!(got, want, epsilon = 5e-4);
        }
    }

    #[test]
    fn feedback_controls_attain_the_minimized_hamiltonian() {
        let problem = lq_problem(1.0);
        let semilinear = problem.hjb_problem().unwrap();
        let (sol, _) = solve_mild(&semilinear, &lq_solver_cfg()).unwrap();
        let policy = synthesize_feedback(&problem, &sol);
        assert_eq!(policy.kind, PolicyKind::Feedback);
        let mut u = [0.0];
        let mut p = [0.0];
        for &(t, x1) in &[(0.2, 0.75), (0.6, 1.5), (0.9, 3.25)] {
            policy.eval(t, x1, &[], &mut u);
            assert!(problem.control_set().contains(&u), "policy left the set");
            sol.gradient_at_parts(1.0 - t, x1, &[], &mut p);
            let (fmin, _) = hamiltonian_min(&problem, t, x1, &[], &p);
            let fcv = hamiltonian_cv(&problem, t, x1, &[], &p, &u).unwrap();
            assert!(
                (fcv - fmin).abs() <= 1e-10,
                "feedback control misses the minimum: {fcv} vs {fmin}"
            );
        }
        // boundary queries return the fixed lower corner
        policy.eval(0.5, 0.0, &[], &mut u);
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn verification_passes_on_the_lq_instance() {
        let problem = lq_problem(1.0);
        let semilinear = problem.hjb_problem().unwrap();
        let mut cfg = lq_solver_cfg();
        cfg.tol = 1e-7;
        cfg.time_intervals = 8;
        let (sol, report) = solve_mild(&semilinear, &cfg).unwrap();
        assert!(report.converged);
        let policies = vec![
            synthesize_feedback(&problem, &sol),
            Policy::constant(vec![0.0]),
            Policy::constant(vec![1.0]),
        ];
        let test_points = vec![
            (0.0, HalfSpacePoint::new(1.0, vec![]).unwrap()),
            (0.3, HalfSpacePoint::new(2.0, vec![]).unwrap()),
            (0.0, HalfSpacePoint::new(0.0, vec![]).unwrap()),
        ];
        let vcfg = VerifyConfig {
            mc: McConfig {
                n_paths: 8_000,
                n_steps: 64,
                seed: 99,
                bridge_correction: true,
            },
            grid_tol: 0.03,
        };
        let report = verify(&problem, &sol, &policies, &test_points, &vcfg).unwrap();
        assert_eq!(report.entries.len(), 9);
        for e in &report.entries {
            assert!(
                e.lower_bound_ok,
                "lower bound failed at point {} policy {}: v {} j {} se {}",
                e.point, e.policy, e.v, e.j, e.std_error
            );
            assert!(
                e.identity_ok,
                "identity failed at point {} policy {}: residual {} se {}",
                e.point, e.policy, e.identity_residual, e.identity_stderr
            );
            if let Some(ok) = e.optimality_ok {
                assert!(ok, "feedback optimality failed at point {}", e.point);
            }
        }
        assert!(report.all_pass);
        // the boundary point is trivial: v and J both vanish
        let boundary_rows: Vec<_> = report.entries.iter().filter(|e| e.point == 2).collect();
        for e in boundary_rows {
            assert_eq!(e.v, 0.0);
            assert_eq!(e.j, 0.0);
        }
    }

    #[test]
    fn problem_construction_rejects_false_declarations() {
        let bad_bound = ControlProblem::new(
            model1(),
            ControlSet::Box {
                lo: vec![0.0],
                hi: vec![1.0],
            },
            0.1,
            1.0,
            1e-9,
            HalfSpaceFn::constant(0.0),
            |_, _, _, u, out| out[0] = -u[0],
            |_, _, _, _| 0.0,
        );
        assert!(matches!(bad_bound, Err(ControlError::DriftBoundViolated { .. })));
        let bad_lip = ControlProblem::new(
            model1(),
            ControlSet::Finite(vec![vec![1.0]]),
            10.0,
            1.0,
            1e-9,
            HalfSpaceFn::constant(0.0),
            |_, x1, _, _, out| out[0] = x1.clamp(-3.0, 3.0),
            |_, _, _, _| 0.0,
        );
        assert!(matches!(
            bad_lip,
            Err(ControlError::DriftLipschitzViolated { .. })
        ));
        let bad_cost = ControlProblem::new(
            model1(),
            ControlSet::Finite(vec![vec![1.0]]),
            1.0,
            0.25,
            1e-9,
            HalfSpaceFn::constant(0.0),
            |_, _, _, u, out| out[0] = -u[0],
            |_, _, _, u| u[0],
        );
        assert!(matches!(bad_cost, Err(ControlError::CostBoundViolated { .. })));
        let empty = ControlProblem::new(
            model1(),
            ControlSet::Finite(vec![]),
            1.0,
            1.0,
            1e-9,
            HalfSpaceFn::constant(0.0),
            |_, _, _, _, out| out[0] = 0.0,
            |_, _, _, _| 0.0,
        );
        assert!(matches!(empty, Err(ControlError::BadProblem(_))));
    }
}
