//! Config file schema and the named registries that turn strings from the
//! config into closures. Every section mirrors one module's own config type;
//! unknown keys are rejected so typos surface as usage errors.

use halfspace_hjb::control::{
    synthesize_feedback, ControlProblem, ControlSet, Policy,
};
use halfspace_hjb::func::HalfSpaceFn;
use halfspace_hjb::grid::GridSpec;
use halfspace_hjb::growth::{GainFn, GrowthSpec};
use halfspace_hjb::hjb::{GridFunction, Orientation, SemilinearProblem, SolverConfig};
use halfspace_hjb::mc::McConfig;
use halfspace_hjb::model::{Model, ModelSpec};
use halfspace_hjb::semigroup::QuadratureSpec;
use serde::Deserialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A component failed while running with a valid config; the command
    /// reports it as a failed check rather than a usage error.
    #[error("run failed: {0}")]
    Run(String),
}

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Resolution tier: smoke halves grids and cuts path counts for fast
/// shakeout runs, full doubles grids and quadruples paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Smoke,
    Desk,
    Full,
}

impl Tier {
    pub fn parse(s: &str) -> Result<Tier, CliError> {
        match s {
            "smoke" => Ok(Tier::Smoke),
            "desk" => Ok(Tier::Desk),
            "full" => Ok(Tier::Full),
            other => Err(config_err(format!(
                "unknown tier {other:?} (expected smoke, desk, or full)"
            ))),
        }
    }

    pub fn nodes(self, n: usize) -> usize {
        match self {
            Tier::Smoke => (n.saturating_sub(1) / 2 + 1).max(5),
            Tier::Desk => n,
            Tier::Full => 2 * n.saturating_sub(1) + 1,
        }
    }

    pub fn intervals(self, m: usize) -> usize {
        match self {
            Tier::Smoke => (m / 2).max(3),
            Tier::Desk => m,
            Tier::Full => m * 2,
        }
    }

    pub fn paths(self, n: usize) -> usize {
        match self {
            Tier::Smoke => (n / 16).max(2_000),
            Tier::Desk => n,
            Tier::Full => n * 4,
        }
    }

    pub fn steps(self, n: usize) -> usize {
        match self {
            Tier::Smoke => (n / 2).max(8),
            Tier::Desk => n,
            Tier::Full => n * 2,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tier: Option<String>,
    pub model: Option<ModelSection>,
    pub grid: Option<GridSection>,
    pub quad: Option<QuadSection>,
    pub solver: Option<SolverSection>,
    pub problem: Option<ProblemSection>,
    pub mc: Option<McSection>,
    pub control: Option<ControlSection>,
    pub kernel_check: Option<KernelCheckSection>,
    pub mollify_check: Option<MollifySection>,
    pub growth: Option<GrowthSection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }
}

fn section<'c, T>(s: &'c Option<T>, name: &str) -> Result<&'c T, CliError> {
    s.as_ref()
        .ok_or_else(|| config_err(format!("missing [{name}] section")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub a: Vec<f64>,
    pub lam: Vec<f64>,
    pub horizon: f64,
    pub delta: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub x1_max: f64,
    pub x1_nodes: usize,
    #[serde(default)]
    pub transverse_half_width: Vec<f64>,
    #[serde(default)]
    pub transverse_nodes: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadSection {
    pub n_hermite: Option<usize>,
    pub n_radial: Option<usize>,
    pub radial_cutoff: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub time_intervals: Option<usize>,
    pub beta: Option<f64>,
    pub mesh_grading: Option<f64>,
    pub start_from_zero: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub phi: String,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: String,
    #[serde(default = "default_orientation")]
    pub orientation: String,
}

fn default_nonlinearity() -> String {
    "zero".to_string()
}

fn default_orientation() -> String {
    "terminal".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub n_paths: usize,
    pub n_steps: usize,
    #[serde(default = "default_true")]
    pub bridge_correction: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub u_points: Option<Vec<Vec<f64>>>,
    pub u_lo: Option<Vec<f64>>,
    pub u_hi: Option<Vec<f64>>,
    #[serde(default = "default_drift")]
    pub drift: String,
    #[serde(default = "default_running_cost")]
    pub running_cost: String,
    pub phi: String,
    #[serde(default = "default_grid_tol")]
    pub grid_tol: f64,
    pub policies: Vec<String>,
    /// Each entry is [t0, x1, transverse...].
    pub test_points: Vec<Vec<f64>>,
}

fn default_drift() -> String {
    "minus_u".to_string()
}

fn default_running_cost() -> String {
    "quadratic_half".to_string()
}

fn default_grid_tol() -> f64 {
    0.02
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelCheckSection {
    pub survival_tol: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifySection {
    #[serde(default = "default_indices")]
    pub indices: Vec<usize>,
    pub phi: String,
    pub dim: usize,
    #[serde(default = "default_kconv_tol")]
    pub kconv_tol: f64,
}

fn default_indices() -> Vec<usize> {
    vec![4, 8, 16, 32]
}

fn default_kconv_tol() -> f64 {
    0.1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSection {
    pub a_profile: String,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    pub n_modes: usize,
    pub m_cap: f64,
    pub q_scale: Vec<f64>,
    pub horizon: f64,
    pub u0: String,
    #[serde(default = "default_growth_tol")]
    pub grid_tol: f64,
    /// Rotated coordinates of the initial capital profiles.
    pub initial_states: Vec<Vec<f64>>,
}

fn default_n_samples() -> usize {
    32
}

fn default_growth_tol() -> f64 {
    0.05
}

pub fn build_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let m = section(&cfg.model, "model")?;
    Model::validate(ModelSpec {
        dim: m.dim,
        a: m.a.clone(),
        lam: m.lam.clone(),
        delta: m.delta,
        horizon: m.horizon,
    })
    .map_err(|e| config_err(format!("model: {e}")))
}

pub fn build_grid_spec(cfg: &RunConfig, tier: Tier) -> Result<GridSpec, CliError> {
    let g = section(&cfg.grid, "grid")?;
    Ok(GridSpec {
        x1_max: g.x1_max,
        x1_nodes: tier.nodes(g.x1_nodes),
        transverse_half_width: g.transverse_half_width.clone(),
        transverse_nodes: g.transverse_nodes.iter().map(|&n| tier.nodes(n)).collect(),
    })
}

pub fn build_quad(cfg: &RunConfig) -> QuadratureSpec {
    let mut quad = QuadratureSpec::default();
    if let Some(q) = &cfg.quad {
        if let Some(v) = q.n_hermite {
            quad.n_hermite = v;
        }
        if let Some(v) = q.n_radial {
            quad.n_radial = v;
        }
        if let Some(v) = q.radial_cutoff {
            quad.radial_cutoff = v;
        }
    }
    quad
}

pub fn build_solver_config(cfg: &RunConfig, tier: Tier) -> Result<SolverConfig, CliError> {
    let s = section(&cfg.solver, "solver")?;
    Ok(SolverConfig {
        beta: s.beta,
        tol: s.tol.unwrap_or(1e-6),
        max_iters: s.max_iters.unwrap_or(40),
        mesh_grading: s.mesh_grading,
        time_intervals: tier.intervals(s.time_intervals.unwrap_or(8)),
        grid: build_grid_spec(cfg, tier)?,
        quad: build_quad(cfg),
        start_from_zero: s.start_from_zero.unwrap_or(false),
    })
}

pub fn build_mc_config(cfg: &RunConfig, tier: Tier, seed: u64) -> Result<McConfig, CliError> {
    let m = section(&cfg.mc, "mc")?;
    Ok(McConfig {
        n_paths: tier.paths(m.n_paths),
        n_steps: tier.steps(m.n_steps),
        seed,
        bridge_correction: m.bridge_correction,
    })
}

/// Named terminal data. `bump_smooth` peaks at sqrt(2) off the wall and
/// decays in every direction; `indicator_shell` is the discontinuous datum
/// for gradient-blowup studies.
pub fn make_phi(name: &str) -> Result<HalfSpaceFn, CliError> {
    match name {
        "one" => Ok(HalfSpaceFn::constant(1.0)),
        "zero" => Ok(HalfSpaceFn::constant(0.0)),
        "tanh_radial" => Ok(HalfSpaceFn::new(1.0, |x1, _| x1.tanh())),
        "bump_smooth" => {
            let bound = (2.0f64).sqrt() * (-0.5f64).exp();
            Ok(HalfSpaceFn::new(bound, |x1, xp| {
                let r2: f64 = x1 * x1 + xp.iter().map(|v| v * v).sum::<f64>();
                x1 * (-r2 / 4.0).exp()
            }))
        }
        "indicator_shell" => Ok(HalfSpaceFn::with_breakpoints(1.0, vec![1.0], |x1, _| {
            if x1 >= 1.0 {
                1.0
            } else {
                0.0
            }
        })),
        other => Err(config_err(format!("unknown terminal datum {other:?}"))),
    }
}

fn split_param<'s>(name: &'s str) -> (&'s str, Option<&'s str>) {
    match name.split_once(':') {
        Some((head, tail)) => (head, Some(tail)),
        None => (name, None),
    }
}

fn parse_floats(tail: &str, what: &str) -> Result<Vec<f64>, CliError> {
    tail.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| config_err(format!("bad {what} parameter {p:?}")))
        })
        .collect()
}

fn one_float(tail: Option<&str>, what: &str) -> Result<f64, CliError> {
    let tail = tail.ok_or_else(|| config_err(format!("{what} needs a :parameter")))?;
    let v = parse_floats(tail, what)?;
    if v.len() != 1 {
        return Err(config_err(format!("{what} takes exactly one parameter")));
    }
    Ok(v[0])
}

/// Semilinear problem from the [model] and [problem] sections. Nonlinearity
/// names: zero, constant:c, linear_decay:l (F = -l y), damped_oscillation:l
/// (F = -l y + 0.1 sin|z|).
pub fn build_semilinear(cfg: &RunConfig) -> Result<SemilinearProblem, CliError> {
    let model = build_model(cfg)?;
    let p = section(&cfg.problem, "problem")?;
    let phi = make_phi(&p.phi)?;
    let orientation = match p.orientation.as_str() {
        "initial" => Orientation::Initial,
        "terminal" => Orientation::Terminal,
        other => {
            return Err(config_err(format!(
                "unknown orientation {other:?} (expected initial or terminal)"
            )))
        }
    };
    let (head, tail) = split_param(&p.nonlinearity);
    let built = match head {
        "zero" => SemilinearProblem::new(model, 1e-9, 1e-9, phi, orientation, |_, _, _, _, _| 0.0),
        "constant" => {
            let c = one_float(tail, "constant")?;
            SemilinearProblem::new(
                model,
                1e-9,
                c.abs().max(1e-9),
                phi,
                orientation,
                move |_, _, _, _, _| c,
            )
        }
        "linear_decay" => {
            let l = one_float(tail, "linear_decay")?;
            SemilinearProblem::new(
                model,
                l.max(1e-9),
                l.max(1e-9),
                phi,
                orientation,
                move |_, _, _, y, _| -l * y,
            )
        }
        "damped_oscillation" => {
            let l = one_float(tail, "damped_oscillation")?;
            let c = l.max(0.1);
            SemilinearProblem::new(model, c, c, phi, orientation, move |_, _, _, y, z| {
                let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                -l * y + 0.1 * zn.sin()
            })
        }
        other => return Err(config_err(format!("unknown nonlinearity {other:?}"))),
    };
    built.map_err(|e| config_err(format!("problem: {e}")))
}

/// Control problem from the [model] and [control] sections. Declared bounds
/// are derived from the control set geometry for the named drift and cost.
pub fn build_control_problem(cfg: &RunConfig) -> Result<ControlProblem, CliError> {
    let model = build_model(cfg)?;
    let c = section(&cfg.control, "control")?;
    let u_set = match (&c.u_points, &c.u_lo, &c.u_hi) {
        (Some(points), None, None) => ControlSet::Finite(points.clone()),
        (None, Some(lo), Some(hi)) => ControlSet::Box {
            lo: lo.clone(),
            hi: hi.clone(),
        },
        _ => {
            return Err(config_err(
                "control set needs either u_points or both u_lo and u_hi",
            ))
        }
    };
    let sup_u = match &u_set {
        ControlSet::Finite(points) => points
            .iter()
            .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max),
        ControlSet::Box { lo, hi } => lo
            .iter()
            .zip(hi)
            .map(|(l, h)| l.abs().max(h.abs()).powi(2))
            .sum::<f64>()
            .sqrt(),
    };
    if c.drift != "minus_u" {
        return Err(config_err(format!("unknown drift {:?}", c.drift)));
    }
    if c.running_cost != "quadratic_half" {
        return Err(config_err(format!(
            "unknown running cost {:?}",
            c.running_cost
        )));
    }
    let phi = make_phi(&c.phi)?;
    let b_bound = sup_u.max(1e-9);
    let ell_bound = (0.5 * sup_u * sup_u).max(1e-9);
    ControlProblem::new(
        model,
        u_set,
        b_bound,
        ell_bound,
        1e-9,
        phi,
        |_, _, _, u, out| {
            for (o, v) in out.iter_mut().zip(u) {
                *o = -v;
            }
        },
        |_, _, _, u| 0.5 * u.iter().map(|v| v * v).sum::<f64>(),
    )
    .map_err(|e| config_err(format!("control: {e}")))
}

/// Policy registry: "feedback" (needs a solved value function) or
/// "constant:a,b,...".
pub fn make_policy(
    name: &str,
    problem: &ControlProblem,
    solution: Option<&GridFunction>,
) -> Result<Policy, CliError> {
    let (head, tail) = split_param(name);
    match head {
        "feedback" => {
            let sol = solution.ok_or_else(|| {
                config_err("feedback policy requires a solver section to produce the value function")
            })?;
            Ok(synthesize_feedback(problem, sol))
        }
        "constant" => {
            let tail = tail.ok_or_else(|| config_err("constant policy needs :coordinates"))?;
            let u = parse_floats(tail, "policy")?;
            if !problem.control_set().contains(&u) {
                return Err(config_err(format!(
                    "constant policy {u:?} is outside the control set"
                )));
            }
            Ok(Policy::constant(u))
        }
        other => Err(config_err(format!("unknown policy {other:?}"))),
    }
}

/// Running gain registry for the growth example. Both entries are bounded
/// by one; `kappa_saturation` ignores consumption, `consumption_saturation`
/// rewards consuming where capital is positive.
pub fn make_gain(name: &str) -> Result<(Arc<GainFn>, f64), CliError> {
    match name {
        "kappa_saturation" => Ok((
            Arc::new(|_s: f64, k: f64, _c: f64| 1.0 - (-k.max(0.0)).exp()),
            1.0,
        )),
        "consumption_saturation" => Ok((
            Arc::new(|_s: f64, k: f64, c: f64| (1.0 - (-c).exp()) * k.max(0.0).tanh()),
            1.0,
        )),
        other => Err(config_err(format!("unknown gain {other:?}"))),
    }
}

/// Productivity profile registry: "constant:a" or "cosine:a,eps" for
/// a + eps cos(xi), sampled on the uniform circle grid.
pub fn make_a_samples(name: &str, n_samples: usize) -> Result<Vec<f64>, CliError> {
    let (head, tail) = split_param(name);
    let tail = tail.ok_or_else(|| config_err("a_profile needs :parameters"))?;
    let params = parse_floats(tail, "a_profile")?;
    let xi =
        |i: usize| 2.0 * std::f64::consts::PI * i as f64 / n_samples as f64;
    match (head, params.as_slice()) {
        ("constant", [a]) => Ok(vec![*a; n_samples]),
        ("cosine", [a, eps]) => Ok((0..n_samples).map(|i| a + eps * xi(i).cos()).collect()),
        _ => Err(config_err(format!("unknown a_profile {name:?}"))),
    }
}

pub fn build_growth_spec(cfg: &RunConfig) -> Result<(GrowthSpec, &GrowthSection), CliError> {
    let g = section(&cfg.growth, "growth")?;
    let a_samples = make_a_samples(&g.a_profile, g.n_samples)?;
    let (u0, u0_bound) = make_gain(&g.u0)?;
    Ok((
        GrowthSpec {
            a_samples,
            n_modes: g.n_modes,
            m_cap: g.m_cap,
            q_scale: g.q_scale.clone(),
            horizon: g.horizon,
            u0,
            u0_bound,
        },
        g,
    ))
}

pub fn control_section<'c>(cfg: &'c RunConfig) -> Result<&'c ControlSection, CliError> {
    section(&cfg.control, "control")
}

pub fn parse_test_points(
    raw: &[Vec<f64>],
    dim: usize,
) -> Result<Vec<(f64, halfspace_hjb::model::HalfSpacePoint)>, CliError> {
    raw.iter()
        .map(|row| {
            if row.len() != dim + 1 {
                return Err(config_err(format!(
                    "test point {row:?} must have 1 + dim = {} entries",
                    dim + 1
                )));
            }
            let point = halfspace_hjb::model::HalfSpacePoint::new(row[1], row[2..].to_vec())
                .map_err(|e| config_err(format!("test point {row:?}: {e}")))?;
            Ok((row[0], point))
        })
        .collect()
}
