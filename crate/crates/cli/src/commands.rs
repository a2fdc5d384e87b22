//! The six subcommands. Each returns Ok(true) when every check passed,
//! Ok(false) when a check failed (exit 1), and Err for usage or I/O
//! problems (exit 2).

use crate::config::{
    build_control_problem, build_growth_spec, build_mc_config, build_model, build_semilinear,
    build_solver_config, config_err, control_section, make_phi, make_policy, parse_test_points,
    CliError, RunConfig, Tier,
};
use crate::output::{fmt_bool, fmt_f, CsvFile};
use halfspace_hjb::control::{estimate_cost, simulate_controlled, verify, VerifyConfig};
use halfspace_hjb::func::extend_odd;
use halfspace_hjb::growth::{run_growth_scenario, ScenarioConfig};
use halfspace_hjb::hjb::{solve_mild, HjbError};
use halfspace_hjb::model::HalfSpacePoint;
use halfspace_hjb::mollify::{kconv_diagnostic, mollify_odd, MollifierSpec};
use halfspace_hjb::quad;
use halfspace_hjb::semigroup::RadialKernel;
use std::path::PathBuf;

pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
    pub tier: Tier,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn map_hjb(e: HjbError) -> CliError {
    match e {
        HjbError::BadConfig(_) | HjbError::Grid(_) => CliError::Config(e.to_string()),
        other => CliError::Run(other.to_string()),
    }
}

impl Ctx {
    fn csv(&self, name: &str) -> CsvFile {
        CsvFile::create(&self.out_dir, name, &self.hash, self.seed)
    }
}

/// Kernel, survival, oddness, and cross-oracle identities on a small
/// (t, x1) lattice; exact checks carry tol = 0.
pub fn cmd_kernel_check(ctx: &Ctx) -> Result<bool, CliError> {
    let model = build_model(&ctx.cfg)?;
    let tol = ctx
        .cfg
        .kernel_check
        .as_ref()
        .and_then(|k| k.survival_tol)
        .unwrap_or(1e-6);
    let t_grid: Vec<f64> = [0.1, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|f| f * model.horizon())
        .collect();
    let x_grid = [0.2, 0.6, 1.2, 2.0, 3.0];

    let mut csv = ctx.csv("kernel_check.csv");
    csv.header(&["test", "t", "x1", "expected", "got", "tol", "pass"]);
    let mut all_pass = true;
    let mut push = |csv: &mut CsvFile, test: &str, t: f64, x1: f64, want: f64, got: f64, tol: f64| {
        let pass = (got - want).abs() <= tol;
        all_pass &= pass;
        csv.row([
            test.to_string(),
            fmt_f(t),
            fmt_f(x1),
            fmt_f(want),
            fmt_f(got),
            fmt_f(tol),
            fmt_bool(pass),
        ]);
        pass
    };

    for &t in &t_grid {
        let kernel = RadialKernel::new(&model, t).map_err(|e| CliError::Run(e.to_string()))?;
        // the two image Gaussians coincide bitwise at the wall
        for &xi in &[0.5, 1.5] {
            let got = kernel
                .evaluate(0.0, xi)
                .map_err(|e| CliError::Run(e.to_string()))?;
            push(&mut csv, "kernel_boundary_zero", t, xi, 0.0, got, 0.0);
        }
        let got = kernel
            .survival(0.0)
            .map_err(|e| CliError::Run(e.to_string()))?;
        push(&mut csv, "survival_zero_at_wall", t, 0.0, 0.0, got, 0.0);

        for &x1 in &x_grid {
            // independent route to 2 Phi(x1 e^{at} / sqrt g) - 1 through the
            // complementary error function
            let w = x1 * kernel.mean_scale() / (2.0 * kernel.g()).sqrt();
            let want = 0.5 * (libm::erfc(-w) - libm::erfc(w));
            let got = kernel
                .survival(x1)
                .map_err(|e| CliError::Run(e.to_string()))?;
            push(&mut csv, "survival_matches_gaussian_cdf", t, x1, want, got, tol);

            // mass of the kernel over the half-line by panel quadrature
            let m = x1 * kernel.mean_scale();
            let sd = kernel.g().sqrt();
            let gl = quad::gauss_legendre_cached(40);
            let cuts = [0.0, m.max(0.5 * sd), m + 4.0 * sd, m + 10.0 * sd];
            let mut mass = 0.0;
            for pair in cuts.windows(2) {
                // Legendre nodes are interior, so xi stays strictly positive
                mass += gl
                    .scaled_to(pair[0], pair[1])
                    .integrate(|xi| kernel.evaluate(x1, xi).unwrap_or(0.0));
            }
            push(&mut csv, "survival_cross_oracle", t, x1, mass, got, tol);
        }
    }

    // the odd extension used by the semigroup negates across the wall
    let phi = make_phi("tanh_radial")?;
    let ext = extend_odd(&phi);
    for &x1 in &x_grid {
        let want = -ext(x1, &[]);
        let got = ext(-x1, &[]);
        push(&mut csv, "odd_extension", 0.0, x1, want, got, 0.0);
    }

    let path = csv.finish()?;
    println!(
        "kernel-check: {} ({})",
        if all_pass { "all checks passed" } else { "CHECKS FAILED" },
        path.display()
    );
    Ok(all_pass)
}

/// Solves the configured semilinear problem and writes the solution field
/// plus the sweep-by-sweep convergence record.
pub fn cmd_solve(ctx: &Ctx) -> Result<bool, CliError> {
    let problem = build_semilinear(&ctx.cfg)?;
    let solver = build_solver_config(&ctx.cfg, ctx.tier)?;
    let (solution, report) = solve_mild(&problem, &solver).map_err(map_hjb)?;

    let mut conv = ctx.csv("convergence.csv");
    conv.header(&["iter", "beta_norm_delta", "ratio"]);
    for (i, d) in report.diff_norms.iter().enumerate() {
        let ratio = if i == 0 {
            String::new()
        } else {
            fmt_f(report.ratios[i - 1])
        };
        conv.row([format!("{}", i + 1), fmt_f(*d), ratio]);
    }
    conv.finish()?;

    let dim = solution.dim();
    let mut cols: Vec<String> = vec!["t".to_string()];
    cols.extend((1..=dim).map(|k| format!("x{k}")));
    cols.push("u".to_string());
    cols.extend((1..=dim).map(|k| format!("du{k}")));
    let mut sol = ctx.csv("solution.csv");
    sol.row(cols);
    let grid = solution.grid();
    let mut coords = vec![0.0; dim];
    for (j, &t) in solution.time_nodes().iter().enumerate().skip(1) {
        for node in 0..grid.len() {
            grid.node_coords(node, &mut coords);
            let mut row: Vec<String> = Vec::with_capacity(2 * dim + 2);
            row.push(fmt_f(t));
            row.extend(coords.iter().map(|&c| fmt_f(c)));
            row.push(fmt_f(solution.value_node(j, node)));
            row.extend(solution.gradient_node(j, node).iter().map(|&g| fmt_f(g)));
            sol.row(row);
        }
    }
    let path = sol.finish()?;

    if let Some(w) = &report.warning {
        eprintln!("solve warning: {w}");
    }
    println!(
        "solve: beta {}, certified factor {}, {} iterations, defect {}, {} ({})",
        fmt_f(report.beta),
        fmt_f(report.constants.factor),
        report.iterations,
        fmt_f(report.defect),
        if report.converged { "converged" } else { "DID NOT CONVERGE" },
        path.display()
    );
    Ok(report.converged)
}

fn solved_value_function(
    ctx: &Ctx,
    problem: &halfspace_hjb::control::ControlProblem,
) -> Result<halfspace_hjb::hjb::GridFunction, CliError> {
    let semilinear = problem.hjb_problem().map_err(|e| CliError::Run(e.to_string()))?;
    let solver = build_solver_config(&ctx.cfg, ctx.tier)?;
    let (solution, report) = solve_mild(&semilinear, &solver).map_err(map_hjb)?;
    if !report.converged {
        return Err(CliError::Run(
            "value-function solve did not converge".to_string(),
        ));
    }
    Ok(solution)
}

/// Simulates every configured policy from the first test point and writes
/// the cost summaries.
pub fn cmd_simulate(ctx: &Ctx) -> Result<bool, CliError> {
    let problem = build_control_problem(&ctx.cfg)?;
    let c = control_section(&ctx.cfg)?;
    let mc = build_mc_config(&ctx.cfg, ctx.tier, ctx.seed)?;
    let points = parse_test_points(&c.test_points, problem.model().dim())?;
    let (t0, x0) = points
        .first()
        .ok_or_else(|| config_err("simulate needs at least one test point"))?;

    let needs_solution = c.policies.iter().any(|p| p.starts_with("feedback"));
    let solution = if needs_solution {
        Some(solved_value_function(ctx, &problem)?)
    } else {
        None
    };

    let mut csv = ctx.csv("simulate.csv");
    csv.header(&["policy", "j", "std_error", "survival_fraction"]);
    for name in &c.policies {
        let policy = make_policy(name, &problem, solution.as_ref())?;
        let batch = simulate_controlled(&problem, *t0, x0, &policy, &mc)
            .map_err(|e| CliError::Run(e.to_string()))?;
        let (j, se) = estimate_cost(&problem, *t0, x0, &policy, &mc)
            .map_err(|e| CliError::Run(e.to_string()))?;
        csv.row([
            name.clone(),
            fmt_f(j),
            fmt_f(se),
            fmt_f(batch.alive_fraction()),
        ]);
    }
    let path = csv.finish()?;
    println!("simulate: wrote {}", path.display());
    Ok(true)
}

/// Solves the control problem's value function and verifies it against the
/// configured policies at the configured test points.
pub fn cmd_verify(ctx: &Ctx) -> Result<bool, CliError> {
    let problem = build_control_problem(&ctx.cfg)?;
    let c = control_section(&ctx.cfg)?;
    let mc = build_mc_config(&ctx.cfg, ctx.tier, ctx.seed)?;
    let points = parse_test_points(&c.test_points, problem.model().dim())?;
    if points.is_empty() {
        return Err(config_err("verify needs at least one test point"));
    }
    let solution = solved_value_function(ctx, &problem)?;
    let policies: Vec<_> = c
        .policies
        .iter()
        .map(|name| make_policy(name, &problem, Some(&solution)))
        .collect::<Result<_, _>>()?;
    let vcfg = VerifyConfig {
        mc,
        grid_tol: c.grid_tol,
    };
    let report = verify(&problem, &solution, &policies, &points, &vcfg)
        .map_err(|e| CliError::Run(e.to_string()))?;

    let mut csv = ctx.csv("verification.csv");
    csv.header(&[
        "point",
        "policy",
        "v",
        "j",
        "std_error",
        "identity_residual",
        "pass",
    ]);
    for e in &report.entries {
        let pass = e.lower_bound_ok && e.optimality_ok.unwrap_or(true) && e.identity_ok;
        csv.row([
            format!("{}", e.point),
            format!("{}", e.policy),
            fmt_f(e.v),
            fmt_f(e.j),
            fmt_f(e.std_error),
            fmt_f(e.identity_residual),
            fmt_bool(pass),
        ]);
    }
    let path = csv.finish()?;
    println!(
        "verify: {} ({})",
        if report.all_pass { "all checks passed" } else { "CHECKS FAILED" },
        path.display()
    );
    Ok(report.all_pass)
}

/// Boundary-zero, sup-bound, and uniform-convergence checks for the
/// mollified family along the diagonal of the configured indices.
pub fn cmd_mollify_check(ctx: &Ctx) -> Result<bool, CliError> {
    let m = ctx
        .cfg
        .mollify_check
        .as_ref()
        .ok_or_else(|| config_err("missing [mollify_check] section"))?;
    if m.dim == 0 {
        return Err(config_err("mollify dim must be at least 1"));
    }
    let phi = make_phi(&m.phi)?;
    if m.indices.is_empty() {
        return Err(config_err("mollify indices must be nonempty"));
    }
    let family: Vec<_> = m
        .indices
        .iter()
        .map(|&k| {
            mollify_odd(
                &phi,
                &MollifierSpec {
                    h: k,
                    n_proj: m.dim,
                    k,
                },
                m.dim,
            )
            .map_err(|e| config_err(format!("mollify index {k}: {e}")))
        })
        .collect::<Result<_, _>>()?;

    // interior compact on which the diagonal family must converge to phi
    let mut compact = Vec::new();
    for i in 0..9 {
        let x1 = 0.5 + 0.3 * i as f64;
        if m.dim == 1 {
            compact.push(HalfSpacePoint::new(x1, vec![]).expect("x1 positive"));
        } else {
            for j in 0..5 {
                let mut xp = vec![0.0; m.dim - 1];
                xp[0] = -2.0 + j as f64;
                compact.push(HalfSpacePoint::new(x1, xp).expect("x1 positive"));
            }
        }
    }

    let mut csv = ctx.csv("mollify.csv");
    csv.header(&["test", "index", "value", "bound", "pass"]);
    let mut all_pass = true;

    for (f, &k) in family.iter().zip(&m.indices) {
        let mut wall_dev = 0.0f64;
        for i in 0..7 {
            let mut xp = vec![0.0; m.dim - 1];
            if !xp.is_empty() {
                xp[0] = -1.5 + 0.5 * i as f64;
            }
            let x = HalfSpacePoint::new(0.0, xp).expect("wall point");
            wall_dev = wall_dev.max(f.eval_half(&x).abs());
        }
        let pass = wall_dev == 0.0;
        all_pass &= pass;
        csv.row([
            "boundary_zero".to_string(),
            format!("{k}"),
            fmt_f(wall_dev),
            fmt_f(0.0),
            fmt_bool(pass),
        ]);

        let mut sup = 0.0f64;
        for i in 0..40 {
            let x1 = 0.1 * i as f64;
            let mut xp = vec![0.0; m.dim - 1];
            for (a, v) in xp.iter_mut().enumerate() {
                *v = -2.0 + 0.37 * ((i + a) % 11) as f64;
            }
            let x = HalfSpacePoint::new(x1, xp).expect("grid point");
            sup = sup.max(f.eval_half(&x).abs());
        }
        let pass = sup <= phi.bound() * (1.0 + 1e-12);
        all_pass &= pass;
        csv.row([
            "sup_bound".to_string(),
            format!("{k}"),
            fmt_f(sup),
            fmt_f(phi.bound()),
            fmt_bool(pass),
        ]);
    }

    let closures: Vec<Box<dyn Fn(&HalfSpacePoint) -> f64>> = family
        .iter()
        .map(|f| {
            let f = f.clone();
            Box::new(move |x: &HalfSpacePoint| f.eval_half(x)) as Box<dyn Fn(&HalfSpacePoint) -> f64>
        })
        .collect();
    let seq: Vec<&dyn Fn(&HalfSpacePoint) -> f64> = closures.iter().map(|b| b.as_ref()).collect();
    let limit = |x: &HalfSpacePoint| phi.eval(x.x1(), x.transverse());
    let report = kconv_diagnostic(&seq, &limit, &[compact], phi.bound(), m.kconv_tol);
    for (devs, &k) in report.deviations.iter().zip(&m.indices) {
        csv.row([
            "kconv_deviation".to_string(),
            format!("{k}"),
            fmt_f(devs[0]),
            fmt_f(m.kconv_tol),
            fmt_bool(report.pass),
        ]);
    }
    all_pass &= report.pass;

    let path = csv.finish()?;
    println!(
        "mollify-check: {} ({})",
        if all_pass { "all checks passed" } else { "CHECKS FAILED" },
        path.display()
    );
    Ok(all_pass)
}

/// Builds the growth example, solves it end to end, and writes spectrum,
/// verification, gain report, and the feedback consumption fields.
pub fn cmd_growth(ctx: &Ctx) -> Result<bool, CliError> {
    let (spec, g) = build_growth_spec(&ctx.cfg)?;
    let solver = build_solver_config(&ctx.cfg, ctx.tier)?;
    let mc = build_mc_config(&ctx.cfg, ctx.tier, ctx.seed)?;
    let scenario = ScenarioConfig {
        solver,
        mc,
        grid_tol: g.grid_tol,
        initial_states: g.initial_states.clone(),
    };
    let (report, _solution) = run_growth_scenario(&spec, &scenario).map_err(|e| match e {
        halfspace_hjb::growth::GrowthError::BadSpec(msg) => config_err(format!("growth: {msg}")),
        other => CliError::Run(other.to_string()),
    })?;

    for w in &report.warnings {
        eprintln!("growth warning: {w}");
    }

    let mut csv = ctx.csv("growth_spectrum.csv");
    csv.header(&["mode", "eigenvalue"]);
    for (m, ev) in report.eigenvalues.iter().enumerate() {
        csv.row([format!("{m}"), fmt_f(*ev)]);
    }
    csv.finish()?;

    let mut csv = ctx.csv("growth_verification.csv");
    csv.header(&[
        "point",
        "policy",
        "v",
        "j",
        "std_error",
        "identity_residual",
        "pass",
    ]);
    for e in &report.verification.entries {
        let pass = e.lower_bound_ok && e.optimality_ok.unwrap_or(true) && e.identity_ok;
        csv.row([
            format!("{}", e.point),
            format!("{}", e.policy),
            fmt_f(e.v),
            fmt_f(e.j),
            fmt_f(e.std_error),
            fmt_f(e.identity_residual),
            fmt_bool(pass),
        ]);
    }
    csv.finish()?;

    let mut csv = ctx.csv("growth_report.csv");
    csv.header(&["state", "value_gain", "feedback_gain", "std_error"]);
    for (i, v) in report.values.iter().enumerate() {
        let (gain, se) = report.gains[i];
        csv.row([format!("{i}"), fmt_f(*v), fmt_f(gain), fmt_f(se)]);
    }
    csv.finish()?;

    let mut csv = ctx.csv("growth_consumption.csv");
    let mut cols = vec!["xi".to_string()];
    cols.extend((0..report.consumption.len()).map(|i| format!("c{i}")));
    csv.row(cols);
    for (i, &xi) in report.xi.iter().enumerate() {
        let mut row = vec![fmt_f(xi)];
        row.extend(report.consumption.iter().map(|c| fmt_f(c[i])));
        csv.row(row);
    }
    let path = csv.finish()?;

    let ok = report.verification.all_pass && report.solve.converged;
    println!(
        "growth: top eigenvalue {}, {} ({})",
        fmt_f(report.eigenvalues[0]),
        if ok { "all checks passed" } else { "CHECKS FAILED" },
        path.display()
    );
    Ok(ok)
}
