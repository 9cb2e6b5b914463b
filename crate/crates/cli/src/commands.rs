//! Subcommand pipelines.

use rand::Rng;

use oplq::dynamics::{homogeneous_cost, total_cost};
use oplq::fbsde::{continuation_solve, optimal_control, residuals, solve_direct, stationarity_residual};
use oplq::fixtures::{random_process, rng};
use oplq::lq::{assemble_quadform, convexity_spectrum, probed_minimizer, solve_quadform};
use oplq::mean_variance::{
    build_gmv, equivalence_constant, equivalent_problem, solve_gmv, tikhonov_portfolio, transform_check, MarketModel,
};
use oplq::meanfield::{fredholm_parts, fredholm_solve, resolvent_control, verify_assumptions};
use oplq::{AdaptedProcess, FbsdeData, FbsdeSolution, LQProblem, RandomVector, ScenarioTree};

use crate::report::*;
use crate::spec::{ProblemSpec, SpecError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Check,
    Fredholm,
    Mv,
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Check => "check",
            Command::Fredholm => "fredholm",
            Command::Mv => "mv",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Spec(SpecError),
    Solver(oplq::Error),
    Document(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Spec(e) => write!(f, "spec error at {e}"),
            CliError::Solver(e) => write!(f, "solver error: {e}"),
            CliError::Document(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        CliError::Spec(e)
    }
}

impl From<oplq::Error> for CliError {
    fn from(e: oplq::Error) -> Self {
        CliError::Solver(e)
    }
}

pub struct Outcome {
    pub doc: ResultDoc,
    pub exit_code: i32,
}

// Tolerances of `validate`; documented in docs/result-schema.md.
pub const TOL_CONTINUATION: f64 = 1e-8;
pub const TOL_ROUTES: f64 = 1e-6;
pub const TOL_RESOLVENT: f64 = 1e-10;
pub const TOL_FBSDE_RESIDUAL: f64 = 1e-9;
pub const TOL_STATIONARITY: f64 = 1e-8;
pub const TOL_EXPANSION: f64 = 1e-9;
pub const TOL_TRANSFORM: f64 = 1e-9;
pub const TOL_TIKHONOV: f64 = 1e-5;
pub const TOL_EQUIVALENCE: f64 = 1e-10;

fn blank(cmd: Command, seed: u64) -> ResultDoc {
    ResultDoc {
        schema_version: RESULT_SCHEMA_VERSION,
        command: cmd.name().into(),
        status: "ok".into(),
        seed,
        assumptions: None,
        solution: None,
        fredholm: None,
        mean_variance: None,
        validation: None,
    }
}

/// ‖a − b‖ / ‖b‖ in the adapted L² norm, 0 when both vanish.
pub fn rel_diff(tree: &ScenarioTree, a: &AdaptedProcess, b: &AdaptedProcess) -> oplq::Result<f64> {
    let d = a.sub(b)?.l2_sq(tree)?.sqrt();
    let nb = b.l2_sq(tree)?.sqrt();
    Ok(if d == 0.0 { 0.0 } else { d / nb.max(f64::MIN_POSITIVE) })
}

pub fn run(cmd: Command, spec: &ProblemSpec, seed: Option<u64>, strict: bool) -> Result<Outcome, CliError> {
    let seed = seed.unwrap_or(spec.seed);
    let mut doc = blank(cmd, seed);
    if cmd == Command::Mv || (cmd == Command::Validate && spec.is_market()) {
        let market = spec.market_model()?;
        let mv = mean_variance(&market)?;
        if cmd == Command::Validate {
            let checks = validate_market(&market, &mv, seed)?;
            finish_validation(&mut doc, checks);
        }
        doc.mean_variance = Some(mv);
        let code = if doc.status == "ok" { 0 } else { 1 };
        return Ok(Outcome { doc, exit_code: code });
    }

    let inst = spec.instance()?;
    let report = verify_assumptions(&inst.fam, spec.solver.delta)?;
    let passed = report.passed();
    doc.assumptions = Some(assumptions_out(&report));
    if !passed && strict {
        doc.status = "assumptions_failed".into();
        return Ok(Outcome { doc, exit_code: 2 });
    }
    if cmd == Command::Check {
        return Ok(Outcome { doc, exit_code: 0 });
    }

    let prob = inst.problem()?;
    let data = FbsdeData::from_problem(&prob, &inst.x)?;
    let sol = continuation_solve(&data, &spec.solver.continuation())?;
    let (out, u) = solution_out(&prob, &data, &inst.x, &sol)?;
    if matches!(cmd, Command::Fredholm | Command::Validate) {
        doc.fredholm = Some(fredholm_out(&inst.fam, &sol, &u)?);
    }
    if cmd == Command::Validate {
        let checks = validate_lq(&prob, &data, &inst.x, &u, &out, doc.fredholm.as_deref().unwrap_or(&[]), seed)?;
        finish_validation(&mut doc, checks);
    }
    doc.solution = Some(out);
    let code = if doc.status == "ok" { 0 } else { 1 };
    Ok(Outcome { doc, exit_code: code })
}

fn finish_validation(doc: &mut ResultDoc, checks: Vec<CheckOut>) {
    if checks.iter().any(|c| !c.pass) {
        doc.status = "validation_failed".into();
    }
    doc.validation = Some(checks);
}

fn check(name: &str, value: f64, tolerance: f64) -> CheckOut {
    CheckOut { name: name.into(), value: Num(value), tolerance, pass: value <= tolerance }
}

fn assumptions_out(r: &oplq::meanfield::AssumptionReport) -> AssumptionsOut {
    let mut failures: Vec<String> = r
        .conditions
        .iter()
        .filter(|c| !c.pass)
        .map(|c| match c.level {
            Some(l) => format!("{} at level {l}", c.name),
            None => c.name.clone(),
        })
        .collect();
    match &r.positivity {
        Some(p) => failures.extend(p.failures().into_iter().map(|f| format!("(H3) {f}"))),
        None => failures.push("(H3) positivity check could not run".into()),
    }
    AssumptionsOut {
        passed: r.passed(),
        delta: r.delta,
        stacked_ok: r.stacked_ok,
        conditions: r
            .conditions
            .iter()
            .map(|c| ConditionOut { name: c.name.clone(), level: c.level, value: Num(c.value), threshold: Num(c.threshold), pass: c.pass })
            .collect(),
        failures,
    }
}

/// Residuals and value of a candidate (X, Y, Z, u); shared with `recompute` so reloads reproduce them bit for bit.
pub fn measure(
    prob: &LQProblem,
    data: &FbsdeData,
    x0: &RandomVector,
    alpha: f64,
    (x, y, z): (&AdaptedProcess, &AdaptedProcess, &AdaptedProcess),
    u: &AdaptedProcess,
) -> oplq::Result<Residuals> {
    let diagnostics = residuals(data, alpha, x, y, z)?;
    let sol = FbsdeSolution { x: x.clone(), y: y.clone(), z: z.clone(), alpha, diagnostics: diagnostics.clone() };
    let (_, stat) = stationarity_residual(&sol, prob, u)?;
    Ok(Residuals {
        forward: diagnostics.forward_residual,
        backward: diagnostics.backward_residual,
        terminal: diagnostics.terminal_residual,
        stationarity_residual_norm: stat,
        value: total_cost(prob, x0, u)?,
    })
}

fn solution_out(prob: &LQProblem, data: &FbsdeData, x0: &RandomVector, sol: &FbsdeSolution) -> oplq::Result<(SolutionOut, AdaptedProcess)> {
    let u = optimal_control(sol, prob)?;
    let residuals = measure(prob, data, x0, sol.alpha, (&sol.x, &sol.y, &sol.z), &u)?;
    let qf = assemble_quadform(prob, x0)?;
    let spec = convexity_spectrum(&qf);
    let cross = match solve_quadform(&qf) {
        Ok((uq, vq)) => CrossValidation {
            quadform_control_rel_diff: rel_diff(&prob.tree, &u, &uq)?,
            quadform_value_diff: (residuals.value - vq).abs(),
        },
        Err(_) => CrossValidation { quadform_control_rel_diff: f64::NAN, quadform_value_diff: f64::NAN },
    };
    let out = SolutionOut {
        alpha: sol.alpha,
        control: ProcessOut::of(&u),
        state: ProcessOut::of(&sol.x),
        y: ProcessOut::of(&sol.y),
        z: ProcessOut::of(&sol.z),
        residuals,
        spectrum: SpectrumOut { min_eigenvalue: spec.min_eigenvalue, max_eigenvalue: spec.max_eigenvalue, convex: spec.convex },
        continuation: sol
            .diagnostics
            .stages
            .iter()
            .map(|s| StageOut { alpha_from: s.alpha_from, step: s.step, iterations: s.iterations, ratio: s.ratio, accepted: s.accepted })
            .collect(),
        cross_validation: cross,
    };
    Ok((out, u))
}

fn fredholm_out(fam: &oplq::meanfield::MFFamilies, sol: &FbsdeSolution, u: &AdaptedProcess) -> oplq::Result<Vec<FredholmOut>> {
    let mut out = Vec::new();
    for j in fam.start..fam.tree.n_steps() {
        let (_, kernel) = fredholm_parts(fam, sol, j)?;
        let f = fredholm_solve(fam, sol, j)?;
        let rc = resolvent_control(fam, sol, j)?;
        out.push(FredholmOut {
            level: j,
            kernel_spectral_radius: kernel.spectral_radius(),
            resolvent_identity_residual: rc.identity_residual,
            fredholm_vs_fbsde: f.sub(u.at(j))?.max_abs(),
            resolvent_vs_fbsde: rc.control.sub(u.at(j))?.max_abs(),
            control: (0..f.nodes()).map(|k| f.node(k).to_vec()).collect(),
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn validate_lq(
    prob: &LQProblem,
    data: &FbsdeData,
    x0: &RandomVector,
    u: &AdaptedProcess,
    out: &SolutionOut,
    fredholm: &[FredholmOut],
    seed: u64,
) -> Result<Vec<CheckOut>, CliError> {
    let tree = &prob.tree;
    let mut checks = Vec::new();
    let direct = solve_direct(data, 1.0)?;
    let ud = optimal_control(&direct, prob)?;
    checks.push(check("continuation vs direct control", rel_diff(tree, u, &ud)?, TOL_CONTINUATION));
    checks.push(check("quadform vs fbsde control", out.cross_validation.quadform_control_rel_diff, TOL_ROUTES));
    let up = probed_minimizer(prob, x0)?;
    checks.push(check("probed QP vs fbsde control", rel_diff(tree, u, &up)?, TOL_ROUTES));
    let scale = u.max_abs().max(f64::MIN_POSITIVE);
    let worst = |f: fn(&FredholmOut) -> f64| fredholm.iter().map(f).fold(0.0, f64::max);
    checks.push(check("fredholm vs fbsde control", worst(|f| f.fredholm_vs_fbsde) / scale, TOL_ROUTES));
    checks.push(check("resolvent vs fbsde control", worst(|f| f.resolvent_vs_fbsde) / scale, TOL_ROUTES));
    checks.push(check("resolvent identity residual", worst(|f| f.resolvent_identity_residual), TOL_RESOLVENT));
    let r = &out.residuals;
    checks.push(check("fbsde residual", r.forward.max(r.backward).max(r.terminal), TOL_FBSDE_RESIDUAL));
    checks.push(check("stationarity residual norm", r.stationarity_residual_norm, TOL_STATIONARITY));
    // J(ū + αv) − J(ū) = α²J⁰(v)
    let mut g = rng(seed);
    let mut worst_exp: f64 = 0.0;
    for _ in 0..5 {
        let scale = g.random_range(0.5..2.0);
        let v = random_process(&mut g, tree, prob.start, tree.n_steps() - 1, prob.m, scale);
        let j0 = homogeneous_cost(prob, &v)?;
        for alpha in [-2.0, -0.5, 0.5, 2.0] {
            let d = total_cost(prob, x0, &u.add(&v.scaled(alpha))?)? - r.value;
            worst_exp = worst_exp.max((d - alpha * alpha * j0).abs() / (alpha * alpha * j0.abs()).max(1.0));
        }
    }
    checks.push(check("optimality expansion", worst_exp, TOL_EXPANSION));
    Ok(checks)
}

/// Transform residuals at the reported wealth, adjoint pair and portfolio.
pub fn transform_out(
    market: &MarketModel,
    h: &[f64],
    (x, y, z): (&AdaptedProcess, &AdaptedProcess, &AdaptedProcess),
    pi: &AdaptedProcess,
) -> oplq::Result<TransformOut> {
    let eq = equivalent_problem(market)?;
    let data = FbsdeData::from_problem(&eq.problem, &market.x0)?;
    let diagnostics = residuals(&data, 1.0, x, y, z)?;
    let sol = FbsdeSolution { x: x.clone(), y: y.clone(), z: z.clone(), alpha: 1.0, diagnostics };
    let rep = transform_check(market, h, &sol, pi)?;
    let orig = build_gmv(market)?;
    Ok(TransformOut {
        stationarity: rep.stationarity,
        backward: rep.backward,
        terminal: rep.terminal,
        reduced: rep.reduced,
        adjoint_match: rep.adjoint_match,
        value: total_cost(&orig, &market.x0, pi)?,
        value_equivalent: total_cost(&eq.problem, &market.x0, pi)?,
    })
}

fn mean_variance(market: &MarketModel) -> Result<MeanVarianceOut, CliError> {
    let s = solve_gmv(market)?;
    Ok(MeanVarianceOut {
        route: s.route.into(),
        k: s.equivalent.k,
        h: s.equivalent.h.clone(),
        equivalence_constant: equivalence_constant(market, &s.equivalent)?,
        portfolio: ProcessOut::of(&s.pi),
        wealth: ProcessOut::of(&s.x),
        y: ProcessOut::of(&s.fbsde.y),
        z: ProcessOut::of(&s.fbsde.z),
        transform: transform_out(market, &s.equivalent.h, (&s.x, &s.fbsde.y, &s.fbsde.z), &s.pi)?,
    })
}

fn validate_market(market: &MarketModel, mv: &MeanVarianceOut, seed: u64) -> Result<Vec<CheckOut>, CliError> {
    let tree = &market.tree;
    let t = &mv.transform;
    let pi = mv.portfolio.to_process(tree).map_err(CliError::Document)?;
    let mut checks = vec![check(
        "transform residual",
        t.stationarity.max(t.backward).max(t.terminal).max(t.reduced),
        TOL_TRANSFORM,
    )];
    let oracle = tikhonov_portfolio(market, &[1e-4, 1e-6, 1e-8])?;
    checks.push(check("tikhonov vs equivalent portfolio", pi.sub(&oracle)?.max_abs(), TOL_TIKHONOV));
    let eq = equivalent_problem(market)?;
    let orig = build_gmv(market)?;
    let c = mv.equivalence_constant;
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let p = random_process(&mut g, tree, market.start, tree.n_steps() - 1, 1, 1.0);
        let jh = total_cost(&eq.problem, &market.x0, &p)?;
        let j = total_cost(&orig, &market.x0, &p)?;
        worst = worst.max((jh - j - c).abs() / (1.0 + j.abs()));
    }
    checks.push(check("cost equivalence", worst, TOL_EQUIVALENCE));
    Ok(checks)
}

/// Numbers a reloaded document must reproduce exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum Recomputed {
    Solution(Residuals),
    MeanVariance(TransformOut),
    Nothing,
}

/// Re-derives the reported residuals from the spec and the processes stored in `doc`.
pub fn recompute(spec: &ProblemSpec, doc: &ResultDoc) -> Result<Recomputed, CliError> {
    if let Some(s) = &doc.solution {
        let inst = spec.instance()?;
        let prob = inst.problem()?;
        let data = FbsdeData::from_problem(&prob, &inst.x)?;
        let tree = &prob.tree;
        let p = |o: &ProcessOut| o.to_process(tree).map_err(CliError::Document);
        let r = measure(&prob, &data, &inst.x, s.alpha, (&p(&s.state)?, &p(&s.y)?, &p(&s.z)?), &p(&s.control)?)?;
        return Ok(Recomputed::Solution(r));
    }
    if let Some(mv) = &doc.mean_variance {
        let market = spec.market_model()?;
        let tree = &market.tree;
        let p = |o: &ProcessOut| o.to_process(tree).map_err(CliError::Document);
        let (x, y, z) = (p(&mv.wealth)?, p(&mv.y)?, p(&mv.z)?);
        return Ok(Recomputed::MeanVariance(transform_out(&market, &mv.h, (&x, &y, &z), &p(&mv.portfolio)?)?));
    }
    Ok(Recomputed::Nothing)
}
