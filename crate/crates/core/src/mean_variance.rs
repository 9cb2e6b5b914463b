//! Generalized mean-variance portfolio selection: βVar-type terminal cost with
//! vanishing control weight, solved through an equivalent cost functional.

use nalgebra::DMatrix;

use crate::dynamics::{adjoint_for_control, cost, forward_sde, LQProblem};
use crate::error::{Error, Result};
use crate::lq::{assemble_quadform, solve_quadform_vec};
use crate::fbsde::{continuation_solve, optimal_control, solve_direct, ContinuationOptions, FbsdeData, FbsdeSolution};
use crate::operators::{schur_complement, MeanFieldOperator, MeanFieldTerm, NodeMatrices, OperatorProcess};
use crate::tree::{AdaptedProcess, RandomVector, ScenarioTree};

/// One risky asset and a bond on a scenario tree; all fields scalar per node.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    pub tree: ScenarioTree,
    pub start: usize,
    /// initial wealth at level `start`
    pub x0: RandomVector,
    pub r: AdaptedProcess,
    pub mu: AdaptedProcess,
    pub vol: AdaptedProcess,
    pub beta: RandomVector,
    pub eps_vol: f64,
    pub eps_beta: f64,
}

impl MarketModel {
    /// Deterministic constant coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(tree: &ScenarioTree, start: usize, x0: f64, r: f64, mu: f64, vol: f64, beta: f64) -> Self {
        let nn = tree.n_steps();
        MarketModel {
            tree: tree.clone(),
            start,
            x0: RandomVector::constant(tree, start, &[x0]),
            r: AdaptedProcess::constant(tree, start, nn - 1, &[r]),
            mu: AdaptedProcess::constant(tree, start, nn - 1, &[mu]),
            vol: AdaptedProcess::constant(tree, start, nn - 1, &[vol]),
            beta: RandomVector::constant(tree, nn, &[beta]),
            eps_vol: vol,
            eps_beta: beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nn = self.tree.n_steps();
        if !(self.eps_vol > 0.0 && self.eps_beta > 0.0) {
            return Err(Error::Market("eps_vol and eps_beta must be positive".into()));
        }
        if self.x0.level != self.start || self.x0.dim != 1 {
            return Err(Error::Market("x0 must be scalar at the start level".into()));
        }
        for (name, p) in [("r", &self.r), ("mu", &self.mu), ("vol", &self.vol)] {
            if p.start != self.start || p.end() + 1 != nn || p.dim() != 1 {
                return Err(Error::Market(format!("{name} must be scalar on levels {}..{}", self.start, nn - 1)));
            }
            if !p.entries.iter().all(|e| e.is_finite()) {
                return Err(Error::Market(format!("{name} has non-finite entries")));
            }
        }
        for e in &self.r.entries {
            if e.values.iter().any(|v| *v < 0.0) {
                return Err(Error::Market(format!("r < 0 at level {}", e.level)));
            }
        }
        for e in &self.mu.entries {
            if e.values.iter().any(|v| *v < 0.0) {
                return Err(Error::Market(format!("mu < 0 at level {}", e.level)));
            }
        }
        for e in &self.vol.entries {
            if e.values.iter().any(|v| *v < self.eps_vol) {
                return Err(Error::Market(format!("vol below eps_vol at level {}", e.level)));
            }
        }
        if self.beta.level != nn || self.beta.dim != 1 {
            return Err(Error::Market("beta must be scalar at the terminal level".into()));
        }
        if self.beta.values.iter().any(|b| *b < self.eps_beta || !b.is_finite()) {
            return Err(Error::Market("beta below eps_beta".into()));
        }
        Ok(())
    }

    /// Risk premium θ = (μ − r)/vol.
    pub fn theta(&self, level: usize) -> RandomVector {
        let (r, mu, vol) = (self.r.at(level), self.mu.at(level), self.vol.at(level));
        let values = (0..r.values.len()).map(|k| (mu.values[k] - r.values[k]) / vol.values[k]).collect();
        RandomVector::from_values(level, 1, values)
    }

    /// r − θ² must be node-constant at every level.
    pub fn check_h6(&self) -> Result<()> {
        for j in self.start..self.tree.n_steps() {
            let th = self.theta(j);
            let r = self.r.at(j);
            let v: Vec<f64> = r.values.iter().zip(&th.values).map(|(r, t)| r - t * t).collect();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo > 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
                return Err(Error::H6Violated { level: j });
            }
        }
        Ok(())
    }

    fn levels(&self) -> std::ops::Range<usize> {
        self.start..self.tree.n_steps()
    }
}

fn field(v: &RandomVector) -> NodeMatrices {
    NodeMatrices::scalar_field(v.level, &v.values)
}

fn field_map(v: &RandomVector, f: impl Fn(f64) -> f64) -> NodeMatrices {
    let vals: Vec<f64> = v.values.iter().map(|x| f(*x)).collect();
    NodeMatrices::scalar_field(v.level, &vals)
}

/// G₀ξ = wξ − wE[ξ] − E[wξ] + E[w]E[ξ] for a scalar weight field w.
pub fn weighted_variance_operator(tree: &ScenarioTree, w: &RandomVector) -> Result<MeanFieldOperator> {
    let ew = tree.expectation(w)?[0];
    let one = field_map(w, |_| 1.0);
    MeanFieldOperator::new(
        field(w),
        vec![
            MeanFieldTerm { bar: field_map(w, |b| ew - b), tilde: one.clone() },
            MeanFieldTerm { bar: field_map(w, |_| -1.0), tilde: field(w) },
        ],
    )
}

/// Wealth dynamics dX = (rX + θπ)ds + π dW with the given cost operators.
fn market_problem(
    market: &MarketModel,
    g: MeanFieldOperator,
    q: OperatorProcess,
    s: OperatorProcess,
    r: OperatorProcess,
) -> LQProblem {
    let tree = &market.tree;
    let nn = tree.n_steps();
    let t = market.start;
    let scalar = |v: &RandomVector| MeanFieldOperator::pointwise(field(v));
    LQProblem {
        tree: tree.clone(),
        start: t,
        n: 1,
        m: 1,
        a: OperatorProcess::from_fn(t, nn - 1, |j| scalar(market.r.at(j))),
        b: OperatorProcess::from_fn(t, nn - 1, |j| scalar(&market.theta(j))),
        c: OperatorProcess::from_fn(t, nn - 1, |j| MeanFieldOperator::zero(tree, j, 1, 1)),
        d: OperatorProcess::from_fn(t, nn - 1, |j| MeanFieldOperator::identity(tree, j, 1)),
        drift: AdaptedProcess::zeros(tree, t, nn - 1, 1),
        diffusion: AdaptedProcess::zeros(tree, t, nn - 1, 1),
        g,
        g_lin: RandomVector::constant(tree, nn, &[-1.0]),
        q,
        s,
        r,
        q_lin: AdaptedProcess::zeros(tree, t, nn - 1, 1),
        rho: AdaptedProcess::zeros(tree, t, nn - 1, 1),
    }
}

/// Original problem: cost E[G₀X_N·X_N] − 2E[X_N] with control weight `lambda` (0 for the true problem).
pub fn build_gmv_regularized(market: &MarketModel, lambda: f64) -> Result<LQProblem> {
    market.validate()?;
    let tree = &market.tree;
    let nn = tree.n_steps();
    let t = market.start;
    let g = weighted_variance_operator(tree, &market.beta)?;
    let zero = |j: usize| MeanFieldOperator::zero(tree, j, 1, 1);
    let r = OperatorProcess::from_fn(t, nn - 1, |j| {
        MeanFieldOperator::constant(tree, j, &DMatrix::from_element(1, 1, lambda))
    });
    Ok(market_problem(
        market,
        g,
        OperatorProcess::from_fn(t, nn - 1, zero),
        OperatorProcess::from_fn(t, nn - 1, zero),
        r,
    ))
}

pub fn build_gmv(market: &MarketModel) -> Result<LQProblem> {
    build_gmv_regularized(market, 0.0)
}

/// The equivalent cost functional and its ingredients.
#[derive(Debug, Clone)]
pub struct EquivalentProblem {
    pub k: f64,
    /// H(t_j) for j = start..=N
    pub h: Vec<f64>,
    /// K·H(t_j), the analytic derivative
    pub h_prime: Vec<f64>,
    /// (H(t_{j+1}) − H(t_j))/Δ for j = start..N−1
    pub h_prime_discrete: Vec<f64>,
    /// Q, S, R before the O(Δ) quadratic-variation correction
    pub q_base: OperatorProcess,
    pub s_base: OperatorProcess,
    pub r_base: OperatorProcess,
    pub problem: LQProblem,
}

impl EquivalentProblem {
    pub fn h_at(&self, level: usize) -> f64 {
        self.h[level - self.problem.start]
    }
}

/// Builds H(s) = ε_β e^{−K(T−s)} and the equivalent LQ problem.
///
/// K is the larger of max|2r − θ²| and the smallest rate for which the discrete
/// increment satisfies (H_{j+1} − H_j)/Δ + H_{j+1}(2r − θ²) ≥ 0.
pub fn equivalent_problem(market: &MarketModel) -> Result<EquivalentProblem> {
    market.validate()?;
    market.check_h6()?;
    let tree = &market.tree;
    let nn = tree.n_steps();
    let t = market.start;
    let dt = tree.delta();
    let mut k_cont: f64 = 0.0;
    let mut k_disc: f64 = 0.0;
    for j in market.levels() {
        let th = market.theta(j);
        for (r, th) in market.r.at(j).values.iter().zip(&th.values) {
            let v = 2.0 * r - th * th;
            k_cont = k_cont.max(v.abs());
            k_disc = k_disc.max(-v);
        }
    }
    if k_disc * dt >= 1.0 {
        return Err(Error::Market(format!(
            "time step too large for the equivalent cost: (theta^2 - 2r)·delta = {} >= 1",
            k_disc * dt
        )));
    }
    let k_disc = if k_disc > 0.0 { -(1.0 - k_disc * dt).ln() / dt } else { 0.0 };
    let k = k_cont.max(k_disc);
    let big_t = tree.horizon();
    let h: Vec<f64> = (t..=nn).map(|j| market.eps_beta * (-k * (big_t - tree.time(j))).exp()).collect();
    let h_prime: Vec<f64> = h.iter().map(|x| k * x).collect();
    let hd: Vec<f64> = (0..nn - t).map(|i| (h[i + 1] - h[i]) / dt).collect();

    // H(T) ≤ β, H > 0, H' + H(2r − θ²) ≥ 0 (analytic and discrete)
    if market.beta.values.iter().any(|b| h[nn - t] > b * (1.0 + 1e-14)) || h.iter().any(|x| *x <= 0.0) {
        return Err(Error::Internal("constructed H violates H(T) <= beta or H > 0".into()));
    }
    for j in market.levels() {
        let i = j - t;
        let th = market.theta(j);
        for (r, th) in market.r.at(j).values.iter().zip(&th.values) {
            let c = 2.0 * r - th * th;
            let tol = 1e-12 * (1.0 + h[i]);
            if h_prime[i] + h[i] * c < -tol || hd[i] + h[i + 1] * c < -tol {
                return Err(Error::Internal(format!("constructed H violates H' + H(2r - theta^2) >= 0 at level {j}")));
            }
        }
    }

    let mut q_base = Vec::new();
    let mut s_base = Vec::new();
    let mut r_base = Vec::new();
    let mut q_eq = Vec::new();
    let mut s_eq = Vec::new();
    let mut r_eq = Vec::new();
    for j in market.levels() {
        let i = j - t;
        let hn = h[i + 1];
        let hdi = hd[i];
        let r = market.r.at(j);
        let th = market.theta(j);
        let one = field_map(r, |_| 1.0);
        // Q ξ = H'ξ − H'E[ξ] + 2rHξ − HE[rξ] − HrE[ξ]
        let qb = MeanFieldOperator::new(
            field_map(r, |rv| hdi + 2.0 * rv * hn),
            vec![
                MeanFieldTerm { bar: field_map(r, |rv| -hdi - hn * rv), tilde: one.clone() },
                MeanFieldTerm { bar: field_map(r, |_| -hn), tilde: field(r) },
            ],
        )?;
        let sb = MeanFieldOperator::new(
            field_map(&th, |tv| hn * tv),
            vec![MeanFieldTerm { bar: field_map(&th, |tv| -hn * tv), tilde: one.clone() }],
        )?;
        let rb = MeanFieldOperator::constant(tree, j, &DMatrix::from_element(1, 1, hn));
        // ΔH E[a²] with a = rX − E[rX] + θπ − E[θπ]
        let c = dt * hn;
        let rth: Vec<f64> = r.values.iter().zip(&th.values).map(|(a, b)| a * b).collect();
        let qc = MeanFieldOperator::new(
            field_map(r, |rv| c * rv * rv),
            vec![MeanFieldTerm { bar: field_map(r, |rv| -c * rv), tilde: field(r) }],
        )?;
        let sc = MeanFieldOperator::new(
            NodeMatrices::scalar_field(j, &rth.iter().map(|x| c * x).collect::<Vec<_>>()),
            vec![MeanFieldTerm { bar: field_map(&th, |tv| -c * tv), tilde: field(r) }],
        )?;
        let rc = MeanFieldOperator::new(
            field_map(&th, |tv| c * tv * tv),
            vec![MeanFieldTerm { bar: field_map(&th, |tv| -c * tv), tilde: field(&th) }],
        )?;
        q_eq.push(qb.add(&qc)?);
        s_eq.push(sb.add(&sc)?);
        r_eq.push(rb.add(&rc)?);
        q_base.push(qb);
        s_base.push(sb);
        r_base.push(rb);
    }
    let w = market.beta.with_values(&(market.beta.as_dvector().add_scalar(-h[nn - t])));
    let g = weighted_variance_operator(tree, &w)?;
    let problem = market_problem(
        market,
        g,
        OperatorProcess::new(t, q_eq)?,
        OperatorProcess::new(t, s_eq)?,
        OperatorProcess::new(t, r_eq)?,
    );
    problem.validate()?;
    Ok(EquivalentProblem {
        k,
        h,
        h_prime,
        h_prime_discrete: hd,
        q_base: OperatorProcess::new(t, q_base)?,
        s_base: OperatorProcess::new(t, s_base)?,
        r_base: OperatorProcess::new(t, r_base)?,
        problem,
    })
}

/// Both sides of the Schur-form identity for the uncorrected operators at one level:
/// E[(Q − S*R⁻¹S)ξ·ξ] = E[(H' + H(2r − θ²))(ξ − Eξ)²] + 2H·E[ξ]·E[r(ξ − Eξ)].
///
/// The last term vanishes when r is deterministic.
pub fn schur_identity(market: &MarketModel, eq: &EquivalentProblem, level: usize, xi: &RandomVector) -> Result<(f64, f64)> {
    let tree = &market.tree;
    let i = level - market.start;
    let sc = schur_complement(tree, eq.q_base.at(level), eq.s_base.at(level), eq.r_base.at(level))?;
    let v = xi.as_dvector();
    let lhs = tree.node_prob(level) * (sc * &v).dot(&v);
    let hn = eq.h[i + 1];
    let mean = tree.expectation(xi)?[0];
    let r = market.r.at(level);
    let th = market.theta(level);
    let p = tree.node_prob(level);
    let mut rhs = 0.0;
    let mut erv = 0.0;
    for k in 0..xi.values.len() {
        let dv = xi.values[k] - mean;
        rhs += p * (eq.h_prime_discrete[i] + hn * (2.0 * r.values[k] - th.values[k].powi(2))) * dv * dv;
        erv += p * r.values[k] * dv;
    }
    Ok((lhs, rhs + 2.0 * hn * mean * erv))
}

#[derive(Debug, Clone)]
pub struct GmvSolution {
    pub pi: AdaptedProcess,
    pub x: AdaptedProcess,
    /// original cost J(t, x; π̄)
    pub value: f64,
    /// equivalent cost J^H(t, x; π̄)
    pub value_equivalent: f64,
    pub equivalent: EquivalentProblem,
    pub fbsde: FbsdeSolution,
    /// "continuation" or "direct"
    pub route: &'static str,
}

/// Optimal portfolio via the equivalent problem's FBSDE.
pub fn solve_gmv(market: &MarketModel) -> Result<GmvSolution> {
    let eq = equivalent_problem(market)?;
    let data = FbsdeData::from_problem(&eq.problem, &market.x0)?;
    let (sol, route) = match continuation_solve(&data, &ContinuationOptions::default()) {
        Ok(s) => (s, "continuation"),
        Err(Error::NotConverged { .. }) | Err(Error::Diverged { .. }) => (solve_direct(&data, 1.0)?, "direct"),
        Err(e) => return Err(e),
    };
    let pi = optimal_control(&sol, &eq.problem)?;
    let original = build_gmv(market)?;
    let x = forward_sde(&original, &market.x0, &pi)?;
    let value = cost(&original, &x, &pi, false)?;
    let value_equivalent = cost(&eq.problem, &x, &pi, false)?;
    Ok(GmvSolution { pi, x, value, value_equivalent, equivalent: eq, fbsde: sol, route })
}

/// −H(t)·E[(x − E[x])²], the constant J^H − J.
pub fn equivalence_constant(market: &MarketModel, eq: &EquivalentProblem) -> Result<f64> {
    let tree = &market.tree;
    let mean = tree.expectation(&market.x0)?[0];
    let centred = market.x0.with_values(&market.x0.as_dvector().add_scalar(-mean));
    Ok(-eq.h[0] * tree.inner(&centred, &centred)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformReport {
    /// max |θŶ̄ + Z̄|
    pub stationarity: f64,
    /// max |Ȳ_j − (1 + rΔ)Ŷ̄_j|
    pub backward: f64,
    /// max |Ȳ_N − (G₀X_N − 1)|
    pub terminal: f64,
    /// max |Ȳ_{j+1} − Ŷ̄_j(1 − θΔW)|; exact only on binomial trees
    pub reduced: f64,
    /// max distance of (Ȳ, Z̄) from the original problem's adjoint of π̄
    pub adjoint_match: f64,
}

impl TransformReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.backward).max(self.terminal).max(self.reduced)
    }
}

/// Ȳ_j = Ỹ_j + H_j(X̃_j − E X̃_j), Z̄_j = Z̃_j + H_{j+1}π̃_j and the relations they must satisfy.
pub fn transform_check(market: &MarketModel, h: &[f64], sol: &FbsdeSolution, pi: &AdaptedProcess) -> Result<TransformReport> {
    let tree = &market.tree;
    let nn = tree.n_steps();
    let t = market.start;
    let dt = tree.delta();
    let mut ybar = Vec::new();
    for j in t..=nn {
        let x = sol.x.at(j);
        let mean = tree.expectation(x)?[0];
        let v = x.as_dvector().add_scalar(-mean) * h[j - t];
        ybar.push(sol.y.at(j).with_values(&(sol.y.at(j).as_dvector() + v)));
    }
    let mut zbar = Vec::new();
    for j in t..nn {
        let z = sol.z.at(j).as_dvector() + pi.at(j).as_dvector() * h[j + 1 - t];
        zbar.push(sol.z.at(j).with_values(&z));
    }
    let (mut stat, mut back, mut red) = (0.0f64, 0.0f64, 0.0f64);
    for j in t..nn {
        let i = j - t;
        let yh = tree.cond_expectation(&ybar[i + 1])?;
        let th = market.theta(j);
        let r = market.r.at(j);
        for k in 0..yh.values.len() {
            stat = stat.max((th.values[k] * yh.values[k] + zbar[i].values[k]).abs());
            back = back.max((ybar[i].values[k] - (1.0 + r.values[k] * dt) * yh.values[k]).abs());
        }
        let dw = tree.increment_vector(j + 1)?;
        let b = tree.branching();
        for (c, yc) in ybar[i + 1].values.iter().enumerate() {
            let parent = c / b;
            let pred = yh.values[parent] * (1.0 - th.values[parent] * dw.values[c]);
            red = red.max((yc - pred).abs());
        }
    }
    let original = build_gmv(market)?;
    let xn = sol.x.at(nn);
    let target = original.g.apply(tree, xn)?.add(&original.g_lin)?;
    let terminal = ybar[nn - t].sub(&target)?.max_abs();

    let (_, y0, z0) = adjoint_for_control(&original, &market.x0, pi)?;
    let mut adjoint_match: f64 = 0.0;
    for j in t..=nn {
        adjoint_match = adjoint_match.max(ybar[j - t].sub(y0.at(j))?.max_abs());
        if j < nn {
            adjoint_match = adjoint_match.max(zbar[j - t].sub(z0.at(j))?.max_abs());
        }
    }
    Ok(TransformReport { stationarity: stat, backward: back, terminal, reduced: red, adjoint_match })
}

/// Tikhonov cross-check: minimize the original cost with control weight λ for each
/// λ in `lambdas` by the quadratic-form route, then extrapolate the portfolio
/// polynomially to λ = 0.
pub fn tikhonov_portfolio(market: &MarketModel, lambdas: &[f64]) -> Result<AdaptedProcess> {
    if lambdas.is_empty() || lambdas.iter().any(|l| *l <= 0.0) {
        return Err(Error::Market("Tikhonov weights must be positive".into()));
    }
    let mut sols = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let prob = build_gmv_regularized(market, l)?;
        let qf = assemble_quadform(&prob, &market.x0)?;
        sols.push(solve_quadform_vec(&qf)?.0);
    }
    // Lagrange weights of the interpolating polynomial evaluated at 0
    let mut out = sols[0].scale(0.0);
    for (i, li) in lambdas.iter().enumerate() {
        let w: f64 = lambdas
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, lj)| lj / (lj - li))
            .product();
        out.axpy(w, &sols[i], 1.0);
    }
    AdaptedProcess::from_dvector(&market.tree, market.start, market.tree.n_steps() - 1, 1, &out)
}
