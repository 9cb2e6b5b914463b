//! The coupled FBSDE of the optimality system: direct assembled solve and the
//! method of continuation in α.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::dynamics::LQProblem;
use crate::error::{Error, Result};
use crate::operators::{inverse_dense, level_weights, rcond, weighted_adjoint, RCOND_THRESHOLD};
use crate::tree::{AdaptedProcess, RandomVector, ScenarioTree};

/// Dense node-coordinate coefficients of one time step.
#[derive(Debug, Clone)]
pub struct LevelBlock {
    pub a_hat: DMatrix<f64>,
    pub a_hat_adj: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub c_hat_adj: DMatrix<f64>,
    pub q_hat: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub b_adj: DMatrix<f64>,
    pub d_adj: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    /// B R⁻¹ B*, B R⁻¹ D*, D R⁻¹ B*, D R⁻¹ D*
    pub bb: DMatrix<f64>,
    pub bd: DMatrix<f64>,
    pub db: DMatrix<f64>,
    pub dd: DMatrix<f64>,
}

/// Reduced coefficients Â, Ĉ, Q̂ and the inhomogeneities (ξ, φ, ψ, γ, η).
#[derive(Debug, Clone)]
pub struct FbsdeData {
    pub tree: ScenarioTree,
    pub start: usize,
    pub n: usize,
    pub m: usize,
    pub levels: Vec<LevelBlock>,
    pub g: DMatrix<f64>,
    pub xi: RandomVector,
    pub phi: AdaptedProcess,
    pub psi: AdaptedProcess,
    pub gamma: AdaptedProcess,
    pub eta: RandomVector,
}

impl FbsdeData {
    /// Reduced system of the optimality conditions of `prob` started from `x`.
    pub fn from_problem(prob: &LQProblem, x: &RandomVector) -> Result<Self> {
        prob.validate()?;
        let tree = &prob.tree;
        let nn = tree.n_steps();
        let (n, m) = (prob.n, prob.m);
        let mut levels = Vec::new();
        let (mut phi, mut psi, mut gamma) = (Vec::new(), Vec::new(), Vec::new());
        for j in prob.start..nn {
            let wx = level_weights(tree, j, n);
            let wu = level_weights(tree, j, m);
            let a = prob.a.at(j).assemble(tree)?;
            let b = prob.b.at(j).assemble(tree)?;
            let c = prob.c.at(j).assemble(tree)?;
            let d = prob.d.at(j).assemble(tree)?;
            let q = prob.q.at(j).assemble(tree)?;
            let s = prob.s.at(j).assemble(tree)?;
            let r = prob.r.at(j).assemble(tree)?;
            let r_inv = inverse_dense(&r, &format!("R at level {j}"))?;
            let b_adj = weighted_adjoint(&b, &wu, &wx);
            let d_adj = weighted_adjoint(&d, &wu, &wx);
            let s_adj = weighted_adjoint(&s, &wx, &wu);
            let rs = &r_inv * &s;
            let a_hat = &a - &b * &rs;
            let c_hat = &c - &d * &rs;
            let q_hat = &q - &s_adj * &rs;
            let rho = prob.rho.at(j).as_dvector();
            let r_rho = &r_inv * rho;
            phi.push(prob.drift.at(j).with_values(&(prob.drift.at(j).as_dvector() - &b * &r_rho)));
            psi.push(prob.diffusion.at(j).with_values(&(prob.diffusion.at(j).as_dvector() - &d * &r_rho)));
            gamma.push(prob.q_lin.at(j).with_values(&(prob.q_lin.at(j).as_dvector() - &s_adj * &r_rho)));
            levels.push(LevelBlock {
                a_hat_adj: weighted_adjoint(&a_hat, &wx, &wx),
                c_hat_adj: weighted_adjoint(&c_hat, &wx, &wx),
                a_hat,
                c_hat,
                q_hat,
                bb: &b * &r_inv * &b_adj,
                bd: &b * &r_inv * &d_adj,
                db: &d * &r_inv * &b_adj,
                dd: &d * &r_inv * &d_adj,
                b,
                d,
                b_adj,
                d_adj,
                r_inv,
            });
        }
        Ok(FbsdeData {
            tree: tree.clone(),
            start: prob.start,
            n,
            m,
            levels,
            g: prob.g.assemble(tree)?,
            xi: x.clone(),
            phi: AdaptedProcess::new(prob.start, phi)?,
            psi: AdaptedProcess::new(prob.start, psi)?,
            gamma: AdaptedProcess::new(prob.start, gamma)?,
            eta: prob.g_lin.clone(),
        })
    }

    pub fn block(&self, level: usize) -> &LevelBlock {
        &self.levels[level - self.start]
    }

    /// True when the forward equation does not see (Y, Z).
    pub fn is_decoupled(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.bb.amax() == 0.0 && l.bd.amax() == 0.0 && l.db.amax() == 0.0 && l.dd.amax() == 0.0)
    }

    /// Same coefficients with other inhomogeneities.
    pub fn with_inhomogeneities(
        &self,
        xi: RandomVector,
        phi: AdaptedProcess,
        psi: AdaptedProcess,
        gamma: AdaptedProcess,
        eta: RandomVector,
    ) -> Self {
        FbsdeData { xi, phi, psi, gamma, eta, ..self.clone() }
    }

    fn inhom(&self) -> Inhom {
        Inhom {
            xi: self.xi.as_dvector(),
            phi: self.phi.entries.iter().map(|e| e.as_dvector()).collect(),
            psi: self.psi.entries.iter().map(|e| e.as_dvector()).collect(),
            gamma: self.gamma.entries.iter().map(|e| e.as_dvector()).collect(),
            eta: self.eta.as_dvector(),
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.tree, self.start, self.n)
    }
}

#[derive(Debug, Clone)]
struct Inhom {
    xi: DVector<f64>,
    phi: Vec<DVector<f64>>,
    psi: Vec<DVector<f64>>,
    gamma: Vec<DVector<f64>>,
    eta: DVector<f64>,
}

impl Inhom {
    fn zeros(data: &FbsdeData) -> Self {
        let tree = &data.tree;
        let n = data.n;
        let nn = tree.n_steps();
        let lv = |j: usize| DVector::zeros(tree.level_size(j) * n);
        Inhom {
            xi: lv(data.start),
            phi: (data.start..nn).map(lv).collect(),
            psi: (data.start..nn).map(lv).collect(),
            gamma: (data.start..nn).map(lv).collect(),
            eta: lv(nn),
        }
    }
}

/// Offsets of X_{t+1..N}, Y_{t..N}, Z_{t..N−1} in the stacked unknown vector.
#[derive(Debug, Clone)]
struct Layout {
    start: usize,
    n_steps: usize,
    x_off: Vec<usize>,
    y_off: Vec<usize>,
    z_off: Vec<usize>,
    sizes: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(tree: &ScenarioTree, start: usize, n: usize) -> Self {
        let nn = tree.n_steps();
        let sizes: Vec<usize> = (0..=nn).map(|j| tree.level_size(j) * n).collect();
        let mut off = 0;
        let mut x_off = vec![usize::MAX; nn + 1];
        for j in start + 1..=nn {
            x_off[j] = off;
            off += sizes[j];
        }
        let mut y_off = vec![usize::MAX; nn + 1];
        for j in start..=nn {
            y_off[j] = off;
            off += sizes[j];
        }
        let mut z_off = vec![usize::MAX; nn + 1];
        for j in start..nn {
            z_off[j] = off;
            off += sizes[j];
        }
        Layout { start, n_steps: nn, x_off, y_off, z_off, sizes, total: off }
    }

    fn describe(&self, idx: usize) -> String {
        for j in 0..=self.n_steps {
            for (name, offs) in [("X", &self.x_off), ("Y", &self.y_off), ("Z", &self.z_off)] {
                let o = offs[j];
                if o != usize::MAX && idx >= o && idx < o + self.sizes[j] {
                    let row = match name {
                        "X" => "forward",
                        "Y" if j == self.n_steps => "terminal",
                        "Y" => "backward",
                        _ => "martingale",
                    };
                    return format!("{name} at level {j} ({row} block)");
                }
            }
        }
        "unknown block".into()
    }
}

/// Solution vectors per level in node coordinates.
#[derive(Debug, Clone)]
struct Triple {
    x: Vec<DVector<f64>>,
    y: Vec<DVector<f64>>,
    z: Vec<DVector<f64>>,
}

struct System<'a> {
    data: &'a FbsdeData,
    layout: Layout,
}

impl<'a> System<'a> {
    fn new(data: &'a FbsdeData) -> Self {
        System { data, layout: data.layout() }
    }

    fn lift(&self, v: &DVector<f64>, level: usize) -> DVector<f64> {
        let tree = &self.data.tree;
        let rv = RandomVector::from_values(level, self.data.n, v.as_slice().to_vec());
        tree.lift(&rv).expect("lift within tree").as_dvector()
    }

    fn cexp(&self, v: &DVector<f64>, level: usize) -> DVector<f64> {
        let rv = RandomVector::from_values(level, self.data.n, v.as_slice().to_vec());
        self.data.tree.cond_expectation(&rv).expect("level >= 1").as_dvector()
    }

    fn mcoef(&self, v: &DVector<f64>, level: usize) -> DVector<f64> {
        let rv = RandomVector::from_values(level, self.data.n, v.as_slice().to_vec());
        self.data.tree.martingale_coefficient(&rv).expect("level >= 1").as_dvector()
    }

    fn dw_scale(&self, v: &DVector<f64>, level: usize) -> DVector<f64> {
        let tree = &self.data.tree;
        let dw = tree.increment_vector(level).expect("level >= 1");
        let n = self.data.n;
        let mut out = v.clone();
        for k in 0..dw.values.len() {
            for i in 0..n {
                out[k * n + i] *= dw.values[k];
            }
        }
        out
    }

    fn unpack(&self, u: &DVector<f64>, xi: &DVector<f64>) -> Triple {
        let l = &self.layout;
        let t = l.start;
        let nn = l.n_steps;
        let seg = |off: usize, j: usize| u.rows(off, l.sizes[j]).into_owned();
        let mut x = vec![xi.clone()];
        for j in t + 1..=nn {
            x.push(seg(l.x_off[j], j));
        }
        let y = (t..=nn).map(|j| seg(l.y_off[j], j)).collect();
        let z = (t..nn).map(|j| seg(l.z_off[j], j)).collect();
        Triple { x, y, z }
    }


    /// Residual rows, ordered like the unknowns: forward, backward/terminal, martingale.
    fn residual(&self, alpha: f64, u: &DVector<f64>, inh: &Inhom) -> DVector<f64> {
        let tr = self.unpack(u, &inh.xi);
        let parts = self.residual_parts(alpha, &tr, inh);
        let mut out = DVector::zeros(self.layout.total);
        let l = &self.layout;
        let t = l.start;
        for j in t..l.n_steps {
            out.rows_mut(l.x_off[j + 1], l.sizes[j + 1]).copy_from(&parts.forward[j - t]);
            out.rows_mut(l.y_off[j], l.sizes[j]).copy_from(&parts.backward[j - t]);
            out.rows_mut(l.z_off[j], l.sizes[j]).copy_from(&parts.martingale[j - t]);
        }
        out.rows_mut(l.y_off[l.n_steps], l.sizes[l.n_steps]).copy_from(&parts.terminal);
        out
    }

    fn residual_parts(&self, alpha: f64, tr: &Triple, inh: &Inhom) -> Parts {
        let d = self.data;
        let dt = d.tree.delta();
        let t = d.start;
        let nn = d.tree.n_steps();
        let mut parts = Parts::default();
        for j in t..nn {
            let i = j - t;
            let lb = &d.levels[i];
            let (xj, zj) = (&tr.x[i], &tr.z[i]);
            let y_hat = self.cexp(&tr.y[i + 1], j + 1);
            let drift = (&lb.a_hat * xj) * alpha - &lb.bb * &y_hat - &lb.bd * zj + &inh.phi[i];
            let diff = (&lb.c_hat * xj) * alpha - &lb.db * &y_hat - &lb.dd * zj + &inh.psi[i];
            let pred = self.lift(&(xj + drift * dt), j) + self.dw_scale(&self.lift(&diff, j), j + 1);
            parts.forward.push(&tr.x[i + 1] - pred);
            let back = (&lb.q_hat * xj + &lb.a_hat_adj * &y_hat + &lb.c_hat_adj * zj) * alpha + &inh.gamma[i];
            parts.backward.push(&tr.y[i] - &y_hat - back * dt);
            parts.martingale.push(zj - self.mcoef(&tr.y[i + 1], j + 1));
        }
        parts.terminal = &tr.y[nn - t] - (&d.g * &tr.x[nn - t]) * alpha - &inh.eta;
        parts
    }

    fn matrix(&self, alpha: f64) -> Result<DMatrix<f64>> {
        let total = self.layout.total;
        self.data.tree.check_budget(total.saturating_mul(total))?;
        let zero = Inhom::zeros(self.data);
        let mut m = DMatrix::zeros(total, total);
        let mut e = DVector::zeros(total);
        for c in 0..total {
            e[c] = 1.0;
            m.set_column(c, &self.residual(alpha, &e, &zero));
            e[c] = 0.0;
        }
        Ok(m)
    }

    fn factor(&self, alpha: f64) -> Result<LU<f64, Dyn, Dyn>> {
        let m = self.matrix(alpha)?;
        let r = rcond(&m);
        let lu = m.lu();
        if r < RCOND_THRESHOLD {
            let u = lu.u();
            let mut worst = 0;
            for i in 0..u.nrows() {
                if u[(i, i)].abs() < u[(worst, worst)].abs() {
                    worst = i;
                }
            }
            return Err(Error::Singular {
                context: format!("FBSDE system at alpha {alpha}: {}", self.layout.describe(worst)),
                rcond: r,
            });
        }
        Ok(lu)
    }

    fn solve_with(&self, lu: &LU<f64, Dyn, Dyn>, alpha: f64, inh: &Inhom) -> Result<Triple> {
        let zero = DVector::zeros(self.layout.total);
        let rhs = -self.residual(alpha, &zero, inh);
        let u = lu.solve(&rhs).ok_or_else(|| Error::Singular {
            context: format!("FBSDE system at alpha {alpha}"),
            rcond: 0.0,
        })?;
        Ok(self.unpack(&u, &inh.xi))
    }

    fn norm_sq(&self, tr: &Triple) -> f64 {
        let d = self.data;
        let tree = &d.tree;
        let proc = |v: &[DVector<f64>]| {
            let entries = v
                .iter()
                .enumerate()
                .map(|(i, e)| RandomVector::from_values(d.start + i, d.n, e.as_slice().to_vec()))
                .collect();
            AdaptedProcess { start: d.start, entries }
        };
        let zsum: f64 = tr
            .z
            .iter()
            .enumerate()
            .map(|(i, z)| tree.delta() * tree.node_prob(d.start + i) * z.norm_squared())
            .sum();
        proc(&tr.x).sup_sq(tree) + proc(&tr.y).sup_sq(tree) + zsum
    }

    fn diff_norm(&self, a: &Triple, b: &Triple) -> f64 {
        let sub = |p: &[DVector<f64>], q: &[DVector<f64>]| p.iter().zip(q).map(|(x, y)| x - y).collect::<Vec<_>>();
        let d = Triple { x: sub(&a.x, &b.x), y: sub(&a.y, &b.y), z: sub(&a.z, &b.z) };
        self.norm_sq(&d).sqrt()
    }

    /// Data of the α₀ problem whose solution is the image of `guess` under the continuation map.
    fn shifted(&self, base: &Inhom, guess: &Triple, eps: f64) -> Inhom {
        let d = self.data;
        let t = d.start;
        let nn = d.tree.n_steps();
        let mut out = base.clone();
        for j in t..nn {
            let i = j - t;
            let lb = &d.levels[i];
            let x = &guess.x[i];
            let y_hat = self.cexp(&guess.y[i + 1], j + 1);
            out.phi[i] += (&lb.a_hat * x) * eps;
            out.psi[i] += (&lb.c_hat * x) * eps;
            out.gamma[i] += (&lb.q_hat * x + &lb.a_hat_adj * &y_hat + &lb.c_hat_adj * &guess.z[i]) * eps;
        }
        out.eta += (&d.g * &guess.x[nn - t]) * eps;
        out
    }

    fn diagnostics(&self, alpha: f64, tr: &Triple, stages: Vec<StageTrace>) -> Diagnostics {
        let parts = self.residual_parts(alpha, tr, &self.data.inhom());
        let maxabs = |v: &[DVector<f64>]| v.iter().fold(0.0f64, |m, x| m.max(x.amax()));
        Diagnostics {
            forward_residual: maxabs(&parts.forward),
            backward_residual: maxabs(&parts.backward).max(maxabs(&parts.martingale)),
            terminal_residual: parts.terminal.amax(),
            stages,
        }
    }

    fn finish(&self, tr: Triple, alpha: f64, stages: Vec<StageTrace>) -> Result<FbsdeSolution> {
        let d = self.data;
        let diagnostics = self.diagnostics(alpha, &tr, stages);
        let mk = |v: &[DVector<f64>]| -> Result<AdaptedProcess> {
            AdaptedProcess::new(
                d.start,
                v.iter()
                    .enumerate()
                    .map(|(i, e)| RandomVector::from_values(d.start + i, d.n, e.as_slice().to_vec()))
                    .collect(),
            )
        };
        Ok(FbsdeSolution { x: mk(&tr.x)?, y: mk(&tr.y)?, z: mk(&tr.z)?, alpha, diagnostics })
    }
}

#[derive(Default)]
struct Parts {
    forward: Vec<DVector<f64>>,
    backward: Vec<DVector<f64>>,
    martingale: Vec<DVector<f64>>,
    terminal: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub alpha_from: f64,
    pub step: f64,
    pub iterations: usize,
    /// largest measured ratio of successive differences
    pub ratio: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub forward_residual: f64,
    pub backward_residual: f64,
    pub terminal_residual: f64,
    pub stages: Vec<StageTrace>,
}

impl Diagnostics {
    pub fn max_residual(&self) -> f64 {
        self.forward_residual.max(self.backward_residual).max(self.terminal_residual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeSolution {
    pub x: AdaptedProcess,
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    pub alpha: f64,
    pub diagnostics: Diagnostics,
}

impl FbsdeSolution {
    /// Ŷ_j = E[Y_{j+1}|F_j] for j = t..N−1.
    pub fn y_hat(&self, tree: &ScenarioTree) -> Result<AdaptedProcess> {
        let start = self.y.start;
        let entries = (start..self.y.end())
            .map(|j| tree.cond_expectation(self.y.at(j + 1)))
            .collect::<Result<Vec<_>>>()?;
        AdaptedProcess::new(start, entries)
    }

    /// sqrt(E sup|X|² + E sup|Y|² + ΣΔE|Z|²)
    pub fn norm(&self, tree: &ScenarioTree) -> Result<f64> {
        Ok((self.x.sup_sq(tree) + self.y.sup_sq(tree) + self.z.l2_sq(tree)?).sqrt())
    }
}

/// Solves the α-coupled FBSDE as one linear system.
pub fn solve_direct(data: &FbsdeData, alpha: f64) -> Result<FbsdeSolution> {
    let sys = System::new(data);
    let lu = sys.factor(alpha)?;
    let tr = sys.solve_with(&lu, alpha, &data.inhom())?;
    sys.finish(tr, alpha, Vec::new())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationOptions {
    /// Fixed step sizes summing to 1; `None` selects the adaptive schedule.
    pub schedule: Option<Vec<f64>>,
    pub tol: f64,
    pub max_iter: usize,
    /// Initial step of the adaptive schedule.
    pub initial_step: f64,
    /// Adaptive schedule gives up below this step.
    pub min_step: f64,
    /// Final α; the schedule must sum to it.
    pub target: f64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions { schedule: None, tol: 1e-10, max_iter: 200, initial_step: 0.25, min_step: 1.0 / 1024.0, target: 1.0 }
    }
}

impl ContinuationOptions {
    pub fn with_schedule(schedule: Vec<f64>) -> Self {
        ContinuationOptions { schedule: Some(schedule), ..Default::default() }
    }
}

enum StageOutcome {
    Converged(Triple, StageTrace),
    Rejected(StageTrace),
}

/// Residuals of a candidate (X, Y, Z) in the α-coupled FBSDE; X_t is taken from the data.
pub fn residuals(data: &FbsdeData, alpha: f64, x: &AdaptedProcess, y: &AdaptedProcess, z: &AdaptedProcess) -> Result<Diagnostics> {
    let t = data.start;
    let nn = data.tree.n_steps();
    let span = |p: &AdaptedProcess, end: usize, name: &str| {
        if p.start != t || p.end() != end || p.dim() != data.n {
            return Err(Error::DimMismatch(format!("{name}: expected span {t}..={end} of dim {}", data.n)));
        }
        Ok(p.entries.iter().map(|e| e.as_dvector()).collect::<Vec<_>>())
    };
    let mut xs = span(x, nn, "X")?;
    xs[0] = data.xi.as_dvector();
    let tr = Triple { x: xs, y: span(y, nn, "Y")?, z: span(z, nn - 1, "Z")? };
    Ok(System::new(data).diagnostics(alpha, &tr, Vec::new()))
}

/// Method of continuation from α = 0 to `opts.target` (normally 1).
pub fn continuation_solve(data: &FbsdeData, opts: &ContinuationOptions) -> Result<FbsdeSolution> {
    let sys = System::new(data);
    let base = data.inhom();
    let target = opts.target;
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::DimMismatch("continuation target must lie in (0, 1]".into()));
    }
    if let Some(s) = &opts.schedule {
        let total: f64 = s.iter().sum();
        if s.is_empty() || s.iter().any(|e| *e <= 0.0) || (total - target).abs() > 1e-12 {
            return Err(Error::DimMismatch("continuation schedule must be positive steps summing to the target".into()));
        }
    }
    if data.is_decoupled() {
        let lu = sys.factor(target)?;
        let tr = sys.solve_with(&lu, target, &base)?;
        let trace = StageTrace { alpha_from: 0.0, step: target, iterations: 1, ratio: 0.0, accepted: true };
        return sys.finish(tr, target, vec![trace]);
    }
    let mut alpha = 0.0;
    let mut lu = sys.factor(0.0)?;
    let mut current = sys.solve_with(&lu, 0.0, &base)?;
    let mut stages = Vec::new();
    match &opts.schedule {
        Some(schedule) => {
            for (k, &eps) in schedule.iter().enumerate() {
                if k > 0 {
                    lu = sys.factor(alpha)?;
                }
                match run_stage(&sys, &lu, &base, &current, alpha, eps, opts, false, stages.len())? {
                    StageOutcome::Converged(tr, trace) => {
                        current = tr;
                        stages.push(trace);
                        alpha += eps;
                    }
                    StageOutcome::Rejected(_) => unreachable!("fixed schedules never reject"),
                }
            }
        }
        None => {
            let mut eps = opts.initial_step.min(target);
            while alpha < target - 1e-15 {
                let step = eps.min(target - alpha);
                match run_stage(&sys, &lu, &base, &current, alpha, step, opts, true, stages.len())? {
                    StageOutcome::Converged(tr, trace) => {
                        current = tr;
                        stages.push(trace);
                        alpha += step;
                        if alpha < target - 1e-15 {
                            lu = sys.factor(alpha)?;
                        }
                    }
                    StageOutcome::Rejected(trace) => {
                        let ratio = trace.ratio;
                        stages.push(trace);
                        eps = step / 2.0;
                        if eps < opts.min_step {
                            return Err(Error::Diverged { stage: stages.len() - 1, alpha, ratio });
                        }
                    }
                }
            }
        }
    }
    sys.finish(current, target, stages)
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    sys: &System,
    lu: &LU<f64, Dyn, Dyn>,
    base: &Inhom,
    start: &Triple,
    alpha0: f64,
    eps: f64,
    opts: &ContinuationOptions,
    adaptive: bool,
    stage: usize,
) -> Result<StageOutcome> {
    let mut guess = start.clone();
    let scale = 1.0 + sys.norm_sq(start).sqrt();
    let mut prev_diff: Option<f64> = None;
    let mut ratio: f64 = 0.0;
    let mut above_one = 0;
    for it in 1..=opts.max_iter {
        let inh = sys.shifted(base, &guess, eps);
        let next = sys.solve_with(lu, alpha0, &inh)?;
        let diff = sys.diff_norm(&next, &guess);
        if !diff.is_finite() {
            return Err(Error::Diverged { stage, alpha: alpha0, ratio: f64::INFINITY });
        }
        if let Some(p) = prev_diff {
            // ratios of roundoff-level differences carry no information
            if p > 1e-12 * scale {
                let r = diff / p;
                ratio = ratio.max(r);
                if r >= 1.0 {
                    above_one += 1;
                } else {
                    above_one = 0;
                }
                if adaptive && it >= 3 && r > 0.9 {
                    let trace = StageTrace { alpha_from: alpha0, step: eps, iterations: it, ratio, accepted: false };
                    return Ok(StageOutcome::Rejected(trace));
                }
                if !adaptive && above_one >= 3 {
                    return Err(Error::Diverged { stage, alpha: alpha0, ratio: r });
                }
            }
        }
        guess = next;
        if diff <= opts.tol {
            let trace = StageTrace { alpha_from: alpha0, step: eps, iterations: it, ratio, accepted: true };
            return Ok(StageOutcome::Converged(guess, trace));
        }
        prev_diff = Some(diff);
    }
    Err(Error::NotConverged { stage, alpha: alpha0, iterations: opts.max_iter, ratio })
}

/// Ru + B*Ŷ + D*Z + SX + ρ per level, and (ΣΔ E|res|²)^{1/2}.
pub fn stationarity_residual(
    sol: &FbsdeSolution,
    prob: &LQProblem,
    u: &AdaptedProcess,
) -> Result<(AdaptedProcess, f64)> {
    let tree = &prob.tree;
    let y_hat = sol.y_hat(tree)?;
    let mut entries = Vec::new();
    for j in prob.start..prob.n_steps() {
        let mut res = prob.r.at(j).apply(tree, u.at(j))?;
        res.axpy(1.0, &stationarity_rest(prob, j, sol.x.at(j), y_hat.at(j), sol.z.at(j))?)?;
        entries.push(res);
    }
    let res = AdaptedProcess::new(prob.start, entries)?;
    let norm = res.l2_sq(tree)?.sqrt();
    Ok((res, norm))
}

/// B*Ŷ + D*Z + SX + ρ at one level.
fn stationarity_rest(
    prob: &LQProblem,
    j: usize,
    x: &RandomVector,
    y_hat: &RandomVector,
    z: &RandomVector,
) -> Result<RandomVector> {
    let tree = &prob.tree;
    let mut v = prob.b.at(j).adjoint().apply(tree, y_hat)?;
    v.axpy(1.0, &prob.d.at(j).adjoint().apply(tree, z)?)?;
    v.axpy(1.0, &prob.s.at(j).apply(tree, x)?)?;
    v.axpy(1.0, prob.rho.at(j))?;
    Ok(v)
}

/// u_j = −R_j⁻¹(B*Ŷ_j + D*Z_j + SX_j + ρ_j).
pub fn optimal_control(sol: &FbsdeSolution, prob: &LQProblem) -> Result<AdaptedProcess> {
    let tree = &prob.tree;
    let y_hat = sol.y_hat(tree)?;
    let mut entries = Vec::new();
    for j in prob.start..prob.n_steps() {
        let rest = stationarity_rest(prob, j, sol.x.at(j), y_hat.at(j), sol.z.at(j))?;
        entries.push(prob.r.at(j).solve(tree, &rest)?.scaled(-1.0));
    }
    AdaptedProcess::new(prob.start, entries)
}

/// Both sides of the discrete monotonicity identity for a solution of the α-coupled FBSDE:
/// ΣΔ⟨R⁻¹w,w⟩ + α[E⟨GX_N,X_N⟩ + ΣΔ⟨Q̂X,X⟩] = E⟨ξ,Y_t⟩ − E⟨η,X_N⟩ + ΣΔ[⟨φ,Ŷ⟩ + ⟨ψ,Z⟩ − ⟨γ,X⟩],
/// with w = B*Ŷ + D*Z.
pub fn monotonicity_identity(data: &FbsdeData, sol: &FbsdeSolution) -> Result<(f64, f64)> {
    let tree = &data.tree;
    let dt = tree.delta();
    let nn = tree.n_steps();
    let t = data.start;
    let alpha = sol.alpha;
    let y_hat = sol.y_hat(tree)?;
    let e = |level: usize, a: &DVector<f64>, b: &DVector<f64>| tree.node_prob(level) * a.dot(b);
    let xn = sol.x.at(nn).as_dvector();
    let mut lhs = alpha * e(nn, &(&data.g * &xn), &xn);
    let mut rhs = e(t, &data.xi.as_dvector(), &sol.y.at(t).as_dvector()) - e(nn, &data.eta.as_dvector(), &xn);
    for j in t..nn {
        let lb = data.block(j);
        let x = sol.x.at(j).as_dvector();
        let yh = y_hat.at(j).as_dvector();
        let z = sol.z.at(j).as_dvector();
        let w = &lb.b_adj * &yh + &lb.d_adj * &z;
        lhs += dt * (e(j, &(&lb.r_inv * &w), &w) + alpha * e(j, &(&lb.q_hat * &x), &x));
        rhs += dt
            * (e(j, &data.phi.at(j).as_dvector(), &yh) + e(j, &data.psi.at(j).as_dvector(), &z)
                - e(j, &data.gamma.at(j).as_dvector(), &x));
    }
    Ok((lhs, rhs))
}
