//! Discrete state equation, BSDE and cost on a scenario tree.
//!
//! The backward scheme evaluates its driver at Ŷ_j = E[Y_{j+1}|F_j], which makes
//! summation by parts against the explicit forward scheme exact.

use crate::error::{Error, Result};
use crate::operators::{MeanFieldOperator, OperatorProcess};
use crate::tree::{AdaptedProcess, RandomVector, ScenarioTree};

#[derive(Debug, Clone, PartialEq)]
pub struct LQProblem {
    pub tree: ScenarioTree,
    pub start: usize,
    pub n: usize,
    pub m: usize,
    pub a: OperatorProcess,
    pub b: OperatorProcess,
    pub c: OperatorProcess,
    pub d: OperatorProcess,
    /// inhomogeneous drift b
    pub drift: AdaptedProcess,
    /// inhomogeneous diffusion σ
    pub diffusion: AdaptedProcess,
    pub g: MeanFieldOperator,
    pub g_lin: RandomVector,
    pub q: OperatorProcess,
    pub s: OperatorProcess,
    pub r: OperatorProcess,
    pub q_lin: AdaptedProcess,
    pub rho: AdaptedProcess,
}

impl LQProblem {
    pub fn n_steps(&self) -> usize {
        self.tree.n_steps()
    }

    /// Checks spans, dims and self-adjointness of G, Q, R.
    pub fn validate(&self) -> Result<()> {
        let nn = self.tree.n_steps();
        let t = self.start;
        if t >= nn {
            return Err(Error::LevelMismatch { expected: nn - 1, got: t });
        }
        let (n, m) = (self.n, self.m);
        let ops: [(&str, &OperatorProcess, usize, usize); 7] = [
            ("A", &self.a, n, n),
            ("B", &self.b, n, m),
            ("C", &self.c, n, n),
            ("D", &self.d, n, m),
            ("Q", &self.q, n, n),
            ("S", &self.s, m, n),
            ("R", &self.r, m, m),
        ];
        for (name, op, out, inp) in ops {
            if op.start != t || op.end() != nn - 1 {
                return Err(Error::DimMismatch(format!("{name} must span levels {t}..={}", nn - 1)));
            }
            if op.dims() != (out, inp) {
                return Err(Error::DimMismatch(format!(
                    "{name} is {:?}, expected {out}x{inp}",
                    op.dims()
                )));
            }
        }
        for (name, p, dim) in [
            ("b", &self.drift, n),
            ("sigma", &self.diffusion, n),
            ("q", &self.q_lin, n),
            ("rho", &self.rho, m),
        ] {
            if p.start != t || p.end() != nn - 1 || p.dim() != dim {
                return Err(Error::DimMismatch(format!("{name} must span levels {t}..={} with dim {dim}", nn - 1)));
            }
        }
        if self.g.level != nn || self.g.dim_in != n || self.g.dim_out != n {
            return Err(Error::DimMismatch("G must be n x n at the terminal level".into()));
        }
        if self.g_lin.level != nn || self.g_lin.dim != n {
            return Err(Error::DimMismatch("g must be an R^n random vector at the terminal level".into()));
        }
        if !self.g.is_self_adjoint(&self.tree)? {
            return Err(Error::NotSelfAdjoint("G".into()));
        }
        for j in t..nn {
            if !self.q.at(j).is_self_adjoint(&self.tree)? {
                return Err(Error::NotSelfAdjoint(format!("Q at level {j}")));
            }
            if !self.r.at(j).is_self_adjoint(&self.tree)? {
                return Err(Error::NotSelfAdjoint(format!("R at level {j}")));
            }
        }
        Ok(())
    }

    pub fn zero_control(&self) -> AdaptedProcess {
        AdaptedProcess::zeros(&self.tree, self.start, self.n_steps() - 1, self.m)
    }

    pub fn zero_state(&self) -> RandomVector {
        RandomVector::zeros(&self.tree, self.start, self.n)
    }

    /// Same coefficients with b, σ, g, q, ρ set to zero.
    pub fn homogeneous(&self) -> Self {
        let nn = self.n_steps();
        let tree = &self.tree;
        LQProblem {
            drift: AdaptedProcess::zeros(tree, self.start, nn - 1, self.n),
            diffusion: AdaptedProcess::zeros(tree, self.start, nn - 1, self.n),
            g_lin: RandomVector::zeros(tree, nn, self.n),
            q_lin: AdaptedProcess::zeros(tree, self.start, nn - 1, self.n),
            rho: AdaptedProcess::zeros(tree, self.start, nn - 1, self.m),
            ..self.clone()
        }
    }

    /// Matrix-free problem of the given shape: every coefficient zero, R = I.
    pub fn zeros(tree: &ScenarioTree, start: usize, n: usize, m: usize) -> Self {
        use nalgebra::DMatrix;
        let nn = tree.n_steps();
        let zero = |out: usize, inp: usize| {
            OperatorProcess::from_fn(start, nn - 1, |j| MeanFieldOperator::zero(tree, j, out, inp))
        };
        LQProblem {
            tree: tree.clone(),
            start,
            n,
            m,
            a: zero(n, n),
            b: zero(n, m),
            c: zero(n, n),
            d: zero(n, m),
            drift: AdaptedProcess::zeros(tree, start, nn - 1, n),
            diffusion: AdaptedProcess::zeros(tree, start, nn - 1, n),
            g: MeanFieldOperator::zero(tree, nn, n, n),
            g_lin: RandomVector::zeros(tree, nn, n),
            q: zero(n, n),
            s: zero(m, n),
            r: OperatorProcess::from_fn(start, nn - 1, |j| {
                MeanFieldOperator::constant(tree, j, &DMatrix::identity(m, m))
            }),
            q_lin: AdaptedProcess::zeros(tree, start, nn - 1, n),
            rho: AdaptedProcess::zeros(tree, start, nn - 1, m),
        }
    }
}

fn check_control(prob: &LQProblem, u: &AdaptedProcess) -> Result<()> {
    if u.start != prob.start || u.end() + 1 != prob.n_steps() || u.dim() != prob.m {
        return Err(Error::DimMismatch(format!(
            "control must span {}..={} with dim {}",
            prob.start,
            prob.n_steps() - 1,
            prob.m
        )));
    }
    Ok(())
}

/// X_{j+1} = X_j + Δ(AX + Bu + b) + ΔW (CX + Du + σ), child-wise.
pub fn forward_sde(prob: &LQProblem, x: &RandomVector, u: &AdaptedProcess) -> Result<AdaptedProcess> {
    forward_with(prob, x, u, true)
}

/// Forward recursion; `inhomogeneous = false` drops b and σ.
pub fn forward_with(
    prob: &LQProblem,
    x: &RandomVector,
    u: &AdaptedProcess,
    inhomogeneous: bool,
) -> Result<AdaptedProcess> {
    let tree = &prob.tree;
    if x.level != prob.start || x.dim != prob.n {
        return Err(Error::DimMismatch(format!(
            "initial state must be dim {} at level {}",
            prob.n, prob.start
        )));
    }
    check_control(prob, u)?;
    let dt = tree.delta();
    let mut entries = vec![x.clone()];
    for j in prob.start..prob.n_steps() {
        let xj = entries.last().unwrap();
        let uj = u.at(j);
        let mut drift = prob.a.at(j).apply(tree, xj)?;
        drift.axpy(1.0, &prob.b.at(j).apply(tree, uj)?)?;
        let mut diff = prob.c.at(j).apply(tree, xj)?;
        diff.axpy(1.0, &prob.d.at(j).apply(tree, uj)?)?;
        if inhomogeneous {
            drift.axpy(1.0, prob.drift.at(j))?;
            diff.axpy(1.0, prob.diffusion.at(j))?;
        }
        let mut next = xj.clone();
        next.axpy(dt, &drift)?;
        let next = tree.lift(&next)?;
        let dw = tree.increment_vector(j + 1)?;
        let noise = tree.lift(&diff)?.scale_by(&dw)?;
        entries.push(next.add(&noise)?);
    }
    AdaptedProcess::new(prob.start, entries)
}

/// Y_N = ξ; Z_j = E[Y_{j+1}ΔW|F_j]/Δ; Y_j = Ŷ_j + Δ(A*Ŷ_j + C*Z_j + φ_j).
pub fn backward_sde(
    tree: &ScenarioTree,
    a: &OperatorProcess,
    c: &OperatorProcess,
    driver: &AdaptedProcess,
    terminal: &RandomVector,
    start: usize,
) -> Result<(AdaptedProcess, AdaptedProcess)> {
    let nn = tree.n_steps();
    if terminal.level != nn {
        return Err(Error::LevelMismatch { expected: nn, got: terminal.level });
    }
    let dt = tree.delta();
    let mut ys = vec![terminal.clone()];
    let mut zs = Vec::new();
    for j in (start..nn).rev() {
        let y_next = ys.last().unwrap();
        let y_hat = tree.cond_expectation(y_next)?;
        let z = tree.martingale_coefficient(y_next)?;
        let mut drv = a.at(j).adjoint().apply(tree, &y_hat)?;
        drv.axpy(1.0, &c.at(j).adjoint().apply(tree, &z)?)?;
        drv.axpy(1.0, driver.at(j))?;
        let mut y = y_hat;
        y.axpy(dt, &drv)?;
        ys.push(y);
        zs.push(z);
    }
    ys.reverse();
    zs.reverse();
    Ok((AdaptedProcess::new(start, ys)?, AdaptedProcess::new(start, zs)?))
}

/// Discrete cost; `homogeneous` drops the g, q, ρ terms.
pub fn cost(prob: &LQProblem, x: &AdaptedProcess, u: &AdaptedProcess, homogeneous: bool) -> Result<f64> {
    let tree = &prob.tree;
    let nn = prob.n_steps();
    check_control(prob, u)?;
    if x.start != prob.start || x.end() != nn {
        return Err(Error::DimMismatch(format!("state must span {}..={nn}", prob.start)));
    }
    let xn = x.at(nn);
    let mut j_val = tree.inner(&prob.g.apply(tree, xn)?, xn)?;
    if !homogeneous {
        j_val += 2.0 * tree.inner(&prob.g_lin, xn)?;
    }
    let dt = tree.delta();
    for j in prob.start..nn {
        let (xj, uj) = (x.at(j), u.at(j));
        let mut run = tree.inner(&prob.q.at(j).apply(tree, xj)?, xj)?
            + 2.0 * tree.inner(&prob.s.at(j).apply(tree, xj)?, uj)?
            + tree.inner(&prob.r.at(j).apply(tree, uj)?, uj)?;
        if !homogeneous {
            run += 2.0 * tree.inner(prob.q_lin.at(j), xj)? + 2.0 * tree.inner(prob.rho.at(j), uj)?;
        }
        j_val += dt * run;
    }
    Ok(j_val)
}

/// J(t, x; u): forward simulation followed by the cost.
pub fn total_cost(prob: &LQProblem, x: &RandomVector, u: &AdaptedProcess) -> Result<f64> {
    let xs = forward_sde(prob, x, u)?;
    cost(prob, &xs, u, false)
}

/// J⁰(t; u) with zero initial state and no inhomogeneities.
pub fn homogeneous_cost(prob: &LQProblem, u: &AdaptedProcess) -> Result<f64> {
    let xs = forward_with(prob, &prob.zero_state(), u, false)?;
    cost(prob, &xs, u, true)
}

/// State and adjoint pair for a given control: driver QX + S*u + q, terminal GX_N + g.
pub fn adjoint_for_control(
    prob: &LQProblem,
    x: &RandomVector,
    u: &AdaptedProcess,
) -> Result<(AdaptedProcess, AdaptedProcess, AdaptedProcess)> {
    let tree = &prob.tree;
    let nn = prob.n_steps();
    let xs = forward_sde(prob, x, u)?;
    let mut driver = Vec::new();
    for j in prob.start..nn {
        let mut phi = prob.q.at(j).apply(tree, xs.at(j))?;
        phi.axpy(1.0, &prob.s.at(j).adjoint().apply(tree, u.at(j))?)?;
        phi.axpy(1.0, prob.q_lin.at(j))?;
        driver.push(phi);
    }
    let driver = AdaptedProcess::new(prob.start, driver)?;
    let terminal = prob.g.apply(tree, xs.at(nn))?.add(&prob.g_lin)?;
    let (y, z) = backward_sde(tree, &prob.a, &prob.c, &driver, &terminal, prob.start)?;
    Ok((xs, y, z))
}
