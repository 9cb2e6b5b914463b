//! The cost as an explicit quadratic form on the stacked adapted-control space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::dynamics::{cost, forward_sde, forward_with, LQProblem};
use crate::error::{Error, Result};
use crate::tree::{AdaptedProcess, RandomVector, ScenarioTree};

/// J(u) = ⟨Φ₂u, u⟩ + 2⟨u, φ₁⟩ + φ₀ in the pairing ⟨a, b⟩ = Σ Δ p(ω) a·b.
///
/// Stored in plain coordinates as J(u) = uᵀHu + 2uᵀh + c, so that
/// Φ₂ = gram⁻¹H and φ₁ = gram⁻¹h.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub tree: ScenarioTree,
    pub start: usize,
    pub m: usize,
    pub gram: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub phi0: f64,
}

impl QuadraticForm {
    pub fn dim(&self) -> usize {
        self.gram.len()
    }

    pub fn phi2(&self) -> DMatrix<f64> {
        let mut p = self.hessian.clone();
        for i in 0..p.nrows() {
            let g = self.gram[i];
            p.row_mut(i).iter_mut().for_each(|x| *x /= g);
        }
        p
    }

    pub fn phi1(&self) -> DVector<f64> {
        self.linear.component_div(&self.gram)
    }

    pub fn to_process(&self, v: &DVector<f64>) -> Result<AdaptedProcess> {
        AdaptedProcess::from_dvector(&self.tree, self.start, self.tree.n_steps() - 1, self.m, v)
    }

    pub fn evaluate_vec(&self, u: &DVector<f64>) -> f64 {
        (&self.hessian * u).dot(u) + 2.0 * u.dot(&self.linear) + self.phi0
    }

    pub fn evaluate(&self, u: &AdaptedProcess) -> f64 {
        self.evaluate_vec(&u.to_dvector())
    }

    /// G^{-1/2} H G^{-1/2}, whose spectrum is that of Φ₂ in the weighted pairing.
    fn scaled_hessian(&self) -> DMatrix<f64> {
        let s = self.gram.map(|g| 1.0 / g.sqrt());
        let mut h = self.hessian.clone();
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                h[(i, j)] *= s[i] * s[j];
            }
        }
        (&h + h.transpose()) * 0.5
    }
}

/// Φ₂ by basis probing of the forward equation; φ₁, φ₀ from the uncontrolled state.
pub fn assemble_quadform(prob: &LQProblem, x: &RandomVector) -> Result<QuadraticForm> {
    prob.validate()?;
    let tree = &prob.tree;
    let nn = prob.n_steps();
    let (t, n, m) = (prob.start, prob.n, prob.m);
    let dt = tree.delta();
    let u0 = prob.zero_control();
    let dim = u0.to_dvector().len();
    tree.check_budget(dim.saturating_mul(dim))?;

    // control offsets per level
    let mut u_off = vec![0; nn + 1];
    let mut off = 0;
    for (j, slot) in u_off.iter_mut().enumerate().take(nn).skip(t) {
        *slot = off;
        off += tree.level_size(j) * m;
    }

    // responses F_j (state at level j to each basis control)
    let mut f: Vec<DMatrix<f64>> = (t..=nn).map(|j| DMatrix::zeros(tree.level_size(j) * n, dim)).collect();
    let zero_x = prob.zero_state();
    let mut basis = DVector::zeros(dim);
    for i in 0..dim {
        basis[i] = 1.0;
        let u = AdaptedProcess::from_dvector(tree, t, nn - 1, m, &basis)?;
        let xs = forward_with(prob, &zero_x, &u, false)?;
        for j in t..=nn {
            f[j - t].set_column(i, &xs.at(j).as_dvector());
        }
        basis[i] = 0.0;
    }

    let x0 = forward_sde(prob, x, &u0)?;
    let phi0 = cost(prob, &x0, &u0, false)?;

    let mut h = DMatrix::zeros(dim, dim);
    let mut lin = DVector::zeros(dim);
    let fnn = &f[nn - t];
    let pn = tree.node_prob(nn);
    let gm = prob.g.assemble(tree)?;
    h += fnn.transpose() * (&gm * fnn) * pn;
    let gx = gm * x0.at(nn).as_dvector() + prob.g_lin.as_dvector();
    lin += fnn.transpose() * gx * pn;
    for j in t..nn {
        let p = tree.node_prob(j) * dt;
        let fj = &f[j - t];
        let nu = tree.level_size(j) * m;
        let q = prob.q.at(j).assemble(tree)?;
        let s = prob.s.at(j).assemble(tree)?;
        let r = prob.r.at(j).assemble(tree)?;
        // S F_j as rows of the control block
        let sf = &s * fj;
        h += fj.transpose() * (&q * fj) * p;
        {
            let mut rows = h.rows_mut(u_off[j], nu);
            rows += &sf * p;
        }
        {
            let mut cols = h.columns_mut(u_off[j], nu);
            cols += sf.transpose() * p;
        }
        {
            let mut blk = h.view_mut((u_off[j], u_off[j]), (nu, nu));
            blk += r * p;
        }
        let xj = x0.at(j).as_dvector();
        lin += fj.transpose() * (&q * &xj + prob.q_lin.at(j).as_dvector()) * p;
        let sx = s * &xj + prob.rho.at(j).as_dvector();
        let mut seg = lin.rows_mut(u_off[j], nu);
        seg += sx * p;
    }
    let h = (&h + h.transpose()) * 0.5;
    let gram = control_gram(tree, t, m);
    Ok(QuadraticForm { tree: tree.clone(), start: t, m, gram, hessian: h, linear: lin, phi0 })
}

/// Δ·p(ω) for every stacked control coordinate.
pub fn control_gram(tree: &ScenarioTree, start: usize, m: usize) -> DVector<f64> {
    let mut g = Vec::new();
    for j in start..tree.n_steps() {
        let w = tree.delta() * tree.node_prob(j);
        g.extend(std::iter::repeat_n(w, tree.level_size(j) * m));
    }
    DVector::from_vec(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub norm: f64,
    pub convex: bool,
}

/// Extreme generalized eigenvalues of Φ₂ against the Gram matrix.
pub fn convexity_spectrum(qf: &QuadraticForm) -> ConvexityReport {
    let ev = SymmetricEigen::new(qf.scaled_hessian()).eigenvalues;
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = min.abs().max(max.abs());
    ConvexityReport { min_eigenvalue: min, max_eigenvalue: max, norm, convex: min >= -1e-10 * (1.0 + norm) }
}

/// Minimizer −Φ₂⁺φ₁ and the optimal value.
pub fn solve_quadform(qf: &QuadraticForm) -> Result<(AdaptedProcess, f64)> {
    let (u, value) = solve_quadform_vec(qf)?;
    Ok((qf.to_process(&u)?, value))
}

pub fn solve_quadform_vec(qf: &QuadraticForm) -> Result<(DVector<f64>, f64)> {
    let hs = qf.scaled_hessian();
    let s = qf.gram.map(|g| 1.0 / g.sqrt());
    let hh = qf.linear.component_mul(&s);
    let eig = SymmetricEigen::new(hs.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let norm = eig.eigenvalues.amax();
    if min < -1e-10 * (1.0 + norm) {
        return Err(Error::Indefinite { min_eig: min });
    }
    let cutoff = 1e-12 * norm.max(1e-300);
    let coeffs = eig.eigenvectors.transpose() * &hh;
    let mut v = DVector::zeros(hh.len());
    for (k, lam) in eig.eigenvalues.iter().enumerate() {
        if *lam > cutoff {
            v -= eig.eigenvectors.column(k) * (coeffs[k] / lam);
        }
    }
    let residual = (&hs * &v + &hh).norm();
    if residual > 1e-8 * hh.norm().max(f64::MIN_POSITIVE) && hh.norm() > 0.0 {
        return Err(Error::NotInRange { residual });
    }
    let u = v.component_mul(&s);
    let value = qf.phi0 + u.dot(&qf.linear);
    Ok((u, value))
}

/// Brute-force minimizer: the quadratic form is probed from the cost alone
/// (Hessian by polarization, linear part by central differences) and solved by LU.
/// Independent of the assembly above; cost grows like dim² cost evaluations.
pub fn probed_minimizer(prob: &LQProblem, x: &RandomVector) -> Result<AdaptedProcess> {
    let tree = &prob.tree;
    let (t, end, m) = (prob.start, prob.n_steps() - 1, prob.m);
    let dim: usize = (t..=end).map(|j| tree.level_size(j)).sum::<usize>() * m;
    let j_of = |v: &DVector<f64>| -> Result<f64> {
        crate::dynamics::total_cost(prob, x, &AdaptedProcess::from_dvector(tree, t, end, m, v)?)
    };
    let unit = |pairs: &[(usize, f64)]| {
        let mut v = DVector::zeros(dim);
        for (i, s) in pairs {
            v[*i] += s;
        }
        v
    };
    let j0 = j_of(&DVector::zeros(dim))?;
    let mut plus = vec![0.0; dim];
    let mut minus = vec![0.0; dim];
    for i in 0..dim {
        plus[i] = j_of(&unit(&[(i, 1.0)]))?;
        minus[i] = j_of(&unit(&[(i, -1.0)]))?;
    }
    let mut h = DMatrix::zeros(dim, dim);
    let mut lin = DVector::zeros(dim);
    for i in 0..dim {
        h[(i, i)] = (plus[i] + minus[i] - 2.0 * j0) / 2.0;
        lin[i] = (plus[i] - minus[i]) / 4.0;
        for k in 0..i {
            let hik = (j_of(&unit(&[(i, 1.0), (k, 1.0)]))? - j_of(&unit(&[(i, 1.0), (k, -1.0)]))?
                - j_of(&unit(&[(i, -1.0), (k, 1.0)]))?
                + j_of(&unit(&[(i, -1.0), (k, -1.0)]))?)
                / 8.0;
            h[(i, k)] = hik;
            h[(k, i)] = hik;
        }
    }
    let u = crate::operators::solve_dense(&h, &(-lin), "probed quadratic form")?;
    AdaptedProcess::from_dvector(tree, t, end, m, &u)
}
