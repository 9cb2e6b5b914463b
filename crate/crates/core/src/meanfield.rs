//! Mean-field LQ problems given by matrix families, their assumption checks,
//! the explicit optimality system, and the per-level Fredholm equation for the control.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::dynamics::LQProblem;
use crate::error::{Error, Result};
use crate::fbsde::FbsdeSolution;
use crate::operators::{
    check_positivity, psd_tolerance, solve_dense, solve_dense_matrix, MeanFieldOperator, MeanFieldTerm,
    NodeMatrices, OperatorProcess, PositivityReport,
};
use crate::tree::{AdaptedProcess, RandomVector, ScenarioTree};

/// L ξ + Σ_k L̄_k E[L̃_k ξ] at one level (state coefficients A, B, C, D).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFamily {
    pub base: NodeMatrices,
    pub bar: Vec<NodeMatrices>,
    pub tilde: Vec<NodeMatrices>,
}

/// Self-adjoint cost coefficient: base G, Ḡ_k, G̃_k (p_k × n) and blocks Ĝ_ij (p_i × p_j).
#[derive(Debug, Clone, PartialEq)]
pub struct SymFamily {
    pub base: NodeMatrices,
    pub bar: Vec<NodeMatrices>,
    pub tilde: Vec<NodeMatrices>,
    pub hat: Vec<Vec<NodeMatrices>>,
}

/// Cross coefficient S: base m × n, S̄_k (p^Q_k × m), S̃_k (p^R_k × n), Ŝ_ij (p^R_i × p^Q_j).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFamily {
    pub base: NodeMatrices,
    pub bar: Vec<NodeMatrices>,
    pub tilde: Vec<NodeMatrices>,
    pub hat: Vec<Vec<NodeMatrices>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MFFamilies {
    pub tree: ScenarioTree,
    pub start: usize,
    pub n: usize,
    pub m: usize,
    /// per level start..N−1
    pub a: Vec<LevelFamily>,
    pub b: Vec<LevelFamily>,
    pub c: Vec<LevelFamily>,
    pub d: Vec<LevelFamily>,
    pub g: SymFamily,
    pub g0: RandomVector,
    pub gbar: Vec<RandomVector>,
    pub q: Vec<SymFamily>,
    pub s: Vec<CrossFamily>,
    pub r: Vec<SymFamily>,
    pub q0: Vec<RandomVector>,
    pub qbar: Vec<Vec<RandomVector>>,
    pub rho0: Vec<RandomVector>,
    pub rhobar: Vec<Vec<RandomVector>>,
}

fn dims_of(ms: &[NodeMatrices]) -> Vec<usize> {
    ms.iter().map(|m| m.rows).collect()
}

fn stack_rows(parts: &[&DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut off = 0;
    for p in parts {
        out.view_mut((off, 0), (p.nrows(), cols)).copy_from(p);
        off += p.nrows();
    }
    out
}

/// Σ_i Σ_j blocks into one matrix with the given row and column partitions.
fn block_matrix(hat: &[Vec<NodeMatrices>], rows: &[usize], cols: &[usize], node: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.iter().sum(), cols.iter().sum());
    let mut ro = 0;
    for (i, r) in rows.iter().enumerate() {
        let mut co = 0;
        for (j, c) in cols.iter().enumerate() {
            out.view_mut((ro, co), (*r, *c)).copy_from(&hat[i][j].mats[node]);
            co += c;
        }
        ro += r;
    }
    out
}

fn expect_blocks(tree: &ScenarioTree, hat: &[Vec<NodeMatrices>], rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    let level = hat.first().and_then(|r| r.first()).map(|m| m.level);
    let Some(level) = level else {
        return DMatrix::zeros(rows.iter().sum(), cols.iter().sum());
    };
    let p = tree.node_prob(level);
    let mut out = DMatrix::zeros(rows.iter().sum(), cols.iter().sum());
    for node in 0..tree.level_size(level) {
        out += block_matrix(hat, rows, cols, node) * p;
    }
    out
}

/// Node-wise vertical stack of the listed families.
fn stack_family(ms: &[NodeMatrices], level: usize, cols: usize, nodes: usize) -> NodeMatrices {
    let mats = (0..nodes)
        .map(|k| {
            let parts: Vec<&DMatrix<f64>> = ms.iter().map(|m| &m.mats[k]).collect();
            stack_rows(&parts, cols)
        })
        .collect();
    NodeMatrices { level, rows: ms.iter().map(|m| m.rows).sum(), cols, mats }
}

impl LevelFamily {
    pub fn pointwise(base: NodeMatrices) -> Self {
        LevelFamily { base, bar: Vec::new(), tilde: Vec::new() }
    }

    fn operator(&self) -> Result<MeanFieldOperator> {
        let terms = self
            .bar
            .iter()
            .zip(&self.tilde)
            .map(|(b, t)| MeanFieldTerm { bar: b.clone(), tilde: t.clone() })
            .collect();
        MeanFieldOperator::new(self.base.clone(), terms)
    }
}

impl SymFamily {
    pub fn pointwise(base: NodeMatrices) -> Self {
        SymFamily { base, bar: Vec::new(), tilde: Vec::new(), hat: Vec::new() }
    }

    pub fn rank_dims(&self) -> Vec<usize> {
        dims_of(&self.tilde)
    }

    fn check(&self, name: &str, tree: &ScenarioTree) -> Result<()> {
        let n = self.base.rows;
        if self.base.cols != n || self.bar.len() != self.tilde.len() {
            return Err(Error::DimMismatch(format!("{name}: inconsistent family")));
        }
        for (b, t) in self.bar.iter().zip(&self.tilde) {
            if b.rows != t.rows || b.cols != n || t.cols != n {
                return Err(Error::DimMismatch(format!("{name}: bar/tilde shapes")));
            }
        }
        let dims = self.rank_dims();
        if !self.hat.is_empty() || !dims.is_empty() {
            if self.hat.len() != dims.len() || self.hat.iter().any(|r| r.len() != dims.len()) {
                return Err(Error::DimMismatch(format!("{name}: hat blocks must be K x K")));
            }
            for i in 0..dims.len() {
                for j in 0..dims.len() {
                    if self.hat[i][j].rows != dims[i] || self.hat[i][j].cols != dims[j] {
                        return Err(Error::DimMismatch(format!("{name}: hat block ({i},{j}) shape")));
                    }
                }
            }
        }
        let sym = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b.transpose()).amax() <= 1e-12 * (1.0 + a.amax());
        for (k, m) in self.base.mats.iter().enumerate() {
            if !sym(m, m) {
                return Err(Error::Symmetry(format!("{name} not symmetric at node {k}")));
            }
        }
        for i in 0..dims.len() {
            for j in 0..dims.len() {
                for k in 0..tree.level_size(self.base.level) {
                    if !sym(&self.hat[i][j].mats[k], &self.hat[j][i].mats[k]) {
                        return Err(Error::Symmetry(format!("{name} hat ({i},{j}) is not the transpose of ({j},{i})")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Gξ + Σ(ḠᵀE[G̃ξ] + G̃ᵀE[Ḡξ]) + G̃ᵀE[Ĝ]E[G̃ξ].
    pub fn operator(&self, tree: &ScenarioTree) -> Result<MeanFieldOperator> {
        let level = self.base.level;
        let n = self.base.cols;
        let mut terms = Vec::new();
        for (b, t) in self.bar.iter().zip(&self.tilde) {
            terms.push(MeanFieldTerm { bar: b.transpose(), tilde: t.clone() });
            terms.push(MeanFieldTerm { bar: t.transpose(), tilde: b.clone() });
        }
        if !self.tilde.is_empty() {
            let dims = self.rank_dims();
            let eh = expect_blocks(tree, &self.hat, &dims, &dims);
            let stacked = stack_family(&self.tilde, level, n, tree.level_size(level));
            terms.push(MeanFieldTerm { bar: stacked.transpose().mul_fixed(&eh), tilde: stacked });
        }
        MeanFieldOperator::new(self.base.clone(), terms)
    }

    /// 𝐆(ω) = [[G, Ḡᵀ], [Ḡ, Ĝ]].
    pub fn stacked(&self, node: usize) -> DMatrix<f64> {
        let n = self.base.cols;
        let dims = self.rank_dims();
        let p: usize = dims.iter().sum();
        let mut out = DMatrix::zeros(n + p, n + p);
        out.view_mut((0, 0), (n, n)).copy_from(&self.base.mats[node]);
        let parts: Vec<&DMatrix<f64>> = self.bar.iter().map(|m| &m.mats[node]).collect();
        let gbar = stack_rows(&parts, n);
        out.view_mut((n, 0), (p, n)).copy_from(&gbar);
        out.view_mut((0, n), (n, p)).copy_from(&gbar.transpose());
        if p > 0 {
            out.view_mut((n, n), (p, p)).copy_from(&block_matrix(&self.hat, &dims, &dims, node));
        }
        out
    }

    /// Hand-expanded action, written out term by term.
    fn expand(&self, tree: &ScenarioTree, x: &RandomVector) -> Result<RandomVector> {
        let mut out = self.base.apply_pointwise(x)?;
        let cs: Vec<DVector<f64>> = self.tilde.iter().map(|t| t.expect_apply(tree, x)).collect::<Result<_>>()?;
        for (k, (b, t)) in self.bar.iter().zip(&self.tilde).enumerate() {
            out.axpy(1.0, &b.transpose().apply_fixed(&cs[k]))?;
            out.axpy(1.0, &t.transpose().apply_fixed(&b.expect_apply(tree, x)?))?;
        }
        for (i, ti) in self.tilde.iter().enumerate() {
            for (j, cj) in cs.iter().enumerate() {
                let e = self.hat[i][j].expectation(tree) * cj;
                out.axpy(1.0, &ti.transpose().apply_fixed(&e))?;
            }
        }
        Ok(out)
    }

    fn norm_sums(&self, tree: &ScenarioTree) -> (f64, f64, f64, f64) {
        let dims = self.rank_dims();
        let eh = expect_blocks(tree, &self.hat, &dims, &dims);
        (
            self.base.esssup_frobenius(),
            self.tilde.iter().map(|t| t.mean_sq_frobenius(tree)).sum(),
            self.bar.iter().map(|t| t.mean_sq_frobenius(tree)).sum(),
            eh.norm_squared(),
        )
    }

    /// esssup|G| + ΣE|G̃|² + ΣE|Ḡ|² + (Σ|EĜ_ij|²)^{1/2} ΣE|G̃|².
    pub fn norm_bound(&self, tree: &ScenarioTree) -> f64 {
        let (sup, tt, bb, hh) = self.norm_sums(tree);
        sup + tt + bb + hh.sqrt() * tt
    }
}

impl CrossFamily {
    pub fn pointwise(base: NodeMatrices) -> Self {
        CrossFamily { base, bar: Vec::new(), tilde: Vec::new(), hat: Vec::new() }
    }

    /// Sξ + Σ S̄ᵀE[Q̃ξ] + Σ R̃ᵀE[S̃ξ] + R̃ᵀE[Ŝ]E[Q̃ξ].
    fn operator(&self, tree: &ScenarioTree, q: &SymFamily, r: &SymFamily) -> Result<MeanFieldOperator> {
        let level = self.base.level;
        let (m, n) = (self.base.rows, self.base.cols);
        let nodes = tree.level_size(level);
        let mut terms = Vec::new();
        for (sb, qt) in self.bar.iter().zip(&q.tilde) {
            terms.push(MeanFieldTerm { bar: sb.transpose(), tilde: qt.clone() });
        }
        for (st, rt) in self.tilde.iter().zip(&r.tilde) {
            terms.push(MeanFieldTerm { bar: rt.transpose(), tilde: st.clone() });
        }
        if !q.tilde.is_empty() && !r.tilde.is_empty() && !self.hat.is_empty() {
            let eh = expect_blocks(tree, &self.hat, &r.rank_dims(), &q.rank_dims());
            let rt = stack_family(&r.tilde, level, m, nodes);
            let qt = stack_family(&q.tilde, level, n, nodes);
            terms.push(MeanFieldTerm { bar: rt.transpose().mul_fixed(&eh), tilde: qt });
        }
        MeanFieldOperator::new(self.base.clone(), terms)
    }

    fn check(&self, name: &str, q: &SymFamily, r: &SymFamily) -> Result<()> {
        let (m, n) = (self.base.rows, self.base.cols);
        if self.bar.len() != q.tilde.len() || self.tilde.len() != r.tilde.len() {
            return Err(Error::DimMismatch(format!(
                "{name}: S-bar pairs with Q-tilde and S-tilde with R-tilde (counts differ)"
            )));
        }
        for (sb, qt) in self.bar.iter().zip(&q.tilde) {
            if sb.rows != qt.rows || sb.cols != m {
                return Err(Error::DimMismatch(format!("{name}: S-bar shape")));
            }
        }
        for (st, rt) in self.tilde.iter().zip(&r.tilde) {
            if st.rows != rt.rows || st.cols != n {
                return Err(Error::DimMismatch(format!("{name}: S-tilde shape")));
            }
        }
        if !self.hat.is_empty() {
            let (rd, qd) = (r.rank_dims(), q.rank_dims());
            if self.hat.len() != rd.len() || self.hat.iter().any(|row| row.len() != qd.len()) {
                return Err(Error::DimMismatch(format!("{name}: S-hat must be K_R x K_Q")));
            }
            for (i, row) in self.hat.iter().enumerate() {
                for (j, h) in row.iter().enumerate() {
                    if h.rows != rd[i] || h.cols != qd[j] {
                        return Err(Error::DimMismatch(format!("{name}: S-hat block ({i},{j}) shape")));
                    }
                }
            }
        }
        Ok(())
    }

    /// 𝐒(ω) = [[S, S̄ᵀ], [S̃, Ŝ]].
    fn stacked(&self, node: usize, q: &SymFamily, r: &SymFamily) -> DMatrix<f64> {
        let (m, n) = (self.base.rows, self.base.cols);
        let (rd, qd) = (r.rank_dims(), q.rank_dims());
        let (pr, pq): (usize, usize) = (rd.iter().sum(), qd.iter().sum());
        let mut out = DMatrix::zeros(m + pr, n + pq);
        out.view_mut((0, 0), (m, n)).copy_from(&self.base.mats[node]);
        let sbar = stack_rows(&self.bar.iter().map(|x| &x.mats[node]).collect::<Vec<_>>(), m);
        out.view_mut((0, n), (m, pq)).copy_from(&sbar.transpose());
        let stil = stack_rows(&self.tilde.iter().map(|x| &x.mats[node]).collect::<Vec<_>>(), n);
        out.view_mut((m, 0), (pr, n)).copy_from(&stil);
        if !self.hat.is_empty() {
            out.view_mut((m, n), (pr, pq)).copy_from(&block_matrix(&self.hat, &rd, &qd, node));
        }
        out
    }

    fn expand(&self, tree: &ScenarioTree, q: &SymFamily, r: &SymFamily, x: &RandomVector) -> Result<RandomVector> {
        let mut out = self.base.apply_pointwise(x)?;
        let cq: Vec<DVector<f64>> = q.tilde.iter().map(|t| t.expect_apply(tree, x)).collect::<Result<_>>()?;
        for (sb, c) in self.bar.iter().zip(&cq) {
            out.axpy(1.0, &sb.transpose().apply_fixed(c))?;
        }
        for (st, rt) in self.tilde.iter().zip(&r.tilde) {
            out.axpy(1.0, &rt.transpose().apply_fixed(&st.expect_apply(tree, x)?))?;
        }
        for (i, row) in self.hat.iter().enumerate() {
            for (j, h) in row.iter().enumerate() {
                out.axpy(1.0, &r.tilde[i].transpose().apply_fixed(&(h.expectation(tree) * &cq[j])))?;
            }
        }
        Ok(out)
    }

    /// Sᵀu + Σ Q̃ᵀE[S̄u] + Σ S̃ᵀE[R̃u] + Σ Q̃_jᵀE[Ŝ_ij]ᵀE[R̃_i u].
    fn expand_adjoint(&self, tree: &ScenarioTree, q: &SymFamily, r: &SymFamily, u: &RandomVector) -> Result<RandomVector> {
        let mut out = self.base.transpose().apply_pointwise(u)?;
        for (sb, qt) in self.bar.iter().zip(&q.tilde) {
            out.axpy(1.0, &qt.transpose().apply_fixed(&sb.expect_apply(tree, u)?))?;
        }
        let cr: Vec<DVector<f64>> = r.tilde.iter().map(|t| t.expect_apply(tree, u)).collect::<Result<_>>()?;
        for (st, c) in self.tilde.iter().zip(&cr) {
            out.axpy(1.0, &st.transpose().apply_fixed(c))?;
        }
        for (i, row) in self.hat.iter().enumerate() {
            for (j, h) in row.iter().enumerate() {
                out.axpy(1.0, &q.tilde[j].transpose().apply_fixed(&(h.expectation(tree).transpose() * &cr[i])))?;
            }
        }
        Ok(out)
    }

    /// esssup|S| + ΣE|R̃|² + ΣE|S̃|² + ΣE|S̄|² + ΣE|Q̃|² + |EŜ| (ΣE|R̃|²)^{1/2} (ΣE|Q̃|²)^{1/2}.
    pub fn norm_bound(&self, tree: &ScenarioTree, q: &SymFamily, r: &SymFamily) -> f64 {
        let ms = |v: &[NodeMatrices]| v.iter().map(|t| t.mean_sq_frobenius(tree)).sum::<f64>();
        let (rt, qt) = (ms(&r.tilde), ms(&q.tilde));
        let eh = if self.hat.is_empty() {
            0.0
        } else {
            expect_blocks(tree, &self.hat, &r.rank_dims(), &q.rank_dims()).norm()
        };
        self.base.esssup_frobenius() + rt + ms(&self.tilde) + ms(&self.bar) + qt + eh * rt.sqrt() * qt.sqrt()
    }
}

/// Linear term l₀ + Σ_k L̃_kᵀ E[l̄_k].
fn linear_term(tree: &ScenarioTree, l0: &RandomVector, tilde: &[NodeMatrices], lbar: &[RandomVector]) -> Result<RandomVector> {
    if tilde.len() != lbar.len() {
        return Err(Error::DimMismatch("linear mean-field data must pair with the tilde family".into()));
    }
    let mut out = l0.clone();
    for (t, b) in tilde.iter().zip(lbar) {
        out.axpy(1.0, &t.transpose().apply_fixed(&tree.expectation(b)?))?;
    }
    Ok(out)
}

/// Built operators of a family set.
#[derive(Debug, Clone)]
pub struct BuiltOperators {
    pub a: OperatorProcess,
    pub b: OperatorProcess,
    pub c: OperatorProcess,
    pub d: OperatorProcess,
    pub g: MeanFieldOperator,
    pub q: OperatorProcess,
    pub s: OperatorProcess,
    pub r: OperatorProcess,
}

impl MFFamilies {
    fn levels(&self) -> std::ops::Range<usize> {
        self.start..self.tree.n_steps()
    }

    fn idx(&self, j: usize) -> usize {
        j - self.start
    }

    /// Family with all state coefficients zero, R = I and zero cost otherwise.
    pub fn zeros(tree: &ScenarioTree, start: usize, n: usize, m: usize) -> Self {
        let nn = tree.n_steps();
        let lf = |j: usize, r: usize, c: usize| LevelFamily::pointwise(NodeMatrices::zeros(tree, j, r, c));
        MFFamilies {
            tree: tree.clone(),
            start,
            n,
            m,
            a: (start..nn).map(|j| lf(j, n, n)).collect(),
            b: (start..nn).map(|j| lf(j, n, m)).collect(),
            c: (start..nn).map(|j| lf(j, n, n)).collect(),
            d: (start..nn).map(|j| lf(j, n, m)).collect(),
            g: SymFamily::pointwise(NodeMatrices::zeros(tree, nn, n, n)),
            g0: RandomVector::zeros(tree, nn, n),
            gbar: Vec::new(),
            q: (start..nn).map(|j| SymFamily::pointwise(NodeMatrices::zeros(tree, j, n, n))).collect(),
            s: (start..nn).map(|j| CrossFamily::pointwise(NodeMatrices::zeros(tree, j, m, n))).collect(),
            r: (start..nn)
                .map(|j| SymFamily::pointwise(NodeMatrices::constant(tree, j, &DMatrix::identity(m, m))))
                .collect(),
            q0: (start..nn).map(|j| RandomVector::zeros(tree, j, n)).collect(),
            qbar: (start..nn).map(|_| Vec::new()).collect(),
            rho0: (start..nn).map(|j| RandomVector::zeros(tree, j, m)).collect(),
            rhobar: (start..nn).map(|_| Vec::new()).collect(),
        }
    }

    /// Shapes and the symmetry conditions on G, Q, R and their hat blocks.
    pub fn check(&self) -> Result<()> {
        let nn = self.tree.n_steps();
        let count = nn - self.start;
        for (name, v) in [("A", &self.a), ("B", &self.b), ("C", &self.c), ("D", &self.d)] {
            if v.len() != count {
                return Err(Error::DimMismatch(format!("{name}: expected {count} levels")));
            }
        }
        if self.q.len() != count || self.s.len() != count || self.r.len() != count {
            return Err(Error::DimMismatch("Q, S, R: wrong number of levels".into()));
        }
        self.g.check("G", &self.tree)?;
        for j in self.levels() {
            let i = self.idx(j);
            self.q[i].check(&format!("Q at level {j}"), &self.tree)?;
            self.r[i].check(&format!("R at level {j}"), &self.tree)?;
            self.s[i].check(&format!("S at level {j}"), &self.q[i], &self.r[i])?;
        }
        Ok(())
    }

    pub fn operators(&self) -> Result<BuiltOperators> {
        self.check()?;
        let tree = &self.tree;
        let t = self.start;
        let proc_of = |fams: &Vec<LevelFamily>| -> Result<OperatorProcess> {
            OperatorProcess::new(t, fams.iter().map(|f| f.operator()).collect::<Result<_>>()?)
        };
        let q = OperatorProcess::new(t, self.q.iter().map(|f| f.operator(tree)).collect::<Result<_>>()?)?;
        let r = OperatorProcess::new(t, self.r.iter().map(|f| f.operator(tree)).collect::<Result<_>>()?)?;
        let s = OperatorProcess::new(
            t,
            self.levels()
                .map(|j| {
                    let i = self.idx(j);
                    self.s[i].operator(tree, &self.q[i], &self.r[i])
                })
                .collect::<Result<_>>()?,
        )?;
        Ok(BuiltOperators {
            a: proc_of(&self.a)?,
            b: proc_of(&self.b)?,
            c: proc_of(&self.c)?,
            d: proc_of(&self.d)?,
            g: self.g.operator(tree)?,
            q,
            s,
            r,
        })
    }

    pub fn g_lin(&self) -> Result<RandomVector> {
        linear_term(&self.tree, &self.g0, &self.g.tilde, &self.gbar)
    }

    pub fn q_lin(&self, j: usize) -> Result<RandomVector> {
        let i = self.idx(j);
        linear_term(&self.tree, &self.q0[i], &self.q[i].tilde, &self.qbar[i])
    }

    pub fn rho(&self, j: usize) -> Result<RandomVector> {
        let i = self.idx(j);
        linear_term(&self.tree, &self.rho0[i], &self.r[i].tilde, &self.rhobar[i])
    }

    /// Cost via the stacked matrices 𝐆, 𝐐, 𝐒, 𝐑 acting on (X, E[G̃X]) etc.
    pub fn stacked_cost(&self, x: &AdaptedProcess, u: &AdaptedProcess) -> Result<f64> {
        let tree = &self.tree;
        let nn = tree.n_steps();
        let xn = x.at(nn);
        let ext = |v: &RandomVector, tilde: &[NodeMatrices], node: usize| -> Result<DVector<f64>> {
            let mut parts = vec![v.node_vector(node)];
            for t in tilde {
                parts.push(t.expect_apply(tree, v)?);
            }
            Ok(concat(&parts))
        };
        let ext_lin = |l0: &RandomVector, lbar: &[RandomVector], node: usize| {
            let mut parts = vec![l0.node_vector(node)];
            parts.extend(lbar.iter().map(|b| b.node_vector(node)));
            concat(&parts)
        };
        let mut total = 0.0;
        let p = tree.node_prob(nn);
        for k in 0..tree.level_size(nn) {
            let xt = ext(xn, &self.g.tilde, k)?;
            let gl = ext_lin(&self.g0, &self.gbar, k);
            total += p * ((self.g.stacked(k) * &xt).dot(&xt) + 2.0 * gl.dot(&xt));
        }
        for j in self.levels() {
            let i = self.idx(j);
            let p = tree.node_prob(j) * tree.delta();
            let (q, s, r) = (&self.q[i], &self.s[i], &self.r[i]);
            for k in 0..tree.level_size(j) {
                let xx = ext(x.at(j), &q.tilde, k)?;
                let uu = ext(u.at(j), &r.tilde, k)?;
                let ql = ext_lin(&self.q0[i], &self.qbar[i], k);
                let rl = ext_lin(&self.rho0[i], &self.rhobar[i], k);
                total += p
                    * ((q.stacked(k) * &xx).dot(&xx)
                        + 2.0 * (s.stacked(k, q, r) * &xx).dot(&uu)
                        + (r.stacked(k) * &uu).dot(&uu)
                        + 2.0 * ql.dot(&xx)
                        + 2.0 * rl.dot(&uu));
            }
        }
        Ok(total)
    }
}

fn concat(parts: &[DVector<f64>]) -> DVector<f64> {
    let mut v = Vec::new();
    for p in parts {
        v.extend(p.iter());
    }
    DVector::from_vec(v)
}

/// LQ problem with the operators of `fam` and inhomogeneities b, σ.
pub fn build_problem(fam: &MFFamilies, drift: &AdaptedProcess, diffusion: &AdaptedProcess) -> Result<LQProblem> {
    let ops = fam.operators()?;
    let t = fam.start;
    let q_lin = AdaptedProcess::new(t, fam.levels().map(|j| fam.q_lin(j)).collect::<Result<_>>()?)?;
    let rho = AdaptedProcess::new(t, fam.levels().map(|j| fam.rho(j)).collect::<Result<_>>()?)?;
    let prob = LQProblem {
        tree: fam.tree.clone(),
        start: t,
        n: fam.n,
        m: fam.m,
        a: ops.a,
        b: ops.b,
        c: ops.c,
        d: ops.d,
        drift: drift.clone(),
        diffusion: diffusion.clone(),
        g: ops.g,
        g_lin: fam.g_lin()?,
        q: ops.q,
        s: ops.s,
        r: ops.r,
        q_lin,
        rho,
    };
    prob.validate()?;
    for (name, op) in std::iter::once(("G", &prob.g))
        .chain(prob.q.ops.iter().map(|o| ("Q", o)))
        .chain(prob.r.ops.iter().map(|o| ("R", o)))
    {
        if !op.is_self_adjoint_structural(1e-12) {
            return Err(Error::Internal(format!("{name} at level {} built without structural symmetry", op.level)));
        }
    }
    Ok(prob)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub name: String,
    pub level: Option<usize>,
    pub value: f64,
    /// bound or threshold the value is compared against
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub delta: f64,
    pub conditions: Vec<Condition>,
    pub positivity: Option<PositivityReport>,
    /// every node-wise matrix condition passed
    pub stacked_ok: bool,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.pass) && self.positivity.as_ref().is_some_and(|p| p.passed())
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .conditions
            .iter()
            .filter(|c| !c.pass)
            .map(|c| match c.level {
                Some(l) => format!("{} at level {l} (value {:.6e}, threshold {:.6e})", c.name, c.value, c.threshold),
                None => format!("{} (value {:.6e}, threshold {:.6e})", c.name, c.value, c.threshold),
            })
            .collect();
        match &self.positivity {
            Some(p) => out.extend(p.failures()),
            None => out.push("positivity check could not run".into()),
        }
        out
    }

    /// Only the node-wise stacked-matrix conditions.
    pub fn stacked_conditions(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| c.name.starts_with("stacked"))
    }
}

fn min_sym_eig(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let sym = (m + m.transpose()) * 0.5;
    let ev = SymmetricEigen::new(sym).eigenvalues;
    (ev.iter().copied().fold(f64::INFINITY, f64::min), ev.amax())
}

/// Finite-sum (H4)/(H5) magnitudes, appendix bounds against computed norms, the
/// stacked-matrix condition and the operator-level (H3) check.
pub fn verify_assumptions(fam: &MFFamilies, delta: f64) -> Result<AssumptionReport> {
    fam.check()?;
    let tree = &fam.tree;
    let nn = tree.n_steps();
    let dt = tree.delta();
    let ops = fam.operators()?;
    let mut conds = Vec::new();
    let mut push = |name: &str, level: Option<usize>, value: f64, threshold: f64, pass: bool| {
        conds.push(Condition { name: name.into(), level, value, threshold, pass })
    };

    // (H4): ∫ esssup|L|² and ∫ (ΣE|L̄|²)(ΣE|L̃|²) for each state coefficient
    for (name, fams, procs) in [
        ("A", &fam.a, &ops.a),
        ("B", &fam.b, &ops.b),
        ("C", &fam.c, &ops.c),
        ("D", &fam.d, &ops.d),
    ] {
        let mut sup_int = 0.0;
        let mut mf_int = 0.0;
        for (i, f) in fams.iter().enumerate() {
            let j = fam.start + i;
            let bars: f64 = f.bar.iter().map(|m| m.mean_sq_frobenius(tree)).sum();
            let tils: f64 = f.tilde.iter().map(|m| m.mean_sq_frobenius(tree)).sum();
            sup_int += dt * f.base.esssup_frobenius().powi(2);
            mf_int += dt * bars * tils;
            let bound = f.base.esssup_frobenius() + bars.sqrt() * tils.sqrt();
            let computed = procs.at(j).norm(tree)?;
            push(&format!("norm bound {name}"), Some(j), computed, bound, computed <= bound * (1.0 + 1e-10) + 1e-12);
        }
        push(&format!("(H4) integrated esssup|{name}|^2"), None, sup_int, f64::INFINITY, sup_int.is_finite());
        push(&format!("(H4) integrated mean-field sum {name}"), None, mf_int, f64::INFINITY, mf_int.is_finite());
    }

    // (H5) and appendix bounds for G, g
    let (gs, gt, gb, gh) = fam.g.norm_sums(tree);
    for (label, v) in [("esssup|G|", gs), ("sum E|G~|^2", gt), ("sum E|G-|^2", gb), ("sum |E G^|^2", gh)] {
        push(&format!("(H5) {label}"), Some(nn), v, f64::INFINITY, v.is_finite());
    }
    let g_norm = ops.g.norm(tree)?;
    let g_bound = fam.g.norm_bound(tree);
    push("appendix bound ||G||", Some(nn), g_norm, g_bound, g_norm <= g_bound * (1.0 + 1e-10) + 1e-12);
    let g_lin = fam.g_lin()?;
    let gbar_sq: f64 = fam.gbar.iter().map(|b| tree.inner(b, b)).sum::<Result<f64>>()?;
    let g_lin_bound = tree.norm(&fam.g0)? + gt + gbar_sq;
    let gl = tree.norm(&g_lin)?;
    push("appendix bound ||g||", Some(nn), gl, g_lin_bound, gl <= g_lin_bound * (1.0 + 1e-10) + 1e-12);

    // ‖∫|q|‖₂, computed pathwise over leaves
    let leaves = tree.level_size(nn);
    let mut path_q = vec![0.0; leaves];
    let mut path_q0 = vec![0.0; leaves];
    let mut q_extra = 0.0;
    for j in fam.levels() {
        let i = fam.idx(j);
        let qj = fam.q_lin(j)?;
        for (leaf, (pq, pq0)) in path_q.iter_mut().zip(path_q0.iter_mut()).enumerate() {
            let k = tree.ancestor(leaf, nn, j);
            *pq += dt * qj.node_vector(k).norm();
            *pq0 += dt * fam.q0[i].node_vector(k).norm();
        }
        let qt: f64 = fam.q[i].tilde.iter().map(|m| m.mean_sq_frobenius(tree)).sum();
        let qb: f64 = fam.qbar[i].iter().map(|b| tree.inner(b, b)).sum::<Result<f64>>()?;
        q_extra += dt * (qt + qb);
    }
    let l2 = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / leaves as f64).sqrt();
    let (qv, qbound) = (l2(&path_q), l2(&path_q0) + q_extra);
    push("appendix bound ||int |q| ||", None, qv, qbound, qv <= qbound * (1.0 + 1e-10) + 1e-12);

    let mut stacked_ok = true;
    for j in fam.levels() {
        let i = fam.idx(j);
        let (q, s, r) = (&fam.q[i], &fam.s[i], &fam.r[i]);
        let qn = ops.q.at(j).norm(tree)?;
        let qb = q.norm_bound(tree);
        push("appendix bound ||Q||", Some(j), qn, qb, qn <= qb * (1.0 + 1e-10) + 1e-12);
        let rn = ops.r.at(j).norm(tree)?;
        let rb = r.norm_bound(tree);
        push("appendix bound ||R||", Some(j), rn, rb, rn <= rb * (1.0 + 1e-10) + 1e-12);
        let sn = ops.s.at(j).norm(tree)?;
        let sb = s.norm_bound(tree, q, r);
        push("appendix bound ||S||", Some(j), sn, sb, sn <= sb * (1.0 + 1e-10) + 1e-12);
        let rho = fam.rho(j)?;
        let rt: f64 = r.tilde.iter().map(|m| m.mean_sq_frobenius(tree)).sum();
        let rbar: f64 = fam.rhobar[i].iter().map(|b| tree.inner(b, b)).sum::<Result<f64>>()?;
        let rv = tree.norm(&rho)?;
        let rvb = tree.norm(&fam.rho0[i])? + rt + rbar;
        push("appendix bound ||rho||", Some(j), rv, rvb, rv <= rvb * (1.0 + 1e-10) + 1e-12);
        for (label, f) in [("Q", q), ("R", r)] {
            let (a, b, c, d) = f.norm_sums(tree);
            let total = a + b + c + d;
            push(&format!("(H5) sums for {label}"), Some(j), total, f64::INFINITY, total.is_finite());
        }

        // node-wise conditions at every node of this level
        let m = fam.m;
        let (mut worst_qsr, mut worst_r) = (f64::INFINITY, f64::INFINITY);
        let mut ok_qsr = true;
        let mut ok_r = true;
        for k in 0..tree.level_size(j) {
            let qs = q.stacked(k);
            let rs = r.stacked(k);
            let ss = s.stacked(k, q, r);
            let (dq, dr) = (qs.nrows(), rs.nrows());
            let mut big = DMatrix::zeros(dq + dr, dq + dr);
            big.view_mut((0, 0), (dq, dq)).copy_from(&qs);
            big.view_mut((dq, dq), (dr, dr)).copy_from(&rs);
            big.view_mut((dq, 0), (dr, dq)).copy_from(&ss);
            big.view_mut((0, dq), (dq, dr)).copy_from(&ss.transpose());
            let (e1, n1) = min_sym_eig(&big);
            worst_qsr = worst_qsr.min(e1);
            ok_qsr &= e1 >= -psd_tolerance(n1);
            let mut shifted = rs.clone();
            for d in 0..m {
                shifted[(d, d)] -= delta;
            }
            let (e2, n2) = min_sym_eig(&shifted);
            worst_r = worst_r.min(e2);
            ok_r &= e2 >= -psd_tolerance(n2);
        }
        stacked_ok &= ok_qsr && ok_r;
        push("stacked (Q,S^T;S,R) >= 0", Some(j), worst_qsr, 0.0, ok_qsr);
        push("stacked R - delta diag(I,0) >= 0", Some(j), worst_r, 0.0, ok_r);
    }
    let mut worst_g = f64::INFINITY;
    let mut ok_g = true;
    for k in 0..tree.level_size(nn) {
        let (e, nrm) = min_sym_eig(&fam.g.stacked(k));
        worst_g = worst_g.min(e);
        ok_g &= e >= -psd_tolerance(nrm);
    }
    stacked_ok &= ok_g;
    push("stacked G >= 0", Some(nn), worst_g, 0.0, ok_g);

    let positivity = match check_positivity(tree, &ops.g, &ops.q, &ops.s, &ops.r, delta) {
        Ok(p) => Some(p),
        Err(Error::NotSelfAdjoint(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(AssumptionReport { delta, conditions: conds, positivity, stacked_ok })
}

/// Hand-expanded terms of the optimality system, for comparison with the generic adjoints.
struct Expansion<'a> {
    fam: &'a MFFamilies,
    /// negative control: use L̄E[L̃·] where the adjoint needs L̃ᵀE[L̄ᵀ·] in A and C
    swap: bool,
}

impl<'a> Expansion<'a> {
    /// Lᵀy + Σ L̃ᵀE[L̄ᵀy]
    fn adjoint(&self, f: &LevelFamily, y: &RandomVector, swappable: bool) -> Result<RandomVector> {
        let tree = &self.fam.tree;
        let mut out = f.base.transpose().apply_pointwise(y)?;
        for (b, t) in f.bar.iter().zip(&f.tilde) {
            if self.swap && swappable {
                out.axpy(1.0, &b.apply_fixed(&t.expect_apply(tree, y)?))?;
            } else {
                out.axpy(1.0, &t.transpose().apply_fixed(&b.transpose().expect_apply(tree, y)?))?;
            }
        }
        Ok(out)
    }

    fn backward_drift(&self, j: usize, x: &RandomVector, y_hat: &RandomVector, z: &RandomVector, u: &RandomVector) -> Result<RandomVector> {
        let fam = self.fam;
        let tree = &fam.tree;
        let i = fam.idx(j);
        let mut out = self.adjoint(&fam.a[i], y_hat, true)?;
        out.axpy(1.0, &self.adjoint(&fam.c[i], z, true)?)?;
        out.axpy(1.0, &fam.q[i].expand(tree, x)?)?;
        out.axpy(1.0, &fam.s[i].expand_adjoint(tree, &fam.q[i], &fam.r[i], u)?)?;
        out.axpy(1.0, &fam.q_lin(j)?)?;
        Ok(out)
    }

    /// B*Ŷ + D*Z + SX + ρ
    fn rest(&self, j: usize, x: &RandomVector, y_hat: &RandomVector, z: &RandomVector) -> Result<RandomVector> {
        let fam = self.fam;
        let i = fam.idx(j);
        let mut out = self.adjoint(&fam.b[i], y_hat, false)?;
        out.axpy(1.0, &self.adjoint(&fam.d[i], z, false)?)?;
        out.axpy(1.0, &fam.s[i].expand(&fam.tree, &fam.q[i], &fam.r[i], x)?)?;
        out.axpy(1.0, &fam.rho(j)?)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemResidual {
    /// max |hand-expanded − generic| over the backward drift, algebraic condition and terminal value
    pub discrepancy: f64,
    /// max |Y_j − Ŷ_j − Δ·drift_j| and |Y_N − (GX_N + g)| under the hand-expanded system
    pub backward: f64,
    /// max |Ru + B*Ŷ + D*Z + SX + ρ| under the hand-expanded system
    pub stationarity: f64,
}

/// Re-evaluates the optimality system from the families term by term.
pub fn system_residual(fam: &MFFamilies, prob: &LQProblem, sol: &FbsdeSolution, u: &AdaptedProcess) -> Result<SystemResidual> {
    system_residual_with(fam, prob, sol, u, false)
}

/// As [`system_residual`]; `swap_bar_tilde` deliberately corrupts the hand expansion.
pub fn system_residual_with(
    fam: &MFFamilies,
    prob: &LQProblem,
    sol: &FbsdeSolution,
    u: &AdaptedProcess,
    swap_bar_tilde: bool,
) -> Result<SystemResidual> {
    let tree = &prob.tree;
    let nn = tree.n_steps();
    let ex = Expansion { fam, swap: swap_bar_tilde };
    let y_hat = sol.y_hat(tree)?;
    let (mut disc, mut back, mut stat) = (0.0f64, 0.0f64, 0.0f64);
    for j in prob.start..nn {
        let i = fam.idx(j);
        let (x, yh, z, uj) = (sol.x.at(j), y_hat.at(j), sol.z.at(j), u.at(j));
        let hand = ex.backward_drift(j, x, yh, z, uj)?;
        let mut generic = prob.a.at(j).adjoint().apply(tree, yh)?;
        generic.axpy(1.0, &prob.c.at(j).adjoint().apply(tree, z)?)?;
        generic.axpy(1.0, &prob.q.at(j).apply(tree, x)?)?;
        generic.axpy(1.0, &prob.s.at(j).adjoint().apply(tree, uj)?)?;
        generic.axpy(1.0, prob.q_lin.at(j))?;
        disc = disc.max(hand.sub(&generic)?.max_abs());
        let mut yres = sol.y.at(j).sub(yh)?;
        yres.axpy(-tree.delta(), &hand)?;
        back = back.max(yres.max_abs());

        let mut hand_alg = fam.r[i].expand(tree, uj)?;
        hand_alg.axpy(1.0, &ex.rest(j, x, yh, z)?)?;
        let mut gen_alg = prob.r.at(j).apply(tree, uj)?;
        gen_alg.axpy(1.0, &prob.b.at(j).adjoint().apply(tree, yh)?)?;
        gen_alg.axpy(1.0, &prob.d.at(j).adjoint().apply(tree, z)?)?;
        gen_alg.axpy(1.0, &prob.s.at(j).apply(tree, x)?)?;
        gen_alg.axpy(1.0, prob.rho.at(j))?;
        disc = disc.max(hand_alg.sub(&gen_alg)?.max_abs());
        stat = stat.max(hand_alg.max_abs());
    }
    let xn = sol.x.at(nn);
    let hand_t = fam.g.expand(tree, xn)?.add(&fam.g_lin()?)?;
    let gen_t = prob.g.apply(tree, xn)?.add(&prob.g_lin)?;
    disc = disc.max(hand_t.sub(&gen_t)?.max_abs());
    back = back.max(sol.y.at(nn).sub(&hand_t)?.max_abs());
    Ok(SystemResidual { discrepancy: disc, backward: back, stationarity: stat })
}

/// Second-kind Fredholm equation u = θ̃ + ∫Γ(·,ω')u(ω')dP(ω') on one level.
#[derive(Debug, Clone, PartialEq)]
pub struct FredholmKernel {
    pub level: usize,
    pub dim: usize,
    /// probability of each node
    pub weights: Vec<f64>,
    /// blocks Γ(ω, ω'), node-major (nodes·dim square)
    pub gamma: DMatrix<f64>,
}

impl FredholmKernel {
    pub fn nodes(&self) -> usize {
        self.weights.len()
    }

    /// The integral operator as a matrix: blocks Γ(ω,ω')p(ω').
    pub fn operator(&self) -> DMatrix<f64> {
        let mut t = self.gamma.clone();
        for c in 0..t.ncols() {
            let w = self.weights[c / self.dim];
            t.column_mut(c).iter_mut().for_each(|x| *x *= w);
        }
        t
    }

    fn i_minus(&self) -> DMatrix<f64> {
        DMatrix::identity(self.gamma.nrows(), self.gamma.ncols()) - self.operator()
    }

    pub fn solve(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        solve_dense(&self.i_minus(), theta, "I - Gamma")
    }

    /// Φ = (I − Γ)⁻¹Γ in the weighted calculus.
    pub fn resolvent(&self) -> Result<DMatrix<f64>> {
        solve_dense_matrix(&self.i_minus(), &self.gamma, "I - Gamma")
    }

    /// max |Φ − Γ − ∫ΓΦ|.
    pub fn resolvent_residual(&self, phi: &DMatrix<f64>) -> f64 {
        (phi - &self.gamma - self.operator() * phi).amax()
    }

    /// θ̃ + ∫Φθ̃.
    pub fn apply_resolvent(&self, phi: &DMatrix<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let mut weighted = theta.clone();
        for (i, x) in weighted.iter_mut().enumerate() {
            *x *= self.weights[i / self.dim];
        }
        theta + phi * weighted
    }

    /// Σ_{p=1}^{terms} Γ^p in the weighted calculus.
    pub fn neumann(&self, terms: usize) -> DMatrix<f64> {
        let t = self.operator();
        let mut power = self.gamma.clone();
        let mut sum = power.clone();
        for _ in 1..terms {
            power = &t * power;
            sum += &power;
        }
        sum
    }

    pub fn spectral_radius(&self) -> f64 {
        self.operator().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// θ̃ and the kernel Γ at level j.
///
/// θ = −(B*Ŷ + D*Z + SX + ρ) from the families, θ̃ = R(ω)⁻¹θ and
/// Γ(ω,ω') = −R(ω)⁻¹[Σ_k (R̄_k(ω)ᵀR̃_k(ω') + R̃_k(ω)ᵀR̄_k(ω')) + Σ_ij R̃_i(ω)ᵀE[R̂_ij]R̃_j(ω')].
pub fn fredholm_parts(fam: &MFFamilies, sol: &FbsdeSolution, level: usize) -> Result<(RandomVector, FredholmKernel)> {
    let tree = &fam.tree;
    if level < fam.start || level >= tree.n_steps() {
        return Err(Error::LevelMismatch { expected: fam.start, got: level });
    }
    let i = fam.idx(level);
    let y_hat = sol.y_hat(tree)?;
    let ex = Expansion { fam, swap: false };
    let theta = ex.rest(level, sol.x.at(level), y_hat.at(level), sol.z.at(level))?.scaled(-1.0);
    let r = &fam.r[i];
    let m = fam.m;
    let nodes = tree.level_size(level);
    let mut r_inv = Vec::with_capacity(nodes);
    for (k, rk) in r.base.mats.iter().enumerate() {
        let inv = rk.clone().try_inverse().ok_or_else(|| Error::Singular {
            context: format!("R at level {level}, node {k}"),
            rcond: 0.0,
        })?;
        r_inv.push(inv);
    }
    let mut theta_t = theta.clone();
    for (k, ri) in r_inv.iter().enumerate() {
        let v = ri * theta.node_vector(k);
        theta_t.node_mut(k).copy_from_slice(v.as_slice());
    }
    let dims = r.rank_dims();
    let eh = expect_blocks(tree, &r.hat, &dims, &dims);
    let stacked = stack_family(&r.tilde, level, m, nodes);
    let mut gamma = DMatrix::zeros(nodes * m, nodes * m);
    for (w, ri) in r_inv.iter().enumerate() {
        for w2 in 0..nodes {
            let mut kern = DMatrix::zeros(m, m);
            for (b, t) in r.bar.iter().zip(&r.tilde) {
                kern += b.mats[w].transpose() * &t.mats[w2] + t.mats[w].transpose() * &b.mats[w2];
            }
            if !dims.is_empty() {
                kern += stacked.mats[w].transpose() * &eh * &stacked.mats[w2];
            }
            gamma.view_mut((w * m, w2 * m), (m, m)).copy_from(&(-ri * kern));
        }
    }
    let kernel = FredholmKernel { level, dim: m, weights: tree.node_probs(level), gamma };
    Ok((theta_t, kernel))
}

/// Control at one level from the Fredholm equation.
pub fn fredholm_solve(fam: &MFFamilies, sol: &FbsdeSolution, level: usize) -> Result<RandomVector> {
    let (theta, kernel) = fredholm_parts(fam, sol, level)?;
    let u = kernel.solve(&theta.as_dvector())?;
    Ok(theta.with_values(&u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolventControl {
    pub phi: DMatrix<f64>,
    pub control: RandomVector,
    pub identity_residual: f64,
}

/// Control at one level through the resolvent kernel: u = θ̃ + ∫Φθ̃.
pub fn resolvent_control(fam: &MFFamilies, sol: &FbsdeSolution, level: usize) -> Result<ResolventControl> {
    let (theta, kernel) = fredholm_parts(fam, sol, level)?;
    let phi = kernel.resolvent()?;
    let identity_residual = kernel.resolvent_residual(&phi);
    let u = kernel.apply_resolvent(&phi, &theta.as_dvector());
    Ok(ResolventControl { control: theta.with_values(&u), phi, identity_residual })
}
