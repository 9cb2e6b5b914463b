//! Finite-rank "pointwise + mean-field" operators on a tree level.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tree::{RandomVector, ScenarioTree};

/// Matrices indexed by the nodes of one level, all `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMatrices {
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    pub mats: Vec<DMatrix<f64>>,
}

impl NodeMatrices {
    pub fn new(level: usize, mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let (rows, cols) = mats.first().map(|m| m.shape()).unwrap_or((0, 0));
        if mats.iter().any(|m| m.shape() != (rows, cols)) {
            return Err(Error::DimMismatch(format!("node matrices at level {level} differ in shape")));
        }
        Ok(NodeMatrices { level, rows, cols, mats })
    }

    pub fn constant(tree: &ScenarioTree, level: usize, m: &DMatrix<f64>) -> Self {
        NodeMatrices {
            level,
            rows: m.nrows(),
            cols: m.ncols(),
            mats: vec![m.clone(); tree.level_size(level)],
        }
    }

    pub fn zeros(tree: &ScenarioTree, level: usize, rows: usize, cols: usize) -> Self {
        Self::constant(tree, level, &DMatrix::zeros(rows, cols))
    }

    /// Scalar field as 1×1 matrices.
    pub fn scalar_field(level: usize, values: &[f64]) -> Self {
        NodeMatrices {
            level,
            rows: 1,
            cols: 1,
            mats: values.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        NodeMatrices {
            level: self.level,
            rows: self.cols,
            cols: self.rows,
            mats: self.mats.iter().map(|m| m.transpose()).collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        NodeMatrices { mats: self.mats.iter().map(|m| m * a).collect(), ..self.clone() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape_key() != other.shape_key() {
            return Err(Error::DimMismatch("adding node matrices of different shapes".into()));
        }
        Ok(NodeMatrices {
            mats: self.mats.iter().zip(&other.mats).map(|(a, b)| a + b).collect(),
            ..self.clone()
        })
    }

    /// Node-wise product `self(ω)·other(ω)`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows || self.mats.len() != other.mats.len() {
            return Err(Error::DimMismatch("node-wise product shapes".into()));
        }
        let mats: Vec<_> = self.mats.iter().zip(&other.mats).map(|(a, b)| a * b).collect();
        Ok(NodeMatrices { level: self.level, rows: self.rows, cols: other.cols, mats })
    }

    /// Node-wise product with a fixed matrix on the right.
    pub fn mul_fixed(&self, m: &DMatrix<f64>) -> Self {
        NodeMatrices {
            level: self.level,
            rows: self.rows,
            cols: m.ncols(),
            mats: self.mats.iter().map(|a| a * m).collect(),
        }
    }

    fn shape_key(&self) -> (usize, usize, usize, usize) {
        (self.level, self.rows, self.cols, self.mats.len())
    }

    pub fn expectation(&self, tree: &ScenarioTree) -> DMatrix<f64> {
        let p = tree.node_prob(self.level);
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for m in &self.mats {
            out += m * p;
        }
        out
    }

    /// E|M|² with the Frobenius norm.
    pub fn mean_sq_frobenius(&self, tree: &ScenarioTree) -> f64 {
        let p = tree.node_prob(self.level);
        self.mats.iter().map(|m| p * m.norm_squared()).sum()
    }

    pub fn esssup_frobenius(&self) -> f64 {
        self.mats.iter().fold(0.0, |a, m| a.max(m.norm()))
    }

    /// E[M ξ] for ξ at the same level.
    pub fn expect_apply(&self, tree: &ScenarioTree, xi: &RandomVector) -> Result<DVector<f64>> {
        if xi.level != self.level || xi.dim != self.cols {
            return Err(Error::DimMismatch(format!(
                "E[M·xi]: matrix {}x{} at level {}, vector dim {} at level {}",
                self.rows, self.cols, self.level, xi.dim, xi.level
            )));
        }
        let p = tree.node_prob(self.level);
        let mut out = DVector::zeros(self.rows);
        for (k, m) in self.mats.iter().enumerate() {
            out += m * xi.node_vector(k) * p;
        }
        Ok(out)
    }

    /// Node-wise `M(ω) ξ(ω)`.
    pub fn apply_pointwise(&self, xi: &RandomVector) -> Result<RandomVector> {
        if xi.level != self.level || xi.dim != self.cols || xi.nodes() != self.mats.len() {
            return Err(Error::DimMismatch(format!(
                "pointwise apply: matrix {}x{} at level {}, vector dim {} at level {}",
                self.rows, self.cols, self.level, xi.dim, xi.level
            )));
        }
        let mut values = Vec::with_capacity(self.mats.len() * self.rows);
        for (k, m) in self.mats.iter().enumerate() {
            values.extend((m * xi.node_vector(k)).iter());
        }
        Ok(RandomVector { level: self.level, dim: self.rows, values })
    }

    /// Node-wise `M(ω) c` for a fixed vector c.
    pub fn apply_fixed(&self, c: &DVector<f64>) -> RandomVector {
        let mut values = Vec::with_capacity(self.mats.len() * self.rows);
        for m in &self.mats {
            values.extend((m * c).iter());
        }
        RandomVector { level: self.level, dim: self.rows, values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldTerm {
    /// dim_out × p
    pub bar: NodeMatrices,
    /// p × dim_in
    pub tilde: NodeMatrices,
}

/// (Lξ)(ω) = P(ω)ξ(ω) + Σ_k bar_k(ω) E[tilde_k ξ].
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldOperator {
    pub level: usize,
    pub dim_in: usize,
    pub dim_out: usize,
    pub pointwise: NodeMatrices,
    pub terms: Vec<MeanFieldTerm>,
}

impl MeanFieldOperator {
    pub fn new(pointwise: NodeMatrices, terms: Vec<MeanFieldTerm>) -> Result<Self> {
        let op = MeanFieldOperator {
            level: pointwise.level,
            dim_in: pointwise.cols,
            dim_out: pointwise.rows,
            pointwise,
            terms: Vec::new(),
        };
        op.with_terms(terms)
    }

    pub fn pointwise(pointwise: NodeMatrices) -> Self {
        MeanFieldOperator {
            level: pointwise.level,
            dim_in: pointwise.cols,
            dim_out: pointwise.rows,
            pointwise,
            terms: Vec::new(),
        }
    }

    pub fn zero(tree: &ScenarioTree, level: usize, dim_out: usize, dim_in: usize) -> Self {
        Self::pointwise(NodeMatrices::zeros(tree, level, dim_out, dim_in))
    }

    pub fn identity(tree: &ScenarioTree, level: usize, dim: usize) -> Self {
        Self::pointwise(NodeMatrices::constant(tree, level, &DMatrix::identity(dim, dim)))
    }

    /// Deterministic matrix coefficient, no mean-field terms.
    pub fn constant(tree: &ScenarioTree, level: usize, m: &DMatrix<f64>) -> Self {
        Self::pointwise(NodeMatrices::constant(tree, level, m))
    }

    /// ξ ↦ ξ − E[ξ] on scalars.
    pub fn variance(tree: &ScenarioTree, level: usize) -> Self {
        let one = DMatrix::from_element(1, 1, 1.0);
        let mut op = Self::constant(tree, level, &one);
        op.terms.push(MeanFieldTerm {
            bar: NodeMatrices::constant(tree, level, &(-&one)),
            tilde: NodeMatrices::constant(tree, level, &one),
        });
        op
    }

    pub fn with_term(self, bar: NodeMatrices, tilde: NodeMatrices) -> Result<Self> {
        self.with_terms(vec![MeanFieldTerm { bar, tilde }])
    }

    pub fn with_terms(mut self, terms: Vec<MeanFieldTerm>) -> Result<Self> {
        for t in terms {
            if t.bar.rows != self.dim_out
                || t.tilde.cols != self.dim_in
                || t.bar.cols != t.tilde.rows
                || t.bar.level != self.level
                || t.tilde.level != self.level
                || t.bar.mats.len() != self.pointwise.mats.len()
                || t.tilde.mats.len() != self.pointwise.mats.len()
            {
                return Err(Error::DimMismatch(format!(
                    "mean-field term bar {}x{} / tilde {}x{} incompatible with {}x{} operator at level {}",
                    t.bar.rows, t.bar.cols, t.tilde.rows, t.tilde.cols, self.dim_out, self.dim_in, self.level
                )));
            }
            self.terms.push(t);
        }
        Ok(self)
    }

    pub fn nodes(&self) -> usize {
        self.pointwise.mats.len()
    }

    pub fn apply(&self, tree: &ScenarioTree, xi: &RandomVector) -> Result<RandomVector> {
        if xi.level != self.level {
            return Err(Error::LevelMismatch { expected: self.level, got: xi.level });
        }
        if xi.dim != self.dim_in {
            return Err(Error::DimMismatch(format!("operator expects dim {}, got {}", self.dim_in, xi.dim)));
        }
        let mut out = self.pointwise.apply_pointwise(xi)?;
        for t in &self.terms {
            let e = t.tilde.expect_apply(tree, xi)?;
            out.axpy(1.0, &t.bar.apply_fixed(&e))?;
        }
        Ok(out)
    }

    pub fn adjoint(&self) -> Self {
        MeanFieldOperator {
            level: self.level,
            dim_in: self.dim_out,
            dim_out: self.dim_in,
            pointwise: self.pointwise.transpose(),
            terms: self
                .terms
                .iter()
                .map(|t| MeanFieldTerm { bar: t.tilde.transpose(), tilde: t.bar.transpose() })
                .collect(),
        }
    }

    /// Sum of two operators (pointwise parts added, term lists concatenated).
    pub fn add(&self, other: &Self) -> Result<Self> {
        let pointwise = self.pointwise.add(&other.pointwise)?;
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Self::new(pointwise, terms)
    }

    pub fn scaled(&self, a: f64) -> Self {
        MeanFieldOperator {
            pointwise: self.pointwise.scaled(a),
            terms: self
                .terms
                .iter()
                .map(|t| MeanFieldTerm { bar: t.bar.scaled(a), tilde: t.tilde.clone() })
                .collect(),
            ..self.clone()
        }
    }

    /// self ∘ inner, again of pointwise-plus-mean-field form.
    pub fn compose(&self, tree: &ScenarioTree, inner: &MeanFieldOperator) -> Result<Self> {
        if self.level != inner.level || self.dim_in != inner.dim_out {
            return Err(Error::DimMismatch("compose: incompatible operators".into()));
        }
        let p = &self.pointwise;
        let mut terms = Vec::new();
        for t in &inner.terms {
            terms.push(MeanFieldTerm { bar: p.mul(&t.bar)?, tilde: t.tilde.clone() });
        }
        for a in &self.terms {
            terms.push(MeanFieldTerm { bar: a.bar.clone(), tilde: a.tilde.mul(&inner.pointwise)? });
            for t in &inner.terms {
                let c = a.tilde.mul(&t.bar)?.expectation(tree);
                terms.push(MeanFieldTerm { bar: a.bar.mul_fixed(&c), tilde: t.tilde.clone() });
            }
        }
        MeanFieldOperator::new(p.mul(&inner.pointwise)?, terms)
    }

    /// Dense matrix in node coordinates: apply(ξ) = M·vec(ξ).
    pub fn assemble(&self, tree: &ScenarioTree) -> Result<DMatrix<f64>> {
        let nodes = self.nodes();
        let (ro, ci) = (nodes * self.dim_out, nodes * self.dim_in);
        tree.check_budget(ro.saturating_mul(ci))?;
        let p = tree.node_prob(self.level);
        let mut m = DMatrix::zeros(ro, ci);
        for k in 0..nodes {
            m.view_mut((k * self.dim_out, k * self.dim_in), (self.dim_out, self.dim_in))
                .copy_from(&self.pointwise.mats[k]);
        }
        for t in &self.terms {
            for w in 0..nodes {
                let bar = &t.bar.mats[w];
                for w2 in 0..nodes {
                    let block = bar * &t.tilde.mats[w2] * p;
                    let mut v = m.view_mut((w * self.dim_out, w2 * self.dim_in), (self.dim_out, self.dim_in));
                    v += block;
                }
            }
        }
        Ok(m)
    }

    pub fn solve(&self, tree: &ScenarioTree, rhs: &RandomVector) -> Result<RandomVector> {
        if self.dim_in != self.dim_out {
            return Err(Error::DimMismatch("solve needs a square operator".into()));
        }
        if rhs.level != self.level || rhs.dim != self.dim_out {
            return Err(Error::DimMismatch("solve: rhs does not match operator".into()));
        }
        let m = self.assemble(tree)?;
        let x = solve_dense(&m, &rhs.as_dvector(), "mean-field operator")?;
        Ok(rhs.with_values(&x))
    }

    /// Pointwise symmetric and term list closed under (bar, tilde) ↦ (tildeᵀ, barᵀ);
    /// terms without a partner must have a symmetric combined kernel.
    pub fn is_self_adjoint_structural(&self, tol: f64) -> bool {
        if self.dim_in != self.dim_out {
            return false;
        }
        if self.pointwise.mats.iter().any(|m| (m - m.transpose()).amax() > tol * (1.0 + m.amax())) {
            return false;
        }
        let n = self.terms.len();
        let mut used = vec![false; n];
        let mut rest = Vec::new();
        for i in 0..n {
            if used[i] {
                continue;
            }
            let a = &self.terms[i];
            let mut found = false;
            for j in i..n {
                if used[j] {
                    continue;
                }
                let b = &self.terms[j];
                if b.bar.cols != a.tilde.rows {
                    continue;
                }
                let close = |x: &NodeMatrices, y: &NodeMatrices| {
                    x.mats.len() == y.mats.len()
                        && x.mats.iter().zip(&y.mats).all(|(p, q)| {
                            p.shape() == q.transpose().shape()
                                && (p - q.transpose()).amax() <= tol * (1.0 + p.amax())
                        })
                };
                if close(&b.bar, &a.tilde) && close(&b.tilde, &a.bar) {
                    used[i] = true;
                    used[j] = true;
                    found = true;
                    break;
                }
            }
            if !found {
                rest.push(i);
            }
        }
        if rest.is_empty() {
            return true;
        }
        // unpaired terms: compare the kernel Σ bar(ω)tilde(ω') with its transpose
        let nodes = self.pointwise.mats.len();
        let kernel = |w: usize, w2: usize| {
            let mut k = DMatrix::zeros(self.dim_out, self.dim_in);
            for &i in &rest {
                k += &self.terms[i].bar.mats[w] * &self.terms[i].tilde.mats[w2];
            }
            k
        };
        for w in 0..nodes {
            for w2 in w..nodes {
                let (a, b) = (kernel(w, w2), kernel(w2, w));
                if (&a - b.transpose()).amax() > tol * (1.0 + a.amax()) {
                    return false;
                }
            }
        }
        true
    }

    /// Structural check first, then the assembled matrix in the weighted inner product.
    pub fn is_self_adjoint(&self, tree: &ScenarioTree) -> Result<bool> {
        if self.dim_in != self.dim_out {
            return Ok(false);
        }
        if self.is_self_adjoint_structural(1e-13) {
            return Ok(true);
        }
        let m = self.assemble(tree)?;
        let w = self.weights(tree, self.dim_in);
        let wm = DMatrix::from_diagonal(&w) * &m;
        let asym = (&wm - wm.transpose()).amax();
        Ok(asym <= 1e-12 * (1.0 + wm.amax()))
    }

    fn weights(&self, tree: &ScenarioTree, dim: usize) -> DVector<f64> {
        level_weights(tree, self.level, dim)
    }

    /// Operator norm in L²(Ω).
    pub fn norm(&self, tree: &ScenarioTree) -> Result<f64> {
        let m = self.assemble(tree)?;
        Ok(weighted_norm(
            &m,
            &self.weights(tree, self.dim_in),
            &self.weights(tree, self.dim_out),
        ))
    }

    /// esssup|P| + Σ_k (E|bar_k|²)^{1/2} (E|tilde_k|²)^{1/2}: valid for any term list.
    pub fn norm_bound(&self, tree: &ScenarioTree) -> f64 {
        self.pointwise.esssup_frobenius()
            + self
                .terms
                .iter()
                .map(|t| (t.bar.mean_sq_frobenius(tree) * t.tilde.mean_sq_frobenius(tree)).sqrt())
                .sum::<f64>()
    }

    /// Weighted spectrum of a self-adjoint operator, ascending.
    pub fn spectrum(&self, tree: &ScenarioTree) -> Result<Vec<f64>> {
        let m = self.assemble(tree)?;
        Ok(weighted_spectrum(&m, &self.weights(tree, self.dim_in)))
    }

    pub fn min_eigenvalue(&self, tree: &ScenarioTree) -> Result<f64> {
        Ok(self.spectrum(tree)?.first().copied().unwrap_or(0.0))
    }
}

/// Probability weight of every coordinate of a level with `dim` components per node.
pub fn level_weights(tree: &ScenarioTree, level: usize, dim: usize) -> DVector<f64> {
    DVector::from_element(tree.level_size(level) * dim, tree.node_prob(level))
}

/// Weighted adjoint P_in⁻¹ Mᵀ P_out of a matrix mapping the `w_in` space to the `w_out` space.
pub fn weighted_adjoint(m: &DMatrix<f64>, w_in: &DVector<f64>, w_out: &DVector<f64>) -> DMatrix<f64> {
    let mut a = m.transpose();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            a[(i, j)] *= w_out[j] / w_in[i];
        }
    }
    a
}

fn similarity(m: &DMatrix<f64>, w_in: &DVector<f64>, w_out: &DVector<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            s[(i, j)] *= w_out[i].sqrt() / w_in[j].sqrt();
        }
    }
    s
}

pub fn weighted_norm(m: &DMatrix<f64>, w_in: &DVector<f64>, w_out: &DVector<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let s = similarity(m, w_in, w_out);
    s.singular_values().max()
}

/// Ascending eigenvalues of a weighted self-adjoint matrix (symmetrized after the similarity transform).
pub fn weighted_spectrum(m: &DMatrix<f64>, w: &DVector<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let s = similarity(m, w, w);
    let sym = (&s + s.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Minimum eigenvalue ≥ −1e-10·(1+‖M‖) counts as nonnegative.
pub fn psd_tolerance(norm: f64) -> f64 {
    1e-10 * (1.0 + norm)
}

/// Reciprocal 1-norm condition number of a square matrix (exact, via the inverse).
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let norm1 = |a: &DMatrix<f64>| {
        a.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
    };
    match m.clone().lu().try_inverse() {
        Some(inv) => {
            let r = 1.0 / (norm1(m) * norm1(&inv));
            if r.is_finite() {
                r
            } else {
                0.0
            }
        }
        None => 0.0,
    }
}

pub const RCOND_THRESHOLD: f64 = 1e-12;

/// LU solve guarded by the conditioning threshold.
pub fn solve_dense(m: &DMatrix<f64>, rhs: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let r = rcond(m);
    if r < RCOND_THRESHOLD {
        return Err(Error::Singular { context: context.into(), rcond: r });
    }
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Singular { context: context.into(), rcond: r })
}

/// Inverse guarded by the conditioning threshold.
pub fn inverse_dense(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let r = rcond(m);
    if r < RCOND_THRESHOLD {
        return Err(Error::Singular { context: context.into(), rcond: r });
    }
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular { context: context.into(), rcond: r })
}

/// One operator per time index over `start..=end`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorProcess {
    pub start: usize,
    pub ops: Vec<MeanFieldOperator>,
}

impl OperatorProcess {
    pub fn new(start: usize, ops: Vec<MeanFieldOperator>) -> Result<Self> {
        let dims = ops.first().map(|o| (o.dim_out, o.dim_in));
        for (i, op) in ops.iter().enumerate() {
            if op.level != start + i {
                return Err(Error::LevelMismatch { expected: start + i, got: op.level });
            }
            if Some((op.dim_out, op.dim_in)) != dims {
                return Err(Error::DimMismatch("operator process dims vary over time".into()));
            }
        }
        Ok(OperatorProcess { start, ops })
    }

    pub fn from_fn(start: usize, end: usize, f: impl Fn(usize) -> MeanFieldOperator) -> Self {
        OperatorProcess { start, ops: (start..=end).map(f).collect() }
    }

    pub fn at(&self, level: usize) -> &MeanFieldOperator {
        &self.ops[level - self.start]
    }

    pub fn end(&self) -> usize {
        self.start + self.ops.len() - 1
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ops.first().map(|o| (o.dim_out, o.dim_in)).unwrap_or((0, 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormCheck {
    pub computed: f64,
    pub bound: f64,
}

impl NormCheck {
    pub fn holds(&self) -> bool {
        self.computed <= self.bound * (1.0 + 1e-10) + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelPositivity {
    pub level: usize,
    pub min_eig_r_minus_delta: f64,
    pub min_eig_schur: f64,
    pub q_norm: NormCheck,
    pub r_norm: NormCheck,
    pub s_norm: NormCheck,
    pub r_ok: bool,
    pub schur_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivityReport {
    pub delta: f64,
    pub min_eig_g: f64,
    pub g_ok: bool,
    pub g_norm: NormCheck,
    pub levels: Vec<LevelPositivity>,
}

impl PositivityReport {
    /// (H3) holds at every level.
    pub fn passed(&self) -> bool {
        self.g_ok && self.levels.iter().all(|l| l.r_ok && l.schur_ok)
    }

    pub fn bounds_hold(&self) -> bool {
        self.g_norm.holds()
            && self.levels.iter().all(|l| l.q_norm.holds() && l.r_norm.holds() && l.s_norm.holds())
    }

    /// Human-readable names of the failed clauses.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.g_ok {
            out.push(format!("G >= 0 (min eigenvalue {:.6e})", self.min_eig_g));
        }
        for l in &self.levels {
            if !l.r_ok {
                out.push(format!(
                    "R >= delta I at level {} (min eigenvalue of R - delta I {:.6e})",
                    l.level, l.min_eig_r_minus_delta
                ));
            }
            if !l.schur_ok {
                out.push(format!(
                    "Q - S* R^-1 S >= 0 at level {} (min eigenvalue {:.6e})",
                    l.level, l.min_eig_schur
                ));
            }
        }
        if !self.g_norm.holds() {
            out.push("norm bound for G".into());
        }
        for l in &self.levels {
            for (name, c) in [("Q", &l.q_norm), ("R", &l.r_norm), ("S", &l.s_norm)] {
                if !c.holds() {
                    out.push(format!("norm bound for {name} at level {}", l.level));
                }
            }
        }
        out
    }
}

/// Assembled Schur complement Q − S* R⁻¹ S at one level.
pub fn schur_complement(
    tree: &ScenarioTree,
    q: &MeanFieldOperator,
    s: &MeanFieldOperator,
    r: &MeanFieldOperator,
) -> Result<DMatrix<f64>> {
    let qm = q.assemble(tree)?;
    let sm = s.assemble(tree)?;
    let rm = r.assemble(tree)?;
    let wx = level_weights(tree, s.level, s.dim_in);
    let wu = level_weights(tree, s.level, s.dim_out);
    let rinv_s = solve_dense_matrix(&rm, &sm, "R in Schur complement")?;
    Ok(qm - weighted_adjoint(&sm, &wx, &wu) * rinv_s)
}

pub fn solve_dense_matrix(m: &DMatrix<f64>, rhs: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let r = rcond(m);
    if r < RCOND_THRESHOLD {
        return Err(Error::Singular { context: context.into(), rcond: r });
    }
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Singular { context: context.into(), rcond: r })
}

/// (H3) check: G ≥ 0, R ≥ δI and Q − S*R⁻¹S ≥ 0 per level, plus norms against term-structure bounds.
pub fn check_positivity(
    tree: &ScenarioTree,
    g: &MeanFieldOperator,
    q: &OperatorProcess,
    s: &OperatorProcess,
    r: &OperatorProcess,
    delta: f64,
) -> Result<PositivityReport> {
    if !g.is_self_adjoint(tree)? {
        return Err(Error::NotSelfAdjoint("G".into()));
    }
    let g_spec = g.spectrum(tree)?;
    let g_norm = NormCheck { computed: g.norm(tree)?, bound: g.norm_bound(tree) };
    let min_eig_g = g_spec.first().copied().unwrap_or(0.0);
    let g_ok = min_eig_g >= -psd_tolerance(g_norm.computed);
    let mut levels = Vec::new();
    for j in r.start..=r.end() {
        let (qj, sj, rj) = (q.at(j), s.at(j), r.at(j));
        if !qj.is_self_adjoint(tree)? {
            return Err(Error::NotSelfAdjoint(format!("Q at level {j}")));
        }
        if !rj.is_self_adjoint(tree)? {
            return Err(Error::NotSelfAdjoint(format!("R at level {j}")));
        }
        let r_norm = NormCheck { computed: rj.norm(tree)?, bound: rj.norm_bound(tree) };
        let q_norm = NormCheck { computed: qj.norm(tree)?, bound: qj.norm_bound(tree) };
        let s_norm = NormCheck { computed: sj.norm(tree)?, bound: sj.norm_bound(tree) };
        let r_min = rj.min_eigenvalue(tree)? - delta;
        let r_ok = r_min >= -psd_tolerance(r_norm.computed);
        let (min_eig_schur, schur_ok) = match schur_complement(tree, qj, sj, rj) {
            Ok(sc) => {
                let w = level_weights(tree, j, qj.dim_in);
                let min = weighted_spectrum(&sc, &w).first().copied().unwrap_or(0.0);
                (min, min >= -psd_tolerance(weighted_norm(&sc, &w, &w)))
            }
            Err(Error::Singular { .. }) => (f64::NEG_INFINITY, false),
            Err(e) => return Err(e),
        };
        levels.push(LevelPositivity {
            level: j,
            min_eig_r_minus_delta: r_min,
            min_eig_schur,
            q_norm,
            r_norm,
            s_norm,
            r_ok,
            schur_ok,
        });
    }
    Ok(PositivityReport { delta, min_eig_g, g_ok, g_norm, levels })
}
