//! Finite filtered probability space as a non-recombining branching tree.

use nalgebra::DVector;

use crate::error::{Error, Result};

pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

/// Reads `OPLQ_NODE_BUDGET`, falling back to the default.
pub fn node_budget_from_env() -> usize {
    std::env::var("OPLQ_NODE_BUDGET")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(DEFAULT_NODE_BUDGET)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    n_steps: usize,
    delta: f64,
    branching: usize,
    increments: Vec<f64>,
    level_sizes: Vec<usize>,
    budget: usize,
}

impl ScenarioTree {
    pub fn new(n_steps: usize, delta: f64, branching: usize) -> Result<Self> {
        Self::with_budget(n_steps, delta, branching, DEFAULT_NODE_BUDGET)
    }

    pub fn with_budget(n_steps: usize, delta: f64, branching: usize, budget: usize) -> Result<Self> {
        if n_steps < 1 {
            return Err(Error::InvalidTree("n_steps must be at least 1".into()));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidTree(format!("delta must be positive, got {delta}")));
        }
        if branching < 2 {
            return Err(Error::InvalidTree(format!("branching must be >= 2, got {branching}")));
        }
        let mut level_sizes = Vec::with_capacity(n_steps + 1);
        let mut size = 1usize;
        let mut total = 0usize;
        for _ in 0..=n_steps {
            level_sizes.push(size);
            total = total.saturating_add(size);
            if total > budget {
                return Err(Error::BudgetExceeded { needed: total, budget });
            }
            size = size.saturating_mul(branching);
        }
        // equally spaced symmetric points scaled to variance delta under uniform weights;
        // b=2 gives ±√Δ, b=3 gives (−√(3Δ/2), 0, +√(3Δ/2))
        let centre = (branching as f64 - 1.0) / 2.0;
        let var = ((branching * branching) as f64 - 1.0) / 12.0;
        let scale = (delta / var).sqrt();
        let mut increments: Vec<f64> =
            (0..branching).map(|i| (i as f64 - centre) * scale).collect();
        increments.reverse();
        Ok(ScenarioTree { n_steps, delta, branching, increments, level_sizes, budget })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.delta
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.delta
    }

    pub fn increment_values(&self) -> &[f64] {
        &self.increments
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.level_sizes[level]
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn node_prob(&self, level: usize) -> f64 {
        1.0 / self.level_sizes[level] as f64
    }

    /// Probability of every node at `level`, in node order.
    pub fn node_probs(&self, level: usize) -> Vec<f64> {
        vec![self.node_prob(level); self.level_size(level)]
    }

    /// Errors if an allocation of `needed` node-values is over budget.
    pub fn check_budget(&self, needed: usize) -> Result<()> {
        if needed > self.budget {
            Err(Error::BudgetExceeded { needed, budget: self.budget })
        } else {
            Ok(())
        }
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level > self.n_steps {
            return Err(Error::LevelMismatch { expected: self.n_steps, got: level });
        }
        Ok(())
    }

    fn check_rv(&self, rv: &RandomVector) -> Result<()> {
        self.check_level(rv.level)?;
        if rv.values.len() != self.level_size(rv.level) * rv.dim {
            return Err(Error::DimMismatch(format!(
                "random vector at level {} has {} values, expected {}",
                rv.level,
                rv.values.len(),
                self.level_size(rv.level) * rv.dim
            )));
        }
        Ok(())
    }

    /// The edge increment ΔW arriving at each node of `level` (level ≥ 1).
    pub fn increment_vector(&self, level: usize) -> Result<RandomVector> {
        if level == 0 || level > self.n_steps {
            return Err(Error::LevelMismatch { expected: 1, got: level });
        }
        let b = self.branching;
        let values = (0..self.level_size(level)).map(|k| self.increments[k % b]).collect();
        Ok(RandomVector { level, dim: 1, values })
    }

    pub fn expectation(&self, rv: &RandomVector) -> Result<DVector<f64>> {
        self.check_rv(rv)?;
        let p = self.node_prob(rv.level);
        let mut out = DVector::zeros(rv.dim);
        for k in 0..rv.nodes() {
            for (i, v) in rv.node(k).iter().enumerate() {
                out[i] += p * v;
            }
        }
        Ok(out)
    }

    /// Parent values are the probability-weighted average of their children.
    pub fn cond_expectation(&self, rv: &RandomVector) -> Result<RandomVector> {
        self.check_rv(rv)?;
        if rv.level == 0 {
            return Err(Error::LevelMismatch { expected: 1, got: 0 });
        }
        let b = self.branching;
        let d = rv.dim;
        let parents = self.level_size(rv.level - 1);
        let w = 1.0 / b as f64;
        let mut values = vec![0.0; parents * d];
        for k in 0..parents {
            for c in 0..b {
                let child = rv.node(b * k + c);
                for i in 0..d {
                    values[k * d + i] += w * child[i];
                }
            }
        }
        Ok(RandomVector { level: rv.level - 1, dim: d, values })
    }

    /// E[Y ΔW | F_j] / Δ for Y at level j+1.
    pub fn martingale_coefficient(&self, rv: &RandomVector) -> Result<RandomVector> {
        let dw = self.increment_vector(rv.level)?;
        let prod = rv.scale_by(&dw)?;
        let mut z = self.cond_expectation(&prod)?;
        z.scale_mut(1.0 / self.delta);
        Ok(z)
    }

    pub fn inner(&self, a: &RandomVector, b: &RandomVector) -> Result<f64> {
        self.check_rv(a)?;
        if a.level != b.level {
            return Err(Error::LevelMismatch { expected: a.level, got: b.level });
        }
        if a.dim != b.dim {
            return Err(Error::DimMismatch(format!("inner: dims {} and {}", a.dim, b.dim)));
        }
        let p = self.node_prob(a.level);
        Ok(p * a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>())
    }

    pub fn norm(&self, a: &RandomVector) -> Result<f64> {
        Ok(self.inner(a, a)?.max(0.0).sqrt())
    }

    /// Copies each node value onto its children.
    pub fn lift(&self, rv: &RandomVector) -> Result<RandomVector> {
        self.check_rv(rv)?;
        if rv.level >= self.n_steps {
            return Err(Error::LevelMismatch { expected: self.n_steps - 1, got: rv.level });
        }
        let b = self.branching;
        let d = rv.dim;
        let mut values = Vec::with_capacity(rv.values.len() * b);
        for k in 0..rv.nodes() {
            for _ in 0..b {
                values.extend_from_slice(rv.node(k));
            }
        }
        Ok(RandomVector { level: rv.level + 1, dim: d, values })
    }

    pub fn lift_to(&self, rv: &RandomVector, level: usize) -> Result<RandomVector> {
        if level < rv.level {
            return Err(Error::LevelMismatch { expected: rv.level, got: level });
        }
        let mut out = rv.clone();
        while out.level < level {
            out = self.lift(&out)?;
        }
        Ok(out)
    }

    /// Index of the level-`level` ancestor of `node` at level `from`.
    pub fn ancestor(&self, node: usize, from: usize, level: usize) -> usize {
        node / self.branching.pow((from - level) as u32)
    }
}

/// An F_{t_j}-measurable R^d random variable: `dim` values per node, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomVector {
    pub level: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl RandomVector {
    pub fn zeros(tree: &ScenarioTree, level: usize, dim: usize) -> Self {
        RandomVector { level, dim, values: vec![0.0; tree.level_size(level) * dim] }
    }

    pub fn constant(tree: &ScenarioTree, level: usize, c: &[f64]) -> Self {
        let n = tree.level_size(level);
        let mut values = Vec::with_capacity(n * c.len());
        for _ in 0..n {
            values.extend_from_slice(c);
        }
        RandomVector { level, dim: c.len(), values }
    }

    pub fn from_values(level: usize, dim: usize, values: Vec<f64>) -> Self {
        RandomVector { level, dim, values }
    }

    pub fn nodes(&self) -> usize {
        self.values.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn node_vector(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.node(k))
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn with_values(&self, v: &DVector<f64>) -> Self {
        RandomVector { level: self.level, dim: self.dim, values: v.as_slice().to_vec() }
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.level != other.level {
            return Err(Error::LevelMismatch { expected: self.level, got: other.level });
        }
        if self.dim != other.dim || self.values.len() != other.values.len() {
            return Err(Error::DimMismatch(format!("dims {} and {}", self.dim, other.dim)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(RandomVector { level: self.level, dim: self.dim, values })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(RandomVector { level: self.level, dim: self.dim, values })
    }

    pub fn axpy(&mut self, a: f64, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> Self {
        RandomVector {
            level: self.level,
            dim: self.dim,
            values: self.values.iter().map(|x| a * x).collect(),
        }
    }

    pub fn scale_mut(&mut self, a: f64) {
        for x in &mut self.values {
            *x *= a;
        }
    }

    /// Node-wise product with a scalar random variable at the same level.
    pub fn scale_by(&self, s: &RandomVector) -> Result<Self> {
        if s.dim != 1 || s.level != self.level || s.values.len() != self.nodes() {
            return Err(Error::DimMismatch("scale_by expects a scalar field at the same level".into()));
        }
        let mut out = self.clone();
        for k in 0..self.nodes() {
            let f = s.values[k];
            for x in out.node_mut(k) {
                *x *= f;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// Time-indexed sequence of random vectors; entry `j - start` lives at level `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    pub start: usize,
    pub entries: Vec<RandomVector>,
}

impl AdaptedProcess {
    pub fn new(start: usize, entries: Vec<RandomVector>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.level != start + i {
                return Err(Error::LevelMismatch { expected: start + i, got: e.level });
            }
        }
        Ok(AdaptedProcess { start, entries })
    }

    pub fn zeros(tree: &ScenarioTree, start: usize, end: usize, dim: usize) -> Self {
        AdaptedProcess {
            start,
            entries: (start..=end).map(|j| RandomVector::zeros(tree, j, dim)).collect(),
        }
    }

    pub fn constant(tree: &ScenarioTree, start: usize, end: usize, c: &[f64]) -> Self {
        AdaptedProcess {
            start,
            entries: (start..=end).map(|j| RandomVector::constant(tree, j, c)).collect(),
        }
    }

    /// Last level carried.
    pub fn end(&self) -> usize {
        self.start + self.entries.len() - 1
    }

    pub fn at(&self, level: usize) -> &RandomVector {
        &self.entries[level - self.start]
    }

    pub fn at_mut(&mut self, level: usize) -> &mut RandomVector {
        &mut self.entries[level - self.start]
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map(|e| e.dim).unwrap_or(0)
    }

    pub fn levels(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_span(self, other)?;
        let entries =
            self.entries.iter().zip(&other.entries).map(|(a, b)| a.add(b)).collect::<Result<_>>()?;
        Ok(AdaptedProcess { start: self.start, entries })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_span(self, other)?;
        let entries =
            self.entries.iter().zip(&other.entries).map(|(a, b)| a.sub(b)).collect::<Result<_>>()?;
        Ok(AdaptedProcess { start: self.start, entries })
    }

    pub fn scaled(&self, a: f64) -> Self {
        AdaptedProcess { start: self.start, entries: self.entries.iter().map(|e| e.scaled(a)).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_abs()))
    }

    /// Stacks all entries into one vector (level-major, then node, then component).
    pub fn to_dvector(&self) -> DVector<f64> {
        let data: Vec<f64> = self.entries.iter().flat_map(|e| e.values.iter().copied()).collect();
        DVector::from_vec(data)
    }

    pub fn from_dvector(tree: &ScenarioTree, start: usize, end: usize, dim: usize, v: &DVector<f64>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut off = 0;
        for j in start..=end {
            let len = tree.level_size(j) * dim;
            if off + len > v.len() {
                return Err(Error::DimMismatch("stacked vector too short".into()));
            }
            entries.push(RandomVector { level: j, dim, values: v.as_slice()[off..off + len].to_vec() });
            off += len;
        }
        if off != v.len() {
            return Err(Error::DimMismatch("stacked vector too long".into()));
        }
        Ok(AdaptedProcess { start, entries })
    }

    /// Σ_j Δ·E|v_j|², the L²(t,T) norm squared of a control-type process.
    pub fn l2_sq(&self, tree: &ScenarioTree) -> Result<f64> {
        let mut s = 0.0;
        for e in &self.entries {
            s += tree.delta() * tree.inner(e, e)?;
        }
        Ok(s)
    }

    /// E[max_j |v_j|²] along paths, over the carried levels.
    pub fn sup_sq(&self, tree: &ScenarioTree) -> f64 {
        let last = self.end();
        let leaves = tree.level_size(last);
        let p = tree.node_prob(last);
        let mut total = 0.0;
        for leaf in 0..leaves {
            let mut m: f64 = 0.0;
            for e in &self.entries {
                let k = tree.ancestor(leaf, last, e.level);
                m = m.max(e.node(k).iter().map(|x| x * x).sum());
            }
            total += p * m;
        }
        total
    }
}

fn check_span(a: &AdaptedProcess, b: &AdaptedProcess) -> Result<()> {
    if a.start != b.start || a.entries.len() != b.entries.len() {
        return Err(Error::DimMismatch(format!(
            "process spans {}..={} and {}..={}",
            a.start,
            a.end(),
            b.start,
            b.end()
        )));
    }
    Ok(())
}
