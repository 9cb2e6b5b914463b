//! Problem specification documents and their deterministic expansion.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use oplq::fbsde::ContinuationOptions;
use oplq::fixtures::Instance;
use oplq::mean_variance::MarketModel;
use oplq::meanfield::{CrossFamily, LevelFamily, MFFamilies, SymFamily};
use oplq::tree::node_budget_from_env;
use oplq::{AdaptedProcess, NodeMatrices, RandomVector, ScenarioTree};

pub const SCHEMA_VERSION: u32 = 1;

/// Schema error carrying the path of the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for SpecError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl std::error::Error for SpecError {}

fn err<T>(path: &str, message: impl Into<String>) -> Result<T, SpecError> {
    Err(SpecError { path: path.to_string(), message: message.into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Matrix {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Vector {
    Scalar(f64),
    Entries(Vec<f64>),
}

/// A coefficient over the levels of its span: one value everywhere, one per level, or one per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Coef<T> {
    Constant(T),
    PerLevel(Vec<T>),
    Nodes(Vec<Vec<T>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub n_steps: usize,
    pub delta: f64,
    #[serde(default = "default_branching")]
    pub branching: usize,
}

fn default_branching() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    /// largest mean-field rank allowed in any family
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelFamilySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Coef<Matrix>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bar: Vec<Coef<Matrix>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tilde: Vec<Coef<Matrix>>,
}

/// Also used for the cross coefficient S.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockFamilySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Coef<Matrix>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bar: Vec<Coef<Matrix>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tilde: Vec<Coef<Matrix>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hat: Vec<Vec<Coef<Matrix>>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<LevelFamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<LevelFamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<LevelFamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<LevelFamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<BlockFamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<BlockFamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<BlockFamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<BlockFamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g0: Option<Coef<Vector>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gbar: Vec<Coef<Vector>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q0: Option<Coef<Vector>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub qbar: Vec<Coef<Vector>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<Coef<Vector>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rhobar: Vec<Coef<Vector>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Coef<Vector>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<Coef<Vector>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub x0: Coef<f64>,
    pub r: Coef<f64>,
    pub mu: Coef<f64>,
    pub vol: Coef<f64>,
    pub beta: Coef<f64>,
    /// lower bounds; default to the smallest node value
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_vol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    /// fixed ε-schedule; absent selects the adaptive one
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// δ in R ≥ δI
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    200
}

fn default_delta() -> f64 {
    1e-6
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec { schedule: None, tol: default_tol(), max_iter: default_max_iter(), delta: default_delta() }
    }
}

impl SolverSpec {
    pub fn continuation(&self) -> ContinuationOptions {
        ContinuationOptions {
            schedule: self.schedule.clone(),
            tol: self.tol,
            max_iter: self.max_iter,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub schema_version: u32,
    pub tree: TreeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Dims>,
    #[serde(default)]
    pub start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Coef<Vector>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Coefficients>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ProblemSpec {
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let spec: ProblemSpec = serde_json::from_str(text).map_err(|e| SpecError {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if spec.schema_version != SCHEMA_VERSION {
            return err("schema_version", format!("unsupported version {}, expected {SCHEMA_VERSION}", spec.schema_version));
        }
        Ok(spec)
    }

    pub fn tree(&self) -> Result<ScenarioTree, SpecError> {
        let t = &self.tree;
        let tree = ScenarioTree::with_budget(t.n_steps, t.delta, t.branching, node_budget_from_env())
            .map_err(|e| SpecError { path: "tree".into(), message: e.to_string() })?;
        if self.start >= t.n_steps {
            return err("start", format!("must be below n_steps = {}", t.n_steps));
        }
        Ok(tree)
    }

    pub fn is_market(&self) -> bool {
        self.market.is_some() && self.coefficients.is_none()
    }

    /// Every shorthand replaced by its node table and every omitted coefficient by explicit zeros.
    pub fn expand(&self) -> Result<ProblemSpec, SpecError> {
        let tree = self.tree()?;
        let mut out = self.clone();
        if let Some(c) = &self.coefficients {
            let inst = self.instance_with(&tree, c)?;
            out.coefficients = Some(coefficients_of(&inst));
            out.x0 = Some(vector_coef(std::slice::from_ref(&inst.x)));
            let dims = self.dims.expect("checked by instance_with");
            out.dims = Some(dims);
        }
        if let Some(m) = &self.market {
            let mk = self.market_with(&tree, m)?;
            out.market = Some(MarketSpec {
                x0: scalar_coef(std::slice::from_ref(&mk.x0)),
                r: scalar_coef(&mk.r.entries),
                mu: scalar_coef(&mk.mu.entries),
                vol: scalar_coef(&mk.vol.entries),
                beta: scalar_coef(std::slice::from_ref(&mk.beta)),
                eps_vol: Some(mk.eps_vol),
                eps_beta: Some(mk.eps_beta),
            });
        }
        Ok(out)
    }

    pub fn instance(&self) -> Result<Instance, SpecError> {
        let tree = self.tree()?;
        match &self.coefficients {
            Some(c) => self.instance_with(&tree, c),
            None => err("coefficients", "missing (required by this subcommand)"),
        }
    }

    pub fn market_model(&self) -> Result<MarketModel, SpecError> {
        let tree = self.tree()?;
        match &self.market {
            Some(m) => self.market_with(&tree, m),
            None => err("market", "missing (required by this subcommand)"),
        }
    }

    fn instance_with(&self, tree: &ScenarioTree, c: &Coefficients) -> Result<Instance, SpecError> {
        let Some(dims) = self.dims else {
            return err("dims", "required when coefficients are given");
        };
        let (n, m) = (dims.n, dims.m);
        if n == 0 || m == 0 {
            return err("dims", "n and m must be positive");
        }
        let t = self.start;
        let nn = tree.n_steps();
        let span: Vec<usize> = (t..nn).collect();
        let x = match &self.x0 {
            Some(v) => expand_vectors(tree, "x0", v, &[t], Some(n))?.remove(0),
            None => RandomVector::zeros(tree, t, n),
        };
        let mut fam = MFFamilies::zeros(tree, t, n, m);
        fam.a = level_family(tree, "coefficients.a", c.a.as_ref(), &span, n, n, dims.k)?;
        fam.b = level_family(tree, "coefficients.b", c.b.as_ref(), &span, n, m, dims.k)?;
        fam.c = level_family(tree, "coefficients.c", c.c.as_ref(), &span, n, n, dims.k)?;
        fam.d = level_family(tree, "coefficients.d", c.d.as_ref(), &span, n, m, dims.k)?;
        fam.g = sym_family(tree, "coefficients.g", c.g.as_ref(), &[nn], n, dims.k)?.remove(0);
        fam.q = sym_family(tree, "coefficients.q", c.q.as_ref(), &span, n, dims.k)?;
        fam.r = sym_family(tree, "coefficients.r", c.r.as_ref(), &span, m, dims.k)?;
        fam.s = cross_family(tree, "coefficients.s", c.s.as_ref(), &span, &fam.q, &fam.r, n, m)?;
        fam.g0 = opt_vectors(tree, "coefficients.g0", c.g0.as_ref(), &[nn], n)?.remove(0);
        fam.gbar = bar_vectors(tree, "coefficients.gbar", &c.gbar, &[nn], &[&fam.g])?.into_iter().map(|mut v| v.remove(0)).collect();
        fam.q0 = opt_vectors(tree, "coefficients.q0", c.q0.as_ref(), &span, n)?;
        fam.qbar = transpose_levels(bar_vectors(tree, "coefficients.qbar", &c.qbar, &span, &fam.q.iter().collect::<Vec<_>>())?, span.len());
        fam.rho0 = opt_vectors(tree, "coefficients.rho0", c.rho0.as_ref(), &span, m)?;
        fam.rhobar = transpose_levels(bar_vectors(tree, "coefficients.rhobar", &c.rhobar, &span, &fam.r.iter().collect::<Vec<_>>())?, span.len());
        fam.check().map_err(|e| SpecError { path: "coefficients".into(), message: e.to_string() })?;
        let drift = AdaptedProcess::new(t, opt_vectors(tree, "coefficients.drift", c.drift.as_ref(), &span, n)?)
            .map_err(|e| SpecError { path: "coefficients.drift".into(), message: e.to_string() })?;
        let diffusion = AdaptedProcess::new(t, opt_vectors(tree, "coefficients.diffusion", c.diffusion.as_ref(), &span, n)?)
            .map_err(|e| SpecError { path: "coefficients.diffusion".into(), message: e.to_string() })?;
        Ok(Instance { fam, drift, diffusion, x })
    }

    fn market_with(&self, tree: &ScenarioTree, m: &MarketSpec) -> Result<MarketModel, SpecError> {
        let t = self.start;
        let nn = tree.n_steps();
        let span: Vec<usize> = (t..nn).collect();
        let scal = |path: &str, c: &Coef<f64>, levels: &[usize]| -> Result<Vec<RandomVector>, SpecError> {
            let vc = map_coef(c, |v| Vector::Scalar(*v));
            expand_vectors(tree, path, &vc, levels, Some(1))
        };
        let proc = |path: &str, c: &Coef<f64>| -> Result<AdaptedProcess, SpecError> {
            AdaptedProcess::new(t, scal(path, c, &span)?).map_err(|e| SpecError { path: path.into(), message: e.to_string() })
        };
        let vol = proc("market.vol", &m.vol)?;
        let beta = scal("market.beta", &m.beta, &[nn])?.remove(0);
        let min_of = |vs: &[f64]| vs.iter().copied().fold(f64::INFINITY, f64::min);
        let eps_vol = m.eps_vol.unwrap_or_else(|| min_of(&vol.entries.iter().flat_map(|e| e.values.clone()).collect::<Vec<_>>()));
        let eps_beta = m.eps_beta.unwrap_or_else(|| min_of(&beta.values));
        let market = MarketModel {
            tree: tree.clone(),
            start: t,
            x0: scal("market.x0", &m.x0, &[t])?.remove(0),
            r: proc("market.r", &m.r)?,
            mu: proc("market.mu", &m.mu)?,
            vol,
            beta,
            eps_vol,
            eps_beta,
        };
        market.validate().map_err(|e| SpecError { path: "market".into(), message: e.to_string() })?;
        Ok(market)
    }
}

fn map_coef<T, U>(c: &Coef<T>, f: impl Fn(&T) -> U) -> Coef<U> {
    match c {
        Coef::Constant(v) => Coef::Constant(f(v)),
        Coef::PerLevel(v) => Coef::PerLevel(v.iter().map(&f).collect()),
        Coef::Nodes(v) => Coef::Nodes(v.iter().map(|l| l.iter().map(&f).collect()).collect()),
    }
}

/// Resolves a shorthand into one value per node of each level.
fn per_node<'a, T>(tree: &ScenarioTree, path: &str, c: &'a Coef<T>, levels: &[usize]) -> Result<Vec<Vec<&'a T>>, SpecError> {
    match c {
        Coef::Constant(v) => Ok(levels.iter().map(|&j| vec![v; tree.level_size(j)]).collect()),
        Coef::PerLevel(vs) => {
            if vs.len() != levels.len() {
                return err(&format!("{path}.per_level"), format!("expected {} levels, got {}", levels.len(), vs.len()));
            }
            Ok(levels.iter().zip(vs).map(|(&j, v)| vec![v; tree.level_size(j)]).collect())
        }
        Coef::Nodes(vs) => {
            if vs.len() != levels.len() {
                return err(&format!("{path}.nodes"), format!("expected {} levels, got {}", levels.len(), vs.len()));
            }
            levels
                .iter()
                .zip(vs)
                .enumerate()
                .map(|(i, (&j, v))| {
                    if v.len() != tree.level_size(j) {
                        return err(&format!("{path}.nodes[{i}]"), format!("expected {} nodes, got {}", tree.level_size(j), v.len()));
                    }
                    Ok(v.iter().collect())
                })
                .collect()
        }
    }
}

fn to_matrix(path: &str, m: &Matrix) -> Result<DMatrix<f64>, SpecError> {
    match m {
        Matrix::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
        Matrix::Rows(rows) => {
            let cols = rows.first().map(|r| r.len()).unwrap_or(0);
            if rows.iter().any(|r| r.len() != cols) {
                return err(path, "ragged matrix rows");
            }
            Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
        }
    }
}

fn to_vector(m: &Vector) -> Vec<f64> {
    match m {
        Vector::Scalar(v) => vec![*v],
        Vector::Entries(v) => v.clone(),
    }
}

/// Node matrices per level; `shape` entries of `None` are inferred and must agree across nodes.
fn expand_matrices(
    tree: &ScenarioTree,
    path: &str,
    c: &Coef<Matrix>,
    levels: &[usize],
    rows: Option<usize>,
    cols: Option<usize>,
) -> Result<Vec<NodeMatrices>, SpecError> {
    let nodes = per_node(tree, path, c, levels)?;
    let mut out = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for (&j, vals) in levels.iter().zip(nodes) {
        let mats = vals.into_iter().map(|m| to_matrix(path, m)).collect::<Result<Vec<_>, _>>()?;
        for m in &mats {
            let s = m.shape();
            if rows.is_some_and(|r| r != s.0) || cols.is_some_and(|c| c != s.1) || shape.is_some_and(|sh| sh != s) {
                let want = shape.unwrap_or((rows.unwrap_or(s.0), cols.unwrap_or(s.1)));
                return err(path, format!("expected {}x{} matrices at level {j}, got {}x{}", want.0, want.1, s.0, s.1));
            }
            shape = Some(s);
        }
        out.push(NodeMatrices::new(j, mats).map_err(|e| SpecError { path: path.into(), message: e.to_string() })?);
    }
    Ok(out)
}

fn expand_vectors(tree: &ScenarioTree, path: &str, c: &Coef<Vector>, levels: &[usize], dim: Option<usize>) -> Result<Vec<RandomVector>, SpecError> {
    let nodes = per_node(tree, path, c, levels)?;
    let mut out = Vec::new();
    let mut d = dim;
    for (&j, vals) in levels.iter().zip(nodes) {
        let mut values = Vec::new();
        for v in vals {
            let v = to_vector(v);
            if d.is_some_and(|d| d != v.len()) {
                return err(path, format!("expected vectors of length {} at level {j}, got {}", d.unwrap_or(0), v.len()));
            }
            d = Some(v.len());
            values.extend(v);
        }
        out.push(RandomVector::from_values(j, d.unwrap_or(0), values));
    }
    Ok(out)
}

fn opt_vectors(tree: &ScenarioTree, path: &str, c: Option<&Coef<Vector>>, levels: &[usize], dim: usize) -> Result<Vec<RandomVector>, SpecError> {
    match c {
        Some(c) => expand_vectors(tree, path, c, levels, Some(dim)),
        None => Ok(levels.iter().map(|&j| RandomVector::zeros(tree, j, dim)).collect()),
    }
}

fn opt_matrices(
    tree: &ScenarioTree,
    path: &str,
    c: Option<&Coef<Matrix>>,
    levels: &[usize],
    rows: usize,
    cols: usize,
) -> Result<Vec<NodeMatrices>, SpecError> {
    match c {
        Some(c) => expand_matrices(tree, path, c, levels, Some(rows), Some(cols)),
        None => Ok(levels.iter().map(|&j| NodeMatrices::zeros(tree, j, rows, cols)).collect()),
    }
}

fn check_rank(path: &str, count: usize, k: Option<usize>) -> Result<(), SpecError> {
    match k {
        Some(k) if count > k => err(path, format!("{count} mean-field terms exceed dims.k = {k}")),
        _ => Ok(()),
    }
}

/// Transposes [term][level] into [level][term].
fn transpose_levels<T>(by_term: Vec<Vec<T>>, levels: usize) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = (0..levels).map(|_| Vec::new()).collect();
    for term in by_term {
        for (i, v) in term.into_iter().enumerate() {
            out[i].push(v);
        }
    }
    out
}

fn level_family(
    tree: &ScenarioTree,
    path: &str,
    spec: Option<&LevelFamilySpec>,
    levels: &[usize],
    rows: usize,
    cols: usize,
    k: Option<usize>,
) -> Result<Vec<LevelFamily>, SpecError> {
    let empty = LevelFamilySpec::default();
    let spec = spec.unwrap_or(&empty);
    check_rank(path, spec.tilde.len(), k)?;
    if spec.bar.len() != spec.tilde.len() {
        return err(path, format!("{} bar terms but {} tilde terms", spec.bar.len(), spec.tilde.len()));
    }
    let base = opt_matrices(tree, &format!("{path}.base"), spec.base.as_ref(), levels, rows, cols)?;
    let tilde = spec
        .tilde
        .iter()
        .enumerate()
        .map(|(i, c)| expand_matrices(tree, &format!("{path}.tilde[{i}]"), c, levels, None, Some(cols)))
        .collect::<Result<Vec<_>, _>>()?;
    let bar = spec
        .bar
        .iter()
        .enumerate()
        .map(|(i, c)| expand_matrices(tree, &format!("{path}.bar[{i}]"), c, levels, Some(rows), Some(tilde[i][0].rows)))
        .collect::<Result<Vec<_>, _>>()?;
    let bar = transpose_levels(bar, levels.len());
    let tilde = transpose_levels(tilde, levels.len());
    Ok(base
        .into_iter()
        .zip(bar.into_iter().zip(tilde))
        .map(|(base, (bar, tilde))| LevelFamily { base, bar, tilde })
        .collect())
}

/// Self-adjoint families: bar is dim × p_k, tilde p_k × dim, hat p_i × p_j (zeros when omitted).
fn sym_family(
    tree: &ScenarioTree,
    path: &str,
    spec: Option<&BlockFamilySpec>,
    levels: &[usize],
    dim: usize,
    k: Option<usize>,
) -> Result<Vec<SymFamily>, SpecError> {
    let empty = BlockFamilySpec::default();
    let spec = spec.unwrap_or(&empty);
    check_rank(path, spec.tilde.len(), k)?;
    let base = opt_matrices(tree, &format!("{path}.base"), spec.base.as_ref(), levels, dim, dim)?;
    let tilde = spec
        .tilde
        .iter()
        .enumerate()
        .map(|(i, c)| expand_matrices(tree, &format!("{path}.tilde[{i}]"), c, levels, None, Some(dim)))
        .collect::<Result<Vec<_>, _>>()?;
    let p: Vec<usize> = tilde.iter().map(|t| t[0].rows).collect();
    let bar = if spec.bar.is_empty() {
        p.iter().map(|&pk| levels.iter().map(|&j| NodeMatrices::zeros(tree, j, dim, pk)).collect()).collect()
    } else {
        if spec.bar.len() != p.len() {
            return err(&format!("{path}.bar"), format!("expected {} terms, got {}", p.len(), spec.bar.len()));
        }
        spec.bar
            .iter()
            .enumerate()
            .map(|(i, c)| expand_matrices(tree, &format!("{path}.bar[{i}]"), c, levels, Some(dim), Some(p[i])))
            .collect::<Result<Vec<_>, _>>()?
    };
    let hat = hat_blocks(tree, path, &spec.hat, levels, &p, &p)?;
    let bar = transpose_levels(bar, levels.len());
    let tilde = transpose_levels(tilde, levels.len());
    Ok(base
        .into_iter()
        .zip(bar.into_iter().zip(tilde.into_iter().zip(hat)))
        .map(|(base, (bar, (tilde, hat)))| SymFamily { base, bar, tilde, hat })
        .collect())
}

/// hat[i][j] per level, rows × cols partitions given.
fn hat_blocks(
    tree: &ScenarioTree,
    path: &str,
    spec: &[Vec<Coef<Matrix>>],
    levels: &[usize],
    rows: &[usize],
    cols: &[usize],
) -> Result<Vec<Vec<Vec<NodeMatrices>>>, SpecError> {
    let mut out: Vec<Vec<Vec<NodeMatrices>>> = levels.iter().map(|_| vec![Vec::new(); rows.len()]).collect();
    if !spec.is_empty() && (spec.len() != rows.len() || spec.iter().any(|r| r.len() != cols.len())) {
        return err(&format!("{path}.hat"), format!("expected a {}x{} block table", rows.len(), cols.len()));
    }
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            let blocks = match spec.get(i).and_then(|row| row.get(j)) {
                Some(cf) => expand_matrices(tree, &format!("{path}.hat[{i}][{j}]"), cf, levels, Some(r), Some(c))?,
                None => levels.iter().map(|&l| NodeMatrices::zeros(tree, l, r, c)).collect(),
            };
            for (li, b) in blocks.into_iter().enumerate() {
                out[li][i].push(b);
            }
        }
    }
    Ok(out)
}

/// S: base m × n, bar p^Q_k × m, tilde p^R_k × n, hat p^R_i × p^Q_j.
#[allow(clippy::too_many_arguments)]
fn cross_family(
    tree: &ScenarioTree,
    path: &str,
    spec: Option<&BlockFamilySpec>,
    levels: &[usize],
    q: &[SymFamily],
    r: &[SymFamily],
    n: usize,
    m: usize,
) -> Result<Vec<CrossFamily>, SpecError> {
    let empty = BlockFamilySpec::default();
    let spec = spec.unwrap_or(&empty);
    let pq: Vec<usize> = q.first().map(|f| f.tilde.iter().map(|t| t.rows).collect()).unwrap_or_default();
    let pr: Vec<usize> = r.first().map(|f| f.tilde.iter().map(|t| t.rows).collect()).unwrap_or_default();
    let base = opt_matrices(tree, &format!("{path}.base"), spec.base.as_ref(), levels, m, n)?;
    let terms = |list: &[Coef<Matrix>], name: &str, dims: &[usize], cols: usize| -> Result<Vec<Vec<NodeMatrices>>, SpecError> {
        if list.is_empty() {
            return Ok(dims.iter().map(|&p| levels.iter().map(|&j| NodeMatrices::zeros(tree, j, p, cols)).collect()).collect());
        }
        if list.len() != dims.len() {
            return err(&format!("{path}.{name}"), format!("expected {} terms, got {}", dims.len(), list.len()));
        }
        list.iter()
            .enumerate()
            .map(|(i, c)| expand_matrices(tree, &format!("{path}.{name}[{i}]"), c, levels, Some(dims[i]), Some(cols)))
            .collect()
    };
    let bar = transpose_levels(terms(&spec.bar, "bar", &pq, m)?, levels.len());
    let tilde = transpose_levels(terms(&spec.tilde, "tilde", &pr, n)?, levels.len());
    let hat = hat_blocks(tree, path, &spec.hat, levels, &pr, &pq)?;
    Ok(base
        .into_iter()
        .zip(bar.into_iter().zip(tilde.into_iter().zip(hat)))
        .map(|(base, (bar, (tilde, hat)))| CrossFamily { base, bar, tilde, hat })
        .collect())
}

/// Linear-term companions (ḡ_k etc.): one vector of the family's p_k per term; zeros when omitted.
fn bar_vectors(
    tree: &ScenarioTree,
    path: &str,
    spec: &[Coef<Vector>],
    levels: &[usize],
    fams: &[&SymFamily],
) -> Result<Vec<Vec<RandomVector>>, SpecError> {
    let p: Vec<usize> = fams.first().map(|f| f.tilde.iter().map(|t| t.rows).collect()).unwrap_or_default();
    if spec.is_empty() {
        return Ok(p.iter().map(|&pk| levels.iter().map(|&j| RandomVector::zeros(tree, j, pk)).collect()).collect());
    }
    if spec.len() != p.len() {
        return err(path, format!("expected {} terms, got {}", p.len(), spec.len()));
    }
    spec.iter()
        .enumerate()
        .map(|(i, c)| expand_vectors(tree, &format!("{path}[{i}]"), c, levels, Some(p[i])))
        .collect()
}

fn matrix_out(m: &DMatrix<f64>) -> Matrix {
    Matrix::Rows((0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
}

fn node_coef(levels: &[&NodeMatrices]) -> Coef<Matrix> {
    Coef::Nodes(levels.iter().map(|l| l.mats.iter().map(matrix_out).collect()).collect())
}

fn vector_coef(levels: &[RandomVector]) -> Coef<Vector> {
    Coef::Nodes(
        levels
            .iter()
            .map(|v| (0..v.nodes()).map(|k| Vector::Entries(v.node(k).to_vec())).collect())
            .collect(),
    )
}

fn scalar_coef(levels: &[RandomVector]) -> Coef<f64> {
    Coef::Nodes(levels.iter().map(|v| v.values.clone()).collect())
}

fn terms_coef<'a>(count: usize, levels: usize, get: impl Fn(usize, usize) -> &'a NodeMatrices) -> Vec<Coef<Matrix>> {
    (0..count).map(|k| node_coef(&(0..levels).map(|i| get(i, k)).collect::<Vec<_>>())).collect()
}

fn level_spec(fams: &[LevelFamily]) -> LevelFamilySpec {
    let l = fams.len();
    let k = fams[0].tilde.len();
    LevelFamilySpec {
        base: Some(node_coef(&fams.iter().map(|f| &f.base).collect::<Vec<_>>())),
        bar: terms_coef(k, l, |i, t| &fams[i].bar[t]),
        tilde: terms_coef(k, l, |i, t| &fams[i].tilde[t]),
    }
}

fn block_spec(
    l: usize,
    base: impl Fn(usize) -> NodeMatrices,
    bar: impl Fn(usize) -> Vec<NodeMatrices>,
    tilde: impl Fn(usize) -> Vec<NodeMatrices>,
    hat: impl Fn(usize) -> Vec<Vec<NodeMatrices>>,
) -> BlockFamilySpec {
    let bases: Vec<NodeMatrices> = (0..l).map(&base).collect();
    let bars: Vec<Vec<NodeMatrices>> = (0..l).map(&bar).collect();
    let tildes: Vec<Vec<NodeMatrices>> = (0..l).map(&tilde).collect();
    let hats: Vec<Vec<Vec<NodeMatrices>>> = (0..l).map(&hat).collect();
    BlockFamilySpec {
        base: Some(node_coef(&bases.iter().collect::<Vec<_>>())),
        bar: terms_coef(bars[0].len(), l, |i, t| &bars[i][t]),
        tilde: terms_coef(tildes[0].len(), l, |i, t| &tildes[i][t]),
        hat: (0..hats[0].len())
            .map(|a| (0..hats[0][a].len()).map(|b| node_coef(&(0..l).map(|i| &hats[i][a][b]).collect::<Vec<_>>())).collect())
            .collect(),
    }
}

fn sym_spec(fams: &[SymFamily]) -> BlockFamilySpec {
    block_spec(fams.len(), |i| fams[i].base.clone(), |i| fams[i].bar.clone(), |i| fams[i].tilde.clone(), |i| fams[i].hat.clone())
}

fn coefficients_of(inst: &Instance) -> Coefficients {
    let f = &inst.fam;
    let s = &f.s;
    let by_term = |v: &[Vec<RandomVector>]| -> Vec<Coef<Vector>> {
        let k = v.first().map(|l| l.len()).unwrap_or(0);
        (0..k).map(|t| vector_coef(&v.iter().map(|l| l[t].clone()).collect::<Vec<_>>())).collect()
    };
    Coefficients {
        a: Some(level_spec(&f.a)),
        b: Some(level_spec(&f.b)),
        c: Some(level_spec(&f.c)),
        d: Some(level_spec(&f.d)),
        g: Some(sym_spec(std::slice::from_ref(&f.g))),
        q: Some(sym_spec(&f.q)),
        s: Some(block_spec(s.len(), |i| s[i].base.clone(), |i| s[i].bar.clone(), |i| s[i].tilde.clone(), |i| s[i].hat.clone())),
        r: Some(sym_spec(&f.r)),
        g0: Some(vector_coef(std::slice::from_ref(&f.g0))),
        gbar: f.gbar.iter().map(|v| vector_coef(std::slice::from_ref(v))).collect(),
        q0: Some(vector_coef(&f.q0)),
        qbar: by_term(&f.qbar),
        rho0: Some(vector_coef(&f.rho0)),
        rhobar: by_term(&f.rhobar),
        drift: Some(vector_coef(&inst.drift.entries)),
        diffusion: Some(vector_coef(&inst.diffusion.entries)),
    }
}
