//! Small reference instances and seeded random generators used by tests, benches and the CLI.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::LQProblem;
use crate::error::Result;
use crate::mean_variance::MarketModel;
use crate::meanfield::{build_problem, CrossFamily, LevelFamily, MFFamilies, SymFamily};
use crate::operators::NodeMatrices;
use crate::tree::{AdaptedProcess, RandomVector, ScenarioTree};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A family set together with its inhomogeneities and initial state.
#[derive(Debug, Clone)]
pub struct Instance {
    pub fam: MFFamilies,
    pub drift: AdaptedProcess,
    pub diffusion: AdaptedProcess,
    pub x: RandomVector,
}

impl Instance {
    pub fn problem(&self) -> Result<LQProblem> {
        build_problem(&self.fam, &self.drift, &self.diffusion)
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.fam.tree
    }
}

fn scalar(tree: &ScenarioTree, level: usize, v: f64) -> NodeMatrices {
    NodeMatrices::constant(tree, level, &DMatrix::from_element(1, 1, v))
}

/// The variance operator ξ − E[ξ] as a family, via 𝐆 = [[1,−1],[−1,1]].
pub fn variance_family(tree: &ScenarioTree, level: usize) -> SymFamily {
    SymFamily {
        base: scalar(tree, level, 1.0),
        bar: vec![scalar(tree, level, -1.0)],
        tilde: vec![scalar(tree, level, 1.0)],
        hat: vec![vec![scalar(tree, level, 1.0)]],
    }
}

/// The same operator via 𝐆 = [[1,0],[0,−1]], which is not positive semidefinite.
pub fn variance_family_indefinite(tree: &ScenarioTree, level: usize) -> SymFamily {
    SymFamily {
        base: scalar(tree, level, 1.0),
        bar: vec![scalar(tree, level, 0.0)],
        tilde: vec![scalar(tree, level, 1.0)],
        hat: vec![vec![scalar(tree, level, -1.0)]],
    }
}

/// DESK-1: scalar, binomial, three steps of 1/3, x = 1.
///
/// Aξ = 0.1ξ + 0.5E[ξ], B = 1, C = 0.2, D = 0.5, b = σ = 0.1, G = ξ − E[ξ],
/// Q = S = 0, R = 1, g = −0.5, q = 0, ρ = 0.1.
pub fn desk1() -> Instance {
    let tree = ScenarioTree::new(3, 1.0 / 3.0, 2).expect("desk tree");
    let mut fam = MFFamilies::zeros(&tree, 0, 1, 1);
    for j in 0..3 {
        fam.a[j] = LevelFamily {
            base: scalar(&tree, j, 0.1),
            bar: vec![scalar(&tree, j, 0.5)],
            tilde: vec![scalar(&tree, j, 1.0)],
        };
        fam.b[j] = LevelFamily::pointwise(scalar(&tree, j, 1.0));
        fam.c[j] = LevelFamily::pointwise(scalar(&tree, j, 0.2));
        fam.d[j] = LevelFamily::pointwise(scalar(&tree, j, 0.5));
        fam.rho0[j] = RandomVector::constant(&tree, j, &[0.1]);
    }
    fam.g = variance_family(&tree, 3);
    fam.g0 = RandomVector::constant(&tree, 3, &[-0.5]);
    fam.gbar = vec![RandomVector::zeros(&tree, 3, 1)];
    Instance {
        drift: AdaptedProcess::constant(&tree, 0, 2, &[0.1]),
        diffusion: AdaptedProcess::constant(&tree, 0, 2, &[0.1]),
        x: RandomVector::constant(&tree, 0, &[1.0]),
        fam,
    }
}

/// DESK-1 with B = 3 and D = 1.5: a single full continuation step does not contract.
pub fn desk1_overcoupled() -> Instance {
    let mut inst = desk1();
    let tree = inst.fam.tree.clone();
    for j in 0..3 {
        inst.fam.b[j] = LevelFamily::pointwise(scalar(&tree, j, 3.0));
        inst.fam.d[j] = LevelFamily::pointwise(scalar(&tree, j, 1.5));
    }
    inst
}

/// DESK-MV: β ≡ 1, r ≡ 0, vol ≡ 1, μ ≡ 0.3 (θ ≡ 0.3), three binomial steps on [0,1], x₀ = 1.
pub fn desk_mv() -> MarketModel {
    let tree = ScenarioTree::new(3, 1.0 / 3.0, 2).expect("desk tree");
    MarketModel::constant(&tree, 0, 1.0, 0.0, 0.3, 1.0, 1.0)
}

/// Shape of a random family instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSpec {
    pub n: usize,
    pub m: usize,
    /// mean-field rank of every family
    pub k: usize,
    pub n_steps: usize,
    pub delta_t: f64,
    /// lower bound on R in the stacked sense
    pub delta: f64,
    /// scale of the state coefficients
    pub coupling: f64,
    /// force every S family to zero
    pub zero_s: bool,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec { n: 1, m: 1, k: 1, n_steps: 3, delta_t: 0.25, delta: 0.5, coupling: 0.5, zero_s: false }
    }
}

impl RandomSpec {
    /// Random dims n, m, K ≤ 2 and 2..=5 steps.
    pub fn draw(rng: &mut impl Rng) -> Self {
        RandomSpec {
            n: rng.random_range(1..=2),
            m: rng.random_range(1..=2),
            k: rng.random_range(0..=2),
            n_steps: rng.random_range(2..=5),
            delta_t: 0.25,
            ..Default::default()
        }
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn random_nodes(rng: &mut impl Rng, tree: &ScenarioTree, level: usize, rows: usize, cols: usize, scale: f64) -> NodeMatrices {
    let mats = (0..tree.level_size(level)).map(|_| uniform(rng, rows, cols, scale)).collect();
    NodeMatrices { level, rows, cols, mats }
}

fn random_vector(rng: &mut impl Rng, tree: &ScenarioTree, level: usize, dim: usize, scale: f64) -> RandomVector {
    let v = (0..tree.level_size(level) * dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    RandomVector::from_values(level, dim, v)
}

/// Positive semidefinite LLᵀ with L having `rank` columns.
fn random_psd(rng: &mut impl Rng, size: usize, rank: usize, scale: f64) -> DMatrix<f64> {
    let l = uniform(rng, size, rank, scale);
    &l * l.transpose()
}

fn level_family(rng: &mut impl Rng, tree: &ScenarioTree, level: usize, rows: usize, cols: usize, k: usize, scale: f64) -> LevelFamily {
    let mut f = LevelFamily::pointwise(random_nodes(rng, tree, level, rows, cols, scale));
    for _ in 0..k {
        let p = rng.random_range(1..=2);
        f.bar.push(random_nodes(rng, tree, level, rows, p, scale));
        f.tilde.push(random_nodes(rng, tree, level, p, cols, 1.0));
    }
    f
}

/// Splits the stacked node matrices of a symmetric family.
fn sym_from_stacked(level: usize, n: usize, dims: &[usize], stacked: &[DMatrix<f64>], tilde: Vec<NodeMatrices>) -> SymFamily {
    let nodes = stacked.len();
    let offs: Vec<usize> = dims.iter().scan(n, |o, d| {
        let s = *o;
        *o += d;
        Some(s)
    }).collect();
    let take = |r0: usize, c0: usize, r: usize, c: usize| NodeMatrices {
        level,
        rows: r,
        cols: c,
        mats: (0..nodes).map(|k| stacked[k].view((r0, c0), (r, c)).into_owned()).collect(),
    };
    SymFamily {
        base: take(0, 0, n, n),
        bar: dims.iter().zip(&offs).map(|(d, o)| take(*o, 0, *d, n)).collect(),
        tilde,
        hat: dims
            .iter()
            .zip(&offs)
            .map(|(di, oi)| dims.iter().zip(&offs).map(|(dj, oj)| take(*oi, *oj, *di, *dj)).collect())
            .collect(),
    }
}

fn rank_dims(rng: &mut impl Rng, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(1..=2)).collect()
}

/// Random family set satisfying the stacked-matrix condition with the given δ.
pub fn random_instance(rng: &mut impl Rng, spec: &RandomSpec) -> Result<Instance> {
    let tree = ScenarioTree::new(spec.n_steps, spec.delta_t, 2)?;
    let (n, m, nn) = (spec.n, spec.m, spec.n_steps);
    let mut fam = MFFamilies::zeros(&tree, 0, n, m);
    let sc = spec.coupling;
    for j in 0..nn {
        fam.a[j] = level_family(rng, &tree, j, n, n, spec.k, sc);
        fam.b[j] = level_family(rng, &tree, j, n, m, spec.k, sc);
        fam.c[j] = level_family(rng, &tree, j, n, n, spec.k, sc);
        fam.d[j] = level_family(rng, &tree, j, n, m, spec.k, sc);

        let qd = rank_dims(rng, spec.k);
        let rd = rank_dims(rng, spec.k);
        let (pq, pr): (usize, usize) = (qd.iter().sum(), rd.iter().sum());
        let size = n + pq + m + pr;
        let mut qs = Vec::new();
        let mut ss = Vec::new();
        let mut rs = Vec::new();
        for _ in 0..tree.level_size(j) {
            let mut big = random_psd(rng, size, size, 0.6);
            if spec.zero_s {
                big.view_mut((n + pq, 0), (m + pr, n + pq)).fill(0.0);
                big.view_mut((0, n + pq), (n + pq, m + pr)).fill(0.0);
            }
            qs.push(big.view((0, 0), (n + pq, n + pq)).into_owned());
            ss.push(big.view((n + pq, 0), (m + pr, n + pq)).into_owned());
            let mut r = big.view((n + pq, n + pq), (m + pr, m + pr)).into_owned();
            for d in 0..m {
                r[(d, d)] += spec.delta;
            }
            rs.push(r);
        }
        let q_tilde: Vec<NodeMatrices> = qd.iter().map(|p| random_nodes(rng, &tree, j, *p, n, 1.0)).collect();
        let r_tilde: Vec<NodeMatrices> = rd.iter().map(|p| random_nodes(rng, &tree, j, *p, m, 1.0)).collect();
        let q = sym_from_stacked(j, n, &qd, &qs, q_tilde);
        let r = sym_from_stacked(j, m, &rd, &rs, r_tilde);
        let nodes = tree.level_size(j);
        let take = |r0: usize, c0: usize, rr: usize, cc: usize| NodeMatrices {
            level: j,
            rows: rr,
            cols: cc,
            mats: (0..nodes).map(|k| ss[k].view((r0, c0), (rr, cc)).into_owned()).collect(),
        };
        let mut s = CrossFamily::pointwise(take(0, 0, m, n));
        let mut off = n;
        for d in &qd {
            s.bar.push(take(0, off, m, *d).transpose());
            off += d;
        }
        let mut roff = m;
        for d in &rd {
            s.tilde.push(take(roff, 0, *d, n));
            roff += d;
        }
        if spec.k > 0 {
            let mut ro = m;
            for di in &rd {
                let mut row = Vec::new();
                let mut co = n;
                for dj in &qd {
                    row.push(take(ro, co, *di, *dj));
                    co += dj;
                }
                s.hat.push(row);
                ro += di;
            }
        }
        fam.q[j] = q;
        fam.s[j] = s;
        fam.r[j] = r;
        fam.q0[j] = random_vector(rng, &tree, j, n, 0.5);
        fam.qbar[j] = qd.iter().map(|p| random_vector(rng, &tree, j, *p, 0.5)).collect();
        fam.rho0[j] = random_vector(rng, &tree, j, m, 0.5);
        fam.rhobar[j] = rd.iter().map(|p| random_vector(rng, &tree, j, *p, 0.5)).collect();
    }
    let gd = rank_dims(rng, spec.k);
    let pg: usize = gd.iter().sum();
    let gs: Vec<DMatrix<f64>> = (0..tree.level_size(nn)).map(|_| random_psd(rng, n + pg, n + pg, 0.6)).collect();
    let g_tilde = gd.iter().map(|p| random_nodes(rng, &tree, nn, *p, n, 1.0)).collect();
    fam.g = sym_from_stacked(nn, n, &gd, &gs, g_tilde);
    fam.g0 = random_vector(rng, &tree, nn, n, 0.5);
    fam.gbar = gd.iter().map(|p| random_vector(rng, &tree, nn, *p, 0.5)).collect();
    fam.check()?;
    Ok(Instance {
        drift: random_process(rng, &tree, 0, nn - 1, n, 0.3),
        diffusion: random_process(rng, &tree, 0, nn - 1, n, 0.3),
        x: random_vector(rng, &tree, 0, n, 1.0),
        fam,
    })
}

pub fn random_process(rng: &mut impl Rng, tree: &ScenarioTree, start: usize, end: usize, dim: usize, scale: f64) -> AdaptedProcess {
    AdaptedProcess { start, entries: (start..=end).map(|j| random_vector(rng, tree, j, dim, scale)).collect() }
}

pub fn random_rv(rng: &mut impl Rng, tree: &ScenarioTree, level: usize, dim: usize, scale: f64) -> RandomVector {
    random_vector(rng, tree, level, dim, scale)
}

/// Random mean-field operator with `k` terms of rank ≤ 2.
pub fn random_operator(rng: &mut impl Rng, tree: &ScenarioTree, level: usize, dim_out: usize, dim_in: usize, k: usize) -> Result<crate::operators::MeanFieldOperator> {
    let f = level_family(rng, tree, level, dim_out, dim_in, k, 1.0);
    let terms = f
        .bar
        .into_iter()
        .zip(f.tilde)
        .map(|(bar, tilde)| crate::operators::MeanFieldTerm { bar, tilde })
        .collect();
    crate::operators::MeanFieldOperator::new(f.base, terms)
}

/// Random (H6) market; with `random_rate` the rate is node-dependent via r = κ + θ².
pub fn random_market(rng: &mut impl Rng, n_steps: usize, delta_t: f64, random_rate: bool) -> Result<MarketModel> {
    let tree = ScenarioTree::new(n_steps, delta_t, 2)?;
    let mut r = Vec::new();
    let mut mu = Vec::new();
    let mut vol = Vec::new();
    for j in 0..n_steps {
        let kappa: f64 = rng.random_range(0.1..0.2);
        let c: f64 = rng.random_range(0.05..0.3);
        let nodes = tree.level_size(j);
        let (mut rv, mut mv, mut vv) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..nodes {
            let th = if random_rate {
                rng.random_range(-0.3..0.3)
            } else if rng.random_bool(0.5) {
                c
            } else {
                -c
            };
            let rate = if random_rate { kappa + th * th } else { kappa + c * c };
            let v = rng.random_range(0.1..0.3);
            rv.push(rate);
            vv.push(v);
            mv.push(rate + v * th);
        }
        r.push(RandomVector::from_values(j, 1, rv));
        mu.push(RandomVector::from_values(j, 1, mv));
        vol.push(RandomVector::from_values(j, 1, vv));
    }
    let leaves = tree.level_size(n_steps);
    let beta: Vec<f64> = (0..leaves).map(|_| rng.random_range(1.0..2.0)).collect();
    let eps_beta = beta.iter().copied().fold(f64::INFINITY, f64::min);
    let vol = AdaptedProcess::new(0, vol)?;
    let eps_vol = vol.entries.iter().flat_map(|e| e.values.iter().copied()).fold(f64::INFINITY, f64::min);
    let market = MarketModel {
        x0: RandomVector::constant(&tree, 0, &[rng.random_range(0.5..1.5)]),
        r: AdaptedProcess::new(0, r)?,
        mu: AdaptedProcess::new(0, mu)?,
        vol,
        beta: RandomVector::from_values(n_steps, 1, beta),
        eps_vol,
        eps_beta,
        start: 0,
        tree,
    };
    market.validate()?;
    Ok(market)
}
