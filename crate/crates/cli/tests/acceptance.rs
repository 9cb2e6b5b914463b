//! Acceptance run: one PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use oplq::dynamics::{backward_sde, forward_sde, forward_with, homogeneous_cost, total_cost};
use oplq::fbsde::{continuation_solve, optimal_control, solve_direct, ContinuationOptions};
use oplq::fixtures::{
    desk1_overcoupled, random_instance, random_market, random_operator, random_process, random_rv, rng,
    variance_family, variance_family_indefinite, Instance, RandomSpec,
};
use oplq::lq::{assemble_quadform, convexity_spectrum, probed_minimizer, solve_quadform};
use oplq::mean_variance::{
    build_gmv, equivalence_constant, equivalent_problem, solve_gmv, tikhonov_portfolio, transform_check,
};
use oplq::meanfield::{resolvent_control, verify_assumptions, FredholmKernel, MFFamilies};
use oplq::operators::check_positivity;
use oplq::{AdaptedProcess, Error, FbsdeData, FbsdeSolution, MeanFieldOperator, OperatorProcess, RandomVector, ScenarioTree};
use oplq_cli::commands::rel_diff;
use oplq_cli::{recompute, ProblemSpec, Recomputed, ResultDoc};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<T>(r: oplq::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Random instance whose assumption report passes; redraws otherwise.
fn passing_instance(r: &mut ChaCha8Rng, shape: impl Fn(&mut ChaCha8Rng) -> RandomSpec) -> Result<(Instance, RandomSpec), String> {
    for _ in 0..50 {
        let spec = shape(r);
        let inst = e2s(random_instance(r, &spec))?;
        if e2s(verify_assumptions(&inst.fam, spec.delta))?.passed() {
            return Ok((inst, spec));
        }
    }
    Err("no passing instance in 50 draws".into())
}

fn draw(r: &mut ChaCha8Rng) -> RandomSpec {
    RandomSpec::draw(r)
}

fn sol_dist(a: &FbsdeSolution, b: &FbsdeSolution) -> f64 {
    let d = |p: &AdaptedProcess, q: &AdaptedProcess| p.sub(q).map(|x| x.max_abs()).unwrap_or(f64::INFINITY);
    d(&a.x, &b.x).max(d(&a.y, &b.y)).max(d(&a.z, &b.z))
}

fn three_route_agreement() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1001);
    let mut worst: f64 = 0.0;
    for i in 0..30 {
        let (inst, _) = passing_instance(&mut r, draw)?;
        let p = e2s(inst.problem())?;
        let tree = &p.tree;
        let data = e2s(FbsdeData::from_problem(&p, &inst.x))?;
        let sol = e2s(continuation_solve(&data, &ContinuationOptions::default()))?;
        let ua = e2s(optimal_control(&sol, &p))?;
        let (ub, _) = e2s(solve_quadform(&e2s(assemble_quadform(&p, &inst.x))?))?;
        let levels = (p.start..tree.n_steps())
            .map(|j| resolvent_control(&inst.fam, &sol, j).map(|rc| rc.control))
            .collect::<oplq::Result<Vec<_>>>();
        let uc = e2s(AdaptedProcess::new(p.start, e2s(levels)?))?;
        let ud = e2s(probed_minimizer(&p, &inst.x))?;
        let routes = [&ua, &ub, &uc, &ud];
        for (a, x) in routes.iter().enumerate() {
            for y in &routes[a + 1..] {
                let d = e2s(rel_diff(tree, x, y))?;
                worst = worst.max(d);
                ensure(d <= 1e-6, || format!("instance {i}: routes differ by {d:.3e}"))?;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs <= 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("30 instances, worst pairwise relative difference {worst:.2e}, {secs:.2} s"))
}

fn discrete_duality() -> Outcome {
    let mut r = rng(1002);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let spec = draw(&mut r);
        let inst = e2s(random_instance(&mut r, &spec))?;
        let p = e2s(inst.problem())?;
        let t = &p.tree;
        let nn = t.n_steps();
        let u = random_process(&mut r, t, 0, nn - 1, p.m, 1.0);
        let xh = e2s(forward_with(&p, &RandomVector::zeros(t, 0, p.n), &u, false))?;
        let phi = random_process(&mut r, t, 0, nn - 1, p.n, 1.0);
        let eta = random_rv(&mut r, t, nn, p.n, 1.0);
        let (y, z) = e2s(backward_sde(t, &p.a, &p.c, &phi, &eta, 0))?;
        let lhs = e2s(t.inner(&eta, xh.at(nn)))?;
        let mut rhs = 0.0;
        let mut mag = lhs.abs();
        for j in 0..nn {
            let yh = e2s(t.cond_expectation(y.at(j + 1)))?;
            let terms = [
                e2s(t.inner(&e2s(p.b.at(j).apply(t, u.at(j)))?, &yh))?,
                e2s(t.inner(&e2s(p.d.at(j).apply(t, u.at(j)))?, z.at(j)))?,
                -e2s(t.inner(xh.at(j), phi.at(j)))?,
            ];
            for v in terms {
                rhs += t.delta() * v;
                mag += (t.delta() * v).abs();
            }
        }
        let rel = (lhs - rhs).abs() / mag.max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        ensure(rel <= 1e-10, || format!("duality gap {rel:.3e}"))?;
    }
    Ok(format!("50 instances, worst relative gap {worst:.2e}"))
}

fn optimality_expansion() -> Outcome {
    let mut r = rng(1003);
    let mut worst: f64 = 0.0;
    let mut min_lhs = f64::INFINITY;
    for _ in 0..10 {
        let (inst, _) = passing_instance(&mut r, draw)?;
        let p = e2s(inst.problem())?;
        let data = e2s(FbsdeData::from_problem(&p, &inst.x))?;
        let u = e2s(optimal_control(&e2s(solve_direct(&data, 1.0))?, &p))?;
        let ju = e2s(total_cost(&p, &inst.x, &u))?;
        let nn = p.tree.n_steps();
        for _ in 0..10 {
            let v = random_process(&mut r, &p.tree, p.start, nn - 1, p.m, 1.0);
            let j0 = e2s(homogeneous_cost(&p, &v))?;
            for alpha in [-2.0, -0.5, 0.5, 2.0] {
                let lhs = e2s(total_cost(&p, &inst.x, &e2s(u.add(&v.scaled(alpha)))?))? - ju;
                let want = alpha * alpha * j0;
                let rel = (lhs - want).abs() / want.abs().max(ju.abs()).max(1.0);
                worst = worst.max(rel);
                min_lhs = min_lhs.min(lhs);
                ensure(rel <= 1e-9, || format!("expansion off by {rel:.3e}"))?;
                ensure(lhs >= -1e-9, || format!("J(u + av) - J(u) = {lhs:.3e} < 0"))?;
            }
        }
    }
    Ok(format!("400 perturbations, worst relative error {worst:.2e}, min increase {min_lhs:.2e}"))
}

fn continuation_behaviour() -> Outcome {
    let mut r = rng(1004);
    let mut worst_ratio: f64 = 0.0;
    let mut worst_diff: f64 = 0.0;
    for i in 0..10 {
        let (inst, _) = passing_instance(&mut r, draw)?;
        let p = e2s(inst.problem())?;
        let data = e2s(FbsdeData::from_problem(&p, &inst.x))?;
        let c = e2s(continuation_solve(&data, &ContinuationOptions::default()))?;
        let d = e2s(solve_direct(&data, 1.0))?;
        for s in c.diagnostics.stages.iter().filter(|s| s.accepted) {
            worst_ratio = worst_ratio.max(s.ratio);
            ensure(s.ratio < 1.0, || format!("instance {i}: accepted stage with ratio {:.3}", s.ratio))?;
        }
        let diff = sol_dist(&c, &d) / e2s(d.norm(&p.tree))?.max(1.0);
        worst_diff = worst_diff.max(diff);
        ensure(diff <= 1e-8, || format!("instance {i}: continuation vs direct {diff:.3e}"))?;
    }
    let inst = desk1_overcoupled();
    let p = e2s(inst.problem())?;
    let data = e2s(FbsdeData::from_problem(&p, &inst.x))?;
    let ratio = match continuation_solve(&data, &ContinuationOptions::with_schedule(vec![1.0])) {
        Err(Error::Diverged { ratio, .. }) => ratio,
        other => return Err(format!("over-coupled single step did not diverge: {other:?}")),
    };
    ensure(ratio >= 1.0, || format!("divergence reported with ratio {ratio}"))?;
    Ok(format!(
        "10 instances, max accepted ratio {worst_ratio:.3}, max distance to direct {worst_diff:.2e}; over-coupled single step ratio {ratio:.2}"
    ))
}

fn convexity() -> Outcome {
    let mut r = rng(1005);
    let mut detail = Vec::new();
    for delta in [0.1, 1.0] {
        let mut worst = f64::INFINITY;
        for _ in 0..10 {
            let (inst, _) = passing_instance(&mut r, |r| RandomSpec { delta, zero_s: true, ..RandomSpec::draw(r) })?;
            let mut p = e2s(inst.problem())?;
            let rep = convexity_spectrum(&e2s(assemble_quadform(&p, &inst.x))?);
            worst = worst.min(rep.min_eigenvalue);
            ensure(rep.convex && rep.min_eigenvalue >= delta - 1e-8, || {
                format!("delta {delta}: min eigenvalue {:.6}", rep.min_eigenvalue)
            })?;
            p.r = OperatorProcess { start: p.r.start, ops: p.r.ops.iter().map(|o| o.scaled(-1.0)).collect() };
            let flipped = convexity_spectrum(&e2s(assemble_quadform(&p, &inst.x))?);
            ensure(!flipped.convex, || format!("delta {delta}: flipped R still convex ({:.3e})", flipped.min_eigenvalue))?;
        }
        detail.push(format!("delta {delta}: min eigenvalue {worst:.4}"));
    }
    Ok(format!("{} (S = 0 instances); all sign flips non-convex", detail.join(", ")))
}

fn operator_algebra() -> Outcome {
    let mut r = rng(1006);
    let t = ScenarioTree::new(3, 0.25, 2).map_err(|e| e.to_string())?;
    let mut worst_adj: f64 = 0.0;
    let mut worst_asm: f64 = 0.0;
    for _ in 0..100 {
        let level = r.random_range(0..=3);
        let (dout, din, k) = (r.random_range(1..=2), r.random_range(1..=2), r.random_range(0..=2));
        let op = e2s(random_operator(&mut r, &t, level, dout, din, k))?;
        let x = random_rv(&mut r, &t, level, din, 1.0);
        let y = random_rv(&mut r, &t, level, dout, 1.0);
        let lhs = e2s(t.inner(&e2s(op.apply(&t, &x))?, &y))?;
        let rhs = e2s(t.inner(&x, &e2s(op.adjoint().apply(&t, &y))?))?;
        let adj = (lhs - rhs).abs() / (1.0 + lhs.abs());
        let asm = (e2s(op.assemble(&t))? * x.as_dvector() - e2s(op.apply(&t, &x))?.as_dvector()).amax();
        worst_adj = worst_adj.max(adj);
        worst_asm = worst_asm.max(asm);
        ensure(adj <= 1e-12 && asm <= 1e-12, || format!("adjoint {adj:.3e}, assemble {asm:.3e}"))?;
        let (n, b) = (e2s(op.norm(&t))?, op.norm_bound(&t));
        ensure(n <= b * (1.0 + 1e-12), || format!("norm {n} above bound {b}"))?;
    }
    let mut implied = 0;
    for i in 0..100 {
        let spec = draw(&mut r);
        let inst = e2s(random_instance(&mut r, &spec))?;
        let rep = e2s(verify_assumptions(&inst.fam, spec.delta))?;
        if rep.stacked_ok {
            implied += 1;
            let ops = e2s(inst.fam.operators())?;
            let pos = e2s(check_positivity(&inst.fam.tree, &ops.g, &ops.q, &ops.s, &ops.r, spec.delta))?;
            ensure(pos.passed(), || format!("instance {i}: stacked conditions hold but (H3) fails: {:?}", pos.failures()))?;
        }
    }
    Ok(format!(
        "100 operators: adjoint {worst_adj:.1e}, apply/assemble {worst_asm:.1e}, norms within bounds; stacked => (H3) on {implied}/100"
    ))
}

fn fredholm() -> Outcome {
    let mut r = rng(1007);
    let mut worst_res: f64 = 0.0;
    let mut worst_neu: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(2..=8);
        let g = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let mut k = FredholmKernel { level: 3, dim: 1, weights: vec![1.0 / n as f64; n], gamma: g };
        let rho = k.spectral_radius();
        k.gamma *= r.random_range(0.1..0.9) / rho;
        let phi = e2s(k.resolvent())?;
        let res = k.resolvent_residual(&phi);
        let neu = (k.neumann(3000) - &phi).amax();
        worst_res = worst_res.max(res);
        worst_neu = worst_neu.max(neu);
        ensure(res <= 1e-12 && neu <= 1e-8, || format!("residual {res:.3e}, neumann {neu:.3e}"))?;
    }
    let k = FredholmKernel { level: 1, dim: 1, weights: vec![0.5, 0.5], gamma: DMatrix::from_element(2, 2, -0.5) };
    let phi = e2s(k.resolvent())?;
    let u = k.apply_resolvent(&phi, &DVector::from_element(2, 1.5));
    let err = phi.iter().map(|p| (p + 1.0 / 3.0).abs()).fold(0.0, f64::max).max((u.add_scalar(-1.0)).amax());
    ensure(err <= 1e-12, || format!("rank-one case off by {err:.3e}"))?;
    Ok(format!("20 kernels: identity residual {worst_res:.1e}, Neumann {worst_neu:.1e}; rank-one case error {err:.1e}"))
}

fn mean_variance() -> Outcome {
    let mut r = rng(1008);
    let (mut w_eq, mut w_tr, mut w_tk, mut w_var) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..10 {
        let m = e2s(random_market(&mut r, 3, 0.25, i % 2 == 1))?;
        let s = e2s(solve_gmv(&m))?;
        let rep = e2s(transform_check(&m, &s.equivalent.h, &s.fbsde, &s.pi))?;
        w_tr = w_tr.max(rep.max());
        ensure(rep.max() <= 1e-9, || format!("market {i}: transform residual {:.3e}", rep.max()))?;
        let oracle = e2s(tikhonov_portfolio(&m, &[1e-4, 1e-6, 1e-8]))?;
        let tk = e2s(s.pi.sub(&oracle))?.max_abs();
        w_tk = w_tk.max(tk);
        ensure(tk <= 1e-5, || format!("market {i}: Tikhonov oracle differs by {tk:.3e}"))?;

        // same market from a random wealth one level later
        let mut m1 = m.clone();
        m1.start = 1;
        m1.x0 = random_rv(&mut r, &m.tree, 1, 1, 1.0);
        for p in [&mut m1.r, &mut m1.mu, &mut m1.vol] {
            p.entries.remove(0);
            p.start = 1;
        }
        let eq = e2s(equivalent_problem(&m1))?;
        let orig = e2s(build_gmv(&m1))?;
        let c = e2s(equivalence_constant(&m1, &eq))?;
        for _ in 0..20 {
            let pi = random_process(&mut r, &m.tree, 1, 2, 1, 1.0);
            let j = e2s(total_cost(&orig, &m1.x0, &pi))?;
            let jh = e2s(total_cost(&eq.problem, &m1.x0, &pi))?;
            let rel = (jh - j - c).abs() / j.abs().max(jh.abs()).max(1.0);
            w_eq = w_eq.max(rel);
            ensure(rel <= 1e-10, || format!("market {i}: J^H - J - c = {rel:.3e}"))?;
        }
    }
    let t = ScenarioTree::new(3, 0.25, 2).map_err(|e| e.to_string())?;
    let mut f1 = MFFamilies::zeros(&t, 0, 1, 1);
    f1.g = variance_family(&t, 3);
    f1.gbar = vec![RandomVector::zeros(&t, 3, 1)];
    let mut f2 = f1.clone();
    f2.g = variance_family_indefinite(&t, 3);
    let var = MeanFieldOperator::variance(&t, 3);
    for _ in 0..20 {
        let x = random_process(&mut r, &t, 0, 3, 1, 1.0);
        let u = AdaptedProcess::zeros(&t, 0, 2, 1);
        let op = e2s(t.inner(&e2s(var.apply(&t, x.at(3)))?, x.at(3)))?;
        for v in [e2s(f1.stacked_cost(&x, &u))?, e2s(f2.stacked_cost(&x, &u))?] {
            let rel = (v - op).abs() / op.abs();
            w_var = w_var.max(rel);
            ensure(rel <= 1e-12, || format!("variance representations differ by {rel:.3e}"))?;
        }
    }
    Ok(format!(
        "10 markets: equivalence {w_eq:.1e}, transform {w_tr:.1e}, Tikhonov {w_tk:.1e}; variance forms {w_var:.1e}"
    ))
}

fn superposition() -> Outcome {
    let mut r = rng(1009);
    let mut worst: f64 = 0.0;
    let rel = |a: f64, scale: f64| a / scale.max(1.0);
    for _ in 0..10 {
        let (inst, _) = passing_instance(&mut r, draw)?;
        let p = e2s(inst.problem())?;
        let t = &p.tree;
        let nn = t.n_steps();
        // forward: affine in (x, u)
        let (x1, x2) = (random_rv(&mut r, t, 0, p.n, 1.0), random_rv(&mut r, t, 0, p.n, 1.0));
        let (u1, u2) = (random_process(&mut r, t, 0, nn - 1, p.m, 1.0), random_process(&mut r, t, 0, nn - 1, p.m, 1.0));
        let f = |x: &RandomVector, u: &AdaptedProcess| e2s(forward_sde(&p, x, u));
        let f12 = f(&e2s(x1.add(&x2))?, &e2s(u1.add(&u2))?)?;
        let sum = e2s(e2s(f(&x1, &u1)?.add(&f(&x2, &u2)?))?.sub(&f(&RandomVector::zeros(t, 0, p.n), &p.zero_control())?))?;
        let e = rel(e2s(f12.sub(&sum))?.max_abs(), f12.max_abs());
        worst = worst.max(e);
        ensure(e <= 1e-10, || format!("forward superposition {e:.3e}"))?;
        // backward: linear in (φ, η)
        let (phi1, phi2) = (random_process(&mut r, t, 0, nn - 1, p.n, 1.0), random_process(&mut r, t, 0, nn - 1, p.n, 1.0));
        let (eta1, eta2) = (random_rv(&mut r, t, nn, p.n, 1.0), random_rv(&mut r, t, nn, p.n, 1.0));
        let b = |phi: &AdaptedProcess, eta: &RandomVector| e2s(backward_sde(t, &p.a, &p.c, phi, eta, 0));
        let (y1, z1) = b(&phi1, &eta1)?;
        let (y2, z2) = b(&phi2, &eta2)?;
        let (y12, z12) = b(&e2s(phi1.add(&phi2))?, &e2s(eta1.add(&eta2))?)?;
        let e = rel(
            e2s(y12.sub(&e2s(y1.add(&y2))?))?.max_abs().max(e2s(z12.sub(&e2s(z1.add(&z2))?))?.max_abs()),
            y12.max_abs().max(z12.max_abs()),
        );
        worst = worst.max(e);
        ensure(e <= 1e-10, || format!("backward superposition {e:.3e}"))?;
        // coupled system: linear in its inhomogeneities, by both solvers
        let data = e2s(FbsdeData::from_problem(&p, &inst.x))?;
        let mk = |r: &mut ChaCha8Rng| {
            data.with_inhomogeneities(
                random_rv(r, t, 0, p.n, 1.0),
                random_process(r, t, 0, nn - 1, p.n, 1.0),
                random_process(r, t, 0, nn - 1, p.n, 1.0),
                random_process(r, t, 0, nn - 1, p.n, 1.0),
                random_rv(r, t, nn, p.n, 1.0),
            )
        };
        let (a, bb) = (mk(&mut r), mk(&mut r));
        let ab = a.with_inhomogeneities(
            e2s(a.xi.add(&bb.xi))?,
            e2s(a.phi.add(&bb.phi))?,
            e2s(a.psi.add(&bb.psi))?,
            e2s(a.gamma.add(&bb.gamma))?,
            e2s(a.eta.add(&bb.eta))?,
        );
        let opts = ContinuationOptions { tol: 1e-13, ..Default::default() };
        let solvers: [&Solver; 2] =
            [&|d| solve_direct(d, 1.0), &|d| continuation_solve(d, &opts)];
        for solve in solvers {
            let (sa, sb, sab) = (e2s(solve(&a))?, e2s(solve(&bb))?, e2s(solve(&ab))?);
            let sum = FbsdeSolution {
                x: e2s(sa.x.add(&sb.x))?,
                y: e2s(sa.y.add(&sb.y))?,
                z: e2s(sa.z.add(&sb.z))?,
                ..sab.clone()
            };
            let e = rel(sol_dist(&sab, &sum), e2s(sab.norm(t))?);
            worst = worst.max(e);
            ensure(e <= 1e-10, || format!("coupled superposition {e:.3e}"))?;
        }
    }
    Ok(format!("10 instances, forward/backward/coupled (direct and continuation): worst relative defect {worst:.2e}"))
}

fn cli_round_trip() -> Outcome {
    let specs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("specs");
    let mut runs = 0;
    for (cmd, name) in [("solve", "desk1.json"), ("fredholm", "desk1.json"), ("validate", "desk1.json"), ("mv", "desk_mv.json"), ("mv", "no_drift_mv.json")] {
        let path = specs.join(name);
        let go = || {
            Command::new(env!("CARGO_BIN_EXE_oplq"))
                .args([cmd, "--spec", path.to_str().unwrap(), "--seed", "5"])
                .output()
                .map_err(|e| e.to_string())
        };
        let (a, b) = (go()?, go()?);
        ensure(a.status.code() == Some(0), || format!("{cmd} {name}: exit {:?}", a.status.code()))?;
        ensure(a.stdout == b.stdout, || format!("{cmd} {name}: output differs between runs"))?;
        let text = String::from_utf8(a.stdout).map_err(|e| e.to_string())?;
        let doc = ResultDoc::from_json(&text).map_err(|e| e.to_string())?;
        ensure(doc.to_json() == text, || format!("{cmd} {name}: re-serialized document differs"))?;
        let spec = ProblemSpec::parse(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        match recompute(&spec, &doc).map_err(|e| e.to_string())? {
            Recomputed::Solution(res) => ensure(Some(&res) == doc.solution.as_ref().map(|s| &s.residuals), || format!("{cmd}: residuals not reproduced"))?,
            Recomputed::MeanVariance(tr) => ensure(Some(&tr) == doc.mean_variance.as_ref().map(|m| &m.transform), || format!("{cmd}: transform not reproduced"))?,
            Recomputed::Nothing => return Err(format!("{cmd}: nothing to recompute")),
        }
        runs += 1;
    }
    Ok(format!("{runs} spec/command pairs byte-identical across runs; reloaded residuals reproduced exactly"))
}

type Solver<'a> = dyn Fn(&FbsdeData) -> oplq::Result<FbsdeSolution> + 'a;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("three-route agreement", three_route_agreement),
        ("exact discrete duality", discrete_duality),
        ("stationarity optimality expansion", optimality_expansion),
        ("continuation behaviour", continuation_behaviour),
        ("convexity spectrum", convexity),
        ("operator algebra", operator_algebra),
        ("Fredholm resolvent", fredholm),
        ("mean-variance pipeline", mean_variance),
        ("linearity / superposition", superposition),
        ("CLI determinism and round-trip", cli_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{secs:.2}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
