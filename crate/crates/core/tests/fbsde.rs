use oplq::dynamics::forward_sde;
use oplq::fbsde::{
    continuation_solve, monotonicity_identity, optimal_control, solve_direct, stationarity_residual, ContinuationOptions,
};
use oplq::fixtures::{desk1, desk1_overcoupled, random_instance, random_process, random_rv, rng, RandomSpec};
use oplq::lq::{assemble_quadform, solve_quadform};
use oplq::{AdaptedProcess, Error, FbsdeData, LQProblem, MeanFieldOperator, OperatorProcess, RandomVector, ScenarioTree};

fn desk() -> (LQProblem, FbsdeData) {
    let inst = desk1();
    let p = inst.problem().unwrap();
    let d = FbsdeData::from_problem(&p, &inst.x).unwrap();
    (p, d)
}

fn dist(a: &AdaptedProcess, b: &AdaptedProcess) -> f64 {
    a.sub(b).unwrap().max_abs()
}

#[test]
fn alpha_zero_decoupled_terminal() {
    let (_, data) = desk();
    let t = data.tree.clone();
    let data = data.with_inhomogeneities(
        RandomVector::constant(&t, 0, &[0.7]),
        AdaptedProcess::zeros(&t, 0, 2, 1),
        AdaptedProcess::zeros(&t, 0, 2, 1),
        AdaptedProcess::zeros(&t, 0, 2, 1),
        RandomVector::constant(&t, 3, &[1.5]),
    );
    let s = solve_direct(&data, 0.0).unwrap();
    for j in 0..=3 {
        assert!(s.y.at(j).values.iter().all(|v| (v - 1.5).abs() <= 1e-14));
    }
    assert!(s.z.max_abs() <= 1e-14);
    // at α = 0 the state only sees the frozen drift −BR⁻¹B*c and diffusion −DR⁻¹B*c
    let mut x = vec![0.7];
    for j in 0..3 {
        let b = data.block(j);
        let drift = -b.bb[(0, 0)] * 1.5;
        let diff = -b.db[(0, 0)] * 1.5;
        assert!(s.x.at(j).values.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-13));
        let (dt, inc) = (t.delta(), t.increment_values());
        x = x.iter().flat_map(|v| inc.iter().map(move |w| v + dt * drift + w * diff)).collect();
    }
    assert!(s.x.at(3).values.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-13));
}

#[test]
fn alpha_zero_all_zero() {
    let (_, data) = desk();
    let t = data.tree.clone();
    let z = data.with_inhomogeneities(
        RandomVector::zeros(&t, 0, 1),
        AdaptedProcess::zeros(&t, 0, 2, 1),
        AdaptedProcess::zeros(&t, 0, 2, 1),
        AdaptedProcess::zeros(&t, 0, 2, 1),
        RandomVector::zeros(&t, 3, 1),
    );
    let s = solve_direct(&z, 0.0).unwrap();
    assert_eq!(s.x.max_abs() + s.y.max_abs() + s.z.max_abs(), 0.0);
}

#[test]
fn desk1_direct_residuals() {
    let (_, data) = desk();
    let s = solve_direct(&data, 1.0).unwrap();
    assert!(s.diagnostics.forward_residual <= 1e-10);
    assert!(s.diagnostics.backward_residual <= 1e-10);
    assert!(s.diagnostics.terminal_residual <= 1e-10);
}

#[test]
fn decoupled_single_stage() {
    let inst = desk1();
    let mut p = inst.problem().unwrap();
    let t = p.tree.clone();
    p.b = OperatorProcess::from_fn(0, 2, |j| MeanFieldOperator::zero(&t, j, 1, 1));
    p.d = p.b.clone();
    let data = FbsdeData::from_problem(&p, &inst.x).unwrap();
    assert!(data.is_decoupled());
    let c = continuation_solve(&data, &ContinuationOptions::default()).unwrap();
    let d = solve_direct(&data, 1.0).unwrap();
    assert_eq!(c.diagnostics.stages.len(), 1);
    assert_eq!(c.diagnostics.stages[0].ratio, 0.0);
    assert_eq!(dist(&c.x, &d.x) + dist(&c.y, &d.y) + dist(&c.z, &d.z), 0.0);
}

#[test]
fn desk1_two_stage_schedule() {
    let (_, data) = desk();
    let c = continuation_solve(&data, &ContinuationOptions::with_schedule(vec![0.5, 0.5])).unwrap();
    let d = solve_direct(&data, 1.0).unwrap();
    assert_eq!(c.diagnostics.stages.len(), 2);
    assert!(c.diagnostics.stages.iter().all(|s| s.ratio < 1.0));
    assert!(dist(&c.x, &d.x).max(dist(&c.y, &d.y)).max(dist(&c.z, &d.z)) <= 1e-8);
}

#[test]
fn overcoupled_single_step_diverges() {
    let inst = desk1_overcoupled();
    let p = inst.problem().unwrap();
    let data = FbsdeData::from_problem(&p, &inst.x).unwrap();
    match continuation_solve(&data, &ContinuationOptions::with_schedule(vec![1.0])) {
        Err(Error::Diverged { ratio, .. }) => assert!(ratio >= 1.0),
        other => panic!("expected divergence, got {other:?}"),
    }
    let c = continuation_solve(&data, &ContinuationOptions::default()).unwrap();
    assert!(c.diagnostics.stages.iter().filter(|s| s.accepted).all(|s| s.ratio < 1.0));
    assert!(c.diagnostics.stages.iter().any(|s| !s.accepted));
    let d = solve_direct(&data, 1.0).unwrap();
    assert!(dist(&c.x, &d.x) <= 1e-8);
}

#[test]
fn bad_schedule_rejected() {
    let (_, data) = desk();
    assert!(continuation_solve(&data, &ContinuationOptions::with_schedule(vec![0.5, 0.4])).is_err());
}

#[test]
fn max_iter_reports_non_convergence() {
    let (_, data) = desk();
    let opts = ContinuationOptions { max_iter: 2, ..ContinuationOptions::with_schedule(vec![1.0]) };
    assert!(matches!(continuation_solve(&data, &opts), Err(Error::NotConverged { .. })));
}

#[test]
fn stationarity_examples() {
    let (p, data) = desk();
    let s = solve_direct(&data, 1.0).unwrap();
    let inst = desk1();
    let qf = assemble_quadform(&p, &inst.x).unwrap();
    let (u_qp, _) = solve_quadform(&qf).unwrap();
    let (_, norm) = stationarity_residual(&s, &p, &u_qp).unwrap();
    assert!(norm <= 1e-9);
    let u = optimal_control(&s, &p).unwrap();
    assert!(u.sub(&u_qp).unwrap().l2_sq(&p.tree).unwrap().sqrt() <= 1e-8);

    // zero coupling, ρ ≡ c: the residual of u = 0 is c
    let t = ScenarioTree::new(2, 0.5, 2).unwrap();
    let mut z = LQProblem::zeros(&t, 0, 1, 1);
    z.rho = AdaptedProcess::constant(&t, 0, 1, &[0.4]);
    let zd = FbsdeData::from_problem(&z, &RandomVector::zeros(&t, 0, 1)).unwrap();
    let zs = solve_direct(&zd, 1.0).unwrap();
    let (res, _) = stationarity_residual(&zs, &z, &z.zero_control()).unwrap();
    assert!(res.entries.iter().all(|e| e.values.iter().all(|v| *v == 0.4)));

    // affine in u
    let mut r = rng(1);
    let v = random_process(&mut r, &p.tree, 0, 2, 1, 1.0);
    let (r0, _) = stationarity_residual(&s, &p, &u).unwrap();
    let (r1, _) = stationarity_residual(&s, &p, &u.add(&v).unwrap()).unwrap();
    for j in 0..3 {
        let rv = p.r.at(j).apply(&p.tree, v.at(j)).unwrap();
        assert!(r1.at(j).sub(r0.at(j)).unwrap().sub(&rv).unwrap().max_abs() <= 1e-14);
    }
}

#[test]
fn zero_data_zero_control() {
    let inst = desk1();
    let p = inst.problem().unwrap().homogeneous();
    let t = p.tree.clone();
    let data = FbsdeData::from_problem(&p, &RandomVector::zeros(&t, 0, 1)).unwrap();
    let s = solve_direct(&data, 1.0).unwrap();
    assert_eq!(optimal_control(&s, &p).unwrap().max_abs(), 0.0);
}

#[test]
fn superposition() {
    let mut r = rng(31);
    for _ in 0..10 {
        let spec = RandomSpec::draw(&mut r);
        let inst = random_instance(&mut r, &spec).unwrap();
        let p = inst.problem().unwrap();
        let data = FbsdeData::from_problem(&p, &inst.x).unwrap();
        let t = data.tree.clone();
        let nn = t.n_steps();
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            data.with_inhomogeneities(
                random_rv(r, &t, 0, p.n, 1.0),
                random_process(r, &t, 0, nn - 1, p.n, 1.0),
                random_process(r, &t, 0, nn - 1, p.n, 1.0),
                random_process(r, &t, 0, nn - 1, p.n, 1.0),
                random_rv(r, &t, nn, p.n, 1.0),
            )
        };
        let a = draw(&mut r);
        let b = draw(&mut r);
        let ab = a.with_inhomogeneities(
            a.xi.add(&b.xi).unwrap(),
            a.phi.add(&b.phi).unwrap(),
            a.psi.add(&b.psi).unwrap(),
            a.gamma.add(&b.gamma).unwrap(),
            a.eta.add(&b.eta).unwrap(),
        );
        for alpha in [0.0, 0.5, 1.0] {
            let (sa, sb, sab) = (solve_direct(&a, alpha).unwrap(), solve_direct(&b, alpha).unwrap(), solve_direct(&ab, alpha).unwrap());
            let scale = sab.norm(&t).unwrap().max(1.0);
            let e = dist(&sab.x, &sa.x.add(&sb.x).unwrap())
                .max(dist(&sab.y, &sa.y.add(&sb.y).unwrap()))
                .max(dist(&sab.z, &sa.z.add(&sb.z).unwrap()));
            assert!(e <= 1e-10 * scale, "{e}");
        }
    }
}

#[test]
fn monotonicity() {
    let mut r = rng(41);
    for _ in 0..10 {
        let spec = RandomSpec::draw(&mut r);
        let inst = random_instance(&mut r, &spec).unwrap();
        let p = inst.problem().unwrap();
        let data = FbsdeData::from_problem(&p, &inst.x).unwrap();
        for alpha in [0.0, 0.3, 1.0] {
            let s = solve_direct(&data, alpha).unwrap();
            let (lhs, rhs) = monotonicity_identity(&data, &s).unwrap();
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn continuation_matches_direct_on_alpha_grid() {
    let mut r = rng(51);
    let spec = RandomSpec { n: 2, m: 1, k: 1, ..Default::default() };
    let inst = random_instance(&mut r, &spec).unwrap();
    let p = inst.problem().unwrap();
    let data = FbsdeData::from_problem(&p, &inst.x).unwrap();
    let tol = 1e-10;
    for target in [0.25, 0.5, 0.75, 1.0] {
        let steps = (target / 0.25f64).round() as usize;
        let opts = ContinuationOptions { tol, target, ..ContinuationOptions::with_schedule(vec![0.25; steps]) };
        let c = continuation_solve(&data, &opts).unwrap();
        assert_eq!(c.alpha, target);
        let d = solve_direct(&data, target).unwrap();
        assert!(dist(&c.x, &d.x).max(dist(&c.y, &d.y)).max(dist(&c.z, &d.z)) <= 10.0 * tol);
    }
    let d0 = solve_direct(&data, 0.0).unwrap();
    let x0 = forward_sde(&p, &inst.x, &p.zero_control()).unwrap();
    assert_eq!(d0.x.at(0), x0.at(0));
}
