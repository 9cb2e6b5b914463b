use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use oplq::dynamics::forward_sde;
use oplq::fbsde::{continuation_solve, optimal_control, solve_direct, ContinuationOptions};
use oplq::fixtures::{
    desk1, random_instance, random_process, rng, variance_family, variance_family_indefinite, RandomSpec,
};
use oplq::meanfield::{
    build_problem, fredholm_parts, fredholm_solve, resolvent_control, system_residual, system_residual_with,
    verify_assumptions, FredholmKernel, LevelFamily, MFFamilies, SymFamily,
};
use oplq::operators::check_positivity;
use oplq::{AdaptedProcess, FbsdeData, MeanFieldOperator, NodeMatrices, RandomVector, ScenarioTree};

fn scalar(t: &ScenarioTree, level: usize, v: f64) -> NodeMatrices {
    NodeMatrices::constant(t, level, &DMatrix::from_element(1, 1, v))
}

fn classical() -> (MFFamilies, AdaptedProcess, AdaptedProcess, RandomVector) {
    let t = ScenarioTree::new(3, 0.25, 2).unwrap();
    let mut f = MFFamilies::zeros(&t, 0, 2, 1);
    let mut r = rng(17);
    for j in 0..3 {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 0.3, -0.2, 0.05]);
        f.a[j] = LevelFamily::pointwise(NodeMatrices::constant(&t, j, &m));
        f.b[j] = LevelFamily::pointwise(NodeMatrices::constant(&t, j, &DMatrix::from_column_slice(2, 1, &[1.0, 0.5])));
        f.d[j] = LevelFamily::pointwise(NodeMatrices::constant(&t, j, &DMatrix::from_column_slice(2, 1, &[0.2, 0.1])));
        f.q[j] = SymFamily::pointwise(NodeMatrices::constant(&t, j, &DMatrix::identity(2, 2)));
        f.rho0[j] = RandomVector::constant(&t, j, &[0.3]);
    }
    f.g = SymFamily::pointwise(NodeMatrices::constant(&t, 3, &DMatrix::identity(2, 2)));
    let drift = random_process(&mut r, &t, 0, 2, 2, 0.2);
    let diff = random_process(&mut r, &t, 0, 2, 2, 0.2);
    let x = RandomVector::constant(&t, 0, &[1.0, -0.5]);
    (f, drift, diff, x)
}

#[test]
fn rank_zero_is_classical() {
    let (f, drift, diff, x) = classical();
    let p = build_problem(&f, &drift, &diff).unwrap();
    for op in p.a.ops.iter().chain(&p.b.ops).chain(&p.q.ops).chain(&p.r.ops).chain(std::iter::once(&p.g)) {
        assert!(op.terms.is_empty());
    }
    let rep = verify_assumptions(&f, 1.0).unwrap();
    assert!(rep.conditions.iter().all(|c| c.value.is_finite()));
    assert!(rep.conditions.iter().filter(|c| c.name.contains("bound")).all(|c| c.pass));
    let data = FbsdeData::from_problem(&p, &x).unwrap();
    let sol = solve_direct(&data, 1.0).unwrap();
    let u = optimal_control(&sol, &p).unwrap();
    let sr = system_residual(&f, &p, &sol, &u).unwrap();
    assert!(sr.discrepancy <= 1e-15, "{}", sr.discrepancy);
    for j in 0..3 {
        let (theta, kernel) = fredholm_parts(&f, &sol, j).unwrap();
        assert_eq!(kernel.gamma.amax(), 0.0);
        let uj = fredholm_solve(&f, &sol, j).unwrap();
        assert!(uj.sub(&theta).unwrap().max_abs() == 0.0);
        let rc = resolvent_control(&f, &sol, j).unwrap();
        assert_eq!(rc.phi.amax(), 0.0);
        assert!(rc.control.sub(&theta).unwrap().max_abs() == 0.0);
    }
}

#[test]
fn variance_representations() {
    let t = ScenarioTree::new(2, 0.5, 2).unwrap();
    let var = MeanFieldOperator::variance(&t, 2).assemble(&t).unwrap();
    for fam in [variance_family(&t, 2), variance_family_indefinite(&t, 2)] {
        let m = fam.operator(&t).unwrap().assemble(&t).unwrap();
        assert!((m - &var).amax() <= 1e-15);
    }
    assert_eq!(variance_family(&t, 2).stacked(0), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    assert_eq!(variance_family_indefinite(&t, 2).stacked(0), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
}

#[test]
fn stacked_g_condition_depends_on_representation() {
    let t = ScenarioTree::new(2, 0.5, 2).unwrap();
    let mut f1 = MFFamilies::zeros(&t, 0, 1, 1);
    f1.g = variance_family(&t, 2);
    f1.gbar = vec![RandomVector::zeros(&t, 2, 1)];
    let mut f2 = f1.clone();
    f2.g = variance_family_indefinite(&t, 2);
    let r1 = verify_assumptions(&f1, 1.0).unwrap();
    let r2 = verify_assumptions(&f2, 1.0).unwrap();
    let g_cond = |r: &oplq::meanfield::AssumptionReport| r.conditions.iter().find(|c| c.name == "stacked G >= 0").unwrap().pass;
    assert!(g_cond(&r1));
    assert!(!g_cond(&r2));
    assert!(r1.positivity.as_ref().unwrap().g_ok);
    assert!(r2.positivity.as_ref().unwrap().g_ok);
    assert!(r2.positivity.as_ref().unwrap().passed());
}

#[test]
fn built_cost_matches_stacked_cost() {
    let mut r = rng(23);
    for _ in 0..10 {
        let spec = RandomSpec::draw(&mut r);
        let inst = random_instance(&mut r, &spec).unwrap();
        let p = inst.problem().unwrap();
        let nn = p.tree.n_steps();
        let x = random_process(&mut r, &p.tree, 0, nn, p.n, 1.0);
        let u = random_process(&mut r, &p.tree, 0, nn - 1, p.m, 1.0);
        let a = oplq::dynamics::cost(&p, &x, &u, false).unwrap();
        let b = inst.fam.stacked_cost(&x, &u).unwrap();
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn random_bounds_dominate_norms() {
    let mut r = rng(29);
    for _ in 0..10 {
        let spec = RandomSpec::draw(&mut r);
        let inst = random_instance(&mut r, &spec).unwrap();
        let rep = verify_assumptions(&inst.fam, spec.delta).unwrap();
        let g = rep.conditions.iter().find(|c| c.name == "appendix bound ||G||").unwrap();
        assert!(g.pass && g.threshold >= g.value);
        assert!(rep.stacked_ok);
        assert!(rep.passed(), "{:?}", rep.failures());
    }
}

#[test]
fn desk1_system_residual_and_fredholm() {
    let inst = desk1();
    let p = inst.problem().unwrap();
    let data = FbsdeData::from_problem(&p, &inst.x).unwrap();
    let sol = solve_direct(&data, 1.0).unwrap();
    let u = optimal_control(&sol, &p).unwrap();
    let sr = system_residual(&inst.fam, &p, &sol, &u).unwrap();
    assert!(sr.discrepancy <= 1e-12);
    assert!(sr.backward <= 1e-10 && sr.stationarity <= 1e-10);
    for j in 0..3 {
        let f = fredholm_solve(&inst.fam, &sol, j).unwrap();
        assert!(f.sub(u.at(j)).unwrap().max_abs() <= 1e-10);
    }
}

#[test]
fn swapped_expansion_is_detected() {
    let mut r = rng(37);
    let spec = RandomSpec { n: 2, m: 1, k: 2, ..Default::default() };
    let inst = random_instance(&mut r, &spec).unwrap();
    let p = inst.problem().unwrap();
    let data = FbsdeData::from_problem(&p, &inst.x).unwrap();
    let sol = solve_direct(&data, 1.0).unwrap();
    let u = optimal_control(&sol, &p).unwrap();
    assert!(system_residual(&inst.fam, &p, &sol, &u).unwrap().discrepancy <= 1e-12);
    assert!(system_residual_with(&inst.fam, &p, &sol, &u, true).unwrap().discrepancy > 1e-6);
}

fn constant_kernel(c: f64) -> FredholmKernel {
    FredholmKernel { level: 1, dim: 1, weights: vec![0.5, 0.5], gamma: DMatrix::from_element(2, 2, c) }
}

#[test]
fn rank_one_fredholm() {
    let k = constant_kernel(-0.5);
    let theta = DVector::from_vec(vec![1.5, 1.5]);
    let u = k.solve(&theta).unwrap();
    assert_abs_diff_eq!(u[0], 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(u[1], 1.0, epsilon = 1e-15);
    let phi = k.resolvent().unwrap();
    assert!(phi.iter().all(|x| (x + 1.0 / 3.0).abs() <= 1e-15));
    assert!(k.resolvent_residual(&phi) <= 1e-15);
    let ur = k.apply_resolvent(&phi, &theta);
    assert!((ur - DVector::from_element(2, 1.0)).amax() <= 1e-15);
    let th2 = DVector::from_vec(vec![1.0, 3.0]);
    let u2 = k.apply_resolvent(&phi, &th2);
    assert!((u2 - th2.add_scalar(-2.0 / 3.0)).amax() <= 1e-15);

    // the same equation arising from Rη = 2η + E[η] with θ ≡ 3
    let t = ScenarioTree::new(1, 1.0, 2).unwrap();
    let mut f = MFFamilies::zeros(&t, 0, 1, 1);
    f.r[0] = SymFamily { base: scalar(&t, 0, 2.0), bar: vec![scalar(&t, 0, 0.5)], tilde: vec![scalar(&t, 0, 1.0)], hat: vec![vec![scalar(&t, 0, 0.0)]] };
    f.rho0[0] = RandomVector::constant(&t, 0, &[-3.0]);
    f.rhobar[0] = vec![RandomVector::zeros(&t, 0, 1)];
    f.s[0].tilde = vec![scalar(&t, 0, 0.0)];
    let p = build_problem(&f, &AdaptedProcess::zeros(&t, 0, 0, 1), &AdaptedProcess::zeros(&t, 0, 0, 1)).unwrap();
    let data = FbsdeData::from_problem(&p, &RandomVector::zeros(&t, 0, 1)).unwrap();
    let sol = solve_direct(&data, 1.0).unwrap();
    let (th, kern) = fredholm_parts(&f, &sol, 0).unwrap();
    assert_abs_diff_eq!(th.values[0], 1.5, epsilon = 1e-15);
    assert_abs_diff_eq!(kern.gamma[(0, 0)], -0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(fredholm_solve(&f, &sol, 0).unwrap().values[0], 1.0, epsilon = 1e-15);
}

#[test]
fn zero_kernel() {
    let k = constant_kernel(0.0);
    let theta = DVector::from_vec(vec![0.2, -0.7]);
    assert_eq!(k.solve(&theta).unwrap(), theta);
    let phi = k.resolvent().unwrap();
    assert_eq!(phi.amax(), 0.0);
    assert_eq!(k.apply_resolvent(&phi, &theta), theta);
}

#[test]
fn neumann_series() {
    let mut r = rng(43);
    use rand::Rng;
    for _ in 0..10 {
        let n = 4;
        let g = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let mut k = FredholmKernel { level: 2, dim: 1, weights: vec![0.25; n], gamma: g };
        let rho = k.spectral_radius();
        k.gamma *= 0.6 / rho;
        let phi = k.resolvent().unwrap();
        assert!(k.resolvent_residual(&phi) <= 1e-12);
        assert!((k.neumann(200) - &phi).amax() <= 1e-8);
    }
}

#[test]
fn random_instances_three_ways_and_implication() {
    let mut r = rng(47);
    for _ in 0..10 {
        let spec = RandomSpec::draw(&mut r);
        let inst = random_instance(&mut r, &spec).unwrap();
        let p = inst.problem().unwrap();
        let rep = verify_assumptions(&inst.fam, spec.delta).unwrap();
        if rep.stacked_ok {
            let ops = inst.fam.operators().unwrap();
            assert!(check_positivity(&p.tree, &ops.g, &ops.q, &ops.s, &ops.r, spec.delta).unwrap().passed());
        }
        let data = FbsdeData::from_problem(&p, &inst.x).unwrap();
        let sol = continuation_solve(&data, &ContinuationOptions::default()).unwrap();
        let u = optimal_control(&sol, &p).unwrap();
        assert!(system_residual(&inst.fam, &p, &sol, &u).unwrap().discrepancy <= 1e-10);
        for j in 0..p.tree.n_steps() {
            let f = fredholm_solve(&inst.fam, &sol, j).unwrap();
            let rc = resolvent_control(&inst.fam, &sol, j).unwrap();
            assert!(rc.identity_residual <= 1e-12);
            assert!(f.sub(u.at(j)).unwrap().max_abs() <= 1e-10);
            assert!(rc.control.sub(u.at(j)).unwrap().max_abs() <= 1e-10);
        }
        let _ = forward_sde(&p, &inst.x, &u).unwrap();
    }
}
