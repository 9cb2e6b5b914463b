use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use oplq::dynamics::{backward_sde, cost, forward_sde, forward_with, homogeneous_cost, total_cost};
use oplq::fixtures::{desk1, random_instance, random_process, random_rv, rng, RandomSpec};
use oplq::{AdaptedProcess, LQProblem, MeanFieldOperator, NodeMatrices, OperatorProcess, RandomVector, ScenarioTree};

fn zero_problem(n_steps: usize, delta: f64) -> LQProblem {
    let t = ScenarioTree::new(n_steps, delta, 2).unwrap();
    LQProblem::zeros(&t, 0, 1, 1)
}

fn ops(t: &ScenarioTree, f: impl Fn(usize) -> MeanFieldOperator) -> OperatorProcess {
    OperatorProcess::from_fn(0, t.n_steps() - 1, f)
}

#[test]
fn forward_examples() {
    let p = zero_problem(3, 0.5);
    let x = forward_sde(&p, &RandomVector::constant(&p.tree, 0, &[1.0]), &p.zero_control()).unwrap();
    assert!(x.entries.iter().all(|e| e.values.iter().all(|v| *v == 1.0)));

    let mut p = zero_problem(1, 1.0);
    p.d = ops(&p.tree.clone(), |j| MeanFieldOperator::identity(&p.tree, j, 1));
    let u = AdaptedProcess::constant(&p.tree, 0, 0, &[1.0]);
    let x = forward_sde(&p, &RandomVector::zeros(&p.tree, 0, 1), &u).unwrap();
    assert_eq!(x.at(1).values, vec![1.0, -1.0]);
    let m = p.tree.expectation(x.at(1)).unwrap()[0];
    assert_eq!(p.tree.inner(x.at(1), x.at(1)).unwrap() - m * m, 1.0);

    let mut p = zero_problem(2, 0.5);
    let t = p.tree.clone();
    let one = NodeMatrices::constant(&t, 0, &DMatrix::from_element(1, 1, 1.0));
    p.a = ops(&t, |j| {
        let one = NodeMatrices::constant(&t, j, &DMatrix::from_element(1, 1, 1.0));
        MeanFieldOperator::zero(&t, j, 1, 1).with_term(one.clone(), one).unwrap()
    });
    let _ = one;
    let x = forward_sde(&p, &RandomVector::constant(&t, 0, &[1.0]), &p.zero_control()).unwrap();
    assert_eq!(x.at(1).values, vec![1.5, 1.5]);
    assert_eq!(x.at(2).values, vec![2.25; 4]);
}

#[test]
fn backward_examples() {
    let p = zero_problem(3, 0.25);
    let t = &p.tree;
    let drv = AdaptedProcess::zeros(t, 0, 2, 1);
    let (y, z) = backward_sde(t, &p.a, &p.c, &drv, &RandomVector::constant(t, 3, &[2.5]), 0).unwrap();
    assert!(y.entries.iter().all(|e| e.values.iter().all(|v| *v == 2.5)));
    assert!(z.max_abs() == 0.0);

    let p = zero_problem(1, 1.0);
    let t = &p.tree;
    let drv = AdaptedProcess::zeros(t, 0, 0, 1);
    let (y, z) = backward_sde(t, &p.a, &p.c, &drv, &t.increment_vector(1).unwrap(), 0).unwrap();
    assert_eq!(y.at(0).values, vec![0.0]);
    assert_eq!(z.at(0).values, vec![1.0]);

    let a = ops(t, |j| MeanFieldOperator::constant(t, j, &DMatrix::from_element(1, 1, 0.3)));
    let (y, z) = backward_sde(t, &a, &p.c, &drv, &RandomVector::constant(t, 1, &[2.0]), 0).unwrap();
    assert_abs_diff_eq!(y.at(0).values[0], 2.0 * 1.3, epsilon = 1e-15);
    assert_eq!(z.at(0).values, vec![0.0]);
}

#[test]
fn cost_examples() {
    let mut p = zero_problem(1, 1.0);
    p.g = MeanFieldOperator::variance(&p.tree, 1);
    p.r = ops(&p.tree.clone(), |j| MeanFieldOperator::zero(&p.tree, j, 1, 1));
    let x = AdaptedProcess::new(0, vec![RandomVector::from_values(0, 1, vec![0.0]), RandomVector::from_values(1, 1, vec![1.0, -1.0])]).unwrap();
    assert_eq!(cost(&p, &x, &p.zero_control(), false).unwrap(), 1.0);

    let p = zero_problem(2, 0.5);
    assert_eq!(total_cost(&p, &RandomVector::zeros(&p.tree, 0, 1), &p.zero_control()).unwrap(), 0.0);
    let u = AdaptedProcess::constant(&p.tree, 0, 1, &[1.0]);
    assert_eq!(total_cost(&p, &RandomVector::zeros(&p.tree, 0, 1), &u).unwrap(), 1.0);
}

#[test]
fn cost_rejects_span_mismatch() {
    let p = zero_problem(2, 0.5);
    let x = AdaptedProcess::zeros(&p.tree, 0, 1, 1);
    assert!(cost(&p, &x, &p.zero_control(), false).is_err());
}

/// inner(η, X̂_N) = ΣΔ[⟨Bû, Ŷ⟩ + ⟨Dû, Z⟩ − ⟨X̂, φ⟩] for the homogeneous state.
#[test]
fn discrete_duality() {
    let mut r = rng(9);
    for _ in 0..20 {
        let spec = RandomSpec::draw(&mut r);
        let inst = random_instance(&mut r, &spec).unwrap();
        let p = inst.problem().unwrap();
        let t = &p.tree;
        let nn = t.n_steps();
        let u = random_process(&mut r, t, 0, nn - 1, p.m, 1.0);
        let xh = forward_with(&p, &RandomVector::zeros(t, 0, p.n), &u, false).unwrap();
        let phi = random_process(&mut r, t, 0, nn - 1, p.n, 1.0);
        let eta = random_rv(&mut r, t, nn, p.n, 1.0);
        let (y, z) = backward_sde(t, &p.a, &p.c, &phi, &eta, 0).unwrap();
        let lhs = t.inner(&eta, xh.at(nn)).unwrap();
        let mut rhs = 0.0;
        for j in 0..nn {
            let yh = t.cond_expectation(y.at(j + 1)).unwrap();
            rhs += t.delta()
                * (t.inner(&p.b.at(j).apply(t, u.at(j)).unwrap(), &yh).unwrap()
                    + t.inner(&p.d.at(j).apply(t, u.at(j)).unwrap(), z.at(j)).unwrap()
                    - t.inner(xh.at(j), phi.at(j)).unwrap());
        }
        assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn forward_is_affine() {
    let inst = desk1();
    let p = inst.problem().unwrap();
    let t = &p.tree;
    let mut r = rng(4);
    let u1 = random_process(&mut r, t, 0, 2, 1, 1.0);
    let u2 = random_process(&mut r, t, 0, 2, 1, 1.0);
    let x1 = forward_with(&p, &inst.x, &u1, false).unwrap();
    let x2 = forward_with(&p, &inst.x.scaled(-0.3), &u2, false).unwrap();
    let x12 = forward_with(&p, &inst.x.scaled(0.7), &u1.add(&u2).unwrap(), false).unwrap();
    assert!(x12.sub(&x1.add(&x2).unwrap()).unwrap().max_abs() <= 1e-14);
    // the inhomogeneous map is affine: F(u) − F(0) is linear
    let f0 = forward_sde(&p, &inst.x, &p.zero_control()).unwrap();
    let fu = forward_sde(&p, &inst.x, &u1).unwrap();
    assert!(fu.sub(&f0).unwrap().sub(&forward_with(&p, &RandomVector::zeros(t, 0, 1), &u1, false).unwrap()).unwrap().max_abs() <= 1e-14);
}

#[test]
fn backward_doubles() {
    let inst = desk1();
    let p = inst.problem().unwrap();
    let t = &p.tree;
    let mut r = rng(8);
    let phi = random_process(&mut r, t, 0, 2, 1, 1.0);
    let eta = random_rv(&mut r, t, 3, 1, 1.0);
    let (y1, z1) = backward_sde(t, &p.a, &p.c, &phi, &eta, 0).unwrap();
    let (y2, z2) = backward_sde(t, &p.a, &p.c, &phi.scaled(2.0), &eta.scaled(2.0), 0).unwrap();
    assert!(y2.sub(&y1.scaled(2.0)).unwrap().max_abs() <= 1e-14);
    assert!(z2.sub(&z1.scaled(2.0)).unwrap().max_abs() <= 1e-14);
}

#[test]
fn homogeneous_cost_drops_linear_terms() {
    let inst = desk1();
    let p = inst.problem().unwrap();
    let zero = p.zero_control();
    assert_eq!(homogeneous_cost(&p, &zero).unwrap(), 0.0);
}
