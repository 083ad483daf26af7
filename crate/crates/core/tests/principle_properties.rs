use lqshift::instances::{random_instance, RandomFamily};
use lqshift::model::forward_state;
use lqshift::operators::bsde_residual;
use lqshift::oracle::{auto_lambda_max, brute_force_binary, DEFAULT_BUDGET};
use lqshift::principle::{
    check_general_smp, check_remark1_signs, check_stationarity, hamiltonian_mu,
    hamiltonian_mu_gradient, msa_candidate_search, solve_first_adjoint, solve_second_adjoint,
    MsaOptions, MsaStatus, DEFAULT_TOL,
};
use lqshift::{AdaptedProcess, ControlProcess, ControlTag, ProcessKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..100_000, mu in -3.0f64..3.0) {
        let (inst, _) = random_instance(seed, &RandomFamily::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vec = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (x, u, p, q) = (vec(inst.n), vec(inst.k), vec(inst.n), vec(inst.n));
        let level = seed as usize % inst.tree.depth();
        let g = hamiltonian_mu_gradient(&inst, level, &x, &u, &p, &q, mu);
        let h = 1e-6;
        for i in 0..inst.k {
            let (mut up, mut down) = (u.clone(), u.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (hamiltonian_mu(&inst, level, &x, &up, &p, &q, mu)
                - hamiltonian_mu(&inst, level, &x, &down, &p, &q, mu)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn first_adjoint_solves_its_recursion(seed in 0u64..100_000) {
        let family = RandomFamily { max_depth: 4, ..Default::default() };
        let (inst, domain) = random_instance(seed, &family).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
        raw.values_mut().iter_mut().for_each(|v| *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let u = ControlProcess::new(raw, ControlTag::Binary, &domain).unwrap();
        let x = forward_state(&inst, &u).unwrap();
        let pair = solve_first_adjoint(&inst, &x, &u).unwrap();
        let mut xi = AdaptedProcess::zeros(inst.tree, inst.n, ProcessKind::Running);
        for id in inst.tree.running_ids() {
            let c = inst.step(id.level);
            let xn = nalgebra::DVector::from_column_slice(x.node(id));
            let un = nalgebra::DVector::from_column_slice(u.process().node(id));
            let v = -(&c.q * xn) - c.s.transpose() * un;
            xi.node_mut(id).copy_from_slice(v.as_slice());
        }
        prop_assert!(bsde_residual(&inst, Some(&xi), &pair) <= 1e-10);
    }
}

#[test]
fn necessary_conditions_hold_at_brute_force_optima() {
    for seed in 0..40 {
        let (inst, domain) = random_instance(seed, &RandomFamily::default()).unwrap();
        let mu = auto_lambda_max(&inst, 1e-10).unwrap().mu;
        let best = brute_force_binary(&inst, &domain, DEFAULT_BUDGET).unwrap();
        for u in &best.ties {
            let x = forward_state(&inst, u).unwrap();
            let pair = solve_first_adjoint(&inst, &x, u).unwrap();
            let second = solve_second_adjoint(&inst, &x, u).unwrap();
            let st = check_stationarity(&inst, &x, u, &pair, mu, &domain, DEFAULT_TOL).unwrap();
            let signs = check_remark1_signs(&inst, &x, u, &pair, mu, DEFAULT_TOL).unwrap();
            let smp = check_general_smp(&inst, &x, u, &pair, &second, &domain, DEFAULT_TOL).unwrap();
            assert!(st.passed(), "seed {seed}: {st:?}");
            assert!(signs.passed(), "seed {seed}: {signs:?}");
            assert!(smp.passed(), "seed {seed}: {smp:?}");
        }
    }
}

#[test]
fn msa_fixed_points_are_stationary_and_mostly_optimal() {
    let family = RandomFamily {
        max_k: 1,
        min_depth: 2,
        max_depth: 2,
        ..Default::default()
    };
    let mut matches = 0;
    for seed in 0..20 {
        let (inst, domain) = random_instance(seed, &family).unwrap();
        let mu = auto_lambda_max(&inst, 1e-10).unwrap().mu;
        let start = ControlProcess::constant(inst.tree, &[0.0], ControlTag::Binary, &domain).unwrap();
        let res = msa_candidate_search(&inst, &domain, &start, &MsaOptions::new(mu, 100)).unwrap();
        assert_eq!(res.status, MsaStatus::FixedPoint, "seed {seed}");
        for w in res.trace.windows(2) {
            assert!(w[1].cost <= w[0].cost + 1e-12, "seed {seed}: cost went up");
        }
        let x = forward_state(&inst, &res.control).unwrap();
        let pair = solve_first_adjoint(&inst, &x, &res.control).unwrap();
        let st = check_stationarity(&inst, &x, &res.control, &pair, mu, &domain, DEFAULT_TOL).unwrap();
        assert!(st.passed(), "seed {seed}: {st:?}");
        let best = brute_force_binary(&inst, &domain, DEFAULT_BUDGET).unwrap();
        if (res.cost - best.best_cost).abs() <= 1e-10 * best.best_cost.abs().max(1.0) {
            matches += 1;
        }
    }
    eprintln!("msa optimal in {matches}/20");
    assert!(matches >= 15, "{matches}/20 fixed points optimal");
}
