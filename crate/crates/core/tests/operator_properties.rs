use lqshift::instances::{random_instance, RandomFamily};
use lqshift::model::{cost_direct, forward_state};
use lqshift::operators::{
    adjoint_apply, apply_n, assemble_n_dense, decompose_state, lu_via_fundamental,
    quadratic_functional,
};
use lqshift::spectral::{lambda_max, SpectralMode, DEFAULT_MAX_ITER};
use lqshift::tree::{inner_product_running, inner_product_terminal};
use lqshift::{AdaptedProcess, ControlProcess, ControlTag, LqInstance, ProcessKind, StepCoefficients};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn family(max_depth: usize) -> RandomFamily {
    RandomFamily {
        max_depth,
        ..Default::default()
    }
}

fn random_process(inst: &LqInstance, dim: usize, kind: ProcessKind, rng: &mut ChaCha8Rng) -> AdaptedProcess {
    let mut p = AdaptedProcess::zeros(inst.tree, dim, kind);
    p.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    p
}

fn lu(inst: &LqInstance, u: &AdaptedProcess) -> AdaptedProcess {
    decompose_state(inst, u, &vec![0.0; inst.n]).unwrap().lu
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn control_duality(seed in 0u64..10_000) {
        let (inst, _) = random_instance(seed, &family(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let u = random_process(&inst, inst.k, ProcessKind::Running, &mut rng);
        let xi = random_process(&inst, inst.n, ProcessKind::Running, &mut rng);
        let eta = random_process(&inst, inst.n, ProcessKind::Terminal, &mut rng);
        let x = lu(&inst, &u);
        let lhs = inner_product_running(&x.running_part(), &xi).unwrap()
            + inner_product_terminal(&x.terminal_part(), &eta).unwrap();
        let adj = adjoint_apply(&inst, Some(&xi), Some(&eta)).unwrap();
        let mut image = adj.lstar_xi.unwrap();
        image.axpy(1.0, &adj.lhatstar_eta.unwrap()).unwrap();
        let rhs = inner_product_running(&u, &image).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn initial_state_duality(seed in 0u64..10_000) {
        let (inst, _) = random_instance(seed, &family(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef);
        let x0: Vec<f64> = (0..inst.n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xi = random_process(&inst, inst.n, ProcessKind::Running, &mut rng);
        let eta = random_process(&inst, inst.n, ProcessKind::Terminal, &mut rng);
        let zero_u = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
        let gx = decompose_state(&inst, &zero_u, &x0).unwrap().gamma_x;
        let lhs = inner_product_running(&gx.running_part(), &xi).unwrap()
            + inner_product_terminal(&gx.terminal_part(), &eta).unwrap();
        let adj = adjoint_apply(&inst, Some(&xi), Some(&eta)).unwrap();
        let g: Vec<f64> = adj.gammastar_xi.unwrap().iter()
            .zip(adj.gammahatstar_eta.unwrap())
            .map(|(a, b)| a + b)
            .collect();
        let rhs: f64 = x0.iter().zip(&g).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn functional_form_equals_direct_cost(seed in 0u64..10_000) {
        let (inst, domain) = random_instance(seed, &family(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_process(&inst, inst.k, ProcessKind::Running, &mut rng);
        let u01 = AdaptedProcess::from_values(
            inst.tree, inst.k, ProcessKind::Running,
            u.values().iter().map(|v| 0.5 * (v + 1.0)).collect(),
        ).unwrap();
        let control = ControlProcess::new(u01.clone(), ControlTag::Relaxed, &domain).unwrap();
        let direct = cost_direct(&inst, &control).unwrap();
        let functional = quadratic_functional(&inst, &u01, inst.x0.as_slice()).unwrap();
        prop_assert!((direct - functional).abs() <= 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn n_is_self_adjoint(seed in 0u64..10_000) {
        let (inst, _) = random_instance(seed, &family(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let u = random_process(&inst, inst.k, ProcessKind::Running, &mut rng);
        let v = random_process(&inst, inst.k, ProcessKind::Running, &mut rng);
        let a = inner_product_running(&apply_n(&inst, &u).unwrap(), &v).unwrap();
        let b = inner_product_running(&u, &apply_n(&inst, &v).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn state_is_linear_in_control_and_superposes(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (inst, domain) = random_instance(seed, &family(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5);
        let u = random_process(&inst, inst.k, ProcessKind::Running, &mut rng);
        let v = random_process(&inst, inst.k, ProcessKind::Running, &mut rng);
        let mut w = u.scaled(a);
        w.axpy(b, &v).unwrap();
        let mut expect = lu(&inst, &u).scaled(a);
        expect.axpy(b, &lu(&inst, &v)).unwrap();
        prop_assert!(lu(&inst, &w).max_abs_diff(&expect).unwrap() <= 1e-12 * expect.max_abs().max(1.0));

        let ones = ControlProcess::constant(inst.tree, &vec![1.0; inst.k], ControlTag::Binary, &domain).unwrap();
        let total = decompose_state(&inst, ones.process(), inst.x0.as_slice()).unwrap().total();
        let direct = forward_state(&inst, &ones).unwrap();
        prop_assert!(total.max_abs_diff(&direct).unwrap() <= 1e-12 * direct.max_abs().max(1.0));
    }
}

/// Matrix of a linear map between weighted coordinate spaces, column `j` being
/// the image of the `j`-th unit vector.
fn matrix_of(size_in: usize, size_out: usize, mut f: impl FnMut(usize) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(size_out, size_in);
    for j in 0..size_in {
        let col = f(j);
        for i in 0..size_out {
            m[(i, j)] = col[i];
        }
    }
    m
}

#[test]
fn adjoint_matches_dense_transpose() {
    for seed in 0..8 {
        let (inst, _) = random_instance(seed, &family(3)).unwrap();
        let tree = inst.tree;
        let (n, k) = (inst.n, inst.k);
        let run_w: Vec<f64> = tree.running_ids()
            .flat_map(|id| std::iter::repeat((tree.path_prob(id.level) * tree.dt()).sqrt()).take(n))
            .collect();
        let ctl_w: Vec<f64> = tree.running_ids()
            .flat_map(|id| std::iter::repeat((tree.path_prob(id.level) * tree.dt()).sqrt()).take(k))
            .collect();
        let (su, sx) = (ctl_w.len(), run_w.len());

        // L: controls → running states, in orthonormal coordinates
        let l = matrix_of(su, sx, |j| {
            let mut u = AdaptedProcess::zeros(tree, k, ProcessKind::Running);
            u.values_mut()[j] = 1.0 / ctl_w[j];
            let x = lu(&inst, &u).running_part();
            x.values().iter().zip(&run_w).map(|(v, w)| v * w).collect()
        });
        let lstar = matrix_of(sx, su, |j| {
            let mut xi = AdaptedProcess::zeros(tree, n, ProcessKind::Running);
            xi.values_mut()[j] = 1.0 / run_w[j];
            let img = adjoint_apply(&inst, Some(&xi), None).unwrap().lstar_xi.unwrap();
            img.values().iter().zip(&ctl_w).map(|(v, w)| v * w).collect()
        });
        let defect = (&lstar - l.transpose()).abs().max();
        assert!(defect <= 1e-12, "seed {seed}: {defect}");
    }
}

#[test]
fn dense_n_symmetry_and_power_agreement() {
    for seed in 0..10 {
        let (inst, _) = random_instance(seed, &family(4)).unwrap();
        let dense = assemble_n_dense(&inst).unwrap();
        assert!(dense.symmetry_defect <= 1e-9);
        let d = lambda_max(&inst, SpectralMode::Dense, 1e-10, DEFAULT_MAX_ITER).unwrap();
        // seeds 2, 3 and 6 have top gaps near 1e-3 and need far more than the default budget
        let p = lambda_max(&inst, SpectralMode::PowerIteration, 1e-9, 1_000_000).unwrap();
        assert!(
            (d.lambda_max - p.lambda_max).abs() <= 1e-7,
            "seed {seed}: dense {} power {}",
            d.lambda_max,
            p.lambda_max
        );
    }
}

#[test]
fn fundamental_matrix_form_converges() {
    let inst_at = |depth: usize| {
        let tree = lqshift::ScenarioTree::new(depth, 1.0).unwrap();
        LqInstance::zeros(tree, 1, 1).with_steps(|_| {
            let mut s = StepCoefficients::zeros(1, 1);
            s.a[(0, 0)] = 0.5;
            s.b[(0, 0)] = 1.0;
            s.c[(0, 0)] = 0.3;
            s.d[(0, 0)] = 0.5;
            s
        })
    };
    // compare the mean terminal state of both constructions
    let gap = |depth: usize| {
        let inst = inst_at(depth);
        let u = AdaptedProcess::constant(inst.tree, ProcessKind::Running, &[1.0]);
        let a = lu(&inst, &u).terminal_part();
        let b = lu_via_fundamental(&inst, &u).unwrap().terminal_part();
        let p = inst.tree.path_prob(depth);
        (a.values().iter().sum::<f64>() - b.values().iter().sum::<f64>()).abs() * p
    };
    let errs: Vec<f64> = [1, 2, 4, 8].iter().map(|&d| gap(d)).collect();
    for w in errs.windows(2) {
        assert!(w[0] / w[1] >= 1.5, "{errs:?}");
    }
}
