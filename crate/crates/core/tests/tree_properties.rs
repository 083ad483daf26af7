use lqshift::tree::{
    inner_product_running, inner_product_terminal, AdaptedProcess, NodeId, ProcessKind,
    ScenarioTree,
};
use proptest::prelude::*;

fn process(depth: usize, dim: usize, kind: ProcessKind, raw: &[f64]) -> AdaptedProcess {
    let tree = ScenarioTree::new(depth, 1.0).unwrap();
    let mut p = AdaptedProcess::zeros(tree, dim, kind);
    for (v, r) in p.values_mut().iter_mut().zip(raw.iter().cycle()) {
        *v = *r;
    }
    p
}

proptest! {
    #[test]
    fn tower_property(depth in 1usize..8, raw in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        let tree = ScenarioTree::new(depth, 1.0).unwrap();
        let terminal = process(depth, 1, ProcessKind::Terminal, &raw);
        let mut level = terminal.values().to_vec();
        for child in (1..=depth).rev() {
            level = tree.conditional_expectation(&level, 1, child).unwrap();
        }
        let weighted: f64 = terminal.values().iter().map(|v| v * tree.path_prob(depth)).sum();
        prop_assert!((level[0] - weighted).abs() <= 1e-12 * (1.0 + weighted.abs()));
    }

    #[test]
    fn martingale_representation_reconstructs(depth in 1usize..7, raw in prop::collection::vec(-1e3f64..1e3, 1..64)) {
        let tree = ScenarioTree::new(depth, 0.7).unwrap();
        let terminal = process(depth, 2, ProcessKind::Terminal, &raw);
        let (mean, q) = tree.martingale_representation(terminal.values(), 2, depth).unwrap();
        for parent in tree.level_ids(depth - 1) {
            for (child, _) in [(parent.up(), 0), (parent.down(), 1)] {
                let dw = tree.increment_into(child);
                for i in 0..2 {
                    let rebuilt = mean[parent.index * 2 + i] + q[parent.index * 2 + i] * dw;
                    let actual = terminal.values()[child.index * 2 + i];
                    // two roundings in mean/q plus one in the reconstruction
                    let ulp = f64::EPSILON * actual.abs().max(mean[parent.index * 2 + i].abs()).max(1e-300);
                    prop_assert!((rebuilt - actual).abs() <= 4.0 * ulp,
                        "rebuilt {} vs {}", rebuilt, actual);
                }
            }
        }
    }

    #[test]
    fn inner_products_are_symmetric_bilinear_positive(
        depth in 1usize..6,
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
        s in -3.0f64..3.0,
    ) {
        for kind in [ProcessKind::Running, ProcessKind::Terminal] {
            let ip = |x: &AdaptedProcess, y: &AdaptedProcess| match kind {
                ProcessKind::Running => inner_product_running(x, y).unwrap(),
                _ => inner_product_terminal(x, y).unwrap(),
            };
            let u = process(depth, 2, kind, &a);
            let v = process(depth, 2, kind, &b);
            let uv = ip(&u, &v);
            prop_assert!((uv - ip(&v, &u)).abs() <= 1e-12 * (1.0 + uv.abs()));
            let mut w = u.clone();
            w.axpy(s, &v).unwrap();
            let lhs = ip(&w, &v);
            let rhs = uv + s * ip(&v, &v);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
            if u.max_abs() > 0.0 {
                prop_assert!(ip(&u, &u) > 0.0);
            }
        }
    }
}

#[test]
fn path_probabilities_are_dyadic_and_sum_to_one() {
    for depth in 1..=14 {
        let tree = ScenarioTree::new(depth, 1.0).unwrap();
        for level in 0..=depth {
            let p = tree.path_prob(level);
            assert_eq!(p, 1.0 / (1u64 << level) as f64);
            assert_eq!(p * tree.nodes_at(level) as f64, 1.0);
        }
        assert_eq!(tree.branch_prob() * 2.0, 1.0);
    }
    let tree = ScenarioTree::new(4, 1.0).unwrap();
    assert_eq!(NodeId::new(3, 7).global(), 14);
    assert_eq!(tree.running_ids().count(), 15);
}
