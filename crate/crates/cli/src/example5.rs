//! The built-in one-dimensional example at several depths.

use std::path::Path;

use anyhow::anyhow;
use lqshift::instances::example5;
use lqshift::io::{instance_digest, ReportFile, ReportParameters};
use lqshift::model::{cost_direct, forward_state};
use lqshift::oracle::{auto_lambda_max, brute_force_binary, enumeration_size, DEFAULT_BUDGET};
use lqshift::principle::{
    check_general_smp, check_stationarity, msa_candidate_search, solve_first_adjoint,
    solve_second_adjoint, MsaOptions,
};
use lqshift::{ControlProcess, ControlTag, NodeId};
use serde_json::{json, Value};

use crate::commands::{nodes_json, p_csv_text, write_text, Failure};
use crate::GlobalOpts;

const MSA_ITERS: usize = 50;

struct Row {
    depth: usize,
    dt: f64,
    cost_ones: f64,
    weight_sum: f64,
    lambda_max: f64,
    gradient: f64,
}

/// Limit of a quantity with O(dt) error from its values at depths `n1 < n2`.
fn extrapolate(n1: usize, f1: f64, n2: usize, f2: f64) -> f64 {
    f2 + (f2 - f1) * n1 as f64 / (n2 - n1) as f64
}

pub fn run(g: &GlobalOpts, depths: &[usize], out: &Path) -> Result<(), Failure> {
    if depths.is_empty() {
        return Err(Failure {
            code: crate::commands::EXIT_FAILURE,
            error: anyhow!("--depths is empty"),
        });
    }
    let mut sorted = depths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let mut per_depth = Vec::new();
    let mut rows = Vec::new();
    let mut last_digest = String::new();
    for &depth in &sorted {
        let (inst, domain) = example5(depth)?;
        let tree = inst.tree;
        let dt = tree.dt();
        last_digest = instance_digest(&inst, &domain);

        let ones = ControlProcess::constant(tree, &[1.0], ControlTag::Binary, &domain)?;
        let cost_ones = cost_direct(&inst, &ones)?;
        let weights: Vec<f64> = (0..depth).map(|m| 1.5 - tree.time(m + 1)).collect();
        let weight_sum: f64 = weights.iter().sum::<f64>() * dt;
        let mut wcsv = String::from("m,t_next,weight\n");
        for (m, w) in weights.iter().enumerate() {
            wcsv.push_str(&format!("{m},{},{w}\n", tree.time(m + 1)));
        }
        write_text(&out.join(format!("weights_depth{depth}.csv")), &wcsv)?;

        let spec = auto_lambda_max(&inst, 1e-10)?;

        let (optimum, opt_cost, method) = if enumeration_size(&inst, &domain)? <= DEFAULT_BUDGET {
            let res = brute_force_binary(&inst, &domain, DEFAULT_BUDGET)?;
            (res.best_control, res.best_cost, "brute-force")
        } else {
            let opts = MsaOptions {
                tol: g.tol,
                ..MsaOptions::new(spec.mu, MSA_ITERS)
            };
            let res = msa_candidate_search(&inst, &domain, &ones, &opts)?;
            (res.control, res.cost, "msa")
        };

        let x = forward_state(&inst, &optimum)?;
        let pair = solve_first_adjoint(&inst, &x, &optimum)?;
        let second = solve_second_adjoint(&inst, &x, &optimum)?;
        let p_dev = second
            .p
            .node_ids()
            .map(|id| (second.p.node(id)[0] - (2.0 * tree.time(id.level) - 4.0)).abs())
            .fold(0.0, f64::max);
        write_text(&out.join(format!("P_depth{depth}.csv")), &p_csv_text(&inst, &second.p))?;
        let st = check_stationarity(&inst, &x, &optimum, &pair, spec.mu, &domain, g.tol)?;
        let smp = check_general_smp(&inst, &x, &optimum, &pair, &second, &domain, g.tol)?;
        let gradient = st.gradients[0];

        per_depth.push(json!({
            "depth": depth,
            "dt": dt,
            "instanceDigest": instance_digest(&inst, &domain),
            "costAllOnes": cost_ones,
            "weightedSum": weight_sum,
            "closedForm": 1.5 - (depth as f64 + 1.0) / (2.0 * depth as f64),
            "lambdaMax": spec.lambda_max,
            "lambdaClosedForm": 3.0 - 2.0 * dt,
            "spectralMethod": spec.method,
            "optimum": {
                "method": method,
                "cost": opt_cost,
                "control": nodes_json(optimum.process()),
            },
            "adjointMaxAbs": { "p": pair.p.max_abs(), "q": pair.q.max_abs() },
            "secondAdjoint": { "maxDeviationFrom2tMinus4": p_dev, "lambdaMaxAbs": second.lambda.max_abs() },
            "rootGradient": gradient,
            "rootGradientClosedForm": -(3.0 - 2.0 * dt) / 2.0,
            "stationarity": st.verdict,
            "generalSmp": smp.verdict,
            "pAtRoot": second.p.node(NodeId::root())[0],
        }));
        rows.push(Row {
            depth,
            dt,
            cost_ones,
            weight_sum,
            lambda_max: spec.lambda_max,
            gradient,
        });
    }

    let mut costs = String::from("depth,dt,cost_all_ones,weighted_sum,lambda_max,root_gradient\n");
    for r in &rows {
        costs.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.depth, r.dt, r.cost_ones, r.weight_sum, r.lambda_max, r.gradient
        ));
    }
    let extrapolation: Value = if rows.len() >= 2 {
        let (a, b) = (&rows[rows.len() - 2], &rows[rows.len() - 1]);
        let row = json!({
            "fromDepths": [a.depth, b.depth],
            "costAllOnes": extrapolate(a.depth, a.cost_ones, b.depth, b.cost_ones),
            "lambdaMax": extrapolate(a.depth, a.lambda_max, b.depth, b.lambda_max),
            "rootGradient": extrapolate(a.depth, a.gradient, b.depth, b.gradient),
        });
        costs.push_str(&format!(
            "inf,0,{},,{},{}\n",
            row["costAllOnes"], row["lambdaMax"], row["rootGradient"]
        ));
        row
    } else {
        Value::Null
    };
    write_text(&out.join("costs_by_depth.csv"), &costs)?;

    let report = ReportFile::new(
        "example5",
        last_digest,
        ReportParameters {
            tol: g.tol,
            seed: g.seed,
            depth: *sorted.last().expect("non-empty"),
            extra: [("depths".to_string(), json!(sorted))].into_iter().collect(),
        },
        json!({ "depths": per_depth, "extrapolation": extrapolation }),
    );
    write_text(&out.join("report.json"), &(report.to_json_pretty() + "\n"))?;
    println!("{}", out.join("report.json").display());
    Ok(())
}
