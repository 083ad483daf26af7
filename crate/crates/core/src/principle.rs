//! Adjoint equations, Hamiltonians and maximum-principle checkers.
//!
//! All node-wise quantities pair the state `X̄_n` and `q_n` with
//! `p̄_n = E[p_{n+1} | F_n]`, the same convention the adjoint operators use.
//! With that choice `∇_u H^μ` at a node is exactly `−1/(prob·dt)` times the
//! gradient of `J^μ`, so the first-order conditions hold to rounding at true
//! optima.
//!
//! The shifted Hamiltonian is
//!
//! ```text
//! H^μ(x, u, p, q) = ⟨p, Ax + Bu + b⟩ + ⟨q, Cx + Du + σ⟩
//!                   − ½[⟨Qx, x⟩ + 2⟨Sx − ½μe, u⟩ + ⟨(R + μI)u, u⟩]
//! ```
//!
//! and `H⁰` is the classical one.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::ControlDomain;
use crate::error::{Error, Result};
use crate::linalg::{bilinear, dot, gemv_acc, gemv_t_acc, mat_from_slice, mat_to_row_major, symmetrize};
use crate::model::{cost_of_path, euler_path, ControlProcess, LqInstance};
use crate::operators::{solve_linear_bsde, BsdeSolution};
use crate::tree::{AdaptedProcess, NodeId, ProcessKind};

/// Default tolerance for sign conditions.
pub const DEFAULT_TOL: f64 = 1e-8;

/// Largest `k` accepted by the checkers (vertex enumeration of `Ū`).
pub const MAX_CHECK_DIM: usize = 12;

/// First-order adjoint `(p, q)`; see [`BsdeSolution`] for the layout.
pub type AdjointPair = BsdeSolution;

/// Second-order adjoint `(P, Λ)`, row-major n×n matrices per node.
#[derive(Clone, Debug)]
pub struct SecondOrderPair {
    pub n: usize,
    /// Levels `0..=N`, `P_N = −G`.
    pub p: AdaptedProcess,
    /// `E[P_{n+1} | F_n]` on running nodes.
    pub p_next_mean: AdaptedProcess,
    /// Martingale coefficient of `P_{n+1}` on running nodes.
    pub lambda: AdaptedProcess,
}

impl SecondOrderPair {
    pub fn p_at(&self, id: NodeId) -> DMatrix<f64> {
        mat_from_slice(self.n, self.p.node(id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Stationarity,
    Remark1Signs,
    GeneralSmp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MpReport {
    pub check: CheckKind,
    pub verdict: Verdict,
    pub worst_node: Option<NodeId>,
    /// Largest violation over all nodes; `Pass` iff this is `≤ tol`.
    pub worst_violation: f64,
    /// Competitor `v` (or coordinate index for sign checks) at the worst node.
    pub worst_witness: Option<Vec<f64>>,
    pub tol: f64,
    pub mu: f64,
    /// Hamiltonian gradient per running node, process storage order.
    pub gradients: Vec<f64>,
}

impl MpReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

struct Worst {
    value: f64,
    node: Option<NodeId>,
    witness: Option<Vec<f64>>,
}

impl Worst {
    fn new() -> Self {
        Self {
            value: f64::NEG_INFINITY,
            node: None,
            witness: None,
        }
    }

    fn offer(&mut self, value: f64, node: NodeId, witness: impl FnOnce() -> Vec<f64>) {
        if value > self.value {
            self.value = value;
            self.node = Some(node);
            self.witness = Some(witness());
        }
    }

    fn into_report(self, check: CheckKind, tol: f64, mu: f64, gradients: Vec<f64>) -> MpReport {
        MpReport {
            check,
            verdict: if self.value <= tol { Verdict::Pass } else { Verdict::Fail },
            worst_node: self.node,
            worst_violation: self.value,
            worst_witness: self.witness,
            tol,
            mu,
            gradients,
        }
    }
}

fn check_path(inst: &LqInstance, xbar: &AdaptedProcess, ubar: &ControlProcess) -> Result<()> {
    if *xbar.tree() != inst.tree || xbar.dim() != inst.n || xbar.kind() != ProcessKind::Path {
        return Err(Error::DimensionMismatch(format!(
            "state must be a path process of dim {} on the instance tree",
            inst.n
        )));
    }
    let u = ubar.process();
    if *u.tree() != inst.tree || u.dim() != inst.k {
        return Err(Error::DimensionMismatch(format!(
            "control must have dim {} on the instance tree",
            inst.k
        )));
    }
    Ok(())
}

/// `dp = −[Aᵀp + Cᵀq − QX̄ − Sᵀū] dt + q dW`, `p(T) = −G X̄(T)`.
pub fn solve_first_adjoint(
    inst: &LqInstance,
    xbar: &AdaptedProcess,
    ubar: &ControlProcess,
) -> Result<AdjointPair> {
    check_path(inst, xbar, ubar)?;
    let (tree, n) = (inst.tree, inst.n);
    let mut xi = AdaptedProcess::zeros(tree, n, ProcessKind::Running);
    for id in tree.running_ids() {
        let c = inst.step(id.level);
        let dst = xi.node_mut(id);
        gemv_acc(dst, -1.0, &c.q, xbar.node(id));
        gemv_t_acc(dst, -1.0, &c.s, ubar.process().node(id));
    }
    let mut eta = AdaptedProcess::zeros(tree, n, ProcessKind::Terminal);
    for id in tree.level_ids(tree.depth()) {
        gemv_acc(eta.node_mut(id), -1.0, &inst.g, xbar.node(id));
    }
    solve_linear_bsde(inst, Some(&xi), Some(&eta))
}

/// `H^μ` with coefficients of interval `level`.
pub fn hamiltonian_mu(
    inst: &LqInstance,
    level: usize,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
    mu: f64,
) -> f64 {
    let c = inst.step(level);
    let n = inst.n;
    let mut drift = c.drift.as_slice().to_vec();
    gemv_acc(&mut drift, 1.0, &c.a, x);
    gemv_acc(&mut drift, 1.0, &c.b, u);
    let mut vol = c.diffusion.as_slice().to_vec();
    gemv_acc(&mut vol, 1.0, &c.c, x);
    gemv_acc(&mut vol, 1.0, &c.d, u);
    debug_assert_eq!(drift.len(), n);

    let mut sx = vec![0.0; inst.k];
    gemv_acc(&mut sx, 1.0, &c.s, x);
    let linear: f64 = sx.iter().zip(u).map(|(s, ui)| (s - 0.5 * mu) * ui).sum();
    let quad = bilinear(&c.r, u, u) + mu * dot(u, u);
    dot(p, &drift) + dot(q, &vol) - 0.5 * (bilinear(&c.q, x, x) + 2.0 * linear + quad)
}

/// `∇_u H^μ = Bᵀp + Dᵀq − Sx + ½μe − (R + μI)u`.
pub fn hamiltonian_mu_gradient(
    inst: &LqInstance,
    level: usize,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
    mu: f64,
) -> Vec<f64> {
    let c = inst.step(level);
    let mut g = vec![0.5 * mu; inst.k];
    gemv_t_acc(&mut g, 1.0, &c.b, p);
    gemv_t_acc(&mut g, 1.0, &c.d, q);
    gemv_acc(&mut g, -1.0, &c.s, x);
    gemv_acc(&mut g, -1.0, &c.r, u);
    for (gi, ui) in g.iter_mut().zip(u) {
        *gi -= mu * ui;
    }
    g
}

/// `∇_u H^μ` at every running node along `(X̄, ū, p̄, q)`.
pub fn gradient_process(
    inst: &LqInstance,
    xbar: &AdaptedProcess,
    ubar: &ControlProcess,
    pair: &AdjointPair,
    mu: f64,
) -> AdaptedProcess {
    let tree = inst.tree;
    let mut out = AdaptedProcess::zeros(tree, inst.k, ProcessKind::Running);
    for id in tree.running_ids() {
        let g = hamiltonian_mu_gradient(
            inst,
            id.level,
            xbar.node(id),
            ubar.process().node(id),
            pair.p_next_mean.node(id),
            pair.q.node(id),
            mu,
        );
        out.node_mut(id).copy_from_slice(&g);
    }
    out
}

/// `⟨∇_u H^μ, v − ū⟩ ≤ tol` at every node for every extreme point `v` of `Ū`.
pub fn check_stationarity(
    inst: &LqInstance,
    xbar: &AdaptedProcess,
    ubar: &ControlProcess,
    pair: &AdjointPair,
    mu: f64,
    domain: &ControlDomain,
    tol: f64,
) -> Result<MpReport> {
    check_path(inst, xbar, ubar)?;
    if domain.k() > MAX_CHECK_DIM {
        return Err(Error::TooLarge {
            what: "stationarity check (control dimension)",
            required: domain.k() as u128,
            cap: MAX_CHECK_DIM as u128,
        });
    }
    let vertices = domain.relaxed_vertices()?;
    let grads = gradient_process(inst, xbar, ubar, pair, mu);
    let mut worst = Worst::new();
    for id in inst.tree.running_ids() {
        let (g, u) = (grads.node(id), ubar.process().node(id));
        for v in &vertices {
            let val: f64 = g.iter().zip(v.iter().zip(u)).map(|(gi, (vi, ui))| gi * (vi - ui)).sum();
            worst.offer(val, id, || v.clone());
        }
    }
    Ok(worst.into_report(CheckKind::Stationarity, tol, mu, grads.into_values()))
}

/// Coordinate-wise sign conditions for a binary `ū`: `(∇_u H^μ)_i ≤ tol` where
/// `ū_i = 0` and `≥ −tol` where `ū_i = 1`.
pub fn check_remark1_signs(
    inst: &LqInstance,
    xbar: &AdaptedProcess,
    ubar: &ControlProcess,
    pair: &AdjointPair,
    mu: f64,
    tol: f64,
) -> Result<MpReport> {
    check_path(inst, xbar, ubar)?;
    let u = ubar.process();
    if u.values().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::InadmissibleControl(
            "sign conditions need a binary control".into(),
        ));
    }
    let grads = gradient_process(inst, xbar, ubar, pair, mu);
    let mut worst = Worst::new();
    for id in inst.tree.running_ids() {
        for (i, (&g, &ui)) in grads.node(id).iter().zip(u.node(id)).enumerate() {
            let violation = if ui == 0.0 { g } else { -g };
            worst.offer(violation, id, || vec![i as f64]);
        }
    }
    Ok(worst.into_report(CheckKind::Remark1Signs, tol, mu, grads.into_values()))
}

/// Backward recursion for the matrix adjoint
/// `dP = −[AᵀP + PA + CᵀPC + ΛC + CᵀΛ − Q] dt + Λ dW`, `P(T) = −G`.
///
/// Each step adds `dt²(AᵀP̄A + AᵀΛC + CᵀΛA)` to the explicit drift so that
/// `−P` is exactly the second-moment propagator of the Euler state map; `P`
/// is symmetrized at every node.
pub fn solve_second_adjoint(
    inst: &LqInstance,
    xbar: &AdaptedProcess,
    ubar: &ControlProcess,
) -> Result<SecondOrderPair> {
    check_path(inst, xbar, ubar)?;
    let (tree, n) = (inst.tree, inst.n);
    let nn = n * n;
    let dt = tree.dt();
    let depth = tree.depth();
    let mut p = AdaptedProcess::zeros(tree, nn, ProcessKind::Path);
    let mut p_next_mean = AdaptedProcess::zeros(tree, nn, ProcessKind::Running);
    let mut lambda = AdaptedProcess::zeros(tree, nn, ProcessKind::Running);
    let neg_g = -&inst.g;
    for id in tree.level_ids(depth) {
        mat_to_row_major(&neg_g, p.node_mut(id));
    }
    for level in (0..depth).rev() {
        let c = inst.step(level);
        let (mean, lam) = tree.martingale_representation(p.level(level + 1), nn, level + 1)?;
        for j in 0..tree.nodes_at(level) {
            let pbar = mat_from_slice(n, &mean[j * nn..(j + 1) * nn]);
            let l = mat_from_slice(n, &lam[j * nn..(j + 1) * nn]);
            let at = c.a.transpose();
            let ct = c.c.transpose();
            let drift = &at * &pbar + &pbar * &c.a + &ct * &pbar * &c.c + &l * &c.c + &ct * &l
                - &c.q;
            let second = &at * &pbar * &c.a + &at * &l * &c.c + &ct * &l * &c.a;
            let mut pn = &pbar + drift * dt + second * (dt * dt);
            symmetrize(&mut pn);
            mat_to_row_major(&pn, p.node_mut(NodeId::new(level, j)));
        }
        p_next_mean.level_mut(level).copy_from_slice(&mean);
        lambda.level_mut(level).copy_from_slice(&lam);
    }
    Ok(SecondOrderPair {
        n,
        p,
        p_next_mean,
        lambda,
    })
}

/// Quadratic penalty matrix at a node:
/// `DᵀP̄D + dt(BᵀP̄B + BᵀΛD + DᵀΛB)`.
fn spike_curvature(inst: &LqInstance, second: &SecondOrderPair, id: NodeId) -> DMatrix<f64> {
    let c = inst.step(id.level);
    let n = inst.n;
    let pbar = mat_from_slice(n, second.p_next_mean.node(id));
    let l = mat_from_slice(n, second.lambda.node(id));
    let dt = inst.tree.dt();
    let bt = c.b.transpose();
    let dtr = c.d.transpose();
    &dtr * &pbar * &c.d + (&bt * &pbar * &c.b + &bt * &l * &c.d + &dtr * &l * &c.b) * dt
}

/// `H⁰(ū) − H⁰(v) − ½(ū − v)ᵀ K (ū − v)` with `K` from [`spike_curvature`];
/// equals the exact cost change of replacing `ū` by `v` at that node alone,
/// divided by `prob·dt`.
fn spike_value(
    inst: &LqInstance,
    id: NodeId,
    x: &[f64],
    u: &[f64],
    v: &[f64],
    pair: &AdjointPair,
    curvature: &DMatrix<f64>,
) -> f64 {
    let (p, q) = (pair.p_next_mean.node(id), pair.q.node(id));
    let h_u = hamiltonian_mu(inst, id.level, x, u, p, q, 0.0);
    let h_v = hamiltonian_mu(inst, id.level, x, v, p, q, 0.0);
    let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    h_u - h_v - 0.5 * bilinear(curvature, &diff, &diff)
}

/// Second-order (nonconvex-domain) principle: at every node and every
/// `v ∈ U`, `H⁰(ū) − H⁰(v) − ½(ū − v)ᵀDᵀPD(ū − v) ≥ −tol`, with the
/// discrete drift correction described in [`spike_curvature`].
pub fn check_general_smp(
    inst: &LqInstance,
    xbar: &AdaptedProcess,
    ubar: &ControlProcess,
    pair: &AdjointPair,
    second: &SecondOrderPair,
    domain: &ControlDomain,
    tol: f64,
) -> Result<MpReport> {
    check_path(inst, xbar, ubar)?;
    let candidates = domain.binary_vertices()?;
    let grads = gradient_process(inst, xbar, ubar, pair, 0.0);
    let mut worst = Worst::new();
    for id in inst.tree.running_ids() {
        let k = spike_curvature(inst, second, id);
        let (x, u) = (xbar.node(id), ubar.process().node(id));
        for v in &candidates {
            let val = spike_value(inst, id, x, u, v, pair, &k);
            worst.offer(-val, id, || v.clone());
        }
    }
    Ok(worst.into_report(CheckKind::GeneralSmp, tol, 0.0, grads.into_values()))
}

#[derive(Clone, Debug)]
pub struct MsaOptions {
    pub mu: f64,
    pub max_iter: usize,
    /// In `(0, 1]`: a linear step switches only nodes whose linear-score gain
    /// is at least `(1 − damping)` times the largest gain.
    pub damping: f64,
    pub tol: f64,
}

impl MsaOptions {
    pub fn new(mu: f64, max_iter: usize) -> Self {
        Self {
            mu,
            max_iter,
            damping: 1.0,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsaStatus {
    FixedPoint,
    CycleDetected,
    MaxIterations,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsaPhase {
    /// Node-wise maximization of `⟨∇_u H^μ, v⟩`.
    Linear,
    /// Spike moves on nodes that violate the second-order principle.
    Spike,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MsaStep {
    pub iteration: usize,
    pub phase: MsaPhase,
    pub cost: f64,
    pub switched: usize,
}

#[derive(Clone, Debug)]
pub struct MsaResult {
    pub control: ControlProcess,
    pub cost: f64,
    pub status: MsaStatus,
    pub iterations: usize,
    pub trace: Vec<MsaStep>,
}

/// Successive approximations over binary controls.
///
/// Each iteration solves forward and backward, then replaces `ū` node-wise by
/// the lexicographically smallest maximizer of `⟨∇_u H^μ(ū), v⟩` over `U`.
/// Since `J^μ` is concave this never increases the cost, but it can stall at
/// stationary vertices that are not optimal; at such a point the nodes that
/// violate the second-order principle are moved to their best spike value
/// (all together if that lowers the cost, otherwise only the worst one, which
/// always does). The search stops when neither phase changes anything.
pub fn msa_candidate_search(
    inst: &LqInstance,
    domain: &ControlDomain,
    start: &ControlProcess,
    options: &MsaOptions,
) -> Result<MsaResult> {
    if options.max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be ≥ 1".into()));
    }
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "damping must lie in (0, 1], got {}",
            options.damping
        )));
    }
    let tree = inst.tree;
    let candidates = domain.binary_vertices()?;
    if candidates.is_empty() {
        return Err(Error::EmptyBinarySet);
    }
    let mut u = ControlProcess::binary(start.process().clone(), domain)?;
    let key = |u: &ControlProcess| -> Vec<u64> {
        u.process().values().iter().map(|v| v.to_bits()).collect()
    };
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    seen.insert(key(&u));
    let mut trace = Vec::new();

    let cost_of = |u: &ControlProcess| -> Result<(AdaptedProcess, f64)> {
        let x = euler_path(inst, Some(u.process()), inst.x0.as_slice(), true)?;
        let j = cost_of_path(inst, &x, u.process());
        Ok((x, j))
    };
    let (mut x, mut cost) = cost_of(&u)?;
    let mut best = (u.clone(), cost);

    for it in 1..=options.max_iter {
        let pair = solve_first_adjoint(inst, &x, &u)?;
        let grads = gradient_process(inst, &x, &u, &pair, options.mu);

        // linear phase
        let mut proposals: Vec<(NodeId, usize, f64)> = Vec::new();
        for id in tree.running_ids() {
            let g = grads.node(id);
            let current = dot(g, u.process().node(id));
            let mut best_idx = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, v) in candidates.iter().enumerate() {
                let s = dot(g, v);
                if s > best_score {
                    best_score = s;
                    best_idx = i;
                }
            }
            if candidates[best_idx].as_slice() != u.process().node(id) {
                proposals.push((id, best_idx, best_score - current));
            }
        }
        let max_gain = proposals.iter().map(|p| p.2).fold(0.0, f64::max);
        let threshold = (1.0 - options.damping) * max_gain;
        let chosen: Vec<_> = proposals.into_iter().filter(|p| p.2 >= threshold).collect();

        let (next, phase, switched) = if !chosen.is_empty() {
            let mut next = u.process().clone();
            for (id, idx, _) in &chosen {
                next.node_mut(*id).copy_from_slice(&candidates[*idx]);
            }
            (next, MsaPhase::Linear, chosen.len())
        } else {
            // spike phase
            let second = solve_second_adjoint(inst, &x, &u)?;
            let mut moves: Vec<(NodeId, usize, f64)> = Vec::new();
            for id in tree.running_ids() {
                let k = spike_curvature(inst, &second, id);
                let (xn, un) = (x.node(id), u.process().node(id));
                let mut best_move: Option<(usize, f64)> = None;
                for (i, v) in candidates.iter().enumerate() {
                    let val = spike_value(inst, id, xn, un, v, &pair, &k);
                    if val < -options.tol && best_move.is_none_or(|(_, b)| val < b) {
                        best_move = Some((i, val));
                    }
                }
                if let Some((i, val)) = best_move {
                    moves.push((id, i, val * tree.path_prob(id.level)));
                }
            }
            if moves.is_empty() {
                return Ok(MsaResult {
                    control: u,
                    cost,
                    status: MsaStatus::FixedPoint,
                    iterations: it,
                    trace,
                });
            }
            let mut all = u.process().clone();
            for (id, idx, _) in &moves {
                all.node_mut(*id).copy_from_slice(&candidates[*idx]);
            }
            let all_cost = crate::model::cost_of_process(inst, &all)?;
            if all_cost < cost {
                (all, MsaPhase::Spike, moves.len())
            } else {
                let (id, idx, _) = moves
                    .iter()
                    .min_by(|a, b| a.2.total_cmp(&b.2))
                    .copied()
                    .expect("non-empty");
                let mut single = u.process().clone();
                single.node_mut(id).copy_from_slice(&candidates[idx]);
                (single, MsaPhase::Spike, 1)
            }
        };

        u = ControlProcess::binary(next, domain)?;
        (x, cost) = cost_of(&u)?;
        trace.push(MsaStep {
            iteration: it,
            phase,
            cost,
            switched,
        });
        if cost < best.1 {
            best = (u.clone(), cost);
        }
        if !seen.insert(key(&u)) {
            return Ok(MsaResult {
                control: best.0,
                cost: best.1,
                status: MsaStatus::CycleDetected,
                iterations: it,
                trace,
            });
        }
    }
    Ok(MsaResult {
        control: u,
        cost,
        status: MsaStatus::MaxIterations,
        iterations: options.max_iter,
        trace,
    })
}
