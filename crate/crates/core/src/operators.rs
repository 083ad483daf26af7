//! Operator calculus on the tree.
//!
//! The state splits as `X = Γx + Lu + f` (terminal: `Γ̂x + L̂u + f̂`). The
//! adjoints `L*`, `L̂*`, `Γ*`, `Γ̂*` come from one backward recursion
//!
//! ```text
//! p_N = η
//! (p̄_n, q_n) = martingale representation of p_{n+1}
//! p_n = p̄_n + (Aᵀ p̄_n + Cᵀ q_n + ξ_n) dt
//! (L*ξ + L̂*η)_n = Bᵀ p̄_n + Dᵀ q_n,      Γ*ξ + Γ̂*η = p_0
//! ```
//!
//! which is the exact transpose of the Euler forward map, so the duality
//! identities hold to rounding. The cost becomes
//! `J(u) = ½(⟨Nu, u⟩ + 2⟨H(x), u⟩ + M(x))` with
//! `N = R + L*QL + SL + L*Sᵀ + L̂*GL̂`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{gemv_acc, gemv_t_acc, mat_from_slice, mat_to_row_major};
use crate::model::{euler_path, LqInstance};
use crate::tree::{
    check_same_shape, inner_product_running, inner_product_terminal, AdaptedProcess, NodeId,
    ProcessKind,
};

/// Largest `k · #running-nodes` for dense assembly of `N`.
pub const MAX_DENSE_SIZE: usize = 4096;

/// Documented tolerance on `Φ·Φ⁻¹ = I`; Euler drift in the two recursions
/// means it only holds on shallow trees or with `A = C = 0`.
pub const PHI_PRODUCT_TOL: f64 = 1e-8;

/// `Φ` and `Φ⁻¹` as path processes of row-major n×n matrices.
#[derive(Clone, Debug)]
pub struct FundamentalMatrices {
    pub n: usize,
    pub phi: AdaptedProcess,
    pub phi_inv: AdaptedProcess,
    /// True when some Euler factor `I + A dt ± C√dt` is singular or
    /// orientation-reversing, so `Φ` stops being invertible.
    pub degenerate: bool,
}

impl FundamentalMatrices {
    pub fn phi_at(&self, id: NodeId) -> DMatrix<f64> {
        mat_from_slice(self.n, self.phi.node(id))
    }

    pub fn phi_inv_at(&self, id: NodeId) -> DMatrix<f64> {
        mat_from_slice(self.n, self.phi_inv.node(id))
    }

    /// `max_node |Φ·Φ⁻¹ − I|_∞`.
    pub fn product_defect(&self) -> f64 {
        let eye = DMatrix::<f64>::identity(self.n, self.n);
        self.phi
            .node_ids()
            .map(|id| (self.phi_at(id) * self.phi_inv_at(id) - &eye).amax())
            .fold(0.0, f64::max)
    }

    pub fn satisfies_inverse_invariant(&self) -> bool {
        !self.degenerate && self.product_defect() <= PHI_PRODUCT_TOL
    }
}

/// Euler recursions for `dΦ = AΦ dt + CΦ dW` and
/// `dΦ⁻¹ = −Φ⁻¹(A − C²) dt − Φ⁻¹C dW`, each run on its own.
pub fn fundamental_matrices(inst: &LqInstance) -> FundamentalMatrices {
    let (tree, n) = (inst.tree, inst.n);
    let eye = DMatrix::<f64>::identity(n, n);
    let mut phi = AdaptedProcess::zeros(tree, n * n, ProcessKind::Path);
    let mut phi_inv = AdaptedProcess::zeros(tree, n * n, ProcessKind::Path);
    mat_to_row_major(&eye, phi.node_mut(NodeId::root()));
    mat_to_row_major(&eye, phi_inv.node_mut(NodeId::root()));
    let (dt, sdt) = (tree.dt(), tree.sqrt_dt());
    let mut degenerate = false;

    for level in 0..tree.depth() {
        let c = inst.step(level);
        let c_sq = &c.c * &c.c;
        for sign in [1.0, -1.0] {
            let factor = &eye + &c.a * dt + &c.c * (sign * sdt);
            if factor.determinant() <= 0.0 {
                degenerate = true;
            }
        }
        for id in tree.level_ids(level) {
            let p = mat_from_slice(n, phi.node(id));
            let pi = mat_from_slice(n, phi_inv.node(id));
            for (child, dw) in [(id.up(), sdt), (id.down(), -sdt)] {
                let next = &p + (&c.a * &p) * dt + (&c.c * &p) * dw;
                let next_inv = &pi - (&pi * (&c.a - &c_sq)) * dt - (&pi * &c.c) * dw;
                mat_to_row_major(&next, phi.node_mut(child));
                mat_to_row_major(&next_inv, phi_inv.node_mut(child));
            }
        }
    }
    FundamentalMatrices {
        n,
        phi,
        phi_inv,
        degenerate,
    }
}

/// `X = Γx + Lu + f`, each part a path process (levels `0..=N`); the hatted
/// terminal parts are the level-`N` values.
#[derive(Clone, Debug)]
pub struct StateDecomposition {
    pub gamma_x: AdaptedProcess,
    pub lu: AdaptedProcess,
    pub f: AdaptedProcess,
}

impl StateDecomposition {
    pub fn gamma_x_hat(&self) -> AdaptedProcess {
        self.gamma_x.terminal_part()
    }

    pub fn lu_hat(&self) -> AdaptedProcess {
        self.lu.terminal_part()
    }

    pub fn f_hat(&self) -> AdaptedProcess {
        self.f.terminal_part()
    }

    /// `Γx + Lu + f` on every node.
    pub fn total(&self) -> AdaptedProcess {
        let mut x = self.gamma_x.clone();
        x.axpy(1.0, &self.lu).expect("same shape");
        x.axpy(1.0, &self.f).expect("same shape");
        x
    }
}

/// Splits the state by superposition of three Euler solves.
pub fn decompose_state(
    inst: &LqInstance,
    u: &AdaptedProcess,
    x0: &[f64],
) -> Result<StateDecomposition> {
    let zeros = vec![0.0; inst.n];
    Ok(StateDecomposition {
        gamma_x: euler_path(inst, None, x0, false)?,
        lu: euler_path(inst, Some(u), &zeros, false)?,
        f: euler_path(inst, None, &zeros, true)?,
    })
}

/// `Lu` from the variation-of-constants formula
/// `Φ_n Σ_{m<n} Φ⁻¹_m [(B − CD) u_m dt + D u_m ΔW_m]`.
///
/// Only a convergence cross-check for [`decompose_state`]; it inherits the
/// O(dt) drift of the two fundamental-matrix recursions.
pub fn lu_via_fundamental(inst: &LqInstance, u: &AdaptedProcess) -> Result<AdaptedProcess> {
    let fm = fundamental_matrices(inst);
    let (tree, n) = (inst.tree, inst.n);
    if u.dim() != inst.k || u.kind() != ProcessKind::Running || *u.tree() != tree {
        return Err(Error::DimensionMismatch("control does not match instance".into()));
    }
    let (dt, sdt) = (tree.dt(), tree.sqrt_dt());
    let mut integral = AdaptedProcess::zeros(tree, n, ProcessKind::Path);
    for level in 0..tree.depth() {
        let c = inst.step(level);
        let b_minus_cd = &c.b - &c.c * &c.d;
        for id in tree.level_ids(level) {
            let pi = fm.phi_inv_at(id);
            let un = DVector::from_column_slice(u.node(id));
            let ds = &pi * (&b_minus_cd * &un) * dt;
            let dw_part = &pi * (&c.d * &un);
            let base = integral.node(id).to_vec();
            for (child, dw) in [(id.up(), sdt), (id.down(), -sdt)] {
                let out = integral.node_mut(child);
                for i in 0..n {
                    out[i] = base[i] + ds[i] + dw_part[i] * dw;
                }
            }
        }
    }
    let mut lu = AdaptedProcess::zeros(tree, n, ProcessKind::Path);
    for id in lu.node_ids().collect::<Vec<_>>() {
        let v = fm.phi_at(id) * DVector::from_column_slice(integral.node(id));
        lu.node_mut(id).copy_from_slice(v.as_slice());
    }
    Ok(lu)
}

/// Solution of the linear backward recursion.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    /// `p` on levels `0..=N`; level `N` holds the terminal data.
    pub p: AdaptedProcess,
    /// `p̄_n = E[p_{n+1} | F_n]` on running nodes.
    pub p_next_mean: AdaptedProcess,
    /// Martingale-representation coefficient on running nodes.
    pub q: AdaptedProcess,
}

fn check_state_process(
    inst: &LqInstance,
    p: &AdaptedProcess,
    kind: ProcessKind,
    what: &str,
) -> Result<()> {
    if *p.tree() != inst.tree || p.dim() != inst.n || p.kind() != kind {
        return Err(Error::DimensionMismatch(format!(
            "{what} must be a {kind:?} process of dim {} on the instance tree",
            inst.n
        )));
    }
    Ok(())
}

/// Backward recursion for
/// `dp = −(Aᵀp + Cᵀq + ξ) dt + q dW`, `p(T) = η`; absent data means zero.
pub fn solve_linear_bsde(
    inst: &LqInstance,
    xi: Option<&AdaptedProcess>,
    eta: Option<&AdaptedProcess>,
) -> Result<BsdeSolution> {
    if let Some(xi) = xi {
        check_state_process(inst, xi, ProcessKind::Running, "ξ")?;
    }
    if let Some(eta) = eta {
        check_state_process(inst, eta, ProcessKind::Terminal, "η")?;
    }
    let (tree, n) = (inst.tree, inst.n);
    let depth = tree.depth();
    let dt = tree.dt();
    let mut p = AdaptedProcess::zeros(tree, n, ProcessKind::Path);
    let mut p_next_mean = AdaptedProcess::zeros(tree, n, ProcessKind::Running);
    let mut q = AdaptedProcess::zeros(tree, n, ProcessKind::Running);
    if let Some(eta) = eta {
        p.level_mut(depth).copy_from_slice(eta.values());
    }
    for level in (0..depth).rev() {
        let c = inst.step(level);
        let (mean, qn) = tree.martingale_representation(p.level(level + 1), n, level + 1)?;
        let out = p.level_mut(level);
        for j in 0..tree.nodes_at(level) {
            let r = j * n..(j + 1) * n;
            let dst = &mut out[r.clone()];
            dst.copy_from_slice(&mean[r.clone()]);
            gemv_t_acc(dst, dt, &c.a, &mean[r.clone()]);
            gemv_t_acc(dst, dt, &c.c, &qn[r.clone()]);
            if let Some(xi) = xi {
                let x = &xi.level(level)[r.clone()];
                for (d, v) in dst.iter_mut().zip(x) {
                    *d += v * dt;
                }
            }
        }
        p_next_mean.level_mut(level).copy_from_slice(&mean);
        q.level_mut(level).copy_from_slice(&qn);
    }
    Ok(BsdeSolution { p, p_next_mean, q })
}

/// Largest node-wise violation of the backward recursion when `(p, q)` is
/// substituted back: both the martingale reconstruction on each branch and
/// the drift step.
pub fn bsde_residual(
    inst: &LqInstance,
    xi: Option<&AdaptedProcess>,
    sol: &BsdeSolution,
) -> f64 {
    let (tree, n) = (inst.tree, inst.n);
    let dt = tree.dt();
    let mut worst: f64 = 0.0;
    for id in tree.running_ids() {
        let c = inst.step(id.level);
        let (pbar, q) = (sol.p_next_mean.node(id), sol.q.node(id));
        for child in [id.up(), id.down()] {
            let dw = tree.increment_into(child);
            for i in 0..n {
                worst = worst.max((sol.p.node(child)[i] - pbar[i] - q[i] * dw).abs());
            }
        }
        let mut rhs = pbar.to_vec();
        gemv_t_acc(&mut rhs, dt, &c.a, pbar);
        gemv_t_acc(&mut rhs, dt, &c.c, q);
        if let Some(xi) = xi {
            for (r, v) in rhs.iter_mut().zip(xi.node(id)) {
                *r += v * dt;
            }
        }
        for (a, b) in sol.p.node(id).iter().zip(&rhs) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// `Bᵀ p̄ + Dᵀ q` on every running node: the control-space image of a BSDE
/// solution.
pub fn control_image(inst: &LqInstance, sol: &BsdeSolution) -> AdaptedProcess {
    let tree = inst.tree;
    let mut out = AdaptedProcess::zeros(tree, inst.k, ProcessKind::Running);
    for id in tree.running_ids() {
        let c = inst.step(id.level);
        let dst = out.node_mut(id);
        gemv_t_acc(dst, 1.0, &c.b, sol.p_next_mean.node(id));
        gemv_t_acc(dst, 1.0, &c.d, sol.q.node(id));
    }
    out
}

/// Images of the adjoint operators. Entries are `None` when the
/// corresponding input was absent.
#[derive(Clone, Debug)]
pub struct AdjointImages {
    pub lstar_xi: Option<AdaptedProcess>,
    pub gammastar_xi: Option<Vec<f64>>,
    pub lhatstar_eta: Option<AdaptedProcess>,
    pub gammahatstar_eta: Option<Vec<f64>>,
}

pub fn adjoint_apply(
    inst: &LqInstance,
    xi: Option<&AdaptedProcess>,
    eta: Option<&AdaptedProcess>,
) -> Result<AdjointImages> {
    if xi.is_none() && eta.is_none() {
        return Err(Error::InvalidArgument(
            "adjoint_apply needs at least one of ξ, η".into(),
        ));
    }
    let mut out = AdjointImages {
        lstar_xi: None,
        gammastar_xi: None,
        lhatstar_eta: None,
        gammahatstar_eta: None,
    };
    if let Some(xi) = xi {
        let sol = solve_linear_bsde(inst, Some(xi), None)?;
        out.lstar_xi = Some(control_image(inst, &sol));
        out.gammastar_xi = Some(sol.p.node(NodeId::root()).to_vec());
    }
    if let Some(eta) = eta {
        let sol = solve_linear_bsde(inst, None, Some(eta))?;
        out.lhatstar_eta = Some(control_image(inst, &sol));
        out.gammahatstar_eta = Some(sol.p.node(NodeId::root()).to_vec());
    }
    Ok(out)
}

fn check_control(inst: &LqInstance, u: &AdaptedProcess) -> Result<()> {
    if *u.tree() != inst.tree || u.dim() != inst.k || u.kind() != ProcessKind::Running {
        return Err(Error::DimensionMismatch(format!(
            "control must be a running process of dim {} on the instance tree",
            inst.k
        )));
    }
    Ok(())
}

/// `Nu = Ru + S·Lu + L*(Q·Lu + Sᵀu) + L̂*(G·L̂u)`: one forward sweep and one
/// merged backward sweep.
pub fn apply_n(inst: &LqInstance, u: &AdaptedProcess) -> Result<AdaptedProcess> {
    check_control(inst, u)?;
    let (tree, n) = (inst.tree, inst.n);
    let zeros = vec![0.0; n];
    let lu = euler_path(inst, Some(u), &zeros, false)?;

    let mut xi = AdaptedProcess::zeros(tree, n, ProcessKind::Running);
    for id in tree.running_ids() {
        let c = inst.step(id.level);
        let dst = xi.node_mut(id);
        gemv_acc(dst, 1.0, &c.q, lu.node(id));
        gemv_t_acc(dst, 1.0, &c.s, u.node(id));
    }
    let mut eta = AdaptedProcess::zeros(tree, n, ProcessKind::Terminal);
    for id in tree.level_ids(tree.depth()) {
        gemv_acc(eta.node_mut(id), 1.0, &inst.g, lu.node(id));
    }
    let sol = solve_linear_bsde(inst, Some(&xi), Some(&eta))?;
    let mut out = control_image(inst, &sol);
    for id in tree.running_ids() {
        let c = inst.step(id.level);
        let dst = out.node_mut(id);
        gemv_acc(dst, 1.0, &c.r, u.node(id));
        gemv_acc(dst, 1.0, &c.s, lu.node(id));
    }
    Ok(out)
}

/// `J(u) = ½(⟨Nu, u⟩ + 2⟨H(x), u⟩ + M(x))` with `H` and `M` precomputed for a
/// fixed initial state.
#[derive(Clone, Debug)]
pub struct QuadraticForm<'a> {
    inst: &'a LqInstance,
    h: AdaptedProcess,
    m: f64,
}

impl<'a> QuadraticForm<'a> {
    /// `H(x) = (L*Q + S)(Γx + f) + L̂*G(Γ̂x + f̂)`,
    /// `M(x) = ⟨Q(Γx + f), Γx + f⟩ + ⟨G(Γ̂x + f̂), Γ̂x + f̂⟩`.
    pub fn new(inst: &'a LqInstance, x0: &[f64]) -> Result<Self> {
        let (tree, n) = (inst.tree, inst.n);
        // Γx + f in one solve
        let free = euler_path(inst, None, x0, true)?;
        let free_run = free.running_part();
        let free_term = free.terminal_part();

        let mut q_free = AdaptedProcess::zeros(tree, n, ProcessKind::Running);
        for id in tree.running_ids() {
            gemv_acc(q_free.node_mut(id), 1.0, &inst.step(id.level).q, free.node(id));
        }
        let mut g_free = AdaptedProcess::zeros(tree, n, ProcessKind::Terminal);
        for id in tree.level_ids(tree.depth()) {
            gemv_acc(g_free.node_mut(id), 1.0, &inst.g, free.node(id));
        }
        let sol = solve_linear_bsde(inst, Some(&q_free), Some(&g_free))?;
        let mut h = control_image(inst, &sol);
        for id in tree.running_ids() {
            gemv_acc(h.node_mut(id), 1.0, &inst.step(id.level).s, free.node(id));
        }
        let m = inner_product_running(&q_free, &free_run)?
            + inner_product_terminal(&g_free, &free_term)?;
        Ok(Self { inst, h, m })
    }

    pub fn apply(&self, u: &AdaptedProcess) -> Result<AdaptedProcess> {
        apply_n(self.inst, u)
    }

    pub fn h(&self) -> &AdaptedProcess {
        &self.h
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn evaluate(&self, u: &AdaptedProcess) -> Result<f64> {
        let nu = self.apply(u)?;
        check_same_shape(&nu, u)?;
        Ok(0.5
            * (inner_product_running(&nu, u)?
                + 2.0 * inner_product_running(&self.h, u)?
                + self.m))
    }
}

pub fn quadratic_functional(inst: &LqInstance, u: &AdaptedProcess, x0: &[f64]) -> Result<f64> {
    QuadraticForm::new(inst, x0)?.evaluate(u)
}

/// `N` as a symmetric matrix in the probability-weighted basis.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    pub matrix: DMatrix<f64>,
    /// `max |M_ij − M_ji|` before symmetrization.
    pub symmetry_defect: f64,
    /// `√(prob · dt)` for every coordinate, in process storage order.
    pub weights: Vec<f64>,
}

impl DenseOperator {
    /// Coordinates of `u` in the weighted basis.
    pub fn to_coords(&self, u: &AdaptedProcess) -> DVector<f64> {
        DVector::from_iterator(
            self.weights.len(),
            u.values().iter().zip(&self.weights).map(|(v, w)| v * w),
        )
    }

    pub fn from_coords(&self, coords: &DVector<f64>, template: &AdaptedProcess) -> AdaptedProcess {
        let mut out = template.clone();
        for ((o, c), w) in out.values_mut().iter_mut().zip(coords.iter()).zip(&self.weights) {
            *o = c / w;
        }
        out
    }
}

fn coordinate_weights(inst: &LqInstance) -> Vec<f64> {
    let tree = inst.tree;
    let mut w = Vec::with_capacity(tree.running_nodes() * inst.k);
    for id in tree.running_ids() {
        let wi = (tree.path_prob(id.level) * tree.dt()).sqrt();
        w.extend(std::iter::repeat(wi).take(inst.k));
    }
    w
}

/// Column `j` is `N` applied to the `j`-th weighted basis control, so that
/// plain matrix symmetry and eigenvalues match self-adjointness and spectrum
/// under the running inner product.
pub fn assemble_n_dense(inst: &LqInstance) -> Result<DenseOperator> {
    let size = inst.tree.running_nodes() * inst.k;
    if size > MAX_DENSE_SIZE {
        return Err(Error::TooLarge {
            what: "dense N",
            required: size as u128,
            cap: MAX_DENSE_SIZE as u128,
        });
    }
    let weights = coordinate_weights(inst);
    let mut matrix = DMatrix::zeros(size, size);
    let mut basis = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
    for j in 0..size {
        basis.values_mut()[j] = 1.0 / weights[j];
        let col = apply_n(inst, &basis)?;
        basis.values_mut()[j] = 0.0;
        for i in 0..size {
            matrix[(i, j)] = col.values()[i] * weights[i];
        }
    }
    let symmetry_defect = crate::linalg::skew_defect(&matrix);
    crate::linalg::symmetrize(&mut matrix);
    Ok(DenseOperator {
        matrix,
        symmetry_defect,
        weights,
    })
}
