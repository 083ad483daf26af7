//! Problem data, the forward state recursion and direct cost evaluation.
//!
//! On the tree the controlled state follows explicit Euler with coefficients
//! frozen on each interval `[t_n, t_{n+1})`:
//!
//! ```text
//! X_{n+1} = X_n + (A X_n + B u_n + b) dt + (C X_n + D u_n + σ) ΔW_n
//! J(u)    = E[ ½ Σ_n (⟨Q X_n, X_n⟩ + 2⟨S X_n, u_n⟩ + ⟨R u_n, u_n⟩) dt + ½⟨G X_N, X_N⟩ ]
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{ControlDomain, MEMBERSHIP_TOL};
use crate::error::{Error, Result};
use crate::linalg::{bilinear, gemv_acc, skew_defect, symmetrize};
use crate::tree::{AdaptedProcess, ProcessKind, ScenarioTree};

/// Largest tolerated `|M_ij − M_ji|` for Q, R, G before they are symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Coefficients on one interval `[t_n, t_{n+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCoefficients {
    /// n×n
    pub a: DMatrix<f64>,
    /// n×k
    pub b: DMatrix<f64>,
    /// n×n
    pub c: DMatrix<f64>,
    /// n×k
    pub d: DMatrix<f64>,
    /// State-independent drift `b(t)`.
    pub drift: DVector<f64>,
    /// State-independent diffusion `σ(t)`.
    pub diffusion: DVector<f64>,
    /// n×n symmetric
    pub q: DMatrix<f64>,
    /// k×n
    pub s: DMatrix<f64>,
    /// k×k symmetric
    pub r: DMatrix<f64>,
}

impl StepCoefficients {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, k),
            c: DMatrix::zeros(n, n),
            d: DMatrix::zeros(n, k),
            drift: DVector::zeros(n),
            diffusion: DVector::zeros(n),
            q: DMatrix::zeros(n, n),
            s: DMatrix::zeros(k, n),
            r: DMatrix::zeros(k, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqInstance {
    pub tree: ScenarioTree,
    pub n: usize,
    pub k: usize,
    /// One entry per interval, `tree.depth()` of them.
    pub steps: Vec<StepCoefficients>,
    pub g: DMatrix<f64>,
    pub x0: DVector<f64>,
}

impl LqInstance {
    /// All coefficients zero, `x0 = 0`.
    pub fn zeros(tree: ScenarioTree, n: usize, k: usize) -> Self {
        Self {
            tree,
            n,
            k,
            steps: vec![StepCoefficients::zeros(n, k); tree.depth()],
            g: DMatrix::zeros(n, n),
            x0: DVector::zeros(n),
        }
    }

    /// Same instance with every interval set from `f(level)`.
    pub fn with_steps(mut self, f: impl Fn(usize) -> StepCoefficients) -> Self {
        self.steps = (0..self.tree.depth()).map(f).collect();
        self
    }

    pub fn step(&self, level: usize) -> &StepCoefficients {
        &self.steps[level]
    }

    /// Copy with `b = σ = 0` and `x0 = 0`: the purely control-driven part.
    pub fn control_part(&self) -> Self {
        let mut out = self.clone();
        for s in out.steps.iter_mut() {
            s.drift.fill(0.0);
            s.diffusion.fill(0.0);
        }
        out.x0.fill(0.0);
        out
    }

    /// Replaces Q, R, G by their symmetric parts.
    pub fn symmetrize(&mut self) {
        for s in self.steps.iter_mut() {
            symmetrize(&mut s.q);
            symmetrize(&mut s.r);
        }
        symmetrize(&mut self.g);
    }

    fn check_control(&self, u: &AdaptedProcess) -> Result<()> {
        if *u.tree() != self.tree {
            return Err(Error::DimensionMismatch("control lives on a different tree".into()));
        }
        if u.dim() != self.k || u.kind() != ProcessKind::Running {
            return Err(Error::DimensionMismatch(format!(
                "control must be a running process of dim {}, got {:?} of dim {}",
                self.k,
                u.kind(),
                u.dim()
            )));
        }
        Ok(())
    }
}

/// One entry of a [`ValidationReport`]; `path` is a JSON pointer into the
/// instance file layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// `U` as found, when the domain could be enumerated.
    pub binary_set: Vec<Vec<f64>>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }
}

/// Checks dimensions, symmetry, finiteness and `U ≠ ∅`. Never panics on
/// malformed data; every problem found is listed.
pub fn validate_instance(inst: &LqInstance, domain: &ControlDomain) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (n, k) = (inst.n, inst.k);
    if n == 0 {
        report.push("/n", "state dimension must be ≥ 1");
    }
    if k == 0 {
        report.push("/k", "control dimension must be ≥ 1");
    }
    if inst.steps.len() != inst.tree.depth() {
        report.push(
            "/coefficients",
            format!(
                "{} intervals of coefficients for a tree of depth {}",
                inst.steps.len(),
                inst.tree.depth()
            ),
        );
    }

    let mut check_mat = |path: String, m: &DMatrix<f64>, rows: usize, cols: usize, sym: bool| {
        if m.shape() != (rows, cols) {
            report.push(
                path,
                format!("expected {rows}×{cols}, got {}×{}", m.nrows(), m.ncols()),
            );
            return;
        }
        if m.iter().any(|v| !v.is_finite()) {
            report.push(path, "non-finite entry");
            return;
        }
        if sym {
            let defect = skew_defect(m);
            if defect > SYMMETRY_TOL {
                report.push(path, format!("not symmetric (max |M_ij − M_ji| = {defect:e})"));
            }
        }
    };
    for (i, s) in inst.steps.iter().enumerate() {
        check_mat(format!("/coefficients/A/{i}"), &s.a, n, n, false);
        check_mat(format!("/coefficients/B/{i}"), &s.b, n, k, false);
        check_mat(format!("/coefficients/C/{i}"), &s.c, n, n, false);
        check_mat(format!("/coefficients/D/{i}"), &s.d, n, k, false);
        check_mat(format!("/coefficients/Q/{i}"), &s.q, n, n, true);
        check_mat(format!("/coefficients/S/{i}"), &s.s, k, n, false);
        check_mat(format!("/coefficients/R/{i}"), &s.r, k, k, true);
        let as_col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        check_mat(format!("/coefficients/b/{i}"), &as_col(&s.drift), n, 1, false);
        check_mat(format!("/coefficients/sigma/{i}"), &as_col(&s.diffusion), n, 1, false);
    }
    check_mat("/coefficients/G".into(), &inst.g, n, n, true);
    check_mat(
        "/x0".into(),
        &DMatrix::from_column_slice(inst.x0.len(), 1, inst.x0.as_slice()),
        n,
        1,
        false,
    );

    if domain.k() != k {
        report.push(
            "/domain",
            format!("domain has dimension {}, instance has k = {k}", domain.k()),
        );
    } else {
        for (i, hs) in domain.halfspaces().iter().enumerate() {
            if hs.g.iter().any(|v| !v.is_finite()) || !hs.h.is_finite() {
                report.push(format!("/domain/halfspaces/{i}"), "non-finite entry");
            }
        }
        match domain.binary_vertices() {
            Ok(u) if u.is_empty() => report.push("/domain", "U = C ∩ {0,1}^k is empty"),
            Ok(u) => report.binary_set = u,
            Err(e) => report.push("/domain", e.to_string()),
        }
    }
    report
}

/// Binary or relaxed admissible control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlTag {
    Binary,
    Relaxed,
}

/// A running control process whose node values were checked against `U`
/// (binary) or `Ū` (relaxed).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlProcess {
    process: AdaptedProcess,
    tag: ControlTag,
}

impl ControlProcess {
    pub fn new(process: AdaptedProcess, tag: ControlTag, domain: &ControlDomain) -> Result<Self> {
        if process.kind() != ProcessKind::Running || process.dim() != domain.k() {
            return Err(Error::DimensionMismatch(format!(
                "control must be a running process of dim {}",
                domain.k()
            )));
        }
        for id in process.node_ids() {
            let v = process.node(id);
            let ok = match tag {
                ControlTag::Binary => domain.in_binary(v, MEMBERSHIP_TOL),
                ControlTag::Relaxed => domain.in_relaxed(v, MEMBERSHIP_TOL),
            };
            if !ok {
                return Err(Error::InadmissibleControl(format!(
                    "value {v:?} at node {id} is not in {}",
                    match tag {
                        ControlTag::Binary => "U",
                        ControlTag::Relaxed => "Ū",
                    }
                )));
            }
        }
        Ok(Self { process, tag })
    }

    pub fn binary(process: AdaptedProcess, domain: &ControlDomain) -> Result<Self> {
        Self::new(process, ControlTag::Binary, domain)
    }

    pub fn relaxed(process: AdaptedProcess, domain: &ControlDomain) -> Result<Self> {
        Self::new(process, ControlTag::Relaxed, domain)
    }

    /// The same value at every node.
    pub fn constant(
        tree: ScenarioTree,
        value: &[f64],
        tag: ControlTag,
        domain: &ControlDomain,
    ) -> Result<Self> {
        Self::new(
            AdaptedProcess::constant(tree, ProcessKind::Running, value),
            tag,
            domain,
        )
    }

    pub fn process(&self) -> &AdaptedProcess {
        &self.process
    }

    pub fn into_process(self) -> AdaptedProcess {
        self.process
    }

    pub fn tag(&self) -> ControlTag {
        self.tag
    }
}

/// Euler recursion for the state. `control = None` means `u ≡ 0`; with
/// `affine = false` the drift/diffusion offsets are dropped.
pub(crate) fn euler_path(
    inst: &LqInstance,
    control: Option<&AdaptedProcess>,
    x0: &[f64],
    affine: bool,
) -> Result<AdaptedProcess> {
    if let Some(u) = control {
        inst.check_control(u)?;
    }
    let n = inst.n;
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial state has length {}, expected {n}",
            x0.len()
        )));
    }
    let tree = inst.tree;
    let (dt, sdt) = (tree.dt(), tree.sqrt_dt());
    let mut x = AdaptedProcess::zeros(tree, n, ProcessKind::Path);
    x.node_mut(crate::tree::NodeId::root()).copy_from_slice(x0);

    let mut drift = vec![0.0; n];
    let mut vol = vec![0.0; n];
    for level in 0..tree.depth() {
        let c = inst.step(level);
        for id in tree.level_ids(level) {
            let xn = x.node(id).to_vec();
            drift.fill(0.0);
            vol.fill(0.0);
            gemv_acc(&mut drift, 1.0, &c.a, &xn);
            gemv_acc(&mut vol, 1.0, &c.c, &xn);
            if let Some(u) = control {
                let un = u.node(id);
                gemv_acc(&mut drift, 1.0, &c.b, un);
                gemv_acc(&mut vol, 1.0, &c.d, un);
            }
            if affine {
                for i in 0..n {
                    drift[i] += c.drift[i];
                    vol[i] += c.diffusion[i];
                }
            }
            for (child, dw) in [(id.up(), sdt), (id.down(), -sdt)] {
                let out = x.node_mut(child);
                for i in 0..n {
                    out[i] = xn[i] + drift[i] * dt + vol[i] * dw;
                }
            }
        }
    }
    Ok(x)
}

/// State trajectory on levels `0..=N` under control `u`.
pub fn forward_state(inst: &LqInstance, u: &ControlProcess) -> Result<AdaptedProcess> {
    euler_path(inst, Some(u.process()), inst.x0.as_slice(), true)
}

/// Cost of an arbitrary running control process (no admissibility check).
pub fn cost_of_process(inst: &LqInstance, u: &AdaptedProcess) -> Result<f64> {
    let x = euler_path(inst, Some(u), inst.x0.as_slice(), true)?;
    Ok(cost_of_path(inst, &x, u))
}

/// Direct evaluation of `J(u)` with exact expectations over the tree.
pub fn cost_direct(inst: &LqInstance, u: &ControlProcess) -> Result<f64> {
    cost_of_process(inst, u.process())
}

pub(crate) fn cost_of_path(inst: &LqInstance, x: &AdaptedProcess, u: &AdaptedProcess) -> f64 {
    let tree = inst.tree;
    let mut running = 0.0;
    for level in 0..tree.depth() {
        let c = inst.step(level);
        let mut level_sum = 0.0;
        for id in tree.level_ids(level) {
            let (xn, un) = (x.node(id), u.node(id));
            level_sum += bilinear(&c.q, xn, xn) + 2.0 * bilinear(&c.s, xn, un) + bilinear(&c.r, un, un);
        }
        running += tree.path_prob(level) * level_sum;
    }
    let depth = tree.depth();
    let terminal: f64 = tree
        .level_ids(depth)
        .map(|id| bilinear(&inst.g, x.node(id), x.node(id)))
        .sum::<f64>()
        * tree.path_prob(depth);
    0.5 * running * tree.dt() + 0.5 * terminal
}

/// `U` in lexicographic order.
pub fn enumerate_binary_vertices(domain: &ControlDomain) -> Result<Vec<Vec<f64>>> {
    domain.binary_vertices()
}
