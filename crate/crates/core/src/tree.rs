//! Binary scenario trees and processes adapted to them.
//!
//! A tree of depth `N` on `[0, T]` has `2^n` nodes at level `n`. Node `(n, j)`
//! branches to `(n+1, 2j)` ("up", `ΔW = +√dt`) and `(n+1, 2j+1)` ("down",
//! `ΔW = −√dt`), each with probability ½. Nodes are stored breadth-first, so the
//! global index of `(n, j)` is `2^n − 1 + j`. Levels `0..N` carry running
//! values (decisions, integrands), level `N` carries terminal random variables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on tree depth; depth 14 already means 16383 running nodes.
pub const DEFAULT_MAX_DEPTH: usize = 14;

/// Environment variable overriding [`DEFAULT_MAX_DEPTH`].
pub const MAX_DEPTH_ENV: &str = "LQSHIFT_MAX_DEPTH";

/// Depth cap in effect: [`MAX_DEPTH_ENV`] if set and parseable, else the default.
pub fn max_depth() -> usize {
    std::env::var(MAX_DEPTH_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(DEFAULT_MAX_DEPTH)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub level: usize,
    pub index: usize,
}

impl NodeId {
    pub fn new(level: usize, index: usize) -> Self {
        Self { level, index }
    }

    pub fn root() -> Self {
        Self::new(0, 0)
    }

    pub fn up(self) -> Self {
        Self::new(self.level + 1, 2 * self.index)
    }

    pub fn down(self) -> Self {
        Self::new(self.level + 1, 2 * self.index + 1)
    }

    /// Breadth-first position in the whole tree.
    pub fn global(self) -> usize {
        (1usize << self.level) - 1 + self.index
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.level, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    depth: usize,
    horizon: f64,
    dt: f64,
    sqrt_dt: f64,
}

impl ScenarioTree {
    /// Builds a tree, honouring the depth cap from [`max_depth`].
    pub fn new(depth: usize, horizon: f64) -> Result<Self> {
        Self::with_max_depth(depth, horizon, max_depth())
    }

    pub fn with_max_depth(depth: usize, horizon: f64, max_depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidTree("depth must be at least 1".into()));
        }
        if depth > max_depth {
            return Err(Error::InvalidTree(format!(
                "depth {depth} exceeds the configured maximum {max_depth}"
            )));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidTree(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        let dt = horizon / depth as f64;
        Ok(Self {
            depth,
            horizon,
            dt,
            sqrt_dt: dt.sqrt(),
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    /// Grid time `t_n = n·dt`.
    pub fn time(&self, level: usize) -> f64 {
        if level == self.depth {
            self.horizon
        } else {
            level as f64 * self.dt
        }
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        1usize << level
    }

    /// Nodes on levels `0..N`.
    pub fn running_nodes(&self) -> usize {
        (1usize << self.depth) - 1
    }

    pub fn leaves(&self) -> usize {
        1usize << self.depth
    }

    /// Nodes on levels `0..=N`.
    pub fn total_nodes(&self) -> usize {
        (1usize << (self.depth + 1)) - 1
    }

    /// Probability of reaching any particular node on `level`, an exact dyadic.
    pub fn path_prob(&self, level: usize) -> f64 {
        (-(level as f64)).exp2()
    }

    /// Probability of each branch out of a node.
    pub fn branch_prob(&self) -> f64 {
        0.5
    }

    /// `ΔW` on the edge into `child` (`+√dt` for even indices, `−√dt` for odd).
    pub fn increment_into(&self, child: NodeId) -> f64 {
        if child.index % 2 == 0 {
            self.sqrt_dt
        } else {
            -self.sqrt_dt
        }
    }

    /// Running nodes in breadth-first order.
    pub fn running_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.depth).flat_map(|n| (0..(1usize << n)).map(move |j| NodeId::new(n, j)))
    }

    pub fn level_ids(&self, level: usize) -> impl Iterator<Item = NodeId> {
        (0..(1usize << level)).map(move |j| NodeId::new(level, j))
    }

    /// `E[· | F_n]` of values given on `child_level = n + 1`, one `dim`-vector per node.
    pub fn conditional_expectation(
        &self,
        child_values: &[f64],
        dim: usize,
        child_level: usize,
    ) -> Result<Vec<f64>> {
        self.check_level_values(child_values, dim, child_level)?;
        let parents = self.nodes_at(child_level - 1);
        let mut out = vec![0.0; parents * dim];
        for j in 0..parents {
            let up = &child_values[2 * j * dim..(2 * j + 1) * dim];
            let down = &child_values[(2 * j + 1) * dim..(2 * j + 2) * dim];
            for (o, (a, b)) in out[j * dim..(j + 1) * dim].iter_mut().zip(up.iter().zip(down)) {
                *o = 0.5 * (a + b);
            }
        }
        Ok(out)
    }

    /// Splits values on level `n + 1` into `(p̄, q)` on level `n` with
    /// `child = p̄ + q·ΔW` exactly on both branches.
    pub fn martingale_representation(
        &self,
        child_values: &[f64],
        dim: usize,
        child_level: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_level_values(child_values, dim, child_level)?;
        let parents = self.nodes_at(child_level - 1);
        let scale = 0.5 / self.sqrt_dt;
        let mut mean = vec![0.0; parents * dim];
        let mut q = vec![0.0; parents * dim];
        for j in 0..parents {
            for i in 0..dim {
                let up = child_values[2 * j * dim + i];
                let down = child_values[(2 * j + 1) * dim + i];
                mean[j * dim + i] = 0.5 * (up + down);
                q[j * dim + i] = (up - down) * scale;
            }
        }
        Ok((mean, q))
    }

    fn check_level_values(&self, values: &[f64], dim: usize, child_level: usize) -> Result<()> {
        if child_level == 0 || child_level > self.depth {
            return Err(Error::LevelMismatch {
                expected: self.depth,
                got: child_level,
            });
        }
        let want = self.nodes_at(child_level) * dim;
        if dim == 0 || values.len() != want {
            return Err(Error::DimensionMismatch(format!(
                "level {child_level} with dim {dim} needs {want} values, got {}",
                values.len()
            )));
        }
        Ok(())
    }
}

/// Which levels a process lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcessKind {
    /// Levels `0..N`.
    Running,
    /// Level `N` only.
    Terminal,
    /// Levels `0..=N` (state trajectories, adjoint paths).
    Path,
}

/// One `dim`-vector per node of the levels selected by `kind`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedProcess {
    tree: ScenarioTree,
    dim: usize,
    kind: ProcessKind,
    values: Vec<f64>,
}

impl AdaptedProcess {
    pub fn zeros(tree: ScenarioTree, dim: usize, kind: ProcessKind) -> Self {
        let len = Self::node_count(&tree, kind) * dim;
        Self {
            tree,
            dim,
            kind,
            values: vec![0.0; len],
        }
    }

    pub fn from_values(
        tree: ScenarioTree,
        dim: usize,
        kind: ProcessKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        let want = Self::node_count(&tree, kind) * dim;
        if dim == 0 || values.len() != want {
            return Err(Error::DimensionMismatch(format!(
                "{kind:?} process of dim {dim} needs {want} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            tree,
            dim,
            kind,
            values,
        })
    }

    pub fn constant(tree: ScenarioTree, kind: ProcessKind, value: &[f64]) -> Self {
        let mut p = Self::zeros(tree, value.len(), kind);
        for chunk in p.values.chunks_mut(value.len()) {
            chunk.copy_from_slice(value);
        }
        p
    }

    pub fn from_fn(
        tree: ScenarioTree,
        dim: usize,
        kind: ProcessKind,
        mut f: impl FnMut(NodeId, &mut [f64]),
    ) -> Self {
        let mut p = Self::zeros(tree, dim, kind);
        let ids: Vec<NodeId> = p.node_ids().collect();
        for (id, chunk) in ids.into_iter().zip(p.values.chunks_mut(dim)) {
            f(id, chunk);
        }
        p
    }

    fn node_count(tree: &ScenarioTree, kind: ProcessKind) -> usize {
        match kind {
            ProcessKind::Running => tree.running_nodes(),
            ProcessKind::Terminal => tree.leaves(),
            ProcessKind::Path => tree.total_nodes(),
        }
    }

    fn first_level(&self) -> usize {
        match self.kind {
            ProcessKind::Terminal => self.tree.depth,
            _ => 0,
        }
    }

    fn last_level(&self) -> usize {
        match self.kind {
            ProcessKind::Running => self.tree.depth - 1,
            _ => self.tree.depth,
        }
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ProcessKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn has_level(&self, level: usize) -> bool {
        level >= self.first_level() && level <= self.last_level()
    }

    fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        assert!(
            self.has_level(level),
            "level {level} not stored in a {:?} process",
            self.kind
        );
        let start = match self.kind {
            ProcessKind::Terminal => 0,
            _ => (1usize << level) - 1,
        };
        let len = 1usize << level;
        start * self.dim..(start + len) * self.dim
    }

    /// All node values on `level`, concatenated.
    pub fn level(&self, level: usize) -> &[f64] {
        let r = self.level_range(level);
        &self.values[r]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        let r = self.level_range(level);
        &mut self.values[r]
    }

    pub fn node(&self, id: NodeId) -> &[f64] {
        let r = self.level_range(id.level);
        let start = r.start + id.index * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut [f64] {
        let r = self.level_range(id.level);
        let start = r.start + id.index * self.dim;
        &mut self.values[start..start + self.dim]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        let (lo, hi) = (self.first_level(), self.last_level());
        (lo..=hi).flat_map(|n| (0..(1usize << n)).map(move |j| NodeId::new(n, j)))
    }

    /// Levels `0..N` of a path process.
    pub fn running_part(&self) -> AdaptedProcess {
        assert_eq!(self.kind, ProcessKind::Path, "running_part needs a path process");
        let len = self.tree.running_nodes() * self.dim;
        AdaptedProcess {
            tree: self.tree,
            dim: self.dim,
            kind: ProcessKind::Running,
            values: self.values[..len].to_vec(),
        }
    }

    /// Level `N` of a path process.
    pub fn terminal_part(&self) -> AdaptedProcess {
        assert_eq!(self.kind, ProcessKind::Path, "terminal_part needs a path process");
        let len = self.tree.running_nodes() * self.dim;
        AdaptedProcess {
            tree: self.tree,
            dim: self.dim,
            kind: ProcessKind::Terminal,
            values: self.values[len..].to_vec(),
        }
    }

    /// Joins running and terminal parts into a path process.
    pub fn join(running: &AdaptedProcess, terminal: &AdaptedProcess) -> Result<AdaptedProcess> {
        if running.kind != ProcessKind::Running || terminal.kind != ProcessKind::Terminal {
            return Err(Error::KindMismatch("join needs running + terminal".into()));
        }
        check_compatible(running, terminal)?;
        let mut values = running.values.clone();
        values.extend_from_slice(&terminal.values);
        Ok(AdaptedProcess {
            tree: running.tree,
            dim: running.dim,
            kind: ProcessKind::Path,
            values,
        })
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `self += a·other`.
    pub fn axpy(&mut self, a: f64, other: &AdaptedProcess) -> Result<()> {
        check_same_shape(self, other)?;
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &AdaptedProcess) -> Result<f64> {
        check_same_shape(self, other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

fn check_compatible(a: &AdaptedProcess, b: &AdaptedProcess) -> Result<()> {
    if a.tree != b.tree {
        return Err(Error::DimensionMismatch("processes live on different trees".into()));
    }
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch(format!(
            "process dims differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    Ok(())
}

pub(crate) fn check_same_shape(a: &AdaptedProcess, b: &AdaptedProcess) -> Result<()> {
    check_compatible(a, b)?;
    if a.kind != b.kind {
        return Err(Error::KindMismatch(format!("{:?} vs {:?}", a.kind, b.kind)));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E[Σ_n ⟨u_n, v_n⟩ dt]` over levels `0..N` (left-endpoint rule).
pub fn inner_product_running(u: &AdaptedProcess, v: &AdaptedProcess) -> Result<f64> {
    check_same_shape(u, v)?;
    if u.kind != ProcessKind::Running {
        return Err(Error::KindMismatch("running inner product needs running processes".into()));
    }
    let tree = u.tree;
    let mut total = 0.0;
    for n in 0..tree.depth {
        total += tree.path_prob(n) * dot(u.level(n), v.level(n));
    }
    Ok(total * tree.dt)
}

/// `E[⟨ξ, η⟩]` for terminal random variables.
pub fn inner_product_terminal(xi: &AdaptedProcess, eta: &AdaptedProcess) -> Result<f64> {
    check_same_shape(xi, eta)?;
    if xi.kind != ProcessKind::Terminal {
        return Err(Error::KindMismatch(
            "terminal inner product needs terminal processes".into(),
        ));
    }
    Ok(xi.tree.path_prob(xi.tree.depth) * dot(&xi.values, &eta.values))
}
