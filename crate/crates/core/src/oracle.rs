//! Exhaustive enumeration of binary controls, uniform sampling of the relaxed
//! box, and the certificate that the binary and shifted relaxed problems
//! share their minimum.
//!
//! Controls are numbered as mixed-radix integers: running nodes in
//! breadth-first order (node 0 most significant), each digit indexing the
//! lexicographically sorted vertices of `U`. The first control attaining the
//! minimum in that order is reported as the optimum.

use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::ControlDomain;
use crate::error::{Error, Result};
use crate::model::{cost_of_process, ControlProcess, LqInstance};
use crate::operators::MAX_DENSE_SIZE;
use crate::principle::{check_stationarity, solve_first_adjoint, MpReport};
use crate::spectral::{lambda_max, shifted_cost, SpectralMode, DEFAULT_MAX_ITER};
use crate::tree::{AdaptedProcess, ProcessKind};

pub const DEFAULT_BUDGET: u128 = 1_000_000;
pub const MAX_TIES: usize = 16;

/// Costs within this relative distance of the minimum count as ties.
pub const TIE_TOL: f64 = 1e-12;

pub const IDENTITY_TOL: f64 = 1e-11;
pub const SAMPLING_TOL: f64 = 1e-9;

/// Sampling is refused once fewer than this fraction of box draws land in `C`.
pub const MIN_ACCEPTANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub best_control: ControlProcess,
    pub best_cost: f64,
    pub enumerated: u128,
    /// Co-optimal controls in enumeration order, at most [`MAX_TIES`].
    pub ties: Vec<ControlProcess>,
    /// Number of co-optimal controls, including those beyond the cap.
    pub tie_count: u128,
}

/// `|U|^(#running nodes)`, saturating.
pub fn enumeration_size(inst: &LqInstance, domain: &ControlDomain) -> Result<u128> {
    let radix = domain.binary_vertices()?.len() as u128;
    let nodes = inst.tree.running_nodes() as u32;
    Ok(radix.checked_pow(nodes).unwrap_or(u128::MAX))
}

fn decode(index: u128, vertices: &[Vec<f64>], template: &mut AdaptedProcess) {
    let radix = vertices.len() as u128;
    let k = template.dim();
    let nodes = template.values().len() / k.max(1);
    let mut rest = index;
    for node in (0..nodes).rev() {
        let digit = (rest % radix) as usize;
        rest /= radix;
        template.values_mut()[node * k..(node + 1) * k].copy_from_slice(&vertices[digit]);
    }
}

fn worker_count(total: usize) -> usize {
    let hw = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    hw.min(total.div_ceil(4096)).max(1)
}

/// Exact minimum of `J` over all adapted maps from running nodes into `U`.
pub fn brute_force_binary(
    inst: &LqInstance,
    domain: &ControlDomain,
    budget: u128,
) -> Result<OracleResult> {
    if domain.k() != inst.k {
        return Err(Error::DimensionMismatch(format!(
            "domain has k = {}, instance has k = {}",
            domain.k(),
            inst.k
        )));
    }
    let vertices = domain.binary_vertices()?;
    if vertices.is_empty() {
        return Err(Error::EmptyBinarySet);
    }
    let required = enumeration_size(inst, domain)?;
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    let total = required as usize;
    let mut costs = vec![0.0; total];
    let workers = worker_count(total);
    let chunk = total.div_ceil(workers);
    let template = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
    thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = costs
            .chunks_mut(chunk)
            .enumerate()
            .map(|(c, out)| {
                let (vertices, mut u) = (&vertices, template.clone());
                s.spawn(move || -> Result<()> {
                    for (i, slot) in out.iter_mut().enumerate() {
                        decode((c * chunk + i) as u128, vertices, &mut u);
                        *slot = cost_of_process(inst, &u)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("enumeration worker panicked")?;
        }
        Ok(())
    })?;

    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let cutoff = min + TIE_TOL * min.abs().max(1.0);
    let mut ties = Vec::new();
    let mut tie_count = 0u128;
    for (i, &c) in costs.iter().enumerate() {
        if c <= cutoff {
            tie_count += 1;
            if ties.len() < MAX_TIES {
                let mut u = template.clone();
                decode(i as u128, &vertices, &mut u);
                ties.push(ControlProcess::binary(u, domain)?);
            }
        }
    }
    Ok(OracleResult {
        best_control: ties[0].clone(),
        best_cost: min,
        enumerated: required,
        ties,
        tie_count,
    })
}

#[derive(Clone, Debug)]
pub struct SampleResult {
    pub min_cost: f64,
    pub witness: ControlProcess,
    pub samples: usize,
    /// Box draws, including rejected ones.
    pub draws: u64,
}

fn draw_node(
    rng: &mut ChaCha8Rng,
    domain: &ControlDomain,
    out: &mut [f64],
    draws: &mut u64,
    accepted: &mut u64,
) -> Result<()> {
    loop {
        out.iter_mut().for_each(|x| *x = rng.random::<f64>());
        *draws += 1;
        if domain.in_polytope(out, 0.0) {
            *accepted += 1;
            return Ok(());
        }
        if *draws >= 1000 && (*accepted as f64) < MIN_ACCEPTANCE * *draws as f64 {
            return Err(Error::DegenerateDomain {
                rate: *accepted as f64 / *draws as f64,
            });
        }
    }
}

/// Minimum of `J^μ` over `samples` controls drawn node-wise uniformly from
/// `Ū` (box draws rejected against the half-spaces of `C`).
pub fn sample_relaxed_box(
    inst: &LqInstance,
    domain: &ControlDomain,
    mu: f64,
    samples: usize,
    seed: u64,
) -> Result<SampleResult> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be ≥ 1".into()));
    }
    if domain.k() != inst.k {
        return Err(Error::DimensionMismatch(format!(
            "domain has k = {}, instance has k = {}",
            domain.k(),
            inst.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
    let (mut draws, mut accepted) = (0u64, 0u64);
    let mut best: Option<(f64, AdaptedProcess)> = None;
    let k = inst.k;
    for _ in 0..samples {
        for node in u.values_mut().chunks_mut(k) {
            draw_node(&mut rng, domain, node, &mut draws, &mut accepted)?;
        }
        let c = shifted_cost(inst, &u, mu)?;
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, u.clone()));
        }
    }
    let (min_cost, witness) = best.expect("samples ≥ 1");
    Ok(SampleResult {
        min_cost,
        witness: ControlProcess::relaxed(witness, domain)?,
        samples,
        draws,
    })
}

/// A control with every node drawn uniformly from `U`.
pub fn random_binary_control(
    inst: &LqInstance,
    domain: &ControlDomain,
    seed: u64,
) -> Result<ControlProcess> {
    let vertices = domain.binary_vertices()?;
    if vertices.is_empty() {
        return Err(Error::EmptyBinarySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
    for node in u.values_mut().chunks_mut(inst.k) {
        node.copy_from_slice(&vertices[rng.random_range(0..vertices.len())]);
    }
    ControlProcess::binary(u, domain)
}

#[derive(Clone, Debug)]
pub struct EquivalenceOptions {
    pub budget: u128,
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            samples: 10_000,
            seed: 0,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubCheck {
    pub passed: bool,
    /// Largest violation; non-positive means satisfied with margin.
    pub worst: f64,
    pub tolerance: f64,
    /// Control values (running nodes, breadth-first) at the worst case.
    pub witness: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EquivalenceCertificate {
    pub passed: bool,
    pub lambda_max: f64,
    pub mu: f64,
    pub spectral_method: SpectralMode,
    pub binary_minimum: f64,
    pub binary_optimum: Vec<f64>,
    pub enumerated: u128,
    pub min_sampled_shifted_cost: f64,
    pub samples: usize,
    pub seed: u64,
    pub binary_identity: SubCheck,
    pub relaxed_sampling: SubCheck,
    pub stationarity: SubCheck,
    pub nonbinary_vertices: bool,
    pub warnings: Vec<String>,
}

/// Spectral report with the dense solver when it fits, power iteration otherwise.
pub fn auto_lambda_max(inst: &LqInstance, tol: f64) -> Result<crate::spectral::SpectralReport> {
    let size = inst.tree.running_nodes() * inst.k;
    let mode = if size <= MAX_DENSE_SIZE {
        SpectralMode::Dense
    } else {
        SpectralMode::PowerIteration
    };
    lambda_max(inst, mode, tol, DEFAULT_MAX_ITER)
}

/// Checks, with `μ = −λ_max(N)`:
/// (a) `J^μ(u) = J(u)` on every binary control,
/// (b) no relaxed sample has `J^μ` below the binary minimum,
/// (c) the binary optimum is stationary for `H^μ` over `Ū`.
pub fn equivalence_check(
    inst: &LqInstance,
    domain: &ControlDomain,
    options: &EquivalenceOptions,
) -> Result<EquivalenceCertificate> {
    let spec = auto_lambda_max(inst, 1e-10)?;
    let mu = spec.mu;
    let oracle = brute_force_binary(inst, domain, options.budget)?;

    // (a)
    let vertices = domain.binary_vertices()?;
    let mut u = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
    let mut identity = SubCheck {
        passed: true,
        worst: f64::NEG_INFINITY,
        tolerance: IDENTITY_TOL,
        witness: None,
    };
    for i in 0..oracle.enumerated {
        decode(i, &vertices, &mut u);
        let j = cost_of_process(inst, &u)?;
        let jm = shifted_cost(inst, &u, mu)?;
        let gap = (jm - j).abs() / j.abs().max(1.0);
        if gap > identity.worst {
            identity.worst = gap;
            identity.witness = Some(u.values().to_vec());
        }
    }
    identity.passed = identity.worst <= IDENTITY_TOL;

    // (b)
    let sampled = sample_relaxed_box(inst, domain, mu, options.samples, options.seed)?;
    let shortfall = oracle.best_cost - sampled.min_cost;
    let sampling = SubCheck {
        passed: shortfall <= SAMPLING_TOL,
        worst: shortfall,
        tolerance: SAMPLING_TOL,
        witness: Some(sampled.witness.process().values().to_vec()),
    };

    // (c)
    let x = crate::model::forward_state(inst, &oracle.best_control)?;
    let pair = solve_first_adjoint(inst, &x, &oracle.best_control)?;
    let report: MpReport =
        check_stationarity(inst, &x, &oracle.best_control, &pair, mu, domain, options.tol)?;
    let stationarity = SubCheck {
        passed: report.passed(),
        worst: report.worst_violation,
        tolerance: options.tol,
        witness: report.worst_witness.clone(),
    };

    let nonbinary = domain.nonbinary_relaxed_vertices()?;
    let mut warnings = Vec::new();
    if !nonbinary.is_empty() {
        warnings.push(format!(
            "{} vertex(es) of the relaxed domain are not binary, e.g. {:?}; \
             the relaxed minimum may lie outside U",
            nonbinary.len(),
            nonbinary[0]
        ));
    }

    Ok(EquivalenceCertificate {
        passed: identity.passed && sampling.passed && stationarity.passed,
        lambda_max: spec.lambda_max,
        mu,
        spectral_method: spec.method,
        binary_minimum: oracle.best_cost,
        binary_optimum: oracle.best_control.process().values().to_vec(),
        enumerated: oracle.enumerated,
        min_sampled_shifted_cost: sampled.min_cost,
        samples: options.samples,
        seed: options.seed,
        binary_identity: identity,
        relaxed_sampling: sampling,
        stationarity,
        nonbinary_vertices: !nonbinary.is_empty(),
        warnings,
    })
}
