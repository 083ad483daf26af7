//! The shift `μ = −λ_max(N)`, the shifted cost `J^μ`, and concavity checks.
//!
//! `J^μ(u) = J(u) + ½μ⟨u, u⟩ − ½μ⟨𝟙, u⟩` agrees with `J` on binary controls
//! (`u_i² = u_i`) and is concave on the relaxed set once `N + μI ⪯ 0`.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cost_of_process, LqInstance};
use crate::operators::{apply_n, assemble_n_dense};
use crate::tree::{inner_product_running, AdaptedProcess, ProcessKind};

pub const DEFAULT_MAX_ITER: usize = 5000;

/// Random probes used to bound `‖N‖` before power iteration.
const NORM_PROBES: usize = 16;
const NORM_SAFETY: f64 = 4.0;
const POWER_SEED: u64 = 0x5eed;

/// Accepted tolerance on the top eigenvalue of `N + μI` when certifying.
pub const CONCAVITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralMode {
    Dense,
    PowerIteration,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SpectralReport {
    pub lambda_max: f64,
    pub mu: f64,
    pub method: SpectralMode,
    pub iterations: usize,
    /// `‖Nv − λv‖ / ‖v‖` in the running norm.
    pub residual: f64,
    /// Shift `c` used by power iteration (0 for dense).
    pub shift: f64,
    #[serde(skip)]
    pub eigenvector: Option<AdaptedProcess>,
}

fn running_norm(u: &AdaptedProcess) -> f64 {
    inner_product_running(u, u).expect("same shape").sqrt()
}

fn residual_of(inst: &LqInstance, v: &AdaptedProcess, lambda: f64) -> Result<f64> {
    let mut r = apply_n(inst, v)?;
    r.axpy(-lambda, v)?;
    Ok(running_norm(&r) / running_norm(v))
}

fn random_unit(inst: &LqInstance, rng: &mut ChaCha8Rng) -> AdaptedProcess {
    let mut v = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
    v.values_mut()
        .iter_mut()
        .for_each(|x| *x = rng.random_range(-1.0..1.0));
    let norm = running_norm(&v);
    v.scale(1.0 / norm);
    v
}

/// Largest algebraic eigenvalue of `N` under the running inner product.
pub fn lambda_max(
    inst: &LqInstance,
    mode: SpectralMode,
    tol: f64,
    max_iter: usize,
) -> Result<SpectralReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    match mode {
        SpectralMode::Dense => dense_lambda_max(inst),
        SpectralMode::PowerIteration => power_lambda_max(inst, tol, max_iter),
    }
}

fn dense_lambda_max(inst: &LqInstance) -> Result<SpectralReport> {
    let dense = assemble_n_dense(inst)?;
    let eig = SymmetricEigen::new(dense.matrix.clone());
    let (imax, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty spectrum");
    let template = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
    let v = dense.from_coords(&eig.eigenvectors.column(imax).into_owned(), &template);
    let residual = residual_of(inst, &v, lambda)?;
    Ok(SpectralReport {
        lambda_max: lambda,
        mu: -lambda,
        method: SpectralMode::Dense,
        iterations: 0,
        residual,
        shift: 0.0,
        eigenvector: Some(v),
    })
}

/// Every eigenvalue of `N`, ascending (dense mode only).
pub fn dense_spectrum(inst: &LqInstance) -> Result<Vec<f64>> {
    let dense = assemble_n_dense(inst)?;
    let mut ev: Vec<f64> = SymmetricEigen::new(dense.matrix).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Power iteration on `N + cI` with `c` a generous bound on `‖N‖`, so the
/// dominant eigenvalue is the largest algebraic one.
fn power_lambda_max(inst: &LqInstance, tol: f64, max_iter: usize) -> Result<SpectralReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut bound: f64 = 0.0;
    for _ in 0..NORM_PROBES {
        let v = random_unit(inst, &mut rng);
        bound = bound.max(running_norm(&apply_n(inst, &v)?));
    }
    let shift = NORM_SAFETY * bound;
    if shift == 0.0 {
        let v = random_unit(inst, &mut rng);
        return Ok(SpectralReport {
            lambda_max: 0.0,
            mu: 0.0,
            method: SpectralMode::PowerIteration,
            iterations: 0,
            residual: 0.0,
            shift,
            eigenvector: Some(v),
        });
    }

    let mut v = random_unit(inst, &mut rng);
    let mut nv = apply_n(inst, &v)?;
    let mut previous: Option<f64> = None;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let rq = inner_product_running(&nv, &v)?;
        let mut r = nv.clone();
        r.axpy(-rq, &v)?;
        residual = running_norm(&r);
        if let Some(prev) = previous {
            let change = (rq - prev).abs() / rq.abs().max(1.0);
            if change <= tol && residual <= 10.0 * tol {
                if rq + shift <= 0.01 * shift {
                    return Err(Error::ShiftBoundViolated { lambda: rq, shift });
                }
                return Ok(SpectralReport {
                    lambda_max: rq,
                    mu: -rq,
                    method: SpectralMode::PowerIteration,
                    iterations: it,
                    residual,
                    shift,
                    eigenvector: Some(v),
                });
            }
        }
        previous = Some(rq);
        // v ← (N + cI)v / ‖·‖
        let mut w = nv;
        w.axpy(shift, &v)?;
        let norm = running_norm(&w);
        w.scale(1.0 / norm);
        v = w;
        nv = apply_n(inst, &v)?;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// `J^μ(u) = J(u) + ½μ⟨u, u⟩ − ½μ⟨𝟙, u⟩`.
pub fn shifted_cost(inst: &LqInstance, u: &AdaptedProcess, mu: f64) -> Result<f64> {
    let j = cost_of_process(inst, u)?;
    if mu == 0.0 {
        return Ok(j);
    }
    let ones = AdaptedProcess::constant(inst.tree, ProcessKind::Running, &vec![1.0; inst.k]);
    Ok(j + 0.5 * mu * inner_product_running(u, u)? - 0.5 * mu * inner_product_running(&ones, u)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConcavityMode {
    Dense,
    Sampling { trials: usize, seed: u64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConcavityReport {
    pub passed: bool,
    pub mode: ConcavityMode,
    /// Dense: top eigenvalue of `N + μI`. Sampling: largest midpoint gap
    /// `½J^μ(u) + ½J^μ(v) − J^μ((u+v)/2)`.
    pub worst: f64,
    /// Direction of positive curvature, in process storage order.
    pub witness: Option<Vec<f64>>,
}

/// Checks that `J^μ` is concave, either through the spectrum of `N + μI` or
/// by midpoint concavity on random relaxed pairs.
pub fn certify_concavity(inst: &LqInstance, mu: f64, mode: ConcavityMode) -> Result<ConcavityReport> {
    match mode {
        ConcavityMode::Dense => {
            let report = dense_lambda_max(inst)?;
            let top = report.lambda_max + mu;
            let passed = top <= CONCAVITY_TOL;
            Ok(ConcavityReport {
                passed,
                mode,
                worst: top,
                witness: (!passed)
                    .then(|| report.eigenvector.map(|v| v.into_values()))
                    .flatten(),
            })
        }
        ConcavityMode::Sampling { trials, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst = f64::NEG_INFINITY;
            let mut witness = None;
            let draw = |rng: &mut ChaCha8Rng| {
                let mut u = AdaptedProcess::zeros(inst.tree, inst.k, ProcessKind::Running);
                u.values_mut().iter_mut().for_each(|x| *x = rng.random::<f64>());
                u
            };
            for _ in 0..trials {
                let u = draw(&mut rng);
                let v = draw(&mut rng);
                let mut mid = u.clone();
                mid.axpy(1.0, &v)?;
                mid.scale(0.5);
                let gap = 0.5 * shifted_cost(inst, &u, mu)? + 0.5 * shifted_cost(inst, &v, mu)?
                    - shifted_cost(inst, &mid, mu)?;
                if gap > worst {
                    worst = gap;
                    let mut d = u;
                    d.axpy(-1.0, &v)?;
                    witness = Some(d.into_values());
                }
            }
            let passed = worst <= 1e-9;
            Ok(ConcavityReport {
                passed,
                mode,
                worst,
                witness: if passed { None } else { witness },
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{example5, zero_instance};
    use crate::model::StepCoefficients;
    use crate::tree::ScenarioTree;
    use nalgebra::DMatrix;

    #[test]
    fn example5_depth2_lambda_is_two() {
        let (inst, _) = example5(2).unwrap();
        for mode in [SpectralMode::Dense, SpectralMode::PowerIteration] {
            let rep = lambda_max(&inst, mode, 1e-10, DEFAULT_MAX_ITER).unwrap();
            assert!((rep.lambda_max - 2.0).abs() < 1e-8, "{mode:?}: {}", rep.lambda_max);
            assert_eq!(rep.mu, -rep.lambda_max);
            assert!(rep.residual <= 1e-8);
        }
    }

    #[test]
    fn multiplication_operator_spectrum() {
        let tree = ScenarioTree::new(3, 1.0).unwrap();
        let inst = LqInstance::zeros(tree, 1, 3).with_steps(|_| {
            let mut s = StepCoefficients::zeros(1, 3);
            s.r = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-0.5, 1.25, 0.3]));
            s
        });
        for mode in [SpectralMode::Dense, SpectralMode::PowerIteration] {
            let rep = lambda_max(&inst, mode, 1e-10, DEFAULT_MAX_ITER).unwrap();
            assert!((rep.lambda_max - 1.25).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_instance_has_zero_spectrum() {
        let (inst, _) = zero_instance(3, 2, 2).unwrap();
        for mode in [SpectralMode::Dense, SpectralMode::PowerIteration] {
            let rep = lambda_max(&inst, mode, 1e-10, DEFAULT_MAX_ITER).unwrap();
            assert_eq!(rep.lambda_max, 0.0);
        }
        assert!(lambda_max(&inst, SpectralMode::Dense, 0.0, 10).is_err());
    }

    #[test]
    fn power_iteration_reports_nonconvergence() {
        let (inst, _) = example5(6).unwrap();
        let err = lambda_max(&inst, SpectralMode::PowerIteration, 1e-14, 3).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 3, .. }));
    }

    #[test]
    fn shifted_cost_examples() {
        let (inst, _) = example5(2).unwrap();
        let half = AdaptedProcess::constant(inst.tree, ProcessKind::Running, &[0.5]);
        let j = shifted_cost(&inst, &half, -2.0).unwrap();
        assert!((j - 0.4375).abs() < 1e-14);
        let one = AdaptedProcess::constant(inst.tree, ProcessKind::Running, &[1.0]);
        for mu in [-3.0, 0.0, 7.5] {
            assert!((shifted_cost(&inst, &one, mu).unwrap() - 0.75).abs() < 1e-14);
        }
        assert_eq!(
            shifted_cost(&inst, &half, 0.0).unwrap(),
            cost_of_process(&inst, &half).unwrap()
        );
    }

    #[test]
    fn concavity_examples() {
        let (inst, _) = example5(2).unwrap();
        let spectrum = dense_spectrum(&inst).unwrap();
        let shifted: Vec<f64> = spectrum.iter().map(|l| l - 2.0).collect();
        assert!((shifted[0] + 1.0).abs() < 1e-12 && (shifted[2]).abs() < 1e-12);

        let ok = certify_concavity(&inst, -2.0, ConcavityMode::Dense).unwrap();
        assert!(ok.passed);
        let ok = certify_concavity(&inst, -2.0, ConcavityMode::Sampling { trials: 200, seed: 1 })
            .unwrap();
        assert!(ok.passed);

        let bad = certify_concavity(&inst, -1.5, ConcavityMode::Dense).unwrap();
        assert!(!bad.passed);
        assert!((bad.worst - 0.5).abs() < 1e-12);
        let w = bad.witness.unwrap();
        // curvature lives on the root node
        assert!(w[0].abs() > 0.0 && w[1].abs() < 1e-12 && w[2].abs() < 1e-12);
        let bad = certify_concavity(&inst, -1.5, ConcavityMode::Sampling { trials: 200, seed: 1 })
            .unwrap();
        assert!(!bad.passed && bad.witness.is_some());

        let (zero, _) = zero_instance(2, 1, 1).unwrap();
        assert!(certify_concavity(&zero, 0.0, ConcavityMode::Dense).unwrap().passed);
    }
}
