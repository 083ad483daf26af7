//! Ready-made instances: the one-dimensional worked example, the zero
//! instance, and the seeded random family used by the oracle runs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::ControlDomain;
use crate::error::Result;
use crate::model::{LqInstance, StepCoefficients};
use crate::tree::ScenarioTree;

/// `dX = u dW`, `X(0) = 0` on `[0, 1]`, cost `E[∫(X² − ½u²)dt + X(1)²]`,
/// `U = {0, 1}`. In the ½-normalized form: `D = 1`, `Q = 2`, `R = −1`, `G = 2`.
pub fn example5(depth: usize) -> Result<(LqInstance, ControlDomain)> {
    let tree = ScenarioTree::new(depth, 1.0)?;
    let mut inst = LqInstance::zeros(tree, 1, 1).with_steps(|_| {
        let mut s = StepCoefficients::zeros(1, 1);
        s.d[(0, 0)] = 1.0;
        s.q[(0, 0)] = 2.0;
        s.r[(0, 0)] = -1.0;
        s
    });
    inst.g[(0, 0)] = 2.0;
    Ok((inst, ControlDomain::unconstrained(1)))
}

/// Every coefficient zero.
pub fn zero_instance(depth: usize, n: usize, k: usize) -> Result<(LqInstance, ControlDomain)> {
    let tree = ScenarioTree::new(depth, 1.0)?;
    Ok((LqInstance::zeros(tree, n, k), ControlDomain::unconstrained(k)))
}

/// Shape of the random instance family.
#[derive(Clone, Debug)]
pub struct RandomFamily {
    pub max_n: usize,
    pub max_k: usize,
    pub min_depth: usize,
    pub max_depth: usize,
    pub horizon: f64,
}

impl Default for RandomFamily {
    /// `n, k ∈ {1, 2}`, depth ∈ {1, 2}, `T = 1`.
    fn default() -> Self {
        Self {
            max_n: 2,
            max_k: 2,
            min_depth: 1,
            max_depth: 2,
            horizon: 1.0,
        }
    }
}

/// Entries uniform in `[−1, 1]`, Q/R/G symmetrized, `b = σ = 0` for about
/// half the seeds, `C = ℝ^k`.
pub fn random_instance(seed: u64, family: &RandomFamily) -> Result<(LqInstance, ControlDomain)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=family.max_n);
    let k = rng.random_range(1..=family.max_k);
    let depth = rng.random_range(family.min_depth..=family.max_depth);
    let affine = rng.random_bool(0.5);
    let tree = ScenarioTree::new(depth, family.horizon)?;

    let mat = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0))
    };
    let mut steps = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut s = StepCoefficients {
            a: mat(n, n, &mut rng),
            b: mat(n, k, &mut rng),
            c: mat(n, n, &mut rng),
            d: mat(n, k, &mut rng),
            drift: DVector::zeros(n),
            diffusion: DVector::zeros(n),
            q: mat(n, n, &mut rng),
            s: mat(k, n, &mut rng),
            r: mat(k, k, &mut rng),
        };
        if affine {
            s.drift = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
            s.diffusion = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        }
        steps.push(s);
    }
    let g = mat(n, n, &mut rng);
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
    let mut inst = LqInstance {
        tree,
        n,
        k,
        steps,
        g,
        x0,
    };
    inst.symmetrize();
    Ok((inst, ControlDomain::unconstrained(k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_instance;

    #[test]
    fn random_instances_are_valid_and_reproducible() {
        let fam = RandomFamily::default();
        for seed in 0..20 {
            let (a, da) = random_instance(seed, &fam).unwrap();
            let (b, _) = random_instance(seed, &fam).unwrap();
            assert_eq!(a, b);
            assert!(validate_instance(&a, &da).is_valid());
            assert!(a.n <= 2 && a.k <= 2 && a.tree.depth() <= 2);
        }
    }
}
