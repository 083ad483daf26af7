//! Control domains: the polytope `C = {v : ⟨g_i, v⟩ ≤ h_i}`, the binary set
//! `U = C ∩ {0,1}^k` and the relaxed set `Ū = C ∩ [0,1]^k`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute slack allowed when testing membership in `C` or the box.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Largest `k` for which `{0,1}^k` is enumerated.
pub const MAX_BINARY_DIM: usize = 20;

/// Largest `k` for which the vertices of `Ū` are enumerated.
pub const MAX_VERTEX_DIM: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub g: Vec<f64>,
    pub h: f64,
}

impl HalfSpace {
    pub fn new(g: Vec<f64>, h: f64) -> Self {
        Self { g, h }
    }

    pub fn slack(&self, v: &[f64]) -> f64 {
        self.h - self.g.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlDomain {
    k: usize,
    halfspaces: Vec<HalfSpace>,
}

impl ControlDomain {
    /// `C = ℝ^k`.
    pub fn unconstrained(k: usize) -> Self {
        Self {
            k,
            halfspaces: Vec::new(),
        }
    }

    pub fn new(k: usize, halfspaces: Vec<HalfSpace>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("control dimension must be ≥ 1".into()));
        }
        for (i, hs) in halfspaces.iter().enumerate() {
            if hs.g.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "half-space {i} has normal of length {}, expected {k}",
                    hs.g.len()
                )));
            }
        }
        Ok(Self { k, halfspaces })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn halfspaces(&self) -> &[HalfSpace] {
        &self.halfspaces
    }

    pub fn is_unconstrained(&self) -> bool {
        self.halfspaces.is_empty()
    }

    pub fn in_polytope(&self, v: &[f64], tol: f64) -> bool {
        v.len() == self.k && self.halfspaces.iter().all(|hs| hs.slack(v) >= -tol)
    }

    pub fn in_relaxed(&self, v: &[f64], tol: f64) -> bool {
        v.iter().all(|&x| x >= -tol && x <= 1.0 + tol) && self.in_polytope(v, tol)
    }

    pub fn in_binary(&self, v: &[f64], tol: f64) -> bool {
        v.iter().all(|&x| x.abs() <= tol || (x - 1.0).abs() <= tol) && self.in_polytope(v, tol)
    }

    /// All of `U`, lexicographically sorted.
    pub fn binary_vertices(&self) -> Result<Vec<Vec<f64>>> {
        if self.k > MAX_BINARY_DIM {
            return Err(Error::TooLarge {
                what: "binary enumeration",
                required: self.k as u128,
                cap: MAX_BINARY_DIM as u128,
            });
        }
        // Counting up with the first coordinate as the most significant bit
        // yields lexicographic order directly.
        let out = (0u64..1u64 << self.k)
            .map(|code| {
                (0..self.k)
                    .map(|i| ((code >> (self.k - 1 - i)) & 1) as f64)
                    .collect::<Vec<f64>>()
            })
            .filter(|v| self.in_polytope(v, MEMBERSHIP_TOL))
            .collect();
        Ok(out)
    }

    /// Extreme points of `Ū = C ∩ [0,1]^k`, lexicographically sorted.
    ///
    /// With `C = ℝ^k` these are the `2^k` box corners. Otherwise every choice
    /// of `k` active constraints out of the half-spaces and the `2k` box faces
    /// is solved and kept when feasible.
    pub fn relaxed_vertices(&self) -> Result<Vec<Vec<f64>>> {
        if self.k > MAX_VERTEX_DIM {
            return Err(Error::TooLarge {
                what: "vertex enumeration",
                required: self.k as u128,
                cap: MAX_VERTEX_DIM as u128,
            });
        }
        if self.is_unconstrained() {
            return self.binary_vertices();
        }
        let k = self.k;
        let mut rows: Vec<(Vec<f64>, f64)> = self
            .halfspaces
            .iter()
            .map(|hs| (hs.g.clone(), hs.h))
            .collect();
        for i in 0..k {
            let mut e = vec![0.0; k];
            e[i] = -1.0;
            rows.push((e.clone(), 0.0));
            e[i] = 1.0;
            rows.push((e, 1.0));
        }

        let mut vertices: Vec<Vec<f64>> = Vec::new();
        let mut chosen: Vec<usize> = (0..k).collect();
        let m = rows.len();
        loop {
            let a = DMatrix::from_fn(k, k, |i, j| rows[chosen[i]].0[j]);
            let rhs = DVector::from_fn(k, |i, _| rows[chosen[i]].1);
            if let Some(x) = a.lu().solve(&rhs) {
                let v: Vec<f64> = x.iter().copied().collect();
                if v.iter().all(|x| x.is_finite())
                    && self.in_relaxed(&v, MEMBERSHIP_TOL)
                    && !vertices.iter().any(|w| close(w, &v))
                {
                    vertices.push(v);
                }
            }
            if !next_combination(&mut chosen, m) {
                break;
            }
        }
        for v in vertices.iter_mut() {
            for x in v.iter_mut() {
                // snap rounding noise so binary vertices compare exactly
                if x.abs() <= MEMBERSHIP_TOL {
                    *x = 0.0;
                } else if (*x - 1.0).abs() <= MEMBERSHIP_TOL {
                    *x = 1.0;
                }
            }
        }
        vertices.sort_by(|a, b| a.partial_cmp(b).expect("finite vertices"));
        Ok(vertices)
    }

    /// Extreme points of `Ū` that are not in `{0,1}^k`.
    pub fn nonbinary_relaxed_vertices(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .relaxed_vertices()?
            .into_iter()
            .filter(|v| v.iter().any(|&x| x != 0.0 && x != 1.0))
            .collect())
    }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9)
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
