//! Collocation grids, penalty weights and synthetic observations.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bundle::kinetic_inputs;
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::reference::ReferenceSolution;
use crate::spectral::HermiteBasis;

/// Tensor-product collocation points.
///
/// All point lists are row-major `(t, x)` pairs; the kinetic lists repeat each
/// pair once per velocity node, velocity fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub x_min: f64,
    pub x_max: f64,
    pub velocity_nodes: Vec<f64>,
    /// Interior points, time-major.
    pub interior_tx: Vec<f64>,
    pub interior_txv: Vec<f64>,
    /// For every time level, the left then the right boundary point.
    pub boundary_tx: Vec<f64>,
    pub boundary_txv: Vec<f64>,
    /// `(boundary point, velocity node)` pairs entering the domain.
    pub inflow: Vec<(usize, usize)>,
    /// Interior `x` at `t = 0`.
    pub initial_tx: Vec<f64>,
    pub initial_txv: Vec<f64>,
}

impl CollocationSet {
    /// `nt` interior time levels on `(0, t_final]` and `nx` interior points
    /// evenly spaced in `(x_min, x_max)`.
    pub fn uniform(problem: &ProblemSpec, basis: &HermiteBasis, nt: usize, nx: usize) -> Result<Self> {
        if nt == 0 || nx == 0 {
            return Err(Error::invalid("collocation needs at least one time level and one point"));
        }
        let times: Vec<f64> = (1..=nt).map(|i| problem.t_final * i as f64 / nt as f64).collect();
        let len = problem.x_max - problem.x_min;
        let xs: Vec<f64> = (1..=nx).map(|i| problem.x_min + len * i as f64 / (nx + 1) as f64).collect();
        let nodes = basis.nodes().to_vec();

        let mut interior_tx = Vec::with_capacity(2 * nt * nx);
        for &t in &times {
            for &x in &xs {
                interior_tx.extend_from_slice(&[t, x]);
            }
        }
        let mut boundary_tx = Vec::with_capacity(4 * nt);
        let mut inflow = Vec::new();
        for (k, &t) in times.iter().enumerate() {
            boundary_tx.extend_from_slice(&[t, problem.x_min, t, problem.x_max]);
            for (j, &v) in nodes.iter().enumerate() {
                // outward normals are -1 on the left and +1 on the right
                if v > 0.0 {
                    inflow.push((2 * k, j));
                }
            }
            for (j, &v) in nodes.iter().enumerate() {
                if v < 0.0 {
                    inflow.push((2 * k + 1, j));
                }
            }
        }
        let initial_tx: Vec<f64> = xs.iter().flat_map(|&x| [0.0, x]).collect();
        Ok(CollocationSet {
            interior_txv: kinetic_inputs(&interior_tx, &nodes),
            boundary_txv: kinetic_inputs(&boundary_tx, &nodes),
            initial_txv: kinetic_inputs(&initial_tx, &nodes),
            times,
            xs,
            x_min: problem.x_min,
            x_max: problem.x_max,
            velocity_nodes: nodes,
            interior_tx,
            boundary_tx,
            inflow,
            initial_tx,
        })
    }

    /// 20 time levels and 99 interior points.
    pub fn build(problem: &ProblemSpec, basis: &HermiteBasis) -> Result<Self> {
        Self::uniform(problem, basis, 20, 99)
    }

    pub fn num_nodes(&self) -> usize {
        self.velocity_nodes.len()
    }

    pub fn num_interior(&self) -> usize {
        self.interior_tx.len() / 2
    }

    pub fn num_boundary(&self) -> usize {
        self.boundary_tx.len() / 2
    }

    pub fn num_initial(&self) -> usize {
        self.initial_tx.len() / 2
    }

    /// Reorders the interior points; `perm[k]` is the old index of new point `k`.
    pub fn permute_interior(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_interior();
        let mut seen = alloc::vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("not a permutation of the interior points"));
        }
        let mut out = self.clone();
        out.interior_tx = perm.iter().flat_map(|&p| [self.interior_tx[2 * p], self.interior_tx[2 * p + 1]]).collect();
        out.interior_txv = kinetic_inputs(&out.interior_tx, &self.velocity_nodes);
        Ok(out)
    }
}

/// Loss weights. All must be non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda1_diff: f64,
    pub lambda2_diff: f64,
    pub w_d_rho: f64,
    pub w_d_phi: f64,
    pub w_poisson: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda1_diff: 1.0,
            lambda2_diff: 1.0,
            w_d_rho: 1.0,
            w_d_phi: 1.0,
            w_poisson: 1.0,
        }
    }
}

impl PenaltyWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda1_diff,
            self.lambda2_diff,
            self.w_d_rho,
            self.w_d_phi,
            self.w_poisson,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("penalty weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Point observations `(t, x, value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub rho_obs: Vec<(f64, f64, f64)>,
    pub phi_obs: Option<Vec<(f64, f64, f64)>>,
    pub seed: u64,
}

impl ObservationSet {
    /// Draws `n_rho` density and `n_phi` potential observations without
    /// replacement from the `(t, x)` grid points of a reference trajectory.
    /// `noise` is a relative Gaussian perturbation (0 for exact data).
    pub fn sample(sol: &ReferenceSolution, n_rho: usize, n_phi: usize, noise: f64, seed: u64) -> Result<Self> {
        if !(noise >= 0.0) {
            return Err(Error::invalid("observation noise must be non-negative"));
        }
        let nx = sol.grid.nx;
        let total = sol.times.len() * nx;
        if n_rho > total || n_phi > total {
            return Err(Error::invalid("more observations requested than grid points"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |n: usize, field: &[Vec<f64>], rng: &mut ChaCha8Rng| -> Vec<(f64, f64, f64)> {
            let mut idx = sample(rng, total, n).into_vec();
            idx.sort_unstable();
            idx.into_iter()
                .map(|k| {
                    let (it, ix) = (k / nx, k % nx);
                    let z: f64 = rng.sample(StandardNormal);
                    (sol.times[it], sol.grid.nodes[ix], field[it][ix] * (1.0 + noise * z))
                })
                .collect()
        };
        let rho_obs = draw(n_rho, &sol.rho, &mut rng);
        let phi_obs = if n_phi > 0 {
            if sol.phi.len() != sol.times.len() {
                return Err(Error::invalid("reference carries no potential trajectory"));
            }
            Some(draw(n_phi, &sol.phi, &mut rng))
        } else {
            None
        };
        Ok(ObservationSet { rho_obs, phi_obs, seed })
    }

    pub fn rho_points(&self) -> Vec<f64> {
        self.rho_obs.iter().flat_map(|&(t, x, _)| [t, x]).collect()
    }

    pub fn phi_points(&self) -> Vec<f64> {
        self.phi_obs.iter().flatten().flat_map(|&(t, x, _)| [t, x]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes() {
        let basis = HermiteBasis::with_nodes(8).unwrap();
        let c = CollocationSet::build(&ProblemSpec::problem_one(), &basis).unwrap();
        assert_eq!(c.num_interior(), 1980);
        assert_eq!(c.interior_txv.len(), 3 * 1980 * 8);
        assert_eq!(c.num_initial() * c.num_nodes(), 792);
        assert_eq!(c.inflow.len(), 20 * 8);
        for k in 0..20 {
            let left = c.inflow.iter().filter(|(p, _)| *p == 2 * k).count();
            let right = c.inflow.iter().filter(|(p, _)| *p == 2 * k + 1).count();
            assert_eq!((left, right), (4, 4));
        }
        assert!((c.xs[0] - 0.01).abs() < 1e-15 && (c.xs[98] - 0.99).abs() < 1e-15);
        assert!(c.times.iter().all(|&t| t > 0.0 && t <= 0.1));
    }

    #[test]
    fn permutation_is_checked() {
        let basis = HermiteBasis::with_nodes(4).unwrap();
        let c = CollocationSet::uniform(&ProblemSpec::problem_one(), &basis, 2, 2).unwrap();
        assert!(c.permute_interior(&[0, 0, 1, 2]).is_err());
        let p = c.permute_interior(&[3, 2, 1, 0]).unwrap();
        assert_eq!(&p.interior_tx[..2], &c.interior_tx[6..8]);
    }

    #[test]
    fn weights_reject_negative() {
        let w = PenaltyWeights {
            lambda1: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
