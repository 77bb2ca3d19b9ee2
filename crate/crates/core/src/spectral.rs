//! Hermite spectral machinery for the velocity variable.
//!
//! Every velocity field is stored as the ratio `f / M` sampled at the
//! Gauss–Hermite nodes, where `M(v) = exp(-v²)/√π`. Two weight vectors are
//! kept: the raw Gauss–Hermite weights (for the weight `exp(-v²)`), used by
//! the Hermite transform and the derivative matrix, and the Maxwellian
//! weights `w / √π`, used by moments, projections and the collision operator.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::symmetric_tridiagonal_eigen;

/// Normalized Maxwellian `exp(-v²)/√π`.
pub fn maxwellian(v: f64) -> f64 {
    libm::exp(-v * v) / libm::sqrt(PI)
}

/// The `n`-point Gauss–Hermite rule for the weight `exp(-v²)`.
///
/// Nodes come from the Jacobi matrix eigenproblem, are polished by Newton
/// steps on the orthonormal recurrence, and weights use the Christoffel
/// formula. The rule is then symmetrized so that nodes and weights are
/// exactly (anti)symmetric.
pub fn gauss_hermite_rule(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::invalid("gauss_hermite_rule: n must be at least 1"));
    }
    let diag = vec![0.0; n];
    let offdiag: Vec<f64> = (1..n).map(|k| libm::sqrt(k as f64 / 2.0)).collect();
    let (mut nodes, _) = symmetric_tridiagonal_eigen(&diag, &offdiag)?;

    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = orthonormal_with_derivative(n, *x);
            if dp == 0.0 {
                break;
            }
            *x -= p / dp;
        }
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let s: f64 = (0..n).map(|k| hermite_unchecked(k, x)).map(|h| h * h).sum();
            1.0 / s
        })
        .collect();

    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok((nodes, weights))
}

/// Value and derivative of the renormalized Hermite polynomial of degree `n`.
fn orthonormal_with_derivative(n: usize, v: f64) -> (f64, f64) {
    let p = hermite_unchecked(n, v);
    let dp = libm::sqrt(2.0 * n as f64) * hermite_unchecked(n - 1, v);
    (p, dp)
}

fn hermite_unchecked(k: usize, v: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 1.0 / libm::pow(PI, 0.25);
    for j in 0..k {
        let jf = j as f64;
        let next = v * libm::sqrt(2.0 / (jf + 1.0)) * cur - libm::sqrt(jf / (jf + 1.0)) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Renormalized Hermite polynomial `H̃_k(v)`, orthonormal for the weight
/// `exp(-v²)`. `k = -1` yields zero.
pub fn hermite_renormalized(k: i32, v: f64) -> Result<f64> {
    match k {
        k if k < -1 => Err(Error::invalid("hermite_renormalized: k must be >= -1")),
        -1 => Ok(0.0),
        k => Ok(hermite_unchecked(k as usize, v)),
    }
}

/// Scattering kernel `σ(v, w)`.
pub trait ScatteringKernel {
    fn sigma(&self, v: f64, w: f64) -> f64;
}

/// Velocity-independent scattering, `σ(v, w) = c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantKernel(pub f64);

impl ScatteringKernel for ConstantKernel {
    fn sigma(&self, _v: f64, _w: f64) -> f64 {
        self.0
    }
}

impl<F: Fn(f64, f64) -> f64> ScatteringKernel for F {
    fn sigma(&self, v: f64, w: f64) -> f64 {
        self(v, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HermiteBasis {
    order: usize,
    nodes: Vec<f64>,
    weights_gh: Vec<f64>,
    weights_maxwellian: Vec<f64>,
    /// `(N+1) x Nv`, row `k` holds `H̃_k` at the nodes.
    basis_values: Vec<f64>,
    /// `Nv x Nv`, entry `(j, i) = C_j(v_i)`.
    deriv_matrix: Vec<f64>,
    maxwellian_at_nodes: Vec<f64>,
}

impl HermiteBasis {
    /// Builds the basis of truncation order `order` on `num_nodes` nodes.
    /// Requires `order <= num_nodes - 1` so the transform does not alias.
    pub fn new(order: usize, num_nodes: usize) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::invalid("build_basis: need at least one node"));
        }
        if order + 1 > num_nodes {
            return Err(Error::invalid(alloc::format!(
                "build_basis: order {order} aliases on {num_nodes} nodes"
            )));
        }
        let (nodes, weights_gh) = gauss_hermite_rule(num_nodes)?;
        let sqrt_pi = libm::sqrt(PI);
        let weights_maxwellian = weights_gh.iter().map(|w| w / sqrt_pi).collect();

        let mut basis_values = vec![0.0; (order + 1) * num_nodes];
        for k in 0..=order {
            for (j, &v) in nodes.iter().enumerate() {
                basis_values[k * num_nodes + j] = hermite_unchecked(k, v);
            }
        }
        let mut deriv_matrix = vec![0.0; num_nodes * num_nodes];
        for j in 0..num_nodes {
            for i in 0..num_nodes {
                let mut s = 0.0;
                for k in 1..=order {
                    s += libm::sqrt(2.0 * k as f64)
                        * basis_values[k * num_nodes + j]
                        * basis_values[(k - 1) * num_nodes + i];
                }
                deriv_matrix[j * num_nodes + i] = s * weights_gh[j];
            }
        }
        let maxwellian_at_nodes = nodes.iter().map(|&v| maxwellian(v)).collect();
        Ok(HermiteBasis {
            order,
            nodes,
            weights_gh,
            weights_maxwellian,
            basis_values,
            deriv_matrix,
            maxwellian_at_nodes,
        })
    }

    /// Maximal non-aliasing order on `num_nodes` nodes.
    pub fn with_nodes(num_nodes: usize) -> Result<Self> {
        Self::new(num_nodes.saturating_sub(1), num_nodes)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights_gh(&self) -> &[f64] {
        &self.weights_gh
    }

    pub fn weights_maxwellian(&self) -> &[f64] {
        &self.weights_maxwellian
    }

    pub fn maxwellian_at_nodes(&self) -> &[f64] {
        &self.maxwellian_at_nodes
    }

    /// `H̃_k(v_j)`.
    pub fn basis_value(&self, k: usize, j: usize) -> f64 {
        self.basis_values[k * self.num_nodes() + j]
    }

    /// `C_j(v_i)`.
    pub fn deriv_entry(&self, j: usize, i: usize) -> f64 {
        self.deriv_matrix[j * self.num_nodes() + i]
    }

    /// The derivative matrix in `(j, i) = C_j(v_i)` layout.
    pub fn deriv_matrix(&self) -> &[f64] {
        &self.deriv_matrix
    }

    /// `∂_v ψ` at the nodes: `Σ_j ψ(v_j) C_j(v_i)`.
    pub fn velocity_derivative(&self, psi: &[f64]) -> Result<Vec<f64>> {
        self.check_len(psi)?;
        let n = self.num_nodes();
        Ok((0..n)
            .map(|i| (0..n).map(|j| psi[j] * self.deriv_matrix[j * n + i]).sum())
            .collect())
    }

    /// Hermite coefficients `ψ_k = Σ_j ψ(v_j) H̃_k(v_j) w_j`.
    pub fn transform(&self, psi: &[f64]) -> Result<Vec<f64>> {
        self.check_len(psi)?;
        let n = self.num_nodes();
        Ok((0..=self.order)
            .map(|k| {
                (0..n)
                    .map(|j| psi[j] * self.basis_values[k * n + j] * self.weights_gh[j])
                    .sum()
            })
            .collect())
    }

    /// `⟨f⟩ ≈ ∫ f dv` from `f/M` at the nodes.
    pub fn bracket_moment(&self, f_over_m: &[f64]) -> Result<f64> {
        self.check_len(f_over_m)?;
        Ok(dot(f_over_m, &self.weights_maxwellian))
    }

    /// `(Π f)/M`, the constant vector `⟨f⟩`.
    pub fn project_pi(&self, f_over_m: &[f64]) -> Result<Vec<f64>> {
        let m = self.bracket_moment(f_over_m)?;
        Ok(vec![m; self.num_nodes()])
    }

    /// Kernel sampled on the node grid, row-major `σ(v_i, v_j)`.
    pub fn kernel_matrix<K: ScatteringKernel + ?Sized>(&self, kernel: &K) -> Vec<f64> {
        let n = self.num_nodes();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = kernel.sigma(self.nodes[i], self.nodes[j]);
            }
        }
        s
    }

    /// Collision frequency `λ(v_i) = Σ_j σ(v_i, v_j) w_j^M`.
    pub fn collision_frequency<K: ScatteringKernel + ?Sized>(&self, kernel: &K) -> Vec<f64> {
        let n = self.num_nodes();
        let s = self.kernel_matrix(kernel);
        (0..n)
            .map(|i| (0..n).map(|j| s[i * n + j] * self.weights_maxwellian[j]).sum())
            .collect()
    }

    /// `Q(g)/M` at the nodes from `ψ = g/M`, together with `λ` at the nodes.
    pub fn collision_q<K: ScatteringKernel + ?Sized>(
        &self,
        psi: &[f64],
        kernel: &K,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(psi)?;
        let n = self.num_nodes();
        let s = self.kernel_matrix(kernel);
        let lambda = self.collision_frequency(kernel);
        let q = (0..n)
            .map(|i| {
                let gain: f64 = (0..n)
                    .map(|j| s[i * n + j] * psi[j] * self.weights_maxwellian[j])
                    .sum();
                gain - lambda[i] * psi[i]
            })
            .collect();
        Ok((q, lambda))
    }

    /// Diffusion coefficient `T = Σ_j v_j² / λ(v_j) w_j^M`.
    pub fn diffusion_coefficient<K: ScatteringKernel + ?Sized>(&self, kernel: &K) -> Result<f64> {
        let lambda = self.collision_frequency(kernel);
        let mut t = 0.0;
        for (j, &l) in lambda.iter().enumerate() {
            if !(l > 0.0) {
                return Err(Error::Domain(alloc::format!(
                    "collision frequency {l} at node {j} is not positive"
                )));
            }
            t += (self.nodes[j] * self.nodes[j]) / l * self.weights_maxwellian[j];
        }
        Ok(t)
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_nodes() {
            return Err(Error::invalid(alloc::format!(
                "velocity vector has length {}, basis has {} nodes",
                v.len(),
                self.num_nodes()
            )));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
