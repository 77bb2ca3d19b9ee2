//! The two benchmark configurations: a given electrostatic potential
//! (problem I) and the self-consistent Boltzmann–Poisson diode (problem II).

use core::f64::consts::E;

use crate::reference::PoissonProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    /// `φ(x) = exp(-50 e (1/4 - x)²)`, constant scattering.
    GivenPotential,
    /// Potential solved from `β φ'' = ρ - c(x)`, `φ(0) = 0`, `φ(1) = V`.
    BoltzmannPoisson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Constant scattering coefficient `σ(v, w) = sigma`.
    pub sigma: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub t_final: f64,
    /// Debye length `β` (problem II only).
    pub beta: f64,
    /// Applied bias `V` (problem II only).
    pub bias: f64,
    /// Density inflow on both sides, as a multiple of the Maxwellian.
    pub inflow_density: f64,
    /// Initial density, `f(0, x, v) = initial_density · M(v)`.
    pub initial_density: f64,
}

const BUMP: f64 = 50.0 * E;
const DOPING_M: f64 = (1.0 - 0.001) / 2.0;

impl ProblemSpec {
    pub fn problem_one() -> Self {
        ProblemSpec {
            kind: ProblemKind::GivenPotential,
            sigma: 2.0,
            x_min: 0.0,
            x_max: 1.0,
            t_final: 0.1,
            beta: 0.0,
            bias: 0.0,
            inflow_density: 1.0,
            initial_density: 1.0,
        }
    }

    pub fn problem_two() -> Self {
        ProblemSpec {
            kind: ProblemKind::BoltzmannPoisson,
            beta: 0.002,
            bias: 5.0,
            ..Self::problem_one()
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn is_self_consistent(&self) -> bool {
        self.kind == ProblemKind::BoltzmannPoisson
    }

    /// Given potential of problem I.
    pub fn potential(&self, x: f64) -> f64 {
        libm::exp(-BUMP * (0.25 - x) * (0.25 - x))
    }

    /// `∂_x φ` of the given potential.
    pub fn potential_gradient(&self, x: f64) -> f64 {
        2.0 * BUMP * (0.25 - x) * self.potential(x)
    }

    /// `∂_xx φ` of the given potential.
    pub fn potential_laplacian(&self, x: f64) -> f64 {
        let a = 0.25 - x;
        2.0 * BUMP * self.potential(x) * (2.0 * BUMP * a * a - 1.0)
    }

    /// Doping profile `c(x)` of the diode.
    pub fn doping(&self, x: f64) -> f64 {
        1.0 - (1.0 - DOPING_M)
            * self.initial_density
            * (libm::tanh((x - 0.3) / 0.02) - libm::tanh((x - 0.7) / 0.02))
    }

    pub fn poisson_problem(&self, nodes: &[f64]) -> PoissonProblem {
        PoissonProblem {
            beta: self.beta,
            bias: self.bias,
            doping: nodes.iter().map(|&x| self.doping(x)).collect(),
        }
    }
}
