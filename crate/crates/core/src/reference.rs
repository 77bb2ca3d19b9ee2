//! Classical reference solvers.
//!
//! The kinetic solver is a micro-macro scheme on a staggered grid: the
//! density `ρ` lives on the grid points and the micro part `g/M` on the cell
//! faces between them. Each step solves the micro equation with the stiff
//! relaxation and the collision operator implicit, and the `O(ε)` terms
//! (upwinded spatial transport and the velocity-derivative force) explicit. The
//! source `v ∂_x ρ - 2 v ρ ∂_x φ` is taken at the new time level, so the
//! macro update becomes a tridiagonal system for `ρⁿ⁺¹`. As `ε → 0` the step
//! reduces to the implicit flux-form drift-diffusion scheme of
//! [`solve_drift_diffusion`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{solve_tridiagonal, LuFactors};
use crate::problem::ProblemSpec;
use crate::spectral::{dot, ConstantKernel, HermiteBasis, ScatteringKernel};

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub dx: f64,
    pub nodes: Vec<f64>,
}

impl SpatialGrid {
    /// Uniform point grid including both end points.
    pub fn uniform(x_min: f64, x_max: f64, nx: usize) -> Result<Self> {
        if nx < 2 || !(x_max > x_min) {
            return Err(Error::invalid("spatial grid needs nx >= 2 and x_max > x_min"));
        }
        let dx = (x_max - x_min) / (nx - 1) as f64;
        let nodes = (0..nx).map(|i| x_min + dx * i as f64).collect();
        Ok(SpatialGrid {
            x_min,
            x_max,
            nx,
            dx,
            nodes,
        })
    }

    /// Grid with the requested spacing, rounded to a whole number of cells.
    pub fn with_spacing(x_min: f64, x_max: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0) {
            return Err(Error::invalid("grid spacing must be positive"));
        }
        let cells = libm::round((x_max - x_min) / dx) as usize;
        Self::uniform(x_min, x_max, cells.max(1) + 1)
    }

    /// Midpoints between consecutive nodes.
    pub fn faces(&self) -> Vec<f64> {
        self.nodes.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Density on the grid points and `g/M` on the `nx - 1` faces, at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticField {
    pub rho: Vec<f64>,
    /// Row-major `(nx - 1) x Nv`.
    pub g_over_m: Vec<f64>,
    pub time: f64,
}

impl KineticField {
    /// Global equilibrium `f = ρ M`.
    pub fn equilibrium(rho: Vec<f64>, num_nodes: usize) -> Self {
        let faces = rho.len().saturating_sub(1);
        KineticField {
            rho,
            g_over_m: vec![0.0; faces * num_nodes],
            time: 0.0,
        }
    }

    pub fn face(&self, f: usize, nv: usize) -> &[f64] {
        &self.g_over_m[f * nv..(f + 1) * nv]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonProblem {
    pub beta: f64,
    pub bias: f64,
    pub doping: Vec<f64>,
}

/// Solves `β φ'' = ρ - c` with `φ(x_min) = 0`, `φ(x_max) = V` by second-order
/// central differences.
pub fn solve_poisson(rho: &[f64], prob: &PoissonProblem, grid: &SpatialGrid) -> Result<Vec<f64>> {
    let nx = grid.nx;
    if nx < 3 {
        return Err(Error::invalid("poisson: need at least 3 grid points"));
    }
    if rho.len() != nx || prob.doping.len() != nx {
        return Err(Error::invalid("poisson: rho/doping length differs from grid"));
    }
    if !(prob.beta > 0.0) {
        return Err(Error::Domain("poisson: beta must be positive".into()));
    }
    let m = nx - 2;
    let h2 = grid.dx * grid.dx;
    let lower = vec![prob.beta; m];
    let diag = vec![-2.0 * prob.beta; m];
    let upper = vec![prob.beta; m];
    let mut rhs: Vec<f64> = (1..nx - 1).map(|i| h2 * (rho[i] - prob.doping[i])).collect();
    rhs[m - 1] -= prob.beta * prob.bias;
    let inner = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    let mut phi = Vec::with_capacity(nx);
    phi.push(0.0);
    phi.extend(inner);
    phi.push(prob.bias);
    Ok(phi)
}

/// Max-norm residual of the discrete Poisson system, boundary rows included.
pub fn poisson_residual(phi: &[f64], rho: &[f64], prob: &PoissonProblem, grid: &SpatialGrid) -> f64 {
    let nx = grid.nx;
    let h2 = grid.dx * grid.dx;
    let mut r = phi[0].abs().max((phi[nx - 1] - prob.bias).abs());
    for i in 1..nx - 1 {
        let lap = (phi[i + 1] - 2.0 * phi[i] + phi[i - 1]) / h2;
        r = r.max((prob.beta * lap - (rho[i] - prob.doping[i])).abs());
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletBc {
    pub left: f64,
    pub right: f64,
}

fn step_count(dt: f64, t_final: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) {
        return Err(Error::invalid("time step must be positive"));
    }
    if !(t_final >= 0.0) {
        return Err(Error::invalid("final time must be non-negative"));
    }
    let n = libm::ceil(t_final / dt - 1e-9).max(0.0) as usize;
    Ok(if n == 0 { (0, dt) } else { (n, t_final / n as f64) })
}

/// Bernoulli function `z / (e^z - 1)`.
pub fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        1.0 - 0.5 * z + z * z / 12.0
    } else {
        z / libm::expm1(z)
    }
}

/// Scharfetter–Gummel weights `(p, q)` of the face flux
/// `(∂_x ρ - 2 ρ ∂_x φ)_f ≈ p ρ_{f+1} + q ρ_f`, exact for `ρ ∝ e^{2φ}` with
/// `∂_x φ` constant across the cell.
pub fn face_weights(grad_phi_face: f64, dx: f64) -> (f64, f64) {
    let z = 2.0 * grad_phi_face * dx;
    (bernoulli(z) / dx, -bernoulli(-z) / dx)
}

/// One implicit Euler step of `∂_t ρ = ∂_x(T(∂_x ρ - 2 ρ ∂_x φ))` in flux
/// form with Scharfetter–Gummel face fluxes.
pub fn drift_diffusion_step(
    t_coeff: f64,
    grad_phi_faces: &[f64],
    grid: &SpatialGrid,
    dt: f64,
    rho: &[f64],
    bc: DirichletBc,
) -> Result<Vec<f64>> {
    let nx = grid.nx;
    let dx = grid.dx;
    let r = dt * t_coeff / dx;
    let m = nx - 2;
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for k in 0..m {
        let i = k + 1;
        let (pr, qr) = face_weights(grad_phi_faces[i], dx);
        let (pl, ql) = face_weights(grad_phi_faces[i - 1], dx);
        diag[k] = 1.0 - r * qr + r * pl;
        upper[k] = -r * pr;
        lower[k] = r * ql;
        rhs[k] = rho[i];
    }
    rhs[0] -= lower[0] * bc.left;
    rhs[m - 1] -= upper[m - 1] * bc.right;
    lower[0] = 0.0;
    upper[m - 1] = 0.0;
    let inner = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    let mut out = Vec::with_capacity(nx);
    out.push(bc.left);
    out.extend(inner);
    out.push(bc.right);
    Ok(out)
}

/// Face flux `T (∂_x ρ - 2 ρ ∂_x φ)` used by the drift-diffusion scheme.
pub fn drift_diffusion_flux(t_coeff: f64, grad_phi_faces: &[f64], grid: &SpatialGrid, rho: &[f64]) -> Vec<f64> {
    (0..grid.nx - 1)
        .map(|f| {
            let (p, q) = face_weights(grad_phi_faces[f], grid.dx);
            t_coeff * (p * rho[f + 1] + q * rho[f])
        })
        .collect()
}

/// Marches the drift-diffusion equation from `rho0` to `t_final`; returns the
/// density after every step, the initial state first.
pub fn solve_drift_diffusion<F>(
    t_coeff: f64,
    grad_phi: F,
    grid: &SpatialGrid,
    dt: f64,
    t_final: f64,
    rho0: &[f64],
    bc: DirichletBc,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64, f64) -> f64,
{
    if !(t_coeff > 0.0) {
        return Err(Error::invalid("drift-diffusion: T must be positive"));
    }
    if rho0.len() != grid.nx || grid.nx < 3 {
        return Err(Error::invalid("drift-diffusion: rho0 length differs from grid"));
    }
    let (steps, h) = step_count(dt, t_final)?;
    let faces = grid.faces();
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(rho0.to_vec());
    for n in 0..steps {
        let t_new = h * (n + 1) as f64;
        let gphi: Vec<f64> = faces.iter().map(|&x| grad_phi(t_new, x)).collect();
        let next = drift_diffusion_step(t_coeff, &gphi, grid, h, &traj[n], bc)?;
        traj.push(next);
    }
    Ok(traj)
}

/// `∂_x φ` sampled where the micro-macro scheme needs it.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSlice {
    /// At the `nx - 1` faces.
    pub faces: Vec<f64>,
    /// At the `nx` grid points (end points unused).
    pub nodes: Vec<f64>,
}

impl PotentialSlice {
    pub fn constant(grid: &SpatialGrid) -> Self {
        PotentialSlice {
            faces: vec![0.0; grid.nx - 1],
            nodes: vec![0.0; grid.nx],
        }
    }

    /// Analytic gradient sampled at faces and nodes.
    pub fn from_fn(grid: &SpatialGrid, grad: impl Fn(f64) -> f64) -> Self {
        PotentialSlice {
            faces: grid.faces().into_iter().map(&grad).collect(),
            nodes: grid.nodes.iter().map(|&x| grad(x)).collect(),
        }
    }

    /// Differences of a discrete potential: one-sided on faces, central on nodes.
    pub fn from_values(grid: &SpatialGrid, phi: &[f64]) -> Self {
        let nx = grid.nx;
        let dx = grid.dx;
        let faces = (0..nx - 1).map(|f| (phi[f + 1] - phi[f]) / dx).collect();
        let mut nodes = vec![0.0; nx];
        for i in 1..nx - 1 {
            nodes[i] = (phi[i + 1] - phi[i - 1]) / (2.0 * dx);
        }
        nodes[0] = (phi[1] - phi[0]) / dx;
        nodes[nx - 1] = (phi[nx - 1] - phi[nx - 2]) / dx;
        PotentialSlice { faces, nodes }
    }
}

/// Inflow data `F/M` at the velocity nodes on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticBoundary {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl KineticBoundary {
    /// Maxwellian inflow `F = density · M` on both sides.
    pub fn maxwellian(density: f64, num_nodes: usize) -> Self {
        KineticBoundary {
            left: vec![density; num_nodes],
            right: vec![density; num_nodes],
        }
    }
}

/// Precomputed velocity-space data for one scattering kernel.
#[derive(Debug, Clone)]
pub struct MicroMacroOperator<'a> {
    basis: &'a HermiteBasis,
    kernel: Vec<f64>,
    lambda: Vec<f64>,
    /// `(I - Π) K` with `K = D - 2 diag(v)` mapping ψ to `∂_v(ψM)/M`, row-major.
    force_projected: Vec<f64>,
    /// `c_j = Σ_i w_i K_ij`, so `⟨∂_v g⟩ = Σ_j c_j ψ_j`.
    force_moment: Vec<f64>,
    /// Spectral norm of `K`, `sqrt(2 (Nv - 1))` on the Hermite modes.
    force_norm: f64,
}

impl<'a> MicroMacroOperator<'a> {
    pub fn new<K: ScatteringKernel + ?Sized>(basis: &'a HermiteBasis, kernel: &K) -> Result<Self> {
        let n = basis.num_nodes();
        let lambda = basis.collision_frequency(kernel);
        if let Some(l) = lambda.iter().find(|l| !(**l > 0.0)) {
            return Err(Error::Domain(alloc::format!("collision frequency {l} is not positive")));
        }
        let v = basis.nodes();
        let mut force = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                force[i * n + j] = basis.deriv_entry(j, i) - if i == j { 2.0 * v[i] } else { 0.0 };
            }
        }
        let w = basis.weights_maxwellian();
        let force_moment: Vec<f64> = (0..n).map(|j| (0..n).map(|i| w[i] * force[i * n + j]).sum()).collect();
        let mut force_projected = force.clone();
        for i in 0..n {
            for j in 0..n {
                force_projected[i * n + j] -= force_moment[j];
            }
        }
        Ok(MicroMacroOperator {
            basis,
            kernel: basis.kernel_matrix(kernel),
            lambda,
            force_projected,
            force_moment,
            force_norm: libm::sqrt(2.0 * (n as f64 - 1.0)),
        })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Largest step for which the explicit transport and force terms stay
    /// stable, given the largest `|∂_x φ|` on the faces.
    pub fn stable_step(&self, eps: f64, dx: f64, max_field: f64) -> f64 {
        let vmax = self.basis.nodes().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lmin = self.lambda.iter().fold(f64::INFINITY, |m, &l| m.min(l));
        let excess = eps * (vmax / dx + max_field * self.force_norm) - 0.5 * lmin;
        if excess <= 0.0 {
            f64::INFINITY
        } else {
            eps * eps / excess
        }
    }
}

/// One step of the micro-macro scheme. See the module docs for the splitting.
pub fn step_micro_macro_ap(
    state: &KineticField,
    eps: f64,
    op: &MicroMacroOperator<'_>,
    potential: &PotentialSlice,
    boundary: &KineticBoundary,
    grid: &SpatialGrid,
    dt: f64,
) -> Result<KineticField> {
    if !(dt > 0.0) {
        return Err(Error::invalid("micro-macro step: dt must be positive"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("micro-macro step: eps must be positive"));
    }
    let basis = op.basis;
    let nv = basis.num_nodes();
    let nx = grid.nx;
    if nx < 3 || state.rho.len() != nx || state.g_over_m.len() != (nx - 1) * nv {
        return Err(Error::invalid("micro-macro step: state does not match grid/basis"));
    }
    let nf = nx - 1;
    let dx = grid.dx;
    let v = basis.nodes();
    let w = basis.weights_maxwellian();
    let relax = eps * eps / dt;

    let rho_left = basis.bracket_moment(&boundary.left)?;
    let rho_right = basis.bracket_moment(&boundary.right)?;
    let ghost_left: Vec<f64> = boundary.left.iter().map(|f| (f - rho_left) / eps).collect();
    let ghost_right: Vec<f64> = boundary.right.iter().map(|f| (f - rho_right) / eps).collect();

    let psi = &state.g_over_m;
    let at = |f: isize, j: usize| -> f64 {
        if f < 0 {
            ghost_left[j]
        } else if f as usize >= nf {
            ghost_right[j]
        } else {
            psi[f as usize * nv + j]
        }
    };

    // Per-face affine solution ψ_f = a_f - G_f b_f.
    let mut a = vec![0.0; nf * nv];
    let mut b = vec![0.0; nf * nv];
    let mut mat = vec![0.0; nv * nv];
    let mut transport = vec![0.0; nv];
    let mut rhs = vec![0.0; nv];
    for f in 0..nf {
        let fi = f as isize;
        for j in 0..nv {
            let d = if v[j] > 0.0 {
                at(fi, j) - at(fi - 1, j)
            } else {
                at(fi + 1, j) - at(fi, j)
            };
            transport[j] = v[j] * d / dx;
        }
        let mean = dot(&transport, w);
        let gphi = potential.faces[f];
        let old = &psi[f * nv..(f + 1) * nv];
        for i in 0..nv {
            for j in 0..nv {
                let mut m = -op.kernel[i * nv + j] * w[j];
                if i == j {
                    m += relax + op.lambda[i];
                }
                mat[i * nv + j] = m;
            }
            let force = dot(&op.force_projected[i * nv..(i + 1) * nv], old);
            rhs[i] = relax * old[i] - eps * (transport[i] - mean + gphi * force);
        }
        let lu = LuFactors::new(nv, mat.clone())?;
        a[f * nv..(f + 1) * nv].copy_from_slice(&lu.solve(&rhs));
        b[f * nv..(f + 1) * nv].copy_from_slice(&lu.solve(v));
    }

    let flux_moment = |x: &[f64]| -> f64 { (0..nv).map(|j| v[j] * w[j] * x[j]).sum() };
    let force_moment = |x: &[f64]| -> f64 { dot(&op.force_moment, x) };
    let ma: Vec<f64> = (0..nf).map(|f| flux_moment(&a[f * nv..(f + 1) * nv])).collect();
    let mb: Vec<f64> = (0..nf).map(|f| flux_moment(&b[f * nv..(f + 1) * nv])).collect();
    let la: Vec<f64> = (0..nf).map(|f| force_moment(&a[f * nv..(f + 1) * nv])).collect();
    let lb: Vec<f64> = (0..nf).map(|f| force_moment(&b[f * nv..(f + 1) * nv])).collect();

    // G_f = p_f ρ_{f+1} + q_f ρ_f
    let (p, q): (Vec<f64>, Vec<f64>) = potential.faces.iter().map(|&g| face_weights(g, dx)).unzip();

    let m = nx - 2;
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut r = vec![0.0; m];
    for k in 0..m {
        let i = k + 1;
        let half = 0.5 * dt * potential.nodes[i];
        let alpha = dt / dx * mb[i] + half * lb[i];
        let beta = dt / dx * mb[i - 1] - half * lb[i - 1];
        diag[k] = 1.0 - alpha * q[i] + beta * p[i - 1];
        upper[k] = -alpha * p[i];
        lower[k] = beta * q[i - 1];
        r[k] = state.rho[i] - dt / dx * (ma[i] - ma[i - 1]) - half * (la[i] + la[i - 1]);
    }
    r[0] -= lower[0] * rho_left;
    r[m - 1] -= upper[m - 1] * rho_right;
    lower[0] = 0.0;
    upper[m - 1] = 0.0;
    let inner = solve_tridiagonal(&lower, &diag, &upper, &r)?;
    let mut rho = Vec::with_capacity(nx);
    rho.push(rho_left);
    rho.extend(inner);
    rho.push(rho_right);

    let mut g_new = vec![0.0; nf * nv];
    for f in 0..nf {
        let gf = p[f] * rho[f + 1] + q[f] * rho[f];
        let row = &mut g_new[f * nv..(f + 1) * nv];
        for j in 0..nv {
            row[j] = a[f * nv + j] - gf * b[f * nv + j];
        }
        let mean = dot(row, w);
        row.iter_mut().for_each(|x| *x -= mean);
    }
    if rho.iter().chain(g_new.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure("micro-macro step produced non-finite values".into()));
    }
    Ok(KineticField {
        rho,
        g_over_m: g_new,
        time: state.time + dt,
    })
}

/// Trajectory of a reference run; index 0 is the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub grid: SpatialGrid,
    pub velocity_nodes: Vec<f64>,
    pub times: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    /// `g/M` on the faces, row-major `(nx - 1) x Nv` per time.
    pub g_over_m: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    /// Largest number of micro-macro sub-steps taken in one recorded step.
    pub substeps: usize,
}

impl ReferenceSolution {
    pub fn final_rho(&self) -> &[f64] {
        self.rho.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn final_phi(&self) -> &[f64] {
        self.phi.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Runs the micro-macro scheme for a benchmark problem.
///
/// Problem II re-solves Poisson from the current density before every step.
/// When `dt` exceeds the stability bound of the explicit terms (only for
/// moderate and large `ε`) each step is split into equal sub-steps, their
/// count chosen from the field at the start of the step.
pub fn run_reference(
    problem: &ProblemSpec,
    eps: f64,
    grid: &SpatialGrid,
    basis: &HermiteBasis,
    dt: f64,
    t_final: f64,
) -> Result<ReferenceSolution> {
    if !(eps > 0.0) {
        return Err(Error::invalid("reference: eps must be positive"));
    }
    let (steps, h) = step_count(dt, t_final)?;
    let nv = basis.num_nodes();
    let op = MicroMacroOperator::new(basis, &ConstantKernel(problem.sigma))?;
    let substeps_for = |slice: &PotentialSlice| -> usize {
        let field = slice.faces.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let bound = 0.9 * op.stable_step(eps, grid.dx, field);
        if h <= bound {
            1
        } else {
            libm::ceil(h / bound) as usize
        }
    };
    let boundary = KineticBoundary::maxwellian(problem.inflow_density, nv);
    let poisson = problem.poisson_problem(&grid.nodes);

    let mut state = KineticField::equilibrium(vec![problem.initial_density; grid.nx], nv);
    let given = PotentialSlice::from_fn(grid, |x| problem.potential_gradient(x));
    let given_phi: Vec<f64> = grid.nodes.iter().map(|&x| problem.potential(x)).collect();

    let mut sol = ReferenceSolution {
        grid: grid.clone(),
        velocity_nodes: basis.nodes().to_vec(),
        times: vec![0.0],
        rho: vec![state.rho.clone()],
        g_over_m: vec![state.g_over_m.clone()],
        phi: Vec::new(),
        substeps: 1,
    };
    let potential_now = |rho: &[f64]| -> Result<(Vec<f64>, PotentialSlice)> {
        if problem.is_self_consistent() {
            let phi = solve_poisson(rho, &poisson, grid)?;
            let slice = PotentialSlice::from_values(grid, &phi);
            Ok((phi, slice))
        } else {
            Ok((given_phi.clone(), given.clone()))
        }
    };
    let (phi0, mut slice) = potential_now(&state.rho)?;
    sol.phi.push(phi0);
    for n in 0..steps {
        let substeps = substeps_for(&slice);
        sol.substeps = sol.substeps.max(substeps);
        let hs = h / substeps as f64;
        for _ in 0..substeps {
            state = step_micro_macro_ap(&state, eps, &op, &slice, &boundary, grid, hs)?;
        }
        state.time = h * (n + 1) as f64;
        let (phi, next_slice) = potential_now(&state.rho)?;
        slice = next_slice;
        sol.times.push(state.time);
        sol.rho.push(state.rho.clone());
        sol.g_over_m.push(state.g_over_m.clone());
        sol.phi.push(phi);
    }
    Ok(sol)
}

/// Drift-diffusion counterpart of [`run_reference`] on the same grid; the
/// coupled case re-solves Poisson from the lagged density.
pub fn run_drift_diffusion(
    problem: &ProblemSpec,
    grid: &SpatialGrid,
    basis: &HermiteBasis,
    dt: f64,
    t_final: f64,
) -> Result<ReferenceSolution> {
    let t_coeff = basis.diffusion_coefficient(&ConstantKernel(problem.sigma))?;
    let (steps, h) = step_count(dt, t_final)?;
    let bc = DirichletBc {
        left: problem.inflow_density,
        right: problem.inflow_density,
    };
    let poisson = problem.poisson_problem(&grid.nodes);
    let faces = grid.faces();
    let mut rho = vec![problem.initial_density; grid.nx];
    let mut sol = ReferenceSolution {
        grid: grid.clone(),
        velocity_nodes: basis.nodes().to_vec(),
        times: vec![0.0],
        rho: vec![rho.clone()],
        g_over_m: Vec::new(),
        phi: Vec::new(),
        substeps: 1,
    };
    for n in 0..=steps {
        let (phi, gphi) = if problem.is_self_consistent() {
            let phi = solve_poisson(&rho, &poisson, grid)?;
            let g = PotentialSlice::from_values(grid, &phi).faces;
            (phi, g)
        } else {
            (
                grid.nodes.iter().map(|&x| problem.potential(x)).collect(),
                faces.iter().map(|&x| problem.potential_gradient(x)).collect(),
            )
        };
        sol.phi.push(phi);
        if n == steps {
            break;
        }
        rho = drift_diffusion_step(t_coeff, &gphi, grid, h, &rho, bc)?;
        sol.times.push(h * (n + 1) as f64);
        sol.rho.push(rho.clone());
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid01(nx: usize) -> SpatialGrid {
        SpatialGrid::uniform(0.0, 1.0, nx).unwrap()
    }

    #[test]
    fn poisson_linear_when_neutral() {
        let g = grid01(101);
        let prob = PoissonProblem {
            beta: 0.002,
            bias: 5.0,
            doping: vec![1.0; 101],
        };
        let phi = solve_poisson(&vec![1.0; 101], &prob, &g).unwrap();
        for (x, p) in g.nodes.iter().zip(&phi) {
            assert!((p - 5.0 * x).abs() < 1e-12);
        }
        assert_eq!(phi[100], 5.0);
        assert!(poisson_residual(&phi, &vec![1.0; 101], &prob, &g) <= 1e-12);
    }

    #[test]
    fn poisson_manufactured_quadratic() {
        let g = grid01(51);
        let beta = 0.3;
        let prob = PoissonProblem {
            beta,
            bias: 0.0,
            doping: vec![0.0; 51],
        };
        let rho = vec![2.0 * beta; 51];
        let phi = solve_poisson(&rho, &prob, &g).unwrap();
        for (x, p) in g.nodes.iter().zip(&phi) {
            assert!((p - x * (x - 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn poisson_rejects_tiny_grid() {
        let g = grid01(2);
        let prob = PoissonProblem {
            beta: 1.0,
            bias: 0.0,
            doping: vec![0.0; 2],
        };
        assert!(matches!(
            solve_poisson(&[0.0, 0.0], &prob, &g),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn drift_diffusion_constant_state() {
        let g = grid01(41);
        let traj = solve_drift_diffusion(
            0.25,
            |_, _| 0.0,
            &g,
            0.005,
            0.1,
            &vec![1.0; 41],
            DirichletBc { left: 1.0, right: 1.0 },
        )
        .unwrap();
        assert_eq!(traj.len(), 21);
        for rho in traj {
            assert!(rho.iter().all(|r| (r - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn equilibrium_is_steady() {
        let g = grid01(21);
        let basis = HermiteBasis::with_nodes(8).unwrap();
        let op = MicroMacroOperator::new(&basis, &ConstantKernel(2.0)).unwrap();
        let state = KineticField::equilibrium(vec![1.0; 21], 8);
        let next = step_micro_macro_ap(
            &state,
            1.0,
            &op,
            &PotentialSlice::constant(&g),
            &KineticBoundary::maxwellian(1.0, 8),
            &g,
            0.001,
        )
        .unwrap();
        assert!(next.rho.iter().all(|r| (r - 1.0).abs() < 1e-12));
        assert!(next.g_over_m.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn step_rejects_bad_dt() {
        let g = grid01(11);
        let basis = HermiteBasis::with_nodes(4).unwrap();
        let op = MicroMacroOperator::new(&basis, &ConstantKernel(2.0)).unwrap();
        let state = KineticField::equilibrium(vec![1.0; 11], 4);
        let r = step_micro_macro_ap(
            &state,
            1.0,
            &op,
            &PotentialSlice::constant(&g),
            &KineticBoundary::maxwellian(1.0, 4),
            &g,
            0.0,
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn nonpositive_kernel_is_domain_error() {
        let basis = HermiteBasis::with_nodes(4).unwrap();
        assert!(matches!(
            MicroMacroOperator::new(&basis, &ConstantKernel(-1.0)),
            Err(Error::Domain(_))
        ));
    }
}
