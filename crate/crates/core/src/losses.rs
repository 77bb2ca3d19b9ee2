//! Physics-informed empirical losses.
//!
//! Every loss is assembled on a [`Tape`], so the same code yields the value
//! and, on request, the exact gradient with respect to all trainable network
//! parameters and the scattering parameter `s` (`σ = softplus(s)`).
//!
//! Units: kinetic residuals are expressed for `f` and `g` themselves, i.e. the
//! `g/M` form is multiplied back by `M(v_j)` before squaring. Velocity
//! integrals use the Maxwellian-weighted quadrature, spatial/temporal sums are
//! means over the collocation sets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bundle::{Method, NetSlot, NetworkBundle};
use crate::collocation::{CollocationSet, ObservationSet, PenaltyWeights};
use crate::error::{Error, Result};
use crate::net::JetSpec;
use crate::problem::ProblemSpec;
use crate::spectral::{ConstantKernel, HermiteBasis};
use crate::tape::{Gradients, Tape, Var};

/// Pre-training loss for the diffusion surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiffusionVariant {
    /// Residual of the drift-diffusion equation for `ρ_diff` alone.
    V1,
    /// Residuals of the limiting macro/micro system for `ρ_diff` and `g`.
    V2,
}

impl DiffusionVariant {
    pub fn name(self) -> &'static str {
        match self {
            DiffusionVariant::V1 => "v1",
            DiffusionVariant::V2 => "v2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "v1" => Some(DiffusionVariant::V1),
            "v2" => Some(DiffusionVariant::V2),
            _ => None,
        }
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub macro_residual: f64,
    pub micro_residual: f64,
    pub bc: f64,
    pub ic: f64,
    pub diffusion: f64,
    pub data_rho: f64,
    pub data_phi: f64,
    pub poisson: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,macro,micro,bc,ic,diffusion,data_rho,data_phi,poisson,total";

    pub fn terms(&self) -> [f64; 8] {
        [
            self.macro_residual,
            self.micro_residual,
            self.bc,
            self.ic,
            self.diffusion,
            self.data_rho,
            self.data_phi,
            self.poisson,
        ]
    }

    pub fn sum_of_terms(&self) -> f64 {
        self.terms().iter().sum()
    }

    /// One CSV row; floats use the shortest representation that round-trips.
    pub fn csv_row(&self, epoch: usize) -> String {
        let mut s = format!("{epoch}");
        for x in self.terms().iter().chain(core::iter::once(&self.total)) {
            s.push_str(&format!(",{x:e}"));
        }
        s
    }
}

/// The physics residual driving a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Residual {
    /// No kinetic residual (diffusion pre-training).
    None,
    Pinn,
    Apnn,
    /// APNN residual with `ρ` from the bi-fidelity composition.
    BiApnn,
}

/// Which terms a loss evaluation assembles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub residual: Residual,
    pub eps: f64,
    pub diffusion: Option<DiffusionVariant>,
    pub data: bool,
    pub poisson: bool,
}

impl Objective {
    /// Forward training loss of `method`; the Poisson residual is added for
    /// the self-consistent problem.
    pub fn forward(method: Method, eps: f64, self_consistent: bool) -> Self {
        Objective {
            residual: residual_of(method),
            eps,
            diffusion: None,
            data: false,
            poisson: self_consistent,
        }
    }

    /// Stage-one loss for `ρ_diff` (and `g`, `φ` where they enter).
    pub fn pretrain(variant: DiffusionVariant, self_consistent: bool) -> Self {
        Objective {
            residual: Residual::None,
            eps: 0.0,
            diffusion: Some(variant),
            data: false,
            poisson: self_consistent,
        }
    }

    /// Joint inverse loss: residual + diffusion (v1) + data (+ Poisson).
    pub fn inverse(method: Method, eps: f64, poisson: bool) -> Self {
        Objective {
            residual: residual_of(method),
            eps,
            diffusion: Some(DiffusionVariant::V1),
            data: true,
            poisson,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid("eps must be finite and non-negative"));
        }
        if self.residual == Residual::Pinn && self.eps == 0.0 {
            return Err(Error::invalid("the PINN residual is undefined at eps = 0"));
        }
        if self.residual == Residual::None && self.diffusion.is_none() && !self.data && !self.poisson {
            return Err(Error::invalid("objective has no terms"));
        }
        Ok(())
    }
}

fn residual_of(method: Method) -> Residual {
    match method {
        Method::Pinn => Residual::Pinn,
        Method::Apnn => Residual::Apnn,
        Method::BiExplicit | Method::BiImplicit => Residual::BiApnn,
    }
}

/// Velocity-space matrices at unit scattering strength.
#[derive(Debug, Clone)]
pub struct VelocityOps {
    pub nodes: Vec<f64>,
    pub w: Vec<f64>,
    pub w_gh: Vec<f64>,
    pub m: Vec<f64>,
    /// `∂_v(ψM)/M = Σ_j K_ij ψ_j`.
    pub force: Vec<f64>,
    /// `⟨∂_v(ψM)⟩ = Σ_j c_j ψ_j`.
    pub force_moment: Vec<f64>,
    /// `Q(ψM)/M = σ Σ_j A_ij ψ_j` for `σ(v, w) ≡ σ`.
    pub collision: Vec<f64>,
    /// `T = t_unit / σ`.
    pub t_unit: f64,
}

impl VelocityOps {
    pub fn new(basis: &HermiteBasis) -> Result<Self> {
        let n = basis.num_nodes();
        let v = basis.nodes();
        let w = basis.weights_maxwellian();
        let unit = ConstantKernel(1.0);
        let s = basis.kernel_matrix(&unit);
        let lambda = basis.collision_frequency(&unit);
        let mut force = vec![0.0; n * n];
        let mut collision = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                force[i * n + j] = basis.deriv_entry(j, i) - if i == j { 2.0 * v[i] } else { 0.0 };
                collision[i * n + j] = s[i * n + j] * w[j] - if i == j { lambda[i] } else { 0.0 };
            }
        }
        let force_moment = (0..n).map(|j| (0..n).map(|i| w[i] * force[i * n + j]).sum()).collect();
        Ok(VelocityOps {
            nodes: v.to_vec(),
            w: w.to_vec(),
            w_gh: basis.weights_gh().to_vec(),
            m: basis.maxwellian_at_nodes().to_vec(),
            force,
            force_moment,
            collision,
            t_unit: basis.diffusion_coefficient(&unit)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Static data shared by every loss evaluation of one experiment.
#[derive(Debug, Clone)]
pub struct LossContext<'a> {
    pub problem: &'a ProblemSpec,
    pub colloc: &'a CollocationSet,
    pub weights: PenaltyWeights,
    pub obs: Option<&'a ObservationSet>,
    pub ops: VelocityOps,
    doping: Vec<f64>,
}

impl<'a> LossContext<'a> {
    pub fn new(
        problem: &'a ProblemSpec,
        basis: &HermiteBasis,
        colloc: &'a CollocationSet,
        weights: PenaltyWeights,
        obs: Option<&'a ObservationSet>,
    ) -> Result<Self> {
        weights.validate()?;
        if colloc.velocity_nodes != basis.nodes() {
            return Err(Error::invalid("collocation set was built for a different velocity basis"));
        }
        let doping = colloc.interior_tx.chunks_exact(2).map(|p| problem.doping(p[1])).collect();
        Ok(LossContext {
            problem,
            colloc,
            weights,
            obs,
            ops: VelocityOps::new(basis)?,
            doping,
        })
    }
}

/// Parameter gradient of a loss: one block per trainable network and the
/// derivative with respect to the raw scattering parameter `s`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BundleGradient {
    pub nets: [Option<Vec<f64>>; 5],
    pub sigma: Option<f64>,
}

impl BundleGradient {
    pub fn net(&self, slot: NetSlot) -> Option<&[f64]> {
        self.nets[slot.index()].as_deref()
    }

    /// Largest absolute entry, for diagnostics.
    pub fn max_abs(&self) -> f64 {
        self.nets
            .iter()
            .flatten()
            .flatten()
            .chain(self.sigma.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.nets.iter().flatten().flatten().chain(self.sigma.iter()).all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub gradient: Option<BundleGradient>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RhoSource {
    /// The density of the bundle's method.
    Method,
    /// `ρ_diff` alone.
    Diff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Order {
    Value,
    First,
    Second,
}

#[derive(Debug, Default)]
struct Field {
    v: Vec<Var>,
    t: Vec<Var>,
    x: Vec<Var>,
    xx: Vec<Var>,
}

#[derive(Debug, Default)]
struct MicroField {
    psi: Vec<Var>,
    t: Vec<Var>,
    x: Vec<Var>,
    dv: Vec<Var>,
}

struct Assembler<'c, 'a> {
    tape: Tape,
    ctx: &'c LossContext<'a>,
    bundle: &'c NetworkBundle,
    sigma: Var,
    sigma_leaf: Option<Var>,
    /// `ε` of the explicit bi-fidelity composition.
    eps_for_rho: f64,
}

fn jet_spec(order: Order, dirs: &[usize], second: usize) -> JetSpec {
    match order {
        Order::Value => JetSpec::value_only(),
        Order::First => JetSpec::first(dirs),
        Order::Second => JetSpec::with_second(dirs, second),
    }
}

impl<'c, 'a> Assembler<'c, 'a> {
    fn new(ctx: &'c LossContext<'a>, bundle: &'c NetworkBundle, record: bool) -> Self {
        let mut tape = if record { Tape::new() } else { Tape::evaluation_only() };
        let (sigma, sigma_leaf) = match bundle.sigma_param() {
            Some(s) => {
                let leaf = tape.leaf(s);
                (tape.softplus(leaf), Some(leaf))
            }
            None => (tape.constant(ctx.problem.sigma), None),
        };
        Assembler {
            tape,
            ctx,
            bundle,
            sigma,
            sigma_leaf,
            eps_for_rho: 0.0,
        }
    }

    fn nv(&self) -> usize {
        self.ctx.ops.num_nodes()
    }

    fn net_field(&mut self, slot: NetSlot, pts: &[f64], order: Order) -> Result<Field> {
        let net = self.bundle.require(slot)?;
        let nv = self.tape.network(slot.index(), net, pts, &jet_spec(order, &[0, 1], 1))?;
        let n = nv.batch;
        let mut f = Field {
            v: (0..n).map(|b| nv.value(b, 0)).collect(),
            ..Default::default()
        };
        if order >= Order::First {
            f.t = (0..n).map(|b| nv.d(0, b, 0)).collect();
            f.x = (0..n).map(|b| nv.d(1, b, 0)).collect();
        }
        if order == Order::Second {
            f.xx = (0..n).map(|b| nv.dd(b, 0)).collect();
        }
        Ok(f)
    }

    fn rho(&mut self, source: RhoSource, pts: &[f64], order: Order) -> Result<Field> {
        let method = self.bundle.method;
        if source == RhoSource::Diff {
            return self.net_field(NetSlot::RhoDiff, pts, order);
        }
        if !method.is_bi_fidelity() {
            return self.net_field(NetSlot::RhoApnn, pts, order);
        }
        let diff = self.net_field(NetSlot::RhoDiff, pts, order)?;
        let corr = self.net_field(NetSlot::RhoCorr, pts, order)?;
        let c = method.correction_scale(self.eps_for_rho);
        let mut combine = |a: &[Var], b: &[Var]| -> Vec<Var> {
            a.iter().zip(b).map(|(&a, &b)| self.tape.lin_comb(&[(a, 1.0), (b, c)])).collect()
        };
        Ok(Field {
            v: combine(&diff.v, &corr.v),
            t: combine(&diff.t, &corr.t),
            x: combine(&diff.x, &corr.x),
            xx: combine(&diff.xx, &corr.xx),
        })
    }

    /// Projected micro part `ψ = ψ̃ - ⟨ψ̃ M⟩` on kinetic inputs.
    fn micro(&mut self, txv: &[f64], order: Order, with_dv: bool) -> Result<MicroField> {
        let net = self.bundle.require(NetSlot::G)?;
        let order = order.min(Order::First);
        let out = self.tape.network(NetSlot::G.index(), net, txv, &jet_spec(order, &[0, 1], 0))?;
        let nv = self.nv();
        let npts = out.batch / nv;
        let w = self.ctx.ops.w.clone();
        let project = |raw: &dyn Fn(usize) -> Var, tape: &mut Tape| -> Vec<Var> {
            let mut res = Vec::with_capacity(npts * nv);
            for p in 0..npts {
                for j in 0..nv {
                    let terms: Vec<(Var, f64)> = (0..nv)
                        .map(|i| (raw(p * nv + i), if i == j { 1.0 - w[i] } else { -w[i] }))
                        .collect();
                    res.push(tape.lin_comb(&terms));
                }
            }
            res
        };
        let mut f = MicroField {
            psi: project(&|b| out.value(b, 0), &mut self.tape),
            ..Default::default()
        };
        if order == Order::First {
            f.t = project(&|b| out.d(0, b, 0), &mut self.tape);
            f.x = project(&|b| out.d(1, b, 0), &mut self.tape);
        }
        if with_dv {
            let k = &self.ctx.ops.force;
            for p in 0..npts {
                for i in 0..nv {
                    let terms: Vec<(Var, f64)> = (0..nv).map(|j| (f.psi[p * nv + j], k[i * nv + j])).collect();
                    let d = self.tape.lin_comb(&terms);
                    f.dv.push(d);
                }
            }
        }
        Ok(f)
    }

    /// `(∂_x φ, ∂_xx φ)` at interior points; `∂_xx` only when requested.
    fn potential(&mut self, pts: &[f64], second: bool) -> Result<(Vec<Var>, Vec<Var>)> {
        let problem = self.ctx.problem;
        if !problem.is_self_consistent() {
            let mut dx = Vec::with_capacity(pts.len() / 2);
            let mut dxx = Vec::new();
            for p in pts.chunks_exact(2) {
                dx.push(self.tape.constant(problem.potential_gradient(p[1])));
                if second {
                    dxx.push(self.tape.constant(problem.potential_laplacian(p[1])));
                }
            }
            return Ok((dx, dxx));
        }
        let net = self.bundle.net(NetSlot::Phi).ok_or_else(|| {
            Error::Configuration("the self-consistent problem needs the `phi` network".into())
        })?;
        let spec = if second { JetSpec::with_second(&[1], 0) } else { JetSpec::first(&[1]) };
        let out = self.tape.network(NetSlot::Phi.index(), net, pts, &spec)?;
        let dx = (0..out.batch).map(|b| out.d(0, b, 0)).collect();
        let dxx = if second { (0..out.batch).map(|b| out.dd(b, 0)).collect() } else { Vec::new() };
        Ok((dx, dxx))
    }

    fn phi_values(&mut self, pts: &[f64]) -> Result<Vec<Var>> {
        let net = self.bundle.net(NetSlot::Phi).ok_or_else(|| {
            Error::Configuration("the potential terms need the `phi` network".into())
        })?;
        let out = self.tape.network(NetSlot::Phi.index(), net, pts, &JetSpec::value_only())?;
        Ok((0..out.batch).map(|b| out.value(b, 0)).collect())
    }

    fn mean_square(&mut self, residuals: &[Var]) -> Var {
        let sq: Vec<Var> = residuals.iter().map(|&r| self.tape.square(r)).collect();
        self.tape.mean(&sq)
    }

    /// Residuals of the micro-macro system; `eps = 0` is allowed.
    fn apnn_residuals(&mut self, rho: &Field, g: &MicroField, dphi: &[Var], eps: f64) -> (Vec<Var>, Vec<Var>) {
        let nv = self.nv();
        let ops = self.ctx.ops.clone();
        let npts = rho.v.len();
        let mut macro_r = Vec::with_capacity(npts);
        let mut micro_r = Vec::with_capacity(npts * nv);
        for p in 0..npts {
            let row = p * nv..(p + 1) * nv;
            let flux_terms: Vec<(Var, f64)> = row.clone().map(|k| (g.x[k], ops.w[k - p * nv] * ops.nodes[k - p * nv])).collect();
            let flux = self.tape.lin_comb(&flux_terms);
            let fm_terms: Vec<(Var, f64)> = row.clone().map(|k| (g.psi[k], ops.force_moment[k - p * nv])).collect();
            let fm = self.tape.lin_comb(&fm_terms);
            let force = self.tape.mul(dphi[p], fm);
            macro_r.push(self.tape.lin_comb(&[(rho.t[p], 1.0), (flux, 1.0), (force, 1.0)]));

            let drift = self.tape.mul(dphi[p], rho.v[p]);
            for i in 0..nv {
                let k = p * nv + i;
                let coll = self.collision(&g.psi[row.clone()], i);
                let dvc = self.tape.sub(g.dv[k], fm);
                let fdv = self.tape.mul(dphi[p], dvc);
                let (v, m) = (ops.nodes[i], ops.m[i]);
                micro_r.push(self.tape.lin_comb(&[
                    (g.t[k], eps * eps * m),
                    (g.x[k], eps * v * m),
                    (fdv, eps * m),
                    (flux, -eps * m),
                    (rho.x[p], v * m),
                    (drift, -2.0 * v * m),
                    (coll, -m),
                ]));
            }
        }
        (macro_r, micro_r)
    }

    /// `Q(g)/M` at node `i` from the `ψ` values of one point.
    fn collision(&mut self, psi: &[Var], i: usize) -> Var {
        let nv = psi.len();
        let terms: Vec<(Var, f64)> = (0..nv).map(|j| (psi[j], self.ctx.ops.collision[i * nv + j])).collect();
        let shape = self.tape.lin_comb(&terms);
        self.tape.mul(self.sigma, shape)
    }

    /// Residuals of the limiting system, written out directly:
    /// `∂_t ρ + ∂_x⟨v g⟩ + ∂_x φ ⟨∂_v g⟩` and `v ∂_x ρ M - 2 v ∂_x φ ρ M - Q(g)`.
    fn limit_residuals(&mut self, rho: &Field, g: &MicroField, dphi: &[Var]) -> (Vec<Var>, Vec<Var>) {
        let nv = self.nv();
        let ops = self.ctx.ops.clone();
        let npts = rho.v.len();
        let mut macro_r = Vec::with_capacity(npts);
        let mut micro_r = Vec::with_capacity(npts * nv);
        for p in 0..npts {
            let psi = &g.psi[p * nv..(p + 1) * nv];
            let mut terms = vec![(rho.t[p], 1.0)];
            for j in 0..nv {
                terms.push((g.x[p * nv + j], ops.nodes[j] * ops.w[j]));
            }
            let lhs = self.tape.lin_comb(&terms);
            let dv_terms: Vec<(Var, f64)> = (0..nv).map(|i| (g.dv[p * nv + i], ops.w[i])).collect();
            let dv_mean = self.tape.lin_comb(&dv_terms);
            let force = self.tape.mul(dphi[p], dv_mean);
            macro_r.push(self.tape.add(lhs, force));
            let grad_part = self.tape.mul(dphi[p], rho.v[p]);
            for i in 0..nv {
                let (v, m) = (ops.nodes[i], ops.m[i]);
                let q = self.collision(psi, i);
                micro_r.push(self.tape.lin_comb(&[(rho.x[p], v * m), (grad_part, -2.0 * v * m), (q, -m)]));
            }
        }
        (macro_r, micro_r)
    }

    fn pinn_residuals(&mut self, rho: &Field, g: &MicroField, dphi: &[Var], eps: f64) -> Vec<Var> {
        let nv = self.nv();
        let ops = self.ctx.ops.clone();
        let npts = rho.v.len();
        let mut out = Vec::with_capacity(npts * nv);
        for p in 0..npts {
            let row = p * nv..(p + 1) * nv;
            let drift = self.tape.mul(dphi[p], rho.v[p]);
            for i in 0..nv {
                let k = p * nv + i;
                // Q(ρM) vanishes identically, so Q(f)/ε = Q(g).
                let coll = self.collision(&g.psi[row.clone()], i);
                let fdv = self.tape.mul(dphi[p], g.dv[k]);
                let (v, m) = (ops.nodes[i], ops.m[i]);
                out.push(self.tape.lin_comb(&[
                    (rho.t[p], eps * m),
                    (g.t[k], eps * eps * m),
                    (rho.x[p], v * m),
                    (g.x[k], eps * v * m),
                    (drift, -2.0 * v * m),
                    (fdv, eps * m),
                    (coll, -m),
                ]));
            }
        }
        out
    }

    /// Weighted inflow and initial penalties for `f = ρM + εg`.
    fn boundary_terms(&mut self, source: RhoSource, eps: f64, lambda1: f64, lambda2: f64) -> Result<(Var, Var)> {
        let colloc = self.ctx.colloc;
        let ops = self.ctx.ops.clone();
        let nv = self.nv();
        let problem = self.ctx.problem;

        let rho_b = self.rho(source, &colloc.boundary_tx, Order::Value)?;
        let psi_b = if eps != 0.0 {
            Some(self.micro(&colloc.boundary_txv, Order::Value, false)?)
        } else {
            None
        };
        let wsum: f64 = colloc.inflow.iter().map(|&(_, j)| ops.w_gh[j]).sum();
        let mut terms = Vec::with_capacity(colloc.inflow.len());
        for &(p, j) in &colloc.inflow {
            let m = ops.m[j];
            let mut lin = vec![(rho_b.v[p], m)];
            if let Some(psi) = &psi_b {
                lin.push((psi.psi[p * nv + j], eps * m));
            }
            let r = self.tape.lin_comb(&lin);
            let r = self.tape.add_const(r, -m * problem.inflow_density);
            let sq = self.tape.square(r);
            terms.push((sq, lambda1 * ops.w_gh[j] / wsum));
        }
        let bc = self.tape.lin_comb(&terms);

        let rho_i = self.rho(source, &colloc.initial_tx, Order::Value)?;
        let psi_i = if eps != 0.0 {
            Some(self.micro(&colloc.initial_txv, Order::Value, false)?)
        } else {
            None
        };
        let mut sq = Vec::with_capacity(rho_i.v.len() * nv);
        for p in 0..rho_i.v.len() {
            for j in 0..nv {
                let m = ops.m[j];
                let mut lin = vec![(rho_i.v[p], m)];
                if let Some(psi) = &psi_i {
                    lin.push((psi.psi[p * nv + j], eps * m));
                }
                let r = self.tape.lin_comb(&lin);
                let r = self.tape.add_const(r, -m * problem.initial_density);
                sq.push(self.tape.square(r));
            }
        }
        let ic = self.tape.mean(&sq);
        let ic = self.tape.scale(ic, lambda2);
        Ok((bc, ic))
    }

    fn diffusion_v1(&mut self, pts: &[f64]) -> Result<Var> {
        let rho = self.rho(RhoSource::Diff, pts, Order::Second)?;
        let (dphi, ddphi) = self.potential(pts, true)?;
        let inv = self.tape.recip(self.sigma);
        let t_coeff = self.tape.scale(inv, self.ctx.ops.t_unit);
        let mut r = Vec::with_capacity(rho.v.len());
        for p in 0..rho.v.len() {
            let a = self.tape.mul(rho.x[p], dphi[p]);
            let b = self.tape.mul(rho.v[p], ddphi[p]);
            let inner = self.tape.lin_comb(&[(rho.xx[p], 1.0), (a, -2.0), (b, -2.0)]);
            let rhs = self.tape.mul(t_coeff, inner);
            r.push(self.tape.sub(rho.t[p], rhs));
        }
        Ok(self.mean_square(&r))
    }

    fn diffusion_v2(&mut self, pts: &[f64], txv: &[f64]) -> Result<Var> {
        let rho = self.rho(RhoSource::Diff, pts, Order::First)?;
        let g = self.micro(txv, Order::First, true)?;
        let (dphi, _) = self.potential(pts, false)?;
        let (mr, ur) = self.limit_residuals(&rho, &g, &dphi);
        let a = self.mean_square(&mr);
        let b = self.mean_square(&ur);
        Ok(self.tape.add(a, b))
    }

    fn poisson(&mut self, source: RhoSource) -> Result<Var> {
        let colloc = self.ctx.colloc;
        let problem = self.ctx.problem;
        let rho = self.rho(source, &colloc.interior_tx, Order::Value)?;
        let (_, ddphi) = {
            let net = self.bundle.net(NetSlot::Phi).ok_or_else(|| {
                Error::Configuration("the Poisson residual needs the `phi` network".into())
            })?;
            let out = self
                .tape
                .network(NetSlot::Phi.index(), net, &colloc.interior_tx, &JetSpec::with_second(&[1], 0))?;
            let dx: Vec<Var> = (0..out.batch).map(|b| out.d(0, b, 0)).collect();
            let dxx: Vec<Var> = (0..out.batch).map(|b| out.dd(b, 0)).collect();
            (dx, dxx)
        };
        let mut r = Vec::with_capacity(rho.v.len());
        for p in 0..rho.v.len() {
            let lin = self.tape.lin_comb(&[(ddphi[p], problem.beta), (rho.v[p], -1.0)]);
            r.push(self.tape.add_const(lin, self.ctx.doping[p]));
        }
        let interior = self.mean_square(&r);

        let pts: Vec<f64> = colloc
            .times
            .iter()
            .flat_map(|&t| [t, colloc.x_min, t, colloc.x_max])
            .collect();
        let phi = self.phi_values(&pts)?;
        let mut sq = Vec::with_capacity(phi.len());
        for pair in phi.chunks_exact(2) {
            sq.push(self.tape.square(pair[0]));
            let right = self.tape.add_const(pair[1], -problem.bias);
            sq.push(self.tape.square(right));
        }
        let boundary = self.tape.lin_comb(&sq.iter().map(|&s| (s, 1.0 / colloc.times.len() as f64)).collect::<Vec<_>>());
        let total = self.tape.add(interior, boundary);
        Ok(self.tape.scale(total, self.ctx.weights.w_poisson))
    }

    fn data(&mut self, source: RhoSource) -> Result<(Option<Var>, Option<Var>)> {
        let obs = self
            .ctx
            .obs
            .ok_or_else(|| Error::invalid("data loss needs observations"))?;
        if obs.rho_obs.is_empty() {
            return Err(Error::invalid("data loss needs at least one density observation"));
        }
        let rho = self.rho(source, &obs.rho_points(), Order::Value)?;
        let r: Vec<Var> = rho
            .v
            .iter()
            .zip(&obs.rho_obs)
            .map(|(&v, &(_, _, o))| self.tape.add_const(v, -o))
            .collect();
        let d_rho = self.mean_square(&r);
        let d_rho = self.tape.scale(d_rho, self.ctx.weights.w_d_rho);
        let d_phi = match &obs.phi_obs {
            Some(list) if !list.is_empty() => {
                let phi = self.phi_values(&obs.phi_points())?;
                let r: Vec<Var> = phi.iter().zip(list).map(|(&v, &(_, _, o))| self.tape.add_const(v, -o)).collect();
                let d = self.mean_square(&r);
                Some(self.tape.scale(d, self.ctx.weights.w_d_phi))
            }
            Some(_) => return Err(Error::invalid("potential observation list is empty")),
            None => None,
        };
        Ok((Some(d_rho), d_phi))
    }
}

#[derive(Debug, Default)]
struct Terms {
    macro_residual: Option<Var>,
    micro_residual: Option<Var>,
    bc: Option<Var>,
    ic: Option<Var>,
    diffusion: Option<Var>,
    data_rho: Option<Var>,
    data_phi: Option<Var>,
    poisson: Option<Var>,
}

/// Evaluates an objective, with the gradient when `with_gradient` is set.
pub fn evaluate(
    ctx: &LossContext<'_>,
    bundle: &NetworkBundle,
    objective: &Objective,
    with_gradient: bool,
) -> Result<Evaluation> {
    objective.validate()?;
    let mut asm = Assembler::new(ctx, bundle, with_gradient);
    asm.eps_for_rho = objective.eps;
    let colloc = ctx.colloc;
    let eps = objective.eps;
    let main = if objective.residual == Residual::None && objective.diffusion.is_some() {
        RhoSource::Diff
    } else {
        RhoSource::Method
    };
    let mut terms = Terms::default();

    if objective.residual != Residual::None {
        let rho = asm.rho(main, &colloc.interior_tx, Order::First)?;
        let g = asm.micro(&colloc.interior_txv, Order::First, true)?;
        let (dphi, _) = asm.potential(&colloc.interior_tx, false)?;
        if objective.residual == Residual::Pinn {
            let r = asm.pinn_residuals(&rho, &g, &dphi, eps);
            terms.micro_residual = Some(asm.mean_square(&r));
        } else {
            let (mr, ur) = asm.apnn_residuals(&rho, &g, &dphi, eps);
            terms.macro_residual = Some(asm.mean_square(&mr));
            terms.micro_residual = Some(asm.mean_square(&ur));
        }
        let w = ctx.weights;
        let (bc, ic) = asm.boundary_terms(main, eps, w.lambda1, w.lambda2)?;
        terms.bc = Some(bc);
        terms.ic = Some(ic);
    }

    if let Some(variant) = objective.diffusion {
        let interior = match variant {
            DiffusionVariant::V1 => asm.diffusion_v1(&colloc.interior_tx)?,
            DiffusionVariant::V2 => asm.diffusion_v2(&colloc.interior_tx, &colloc.interior_txv)?,
        };
        let w = ctx.weights;
        let (bc, ic) = asm.boundary_terms(RhoSource::Diff, 0.0, w.lambda1_diff, w.lambda2_diff)?;
        terms.diffusion = Some(asm.tape.sum(&[interior, bc, ic]));
    }

    if objective.data {
        let (r, p) = asm.data(main)?;
        terms.data_rho = r;
        terms.data_phi = p;
    }

    if objective.poisson {
        terms.poisson = Some(asm.poisson(main)?);
    }

    let present: Vec<Var> = [
        terms.macro_residual,
        terms.micro_residual,
        terms.bc,
        terms.ic,
        terms.diffusion,
        terms.data_rho,
        terms.data_phi,
        terms.poisson,
    ]
    .into_iter()
    .flatten()
    .collect();
    let total = asm.tape.sum(&present);
    let val = |v: Option<Var>| v.map(|v| asm.tape.value(v)).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        macro_residual: val(terms.macro_residual),
        micro_residual: val(terms.micro_residual),
        bc: val(terms.bc),
        ic: val(terms.ic),
        diffusion: val(terms.diffusion),
        data_rho: val(terms.data_rho),
        data_phi: val(terms.data_phi),
        poisson: val(terms.poisson),
        total: asm.tape.value(total),
    };

    let gradient = if with_gradient {
        let nets: Vec<Option<&crate::net::DenseNet>> = NetSlot::ALL
            .iter()
            .map(|&s| if bundle.is_frozen(s) { None } else { bundle.net(s) })
            .collect();
        let mut g: Gradients = asm.tape.backward(total, &nets)?;
        let mut out = BundleGradient::default();
        for s in NetSlot::ALL {
            out.nets[s.index()] = g.take_net(s.index());
        }
        out.sigma = asm.sigma_leaf.map(|l| g.wrt(l));
        Some(out)
    } else {
        None
    };
    Ok(Evaluation { breakdown, gradient })
}

/// Value and gradient of an objective.
pub fn loss_gradient(ctx: &LossContext<'_>, bundle: &NetworkBundle, objective: &Objective) -> Result<Evaluation> {
    evaluate(ctx, bundle, objective, true)
}

fn value_of(ctx: &LossContext<'_>, bundle: &NetworkBundle, objective: Objective) -> Result<LossBreakdown> {
    Ok(evaluate(ctx, bundle, &objective, false)?.breakdown)
}

fn residual_only(residual: Residual, eps: f64) -> Objective {
    Objective {
        residual,
        eps,
        diffusion: None,
        data: false,
        poisson: false,
    }
}

/// APNN loss: macro and micro residuals plus inflow and initial penalties.
pub fn apnn_loss(ctx: &LossContext<'_>, bundle: &NetworkBundle, eps: f64) -> Result<LossBreakdown> {
    if bundle.method != Method::Apnn {
        return Err(Error::Configuration(format!("apnn_loss on a {} bundle", bundle.method.name())));
    }
    value_of(ctx, bundle, residual_only(Residual::Apnn, eps))
}

/// Bi-fidelity APNN loss; the composition (explicit or implicit) follows the bundle's method.
pub fn biapnn_loss(ctx: &LossContext<'_>, bundle: &NetworkBundle, eps: f64) -> Result<LossBreakdown> {
    if !bundle.method.is_bi_fidelity() {
        return Err(Error::Configuration(format!("biapnn_loss on a {} bundle", bundle.method.name())));
    }
    value_of(ctx, bundle, residual_only(Residual::BiApnn, eps))
}

/// Standard PINN loss for `f = ρM + εg`; the interior term is reported as `micro_residual`.
pub fn pinn_loss(ctx: &LossContext<'_>, bundle: &NetworkBundle, eps: f64) -> Result<LossBreakdown> {
    value_of(ctx, bundle, residual_only(Residual::Pinn, eps))
}

/// Diffusion pre-training loss for `ρ_diff`, including its weighted
/// boundary and initial penalties; reported as `diffusion`.
pub fn diffusion_loss(ctx: &LossContext<'_>, bundle: &NetworkBundle, variant: DiffusionVariant) -> Result<LossBreakdown> {
    value_of(
        ctx,
        bundle,
        Objective {
            residual: Residual::None,
            eps: 0.0,
            diffusion: Some(variant),
            data: false,
            poisson: false,
        },
    )
}

/// `(data_rho, data_phi)` misfits of the method's density and of `φ`.
pub fn data_loss(ctx: &LossContext<'_>, bundle: &NetworkBundle, eps: f64) -> Result<(f64, f64)> {
    let mut asm = Assembler::new(ctx, bundle, false);
    asm.eps_for_rho = eps;
    let (r, p) = asm.data(RhoSource::Method)?;
    Ok((
        r.map(|v| asm.tape.value(v)).unwrap_or(0.0),
        p.map(|v| asm.tape.value(v)).unwrap_or(0.0),
    ))
}

/// Poisson residual of `φ` against the method's density, with the Dirichlet penalty.
pub fn poisson_residual_loss(ctx: &LossContext<'_>, bundle: &NetworkBundle, eps: f64) -> Result<f64> {
    let mut asm = Assembler::new(ctx, bundle, false);
    asm.eps_for_rho = eps;
    let v = asm.poisson(RhoSource::Method)?;
    Ok(asm.tape.value(v))
}

/// `(bc, ic)` for the method's density (or `ρ_diff` alone when `diff_only`).
pub fn bc_ic_loss(ctx: &LossContext<'_>, bundle: &NetworkBundle, eps: f64, diff_only: bool) -> Result<(f64, f64)> {
    let mut asm = Assembler::new(ctx, bundle, false);
    asm.eps_for_rho = eps;
    let source = if diff_only { RhoSource::Diff } else { RhoSource::Method };
    let (l1, l2) = if diff_only {
        (ctx.weights.lambda1_diff, ctx.weights.lambda2_diff)
    } else {
        (ctx.weights.lambda1, ctx.weights.lambda2)
    };
    let (bc, ic) = asm.boundary_terms(source, eps, l1, l2)?;
    Ok((asm.tape.value(bc), asm.tape.value(ic)))
}

/// Inverse-problem loss: bi-fidelity residuals, `v1` diffusion for the
/// trainable `ρ_diff`, data misfit, and (optionally) the Poisson residual.
pub fn total_inverse_loss(
    ctx: &LossContext<'_>,
    bundle: &NetworkBundle,
    eps: f64,
    poisson: bool,
) -> Result<LossBreakdown> {
    if bundle.sigma_param().is_none() {
        return Err(Error::Configuration("the inverse loss needs a trainable sigma".into()));
    }
    if bundle.is_frozen(NetSlot::RhoDiff) {
        return Err(Error::Configuration("the inverse loss trains rho_diff; unfreeze it".into()));
    }
    value_of(ctx, bundle, Objective::inverse(bundle.method, eps, poisson))
}

/// Per-point interior residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct InteriorResiduals {
    /// One per interior `(t, x)`; empty for the PINN residual.
    pub macro_residual: Vec<f64>,
    /// One per interior `(t, x, v_j)`.
    pub micro_residual: Vec<f64>,
}

/// Interior residuals of the method's loss at `eps` (`eps = 0` allowed for
/// the APNN forms).
pub fn interior_residuals(ctx: &LossContext<'_>, bundle: &NetworkBundle, eps: f64) -> Result<InteriorResiduals> {
    let residual = residual_of(bundle.method);
    residual_only(residual, eps).validate()?;
    let mut asm = Assembler::new(ctx, bundle, false);
    asm.eps_for_rho = eps;
    let colloc = ctx.colloc;
    let rho = asm.rho(RhoSource::Method, &colloc.interior_tx, Order::First)?;
    let g = asm.micro(&colloc.interior_txv, Order::First, true)?;
    let (dphi, _) = asm.potential(&colloc.interior_tx, false)?;
    let (mr, ur) = if residual == Residual::Pinn {
        (Vec::new(), asm.pinn_residuals(&rho, &g, &dphi, eps))
    } else {
        asm.apnn_residuals(&rho, &g, &dphi, eps)
    };
    Ok(InteriorResiduals {
        macro_residual: mr.iter().map(|&v| asm.tape.value(v)).collect(),
        micro_residual: ur.iter().map(|&v| asm.tape.value(v)).collect(),
    })
}

/// Residuals of the limiting macro/micro system for the method's density
/// composed at `eps` (the composition matters only for `bi_explicit`).
pub fn limit_residuals(ctx: &LossContext<'_>, bundle: &NetworkBundle, eps: f64) -> Result<InteriorResiduals> {
    let mut asm = Assembler::new(ctx, bundle, false);
    asm.eps_for_rho = eps;
    let colloc = ctx.colloc;
    let rho = asm.rho(RhoSource::Method, &colloc.interior_tx, Order::First)?;
    let g = asm.micro(&colloc.interior_txv, Order::First, true)?;
    let (dphi, _) = asm.potential(&colloc.interior_tx, false)?;
    let (mr, ur) = asm.limit_residuals(&rho, &g, &dphi);
    Ok(InteriorResiduals {
        macro_residual: mr.iter().map(|&v| asm.tape.value(v)).collect(),
        micro_residual: ur.iter().map(|&v| asm.tape.value(v)).collect(),
    })
}
