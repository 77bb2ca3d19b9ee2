//! The set of networks a method trains, and the maps from network outputs to
//! the density `ρ` and the micro part `g`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::net::{DenseNet, JetSpec, OutputTransform};
use crate::spectral::HermiteBasis;
use crate::tape::{softplus, softplus_inverse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Pinn,
    Apnn,
    /// `ρ = ρ_diff + ε ρ_corr`.
    BiExplicit,
    /// `ρ = ρ_diff + ρ_corr`.
    BiImplicit,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pinn, Method::Apnn, Method::BiExplicit, Method::BiImplicit];

    pub fn is_bi_fidelity(self) -> bool {
        matches!(self, Method::BiExplicit | Method::BiImplicit)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Pinn => "pinn",
            Method::Apnn => "apnn",
            Method::BiExplicit => "bi_explicit",
            Method::BiImplicit => "bi_implicit",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Coefficient of `ρ_corr` in the bi-fidelity density.
    pub fn correction_scale(self, eps: f64) -> f64 {
        match self {
            Method::BiExplicit => eps,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetSlot {
    /// `ρ` of the PINN and APNN methods (negated-exponential output).
    RhoApnn,
    /// Low-fidelity diffusion density (negated-exponential output).
    RhoDiff,
    /// Signed correction (identity output).
    RhoCorr,
    /// `ψ̃(t, x, v)`, projected to the mean-zero micro part.
    G,
    /// Self-consistent potential `φ(t, x)`.
    Phi,
}

impl NetSlot {
    pub const ALL: [NetSlot; 5] = [NetSlot::RhoApnn, NetSlot::RhoDiff, NetSlot::RhoCorr, NetSlot::G, NetSlot::Phi];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NetSlot::RhoApnn => "rho",
            NetSlot::RhoDiff => "rho_diff",
            NetSlot::RhoCorr => "rho_corr",
            NetSlot::G => "g",
            NetSlot::Phi => "phi",
        }
    }

    pub fn parse(s: &str) -> Option<NetSlot> {
        NetSlot::ALL.into_iter().find(|n| n.name() == s)
    }

    pub fn input_width(self) -> usize {
        if self == NetSlot::G {
            3
        } else {
            2
        }
    }

    pub fn transform(self) -> OutputTransform {
        match self {
            NetSlot::RhoApnn | NetSlot::RhoDiff => OutputTransform::NegExp,
            _ => OutputTransform::Identity,
        }
    }
}

/// Hidden-layer widths of every network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub rho: Vec<usize>,
    pub rho_diff: Vec<usize>,
    pub rho_corr: Vec<usize>,
    pub g: Vec<usize>,
    pub phi: Vec<usize>,
}

impl Architecture {
    /// Four hidden layers of 128 for every network, fourteen for `φ`.
    pub fn paper() -> Self {
        Architecture {
            rho: alloc::vec![128; 4],
            rho_diff: alloc::vec![128; 4],
            rho_corr: alloc::vec![128; 4],
            g: alloc::vec![128; 4],
            phi: alloc::vec![128; 14],
        }
    }

    pub fn uniform(layers: usize, width: usize) -> Self {
        let h = alloc::vec![width; layers];
        Architecture {
            rho: h.clone(),
            rho_diff: h.clone(),
            rho_corr: h.clone(),
            g: h.clone(),
            phi: h,
        }
    }

    pub fn hidden(&self, slot: NetSlot) -> &[usize] {
        match slot {
            NetSlot::RhoApnn => &self.rho,
            NetSlot::RhoDiff => &self.rho_diff,
            NetSlot::RhoCorr => &self.rho_corr,
            NetSlot::G => &self.g,
            NetSlot::Phi => &self.phi,
        }
    }

    pub fn widths(&self, slot: NetSlot) -> Vec<usize> {
        let mut w = alloc::vec![slot.input_width()];
        w.extend_from_slice(self.hidden(slot));
        w.push(1);
        w
    }
}

/// Slots a method needs.
pub fn required_slots(method: Method, with_phi: bool) -> Vec<NetSlot> {
    let mut slots = if method.is_bi_fidelity() {
        alloc::vec![NetSlot::RhoDiff, NetSlot::RhoCorr, NetSlot::G]
    } else {
        alloc::vec![NetSlot::RhoApnn, NetSlot::G]
    };
    if with_phi {
        slots.push(NetSlot::Phi);
    }
    slots
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBundle {
    pub method: Method,
    nets: [Option<DenseNet>; 5],
    frozen: [bool; 5],
    sigma_param: Option<f64>,
}

/// Densities and their first derivatives on a batch of `(t, x)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoValues {
    pub value: Vec<f64>,
    pub dt: Vec<f64>,
    pub dx: Vec<f64>,
}

/// `g/M` and its derivatives at the velocity nodes, row-major `points x Nv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroValues {
    pub psi: Vec<f64>,
    pub dt: Vec<f64>,
    pub dx: Vec<f64>,
    /// `∂_v g / M` at the nodes.
    pub dv: Vec<f64>,
}

fn slot_seed(seed: u64, slot: NetSlot) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(slot.index() as u64 + 1)
}

impl NetworkBundle {
    /// Xavier-initialized networks for `method`; each network gets its own
    /// seed derived from `seed` and its slot.
    pub fn new(method: Method, arch: &Architecture, with_phi: bool, seed: u64) -> Result<Self> {
        let mut b = NetworkBundle {
            method,
            nets: Default::default(),
            frozen: [false; 5],
            sigma_param: None,
        };
        for slot in required_slots(method, with_phi) {
            let net = DenseNet::xavier(&arch.widths(slot), slot.transform(), slot_seed(seed, slot))?;
            b.nets[slot.index()] = Some(net);
        }
        Ok(b)
    }

    /// A bundle with no networks; fill it with [`NetworkBundle::set_net`].
    pub fn empty(method: Method) -> Self {
        NetworkBundle {
            method,
            nets: Default::default(),
            frozen: [false; 5],
            sigma_param: None,
        }
    }

    pub fn net(&self, slot: NetSlot) -> Option<&DenseNet> {
        self.nets[slot.index()].as_ref()
    }

    pub fn net_mut(&mut self, slot: NetSlot) -> Option<&mut DenseNet> {
        self.nets[slot.index()].as_mut()
    }

    pub fn require(&self, slot: NetSlot) -> Result<&DenseNet> {
        self.net(slot).ok_or_else(|| {
            Error::Configuration(alloc::format!(
                "method {} needs the `{}` network",
                self.method.name(),
                slot.name()
            ))
        })
    }

    pub fn set_net(&mut self, slot: NetSlot, net: DenseNet) -> Result<()> {
        if net.input_width() != slot.input_width() || net.output_width() != 1 {
            return Err(Error::invalid(alloc::format!(
                "network for `{}` must map {} inputs to 1 output",
                slot.name(),
                slot.input_width()
            )));
        }
        self.nets[slot.index()] = Some(net);
        Ok(())
    }

    pub fn present(&self) -> Vec<NetSlot> {
        NetSlot::ALL.into_iter().filter(|s| self.net(*s).is_some()).collect()
    }

    pub fn freeze(&mut self, slot: NetSlot) {
        self.frozen[slot.index()] = true;
    }

    pub fn unfreeze(&mut self, slot: NetSlot) {
        self.frozen[slot.index()] = false;
    }

    pub fn is_frozen(&self, slot: NetSlot) -> bool {
        self.frozen[slot.index()]
    }

    /// Present and not frozen.
    pub fn trainable(&self) -> Vec<NetSlot> {
        self.present().into_iter().filter(|s| !self.is_frozen(*s)).collect()
    }

    pub fn has_phi(&self) -> bool {
        self.net(NetSlot::Phi).is_some()
    }

    /// Makes `σ = softplus(s)` trainable, starting from `sigma0 > 0`.
    pub fn set_sigma(&mut self, sigma0: f64) -> Result<()> {
        if !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(Error::invalid("initial sigma must be positive"));
        }
        self.sigma_param = Some(softplus_inverse(sigma0));
        Ok(())
    }

    pub fn clear_sigma(&mut self) {
        self.sigma_param = None;
    }

    /// Raw parameter `s`.
    pub fn sigma_param(&self) -> Option<f64> {
        self.sigma_param
    }

    pub fn set_sigma_param(&mut self, s: f64) {
        self.sigma_param = Some(s);
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma_param.map(softplus)
    }

    pub fn num_params(&self) -> usize {
        self.nets.iter().flatten().map(|n| n.params().len()).sum::<usize>() + usize::from(self.sigma_param.is_some())
    }

    /// `ρ` and its first derivatives at row-major `(t, x)` points.
    pub fn rho_from_bundle(&self, eps: f64, points: &[f64]) -> Result<RhoValues> {
        let spec = JetSpec::first(&[0, 1]);
        let eval = |slot: NetSlot| -> Result<RhoValues> {
            let jet = self.require(slot)?.forward_jet(points, &spec)?;
            let mut d = jet.d.into_iter();
            Ok(RhoValues {
                value: jet.value,
                dt: d.next().unwrap_or_default(),
                dx: d.next().unwrap_or_default(),
            })
        };
        if !self.method.is_bi_fidelity() {
            return eval(NetSlot::RhoApnn);
        }
        let mut diff = eval(NetSlot::RhoDiff)?;
        let corr = eval(NetSlot::RhoCorr)?;
        let c = self.method.correction_scale(eps);
        for (a, b) in [(&mut diff.value, &corr.value), (&mut diff.dt, &corr.dt), (&mut diff.dx, &corr.dx)] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        Ok(diff)
    }

    /// Projected micro part at the velocity nodes for row-major `(t, x)` points.
    pub fn g_from_bundle(&self, basis: &HermiteBasis, points: &[f64]) -> Result<MicroValues> {
        if !points.len().is_multiple_of(2) {
            return Err(Error::invalid("points must be (t, x) pairs"));
        }
        let net = self.require(NetSlot::G)?;
        let nv = basis.num_nodes();
        let inputs = kinetic_inputs(points, basis.nodes());
        let jet = net.forward_jet(&inputs, &JetSpec::first(&[0, 1]))?;
        let w = basis.weights_maxwellian();
        let project = |raw: &[f64]| -> Vec<f64> {
            let mut out = raw.to_vec();
            for row in out.chunks_exact_mut(nv) {
                let mean: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
                row.iter_mut().for_each(|x| *x -= mean);
            }
            out
        };
        let psi = project(&jet.value);
        let mut dv = Vec::with_capacity(psi.len());
        for row in psi.chunks_exact(nv) {
            dv.extend(basis.velocity_derivative(row)?.iter().zip(basis.nodes()).zip(row).map(|((d, v), p)| d - 2.0 * v * p));
        }
        Ok(MicroValues {
            dt: project(&jet.d[0]),
            dx: project(&jet.d[1]),
            psi,
            dv,
        })
    }

    /// `φ` at row-major `(t, x)` points.
    pub fn phi_values(&self, points: &[f64]) -> Result<Vec<f64>> {
        self.require(NetSlot::Phi)?.forward(points)
    }

    /// Short description used in diagnostics.
    pub fn describe(&self) -> String {
        let mut s = String::from(self.method.name());
        for slot in self.present() {
            let net = self.net(slot).expect("present");
            s.push_str(&alloc::format!(" {}={:?}", slot.name(), net.widths()));
            if self.is_frozen(slot) {
                s.push_str("(frozen)");
            }
        }
        s
    }
}

/// Expands `(t, x)` pairs into `(t, x, v_j)` triples, velocity fastest.
pub fn kinetic_inputs(points: &[f64], nodes: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len() / 2 * nodes.len() * 3);
    for p in points.chunks_exact(2) {
        for &v in nodes {
            out.extend_from_slice(&[p[0], p[1], v]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn required_networks_per_method() {
        let arch = Architecture::uniform(1, 4);
        let b = NetworkBundle::new(Method::BiExplicit, &arch, false, 0).unwrap();
        assert_eq!(b.present(), alloc::vec![NetSlot::RhoDiff, NetSlot::RhoCorr, NetSlot::G]);
        let a = NetworkBundle::new(Method::Apnn, &arch, true, 0).unwrap();
        assert_eq!(a.present(), alloc::vec![NetSlot::RhoApnn, NetSlot::G, NetSlot::Phi]);
        assert!(matches!(a.require(NetSlot::RhoCorr), Err(Error::Configuration(_))));
    }

    #[test]
    fn zero_nets_give_unit_density() {
        let mut b = NetworkBundle::empty(Method::Apnn);
        b.set_net(NetSlot::RhoApnn, DenseNet::zeros(&[2, 3, 1], OutputTransform::NegExp).unwrap()).unwrap();
        let r = b.rho_from_bundle(0.1, &[0.05, 0.3, 0.02, 0.9]).unwrap();
        assert_eq!(r.value, alloc::vec![1.0, 1.0]);
        assert!(r.dt.iter().chain(&r.dx).all(|&x| x == 0.0));
    }

    #[test]
    fn bi_explicit_at_zero_eps_is_diffusion_density() {
        let arch = Architecture::uniform(2, 5);
        let b = NetworkBundle::new(Method::BiExplicit, &arch, false, 3).unwrap();
        let pts = [0.05, 0.3, 0.02, 0.9];
        let r = b.rho_from_bundle(0.0, &pts).unwrap();
        let d = b.net(NetSlot::RhoDiff).unwrap().forward(&pts).unwrap();
        assert_eq!(r.value, d);
    }

    #[test]
    fn sigma_round_trip() {
        let mut b = NetworkBundle::empty(Method::BiImplicit);
        b.set_sigma(1.7).unwrap();
        assert!((b.sigma().unwrap() - 1.7).abs() < 1e-14);
        assert!(b.set_sigma(0.0).is_err());
    }
}
