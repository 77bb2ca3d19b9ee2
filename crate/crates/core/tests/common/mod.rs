#![allow(dead_code)]

use biapnn_core::bundle::{Architecture, Method, NetworkBundle};
use biapnn_core::collocation::CollocationSet;
use biapnn_core::problem::ProblemSpec;
use biapnn_core::spectral::HermiteBasis;

pub struct Mini {
    pub problem: ProblemSpec,
    pub basis: HermiteBasis,
    pub colloc: CollocationSet,
}

pub fn mini(problem: ProblemSpec, nv: usize, nt: usize, nx: usize) -> Mini {
    let basis = HermiteBasis::with_nodes(nv).unwrap();
    let colloc = CollocationSet::uniform(&problem, &basis, nt, nx).unwrap();
    Mini { problem, basis, colloc }
}

/// Random bundle with two hidden layers of `width` in every network.
pub fn random_bundle(method: Method, with_phi: bool, width: usize, seed: u64) -> NetworkBundle {
    NetworkBundle::new(method, &Architecture::uniform(2, width), with_phi, seed).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}
