mod common;

use biapnn_core::bundle::{Method, NetSlot, NetworkBundle};
use biapnn_core::collocation::{ObservationSet, PenaltyWeights};
use biapnn_core::losses::*;
use biapnn_core::problem::ProblemSpec;
use common::{mini, random_bundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
enum Coord {
    Net(NetSlot, usize),
    Sigma,
}

fn get(b: &NetworkBundle, c: Coord) -> f64 {
    match c {
        Coord::Net(s, k) => b.net(s).unwrap().params()[k],
        Coord::Sigma => b.sigma_param().unwrap(),
    }
}

fn set(b: &mut NetworkBundle, c: Coord, x: f64) {
    match c {
        Coord::Net(s, k) => b.net_mut(s).unwrap().params_mut()[k] = x,
        Coord::Sigma => b.set_sigma_param(x),
    }
}

/// Checks the tape gradient against central differences on `n` random
/// coordinates of the trainable parameters; returns the worst relative error.
fn check(ctx: &LossContext<'_>, bundle: &NetworkBundle, obj: &Objective, n: usize, seed: u64) -> f64 {
    let eval = loss_gradient(ctx, bundle, obj).unwrap();
    let grad = eval.gradient.unwrap();
    let mut coords = Vec::new();
    for s in bundle.trainable() {
        let len = bundle.net(s).unwrap().params().len();
        coords.extend((0..len).map(|k| Coord::Net(s, k)));
    }
    if bundle.sigma_param().is_some() {
        coords.push(Coord::Sigma);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<Coord> = (0..n).map(|_| coords[rng.gen_range(0..coords.len())]).collect();
    if bundle.sigma_param().is_some() {
        picked[0] = Coord::Sigma;
    }
    let scale = grad.max_abs();
    let mut worst: f64 = 0.0;
    let mut b = bundle.clone();
    for c in picked {
        let x0 = get(&b, c);
        let h = 1e-5 * x0.abs().max(1.0);
        set(&mut b, c, x0 + h);
        let up = evaluate(ctx, &b, obj, false).unwrap().breakdown.total;
        set(&mut b, c, x0 - h);
        let down = evaluate(ctx, &b, obj, false).unwrap().breakdown.total;
        set(&mut b, c, x0);
        let fd = (up - down) / (2.0 * h);
        let g = match c {
            Coord::Net(s, k) => grad.net(s).unwrap()[k],
            Coord::Sigma => grad.sigma.unwrap(),
        };
        // coordinates with negligible sensitivity are compared against the overall scale
        let denom = g.abs().max(fd.abs()).max(1e-6 * scale);
        let rel = (g - fd).abs() / denom;
        assert!(rel <= 1e-4, "{c:?}: tape {g:e} fd {fd:e} rel {rel:e}");
        worst = worst.max(rel);
    }
    worst
}

fn obs(with_phi: bool) -> ObservationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = || (rng.gen_range(0.0..0.1), rng.gen_range(0.0..1.0), rng.gen_range(0.5..2.0));
    let rho_obs = (0..6).map(|_| draw()).collect();
    let phi_obs = with_phi.then(|| (0..6).map(|_| draw()).collect());
    ObservationSet { rho_obs, phi_obs, seed: 3 }
}

fn objective(residual: Residual, eps: f64) -> Objective {
    Objective {
        residual,
        eps,
        diffusion: None,
        data: false,
        poisson: false,
    }
}

#[test]
fn residual_losses() {
    for problem in [ProblemSpec::problem_one(), ProblemSpec::problem_two()] {
        let with_phi = problem.is_self_consistent();
        let m = mini(problem, 4, 3, 3);
        let ctx = LossContext::new(&m.problem, &m.basis, &m.colloc, PenaltyWeights::default(), None).unwrap();
        for (k, (method, residual)) in [
            (Method::Pinn, Residual::Pinn),
            (Method::Apnn, Residual::Apnn),
            (Method::BiExplicit, Residual::BiApnn),
            (Method::BiImplicit, Residual::BiApnn),
        ]
        .into_iter()
        .enumerate()
        {
            let mut bundle = random_bundle(method, with_phi, 8, 10 + k as u64);
            if method.is_bi_fidelity() {
                bundle.freeze(NetSlot::RhoDiff);
            }
            for eps in [1.0, 0.1] {
                check(&ctx, &bundle, &objective(residual, eps), 50, k as u64);
            }
        }
    }
}

#[test]
fn diffusion_losses() {
    for problem in [ProblemSpec::problem_one(), ProblemSpec::problem_two()] {
        let with_phi = problem.is_self_consistent();
        let m = mini(problem, 4, 3, 3);
        let ctx = LossContext::new(&m.problem, &m.basis, &m.colloc, PenaltyWeights::default(), None).unwrap();
        for variant in [DiffusionVariant::V1, DiffusionVariant::V2] {
            let mut bundle = random_bundle(Method::BiImplicit, with_phi, 8, 7);
            bundle.freeze(NetSlot::RhoCorr);
            check(&ctx, &bundle, &Objective::pretrain(variant, with_phi), 50, 1);
            bundle.set_sigma(1.4).unwrap();
            check(&ctx, &bundle, &Objective::pretrain(variant, with_phi), 50, 2);
        }
    }
}

#[test]
fn data_and_poisson_losses() {
    let m = mini(ProblemSpec::problem_two(), 4, 3, 3);
    let o = obs(true);
    let ctx = LossContext::new(&m.problem, &m.basis, &m.colloc, PenaltyWeights::default(), Some(&o)).unwrap();
    for method in [Method::Apnn, Method::BiExplicit, Method::BiImplicit] {
        let bundle = random_bundle(method, true, 8, 21);
        let data = Objective {
            residual: Residual::None,
            eps: 0.2,
            diffusion: None,
            data: true,
            poisson: false,
        };
        check(&ctx, &bundle, &data, 50, 4);
        let poisson = Objective { data: false, poisson: true, ..data };
        check(&ctx, &bundle, &poisson, 50, 5);
    }
}

#[test]
fn inverse_loss_with_sigma() {
    for problem in [ProblemSpec::problem_one(), ProblemSpec::problem_two()] {
        let with_phi = problem.is_self_consistent();
        let m = mini(problem, 4, 3, 3);
        let o = obs(with_phi);
        let ctx = LossContext::new(&m.problem, &m.basis, &m.colloc, PenaltyWeights::default(), Some(&o)).unwrap();
        for method in [Method::BiExplicit, Method::BiImplicit] {
            let mut bundle = random_bundle(method, with_phi, 8, 31);
            bundle.set_sigma(0.9).unwrap();
            check(&ctx, &bundle, &Objective::inverse(method, 1e-3, with_phi), 50, 6);
        }
    }
}
