//! One line per acceptance criterion.
//!
//! Criteria 1 to 6 are computed here and must pass. Criteria 7 to 13 need
//! long training runs; they are read from the recorded runs under
//! `results/desk` and reported as PASS, FAIL or NOT RUN without failing the
//! test. `results/desk/MANIFEST.md` lists the commands that produced them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use biapnn_cli::Summary;
use biapnn_core::bundle::{Architecture, Method, NetSlot, NetworkBundle};
use biapnn_core::collocation::{CollocationSet, ObservationSet, PenaltyWeights};
use biapnn_core::losses::{
    evaluate, interior_residuals, limit_residuals, loss_gradient, DiffusionVariant, LossContext, Objective, Residual,
};
use biapnn_core::problem::ProblemSpec;
use biapnn_core::reference::{
    poisson_residual, run_drift_diffusion, run_reference, solve_poisson, PoissonProblem, SpatialGrid,
};
use biapnn_core::spectral::{ConstantKernel, HermiteBasis};
use biapnn_core::train::relative_l2_error;

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass: Some(pass),
        detail,
    }
}

fn not_run(detail: impl Into<String>) -> Outcome {
    Outcome {
        pass: None,
        detail: detail.into(),
    }
}

/// Low-discrepancy points in `[0,1)`, used instead of a random generator.
fn halton(i: usize, base: usize) -> f64 {
    let (mut f, mut r, mut k) = (1.0, 0.0, i + 1);
    while k > 0 {
        f /= base as f64;
        r += f * (k % base) as f64;
        k /= base;
    }
    r
}

fn gamma_half(k: usize) -> f64 {
    // Γ((k+1)/2) for even k
    let mut g = core::f64::consts::PI.sqrt();
    let mut a = 0.5;
    for _ in 0..k / 2 {
        g *= a;
        a += 1.0;
    }
    g
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut exact: f64 = 0.0;
    let mut ortho: f64 = 0.0;
    let mut mass: f64 = 0.0;
    for nv in 1..=16 {
        let b = HermiteBasis::with_nodes(nv).unwrap();
        for k in 0..2 * nv {
            let q: f64 = b.nodes().iter().zip(b.weights_gh()).map(|(v, w)| v.powi(k as i32) * w).sum();
            let want = if k % 2 == 1 { 0.0 } else { gamma_half(k) };
            let magnitude: f64 = b.nodes().iter().zip(b.weights_gh()).map(|(v, w)| (v.powi(k as i32) * w).abs()).sum();
            exact = exact.max((q - want).abs() / magnitude.max(1.0));
        }
        for a in 0..nv {
            for c in 0..nv {
                if a + c > 2 * nv - 2 {
                    continue;
                }
                let g: f64 = (0..nv).map(|j| b.basis_value(a, j) * b.basis_value(c, j) * b.weights_gh()[j]).sum();
                ortho = ortho.max((g - if a == c { 1.0 } else { 0.0 }).abs());
            }
        }
        mass = mass.max((b.weights_maxwellian().iter().sum::<f64>() - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        exact <= 1e-10 && ortho <= 1e-10 && mass <= 1e-12 && secs < 1.0,
        format!("N_v 1..16: exactness (relative to sum |w v^k|) {exact:.1e}, orthonormality {ortho:.1e}, sum w^M {mass:.1e}, {secs:.3}s"),
    )
}

fn criterion_2() -> Outcome {
    let b = HermiteBasis::with_nodes(8).unwrap();
    let n = b.num_nodes();
    let mut lam_err: f64 = 0.0;
    let mut q_err: f64 = 0.0;
    for sigma in [0.5, 1.0, 2.0, 3.7] {
        let k = ConstantKernel(sigma);
        lam_err = lam_err.max(b.collision_frequency(&k).iter().fold(0.0f64, |m, l| m.max((l - sigma).abs())));
        for trial in 0..5 {
            let raw: Vec<f64> = (0..n).map(|j| halton(trial * n + j, 3) - 0.5).collect();
            let mean = b.bracket_moment(&raw).unwrap();
            let psi: Vec<f64> = raw.iter().map(|x| x - mean).collect();
            let (q, _) = b.collision_q(&psi, &k).unwrap();
            q_err = q_err.max(q.iter().zip(&psi).fold(0.0f64, |m, (a, p)| m.max((a + sigma * p).abs())));
        }
    }
    let t = b.diffusion_coefficient(&ConstantKernel(2.0)).unwrap();
    let t_err = (t - 0.25).abs();
    verdict(
        lam_err <= 1e-12 && q_err <= 1e-12 && t_err <= 1e-12,
        format!("|λ-σ| {lam_err:.1e}, |Q(g)+σg| {q_err:.1e}, |T(2)-1/4| {t_err:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for problem in [ProblemSpec::problem_one(), ProblemSpec::problem_two()] {
        let with_phi = problem.is_self_consistent();
        let basis = HermiteBasis::with_nodes(8).unwrap();
        let colloc = CollocationSet::uniform(&problem, &basis, 4, 9).unwrap();
        let ctx = LossContext::new(&problem, &basis, &colloc, PenaltyWeights::default(), None).unwrap();
        for method in [Method::Apnn, Method::BiExplicit, Method::BiImplicit] {
            for seed in 0..3 {
                let bundle = NetworkBundle::new(method, &Architecture::uniform(2, 16), with_phi, seed).unwrap();
                let a = interior_residuals(&ctx, &bundle, 0.0).unwrap();
                let l = limit_residuals(&ctx, &bundle, 0.0).unwrap();
                for (x, y) in a
                    .macro_residual
                    .iter()
                    .zip(&l.macro_residual)
                    .chain(a.micro_residual.iter().zip(&l.micro_residual))
                {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-13 && secs < 5.0,
        format!("max term-by-term gap {worst:.1e} over 18 random networks, {secs:.2}s"),
    )
}

/// Worst relative gap between the tape gradient and central differences on
/// `n` coordinates spread over the trainable parameters.
fn gradient_gap(ctx: &LossContext<'_>, bundle: &NetworkBundle, obj: &Objective, n: usize) -> f64 {
    let grad = loss_gradient(ctx, bundle, obj).unwrap().gradient.unwrap();
    let mut coords: Vec<(Option<NetSlot>, usize)> = Vec::new();
    for s in bundle.trainable() {
        coords.extend((0..bundle.net(s).unwrap().params().len()).map(|k| (Some(s), k)));
    }
    if bundle.sigma_param().is_some() {
        coords.insert(0, (None, 0));
    }
    let scale = grad.max_abs();
    let mut worst: f64 = 0.0;
    let mut b = bundle.clone();
    for i in 0..n {
        let (slot, k) = coords[if i == 0 { 0 } else { (halton(i, 2) * coords.len() as f64) as usize }];
        let get = |b: &NetworkBundle| match slot {
            Some(s) => b.net(s).unwrap().params()[k],
            None => b.sigma_param().unwrap(),
        };
        let put = |b: &mut NetworkBundle, x: f64| match slot {
            Some(s) => b.net_mut(s).unwrap().params_mut()[k] = x,
            None => b.set_sigma_param(x),
        };
        let x0 = get(&b);
        let h = 1e-5 * x0.abs().max(1.0);
        put(&mut b, x0 + h);
        let up = evaluate(ctx, &b, obj, false).unwrap().breakdown.total;
        put(&mut b, x0 - h);
        let down = evaluate(ctx, &b, obj, false).unwrap().breakdown.total;
        put(&mut b, x0);
        let fd = (up - down) / (2.0 * h);
        let g = match slot {
            Some(s) => grad.net(s).unwrap()[k],
            None => grad.sigma.unwrap(),
        };
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6 * scale));
    }
    worst
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    let residual = |r: Residual, eps: f64| Objective {
        residual: r,
        eps,
        diffusion: None,
        data: false,
        poisson: false,
    };
    for problem in [ProblemSpec::problem_one(), ProblemSpec::problem_two()] {
        let with_phi = problem.is_self_consistent();
        let basis = HermiteBasis::with_nodes(4).unwrap();
        let colloc = CollocationSet::uniform(&problem, &basis, 3, 3).unwrap();
        let obs = ObservationSet {
            rho_obs: (0..6).map(|i| (0.1 * halton(i, 2), halton(i, 3), 0.5 + halton(i, 5))).collect(),
            phi_obs: with_phi.then(|| (0..6).map(|i| (0.1 * halton(i, 5), halton(i, 2), 0.5 + halton(i, 3))).collect()),
            seed: 3,
        };
        let ctx = LossContext::new(&problem, &basis, &colloc, PenaltyWeights::default(), Some(&obs)).unwrap();
        let arch = Architecture::uniform(2, 8);
        for (method, r) in [
            (Method::Pinn, Residual::Pinn),
            (Method::Apnn, Residual::Apnn),
            (Method::BiExplicit, Residual::BiApnn),
            (Method::BiImplicit, Residual::BiApnn),
        ] {
            let mut bundle = NetworkBundle::new(method, &arch, with_phi, 10).unwrap();
            if method.is_bi_fidelity() {
                bundle.freeze(NetSlot::RhoDiff);
            }
            rows.push((method.name().to_string(), gradient_gap(&ctx, &bundle, &residual(r, 0.5), 50)));
        }
        for v in [DiffusionVariant::V1, DiffusionVariant::V2] {
            let mut bundle = NetworkBundle::new(Method::BiImplicit, &arch, with_phi, 7).unwrap();
            bundle.freeze(NetSlot::RhoCorr);
            bundle.set_sigma(1.4).unwrap();
            rows.push((format!("diffusion {v:?}"), gradient_gap(&ctx, &bundle, &Objective::pretrain(v, with_phi), 50)));
        }
        let bundle = NetworkBundle::new(Method::BiImplicit, &arch, with_phi, 21).unwrap();
        let data = Objective {
            data: true,
            ..residual(Residual::None, 0.2)
        };
        rows.push(("data".into(), gradient_gap(&ctx, &bundle, &data, 50)));
        if with_phi {
            let poisson = Objective {
                poisson: true,
                ..residual(Residual::None, 0.2)
            };
            rows.push(("poisson".into(), gradient_gap(&ctx, &bundle, &poisson, 50)));
        }
    }
    let worst = rows.iter().fold(0.0f64, |m, (_, g)| m.max(*g));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && secs < 60.0,
        format!("worst relative gap {worst:.1e} over {} loss/problem cases x 50 coordinates, {secs:.1}s", rows.len()),
    )
}

fn criterion_5() -> Outcome {
    let basis = HermiteBasis::with_nodes(8).unwrap();
    let w = basis.weights_maxwellian();
    let pts: Vec<f64> = (0..1000).flat_map(|i| [0.1 * halton(i, 2), halton(i, 3)]).collect();
    let mut worst: f64 = 0.0;
    for seed in 0..4 {
        let bundle = NetworkBundle::new(Method::Apnn, &Architecture::uniform(2, 32), false, seed).unwrap();
        let g = bundle.g_from_bundle(&basis, &pts).unwrap();
        for row in g.psi.chunks_exact(8) {
            worst = worst.max(row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().abs());
        }
    }
    verdict(worst <= 1e-13, format!("max |<g>| {worst:.1e} at 1000 points x 4 parameter draws"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let p = ProblemSpec::problem_one();
    let grid = SpatialGrid::with_spacing(0.0, 1.0, 0.01).unwrap();
    let basis = HermiteBasis::with_nodes(8).unwrap();
    let mm = run_reference(&p, 1e-8, &grid, &basis, 0.005, 0.1).unwrap();
    let dd = run_drift_diffusion(&p, &grid, &basis, 0.005, 0.1).unwrap();
    let gap = relative_l2_error(mm.final_rho(), dd.final_rho()).unwrap();

    let beta = 0.002;
    let prob = PoissonProblem {
        beta,
        bias: 0.0,
        doping: vec![0.5; grid.nx],
    };
    let rho = vec![0.5 + 2.0 * beta; grid.nx];
    let phi = solve_poisson(&rho, &prob, &grid).unwrap();
    let manufactured = grid.nodes.iter().zip(&phi).fold(0.0f64, |m, (x, p)| m.max((p - x * (x - 1.0)).abs()));
    let residual = poisson_residual(&phi, &rho, &prob, &grid);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        gap <= 1e-2 && manufactured <= 1e-10 && residual <= 1e-10 && secs < 30.0,
        format!(
            "micro-macro vs drift-diffusion {gap:.2e}; Poisson manufactured error {manufactured:.1e}, residual {residual:.1e}; {secs:.1}s"
        ),
    )
}

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../results/desk")
}

fn summary(rel: &str) -> Option<Summary> {
    Summary::load(&desk().join(rel).join("summary.json")).ok()
}

fn err(rel: &str) -> Option<f64> {
    summary(rel).and_then(|s| s.rel_error_rho)
}

fn fmt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "missing".into())
}

/// Collects the named values; `None` when any run is missing.
fn all<const N: usize>(vals: [Option<f64>; N]) -> Option<[f64; N]> {
    if vals.iter().all(Option::is_some) {
        Some(vals.map(|v| v.unwrap()))
    } else {
        None
    }
}

fn forward_four(dir: &str) -> ([Option<f64>; 4], String) {
    let e = ["pinn", "apnn", "bi_explicit", "bi_implicit"].map(|m| err(&format!("{dir}/{m}")));
    let text = format!("pinn {} apnn {} e-bi {} i-bi {}", fmt(e[0]), fmt(e[1]), fmt(e[2]), fmt(e[3]));
    (e, text)
}

fn criterion_7() -> Outcome {
    let (e, text) = forward_four("c7_problem1_eps1e-8");
    match all(e) {
        Some([p, a, be, bi]) => verdict(p >= 0.2 && a <= 5e-2 && be <= 2e-2 && bi <= 2e-2, text),
        None => not_run(text),
    }
}

fn criterion_8() -> Outcome {
    let (e, text) = forward_four("c8_problem1_eps1");
    match all(e) {
        Some(v) => verdict(v.iter().all(|x| *x <= 5e-2), text),
        None => not_run(text),
    }
}

fn criterion_9() -> Outcome {
    let be = err("c9_zero_hidden/bi_explicit");
    let a = err("c9_zero_hidden/apnn");
    let text = format!("e-bi (0 hidden) {} apnn (0 hidden) {}", fmt(be), fmt(a));
    match all([be, a]) {
        Some([be, a]) => verdict(be <= 2e-2 && a >= 0.3, text),
        None => not_run(text),
    }
}

/// Main-stage relative error logged at `epoch`.
fn error_at_epoch(rel: &str, epoch: usize) -> Option<f64> {
    let text = std::fs::read_to_string(desk().join(rel).join("loss_history.csv")).ok()?;
    text.lines().skip(1).find_map(|l| {
        let f: Vec<&str> = l.split(',').collect();
        (f[0] == "main" && f[1].parse::<usize>().ok()? == epoch).then(|| f[13].parse().ok())?
    })
}

fn criterion_10() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    let mut complete = true;
    for seed in 0..3 {
        let a = error_at_epoch(&format!("c10_speed/apnn_seed{seed}"), 2000);
        let b = error_at_epoch(&format!("c10_speed/bi_implicit_seed{seed}"), 2000);
        parts.push(format!("seed {seed}: i-bi {} apnn {}", fmt(b), fmt(a)));
        match (a, b) {
            (Some(a), Some(b)) => wins += usize::from(b < a),
            _ => complete = false,
        }
    }
    let text = format!("epoch 2000, {}", parts.join("; "));
    if complete {
        verdict(wins == 3, format!("{text}; {wins}/3"))
    } else {
        not_run(text)
    }
}

fn sigma_hat(rel: &str) -> Option<f64> {
    summary(rel).and_then(|s| s.sigma_hat)
}

fn criterion_11() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = Some(true);
    for eps in ["1e-3", "1e-8"] {
        let b = sigma_hat(&format!("c11_problem1_inverse/bi_implicit_eps{eps}"));
        let a = sigma_hat(&format!("c11_problem1_inverse/apnn_eps{eps}"));
        parts.push(format!("eps {eps}: i-bi {} apnn {}", fmt(b), fmt(a)));
        pass = match (pass, b, a) {
            (Some(p), Some(b), Some(a)) => Some(p && (1.95..=2.05).contains(&b) && (b - 2.0).abs() < (a - 2.0).abs()),
            _ => None,
        };
    }
    let text = format!("mean sigma_hat, {}", parts.join("; "));
    match pass {
        Some(p) => verdict(p, text),
        None => not_run(text),
    }
}

fn criterion_12() -> Outcome {
    let bi = summary("c12_problem2_eps1e-8/bi_implicit");
    let ap = summary("c12_problem2_eps1e-8/apnn");
    let pair = |s: &Option<Summary>| s.as_ref().and_then(|s| Some((s.rel_error_rho?, s.rel_error_phi?)));
    let (b, a) = (pair(&bi), pair(&ap));
    let show = |p: Option<(f64, f64)>| p.map(|(r, f)| format!("rho {r:.3e} phi {f:.3e}")).unwrap_or_else(|| "missing".into());
    let text = format!("i-bi {}; apnn {}", show(b), show(a));
    match (b, a) {
        (Some((br, bf)), Some((ar, af))) => {
            let within3 = |x: f64, paper: f64| x <= 3.0 * paper && x >= paper / 3.0;
            verdict(br <= 8e-2 && bf <= 8e-2 && within3(ar, 6.23e-2) && within3(af, 6.16e-2), text)
        }
        _ => not_run(text),
    }
}

fn criterion_13() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = Some(true);
    for eps in ["1e-3", "1e-8"] {
        for m in ["bi_explicit", "bi_implicit"] {
            let s = sigma_hat(&format!("c13_problem2_inverse/{m}_eps{eps}"));
            parts.push(format!("{m} eps {eps}: {}", fmt(s)));
            pass = match (pass, s) {
                (Some(p), Some(s)) => Some(p && (1.94..=2.06).contains(&s)),
                _ => None,
            };
        }
    }
    let text = format!("mean sigma_hat, {}", parts.join("; "));
    match pass {
        Some(p) => verdict(p, text),
        None => not_run(text),
    }
}

fn main() {
    let criteria: [(usize, fn() -> Outcome); 13] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
        (12, criterion_12),
        (13, criterion_13),
    ];
    let mut floor_failures = Vec::new();
    for (n, f) in criteria {
        let o = f();
        let tag = match o.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "NOT RUN",
        };
        println!("criterion {n:>2}: {tag:<7} {}", o.detail);
        if n <= 6 && o.pass != Some(true) {
            floor_failures.push(n);
        }
    }
    if !floor_failures.is_empty() {
        eprintln!("criteria {floor_failures:?} failed");
        std::process::exit(1);
    }
}
