//! Dispatch from a configuration to the reference solvers and the training
//! workflows.

use std::fmt;
use std::time::Instant;

use biapnn_core::bundle::{NetSlot, NetworkBundle};
use biapnn_core::collocation::{CollocationSet, ObservationSet};
use biapnn_core::losses::LossContext;
use biapnn_core::net::DenseNet;
use biapnn_core::reference::{run_drift_diffusion, run_reference, ReferenceSolution, SpatialGrid};
use biapnn_core::spectral::HermiteBasis;
use biapnn_core::train::{
    relative_l2_error, train_forward, train_inverse, Clock, EpochRecord, ReferenceTarget, TrainingSettings,
};

use crate::config::{ConfigError, ExperimentConfig, MethodChoice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Forward,
    Inverse,
    Reference,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Inverse => "inverse",
            Mode::Reference => "reference",
        }
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Core { config_hash: String, error: biapnn_core::Error },
    Io(std::io::Error),
}

impl RunError {
    /// 2 for invalid input, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Core { error, .. } => match error {
                biapnn_core::Error::InvalidArgument(_) | biapnn_core::Error::Configuration(_) => 2,
                biapnn_core::Error::Divergence { .. } => 3,
                _ => 1,
            },
            RunError::Io(_) => 1,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "{e}"),
            RunError::Core { config_hash, error } => write!(f, "run {}: {error}", &config_hash[..12]),
            RunError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

/// One row of the loss history; `stage` is `pretrain`, `main` or `run<k>`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub stage: String,
    pub record: EpochRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaRun {
    pub sigma0: f64,
    pub sigma_hat: f64,
    /// `(epoch, σ)` before each update, then the final value.
    pub trajectory: Vec<(usize, f64)>,
    pub rel_error_rho: Option<f64>,
}

/// Everything a run produces; see [`crate::output`] for the files.
#[derive(Debug, Clone)]
pub struct ResultsBundle {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub mode: Mode,
    pub version: String,
    pub t_final: f64,
    pub xs: Vec<f64>,
    /// Named columns of the final density slice.
    pub rho_columns: Vec<(String, Vec<f64>)>,
    pub phi_columns: Vec<(String, Vec<f64>)>,
    pub rel_error_rho: Option<f64>,
    pub rel_error_phi: Option<f64>,
    pub history: Vec<HistoryRow>,
    pub sigma_runs: Vec<SigmaRun>,
    pub epochs: usize,
    pub wall_time_s: f64,
    pub trajectory: Option<ReferenceSolution>,
    /// `(name, network)` pairs written when checkpointing is on.
    pub networks: Vec<(String, DenseNet)>,
    pub negative_density_events: usize,
}

impl ResultsBundle {
    /// Mean of the inverse estimates.
    pub fn sigma_hat(&self) -> Option<f64> {
        if self.sigma_runs.is_empty() {
            return None;
        }
        Some(self.sigma_runs.iter().map(|r| r.sigma_hat).sum::<f64>() / self.sigma_runs.len() as f64)
    }
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Progress sink: receives `(stage, record)` for every logged epoch.
pub type Progress<'p> = dyn FnMut(&str, &EpochRecord) + 'p;

pub fn version_string() -> String {
    format!("biapnn {}", env!("CARGO_PKG_VERSION"))
}

pub fn run_experiment(cfg: &ExperimentConfig, mode: Mode, progress: &mut Progress<'_>) -> Result<ResultsBundle, RunError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let core = |error: biapnn_core::Error| RunError::Core {
        config_hash: hash.clone(),
        error,
    };
    let started = Instant::now();
    let problem = cfg.problem_spec();
    let basis = HermiteBasis::with_nodes(cfg.nv).map_err(core)?;
    let grid = SpatialGrid::with_spacing(problem.x_min, problem.x_max, cfg.dx).map_err(core)?;
    let with_phi = cfg.with_phi();

    let mut out = ResultsBundle {
        config: cfg.clone(),
        config_hash: hash.clone(),
        mode,
        version: version_string(),
        t_final: cfg.t_final,
        xs: grid.nodes.clone(),
        rho_columns: Vec::new(),
        phi_columns: Vec::new(),
        rel_error_rho: None,
        rel_error_phi: None,
        history: Vec::new(),
        sigma_runs: Vec::new(),
        epochs: 0,
        wall_time_s: 0.0,
        trajectory: None,
        networks: Vec::new(),
        negative_density_events: 0,
    };

    let neural = match (mode, cfg.method) {
        (Mode::Reference, _) | (_, MethodChoice::Reference) | (_, MethodChoice::DriftDiffusion) => None,
        (_, MethodChoice::Neural(m)) => Some(m),
    };
    let Some(method) = neural else {
        if mode != Mode::Reference {
            return Err(ConfigError {
                key: Some("method".into()),
                message: format!("`{}` is a classical solver; use the `reference` subcommand", cfg.method.name()),
            }
            .into());
        }
        let sol = if cfg.method == MethodChoice::DriftDiffusion {
            run_drift_diffusion(&problem, &grid, &basis, cfg.dt, cfg.t_final)
        } else {
            run_reference(&problem, cfg.eps, &grid, &basis, cfg.dt, cfg.t_final)
        }
        .map_err(core)?;
        out.t_final = *sol.times.last().unwrap_or(&0.0);
        out.rho_columns.push(("rho".into(), sol.final_rho().to_vec()));
        if with_phi {
            out.phi_columns.push(("phi".into(), sol.final_phi().to_vec()));
        }
        out.trajectory = Some(sol);
        out.wall_time_s = started.elapsed().as_secs_f64();
        return Ok(out);
    };

    let truth = run_reference(&problem, cfg.eps, &grid, &basis, cfg.dt, cfg.t_final).map_err(core)?;
    let target = ReferenceTarget::from_solution(&truth, with_phi);
    out.t_final = target.t;
    let colloc = CollocationSet::uniform(&problem, &basis, cfg.nt, cfg.nx).map_err(core)?;
    let arch = cfg.architecture();
    let clock = WallClock(Instant::now());
    let mut settings = TrainingSettings::paper(cfg.variant());
    settings.epochs = cfg.epochs;
    settings.pretrain_epochs = cfg.pretrain_epochs;
    settings.pretrain_schedule = cfg.pretrain_schedule();
    settings.log_every = cfg.log_every;
    settings.divergence_threshold = cfg.divergence_threshold;
    settings.sigma_lr_scale = cfg.sigma_lr_scale;

    match mode {
        Mode::Forward => {
            let ctx = LossContext::new(&problem, &basis, &colloc, cfg.weights(), None).map_err(core)?;
            settings.schedule = cfg.schedule(false);
            let mut bundle = NetworkBundle::new(method, &arch, with_phi, cfg.seed).map_err(core)?;
            let mut pretraining = method.is_bi_fidelity() && cfg.pretrain_epochs > 0;
            let mut seen_any = false;
            let mut observer = |r: &EpochRecord| {
                if pretraining && r.epoch == 0 && seen_any {
                    pretraining = false;
                }
                seen_any = true;
                let stage = if pretraining { "pretrain" } else { "main" };
                if r.rel_error.is_some() {
                    progress(stage, r);
                }
            };
            let log = train_forward(&ctx, &mut bundle, &settings, cfg.eps, Some(&target), &clock, &mut observer)
                .map_err(core)?;
            let rows = log.pretrain.iter().map(|r| ("pretrain", r)).chain(log.records.iter().map(|r| ("main", r)));
            out.history = rows
                .map(|(s, r)| HistoryRow {
                    stage: s.into(),
                    record: r.clone(),
                })
                .collect();
            out.epochs = log.records.len();
            out.negative_density_events = log.negative_density_events;
            let pts = target.points();
            let rho = bundle.rho_from_bundle(cfg.eps, &pts).map_err(core)?.value;
            out.rel_error_rho = log.final_rel_error;
            out.rel_error_phi = log.final_rel_error_phi;
            out.rho_columns.push(("rho".into(), rho));
            out.rho_columns.push(("rho_reference".into(), target.rho.clone()));
            if let (Some(net), Some(phi_ref)) = (bundle.net(NetSlot::Phi), &target.phi) {
                out.phi_columns.push(("phi".into(), net.forward(&pts).map_err(core)?));
                out.phi_columns.push(("phi_reference".into(), phi_ref.clone()));
            }
            if cfg.checkpoint {
                out.networks = named_networks(&bundle, "");
            }
        }
        Mode::Inverse => {
            let n_phi = if with_phi { cfg.n_obs_phi } else { 0 };
            let obs = ObservationSet::sample(&truth, cfg.n_obs_rho, n_phi, cfg.noise, cfg.seed).map_err(core)?;
            let ctx = LossContext::new(&problem, &basis, &colloc, cfg.weights(), Some(&obs)).map_err(core)?;
            settings.schedule = cfg.schedule(true);
            let pts = target.points();
            for (k, &sigma0) in cfg.sigma0.iter().enumerate() {
                let stage = format!("run{k}");
                let mut bundle = NetworkBundle::new(method, &arch, with_phi, cfg.seed).map_err(core)?;
                let mut observer = |r: &EpochRecord| {
                    if r.rel_error.is_some() {
                        progress(&stage, r);
                    }
                };
                let (sigma_hat, log) = train_inverse(
                    &ctx,
                    &mut bundle,
                    &settings,
                    cfg.eps,
                    sigma0,
                    Some(&target),
                    &clock,
                    &mut observer,
                )
                .map_err(core)?;
                let mut trajectory: Vec<(usize, f64)> =
                    log.records.iter().filter_map(|r| r.sigma.map(|s| (r.epoch, s))).collect();
                trajectory.push((log.records.len(), sigma_hat));
                out.sigma_runs.push(SigmaRun {
                    sigma0,
                    sigma_hat,
                    trajectory,
                    rel_error_rho: log.final_rel_error,
                });
                out.history.extend(log.records.iter().map(|r| HistoryRow {
                    stage: stage.clone(),
                    record: r.clone(),
                }));
                out.epochs = log.records.len();
                out.negative_density_events += log.negative_density_events;
                let rho = bundle.rho_from_bundle(cfg.eps, &pts).map_err(core)?.value;
                out.rho_columns.push((format!("rho_{stage}"), rho));
                if let Some(net) = bundle.net(NetSlot::Phi) {
                    out.phi_columns.push((format!("phi_{stage}"), net.forward(&pts).map_err(core)?));
                }
                if cfg.checkpoint {
                    out.networks.extend(named_networks(&bundle, &format!("{stage}_")));
                }
            }
            out.rho_columns.push(("rho_reference".into(), target.rho.clone()));
            if let Some(phi_ref) = &target.phi {
                out.phi_columns.push(("phi_reference".into(), phi_ref.clone()));
            }
            // mean over runs of the final-slice error
            let errs: Vec<f64> = out.sigma_runs.iter().filter_map(|r| r.rel_error_rho).collect();
            if !errs.is_empty() {
                out.rel_error_rho = Some(errs.iter().sum::<f64>() / errs.len() as f64);
            }
            let phi_errs: Vec<f64> = out
                .phi_columns
                .iter()
                .filter(|(n, _)| n != "phi_reference")
                .filter_map(|(_, p)| target.phi.as_ref().and_then(|r| relative_l2_error(p, r).ok()))
                .collect();
            if !phi_errs.is_empty() {
                out.rel_error_phi = Some(phi_errs.iter().sum::<f64>() / phi_errs.len() as f64);
            }
        }
        Mode::Reference => unreachable!("classical solvers handled above"),
    }
    out.wall_time_s = started.elapsed().as_secs_f64();
    Ok(out)
}

fn named_networks(bundle: &NetworkBundle, prefix: &str) -> Vec<(String, DenseNet)> {
    bundle
        .present()
        .into_iter()
        .filter_map(|s| bundle.net(s).map(|n| (format!("{prefix}{}", s.name()), n.clone())))
        .collect()
}
