//! Flat `key=value` experiment configuration.
//!
//! One assignment per line (or several separated by whitespace); `#` starts a
//! comment. Every key is optional and unknown keys are rejected. The defaults
//! are the published training settings; see [`KEYS`] for the schema.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use biapnn_core::bundle::{Architecture, Method};
use biapnn_core::collocation::PenaltyWeights;
use biapnn_core::losses::DiffusionVariant;
use biapnn_core::optim::LrSchedule;
use biapnn_core::problem::ProblemSpec;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(key: &str, message: impl Into<String>) -> Self {
        ConfigError {
            key: Some(key.to_string()),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        ConfigError {
            key: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "config key `{k}`: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemChoice {
    Problem1,
    Problem2,
}

impl ProblemChoice {
    pub fn name(self) -> &'static str {
        match self {
            ProblemChoice::Problem1 => "problem1",
            ProblemChoice::Problem2 => "problem2",
        }
    }

    pub fn spec(self) -> ProblemSpec {
        match self {
            ProblemChoice::Problem1 => ProblemSpec::problem_one(),
            ProblemChoice::Problem2 => ProblemSpec::problem_two(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Neural(Method),
    Reference,
    DriftDiffusion,
}

impl MethodChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reference" => Some(MethodChoice::Reference),
            "drift_diffusion" => Some(MethodChoice::DriftDiffusion),
            other => Method::parse(other).map(MethodChoice::Neural),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodChoice::Neural(m) => m.name(),
            MethodChoice::Reference => "reference",
            MethodChoice::DriftDiffusion => "drift_diffusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    StepDecay,
}

/// A fully resolved experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemChoice,
    pub method: MethodChoice,
    pub eps: f64,
    pub sigma_true: f64,
    pub layers: usize,
    pub neurons: usize,
    pub diff_layers: Option<usize>,
    pub corr_layers: Option<usize>,
    pub g_layers: Option<usize>,
    pub phi_layers: usize,
    pub phi_neurons: Option<usize>,
    pub diffusion_variant: Option<DiffusionVariant>,
    pub schedule: Option<ScheduleKind>,
    pub lr: f64,
    pub pretrain_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub lr_floor: f64,
    pub sigma_lr_scale: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub n_obs_rho: usize,
    pub n_obs_phi: usize,
    pub noise: f64,
    pub sigma0: Vec<f64>,
    pub eps_list: Vec<f64>,
    pub nv: usize,
    pub nt: usize,
    pub nx: usize,
    pub dx: f64,
    pub dt: f64,
    pub t_final: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_diff1: f64,
    pub lambda_diff2: f64,
    pub w_d_rho: f64,
    pub w_d_phi: f64,
    pub w_poisson: f64,
    pub log_every: usize,
    pub divergence_threshold: f64,
    pub checkpoint: bool,
    pub out: Option<PathBuf>,
}

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("problem", "problem1", "problem1 (given potential) or problem2 (Boltzmann-Poisson)"),
    ("method", "bi_implicit", "pinn, apnn, bi_explicit, bi_implicit, reference or drift_diffusion"),
    ("eps", "1e-8", "Knudsen number, > 0"),
    ("sigma_true", "2", "scattering coefficient of the simulated system"),
    ("layers", "4", "hidden layers of every density and micro network"),
    ("neurons", "128", "neurons per hidden layer"),
    ("diff_layers", "layers", "hidden layers of the diffusion surrogate"),
    ("corr_layers", "layers", "hidden layers of the correction network (0 allowed)"),
    ("g_layers", "layers", "hidden layers of the micro network"),
    ("phi_layers", "14", "hidden layers of the potential network"),
    ("phi_neurons", "neurons", "neurons per hidden layer of the potential network"),
    ("diffusion_variant", "v1 / v2", "pre-training loss; v1 for problem1, v2 for problem2"),
    ("schedule", "constant / step_decay", "learning-rate schedule; step_decay for inverse runs"),
    ("lr", "1e-4", "base learning rate"),
    ("pretrain_lr", "lr", "learning rate of the diffusion pre-training stage"),
    ("decay_factor", "0.8", "step-decay factor"),
    ("decay_interval", "1000", "epochs between decays"),
    ("lr_floor", "1e-6", "step-decay floor"),
    ("sigma_lr_scale", "1", "multiplier on the learning rate of sigma (inverse)"),
    ("epochs", "20000", "main-stage epochs"),
    ("pretrain_epochs", "20000", "diffusion pre-training epochs (bi-fidelity methods)"),
    ("seed", "0", "network initialization and observation sampling seed"),
    ("n_obs_rho", "100", "density observations (inverse)"),
    ("n_obs_phi", "100", "potential observations (inverse, problem2)"),
    ("noise", "0", "relative Gaussian observation noise"),
    ("sigma0", "0.5,1.0,1.5,1.7,1.9", "initial guesses of the inverse runs"),
    ("eps_list", "1,0.1,1e-3,1e-8", "Knudsen numbers of a sweep"),
    ("nv", "8", "Gauss-Hermite velocity nodes"),
    ("nt", "20", "collocation times"),
    ("nx", "99", "interior collocation positions"),
    ("dx", "0.01", "reference-solver grid spacing"),
    ("dt", "0.005", "reference-solver time step"),
    ("t_final", "0.1", "final time"),
    ("lambda1", "1", "boundary penalty of the kinetic losses"),
    ("lambda2", "1", "initial penalty of the kinetic losses"),
    ("lambda_diff1", "1", "boundary penalty of the diffusion loss"),
    ("lambda_diff2", "1", "initial penalty of the diffusion loss"),
    ("w_d_rho", "1", "density data weight"),
    ("w_d_phi", "1", "potential data weight"),
    ("w_poisson", "1", "Poisson residual weight"),
    ("log_every", "100", "epochs between relative-error evaluations"),
    ("divergence_threshold", "1e6", "abort once the total loss exceeds this"),
    ("checkpoint", "false", "write the trained parameters to checkpoints/"),
    ("out", "results", "output directory"),
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: ProblemChoice::Problem1,
            method: MethodChoice::Neural(Method::BiImplicit),
            eps: 1e-8,
            sigma_true: 2.0,
            layers: 4,
            neurons: 128,
            diff_layers: None,
            corr_layers: None,
            g_layers: None,
            phi_layers: 14,
            phi_neurons: None,
            diffusion_variant: None,
            schedule: None,
            lr: 1e-4,
            pretrain_lr: f64::NAN,
            decay_factor: 0.8,
            decay_interval: 1000,
            lr_floor: 1e-6,
            sigma_lr_scale: 1.0,
            epochs: 20_000,
            pretrain_epochs: 20_000,
            seed: 0,
            n_obs_rho: 100,
            n_obs_phi: 100,
            noise: 0.0,
            sigma0: vec![0.5, 1.0, 1.5, 1.7, 1.9],
            eps_list: vec![1.0, 0.1, 1e-3, 1e-8],
            nv: 8,
            nt: 20,
            nx: 99,
            dx: 0.01,
            dt: 0.005,
            t_final: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_diff1: 1.0,
            lambda_diff2: 1.0,
            w_d_rho: 1.0,
            w_d_phi: 1.0,
            w_poisson: 1.0,
            log_every: 100,
            divergence_threshold: 1e6,
            checkpoint: false,
            out: None,
        }
    }
}

fn real(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v.parse().map_err(|_| ConfigError::at(key, format!("`{v}` is not a number")))?;
    if !x.is_finite() {
        return Err(ConfigError::at(key, "must be finite"));
    }
    Ok(x)
}

fn count(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse()
        .map_err(|_| ConfigError::at(key, format!("`{v}` is not a non-negative integer")))
}

fn reals(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',').map(|s| real(key, s.trim())).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::at(key, format!("`{v}` is not a boolean"))),
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text, applying the defaults and validating the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("");
            for item in line.split_whitespace() {
                let (k, v) = item.split_once('=').ok_or_else(|| {
                    ConfigError::general(format!("line {}: `{item}` is not a key=value pair", lineno + 1))
                })?;
                if seen.insert(k.to_string(), ()).is_some() {
                    return Err(ConfigError::at(k, "given more than once"));
                }
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::general(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value. Call [`validate`](Self::validate) afterwards.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "problem" => {
                self.problem = match v {
                    "problem1" => ProblemChoice::Problem1,
                    "problem2" => ProblemChoice::Problem2,
                    _ => return Err(ConfigError::at(key, format!("unknown problem `{v}`"))),
                }
            }
            "method" => {
                self.method = MethodChoice::parse(v).ok_or_else(|| ConfigError::at(key, format!("unknown method `{v}`")))?
            }
            "eps" => self.eps = real(key, v)?,
            "sigma_true" => self.sigma_true = real(key, v)?,
            "layers" => self.layers = count(key, v)?,
            "neurons" => self.neurons = count(key, v)?,
            "diff_layers" => self.diff_layers = Some(count(key, v)?),
            "corr_layers" => self.corr_layers = Some(count(key, v)?),
            "g_layers" => self.g_layers = Some(count(key, v)?),
            "phi_layers" => self.phi_layers = count(key, v)?,
            "phi_neurons" => self.phi_neurons = Some(count(key, v)?),
            "diffusion_variant" => {
                self.diffusion_variant =
                    Some(DiffusionVariant::parse(v).ok_or_else(|| ConfigError::at(key, format!("unknown variant `{v}`")))?)
            }
            "schedule" => {
                self.schedule = Some(match v {
                    "constant" => ScheduleKind::Constant,
                    "step_decay" => ScheduleKind::StepDecay,
                    _ => return Err(ConfigError::at(key, format!("unknown schedule `{v}`"))),
                })
            }
            "lr" => self.lr = real(key, v)?,
            "pretrain_lr" => self.pretrain_lr = real(key, v)?,
            "decay_factor" => self.decay_factor = real(key, v)?,
            "decay_interval" => self.decay_interval = count(key, v)?,
            "lr_floor" => self.lr_floor = real(key, v)?,
            "sigma_lr_scale" => self.sigma_lr_scale = real(key, v)?,
            "epochs" => self.epochs = count(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = count(key, v)?,
            "seed" => self.seed = v.parse().map_err(|_| ConfigError::at(key, format!("`{v}` is not a seed")))?,
            "n_obs_rho" => self.n_obs_rho = count(key, v)?,
            "n_obs_phi" => self.n_obs_phi = count(key, v)?,
            "noise" => self.noise = real(key, v)?,
            "sigma0" => self.sigma0 = reals(key, v)?,
            "eps_list" => self.eps_list = reals(key, v)?,
            "nv" => self.nv = count(key, v)?,
            "nt" => self.nt = count(key, v)?,
            "nx" => self.nx = count(key, v)?,
            "dx" => self.dx = real(key, v)?,
            "dt" => self.dt = real(key, v)?,
            "t_final" => self.t_final = real(key, v)?,
            "lambda1" => self.lambda1 = real(key, v)?,
            "lambda2" => self.lambda2 = real(key, v)?,
            "lambda_diff1" => self.lambda_diff1 = real(key, v)?,
            "lambda_diff2" => self.lambda_diff2 = real(key, v)?,
            "w_d_rho" => self.w_d_rho = real(key, v)?,
            "w_d_phi" => self.w_d_phi = real(key, v)?,
            "w_poisson" => self.w_poisson = real(key, v)?,
            "log_every" => self.log_every = count(key, v)?,
            "divergence_threshold" => self.divergence_threshold = real(key, v)?,
            "checkpoint" => self.checkpoint = boolean(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            _ => return Err(ConfigError::at(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.eps > 0.0) {
            return Err(ConfigError::at("eps", "must be positive"));
        }
        if !(self.sigma_true > 0.0) {
            return Err(ConfigError::at("sigma_true", "must be positive"));
        }
        if self.neurons == 0 {
            return Err(ConfigError::at("neurons", "must be positive"));
        }
        if self.phi_neurons == Some(0) {
            return Err(ConfigError::at("phi_neurons", "must be positive"));
        }
        for (k, x) in [("lr", self.lr), ("decay_factor", self.decay_factor)] {
            if !(x > 0.0) {
                return Err(ConfigError::at(k, "must be positive"));
            }
        }
        if !self.pretrain_lr.is_nan() && !(self.pretrain_lr > 0.0) {
            return Err(ConfigError::at("pretrain_lr", "must be positive"));
        }
        if self.decay_factor > 1.0 {
            return Err(ConfigError::at("decay_factor", "must not exceed 1"));
        }
        if self.decay_interval == 0 {
            return Err(ConfigError::at("decay_interval", "must be positive"));
        }
        if !(self.lr_floor >= 0.0) {
            return Err(ConfigError::at("lr_floor", "must be non-negative"));
        }
        if !(self.noise >= 0.0) {
            return Err(ConfigError::at("noise", "must be non-negative"));
        }
        if self.sigma0.is_empty() || self.sigma0.iter().any(|s| !(*s > 0.0)) {
            return Err(ConfigError::at("sigma0", "needs at least one positive value"));
        }
        if self.eps_list.is_empty() || self.eps_list.iter().any(|e| !(*e > 0.0)) {
            return Err(ConfigError::at("eps_list", "needs at least one positive value"));
        }
        if self.nv == 0 || self.nt == 0 || self.nx == 0 {
            return Err(ConfigError::general("nv, nt and nx must be positive"));
        }
        for (k, x) in [("dx", self.dx), ("dt", self.dt), ("t_final", self.t_final)] {
            if !(x > 0.0) {
                return Err(ConfigError::at(k, "must be positive"));
            }
        }
        if self.log_every == 0 {
            return Err(ConfigError::at("log_every", "must be positive"));
        }
        if !(self.sigma_lr_scale > 0.0) || !self.sigma_lr_scale.is_finite() {
            return Err(ConfigError::at("sigma_lr_scale", "must be positive"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(ConfigError::at("divergence_threshold", "must be positive"));
        }
        self.weights()
            .validate()
            .map_err(|e| ConfigError::general(e.to_string()))?;
        if self.diffusion_variant == Some(DiffusionVariant::V2) && self.problem == ProblemChoice::Problem1 {
            return Err(ConfigError::at(
                "diffusion_variant",
                "v2 needs the self-consistent potential of problem2",
            ));
        }
        Ok(())
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        let mut p = self.problem.spec().with_sigma(self.sigma_true);
        p.t_final = self.t_final;
        p
    }

    pub fn with_phi(&self) -> bool {
        self.problem == ProblemChoice::Problem2
    }

    pub fn variant(&self) -> DiffusionVariant {
        self.diffusion_variant.unwrap_or(match self.problem {
            ProblemChoice::Problem1 => DiffusionVariant::V1,
            ProblemChoice::Problem2 => DiffusionVariant::V2,
        })
    }

    pub fn architecture(&self) -> Architecture {
        let hidden = |layers: usize| vec![self.neurons; layers];
        Architecture {
            rho: hidden(self.layers),
            rho_diff: hidden(self.diff_layers.unwrap_or(self.layers)),
            rho_corr: hidden(self.corr_layers.unwrap_or(self.layers)),
            g: hidden(self.g_layers.unwrap_or(self.layers)),
            phi: vec![self.phi_neurons.unwrap_or(self.neurons); self.phi_layers],
        }
    }

    pub fn weights(&self) -> PenaltyWeights {
        PenaltyWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda1_diff: self.lambda_diff1,
            lambda2_diff: self.lambda_diff2,
            w_d_rho: self.w_d_rho,
            w_d_phi: self.w_d_phi,
            w_poisson: self.w_poisson,
        }
    }

    /// Main-stage schedule; inverse runs default to step decay.
    pub fn schedule(&self, inverse: bool) -> LrSchedule {
        let kind = self.schedule.unwrap_or(if inverse {
            ScheduleKind::StepDecay
        } else {
            ScheduleKind::Constant
        });
        match kind {
            ScheduleKind::Constant => LrSchedule::constant(self.lr),
            ScheduleKind::StepDecay => LrSchedule::step_decay(self.lr, self.decay_factor, self.decay_interval, self.lr_floor),
        }
    }

    pub fn pretrain_schedule(&self) -> LrSchedule {
        LrSchedule::constant(if self.pretrain_lr.is_nan() { self.lr } else { self.pretrain_lr })
    }

    /// Resolved configuration as sorted `key=value` lines, output directory
    /// excluded. Parsing it back gives the same experiment.
    pub fn canonical(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("problem", self.problem.name().into());
        m.insert("method", self.method.name().into());
        m.insert("eps", format!("{:e}", self.eps));
        m.insert("sigma_true", format!("{:e}", self.sigma_true));
        m.insert("layers", self.layers.to_string());
        m.insert("neurons", self.neurons.to_string());
        let arch = self.architecture();
        m.insert("diff_layers", arch.rho_diff.len().to_string());
        m.insert("corr_layers", arch.rho_corr.len().to_string());
        m.insert("g_layers", arch.g.len().to_string());
        m.insert("phi_layers", self.phi_layers.to_string());
        m.insert("phi_neurons", self.phi_neurons.unwrap_or(self.neurons).to_string());
        m.insert("diffusion_variant", self.variant().name().into());
        if let Some(s) = self.schedule {
            m.insert(
                "schedule",
                match s {
                    ScheduleKind::Constant => "constant",
                    ScheduleKind::StepDecay => "step_decay",
                }
                .into(),
            );
        }
        m.insert("lr", format!("{:e}", self.lr));
        if !self.pretrain_lr.is_nan() {
            m.insert("pretrain_lr", format!("{:e}", self.pretrain_lr));
        }
        m.insert("decay_factor", format!("{:e}", self.decay_factor));
        m.insert("decay_interval", self.decay_interval.to_string());
        m.insert("lr_floor", format!("{:e}", self.lr_floor));
        m.insert("sigma_lr_scale", format!("{:e}", self.sigma_lr_scale));
        m.insert("epochs", self.epochs.to_string());
        m.insert("pretrain_epochs", self.pretrain_epochs.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("n_obs_rho", self.n_obs_rho.to_string());
        m.insert("n_obs_phi", self.n_obs_phi.to_string());
        m.insert("noise", format!("{:e}", self.noise));
        m.insert("sigma0", join(&self.sigma0));
        m.insert("eps_list", join(&self.eps_list));
        m.insert("nv", self.nv.to_string());
        m.insert("nt", self.nt.to_string());
        m.insert("nx", self.nx.to_string());
        m.insert("dx", format!("{:e}", self.dx));
        m.insert("dt", format!("{:e}", self.dt));
        m.insert("t_final", format!("{:e}", self.t_final));
        for (k, x) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_diff1", self.lambda_diff1),
            ("lambda_diff2", self.lambda_diff2),
            ("w_d_rho", self.w_d_rho),
            ("w_d_phi", self.w_d_phi),
            ("w_poisson", self.w_poisson),
        ] {
            m.insert(k, format!("{x:e}"));
        }
        m.insert("log_every", self.log_every.to_string());
        m.insert("divergence_threshold", format!("{:e}", self.divergence_threshold));
        m.insert("checkpoint", self.checkpoint.to_string());
        m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of [`canonical`](Self::canonical), hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
