//! Forward and inverse training workflows.
//!
//! Training is full-batch and single-threaded, so a run is a deterministic
//! function of the initial bundle and the settings.

use alloc::format;
use alloc::vec::Vec;

use crate::bundle::{NetSlot, NetworkBundle};
use crate::error::{Error, Result};
use crate::losses::{loss_gradient, DiffusionVariant, LossBreakdown, LossContext, Objective};
use crate::optim::{AdamState, LrSchedule};
use crate::reference::ReferenceSolution;

/// Wall-clock source; the core crate has no access to system time.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that always reads zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSettings {
    /// Main-stage epochs (stage two for the bi-fidelity methods).
    pub epochs: usize,
    /// Stage-one epochs for `ρ_diff`.
    pub pretrain_epochs: usize,
    pub schedule: LrSchedule,
    pub pretrain_schedule: LrSchedule,
    pub diffusion_variant: DiffusionVariant,
    /// Relative-error cadence in epochs.
    pub log_every: usize,
    /// Abort once the total loss exceeds this value.
    pub divergence_threshold: f64,
    /// Keep the Poisson residual in the self-consistent inverse loss.
    pub inverse_poisson: bool,
    /// Multiplier on the learning rate of the `σ` parameter.
    pub sigma_lr_scale: f64,
}

impl TrainingSettings {
    /// 20000 epochs at learning rate 1e-4 for both stages.
    pub fn paper(diffusion_variant: DiffusionVariant) -> Self {
        TrainingSettings {
            epochs: 20_000,
            pretrain_epochs: 20_000,
            schedule: LrSchedule::constant(1e-4),
            pretrain_schedule: LrSchedule::constant(1e-4),
            diffusion_variant,
            log_every: 100,
            divergence_threshold: 1e6,
            inverse_poisson: true,
            sigma_lr_scale: 1.0,
        }
    }

    /// The inverse schedule: decay by 0.8 every 1000 epochs down to 1e-6.
    pub fn paper_inverse() -> Self {
        TrainingSettings {
            schedule: LrSchedule::step_decay(1e-4, 0.8, 1000, 1e-6),
            ..Self::paper(DiffusionVariant::V1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.pretrain_schedule.validate()?;
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be positive"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::invalid("divergence threshold must be positive"));
        }
        if !(self.sigma_lr_scale > 0.0) || !self.sigma_lr_scale.is_finite() {
            return Err(Error::invalid("sigma learning-rate scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss at the parameters before this epoch's update.
    pub loss: LossBreakdown,
    pub lr: f64,
    pub sigma: Option<f64>,
    pub rel_error: Option<f64>,
    pub rel_error_phi: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    /// Stage-one rows of the bi-fidelity methods.
    pub pretrain: Vec<EpochRecord>,
    /// One row per main-stage epoch.
    pub records: Vec<EpochRecord>,
    pub final_rel_error: Option<f64>,
    pub final_rel_error_phi: Option<f64>,
    /// Evaluations at which some predicted density was not positive.
    pub negative_density_events: usize,
}

impl TrainingLog {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    /// `(epoch, rel_error)` pairs of the main stage.
    pub fn error_history(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.rel_error.map(|e| (r.epoch, e))).collect()
    }
}

/// Final-time reference slice the networks are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTarget {
    pub t: f64,
    pub xs: Vec<f64>,
    pub rho: Vec<f64>,
    pub phi: Option<Vec<f64>>,
}

impl ReferenceTarget {
    pub fn from_solution(sol: &ReferenceSolution, with_phi: bool) -> Self {
        ReferenceTarget {
            t: sol.times.last().copied().unwrap_or(0.0),
            xs: sol.grid.nodes.clone(),
            rho: sol.final_rho().to_vec(),
            phi: with_phi.then(|| sol.final_phi().to_vec()),
        }
    }

    pub fn points(&self) -> Vec<f64> {
        self.xs.iter().flat_map(|&x| [self.t, x]).collect()
    }
}

/// `√(Σ|pred - ref|² / Σ|ref|²)`.
pub fn relative_l2_error(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::invalid("relative error: lengths differ"));
    }
    let den: f64 = reference.iter().map(|r| r * r).sum();
    if !(den > 0.0) {
        return Err(Error::invalid("relative error: reference has zero norm"));
    }
    let num: f64 = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum();
    Ok(libm::sqrt(num / den))
}

/// Scores the bundle's density (and potential) at the reference slice.
/// With `diff_only`, `ρ_diff` alone is scored.
pub fn score(
    bundle: &NetworkBundle,
    eps: f64,
    target: &ReferenceTarget,
    diff_only: bool,
) -> Result<(f64, Option<f64>, bool)> {
    let pts = target.points();
    let rho = if diff_only {
        bundle.require(NetSlot::RhoDiff)?.forward(&pts)?
    } else {
        bundle.rho_from_bundle(eps, &pts)?.value
    };
    let negative = rho.iter().any(|&r| !(r > 0.0));
    let e = relative_l2_error(&rho, &target.rho)?;
    let ephi = match (&target.phi, bundle.net(NetSlot::Phi)) {
        (Some(phi), Some(net)) => Some(relative_l2_error(&net.forward(&pts)?, phi)?),
        _ => None,
    };
    Ok((e, ephi, negative))
}

struct Stage<'r> {
    objective: Objective,
    epochs: usize,
    schedule: LrSchedule,
    eps: f64,
    target: Option<&'r ReferenceTarget>,
    diff_only: bool,
}

/// Per-epoch progress callback.
pub type Observer<'o> = dyn FnMut(&EpochRecord) + 'o;

#[allow(clippy::too_many_arguments)]
fn run_stage(
    ctx: &LossContext<'_>,
    bundle: &mut NetworkBundle,
    stage: &Stage<'_>,
    settings: &TrainingSettings,
    clock: &dyn Clock,
    observer: &mut Observer<'_>,
    rows: &mut Vec<EpochRecord>,
    negative_events: &mut usize,
) -> Result<()> {
    let slots = bundle.trainable();
    let mut states: Vec<(NetSlot, AdamState)> = slots
        .iter()
        .map(|&s| (s, AdamState::new(bundle.net(s).map_or(0, |n| n.params().len()))))
        .collect();
    let mut sigma_state = bundle.sigma_param().map(|_| AdamState::new(1));
    let start = clock.seconds();
    let mut last = start;

    for epoch in 0..stage.epochs {
        let lr = stage.schedule.lr_at(epoch);
        let eval = loss_gradient(ctx, bundle, &stage.objective)?;
        let loss = eval.breakdown;
        if !loss.total.is_finite() || loss.total > settings.divergence_threshold {
            return Err(Error::Divergence {
                epoch,
                total: loss.total,
                detail: format!("terms {}", loss.csv_row(epoch)),
            });
        }
        let grad = eval.gradient.expect("gradient requested");
        if !grad.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite gradient at epoch {epoch}; terms {}",
                loss.csv_row(epoch)
            )));
        }
        let (rel_error, rel_error_phi) = match stage.target {
            Some(t) if epoch % settings.log_every == 0 => {
                let (e, ep, neg) = score(bundle, stage.eps, t, stage.diff_only)?;
                *negative_events += usize::from(neg);
                (Some(e), ep)
            }
            _ => (None, None),
        };
        let now = clock.seconds();
        let record = EpochRecord {
            epoch,
            loss,
            lr,
            sigma: bundle.sigma(),
            rel_error,
            rel_error_phi,
            wall_time_s: now - last,
        };
        last = now;
        observer(&record);
        rows.push(record);

        for (slot, state) in states.iter_mut() {
            let g = grad.net(*slot).ok_or_else(|| {
                Error::NumericalFailure(format!("missing gradient for `{}`", slot.name()))
            })?;
            let net = bundle.net_mut(*slot).expect("trainable slot is present");
            state.step(net.params_mut(), g, lr)?;
        }
        if let (Some(state), Some(gs)) = (sigma_state.as_mut(), grad.sigma) {
            let mut s = [bundle.sigma_param().expect("sigma is trainable")];
            state.step(&mut s, &[gs], lr * settings.sigma_lr_scale)?;
            bundle.set_sigma_param(s[0]);
        }
    }
    Ok(())
}

fn finish(bundle: &NetworkBundle, eps: f64, target: Option<&ReferenceTarget>, log: &mut TrainingLog) -> Result<()> {
    if let Some(t) = target {
        let (e, ep, neg) = score(bundle, eps, t, false)?;
        log.final_rel_error = Some(e);
        log.final_rel_error_phi = ep;
        log.negative_density_events += usize::from(neg);
    }
    Ok(())
}

/// Forward training.
///
/// Bi-fidelity methods first fit `ρ_diff` (with `g` and `φ` where the
/// pre-training loss uses them) for `pretrain_epochs`, then freeze `ρ_diff`
/// and train the remaining networks on the bi-fidelity loss. The other
/// methods train all their networks on their own loss.
pub fn train_forward(
    ctx: &LossContext<'_>,
    bundle: &mut NetworkBundle,
    settings: &TrainingSettings,
    eps: f64,
    target: Option<&ReferenceTarget>,
    clock: &dyn Clock,
    observer: &mut Observer<'_>,
) -> Result<TrainingLog> {
    settings.validate()?;
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    bundle.clear_sigma();
    let self_consistent = ctx.problem.is_self_consistent();
    let method = bundle.method;
    let mut log = TrainingLog::default();

    if method.is_bi_fidelity() && settings.pretrain_epochs > 0 {
        let uses_g = settings.diffusion_variant == DiffusionVariant::V2;
        bundle.unfreeze(NetSlot::RhoDiff);
        bundle.freeze(NetSlot::RhoCorr);
        if !uses_g {
            bundle.freeze(NetSlot::G);
        }
        let stage = Stage {
            objective: Objective::pretrain(settings.diffusion_variant, self_consistent),
            epochs: settings.pretrain_epochs,
            schedule: settings.pretrain_schedule,
            eps,
            target,
            diff_only: true,
        };
        let mut rows = Vec::new();
        let mut neg = 0;
        run_stage(ctx, bundle, &stage, settings, clock, observer, &mut rows, &mut neg)?;
        log.pretrain = rows;
        log.negative_density_events += neg;
        bundle.unfreeze(NetSlot::RhoCorr);
        bundle.unfreeze(NetSlot::G);
    }
    if method.is_bi_fidelity() {
        bundle.freeze(NetSlot::RhoDiff);
    }
    let stage = Stage {
        objective: Objective::forward(method, eps, self_consistent),
        epochs: settings.epochs,
        schedule: settings.schedule,
        eps,
        target,
        diff_only: false,
    };
    let mut rows = Vec::new();
    let mut neg = 0;
    run_stage(ctx, bundle, &stage, settings, clock, observer, &mut rows, &mut neg)?;
    log.records = rows;
    log.negative_density_events += neg;
    finish(bundle, eps, target, &mut log)?;
    Ok(log)
}

/// Joint inverse training of every network and `σ = softplus(s)` with
/// `softplus(s₀) = sigma0`. Returns the final `σ`.
///
/// Bundles without a diffusion surrogate (PINN, APNN) drop the diffusion
/// term and fit residual + data (+ Poisson).
#[allow(clippy::too_many_arguments)]
pub fn train_inverse(
    ctx: &LossContext<'_>,
    bundle: &mut NetworkBundle,
    settings: &TrainingSettings,
    eps: f64,
    sigma0: f64,
    target: Option<&ReferenceTarget>,
    clock: &dyn Clock,
    observer: &mut Observer<'_>,
) -> Result<(f64, TrainingLog)> {
    settings.validate()?;
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    if ctx.obs.is_none() {
        return Err(Error::invalid("inverse training needs observations"));
    }
    bundle.set_sigma(sigma0)?;
    for slot in NetSlot::ALL {
        bundle.unfreeze(slot);
    }
    let poisson = ctx.problem.is_self_consistent() && settings.inverse_poisson;
    let mut objective = Objective::inverse(bundle.method, eps, poisson);
    if bundle.net(NetSlot::RhoDiff).is_none() {
        objective.diffusion = None;
    }
    let stage = Stage {
        objective,
        epochs: settings.epochs,
        schedule: settings.schedule,
        eps,
        target,
        diff_only: false,
    };
    let mut log = TrainingLog::default();
    let mut neg = 0;
    run_stage(ctx, bundle, &stage, settings, clock, observer, &mut log.records, &mut neg)?;
    log.negative_density_events = neg;
    finish(bundle, eps, target, &mut log)?;
    Ok((bundle.sigma().expect("sigma is trainable"), log))
}
