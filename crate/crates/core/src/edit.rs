//! The editing loop.
//!
//! Starting from `x^FE = X^src`, each step draws `ε_t`, noises the source,
//! rebuilds the target state, asks a [`PairEstimator`] for the source and
//! target velocities, and moves the edit latent along their difference.

use ndarray::{Array3, Zip};

use crate::error::{FiaError, Result};
use crate::fia::{constrained_velocity_pair, ConstrainedPair, FiaConfig, StepContext};
use crate::model::{guided_velocity, GuidanceConfig, HookPlan, VelocityField};
use crate::prompt::PromptEmbedding;
use crate::schedule::{
    euler_step, interpolate_source, reconstruct_target_state, LatentState, NoiseMode, NoiseSchedule,
    NoiseSource,
};

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub source_latent: Array3<f64>,
    pub p_src: PromptEmbedding,
    pub p_tar: PromptEmbedding,
    pub schedule: NoiseSchedule,
    pub guidance: GuidanceConfig,
    pub fia: FiaConfig,
    pub seed: u64,
    pub noise_mode: NoiseMode,
    /// Keep `x^FE` after every `n`-th step (and the last); `None` keeps none.
    pub snapshot_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step_index: usize,
    pub sigma_t: f64,
    pub sigma_next: f64,
    /// Euclidean norm of `v^Δ`.
    pub v_delta_norm: f64,
    pub fij_active: bool,
    pub snapshot: Option<Array3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditTrace {
    pub records: Vec<StepRecord>,
    pub final_latent: Array3<f64>,
}

/// Produces the source and target velocities for one step.
pub trait PairEstimator {
    fn pair(&self, ctx: &StepContext<'_>) -> Result<ConstrainedPair>;
}

/// The constrained estimator: FIA overrides as configured.
pub struct FiaEstimator<'a> {
    pub field: &'a dyn VelocityField,
    pub cfg: FiaConfig,
}

impl PairEstimator for FiaEstimator<'_> {
    fn pair(&self, ctx: &StepContext<'_>) -> Result<ConstrainedPair> {
        constrained_velocity_pair(self.field, &self.cfg, ctx)
    }
}

/// Plain guided velocities with no hooks at all.
pub struct BackboneEstimator<'a> {
    pub field: &'a dyn VelocityField,
}

impl PairEstimator for BackboneEstimator<'_> {
    fn pair(&self, ctx: &StepContext<'_>) -> Result<ConstrainedPair> {
        let empty = HookPlan::empty();
        let v_src = guided_velocity(self.field, ctx.x_src_t, ctx.p_src, ctx.time, ctx.guidance.mu_src(), &empty)?;
        let v_tar = guided_velocity(self.field, ctx.x_tar_t, ctx.p_tar, ctx.time, ctx.guidance.mu_tar(), &empty)?;
        Ok(ConstrainedPair {
            v_src: v_src.velocity,
            v_tar: v_tar.velocity,
            fij_active: false,
            src_packets: Vec::new(),
            probe_packets: Vec::new(),
            constrained_packets: Vec::new(),
            overrides: empty,
        })
    }
}

/// `v_tar − v_src`; zero wherever the two agree bit for bit.
pub fn velocity_delta(v_tar: &Array3<f64>, v_src: &Array3<f64>) -> Array3<f64> {
    Zip::from(v_tar).and(v_src).map_collect(|&t, &s| t - s)
}

fn check_finite(a: &Array3<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FiaError::NonFinite(what.into()))
    }
}

/// Runs the loop with an arbitrary estimator. `observe` sees every step's
/// velocity pair before the latent moves.
pub fn run_edit_with(
    estimator: &dyn PairEstimator,
    req: &EditRequest,
    mut observe: impl FnMut(usize, &ConstrainedPair),
) -> Result<EditTrace> {
    check_finite(&req.source_latent, "source latent")?;
    if req.snapshot_stride == Some(0) {
        return Err(FiaError::invalid("snapshot stride must be positive"));
    }
    let total = req.schedule.step_count();
    let noise = NoiseSource::new(req.seed);
    let shape = req.source_latent.dim();
    let mut state = LatentState::new(req.source_latent.clone());
    let mut records = Vec::with_capacity(total);

    for step_index in 0..total {
        let at_step = |source: FiaError| FiaError::Step {
            step: step_index,
            source: Box::new(source),
        };
        let (sigma_t, sigma_next) = req.schedule.step_sigmas(step_index);
        let draw = noise.draw(step_index, shape);
        let x_src_t = interpolate_source(state.source(), sigma_t, &draw).map_err(at_step)?;
        let x_tar_t = reconstruct_target_state(state.x_fe(), &x_src_t, state.source()).map_err(at_step)?;
        let ctx = StepContext {
            x_src_t: &x_src_t,
            x_tar_t: &x_tar_t,
            p_src: &req.p_src,
            p_tar: &req.p_tar,
            time: crate::model::TimeStep {
                index: total - step_index,
                sigma: sigma_t,
            },
            step_index,
            total_steps: total,
            guidance: req.guidance,
        };
        let pair = estimator.pair(&ctx).map_err(at_step)?;
        observe(step_index, &pair);
        let v_delta = velocity_delta(&pair.v_tar, &pair.v_src);
        check_finite(&v_delta, "velocity difference").map_err(at_step)?;
        let next = euler_step(state.x_fe(), &v_delta, sigma_next, sigma_t, &draw, req.noise_mode, &noise)
            .map_err(at_step)?;
        check_finite(&next, "edit latent").map_err(at_step)?;
        state.set_x_fe(next).map_err(at_step)?;

        let keep = req
            .snapshot_stride
            .is_some_and(|s| (step_index + 1) % s == 0 || step_index + 1 == total);
        records.push(StepRecord {
            step_index,
            sigma_t,
            sigma_next,
            v_delta_norm: v_delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
            fij_active: pair.fij_active,
            snapshot: keep.then(|| state.x_fe().clone()),
        });
    }

    Ok(EditTrace {
        records,
        final_latent: state.into_x_fe(),
    })
}

/// Edits with the FIA-constrained target velocity.
pub fn run_edit(field: &dyn VelocityField, req: &EditRequest) -> Result<EditTrace> {
    req.fia
        .validate(&field.topology(), req.schedule.step_count())?;
    let estimator = FiaEstimator {
        field,
        cfg: req.fia,
    };
    run_edit_with(&estimator, req, |_, _| {})
}

/// Edits with plain velocities, bypassing every hook.
pub fn run_backbone(field: &dyn VelocityField, req: &EditRequest) -> Result<EditTrace> {
    run_edit_with(&BackboneEstimator { field }, req, |_, _| {})
}

/// Runs the edit with the target branch conditioned exactly like the
/// source: same prompt and same guidance scale.
pub fn run_reconstruction(field: &dyn VelocityField, req: &EditRequest) -> Result<EditTrace> {
    let mut req = req.clone();
    req.p_tar = req.p_src.clone();
    req.guidance = GuidanceConfig::new(req.guidance.mu_src(), req.guidance.mu_src())?;
    run_edit(field, &req)
}
