//! Source-to-target feature interaction inside the velocity network.
//!
//! Each step runs the source branch while recording attention features, then
//! computes the target velocity with two kinds of overrides:
//!
//! - self-attention Q and K become a band-fused mix of source and target
//!   features (every step);
//! - cross-attention Q, K, V and text embedding in the selected blocks are
//!   replaced by the source's (only for the first `fij_step_cutoff` steps).
//!
//! Fusing needs the target's own features, so an extra unconstrained
//! conditional target pass (the probe) runs before the constrained one.

use ndarray::{Array2, Array3};

use crate::error::{FiaError, Result};
use crate::model::{
    guided_velocity, AttentionPacket, AttnKind, GuidanceConfig, HookPlan, Override, SiteId,
    TimeStep, Topology, VelocityField,
};
use crate::prompt::PromptEmbedding;
use crate::spectral::{additive_fuse, fri_fuse, make_gaussian_lowpass, FusionWeights, LowPassFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FriMode {
    /// Cross-weighted band fusion in the frequency domain.
    #[default]
    Freq,
    /// Elementwise mean of source and target features.
    Add,
}

impl FriMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FriMode::Freq => "freq",
            FriMode::Add => "add",
        }
    }
}

impl std::str::FromStr for FriMode {
    type Err = FiaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq" => Ok(FriMode::Freq),
            "add" => Ok(FriMode::Add),
            other => Err(FiaError::invalid(format!("unknown fri mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiaConfig {
    pub fri_enabled: bool,
    pub fri_mode: FriMode,
    pub fusion: FusionWeights,
    pub filter_sigma: f64,
    pub filter_normalized: bool,
    pub fij_enabled: bool,
    /// Steps `0..cutoff` inject; `None` means `⌈0.54·T⌉` (27 of 50).
    pub fij_step_cutoff: Option<usize>,
    /// Inclusive block range; `None` means the cross-only tail.
    pub fij_block_range: Option<(usize, usize)>,
}

impl Default for FiaConfig {
    fn default() -> Self {
        Self {
            fri_enabled: true,
            fri_mode: FriMode::Freq,
            fusion: FusionWeights::default(),
            filter_sigma: 0.9,
            filter_normalized: true,
            fij_enabled: true,
            fij_step_cutoff: None,
            fij_block_range: None,
        }
    }
}

/// Injection cutoff for a run of `total_steps` steps.
pub fn default_fij_cutoff(total_steps: usize) -> usize {
    (54 * total_steps).div_ceil(100)
}

impl FiaConfig {
    /// Both mechanisms off: the plain velocity-difference backbone.
    pub fn disabled() -> Self {
        Self {
            fri_enabled: false,
            fij_enabled: false,
            ..Self::default()
        }
    }

    pub fn fij_cutoff(&self, total_steps: usize) -> Result<usize> {
        match self.fij_step_cutoff {
            None => Ok(default_fij_cutoff(total_steps)),
            Some(c) if c <= total_steps => Ok(c),
            Some(c) => Err(FiaError::invalid(format!(
                "fij_step_cutoff {c} exceeds step count {total_steps}"
            ))),
        }
    }

    /// Resolved injection block range, `None` when there are no blocks to
    /// inject into.
    pub fn fij_blocks(&self, topology: &Topology) -> Result<Option<(usize, usize)>> {
        match self.fij_block_range {
            None => Ok(topology.cross_only_range()),
            Some((lo, hi)) if lo <= hi && hi < topology.n_blocks() => Ok(Some((lo, hi))),
            Some((lo, hi)) => Err(FiaError::Topology(format!(
                "fij block range {lo}..={hi} outside {} blocks",
                topology.n_blocks()
            ))),
        }
    }

    pub fn fij_active(&self, step_index: usize, total_steps: usize) -> Result<bool> {
        Ok(self.fij_enabled && step_index < self.fij_cutoff(total_steps)?)
    }

    pub fn validate(&self, topology: &Topology, total_steps: usize) -> Result<()> {
        if !(self.filter_sigma.is_finite() && self.filter_sigma > 0.0) {
            return Err(FiaError::invalid(format!(
                "filter sigma must be positive, got {}",
                self.filter_sigma
            )));
        }
        FusionWeights::new(self.fusion.lambda1(), self.fusion.lambda2())?;
        self.fij_cutoff(total_steps)?;
        self.fij_blocks(topology)?;
        Ok(())
    }
}

/// Sites the source pass must record.
pub fn plan_capture(cfg: &FiaConfig, topology: &Topology) -> Result<HookPlan> {
    let mut plan = HookPlan::empty();
    if cfg.fri_enabled {
        plan.capture.extend(
            (0..topology.n_dual).map(|b| SiteId::new(b, AttnKind::SelfAttn)),
        );
    }
    if cfg.fij_enabled {
        if let Some((lo, hi)) = cfg.fij_blocks(topology)? {
            plan.capture
                .extend((lo..=hi).map(|b| SiteId::new(b, AttnKind::CrossAttn)));
        }
    }
    Ok(plan)
}

/// `tokens × d` (row `i·cols + j`) to `d × rows × cols`.
pub fn tokens_to_grid(t: &Array2<f64>, grid: (usize, usize)) -> Result<Array3<f64>> {
    let (rows, cols) = grid;
    if t.nrows() != rows * cols {
        return Err(FiaError::shape(&[rows * cols, t.ncols()], t.shape()));
    }
    Ok(Array3::from_shape_fn((t.ncols(), rows, cols), |(c, i, j)| t[[i * cols + j, c]]))
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(f: &Array3<f64>) -> Array2<f64> {
    let (d, rows, cols) = f.dim();
    Array2::from_shape_fn((rows * cols, d), |(n, c)| f[[c, n / cols, n % cols]])
}

fn fuse_tokens(
    cfg: &FiaConfig,
    filter: &LowPassFilter,
    src: &Array2<f64>,
    tar: &Array2<f64>,
    grid: (usize, usize),
) -> Result<Array2<f64>> {
    match cfg.fri_mode {
        FriMode::Add => additive_fuse(src, tar),
        FriMode::Freq => {
            let fused = fri_fuse(
                &tokens_to_grid(src, grid)?,
                &tokens_to_grid(tar, grid)?,
                filter,
                cfg.fusion,
            )?;
            Ok(grid_to_tokens(&fused))
        }
    }
}

fn find_packet(packets: &[AttentionPacket], site: SiteId) -> Result<&AttentionPacket> {
    packets
        .iter()
        .find(|p| p.site == site)
        .ok_or(FiaError::MissingPacket {
            block: site.block,
            kind: site.kind.as_str(),
        })
}

/// Overrides for the constrained target pass at `step_index`.
///
/// `grid` is the token grid the attention features live on.
pub fn build_target_overrides(
    cfg: &FiaConfig,
    topology: &Topology,
    step_index: usize,
    total_steps: usize,
    src_packets: &[AttentionPacket],
    tar_packets: &[AttentionPacket],
    grid: (usize, usize),
) -> Result<HookPlan> {
    let mut plan = HookPlan::empty();
    if cfg.fri_enabled {
        let filter = make_gaussian_lowpass(grid.0, grid.1, cfg.filter_sigma, cfg.filter_normalized)?;
        for b in 0..topology.n_dual {
            let site = SiteId::new(b, AttnKind::SelfAttn);
            let src = find_packet(src_packets, site)?;
            let tar = find_packet(tar_packets, site)?;
            if src.q.dim() != tar.q.dim() || src.k.dim() != tar.k.dim() {
                return Err(FiaError::shape(tar.q.shape(), src.q.shape()));
            }
            let q = fuse_tokens(cfg, &filter, &src.q, &tar.q, grid)?;
            let k = fuse_tokens(cfg, &filter, &src.k, &tar.k, grid)?;
            plan.overrides.insert(site, Override::ReplaceQK { q, k });
        }
    }
    if cfg.fij_active(step_index, total_steps)? {
        if let Some((lo, hi)) = cfg.fij_blocks(topology)? {
            for b in lo..=hi {
                let site = SiteId::new(b, AttnKind::CrossAttn);
                let src = find_packet(src_packets, site)?;
                plan.overrides.insert(site, Override::ReplaceQKVE(src.clone()));
            }
        }
    }
    Ok(plan)
}

/// Source velocity and FIA-constrained target velocity for one step, with
/// the features that produced them.
#[derive(Debug, Clone)]
pub struct ConstrainedPair {
    pub v_src: Array3<f64>,
    pub v_tar: Array3<f64>,
    pub fij_active: bool,
    /// Features recorded in the source pass.
    pub src_packets: Vec<AttentionPacket>,
    /// Features recorded in the unconstrained target probe (empty when no
    /// probe was needed).
    pub probe_packets: Vec<AttentionPacket>,
    /// Features the constrained target pass actually used at the same sites.
    pub constrained_packets: Vec<AttentionPacket>,
    pub overrides: HookPlan,
}

/// Inputs shared by the source and target branches at one step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub x_src_t: &'a Array3<f64>,
    pub x_tar_t: &'a Array3<f64>,
    pub p_src: &'a PromptEmbedding,
    pub p_tar: &'a PromptEmbedding,
    pub time: TimeStep,
    pub step_index: usize,
    pub total_steps: usize,
    pub guidance: GuidanceConfig,
}

/// Runs source pass, target probe (only when fusion needs target features),
/// and the constrained target pass.
pub fn constrained_velocity_pair(
    field: &dyn VelocityField,
    cfg: &FiaConfig,
    ctx: &StepContext<'_>,
) -> Result<ConstrainedPair> {
    let topology = field.topology();
    let capture = plan_capture(cfg, &topology)?;
    let src = guided_velocity(
        field,
        ctx.x_src_t,
        ctx.p_src,
        ctx.time,
        ctx.guidance.mu_src(),
        &capture,
    )?;
    let fij_active = cfg.fij_active(ctx.step_index, ctx.total_steps)?;
    let probe_packets = if cfg.fri_enabled {
        field.forward(ctx.x_tar_t, Some(ctx.p_tar), ctx.time, &capture)?.captured
    } else {
        Vec::new()
    };
    let grid = field.token_grid(ctx.x_tar_t.dim())?;
    let mut plan = build_target_overrides(
        cfg,
        &topology,
        ctx.step_index,
        ctx.total_steps,
        &src.captured,
        &probe_packets,
        grid,
    )?;
    plan.capture = capture.capture;
    let tar = guided_velocity(
        field,
        ctx.x_tar_t,
        ctx.p_tar,
        ctx.time,
        ctx.guidance.mu_tar(),
        &plan,
    )?;
    plan.capture.clear();
    Ok(ConstrainedPair {
        v_src: src.velocity,
        v_tar: tar.velocity,
        fij_active,
        src_packets: src.captured,
        probe_packets,
        constrained_packets: tar.captured,
        overrides: plan,
    })
}
