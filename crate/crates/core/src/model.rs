//! Velocity fields `v(x, P, t)` and the attention hook bus.
//!
//! [`ToyDit`] is a small deterministic diffusion transformer. Its first
//! `n_blocks_dual` blocks run self-attention followed by cross-attention to
//! the prompt; the remaining blocks run cross-attention only. Each attention
//! site can be captured (its Q/K/V and, for cross-attention, the text
//! embedding) or overridden through a [`HookPlan`].
//!
//! The latent is patchified into a token grid, so a `C × H × W` latent with
//! patch `p` becomes `(H/p)·(W/p)` tokens of width `C·p²`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{depth_to_space, space_to_depth};
use crate::error::{FiaError, Result};
use crate::prompt::PromptEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttnKind {
    SelfAttn,
    CrossAttn,
}

impl AttnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnKind::SelfAttn => "self-attention",
            AttnKind::CrossAttn => "cross-attention",
        }
    }
}

/// One attention site: a block index and which of its attentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub block: usize,
    pub kind: AttnKind,
}

impl SiteId {
    pub fn new(block: usize, kind: AttnKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {} {}", self.block, self.kind.as_str())
    }
}

/// Block layout: dual (self + cross) blocks first, cross-only blocks after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub n_dual: usize,
    pub n_cross_only: usize,
}

impl Topology {
    pub fn n_blocks(&self) -> usize {
        self.n_dual + self.n_cross_only
    }

    pub fn is_dual(&self, block: usize) -> bool {
        block < self.n_dual
    }

    pub fn has_site(&self, site: SiteId) -> bool {
        match site.kind {
            AttnKind::SelfAttn => self.is_dual(site.block),
            AttnKind::CrossAttn => site.block < self.n_blocks(),
        }
    }

    /// Every site in forward order.
    pub fn sites(&self) -> Vec<SiteId> {
        let mut out = Vec::new();
        for b in 0..self.n_blocks() {
            if self.is_dual(b) {
                out.push(SiteId::new(b, AttnKind::SelfAttn));
            }
            out.push(SiteId::new(b, AttnKind::CrossAttn));
        }
        out
    }

    /// Inclusive block range of the cross-only tail, if there is one.
    pub fn cross_only_range(&self) -> Option<(usize, usize)> {
        (self.n_cross_only > 0).then(|| (self.n_dual, self.n_blocks() - 1))
    }
}

/// Snapshot of the features one attention site actually used.
///
/// `q`, `k`, `v` are `tokens × d_model` with heads laid out as consecutive
/// column groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPacket {
    pub site: SiteId,
    pub n_heads: usize,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Conditioning rows for cross-attention; `None` for self-attention and
    /// for the unconditional (null-token) pass.
    pub text_embedding: Option<PromptEmbedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Override {
    /// Self-attention query and key.
    ReplaceQK { q: Array2<f64>, k: Array2<f64> },
    /// Cross-attention query, key, value and text embedding.
    ReplaceQKVE(AttentionPacket),
}

/// Which sites to record and which to overwrite during a conditional pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookPlan {
    pub capture: BTreeSet<SiteId>,
    pub overrides: BTreeMap<SiteId, Override>,
}

impl HookPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.capture.is_empty() && self.overrides.is_empty()
    }

    pub fn validate(&self, topology: &Topology) -> Result<()> {
        for site in self.capture.iter().chain(self.overrides.keys()) {
            if !topology.has_site(*site) {
                return Err(FiaError::Topology(format!("{site} does not exist")));
            }
        }
        for (site, ov) in &self.overrides {
            let ok = matches!(
                (site.kind, ov),
                (AttnKind::SelfAttn, Override::ReplaceQK { .. })
                    | (AttnKind::CrossAttn, Override::ReplaceQKVE(_))
            );
            if !ok {
                return Err(FiaError::Topology(format!("override kind does not fit {site}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeStep {
    pub index: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub velocity: Array3<f64>,
    pub captured: Vec<AttentionPacket>,
}

/// A velocity field the edit loop can query.
pub trait VelocityField: Send + Sync {
    fn topology(&self) -> Topology;

    /// Token grid `(rows, cols)` the attention features live on for a latent
    /// of the given shape.
    fn token_grid(&self, latent_dim: (usize, usize, usize)) -> Result<(usize, usize)>;

    /// One pass. `prompt = None` is the unconditional (null prompt) pass.
    fn forward(
        &self,
        x: &Array3<f64>,
        prompt: Option<&PromptEmbedding>,
        step: TimeStep,
        hooks: &HookPlan,
    ) -> Result<ForwardPass>;
}

/// CFG scales for the source and target branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    mu_src: f64,
    mu_tar: f64,
}

impl GuidanceConfig {
    /// Each scale must be at least 1, or exactly 0 (unconditional only).
    pub fn new(mu_src: f64, mu_tar: f64) -> Result<Self> {
        for mu in [mu_src, mu_tar] {
            if !(mu.is_finite() && (mu >= 1.0 || mu == 0.0)) {
                return Err(FiaError::invalid(format!(
                    "guidance scale must be >= 1 or 0, got {mu}"
                )));
            }
        }
        Ok(Self { mu_src, mu_tar })
    }

    pub fn mu_src(&self) -> f64 {
        self.mu_src
    }

    pub fn mu_tar(&self) -> f64 {
        self.mu_tar
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mu_src: 3.5,
            mu_tar: 13.5,
        }
    }
}

/// `(1 − μ)·v_uncond + μ·v_cond`, elementwise.
pub fn cfg_combine(v_uncond: &Array3<f64>, v_cond: &Array3<f64>, mu: f64) -> Array3<f64> {
    Zip::from(v_uncond)
        .and(v_cond)
        .map_collect(|&u, &c| (1.0 - mu) * u + mu * c)
}

/// Classifier-free guided velocity. Hooks act on the conditional pass only;
/// the returned packets come from it. At `μ = 1` the unconditional pass is
/// skipped since its weight is zero.
pub fn guided_velocity(
    field: &dyn VelocityField,
    x: &Array3<f64>,
    prompt: &PromptEmbedding,
    step: TimeStep,
    mu: f64,
    hooks: &HookPlan,
) -> Result<ForwardPass> {
    let cond = field.forward(x, Some(prompt), step, hooks)?;
    if mu == 1.0 {
        return Ok(cond);
    }
    let uncond = field.forward(x, None, step, &HookPlan::empty())?;
    Ok(ForwardPass {
        velocity: cfg_combine(&uncond.velocity, &cond.velocity, mu),
        captured: cond.captured,
    })
}

/// Sinusoidal features of `σ` at frequencies spaced geometrically from 1 to
/// 10, laid out as `(sin f₀σ, cos f₀σ, sin f₁σ, cos f₁σ, …)`.
pub fn time_embedding(sigma: f64, d_model: usize) -> Result<Array1<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(FiaError::invalid(format!("time embedding width {d_model} must be even")));
    }
    let half = d_model / 2;
    let mut out = Array1::zeros(d_model);
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10f64.powf(i as f64 / (half - 1) as f64)
        };
        out[2 * i] = (freq * sigma).sin();
        out[2 * i + 1] = (freq * sigma).cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channels of the latent the model consumes.
    pub latent_channels: usize,
    /// Side of the square latent patch that forms one token.
    pub patch_size: usize,
    pub n_blocks_dual: usize,
    pub n_blocks_cross_only: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Width of prompt embedding rows.
    pub text_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            patch_size: 2,
            n_blocks_dual: 4,
            n_blocks_cross_only: 2,
            d_model: 16,
            n_heads: 2,
            text_dim: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("text_dim", self.text_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FiaError::invalid(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FiaError::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(FiaError::invalid("d_model must be even"));
        }
        if self.n_blocks_dual + self.n_blocks_cross_only == 0 {
            return Err(FiaError::invalid("model needs at least one block"));
        }
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        Topology {
            n_dual: self.n_blocks_dual,
            n_cross_only: self.n_blocks_cross_only,
        }
    }

    fn token_width(&self) -> usize {
        self.latent_channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SelfAttnWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct CrossAttnWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct MlpWeights {
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    self_attn: Option<SelfAttnWeights>,
    cross_attn: CrossAttnWeights,
    mlp: MlpWeights,
}

/// Deterministic toy diffusion transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDit {
    cfg: ModelConfig,
    w_in: Array2<f64>,
    b_in: Array2<f64>,
    w_time: Array2<f64>,
    null_token: Array2<f64>,
    blocks: Vec<Block>,
    w_out: Array2<f64>,
    b_out: Array2<f64>,
}

/// Supplies each parameter in construction order.
type ParamSource<'a> = dyn FnMut(usize, usize, f64) -> Result<Array2<f64>> + 'a;

// Output gain keeps velocities O(1) so image-space edits stay in range.
const OUT_GAIN: f64 = 0.5;
// Prompt conditioning is a perturbation of the residual stream, so strong
// guidance scales still leave the latent in range.
const CROSS_GAIN: f64 = 0.05;

impl ToyDit {
    /// Draws every weight from a generator seeded by `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Self::build(cfg, &mut |rows, cols, std| {
            Ok(Array2::from_shape_simple_fn((rows, cols), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            }))
        })?;
        let norm = model.null_token.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            model.null_token.mapv_inplace(|v| v / norm);
        }
        Ok(model)
    }

    fn build(cfg: ModelConfig, next: &mut ParamSource<'_>) -> Result<Self> {
        let d = cfg.d_model;
        let t = cfg.text_dim;
        let gain = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let w_in = next(cfg.token_width(), d, gain(cfg.token_width()))?;
        let b_in = next(1, d, 0.1)?;
        let w_time = next(d, d, gain(d))?;
        let null_token = next(1, t, 1.0)?;
        let mut blocks = Vec::with_capacity(cfg.topology().n_blocks());
        for b in 0..cfg.topology().n_blocks() {
            let self_attn = if cfg.topology().is_dual(b) {
                Some(SelfAttnWeights {
                    wq: next(d, d, gain(d))?,
                    wk: next(d, d, gain(d))?,
                    wv: next(d, d, gain(d))?,
                    wo: next(d, d, gain(d))?,
                })
            } else {
                None
            };
            let cross_attn = CrossAttnWeights {
                wq: next(d, d, gain(d))?,
                wk: next(t, d, gain(t))?,
                wv: next(t, d, 1.0)?,
                wo: next(d, d, CROSS_GAIN * gain(d))?,
            };
            let mlp = MlpWeights {
                w1: next(d, 2 * d, gain(d))?,
                b1: next(1, 2 * d, 0.1)?,
                w2: next(2 * d, d, gain(2 * d))?,
                b2: next(1, d, 0.1)?,
            };
            blocks.push(Block {
                self_attn,
                cross_attn,
                mlp,
            });
        }
        let w_out = next(d, cfg.token_width(), OUT_GAIN * gain(d))?;
        let b_out = next(1, cfg.token_width(), 0.0)?;
        Ok(Self {
            cfg,
            w_in,
            b_in,
            w_time,
            null_token,
            blocks,
            w_out,
            b_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameters in construction order.
    fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.w_in, &self.b_in, &self.w_time, &self.null_token];
        for b in &self.blocks {
            if let Some(sa) = &b.self_attn {
                out.extend([&sa.wq, &sa.wk, &sa.wv, &sa.wo]);
            }
            let ca = &b.cross_attn;
            out.extend([&ca.wq, &ca.wk, &ca.wv, &ca.wo]);
            let m = &b.mlp;
            out.extend([&m.w1, &m.b1, &m.w2, &m.b2]);
        }
        out.extend([&self.w_out, &self.b_out]);
        out
    }

    fn check_latent(&self, x: &Array3<f64>) -> Result<(usize, usize)> {
        self.token_grid(x.dim())
    }

    fn attention(&self, q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Array2<f64> {
        multi_head_attention(q, k, v, self.cfg.n_heads)
    }
}

/// Scaled dot-product attention per head; heads are consecutive column
/// groups of `q`, `k`, `v`.
pub fn multi_head_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    n_heads: usize,
) -> Array2<f64> {
    let (n_q, d) = q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((n_q, d));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for mut row in scores.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            row.mapv_inplace(|x| {
                let e = ((x - max) * scale).exp();
                sum += e;
                e
            });
            row.mapv_inplace(|x| x / sum);
        }
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    out
}

fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn check_override_shape(site: SiteId, expected: &Array2<f64>, got: &Array2<f64>) -> Result<()> {
    if expected.dim() != got.dim() {
        return Err(FiaError::Topology(format!(
            "override at {site} has shape {:?}, expected {:?}",
            got.shape(),
            expected.shape()
        )));
    }
    Ok(())
}

impl VelocityField for ToyDit {
    fn topology(&self) -> Topology {
        self.cfg.topology()
    }

    fn token_grid(&self, latent_dim: (usize, usize, usize)) -> Result<(usize, usize)> {
        let (c, h, w) = latent_dim;
        let p = self.cfg.patch_size;
        if c != self.cfg.latent_channels || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(FiaError::invalid(format!(
                "latent {c}x{h}x{w} does not fit a model with {} channels and patch {p}",
                self.cfg.latent_channels
            )));
        }
        Ok((h / p, w / p))
    }

    fn forward(
        &self,
        x: &Array3<f64>,
        prompt: Option<&PromptEmbedding>,
        step: TimeStep,
        hooks: &HookPlan,
    ) -> Result<ForwardPass> {
        let (ht, wt) = self.check_latent(x)?;
        hooks.validate(&self.topology())?;
        if let Some(p) = prompt {
            if p.d_model != self.cfg.text_dim || p.is_empty() {
                return Err(FiaError::invalid(format!(
                    "prompt width {} does not match model text width {}",
                    p.d_model, self.cfg.text_dim
                )));
            }
        }
        let p = self.cfg.patch_size;
        let width = self.cfg.token_width();
        let n_tokens = ht * wt;

        let grid = space_to_depth(x, p)?;
        let tokens = grid
            .into_shape_with_order((width, n_tokens))
            .map_err(|e| FiaError::invalid(e.to_string()))?
            .reversed_axes();
        let temb = time_embedding(step.sigma, self.cfg.d_model)?;
        let shift = temb.dot(&self.w_time);
        let mut hidden = tokens.dot(&self.w_in) + &self.b_in + &shift;

        let text: ArrayView2<f64> = match prompt {
            Some(p) => p.matrix.view(),
            None => self.null_token.view(),
        };
        let mut captured = Vec::new();

        for (b, block) in self.blocks.iter().enumerate() {
            if let Some(sa) = &block.self_attn {
                let site = SiteId::new(b, AttnKind::SelfAttn);
                let normed = layer_norm(&hidden);
                let mut q = normed.dot(&sa.wq);
                let mut k = normed.dot(&sa.wk);
                let v = normed.dot(&sa.wv);
                if let Some(Override::ReplaceQK { q: oq, k: ok }) = hooks.overrides.get(&site) {
                    check_override_shape(site, &q, oq)?;
                    check_override_shape(site, &k, ok)?;
                    q = oq.clone();
                    k = ok.clone();
                }
                let attn = self.attention(q.view(), k.view(), v.view());
                if hooks.capture.contains(&site) {
                    captured.push(AttentionPacket {
                        site,
                        n_heads: self.cfg.n_heads,
                        q,
                        k,
                        v,
                        text_embedding: None,
                    });
                }
                hidden += &attn.dot(&sa.wo);
            }

            let site = SiteId::new(b, AttnKind::CrossAttn);
            let ca = &block.cross_attn;
            let normed = layer_norm(&hidden);
            let packet = match hooks.overrides.get(&site) {
                Some(Override::ReplaceQKVE(src)) => {
                    let q = normed.dot(&ca.wq);
                    check_override_shape(site, &q, &src.q)?;
                    if src.k.dim() != src.v.dim() || src.k.ncols() != self.cfg.d_model {
                        return Err(FiaError::Topology(format!(
                            "override at {site} has inconsistent key/value shapes"
                        )));
                    }
                    AttentionPacket { site, ..src.clone() }
                }
                _ => AttentionPacket {
                    site,
                    n_heads: self.cfg.n_heads,
                    q: normed.dot(&ca.wq),
                    k: text.dot(&ca.wk),
                    v: text.dot(&ca.wv),
                    text_embedding: prompt.cloned(),
                },
            };
            let attn = self.attention(packet.q.view(), packet.k.view(), packet.v.view());
            hidden += &attn.dot(&ca.wo);
            if hooks.capture.contains(&site) {
                captured.push(packet);
            }

            let m = &block.mlp;
            let mut inner = layer_norm(&hidden).dot(&m.w1) + &m.b1;
            inner.mapv_inplace(gelu);
            hidden += &(inner.dot(&m.w2) + &m.b2);
        }

        let out = layer_norm(&hidden).dot(&self.w_out) + &self.b_out;
        let grid = out
            .reversed_axes()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((width, ht, wt))
            .map_err(|e| FiaError::invalid(e.to_string()))?;
        Ok(ForwardPass {
            velocity: depth_to_space(&grid, p)?,
            captured,
        })
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"FIAW";
const SNAPSHOT_VERSION: u32 = 1;

impl ToyDit {
    /// Writes the weights as a flat little-endian archive: magic, version,
    /// config fields, then each parameter as `rows, cols, f64 data`.
    pub fn write_snapshot(&self, mut out: impl Write) -> Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        let c = &self.cfg;
        for v in [
            c.latent_channels,
            c.patch_size,
            c.n_blocks_dual,
            c.n_blocks_cross_only,
            c.d_model,
            c.n_heads,
            c.text_dim,
        ] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&c.seed.to_le_bytes())?;
        let params = self.params();
        out.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            out.write_all(&(p.nrows() as u64).to_le_bytes())?;
            out.write_all(&(p.ncols() as u64).to_le_bytes())?;
            for v in p.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(FiaError::Format("not a weight snapshot".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != SNAPSHOT_VERSION {
            return Err(FiaError::Format(format!("unsupported snapshot version {version}")));
        }
        let read_u64 = |input: &mut dyn Read| -> Result<u64> {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        };
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = read_u64(&mut input)? as usize;
        }
        let cfg = ModelConfig {
            latent_channels: dims[0],
            patch_size: dims[1],
            n_blocks_dual: dims[2],
            n_blocks_cross_only: dims[3],
            d_model: dims[4],
            n_heads: dims[5],
            text_dim: dims[6],
            seed: read_u64(&mut input)?,
        };
        cfg.validate()?;
        let count = read_u64(&mut input)?;
        let mut seen = 0u64;
        let model = Self::build(cfg, &mut |rows, cols, _| {
            seen += 1;
            if seen > count {
                return Err(FiaError::Format("snapshot has too few tensors".into()));
            }
            let (r, c) = (read_u64(&mut input)? as usize, read_u64(&mut input)? as usize);
            if (r, c) != (rows, cols) {
                return Err(FiaError::Format(format!(
                    "tensor {seen} is {r}x{c}, expected {rows}x{cols}"
                )));
            }
            let mut data = vec![0.0; r * c];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                input.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            Ok(Array2::from_shape_vec((r, c), data).expect("length checked"))
        })?;
        if seen != count {
            return Err(FiaError::Format("snapshot has extra tensors".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_snapshot(bytes.as_slice())
    }
}

/// Fixture field returning a per-prompt constant, ignoring `x`, `t` and hooks.
///
/// Channel `c` of the velocity is the sum of column `c mod D` of the prompt
/// matrix; the unconditional pass returns zero.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub text_dim: usize,
}

impl ConstantField {
    pub fn value_for(&self, prompt: &PromptEmbedding, dim: (usize, usize, usize)) -> Array3<f64> {
        let sums = prompt.matrix.sum_axis(Axis(0));
        Array3::from_shape_fn(dim, |(c, _, _)| sums[c % sums.len()])
    }
}

impl VelocityField for ConstantField {
    fn topology(&self) -> Topology {
        Topology {
            n_dual: 0,
            n_cross_only: 0,
        }
    }

    fn token_grid(&self, latent_dim: (usize, usize, usize)) -> Result<(usize, usize)> {
        Ok((latent_dim.1, latent_dim.2))
    }

    fn forward(
        &self,
        x: &Array3<f64>,
        prompt: Option<&PromptEmbedding>,
        _step: TimeStep,
        hooks: &HookPlan,
    ) -> Result<ForwardPass> {
        hooks.validate(&self.topology())?;
        let velocity = match prompt {
            Some(p) => self.value_for(p, x.dim()),
            None => Array3::zeros(x.dim()),
        };
        Ok(ForwardPass {
            velocity,
            captured: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::embed_prompt;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            latent_channels: 3,
            patch_size: 1,
            n_blocks_dual: 2,
            n_blocks_cross_only: 2,
            d_model: 8,
            n_heads: 2,
            text_dim: 8,
            seed: 5,
        }
    }

    fn latent(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((3, 4, 4), || StandardNormal.sample(&mut rng))
    }

    const STEP: TimeStep = TimeStep { index: 0, sigma: 0.6 };

    #[test]
    fn init_is_deterministic() {
        assert_eq!(ToyDit::new(small_cfg()).unwrap(), ToyDit::new(small_cfg()).unwrap());
        let other = ToyDit::new(ModelConfig { seed: 6, ..small_cfg() }).unwrap();
        assert_ne!(ToyDit::new(small_cfg()).unwrap(), other);
    }

    #[test]
    fn init_rejects_bad_dims() {
        let bad = ModelConfig {
            d_model: 8,
            n_heads: 3,
            ..small_cfg()
        };
        assert!(ToyDit::new(bad).is_err());
        assert!(ToyDit::new(ModelConfig { n_blocks_dual: 0, n_blocks_cross_only: 0, ..small_cfg() }).is_err());
    }

    #[test]
    fn topology_rule() {
        let t = small_cfg().topology();
        assert_eq!(t.n_blocks(), 4);
        assert!(t.is_dual(0) && t.is_dual(1));
        assert!(!t.is_dual(2) && !t.is_dual(3));
        assert_eq!(t.cross_only_range(), Some((2, 3)));
        assert!(!t.has_site(SiteId::new(2, AttnKind::SelfAttn)));
        assert!(t.has_site(SiteId::new(3, AttnKind::CrossAttn)));
        assert_eq!(t.sites().len(), 6);
    }

    #[test]
    fn time_embedding_examples() {
        assert_eq!(time_embedding(0.0, 6).unwrap().to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = time_embedding(0.5, 4).unwrap();
        let expected = [0.5f64.sin(), 0.5f64.cos(), 5f64.sin(), 5f64.cos()];
        for (a, b) in e.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(time_embedding(0.3, 8).unwrap(), time_embedding(0.3, 8).unwrap());
        assert!(time_embedding(0.3, 5).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let m = ToyDit::new(small_cfg()).unwrap();
        let p = embed_prompt("a red ball", 8, 1).unwrap();
        let x = latent(1);
        let a = m.forward(&x, Some(&p), STEP, &HookPlan::empty()).unwrap();
        let b = m.forward(&x, Some(&p), STEP, &HookPlan::empty()).unwrap();
        assert_eq!(a.velocity.dim(), x.dim());
        assert_eq!(a.velocity, b.velocity);
        assert!(a.velocity.iter().all(|v| v.is_finite()));
        let u = m.forward(&x, None, STEP, &HookPlan::empty()).unwrap();
        assert_ne!(u.velocity, a.velocity);
    }

    #[test]
    fn forward_rejects_mismatches() {
        let m = ToyDit::new(small_cfg()).unwrap();
        let p = embed_prompt("a red ball", 8, 1).unwrap();
        assert!(m.forward(&Array3::zeros((2, 4, 4)), Some(&p), STEP, &HookPlan::empty()).is_err());
        let wide = embed_prompt("a red ball", 12, 1).unwrap();
        assert!(m.forward(&latent(0), Some(&wide), STEP, &HookPlan::empty()).is_err());
        let mut plan = HookPlan::empty();
        plan.capture.insert(SiteId::new(3, AttnKind::SelfAttn));
        assert!(matches!(
            m.forward(&latent(0), Some(&p), STEP, &plan),
            Err(FiaError::Topology(_))
        ));
    }

    #[test]
    fn capture_lists_each_site_once() {
        let m = ToyDit::new(small_cfg()).unwrap();
        let p = embed_prompt("a red ball", 8, 1).unwrap();
        let mut plan = HookPlan::empty();
        plan.capture.extend(m.topology().sites());
        let out = m.forward(&latent(2), Some(&p), STEP, &plan).unwrap();
        let sites: Vec<SiteId> = out.captured.iter().map(|pk| pk.site).collect();
        assert_eq!(sites, m.topology().sites());
        let cross = out.captured.iter().find(|pk| pk.site.kind == AttnKind::CrossAttn).unwrap();
        assert_eq!(cross.k.nrows(), 3);
        assert!(crate::prompt::embeddings_equal(cross.text_embedding.as_ref().unwrap(), &p));
        // Capturing alone changes nothing.
        let plain = m.forward(&latent(2), Some(&p), STEP, &HookPlan::empty()).unwrap();
        assert_eq!(out.velocity, plain.velocity);
    }

    #[test]
    fn cfg_endpoints_and_affinity() {
        let m = ToyDit::new(small_cfg()).unwrap();
        let p = embed_prompt("a blue cube", 8, 1).unwrap();
        let x = latent(3);
        let empty = HookPlan::empty();
        let cond = m.forward(&x, Some(&p), STEP, &empty).unwrap().velocity;
        let uncond = m.forward(&x, None, STEP, &empty).unwrap().velocity;
        let at = |mu| guided_velocity(&m, &x, &p, STEP, mu, &empty).unwrap().velocity;
        assert_eq!(at(1.0), cond);
        assert_eq!(at(0.0), uncond);
        let (v0, v1, v2) = (at(0.0), at(1.0), at(2.0));
        Zip::from(&v0).and(&v1).and(&v2).for_each(|a, b, c| {
            assert_abs_diff_eq!(c - b, b - a, epsilon = 1e-9);
        });
    }

    #[test]
    fn guidance_config_validates() {
        assert!(GuidanceConfig::new(3.5, 13.5).is_ok());
        assert!(GuidanceConfig::new(0.0, 1.0).is_ok());
        assert!(GuidanceConfig::new(0.5, 2.0).is_err());
        assert!(GuidanceConfig::new(2.0, f64::NAN).is_err());
        let d = GuidanceConfig::default();
        assert_eq!((d.mu_src(), d.mu_tar()), (3.5, 13.5));
    }

    #[test]
    fn cross_override_reproduces_donor_activation() {
        let m = ToyDit::new(small_cfg()).unwrap();
        let p_src = embed_prompt("a red ball on a wall", 8, 1).unwrap();
        let p_tar = embed_prompt("a blue cube", 8, 1).unwrap();
        let site = SiteId::new(3, AttnKind::CrossAttn);
        let mut capture = HookPlan::empty();
        capture.capture.insert(site);
        let donor = m.forward(&latent(4), Some(&p_src), STEP, &capture).unwrap();
        let packet = donor.captured[0].clone();

        let mut plan = capture.clone();
        plan.overrides.insert(site, Override::ReplaceQKVE(packet.clone()));
        let out = m.forward(&latent(5), Some(&p_tar), STEP, &plan).unwrap();
        assert_eq!(out.captured[0], packet);
        let donor_attn = multi_head_attention(packet.q.view(), packet.k.view(), packet.v.view(), 2);
        let used = &out.captured[0];
        let got = multi_head_attention(used.q.view(), used.k.view(), used.v.view(), 2);
        assert_eq!(got, donor_attn);
    }

    #[test]
    fn override_shape_mismatch_is_rejected() {
        let m = ToyDit::new(small_cfg()).unwrap();
        let p = embed_prompt("a red ball", 8, 1).unwrap();
        let mut plan = HookPlan::empty();
        plan.overrides.insert(
            SiteId::new(0, AttnKind::SelfAttn),
            Override::ReplaceQK {
                q: Array2::zeros((3, 8)),
                k: Array2::zeros((3, 8)),
            },
        );
        assert!(m.forward(&latent(0), Some(&p), STEP, &plan).is_err());
        let mut wrong_kind = HookPlan::empty();
        wrong_kind.overrides.insert(
            SiteId::new(0, AttnKind::CrossAttn),
            Override::ReplaceQK {
                q: Array2::zeros((16, 8)),
                k: Array2::zeros((16, 8)),
            },
        );
        assert!(wrong_kind.validate(&m.topology()).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let m = ToyDit::new(small_cfg()).unwrap();
        let mut buf = Vec::new();
        m.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FIAW");
        let back = ToyDit::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(ToyDit::read_snapshot(&buf[..buf.len() - 8]).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(ToyDit::read_snapshot(bad.as_slice()).is_err());
    }

    #[test]
    fn patchified_model_runs() {
        let m = ToyDit::new(ModelConfig::default()).unwrap();
        let p = embed_prompt("a red ball", 16, 1).unwrap();
        let x = Array3::from_elem((12, 8, 8), 0.2);
        assert_eq!(m.token_grid(x.dim()).unwrap(), (4, 4));
        let v = m.forward(&x, Some(&p), STEP, &HookPlan::empty()).unwrap().velocity;
        assert_eq!(v.dim(), x.dim());
        assert!(m.token_grid((12, 7, 8)).is_err());
    }

    #[test]
    fn constant_field_fixture() {
        let f = ConstantField { text_dim: 8 };
        let p = embed_prompt("a red ball", 8, 1).unwrap();
        let x = Array3::zeros((3, 2, 2));
        let v = f.forward(&x, Some(&p), STEP, &HookPlan::empty()).unwrap().velocity;
        assert_eq!(v[[1, 0, 0]], v[[1, 1, 1]]);
        assert_eq!(f.forward(&x, None, STEP, &HookPlan::empty()).unwrap().velocity, x);
    }
}
