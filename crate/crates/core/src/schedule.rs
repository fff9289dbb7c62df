//! Time grid, noise draws and the latent algebra of the velocity-difference
//! editing loop.
//!
//! The edit walks a decreasing grid of noise levels `σ_T > … > σ_0 = 0`. At
//! each level the source latent is pushed toward noise with a draw `ε_t`,
//! the target state is rebuilt from the running edit latent, and the edit
//! latent takes one Euler step along the velocity difference.

use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_same_shape, FiaError, Result};

/// Discrete noise levels, highest first and ending at exactly `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Wraps an explicit grid. It must be strictly decreasing, lie in
    /// `[0, 1]`, end at `0.0` and hold at least two levels.
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(FiaError::invalid("schedule needs at least two levels"));
        }
        if sigmas.iter().any(|s| !s.is_finite() || !(0.0..=1.0).contains(s)) {
            return Err(FiaError::invalid("sigmas must be finite and within [0, 1]"));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(FiaError::invalid("sigmas must be strictly decreasing"));
        }
        if *sigmas.last().unwrap() != 0.0 {
            return Err(FiaError::invalid("last sigma must be 0"));
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Number of Euler steps `T`.
    pub fn step_count(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// `(σ_t, σ_{t-1})` for the `step_index`-th step taken (0 is the noisiest).
    pub fn step_sigmas(&self, step_index: usize) -> (f64, f64) {
        (self.sigmas[step_index], self.sigmas[step_index + 1])
    }
}

/// Evenly spaced levels from `1 - skip_fraction` down to `0`.
pub fn make_linear_schedule(step_count: usize, skip_fraction: f64) -> Result<NoiseSchedule> {
    if step_count == 0 {
        return Err(FiaError::invalid("step_count must be at least 1"));
    }
    if !skip_fraction.is_finite() || !(0.0..1.0).contains(&skip_fraction) {
        return Err(FiaError::invalid(format!(
            "skip_fraction must lie in [0, 1), got {skip_fraction}"
        )));
    }
    let top = 1.0 - skip_fraction;
    let n = step_count as f64;
    let sigmas = (0..=step_count)
        .map(|i| top * (step_count - i) as f64 / n)
        .collect();
    NoiseSchedule::from_sigmas(sigmas)
}

/// How the edit latent is perturbed after each Euler step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NoiseMode {
    /// Pure velocity-difference stepping.
    None,
    /// `σ_t` times a new Gaussian draw independent of `ε_t`.
    FreshGaussian,
    /// `σ_t · ε_t`, the same draw used to noise the source at this step.
    #[default]
    ReusedEpsilon,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 3] = [
        NoiseMode::None,
        NoiseMode::FreshGaussian,
        NoiseMode::ReusedEpsilon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::None => "none",
            NoiseMode::FreshGaussian => "fresh_gaussian",
            NoiseMode::ReusedEpsilon => "reused_epsilon",
        }
    }
}

impl std::str::FromStr for NoiseMode {
    type Err = FiaError;

    fn from_str(s: &str) -> Result<Self> {
        NoiseMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FiaError::invalid(format!("unknown noise mode '{s}'")))
    }
}

/// The Gaussian draw `ε_t` for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub epsilon: Array3<f64>,
    pub step_index: usize,
}

/// Counter-based Gaussian source keyed by `(run_seed, stream, step_index)`.
///
/// Any step's draw can be regenerated without replaying earlier ones.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSource {
    run_seed: u64,
}

const STREAM_EPSILON: u64 = 0x6570_7369_6c6f_6e00;
const STREAM_FRESH: u64 = 0x6672_6573_6800_0000;

impl NoiseSource {
    pub fn new(run_seed: u64) -> Self {
        Self { run_seed }
    }

    pub fn run_seed(&self) -> u64 {
        self.run_seed
    }

    /// `ε_t` for `step_index`.
    pub fn draw(&self, step_index: usize, shape: (usize, usize, usize)) -> NoiseDraw {
        NoiseDraw {
            epsilon: self.gaussian(STREAM_EPSILON, step_index, shape),
            step_index,
        }
    }

    /// An independent draw for [`NoiseMode::FreshGaussian`].
    pub fn fresh(&self, step_index: usize, shape: (usize, usize, usize)) -> Array3<f64> {
        self.gaussian(STREAM_FRESH, step_index, shape)
    }

    fn gaussian(&self, domain: u64, step_index: usize, shape: (usize, usize, usize)) -> Array3<f64> {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.run_seed.to_le_bytes());
        key[8..16].copy_from_slice(&domain.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(step_index as u64);
        Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }
}

/// Edit latent `x^FE` alongside the frozen source latent it started from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    x_fe: Array3<f64>,
    x_src_ref: Array3<f64>,
}

impl LatentState {
    /// Starts the edit at the source: `x^FE_T = X^src`.
    pub fn new(source: Array3<f64>) -> Self {
        Self {
            x_fe: source.clone(),
            x_src_ref: source,
        }
    }

    pub fn x_fe(&self) -> &Array3<f64> {
        &self.x_fe
    }

    pub fn source(&self) -> &Array3<f64> {
        &self.x_src_ref
    }

    pub fn set_x_fe(&mut self, next: Array3<f64>) -> Result<()> {
        ensure_same_shape(&next, &self.x_src_ref)?;
        self.x_fe = next;
        Ok(())
    }

    pub fn into_x_fe(self) -> Array3<f64> {
        self.x_fe
    }
}

/// `(1 - σ_t) · X^src + σ_t · ε_t`.
pub fn interpolate_source(x_src: &Array3<f64>, sigma_t: f64, draw: &NoiseDraw) -> Result<Array3<f64>> {
    ensure_same_shape(x_src, &draw.epsilon)?;
    if !(0.0..=1.0).contains(&sigma_t) {
        return Err(FiaError::invalid(format!("sigma_t {sigma_t} outside [0, 1]")));
    }
    // The endpoints are returned as copies so they hold bit-exactly.
    if sigma_t == 0.0 {
        return Ok(x_src.clone());
    }
    if sigma_t == 1.0 {
        return Ok(draw.epsilon.clone());
    }
    Ok(Zip::from(x_src)
        .and(&draw.epsilon)
        .map_collect(|&x, &e| (1.0 - sigma_t) * x + sigma_t * e))
}

/// `x^tar_t = x^FE_t + x^src_t - X^src`.
///
/// Elements where either offset vanishes are copied through, so the start of
/// the edit (`x^FE = X^src`) yields `x^src_t` exactly and the noise-free limit
/// (`x^src_t = X^src`) yields `x^FE` exactly.
pub fn reconstruct_target_state(
    x_fe: &Array3<f64>,
    x_src_t: &Array3<f64>,
    x_src: &Array3<f64>,
) -> Result<Array3<f64>> {
    ensure_same_shape(x_fe, x_src)?;
    ensure_same_shape(x_src_t, x_src)?;
    Ok(Zip::from(x_fe)
        .and(x_src_t)
        .and(x_src)
        .map_collect(|&fe, &st, &s| {
            if fe == s {
                st
            } else if st == s {
                fe
            } else {
                fe + (st - s)
            }
        }))
}

/// One Euler update of the edit latent:
/// `x^FE_{t-1} = x^FE_t + (σ_{t-1} - σ_t) · v^Δ_t`, plus the mode's noise term.
pub fn euler_step(
    x_fe: &Array3<f64>,
    v_delta: &Array3<f64>,
    sigma_prev: f64,
    sigma_t: f64,
    draw: &NoiseDraw,
    mode: NoiseMode,
    noise: &NoiseSource,
) -> Result<Array3<f64>> {
    ensure_same_shape(x_fe, v_delta)?;
    if sigma_prev.partial_cmp(&sigma_t) != Some(std::cmp::Ordering::Less) {
        return Err(FiaError::invalid(format!(
            "non-monotone step: sigma_prev {sigma_prev} must be below sigma_t {sigma_t}"
        )));
    }
    let dt = sigma_prev - sigma_t;
    let mut next = Zip::from(x_fe).and(v_delta).map_collect(|&x, &v| x + dt * v);
    match mode {
        NoiseMode::None => {}
        NoiseMode::ReusedEpsilon => {
            ensure_same_shape(x_fe, &draw.epsilon)?;
            next.zip_mut_with(&draw.epsilon, |x, &e| *x += sigma_t * e);
        }
        NoiseMode::FreshGaussian => {
            let (c, h, w) = x_fe.dim();
            let fresh = noise.fresh(draw.step_index, (c, h, w));
            next.zip_mut_with(&fresh, |x, &e| *x += sigma_t * e);
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn constant(v: f64) -> Array3<f64> {
        Array3::from_elem((2, 3, 3), v)
    }

    fn draw_of(v: f64) -> NoiseDraw {
        NoiseDraw {
            epsilon: constant(v),
            step_index: 0,
        }
    }

    #[test]
    fn linear_schedule_examples() {
        assert_eq!(make_linear_schedule(2, 0.0).unwrap().sigmas(), &[1.0, 0.5, 0.0]);
        assert_eq!(make_linear_schedule(1, 0.0).unwrap().sigmas(), &[1.0, 0.0]);
        let s = make_linear_schedule(4, 0.2).unwrap();
        let expected = [0.8, 0.6, 0.4, 0.2, 0.0];
        assert_eq!(s.sigmas().len(), 5);
        for (a, b) in s.sigmas().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn linear_schedule_rejects_bad_input() {
        assert!(make_linear_schedule(0, 0.0).is_err());
        assert!(make_linear_schedule(4, 1.0).is_err());
        assert!(make_linear_schedule(4, -0.1).is_err());
        assert!(make_linear_schedule(4, f64::NAN).is_err());
    }

    #[test]
    fn schedule_from_sigmas_validates() {
        assert!(NoiseSchedule::from_sigmas(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(NoiseSchedule::from_sigmas(vec![1.0, 0.1]).is_err());
        assert!(NoiseSchedule::from_sigmas(vec![0.0]).is_err());
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let x = Array3::from_shape_fn((2, 3, 3), |(c, i, j)| (c * 9 + i * 3 + j) as f64 * 0.37);
        let d = NoiseSource::new(3).draw(0, (2, 3, 3));
        assert_eq!(interpolate_source(&x, 0.0, &d).unwrap(), x);
        assert_eq!(interpolate_source(&x, 1.0, &d).unwrap(), d.epsilon);
    }

    #[test]
    fn interpolation_midpoint() {
        let out = interpolate_source(&constant(0.4), 0.5, &draw_of(0.2)).unwrap();
        out.iter().for_each(|&v| assert_abs_diff_eq!(v, 0.3, epsilon = 1e-15));
    }

    #[test]
    fn interpolation_rejects_shape_mismatch() {
        let d = NoiseDraw {
            epsilon: Array3::zeros((1, 3, 3)),
            step_index: 0,
        };
        assert!(matches!(
            interpolate_source(&constant(0.0), 0.5, &d),
            Err(FiaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn target_state_examples() {
        let x = Array3::from_shape_fn((2, 3, 3), |(c, i, j)| (c + i * j) as f64 * 0.1 + 0.03);
        let st = Array3::from_shape_fn((2, 3, 3), |(c, i, j)| (c * i + j) as f64 * -0.7 + 0.11);
        assert_eq!(reconstruct_target_state(&x, &st, &x).unwrap(), st);
        assert_eq!(reconstruct_target_state(&st, &x, &x).unwrap(), st);
        let out = reconstruct_target_state(&constant(1.0), &constant(0.7), &constant(0.4)).unwrap();
        out.iter().for_each(|&v| assert_abs_diff_eq!(v, 1.3, epsilon = 1e-15));
    }

    #[test]
    fn euler_examples() {
        let src = NoiseSource::new(0);
        let x = constant(0.25);
        let out = euler_step(&x, &constant(0.0), 0.2, 0.4, &draw_of(7.0), NoiseMode::None, &src).unwrap();
        assert_eq!(out, x);

        let out = euler_step(
            &constant(1.0),
            &constant(3.0),
            0.48,
            0.50,
            &draw_of(0.0),
            NoiseMode::ReusedEpsilon,
            &src,
        )
        .unwrap();
        out.iter().for_each(|&v| assert_abs_diff_eq!(v, 0.94, epsilon = 1e-12));

        let out = euler_step(
            &constant(0.0),
            &constant(0.0),
            0.0,
            0.5,
            &draw_of(1.0),
            NoiseMode::ReusedEpsilon,
            &src,
        )
        .unwrap();
        out.iter().for_each(|&v| assert_eq!(v, 0.5));
    }

    #[test]
    fn euler_fresh_noise_differs_from_reused() {
        let src = NoiseSource::new(11);
        let draw = src.draw(4, (2, 3, 3));
        let zero = constant(0.0);
        let reused = euler_step(&zero, &zero, 0.1, 0.2, &draw, NoiseMode::ReusedEpsilon, &src).unwrap();
        let fresh = euler_step(&zero, &zero, 0.1, 0.2, &draw, NoiseMode::FreshGaussian, &src).unwrap();
        assert_ne!(reused, fresh);
        let again = euler_step(&zero, &zero, 0.1, 0.2, &draw, NoiseMode::FreshGaussian, &src).unwrap();
        assert_eq!(fresh, again);
    }

    #[test]
    fn euler_rejects_non_monotone() {
        let src = NoiseSource::new(0);
        let x = constant(0.0);
        assert!(euler_step(&x, &x, 0.5, 0.5, &draw_of(0.0), NoiseMode::None, &src).is_err());
        assert!(euler_step(&x, &x, 0.6, 0.5, &draw_of(0.0), NoiseMode::None, &src).is_err());
    }

    #[test]
    fn draws_are_keyed_not_sequenced() {
        let a = NoiseSource::new(42);
        let late_first = a.draw(7, (1, 4, 4));
        let _ = a.draw(0, (1, 4, 4));
        assert_eq!(a.draw(7, (1, 4, 4)), late_first);
        assert_ne!(a.draw(6, (1, 4, 4)).epsilon, late_first.epsilon);
        assert_ne!(NoiseSource::new(43).draw(7, (1, 4, 4)).epsilon, late_first.epsilon);
    }

    #[test]
    fn noise_mode_parses() {
        for m in NoiseMode::ALL {
            assert_eq!(m.as_str().parse::<NoiseMode>().unwrap(), m);
        }
        assert!("gaussian".parse::<NoiseMode>().is_err());
    }

    #[test]
    fn latent_state_starts_at_source() {
        let x = constant(0.3);
        let mut st = LatentState::new(x.clone());
        assert_eq!(st.x_fe(), st.source());
        assert!(st.set_x_fe(Array3::zeros((1, 1, 1))).is_err());
        st.set_x_fe(constant(0.1)).unwrap();
        assert_eq!(st.source(), &x);
    }
}
