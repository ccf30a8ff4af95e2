//! Deterministic DDIM machinery: noise schedule, inversion, sampling and the
//! implied clean-image prediction.
//!
//! Step indices passed to [`invert_step`], [`sample_step`] and [`sample`] are
//! *effective* indices: effective step `i` sits at raw timestep
//! `i * stride`. With `stride = 20` and `T = 1000` the sampler walks 50
//! effective steps.
//!
//! The sampling update is the η = 0 DDIM step
//!
//! ```text
//! x_{t-1} = sqrt(ᾱ_{t-1}) · f(x_t) + sqrt(1 - ᾱ_{t-1}) · ε(x_t)
//! ```
//!
//! which is the exact time-reversal of the inversion update. A printed
//! variant, `sqrt(ᾱ_{t-1}/ᾱ_t) · (x_t - (ᾱ_{t-1} - ᾱ_t) / (ᾱ_{t-1} sqrt(1 - ᾱ_t)) · ε)`,
//! does not reduce to this update for general schedules and is not used.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, AttentionProvider};
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::prompt::PromptEmbedding;
use crate::tensor::LatentImage;

/// Cumulative signal-retention coefficients `ᾱ_0..ᾱ_T` plus the inversion
/// depth and stride used by the editing pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    inversion_depth: usize,
    stride: usize,
}

impl NoiseSchedule {
    /// Linear-β schedule: `ᾱ_t = Π_{i=1..t} (1 - β_i)`, `β_i` interpolated
    /// from `beta_min` to `beta_max`. `ᾱ_0 = 1`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 1..=steps {
            let beta = if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * (i - 1) as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Wraps an explicit `ᾱ` table (index 0 through T).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::param(
                "alpha_bar needs entries for t = 0..T with T >= 1",
            ));
        }
        if alpha_bar[0] < 0.999 {
            return Err(Error::param(format!(
                "alpha_bar[0] = {} must be >= 0.999",
                alpha_bar[0]
            )));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::param("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::param("alpha_bar must be strictly decreasing"));
        }
        let steps = alpha_bar.len() - 1;
        Ok(Self {
            alpha_bar,
            inversion_depth: steps,
            stride: 1,
        })
    }

    /// Sets the inversion depth `S` and the stride, both in raw timesteps.
    pub fn with_inversion(mut self, depth: usize, stride: usize) -> Result<Self> {
        let t = self.total_steps();
        if stride == 0 || !t.is_multiple_of(stride) {
            return Err(Error::param(format!("stride {stride} must divide T = {t}")));
        }
        if depth == 0 || depth > t || !depth.is_multiple_of(stride) {
            return Err(Error::param(format!(
                "inversion depth {depth} must satisfy 0 < S <= {t} and be a multiple of stride {stride}"
            )));
        }
        self.inversion_depth = depth;
        self.stride = stride;
        Ok(self)
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `T`, in raw timesteps.
    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `S`, in raw timesteps.
    pub fn inversion_depth(&self) -> usize {
        self.inversion_depth
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Number of effective steps from `T` down to 0.
    pub fn effective_steps(&self) -> usize {
        self.total_steps() / self.stride
    }

    /// Number of effective steps from 0 up to `S`.
    pub fn inversion_steps(&self) -> usize {
        self.inversion_depth / self.stride
    }

    /// Raw timestep of effective step `i`.
    pub fn timestep(&self, i: usize) -> usize {
        i * self.stride
    }

    /// `ᾱ` at effective step `i`.
    pub fn alpha_at(&self, i: usize) -> f64 {
        self.alpha_bar[self.timestep(i)]
    }
}

/// DDIM states `x_0..x_{S-1}` collected during inversion, plus `x_S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<LatentImage>,
    noise_map: LatentImage,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State after `i` inversion steps, for `i < len()`.
    pub fn state(&self, i: usize) -> Option<&LatentImage> {
        self.states.get(i)
    }

    pub fn states(&self) -> &[LatentImage] {
        &self.states
    }

    /// `x_S`.
    pub fn noise_map(&self) -> &LatentImage {
        &self.noise_map
    }
}

/// `(x_t - sqrt(1 - ᾱ_t) ε) / sqrt(ᾱ_t)`.
pub fn predict_x0(x_t: &LatentImage, eps: &LatentImage, alpha_bar_t: f64) -> Result<LatentImage> {
    x_t.check_same_shape(eps, "predict_x0")?;
    if alpha_bar_t <= 0.0 {
        return Err(Error::Singularity(format!(
            "predict_x0 needs alpha_bar_t > 0, got {alpha_bar_t}"
        )));
    }
    if alpha_bar_t > 1.0 {
        return Err(Error::param(format!(
            "alpha_bar_t = {alpha_bar_t} exceeds 1"
        )));
    }
    let inv = 1.0 / alpha_bar_t.sqrt();
    Ok(x_t.lincomb(inv, eps, -(1.0 - alpha_bar_t).sqrt() * inv))
}

/// One inversion update from `ᾱ_t` to `ᾱ_next` given a noise estimate.
pub fn ddim_invert_update(
    x_t: &LatentImage,
    eps: &LatentImage,
    alpha_t: f64,
    alpha_next: f64,
) -> Result<LatentImage> {
    let x0 = predict_x0(x_t, eps, alpha_t)?;
    Ok(eps.lincomb((1.0 - alpha_next).sqrt(), &x0, alpha_next.sqrt()))
}

/// One η = 0 sampling update from `ᾱ_t` to `ᾱ_prev` given a noise estimate.
pub fn ddim_sample_update(
    x_t: &LatentImage,
    eps: &LatentImage,
    alpha_t: f64,
    alpha_prev: f64,
) -> Result<LatentImage> {
    let x0 = predict_x0(x_t, eps, alpha_t)?;
    Ok(x0.lincomb(alpha_prev.sqrt(), eps, (1.0 - alpha_prev).sqrt()))
}

fn checked_eps(
    predictor: &dyn NoisePredictor,
    x_t: &LatentImage,
    t: usize,
    cond: Option<&PromptEmbedding>,
) -> Result<LatentImage> {
    let eps = predictor.predict(x_t, t, cond)?;
    if !eps.same_shape(x_t) {
        return Err(Error::State(format!(
            "predictor returned shape {:?} for input {:?}",
            eps.shape(),
            x_t.shape()
        )));
    }
    if !eps.is_finite() {
        return Err(Error::State(format!(
            "predictor returned non-finite values at t = {t}"
        )));
    }
    Ok(eps)
}

/// Inversion step `i -> i + 1` using the unconditional noise estimate at `x_i`.
pub fn invert_step(
    x_t: &LatentImage,
    i: usize,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    if i >= schedule.inversion_steps() {
        return Err(Error::param(format!(
            "inversion step {i} outside 0..{}",
            schedule.inversion_steps()
        )));
    }
    let eps = checked_eps(predictor, x_t, schedule.timestep(i), None)?;
    ddim_invert_update(x_t, &eps, schedule.alpha_at(i), schedule.alpha_at(i + 1))
}

/// Runs all `S / stride` inversion steps from `x0`, keeping every state.
pub fn invert(
    x0: &LatentImage,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    invert_steps(x0, schedule.inversion_steps(), predictor, schedule)
}

/// Inversion with an explicit effective step count (`0` is allowed).
pub fn invert_steps(
    x0: &LatentImage,
    steps: usize,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    if steps > schedule.inversion_steps() {
        return Err(Error::param(format!(
            "{steps} inversion steps exceed S / stride = {}",
            schedule.inversion_steps()
        )));
    }
    let mut states = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for i in 0..steps {
        let next = invert_step(&x, i, predictor, schedule)?;
        states.push(std::mem::replace(&mut x, next));
    }
    Ok(Trajectory {
        states,
        noise_map: x,
    })
}

/// Sampling step `i -> i - 1`, conditioned on `cond`.
pub fn sample_step(
    x_t: &LatentImage,
    i: usize,
    cond: Option<&PromptEmbedding>,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    if i == 0 || i > schedule.effective_steps() {
        return Err(Error::param(format!(
            "sampling step {i} outside 1..={}",
            schedule.effective_steps()
        )));
    }
    let eps = checked_eps(predictor, x_t, schedule.timestep(i), cond)?;
    ddim_sample_update(x_t, &eps, schedule.alpha_at(i), schedule.alpha_at(i - 1))
}

/// Samples from effective step `from` down to `to`. When a provider is given
/// it is queried once per step at the pre-update state, so the returned map
/// list has `from - to` entries.
pub fn sample(
    x_start: &LatentImage,
    from: usize,
    to: usize,
    cond: Option<&PromptEmbedding>,
    predictor: &dyn NoisePredictor,
    provider: Option<&dyn AttentionProvider>,
    schedule: &NoiseSchedule,
) -> Result<(LatentImage, Vec<AttentionMap>)> {
    if from < to {
        return Err(Error::param(format!(
            "cannot sample upward from {from} to {to}"
        )));
    }
    if from > schedule.effective_steps() {
        return Err(Error::param(format!(
            "start step {from} exceeds {} effective steps",
            schedule.effective_steps()
        )));
    }
    let mut maps = Vec::with_capacity(from - to);
    let mut x = x_start.clone();
    for i in (to + 1..=from).rev() {
        if let Some(p) = provider {
            maps.push(p.emit(&x, schedule.timestep(i), cond)?);
        }
        x = sample_step(&x, i, cond, predictor, schedule)?;
    }
    Ok((x, maps))
}

/// Relative L2 error `|x̂ - x0| / |x0|` of full-depth inversion followed by
/// unconditional sampling back to step 0.
pub fn roundtrip_error(
    x0: &LatentImage,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let traj = invert(x0, predictor, schedule)?;
    let (back, _) = sample(
        traj.noise_map(),
        schedule.inversion_steps(),
        0,
        None,
        predictor,
        None,
        schedule,
    )?;
    let norm = x0.norm();
    if norm == 0.0 {
        return Err(Error::param(
            "round trip of an all-zero image has no relative error",
        ));
    }
    Ok(back.sub(x0).norm() / norm)
}
