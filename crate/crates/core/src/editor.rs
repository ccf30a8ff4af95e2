//! End-to-end editing: invert the input, sample a prompt-conditioned branch
//! while collecting attention, build the editing mask, refine the noise map
//! and denoise with per-step blending against the stored trajectory.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_process, average_attention, resize_attention, AttentionMap, AttentionProvider,
};
use crate::datagen::{task_mixture, EditTask};
use crate::denoiser::{GaussianMixtureModel, GmmPredictor, NoisePredictor};
use crate::diffusion::{invert, sample, sample_step, NoiseSchedule, Trajectory};
use crate::error::{Error, Result, StageExt};
use crate::masknet::{binarize, predict_mask, EditMask, MaskInput, MaskNetModel};
use crate::prompt::{PromptEmbedding, PromptEncoder, PromptText};
use crate::rng::{self, normals};
use crate::tensor::{Grid, LatentImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Masknet,
    Foreground,
    AttentionThreshold,
    /// Ground-truth editing region (diagnostics only).
    Truth,
    /// All-zero mask.
    Empty,
}

impl std::str::FromStr for MaskSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "masknet" => MaskSource::Masknet,
            "foreground" => MaskSource::Foreground,
            "attention_threshold" => MaskSource::AttentionThreshold,
            "truth" => MaskSource::Truth,
            "empty" => MaskSource::Empty,
            _ => return Err(Error::Configuration(format!("unknown mask source '{s}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub total_steps: usize,
    /// Inversion depth `S` in raw timesteps.
    pub inversion_depth: usize,
    pub stride: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub seed: u64,
    pub noise_level: f64,
    pub mask_source: MaskSource,
    pub threshold: f64,
    /// Whether to refine the noise map with attention; off means `x_S` is
    /// used as is.
    pub attention_processor: bool,
    /// Weight of the requested garment under the prompt condition.
    pub fidelity: f64,
    pub sigma0: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            inversion_depth: 200,
            stride: 20,
            beta_min: 1e-4,
            beta_max: 0.02,
            seed: 0,
            noise_level: 0.1,
            mask_source: MaskSource::Masknet,
            threshold: 0.5,
            attention_processor: true,
            fidelity: 0.8,
            sigma0: GaussianMixtureModel::DEFAULT_SIGMA0,
        }
    }
}

impl EditConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        if self.inversion_depth == 0 || self.inversion_depth > self.total_steps {
            return Err(Error::Configuration(format!(
                "need 0 < S <= T, got S = {} and T = {}",
                self.inversion_depth, self.total_steps
            )));
        }
        NoiseSchedule::linear(self.total_steps, self.beta_min, self.beta_max)?
            .with_inversion(self.inversion_depth, self.stride)
    }
}

/// Encoder/decoder seam between image and latent space.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &LatentImage) -> Result<LatentImage>;
    fn decode(&self, latent: &LatentImage) -> Result<LatentImage>;
}

/// Pixel-space diffusion: latents are the images themselves.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &LatentImage) -> Result<LatentImage> {
        Ok(image.clone())
    }

    fn decode(&self, latent: &LatentImage) -> Result<LatentImage> {
        Ok(latent.clone())
    }
}

/// Body layout used to build masks.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyInfo {
    pub foreground: Grid,
    pub parts: Vec<u8>,
    /// Ground-truth region, required only by [`MaskSource::Truth`].
    pub truth_region: Option<EditMask>,
}

/// Everything `edit` needs besides the image, prompt and config.
pub struct EditDeps<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub provider: &'a dyn AttentionProvider,
    pub masknet: Option<&'a MaskNetModel>,
    pub encoder: &'a PromptEncoder,
    pub codec: &'a dyn LatentCodec,
    pub body: &'a BodyInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditProvenance {
    pub config: EditConfig,
    pub seeds: BTreeMap<String, u64>,
    pub mask_prompt: String,
    pub attention_maps: usize,
    pub blend_steps: usize,
    /// Wall-clock milliseconds per stage; excluded from determinism checks.
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    pub x_org: LatentImage,
    pub x_out: LatentImage,
    pub mask: EditMask,
    /// Averaged attention at its native resolution.
    pub attention: AttentionMap,
    pub x_s: LatentImage,
    pub x_s_no: LatentImage,
    pub x_s_re: LatentImage,
    pub trajectory: Trajectory,
    pub provenance: EditProvenance,
}

impl EditResult {
    /// Equality ignoring wall-clock timings.
    pub fn same_outputs(&self, other: &EditResult) -> bool {
        let strip = |p: &EditProvenance| EditProvenance {
            timings_ms: BTreeMap::new(),
            ..p.clone()
        };
        self.x_org == other.x_org
            && self.x_out == other.x_out
            && self.mask == other.mask
            && self.attention == other.attention
            && self.x_s == other.x_s
            && self.x_s_no == other.x_s_no
            && self.x_s_re == other.x_s_re
            && self.trajectory == other.trajectory
            && strip(&self.provenance) == strip(&other.provenance)
    }
}

/// `DDIM(x_t^re) ⊙ m + x_{t-1} ⊙ (1 - m)` at effective step `i`, where the
/// DDIM step is conditioned on `cond`.
pub fn blend_step(
    x_t_re: &LatentImage,
    i: usize,
    m: &EditMask,
    trajectory: &Trajectory,
    cond: &PromptEmbedding,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    if i == 0 || i > schedule.inversion_steps() {
        return Err(Error::param(format!(
            "blend step {i} outside 1..={}",
            schedule.inversion_steps()
        )));
    }
    let prev = trajectory
        .state(i - 1)
        .ok_or_else(|| Error::State(format!("trajectory has no state {}", i - 1)))?;
    if m.dims() != (x_t_re.height(), x_t_re.width()) {
        return Err(Error::param("mask and latent differ in resolution"));
    }
    x_t_re.check_same_shape(prev, "blend_step")?;
    let stepped = sample_step(x_t_re, i, Some(cond), predictor, schedule)?;
    let (c, h, w) = x_t_re.shape();
    let n = h * w;
    let mut out = prev.clone();
    let data = out.as_mut_slice();
    for ch in 0..c {
        for s in 0..n {
            let mv = m.as_slice()[s];
            let k = ch * n + s;
            data[k] = if mv == 0.0 {
                prev.as_slice()[k]
            } else if mv == 1.0 {
                stepped.as_slice()[k]
            } else {
                stepped.as_slice()[k] * mv + prev.as_slice()[k] * (1.0 - mv)
            };
        }
    }
    Ok(out)
}

/// Median-threshold mask from an attention map.
pub fn attention_threshold_mask(a: &AttentionMap) -> Result<EditMask> {
    let mut v = a.grid().as_slice().to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    let (h, w) = a.dims();
    Ok(EditMask::binary(Grid::from_fn(h, w, |y, x| {
        (a.get(y, x) >= median) as u8 as f64
    })))
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn edit(
    x_org: &LatentImage,
    target_prompt: &PromptText,
    cfg: &EditConfig,
    deps: &EditDeps,
) -> Result<EditResult> {
    let schedule = cfg.schedule().stage("config")?;
    let mut timings = BTreeMap::new();
    let mut seeds = BTreeMap::new();
    seeds.insert("root".to_string(), cfg.seed);

    let t0 = Instant::now();
    let x0 = deps.codec.encode(x_org).stage("encode")?;
    let (_, h, w) = x0.shape();
    if deps.body.foreground.dims() != (h, w) {
        return Err(Error::param("body layout and latent differ in resolution")).stage("config");
    }
    let trajectory = invert(&x0, deps.predictor, &schedule).stage("invert")?;
    let x_s = trajectory.noise_map().clone();
    timings.insert("invert".to_string(), millis(t0));

    let t0 = Instant::now();
    let cond = deps.encoder.condition(target_prompt);
    let noise_seed = rng::derive_seed(cfg.seed, "editor/x_T");
    seeds.insert("x_T".to_string(), noise_seed);
    let x_t_no = x0.with_data(normals(&mut rng::rng_from(noise_seed), x0.len()));
    let (x_s_no, maps) = sample(
        &x_t_no,
        schedule.effective_steps(),
        schedule.inversion_steps(),
        Some(&cond),
        deps.predictor,
        Some(deps.provider),
        &schedule,
    )
    .stage("sample")?;
    let attention = average_attention(&maps).stage("attention")?;
    let attention_full = resize_attention(&attention, h, w).stage("attention")?;
    timings.insert("sample".to_string(), millis(t0));

    let t0 = Instant::now();
    let mask_prompt = deps.encoder.mask_prompt(target_prompt);
    let mask = match cfg.mask_source {
        MaskSource::Masknet => {
            let model = deps
                .masknet
                .ok_or_else(|| Error::Configuration("mask source 'masknet' needs a model".into()))
                .stage("mask")?;
            let input = MaskInput::new(
                deps.body.foreground.clone(),
                deps.body.parts.clone(),
                crate::prompt::embed_prompt(mask_prompt.tokens(), &deps.encoder.table),
            )
            .stage("mask")?;
            binarize(&predict_mask(model, &input).stage("mask")?, cfg.threshold).stage("mask")?
        }
        MaskSource::Foreground => EditMask::binary(deps.body.foreground.clone()),
        MaskSource::AttentionThreshold => {
            attention_threshold_mask(&attention_full).stage("mask")?
        }
        MaskSource::Truth => deps
            .body
            .truth_region
            .clone()
            .ok_or_else(|| {
                Error::Configuration("mask source 'truth' needs a ground-truth region".into())
            })
            .stage("mask")?,
        MaskSource::Empty => EditMask::zeros(h, w),
    };
    if mask.dims() != (h, w) {
        return Err(Error::param("mask resolution differs from latent")).stage("mask");
    }
    timings.insert("mask".to_string(), millis(t0));

    let t0 = Instant::now();
    let ap_seed = rng::derive_seed(cfg.seed, "editor/attention-processor");
    seeds.insert("attention_processor".to_string(), ap_seed);
    let x_s_re = if cfg.attention_processor {
        attention_process(&x_s, &x_s_no, &attention_full, &mask, ap_seed)
            .stage("attention_processor")?
    } else {
        x_s.clone()
    };
    let mut x = x_s_re.clone();
    let steps = schedule.inversion_steps();
    for i in (1..=steps).rev() {
        x = blend_step(&x, i, &mask, &trajectory, &cond, deps.predictor, &schedule)
            .stage("blend")?;
    }
    let x_out = deps.codec.decode(&x).stage("decode")?;
    timings.insert("blend".to_string(), millis(t0));

    Ok(EditResult {
        x_org: x_org.clone(),
        x_out,
        mask,
        attention,
        x_s,
        x_s_no,
        x_s_re,
        trajectory,
        provenance: EditProvenance {
            config: cfg.clone(),
            seeds,
            mask_prompt: mask_prompt.text(),
            attention_maps: maps.len(),
            blend_steps: steps,
            timings_ms: timings,
        },
    })
}

/// Analytic predictor for a synthetic task under `cfg`.
pub fn task_predictor(
    task: &EditTask,
    cfg: &EditConfig,
    encoder: &PromptEncoder,
) -> Result<GmmPredictor> {
    let (gmm, _) = task_mixture(
        &task.input.spec,
        &task.truth.spec,
        task.input.jitter,
        encoder.condition(&task.target_prompt),
        cfg.fidelity,
        cfg.sigma0,
    )?;
    Ok(GmmPredictor::new(gmm, cfg.schedule()?))
}

pub fn task_body(task: &EditTask) -> BodyInfo {
    BodyInfo {
        foreground: task.input.foreground.clone(),
        parts: task.input.parts.clone(),
        truth_region: Some(task.truth.region.clone()),
    }
}

/// Runs [`edit`] on a synthetic task with the analytic predictor and the
/// synthetic attention provider seeded from `cfg.seed`.
pub fn edit_task(
    task: &EditTask,
    cfg: &EditConfig,
    encoder: &PromptEncoder,
    masknet: Option<&MaskNetModel>,
) -> Result<EditResult> {
    edit_task_image(task, &task.input.image, cfg, encoder, masknet)
}

/// [`edit_task`] on an explicit input image, e.g. one decoded from disk.
pub fn edit_task_image(
    task: &EditTask,
    x_org: &LatentImage,
    cfg: &EditConfig,
    encoder: &PromptEncoder,
    masknet: Option<&MaskNetModel>,
) -> Result<EditResult> {
    let predictor = task_predictor(task, cfg, encoder)?;
    let provider = crate::attention::synthetic_attention(
        task,
        cfg.noise_level,
        rng::derive_seed(cfg.seed, "editor/attention"),
    )?;
    let body = task_body(task);
    let deps = EditDeps {
        predictor: &predictor,
        provider: &provider,
        masknet,
        encoder,
        codec: &IdentityCodec,
        body: &body,
    };
    edit(x_org, &task.target_prompt, cfg, &deps)
}
