use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::prompt::PromptEmbedding;
use crate::rng::{normals, Rng};
use crate::tensor::LatentImage;

use super::NoisePredictor;

/// How the mixture spans the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    /// One mixture over the whole `C·H·W` vector.
    #[default]
    Joint,
    /// Independent mixtures at every spatial site, each over the `C`-vector
    /// of the component means at that site. Component weights are shared.
    PerSite,
}

/// Prompt class: a key embedding and the weighted components it admits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionClass {
    pub name: String,
    pub key: PromptEmbedding,
    /// `(component index, weight)`; weights are renormalised on use.
    pub members: Vec<(usize, f64)>,
}

/// Isotropic Gaussian mixture with optional prompt classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureModel {
    weights: Vec<f64>,
    means: Vec<LatentImage>,
    sigma0: f64,
    classes: Vec<ConditionClass>,
    factorization: Factorization,
}

impl GaussianMixtureModel {
    pub const DEFAULT_SIGMA0: f64 = 0.05;

    pub fn new(weights: Vec<f64>, means: Vec<LatentImage>, sigma0: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::Configuration(format!(
                "{} weights for {} means",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::Configuration(
                "component weights must lie in (0, 1]".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Configuration(format!(
                "weights sum to {total}, not 1"
            )));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Configuration(format!(
                "sigma0 = {sigma0} must be positive"
            )));
        }
        if means.iter().any(|m| !m.same_shape(&means[0])) {
            return Err(Error::Configuration(
                "component means differ in shape".into(),
            ));
        }
        Ok(Self {
            weights,
            means,
            sigma0,
            classes: Vec::new(),
            factorization: Factorization::Joint,
        })
    }

    /// Equal weights over `means`.
    pub fn uniform(means: Vec<LatentImage>, sigma0: f64) -> Result<Self> {
        let n = means.len().max(1);
        Self::new(vec![1.0 / n as f64; means.len()], means, sigma0)
    }

    pub fn with_factorization(mut self, f: Factorization) -> Self {
        self.factorization = f;
        self
    }

    pub fn with_class(mut self, class: ConditionClass) -> Result<Self> {
        if class.members.is_empty() {
            return Err(Error::Configuration(format!(
                "class '{}' has no components",
                class.name
            )));
        }
        for &(k, w) in &class.members {
            if k >= self.means.len() {
                return Err(Error::Configuration(format!(
                    "class '{}' references component {k} of {}",
                    class.name,
                    self.means.len()
                )));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Configuration(format!(
                    "class '{}' has weight {w}",
                    class.name
                )));
            }
        }
        self.classes.push(class);
        Ok(self)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[LatentImage] {
        &self.means
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn classes(&self) -> &[ConditionClass] {
        &self.classes
    }

    pub fn factorization(&self) -> Factorization {
        self.factorization
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.means[0].shape()
    }

    /// Nearest class by key distance.
    pub fn resolve_class(&self, cond: &PromptEmbedding) -> Result<&ConditionClass> {
        self.classes
            .iter()
            .filter(|c| c.key.dim() == cond.dim())
            .min_by(|a, b| a.key.distance_sq(cond).total_cmp(&b.key.distance_sq(cond)))
            .ok_or_else(|| {
                Error::Configuration(format!(
                    "no conditioning class of dimension {} is defined",
                    cond.dim()
                ))
            })
    }

    /// `(index, normalised weight)` pairs active under `cond`.
    pub fn active_components(&self, cond: Option<&PromptEmbedding>) -> Result<Vec<(usize, f64)>> {
        let raw: Vec<(usize, f64)> = match cond {
            None => self.weights.iter().copied().enumerate().collect(),
            Some(c) => self.resolve_class(c)?.members.clone(),
        };
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        if raw.is_empty() || total <= 0.0 {
            return Err(Error::Configuration(
                "conditioned component set is empty".into(),
            ));
        }
        Ok(raw.into_iter().map(|(k, w)| (k, w / total)).collect())
    }

    /// Draws one clean sample.
    pub fn sample(&self, rng: &mut Rng, cond: Option<&PromptEmbedding>) -> Result<LatentImage> {
        let active = self.active_components(cond)?;
        let pick = |rng: &mut Rng| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for &(k, w) in &active {
                acc += w;
                if u < acc {
                    return k;
                }
            }
            active.last().expect("nonempty").0
        };
        let (c, h, w) = self.shape();
        let noise = normals(rng, c * h * w);
        let mut out = vec![0.0; c * h * w];
        match self.factorization {
            Factorization::Joint => {
                let k = pick(rng);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = self.means[k].as_slice()[i] + self.sigma0 * noise[i];
                }
            }
            Factorization::PerSite => {
                for site in 0..h * w {
                    let k = pick(rng);
                    for ch in 0..c {
                        let i = ch * h * w + site;
                        out[i] = self.means[k].as_slice()[i] + self.sigma0 * noise[i];
                    }
                }
            }
        }
        LatentImage::from_vec(c, h, w, out)
    }

    pub fn to_spec(&self, prototype_ids: &[String]) -> Result<GmmSpec> {
        if prototype_ids.len() != self.means.len() {
            return Err(Error::param("one prototype id per component is required"));
        }
        Ok(GmmSpec {
            sigma0: self.sigma0,
            factorization: self.factorization,
            components: self
                .weights
                .iter()
                .zip(prototype_ids)
                .map(|(&weight, id)| GmmComponentSpec {
                    weight,
                    prototype: id.clone(),
                })
                .collect(),
            classes: self.classes.clone(),
        })
    }
}

/// JSON form: means are referenced by prototype id and re-rendered on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub sigma0: f64,
    #[serde(default)]
    pub factorization: Factorization,
    pub components: Vec<GmmComponentSpec>,
    #[serde(default)]
    pub classes: Vec<ConditionClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponentSpec {
    pub weight: f64,
    pub prototype: String,
}

impl GmmSpec {
    pub fn build(
        &self,
        resolve: impl Fn(&str) -> Result<LatentImage>,
    ) -> Result<GaussianMixtureModel> {
        let means = self
            .components
            .iter()
            .map(|c| resolve(&c.prototype))
            .collect::<Result<Vec<_>>>()?;
        let weights = self.components.iter().map(|c| c.weight).collect();
        let mut gmm = GaussianMixtureModel::new(weights, means, self.sigma0)?
            .with_factorization(self.factorization);
        for class in &self.classes {
            gmm = gmm.with_class(class.clone())?;
        }
        Ok(gmm)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior-weighted residual `Σ_k r_k (x - sqrt(ᾱ) μ_k)` over a set of
/// coordinates, plus the log-sum-exp of the unnormalised log posteriors.
fn mixture_residual(
    x: &[f64],
    means: &[&[f64]],
    log_w: &[f64],
    sqrt_a: f64,
    s2: f64,
    out: &mut [f64],
) -> f64 {
    let logits: Vec<f64> = means
        .iter()
        .zip(log_w)
        .map(|(mu, lw)| {
            let d2: f64 = x
                .iter()
                .zip(mu.iter())
                .map(|(a, m)| (a - sqrt_a * m).powi(2))
                .sum();
            lw - d2 / (2.0 * s2)
        })
        .collect();
    let lse = log_sum_exp(&logits);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (mu, l) in means.iter().zip(&logits) {
        let r = (l - lse).exp();
        if r == 0.0 {
            continue;
        }
        for ((o, a), m) in out.iter_mut().zip(x).zip(mu.iter()) {
            *o += r * (a - sqrt_a * m);
        }
    }
    lse
}

fn noised_variance(sigma0: f64, a: f64) -> f64 {
    a * sigma0 * sigma0 + (1.0 - a)
}

/// Exact noise estimate `-sqrt(1 - ᾱ_t) ∇ log p_t(x_t)` for the (conditioned)
/// mixture, where `p_t` has means `sqrt(ᾱ_t) μ_k` and variance
/// `ᾱ_t σ0² + 1 - ᾱ_t`.
pub fn analytic_eps(
    gmm: &GaussianMixtureModel,
    x_t: &LatentImage,
    t: usize,
    cond: Option<&PromptEmbedding>,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    let a = *schedule
        .alpha_bar()
        .get(t)
        .ok_or_else(|| Error::param(format!("timestep {t} beyond schedule")))?;
    eps_at_alpha(gmm, x_t, a, cond)
}

pub(crate) fn eps_at_alpha(
    gmm: &GaussianMixtureModel,
    x_t: &LatentImage,
    a: f64,
    cond: Option<&PromptEmbedding>,
) -> Result<LatentImage> {
    if x_t.shape() != gmm.shape() {
        return Err(Error::param(format!(
            "input shape {:?} does not match mixture shape {:?}",
            x_t.shape(),
            gmm.shape()
        )));
    }
    let active = gmm.active_components(cond)?;
    let log_w: Vec<f64> = active.iter().map(|(_, w)| w.ln()).collect();
    let sqrt_a = a.sqrt();
    let s2 = noised_variance(gmm.sigma0, a);
    let scale = (1.0 - a).sqrt() / s2;

    let mut eps = vec![0.0; x_t.len()];
    match gmm.factorization {
        Factorization::Joint => {
            let means: Vec<&[f64]> = active
                .iter()
                .map(|&(k, _)| gmm.means[k].as_slice())
                .collect();
            mixture_residual(x_t.as_slice(), &means, &log_w, sqrt_a, s2, &mut eps);
        }
        Factorization::PerSite => {
            let (c, h, w) = x_t.shape();
            let n = h * w;
            let mut xs = vec![0.0; c];
            let mut out = vec![0.0; c];
            let mut site_means = vec![vec![0.0; c]; active.len()];
            for site in 0..n {
                for ch in 0..c {
                    xs[ch] = x_t.as_slice()[ch * n + site];
                    for (j, &(k, _)) in active.iter().enumerate() {
                        site_means[j][ch] = gmm.means[k].as_slice()[ch * n + site];
                    }
                }
                let refs: Vec<&[f64]> = site_means.iter().map(Vec::as_slice).collect();
                mixture_residual(&xs, &refs, &log_w, sqrt_a, s2, &mut out);
                for ch in 0..c {
                    eps[ch * n + site] = out[ch];
                }
            }
        }
    }
    eps.iter_mut().for_each(|e| *e *= scale);
    Ok(x_t.with_data(eps))
}

/// `log p_t(x)` under the (conditioned) mixture at `ᾱ = a`.
pub fn log_density(
    gmm: &GaussianMixtureModel,
    x: &LatentImage,
    a: f64,
    cond: Option<&PromptEmbedding>,
) -> Result<f64> {
    let active = gmm.active_components(cond)?;
    let log_w: Vec<f64> = active.iter().map(|(_, w)| w.ln()).collect();
    let sqrt_a = a.sqrt();
    let s2 = noised_variance(gmm.sigma0, a);
    let norm = |dim: usize| -0.5 * dim as f64 * (2.0 * std::f64::consts::PI * s2).ln();
    let (c, h, w) = x.shape();
    match gmm.factorization {
        Factorization::Joint => {
            let means: Vec<&[f64]> = active
                .iter()
                .map(|&(k, _)| gmm.means[k].as_slice())
                .collect();
            let mut scratch = vec![0.0; x.len()];
            Ok(
                mixture_residual(x.as_slice(), &means, &log_w, sqrt_a, s2, &mut scratch)
                    + norm(x.len()),
            )
        }
        Factorization::PerSite => {
            let n = h * w;
            let mut total = 0.0;
            let mut scratch = vec![0.0; c];
            for site in 0..n {
                let xs: Vec<f64> = (0..c).map(|ch| x.as_slice()[ch * n + site]).collect();
                let ms: Vec<Vec<f64>> = active
                    .iter()
                    .map(|&(k, _)| {
                        (0..c)
                            .map(|ch| gmm.means[k].as_slice()[ch * n + site])
                            .collect()
                    })
                    .collect();
                let refs: Vec<&[f64]> = ms.iter().map(Vec::as_slice).collect();
                total += mixture_residual(&xs, &refs, &log_w, sqrt_a, s2, &mut scratch) + norm(c);
            }
            Ok(total)
        }
    }
}

/// [`NoisePredictor`] backed by [`analytic_eps`].
#[derive(Clone, Debug)]
pub struct GmmPredictor {
    gmm: GaussianMixtureModel,
    schedule: NoiseSchedule,
}

impl GmmPredictor {
    pub fn new(gmm: GaussianMixtureModel, schedule: NoiseSchedule) -> Self {
        Self { gmm, schedule }
    }

    pub fn gmm(&self) -> &GaussianMixtureModel {
        &self.gmm
    }
}

impl NoisePredictor for GmmPredictor {
    fn predict(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: Option<&PromptEmbedding>,
    ) -> Result<LatentImage> {
        analytic_eps(&self.gmm, x_t, t, cond, &self.schedule)
    }
}
