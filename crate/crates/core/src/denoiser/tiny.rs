//! Three-layer convolutional ε-predictor trained with the usual
//! noise-regression objective. It exists to exercise the predictor seam with
//! a learned model; quality is not a goal.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{split, Activation, Adam, Conv2d, Feature, LayoutBuilder};
use crate::prompt::PromptEmbedding;
use crate::rng::{self, normals};
use crate::tensor::LatentImage;

use super::NoisePredictor;

const POS_PLANES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    /// Smallest raw timestep drawn during training.
    pub t_min: usize,
    pub seed: u64,
}

impl Default for TinyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: 3e-3,
            hidden: 16,
            t_min: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TinyTrainReport {
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Layers {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    pos_offset: usize,
}

#[derive(Clone, Debug)]
pub struct TinyDenoiser {
    channels: usize,
    height: usize,
    width: usize,
    class_keys: Vec<PromptEmbedding>,
    layers: Layers,
    params: Vec<f64>,
    schedule: NoiseSchedule,
}

struct Cache {
    input: Feature,
    a1: Feature,
    h1: Feature,
    a2: Feature,
    h2: Feature,
}

impl TinyDenoiser {
    pub fn new(
        shape: (usize, usize, usize),
        class_keys: Vec<PromptEmbedding>,
        hidden: usize,
        schedule: NoiseSchedule,
        seed: u64,
    ) -> Self {
        let (channels, height, width) = shape;
        let cin = channels + 1 + class_keys.len() + POS_PLANES;
        let mut b = LayoutBuilder::new();
        let conv1 = Conv2d::new(&mut b, cin, hidden, 3);
        let conv2 = Conv2d::new(&mut b, hidden, hidden, 3);
        let conv3 = Conv2d::new(&mut b, hidden, channels, 3);
        let pos_offset = b.reserve(POS_PLANES * height * width, 1);
        let mut params = b.init(&mut rng::rng_for(seed, "tiny-denoiser/init"));
        params[pos_offset..].iter_mut().for_each(|v| *v = 0.0);
        Self {
            channels,
            height,
            width,
            class_keys,
            layers: Layers {
                conv1,
                conv2,
                conv3,
                pos_offset,
            },
            params,
            schedule,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn class_index(&self, cond: Option<&PromptEmbedding>) -> Option<usize> {
        let c = cond?;
        self.class_keys
            .iter()
            .enumerate()
            .filter(|(_, k)| k.dim() == c.dim())
            .min_by(|a, b| a.1.distance_sq(c).total_cmp(&b.1.distance_sq(c)))
            .map(|(i, _)| i)
    }

    fn input(&self, x: &LatentImage, t: usize, class: Option<usize>) -> Feature {
        let n = self.height * self.width;
        let a = self.schedule.alpha_bar()[t];
        let mut data =
            Vec::with_capacity((self.channels + 1 + self.class_keys.len() + POS_PLANES) * n);
        data.extend_from_slice(x.as_slice());
        data.extend(std::iter::repeat_n((1.0 - a).sqrt(), n));
        for k in 0..self.class_keys.len() {
            let v = if Some(k) == class { 1.0 } else { 0.0 };
            data.extend(std::iter::repeat_n(v, n));
        }
        data.extend_from_slice(
            &self.params[self.layers.pos_offset..self.layers.pos_offset + POS_PLANES * n],
        );
        Feature::from_vec(data.len() / n, self.height, self.width, data)
    }

    fn forward(&self, p: &[f64], input: Feature) -> (Feature, Cache) {
        let l = &self.layers;
        let a1 = l.conv1.forward(p, &input);
        let h1 = Activation::Silu.forward(&a1);
        let a2 = l.conv2.forward(p, &h1);
        let h2 = Activation::Silu.forward(&a2);
        let out = l.conv3.forward(p, &h2);
        (
            out,
            Cache {
                input,
                a1,
                h1,
                a2,
                h2,
            },
        )
    }

    fn backward(&self, p: &[f64], cache: &Cache, dout: &Feature, grad: &mut [f64]) {
        let l = &self.layers;
        let dh2 = l.conv3.backward(p, &cache.h2, dout, grad);
        let da2 = Activation::Silu.backward(&cache.a2, &dh2);
        let dh1 = l.conv2.backward(p, &cache.h1, &da2, grad);
        let da1 = Activation::Silu.backward(&cache.a1, &dh1);
        let dinput = l.conv1.backward(p, &cache.input, &da1, grad);
        let fixed = dinput.c - POS_PLANES;
        let (_, dpos) = split(&dinput, fixed);
        for (g, d) in grad[l.pos_offset..].iter_mut().zip(&dpos.data) {
            *g += d;
        }
    }
}

impl NoisePredictor for TinyDenoiser {
    fn predict(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: Option<&PromptEmbedding>,
    ) -> Result<LatentImage> {
        if x_t.shape() != (self.channels, self.height, self.width) {
            return Err(Error::param(format!(
                "tiny denoiser expects {:?}, got {:?}",
                (self.channels, self.height, self.width),
                x_t.shape()
            )));
        }
        if t >= self.schedule.alpha_bar().len() {
            return Err(Error::param(format!("timestep {t} beyond schedule")));
        }
        let input = self.input(x_t, t, self.class_index(cond));
        let (out, _) = self.forward(&self.params, input);
        LatentImage::from_vec(self.channels, self.height, self.width, out.data)
    }
}

/// Trains a [`TinyDenoiser`] on `(image, class)` pairs with Adam.
/// `class_keys[k]` is the prompt embedding that selects class `k` at
/// inference time.
pub fn train_tiny_denoiser(
    dataset: &[(LatentImage, usize)],
    class_keys: Vec<PromptEmbedding>,
    schedule: &NoiseSchedule,
    cfg: &TinyTrainConfig,
) -> Result<(TinyDenoiser, TinyTrainReport)> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::param("tiny denoiser needs a nonempty dataset"))?;
    if dataset
        .iter()
        .any(|(x, k)| !x.same_shape(&first.0) || *k >= class_keys.len().max(1))
    {
        return Err(Error::param(
            "dataset images must share a shape and use known classes",
        ));
    }
    let t_max = schedule.total_steps();
    if cfg.t_min == 0 || cfg.t_min > t_max || cfg.batch_size == 0 {
        return Err(Error::param("need 1 <= t_min <= T and batch_size >= 1"));
    }
    let mut model = TinyDenoiser::new(
        first.0.shape(),
        class_keys,
        cfg.hidden,
        schedule.clone(),
        cfg.seed,
    );
    let mut opt = Adam::new(model.params.len(), cfg.lr);
    let mut rng = rng::rng_for(cfg.seed, "tiny-denoiser/train");
    let mut report = TinyTrainReport::default();
    let has_classes = !model.class_keys.is_empty();

    for step in 0..cfg.steps {
        let mut grad = vec![0.0; model.params.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (x0, class) = &dataset[rng.gen_range(0..dataset.len())];
            let t = rng.gen_range(cfg.t_min..=t_max);
            let a = schedule.alpha_bar()[t];
            let eps = normals(&mut rng, x0.len());
            let xt: Vec<f64> = x0
                .as_slice()
                .iter()
                .zip(&eps)
                .map(|(x, e)| a.sqrt() * x + (1.0 - a).sqrt() * e)
                .collect();
            let xt = x0.with_data(xt);
            let input = model.input(&xt, t, has_classes.then_some(*class));
            let (out, cache) = model.forward(&model.params, input);
            let n = (out.data.len() * cfg.batch_size) as f64;
            let mut dout = out.clone();
            for (i, d) in dout.data.iter_mut().enumerate() {
                let r = out.data[i] - eps[i];
                loss += r * r / n;
                *d = 2.0 * r / n;
            }
            model.backward(&model.params, &cache, &dout, &mut grad);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss,
                last_good: Some(model.params.clone()),
            });
        }
        report.losses.push(loss);
        opt.step(&mut model.params, &grad);
    }
    Ok((model, report))
}
