//! Editing-region prediction with a small U-shaped network.
//!
//! Input planes are the body foreground plus a one-hot body-part map; the
//! bottleneck attends over a handful of key/value slots projected from the
//! mask-prompt embedding, so the same body can yield different masks for
//! different shape words.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, concat, sigmoid, split, upsample2, upsample2_backward,
    Activation, Adam, Conv2d, Feature, LayoutBuilder, Linear,
};
use crate::prompt::PromptEmbedding;
use crate::rng;
use crate::tensor::Grid;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"MDMASKN1";

/// Soft or binarized editing mask with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMask {
    grid: Grid,
    /// Threshold used to binarize, when this mask is a binarized one.
    threshold: Option<f64>,
}

impl EditMask {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("mask values must lie in [0, 1]"));
        }
        Ok(Self {
            grid,
            threshold: None,
        })
    }

    /// Binary mask that is 1 wherever `grid > 0`.
    pub fn binary(grid: Grid) -> Self {
        Self {
            grid: grid.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            threshold: Some(DEFAULT_THRESHOLD),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::binary(Grid::zeros(height, width))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::binary(Grid::filled(height, width, 1.0))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.grid.get(y, x)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.grid.as_slice()
    }

    pub fn is_binary(&self) -> bool {
        self.grid.as_slice().iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    /// Number of sites with value ≥ 0.5.
    pub fn area(&self) -> usize {
        self.grid.as_slice().iter().filter(|v| **v >= 0.5).count()
    }

    /// `self ⊆ other` on the ≥ 0.5 supports.
    pub fn is_subset_of(&self, other: &EditMask) -> bool {
        self.dims() == other.dims()
            && self
                .as_slice()
                .iter()
                .zip(other.as_slice())
                .all(|(a, b)| *a < 0.5 || *b >= 0.5)
    }

    pub fn union(&self, other: &EditMask) -> EditMask {
        let data = self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| a.max(*b))
            .collect();
        EditMask::binary(
            Grid::from_vec(self.grid.height(), self.grid.width(), data).expect("same dims"),
        )
    }
}

pub fn binarize(mask: &EditMask, threshold: f64) -> Result<EditMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    Ok(EditMask {
        grid: mask.grid.map(|v| if v >= threshold { 1.0 } else { 0.0 }),
        threshold: Some(threshold),
    })
}

/// Intersection over union of the ≥ 0.5 supports; two empty masks give 1.
pub fn iou(a: &EditMask, b: &EditMask) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        let (x, y) = (*x >= 0.5, *y >= 0.5);
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

pub fn masknet_loss(pred: &EditMask, truth: &EditMask) -> f64 {
    let n = pred.as_slice().len() as f64;
    pred.as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskInput {
    pub foreground: Grid,
    /// Body-part label per site: 0 for background, `1..=P` for parts.
    pub parts: Vec<u8>,
    pub prompt_embedding: PromptEmbedding,
}

impl MaskInput {
    pub fn new(
        foreground: Grid,
        parts: Vec<u8>,
        prompt_embedding: PromptEmbedding,
    ) -> Result<Self> {
        if parts.len() != foreground.len() {
            return Err(Error::param("part map and foreground differ in size"));
        }
        if foreground.as_slice().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::param("foreground must be binary"));
        }
        Ok(Self {
            foreground,
            parts,
            prompt_embedding,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.foreground.dims()
    }

    /// `(1 + P)×H×W` planes: foreground, then one plane per part.
    fn planes(&self, num_parts: usize) -> Feature {
        let (h, w) = self.dims();
        let n = h * w;
        let mut f = Feature::zeros(1 + num_parts, h, w);
        f.data[..n].copy_from_slice(self.foreground.as_slice());
        for (s, &p) in self.parts.iter().enumerate() {
            if p > 0 {
                f.data[p as usize * n + s] = 1.0;
            }
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskNetConfig {
    pub height: usize,
    pub width: usize,
    pub parts: usize,
    pub embed_dim: usize,
    pub enc_channels: [usize; 2],
    pub dec_channels: [usize; 2],
    /// Number of key/value slots projected from the prompt embedding.
    pub slots: usize,
    pub attn_dim: usize,
    pub activation: Activation,
    pub attention: bool,
    pub sigmoid_head: bool,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            parts: 6,
            embed_dim: 32,
            enc_channels: [8, 16],
            dec_channels: [8, 8],
            slots: 4,
            attn_dim: 8,
            activation: Activation::Silu,
            attention: true,
            sigmoid_head: true,
        }
    }
}

impl MaskNetConfig {
    /// Purely linear variant (no activations, attention, or sigmoid); its
    /// loss is exactly quadratic in each single parameter.
    pub fn linear_only() -> Self {
        Self {
            activation: Activation::Identity,
            attention: false,
            sigmoid_head: false,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(4)
            || !self.width.is_multiple_of(4)
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::Configuration(
                "mask resolution must be a positive multiple of 4".into(),
            ));
        }
        if self.parts == 0 || self.parts > 255 || self.slots == 0 || self.attn_dim == 0 {
            return Err(Error::Configuration(
                "parts, slots and attn_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc1: Conv2d,
    enc2: Conv2d,
    query: Linear,
    kv: Linear,
    attn_out: Linear,
    dec1: Conv2d,
    dec2: Conv2d,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct MaskNetModel {
    config: MaskNetConfig,
    seed: u64,
    layers: Layers,
    params: Vec<f64>,
}

struct Cache {
    x: Feature,
    a1: Feature,
    p1: Feature,
    a2: Feature,
    p2: Feature,
    attn: Option<AttnCache>,
    c1: Feature,
    a3: Feature,
    c2: Feature,
    a4: Feature,
    h4: Feature,
    out: Vec<f64>,
}

struct AttnCache {
    e: Vec<f64>,
    kv: Vec<f64>,
    q: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    o: Vec<Vec<f64>>,
}

impl MaskNetModel {
    pub fn new(config: MaskNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = LayoutBuilder::new();
        let [e1, e2] = config.enc_channels;
        let [d1, d2] = config.dec_channels;
        let (l, d) = (config.slots, config.attn_dim);
        let layers = Layers {
            enc1: Conv2d::new(&mut b, 1 + config.parts, e1, 3),
            enc2: Conv2d::new(&mut b, e1, e2, 3),
            query: Linear::new(&mut b, e2, d),
            kv: Linear::new(&mut b, config.embed_dim, 2 * l * d),
            attn_out: Linear::new(&mut b, d, e2),
            dec1: Conv2d::new(&mut b, e2 + e2, d1, 3),
            dec2: Conv2d::new(&mut b, d1 + e1, d2, 3),
            head: Conv2d::new(&mut b, d2, 1, 1),
        };
        let params = b.init(&mut rng::rng_for(seed, "masknet/init"));
        Ok(Self {
            config,
            seed,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &MaskNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::param("parameter vector has the wrong length"));
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, input: &MaskInput) -> Result<()> {
        let c = &self.config;
        if input.dims() != (c.height, c.width) {
            return Err(Error::param(format!(
                "mask input is {:?}, model expects {:?}",
                input.dims(),
                (c.height, c.width)
            )));
        }
        if input.prompt_embedding.dim() != c.embed_dim {
            return Err(Error::param(format!(
                "prompt embedding has dim {}, model expects {}",
                input.prompt_embedding.dim(),
                c.embed_dim
            )));
        }
        if input.parts.iter().any(|p| *p as usize > c.parts) {
            return Err(Error::param("part label beyond configured part count"));
        }
        Ok(())
    }

    fn forward(&self, p: &[f64], input: &MaskInput) -> Cache {
        let l = &self.layers;
        let act = self.config.activation;
        let x = input.planes(self.config.parts);
        let a1 = l.enc1.forward(p, &x);
        let h1 = act.forward(&a1);
        let p1 = avg_pool2(&h1);
        let a2 = l.enc2.forward(p, &p1);
        let h2 = act.forward(&a2);
        let p2 = avg_pool2(&h2);
        let (mid, attn) = if self.config.attention {
            let (m, c) = self.attend(p, &p2, input.prompt_embedding.as_slice());
            (m, Some(c))
        } else {
            (p2.clone(), None)
        };
        let c1 = concat(&upsample2(&mid), &h2);
        let a3 = l.dec1.forward(p, &c1);
        let h3 = act.forward(&a3);
        let c2 = concat(&upsample2(&h3), &h1);
        let a4 = l.dec2.forward(p, &c2);
        let h4 = act.forward(&a4);
        let z = l.head.forward(p, &h4);
        let out = if self.config.sigmoid_head {
            z.data.iter().map(|v| sigmoid(*v)).collect()
        } else {
            z.data
        };
        Cache {
            x,
            a1,
            p1,
            a2,
            p2,
            attn,
            c1,
            a3,
            c2,
            a4,
            h4,
            out,
        }
    }

    /// Residual single-head attention of every bottleneck site over the
    /// prompt slots.
    fn attend(&self, p: &[f64], h: &Feature, e: &[f64]) -> (Feature, AttnCache) {
        let l = &self.layers;
        let (slots, d) = (self.config.slots, self.config.attn_dim);
        let scale = 1.0 / (d as f64).sqrt();
        let kv = l.kv.forward(p, e);
        let (keys, values) = kv.split_at(slots * d);
        let n = h.h * h.w;
        let mut out = h.clone();
        let mut cache = AttnCache {
            e: e.to_vec(),
            kv: kv.clone(),
            q: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            o: Vec::with_capacity(n),
        };
        for s in 0..n {
            let xs: Vec<f64> = (0..h.c).map(|c| h.data[c * n + s]).collect();
            let q = l.query.forward(p, &xs);
            let scores: Vec<f64> = (0..slots)
                .map(|j| {
                    scale
                        * q.iter()
                            .zip(&keys[j * d..(j + 1) * d])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let alpha: Vec<f64> = exp.iter().map(|v| v / z).collect();
            let mut o = vec![0.0; d];
            for (j, a) in alpha.iter().enumerate() {
                for (k, ov) in o.iter_mut().enumerate() {
                    *ov += a * values[j * d + k];
                }
            }
            let proj = l.attn_out.forward(p, &o);
            for (c, v) in proj.iter().enumerate() {
                out.data[c * n + s] += v;
            }
            cache.q.push(q);
            cache.alpha.push(alpha);
            cache.o.push(o);
        }
        (out, cache)
    }

    fn attend_backward(
        &self,
        p: &[f64],
        h: &Feature,
        cache: &AttnCache,
        dout: &Feature,
        grad: &mut [f64],
    ) -> Feature {
        let l = &self.layers;
        let (slots, d) = (self.config.slots, self.config.attn_dim);
        let scale = 1.0 / (d as f64).sqrt();
        let (keys, values) = cache.kv.split_at(slots * d);
        let n = h.h * h.w;
        let mut dh = dout.clone();
        let mut dkv = vec![0.0; cache.kv.len()];
        for s in 0..n {
            let dys: Vec<f64> = (0..h.c).map(|c| dout.data[c * n + s]).collect();
            let do_ = l.attn_out.backward(p, &cache.o[s], &dys, grad);
            let alpha = &cache.alpha[s];
            let mut dalpha = vec![0.0; slots];
            for j in 0..slots {
                for k in 0..d {
                    dalpha[j] += do_[k] * values[j * d + k];
                    dkv[slots * d + j * d + k] += alpha[j] * do_[k];
                }
            }
            let dot: f64 = alpha.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
            let q = &cache.q[s];
            let mut dq = vec![0.0; d];
            for j in 0..slots {
                let ds = alpha[j] * (dalpha[j] - dot) * scale;
                for k in 0..d {
                    dq[k] += ds * keys[j * d + k];
                    dkv[j * d + k] += ds * q[k];
                }
            }
            let xs: Vec<f64> = (0..h.c).map(|c| h.data[c * n + s]).collect();
            let dxs = l.query.backward(p, &xs, &dq, grad);
            for (c, v) in dxs.iter().enumerate() {
                dh.data[c * n + s] += v;
            }
        }
        l.kv.backward(p, &cache.e, &dkv, grad);
        dh
    }

    /// Accumulates `d loss / d params` for `loss = mean((y - truth)^2) * weight`.
    fn backward(&self, p: &[f64], cache: &Cache, truth: &[f64], weight: f64, grad: &mut [f64]) {
        let l = &self.layers;
        let act = self.config.activation;
        let n = truth.len() as f64;
        let dz: Vec<f64> = cache
            .out
            .iter()
            .zip(truth)
            .map(|(y, t)| {
                let dy = 2.0 * (y - t) * weight / n;
                if self.config.sigmoid_head {
                    dy * y * (1.0 - y)
                } else {
                    dy
                }
            })
            .collect();
        let dz = Feature::from_vec(1, cache.h4.h, cache.h4.w, dz);
        let dh4 = l.head.backward(p, &cache.h4, &dz, grad);
        let da4 = act.backward(&cache.a4, &dh4);
        let dc2 = l.dec2.backward(p, &cache.c2, &da4, grad);
        let (du2, mut dh1) = split(&dc2, self.config.dec_channels[0]);
        let dh3 = upsample2_backward(&du2);
        let da3 = act.backward(&cache.a3, &dh3);
        let dc1 = l.dec1.backward(p, &cache.c1, &da3, grad);
        let (du1, mut dh2) = split(&dc1, self.config.enc_channels[1]);
        let dmid = upsample2_backward(&du1);
        let dp2 = match &cache.attn {
            Some(a) => self.attend_backward(p, &cache.p2, a, &dmid, grad),
            None => dmid,
        };
        add_into(&mut dh2, &avg_pool2_backward(&dp2));
        let da2 = act.backward(&cache.a2, &dh2);
        let dp1 = l.enc2.backward(p, &cache.p1, &da2, grad);
        add_into(&mut dh1, &avg_pool2_backward(&dp1));
        let da1 = act.backward(&cache.a1, &dh1);
        l.enc1.backward(p, &cache.x, &da1, grad);
    }

    fn loss_with(&self, p: &[f64], input: &MaskInput, truth: &EditMask) -> f64 {
        let out = self.forward(p, input).out;
        mse(&out, truth.as_slice())
    }

    /// Loss and its parameter gradient for one example.
    fn loss_and_grad(&self, input: &MaskInput, truth: &EditMask, weight: f64) -> (f64, Vec<f64>) {
        let cache = self.forward(&self.params, input);
        let loss = mse(&cache.out, truth.as_slice());
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&self.params, &cache, truth.as_slice(), weight, &mut grad);
        (loss, grad)
    }

    pub fn to_bytes(&self, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            seed: self.seed,
            train: train.cloned(),
            param_count: self.params.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader)> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a MaskNet checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(Error::format("checkpoint header truncated"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let mut model = Self::new(header.config.clone(), header.seed)
            .map_err(|e| Error::format(e.to_string()))?;
        let block = &body[hlen..];
        if header.param_count != model.params.len() || block.len() != 8 * model.params.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} parameter bytes, architecture needs {}",
                block.len(),
                8 * model.params.len()
            )));
        }
        model.params = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if model.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("checkpoint contains non-finite parameters"));
        }
        Ok((model, header))
    }

    pub fn save(&self, path: &Path, train: Option<&TrainConfig>) -> Result<()> {
        let bytes = self.to_bytes(train)?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: MaskNetConfig,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub param_count: usize,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn add_into(dst: &mut Feature, src: &Feature) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

pub fn predict_mask(model: &MaskNetModel, input: &MaskInput) -> Result<EditMask> {
    model.check_input(input)?;
    let out = model.forward(&model.params, input).out;
    let (h, w) = input.dims();
    let grid = Grid::from_vec(h, w, out)?;
    if model.config.sigmoid_head {
        EditMask::new(grid)
    } else {
        EditMask::new(grid.map(|v| v.clamp(0.0, 1.0)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 0.3,
            optimizer: Optimizer::Sgd,
            max_steps: Some(5000),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean batch loss per optimizer step.
    pub step_losses: Vec<f64>,
    /// Full-train-set loss before the first step.
    pub initial_train_loss: f64,
    /// Full-train-set loss of the final parameters.
    pub final_train_loss: f64,
    pub val_iou: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_iou: Option<f64>,
    pub steps: usize,
}

pub type MaskExample = (MaskInput, EditMask);

fn dataset_loss(model: &MaskNetModel, data: &[MaskExample]) -> f64 {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|(x, t)| model.loss_with(&model.params, x, t))
        .collect();
    losses.iter().sum::<f64>() / losses.len().max(1) as f64
}

/// Mean IoU of binarized predictions against the targets.
pub fn mean_iou(model: &MaskNetModel, data: &[MaskExample], threshold: f64) -> Result<f64> {
    let ious: Vec<f64> = data
        .par_iter()
        .map(|(x, t)| -> Result<f64> {
            Ok(iou(&binarize(&predict_mask(model, x)?, threshold)?, t))
        })
        .collect::<Result<_>>()?;
    Ok(ious.iter().sum::<f64>() / ious.len().max(1) as f64)
}

pub fn train_masknet(
    train: &[MaskExample],
    val: &[MaskExample],
    model_cfg: &MaskNetConfig,
    hyper: &TrainConfig,
) -> Result<(MaskNetModel, TrainingReport)> {
    train_masknet_from(
        MaskNetModel::new(model_cfg.clone(), hyper.seed)?,
        train,
        val,
        hyper,
    )
}

/// Continues training from `model`'s current parameters.
pub fn train_masknet_from(
    mut model: MaskNetModel,
    train: &[MaskExample],
    val: &[MaskExample],
    hyper: &TrainConfig,
) -> Result<(MaskNetModel, TrainingReport)> {
    if train.is_empty() {
        return Err(Error::param("MaskNet training set is empty"));
    }
    if hyper.batch_size == 0 || hyper.lr.is_nan() || hyper.lr <= 0.0 {
        return Err(Error::param(
            "batch size and learning rate must be positive",
        ));
    }
    for (x, t) in train.iter().chain(val) {
        model.check_input(x)?;
        if t.dims() != x.dims() {
            return Err(Error::param("target mask resolution differs from input"));
        }
    }
    let mut report = TrainingReport {
        initial_train_loss: dataset_loss(&model, train),
        ..Default::default()
    };
    let mut best = model.params.clone();
    let mut adam = Adam::new(model.params.len(), hyper.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::rng_for(hyper.seed, "masknet/shuffle");
    let cap = hyper.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(hyper.batch_size) {
            if report.steps >= cap {
                break 'epochs;
            }
            let weight = 1.0 / batch.len() as f64;
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| model.loss_and_grad(&train[i].0, &train[i].1, weight))
                .collect();
            let mut grad = vec![0.0; model.params.len()];
            let mut loss = 0.0;
            for (l, g) in &parts {
                loss += l * weight;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: report.steps,
                    loss,
                    last_good: Some(model.params.clone()),
                });
            }
            match hyper.optimizer {
                Optimizer::Sgd => model
                    .params
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(p, g)| *p -= hyper.lr * g),
                Optimizer::Adam => adam.step(&mut model.params, &grad),
            }
            report.step_losses.push(loss);
            report.steps += 1;
        }
        if !val.is_empty() {
            let v = mean_iou(&model, val, DEFAULT_THRESHOLD)?;
            log::debug!(
                "masknet epoch {epoch}: step {} val IoU {v:.4}",
                report.steps
            );
            report.val_iou.push(v);
            if report.best_val_iou.is_none_or(|b| v > b) {
                report.best_val_iou = Some(v);
                report.best_epoch = Some(epoch);
                best = model.params.clone();
            }
        }
    }
    if report.best_epoch.is_some() {
        model.params = best;
    }
    report.final_train_loss = dataset_loss(&model, train);
    Ok((model, report))
}

/// Largest relative error between analytic and central-difference gradients
/// over `samples` randomly chosen parameters. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients from
/// dominating through round-off alone.
pub fn gradient_check(
    model: &MaskNetModel,
    input: &MaskInput,
    truth: &EditMask,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    model.check_input(input)?;
    let (_, grad) = model.loss_and_grad(input, truth, 1.0);
    let mut idx: Vec<usize> = (0..model.params.len()).collect();
    idx.shuffle(&mut rng::rng_for(seed, "masknet/gradcheck"));
    idx.truncate(samples.min(idx.len()));
    let worst = idx
        .par_iter()
        .map(|&i| {
            let mut p = model.params.clone();
            p[i] = model.params[i] + h;
            let up = model.loss_with(&p, input, truth);
            p[i] = model.params[i] - h;
            let down = model.loss_with(&p, input, truth);
            let num = (up - down) / (2.0 * h);
            (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-3)
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, rng_from};

    fn input(seed: u64, cfg: &MaskNetConfig) -> MaskInput {
        let mut r = rng_from(seed);
        let fg = Grid::from_fn(cfg.height, cfg.width, |y, x| {
            !(y + x + seed as usize).is_multiple_of(3) as u8 as f64
        });
        let parts = (0..cfg.height * cfg.width)
            .map(|i| ((i * 7 + seed as usize) % (cfg.parts + 1)) as u8)
            .collect();
        MaskInput::new(
            fg,
            parts,
            PromptEmbedding::new(normals(&mut r, cfg.embed_dim)).unwrap(),
        )
        .unwrap()
    }

    fn target(cfg: &MaskNetConfig) -> EditMask {
        EditMask::binary(Grid::from_fn(cfg.height, cfg.width, |y, x| {
            ((4..10).contains(&y) && x > 5) as u8 as f64
        }))
    }

    #[test]
    fn binarize_cases() {
        let m = EditMask::new(Grid::from_vec(2, 2, vec![0.4, 0.6, 0.5, 0.49]).unwrap()).unwrap();
        assert_eq!(binarize(&m, 0.5).unwrap().as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        let hi = EditMask::new(Grid::filled(3, 3, 0.9)).unwrap();
        assert!(binarize(&hi, 0.5)
            .unwrap()
            .as_slice()
            .iter()
            .all(|v| *v == 1.0));
        let lo = EditMask::new(Grid::filled(3, 3, 0.1)).unwrap();
        assert!(binarize(&lo, 0.5)
            .unwrap()
            .as_slice()
            .iter()
            .all(|v| *v == 0.0));
        assert_eq!(binarize(&m, 0.5).unwrap().threshold(), Some(0.5));
        assert!(binarize(&m, 1.0).is_err());
    }

    #[test]
    fn loss_cases() {
        let t = EditMask::ones(4, 4);
        assert_eq!(masknet_loss(&t, &t), 0.0);
        let half = EditMask::new(Grid::filled(4, 4, 0.5)).unwrap();
        assert_eq!(masknet_loss(&half, &t), 0.25);
    }

    #[test]
    fn iou_cases() {
        let a = EditMask::binary(Grid::from_vec(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let b = EditMask::binary(Grid::from_vec(1, 4, vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&EditMask::zeros(2, 2), &EditMask::zeros(2, 2)), 1.0);
    }

    #[test]
    fn untrained_output_in_open_unit_interval() {
        let cfg = MaskNetConfig::default();
        let m = MaskNetModel::new(cfg.clone(), 3).unwrap();
        let out = predict_mask(&m, &input(1, &cfg)).unwrap();
        assert_eq!(out.dims(), (16, 16));
        assert!(out.as_slice().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(out, predict_mask(&m, &input(1, &cfg)).unwrap());
        assert!(m.param_count() <= 10_000);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = MaskNetConfig::default();
        let m = MaskNetModel::new(cfg.clone(), 0).unwrap();
        let small = MaskNetConfig {
            height: 8,
            width: 8,
            ..cfg.clone()
        };
        assert!(predict_mask(&m, &input(0, &small)).is_err());
        let mut x = input(0, &cfg);
        x.prompt_embedding = PromptEmbedding::zeros(5);
        assert!(predict_mask(&m, &x).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = MaskNetConfig::default();
        let m = MaskNetModel::new(cfg.clone(), 11).unwrap();
        let err = gradient_check(&m, &input(2, &cfg), &target(&cfg), 200, 1e-5, 0).unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
        let err = gradient_check(&m, &input(2, &cfg), &target(&cfg), 200, 1e-5, 1).unwrap();
        assert!(err <= 1e-3, "max relative error {err}");

        let lin = MaskNetConfig::linear_only();
        let m = MaskNetModel::new(lin.clone(), 11).unwrap();
        // Exactly quadratic per parameter, so a wide step only reduces round-off.
        let err = gradient_check(&m, &input(2, &lin), &target(&lin), 300, 1e-2, 0).unwrap();
        assert!(err <= 1e-8, "linear config error {err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = MaskNetConfig::default();
        let m = MaskNetModel::new(cfg, 5).unwrap();
        let bytes = m.to_bytes(Some(&TrainConfig::default())).unwrap();
        let (back, header) = MaskNetModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(header.train, Some(TrainConfig::default()));
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 3);
        assert!(matches!(
            MaskNetModel::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            MaskNetModel::from_bytes(b"garbage!garbage!"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let cfg = MaskNetConfig::default();
        let data = vec![(input(0, &cfg), target(&cfg))];
        let hyper = TrainConfig {
            epochs: 0,
            seed: 4,
            ..Default::default()
        };
        let (m, r) = train_masknet(&data, &[], &cfg, &hyper).unwrap();
        assert_eq!(m.params(), MaskNetModel::new(cfg, 4).unwrap().params());
        assert_eq!(r.steps, 0);
        assert!(train_masknet(&[], &[], &MaskNetConfig::default(), &hyper).is_err());
    }
}
