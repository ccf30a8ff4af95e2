//! Minimal CPU layers with hand-written backward passes.
//!
//! Every model keeps its parameters in one flat `Vec<f64>`; layers only store
//! their offset into it. That makes checkpointing a single block copy and
//! lets finite-difference checks perturb any parameter by index.

use rand::Rng as _;

use crate::rng::Rng;

/// `C×H×W` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feature {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "feature size mismatch");
        Self { c, h, w, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Feature {
        self.shaped_like(self.data.iter().map(|&v| f(v)).collect())
    }

    fn shaped_like(&self, data: Vec<f64>) -> Feature {
        Feature::from_vec(self.c, self.h, self.w, data)
    }
}

/// Accumulates parameter segments while a model is being laid out.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    len: usize,
    segments: Vec<Segment>,
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    offset: usize,
    len: usize,
    fan_in: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserves `len` parameters initialised with fan-in `fan_in`.
    pub fn reserve(&mut self, len: usize, fan_in: usize) -> usize {
        let offset = self.len;
        self.segments.push(Segment {
            offset,
            len,
            fan_in,
        });
        self.len += len;
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Uniform fan-in initialisation: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases alike.
    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        for s in &self.segments {
            let bound = 1.0 / (s.fan_in.max(1) as f64).sqrt();
            for v in &mut p[s.offset..s.offset + s.len] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }
}

/// Same-padded 2-D convolution with odd square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    offset: usize,
}

impl Conv2d {
    pub fn new(b: &mut LayoutBuilder, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel must be odd");
        let fan_in = cin * k * k;
        let offset = b.reserve(cout * fan_in, fan_in);
        b.reserve(cout, fan_in);
        Self {
            cin,
            cout,
            k,
            offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    fn weight_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        self.offset + ((co * self.cin + ci) * self.k + ky) * self.k + kx
    }

    fn bias_index(&self, co: usize) -> usize {
        self.offset + self.cout * self.cin * self.k * self.k + co
    }

    pub fn forward(&self, p: &[f64], x: &Feature) -> Feature {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let pad = (self.k / 2) as isize;
        let mut out = Feature::zeros(self.cout, h, w);
        for co in 0..self.cout {
            let bias = p[self.bias_index(co)];
            let plane = out.plane_mut(co);
            plane.iter_mut().for_each(|v| *v = bias);
            for ci in 0..self.cin {
                let src = x.plane(ci);
                for ky in 0..self.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..self.k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        let wv = p[self.weight_index(co, ci, ky, kx)];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let srow = &src[sy * w..(sy + 1) * w];
                            let orow = &mut plane[y * w..(y + 1) * w];
                            for xx in x0..x1 {
                                orow[xx] += wv * srow[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, p: &[f64], x: &Feature, dy: &Feature, grad: &mut [f64]) -> Feature {
        let (h, w) = (x.h, x.w);
        let pad = (self.k / 2) as isize;
        let mut dx = Feature::zeros(self.cin, h, w);
        for co in 0..self.cout {
            let g = dy.plane(co);
            grad[self.bias_index(co)] += g.iter().sum::<f64>();
            for ci in 0..self.cin {
                let src = x.plane(ci);
                for ky in 0..self.k {
                    let oy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, oy);
                    for kx in 0..self.k {
                        let ox = kx as isize - pad;
                        let (x0, x1) = valid_range(w, ox);
                        let wi = self.weight_index(co, ci, ky, kx);
                        let wv = p[wi];
                        let mut acc = 0.0;
                        let dplane = dx.plane_mut(ci);
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            for xx in x0..x1 {
                                let sx = (xx as isize + ox) as usize;
                                let gv = g[y * w + xx];
                                acc += gv * src[sy * w + sx];
                                dplane[sy * w + sx] += wv * gv;
                            }
                        }
                        grad[wi] += acc;
                    }
                }
            }
        }
        dx
    }
}

/// Output rows/cols whose source `i + d` lies inside `0..n`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.min(n))
}

/// Dense layer `y = W x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub nin: usize,
    pub nout: usize,
    offset: usize,
}

impl Linear {
    pub fn new(b: &mut LayoutBuilder, nin: usize, nout: usize) -> Self {
        let offset = b.reserve(nin * nout, nin);
        b.reserve(nout, nin);
        Self { nin, nout, offset }
    }

    pub fn param_count(&self) -> usize {
        self.nin * self.nout + self.nout
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.nin);
        let wt = &p[self.offset..self.offset + self.nin * self.nout];
        let bias = &p[self.offset + self.nin * self.nout..self.offset + self.param_count()];
        (0..self.nout)
            .map(|o| {
                let row = &wt[o * self.nin..(o + 1) * self.nin];
                bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let nw = self.nin * self.nout;
        let mut dx = vec![0.0; self.nin];
        for o in 0..self.nout {
            let g = dy[o];
            grad[self.offset + nw + o] += g;
            if g == 0.0 {
                continue;
            }
            let row = self.offset + o * self.nin;
            for i in 0..self.nin {
                grad[row + i] += g * x[i];
                dx[i] += g * p[row + i];
            }
        }
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    pub fn forward(self, x: &Feature) -> Feature {
        match self {
            Activation::Silu => x.map(|v| v * sigmoid(v)),
            Activation::Identity => x.clone(),
        }
    }

    /// `dL/dx` given the pre-activation `x`.
    pub fn backward(self, x: &Feature, dy: &Feature) -> Feature {
        match self {
            Activation::Silu => x.shaped_like(
                x.data
                    .iter()
                    .zip(&dy.data)
                    .map(|(&v, &g)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect(),
            ),
            Activation::Identity => dy.clone(),
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn avg_pool2(x: &Feature) -> Feature {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Feature::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let s = x.at(c, 2 * y, 2 * xx)
                    + x.at(c, 2 * y + 1, 2 * xx)
                    + x.at(c, 2 * y, 2 * xx + 1)
                    + x.at(c, 2 * y + 1, 2 * xx + 1);
                out.data[(c * h + y) * w + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Feature) -> Feature {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Feature::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..h {
            for xx in 0..w {
                dx.data[(c * h + y) * w + xx] = 0.25 * dy.at(c, y / 2, xx / 2);
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Feature) -> Feature {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Feature::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Feature) -> Feature {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Feature::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[(c * h + y / 2) * w + xx / 2] += dy.at(c, y, xx);
            }
        }
    }
    dx
}

pub fn concat(a: &Feature, b: &Feature) -> Feature {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feature::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Splits a channel-concatenated gradient back into its two halves.
pub fn split(d: &Feature, first: usize) -> (Feature, Feature) {
    let n = d.h * d.w;
    let a = Feature::from_vec(first, d.h, d.w, d.data[..first * n].to_vec());
    let b = Feature::from_vec(d.c - first, d.h, d.w, d.data[first * n..].to_vec());
    (a, b)
}

/// Adam optimiser state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}
