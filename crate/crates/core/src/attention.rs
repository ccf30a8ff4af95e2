//! Attention maps and the Attention Processor that builds the refined noise
//! map from the inversion noise map and a prompt-conditioned sampling branch.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::EditTask;
use crate::error::{Error, Result};
use crate::masknet::EditMask;
use crate::prompt::PromptEmbedding;
use crate::rng::{self, normals};
use crate::tensor::{Grid, LatentImage};

/// Native resolution of emitted attention maps.
pub const ATTENTION_RES: usize = 16;

/// Nonnegative spatial relevance map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap(Grid);

impl AttentionMap {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid
            .as_slice()
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::param(
                "attention values must be finite and nonnegative",
            ));
        }
        Ok(Self(grid))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::zeros(height, width))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }

    /// Mean value over the sites where `region > 0`; `None` for an empty region.
    pub fn mean_over(&self, region: &Grid) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (a, r) in self.0.as_slice().iter().zip(region.as_slice()) {
            if *r > 0.0 {
                sum += a;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Emits one attention map per sampling step.
pub trait AttentionProvider: Send + Sync {
    fn emit(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: Option<&PromptEmbedding>,
    ) -> Result<AttentionMap>;
}

/// Elementwise mean of equally sized maps.
pub fn average_attention(maps: &[AttentionMap]) -> Result<AttentionMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::param("cannot average an empty list of attention maps"))?;
    let dims = first.dims();
    if maps.iter().any(|m| m.dims() != dims) {
        return Err(Error::param("attention maps have mixed resolutions"));
    }
    let mut acc = vec![0.0; dims.0 * dims.1];
    for m in maps {
        for (a, v) in acc.iter_mut().zip(m.0.as_slice()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    AttentionMap::new(Grid::from_vec(
        dims.0,
        dims.1,
        acc.into_iter().map(|a| a / n).collect(),
    )?)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_attention(a: &AttentionMap, height: usize, width: usize) -> Result<AttentionMap> {
    if height == 0 || width == 0 {
        return Err(Error::param("target size must be positive"));
    }
    let (h, w) = a.dims();
    if (h, w) == (height, width) {
        return Ok(a.clone());
    }
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let grid = Grid::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = coord(y, h, height);
        let (x0, x1, fx) = coord(x, w, width);
        let top = a.get(y0, x0) * (1.0 - fx) + a.get(y0, x1) * fx;
        let bot = a.get(y1, x0) * (1.0 - fx) + a.get(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    });
    AttentionMap::new(grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelIndex {
    pub row: usize,
    pub col: usize,
}

impl PixelIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Sites to be replaced (`edit`) and the high-attention sources (`sources`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelSets {
    /// Mask support in row-major order.
    pub edit: Vec<PixelIndex>,
    /// Top `ceil(N / 2)` sites by attention, descending, ties row-major.
    pub sources: Vec<PixelIndex>,
    /// Attention of the last selected source; `None` when the mask is empty.
    pub v_min: Option<f64>,
}

impl PixelSets {
    pub fn n(&self) -> usize {
        self.edit.len()
    }
}

pub fn build_pixel_sets(a: &AttentionMap, m: &EditMask) -> Result<PixelSets> {
    if a.dims() != m.dims() {
        return Err(Error::param(format!(
            "attention {:?} and mask {:?} differ in resolution",
            a.dims(),
            m.dims()
        )));
    }
    let (h, w) = a.dims();
    let edit: Vec<PixelIndex> = (0..h)
        .flat_map(|y| (0..w).map(move |x| PixelIndex::new(y, x)))
        .filter(|p| m.get(p.row, p.col) > 0.0)
        .collect();
    let k = edit.len().div_ceil(2);
    let mut ranked: Vec<PixelIndex> = (0..h)
        .flat_map(|y| (0..w).map(move |x| PixelIndex::new(y, x)))
        .collect();
    // Stable sort keeps row-major order among equal attention values.
    ranked.sort_by(|p, q| a.get(q.row, q.col).total_cmp(&a.get(p.row, p.col)));
    ranked.truncate(k);
    let v_min = ranked.last().map(|p| a.get(p.row, p.col));
    Ok(PixelSets {
        edit,
        sources: ranked,
        v_min,
    })
}

/// Result of [`attention_process_traced`]: the refined map plus, for each
/// edited site in row-major order, the source site it was copied from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedNoise {
    pub refined: LatentImage,
    pub sets: PixelSets,
    pub assignments: Vec<(PixelIndex, PixelIndex)>,
}

/// Builds the refined noise map: every masked site of `x_s` receives the full
/// channel vector of `x_s_no` at a high-attention site, first in order, then
/// uniformly at random (seeded) once the sources are exhausted.
pub fn attention_process(
    x_s: &LatentImage,
    x_s_no: &LatentImage,
    a: &AttentionMap,
    m: &EditMask,
    seed: u64,
) -> Result<LatentImage> {
    attention_process_traced(x_s, x_s_no, a, m, seed).map(|p| p.refined)
}

pub fn attention_process_traced(
    x_s: &LatentImage,
    x_s_no: &LatentImage,
    a: &AttentionMap,
    m: &EditMask,
    seed: u64,
) -> Result<ProcessedNoise> {
    x_s.check_same_shape(x_s_no, "attention_process")?;
    let dims = (x_s.height(), x_s.width());
    if a.dims() != dims || m.dims() != dims {
        return Err(Error::param(format!(
            "noise maps are {dims:?} but attention is {:?} and mask is {:?}",
            a.dims(),
            m.dims()
        )));
    }
    let sets = build_pixel_sets(a, m)?;
    let mut refined = x_s.clone();
    let mut rng = rng::rng_from(seed);
    let mut assignments = Vec::with_capacity(sets.edit.len());
    for (i, dst) in sets.edit.iter().enumerate() {
        let src = match sets.sources.get(i) {
            Some(s) => *s,
            None => sets.sources[rng.gen_range(0..sets.sources.len())],
        };
        refined.set_pixel(dst.row, dst.col, &x_s_no.pixel(src.row, src.col));
        assignments.push((*dst, src));
    }
    Ok(ProcessedNoise {
        refined,
        sets,
        assignments,
    })
}

/// Area-average downsampling of `g` to `size×size` (identity when equal).
fn downsample(g: &Grid, size: usize) -> Grid {
    let (h, w) = g.dims();
    if (h, w) == (size, size) {
        return g.clone();
    }
    Grid::from_fn(size, size, |y, x| {
        let (y0, y1) = (
            y * h / size,
            ((y + 1) * h).div_ceil(size).max(y * h / size + 1),
        );
        let (x0, x1) = (
            x * w / size,
            ((x + 1) * w).div_ceil(size).max(x * w / size + 1),
        );
        let mut s = 0.0;
        for yy in y0..y1.min(h) {
            for xx in x0..x1.min(w) {
                s += g.get(yy, xx);
            }
        }
        s / ((y1.min(h) - y0) * (x1.min(w) - x0)) as f64
    })
}

/// Stand-in for U-Net cross-attention: high on the task's target region,
/// low elsewhere, corrupted by seeded noise.
///
/// Each emitted map is `max(0, 1[region] + λ (z_run + z_step / 2))`
/// divided by its maximum and area-downsampled to 16×16, where `z_run` is a
/// per-provider field and `z_step` is redrawn per timestep.
#[derive(Clone, Debug)]
pub struct SyntheticAttention {
    region: Grid,
    noise_level: f64,
    seed: u64,
    run_noise: Vec<f64>,
}

impl SyntheticAttention {
    pub fn new(region: Grid, noise_level: f64, seed: u64) -> Result<Self> {
        if !(noise_level >= 0.0 && noise_level.is_finite()) {
            return Err(Error::param("noise level must be finite and nonnegative"));
        }
        let run_noise = normals(&mut rng::rng_for(seed, "attention/run"), region.len());
        Ok(Self {
            region,
            noise_level,
            seed,
            run_noise,
        })
    }

    pub fn noise_level(&self) -> f64 {
        self.noise_level
    }

    pub fn region(&self) -> &Grid {
        &self.region
    }
}

impl AttentionProvider for SyntheticAttention {
    fn emit(
        &self,
        _x_t: &LatentImage,
        t: usize,
        _cond: Option<&PromptEmbedding>,
    ) -> Result<AttentionMap> {
        let (h, w) = self.region.dims();
        let mut values: Vec<f64> = self
            .region
            .as_slice()
            .iter()
            .map(|&r| if r > 0.0 { 1.0 } else { 0.0 })
            .collect();
        if self.noise_level > 0.0 {
            let step = normals(
                &mut rng::rng_from(rng::derive_indexed(self.seed, "attention/step", t as u64)),
                h * w,
            );
            for ((v, zr), zs) in values.iter_mut().zip(&self.run_noise).zip(&step) {
                *v = (*v + self.noise_level * (zr + 0.5 * zs)).max(0.0);
            }
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
        AttentionMap::new(downsample(&Grid::from_vec(h, w, values)?, ATTENTION_RES))
    }
}

/// Provider concentrated on `task`'s ground-truth editing region.
pub fn synthetic_attention(
    task: &EditTask,
    noise_level: f64,
    seed: u64,
) -> Result<SyntheticAttention> {
    SyntheticAttention::new(task.truth.region.grid().clone(), noise_level, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn amap(h: usize, w: usize, v: &[f64]) -> AttentionMap {
        AttentionMap::new(Grid::from_vec(h, w, v.to_vec()).unwrap()).unwrap()
    }

    fn mask(h: usize, w: usize, v: &[f64]) -> EditMask {
        EditMask::binary(Grid::from_vec(h, w, v.to_vec()).unwrap())
    }

    #[test]
    fn average_cases() {
        let a = amap(1, 2, &[1.0, 3.0]);
        let b = amap(1, 2, &[0.0, 1.0]);
        assert_eq!(average_attention(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(
            average_attention(&[a.clone(), b]).unwrap(),
            amap(1, 2, &[0.5, 2.0])
        );
        assert!(average_attention(&[]).is_err());
        assert!(average_attention(&[a, amap(2, 1, &[0.0, 0.0])]).is_err());
        assert!(AttentionMap::new(Grid::from_vec(1, 1, vec![-0.1]).unwrap()).is_err());
    }

    #[test]
    fn resize_cases() {
        let a = amap(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(resize_attention(&a, 2, 2).unwrap(), a);
        let r = resize_attention(&a, 2, 4).unwrap();
        // Half-pixel centres: source x = (x + 0.5) / 2 - 0.5, clamped.
        assert_eq!(
            r.grid().as_slice(),
            &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]
        );
        let c = amap(3, 3, &[0.4; 9]);
        let rc = resize_attention(&c, 7, 5).unwrap();
        assert!(rc.grid().as_slice().iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert!(resize_attention(&a, 0, 3).is_err());
    }

    #[test]
    fn pixel_sets_worked_example() {
        let a = amap(2, 2, &[0.9, 0.1, 0.2, 0.7]);
        let m = mask(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let s = build_pixel_sets(&a, &m).unwrap();
        assert_eq!(s.edit, vec![PixelIndex::new(0, 0), PixelIndex::new(0, 1)]);
        assert_eq!(s.sources, vec![PixelIndex::new(0, 0)]);
        assert_eq!(s.v_min, Some(0.9));

        let empty = build_pixel_sets(&a, &mask(2, 2, &[0.0; 4])).unwrap();
        assert!(empty.edit.is_empty() && empty.sources.is_empty() && empty.v_min.is_none());
    }

    #[test]
    fn ties_break_row_major() {
        let a = amap(3, 3, &[0.5; 9]);
        let m = mask(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let s = build_pixel_sets(&a, &m).unwrap();
        // Oracle: stable sort of (−A, row, col) over the full map.
        let mut all: Vec<(i64, usize, usize)> = (0..3)
            .flat_map(|r| (0..3).map(move |c| (-500, r, c)))
            .collect();
        all.sort();
        let want: Vec<PixelIndex> = all
            .iter()
            .take(2)
            .map(|&(_, r, c)| PixelIndex::new(r, c))
            .collect();
        assert_eq!(s.sources, want);
        assert_eq!(
            s.sources,
            vec![PixelIndex::new(0, 0), PixelIndex::new(0, 1)]
        );
    }

    #[test]
    fn odd_mask_uses_ceiling() {
        let a = amap(1, 3, &[0.1, 0.2, 0.3]);
        let s = build_pixel_sets(&a, &mask(1, 3, &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.sources, vec![PixelIndex::new(0, 2)]);
        let s = build_pixel_sets(&a, &mask(1, 3, &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(s.sources.len(), 2);
    }

    fn two_channel(vals: [f64; 4]) -> LatentImage {
        let mut data = vals.to_vec();
        data.extend(vals.iter().map(|v| v * 10.0));
        LatentImage::from_vec(2, 2, 2, data).unwrap()
    }

    #[test]
    fn process_worked_example() {
        let xs = two_channel([-1.0, -2.0, -3.0, -4.0]);
        let xno = two_channel([1.0, 2.0, 3.0, 4.0]);
        let a = amap(2, 2, &[0.9, 0.1, 0.2, 0.7]);
        let m = mask(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let out = attention_process(&xs, &xno, &a, &m, 3).unwrap();
        assert_eq!(out.pixel(0, 0), vec![1.0, 10.0]);
        assert_eq!(out.pixel(0, 1), vec![1.0, 10.0]);
        assert_eq!(out.pixel(1, 0), xs.pixel(1, 0));
        assert_eq!(out.pixel(1, 1), xs.pixel(1, 1));

        let none = attention_process(&xs, &xno, &a, &mask(2, 2, &[0.0; 4]), 3).unwrap();
        assert_eq!(none, xs);
    }

    #[test]
    fn full_mask_draws_only_from_top_two() {
        let xs = two_channel([0.0; 4]);
        let xno = two_channel([1.0, 2.0, 3.0, 4.0]);
        let a = amap(2, 2, &[0.3, 0.8, 0.1, 0.6]);
        for seed in 0..20 {
            let p = attention_process_traced(&xs, &xno, &a, &mask(2, 2, &[1.0; 4]), seed).unwrap();
            let vals: Vec<f64> = (0..2)
                .flat_map(|y| (0..2).map(move |x| (y, x)))
                .map(|(y, x)| p.refined.get(0, y, x))
                .collect();
            assert!(vals.iter().all(|v| *v == 2.0 || *v == 4.0));
            assert!(vals.contains(&2.0) && vals.contains(&4.0));
            assert_eq!(vals[0], 2.0);
            assert_eq!(vals[1], 4.0);
        }
    }

    #[test]
    fn process_rejects_mismatched_resolution() {
        let xs = LatentImage::zeros(1, 2, 2);
        let a = amap(3, 3, &[0.0; 9]);
        assert!(attention_process(&xs, &xs, &a, &mask(2, 2, &[1.0; 4]), 0).is_err());
        assert!(attention_process(
            &xs,
            &LatentImage::zeros(2, 2, 2),
            &amap(2, 2, &[0.0; 4]),
            &mask(2, 2, &[1.0; 4]),
            0
        )
        .is_err());
    }

    #[test]
    fn synthetic_provider_cases() {
        let region = Grid::from_fn(16, 16, |y, x| {
            if (4..10).contains(&y) && (5..11).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        let x = LatentImage::zeros(3, 16, 16);
        let clean = SyntheticAttention::new(region.clone(), 0.0, 1).unwrap();
        assert_eq!(clean.emit(&x, 500, None).unwrap().grid(), &region);

        let noisy = SyntheticAttention::new(region.clone(), 0.2, 9).unwrap();
        let again = SyntheticAttention::new(region.clone(), 0.2, 9).unwrap();
        for t in [20, 40, 60] {
            assert_eq!(
                noisy.emit(&x, t, None).unwrap(),
                again.emit(&x, t, None).unwrap()
            );
        }
        assert_ne!(
            noisy.emit(&x, 20, None).unwrap(),
            noisy.emit(&x, 40, None).unwrap()
        );

        let big = Grid::from_fn(64, 64, |y, x| region.get(y / 4, x / 4));
        let down = SyntheticAttention::new(big, 0.0, 0)
            .unwrap()
            .emit(&x, 0, None)
            .unwrap();
        assert_eq!(down.grid(), &region);
    }
}
