//! Analytic quality proxies, benchmark and ablation runners, and success vs
//! failure attention statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionMap;
use crate::datagen::{
    render_jittered, Attribute, Color, EditTask, GarmentKind, GarmentSpec, Pattern, TaskType,
    MAX_JITTER,
};
use crate::denoiser::{GaussianMixtureModel, GmmPredictor};
use crate::diffusion::{roundtrip_error, NoiseSchedule};
use crate::editor::{edit_task, EditConfig, EditResult, MaskSource};
use crate::error::{Error, Result};
use crate::masknet::{EditMask, MaskNetModel};
use crate::prompt::PromptEncoder;
use crate::rng;
use crate::tensor::{Grid, LatentImage};

pub const COLOR_TOLERANCE: f64 = 0.25;
pub const SUCCESS_THRESHOLD: f64 = 0.5;
const PATCH: usize = 4;

fn rgb_at(img: &LatentImage, y: usize, x: usize) -> [f64; 3] {
    [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

fn near(a: [f64; 3], b: [f64; 3]) -> bool {
    dist(a, b) <= COLOR_TOLERANCE
}

/// Fraction of region sites that the target render paints in its base colour
/// and that `img` paints within tolerance of that colour.
pub fn color_score(img: &LatentImage, task: &EditTask) -> f64 {
    let target = task.target_render();
    let base = task.truth.spec.color.rgb();
    let (mut hit, mut total) = (0usize, 0usize);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if task.truth.region.get(y, x) < 0.5 || rgb_at(&target.image, y, x) != base {
                continue;
            }
            total += 1;
            hit += near(rgb_at(img, y, x), base) as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Whether a pixel is within tolerance of a palette or accent colour.
pub fn is_garment_pixel(p: [f64; 3]) -> bool {
    near(p, crate::datagen::accent_rgb()) || Color::ALL.iter().any(|c| near(p, c.rgb()))
}

/// IoU between the garment pixels of `img` (see [`is_garment_pixel`]) and the target cloth mask, taken over the
/// sites whose coverage differs between source and target, or over the
/// whole region when the silhouette does not change.
pub fn shape_score(img: &LatentImage, task: &EditTask) -> f64 {
    let target = task.target_render();
    let src = &task.input.cloth_mask;
    let tgt = &target.cloth_mask;
    let (h, w) = (img.height(), img.width());
    let changed: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| task.truth.region.get(y, x) >= 0.5 && src.get(y, x) != tgt.get(y, x))
        .collect();
    let zone: Vec<(usize, usize)> = if changed.is_empty() {
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| task.truth.region.get(y, x) >= 0.5)
            .collect()
    } else {
        changed
    };
    let (mut inter, mut uni) = (0usize, 0usize);
    for (y, x) in zone {
        let g = is_garment_pixel(rgb_at(img, y, x));
        let t = tgt.get(y, x) >= 0.5;
        inter += (g && t) as usize;
        uni += (g || t) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Colour-independent texture descriptor over the sites of `mask`: the
/// fraction of accent-coloured pixels and, for horizontal, vertical and
/// both diagonal neighbour pairs inside `mask`, the rate at which exactly one
/// of the pair is accent-coloured.
pub fn texture_features(img: &LatentImage, mask: &EditMask) -> [f64; 5] {
    let accent = crate::datagen::accent_rgb();
    let is_accent = |y: usize, x: usize| near(rgb_at(img, y, x), accent);
    let offsets: [(i64, i64); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    let (h, w) = (img.height() as i64, img.width() as i64);
    let mut out = [0.0; 5];
    let (mut acc, mut total) = (0usize, 0usize);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(y, x) >= 0.5 {
                total += 1;
                acc += is_accent(y, x) as usize;
            }
        }
    }
    out[0] = if total == 0 {
        0.0
    } else {
        acc as f64 / total as f64
    };
    for (k, (dy, dx)) in offsets.iter().enumerate() {
        let (mut flips, mut n) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (y2, x2) = (y + dy, x + dx);
                if y2 < 0 || y2 >= h || x2 < 0 || x2 >= w {
                    continue;
                }
                let (a, b) = ((y as usize, x as usize), (y2 as usize, x2 as usize));
                if mask.get(a.0, a.1) < 0.5 || mask.get(b.0, b.1) < 0.5 {
                    continue;
                }
                flips += (is_accent(a.0, a.1) != is_accent(b.0, b.1)) as usize;
                n += 1;
            }
        }
        out[k + 1] = if n == 0 { 0.0 } else { flips as f64 / n as f64 };
    }
    out
}

/// `1 - d_t / (d_t + d_alt)` where `d_t` is the texture-feature distance to
/// the target-pattern render and `d_alt` the smallest distance to a render
/// with another pattern.
pub fn pattern_score(img: &LatentImage, task: &EditTask) -> f64 {
    let target = task.target_render();
    let mask = EditMask::binary(Grid::from_fn(img.height(), img.width(), |y, x| {
        (target.cloth_mask.get(y, x) >= 0.5 && task.truth.region.get(y, x) >= 0.5) as u8 as f64
    }));
    let f = texture_features(img, &mask);
    let d = |spec: &GarmentSpec| {
        let r = render_jittered(spec, task.input.jitter).expect("valid spec");
        let g = texture_features(&r.image, &mask);
        f.iter()
            .zip(&g)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let d_t = d(&task.truth.spec);
    let d_alt = Pattern::ALL
        .iter()
        .filter(|p| **p != task.truth.spec.pattern)
        .map(|p| {
            d(&GarmentSpec {
                pattern: *p,
                ..task.truth.spec
            })
        })
        .fold(f64::INFINITY, f64::min);
    if d_t == 0.0 {
        1.0
    } else {
        1.0 - d_t / (d_t + d_alt)
    }
}

/// Task-type-specific alignment proxy in `[0, 1]`.
pub fn alignment_score(img: &LatentImage, task: &EditTask) -> f64 {
    let changed = &task.truth.changed;
    let has = |a: Attribute| changed.contains(&a);
    let score = match task.task_type {
        TaskType::Color => color_score(img, task),
        TaskType::Detail => shape_score(img, task),
        TaskType::Material => pattern_score(img, task),
        TaskType::Comprehensive => {
            let mut parts = Vec::new();
            if has(Attribute::Color) {
                parts.push(color_score(img, task));
            }
            if has(Attribute::Sleeve) || has(Attribute::Collar) || has(Attribute::Kind) {
                parts.push(shape_score(img, task));
            }
            if has(Attribute::Pattern) {
                parts.push(pattern_score(img, task));
            }
            parts.iter().sum::<f64>() / parts.len().max(1) as f64
        }
    };
    score.clamp(0.0, 1.0)
}

/// `1 - mean|x_out - x_org| / 2` over sites outside `region`.
pub fn preservation_score(x_out: &LatentImage, x_org: &LatentImage, region: &EditMask) -> f64 {
    let (c, h, w) = x_out.shape();
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x) >= 0.5 {
                continue;
            }
            for ch in 0..c {
                sum += (x_out.get(ch, y, x) - x_org.get(ch, y, x)).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        1.0
    } else {
        (1.0 - sum / n as f64 / 2.0).clamp(0.0, 1.0)
    }
}

/// Mean, variance and mean gradient magnitude of one channel over a patch.
fn patch_stats(img: &LatentImage, c: usize, y0: usize, x0: usize) -> [f64; 3] {
    let (h, w) = (img.height(), img.width());
    let ys = y0..(y0 + PATCH).min(h);
    let xs = x0..(x0 + PATCH).min(w);
    let n = (ys.len() * xs.len()) as f64;
    let mut mean = 0.0;
    for y in ys.clone() {
        for x in xs.clone() {
            mean += img.get(c, y, x);
        }
    }
    mean /= n;
    let (mut var, mut grad) = (0.0, 0.0);
    for y in ys.clone() {
        for x in xs.clone() {
            var += (img.get(c, y, x) - mean).powi(2);
            let gx = if x + 1 < w {
                img.get(c, y, x + 1) - img.get(c, y, x)
            } else {
                0.0
            };
            let gy = if y + 1 < h {
                img.get(c, y + 1, x) - img.get(c, y, x)
            } else {
                0.0
            };
            grad += (gx * gx + gy * gy).sqrt();
        }
    }
    [mean, var / n, grad / n]
}

/// Mean over 4×4 patches and channels of the Euclidean distance between the
/// (mean, variance, gradient magnitude) statistics of `a` and `b`.
pub fn perceptual_distance(a: &LatentImage, b: &LatentImage) -> Result<f64> {
    a.check_same_shape(b, "perceptual_distance")?;
    let (c, h, w) = a.shape();
    let (mut sum, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for y0 in (0..h).step_by(PATCH) {
            for x0 in (0..w).step_by(PATCH) {
                let (sa, sb) = (patch_stats(a, ch, y0, x0), patch_stats(b, ch, y0, x0));
                sum += sa
                    .iter()
                    .zip(&sb)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub id: String,
    pub task_type: TaskType,
    pub alignment: f64,
    pub preservation: f64,
    pub perceptual: f64,
    pub success: bool,
    /// Mean attention inside the ground-truth region.
    pub region_attention: f64,
    pub runtime_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub alignment: f64,
    pub preservation: f64,
    pub perceptual: f64,
    pub success_rate: f64,
    pub runtime_ms: f64,
}

impl Aggregate {
    fn of<'a>(items: impl Iterator<Item = &'a TaskMetrics>) -> Self {
        let items: Vec<&TaskMetrics> = items.collect();
        let n = items.len();
        if n == 0 {
            return Self::default();
        }
        let mean =
            |f: &dyn Fn(&TaskMetrics) -> f64| items.iter().map(|t| f(t)).sum::<f64>() / n as f64;
        Self {
            count: n,
            alignment: mean(&|t| t.alignment),
            preservation: mean(&|t| t.preservation),
            perceptual: mean(&|t| t.perceptual),
            success_rate: mean(&|t| t.success as u8 as f64),
            runtime_ms: mean(&|t| t.runtime_ms),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub config_digest: String,
    pub config: EditConfig,
    pub tasks: Vec<TaskMetrics>,
    pub per_type: BTreeMap<TaskType, Aggregate>,
    pub aggregate: Aggregate,
    pub failures: Vec<TaskFailure>,
}

impl MetricReport {
    pub fn new(
        variant: &str,
        config: &EditConfig,
        mut tasks: Vec<TaskMetrics>,
        failures: Vec<TaskFailure>,
    ) -> Self {
        tasks.sort_by(|a, b| a.id.cmp(&b.id));
        let per_type = TaskType::ALL
            .into_iter()
            .filter(|t| tasks.iter().any(|m| m.task_type == *t))
            .map(|t| (t, Aggregate::of(tasks.iter().filter(|m| m.task_type == t))))
            .collect();
        Self {
            variant: variant.to_string(),
            config_digest: config_digest(config),
            config: config.clone(),
            aggregate: Aggregate::of(tasks.iter()),
            per_type,
            tasks,
            failures,
        }
    }

    /// Copy with every runtime zeroed, for byte-level comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.tasks.iter_mut().for_each(|t| t.runtime_ms = 0.0);
        r.aggregate.runtime_ms = 0.0;
        r.per_type.values_mut().for_each(|a| a.runtime_ms = 0.0);
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n", self.variant);
        s.push_str(
            "| tasks | count | alignment | preservation | perceptual | success | ms/edit |\n",
        );
        s.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
        let mut row = |name: &str, a: &Aggregate| {
            let _ = writeln!(
                s,
                "| {name} | {} | {:.4} | {:.4} | {:.4} | {:.3} | {:.1} |",
                a.count, a.alignment, a.preservation, a.perceptual, a.success_rate, a.runtime_ms
            );
        };
        for (t, a) in &self.per_type {
            row(t.name(), a);
        }
        row("all", &self.aggregate);
        if !self.failures.is_empty() {
            let _ = writeln!(s, "\n{} task(s) failed.", self.failures.len());
        }
        s
    }
}

pub fn config_digest(cfg: &EditConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serialises");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn task_metrics(task: &EditTask, result: &EditResult, runtime_ms: f64) -> Result<TaskMetrics> {
    let alignment = alignment_score(&result.x_out, task);
    let region_attention = crate::attention::resize_attention(&result.attention, 16, 16)?
        .mean_over(task.truth.region.grid())
        .unwrap_or(0.0);
    Ok(TaskMetrics {
        id: task.id.clone(),
        task_type: task.task_type,
        alignment,
        preservation: preservation_score(&result.x_out, &result.x_org, &task.truth.region),
        perceptual: perceptual_distance(&result.x_out, &result.x_org)?,
        success: alignment >= SUCCESS_THRESHOLD,
        region_attention,
        runtime_ms,
    })
}

/// Edits every task (in parallel), scores it and collects the results.
/// Per-task failures are recorded and do not stop the run.
pub fn run_benchmark_with_results(
    tasks: &[EditTask],
    cfg: &EditConfig,
    encoder: &PromptEncoder,
    masknet: Option<&MaskNetModel>,
    variant: &str,
) -> Result<(MetricReport, Vec<Option<EditResult>>)> {
    if tasks.is_empty() {
        return Err(Error::param("benchmark needs at least one task"));
    }
    let outcomes: Vec<Result<(TaskMetrics, EditResult)>> = tasks
        .par_iter()
        .map(|task| {
            let t0 = Instant::now();
            let result = edit_task(task, cfg, encoder, masknet)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            Ok((task_metrics(task, &result, ms)?, result))
        })
        .collect();
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    let mut results = Vec::with_capacity(tasks.len());
    for (task, o) in tasks.iter().zip(outcomes) {
        match o {
            Ok((m, r)) => {
                metrics.push(m);
                results.push(Some(r));
            }
            Err(e) => {
                log::warn!("task {} failed: {e}", task.id);
                failures.push(TaskFailure {
                    id: task.id.clone(),
                    error: e.to_string(),
                });
                results.push(None);
            }
        }
    }
    Ok((MetricReport::new(variant, cfg, metrics, failures), results))
}

pub fn run_benchmark(
    tasks: &[EditTask],
    cfg: &EditConfig,
    encoder: &PromptEncoder,
    masknet: Option<&MaskNetModel>,
) -> Result<MetricReport> {
    run_benchmark_with_results(tasks, cfg, encoder, masknet, "benchmark").map(|(r, _)| r)
}

/// The four ablation variants: `(name, mask source, attention processor)`.
pub fn ablation_variants(with_masknet: MaskSource) -> [(&'static str, MaskSource, bool); 4] {
    [
        ("full", with_masknet, true),
        ("no_attention_processor", with_masknet, false),
        ("no_masknet", MaskSource::AttentionThreshold, true),
        ("baseline", MaskSource::AttentionThreshold, false),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<MetricReport>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&MetricReport> {
        self.variants.iter().find(|v| v.variant == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| variant | mask | attention processor | alignment | preservation | perceptual |\n",
        );
        s.push_str("|---|---|---|---:|---:|---:|\n");
        for v in &self.variants {
            let _ = writeln!(
                s,
                "| {} | {:?} | {} | {:.4} | {:.4} | {:.4} |",
                v.variant,
                v.config.mask_source,
                if v.config.attention_processor {
                    "on"
                } else {
                    "off"
                },
                v.aggregate.alignment,
                v.aggregate.preservation,
                v.aggregate.perceptual
            );
        }
        s
    }
}

/// Evaluates {MaskNet on/off} × {attention processor on/off} on the same
/// tasks and seeds. "Off" for MaskNet means the median-thresholded attention
/// mask.
pub fn run_ablation(
    tasks: &[EditTask],
    cfg: &EditConfig,
    encoder: &PromptEncoder,
    masknet: Option<&MaskNetModel>,
) -> Result<AblationReport> {
    let mut variants = Vec::new();
    for (name, source, ap) in ablation_variants(cfg.mask_source) {
        let vcfg = EditConfig {
            mask_source: source,
            attention_processor: ap,
            ..cfg.clone()
        };
        let (report, _) = run_benchmark_with_results(tasks, &vcfg, encoder, masknet, name)?;
        variants.push(report);
    }
    Ok(AblationReport { variants })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub success: AttentionMap,
    pub failure: AttentionMap,
    pub success_count: usize,
    pub failure_count: usize,
    /// Set when the partition had no members and its map is all zeros.
    pub success_empty: bool,
    pub failure_empty: bool,
}

/// Mean attention of the successful and the failed runs.
pub fn attention_stats(maps: &[AttentionMap], success: &[bool]) -> Result<AttentionStats> {
    if maps.is_empty() {
        return Err(Error::param("attention statistics need at least one run"));
    }
    if maps.len() != success.len() {
        return Err(Error::param(
            "one success flag per attention map is required",
        ));
    }
    let dims = maps[0].dims();
    if maps.iter().any(|m| m.dims() != dims) {
        return Err(Error::param("attention maps have mixed resolutions"));
    }
    let mean = |want: bool| -> Result<(AttentionMap, usize)> {
        let chosen: Vec<&AttentionMap> = maps
            .iter()
            .zip(success)
            .filter(|(_, s)| **s == want)
            .map(|(m, _)| m)
            .collect();
        if chosen.is_empty() {
            return Ok((AttentionMap::zeros(dims.0, dims.1), 0));
        }
        let mut acc = vec![0.0; dims.0 * dims.1];
        for m in &chosen {
            for (a, v) in acc.iter_mut().zip(m.grid().as_slice()) {
                *a += v;
            }
        }
        let n = chosen.len() as f64;
        Ok((
            AttentionMap::new(Grid::from_vec(
                dims.0,
                dims.1,
                acc.into_iter().map(|a| a / n).collect(),
            )?)?,
            chosen.len(),
        ))
    };
    let (s, ns) = mean(true)?;
    let (f, nf) = mean(false)?;
    Ok(AttentionStats {
        success: s,
        failure: f,
        success_count: ns,
        failure_count: nf,
        success_empty: ns == 0,
        failure_empty: nf == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub id: String,
    pub noise_level: f64,
    pub alignment: f64,
    pub region_attention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<SweepRun>,
    pub stats: AttentionStats,
    /// Mean in-region attention of the success and failure partitions.
    pub success_region_mean: Option<f64>,
    pub failure_region_mean: Option<f64>,
}

/// Edits every task once per noise level, partitions the runs by
/// alignment success and averages their attention maps.
pub fn attention_sweep(
    tasks: &[EditTask],
    cfg: &EditConfig,
    encoder: &PromptEncoder,
    masknet: Option<&MaskNetModel>,
    noise_levels: &[f64],
) -> Result<SweepSummary> {
    let jobs: Vec<(&EditTask, f64)> = noise_levels
        .iter()
        .flat_map(|&n| tasks.iter().map(move |t| (t, n)))
        .collect();
    let out: Vec<(SweepRun, AttentionMap, EditMask)> = jobs
        .par_iter()
        .map(|&(task, noise)| {
            let vcfg = EditConfig {
                noise_level: noise,
                ..cfg.clone()
            };
            let r = edit_task(task, &vcfg, encoder, masknet)?;
            let m = task_metrics(task, &r, 0.0)?;
            Ok((
                SweepRun {
                    id: task.id.clone(),
                    noise_level: noise,
                    alignment: m.alignment,
                    region_attention: m.region_attention,
                },
                r.attention,
                task.truth.region.clone(),
            ))
        })
        .collect::<Result<_>>()?;
    let success: Vec<bool> = out
        .iter()
        .map(|(r, _, _)| r.alignment >= SUCCESS_THRESHOLD)
        .collect();
    let maps: Vec<AttentionMap> = out.iter().map(|(_, a, _)| a.clone()).collect();
    let stats = attention_stats(&maps, &success)?;
    let mean_of = |want: bool| {
        let v: Vec<f64> = out
            .iter()
            .zip(&success)
            .filter(|(_, s)| **s == want)
            .map(|((r, _, _), _)| r.region_attention)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(SweepSummary {
        success_region_mean: mean_of(true),
        failure_region_mean: mean_of(false),
        runs: out.into_iter().map(|(r, _, _)| r).collect(),
        stats,
    })
}

/// Images and mixture shared by round-trip studies: `n` seeded renders, each
/// a component of a uniform mixture.
pub fn roundtrip_fixture(
    n: usize,
    seed: u64,
    sigma0: f64,
) -> Result<(GaussianMixtureModel, Vec<LatentImage>)> {
    use rand::Rng as _;
    if n == 0 {
        return Err(Error::param("round trip needs at least one image"));
    }
    let mut rng = rng::rng_for(seed, "eval/roundtrip");
    let images = (0..n)
        .map(|_| {
            let kind = GarmentKind::ALL[rng.gen_range(0..GarmentKind::ALL.len())];
            let spec = GarmentSpec::random(&mut rng, kind);
            render_jittered(&spec, rng.gen_range(-MAX_JITTER..=MAX_JITTER)).map(|s| s.image)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        GaussianMixtureModel::uniform(images.clone(), sigma0)?,
        images,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub total_steps: usize,
    pub effective_steps: usize,
    pub errors: Vec<f64>,
    pub mean_error: f64,
    pub max_error: f64,
}

/// Inverts every fixture image through all `total_steps` with
/// `effective_steps` DDIM steps and samples it back.
pub fn roundtrip_study(
    gmm: &GaussianMixtureModel,
    images: &[LatentImage],
    total_steps: usize,
    effective_steps: usize,
    beta: (f64, f64),
) -> Result<RoundTripReport> {
    if effective_steps == 0 || !total_steps.is_multiple_of(effective_steps) {
        return Err(Error::param(format!(
            "{effective_steps} effective steps must divide T = {total_steps}"
        )));
    }
    let schedule = NoiseSchedule::linear(total_steps, beta.0, beta.1)?
        .with_inversion(total_steps, total_steps / effective_steps)?;
    let predictor = GmmPredictor::new(gmm.clone(), schedule.clone());
    let errors = images
        .par_iter()
        .map(|x| roundtrip_error(x, &predictor, &schedule))
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundTripReport {
        total_steps,
        effective_steps,
        mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
        max_error: errors.iter().copied().fold(0.0, f64::max),
        errors,
    })
}
