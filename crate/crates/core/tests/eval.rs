use madiff_core::attention::AttentionMap;
use madiff_core::datagen::{gen_eval_set, TaskType};
use madiff_core::editor::{EditConfig, MaskSource};
use madiff_core::eval::{
    attention_stats, perceptual_distance, preservation_score, run_ablation, run_benchmark,
    run_benchmark_with_results, MetricReport,
};
use madiff_core::masknet::EditMask;
use madiff_core::prompt::PromptEncoder;
use madiff_core::rng::{normals, rng_for};
use madiff_core::tensor::{Grid, LatentImage};
use proptest::prelude::*;

fn random_image(seed: u64, label: &str, h: usize, w: usize) -> LatentImage {
    LatentImage::from_vec(3, h, w, normals(&mut rng_for(seed, label), 3 * h * w)).unwrap()
}

/// Patchwise (mean, variance, forward-difference gradient magnitude) over 4×4
/// blocks, clipped at the border.
fn perceptual_oracle(a: &LatentImage, b: &LatentImage) -> f64 {
    let (c, h, w) = a.shape();
    let stats = |img: &LatentImage, ch: usize, y0: usize, x0: usize| {
        let cells: Vec<(usize, usize)> = (y0..h.min(y0 + 4))
            .flat_map(|y| (x0..w.min(x0 + 4)).map(move |x| (y, x)))
            .collect();
        let n = cells.len() as f64;
        let mean = cells.iter().map(|&(y, x)| img.get(ch, y, x)).sum::<f64>() / n;
        let var = cells
            .iter()
            .map(|&(y, x)| (img.get(ch, y, x) - mean).powi(2))
            .sum::<f64>()
            / n;
        let grad = cells
            .iter()
            .map(|&(y, x)| {
                let v = img.get(ch, y, x);
                let gx = if x + 1 < w {
                    img.get(ch, y, x + 1) - v
                } else {
                    0.0
                };
                let gy = if y + 1 < h {
                    img.get(ch, y + 1, x) - v
                } else {
                    0.0
                };
                gx.hypot(gy)
            })
            .sum::<f64>()
            / n;
        [mean, var, grad]
    };
    let mut ds = Vec::new();
    for ch in 0..c {
        for y0 in (0..h).step_by(4) {
            for x0 in (0..w).step_by(4) {
                let (p, q) = (stats(a, ch, y0, x0), stats(b, ch, y0, x0));
                ds.push(
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt(),
                );
            }
        }
    }
    ds.iter().sum::<f64>() / ds.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perceptual_matches_oracle(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let (a, b) = (random_image(seed, "a", h, w), random_image(seed, "b", h, w));
        let d = perceptual_distance(&a, &b).unwrap();
        prop_assert!((d - perceptual_oracle(&a, &b)).abs() <= 1e-12);
        prop_assert_eq!(d, perceptual_distance(&b, &a).unwrap());
        prop_assert_eq!(perceptual_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn preservation_matches_oracle(seed in any::<u64>(), keep in prop::collection::vec(any::<bool>(), 64)) {
        let (a, b) = (random_image(seed, "a", 8, 8).map(f64::tanh), random_image(seed, "b", 8, 8).map(f64::tanh));
        let region = EditMask::binary(Grid::from_vec(8, 8, keep.iter().map(|k| *k as u8 as f64).collect()).unwrap());
        let mut diffs = Vec::new();
        for ch in 0..3 {
            for (i, kept) in keep.iter().enumerate() {
                if !kept {
                    diffs.push((a.get(ch, i / 8, i % 8) - b.get(ch, i / 8, i % 8)).abs());
                }
            }
        }
        let oracle = if diffs.is_empty() { 1.0 } else { 1.0 - diffs.iter().sum::<f64>() / diffs.len() as f64 / 2.0 };
        prop_assert!((preservation_score(&a, &b, &region) - oracle).abs() <= 1e-12);
    }

    #[test]
    fn attention_stats_match_brute_force(
        maps in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 6), any::<bool>()), 1..40),
    ) {
        let ams: Vec<AttentionMap> = maps.iter().map(|(v, _)| AttentionMap::new(Grid::from_vec(2, 3, v.clone()).unwrap()).unwrap()).collect();
        let flags: Vec<bool> = maps.iter().map(|(_, s)| *s).collect();
        let s = attention_stats(&ams, &flags).unwrap();
        for (want, got, count) in [(true, &s.success, s.success_count), (false, &s.failure, s.failure_count)] {
            let members: Vec<&Vec<f64>> = maps.iter().filter(|(_, f)| *f == want).map(|(v, _)| v).collect();
            prop_assert_eq!(count, members.len());
            for i in 0..6 {
                let mut total = 0.0;
                for m in &members {
                    total += m[i];
                }
                let mean = if members.is_empty() { 0.0 } else { total / members.len() as f64 };
                prop_assert!((got.grid().as_slice()[i] - mean).abs() <= 1e-12);
            }
        }
        prop_assert_eq!(s.success_empty, s.success_count == 0);
        prop_assert_eq!(s.failure_empty, s.failure_count == 0);
    }
}

fn quick_cfg() -> EditConfig {
    EditConfig {
        inversion_depth: 100,
        stride: 20,
        mask_source: MaskSource::Foreground,
        ..Default::default()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn aggregates_are_means_of_task_metrics() {
    let tasks = gen_eval_set(2, 13).unwrap();
    let report = run_benchmark(&tasks, &quick_cfg(), &PromptEncoder::default(), None).unwrap();
    assert_eq!(report.tasks.len(), tasks.len());
    assert!(report.failures.is_empty());
    let check = |agg: &madiff_core::eval::Aggregate,
                 items: Vec<&madiff_core::eval::TaskMetrics>| {
        assert_eq!(agg.count, items.len());
        assert!((agg.alignment - mean(items.iter().map(|t| t.alignment))).abs() <= 1e-12);
        assert!((agg.preservation - mean(items.iter().map(|t| t.preservation))).abs() <= 1e-12);
        assert!((agg.perceptual - mean(items.iter().map(|t| t.perceptual))).abs() <= 1e-12);
        assert!(
            (agg.success_rate - mean(items.iter().map(|t| t.success as u8 as f64))).abs() <= 1e-12
        );
    };
    check(&report.aggregate, report.tasks.iter().collect());
    for t in TaskType::ALL {
        check(
            &report.per_type[&t],
            report.tasks.iter().filter(|m| m.task_type == t).collect(),
        );
    }
    for m in &report.tasks {
        assert_eq!(m.success, m.alignment >= 0.5);
        assert!((0.0..=1.0).contains(&m.alignment) && (0.0..=1.0).contains(&m.preservation));
    }
}

#[test]
fn single_task_aggregate_is_the_task() {
    let tasks = gen_eval_set(1, 5).unwrap();
    let report = run_benchmark(&tasks[..1], &quick_cfg(), &PromptEncoder::default(), None).unwrap();
    let (a, t) = (&report.aggregate, &report.tasks[0]);
    assert_eq!(
        (a.count, a.alignment, a.preservation, a.perceptual),
        (1, t.alignment, t.preservation, t.perceptual)
    );
    assert!(run_benchmark(&[], &quick_cfg(), &PromptEncoder::default(), None).is_err());
}

#[test]
fn reports_are_deterministic_apart_from_timings() {
    let tasks = gen_eval_set(1, 8).unwrap();
    let enc = PromptEncoder::default();
    let a = run_benchmark(&tasks, &quick_cfg(), &enc, None).unwrap();
    let b = run_benchmark(&tasks, &quick_cfg(), &enc, None).unwrap();
    assert_eq!(a.without_timings().to_json(), b.without_timings().to_json());
    let back: MetricReport = serde_json::from_str(&a.to_json()).unwrap();
    assert_eq!(back, a);
    assert!(a.to_markdown().contains("| all | 4 |"));
}

#[test]
fn ablation_variants_match_direct_runs() {
    let tasks = gen_eval_set(1, 2).unwrap();
    let enc = PromptEncoder::default();
    let cfg = quick_cfg();
    let ablation = run_ablation(&tasks, &cfg, &enc, None).unwrap();
    let names: Vec<&str> = ablation
        .variants
        .iter()
        .map(|v| v.variant.as_str())
        .collect();
    assert_eq!(
        names,
        ["full", "no_attention_processor", "no_masknet", "baseline"]
    );
    let baseline_cfg = EditConfig {
        mask_source: MaskSource::AttentionThreshold,
        attention_processor: false,
        ..cfg.clone()
    };
    let (direct, _) =
        run_benchmark_with_results(&tasks, &baseline_cfg, &enc, None, "baseline").unwrap();
    assert_eq!(
        ablation.variant("baseline").unwrap().without_timings(),
        direct.without_timings()
    );
    let (full, _) = run_benchmark_with_results(&tasks, &cfg, &enc, None, "full").unwrap();
    assert_eq!(
        ablation.variant("full").unwrap().without_timings(),
        full.without_timings()
    );
    assert!(ablation
        .to_markdown()
        .contains("| baseline | AttentionThreshold | off |"));
}
