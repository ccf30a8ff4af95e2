use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use madiff_core::attention::{attention_process_traced, AttentionMap};
use madiff_core::datagen::{
    editing_region, gen_eval_set, gen_training_set, parse_caption, render, Color, EditTask,
    GarmentKind, GarmentSpec, TaskType,
};
use madiff_core::editor::{edit_task, EditConfig, MaskSource};
use madiff_core::eval::{
    attention_stats, attention_sweep, roundtrip_fixture, roundtrip_study, run_ablation,
    task_metrics, SUCCESS_THRESHOLD,
};
use madiff_core::masknet::{
    gradient_check, mean_iou, train_masknet, EditMask, MaskExample, MaskNetConfig, MaskNetModel,
    TrainConfig,
};
use madiff_core::prompt::{PromptEncoder, LLM_ENDPOINT_ENV};
use madiff_core::rng::{derive_indexed, derive_seed, normals, rng_for, rng_from};
use madiff_core::tensor::{Grid, LatentImage};

const ROOT: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(cond: bool, what: impl Into<String>, failures: &mut Vec<String>) {
    if !cond {
        failures.push(what.into());
    }
}

fn report(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = f();
    let took = t0.elapsed();
    let in_time = took <= limit;
    let pass = out.pass && in_time;
    println!(
        "{} criterion {id} {name}: {} [{:.2}s, limit {}s{}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    pass
}

fn outcome(failures: Vec<String>, detail: String) -> Outcome {
    if failures.is_empty() {
        Outcome { pass: true, detail }
    } else {
        Outcome {
            pass: false,
            detail: format!("{detail}; {}", failures.join("; ")),
        }
    }
}

fn roundtrip() -> Outcome {
    let (gmm, images) = roundtrip_fixture(12, derive_seed(ROOT, "roundtrip"), 0.05).unwrap();
    let err = |n| {
        roundtrip_study(&gmm, &images, 1000, n, (1e-4, 0.02))
            .unwrap()
            .mean_error
    };
    let (e25, e50, e100) = (err(25), err(50), err(100));
    let mut f = Vec::new();
    check(
        images.iter().all(|x| x.shape() == (3, 16, 16)),
        "images are not 3x16x16",
        &mut f,
    );
    check(e50 <= 0.05, "error at 50 steps above 0.05", &mut f);
    check(e100 <= e25, "error at 100 steps above error at 25", &mut f);
    outcome(
        f,
        format!("relative error 25/50/100 steps = {e25:.5}/{e50:.5}/{e100:.5}"),
    )
}

fn zero_mask() -> Outcome {
    let enc = PromptEncoder::default();
    let tasks = gen_eval_set(2, derive_seed(ROOT, "datagen/eval")).unwrap();
    let mut f = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        let cfg = EditConfig {
            mask_source: MaskSource::Empty,
            seed: i as u64,
            ..Default::default()
        };
        let r = edit_task(t, &cfg, &enc, None).unwrap();
        check(
            r.x_out == t.input.image && r.mask.area() == 0,
            format!("{} changed", t.id),
            &mut f,
        );
    }
    outcome(
        f,
        format!(
            "{} edits with an all-zero mask returned the input bitwise",
            tasks.len()
        ),
    )
}

fn processor_suite() -> Outcome {
    let mut f = Vec::new();
    let mut replaced = 0usize;
    for i in 0..1000u64 {
        let mut rng = rng_from(derive_indexed(ROOT, "attention-suite", i));
        let c = 1 + (i % 4) as usize;
        let n = 256;
        let x_s = LatentImage::from_vec(c, 16, 16, normals(&mut rng, c * n)).unwrap();
        let x_no = LatentImage::from_vec(c, 16, 16, normals(&mut rng, c * n)).unwrap();
        let att: Vec<f64> = normals(&mut rng, n)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let level = (i % 7) as f64 / 3.0 - 1.0;
        let mask: Vec<bool> = normals(&mut rng, n).iter().map(|v| *v > level).collect();
        let a = AttentionMap::new(Grid::from_vec(16, 16, att.clone()).unwrap()).unwrap();
        let m = EditMask::binary(
            Grid::from_vec(16, 16, mask.iter().map(|b| *b as u8 as f64).collect()).unwrap(),
        );
        let seed = derive_indexed(ROOT, "attention-suite/seed", i);
        let p = attention_process_traced(&x_s, &x_no, &a, &m, seed).unwrap();

        let n_edit = mask.iter().filter(|b| **b).count();
        let k = n_edit.div_ceil(2);
        let mut sorted = att.clone();
        sorted.sort_by(|u, v| v.total_cmp(u));
        let v_min = (k > 0).then(|| sorted[k - 1]);
        let g_pr: Vec<usize> = (0..n)
            .filter(|&s| v_min.is_some_and(|v| att[s] >= v))
            .collect();
        check(
            p.sets.v_min == v_min,
            format!("instance {i}: V_min differs"),
            &mut f,
        );
        for (s, &inside) in mask.iter().enumerate() {
            let (y, x) = (s / 16, s % 16);
            let px = p.refined.pixel(y, x);
            if !inside {
                check(
                    px == x_s.pixel(y, x),
                    format!("instance {i}: outside pixel {s} changed"),
                    &mut f,
                );
            } else {
                replaced += 1;
                let traced = g_pr.iter().any(|&q| x_no.pixel(q / 16, q % 16) == px);
                check(
                    traced,
                    format!("instance {i}: pixel {s} not traceable"),
                    &mut f,
                );
            }
        }
        let first: Vec<usize> = p
            .assignments
            .iter()
            .take(k)
            .map(|(_, s)| s.row * 16 + s.col)
            .collect();
        let mut sorted_first = first.clone();
        sorted_first.sort_unstable();
        sorted_first.dedup();
        check(
            sorted_first.len() == k
                && first
                    .iter()
                    .all(|s| att[*s] >= v_min.unwrap_or(f64::INFINITY)),
            format!("instance {i}: first half repeats or leaves G_pr"),
            &mut f,
        );
        let mut gp: Vec<usize> = p.sets.sources.iter().map(|s| s.row * 16 + s.col).collect();
        gp.sort_unstable();
        check(
            sorted_first == gp,
            format!("instance {i}: first half does not cover G_pr"),
            &mut f,
        );
        let again = attention_process_traced(&x_s, &x_no, &a, &m, seed).unwrap();
        check(
            again.refined == p.refined && again.assignments == p.assignments,
            format!("instance {i}: not reproducible"),
            &mut f,
        );
        if f.len() > 5 {
            break;
        }
    }
    outcome(
        f,
        format!("1000 instances, {replaced} replaced sites checked"),
    )
}

fn examples(n: usize, label: &str, enc: &PromptEncoder) -> Vec<MaskExample> {
    gen_training_set(n, derive_seed(ROOT, label), enc)
        .unwrap()
        .into_iter()
        .map(|t| (t.input, t.target))
        .collect()
}

fn masknet_training(model_out: &mut Option<MaskNetModel>) -> Outcome {
    let enc = PromptEncoder::default();
    let train = examples(2000, "datagen/train", &enc);
    let val = examples(200, "datagen/val", &enc);
    let hyper = TrainConfig {
        seed: derive_seed(ROOT, "masknet"),
        ..Default::default()
    };
    let cfg = MaskNetConfig::default();
    let mut f = Vec::new();
    let grad_err = val[..4]
        .iter()
        .enumerate()
        .map(|(i, (x, t))| {
            let m = MaskNetModel::new(cfg.clone(), i as u64).unwrap();
            gradient_check(&m, x, t, 200, 1e-5, i as u64).unwrap()
        })
        .fold(0.0, f64::max);
    let (model, r) = train_masknet(&train, &val, &cfg, &hyper).unwrap();
    let iou = mean_iou(&model, &val, 0.5).unwrap();
    let trained_err = gradient_check(&model, &val[0].0, &val[0].1, 200, 1e-5, 9).unwrap();
    let ratio = r.final_train_loss / r.initial_train_loss;
    check(r.steps <= 5000, "more than 5000 steps", &mut f);
    check(iou >= 0.7, "val IoU below 0.7", &mut f);
    check(ratio <= 0.2, "loss ratio above 0.2", &mut f);
    check(
        grad_err.max(trained_err) <= 1e-3,
        "gradient check above 1e-3",
        &mut f,
    );
    *model_out = Some(model);
    outcome(
        f,
        format!(
            "{} steps, val IoU {iou:.4}, loss {:.4} -> {:.4} (ratio {ratio:.4}), gradient check {:.2e}",
            r.steps,
            r.initial_train_loss,
            r.final_train_loss,
            grad_err.max(trained_err)
        ),
    )
}

fn color_tasks(n: usize) -> Vec<EditTask> {
    gen_eval_set(n, derive_seed(ROOT, "datagen/eval"))
        .unwrap()
        .into_iter()
        .filter(|t| t.task_type == TaskType::Color)
        .collect()
}

fn ablation(model: &MaskNetModel) -> Outcome {
    let enc = PromptEncoder::default();
    let tasks = color_tasks(50);
    let cfg = EditConfig {
        seed: derive_seed(ROOT, "edit"),
        ..Default::default()
    };
    let r = run_ablation(&tasks, &cfg, &enc, Some(model)).unwrap();
    let (full, no_ap, no_mn) = (
        r.variant("full").unwrap(),
        r.variant("no_attention_processor").unwrap(),
        r.variant("no_masknet").unwrap(),
    );
    let gain = full.aggregate.alignment - no_ap.aggregate.alignment;
    let mut f = Vec::new();
    check(
        tasks.len() >= 50 && full.failures.is_empty(),
        "fewer than 50 scored color tasks",
        &mut f,
    );
    check(
        gain >= 0.05,
        "alignment gain from the processor below 0.05",
        &mut f,
    );
    check(
        full.aggregate.preservation > no_mn.aggregate.preservation,
        "MaskNet preservation not above attention-threshold mask",
        &mut f,
    );
    check(
        full.aggregate.perceptual < no_mn.aggregate.perceptual,
        "MaskNet perceptual distance not below attention-threshold mask",
        &mut f,
    );
    outcome(
        f,
        format!(
            "{} tasks, alignment {:.4} vs {:.4} without processor (gain {gain:.4}), preservation {:.4} vs {:.4}, perceptual {:.4} vs {:.4} with threshold mask",
            tasks.len(),
            full.aggregate.alignment,
            no_ap.aggregate.alignment,
            full.aggregate.preservation,
            no_mn.aggregate.preservation,
            full.aggregate.perceptual,
            no_mn.aggregate.perceptual
        ),
    )
}

fn attention_harness(model: &MaskNetModel) -> Outcome {
    let enc = PromptEncoder::default();
    let tasks = color_tasks(50);
    let cfg = EditConfig {
        seed: derive_seed(ROOT, "edit"),
        ..Default::default()
    };
    let levels = [0.0, 0.5];
    let sweep = attention_sweep(&tasks, &cfg, &enc, Some(model), &levels).unwrap();

    let mut maps = Vec::new();
    let mut flags = Vec::new();
    let mut region = (Vec::new(), Vec::new());
    for &noise in &levels {
        for t in &tasks {
            let r = edit_task(
                t,
                &EditConfig {
                    noise_level: noise,
                    ..cfg.clone()
                },
                &enc,
                Some(model),
            )
            .unwrap();
            let m = task_metrics(t, &r, 0.0).unwrap();
            let ok = m.alignment >= SUCCESS_THRESHOLD;
            if ok {
                region.0.push(m.region_attention)
            } else {
                region.1.push(m.region_attention)
            }
            maps.push(r.attention);
            flags.push(ok);
        }
    }
    let stats = attention_stats(&maps, &flags).unwrap();
    let mut worst: f64 = 0.0;
    for (want, got) in [(true, &stats.success), (false, &stats.failure)] {
        let members: Vec<&AttentionMap> = maps
            .iter()
            .zip(&flags)
            .filter(|(_, s)| **s == want)
            .map(|(m, _)| m)
            .collect();
        for (k, v) in got.grid().as_slice().iter().enumerate() {
            let mut total = 0.0;
            for m in &members {
                total += m.grid().as_slice()[k];
            }
            let mean = if members.is_empty() {
                0.0
            } else {
                total / members.len() as f64
            };
            worst = worst.max((v - mean).abs());
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let (s, fl) = (mean(&region.0), mean(&region.1));
    let mut f = Vec::new();
    check(maps.len() == 100, "expected 100 runs", &mut f);
    check(worst <= 1e-12, "stats differ from brute-force mean", &mut f);
    check(
        sweep.stats == stats && sweep.success_region_mean == s && sweep.failure_region_mean == fl,
        "sweep disagrees with direct runs",
        &mut f,
    );
    check(
        matches!((s, fl), (Some(a), Some(b)) if a > b),
        "success in-region attention not above failure",
        &mut f,
    );
    outcome(
        f,
        format!(
            "{} runs ({} success, {} failure), max deviation {worst:.1e}, in-region attention {:.4} vs {:.4}",
            maps.len(),
            stats.success_count,
            stats.failure_count,
            s.unwrap_or(f64::NAN),
            fl.unwrap_or(f64::NAN)
        ),
    )
}

fn cli(cwd: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_madiff"))
        .args(args)
        .current_dir(cwd)
        .env_remove(LLM_ENDPOINT_ENV)
        .env("RUST_LOG", "warn")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn determinism(model: &MaskNetModel) -> Outcome {
    let seed = ROOT.to_string();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut f = Vec::new();
    for d in &dirs {
        model.save(&d.path().join("masknet.ckpt"), None).unwrap();
        check(
            cli(
                d.path(),
                &["--seed", &seed, "gen-data", "--train", "10", "--eval", "2"],
            ),
            "gen-data failed",
            &mut f,
        );
        check(
            cli(
                d.path(),
                &[
                    "--seed",
                    &seed,
                    "edit",
                    "--data",
                    "data",
                    "--task",
                    "comprehensive-0001",
                    "--masknet",
                    "masknet.ckpt",
                    "--out",
                    "run",
                ],
            ),
            "edit failed",
            &mut f,
        );
    }
    let files = [
        "input.png",
        "output.png",
        "mask.png",
        "attention.png",
        "attention.json",
        "contact.png",
        "edit.json",
        "metrics.json",
        "provenance.json",
    ];
    for file in files {
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("run").join(file)).ok();
        let (a, b) = (read(&dirs[0]), read(&dirs[1]));
        check(a.is_some() && a == b, format!("{file} differs"), &mut f);
    }
    outcome(
        f,
        format!(
            "two edit invocations in separate directories, {} output files compared byte for byte",
            files.len()
        ),
    )
}

fn dataset() -> Outcome {
    let mut rng = rng_for(ROOT, "acceptance/dataset");
    let mut f = Vec::new();
    for i in 0..1000u64 {
        let kind = GarmentKind::ALL[(i % 3) as usize];
        let spec = GarmentSpec::random(&mut rng, kind);
        let s = render(&spec, derive_indexed(ROOT, "acceptance/body", i)).unwrap();
        check(
            parse_caption(s.caption.raw()).ok() == Some(spec),
            format!("sample {i}: caption does not parse back"),
            &mut f,
        );
        let fg = EditMask::binary(s.foreground.clone());
        check(
            s.cloth_mask.is_subset_of(&fg),
            format!("sample {i}: cloth outside foreground"),
            &mut f,
        );
        let other = Color::ALL
            .iter()
            .copied()
            .find(|c| *c != spec.color)
            .unwrap();
        let recolored = GarmentSpec {
            color: other,
            ..spec
        };
        check(
            editing_region(&spec, &recolored, s.jitter).ok() == Some(s.cloth_mask.clone()),
            format!("sample {i}: color region differs from cloth"),
            &mut f,
        );
        if f.len() > 5 {
            break;
        }
    }
    outcome(
        f,
        "1000 samples: caption round trip, cloth within foreground, color region equals cloth"
            .into(),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut model = None;
    let mut results = vec![
        report(
            1,
            "inversion round trip",
            Duration::from_secs(60),
            roundtrip,
        ),
        report(2, "zero-mask identity", Duration::from_secs(1), zero_mask),
        report(
            3,
            "attention processor soundness",
            Duration::from_secs(30),
            processor_suite,
        ),
        report(4, "MaskNet training", Duration::from_secs(15 * 60), || {
            masknet_training(&mut model)
        }),
    ];
    let model = model.expect("MaskNet trained");
    results.push(report(
        5,
        "ablation directionality",
        Duration::from_secs(10 * 60),
        || ablation(&model),
    ));
    results.push(report(
        6,
        "attention statistics",
        Duration::from_secs(60),
        || attention_harness(&model),
    ));
    results.push(report(
        7,
        "end-to-end determinism",
        Duration::from_secs(60),
        || determinism(&model),
    ));
    results.push(report(
        8,
        "dataset integrity",
        Duration::from_secs(60),
        dataset,
    ));
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
