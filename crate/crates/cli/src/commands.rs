use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use madiff_core::attention::AttentionMap;
use madiff_core::datagen::{
    classify_edit, gen_eval_set, gen_training_set, infer_sample, resolve_prompt, EditTask,
    TaskType, DISPLAY_SCALE, SIZE,
};
use madiff_core::editor::{edit_task_image, EditProvenance, EditResult, MaskSource};
use madiff_core::eval::{
    attention_stats, attention_sweep, roundtrip_fixture, roundtrip_study, run_ablation,
    run_benchmark_with_results, task_metrics, SUCCESS_THRESHOLD,
};
use madiff_core::io::{self, Split, Tile};
use madiff_core::masknet::{train_masknet, train_masknet_from, MaskNetModel};
use madiff_core::prompt::{HttpLlmClient, PromptEncoder, ShapeVocabulary};
use madiff_core::tensor::LatentImage;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{
    AblateArgs, AttnStatsArgs, CheckFailed, Command, EditArgs, EvalArgs, GenDataArgs,
    RoundtripArgs, TaskSelection, TrainArgs,
};

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    args: Vec<String>,
    config: &'a RunConfig,
    seeds: BTreeMap<String, u64>,
    notes: Vec<String>,
}

fn write_provenance(
    out: &Path,
    command: &Command,
    cfg: &RunConfig,
    notes: Vec<String>,
) -> anyhow::Result<()> {
    let p = Provenance {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        args: std::env::args().skip(1).collect(),
        config: cfg,
        seeds: cfg.seeds(),
        notes,
    };
    io::write_json(&out.join("provenance.json"), &p)?;
    Ok(())
}

fn encoder(cfg: &RunConfig) -> anyhow::Result<PromptEncoder> {
    let mut enc = PromptEncoder::default();
    if let Some(p) = &cfg.paths.vocabulary {
        enc.vocab = ShapeVocabulary::load(p)?;
    }
    if let Some(client) = HttpLlmClient::from_config_or_env(cfg.llm.endpoint.as_deref())? {
        info!("mask prompts via {}", client.endpoint());
        enc.client = Some(Arc::new(client));
    }
    Ok(enc)
}

pub fn run(command: &Command, cfg: RunConfig) -> anyhow::Result<()> {
    let cfg = cfg.resolve();
    match command {
        Command::GenData(a) => gen_data(command, cfg, a),
        Command::TrainMasknet(a) => train(command, cfg, a),
        Command::Edit(a) => edit(command, cfg, a),
        Command::Eval(a) => eval(command, cfg, a),
        Command::Ablate(a) => ablate(command, cfg, a),
        Command::AttnStats(a) => attn_stats(command, cfg, a),
        Command::Roundtrip(a) => roundtrip(command, cfg, a),
    }
}

fn gen_data(command: &Command, mut cfg: RunConfig, a: &GenDataArgs) -> anyhow::Result<()> {
    if let Some(n) = a.train {
        cfg.generator.train = n;
    }
    if let Some(n) = a.eval {
        cfg.generator.eval_per_task = n;
    }
    write_provenance(&a.out, command, &cfg, vec![])?;
    let enc = encoder(&cfg)?;
    let train = gen_training_set(cfg.generator.train, cfg.seed_for("datagen/train"), &enc)?;
    let tasks = gen_eval_set(cfg.generator.eval_per_task, cfg.seed_for("datagen/eval"))?;
    io::write_dataset(&a.out, &train, &tasks)?;
    let rows: Vec<Vec<Tile>> = tasks
        .iter()
        .step_by((tasks.len() / cfg.eval.contact_rows.max(1)).max(1))
        .take(cfg.eval.contact_rows)
        .map(|t| {
            vec![
                Tile::Image(&t.input.image),
                Tile::Mask(&t.truth.region),
                Tile::Mask(&t.input.cloth_mask),
            ]
        })
        .collect();
    if !rows.is_empty() {
        io::write_contact_sheet(&a.out.join("contact.png"), &rows)?;
    }
    info!(
        "wrote {} training triples and {} evaluation tasks to {}",
        train.len(),
        tasks.len(),
        a.out.display()
    );
    Ok(())
}

fn train(command: &Command, mut cfg: RunConfig, a: &TrainArgs) -> anyhow::Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(s) = a.max_steps {
        cfg.train.max_steps = Some(s);
    }
    let resumed = match &a.resume {
        Some(p) => {
            let (model, _) =
                MaskNetModel::load(p).with_context(|| format!("resuming from {}", p.display()))?;
            cfg.masknet = model.config().clone();
            Some(model)
        }
        None => None,
    };
    write_provenance(&a.out, command, &cfg, vec![])?;
    let enc = encoder(&cfg)?;
    let train_set = io::load_mask_examples(&a.data, Split::Train, &enc)?;
    let val_set = io::load_mask_examples(&a.data, Split::Eval, &enc)?;
    info!(
        "training MaskNet on {} examples, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let t0 = Instant::now();
    let (model, report) = match resumed {
        Some(m) => train_masknet_from(m, &train_set, &val_set, &cfg.train)?,
        None => train_masknet(&train_set, &val_set, &cfg.masknet, &cfg.train)?,
    };
    model.save(&a.out.join("masknet.ckpt"), Some(&cfg.train))?;
    io::write_json(&a.out.join("report.json"), &report)?;
    info!(
        "{} steps in {:.1}s: train loss {:.4} -> {:.4}, best val IoU {}",
        report.steps,
        t0.elapsed().as_secs_f64(),
        report.initial_train_loss,
        report.final_train_loss,
        report
            .best_val_iou
            .map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

/// MaskNet from `--masknet`, the config path, or trained in-process.
fn obtain_masknet(
    cfg: &RunConfig,
    arg: Option<&PathBuf>,
    data: Option<&Path>,
    enc: &PromptEncoder,
) -> anyhow::Result<MaskNetModel> {
    if let Some(p) = arg.or(cfg.paths.masknet.as_ref()) {
        let (model, _) =
            MaskNetModel::load(p).with_context(|| format!("loading {}", p.display()))?;
        return Ok(model);
    }
    let (train, val) = match data {
        Some(d) => (
            io::load_mask_examples(d, Split::Train, enc)?,
            io::load_mask_examples(d, Split::Eval, enc)?,
        ),
        None => {
            let n_val = (cfg.generator.train / 10).max(1);
            let all = gen_training_set(
                cfg.generator.train + n_val,
                cfg.seed_for("datagen/train"),
                enc,
            )?;
            let mut ex: Vec<_> = all.into_iter().map(|t| (t.input, t.target)).collect();
            let val = ex.split_off(cfg.generator.train);
            (ex, val)
        }
    };
    info!(
        "no MaskNet checkpoint given; training on {} examples",
        train.len()
    );
    let (model, report) = train_masknet(&train, &val, &cfg.masknet, &cfg.train)?;
    info!(
        "MaskNet ready: best val IoU {:.4}",
        report.best_val_iou.unwrap_or(f64::NAN)
    );
    Ok(model)
}

fn select_tasks(
    cfg: &RunConfig,
    s: &TaskSelection,
    per_type: usize,
) -> anyhow::Result<Vec<EditTask>> {
    let mut tasks = match &s.data {
        Some(d) => io::load_tasks(d)?,
        None => gen_eval_set(per_type, cfg.seed_for("datagen/eval"))?,
    };
    if let Some(t) = s.tasks {
        tasks.retain(|x| x.task_type == t);
    }
    if tasks.is_empty() {
        bail!(madiff_core::Error::param("no evaluation tasks selected"));
    }
    Ok(tasks)
}

fn decode_input(path: &Path) -> anyhow::Result<LatentImage> {
    let img = io::read_image(path)?;
    let big = SIZE * DISPLAY_SCALE;
    if img.shape() == (3, big, big) {
        let k = DISPLAY_SCALE;
        let mut small = LatentImage::zeros(3, SIZE, SIZE);
        for c in 0..3 {
            for y in 0..SIZE {
                for x in 0..SIZE {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += img.get(c, y * k + dy, x * k + dx);
                        }
                    }
                    small.set(c, y, x, acc / (k * k) as f64);
                }
            }
        }
        return Ok(small);
    }
    Ok(img)
}

#[derive(Serialize)]
struct EditSummary<'a> {
    task_id: &'a str,
    task_type: TaskType,
    source: String,
    target: String,
    target_prompt: &'a str,
    edit: EditProvenance,
}

fn write_run(out: &Path, task: &EditTask, r: &EditResult) -> anyhow::Result<()> {
    io::write_image(&out.join("input.png"), &r.x_org)?;
    io::write_image(&out.join("output.png"), &r.x_out)?;
    io::write_mask(&out.join("mask.png"), &r.mask)?;
    io::write_attention(
        &out.join("attention.png"),
        &out.join("attention.json"),
        &r.attention,
    )?;
    io::write_contact_sheet(
        &out.join("contact.png"),
        &[vec![
            Tile::Image(&r.x_org),
            Tile::Mask(&r.mask),
            Tile::Image(&r.x_out),
        ]],
    )?;
    let mut edit = r.provenance.clone();
    let timings = std::mem::take(&mut edit.timings_ms);
    io::write_json(
        &out.join("edit.json"),
        &EditSummary {
            task_id: &task.id,
            task_type: task.task_type,
            source: task.input.spec.caption(),
            target: task.truth.spec.caption(),
            target_prompt: task.target_prompt.raw(),
            edit,
        },
    )?;
    io::write_json(&out.join("timings.json"), &timings)?;
    Ok(())
}

fn edit(command: &Command, mut cfg: RunConfig, a: &EditArgs) -> anyhow::Result<()> {
    if let Some(m) = a.mask_source {
        cfg.edit.mask_source = m;
    }
    if let Some(n) = a.noise_level {
        cfg.edit.noise_level = n;
    }
    if a.no_attention_processor {
        cfg.edit.attention_processor = false;
    }
    let mut notes = Vec::new();
    let checkpoint = a.masknet.clone().or_else(|| cfg.paths.masknet.clone());
    if cfg.edit.mask_source == MaskSource::Masknet && checkpoint.is_none() {
        warn!("no MaskNet checkpoint given; falling back to the foreground mask");
        notes.push("mask source masknet requested without a checkpoint; used foreground".into());
        cfg.edit.mask_source = MaskSource::Foreground;
    }
    cfg.paths.masknet = checkpoint;

    let (task, x_org) = match (&a.image, &a.data, &a.task) {
        (Some(image), _, _) => {
            let prompt = a
                .prompt
                .as_deref()
                .ok_or_else(|| anyhow!("--image needs --prompt"))?;
            let x_org = decode_input(image)?;
            let (sample, sq) = infer_sample(&x_org)?;
            let per_value = sq / x_org.len() as f64;
            if per_value > 0.01 {
                warn!(
                    "input is far from every synthetic render (mean squared error {per_value:.4})"
                );
            }
            let tgt = resolve_prompt(&sample.spec, prompt)?;
            let task_type = classify_edit(&sample.spec, &tgt)?;
            notes.push(format!("input recognised as '{}'", sample.spec.caption()));
            let task = EditTask::new("input", task_type, sample.spec, tgt, sample.jitter)?;
            (task, x_org)
        }
        (None, Some(data), Some(id)) => {
            let task = io::load_tasks(data)?
                .into_iter()
                .find(|t| &t.id == id)
                .ok_or_else(|| {
                    madiff_core::Error::param(format!("task '{id}' not in {}", data.display()))
                })?;
            let x_org = task.input.image.clone();
            (task, x_org)
        }
        _ => bail!(madiff_core::Error::param(
            "give either --image and --prompt or --data and --task"
        )),
    };
    write_provenance(&a.out, command, &cfg, notes)?;

    let enc = encoder(&cfg)?;
    let masknet = match (&cfg.paths.masknet, cfg.edit.mask_source) {
        (Some(p), MaskSource::Masknet) => Some(
            MaskNetModel::load(p)
                .with_context(|| format!("loading {}", p.display()))?
                .0,
        ),
        _ => None,
    };
    let t0 = Instant::now();
    let result = edit_task_image(&task, &x_org, &cfg.edit, &enc, masknet.as_ref())?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    write_run(&a.out, &task, &result)?;
    let metrics = task_metrics(&task, &result, 0.0)?;
    io::write_json(&a.out.join("metrics.json"), &metrics)?;
    info!(
        "{} -> '{}' in {ms:.1} ms: alignment {:.3}, preservation {:.3}, perceptual {:.4}",
        task.id,
        task.truth.spec.caption(),
        metrics.alignment,
        metrics.preservation,
        metrics.perceptual
    );
    Ok(())
}

fn eval(command: &Command, mut cfg: RunConfig, a: &EvalArgs) -> anyhow::Result<()> {
    if let Some(m) = a.mask_source {
        cfg.edit.mask_source = m;
    }
    write_provenance(&a.out, command, &cfg, vec![])?;
    let enc = encoder(&cfg)?;
    let mut tasks = select_tasks(&cfg, &a.select, cfg.generator.eval_per_task)?;
    if let Some(n) = a.limit {
        tasks.truncate(n);
    }
    let masknet = match cfg.edit.mask_source {
        MaskSource::Masknet => Some(obtain_masknet(
            &cfg,
            a.select.masknet.as_ref(),
            a.select.data.as_deref(),
            &enc,
        )?),
        _ => None,
    };
    let (report, results) =
        run_benchmark_with_results(&tasks, &cfg.edit, &enc, masknet.as_ref(), "benchmark")?;
    io::write_text(&a.out.join("report.json"), &report.to_json())?;
    io::write_text(&a.out.join("report.md"), &report.to_markdown())?;
    let rows: Vec<Vec<Tile>> = results
        .iter()
        .flatten()
        .take(cfg.eval.contact_rows)
        .map(|r| {
            vec![
                Tile::Image(&r.x_org),
                Tile::Mask(&r.mask),
                Tile::Image(&r.x_out),
            ]
        })
        .collect();
    if !rows.is_empty() {
        io::write_contact_sheet(&a.out.join("contact.png"), &rows)?;
    }
    println!("{}", report.to_markdown());
    if !report.failures.is_empty() {
        warn!("{} tasks failed", report.failures.len());
    }
    Ok(())
}

fn ablate(command: &Command, cfg: RunConfig, a: &AblateArgs) -> anyhow::Result<()> {
    write_provenance(&a.out, command, &cfg, vec![])?;
    let enc = encoder(&cfg)?;
    let mut tasks = select_tasks(&cfg, &a.select, a.seeds)?;
    tasks.truncate(a.seeds);
    let masknet = match cfg.edit.mask_source {
        MaskSource::Masknet => Some(obtain_masknet(
            &cfg,
            a.select.masknet.as_ref(),
            a.select.data.as_deref(),
            &enc,
        )?),
        _ => None,
    };
    let report = run_ablation(&tasks, &cfg.edit, &enc, masknet.as_ref())?;
    io::write_json(&a.out.join("ablation.json"), &report)?;
    io::write_text(&a.out.join("ablation.md"), &report.to_markdown())?;
    println!("{}", report.to_markdown());

    let agg = |name: &str| {
        report
            .variant(name)
            .map(|v| v.aggregate.clone())
            .ok_or_else(|| anyhow!("missing variant {name}"))
    };
    let (full, no_ap, no_mask) = (
        agg("full")?,
        agg("no_attention_processor")?,
        agg("no_masknet")?,
    );
    let checks = [
        (
            "alignment gain from the attention processor >= 0.05",
            full.alignment - no_ap.alignment >= 0.05,
        ),
        (
            "preservation higher with MaskNet",
            full.preservation > no_mask.preservation,
        ),
        (
            "perceptual distance lower with MaskNet",
            full.perceptual < no_mask.perceptual,
        ),
    ];
    let mut failed = Vec::new();
    for (name, ok) in checks {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        bail!(CheckFailed(failed.join("; ")));
    }
    Ok(())
}

#[derive(Serialize)]
struct StatsOutput {
    runs: usize,
    success_count: usize,
    failure_count: usize,
    success_empty: bool,
    failure_empty: bool,
    success_region_mean: Option<f64>,
    failure_region_mean: Option<f64>,
}

fn write_stat_maps(
    out: &Path,
    success: &AttentionMap,
    failure: &AttentionMap,
) -> anyhow::Result<()> {
    io::write_attention(&out.join("success.png"), &out.join("success.json"), success)?;
    io::write_attention(&out.join("failure.png"), &out.join("failure.json"), failure)?;
    Ok(())
}

fn attn_stats(command: &Command, mut cfg: RunConfig, a: &AttnStatsArgs) -> anyhow::Result<()> {
    if let Some(levels) = &a.noise_levels {
        cfg.eval.noise_levels = levels.clone();
    }
    write_provenance(&a.out, command, &cfg, vec![])?;
    if !a.runs.is_empty() {
        let mut maps = Vec::new();
        let mut success = Vec::new();
        for dir in &a.runs {
            maps.push(io::read_attention(&dir.join("attention.json"))?);
            let m: madiff_core::eval::TaskMetrics = io::read_json(&dir.join("metrics.json"))?;
            success.push(m.alignment >= SUCCESS_THRESHOLD);
        }
        let stats = attention_stats(&maps, &success)?;
        write_stat_maps(&a.out, &stats.success, &stats.failure)?;
        let summary = StatsOutput {
            runs: maps.len(),
            success_count: stats.success_count,
            failure_count: stats.failure_count,
            success_empty: stats.success_empty,
            failure_empty: stats.failure_empty,
            success_region_mean: None,
            failure_region_mean: None,
        };
        io::write_json(&a.out.join("stats.json"), &summary)?;
        println!(
            "{} successful and {} failed runs",
            stats.success_count, stats.failure_count
        );
        return Ok(());
    }

    let enc = encoder(&cfg)?;
    let select = TaskSelection {
        data: a.select.data.clone(),
        tasks: a.select.tasks.or(Some(TaskType::Color)),
        masknet: a.select.masknet.clone(),
    };
    let mut tasks = select_tasks(&cfg, &select, a.limit)?;
    tasks.truncate(a.limit);
    let masknet = match cfg.edit.mask_source {
        MaskSource::Masknet => Some(obtain_masknet(
            &cfg,
            select.masknet.as_ref(),
            select.data.as_deref(),
            &enc,
        )?),
        _ => None,
    };
    let sweep = attention_sweep(
        &tasks,
        &cfg.edit,
        &enc,
        masknet.as_ref(),
        &cfg.eval.noise_levels,
    )?;
    write_stat_maps(&a.out, &sweep.stats.success, &sweep.stats.failure)?;
    io::write_json(&a.out.join("sweep.json"), &sweep.runs)?;
    io::write_json(
        &a.out.join("stats.json"),
        &StatsOutput {
            runs: sweep.runs.len(),
            success_count: sweep.stats.success_count,
            failure_count: sweep.stats.failure_count,
            success_empty: sweep.stats.success_empty,
            failure_empty: sweep.stats.failure_empty,
            success_region_mean: sweep.success_region_mean,
            failure_region_mean: sweep.failure_region_mean,
        },
    )?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} runs: {} successful (in-region attention {}), {} failed ({})",
        sweep.runs.len(),
        sweep.stats.success_count,
        fmt(sweep.success_region_mean),
        sweep.stats.failure_count,
        fmt(sweep.failure_region_mean)
    );
    if let (Some(s), Some(f)) = (sweep.success_region_mean, sweep.failure_region_mean) {
        if s <= f {
            bail!(CheckFailed(format!(
                "successful edits attend less to the region ({s:.4} <= {f:.4})"
            )));
        }
    }
    Ok(())
}

fn roundtrip(command: &Command, cfg: RunConfig, a: &RoundtripArgs) -> anyhow::Result<()> {
    write_provenance(&a.out, command, &cfg, vec![])?;
    let (gmm, images) = roundtrip_fixture(
        cfg.eval.roundtrip_images,
        cfg.seed_for("roundtrip"),
        cfg.edit.sigma0,
    )?;
    let mut reports = Vec::new();
    for &steps in &a.steps {
        let r = roundtrip_study(
            &gmm,
            &images,
            cfg.edit.total_steps,
            steps,
            (cfg.edit.beta_min, cfg.edit.beta_max),
        )?;
        println!(
            "steps {steps}: mean relative error {:.6} (max {:.6})",
            r.mean_error, r.max_error
        );
        reports.push(r);
    }
    io::write_json(&a.out.join("roundtrip.json"), &reports)?;
    let tol = cfg.eval.roundtrip_tolerance;
    let bad: Vec<String> = reports
        .iter()
        .filter(|r| r.mean_error.is_nan() || r.mean_error > tol)
        .map(|r| format!("{} steps: {:.4} > {tol}", r.effective_steps, r.mean_error))
        .collect();
    if !bad.is_empty() {
        bail!(CheckFailed(bad.join("; ")));
    }
    Ok(())
}
