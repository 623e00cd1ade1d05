use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context as _};
use nvs_core::dataset::{load_dataset, load_scene, make_dataset, scene_dir, SceneData};
use nvs_core::metrics::{self, context_csv, tau_csv};
use nvs_core::model::Model;
use nvs_core::sampler::{multi_target_sample, partition_map};
use nvs_core::selfcheck;
use nvs_core::trainer::{fit, latest_checkpoint, AdamW, Checkpoint, LOG_HEADER};
use serde::Serialize;
use serde_json::json;

use crate::config::{resolve, RunConfig, SEED_ENV};
use crate::{Common, EvalArgs, UsageError};

fn effective(common: &Common, base: &RunConfig, extra: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let env = std::env::var(SEED_ENV).ok();
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    resolve(base, common.config.as_deref(), env.as_deref(), &overrides)
}

/// Refuse to write into a directory that already holds files unless forced.
fn claim_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            bail!(UsageError(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            bail!(UsageError(format!(
                "{} is not empty; choose a new directory or pass --force",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Common run-directory artifacts: the echoed configuration, a
/// reproducible trace and a separate file for wall-clock timings.
fn finish_run(dir: &Path, cfg: &RunConfig, trace: serde_json::Value, seconds: f64) -> anyhow::Result<()> {
    write_text(&dir.join("effective_config.toml"), &cfg.to_toml()?)?;
    write_json(&dir.join("trace.json"), &trace)?;
    write_json(&dir.join("timing.json"), &json!({ "seconds": seconds }))
}

fn usize_override(key: &str, v: Option<impl ToString>) -> Vec<(String, String)> {
    v.map(|v| vec![(key.to_string(), v.to_string())]).unwrap_or_default()
}

pub fn gen_data(
    common: &Common,
    scenes: Option<usize>,
    views: Option<usize>,
    resolution: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> anyhow::Result<ExitCode> {
    let mut extra = usize_override("data.scenes", scenes);
    extra.extend(usize_override("data.views", views));
    extra.extend(usize_override("data.seed", seed));
    if let Some(r) = resolution {
        extra.push(("data.resolution".into(), format!("[{r}, {r}]")));
    }
    let cfg = effective(common, &RunConfig::default(), &extra)?;
    claim_dir(out, common.force)?;
    let start = Instant::now();
    let d = &cfg.data;
    let info = make_dataset(
        out,
        d.scenes,
        d.views,
        (d.resolution[0], d.resolution[1]),
        d.seed,
        &d.orbit,
    )?;
    log::info!("wrote {} scenes to {}", info.num_scenes, out.display());
    finish_run(out, &cfg, json!({ "command": "gen-data", "dataset": info }), start.elapsed().as_secs_f64())?;
    Ok(ExitCode::SUCCESS)
}

/// Keep the header and rows up to `step` so a resumed log has no duplicates.
fn truncate_log(path: &Path, step: u64) -> anyhow::Result<()> {
    let mut kept = vec![LOG_HEADER.to_string()];
    if path.exists() {
        for line in fs::read_to_string(path)?.lines().skip(1) {
            let s: u64 = line.split(',').next().and_then(|f| f.parse().ok()).unwrap_or(u64::MAX);
            if s <= step {
                kept.push(line.to_string());
            }
        }
    }
    write_text(path, &(kept.join("\n") + "\n"))
}

pub fn train(
    common: &Common,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    steps: Option<u64>,
    stop_after: Option<u64>,
) -> anyhow::Result<ExitCode> {
    let extra = usize_override("train.total_steps", steps);
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let mut base = RunConfig::default();
    if let Some(ck) = &resumed {
        // the checkpoint's configuration replaces the defaults
        let c = &ck.header.config;
        base.set_model(&c.model);
        base.train = c.train.clone();
        base.loss = c.loss.clone();
    }
    let cfg = effective(common, &base, &extra)?;
    cfg.train.validate()?;
    cfg.loss.validate()?;
    let model_cfg = cfg.model();
    model_cfg.validate()?;

    let (mut model, mut opt) = match &resumed {
        Some(ck) => {
            if ck.header.config.model != model_cfg {
                bail!(UsageError("model settings differ from the checkpoint being resumed".into()));
            }
            fs::create_dir_all(out)?;
            truncate_log(&out.join("train_log.csv"), ck.header.step)?;
            ck.restore()?
        }
        None => {
            claim_dir(out, common.force)?;
            if common.force {
                for p in fs::read_dir(out)? {
                    let p = p?.path();
                    let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                    if name.starts_with("ckpt_") && name.ends_with(".bin") {
                        fs::remove_file(&p)?;
                    }
                }
            }
            let m = Model::new(model_cfg, cfg.train.seed)?;
            let o = AdamW::new(&m.params);
            (m, o)
        }
    };
    let scenes = load_dataset(data)?;
    if scenes.is_empty() {
        bail!(UsageError(format!("no scenes found under {}", data.display())));
    }
    log::info!(
        "training {} parameters on {} scenes from step {}",
        model.count_parameters(),
        scenes.len(),
        opt.t
    );
    let first_step = opt.t;
    let start = Instant::now();
    let mut last = None;
    let mut skipped = 0u64;
    let end = fit(&mut model, &mut opt, &scenes, &cfg.train, &cfg.loss, Some(out), |_, s| {
        skipped += u64::from(s.skipped);
        if s.step % 50 == 0 {
            log::info!("step {} loss {:.4} lr {:.2e} grad {:.3}", s.step, s.loss, s.lr, s.grad_norm);
        }
        last = Some(s.clone());
        if stop_after.is_some_and(|k| s.step >= k) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    let latest = latest_checkpoint(out)?.map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned());
    let trace = json!({
        "command": "train",
        "resumed_from": resume.map(|_| first_step),
        "final_step": end,
        "steps_run": end - first_step,
        "skipped_steps": skipped,
        "last": last,
        "checkpoint": latest,
    });
    finish_run(out, &cfg, trace, start.elapsed().as_secs_f64())?;
    Ok(ExitCode::SUCCESS)
}

fn load_model(ckpt: &Path) -> anyhow::Result<(Model, u64)> {
    let ck = Checkpoint::load(ckpt)?;
    let (model, _) = ck.restore()?;
    Ok((model, ck.header.step))
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    common: &Common,
    ckpt: &Path,
    data: &Path,
    scene: usize,
    targets: &[usize],
    context: &[usize],
    tau: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> anyhow::Result<ExitCode> {
    let mut extra = usize_override("sampler.tau", tau);
    extra.extend(usize_override("sampler.seed", seed));
    let (model, step) = load_model(ckpt)?;
    let mut base = RunConfig::default();
    base.set_model(&model.config);
    let mut cfg = effective(common, &base, &extra)?;
    cfg.set_model(&model.config);
    cfg.sampler.validate()?;
    let dir = scene_dir(data, scene);
    let sd = load_scene(&dir)?;
    let n = sd.views.len();
    if let Some(&bad) = targets.iter().chain(context).find(|&&i| i >= n) {
        bail!(UsageError(format!("view index {bad} out of range: scene has {n} views")));
    }
    let ctx_idx: Vec<usize> = if context.is_empty() {
        sd.manifest.splits.context.iter().copied().filter(|i| !targets.contains(i)).collect()
    } else {
        context.to_vec()
    };
    if ctx_idx.is_empty() {
        bail!(UsageError("no context views left after excluding the targets".into()));
    }
    claim_dir(out, common.force)?;
    let ctx: Vec<_> = ctx_idx.iter().map(|&i| sd.views[i].clone()).collect();
    let poses: Vec<_> = targets.iter().map(|&i| sd.views[i].pose.clone()).collect();
    let start = Instant::now();
    let (images, trace) = multi_target_sample(&model, &ctx, &poses, &cfg.sampler)?;
    let seconds = start.elapsed().as_secs_f64();
    let mut scores = Vec::new();
    for (k, (&t, img)) in targets.iter().zip(&images).enumerate() {
        let name = if targets.len() == 1 { String::from("sample") } else { format!("sample_{t}") };
        img.save_png(&out.join(format!("{name}.png")))?;
        let part = partition_map(&trace, k, sd.views[t].pose.resolution, model.patch_size())?;
        part.save_png(&out.join(format!("{}.png", name.replace("sample", "partition"))))?;
        let gt = &sd.views[t].image;
        scores.push(json!({
            "view": t,
            "psnr": metrics::psnr(img, gt)?,
            "ssim": metrics::ssim(img, gt).ok(),
        }));
    }
    let mut record = serde_json::to_value(&trace)?;
    if let serde_json::Value::Object(m) = &mut record {
        m.insert("command".into(), json!("sample"));
        m.insert("checkpoint_step".into(), json!(step));
        m.insert("scene".into(), json!(scene));
        m.insert("targets".into(), json!(targets));
        m.insert("context".into(), json!(ctx_idx));
        m.insert("sampler".into(), serde_json::to_value(&cfg.sampler)?);
        m.insert("scores".into(), json!(scores));
    }
    finish_run(out, &cfg, record, seconds)?;
    Ok(ExitCode::SUCCESS)
}

struct EvalSetup {
    model: Model,
    step: u64,
    scenes: Vec<SceneData>,
    cfg: RunConfig,
}

fn eval_setup(args: &EvalArgs, extra: &[(String, String)]) -> anyhow::Result<EvalSetup> {
    let (model, step) = load_model(&args.ckpt)?;
    let mut base = RunConfig::default();
    base.set_model(&model.config);
    let mut cfg = effective(&args.common, &base, extra)?;
    cfg.set_model(&model.config);
    cfg.sampler.validate()?;
    let mut scenes = load_dataset(&args.data)?;
    if let Some(k) = args.max_scenes {
        scenes.truncate(k);
    }
    if scenes.is_empty() {
        bail!(UsageError(format!("no scenes found under {}", args.data.display())));
    }
    Ok(EvalSetup {
        model,
        step,
        scenes,
        cfg,
    })
}

/// `--out x.json` writes the report to that file with the run artifacts
/// beside it; any other path is a run directory holding `report.json`.
fn report_target(out: &Path, force: bool) -> anyhow::Result<(PathBuf, PathBuf)> {
    if out.extension().is_some_and(|e| e == "json") {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        fs::create_dir_all(&dir)?;
        if out.exists() && !force {
            bail!(UsageError(format!("{} exists; pass --force to replace it", out.display())));
        }
        Ok((dir, out.to_path_buf()))
    } else {
        claim_dir(out, force)?;
        Ok((out.to_path_buf(), out.join("report.json")))
    }
}

pub fn eval_cmd(args: &EvalArgs, tau: Option<f64>, n_context: usize, out: &Path) -> anyhow::Result<ExitCode> {
    let s = eval_setup(args, &usize_override("sampler.tau", tau))?;
    let (dir, report_path) = report_target(out, args.common.force)?;
    let (report, times) = metrics::evaluate(&s.model, &s.scenes, args.split, n_context, &s.cfg.sampler)?;
    write_json(&report_path, &report)?;
    let trace = json!({
        "command": "eval",
        "checkpoint_step": s.step,
        "scenes": s.scenes.len(),
        "images": report.images.len(),
        "split": args.split,
        "means": report.means,
    });
    write_text(&dir.join("effective_config.toml"), &s.cfg.to_toml()?)?;
    write_json(&dir.join("trace.json"), &trace)?;
    write_json(&dir.join("timing.json"), &json!({ "seconds_per_image": times }))?;
    println!(
        "{} images: psnr {:.3} ssim {:.4} calls {:.2}",
        report.images.len(),
        report.means.psnr,
        report.means.ssim,
        report.means.backbone_calls
    );
    Ok(ExitCode::SUCCESS)
}

pub fn ablate_tau_cmd(args: &EvalArgs, taus: &[f64], n_context: usize, out: &Path) -> anyhow::Result<ExitCode> {
    if taus.is_empty() {
        bail!(UsageError("--taus needs at least one value".into()));
    }
    let s = eval_setup(args, &[])?;
    claim_dir(out, args.common.force)?;
    let (rows, times) = metrics::ablate_tau(&s.model, &s.scenes, args.split, n_context, taus, &s.cfg.sampler)?;
    let csv = tau_csv(&rows);
    write_text(&out.join("ablate_tau.csv"), &csv)?;
    print!("{csv}");
    write_text(&out.join("effective_config.toml"), &s.cfg.to_toml()?)?;
    write_json(
        &out.join("trace.json"),
        &json!({ "command": "ablate-tau", "checkpoint_step": s.step, "split": args.split, "rows": rows }),
    )?;
    let timing: Vec<_> = taus.iter().zip(&times).map(|(t, s)| json!({ "tau": t, "seconds_per_image": s })).collect();
    write_json(&out.join("timing.json"), &timing)?;
    Ok(ExitCode::SUCCESS)
}

pub fn ablate_context_cmd(args: &EvalArgs, counts: &[usize], tau: Option<f64>, out: &Path) -> anyhow::Result<ExitCode> {
    if counts.is_empty() {
        bail!(UsageError("--counts needs at least one value".into()));
    }
    let s = eval_setup(args, &usize_override("sampler.tau", tau))?;
    claim_dir(out, args.common.force)?;
    let (rows, times) = metrics::ablate_context(&s.model, &s.scenes, args.split, counts, &s.cfg.sampler)?;
    let csv = context_csv(&rows);
    write_text(&out.join("ablate_context.csv"), &csv)?;
    print!("{csv}");
    write_text(&out.join("effective_config.toml"), &s.cfg.to_toml()?)?;
    write_json(
        &out.join("trace.json"),
        &json!({ "command": "ablate-context", "checkpoint_step": s.step, "split": args.split, "rows": rows }),
    )?;
    let timing: Vec<_> = counts
        .iter()
        .zip(&times)
        .map(|(n, s)| json!({ "n_context": n, "seconds_per_image": s }))
        .collect();
    write_json(&out.join("timing.json"), &timing)?;
    Ok(ExitCode::SUCCESS)
}

pub fn check(common: &Common, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let cfg = effective(common, &RunConfig::default(), &[])?;
    let start = Instant::now();
    let results = selfcheck::run_all();
    for r in &results {
        if r.passed {
            println!("PASS {}", r.name);
        } else {
            println!("FAIL {}: {}", r.name, r.detail);
        }
    }
    let ok = results.iter().all(|r| r.passed);
    if let Some(dir) = out {
        claim_dir(dir, common.force)?;
        finish_run(dir, &cfg, json!({ "command": "check", "results": results }), start.elapsed().as_secs_f64())?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
