//! Training loop: mask sampling, AdamW with warmup and cosine decay,
//! global-norm clipping, CSV logging and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneData;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossParts, PerceptualProxy};
use crate::model::{Example, Model, ModelConfig};
use crate::params::{Grads, ParamSet, Tensor};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Lower end of the uniform mask-ratio draw; the upper end is 1.
    pub mask_ratio_min: f64,
    /// Inclusive range of context views per example.
    pub context_views: [usize; 2],
    /// Inclusive range of target views per example.
    pub target_views: [usize; 2],
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: u64,
    pub max_consecutive_failures: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.02,
            grad_clip_norm: 3.0,
            warmup_steps: 1000,
            total_steps: 10_000,
            mask_ratio_min: 0.7,
            context_views: [1, 2],
            target_views: [1, 3],
            seed: 0,
            checkpoint_every: 1000,
            max_consecutive_failures: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.mask_ratio_min > 0.0 && self.mask_ratio_min <= 1.0) {
            return bad("mask_ratio_min must lie in (0, 1]");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps must not exceed total_steps");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.grad_clip_norm <= 0.0 || self.weight_decay < 0.0 {
            return bad("lr and grad_clip_norm must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        let [c0, c1] = self.context_views;
        let [t0, t1] = self.target_views;
        if c0 == 0 || c0 > c1 || t0 == 0 || t0 > t1 {
            return bad("view ranges must be non-empty and start at 1 or more");
        }
        if self.max_consecutive_failures == 0 {
            return bad("max_consecutive_failures must be at least 1");
        }
        Ok(())
    }
}

/// Mask exactly `⌈r·n⌉` uniformly chosen tokens with `r ~ U[r_min, 1]`.
pub fn sample_mask(n: usize, rng: &mut Rng, r_min: f64) -> Vec<bool> {
    let r = if r_min >= 1.0 { 1.0 } else { rng.random_range(r_min..=1.0) };
    mask_with_ratio(n, r, rng)
}

pub fn mask_with_ratio(n: usize, r: f64, rng: &mut Rng) -> Vec<bool> {
    let k = ((r * n as f64).ceil() as usize).min(n);
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, k) {
        mask[i] = true;
    }
    mask
}

/// Learning rate for the `step`-th update (1-based): linear warmup from 0,
/// then cosine decay to 0 at `total_steps`.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return if step <= cfg.total_steps { cfg.lr } else { 0.0 };
    }
    let p = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Scale `g` in place so its global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(g: &mut Grads, max_norm: f64) -> f64 {
    let norm = g.global_norm();
    if norm > max_norm {
        g.scale(max_norm / norm);
    }
    norm
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Grads,
    pub v: Grads,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    /// One update. Weight decay applies to matrices only (rank ≥ 2).
    pub fn step(&mut self, params: &mut ParamSet, g: &Grads, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let decay = if params.tensor(id).shape.len() >= 2 { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m.slots[id.index()], &mut self.v.slots[id.index()]);
            let grad = g.get(id);
            let theta = params.get_mut(id);
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                theta[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + decay * theta[i]);
            }
        }
    }
}

/// Draw one training example from `data`.
pub fn draw_example(data: &[SceneData], cfg: &TrainConfig, rng: &mut Rng) -> Result<Example> {
    if data.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let scene = &data[rng.random_range(0..data.len())];
    let n = scene.views.len();
    if n < 2 {
        return Err(Error::Domain("training scenes need at least two views".into()));
    }
    let nc = rng.random_range(cfg.context_views[0]..=cfg.context_views[1]).min(n - 1);
    let nt = rng.random_range(cfg.target_views[0]..=cfg.target_views[1]).min(n - nc);
    let picks = index::sample(rng, n, nc + nt).into_vec();
    Ok(Example {
        context: picks[..nc].iter().map(|&i| scene.views[i].clone()).collect(),
        targets: picks[nc..].iter().map(|&i| scene.views[i].clone()).collect(),
    })
}

/// Batch-averaged result of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub parts: LossParts,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Forward/backward over one batch and an optimizer update. `step` is the
/// 1-based update index and keys every random draw, so a run is reproducible
/// from the step counter alone.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    data: &[SceneData],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    proxy: &PerceptualProxy,
    step: u64,
) -> Result<StepStats> {
    let mut g = model.params.zero_grads();
    let mut parts = LossParts::default();
    let mut total = 0.0;
    let inv = 1.0 / cfg.batch_size as f64;
    for b in 0..cfg.batch_size {
        let mut r = rng::stream(cfg.seed, &[rng::tag::TRAIN_STEP, step, b as u64]);
        let ex = draw_example(data, cfg, &mut r)?;
        let n: usize = ex.targets.iter().map(|t| model.target_token_count(&t.pose)).sum();
        let mask = sample_mask(n, &mut r, cfg.mask_ratio_min);
        let out = model.loss(&ex, &mask, &mut r, loss_cfg, proxy, None, Some(&mut g))?;
        total += out.total * inv;
        parts.l2 += out.parts.l2 * inv;
        parts.perc += out.parts.perc * inv;
        parts.diff += out.parts.diff * inv;
        parts.conf += out.parts.conf * inv;
    }
    let lr = lr_at(cfg, step);
    let mut stats = StepStats {
        step,
        lr,
        loss: total,
        parts,
        grad_norm: f64::NAN,
        skipped: false,
    };
    if !total.is_finite() || !g.is_finite() {
        stats.skipped = true;
        return Ok(stats);
    }
    g.scale(inv);
    stats.grad_norm = clip_global_norm(&mut g, cfg.grad_clip_norm);
    opt.step(&mut model.params, &g, lr, cfg);
    Ok(stats)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Configuration echoed into every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Completed updates. All training randomness is derived from
    /// `(config.train.seed, step)`, so this is the full generator state.
    pub step: u64,
    pub config: CheckpointConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Parameters plus optimizer moments. On disk: a little-endian `u64` header
/// length, the JSON header, then raw little-endian `f64` data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f64>>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

impl Checkpoint {
    pub fn capture(model: &Model, opt: &AdamW, step: u64, train: &TrainConfig, loss: &LossConfig) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: &[usize], values: &[f64]| {
            tensors.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                dtype: "f64".into(),
                offset,
            });
            offset += values.len() * 8;
            data.push(values.to_vec());
        };
        for (name, t) in model.params.iter() {
            push(name.to_string(), &t.shape, &t.data);
        }
        for (prefix, moments) in [(ADAM_M, &opt.m), (ADAM_V, &opt.v)] {
            for ((name, t), slot) in model.params.iter().zip(&moments.slots) {
                push(format!("{prefix}{name}"), &t.shape, slot);
            }
        }
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                step,
                config: CheckpointConfig {
                    model: model.config.clone(),
                    train: train.clone(),
                    loss: loss.clone(),
                },
                tensors,
            },
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serialises");
        let mut out = Vec::with_capacity(8 + header.len() + self.data.iter().map(|d| d.len() * 8).sum::<usize>());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for d in &self.data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |m: String| Error::format(path, m);
        if bytes.len() < 8 {
            return Err(fail("truncated checkpoint".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| fail("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| fail(e.to_string()))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {}", header.format_version)));
        }
        let raw = &bytes[8 + hlen..];
        let mut data = Vec::with_capacity(header.tensors.len());
        let mut expected = 0;
        for t in &header.tensors {
            if t.dtype != "f64" || t.offset != expected {
                return Err(fail(format!("bad entry for tensor {}", t.name)));
            }
            let len: usize = t.shape.iter().product();
            let chunk = raw
                .get(t.offset..t.offset + len * 8)
                .ok_or_else(|| fail(format!("data for {} out of bounds", t.name)))?;
            data.push(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
            expected += len * 8;
        }
        if expected != raw.len() {
            return Err(fail(format!("{} trailing bytes", raw.len() - expected)));
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuild the model and optimizer state.
    pub fn restore(&self) -> Result<(Model, AdamW)> {
        let mut model = Model::new(self.header.config.model.clone(), 0)?;
        let mut opt = AdamW::new(&model.params);
        let n = model.params.len();
        if self.header.tensors.len() != 3 * n {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.header.tensors.len(),
                3 * n
            )));
        }
        for (entry, values) in self.header.tensors.iter().zip(&self.data) {
            let tensor = Tensor {
                shape: entry.shape.clone(),
                data: values.clone(),
            };
            let (target, name) = if let Some(name) = entry.name.strip_prefix(ADAM_M) {
                (Some(&mut opt.m), name)
            } else if let Some(name) = entry.name.strip_prefix(ADAM_V) {
                (Some(&mut opt.v), name)
            } else {
                (None, entry.name.as_str())
            };
            match target {
                None => model.params.set(name, tensor).map_err(Error::Config)?,
                Some(moments) => {
                    let id = model
                        .params
                        .id(name)
                        .ok_or_else(|| Error::Config(format!("unknown parameter {name} in checkpoint")))?;
                    if model.params.tensor(id).shape != entry.shape {
                        return Err(Error::Config(format!("moment shape mismatch for {name}")));
                    }
                    moments.slots[id.index()] = tensor.data;
                }
            }
        }
        opt.t = self.header.step;
        Ok((model, opt))
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}

/// Most recent `ckpt_*.bin` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best = None;
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with("ckpt_") && name.ends_with(".bin") && best.as_ref().is_none_or(|b: &PathBuf| p > *b) {
            best = Some(p);
        }
    }
    Ok(best)
}

pub const LOG_HEADER: &str = "step,lr,loss,l2,perc,diff,conf,grad_norm,skipped";

fn log_row(s: &StepStats) -> String {
    format!(
        "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
        s.step,
        s.lr,
        s.loss,
        s.parts.l2,
        s.parts.perc,
        s.parts.diff,
        s.parts.conf,
        s.grad_norm,
        u8::from(s.skipped)
    )
}

/// Run updates until `cfg.total_steps`, starting after `model`/`opt`'s
/// current step, logging to `train_log.csv` and checkpointing into `out`.
/// `on_step` may stop early.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut Model,
    opt: &mut AdamW,
    data: &[SceneData],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out: Option<&Path>,
    mut on_step: impl FnMut(&Model, &StepStats) -> ControlFlow<()>,
) -> Result<u64> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let proxy = PerceptualProxy::new(loss_cfg.perceptual_seed);
    let mut log = match &out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let fresh = opt.t == 0;
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((w, path))
        }
        None => None,
    };
    let mut failures = 0;
    let mut step = opt.t;
    let save = |model: &Model, opt: &AdamW, step: u64| -> Result<()> {
        if let Some(dir) = out {
            Checkpoint::capture(model, opt, step, cfg, loss_cfg).save(&checkpoint_path(dir, step))?;
        }
        Ok(())
    };
    while step < cfg.total_steps {
        let stats = train_step(model, opt, data, cfg, loss_cfg, &proxy, step + 1)?;
        // skipped steps still consume their step index so later draws do not shift
        step += 1;
        if stats.skipped {
            // keep the optimizer clock in line with the step counter
            opt.t = step;
            failures += 1;
            log::warn!("step {step}: non-finite loss or gradient, update skipped");
            if failures >= cfg.max_consecutive_failures {
                return Err(Error::Numeric(format!("{failures} consecutive non-finite steps (last: {step})")));
            }
        } else {
            failures = 0;
        }
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", log_row(&stats)).map_err(|e| Error::io(&*path, e))?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some((w, path)) = log.as_mut() {
                w.flush().map_err(|e| Error::io(&*path, e))?;
            }
            save(model, opt, step)?;
        }
        if on_step(model, &stats).is_break() {
            break;
        }
    }
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }
    if cfg.checkpoint_every == 0 || step % cfg.checkpoint_every != 0 {
        save(model, opt, step)?;
    }
    Ok(step)
}
