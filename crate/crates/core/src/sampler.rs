//! Hybrid inference: one deterministic pass fills every confident token, the
//! rest are revealed over a cosine schedule by per-token diffusion sampling.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_tokens, ChainParams, NoiseSchedule};
use crate::error::{domain, Error, Result};
use crate::geometry::CameraPose;
use crate::imaging::{Image, PosedImage};
use crate::model::Model;
use crate::patch_codec::{detokenize, rgb_dim, CHANNELS, RGB};
use crate::rng;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Confidence threshold; tokens with score `>= tau` are deterministic.
    pub tau: f64,
    pub t_max: usize,
    pub cfg_scale: f64,
    pub temperature: f64,
    /// Reverse diffusion steps per token.
    pub sample_steps: usize,
    pub seed: u64,
    pub max_targets: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            t_max: 32,
            cfg_scale: 2.0,
            temperature: 0.9,
            sample_steps: 50,
            seed: 0,
            max_targets: 3,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if self.sample_steps == 0 {
            return Err(Error::Config("sample_steps must be at least 1".into()));
        }
        if !self.cfg_scale.is_finite() || !(self.temperature >= 0.0) {
            return Err(Error::Config("cfg_scale must be finite and temperature non-negative".into()));
        }
        if self.max_targets == 0 {
            return Err(Error::Config("max_targets must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where a target token's final content came from.
pub const FROM_DETERMINISTIC: i64 = -1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrace {
    pub backbone_calls: usize,
    pub deterministic_token_count: usize,
    pub stochastic_token_count: usize,
    pub step_budget: usize,
    pub unmask_counts: Vec<usize>,
    /// Per target token: [`FROM_DETERMINISTIC`] or the unmasking step index.
    pub token_source: Vec<i64>,
    /// First-pass patch scores.
    pub patch_scores: Vec<f64>,
    pub target_lengths: Vec<usize>,
    pub seed: u64,
    pub tau: f64,
    /// Number of times each target token was written.
    #[serde(skip)]
    pub write_counts: Vec<u32>,
    /// Wall-clock seconds; kept out of serialised traces so they stay
    /// reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

/// `⌈n_stochastic / n_total · t_max⌉` in exact integer arithmetic.
pub fn step_budget(n_stochastic: usize, n_total: usize, t_max: usize) -> usize {
    assert!(n_total > 0 && n_stochastic <= n_total, "step_budget precondition");
    (n_stochastic * t_max).div_ceil(n_total)
}

/// Tokens revealed at each of `t_s` steps: the cumulative count after step
/// `k` is `n − ⌊n·cos(πk / 2t_s)⌋`, and the last step takes whatever is left.
pub fn cosine_unmask_counts(n: usize, t_s: usize) -> Vec<usize> {
    assert!(n >= 1 && t_s >= 1, "cosine_unmask_counts precondition");
    let mut counts = Vec::with_capacity(t_s);
    let mut prev = 0;
    for k in 1..=t_s {
        let cum = if k == t_s {
            n
        } else {
            let c = (n as f64 * (std::f64::consts::FRAC_PI_2 * k as f64 / t_s as f64).cos()).floor();
            (n - (c as usize).min(n)).max(prev)
        };
        counts.push(cum - prev);
        prev = cum;
    }
    counts
}

/// Sample one target view.
pub fn hybrid_sample(
    model: &Model,
    context: &[PosedImage],
    target: &CameraPose,
    cfg: &SamplerConfig,
) -> Result<(Image, SamplerTrace)> {
    let (mut images, trace) = multi_target_sample(model, context, std::slice::from_ref(target), cfg)?;
    Ok((images.remove(0), trace))
}

/// Sample several target views jointly: they share every backbone call, the
/// partition and step budget are computed over the pooled target tokens.
pub fn multi_target_sample(
    model: &Model,
    context: &[PosedImage],
    targets: &[CameraPose],
    cfg: &SamplerConfig,
) -> Result<(Vec<Image>, SamplerTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    if targets.is_empty() || targets.len() > cfg.max_targets {
        return Err(domain!("{} target views requested, allowed 1..={}", targets.len(), cfg.max_targets));
    }
    if context.is_empty() {
        return Err(domain!("at least one context view is required"));
    }
    let schedule = NoiseSchedule::new(&crate::diffusion::DiffusionConfig {
        sample_steps: cfg.sample_steps,
        ..model.config.diffusion.clone()
    })?;
    let p = model.patch_size();
    let d = rgb_dim(p);
    let pp = p * p;
    let mut target_seqs = Vec::with_capacity(targets.len());
    for pose in targets {
        let n = (pose.width() / p) * (pose.height() / p);
        target_seqs.push(model.target_tokens(pose, None, &vec![true; n])?);
    }
    let mut seq = model.build_sequence(context, &target_seqs)?;
    let ts = seq.target_start;
    let n = seq.num_targets();
    let mut trace = SamplerTrace {
        target_lengths: seq.target_lengths.clone(),
        seed: cfg.seed,
        tau: cfg.tau,
        token_source: vec![FROM_DETERMINISTIC; n],
        write_counts: vec![0; n],
        ..Default::default()
    };
    let write = |tokens: &mut Mat, i: usize, rgb: &[f64], counts: &mut [u32]| {
        let row = tokens.row_mut(ts + i);
        for k in 0..pp {
            row[k * CHANNELS..k * CHANNELS + RGB].copy_from_slice(&rgb[k * RGB..(k + 1) * RGB]);
        }
        counts[i] += 1;
    };

    // pass 1: confidence and the deterministic fill
    let z = model.infer(&seq)?;
    trace.backbone_calls += 1;
    let det = model.deterministic(&z)?;
    trace.patch_scores = det.patch_scores.clone();
    let mut remaining = Vec::new();
    for i in 0..n {
        if det.patch_scores[i] >= cfg.tau {
            write(&mut seq.tokens, i, det.rgb.row(i), &mut trace.write_counts);
        } else {
            remaining.push(i);
        }
    }
    trace.stochastic_token_count = remaining.len();
    trace.deterministic_token_count = n - remaining.len();
    trace.step_budget = step_budget(remaining.len(), n, cfg.t_max);
    if trace.step_budget > 0 {
        trace.unmask_counts = cosine_unmask_counts(remaining.len(), trace.step_budget);
    }

    // iterative diffusion unmasking
    let chain_seed = rng::derive_seed(cfg.seed, &[rng::tag::SAMPLER_TOKEN]);
    for (k, &count) in trace.unmask_counts.clone().iter().enumerate() {
        let z = model.infer(&seq)?;
        trace.backbone_calls += 1;
        if count == 0 {
            continue;
        }
        let mut sel_rng = rng::stream(cfg.seed, &[rng::tag::SAMPLER_SELECT, k as u64]);
        let mut picks: Vec<usize> = sample_indices(&mut sel_rng, remaining.len(), count).into_vec();
        picks.sort_unstable();
        let chosen: Vec<usize> = picks.iter().map(|&j| remaining[j]).collect();
        for &j in picks.iter().rev() {
            remaining.remove(j);
        }
        let zc = z.select_rows(&chosen);
        let head = model.diff_head();
        let mut denoise = |x: &Mat, t: usize, want_uncond: bool| -> Result<(Mat, Option<Mat>)> {
            let m = x.rows;
            if !want_uncond {
                let (e, _) = head.forward(&model.params, x, &vec![t; m], &zc, &vec![false; m])?;
                return Ok((e, None));
            }
            let xx = Mat::vstack(&[x, x]);
            let zz = Mat::vstack(&[&zc, &zc]);
            let flags: Vec<bool> = (0..2 * m).map(|r| r >= m).collect();
            let (e, _) = head.forward(&model.params, &xx, &vec![t; 2 * m], &zz, &flags)?;
            Ok((e.slice_rows(0, m), Some(e.slice_rows(m, 2 * m))))
        };
        let ids: Vec<u64> = chosen.iter().map(|&i| i as u64).collect();
        let params = ChainParams {
            cfg_scale: cfg.cfg_scale,
            temperature: cfg.temperature,
            seed: chain_seed,
        };
        let out = sample_tokens(&schedule, d, &ids, params, &mut denoise)?;
        for (r, &i) in chosen.iter().enumerate() {
            write(&mut seq.tokens, i, out.row(r), &mut trace.write_counts);
            trace.token_source[i] = k as i64;
        }
    }
    debug_assert!(remaining.is_empty());

    let mut images = Vec::with_capacity(targets.len());
    let mut offset = 0;
    for (pose, &len) in targets.iter().zip(&seq.target_lengths) {
        let rows = seq.tokens.slice_rows(ts + offset, ts + offset + len);
        images.push(detokenize(&rows, (pose.width(), pose.height()), p)?);
        offset += len;
    }
    trace.wall_time = start.elapsed().as_secs_f64();
    Ok((images, trace))
}

/// Two-colour map of which patches were filled deterministically (blue) and
/// which by diffusion (orange), for target view `view`.
pub fn partition_map(trace: &SamplerTrace, view: usize, resolution: (usize, usize), patch_size: usize) -> Result<Image> {
    let (w, h) = resolution;
    let offset: usize = trace.target_lengths.iter().take(view).sum();
    let len = *trace
        .target_lengths
        .get(view)
        .ok_or_else(|| domain!("trace has no target view {view}"))?;
    let cols = w / patch_size;
    if cols * (h / patch_size) != len {
        return Err(domain!("resolution does not match the traced token count"));
    }
    let mut img = Image::new(w, h);
    for t in 0..len {
        let colour = if trace.token_source[offset + t] == FROM_DETERMINISTIC {
            [0.2, 0.45, 0.9]
        } else {
            [0.95, 0.55, 0.1]
        };
        let (pr, pc) = (t / cols, t % cols);
        for y in 0..patch_size {
            for x in 0..patch_size {
                img.set_pixel(pc * patch_size + x, pr * patch_size + y, colour);
            }
        }
    }
    Ok(img)
}
