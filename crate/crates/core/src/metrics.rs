//! Image metrics and the evaluation / ablation harness.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{SceneData, Split};
use crate::error::{domain, Error, Result};
use crate::imaging::{Image, PosedImage};
use crate::losses::PerceptualProxy;
use crate::model::Model;
use crate::rng;
use crate::sampler::{hybrid_sample, SamplerConfig};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(domain!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width,
            a.height,
            b.width,
            b.height
        ));
    }
    Ok(())
}

/// `10·log10(1/MSE)` on `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// BT.601 luma.
pub fn luminance(img: &Image) -> Vec<f64> {
    img.data.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w × h` plane.
fn filter(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM of the luma planes over every fully contained 11×11
/// Gaussian window (σ = 1.5).
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(domain!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x = luminance(pred);
    let y = luminance(gt);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = filter(&x, w, h, &taps);
    let (my, _, _) = filter(&y, w, h, &taps);
    let (sxx, _, _) = filter(&xx, w, h, &taps);
    let (syy, _, _) = filter(&yy, w, h, &taps);
    let (sxy, _, _) = filter(&xy, w, h, &taps);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cxy = sxy[i] - a * b;
        total += ((2.0 * a * b + C1) * (2.0 * cxy + C2)) / ((a * a + b * b + C1) * (vx + vy + C2));
    }
    Ok(total / n as f64)
}

/// Scores of one synthesised target view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub scene: usize,
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Frozen-feature perceptual proxy distance (not LPIPS).
    pub perceptual_proxy: f64,
    pub backbone_calls: usize,
    pub deterministic_tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual_proxy: f64,
    pub backbone_calls: f64,
    pub deterministic_tokens: f64,
}

impl Means {
    pub fn of(rows: &[ImageScore]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ImageScore) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            psnr: mean(&|r| r.psnr),
            ssim: mean(&|r| r.ssim),
            perceptual_proxy: mean(&|r| r.perceptual_proxy),
            backbone_calls: mean(&|r| r.backbone_calls as f64),
            deterministic_tokens: mean(&|r| r.deterministic_tokens as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub means: Means,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub n_context: usize,
    pub means: Means,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub tau: f64,
    pub n_context: usize,
    pub images: Vec<ImageScore>,
    pub means: Means,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tau_rows: Vec<TauRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context_rows: Vec<ContextRow>,
}

/// Context views used for `target` when `n_context` views are requested:
/// the scene's designated context views first, then the remaining views in
/// index order, never the target itself.
pub fn context_for(scene: &SceneData, target: usize, n_context: usize) -> Result<Vec<PosedImage>> {
    let n = scene.views.len();
    if n_context == 0 || n_context >= n {
        return Err(domain!("need 1..{} context views, got {n_context}", n - 1));
    }
    let designated = &scene.manifest.splits.context;
    let order = designated
        .iter()
        .copied()
        .chain((0..n).filter(|i| !designated.contains(i)))
        .filter(|&i| i != target);
    Ok(order.take(n_context).map(|i| scene.views[i].clone()).collect())
}

/// Synthesise every `split` target of every scene and score it. Wall-clock
/// seconds per image are returned separately so the report stays
/// reproducible.
pub fn evaluate(
    model: &Model,
    scenes: &[SceneData],
    split: Split,
    n_context: usize,
    cfg: &SamplerConfig,
) -> Result<(EvalReport, Vec<f64>)> {
    let proxy = PerceptualProxy::new(0);
    let mut images = Vec::new();
    let mut times = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        for &v in scene.manifest.splits.targets(split) {
            let target = scene.view(v)?;
            let context = context_for(scene, v, n_context)?;
            let run_cfg = SamplerConfig {
                seed: rng::derive_seed(cfg.seed, &[rng::tag::EVAL, s as u64, v as u64]),
                ..cfg.clone()
            };
            let start = Instant::now();
            let (img, trace) = hybrid_sample(model, &context, &target.pose, &run_cfg)?;
            times.push(start.elapsed().as_secs_f64());
            images.push(ImageScore {
                scene: s,
                view: v,
                psnr: psnr(&img, &target.image)?,
                ssim: ssim(&img, &target.image)?,
                perceptual_proxy: proxy.distance(&img, &target.image)?,
                backbone_calls: trace.backbone_calls,
                deterministic_tokens: trace.deterministic_token_count,
            });
        }
    }
    if images.is_empty() {
        return Err(Error::Domain(format!("no {split:?} targets in the evaluation set")));
    }
    let means = Means::of(&images);
    Ok((
        EvalReport {
            split,
            tau: cfg.tau,
            n_context,
            images,
            means,
            tau_rows: Vec::new(),
            context_rows: Vec::new(),
        },
        times,
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// One evaluation per threshold. Returns the rows and the mean seconds per
/// image for each.
pub fn ablate_tau(
    model: &Model,
    scenes: &[SceneData],
    split: Split,
    n_context: usize,
    taus: &[f64],
    cfg: &SamplerConfig,
) -> Result<(Vec<TauRow>, Vec<f64>)> {
    let mut rows = Vec::with_capacity(taus.len());
    let mut times = Vec::with_capacity(taus.len());
    for &tau in taus {
        let c = SamplerConfig { tau, ..cfg.clone() };
        c.validate()?;
        let (r, t) = evaluate(model, scenes, split, n_context, &c)?;
        rows.push(TauRow { tau, means: r.means });
        times.push(mean(&t));
    }
    Ok((rows, times))
}

pub fn ablate_context(
    model: &Model,
    scenes: &[SceneData],
    split: Split,
    counts: &[usize],
    cfg: &SamplerConfig,
) -> Result<(Vec<ContextRow>, Vec<f64>)> {
    let mut rows = Vec::with_capacity(counts.len());
    let mut times = Vec::with_capacity(counts.len());
    for &n_context in counts {
        let (r, t) = evaluate(model, scenes, split, n_context, cfg)?;
        rows.push(ContextRow {
            n_context,
            means: r.means,
        });
        times.push(mean(&t));
    }
    Ok((rows, times))
}

pub fn tau_csv(rows: &[TauRow]) -> String {
    let mut s = String::from("tau,backbone_calls,deterministic_tokens,psnr,ssim,perceptual_proxy\n");
    for r in rows {
        let m = &r.means;
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.6},{:.6}",
            r.tau, m.backbone_calls, m.deterministic_tokens, m.psnr, m.ssim, m.perceptual_proxy
        );
    }
    s
}

pub fn context_csv(rows: &[ContextRow]) -> String {
    let mut s = String::from("n_context,deterministic_tokens,backbone_calls,psnr,ssim,perceptual_proxy\n");
    for r in rows {
        let m = &r.means;
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.6},{:.6}",
            r.n_context, m.deterministic_tokens, m.backbone_calls, m.psnr, m.ssim, m.perceptual_proxy
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_identity_and_extremes() {
        let a = Image::filled(4, 4, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = Image::filled(4, 4, [0.0; 3]);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&z, &Image::filled(5, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_identity_and_size_guard() {
        let mut a = Image::new(16, 16);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f64 / 100.0;
        }
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&Image::new(8, 8), &Image::new(8, 8)).is_err());
    }

    #[test]
    fn taps_sum_to_one() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }
}
