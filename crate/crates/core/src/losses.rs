//! Training objectives: photometric render loss, confidence loss, weighted
//! diffusion loss and their weighted sum.
//!
//! Image-space terms work on `[0, 1]` pixel values. Each `*_grad` variant
//! returns the loss together with its gradient w.r.t. the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::imaging::Image;
use crate::rng::{self, Rng};
use crate::tensor::{gemm, silu, silu_grad, Mat, View};
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Perceptual weight inside the standalone render loss.
    pub lambda_p: f64,
    /// Confidence regulariser weight.
    pub lambda_s: f64,
    /// Floor of the confidence-derived diffusion weighting.
    pub lambda_d: f64,
    pub w_l2: f64,
    pub w_perc: f64,
    pub w_diff: f64,
    pub w_conf: f64,
    /// Independent `(ε, t)` draws per masked token per step.
    pub diffusion_draws: usize,
    pub perceptual_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_p: 0.5,
            lambda_s: 0.1,
            lambda_d: 0.25,
            w_l2: 1.0,
            w_perc: 0.5,
            w_diff: 10.0,
            w_conf: 1.0,
            diffusion_draws: 1,
            perceptual_seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_p, self.lambda_s, self.w_l2, self.w_perc, self.w_diff, self.w_conf];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.lambda_d > 0.0 && self.lambda_d <= 1.0) {
            return Err(Error::Config("lambda_d must lie in (0, 1]".into()));
        }
        if self.diffusion_draws == 0 {
            return Err(Error::Config("diffusion_draws must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l2: f64,
    pub perc: f64,
    pub diff: f64,
    pub conf: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.l2.is_finite() && self.perc.is_finite() && self.diff.is_finite() && self.conf.is_finite()
    }
}

pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    cfg.w_l2 * parts.l2 + cfg.w_perc * parts.perc + cfg.w_diff * parts.diff + cfg.w_conf * parts.conf
}

fn check_shape(pred: &Image, gt: &Image) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(domain!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width,
            pred.height,
            gt.width,
            gt.height
        ));
    }
    Ok(())
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(mse_grad(pred, gt)?.0)
}

pub fn mse_grad(pred: &Image, gt: &Image) -> Result<(f64, Vec<f64>)> {
    check_shape(pred, gt)?;
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| {
            let e = p - g;
            loss += e * e;
            2.0 * e / n
        })
        .collect();
    Ok((loss / n, grad))
}

// ---------------------------------------------------------------------------
// perceptual proxy

/// 3×3 convolution with zero padding 1.
#[derive(Clone, Debug)]
struct Conv {
    c_in: usize,
    c_out: usize,
    stride: usize,
    /// `[c_out][c_in][3][3]`
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Pixel-major feature map: `data[(y·W + x)·C + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

impl Conv {
    fn out_size(&self, n: usize) -> usize {
        (n - 1) / self.stride + 1
    }

    fn taps(&self) -> usize {
        self.c_in * 9
    }

    /// Calls `f(output pixel, tap, input index)` for every tap `(ci, ky, kx)`
    /// that lands inside the input; padded taps are skipped.
    fn for_each_tap(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        for oy in 0..ho {
            for ox in 0..wo {
                let o = oy * wo + ox;
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (iy as usize * w + ix as usize) * self.c_in;
                        for ci in 0..self.c_in {
                            f(o, ci * 9 + ky * 3 + kx, base + ci);
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (ho, wo) = (self.out_size(x.height), self.out_size(x.width));
        let taps = self.taps();
        let mut cols = vec![0.0; ho * wo * taps];
        self.for_each_tap(x.height, x.width, |o, t, i| cols[o * taps + t] = x.data[i]);
        let mut y = FeatureMap::zeros(self.c_out, ho, wo);
        for px in y.data.chunks_mut(self.c_out) {
            px.copy_from_slice(&self.b);
        }
        gemm(
            ho * wo,
            taps,
            self.c_out,
            1.0,
            View::raw(&cols, taps),
            View::raw(&self.w, taps).t(),
            1.0,
            &mut y.data,
            self.c_out,
        );
        y
    }

    /// Gradient w.r.t. the input given the gradient w.r.t. the output.
    fn backward_input(&self, x_shape: (usize, usize), dy: &FeatureMap) -> FeatureMap {
        let (h, w) = x_shape;
        let taps = self.taps();
        let mut dcols = vec![0.0; dy.height * dy.width * taps];
        gemm(
            dy.height * dy.width,
            self.c_out,
            taps,
            1.0,
            View::raw(&dy.data, self.c_out),
            View::raw(&self.w, taps),
            0.0,
            &mut dcols,
            taps,
        );
        let mut dx = FeatureMap::zeros(self.c_in, h, w);
        self.for_each_tap(h, w, |o, t, i| dx.data[i] += dcols[o * taps + t]);
        dx
    }
}

/// Frozen, randomly initialised three-level convolutional pyramid used as a
/// stand-in for a pretrained feature extractor. Features are SiLU activations
/// after each level; the distance is the mean over levels of the feature MSE.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    convs: Vec<Conv>,
}

struct ProxyTrace {
    pre: Vec<FeatureMap>,
    feats: Vec<FeatureMap>,
}

impl PerceptualProxy {
    pub const LEVELS: [(usize, usize, usize); 3] = [(3, 8, 1), (8, 16, 2), (16, 32, 2)];

    pub fn new(seed: u64) -> Self {
        let mut rng: Rng = rng::stream(seed, &[rng::tag::PERCEPTUAL]);
        let convs = Self::LEVELS
            .iter()
            .map(|&(c_in, c_out, stride)| {
                let std = (1.0 / (9 * c_in) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                Conv {
                    c_in,
                    c_out,
                    stride,
                    w: (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng)).collect(),
                    b: (0..c_out).map(|_| normal.sample(&mut rng) * 0.1).collect(),
                }
            })
            .collect();
        Self { convs }
    }

    /// Weights `[c_out][c_in][3][3]` and biases of one pyramid level.
    pub fn kernel(&self, level: usize) -> (&[f64], &[f64]) {
        let c = &self.convs[level];
        (&c.w, &c.b)
    }

    /// Image as a centred feature map.
    pub fn input_map(img: &Image) -> FeatureMap {
        FeatureMap {
            channels: 3,
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|v| v - 0.5).collect(),
        }
    }

    fn trace(&self, img: &Image) -> ProxyTrace {
        let mut x = Self::input_map(img);
        let mut pre = Vec::new();
        let mut feats = Vec::new();
        for conv in &self.convs {
            let a = conv.forward(&x);
            let mut f = a.clone();
            f.data.iter_mut().for_each(|v| *v = silu(*v));
            pre.push(a);
            feats.push(f.clone());
            x = f;
        }
        ProxyTrace { pre, feats }
    }

    pub fn features(&self, img: &Image) -> Vec<FeatureMap> {
        self.trace(img).feats
    }

    pub fn distance(&self, pred: &Image, gt: &Image) -> Result<f64> {
        check_shape(pred, gt)?;
        Ok(self.distance_to(pred, &self.features(gt)))
    }

    /// Distance to precomputed reference features.
    pub fn distance_to(&self, pred: &Image, gt_features: &[FeatureMap]) -> f64 {
        feature_distance(&self.features(pred), gt_features)
    }

    pub fn distance_grad(&self, pred: &Image, gt: &Image) -> Result<(f64, Vec<f64>)> {
        check_shape(pred, gt)?;
        Ok(self.distance_grad_to(pred, &self.features(gt)))
    }

    pub fn distance_grad_to(&self, pred: &Image, fg: &[FeatureMap]) -> (f64, Vec<f64>) {
        let tp = self.trace(pred);
        let loss = feature_distance(&tp.feats, fg);
        let levels = self.convs.len() as f64;
        let mut carry: Option<FeatureMap> = None;
        for l in (0..self.convs.len()).rev() {
            let f = &tp.feats[l];
            let n = f.data.len() as f64;
            let mut df = carry.take().unwrap_or_else(|| FeatureMap::zeros(f.channels, f.height, f.width));
            for ((d, a), b) in df.data.iter_mut().zip(&f.data).zip(&fg[l].data) {
                *d += 2.0 * (a - b) / (n * levels);
            }
            for (d, &a) in df.data.iter_mut().zip(&tp.pre[l].data) {
                *d *= silu_grad(a);
            }
            let in_shape = if l == 0 {
                (pred.height, pred.width)
            } else {
                (tp.feats[l - 1].height, tp.feats[l - 1].width)
            };
            carry = Some(self.convs[l].backward_input(in_shape, &df));
        }
        (loss, carry.expect("at least one level").data)
    }
}

fn feature_distance(a: &[FeatureMap], b: &[FeatureMap]) -> f64 {
    let per_level: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            x.data.iter().zip(&y.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.data.len() as f64
        })
        .sum();
    per_level / a.len() as f64
}

/// `MSE(pred, gt) + λ_p · Perceptual(pred, gt)` over whole images.
pub fn render_loss(pred: &Image, gt: &Image, lambda_p: f64, proxy: &PerceptualProxy) -> Result<f64> {
    Ok(mse(pred, gt)? + lambda_p * proxy.distance(pred, gt)?)
}

// ---------------------------------------------------------------------------
// confidence loss

/// Mean over masked pixels of `s·‖Î−I‖² − λ_s·log s`.
///
/// `pred`/`gt` hold interleaved RGB for `conf.len()` pixels. Returns the loss
/// and gradients w.r.t. `pred` and `conf`. An empty mask yields zero.
pub fn confidence_loss_grad(
    pred: &[f64],
    gt: &[f64],
    conf: &[f64],
    mask: &[bool],
    lambda_s: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = conf.len();
    if pred.len() != 3 * n || gt.len() != 3 * n || mask.len() != n {
        return Err(domain!("confidence loss inputs disagree in size"));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut dpred = vec![0.0; 3 * n];
    let mut dconf = vec![0.0; n];
    if count == 0 {
        return Ok((0.0, dpred, dconf));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let s = conf[i];
        if !(s > 0.0) {
            return Err(Error::Numeric(format!("confidence {s} at pixel {i} is not positive")));
        }
        let mut e2 = 0.0;
        for c in 0..3 {
            let e = pred[3 * i + c] - gt[3 * i + c];
            e2 += e * e;
            dpred[3 * i + c] = 2.0 * s * e * inv;
        }
        loss += s * e2 - lambda_s * s.ln();
        dconf[i] = (e2 - lambda_s / s) * inv;
    }
    Ok((loss * inv, dpred, dconf))
}

pub fn confidence_loss(pred: &[f64], gt: &[f64], conf: &[f64], mask: &[bool], lambda_s: f64) -> Result<f64> {
    Ok(confidence_loss_grad(pred, gt, conf, mask, lambda_s)?.0)
}

/// Minimiser of `s·e² − λ_s·log s` over `s ∈ (0, 1]`.
pub fn optimal_confidence(e2: f64, lambda_s: f64) -> f64 {
    if e2 <= 0.0 { 1.0 } else { (lambda_s / e2).min(1.0) }
}

// ---------------------------------------------------------------------------
// diffusion loss

/// `max(s, λ_d) / λ_d`
pub fn diffusion_weight(score: f64, lambda_d: f64) -> f64 {
    score.max(lambda_d) / lambda_d
}

/// Weighted mean over rows of `w_i · mean_j (ε_ij − ε̂_ij)²`.
///
/// Returns the loss and its gradient w.r.t. `eps_hat`. The weights are
/// constants. No rows gives zero.
pub fn weighted_diffusion_loss(eps: &Mat, eps_hat: &Mat, weights: &[f64]) -> Result<(f64, Mat)> {
    if eps.rows != eps_hat.rows || eps.cols != eps_hat.cols || weights.len() != eps.rows {
        return Err(domain!("diffusion loss inputs disagree in size"));
    }
    let mut grad = Mat::zeros(eps.rows, eps.cols);
    if eps.rows == 0 {
        log::warn!("diffusion loss evaluated on an empty mask");
        return Ok((0.0, grad));
    }
    let n = eps.rows as f64;
    let d = eps.cols as f64;
    let mut loss = 0.0;
    for r in 0..eps.rows {
        let w = weights[r];
        let mut acc = 0.0;
        for ((g, a), b) in grad.row_mut(r).iter_mut().zip(eps_hat.row(r)).zip(eps.row(r)) {
            let e = a - b;
            acc += e * e;
            *g = 2.0 * w * e / (d * n);
        }
        loss += w * acc / d;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut r = rng::stream(seed, &[]);
        Image::from_vec(w, h, (0..w * h * 3).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn render_loss_identity_and_offset() {
        let proxy = PerceptualProxy::new(0);
        let gt = random_image(8, 8, 1);
        assert_eq!(render_loss(&gt, &gt, 0.5, &proxy).unwrap(), 0.0);
        let mut gt2 = gt.clone();
        gt2.data.iter_mut().for_each(|v| *v *= 0.8);
        let mut pred = gt2.clone();
        pred.data.iter_mut().for_each(|v| *v += 0.1);
        let l = render_loss(&pred, &gt2, 0.0, &proxy).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_domain_error() {
        let proxy = PerceptualProxy::new(0);
        let r = render_loss(&random_image(8, 8, 1), &random_image(4, 8, 1), 0.5, &proxy);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn perceptual_gradient_matches_differences() {
        let proxy = PerceptualProxy::new(3);
        let gt = random_image(6, 5, 1);
        let pred = random_image(6, 5, 2);
        let (_, g) = proxy.distance_grad(&pred, &gt).unwrap();
        let h = 1e-5;
        for i in (0..pred.data.len()).step_by(7) {
            let mut p = pred.clone();
            p.data[i] += h;
            let lp = proxy.distance(&p, &gt).unwrap();
            p.data[i] -= 2.0 * h;
            let lm = proxy.distance(&p, &gt).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1e-4), "{i}: {fd} {}", g[i]);
        }
    }

    /// Direct nested-loop convolution pyramid, independent of the im2col path.
    fn brute_features(proxy: &PerceptualProxy, img: &Image) -> Vec<Vec<f64>> {
        let (mut h, mut w, mut c) = (img.height, img.width, 3);
        let mut x: Vec<f64> = img.data.iter().map(|v| v - 0.5).collect();
        let mut out = Vec::new();
        for conv in &proxy.convs {
            let s = conv.stride;
            let (ho, wo) = ((h + s - 1) / s, (w + s - 1) / s);
            let mut y = vec![0.0; ho * wo * conv.c_out];
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..conv.c_out {
                        let mut acc = conv.b[co];
                        for ci in 0..c {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let iy = (oy * s) as i64 + ky - 1;
                                    let ix = (ox * s) as i64 + kx - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        let wv = conv.w[((co * c + ci) * 3 + ky as usize) * 3 + kx as usize];
                                        acc += wv * x[(iy as usize * w + ix as usize) * c + ci];
                                    }
                                }
                            }
                        }
                        y[(oy * wo + ox) * conv.c_out + co] = acc * (1.0 / (1.0 + (-acc).exp()));
                    }
                }
            }
            out.push(y.clone());
            x = y;
            h = ho;
            w = wo;
            c = conv.c_out;
        }
        out
    }

    #[test]
    fn perceptual_proxy_matches_brute_force() {
        let proxy = PerceptualProxy::new(5);
        let a = random_image(9, 7, 1);
        let b = random_image(9, 7, 2);
        let (fa, fb) = (brute_features(&proxy, &a), brute_features(&proxy, &b));
        let brute: f64 = fa
            .iter()
            .zip(&fb)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64)
            .sum::<f64>()
            / 3.0;
        let fast = proxy.distance(&a, &b).unwrap();
        assert!((fast - brute).abs() < 1e-12, "{fast} {brute}");
        for (f, g) in proxy.features(&a).iter().zip(&fa) {
            for (p, q) in f.data.iter().zip(g) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn confidence_one_reduces_to_masked_error() {
        let pred = [0.1, 0.2, 0.3, 0.5, 0.5, 0.5];
        let gt = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let l = confidence_loss(&pred, &gt, &[1.0, 1.0], &[true, false], 0.1).unwrap();
        assert!((l - (0.01 + 0.04 + 0.09)).abs() < 1e-15);
    }

    #[test]
    fn confidence_must_be_positive() {
        let r = confidence_loss(&[0.0; 3], &[0.0; 3], &[0.0], &[true], 0.1);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn diffusion_weights() {
        assert_eq!(diffusion_weight(0.25, 0.25), 1.0);
        assert_eq!(diffusion_weight(0.1, 0.25), 1.0);
        assert_eq!(diffusion_weight(1.0, 0.25), 4.0);
    }

    #[test]
    fn table_weights_sum() {
        let parts = LossParts {
            l2: 1.0,
            perc: 1.0,
            diff: 1.0,
            conf: 1.0,
        };
        assert_eq!(total_loss(&parts, &LossConfig::default()), 12.5);
        assert_eq!(total_loss(&LossParts::default(), &LossConfig::default()), 0.0);
    }

    #[test]
    fn empty_diffusion_batch_is_zero() {
        let (l, g) = weighted_diffusion_loss(&Mat::zeros(0, 4), &Mat::zeros(0, 4), &[]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.rows, 0);
    }
}
