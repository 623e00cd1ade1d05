//! Per-token output heads.
//!
//! [`DetHead`] regresses the RGB content of a patch together with a per-pixel
//! confidence. [`DiffHead`] is the noise predictor `ε̂(x_t | t, z)`: an MLP of
//! residual blocks whose layer norms are modulated (shift, scale, gate) by the
//! sum of a timestep embedding and a projection of the token latent.
//! Both heads act on every token independently.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::nn::{layer_norm, layer_norm_backward, Linear};
use crate::params::{Grads, Init, ParamId, ParamSet};
use crate::patch_codec::rgb_dim;
use crate::rng::Rng;
use crate::tensor::{sigmoid, silu, silu_grad, Mat};

/// Lower clamp applied to predicted confidences.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden width of the deterministic head; 0 means `2 × hidden_dim`.
    pub det_width: usize,
    pub det_depth: usize,
    /// Hidden width of the diffusion head; 0 means `hidden_dim`.
    pub diff_width: usize,
    /// Number of modulated residual blocks in the diffusion head.
    pub diff_depth: usize,
    pub time_freq_dim: usize,
    /// Probability of replacing a latent by the null latent during training.
    pub cond_dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            det_width: 0,
            det_depth: 3,
            diff_width: 0,
            diff_depth: 3,
            time_freq_dim: 64,
            cond_dropout: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn det_width(&self, hidden: usize) -> usize {
        if self.det_width == 0 { 2 * hidden } else { self.det_width }
    }

    pub fn diff_width(&self, hidden: usize) -> usize {
        if self.diff_width == 0 { hidden } else { self.diff_width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_freq_dim < 2 || self.time_freq_dim % 2 != 0 {
            return Err(Error::Config("time_freq_dim must be even and >= 2".into()));
        }
        if self.det_depth == 0 {
            return Err(Error::Config("det_depth must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Closed-form scalar count of both heads plus the null latent.
    pub fn num_params(&self, hidden: usize, patch_size: usize) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let d = rgb_dim(patch_size);
        let pp = patch_size * patch_size;
        let dw = self.det_width(hidden);
        let det = lin(hidden, dw) + (self.det_depth - 1) * lin(dw, dw) + lin(dw, pp * 4);
        let w = self.diff_width(hidden);
        let diff = lin(d, w)
            + lin(self.time_freq_dim, w)
            + lin(w, w)
            + lin(hidden, w)
            + self.diff_depth * (lin(w, 3 * w) + 2 * lin(w, w))
            + lin(w, 2 * w)
            + lin(w, d);
        det + diff + hidden
    }
}

// ---------------------------------------------------------------------------
// deterministic head

#[derive(Clone, Debug)]
pub struct DetHead {
    layers: Vec<Linear>,
    out: Linear,
    patch_size: usize,
}

#[derive(Debug)]
pub struct DetOutput {
    /// `n × P²·3`, pixel-major RGB in `[-1, 1]`.
    pub rgb: Mat,
    /// `n × P²` per-pixel confidence in `[CONFIDENCE_FLOOR, 1]`.
    pub confidence: Mat,
    /// Per-token score: the minimum confidence over the patch's pixels.
    pub patch_scores: Vec<f64>,
    cache: DetCache,
}

#[derive(Debug)]
struct DetCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    last: Mat,
    conf_logits: Mat,
}

impl DetHead {
    pub fn new(ps: &mut ParamSet, cfg: &HeadConfig, hidden: usize, patch_size: usize, rng: &mut Rng) -> Self {
        let w = cfg.det_width(hidden);
        let mut layers = vec![Linear::new(ps, "head.det.fc0", hidden, w, true, rng)];
        for i in 1..cfg.det_depth {
            layers.push(Linear::new(ps, &format!("head.det.fc{i}"), w, w, true, rng));
        }
        let pp = patch_size * patch_size;
        let out = Linear::with_init(ps, "head.det.out", w, pp * 4, true, Init::Normal(0.02), rng);
        Self { layers, out, patch_size }
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    pub fn forward(&self, ps: &ParamSet, z: &Mat) -> Result<DetOutput> {
        if !z.is_finite() {
            return Err(Error::Numeric("deterministic head received non-finite latents".into()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = z.clone();
        for layer in &self.layers {
            let a = layer.forward(ps, &h);
            inputs.push(h);
            h = a.map(silu);
            pre.push(a);
        }
        let o = self.out.forward(ps, &h);
        let n = z.rows;
        let d = rgb_dim(self.patch_size);
        let pp = self.patch_size * self.patch_size;
        let mut rgb = Mat::zeros(n, d);
        let mut conf_logits = Mat::zeros(n, pp);
        let mut confidence = Mat::zeros(n, pp);
        let mut patch_scores = Vec::with_capacity(n);
        for r in 0..n {
            let row = o.row(r);
            for (dst, &src) in rgb.row_mut(r).iter_mut().zip(&row[..d]) {
                *dst = src.tanh();
            }
            conf_logits.row_mut(r).copy_from_slice(&row[d..]);
            let mut min = f64::INFINITY;
            for (dst, &l) in confidence.row_mut(r).iter_mut().zip(&row[d..]) {
                *dst = sigmoid(l).clamp(CONFIDENCE_FLOOR, 1.0);
                min = min.min(*dst);
            }
            patch_scores.push(min);
        }
        Ok(DetOutput {
            rgb,
            confidence,
            patch_scores,
            cache: DetCache {
                inputs,
                pre,
                last: h,
                conf_logits,
            },
        })
    }

    /// Backpropagate gradients w.r.t. the bounded RGB outputs and the clamped
    /// confidences; returns `dL/dz`.
    pub fn backward(&self, ps: &ParamSet, out: &DetOutput, d_rgb: &Mat, d_conf: &Mat, g: &mut Grads) -> Mat {
        let n = out.rgb.rows;
        let d = out.rgb.cols;
        let pp = out.confidence.cols;
        let mut d_o = Mat::zeros(n, d + pp);
        for r in 0..n {
            let row = d_o.row_mut(r);
            for j in 0..d {
                let y = out.rgb.get(r, j);
                row[j] = d_rgb.get(r, j) * (1.0 - y * y);
            }
            for j in 0..pp {
                let s = sigmoid(out.cache.conf_logits.get(r, j));
                // the clamp is flat below the floor
                row[d + j] = if s > CONFIDENCE_FLOOR { d_conf.get(r, j) * s * (1.0 - s) } else { 0.0 };
            }
        }
        let mut dh = self.out.backward(ps, &out.cache.last, &d_o, g);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            for (v, &a) in dh.data.iter_mut().zip(&out.cache.pre[i].data) {
                *v *= silu_grad(a);
            }
            dh = layer.backward(ps, &out.cache.inputs[i], &dh, g);
        }
        dh
    }
}

// ---------------------------------------------------------------------------
// diffusion head

/// Sinusoidal embedding of integer timesteps, `[cos(t·f_i) …, sin(t·f_i) …]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros(t.len(), dim);
    for (r, &tv) in t.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = tv as f64 * freq;
            row[i] = arg.cos();
            row[half + i] = arg.sin();
        }
    }
    out
}

#[derive(Clone, Debug)]
struct ResBlock {
    ada: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct DiffHead {
    input: Linear,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    blocks: Vec<ResBlock>,
    final_ada: Linear,
    final_out: Linear,
    null_latent: ParamId,
    width: usize,
    token_dim: usize,
    time_freq_dim: usize,
    num_timesteps: usize,
}

#[derive(Debug)]
struct BlockCache {
    mods: Mat,
    hn: Mat,
    inv: Vec<f64>,
    hm: Mat,
    a: Mat,
    aa: Mat,
    o: Mat,
}

#[derive(Debug)]
pub struct DiffCache {
    x_t: Mat,
    temb: Mat,
    t1: Mat,
    t1a: Mat,
    cond_in: Mat,
    null: Vec<bool>,
    c: Mat,
    sc: Mat,
    blocks: Vec<BlockCache>,
    fmods: Mat,
    fhn: Mat,
    finv: Vec<f64>,
    fhm: Mat,
}

fn modulate(hn: &Mat, mods: &Mat, shift_col: usize, scale_col: usize) -> Mat {
    let w = hn.cols;
    let mut out = Mat::zeros(hn.rows, w);
    for r in 0..hn.rows {
        let m = mods.row(r);
        for (j, (o, &x)) in out.row_mut(r).iter_mut().zip(hn.row(r)).enumerate() {
            *o = x * (1.0 + m[scale_col + j]) + m[shift_col + j];
        }
    }
    out
}

impl DiffHead {
    pub fn new(
        ps: &mut ParamSet,
        cfg: &HeadConfig,
        hidden: usize,
        patch_size: usize,
        num_timesteps: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = cfg.diff_width(hidden);
        let d = rgb_dim(patch_size);
        let input = Linear::new(ps, "head.diff.input", d, w, true, rng);
        let time1 = Linear::new(ps, "head.diff.time.fc1", cfg.time_freq_dim, w, true, rng);
        let time2 = Linear::new(ps, "head.diff.time.fc2", w, w, true, rng);
        let cond = Linear::new(ps, "head.diff.cond", hidden, w, true, rng);
        let blocks = (0..cfg.diff_depth)
            .map(|i| ResBlock {
                ada: Linear::with_init(ps, &format!("head.diff.block{i}.ada"), w, 3 * w, true, Init::Normal(0.02), rng),
                fc1: Linear::new(ps, &format!("head.diff.block{i}.fc1"), w, w, true, rng),
                fc2: Linear::new(ps, &format!("head.diff.block{i}.fc2"), w, w, true, rng),
            })
            .collect();
        let final_ada = Linear::with_init(ps, "head.diff.final.ada", w, 2 * w, true, Init::Normal(0.02), rng);
        let final_out = Linear::new(ps, "head.diff.final.out", w, d, true, rng);
        let null_latent = ps.add("head.null_latent", &[hidden], Init::Normal(0.02), rng);
        Self {
            input,
            time1,
            time2,
            cond,
            blocks,
            final_ada,
            final_out,
            null_latent,
            width: w,
            token_dim: d,
            time_freq_dim: cfg.time_freq_dim,
            num_timesteps,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn null_latent(&self) -> ParamId {
        self.null_latent
    }

    /// Predict the noise for a batch of tokens. Rows with `null[i]` set use
    /// the learned null latent instead of `z[i]`.
    pub fn forward(
        &self,
        ps: &ParamSet,
        x_t: &Mat,
        t: &[usize],
        z: &Mat,
        null: &[bool],
    ) -> Result<(Mat, DiffCache)> {
        let n = x_t.rows;
        if x_t.cols != self.token_dim {
            return Err(domain!("noisy token has {} values, expected {}", x_t.cols, self.token_dim));
        }
        if t.len() != n || z.rows != n || null.len() != n {
            return Err(domain!("diffusion head batch sizes disagree"));
        }
        if let Some(&bad) = t.iter().find(|&&v| v >= self.num_timesteps) {
            return Err(domain!("timestep {bad} outside [0, {})", self.num_timesteps));
        }
        if !z.is_finite() {
            return Err(Error::Numeric("diffusion head received non-finite latents".into()));
        }
        let mut cond_in = z.clone();
        let nl = ps.get(self.null_latent);
        for (r, &flag) in null.iter().enumerate() {
            if flag {
                cond_in.row_mut(r).copy_from_slice(nl);
            }
        }
        let temb = timestep_embedding(t, self.time_freq_dim);
        let t1 = self.time1.forward(ps, &temb);
        let t1a = t1.map(silu);
        let mut c = self.time2.forward(ps, &t1a);
        c.add_assign(&self.cond.forward(ps, &cond_in));
        let sc = c.map(silu);
        let w = self.width;
        let mut h = self.input.forward(ps, x_t);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mods = b.ada.forward(ps, &sc);
            let (hn, inv) = layer_norm(&h);
            let hm = modulate(&hn, &mods, 0, w);
            let a = b.fc1.forward(ps, &hm);
            let aa = a.map(silu);
            let o = b.fc2.forward(ps, &aa);
            let mut next = h;
            for r in 0..n {
                let gate = &mods.row(r)[2 * w..];
                for ((dst, &ov), &gv) in next.row_mut(r).iter_mut().zip(o.row(r)).zip(gate) {
                    *dst += gv * ov;
                }
            }
            blocks.push(BlockCache {
                mods,
                hn,
                inv,
                hm,
                a,
                aa,
                o,
            });
            h = next;
        }
        let fmods = self.final_ada.forward(ps, &sc);
        let (fhn, finv) = layer_norm(&h);
        let fhm = modulate(&fhn, &fmods, 0, w);
        let eps = self.final_out.forward(ps, &fhm);
        let cache = DiffCache {
            x_t: x_t.clone(),
            temb,
            t1,
            t1a,
            cond_in,
            null: null.to_vec(),
            c,
            sc,
            blocks,
            fmods,
            fhn,
            finv,
            fhm,
        };
        Ok((eps, cache))
    }

    /// Backpropagate `d_eps`; returns `dL/dz` (zero rows where the null latent
    /// was used; those gradients go to the null latent itself).
    pub fn backward(&self, ps: &ParamSet, cache: &DiffCache, d_eps: &Mat, g: &mut Grads) -> Mat {
        let n = d_eps.rows;
        let w = self.width;
        let dfhm = self.final_out.backward(ps, &cache.fhm, d_eps, g);
        let mut dfmods = Mat::zeros(n, 2 * w);
        let mut dfhn = Mat::zeros(n, w);
        for r in 0..n {
            let m = cache.fmods.row(r);
            for j in 0..w {
                let gv = dfhm.get(r, j);
                dfmods.data[r * 2 * w + j] = gv;
                dfmods.data[r * 2 * w + w + j] = gv * cache.fhn.get(r, j);
                dfhn.data[r * w + j] = gv * (1.0 + m[w + j]);
            }
        }
        let mut dsc = self.final_ada.backward(ps, &cache.sc, &dfmods, g);
        let mut dh = layer_norm_backward(&cache.fhn, &cache.finv, &dfhn);
        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut dmods = Mat::zeros(n, 3 * w);
            let mut d_o = Mat::zeros(n, w);
            for r in 0..n {
                let m = bc.mods.row(r);
                for j in 0..w {
                    let gv = dh.get(r, j);
                    dmods.data[r * 3 * w + 2 * w + j] = gv * bc.o.get(r, j);
                    d_o.data[r * w + j] = gv * m[2 * w + j];
                }
            }
            let mut da = b.fc2.backward(ps, &bc.aa, &d_o, g);
            for (v, &a) in da.data.iter_mut().zip(&bc.a.data) {
                *v *= silu_grad(a);
            }
            let dhm = b.fc1.backward(ps, &bc.hm, &da, g);
            let mut dhn = Mat::zeros(n, w);
            for r in 0..n {
                let m = bc.mods.row(r);
                for j in 0..w {
                    let gv = dhm.get(r, j);
                    dmods.data[r * 3 * w + j] = gv;
                    dmods.data[r * 3 * w + w + j] = gv * bc.hn.get(r, j);
                    dhn.data[r * w + j] = gv * (1.0 + m[w + j]);
                }
            }
            dsc.add_assign(&b.ada.backward(ps, &cache.sc, &dmods, g));
            dh.add_assign(&layer_norm_backward(&bc.hn, &bc.inv, &dhn));
        }
        self.input.backward_params(&cache.x_t, &dh, g);
        let mut dc = dsc;
        for (v, &c) in dc.data.iter_mut().zip(&cache.c.data) {
            *v *= silu_grad(c);
        }
        let mut dt1a = self.time2.backward(ps, &cache.t1a, &dc, g);
        for (v, &a) in dt1a.data.iter_mut().zip(&cache.t1.data) {
            *v *= silu_grad(a);
        }
        self.time1.backward_params(&cache.temb, &dt1a, g);
        let mut dz = self.cond.backward(ps, &cache.cond_in, &dc, g);
        let gnull = g.slot(self.null_latent);
        for (r, &flag) in cache.null.iter().enumerate() {
            if flag {
                for (a, b) in gnull.iter_mut().zip(dz.row(r)) {
                    *a += b;
                }
                dz.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        dz
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut r = rng::stream(seed, &[]);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn cfg() -> HeadConfig {
        HeadConfig {
            det_width: 12,
            det_depth: 2,
            diff_width: 10,
            diff_depth: 2,
            time_freq_dim: 8,
            cond_dropout: 0.1,
        }
    }

    fn randomize(ps: &mut ParamSet, seed: u64) {
        let mut r = rng::stream(seed, &[]);
        for id in ps.ids().collect::<Vec<_>>() {
            for v in ps.get_mut(id) {
                *v += r.random_range(-0.2..0.2);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_gray_and_half_confidence() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, &[]);
        let head = DetHead::new(&mut ps, &cfg(), 6, 2, &mut r);
        let out = head.output_layer().clone();
        ps.get_mut(out.w).iter_mut().for_each(|v| *v = 0.0);
        ps.get_mut(out.b.unwrap()).iter_mut().for_each(|v| *v = 0.0);
        let o = head.forward(&ps, &random_mat(3, 6, 1)).unwrap();
        assert!(o.rgb.data.iter().all(|&v| v == 0.0));
        assert!(o.confidence.data.iter().all(|&v| v == 0.5));
        assert_eq!(o.patch_scores, vec![0.5; 3]);
    }

    #[test]
    fn patch_score_is_the_pixel_minimum() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, &[]);
        let head = DetHead::new(&mut ps, &cfg(), 6, 8, &mut r);
        let out = head.output_layer().clone();
        ps.get_mut(out.w).iter_mut().for_each(|v| *v = 0.0);
        // logits: 63 pixels at logit(0.9), one at logit(0.2)
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let b = ps.get_mut(out.b.unwrap());
        for j in 0..64 {
            b[192 + j] = if j == 17 { logit(0.2) } else { logit(0.9) };
        }
        let o = head.forward(&ps, &random_mat(2, 6, 1)).unwrap();
        for s in o.patch_scores {
            assert!((s - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn det_head_is_deterministic_and_token_local() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, &[]);
        let head = DetHead::new(&mut ps, &cfg(), 6, 2, &mut r);
        let z = random_mat(4, 6, 2);
        let a = head.forward(&ps, &z).unwrap();
        let b = head.forward(&ps, &z).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.confidence, b.confidence);
        let perm = [2, 0, 3, 1];
        let p = head.forward(&ps, &z.select_rows(&perm)).unwrap();
        assert_eq!(p.rgb, a.rgb.select_rows(&perm));
    }

    #[test]
    fn det_head_gradients() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, &[]);
        let head = DetHead::new(&mut ps, &cfg(), 6, 2, &mut r);
        randomize(&mut ps, 9);
        let z = random_mat(3, 6, 3);
        let wr = random_mat(3, 12, 4);
        let wc = random_mat(3, 4, 5);
        let loss = |ps: &ParamSet, z: &Mat| {
            let o = head.forward(ps, z).unwrap();
            o.rgb.data.iter().zip(&wr.data).map(|(a, b)| a * b).sum::<f64>()
                + o.confidence.data.iter().zip(&wc.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let o = head.forward(&ps, &z).unwrap();
        let mut g = ps.zero_grads();
        let dz = head.backward(&ps, &o, &wr, &wc, &mut g);
        let h = 1e-5;
        for id in ps.ids().collect::<Vec<_>>() {
            for i in 0..ps.get(id).len() {
                let orig = ps.get(id)[i];
                ps.get_mut(id)[i] = orig + h;
                let lp = loss(&ps, &z);
                ps.get_mut(id)[i] = orig - h;
                let lm = loss(&ps, &z);
                ps.get_mut(id)[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.get(id)[i];
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1e-3), "{}[{i}] {fd} {an}", ps.name(id));
            }
        }
        for i in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[i] += h;
            let mut zm = z.clone();
            zm.data[i] -= h;
            let fd = (loss(&ps, &zp) - loss(&ps, &zm)) / (2.0 * h);
            assert!((fd - dz.data[i]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
    }

    fn diff_fixture() -> (DiffHead, ParamSet) {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(1, &[]);
        let head = DiffHead::new(&mut ps, &cfg(), 6, 2, 1000, &mut r);
        randomize(&mut ps, 10);
        (head, ps)
    }

    #[test]
    fn diffusion_head_preserves_token_dimension() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(1, &[]);
        let head = DiffHead::new(&mut ps, &HeadConfig::default(), 128, 8, 1000, &mut r);
        let (eps, _) = head
            .forward(&ps, &random_mat(2, 192, 1), &[3, 999], &random_mat(2, 128, 2), &[false, false])
            .unwrap();
        assert_eq!((eps.rows, eps.cols), (2, 192));
    }

    #[test]
    fn timestep_out_of_range_is_rejected() {
        let (head, ps) = diff_fixture();
        let res = head.forward(&ps, &random_mat(1, 12, 1), &[1000], &random_mat(1, 6, 2), &[false]);
        assert!(matches!(res, Err(Error::Domain(_))));
    }

    #[test]
    fn null_branch_ignores_latent() {
        let (head, ps) = diff_fixture();
        let x = random_mat(2, 12, 1);
        let (a, _) = head.forward(&ps, &x, &[5, 700], &random_mat(2, 6, 2), &[true, true]).unwrap();
        let (b, _) = head.forward(&ps, &x, &[5, 700], &random_mat(2, 6, 3), &[true, true]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditioning_is_not_degenerate() {
        let (head, ps) = diff_fixture();
        let x = random_mat(1, 12, 1);
        let z = random_mat(1, 6, 2);
        let (a, _) = head.forward(&ps, &x, &[100], &z, &[false]).unwrap();
        let mut r = rng::stream(77, &[]);
        for _ in 0..10 {
            let mut dir: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= n);
            let mut z2 = z.clone();
            z2.data.iter_mut().zip(&dir).for_each(|(a, b)| *a += b);
            let (b, _) = head.forward(&ps, &x, &[100], &z2, &[false]).unwrap();
            let delta: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum();
            assert!(delta > 0.0);
        }
    }

    #[test]
    fn diffusion_head_is_token_local() {
        let (head, ps) = diff_fixture();
        let x = random_mat(3, 12, 1);
        let z = random_mat(3, 6, 2);
        let t = [1, 500, 999];
        let (a, _) = head.forward(&ps, &x, &t, &z, &[false, true, false]).unwrap();
        let perm = [2, 0, 1];
        let (b, _) = head
            .forward(
                &ps,
                &x.select_rows(&perm),
                &[t[2], t[0], t[1]],
                &z.select_rows(&perm),
                &[false, false, true],
            )
            .unwrap();
        assert_eq!(b, a.select_rows(&perm));
    }

    #[test]
    fn timestep_embeddings_are_distinct() {
        let t: Vec<usize> = (0..1000).collect();
        let e = timestep_embedding(&t, 64);
        let mut rows: Vec<Vec<u64>> = (0..1000).map(|i| e.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 1000);
    }

    #[test]
    fn diffusion_head_gradients() {
        let (head, mut ps) = diff_fixture();
        let x = random_mat(3, 12, 1);
        let z = random_mat(3, 6, 2);
        let t = [0, 321, 999];
        let null = [false, true, false];
        let target = random_mat(3, 12, 3);
        // ‖ε − ε̂‖² summed over the batch
        let loss = |ps: &ParamSet, z: &Mat| {
            let (e, _) = head.forward(ps, &x, &t, z, &null).unwrap();
            e.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let (e, cache) = head.forward(&ps, &x, &t, &z, &null).unwrap();
        let de = Mat::from_vec(3, 12, e.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b)).collect());
        let mut g = ps.zero_grads();
        let dz = head.backward(&ps, &cache, &de, &mut g);
        let h = 1e-4;
        for id in ps.ids().collect::<Vec<_>>() {
            for i in 0..ps.get(id).len() {
                let orig = ps.get(id)[i];
                ps.get_mut(id)[i] = orig + h;
                let lp = loss(&ps, &z);
                ps.get_mut(id)[i] = orig - h;
                let lm = loss(&ps, &z);
                ps.get_mut(id)[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.get(id)[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{}[{i}] fd {fd} analytic {an}", ps.name(id));
            }
        }
        for i in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[i] += h;
            let mut zm = z.clone();
            zm.data[i] -= h;
            let fd = (loss(&ps, &zp) - loss(&ps, &zm)) / (2.0 * h);
            assert!((fd - dz.data[i]).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
        // row 1 used the null latent
        assert!(dz.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_count_matches_allocation() {
        let c = HeadConfig::default();
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, &[]);
        DetHead::new(&mut ps, &c, 32, 4, &mut r);
        DiffHead::new(&mut ps, &c, 32, 4, 1000, &mut r);
        assert_eq!(ps.num_scalars(), c.num_params(32, 4));
    }
}
