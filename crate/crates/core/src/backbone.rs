//! Bidirectional transformer over the joint context + target token sequence.
//!
//! Pre-norm blocks with RMS normalisation, per-head QK normalisation and a
//! SiLU MLP. There is no causal mask and, by default, no positional
//! embedding: each token already carries its ray geometry in the Plücker
//! channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{rms_norm, rms_norm_backward, Linear};
use crate::params::{Grads, Init, ParamId, ParamSet};
use crate::patch_codec::token_dim;
use crate::rng::Rng;
use crate::tensor::{exp, gemm, silu, silu_grad, Mat, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub qk_norm: bool,
    pub patch_size: usize,
    pub mlp_ratio: f64,
    /// Learned per-patch-index embedding added after the input projection.
    pub positional_embedding: bool,
    /// Patches per view; only used to size the positional table.
    pub patches_per_view: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden_dim: 128,
            head_dim: 32,
            qk_norm: true,
            patch_size: 8,
            mlp_ratio: 4.0,
            positional_embedding: false,
            patches_per_view: 64,
        }
    }
}

impl BackboneConfig {
    /// The 24-layer, 768-wide configuration used at full scale.
    pub fn full_scale() -> Self {
        Self {
            layers: 24,
            hidden_dim: 768,
            head_dim: 64,
            qk_norm: true,
            patch_size: 8,
            mlp_ratio: 4.0,
            positional_embedding: false,
            patches_per_view: 1024,
        }
    }

    pub fn input_dim(&self) -> usize {
        token_dim(self.patch_size)
    }

    pub fn mlp_dim(&self) -> usize {
        (self.hidden_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn heads(&self) -> usize {
        self.hidden_dim / self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.head_dim == 0 || self.hidden_dim % self.head_dim != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of head_dim {}",
                self.hidden_dim, self.head_dim
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_dim() == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.positional_embedding && self.patches_per_view == 0 {
            return Err(Error::Config("positional embedding needs patches_per_view > 0".into()));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars in the backbone.
    pub fn num_params(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.mlp_dim();
        let per_layer = d // attention norm gain
            + 4 * (d * d + d) // q, k, v, o
            + if self.qk_norm { 2 * self.head_dim } else { 0 }
            + d // mlp norm gain
            + (d * f + f)
            + (f * d + d);
        let pos = if self.positional_embedding { self.patches_per_view * d } else { 0 };
        (self.input_dim() * d + d) + pos + self.layers * per_layer + d + (d * d + d)
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn_gain: ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    q_gain: Option<ParamId>,
    k_gain: Option<ParamId>,
    mlp_gain: ParamId,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    input: Linear,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    final_gain: ParamId,
    output: Linear,
}

#[derive(Debug, Default)]
struct BlockCache {
    h_in: Mat,
    n1: Mat,
    r1: Vec<f64>,
    q: Mat,
    k: Mat,
    qn: Mat,
    kn: Mat,
    rq: Vec<f64>,
    rk: Vec<f64>,
    v: Mat,
    probs: Vec<Mat>,
    attn: Mat,
    h_mid: Mat,
    n2: Mat,
    r2: Vec<f64>,
    u: Mat,
    act: Mat,
}

/// Activations retained by [`Backbone::forward`] for the backward pass.
#[derive(Debug)]
pub struct BackboneCache {
    x: Mat,
    patch_ids: Vec<usize>,
    target_start: usize,
    blocks: Vec<BlockCache>,
    h_target: Mat,
    nf: Mat,
    rf: Vec<f64>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, ps: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.mlp_dim();
        let input = Linear::new(ps, "backbone.input", config.input_dim(), d, true, rng);
        let pos = config
            .positional_embedding
            .then(|| ps.add("backbone.pos_embed", &[config.patches_per_view, d], Init::Normal(0.02), rng));
        let resid_std = (1.0 / d as f64).sqrt() / (2.0 * config.layers.max(1) as f64).sqrt();
        let resid_std_f = (1.0 / f as f64).sqrt() / (2.0 * config.layers.max(1) as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("backbone.layer{i}");
            let attn_gain = ps.add(format!("{p}.norm.attn_gain"), &[d], Init::Ones, rng);
            let q = Linear::new(ps, &format!("{p}.attn.q"), d, d, true, rng);
            let k = Linear::new(ps, &format!("{p}.attn.k"), d, d, true, rng);
            let v = Linear::new(ps, &format!("{p}.attn.v"), d, d, true, rng);
            let o = Linear::with_init(ps, &format!("{p}.attn.o"), d, d, true, Init::Normal(resid_std), rng);
            let (q_gain, k_gain) = if config.qk_norm {
                (
                    Some(ps.add(format!("{p}.attn.q_norm"), &[config.head_dim], Init::Ones, rng)),
                    Some(ps.add(format!("{p}.attn.k_norm"), &[config.head_dim], Init::Ones, rng)),
                )
            } else {
                (None, None)
            };
            let mlp_gain = ps.add(format!("{p}.norm.mlp_gain"), &[d], Init::Ones, rng);
            let fc1 = Linear::new(ps, &format!("{p}.mlp.fc1"), d, f, true, rng);
            let fc2 = Linear::with_init(ps, &format!("{p}.mlp.fc2"), f, d, true, Init::Normal(resid_std_f), rng);
            blocks.push(Block {
                attn_gain,
                q,
                k,
                v,
                o,
                q_gain,
                k_gain,
                mlp_gain,
                fc1,
                fc2,
            });
        }
        let final_gain = ps.add("backbone.norm.final_gain", &[d], Init::Ones, rng);
        let output = Linear::new(ps, "backbone.output", d, d, true, rng);
        Ok(Self {
            config,
            input,
            pos,
            blocks,
            final_gain,
            output,
        })
    }

    /// Run the transformer over `x` (context rows first, then target rows) and
    /// return latents for rows `target_start..`.
    ///
    /// `patch_ids` gives each row's patch index within its view and is only
    /// consulted when the positional embedding is enabled.
    pub fn forward(
        &self,
        ps: &ParamSet,
        x: &Mat,
        patch_ids: &[usize],
        target_start: usize,
    ) -> Result<(Mat, BackboneCache)> {
        self.run(ps, x, patch_ids, target_start, true)
    }

    /// Forward pass without attention probabilities in the cache, for
    /// inference. Attention is evaluated in row blocks.
    pub fn infer(&self, ps: &ParamSet, x: &Mat, patch_ids: &[usize], target_start: usize) -> Result<Mat> {
        Ok(self.run(ps, x, patch_ids, target_start, false)?.0)
    }

    fn run(
        &self,
        ps: &ParamSet,
        x: &Mat,
        patch_ids: &[usize],
        target_start: usize,
        keep: bool,
    ) -> Result<(Mat, BackboneCache)> {
        if x.cols != self.config.input_dim() {
            return Err(Error::Config(format!(
                "token width {} does not match backbone input dimension {}",
                x.cols,
                self.config.input_dim()
            )));
        }
        if target_start > x.rows || patch_ids.len() != x.rows {
            return Err(Error::Domain("target range or patch ids inconsistent with input".into()));
        }
        let mut h = self.input.forward(ps, x);
        if let Some(pos) = self.pos {
            let table = ps.get(pos);
            let d = self.config.hidden_dim;
            for (r, &pid) in patch_ids.iter().enumerate() {
                if pid >= self.config.patches_per_view {
                    return Err(Error::Domain(format!("patch index {pid} exceeds positional table")));
                }
                for (a, b) in h.row_mut(r).iter_mut().zip(&table[pid * d..(pid + 1) * d]) {
                    *a += b;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = self.block_forward(ps, block, h, keep);
            caches.push(cache);
            h = out;
        }
        let h_target = h.slice_rows(target_start, h.rows);
        let (nf, rf) = rms_norm(&h_target, ps.get(self.final_gain));
        let z = self.output.forward(ps, &nf);
        let cache = BackboneCache {
            x: x.clone(),
            patch_ids: patch_ids.to_vec(),
            target_start,
            blocks: caches,
            h_target,
            nf,
            rf,
        };
        Ok((z, cache))
    }

    fn block_forward(&self, ps: &ParamSet, b: &Block, h_in: Mat, keep: bool) -> (Mat, BlockCache) {
        let cfg = &self.config;
        let (n, d, dh) = (h_in.rows, cfg.hidden_dim, cfg.head_dim);
        let (n1, r1) = rms_norm(&h_in, ps.get(b.attn_gain));
        let q = b.q.forward(ps, &n1);
        let k = b.k.forward(ps, &n1);
        let v = b.v.forward(ps, &n1);
        let (qn, rq) = match b.q_gain {
            Some(g) => rms_norm(&q, ps.get(g)),
            None => (q.clone(), Vec::new()),
        };
        let (kn, rk) = match b.k_gain {
            Some(g) => rms_norm(&k, ps.get(g)),
            None => (k.clone(), Vec::new()),
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(cfg.heads());
        if keep {
            for hd in 0..cfg.heads() {
                let off = hd * dh;
                let mut s = Mat::zeros(n, n);
                gemm(
                    n,
                    dh,
                    n,
                    scale,
                    View { data: &qn.data[off..], rs: d as isize, cs: 1 },
                    View { data: &kn.data[off..], rs: d as isize, cs: 1 }.t(),
                    0.0,
                    &mut s.data,
                    n,
                );
                softmax_rows(&mut s);
                gemm(
                    n,
                    n,
                    dh,
                    1.0,
                    View::of(&s),
                    View { data: &v.data[off..], rs: d as isize, cs: 1 },
                    0.0,
                    &mut attn.data[off..],
                    d,
                );
                probs.push(s);
            }
        } else {
            const ROWS: usize = 64;
            let mut s = Mat::zeros(ROWS, n);
            for hd in 0..cfg.heads() {
                let off = hd * dh;
                for r0 in (0..n).step_by(ROWS) {
                    let m = ROWS.min(n - r0);
                    s.rows = m;
                    s.data.resize(m * n, 0.0);
                    gemm(
                        m,
                        dh,
                        n,
                        scale,
                        View { data: &qn.data[r0 * d + off..], rs: d as isize, cs: 1 },
                        View { data: &kn.data[off..], rs: d as isize, cs: 1 }.t(),
                        0.0,
                        &mut s.data,
                        n,
                    );
                    softmax_rows(&mut s);
                    gemm(
                        m,
                        n,
                        dh,
                        1.0,
                        View::of(&s),
                        View { data: &v.data[off..], rs: d as isize, cs: 1 },
                        0.0,
                        &mut attn.data[r0 * d + off..],
                        d,
                    );
                }
            }
        }
        let mut h_mid = b.o.forward(ps, &attn);
        h_mid.add_assign(&h_in);
        let (n2, r2) = rms_norm(&h_mid, ps.get(b.mlp_gain));
        let u = b.fc1.forward(ps, &n2);
        let act = u.map(silu);
        let mut out = b.fc2.forward(ps, &act);
        out.add_assign(&h_mid);
        let cache = BlockCache {
            h_in,
            n1,
            r1,
            q,
            k,
            qn,
            kn,
            rq,
            rk,
            v,
            probs,
            attn,
            h_mid,
            n2,
            r2,
            u,
            act,
        };
        (out, cache)
    }

    /// Backpropagate `dz` (gradient w.r.t. the target latents). Accumulates
    /// parameter gradients and returns the gradient w.r.t. the input tokens.
    pub fn backward(&self, ps: &ParamSet, cache: &BackboneCache, dz: &Mat, g: &mut Grads) -> Mat {
        let d = self.config.hidden_dim;
        let dnf = self.output.backward(ps, &cache.nf, dz, g);
        let dht = rms_norm_backward(
            &cache.h_target,
            ps.get(self.final_gain),
            &cache.rf,
            &dnf,
            g.slot(self.final_gain),
        );
        let n = cache.x.rows;
        let mut dh = Mat::zeros(n, d);
        dh.data[cache.target_start * d..].copy_from_slice(&dht.data);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = self.block_backward(ps, block, bc, dh, g);
        }
        if let Some(pos) = self.pos {
            let gp = g.slot(pos);
            for (r, &pid) in cache.patch_ids.iter().enumerate() {
                for (a, b) in gp[pid * d..(pid + 1) * d].iter_mut().zip(dh.row(r)) {
                    *a += b;
                }
            }
        }
        self.input.backward(ps, &cache.x, &dh, g)
    }

    fn block_backward(&self, ps: &ParamSet, b: &Block, c: &BlockCache, dout: Mat, g: &mut Grads) -> Mat {
        let cfg = &self.config;
        let (n, d, dh) = (c.h_in.rows, cfg.hidden_dim, cfg.head_dim);
        // MLP branch
        let mut du = b.fc2.backward(ps, &c.act, &dout, g);
        for (dv, &uv) in du.data.iter_mut().zip(&c.u.data) {
            *dv *= silu_grad(uv);
        }
        let dn2 = b.fc1.backward(ps, &c.n2, &du, g);
        let mut dh_mid = rms_norm_backward(&c.h_mid, ps.get(b.mlp_gain), &c.r2, &dn2, g.slot(b.mlp_gain));
        dh_mid.add_assign(&dout);

        // attention branch
        let dattn = b.o.backward(ps, &c.attn, &dh_mid, g);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqn = Mat::zeros(n, d);
        let mut dkn = Mat::zeros(n, d);
        let mut dv = Mat::zeros(n, d);
        let mut dp = Mat::zeros(n, n);
        for (hd, p) in c.probs.iter().enumerate() {
            let off = hd * dh;
            let do_h = View { data: &dattn.data[off..], rs: d as isize, cs: 1 };
            // dP = dO_h · V_hᵀ
            gemm(
                n,
                dh,
                n,
                1.0,
                do_h,
                View { data: &c.v.data[off..], rs: d as isize, cs: 1 }.t(),
                0.0,
                &mut dp.data,
                n,
            );
            // dV_h = Pᵀ · dO_h
            gemm(n, n, dh, 1.0, View::of(p).t(), do_h, 0.0, &mut dv.data[off..], d);
            // softmax backward, folded with the score scale
            for r in 0..n {
                let pr = p.row(r);
                let dpr = dp.row_mut(r);
                let inner: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                for (x, &pv) in dpr.iter_mut().zip(pr) {
                    *x = scale * pv * (*x - inner);
                }
            }
            gemm(
                n,
                n,
                dh,
                1.0,
                View::of(&dp),
                View { data: &c.kn.data[off..], rs: d as isize, cs: 1 },
                0.0,
                &mut dqn.data[off..],
                d,
            );
            gemm(
                n,
                n,
                dh,
                1.0,
                View::of(&dp).t(),
                View { data: &c.qn.data[off..], rs: d as isize, cs: 1 },
                0.0,
                &mut dkn.data[off..],
                d,
            );
        }
        let dq = match b.q_gain {
            Some(gid) => rms_norm_backward(&c.q, ps.get(gid), &c.rq, &dqn, g.slot(gid)),
            None => dqn,
        };
        let dk = match b.k_gain {
            Some(gid) => rms_norm_backward(&c.k, ps.get(gid), &c.rk, &dkn, g.slot(gid)),
            None => dkn,
        };
        let mut dn1 = b.q.backward(ps, &c.n1, &dq, g);
        dn1.add_assign(&b.k.backward(ps, &c.n1, &dk, g));
        dn1.add_assign(&b.v.backward(ps, &c.n1, &dv, g));
        let mut dh_in = rms_norm_backward(&c.h_in, ps.get(b.attn_gain), &c.r1, &dn1, g.slot(b.attn_gain));
        dh_in.add_assign(&dh_mid);
        dh_in
    }

    pub fn output_projection(&self) -> &Linear {
        &self.output
    }
}

fn softmax_rows(s: &mut Mat) {
    for r in 0..s.rows {
        let row = s.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // separate passes so the exp loop vectorises
        row.iter_mut().for_each(|v| *v = exp(*v - max));
        let mut lanes = [0.0; 4];
        let mut chunks = row.chunks_exact(4);
        for c in &mut chunks {
            for (l, v) in lanes.iter_mut().zip(c) {
                *l += v;
            }
        }
        let sum = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + chunks.remainder().iter().sum::<f64>();
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}
