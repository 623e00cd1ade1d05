//! The full network: backbone, both heads and the learned mask token, plus
//! the joint training objective.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::diffusion::{normal_vec, DiffusionConfig, NoiseSchedule};
use crate::error::{domain, Error, Result};
use crate::geometry::{plucker_grid, CameraPose};
use crate::heads::{DetHead, DetOutput, DiffCache, DiffHead, HeadConfig};
use crate::imaging::{Image, PosedImage};
use crate::losses::{
    confidence_loss_grad, diffusion_weight, mse, mse_grad, total_loss, weighted_diffusion_loss, FeatureMap, LossConfig,
    LossParts, PerceptualProxy,
};
use crate::params::{Grads, Init, ParamId, ParamSet};
use crate::patch_codec::{detokenize, rgb_dim, to_unit, tokenize, Role, TokenSequence, CHANNELS, RGB};
use crate::rng::{self, Rng};
use crate::tensor::Mat;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub diffusion: DiffusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.heads.validate()?;
        NoiseSchedule::new(&self.diffusion)?;
        Ok(())
    }

    /// Closed-form trainable scalar count.
    pub fn num_params(&self) -> usize {
        let b = &self.backbone;
        b.num_params() + self.heads.num_params(b.hidden_dim, b.patch_size) + rgb_dim(b.patch_size)
    }
}

/// One training or evaluation example: posed context views and posed targets.
#[derive(Clone, Debug)]
pub struct Example {
    pub context: Vec<PosedImage>,
    pub targets: Vec<PosedImage>,
}

/// A joint token sequence ready for the backbone.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub tokens: Mat,
    pub patch_ids: Vec<usize>,
    pub target_start: usize,
    /// Number of tokens of each target view, in order.
    pub target_lengths: Vec<usize>,
    pub target_resolutions: Vec<(usize, usize)>,
}

impl Sequence {
    pub fn num_targets(&self) -> usize {
        self.tokens.rows - self.target_start
    }
}

/// Result of one objective evaluation.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub parts: LossParts,
    pub total: f64,
    /// Per-masked-token diffusion weights that were applied.
    pub weights: Vec<f64>,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub schedule: NoiseSchedule,
    backbone: Backbone,
    det: DetHead,
    diff: DiffHead,
    mask_token: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let backbone = Backbone::new(config.backbone.clone(), &mut params, &mut rng)?;
        let (h, p) = (config.backbone.hidden_dim, config.backbone.patch_size);
        let det = DetHead::new(&mut params, &config.heads, h, p, &mut rng);
        let diff = DiffHead::new(&mut params, &config.heads, h, p, config.diffusion.train_steps, &mut rng);
        let mask_token = params.add("mask_token", &[rgb_dim(p)], Init::Normal(0.02), &mut rng);
        let schedule = NoiseSchedule::new(&config.diffusion)?;
        Ok(Self {
            config,
            params,
            schedule,
            backbone,
            det,
            diff,
            mask_token,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.config.backbone.patch_size
    }

    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn mask_embedding(&self) -> &[f64] {
        self.params.get(self.mask_token)
    }

    pub fn det_head(&self) -> &DetHead {
        &self.det
    }

    pub fn diff_head(&self) -> &DiffHead {
        &self.diff
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    fn tokens_of(&self, image: &PosedImage) -> Result<TokenSequence> {
        tokenize(image, &plucker_grid(&image.pose)?, self.patch_size())
    }

    /// Number of patch tokens a view at `pose`'s resolution produces.
    pub fn target_token_count(&self, pose: &CameraPose) -> usize {
        let p = self.patch_size();
        (pose.width() / p) * (pose.height() / p)
    }

    /// Tokens for a target camera: Plücker channels from the pose, RGB taken
    /// from `image` for unmasked tokens and from the mask embedding otherwise.
    pub fn target_tokens(&self, pose: &CameraPose, image: Option<&Image>, mask: &[bool]) -> Result<TokenSequence> {
        let blank;
        let img = match image {
            Some(i) => i,
            None => {
                blank = Image::new(pose.width(), pose.height());
                &blank
            }
        };
        if img.width != pose.width() || img.height != pose.height() {
            return Err(domain!("target image does not match its camera resolution"));
        }
        let posed = PosedImage {
            image: img.clone(),
            pose: pose.clone(),
        };
        let mut seq = self.tokens_of(&posed)?.with_role(Role::Target);
        if mask.len() != seq.len() {
            return Err(domain!("mask has {} entries for {} tokens", mask.len(), seq.len()));
        }
        let emb = self.mask_embedding().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                seq.write_rgb(i, &emb);
                seq.mask_flag[i] = true;
            }
        }
        Ok(seq)
    }

    /// Assemble the joint sequence: every context view, then every target.
    pub fn build_sequence(&self, context: &[PosedImage], targets: &[TokenSequence]) -> Result<Sequence> {
        let mut parts = Vec::with_capacity(context.len() + targets.len());
        let mut patch_ids = Vec::new();
        for c in context {
            let s = self.tokens_of(c)?;
            patch_ids.extend(0..s.len());
            parts.push(s.tokens);
        }
        let target_start = parts.iter().map(|m| m.rows).sum();
        let mut target_lengths = Vec::with_capacity(targets.len());
        let mut target_resolutions = Vec::with_capacity(targets.len());
        for t in targets {
            patch_ids.extend(0..t.len());
            target_lengths.push(t.len());
            let (rows, cols) = t.patch_index.last().map_or((0, 0), |&(r, c)| (r + 1, c + 1));
            target_resolutions.push((cols * t.patch_size, rows * t.patch_size));
            parts.push(t.tokens.clone());
        }
        let refs: Vec<&Mat> = parts.iter().collect();
        Ok(Sequence {
            tokens: Mat::vstack(&refs),
            patch_ids,
            target_start,
            target_lengths,
            target_resolutions,
        })
    }

    /// Backbone latents for the target rows.
    pub fn encode(&self, seq: &Sequence) -> Result<(Mat, BackboneCache)> {
        let (z, cache) = self
            .backbone
            .forward(&self.params, &seq.tokens, &seq.patch_ids, seq.target_start)?;
        if !z.is_finite() {
            return Err(Error::Numeric("backbone produced non-finite latents".into()));
        }
        Ok((z, cache))
    }

    /// Latents only; cheaper than [`Model::encode`] on long sequences.
    pub fn infer(&self, seq: &Sequence) -> Result<Mat> {
        let z = self.backbone.infer(&self.params, &seq.tokens, &seq.patch_ids, seq.target_start)?;
        if !z.is_finite() {
            return Err(Error::Numeric("backbone produced non-finite latents".into()));
        }
        Ok(z)
    }

    pub fn deterministic(&self, z: &Mat) -> Result<DetOutput> {
        self.det.forward(&self.params, z)
    }

    /// Tokenise an example under a pooled target mask.
    pub fn prepare(&self, ex: &Example, mask: &[bool], proxy: &PerceptualProxy) -> Result<Prepared> {
        if ex.context.is_empty() || ex.targets.is_empty() {
            return Err(domain!("an example needs at least one context and one target view"));
        }
        let p = self.patch_size();
        let mut targets = Vec::with_capacity(ex.targets.len());
        let mut gt_rows = Vec::with_capacity(ex.targets.len());
        let mut offset = 0;
        for t in &ex.targets {
            let n = (t.image.width / p) * (t.image.height / p);
            let end = (offset + n).min(mask.len());
            targets.push(self.target_tokens(&t.pose, Some(&t.image), &mask[offset..end])?);
            gt_rows.push(self.tokens_of(t)?.rgb_matrix());
            offset += n;
        }
        if offset != mask.len() {
            return Err(domain!("mask has {} entries for {offset} target tokens", mask.len()));
        }
        Ok(Prepared {
            seq: self.build_sequence(&ex.context, &targets)?,
            gt: Mat::vstack(&gt_rows.iter().collect::<Vec<_>>()),
            gt_images: ex.targets.iter().map(|t| t.image.clone()).collect(),
            gt_features: ex.targets.iter().map(|t| proxy.features(&t.image)).collect(),
            mask: mask.to_vec(),
        })
    }

    /// Evaluate the full objective for one example under a pooled target
    /// mask. With `grads` set, accumulates parameter gradients of the
    /// weighted total. `fixed_weights` pins the diffusion token weights
    /// (they are treated as constants either way).
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        ex: &Example,
        mask: &[bool],
        rng: &mut Rng,
        cfg: &LossConfig,
        proxy: &PerceptualProxy,
        fixed_weights: Option<&[f64]>,
        grads: Option<&mut Grads>,
    ) -> Result<LossOutput> {
        let prep = self.prepare(ex, mask, proxy)?;
        let (z, cache) = self.encode(&prep.seq)?;
        match grads {
            None => Ok(self.head_loss(&prep, &z, rng, cfg, proxy, fixed_weights, None)?.0),
            Some(g) => {
                let (out, dz) = self.head_loss(&prep, &z, rng, cfg, proxy, fixed_weights, Some(g))?;
                let dz = dz.expect("gradient requested");
                let dx = self.backbone.backward(&self.params, &cache, &dz, g);
                let pp = self.patch_size() * self.patch_size();
                let gm = g.slot(self.mask_token);
                for (i, _) in prep.mask.iter().enumerate().filter(|(_, &m)| m) {
                    let row = dx.row(prep.seq.target_start + i);
                    for k in 0..pp {
                        for c in 0..RGB {
                            gm[k * RGB + c] += row[k * CHANNELS + c];
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Objective given target latents `z`. With `grads` set, accumulates head
    /// gradients and also returns `dL/dz`.
    #[allow(clippy::too_many_arguments)]
    pub fn head_loss(
        &self,
        prep: &Prepared,
        z: &Mat,
        rng: &mut Rng,
        cfg: &LossConfig,
        proxy: &PerceptualProxy,
        fixed_weights: Option<&[f64]>,
        grads: Option<&mut Grads>,
    ) -> Result<(LossOutput, Option<Mat>)> {
        let want_grad = grads.is_some();
        let img = self.image_terms(prep, z, cfg, proxy, want_grad)?;
        let weights: Vec<f64> = match fixed_weights {
            Some(w) => w.to_vec(),
            None => img
                .masked
                .iter()
                .map(|&i| diffusion_weight(img.det.patch_scores[i], cfg.lambda_d))
                .collect(),
        };
        let dt = self.diffusion_term(prep, z, &weights, rng, cfg)?;
        let parts = LossParts {
            l2: img.l2,
            perc: img.perc,
            diff: dt.value,
            conf: img.conf,
        };
        let total = total_loss(&parts, cfg);
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {parts:?}")));
        }
        let out = LossOutput { parts, total, weights };
        let Some(g) = grads else {
            return Ok((out, None));
        };
        let mut dz = self.det.backward(&self.params, &img.det, &img.d_rgb, &img.d_conf, g);
        let mut de = dt.d_eps_hat;
        de.scale(cfg.w_diff);
        let dzb = self.diff.backward(&self.params, &dt.cache, &de, g);
        for (r, &i) in dt.rows.iter().enumerate() {
            for (a, b) in dz.row_mut(i).iter_mut().zip(dzb.row(r)) {
                *a += b;
            }
        }
        Ok((out, Some(dz)))
    }

    /// Weighted render and confidence terms, `w_l2·MSE + w_perc·Perc +
    /// w_conf·Conf`. These do not depend on the diffusion head.
    pub fn image_loss(&self, prep: &Prepared, z: &Mat, cfg: &LossConfig, proxy: &PerceptualProxy) -> Result<f64> {
        let t = self.image_terms(prep, z, cfg, proxy, false)?;
        Ok(cfg.w_l2 * t.l2 + cfg.w_perc * t.perc + cfg.w_conf * t.conf)
    }

    /// Weighted diffusion term `w_diff·L_diff` for given token weights. Does
    /// not depend on the deterministic head.
    pub fn diffusion_loss(
        &self,
        prep: &Prepared,
        z: &Mat,
        weights: &[f64],
        rng: &mut Rng,
        cfg: &LossConfig,
    ) -> Result<f64> {
        Ok(cfg.w_diff * self.diffusion_term(prep, z, weights, rng, cfg)?.value)
    }

    fn image_terms(
        &self,
        prep: &Prepared,
        z: &Mat,
        cfg: &LossConfig,
        proxy: &PerceptualProxy,
        want_grad: bool,
    ) -> Result<ImageTerms> {
        let p = self.patch_size();
        let d = rgb_dim(p);
        let pp = p * p;
        let (mask, gt, seq) = (&prep.mask, &prep.gt, &prep.seq);
        let det = self.deterministic(z)?;
        let n_t = z.rows;

        // render terms on composited full images
        let mut d_rgb = Mat::zeros(n_t, d);
        let (mut l2, mut perc) = (0.0, 0.0);
        let views = prep.gt_images.len() as f64;
        let mut start = 0;
        for (v, gt_img) in prep.gt_images.iter().enumerate() {
            let len = seq.target_lengths[v];
            let mut comp = Mat::zeros(len, d);
            for i in 0..len {
                let src = if mask[start + i] { det.rgb.row(start + i) } else { gt.row(start + i) };
                comp.row_mut(i).copy_from_slice(src);
            }
            let pred = detokenize(&comp, (gt_img.width, gt_img.height), p)?;
            if !want_grad {
                l2 += mse(&pred, gt_img)? / views;
                perc += proxy.distance_to(&pred, &prep.gt_features[v]) / views;
                start += len;
                continue;
            }
            let (m, gm) = mse_grad(&pred, gt_img)?;
            let (q, gq) = proxy.distance_grad_to(&pred, &prep.gt_features[v]);
            l2 += m / views;
            perc += q / views;
            // pixel gradients back to masked token rows (unit → signed halves)
            let cols = gt_img.width / p;
            for i in 0..len {
                if !mask[start + i] {
                    continue;
                }
                let (pr, pc) = (i / cols, i % cols);
                let row = d_rgb.row_mut(start + i);
                for k in 0..pp {
                    let (py, px) = (k / p, k % p);
                    let pix = ((pr * p + py) * gt_img.width + pc * p + px) * 3;
                    for c in 0..RGB {
                        row[k * RGB + c] += 0.5 * (cfg.w_l2 * gm[pix + c] + cfg.w_perc * gq[pix + c]) / views;
                    }
                }
            }
            start += len;
        }

        // confidence term over masked pixels, pooled across targets
        let masked: Vec<usize> = (0..n_t).filter(|&i| mask[i]).collect();
        let mut pred_px = Vec::with_capacity(masked.len() * d);
        let mut gt_px = Vec::with_capacity(masked.len() * d);
        let mut conf_px = Vec::with_capacity(masked.len() * pp);
        for &i in &masked {
            pred_px.extend(det.rgb.row(i).iter().map(|&v| to_unit(v)));
            gt_px.extend(gt.row(i).iter().map(|&v| to_unit(v)));
            conf_px.extend_from_slice(det.confidence.row(i));
        }
        let all = vec![true; conf_px.len()];
        let (conf, dpred_c, dconf_c) = confidence_loss_grad(&pred_px, &gt_px, &conf_px, &all, cfg.lambda_s)?;
        let mut d_conf = Mat::zeros(n_t, pp);
        if want_grad {
            for (j, &i) in masked.iter().enumerate() {
                for (a, b) in d_rgb.row_mut(i).iter_mut().zip(&dpred_c[j * d..(j + 1) * d]) {
                    *a += 0.5 * cfg.w_conf * b;
                }
                for (a, b) in d_conf.row_mut(i).iter_mut().zip(&dconf_c[j * pp..(j + 1) * pp]) {
                    *a += cfg.w_conf * b;
                }
            }
        }
        Ok(ImageTerms {
            l2,
            perc,
            conf,
            det,
            d_rgb,
            d_conf,
            masked,
        })
    }

    /// Fresh `(ε, t)` draws for every masked token; consumes `rng` in a fixed
    /// order so equal seeds give equal draws.
    fn diffusion_term(
        &self,
        prep: &Prepared,
        z: &Mat,
        weights: &[f64],
        rng: &mut Rng,
        cfg: &LossConfig,
    ) -> Result<DiffTerm> {
        let d = rgb_dim(self.patch_size());
        let masked: Vec<usize> = (0..z.rows).filter(|&i| prep.mask[i]).collect();
        if weights.len() != masked.len() {
            return Err(domain!("{} weights for {} masked tokens", weights.len(), masked.len()));
        }
        let draws = cfg.diffusion_draws;
        let n = masked.len() * draws;
        let mut x_t = Mat::zeros(n, d);
        let mut eps = Mat::zeros(n, d);
        let mut ts = Vec::with_capacity(n);
        let mut nulls = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        let mut wsel = Vec::with_capacity(n);
        let t_max = self.schedule.train_steps();
        for _ in 0..draws {
            for (j, &i) in masked.iter().enumerate() {
                let r = ts.len();
                let t = rng.random_range(0..t_max);
                let e = normal_vec(rng, d);
                let null = rng.random::<f64>() < self.config.heads.cond_dropout;
                let xt = self.schedule.forward_noise(prep.gt.row(i), t, &e)?;
                x_t.row_mut(r).copy_from_slice(&xt);
                eps.row_mut(r).copy_from_slice(&e);
                ts.push(t);
                nulls.push(null);
                rows.push(i);
                wsel.push(weights[j]);
            }
        }
        let zb = z.select_rows(&rows);
        let (eps_hat, cache) = self.diff.forward(&self.params, &x_t, &ts, &zb, &nulls)?;
        let (value, d_eps_hat) = weighted_diffusion_loss(&eps, &eps_hat, &wsel)?;
        Ok(DiffTerm {
            value,
            d_eps_hat,
            cache,
            rows,
        })
    }
}

struct ImageTerms {
    l2: f64,
    perc: f64,
    conf: f64,
    det: DetOutput,
    d_rgb: Mat,
    d_conf: Mat,
    masked: Vec<usize>,
}

struct DiffTerm {
    value: f64,
    d_eps_hat: Mat,
    cache: DiffCache,
    rows: Vec<usize>,
}

/// A tokenised example with cached ground truth.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seq: Sequence,
    /// Ground-truth signed RGB of every target token.
    pub gt: Mat,
    pub gt_images: Vec<Image>,
    pub gt_features: Vec<Vec<FeatureMap>>,
    pub mask: Vec<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_parameter_count() {
        let cfg = ModelConfig::default();
        let m = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.count_parameters(), cfg.num_params());
    }

    #[test]
    fn initialisation_is_seeded() {
        let a = Model::new(ModelConfig::default(), 5).unwrap();
        let b = Model::new(ModelConfig::default(), 5).unwrap();
        let c = Model::new(ModelConfig::default(), 6).unwrap();
        let flat = |m: &Model| m.params.iter().flat_map(|(_, t)| t.data.clone()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }
}
