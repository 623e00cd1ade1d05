//! Central finite-difference verification of the full objective.

use crate::error::Result;
use crate::losses::{LossConfig, PerceptualProxy};
use crate::model::{Example, Model};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and index of the worst entry.
    pub worst: (String, usize),
    /// Finite-difference and analytic values at the worst entry.
    pub worst_values: (f64, f64),
}

/// Compare the analytic gradient of the total loss with central differences
/// for every `stride`-th scalar of every parameter tensor.
///
/// The objective's randomness is re-seeded with `seed` on every evaluation and
/// the diffusion weights are pinned to their base-point values, matching the
/// stop-gradient the analytic pass applies.
#[allow(clippy::too_many_arguments)]
pub fn check_total_loss(
    model: &mut Model,
    ex: &Example,
    mask: &[bool],
    cfg: &LossConfig,
    seed: u64,
    step: f64,
    floor: f64,
    stride: usize,
) -> Result<GradReport> {
    let proxy = PerceptualProxy::new(cfg.perceptual_seed);
    let mut g = model.params.zero_grads();
    let base = model.loss(ex, mask, &mut rng::stream(seed, &[]), cfg, &proxy, None, Some(&mut g))?;
    let weights = base.weights.clone();
    // Only the mask token changes the tokenised input and only backbone
    // parameters change the latents, so both are cached.
    let prep = model.prepare(ex, mask, &proxy)?;
    let (z0, _) = model.encode(&prep.seq)?;
    // Each parameter group only touches part of the objective; the other
    // terms are constant under its perturbation and cancel in the difference.
    let eval = |m: &Model, name: &str| -> Result<f64> {
        let mut r = rng::stream(seed, &[]);
        if name.starts_with("head.diff.") || name == "head.null_latent" {
            return m.diffusion_loss(&prep, &z0, &weights, &mut r, cfg);
        }
        if name.starts_with("head.det.") {
            return m.image_loss(&prep, &z0, cfg, &proxy);
        }
        if name == "mask_token" {
            return Ok(m.loss(ex, mask, &mut r, cfg, &proxy, Some(&weights), None)?.total);
        }
        let (z, _) = m.encode(&prep.seq)?;
        Ok(m.head_loss(&prep, &z, &mut r, cfg, &proxy, Some(&weights), None)?.0.total)
    };
    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        worst_values: (0.0, 0.0),
    };
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let len = model.params.get(id).len();
        let name = model.params.name(id).to_string();
        for i in (0..len).step_by(stride.max(1)) {
            let orig = model.params.get(id)[i];
            model.params.get_mut(id)[i] = orig + step;
            let lp = eval(model, &name)?;
            model.params.get_mut(id)[i] = orig - step;
            let lm = eval(model, &name)?;
            model.params.get_mut(id)[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let an = g.get(id)[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), i);
                report.worst_values = (fd, an);
            }
        }
    }
    Ok(report)
}
