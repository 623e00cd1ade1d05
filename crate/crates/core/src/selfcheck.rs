//! Fast invariant suite behind the `check` subcommand.

use serde::Serialize;

use crate::backbone::BackboneConfig;
use crate::diffusion::{guide, DiffusionConfig, NoiseSchedule};
use crate::error::Result;
use crate::geometry::{cross, dot3, norm3, plucker_grid, sub3, CameraPose};
use crate::gradcheck::check_total_loss;
use crate::heads::HeadConfig;
use crate::imaging::{Image, PosedImage};
use crate::losses::{optimal_confidence, weighted_diffusion_loss, LossConfig};
use crate::metrics::{psnr, ssim, PSNR_CAP};
use crate::model::{Example, Model, ModelConfig};
use crate::params::{Init, ParamSet};
use crate::patch_codec::{detokenize, tokenize};
use crate::rng;
use crate::sampler::{cosine_unmask_counts, step_budget};
use crate::tensor::Mat;
use crate::trainer::{lr_at, AdamW, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, r: Result<std::result::Result<(), String>>) -> CheckResult {
    match r {
        Ok(Ok(())) => CheckResult {
            name,
            passed: true,
            detail: String::new(),
        },
        Ok(Err(detail)) => CheckResult {
            name,
            passed: false,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

fn schedule() -> Result<std::result::Result<(), String>> {
    let s = NoiseSchedule::new(&DiffusionConfig::default())?;
    let a = &s.alphas_cumprod;
    Ok(ensure(a.windows(2).all(|w| w[1] < w[0]), || "alpha_bar not decreasing".into())
        .and(ensure(s.sampling_steps.first() == Some(&19) && s.sampling_steps.last() == Some(&999), || {
            format!("strided steps {:?}", s.sampling_steps)
        }))
        .and(ensure(a[999] < 0.01, || format!("alpha_bar_999 = {}", a[999]))))
}

fn plucker() -> Result<std::result::Result<(), String>> {
    let pose = CameraPose::look_at([1.3, -0.7, -2.1], [0.1, 0.0, 0.2], [0.0, -1.0, 0.0], 9.0, (8, 6))?;
    let g = plucker_grid(&pose)?;
    let o = pose.center();
    for (d, m) in g.directions.iter().zip(&g.moments) {
        let err = norm3(sub3(*m, cross(o, *d)));
        if (norm3(*d) - 1.0).abs() > 1e-12 || dot3(*d, *m).abs() > 1e-12 || err > 1e-12 {
            return Ok(Err("Plücker ray violates |d| = 1, d·m = 0 or m = o×d".into()));
        }
    }
    Ok(Ok(()))
}

fn codec() -> Result<std::result::Result<(), String>> {
    let mut image = Image::new(8, 8);
    for (i, v) in image.data.iter_mut().enumerate() {
        *v = ((i * 53) % 256) as f64 / 256.0;
    }
    let pose = CameraPose::look_at([0.0, 0.0, -2.0], [0.0; 3], [0.0, -1.0, 0.0], 8.0, (8, 8))?;
    let posed = PosedImage {
        image: image.clone(),
        pose: pose.clone(),
    };
    let seq = tokenize(&posed, &plucker_grid(&pose)?, 4)?;
    let back = detokenize(&seq.tokens, (8, 8), 4)?;
    Ok(ensure(back == image, || "patch round trip is not exact".into()))
}

fn losses() -> Result<std::result::Result<(), String>> {
    for &e2 in &[0.01, 0.3, 2.0] {
        let s = optimal_confidence(e2, 0.1);
        let obj = |s: f64| s * e2 - 0.1 * s.ln();
        if (1..=100).any(|k| obj(k as f64 / 100.0) < obj(s) - 1e-12) {
            return Ok(Err(format!("confidence optimum beaten by grid at e² = {e2}")));
        }
    }
    let eps = Mat::from_vec(2, 2, vec![1.0, -1.0, 0.5, 0.0]);
    let (l, _) = weighted_diffusion_loss(&eps, &Mat::zeros(2, 2), &[1.0, 4.0])?;
    Ok(ensure((l - (1.0 + 4.0 * 0.125) / 2.0).abs() < 1e-15, || format!("weighted loss {l}")))
}

fn sampler_laws() -> Result<std::result::Result<(), String>> {
    for t_max in [1, 8, 32] {
        for n_s in 0..=256 {
            let brute = (0..).find(|&k| k * 256 >= n_s * t_max).unwrap();
            if step_budget(n_s, 256, t_max) != brute {
                return Ok(Err(format!("step budget wrong at n_s = {n_s}, t_max = {t_max}")));
            }
        }
    }
    for n in 1..=64 {
        for t in 1..=32 {
            if cosine_unmask_counts(n, t).iter().sum::<usize>() != n {
                return Ok(Err(format!("cosine counts do not sum to {n} over {t} steps")));
            }
        }
    }
    Ok(ensure(guide(&[0.3, -0.2], &[1.0, 2.0], 1.0) == vec![0.3, -0.2], || {
        "guidance at scale 1 is not the conditional prediction".into()
    }))
}

fn optimizer() -> Result<std::result::Result<(), String>> {
    let mut ps = ParamSet::new();
    let id = ps.add("w", &[1, 2], Init::Zeros, &mut rng::stream(0, &[]));
    ps.get_mut(id).copy_from_slice(&[1.0, -2.0]);
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(&ps);
    let mut g = ps.zero_grads();
    g.slot(id).copy_from_slice(&[1.0, -2.0]);
    opt.step(&mut ps, &g, 1e-3, &cfg);
    // first step: m̂ = g, v̂ = g², so the update is lr·(sign(g)·|g|/(|g|+eps) + wd·θ)
    let expect = |th: f64| th - 1e-3 * (th / (th.abs() + cfg.eps) + cfg.weight_decay * th);
    let ok = (ps.get(id)[0] - expect(1.0)).abs() < 1e-15 && (ps.get(id)[1] - expect(-2.0)).abs() < 1e-15;
    let lr_ok = lr_at(&TrainConfig::default(), 500) == 1e-4;
    Ok(ensure(ok && lr_ok, || "AdamW step or warmup value off".into()))
}

fn metrics() -> Result<std::result::Result<(), String>> {
    let mut a = Image::new(12, 12);
    for (i, v) in a.data.iter_mut().enumerate() {
        *v = ((i * 31) % 97) as f64 / 96.0;
    }
    Ok(ensure(psnr(&a, &a)? == PSNR_CAP && ssim(&a, &a)? == 1.0, || {
        "metric identities fail".into()
    }))
}

fn gradients() -> Result<std::result::Result<(), String>> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            layers: 1,
            hidden_dim: 8,
            head_dim: 4,
            patch_size: 2,
            patches_per_view: 4,
            ..Default::default()
        },
        heads: HeadConfig {
            det_width: 8,
            det_depth: 1,
            diff_width: 8,
            diff_depth: 1,
            time_freq_dim: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut model = Model::new(cfg, 1)?;
    let view = |eye: [f64; 3], k: usize| -> Result<PosedImage> {
        let mut image = Image::new(4, 4);
        for (i, v) in image.data.iter_mut().enumerate() {
            *v = ((i * 29 + k * 7) % 64) as f64 / 63.0;
        }
        Ok(PosedImage {
            image,
            pose: CameraPose::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], 4.0, (4, 4))?,
        })
    };
    let ex = Example {
        context: vec![view([0.0, -0.5, -3.0], 0)?],
        targets: vec![view([0.9, -0.4, -2.8], 1)?],
    };
    let report = check_total_loss(&mut model, &ex, &[true, false, true, true], &LossConfig::default(), 3, 1e-4, 1e-6, 7)?;
    Ok(ensure(report.max_rel_error < 1e-4, || {
        format!("gradient mismatch {:.2e} at {:?}", report.max_rel_error, report.worst)
    }))
}

/// Run every check. Never panics on a failing invariant; errors are reported
/// as failed checks.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        outcome("noise schedule", schedule()),
        outcome("plucker rays", plucker()),
        outcome("patch codec round trip", codec()),
        outcome("loss identities", losses()),
        outcome("sampler step laws", sampler_laws()),
        outcome("optimizer step", optimizer()),
        outcome("metric identities", metrics()),
        outcome("gradient agreement", gradients()),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
