//! DDPM noise schedule, forward corruption and strided reverse sampling.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 50,
        }
    }
}

/// Linear-β DDPM schedule with a uniform strided sampling subsequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
    pub sampling_steps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        let t = cfg.train_steps;
        if t < 2 {
            return Err(Error::Config("diffusion train_steps must be at least 2".into()));
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config("need 0 < beta_start < beta_end < 1".into()));
        }
        if cfg.sample_steps == 0 || cfg.sample_steps > t {
            return Err(Error::Config(format!("sample_steps must lie in [1, {t}]")));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let mut alphas_cumprod = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        let s = cfg.sample_steps;
        let sampling_steps = (0..s).map(|i| (i + 1) * t / s - 1).collect();
        Ok(Self {
            betas,
            alphas_cumprod,
            sampling_steps,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t`, with `ᾱ_{-1} = 1`.
    pub fn alpha_bar(&self, t: isize) -> f64 {
        if t < 0 { 1.0 } else { self.alphas_cumprod[t as usize] }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.train_steps() {
            return Err(domain!("timestep {t} outside [0, {})", self.train_steps()));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(domain!("x0 and noise lengths differ"));
        }
        let ab = self.alphas_cumprod[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// One ancestral step from `t_hi` to `t_lo` (`t_lo = -1` returns the
    /// predicted clean sample). `noise` is the standard-normal draw used for
    /// the posterior sample and is ignored on the final step. The clean-token
    /// estimate is clipped to [-1, 1] before forming the posterior mean.
    #[allow(clippy::too_many_arguments)]
    pub fn reverse_step(
        &self,
        x_t: &[f64],
        t_hi: usize,
        t_lo: isize,
        eps_cond: &[f64],
        eps_uncond: Option<&[f64]>,
        cfg_scale: f64,
        temperature: f64,
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_t(t_hi)?;
        if t_lo < -1 || t_lo >= t_hi as isize {
            return Err(domain!("reverse step needs t_hi > t_lo >= -1, got {t_hi} -> {t_lo}"));
        }
        let d = x_t.len();
        if eps_cond.len() != d || eps_uncond.is_some_and(|u| u.len() != d) {
            return Err(domain!("noise predictions do not match token dimension {d}"));
        }
        let eps = match eps_uncond {
            Some(u) => guide(eps_cond, u, cfg_scale),
            None => eps_cond.to_vec(),
        };
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite noise prediction".into()));
        }
        let ab_hi = self.alpha_bar(t_hi as isize);
        let ab_lo = self.alpha_bar(t_lo);
        let beta = 1.0 - ab_hi / ab_lo;
        let (s_hi, s1_hi) = (ab_hi.sqrt(), (1.0 - ab_hi).sqrt());
        let c0 = ab_lo.sqrt() * beta / (1.0 - ab_hi);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_lo) / (1.0 - ab_hi);
        let sigma = if t_lo < 0 { 0.0 } else { (beta * (1.0 - ab_lo) / (1.0 - ab_hi)).sqrt() };
        let mut out = Vec::with_capacity(d);
        for i in 0..d {
            let x0 = ((x_t[i] - s1_hi * eps[i]) / s_hi).clamp(-1.0, 1.0);
            let mut v = c0 * x0 + ct * x_t[i];
            if sigma > 0.0 {
                v += temperature * sigma * noise[i];
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Classifier-free guidance. A scale of exactly 1 returns the conditional
/// prediction untouched.
pub fn guide(eps_cond: &[f64], eps_uncond: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return eps_cond.to_vec();
    }
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect()
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Sampling knobs shared by every token chain.
#[derive(Clone, Copy, Debug)]
pub struct ChainParams {
    pub cfg_scale: f64,
    pub temperature: f64,
    pub seed: u64,
}

/// Noise predictor used during sampling: given the current noisy batch and
/// the timestep, return conditional and (when `want_uncond`) unconditional
/// predictions.
pub trait Denoiser {
    fn predict(&mut self, x_t: &Mat, t: usize, want_uncond: bool) -> Result<(Mat, Option<Mat>)>;
}

impl<F> Denoiser for F
where
    F: FnMut(&Mat, usize, bool) -> Result<(Mat, Option<Mat>)>,
{
    fn predict(&mut self, x_t: &Mat, t: usize, want_uncond: bool) -> Result<(Mat, Option<Mat>)> {
        self(x_t, t, want_uncond)
    }
}

/// Run the reverse chain for a batch of tokens from pure noise and return
/// clamped clean tokens, one row per entry of `token_ids`.
///
/// Every token draws from its own stream keyed by `(seed, token id, step)`,
/// so a token's sample does not depend on which other tokens share the batch
/// beyond what the denoiser itself couples.
pub fn sample_tokens(
    schedule: &NoiseSchedule,
    dim: usize,
    token_ids: &[u64],
    params: ChainParams,
    denoiser: &mut impl Denoiser,
) -> Result<Mat> {
    let n = token_ids.len();
    let steps = &schedule.sampling_steps;
    let init_tag = steps.len() as u64;
    let mut x = Mat::zeros(n, dim);
    for (r, &id) in token_ids.iter().enumerate() {
        let mut s = rng::stream(params.seed, &[rng::tag::SAMPLER_TOKEN, id, init_tag]);
        x.row_mut(r).copy_from_slice(&normal_vec(&mut s, dim));
    }
    let want_uncond = params.cfg_scale != 1.0;
    for k in (0..steps.len()).rev() {
        let t_hi = steps[k];
        let t_lo = if k == 0 { -1 } else { steps[k - 1] as isize };
        let (ec, eu) = denoiser.predict(&x, t_hi, want_uncond)?;
        if ec.rows != n || ec.cols != dim || eu.as_ref().is_some_and(|u| u.rows != n || u.cols != dim) {
            return Err(domain!("denoiser returned a batch of the wrong shape"));
        }
        let mut next = Mat::zeros(n, dim);
        for (r, &id) in token_ids.iter().enumerate() {
            let noise = if t_lo >= 0 {
                let mut s = rng::stream(params.seed, &[rng::tag::SAMPLER_TOKEN, id, k as u64]);
                normal_vec(&mut s, dim)
            } else {
                Vec::new()
            };
            let row = schedule.reverse_step(
                x.row(r),
                t_hi,
                t_lo,
                ec.row(r),
                eu.as_ref().map(|u| u.row(r)),
                params.cfg_scale,
                params.temperature,
                &noise,
            )?;
            next.row_mut(r).copy_from_slice(&row);
        }
        x = next;
    }
    for v in &mut x.data {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(&DiffusionConfig::default()).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = sched();
        assert_eq!(s.betas.len(), 1000);
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[999] - 0.02).abs() < 1e-15);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alphas_cumprod.windows(2).all(|w| w[0] > w[1]));
        assert!(s.alphas_cumprod.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(s.alphas_cumprod[999] < 0.01);
        assert_eq!(s.sampling_steps.len(), 50);
        assert_eq!(s.sampling_steps[0], 19);
        assert_eq!(*s.sampling_steps.last().unwrap(), 999);
        assert!(s.sampling_steps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_step_schedule_ends_at_last_timestep() {
        let s = NoiseSchedule::new(&DiffusionConfig {
            sample_steps: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.sampling_steps, vec![999]);
    }

    #[test]
    fn forward_noise_branches() {
        let s = sched();
        let x0 = [0.3, -0.7, 0.1];
        let zero = [0.0; 3];
        let xt = s.forward_noise(&x0, 400, &zero).unwrap();
        let a = s.alphas_cumprod[400].sqrt();
        for (v, x) in xt.iter().zip(&x0) {
            assert_eq!(*v, a * x);
        }
        let eps = [1.0, -2.0, 0.5];
        let x1 = s.forward_noise(&x0, 0, &eps).unwrap();
        let bound = (1.0 - s.alphas_cumprod[0]).sqrt() * (1.0f64 + 4.0 + 0.25).sqrt();
        let dev: f64 = x1.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dev <= bound + 1e-3);
        assert!(matches!(s.forward_noise(&x0, 1000, &eps), Err(Error::Domain(_))));
    }

    #[test]
    fn cfg_scale_one_is_conditional() {
        let c = [0.1, 0.2, -0.3];
        let u = [5.0, -1.0, 2.0];
        assert_eq!(guide(&c, &u, 1.0), c.to_vec());
    }

    #[test]
    fn non_finite_prediction_is_numeric_error() {
        let s = sched();
        let r = s.reverse_step(&[0.0], 19, -1, &[f64::NAN], None, 1.0, 1.0, &[]);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn perfect_denoiser_recovers_token() {
        let s = sched();
        let x0: Vec<f64> = (0..12).map(|i| ((i as f64) * 0.37).sin() * 0.9).collect();
        let target = Mat::from_vec(1, 12, x0.clone());
        let mut oracle = |x: &Mat, t: usize, _: bool| -> Result<(Mat, Option<Mat>)> {
            let ab = s.alphas_cumprod[t];
            let e = x
                .data
                .iter()
                .zip(&target.data)
                .map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect();
            Ok((Mat::from_vec(1, 12, e), None))
        };
        let out = sample_tokens(
            &s,
            12,
            &[0],
            ChainParams {
                cfg_scale: 1.0,
                temperature: 0.9,
                seed: 3,
            },
            &mut oracle,
        )
        .unwrap();
        let rmse = (out.data.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0).sqrt();
        assert!(rmse < 1e-3, "{rmse}");
    }

    fn noisy_denoiser(x: &Mat, t: usize, want: bool) -> Result<(Mat, Option<Mat>)> {
        let c = x.map(|v| 0.3 * v + 1e-3 * t as f64);
        let u = want.then(|| x.map(|v| -0.1 * v));
        Ok((c, u))
    }

    #[test]
    fn sampling_is_seed_deterministic_and_clamped() {
        let s = sched();
        let p = ChainParams {
            cfg_scale: 2.0,
            temperature: 0.9,
            seed: 11,
        };
        let a = sample_tokens(&s, 6, &[0, 1, 2], p, &mut noisy_denoiser).unwrap();
        let b = sample_tokens(&s, 6, &[0, 1, 2], p, &mut noisy_denoiser).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let one = NoiseSchedule::new(&DiffusionConfig {
            sample_steps: 1,
            ..Default::default()
        })
        .unwrap();
        let c = sample_tokens(&one, 6, &[0], p, &mut noisy_denoiser).unwrap();
        assert!(c.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_temperature_ignores_noise_draws() {
        let s = sched();
        let x = vec![0.2, -0.4];
        let e = vec![0.1, 0.1];
        let a = s.reverse_step(&x, 39, 19, &e, None, 1.0, 0.0, &[5.0, -5.0]).unwrap();
        let b = s.reverse_step(&x, 39, 19, &e, None, 1.0, 0.0, &[-3.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_moments_match_closed_form() {
        let s = sched();
        let x0 = [0.5, -0.25];
        let t = 500;
        let ab = s.alphas_cumprod[t];
        let mut r = rng::stream(42, &[]);
        let n = 100_000;
        let (mut m, mut sq) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let eps = normal_vec(&mut r, 2);
            let xt = s.forward_noise(&x0, t, &eps).unwrap();
            for i in 0..2 {
                m[i] += xt[i];
                sq[i] += xt[i] * xt[i];
            }
        }
        for i in 0..2 {
            let mean = m[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            // mean error measured in units of the marginal standard deviation
            assert!((mean - ab.sqrt() * x0[i]).abs() < 0.01 * (1.0 - ab).sqrt());
            assert!((var / (1.0 - ab) - 1.0).abs() < 0.01, "{var}");
        }
    }

    proptest! {
        #[test]
        fn guidance_is_linear(
            c in prop::collection::vec(-3.0f64..3.0, 4),
            u in prop::collection::vec(-3.0f64..3.0, 4),
            s in -2.0f64..5.0,
        ) {
            let g = guide(&c, &u, s);
            for i in 0..4 {
                let expect = if s == 1.0 { c[i] } else { u[i] + s * (c[i] - u[i]) };
                prop_assert_eq!(g[i], expect);
            }
        }
    }
}
