//! Layer primitives with explicit backward passes.
//!
//! Conventions: activations are row-per-token matrices; a linear layer stores
//! its weight as `fan_in × fan_out` so that `y = x·W + b`.

use crate::params::{Grads, Init, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{gemm, matmul_tn_acc, Mat, View};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        Self::with_init(ps, name, fan_in, fan_out, bias, Init::Normal(std), rng)
    }

    pub fn with_init(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), &[fan_in, fan_out], init, rng);
        let b = bias.then(|| ps.add(format!("{name}.b"), &[fan_out], Init::Zeros, rng));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Mat) -> Mat {
        assert_eq!(x.cols, self.fan_in, "Linear: input width mismatch");
        let mut y = Mat::zeros(x.rows, self.fan_out);
        if let Some(b) = self.b {
            let bias = ps.get(b);
            for r in 0..y.rows {
                y.row_mut(r).copy_from_slice(bias);
            }
        }
        gemm(
            x.rows,
            self.fan_in,
            self.fan_out,
            1.0,
            View::of(x),
            View::raw(ps.get(self.w), self.fan_out),
            1.0,
            &mut y.data,
            self.fan_out,
        );
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, ps: &ParamSet, x: &Mat, dy: &Mat, g: &mut Grads) -> Mat {
        self.backward_params(x, dy, g);
        let mut dx = Mat::zeros(dy.rows, self.fan_in);
        gemm(
            dy.rows,
            self.fan_out,
            self.fan_in,
            1.0,
            View::of(dy),
            View::raw(ps.get(self.w), self.fan_out).t(),
            0.0,
            &mut dx.data,
            self.fan_in,
        );
        dx
    }

    pub fn backward_params(&self, x: &Mat, dy: &Mat, g: &mut Grads) {
        matmul_tn_acc(x, dy, g.slot(self.w));
        if let Some(b) = self.b {
            let gb = g.slot(b);
            for r in 0..dy.rows {
                for (acc, v) in gb.iter_mut().zip(dy.row(r)) {
                    *acc += v;
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.b.is_some() { self.fan_out } else { 0 }
    }
}

/// RMS normalisation of each length-`width` segment of a row, with a shared
/// learnable gain of length `width`. Returns the output and the per-segment
/// inverse RMS values needed by the backward pass.
pub fn rms_norm(x: &Mat, gain: &[f64]) -> (Mat, Vec<f64>) {
    let width = gain.len();
    assert_eq!(x.cols % width, 0);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.data.len() / width);
    for (xs, ys) in x.data.chunks(width).zip(y.data.chunks_mut(width)) {
        let ms = xs.iter().map(|v| v * v).sum::<f64>() / width as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        for ((yv, xv), gv) in ys.iter_mut().zip(xs).zip(gain) {
            *yv = xv * r * gv;
        }
        inv.push(r);
    }
    (y, inv)
}

pub fn rms_norm_backward(x: &Mat, gain: &[f64], inv: &[f64], dy: &Mat, dgain: &mut [f64]) -> Mat {
    let width = gain.len();
    let mut dx = Mat::zeros(x.rows, x.cols);
    for (((xs, dys), dxs), &r) in x
        .data
        .chunks(width)
        .zip(dy.data.chunks(width))
        .zip(dx.data.chunks_mut(width))
        .zip(inv)
    {
        let mut proj = 0.0;
        for j in 0..width {
            dgain[j] += dys[j] * xs[j] * r;
            proj += gain[j] * dys[j] * xs[j];
        }
        let c = r * r * r * proj / width as f64;
        for j in 0..width {
            dxs[j] = r * gain[j] * dys[j] - c * xs[j];
        }
    }
    dx
}

/// Parameter-free layer normalisation over each row. Returns the normalised
/// rows and their inverse standard deviations.
pub fn layer_norm(x: &Mat) -> (Mat, Vec<f64>) {
    let n = x.cols as f64;
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let xs = x.row(r);
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        for (yv, xv) in y.row_mut(r).iter_mut().zip(xs) {
            *yv = (xv - mean) * s;
        }
        inv.push(s);
    }
    (y, inv)
}

pub fn layer_norm_backward(y: &Mat, inv: &[f64], dy: &Mat) -> Mat {
    let n = y.cols as f64;
    let mut dx = Mat::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let ys = y.row(r);
        let ds = dy.row(r);
        let mean_d = ds.iter().sum::<f64>() / n;
        let mean_dy = ds.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &d), &yv) in dx.row_mut(r).iter_mut().zip(ds).zip(ys) {
            *o = inv[r] * (d - mean_d - yv * mean_dy);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn fd_check(f: impl Fn(&Mat) -> f64, x: &Mat, analytic: &Mat) {
        let h = 1e-5;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(
                (fd - analytic.data[i]).abs() < 1e-7 * (1.0 + fd.abs()),
                "index {i}: fd {fd} vs analytic {}",
                analytic.data[i]
            );
        }
    }

    #[test]
    fn rms_norm_gradient() {
        let x = Mat::from_vec(2, 4, vec![0.3, -1.2, 0.5, 2.0, -0.1, 0.4, 0.9, -0.7]);
        let gain = vec![1.1, 0.9, -0.5, 2.0];
        let coef = Mat::from_vec(2, 4, (0..8).map(|i| (i as f64 * 0.37).cos()).collect());
        let f = |x: &Mat| {
            let (y, _) = rms_norm(x, &gain);
            y.data.iter().zip(&coef.data).map(|(a, b)| a * b).sum()
        };
        let (_, inv) = rms_norm(&x, &gain);
        let mut dg = vec![0.0; 4];
        let dx = rms_norm_backward(&x, &gain, &inv, &coef, &mut dg);
        fd_check(f, &x, &dx);
    }

    #[test]
    fn layer_norm_gradient() {
        let x = Mat::from_vec(2, 5, (0..10).map(|i| ((i * 7) as f64).sin()).collect());
        let coef = Mat::from_vec(2, 5, (0..10).map(|i| (i as f64 * 0.5).cos()).collect());
        let f = |x: &Mat| {
            let (y, _) = layer_norm(x);
            y.data.iter().zip(&coef.data).map(|(a, b)| a * b).sum()
        };
        let (y, inv) = layer_norm(&x);
        let dx = layer_norm_backward(&y, &inv, &coef);
        fd_check(f, &x, &dx);
    }

    #[test]
    fn linear_gradient_wrt_input() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(3, &[]);
        let lin = Linear::new(&mut ps, "l", 3, 2, true, &mut r);
        let x = Mat::from_vec(2, 3, vec![0.1, 0.2, -0.3, 1.0, -2.0, 0.5]);
        let coef = Mat::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        let f = |x: &Mat| {
            let y = lin.forward(&ps, x);
            y.data.iter().zip(&coef.data).map(|(a, b)| a * b).sum()
        };
        let mut g = ps.zero_grads();
        let dx = lin.backward(&ps, &x, &coef, &mut g);
        fd_check(f, &x, &dx);
        // bias gradient is the column sum of dy
        assert_eq!(g.get(lin.b.unwrap()), &[1.5, 1.0]);
    }
}
