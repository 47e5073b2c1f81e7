//! Quick runtime invariant checks, run by `mgi selftest`.

use crate::correspondence::{correlation_matrix, warp, CorrelationMatrix, WarpConfig};
use crate::error::Result;
use crate::features::FeatureMap;
use crate::generator::{build_generator, GeneratorArchitecture, LatentCodeSet};
use crate::image::Image;
use crate::io::{decode, encode};
use crate::numerics::gradcheck::check_gradient;
use crate::numerics::linalg::psd_sqrt;
use crate::numerics::ops::{self, conv3x3, conv3x3_backward_input, leaky_relu, pixel_norm, softmax_rows, tanh};
use crate::numerics::{adam_step, gaussian, seeded_rng, AdamConfig, AdamState, Tensor};
use crate::selection::{frechet_distance, FidStats};

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Gradient check of `loss = sum(w * op(x))` against central differences.
fn grad_check(
    name: &'static str,
    shape: &[usize],
    seed: u64,
    forward: impl Fn(&Tensor) -> Result<Tensor>,
    backward: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
) -> CheckResult {
    check(name, || {
        let mut rng = seeded_rng(seed);
        let x = gaussian(&mut rng, shape, 1.0)?;
        let y = forward(&x)?;
        let w = gaussian(&mut rng, y.shape(), 1.0)?;
        let analytic = backward(&x, &w)?;
        let rec = check_gradient(name, &x, analytic, GRAD_STEP, |p| {
            Ok(ops::sum(&ops::mul(&forward(p)?, &w)?))
        })?;
        Ok((rec.max_rel_error < GRAD_TOLERANCE, format!("max_rel_error {:.3e}", rec.max_rel_error)))
    })
}

pub fn run_selftest() -> Vec<CheckResult> {
    let mut out = vec![
        grad_check("grad leaky_relu", &[4, 4, 3], 1, leaky_relu, |x, g| ops::leaky_relu_backward(x, g)),
        grad_check("grad tanh", &[4, 4, 3], 2, tanh, |x, g| ops::tanh_backward(&tanh(x)?, g)),
        grad_check("grad pixel_norm", &[3, 3, 5], 3, pixel_norm, |x, g| ops::pixel_norm_backward(x, g)),
        grad_check(
            "grad softmax_rows",
            &[3, 5],
            4,
            |x| softmax_rows(x, 2.0),
            |x, g| ops::softmax_rows_backward(&softmax_rows(x, 2.0)?, 2.0, g),
        ),
        {
            let mut rng = seeded_rng(5);
            let kernel = gaussian(&mut rng, &[3, 3, 2, 3], 0.5).unwrap_or_else(|_| unreachable!());
            let bias = gaussian(&mut rng, &[3], 0.5).unwrap_or_else(|_| unreachable!());
            grad_check(
                "grad conv3x3",
                &[4, 4, 2],
                6,
                |x| conv3x3(x, &kernel, &bias),
                |x, g| conv3x3_backward_input(x.shape(), &kernel, g),
            )
        },
    ];

    out.push(check("grad generate_with_grads", || {
        let arch = GeneratorArchitecture {
            latent_dim: 8,
            layer_count: 2,
            base_resolution: 4,
            channels: None,
        };
        let g = build_generator(11, &arch)?;
        let set = LatentCodeSet::seeded(&g, 1, 2, 12)?;
        let (img, tape) = g.generate_with_grads(&set, 1)?;
        let w = gaussian(&mut seeded_rng(13), img.tensor().shape(), 1.0)?;
        let grads = tape.backward(&w)?;
        let mut worst = 0.0f64;
        for k in 0..set.len() {
            let rec = check_gradient("code", &set.codes[k], grads.codes[k].clone(), GRAD_STEP, |z| {
                let mut s = set.clone();
                s.codes[k] = z.clone();
                Ok(ops::sum(&ops::mul(g.generate(&s, 1)?.tensor(), &w)?))
            })?;
            worst = worst.max(rec.max_rel_error);
        }
        Ok((worst < GRAD_TOLERANCE, format!("max_rel_error {worst:.3e}")))
    }));

    out.push(check("softmax rows sum to one", || {
        let m = gaussian(&mut seeded_rng(20), &[6, 9], 1e4)?;
        let p = softmax_rows(&m, 1.0)?;
        let worst = p
            .data()
            .chunks(9)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        Ok((worst <= 1e-6, format!("max row deviation {worst:.3e}")))
    }));

    out.push(check("adam first step", || {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let p = Tensor::scalar(1.0)?;
        let (q, _) = adam_step(&p, &Tensor::scalar(1.0)?, &AdamState::new(p.shape())?, &cfg)?;
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        let err = (q.data()[0] - expected).abs();
        Ok((err <= 1e-12, format!("error {err:.3e}")))
    }));

    out.push(check("frechet 1-d closed form", || {
        let a = FidStats::new(Tensor::vector(vec![1.0])?, Tensor::matrix(&[vec![4.0]])?, 2)?;
        let b = FidStats::new(Tensor::vector(vec![-2.0])?, Tensor::matrix(&[vec![9.0]])?, 2)?;
        let d = frechet_distance(&a, &b)?;
        let err = (d - 10.0).abs();
        Ok((err <= 1e-6, format!("distance {d}")))
    }));

    out.push(check("psd square root reconstructs", || {
        let a = gaussian(&mut seeded_rng(30), &[5, 5], 1.0)?;
        let sigma = ops::matmul(&a, &ops::transpose(&a)?)?;
        let r = psd_sqrt(&sigma)?;
        let rr = ops::matmul(&r, &r)?;
        let err = ops::sub(&rr, &sigma)?.max_abs();
        Ok((err <= 1e-6, format!("max entry error {err:.3e}")))
    }));

    out.push(check("self-correlation diagonal", || {
        let f = FeatureMap::new(gaussian(&mut seeded_rng(40), &[4, 4, 8], 1.0)?)?;
        let m = correlation_matrix(&f, &f, 1e-8)?;
        let worst = (0..m.rows()).map(|u| (m.get(u, u) - 1.0).abs()).fold(0.0, f64::max);
        Ok((worst <= 1e-6, format!("max diagonal deviation {worst:.3e}")))
    }));

    out.push(check("cold warp is the target mean", || {
        let target = Image::from_tensor(gaussian(&mut seeded_rng(50), &[4, 4, 3], 0.2)?.map(|v| (v + 0.5).clamp(0.0, 1.0)))?;
        let m = CorrelationMatrix::from_entries(gaussian(&mut seeded_rng(51), &[16, 16], 0.3)?, (4, 4), (4, 4))?;
        let w = warp(&m, &target, &WarpConfig { temperature: 1e-12, epsilon_norm: 1e-8 })?;
        let mean = ops::channel_mean(target.tensor())?;
        let worst = w
            .data()
            .chunks(3)
            .flat_map(|px| px.iter().zip(mean.data()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        Ok((worst <= 1e-6, format!("max deviation {worst:.3e}")))
    }));

    out.push(check("netpbm round trip", || {
        let mut rng = seeded_rng(60);
        let t = gaussian(&mut rng, &[5, 7, 3], 1.0)?;
        let img = Image::from_tensor(t.map(|v| (v.abs() * 97.0).round() % 256.0 / 255.0))?;
        let bytes = encode(&img);
        let back = decode(&bytes)?;
        Ok((back == img && encode(&back) == bytes, format!("{} bytes", bytes.len())))
    }));

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in run_selftest() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
