//! Single-hypothesis GAN inversion: optimize latent codes and channel
//! importances so the downsampled generator output matches a guide image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ExtractorWeights;
use crate::generator::{GeneratorSpec, LatentCodeSet};
use crate::image::Image;
use crate::numerics::ops::{mean_pool, mean_pool_backward};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tensor};

pub const DEFAULT_STEPS: usize = 400;
pub const DEFAULT_PERCEPTUAL_WEIGHT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    L1,
    L2,
    Perceptual,
    /// `L2 + perceptual_weight * perceptual`.
    Combined,
}

impl DistanceKind {
    pub fn needs_extractor(self) -> bool {
        matches!(self, DistanceKind::Perceptual | DistanceKind::Combined)
    }
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "perceptual" => Ok(Self::Perceptual),
            "combined" | "l2+perceptual" => Ok(Self::Combined),
            other => Err(Error::Config(format!("unknown distance kind {other:?}"))),
        }
    }
}

/// One composing-layer hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisConfig {
    pub composing_layer: usize,
    pub code_count: usize,
    pub seed: u64,
    pub steps: usize,
    pub distance: DistanceKind,
}

/// Result of optimizing one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionHypothesis {
    pub config: HypothesisConfig,
    pub final_codes: LatentCodeSet,
    /// Best visited generator output at full resolution.
    pub output: Image,
    pub loss_trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Filled in by selection.
    pub fid_score: Option<f64>,
}

/// Non-overlapping box average by `factor`.
pub fn downsample(image: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::invalid("downsample", "factor must be positive"));
    }
    Image::from_tensor_clamped(mean_pool(image.tensor(), factor)?)
}

/// A distance function bound to its weight and, for perceptual kinds, an
/// extractor.
#[derive(Clone, Copy, Debug)]
pub struct Distance<'a> {
    pub kind: DistanceKind,
    pub perceptual_weight: f64,
    pub extractor: Option<&'a ExtractorWeights>,
}

impl<'a> Distance<'a> {
    pub fn new(kind: DistanceKind, extractor: Option<&'a ExtractorWeights>) -> Self {
        Self {
            kind,
            perceptual_weight: DEFAULT_PERCEPTUAL_WEIGHT,
            extractor,
        }
    }

    fn extractor(&self) -> Result<&'a ExtractorWeights> {
        self.extractor
            .ok_or_else(|| Error::invalid("distance", format!("{:?} distance needs extractor weights", self.kind)))
    }

    pub fn eval(&self, a: &Image, b: &Image) -> Result<f64> {
        if !a.same_shape(b) {
            return Err(Error::shape(
                "distance",
                format!("{:?} vs {:?}", a.tensor().shape(), b.tensor().shape()),
            ));
        }
        let pixel = || match self.kind {
            DistanceKind::L1 => mean_abs_diff(a.data(), b.data()),
            _ => mean_sq_diff(a.data(), b.data()),
        };
        match self.kind {
            DistanceKind::L1 | DistanceKind::L2 => Ok(pixel()),
            DistanceKind::Perceptual => self.perceptual(a.to_rgb().tensor(), b.to_rgb().tensor()),
            DistanceKind::Combined => {
                let p = self.perceptual(a.to_rgb().tensor(), b.to_rgb().tensor())?;
                Ok(pixel() + self.perceptual_weight * p)
            }
        }
    }

    fn perceptual(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let ex = self.extractor()?;
        let fa = ex.forward(a)?;
        let fb = ex.forward(b)?;
        Ok(mean_sq_diff(fa.values().data(), fb.values().data()))
    }
}

/// `distance` with the default perceptual weight.
pub fn distance(a: &Image, b: &Image, kind: DistanceKind, weights: Option<&ExtractorWeights>) -> Result<f64> {
    Distance::new(kind, weights).eval(a, b)
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Distance against a fixed guide, with guide features computed once.
struct GuidedObjective<'a> {
    distance: Distance<'a>,
    guide: &'a Image,
    guide_features: Option<Tensor>,
}

impl<'a> GuidedObjective<'a> {
    fn new(distance: Distance<'a>, guide: &'a Image) -> Result<Self> {
        let guide_features = if distance.kind.needs_extractor() {
            Some(distance.extractor()?.forward(guide.tensor())?.values().clone())
        } else {
            None
        };
        Ok(Self {
            distance,
            guide,
            guide_features,
        })
    }

    /// Loss and its gradient with respect to `x`. The value is computed by
    /// the same arithmetic as [`Distance::eval`].
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let g = self.guide.data();
        let n = x.len() as f64;
        let (mut value, mut grad) = match self.distance.kind {
            DistanceKind::L1 => (
                mean_abs_diff(x.data(), g),
                x.data().iter().zip(g).map(|(a, b)| (a - b).signum() * f64::from(a != b) / n).collect(),
            ),
            DistanceKind::L2 | DistanceKind::Combined => (
                mean_sq_diff(x.data(), g),
                x.data().iter().zip(g).map(|(a, b)| 2.0 * (a - b) / n).collect(),
            ),
            DistanceKind::Perceptual => (0.0, vec![0.0; x.len()]),
        };
        if let Some(gf) = &self.guide_features {
            let ex = self.distance.extractor()?;
            let (fx, trace) = ex.forward_traced(x)?;
            let fd = fx.values().data();
            let m = fd.len() as f64;
            let p = mean_sq_diff(fd, gf.data());
            let w = match self.distance.kind {
                DistanceKind::Combined => self.distance.perceptual_weight,
                _ => 1.0,
            };
            value = match self.distance.kind {
                DistanceKind::Combined => value + w * p,
                _ => p,
            };
            let g_feat = Tensor::new(
                fx.values().shape().to_vec(),
                fd.iter().zip(gf.data()).map(|(a, b)| w * 2.0 * (a - b) / m).collect(),
            )?;
            let g_img = trace.backward(&g_feat)?;
            grad.iter_mut().zip(g_img.data()).for_each(|(a, b)| *a += b);
        }
        Ok((value, Tensor::new(x.shape().to_vec(), grad)?))
    }
}

/// Optimizer and objective settings shared by all hypotheses of a run.
#[derive(Clone, Copy, Debug)]
pub struct InversionSettings<'a> {
    pub factor: usize,
    pub adam: AdamConfig,
    pub perceptual_weight: f64,
    pub extractor: Option<&'a ExtractorWeights>,
}

impl<'a> InversionSettings<'a> {
    pub fn new(factor: usize, extractor: Option<&'a ExtractorWeights>) -> Self {
        Self {
            factor,
            adam: AdamConfig::default(),
            perceptual_weight: DEFAULT_PERCEPTUAL_WEIGHT,
            extractor,
        }
    }
}

/// Minimizes `D(down(y), guide)` over codes and importances with Adam,
/// returning the best visited point.
pub fn invert(
    spec: &GeneratorSpec,
    cfg: &HypothesisConfig,
    guide: &Image,
    settings: &InversionSettings<'_>,
) -> Result<InversionHypothesis> {
    let n = cfg.composing_layer;
    spec.check_composing_layer(n)?;
    if cfg.code_count == 0 {
        return Err(Error::invalid("invert", "code_count must be >= 1"));
    }
    let res = spec.output_resolution();
    if guide.height() * settings.factor != res || guide.width() * settings.factor != res {
        return Err(Error::shape(
            "invert",
            format!(
                "guide {}x{} times factor {} must equal generator output {res}x{res}",
                guide.height(),
                guide.width(),
                settings.factor
            ),
        ));
    }
    if guide.channels() != crate::generator::OUTPUT_CHANNELS {
        return Err(Error::shape("invert", format!("guide must have 3 channels, got {}", guide.channels())));
    }
    settings.adam.validate()?;

    let objective = GuidedObjective::new(
        Distance {
            kind: cfg.distance,
            perceptual_weight: settings.perceptual_weight,
            extractor: settings.extractor,
        },
        guide,
    )?;
    let mut codes = LatentCodeSet::seeded(spec, n, cfg.code_count, cfg.seed)?;
    let mut code_states = codes
        .codes
        .iter()
        .map(|z| AdamState::new(z.shape()))
        .collect::<Result<Vec<_>>>()?;
    let mut alpha_states = codes
        .importances
        .iter()
        .map(|a| AdamState::new(a.shape()))
        .collect::<Result<Vec<_>>>()?;

    let mut trace = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, LatentCodeSet, Image)> = None;

    if cfg.steps == 0 {
        let y = spec.generate(&codes, n)?;
        let (loss, _) = objective.value_and_grad(&mean_pool(y.tensor(), settings.factor)?)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { layer: n, step: 0 });
        }
        best = Some((loss, codes.clone(), y));
    }

    for step in 0..cfg.steps {
        let (y, grads) = {
            let (y, tape) = spec.generate_with_grads(&codes, n)?;
            let down = mean_pool(y.tensor(), settings.factor)?;
            let (loss, g_down) = objective.value_and_grad(&down)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { layer: n, step });
            }
            trace.push(loss);
            let g_y = mean_pool_backward(&g_down, settings.factor)?;
            (y, tape.backward(&g_y)?)
        };
        let loss = *trace.last().expect("pushed");
        if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
            best = Some((loss, codes.clone(), y));
        }

        let mut next_codes = Vec::with_capacity(codes.len());
        for ((z, g), st) in codes.codes.iter().zip(&grads.codes).zip(code_states.iter_mut()) {
            let (z2, s2) = adam_step(z, g, st, &settings.adam)?;
            next_codes.push(z2);
            *st = s2;
        }
        let mut next_alphas = Vec::with_capacity(codes.len());
        for ((a, g), st) in codes.importances.iter().zip(&grads.importances).zip(alpha_states.iter_mut()) {
            let (a2, s2) = adam_step(a, g, st, &settings.adam)?;
            next_alphas.push(a2);
            *st = s2;
        }
        codes = LatentCodeSet::new(next_codes, next_alphas)?;
    }

    let (final_loss, final_codes, output) = best.expect("at least one evaluation");
    let initial_loss = trace.first().copied().unwrap_or(final_loss);
    Ok(InversionHypothesis {
        config: cfg.clone(),
        final_codes,
        output,
        loss_trace: trace,
        initial_loss,
        final_loss,
        fid_score: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_examples() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample(&img, 1).unwrap(), img);
        assert_eq!(downsample(&img, 2).unwrap().data(), &[0.5]);
        let flat = Image::constant(8, 8, 3, 0.25).unwrap();
        assert_eq!(downsample(&flat, 4).unwrap(), Image::constant(2, 2, 3, 0.25).unwrap());
        assert!(matches!(downsample(&img, 3), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn distance_examples() {
        let ex = ExtractorWeights::with_default_widths(1).unwrap();
        let x = Image::new(4, 4, 3, (0..48).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        for kind in [DistanceKind::L1, DistanceKind::L2, DistanceKind::Perceptual, DistanceKind::Combined] {
            assert_eq!(distance(&x, &x, kind, Some(&ex)).unwrap(), 0.0);
        }
        let a = Image::new(1, 1, 1, vec![0.0]).unwrap();
        let b = Image::new(1, 1, 1, vec![0.5]).unwrap();
        assert_eq!(distance(&a, &b, DistanceKind::L2, None).unwrap(), 0.25);
        assert_eq!(distance(&a, &b, DistanceKind::L1, None).unwrap(), 0.5);
    }

    #[test]
    fn combined_with_zero_weight_is_l2() {
        let ex = ExtractorWeights::with_default_widths(1).unwrap();
        let a = Image::new(4, 4, 3, (0..48).map(|i| (i as f64 * 0.11).cos().abs()).collect()).unwrap();
        let b = Image::new(4, 4, 3, (0..48).map(|i| (i as f64 * 0.23).sin().abs()).collect()).unwrap();
        let combined = Distance {
            kind: DistanceKind::Combined,
            perceptual_weight: 0.0,
            extractor: Some(&ex),
        };
        let l2 = distance(&a, &b, DistanceKind::L2, None).unwrap();
        assert_eq!(combined.eval(&a, &b).unwrap().to_bits(), l2.to_bits());
    }

    #[test]
    fn distance_shape_mismatch() {
        let a = Image::constant(2, 2, 3, 0.1).unwrap();
        let b = Image::constant(2, 1, 3, 0.1).unwrap();
        assert!(distance(&a, &b, DistanceKind::L2, None).is_err());
        assert!(distance(&a, &a, DistanceKind::Perceptual, None).is_err());
    }

    #[test]
    fn parses_kinds() {
        assert_eq!("l2".parse::<DistanceKind>().unwrap(), DistanceKind::L2);
        assert_eq!("Combined".parse::<DistanceKind>().unwrap(), DistanceKind::Combined);
        assert!("l3".parse::<DistanceKind>().is_err());
    }
}
