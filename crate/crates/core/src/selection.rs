//! Hypothesis scoring by Fréchet distance and argmin selection.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{embed_for_fid, ExtractorWeights};
use crate::generator::GeneratorSpec;
use crate::image::Image;
use crate::inversion::{downsample, InversionHypothesis};
use crate::numerics::linalg::{psd_sqrt, symmetric_eigen, symmetrize, PSD_REJECT_TOLERANCE};
use crate::numerics::ops::matmul;
use crate::numerics::{derive_seed, seeded_rng, Tensor};

use rand::Rng;

/// Gaussian summary of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FidStats {
    pub mean: Tensor,
    pub covariance: Tensor,
    pub sample_count: usize,
}

impl FidStats {
    /// Mean and unbiased covariance, symmetrized.
    pub fn from_embeddings(embeddings: &[Tensor]) -> Result<Self> {
        if embeddings.len() < 2 {
            return Err(Error::invalid(
                "fid_stats",
                format!("need at least 2 samples, got {}", embeddings.len()),
            ));
        }
        let d = embeddings[0].len();
        if embeddings.iter().any(|e| e.shape() != [d]) {
            return Err(Error::shape("fid_stats", "embeddings differ in length"));
        }
        let n = embeddings.len();
        let mut mean = vec![0.0; d];
        for e in embeddings {
            mean.iter_mut().zip(e.data()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for e in embeddings {
            let c: Vec<f64> = e.data().iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        Ok(Self {
            mean: Tensor::new(vec![d], mean)?,
            covariance: symmetrize(&Tensor::new(vec![d, d], cov)?)?,
            sample_count: n,
        })
    }

    /// Direct construction, e.g. from known Gaussian parameters.
    pub fn new(mean: Tensor, covariance: Tensor, sample_count: usize) -> Result<Self> {
        let d = mean.len();
        if mean.shape() != [d] || covariance.shape() != [d, d] {
            return Err(Error::shape(
                "FidStats",
                format!("mean {:?} with covariance {:?}", mean.shape(), covariance.shape()),
            ));
        }
        if sample_count < 2 {
            return Err(Error::invalid("FidStats", "sample_count must be >= 2"));
        }
        Ok(Self {
            mean,
            covariance,
            sample_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fid_stats(images: &[Image], weights: &ExtractorWeights) -> Result<FidStats> {
    if images.len() < 2 {
        return Err(Error::invalid("fid_stats", format!("need at least 2 images, got {}", images.len())));
    }
    if images.iter().any(|im| !im.same_shape(&images[0])) {
        return Err(Error::shape("fid_stats", "images differ in shape"));
    }
    let embeddings = images
        .par_iter()
        .map(|im| embed_for_fid(im, weights))
        .collect::<Result<Vec<_>>>()?;
    FidStats::from_embeddings(&embeddings)
}

fn trace(m: &Tensor) -> f64 {
    let n = m.shape()[0];
    (0..n).map(|i| m.data()[i * n + i]).sum()
}

/// `|mu_a - mu_b|^2 + Tr(S_a) + Tr(S_b) - 2 Tr((S_a^1/2 S_b S_a^1/2)^1/2)`,
/// clamped at zero.
pub fn frechet_distance(a: &FidStats, b: &FidStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "frechet_distance",
            format!("dimension {} vs {}", a.dim(), b.dim()),
        ));
    }
    let mean_term: f64 = a
        .mean
        .data()
        .iter()
        .zip(b.mean.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let root_a = psd_sqrt(&a.covariance)?;
    // b must itself be PSD; the product check alone would not catch it.
    if let Some(&l) = symmetric_eigen(&b.covariance)?
        .values
        .iter()
        .find(|&&l| l < -PSD_REJECT_TOLERANCE)
    {
        return Err(Error::NotPsd { eigenvalue: l });
    }
    let inner = symmetrize(&matmul(&matmul(&root_a, &b.covariance)?, &root_a)?)?;
    let cross = trace(&psd_sqrt(&inner)?);
    let d = mean_term + trace(&a.covariance) + trace(&b.covariance) - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Seeded half-resolution crops, box-pooled to the embedding input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSampler {
    pub count: usize,
    pub seed: u64,
    pub embed_size: usize,
}

impl CropSampler {
    pub fn describe(&self) -> String {
        format!(
            "{} seeded crops of half resolution per image, box-pooled to {}x{}",
            self.count, self.embed_size, self.embed_size
        )
    }

    fn pool_factor(&self, image: &Image) -> Result<usize> {
        let crop = image.height().min(image.width()) / 2;
        if self.embed_size == 0 || crop == 0 || crop % self.embed_size != 0 {
            return Err(Error::invalid(
                "crop sampling",
                format!(
                    "half-resolution crop {crop} of a {}x{} image is not a multiple of embed size {}",
                    image.height(),
                    image.width(),
                    self.embed_size
                ),
            ));
        }
        Ok(crop / self.embed_size)
    }

    /// `count` crops of `image` drawn from the stream tagged `tag`.
    pub fn crops(&self, image: &Image, tag: u64, count: usize) -> Result<Vec<Image>> {
        let factor = self.pool_factor(image)?;
        let crop = factor * self.embed_size;
        let mut rng = seeded_rng(derive_seed(self.seed, tag));
        (0..count)
            .map(|_| {
                let top = rng.random_range(0..=image.height() - crop);
                let left = rng.random_range(0..=image.width() - crop);
                downsample(&image.crop(top, left, crop, crop)?, factor)
            })
            .collect()
    }
}

const REFERENCE_TAG: u64 = 0x5245_4645_5245_4E43; // "REFERENC"

/// Reference statistics from seeded samples of the frozen generator; one
/// crop per sample.
pub fn reference_from_generator(
    spec: &GeneratorSpec,
    sample_count: usize,
    seed: u64,
    sampler: &CropSampler,
    weights: &ExtractorWeights,
) -> Result<FidStats> {
    let crops = (0..sample_count)
        .into_par_iter()
        .map(|i| {
            let img = spec.sample(derive_seed(seed, i as u64))?;
            Ok(sampler.crops(&img, REFERENCE_TAG ^ i as u64, 1)?.remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    fid_stats(&crops, weights)
}

/// Reference statistics from a fixed image collection, cycling through the
/// images until `sample_count` crops are drawn.
pub fn reference_from_images(
    images: &[Image],
    sample_count: usize,
    sampler: &CropSampler,
    weights: &ExtractorWeights,
) -> Result<FidStats> {
    if images.is_empty() {
        return Err(Error::invalid("reference_from_images", "no reference images"));
    }
    let crops = (0..sample_count)
        .map(|i| {
            let img = images[i % images.len()].to_rgb();
            Ok(sampler.crops(&img, REFERENCE_TAG ^ i as u64, 1)?.remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    fid_stats(&crops, weights)
}

/// Score of one output image against the reference.
pub fn score_image(
    image: &Image,
    tag: u64,
    reference: &FidStats,
    sampler: &CropSampler,
    weights: &ExtractorWeights,
) -> Result<f64> {
    let crops = sampler.crops(image, tag, sampler.count)?;
    frechet_distance(&fid_stats(&crops, weights)?, reference)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionReport {
    pub hypotheses: Vec<InversionHypothesis>,
    pub chosen_index: usize,
    pub final_image: Image,
    pub reference_description: String,
}

/// Index of the lowest score; ties go to the smallest composing layer.
pub fn choose_index(hypotheses: &[InversionHypothesis]) -> Result<usize> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("select_best", "no hypotheses to select from"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in hypotheses.iter().enumerate() {
        let score = h.fid_score.ok_or_else(|| {
            Error::invalid(
                "select_best",
                format!("hypothesis for layer {} has no score", h.config.composing_layer),
            )
        })?;
        let better = match best {
            None => true,
            Some((j, s)) => {
                score < s || (score == s && h.config.composing_layer < hypotheses[j].config.composing_layer)
            }
        };
        if better {
            best = Some((i, score));
        }
    }
    Ok(best.expect("non-empty").0)
}

/// Builds a report from hypotheses whose scores are already set.
pub fn report_from_scored(
    hypotheses: Vec<InversionHypothesis>,
    reference_description: impl Into<String>,
) -> Result<SelectionReport> {
    let chosen_index = choose_index(&hypotheses)?;
    let final_image = hypotheses[chosen_index].output.clone();
    Ok(SelectionReport {
        hypotheses,
        chosen_index,
        final_image,
        reference_description: reference_description.into(),
    })
}

/// Scores every hypothesis against the reference and selects the argmin.
pub fn select_best(
    mut hypotheses: Vec<InversionHypothesis>,
    reference: &FidStats,
    weights: &ExtractorWeights,
    sampler: &CropSampler,
    reference_description: impl Into<String>,
) -> Result<SelectionReport> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("select_best", "no hypotheses to select from"));
    }
    let scores = hypotheses
        .par_iter()
        .map(|h| score_image(&h.output, h.config.composing_layer as u64, reference, sampler, weights))
        .collect::<Result<Vec<_>>>()?;
    for (h, s) in hypotheses.iter_mut().zip(scores) {
        h.fid_score = Some(s);
    }
    let report = report_from_scored(hypotheses, reference_description)?;
    let k_star = report.hypotheses[report.chosen_index].fid_score.expect("scored");
    debug_assert!(report.hypotheses.iter().all(|h| k_star <= h.fid_score.expect("scored")));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicated_embedding_has_zero_covariance() {
        let e = Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap();
        let s = FidStats::from_embeddings(&[e.clone(), e.clone()]).unwrap();
        assert_eq!(s.mean, e);
        assert!(s.covariance.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_dimensional_unbiased_variance() {
        let s = FidStats::from_embeddings(&[Tensor::vector(vec![0.0]).unwrap(), Tensor::vector(vec![2.0]).unwrap()]).unwrap();
        assert_eq!(s.mean.data(), &[1.0]);
        assert_eq!(s.covariance.data(), &[2.0]);
    }

    #[test]
    fn needs_two_samples() {
        assert!(FidStats::from_embeddings(&[Tensor::vector(vec![1.0]).unwrap()]).is_err());
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = FidStats::new(Tensor::vector(vec![0.0]).unwrap(), Tensor::matrix(&[vec![1.0]]).unwrap(), 2).unwrap();
        let b = FidStats::new(Tensor::vector(vec![3.0]).unwrap(), Tensor::matrix(&[vec![4.0]]).unwrap(), 2).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_and_non_psd_rejected() {
        let a = FidStats::new(Tensor::vector(vec![0.0]).unwrap(), Tensor::matrix(&[vec![1.0]]).unwrap(), 2).unwrap();
        let b = FidStats::new(Tensor::zeros(&[2]).unwrap(), Tensor::identity(2).unwrap(), 2).unwrap();
        assert!(frechet_distance(&a, &b).is_err());
        let bad = FidStats::new(Tensor::vector(vec![0.0]).unwrap(), Tensor::matrix(&[vec![-1.0]]).unwrap(), 2).unwrap();
        assert!(matches!(frechet_distance(&a, &bad), Err(Error::NotPsd { .. })));
        assert!(matches!(frechet_distance(&bad, &a), Err(Error::NotPsd { .. })));
    }
}
