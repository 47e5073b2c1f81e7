//! Dense cross-domain correspondence: channel-wise centralization, cosine
//! correlation between every source and target position, and the
//! softmax-weighted warp of the target exemplar onto the source layout.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::image::Image;
use crate::numerics::ops::{channel_mean, mean_pool};
use crate::numerics::{softmax_rows, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpConfig {
    /// Multiplier applied to correlations before the row softmax.
    pub temperature: f64,
    /// Floor on feature-vector norms in the cosine denominator.
    pub epsilon_norm: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            temperature: 100.0,
            epsilon_norm: 1e-8,
        }
    }
}

impl WarpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("WarpConfig", format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.epsilon_norm > 0.0) {
            return Err(Error::invalid("WarpConfig", format!("epsilon_norm must be positive, got {}", self.epsilon_norm)));
        }
        Ok(())
    }
}

/// Row `u` holds the cosine correlation of source position `u` against
/// every target position.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    entries: Tensor,
    source_dims: (usize, usize),
    target_dims: (usize, usize),
}

impl CorrelationMatrix {
    /// Wraps a raw `[source H*W, target H*W]` matrix.
    pub fn from_entries(entries: Tensor, source_dims: (usize, usize), target_dims: (usize, usize)) -> Result<Self> {
        if entries.shape() != [source_dims.0 * source_dims.1, target_dims.0 * target_dims.1] {
            return Err(Error::shape(
                "CorrelationMatrix",
                format!("{:?} does not match {source_dims:?} x {target_dims:?}", entries.shape()),
            ));
        }
        entries.ensure_finite("CorrelationMatrix")?;
        Ok(Self {
            entries,
            source_dims,
            target_dims,
        })
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    pub fn target_dims(&self) -> (usize, usize) {
        self.target_dims
    }

    pub fn rows(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.entries.data()[u * self.cols() + v]
    }
}

/// Subtracts the per-channel spatial mean.
pub fn centralize(f: &FeatureMap) -> Result<FeatureMap> {
    let mean = channel_mean(f.values())?;
    let c = f.channels();
    let mut out = f.values().data().to_vec();
    for px in out.chunks_exact_mut(c) {
        for (v, m) in px.iter_mut().zip(mean.data()) {
            *v -= m;
        }
    }
    FeatureMap::new(Tensor::new(f.values().shape().to_vec(), out)?)
}

/// Cosine correlation of centralized source and target features.
pub fn correlation_matrix(f_s_hat: &FeatureMap, f_t_hat: &FeatureMap, eps: f64) -> Result<CorrelationMatrix> {
    if f_s_hat.channels() != f_t_hat.channels() {
        return Err(Error::shape(
            "correlation_matrix",
            format!("source has {} channels, target {}", f_s_hat.channels(), f_t_hat.channels()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("correlation_matrix", "eps must be positive"));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    let (rows, cols) = (f_s_hat.positions(), f_t_hat.positions());
    let t_norms: Vec<f64> = (0..cols).map(|v| norm(f_t_hat.at(v))).collect();
    let mut data = vec![0.0; rows * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(u, row)| {
        let fs = f_s_hat.at(u);
        let ns = norm(fs);
        for (v, out) in row.iter_mut().enumerate() {
            let dot: f64 = fs.iter().zip(f_t_hat.at(v)).map(|(a, b)| a * b).sum();
            *out = dot / (ns * t_norms[v]);
        }
    });
    CorrelationMatrix::from_entries(
        Tensor::new(vec![rows, cols], data)?,
        (f_s_hat.height(), f_s_hat.width()),
        (f_t_hat.height(), f_t_hat.width()),
    )
}

/// Integer factor relating an image to a grid, if it divides evenly.
fn grid_factor(image: &Image, dims: (usize, usize), op: &'static str) -> Result<usize> {
    let (h, w) = dims;
    if image.height() % h != 0 || image.width() % w != 0 || image.height() / h != image.width() / w {
        return Err(Error::shape(
            op,
            format!(
                "target {}x{} is not a uniform multiple of the {h}x{w} feature grid",
                image.height(),
                image.width()
            ),
        ));
    }
    Ok(image.height() / h)
}

/// Softmax weights `softmax_v(temperature * M(u, v))`.
pub fn warp_weights(m: &CorrelationMatrix, cfg: &WarpConfig) -> Result<Tensor> {
    cfg.validate()?;
    softmax_rows(m.entries(), cfg.temperature)
}

/// Clamps each channel into the range spanned by `target`, so rounding in
/// the weighted sums cannot step outside the convex hull.
fn clamp_to_target(values: &mut [f64], target: &Image) {
    let ranges = target.channel_range();
    let c = ranges.len();
    for px in values.chunks_exact_mut(c) {
        for (v, &(lo, hi)) in px.iter_mut().zip(&ranges) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Warped exemplar at feature resolution.
///
/// The target is mean-pooled down to the target feature grid first; the
/// output has the source feature grid's spatial size.
pub fn warp(m: &CorrelationMatrix, target: &Image, cfg: &WarpConfig) -> Result<Image> {
    let factor = grid_factor(target, m.target_dims(), "warp")?;
    let pooled = Image::from_tensor_clamped(mean_pool(target.tensor(), factor)?)?;
    let weights = warp_weights(m, cfg)?;
    let c = pooled.channels();
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; rows * c];
    out.par_chunks_mut(c).enumerate().for_each(|(u, px)| {
        let wrow = &weights.data()[u * cols..(u + 1) * cols];
        for (v, &wv) in wrow.iter().enumerate() {
            for (o, t) in px.iter_mut().zip(&pooled.data()[v * c..(v + 1) * c]) {
                *o += wv * t;
            }
        }
    });
    clamp_to_target(&mut out, &pooled);
    let (h, w) = m.source_dims();
    Image::from_tensor_clamped(Tensor::new(vec![h, w, c], out)?)
}

/// Warped exemplar at the target's own resolution.
///
/// Each feature position owns a `p x p` patch of pixels; the softmax
/// weights of row `u` blend the target patches into output patch `u`.
/// Mean-pooling the result by `p` gives exactly [`warp`].
pub fn warp_patches(m: &CorrelationMatrix, target: &Image, cfg: &WarpConfig) -> Result<Image> {
    let p = grid_factor(target, m.target_dims(), "warp_patches")?;
    let weights = warp_weights(m, cfg)?;
    let c = target.channels();
    let (sh, sw) = m.source_dims();
    let (_, tw) = m.target_dims();
    let (out_w, tgt_w) = (sw * p, target.width());
    let cols = m.cols();
    let patch_len = p * p * c;
    // Gather target patches contiguously: patch v, row dy, col dx, channel.
    let mut patches = vec![0.0; cols * patch_len];
    for v in 0..cols {
        let (vy, vx) = (v / tw, v % tw);
        for dy in 0..p {
            let src = ((vy * p + dy) * tgt_w + vx * p) * c;
            let dst = v * patch_len + dy * p * c;
            patches[dst..dst + p * c].copy_from_slice(&target.data()[src..src + p * c]);
        }
    }
    let blended: Vec<Vec<f64>> = (0..m.rows())
        .into_par_iter()
        .map(|u| {
            let mut acc = vec![0.0; patch_len];
            for (v, &wv) in weights.data()[u * cols..(u + 1) * cols].iter().enumerate() {
                for (a, t) in acc.iter_mut().zip(&patches[v * patch_len..(v + 1) * patch_len]) {
                    *a += wv * t;
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; sh * p * out_w * c];
    for (u, patch) in blended.iter().enumerate() {
        let (uy, ux) = (u / sw, u % sw);
        for dy in 0..p {
            let dst = ((uy * p + dy) * out_w + ux * p) * c;
            out[dst..dst + p * c].copy_from_slice(&patch[dy * p * c..(dy + 1) * p * c]);
        }
    }
    clamp_to_target(&mut out, target);
    Image::from_tensor_clamped(Tensor::new(vec![sh * p, out_w, c], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(h: usize, w: usize, c: usize, data: &[f64]) -> FeatureMap {
        FeatureMap::new(Tensor::new(vec![h, w, c], data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn centralize_examples() {
        let flat = fmap(2, 2, 1, &[0.7; 4]);
        assert!(centralize(&flat).unwrap().values().data().iter().all(|&v| v == 0.0));
        let pair = fmap(1, 2, 1, &[1.0, 3.0]);
        assert_eq!(centralize(&pair).unwrap().values().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn hand_correlation_row() {
        let s = fmap(1, 2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let t = fmap(1, 2, 2, &[1.0, 1.0, 1.0, -1.0]);
        let m = correlation_matrix(&s, &t, 1e-8).unwrap();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(m.get(0, 1).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_positions_correlate_zero() {
        let s = fmap(1, 1, 2, &[1.0, 0.0]);
        let t = fmap(1, 1, 2, &[0.0, 1.0]);
        assert_eq!(correlation_matrix(&s, &t, 1e-8).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn zero_norm_positions_do_not_crash() {
        let s = fmap(1, 2, 1, &[0.0, 0.0]);
        let t = fmap(1, 2, 1, &[1.0, -1.0]);
        let m = correlation_matrix(&s, &t, 1e-8).unwrap();
        assert!(m.entries().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let s = fmap(1, 1, 2, &[1.0, 0.0]);
        let t = fmap(1, 1, 1, &[1.0]);
        assert!(correlation_matrix(&s, &t, 1e-8).is_err());
    }

    #[test]
    fn two_position_analytic_warp() {
        let m = CorrelationMatrix::from_entries(
            Tensor::matrix(&[vec![2f64.ln(), 0.0], vec![0.0, 2f64.ln()]]).unwrap(),
            (1, 2),
            (1, 2),
        )
        .unwrap();
        let target = Image::new(1, 2, 1, vec![0.9, 0.3]).unwrap();
        let cfg = WarpConfig { temperature: 1.0, ..Default::default() };
        let r = warp(&m, &target, &cfg).unwrap();
        assert!((r.data()[0] - (2.0 / 3.0 * 0.9 + 1.0 / 3.0 * 0.3)).abs() < 1e-12);
    }

    #[test]
    fn warp_dimension_mismatch_rejected() {
        let m = CorrelationMatrix::from_entries(Tensor::zeros(&[4, 4]).unwrap(), (2, 2), (2, 2)).unwrap();
        let target = Image::constant(3, 3, 3, 0.5).unwrap();
        assert!(warp(&m, &target, &WarpConfig::default()).is_err());
    }
}
