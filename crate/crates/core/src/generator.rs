//! Seeded progressive-style generator with multi-code composition.
//!
//! Layer 1 maps a latent code to a `base x base` grid through a dense map.
//! Layers `2..L-1` each double resolution (nearest upsample, 3x3 conv).
//! Layer `L` is a 3x3 conv to RGB followed by `(tanh + 1) / 2`. Every layer
//! begins with pixel normalization of its input.
//!
//! With `K` codes and composing layer `n`, each code is run through layers
//! `1..=n`, the resulting maps are blended channel-wise with per-code
//! importance vectors, and the blend is decoded by layers `n+1..=L`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::ops::{
    conv3x3, conv3x3_backward_input, leaky_relu, leaky_relu_backward, matmul, pixel_norm,
    pixel_norm_backward, tanh, tanh_backward, transpose, upsample2_conv3x3,
    upsample2_conv3x3_backward_input, LEAKY_SLOPE,
};
use crate::numerics::{derive_seed, gaussian, seeded_rng, Tensor};

const GENERATOR_STREAM: u64 = 0x4745_4E52; // "GENR"
const CODE_STREAM: u64 = 0x434F_4445; // "CODE"

pub const OUTPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorArchitecture {
    pub latent_dim: usize,
    pub layer_count: usize,
    pub base_resolution: usize,
    /// Channels produced by layers `1..L-1`; `None` selects the default schedule.
    pub channels: Option<Vec<usize>>,
}

impl Default for GeneratorArchitecture {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            layer_count: 6,
            base_resolution: 4,
            channels: None,
        }
    }
}

/// Default width of (1-based) layer `l`: 16 channels early, tapering to 4.
pub fn default_channels(layer: usize) -> usize {
    (64usize >> layer.min(6)).clamp(4, 16)
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Dense { weight: Tensor, bias: Tensor },
    Conv { kernel: Tensor, bias: Tensor },
}

/// Frozen generator weights. There is no API that mutates them after build.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    seed: u64,
    latent_dim: usize,
    base_resolution: usize,
    channels: Vec<usize>,
    layers: Vec<Layer>,
}

pub fn build_generator(seed: u64, arch: &GeneratorArchitecture) -> Result<GeneratorSpec> {
    let l = arch.layer_count;
    if l < 2 {
        return Err(Error::invalid("build_generator", format!("layer_count must be >= 2, got {l}")));
    }
    if arch.latent_dim == 0 || arch.base_resolution == 0 {
        return Err(Error::invalid("build_generator", "latent_dim and base_resolution must be positive"));
    }
    let channels = match &arch.channels {
        Some(c) if c.len() != l - 1 || c.contains(&0) => {
            return Err(Error::invalid(
                "build_generator",
                format!("need {} positive channel counts, got {c:?}", l - 1),
            ))
        }
        Some(c) => c.clone(),
        None => (1..l).map(default_channels).collect(),
    };
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let mut rng = seeded_rng(derive_seed(seed, GENERATOR_STREAM));
    let mut layers = Vec::with_capacity(l);
    let base_cells = arch.base_resolution * arch.base_resolution;
    layers.push(Layer::Dense {
        weight: gaussian(&mut rng, &[arch.latent_dim, base_cells * channels[0]], gain / (arch.latent_dim as f64).sqrt())?,
        bias: gaussian(&mut rng, &[base_cells * channels[0]], 0.1)?,
    });
    for i in 1..l {
        let cin = channels[i - 1];
        let (cout, g) = if i == l - 1 { (OUTPUT_CHANNELS, 1.0) } else { (channels[i], gain) };
        layers.push(Layer::Conv {
            kernel: gaussian(&mut rng, &[3, 3, cin, cout], g / ((9 * cin) as f64).sqrt())?,
            bias: gaussian(&mut rng, &[cout], 0.1)?,
        });
    }
    Ok(GeneratorSpec {
        seed,
        latent_dim: arch.latent_dim,
        base_resolution: arch.base_resolution,
        channels,
        layers,
    })
}

/// Codes `z_k` and channel importances `alpha_k` for one composition.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodeSet {
    pub codes: Vec<Tensor>,
    pub importances: Vec<Tensor>,
}

impl LatentCodeSet {
    pub fn new(codes: Vec<Tensor>, importances: Vec<Tensor>) -> Result<Self> {
        if codes.is_empty() || codes.len() != importances.len() {
            return Err(Error::invalid(
                "LatentCodeSet",
                format!("need K >= 1 codes with one importance each, got {} and {}", codes.len(), importances.len()),
            ));
        }
        let (d, c) = (codes[0].shape(), importances[0].shape());
        if d.len() != 1 || c.len() != 1 {
            return Err(Error::shape("LatentCodeSet", "codes and importances must be vectors"));
        }
        if codes.iter().any(|z| z.shape() != d) || importances.iter().any(|a| a.shape() != c) {
            return Err(Error::shape("LatentCodeSet", "all codes and all importances must share a length"));
        }
        Ok(Self { codes, importances })
    }

    /// Unit-Gaussian codes and all-ones importances for layer `n`.
    pub fn seeded(spec: &GeneratorSpec, n: usize, count: usize, seed: u64) -> Result<Self> {
        let c = spec.composing_channels(n)?;
        let mut rng = seeded_rng(derive_seed(seed, CODE_STREAM));
        let codes = (0..count)
            .map(|_| gaussian(&mut rng, &[spec.latent_dim], 1.0))
            .collect::<Result<Vec<_>>>()?;
        let importances = (0..count).map(|_| Tensor::ones(&[c])).collect::<Result<Vec<_>>>()?;
        Self::new(codes, importances)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Gradients of a scalar loss with respect to every code and importance.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrads {
    pub codes: Vec<Tensor>,
    pub importances: Vec<Tensor>,
}

/// Per-layer activations kept for the backward pass.
struct LayerTrace {
    input: Tensor,
    conv_input_shape: Vec<usize>,
    pre: Tensor,
}

impl GeneratorSpec {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn output_resolution(&self) -> usize {
        self.base_resolution << (self.layer_count() - 2)
    }

    /// Valid composing layers are `1..=L-1`.
    pub fn check_composing_layer(&self, n: usize) -> Result<()> {
        if n == 0 || n >= self.layer_count() {
            return Err(Error::invalid(
                "generate",
                format!("composing layer must lie in [1, {}], got {n}", self.layer_count() - 1),
            ));
        }
        Ok(())
    }

    /// Channel count of the map produced by (1-based) layer `n`.
    pub fn composing_channels(&self, n: usize) -> Result<usize> {
        self.check_composing_layer(n)?;
        Ok(self.channels[n - 1])
    }

    fn check_codes(&self, codes: &LatentCodeSet, n: usize) -> Result<()> {
        let c = self.composing_channels(n)?;
        if codes.codes[0].shape() != [self.latent_dim] {
            return Err(Error::shape(
                "generate",
                format!("codes have length {}, generator expects {}", codes.codes[0].len(), self.latent_dim),
            ));
        }
        if codes.importances[0].shape() != [c] {
            return Err(Error::shape(
                "generate",
                format!("importances have {} channels, layer {n} has {c}", codes.importances[0].len()),
            ));
        }
        Ok(())
    }

    /// Runs 0-based layer `i` on `x`. Returns the output and its trace.
    fn layer_forward(&self, i: usize, x: &Tensor) -> Result<(Tensor, LayerTrace)> {
        let normed = pixel_norm(x)?;
        let last = i + 1 == self.layer_count();
        let (conv_input_shape, pre) = match &self.layers[i] {
            Layer::Dense { weight, bias } => {
                let row = normed.reshape(vec![1, self.latent_dim])?;
                let mut pre = matmul(&row, weight)?.into_data();
                pre.iter_mut().zip(bias.data()).for_each(|(p, b)| *p += b);
                let b = self.base_resolution;
                (vec![1, self.latent_dim], Tensor::new(vec![b, b, self.channels[0]], pre)?)
            }
            Layer::Conv { kernel, bias } if last => (normed.shape().to_vec(), conv3x3(&normed, kernel, bias)?),
            Layer::Conv { kernel, bias } => (normed.shape().to_vec(), upsample2_conv3x3(&normed, kernel, bias)?),
        };
        let out = if last {
            tanh(&pre)?.map(|t| 0.5 * (t + 1.0))
        } else {
            leaky_relu(&pre)?
        };
        let trace = LayerTrace {
            input: x.clone(),
            conv_input_shape,
            pre,
        };
        Ok((out, trace))
    }

    fn layer_backward(&self, i: usize, trace: &LayerTrace, out: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let last = i + 1 == self.layer_count();
        let g_pre = if last {
            let t = out.map(|y| 2.0 * y - 1.0);
            tanh_backward(&t, &grad.map(|g| 0.5 * g))?
        } else {
            leaky_relu_backward(&trace.pre, grad)?
        };
        let g_normed = match &self.layers[i] {
            Layer::Dense { weight, .. } => {
                let g_row = g_pre.reshape(vec![1, weight.shape()[1]])?;
                matmul(&g_row, &transpose(weight)?)?.reshape(vec![self.latent_dim])?
            }
            Layer::Conv { kernel, .. } if last => conv3x3_backward_input(&trace.conv_input_shape, kernel, &g_pre)?,
            Layer::Conv { kernel, .. } => upsample2_conv3x3_backward_input(&trace.conv_input_shape, kernel, &g_pre)?,
        };
        pixel_norm_backward(&trace.input, &g_normed)
    }

    /// Layers `range` applied to `x`, keeping traces and outputs.
    fn run_layers(&self, range: std::ops::Range<usize>, x: &Tensor) -> Result<(Tensor, Vec<(LayerTrace, Tensor)>)> {
        let mut cur = x.clone();
        let mut traces = Vec::with_capacity(range.len());
        for i in range {
            let (out, trace) = self.layer_forward(i, &cur)?;
            traces.push((trace, out.clone()));
            cur = out;
        }
        Ok((cur, traces))
    }

    fn backward_layers(&self, start: usize, traces: &[(LayerTrace, Tensor)], grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for (offset, (trace, out)) in traces.iter().enumerate().rev() {
            g = self.layer_backward(start + offset, trace, out, &g)?;
        }
        Ok(g)
    }

    /// Feature map of one code after layers `1..=n`.
    pub fn features_at(&self, code: &Tensor, n: usize) -> Result<Tensor> {
        self.check_composing_layer(n)?;
        Ok(self.run_layers(0..n, code)?.0)
    }

    /// `sum_k alpha_k * F_{1..n}(z_k)`, broadcast over space.
    pub fn blend_at(&self, codes: &LatentCodeSet, n: usize) -> Result<Tensor> {
        self.check_codes(codes, n)?;
        let maps = codes
            .codes
            .par_iter()
            .map(|z| self.features_at(z, n))
            .collect::<Result<Vec<_>>>()?;
        blend(&maps, &codes.importances)
    }

    /// Decodes a blended layer-`n` map through layers `n+1..=L`.
    pub fn decode_from(&self, blended: &Tensor, n: usize) -> Result<Image> {
        self.check_composing_layer(n)?;
        Image::from_tensor_clamped(self.run_layers(n..self.layer_count(), blended)?.0)
    }

    pub fn generate(&self, codes: &LatentCodeSet, n: usize) -> Result<Image> {
        self.decode_from(&self.blend_at(codes, n)?, n)
    }

    /// Forward pass retaining everything needed for latent gradients.
    pub fn generate_with_grads<'a>(&'a self, codes: &'a LatentCodeSet, n: usize) -> Result<(Image, GenerateTape<'a>)> {
        self.check_codes(codes, n)?;
        let per_code = codes
            .codes
            .par_iter()
            .map(|z| self.run_layers(0..n, z))
            .collect::<Result<Vec<_>>>()?;
        let maps: Vec<Tensor> = per_code.iter().map(|(m, _)| m.clone()).collect();
        let blended = blend(&maps, &codes.importances)?;
        let (out, decoder) = self.run_layers(n..self.layer_count(), &blended)?;
        let image = Image::from_tensor_clamped(out)?;
        Ok((
            image,
            GenerateTape {
                spec: self,
                codes,
                n,
                code_traces: per_code,
                decoder,
            },
        ))
    }

    /// One plain sample: a single seeded code through the whole network.
    pub fn sample(&self, seed: u64) -> Result<Image> {
        self.generate(&LatentCodeSet::seeded(self, 1, 1, seed)?, 1)
    }
}

/// `sum_k alpha_k * F_k`, channel-wise over maps of shape `[h, w, c]`.
pub fn blend_maps(maps: &[Tensor], importances: &[Tensor]) -> Result<Tensor> {
    if maps.is_empty() || maps.len() != importances.len() {
        return Err(Error::shape(
            "blend",
            format!("{} maps vs {} importances", maps.len(), importances.len()),
        ));
    }
    let shape = maps[0].shape();
    let c = *shape.last().unwrap_or(&0);
    if let Some(bad) = maps.iter().find(|m| m.shape() != shape) {
        return Err(Error::shape("blend", format!("map {:?} vs {shape:?}", bad.shape())));
    }
    if let Some(bad) = importances.iter().find(|a| a.shape() != [c]) {
        return Err(Error::shape("blend", format!("importance {:?} vs {c} channels", bad.shape())));
    }
    blend(maps, importances)
}

fn blend(maps: &[Tensor], importances: &[Tensor]) -> Result<Tensor> {
    let mut acc = vec![0.0; maps[0].len()];
    let c = importances[0].len();
    for (map, alpha) in maps.iter().zip(importances) {
        for (apx, mpx) in acc.chunks_exact_mut(c).zip(map.data().chunks_exact(c)) {
            for ((a, m), w) in apx.iter_mut().zip(mpx).zip(alpha.data()) {
                *a += w * m;
            }
        }
    }
    Tensor::new(maps[0].shape().to_vec(), acc)
}

/// Gradients of one blend term `alpha * F`: returns `(dL/dF, dL/dalpha)`
/// given `dL/d(blend)`.
pub fn blend_term_backward(map: &Tensor, alpha: &Tensor, grad_blend: &Tensor) -> Result<(Tensor, Tensor)> {
    map.ensure_same_shape(grad_blend, "blend backward")?;
    let c = alpha.len();
    if map.shape().last() != Some(&c) {
        return Err(Error::shape("blend backward", format!("map {:?} vs {c} channels", map.shape())));
    }
    let mut g_alpha = vec![0.0; c];
    let mut g_map = vec![0.0; map.len()];
    for ((gpx, mpx), gmpx) in grad_blend
        .data()
        .chunks_exact(c)
        .zip(map.data().chunks_exact(c))
        .zip(g_map.chunks_exact_mut(c))
    {
        for ch in 0..c {
            g_alpha[ch] += gpx[ch] * mpx[ch];
            gmpx[ch] = gpx[ch] * alpha.data()[ch];
        }
    }
    Ok((Tensor::from_raw(map.shape().to_vec(), g_map), Tensor::from_raw(vec![c], g_alpha)))
}

/// Recorded forward pass of [`GeneratorSpec::generate_with_grads`].
pub struct GenerateTape<'a> {
    spec: &'a GeneratorSpec,
    codes: &'a LatentCodeSet,
    n: usize,
    code_traces: Vec<(Tensor, Vec<(LayerTrace, Tensor)>)>,
    decoder: Vec<(LayerTrace, Tensor)>,
}

impl GenerateTape<'_> {
    /// Maps `dL/d(output image)` to gradients on codes and importances.
    /// Generator weights are frozen and receive nothing.
    pub fn backward(&self, grad_image: &Tensor) -> Result<LatentGrads> {
        let out_shape = self.decoder.last().map(|(_, o)| o.shape()).expect("L >= 2");
        if grad_image.shape() != out_shape {
            return Err(Error::shape(
                "generate_with_grads",
                format!("gradient {:?} vs output {out_shape:?}", grad_image.shape()),
            ));
        }
        let g_blend = self.spec.backward_layers(self.n, &self.decoder, grad_image)?;
        let results = self
            .code_traces
            .par_iter()
            .zip(&self.codes.importances)
            .map(|((map, traces), alpha)| {
                let (g_map, g_alpha) = blend_term_backward(map, alpha, &g_blend)?;
                let g_code = self.spec.backward_layers(0, traces, &g_map)?;
                Ok((g_code, g_alpha))
            })
            .collect::<Result<Vec<_>>>()?;
        let (codes, importances) = results.into_iter().unzip();
        Ok(LatentGrads { codes, importances })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(l: usize) -> GeneratorArchitecture {
        GeneratorArchitecture {
            layer_count: l,
            ..Default::default()
        }
    }

    #[test]
    fn output_resolution_formula() {
        assert_eq!(build_generator(7, &arch(6)).unwrap().output_resolution(), 64);
        assert_eq!(build_generator(7, &arch(2)).unwrap().output_resolution(), 4);
        assert!(build_generator(7, &arch(1)).is_err());
        for l in 2..=7 {
            let g = build_generator(1, &arch(l)).unwrap();
            let img = g.sample(3).unwrap();
            assert_eq!(img.height(), 4 << (l - 2));
            assert_eq!(img.channels(), 3);
        }
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(build_generator(7, &arch(6)).unwrap(), build_generator(7, &arch(6)).unwrap());
        assert_ne!(build_generator(7, &arch(6)).unwrap(), build_generator(8, &arch(6)).unwrap());
    }

    #[test]
    fn single_code_unit_importance_is_plain_forward() {
        let g = build_generator(3, &arch(4)).unwrap();
        let z = LatentCodeSet::seeded(&g, 1, 1, 11).unwrap().codes;
        let plain = g.decode_from(&g.features_at(&z[0], 1).unwrap(), 1).unwrap();
        for n in 1..g.layer_count() {
            let set = LatentCodeSet::new(z.clone(), vec![Tensor::ones(&[g.composing_channels(n).unwrap()]).unwrap()]).unwrap();
            assert_eq!(g.generate(&set, n).unwrap(), plain);
        }
    }

    #[test]
    fn duplicated_code_blend_is_additive() {
        let g = build_generator(3, &arch(4)).unwrap();
        let n = 2;
        let c = g.composing_channels(n).unwrap();
        let z = gaussian(&mut seeded_rng(5), &[g.latent_dim()], 1.0).unwrap();
        let a = gaussian(&mut seeded_rng(6), &[c], 1.0).unwrap();
        let b = gaussian(&mut seeded_rng(7), &[c], 1.0).unwrap();
        let two = LatentCodeSet::new(vec![z.clone(), z.clone()], vec![a.clone(), b.clone()]).unwrap();
        let sum = crate::numerics::ops::add(&a, &b).unwrap();
        let one = LatentCodeSet::new(vec![z], vec![sum]).unwrap();
        let lhs = g.blend_at(&two, n).unwrap();
        let rhs = g.blend_at(&one, n).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_mismatch_rejected() {
        let g = build_generator(3, &arch(4)).unwrap();
        let set = LatentCodeSet::seeded(&g, 1, 2, 0).unwrap();
        let c1 = g.composing_channels(1).unwrap();
        let c3 = g.composing_channels(3).unwrap();
        assert_ne!(c1, c3);
        assert!(g.generate(&set, 3).is_err());
        assert!(g.generate(&set, 0).is_err());
        assert!(g.generate(&set, 4).is_err());
    }

    #[test]
    fn scaled_importances_scale_the_blend() {
        let g = build_generator(3, &arch(4)).unwrap();
        let n = 2;
        let set = LatentCodeSet::seeded(&g, n, 3, 9).unwrap();
        let base = g.blend_at(&set, n).unwrap();
        for lambda in [0.0, 0.5, 2.0, -3.0] {
            let scaled = set.importances.iter().map(|a| a.map(|v| lambda * v)).collect();
            let s = LatentCodeSet::new(set.codes.clone(), scaled).unwrap();
            let b = g.blend_at(&s, n).unwrap();
            for (x, y) in b.data().iter().zip(base.data()) {
                assert!((x - lambda * y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_feature_map_gives_zero_importance_gradient() {
        let map = Tensor::zeros(&[2, 2, 3]).unwrap();
        let alpha = Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap();
        let grad = gaussian(&mut seeded_rng(1), &[2, 2, 3], 1.0).unwrap();
        let (_, g_alpha) = blend_term_backward(&map, &alpha, &grad).unwrap();
        assert!(g_alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blend_rejects_mismatched_inputs() {
        let m = Tensor::ones(&[2, 2, 3]).unwrap();
        assert!(blend_maps(&[m.clone()], &[Tensor::ones(&[2]).unwrap()]).is_err());
        assert!(blend_maps(&[m.clone(), m], &[Tensor::ones(&[3]).unwrap()]).is_err());
        assert!(blend_maps(&[], &[]).is_err());
    }

    #[test]
    fn output_stays_in_unit_range() {
        let g = build_generator(5, &arch(5)).unwrap();
        for n in 1..g.layer_count() {
            let img = g.generate(&LatentCodeSet::seeded(&g, n, 30, n as u64).unwrap(), n).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let g = build_generator(3, &arch(3)).unwrap();
        let set = LatentCodeSet::seeded(&g, 1, 3, 0).unwrap();
        let (img, tape) = g.generate_with_grads(&set, 1).unwrap();
        let grads = tape.backward(&Tensor::zeros(img.tensor().shape()).unwrap()).unwrap();
        assert!(grads.codes.iter().chain(&grads.importances).all(|t| t.max_abs() == 0.0));
    }
}
