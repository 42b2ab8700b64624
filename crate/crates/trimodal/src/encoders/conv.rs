//! Small convolutional image backbone with hand-written backprop.
//!
//! Topology: a stack of 3x3 stride-2 pad-1 convolutions with ReLU, a global
//! average pool, and a linear projection to the shared embedding space. The
//! same code runs the toy encoders and the larger adapter topologies that
//! pretrained bundles load into; only the channel list and dims differ.

use rand_chacha::ChaCha12Rng;

use super::param::Param;
use crate::contrastive::{EmbeddingBatch, Modality};
use crate::raster::ImageArray;
use crate::{Error, Result};

/// Batched images in NCHW layout, pixel values in [0, 1] before the
/// encoder's own normalization constants are applied.
#[derive(Clone, Debug)]
pub struct ImageTensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        ImageTensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    /// Packs HWC f32 arrays into one NCHW f64 batch. All arrays must share
    /// one shape and have 3 channels.
    pub fn from_arrays(images: &[&ImageArray]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyInput("image batch"));
        }
        let (h, w) = (images[0].height, images[0].width);
        let mut t = ImageTensor::zeros(images.len(), 3, h, w);
        for (n, img) in images.iter().enumerate() {
            if img.height != h || img.width != w || img.channels != 3 {
                return Err(Error::ShapeMismatch {
                    expected: format!("{h}x{w}x3"),
                    got: format!("{}x{}x{}", img.height, img.width, img.channels),
                });
            }
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        t.data[((n * 3 + c) * h + y) * w + x] =
                            img.pixels[(y * w + x) * 3 + c] as f64;
                    }
                }
            }
        }
        Ok(t)
    }

    fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let start = (n * self.c + c) * self.h * self.w;
        &mut self.data[start..start + self.h * self.w]
    }
}

/// Static description of a conv encoder: enough to rebuild the module from a
/// checkpoint manifest and to check a weight bundle against the registry.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.channels.is_empty() {
            problems.push("conv encoder needs at least one conv layer".to_string());
        }
        if self.channels.iter().any(|&c| c == 0) {
            problems.push("conv channel counts must be positive".to_string());
        }
        // Each stride-2 layer halves the spatial side (ceil); it must stay
        // at least 1 pixel after the full stack.
        let mut side = self.image_size;
        for _ in &self.channels {
            side = side.div_ceil(2);
        }
        if self.image_size < 2 || side == 0 {
            problems.push(format!(
                "image_size {} is too small for {} stride-2 layers",
                self.image_size,
                self.channels.len()
            ));
        }
        if self.embed_dim == 0 {
            problems.push("embed_dim must be positive".to_string());
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            problems.push("pixel_std entries must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid { problems })
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Param, // [c_out, c_in, 3, 3]
    pub bias: Param,   // [c_out]
}

#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub spec: ConvSpec,
    pub convs: Vec<ConvLayer>,
    pub proj_weight: Param, // [embed_dim, c_last]
    pub proj_bias: Param,   // [embed_dim]
}

/// Everything the backward pass needs from a forward pass.
pub struct ConvCache {
    /// Input to each conv layer; entry 0 is the normalized image batch.
    inputs: Vec<ImageTensor>,
    /// Pre-ReLU activations of each conv layer.
    preacts: Vec<ImageTensor>,
    /// Pooled features, n x c_last.
    pooled: Vec<f64>,
}

impl ConvEncoder {
    pub fn new(spec: ConvSpec, rng: &mut ChaCha12Rng) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 3usize;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            let bound = 1.0 / fan_in.sqrt();
            convs.push(ConvLayer {
                weight: Param::uniform(
                    format!("conv{i}.weight"),
                    vec![c_out, c_in, 3, 3],
                    bound,
                    rng,
                ),
                bias: Param::uniform(format!("conv{i}.bias"), vec![c_out], bound, rng),
            });
            c_in = c_out;
        }
        let proj_weight = Param::orthogonal("proj.weight", spec.embed_dim, c_in, rng);
        let proj_bias = Param::zeros("proj.bias", vec![spec.embed_dim]);
        Ok(ConvEncoder {
            spec,
            convs,
            proj_weight,
            proj_bias,
        })
    }

    /// Allocates the topology with all-zero parameters; used when a
    /// checkpoint or weight bundle is about to overwrite them.
    pub fn zeros(spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 3usize;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            convs.push(ConvLayer {
                weight: Param::zeros(format!("conv{i}.weight"), vec![c_out, c_in, 3, 3]),
                bias: Param::zeros(format!("conv{i}.bias"), vec![c_out]),
            });
            c_in = c_out;
        }
        Ok(ConvEncoder {
            proj_weight: Param::zeros("proj.weight", vec![spec.embed_dim, c_in]),
            proj_bias: Param::zeros("proj.bias", vec![spec.embed_dim]),
            spec,
            convs,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.convs {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.proj_weight);
        out.push(&self.proj_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for l in &mut self.convs {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.proj_weight);
        out.push(&mut self.proj_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.n == 0 {
            return Err(Error::EmptyInput("image batch"));
        }
        if x.c != 3 || x.h != self.spec.image_size || x.w != self.spec.image_size {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "Nx3x{}x{}",
                    self.spec.image_size, self.spec.image_size
                ),
                got: format!("{}x{}x{}x{}", x.n, x.c, x.h, x.w),
            });
        }
        Ok(())
    }

    /// Forward pass keeping intermediate state for backprop. Output is the
    /// raw (unnormalized) embedding batch, n x embed_dim.
    pub fn forward_train(&self, x: &ImageTensor) -> Result<(Vec<f64>, ConvCache)> {
        self.check_input(x)?;
        let mut normalized = x.clone();
        for n in 0..x.n {
            for c in 0..3 {
                let mean = self.spec.pixel_mean[c];
                let std = self.spec.pixel_std[c];
                for v in normalized.plane_mut(n, c) {
                    *v = (*v - mean) / std;
                }
            }
        }
        let mut inputs = vec![normalized];
        let mut preacts = Vec::new();
        for layer in &self.convs {
            let pre = conv_forward(inputs.last().unwrap(), &layer.weight, &layer.bias);
            let mut act = pre.clone();
            for v in &mut act.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            preacts.push(pre);
            inputs.push(act);
        }
        let last = inputs.last().unwrap();
        let plane_len = (last.h * last.w) as f64;
        let c_last = last.c;
        let mut pooled = vec![0.0; x.n * c_last];
        for n in 0..x.n {
            for c in 0..c_last {
                pooled[n * c_last + c] = last.plane(n, c).iter().sum::<f64>() / plane_len;
            }
        }
        let d = self.spec.embed_dim;
        let mut out = vec![0.0; x.n * d];
        for n in 0..x.n {
            let p = &pooled[n * c_last..(n + 1) * c_last];
            for i in 0..d {
                let row = &self.proj_weight.data[i * c_last..(i + 1) * c_last];
                out[n * d + i] = self.proj_bias.data[i]
                    + row.iter().zip(p).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        Ok((
            out,
            ConvCache {
                inputs,
                preacts,
                pooled,
            },
        ))
    }

    /// Accumulates parameter gradients from d(loss)/d(raw embedding).
    pub fn backward(&mut self, cache: &ConvCache, d_out: &[f64]) {
        let n_batch = cache.inputs[0].n;
        let c_last = *self.spec.channels.last().unwrap();
        let d = self.spec.embed_dim;
        assert_eq!(d_out.len(), n_batch * d);

        // Projection layer.
        let mut d_pooled = vec![0.0; n_batch * c_last];
        for n in 0..n_batch {
            let p = &cache.pooled[n * c_last..(n + 1) * c_last];
            for i in 0..d {
                let g = d_out[n * d + i];
                if g == 0.0 {
                    continue;
                }
                self.proj_bias.grad[i] += g;
                let wrow = &mut self.proj_weight.grad[i * c_last..(i + 1) * c_last];
                for c in 0..c_last {
                    wrow[c] += g * p[c];
                    d_pooled[n * c_last + c] += g * self.proj_weight.data[i * c_last + c];
                }
            }
        }

        // Global average pool: spread gradient uniformly over the plane.
        let last = cache.inputs.last().unwrap();
        let plane_len = (last.h * last.w) as f64;
        let mut d_act = ImageTensor::zeros(last.n, last.c, last.h, last.w);
        for n in 0..n_batch {
            for c in 0..c_last {
                let g = d_pooled[n * c_last + c] / plane_len;
                for v in d_act.plane_mut(n, c) {
                    *v = g;
                }
            }
        }

        // Conv stack in reverse.
        for (l, layer) in self.convs.iter_mut().enumerate().rev() {
            let pre = &cache.preacts[l];
            let mut d_pre = d_act;
            for (g, p) in d_pre.data.iter_mut().zip(&pre.data) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
            d_act = conv_backward(
                &cache.inputs[l],
                layer.weight.shape[0],
                layer.weight.shape[1],
                &layer.weight.data,
                &mut layer.weight.grad,
                &mut layer.bias.grad,
                &d_pre,
            );
        }
    }

    /// Inference entry point: encodes a batch, checks for non-finite
    /// activations, and reports which layer first produced them.
    pub fn encode(&self, x: &ImageTensor, modality: Modality) -> Result<EmbeddingBatch> {
        let (out, cache) = self.forward_train(x)?;
        if out.iter().any(|v| !v.is_finite()) {
            let layer = first_nonfinite_layer(&cache)
                .unwrap_or_else(|| "projection".to_string());
            return Err(Error::NonFiniteActivations { layer });
        }
        EmbeddingBatch::new(modality, x.n, self.spec.embed_dim, out)
    }
}

fn first_nonfinite_layer(cache: &ConvCache) -> Option<String> {
    for (l, pre) in cache.preacts.iter().enumerate() {
        if pre.data.iter().any(|v| !v.is_finite()) {
            return Some(format!("conv{l}"));
        }
    }
    if cache.pooled.iter().any(|v| !v.is_finite()) {
        return Some("pool".to_string());
    }
    None
}

/// 3x3 stride-2 pad-1 convolution.
fn conv_forward(x: &ImageTensor, weight: &Param, bias: &Param) -> ImageTensor {
    let c_out = weight.shape[0];
    let c_in = weight.shape[1];
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut out = ImageTensor::zeros(x.n, c_out, oh, ow);
    for n in 0..x.n {
        for co in 0..c_out {
            let out_plane = out.plane_mut(n, co);
            out_plane.iter_mut().for_each(|v| *v = bias.data[co]);
            for ci in 0..c_in {
                let w9 = &weight.data[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
                let xp = x.plane(n, ci);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..3usize {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let row = iy as usize * x.w;
                            for kx in 0..3usize {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                acc += w9[ky * 3 + kx] * xp[row + ix as usize];
                            }
                        }
                        out_plane[oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Backward of `conv_forward`: accumulates weight and bias grads, returns
/// gradient w.r.t. the layer input. Weight data and grad arrive as separate
/// slices so the caller can split the borrow of one parameter.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &ImageTensor,
    c_out: usize,
    c_in: usize,
    weight: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_out: &ImageTensor,
) -> ImageTensor {
    let (oh, ow) = (d_out.h, d_out.w);
    let mut d_x = ImageTensor::zeros(x.n, x.c, x.h, x.w);
    for n in 0..x.n {
        for co in 0..c_out {
            let gp = d_out.plane(n, co);
            d_bias[co] += gp.iter().sum::<f64>();
            for ci in 0..c_in {
                let widx = (co * c_in + ci) * 9;
                let w9 = &weight[widx..widx + 9];
                let xp = x.plane(n, ci);
                let dxp = d_x.plane_mut(n, ci);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gp[oy * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ky in 0..3usize {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let row = iy as usize * x.w;
                            for kx in 0..3usize {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let i = row + ix as usize;
                                d_weight[widx + ky * 3 + kx] += g * xp[i];
                                dxp[i] += g * w9[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec(image_size: usize, channels: Vec<usize>, embed_dim: usize) -> ConvSpec {
        ConvSpec {
            image_size,
            channels,
            embed_dim,
            pixel_mean: [0.0; 3],
            pixel_std: [1.0; 3],
        }
    }

    fn loss_of(out: &[f64]) -> f64 {
        // Simple smooth scalar so finite differences are informative.
        out.iter()
            .enumerate()
            .map(|(i, v)| (i as f64 + 1.0) * 0.1 * v * v)
            .sum()
    }

    fn d_loss(out: &[f64]) -> Vec<f64> {
        out.iter()
            .enumerate()
            .map(|(i, v)| (i as f64 + 1.0) * 0.2 * v)
            .collect()
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = crate::rng::stream(3, "conv");
        let enc = ConvEncoder::new(toy_spec(9, vec![4, 5], 6), &mut rng).unwrap();
        let mut x = ImageTensor::zeros(2, 3, 9, 9);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = (i % 11) as f64 / 11.0;
        }
        let (a, _) = enc.forward_train(&x).unwrap();
        let (b, _) = enc.forward_train(&x).unwrap();
        assert_eq!(a.len(), 2 * 6);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_spatial_size() {
        let mut rng = crate::rng::stream(3, "conv");
        let enc = ConvEncoder::new(toy_spec(8, vec![4], 6), &mut rng).unwrap();
        let x = ImageTensor::zeros(1, 3, 9, 9);
        assert!(matches!(
            enc.forward_train(&x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_image_reduces_to_bias_terms() {
        // With a single conv layer and zero input, every spatial position of
        // channel c holds bias1[c], so after ReLU and pooling the embedding
        // is proj_w * relu(bias1) + proj_b. Checks gradient-free algebra of
        // the whole stack.
        let mut rng = crate::rng::stream(7, "conv-bias");
        let enc = ConvEncoder::new(toy_spec(8, vec![5], 4), &mut rng).unwrap();
        let x = ImageTensor::zeros(1, 3, 8, 8);
        let (out, _) = enc.forward_train(&x).unwrap();
        for i in 0..4 {
            let expected: f64 = enc.proj_bias.data[i]
                + (0..5)
                    .map(|c| enc.proj_weight.data[i * 5 + c] * enc.convs[0].bias.data[c].max(0.0))
                    .sum::<f64>();
            assert!(
                (out[i] - expected).abs() < 1e-12,
                "embedding {i}: got {} expected {expected}",
                out[i]
            );
        }
    }

    #[test]
    fn stride_two_halves_each_side_rounding_up() {
        let mut rng = crate::rng::stream(4, "conv");
        let enc = ConvEncoder::new(toy_spec(7, vec![2], 3), &mut rng).unwrap();
        let x = ImageTensor::zeros(1, 3, 7, 7);
        let (_, cache) = enc.forward_train(&x).unwrap();
        assert_eq!((cache.preacts[0].h, cache.preacts[0].w), (4, 4));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(11, "conv-fd");
        let mut enc = ConvEncoder::new(toy_spec(6, vec![3, 4], 5), &mut rng).unwrap();
        let mut x = ImageTensor::zeros(2, 3, 6, 6);
        let mut xs = crate::rng::stream(12, "conv-fd-x");
        for v in &mut x.data {
            *v = rand::Rng::random_range(&mut xs, 0.0..1.0);
        }
        let (out, cache) = enc.forward_train(&x).unwrap();
        enc.backward(&cache, &d_loss(&out));
        let analytic: Vec<(String, Vec<f64>)> = enc
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.grad.clone()))
            .collect();

        let h = 1e-5;
        for (pi, (name, grads)) in analytic.iter().enumerate() {
            // Probe a few entries of every parameter tensor.
            let probes = [0usize, grads.len() / 2, grads.len().saturating_sub(1)];
            for &k in &probes {
                let orig = enc.params()[pi].data[k];
                enc.params_mut()[pi].data[k] = orig + h;
                let (up, _) = enc.forward_train(&x).unwrap();
                enc.params_mut()[pi].data[k] = orig - h;
                let (down, _) = enc.forward_train(&x).unwrap();
                enc.params_mut()[pi].data[k] = orig;
                let fd = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
                let got = grads[k];
                let denom = fd.abs().max(got.abs());
                if denom < 1e-10 {
                    continue;
                }
                assert!(
                    ((fd - got).abs() / denom) < 1e-3,
                    "{name}[{k}]: fd {fd} vs analytic {got}"
                );
            }
        }
    }

    #[test]
    fn nonfinite_activations_name_the_layer() {
        let mut rng = crate::rng::stream(5, "conv-nan");
        let mut enc = ConvEncoder::new(toy_spec(6, vec![2, 3], 4), &mut rng).unwrap();
        enc.convs[1].weight.data[0] = f64::NAN;
        let x = ImageTensor::zeros(1, 3, 6, 6);
        match enc.encode(&x, Modality::Image) {
            Err(Error::NonFiniteActivations { layer }) => assert_eq!(layer, "conv1"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
