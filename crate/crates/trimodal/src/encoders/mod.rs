//! Encoder backbones, the temperature parameter, and the encoder set that
//! ties the three modalities together.
//!
//! Stage semantics live here: a set whose `symbol` slot is `None` routes
//! symbol batches through the image encoder (the first alignment stage
//! shares one tower for both visual modalities). `transfer_symbol_encoder`
//! deep-copies the image tower into the symbol slot, after which the two
//! towers train independently.

mod checkpoint;
mod conv;
mod param;
mod pretrained;
mod text;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use conv::{ConvEncoder, ConvSpec, ImageTensor};
pub(crate) use param::gaussian;
pub use param::Param;
pub use pretrained::{load_pretrained, registry, BackboneDescriptor, OptimizerProfile};
pub use text::{TextEncoder, Vocab, OOV_TOKEN};

use crate::contrastive::{EmbeddingBatch, Modality};
use crate::Result;

/// Learnable softmax temperature, stored as the log of its inverse so the
/// optimizer works in an unconstrained space. The effective inverse
/// temperature is clamped from above for stability; past the clamp the
/// parameter stops receiving gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureParam {
    pub log_inverse_tau: f64,
}

impl TemperatureParam {
    pub const MAX_INVERSE_TAU: f64 = 100.0;

    pub fn new(log_inverse_tau: f64) -> Self {
        TemperatureParam { log_inverse_tau }
    }

    /// 1/tau after clamping.
    pub fn inverse_tau(&self) -> f64 {
        self.log_inverse_tau.exp().min(Self::MAX_INVERSE_TAU)
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.inverse_tau()
    }

    /// True when the raw value exceeds the clamp, meaning gradient to the
    /// parameter is cut off. Exactly at the boundary gradient still flows.
    pub fn is_clamped(&self) -> bool {
        self.log_inverse_tau.exp() > Self::MAX_INVERSE_TAU
    }
}

impl Default for TemperatureParam {
    /// Initial value 1/tau = 1/0.07, the usual contrastive pretraining
    /// starting point.
    fn default() -> Self {
        TemperatureParam {
            log_inverse_tau: (1.0 / 0.07f64).ln(),
        }
    }
}

/// The trainable bundle: image tower, optional symbol tower, text tower,
/// shared temperature.
#[derive(Clone, Debug)]
pub struct EncoderSet {
    pub image: ConvEncoder,
    pub symbol: Option<ConvEncoder>,
    pub text: TextEncoder,
    pub temperature: TemperatureParam,
}

impl EncoderSet {
    /// 1 while the symbol slot aliases the image tower, 2 once it holds its
    /// own parameters.
    pub fn stage(&self) -> u8 {
        if self.symbol.is_some() {
            2
        } else {
            1
        }
    }

    pub fn symbol_encoder(&self) -> &ConvEncoder {
        self.symbol.as_ref().unwrap_or(&self.image)
    }

    pub fn encode_images(&self, batch: &ImageTensor) -> Result<EmbeddingBatch> {
        self.image.encode(batch, Modality::Image)
    }

    pub fn encode_symbols(&self, batch: &ImageTensor) -> Result<EmbeddingBatch> {
        self.symbol_encoder().encode(batch, Modality::Symbol)
    }

    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<EmbeddingBatch> {
        self.text.encode(texts)
    }

    /// Total learnable scalar count, including the temperature.
    pub fn parameter_count(&self) -> usize {
        self.image.parameter_count()
            + self.symbol.as_ref().map_or(0, |s| s.parameter_count())
            + self.text.parameter_count()
            + 1
    }

    /// Stable role-prefixed listing of every parameter tensor, the order
    /// checkpoints are written in.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = Vec::new();
        for p in self.image.params() {
            out.push((format!("image.{}", p.name), p));
        }
        if let Some(sym) = &self.symbol {
            for p in sym.params() {
                out.push((format!("symbol.{}", p.name), p));
            }
        }
        for p in self.text.params() {
            out.push((format!("text.{}", p.name), p));
        }
        out
    }

    /// Every parameter tensor, mutable, for the optimizer. The temperature
    /// scalar is not a tensor and is updated separately.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.image.params_mut();
        if let Some(sym) = &mut self.symbol {
            out.append(&mut sym.params_mut());
        }
        out.append(&mut self.text.params_mut());
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Promotes a shared-tower set to two independent visual towers. The copy is
/// exact: right after the transfer both towers produce identical embeddings.
pub fn transfer_symbol_encoder(set: EncoderSet) -> Result<EncoderSet> {
    if set.symbol.is_some() {
        return Err(crate::Error::StageMismatch {
            expected: 1,
            got: 2,
        });
    }
    let symbol = Some(set.image.clone());
    Ok(EncoderSet { symbol, ..set })
}

/// Channel widths of the fixed toy image topology.
pub const TOY_CONV_CHANNELS: [usize; 3] = [8, 16, 32];
/// Token feature width of the fixed toy text topology.
pub const TOY_TOKEN_DIM: usize = 32;

/// Builds the small from-scratch encoder pair used by synthetic runs: three
/// stride-2 convs for images, the token-averaging text tower, default
/// temperature, shared visual tower (stage 1).
pub fn build_toy_encoders(
    embed_dim: usize,
    image_size: usize,
    vocab: Vocab,
    seed: u64,
) -> Result<EncoderSet> {
    if embed_dim < 8 {
        return Err(crate::Error::ConfigInvalid {
            problems: vec![format!(
                "embed_dim must be at least 8, got {embed_dim}"
            )],
        });
    }
    let spec = ConvSpec {
        image_size,
        channels: TOY_CONV_CHANNELS.to_vec(),
        embed_dim,
        pixel_mean: [0.0; 3],
        pixel_std: [1.0; 3],
    };
    let image = ConvEncoder::new(spec, &mut crate::rng::stream(seed, "init/image"))?;
    let text = TextEncoder::new(
        vocab,
        TOY_TOKEN_DIM,
        embed_dim,
        &mut crate::rng::stream(seed, "init/text"),
    )?;
    Ok(EncoderSet {
        image,
        symbol: None,
        text,
        temperature: TemperatureParam::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn toy_vocab() -> Vocab {
        Vocab::from_prompts(&[
            "A picture of a ringed galaxy.",
            "A picture of an elliptical galaxy.",
        ])
        .unwrap()
    }

    #[test]
    fn default_temperature_matches_the_usual_init() {
        let t = TemperatureParam::default();
        assert!((t.inverse_tau() - 1.0 / 0.07).abs() < 1e-12);
        assert!((t.log_inverse_tau - 2.659_260_036_932_778).abs() < 1e-12);
        assert!(!t.is_clamped());
    }

    #[test]
    fn inverse_tau_clamps_from_above() {
        let t = TemperatureParam::new(10.0);
        assert_eq!(t.inverse_tau(), 100.0);
        assert!(t.is_clamped());
        // Just below the boundary the clamp is inactive. (exp(ln 100)
        // itself rounds a hair above 100, so probe from below.)
        let edge = TemperatureParam::new(100.0f64.ln() - 1e-12);
        assert!((edge.inverse_tau() - 100.0).abs() < 1e-9);
        assert!(!edge.is_clamped());
    }

    #[test]
    fn toy_build_is_deterministic_and_seed_sensitive() {
        let a = build_toy_encoders(16, 16, toy_vocab(), 7).unwrap();
        let b = build_toy_encoders(16, 16, toy_vocab(), 7).unwrap();
        let c = build_toy_encoders(16, 16, toy_vocab(), 8).unwrap();
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.data, pb.data);
        }
        let differs = a
            .named_params()
            .iter()
            .zip(c.named_params().iter())
            .any(|((_, pa), (_, pc))| pa.data != pc.data);
        assert!(differs);
    }

    #[test]
    fn toy_embed_dim_floor_is_enforced() {
        match build_toy_encoders(4, 16, toy_vocab(), 0) {
            Err(Error::ConfigInvalid { problems }) => {
                assert!(problems[0].contains("embed_dim"));
            }
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn toy_parameter_count_is_analytic_and_small() {
        // Convs: sum over layers of c_out * (9 * c_in + 1); projection
        // embed_dim * c_last + embed_dim; text: vocab * td + td * (td + 1)
        // + embed_dim * (td + 1); plus the temperature scalar.
        let embed_dim = 64usize;
        let vocab = toy_vocab();
        let v = vocab.len();
        let set = build_toy_encoders(embed_dim, 32, vocab, 1).unwrap();
        let mut expected = 0usize;
        let mut c_in = 3usize;
        for &c_out in TOY_CONV_CHANNELS.iter() {
            expected += c_out * (9 * c_in + 1);
            c_in = c_out;
        }
        expected += embed_dim * (c_in + 1);
        expected += v * TOY_TOKEN_DIM;
        expected += TOY_TOKEN_DIM * (TOY_TOKEN_DIM + 1);
        expected += embed_dim * (TOY_TOKEN_DIM + 1);
        expected += 1;
        assert_eq!(set.parameter_count(), expected);
        assert!(set.parameter_count() < 1_000_000);
    }

    #[test]
    fn stage_one_routes_symbols_through_the_image_tower() {
        let set = build_toy_encoders(16, 16, toy_vocab(), 3).unwrap();
        assert_eq!(set.stage(), 1);
        let mut x = ImageTensor::zeros(2, 3, 16, 16);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        let imgs = set.encode_images(&x).unwrap();
        let syms = set.encode_symbols(&x).unwrap();
        assert_eq!(imgs.vectors, syms.vectors);
        assert_eq!(syms.modality, crate::contrastive::Modality::Symbol);
    }

    #[test]
    fn transfer_copies_bit_exactly_then_detaches() {
        let set = build_toy_encoders(16, 16, toy_vocab(), 5).unwrap();
        let mut set = transfer_symbol_encoder(set).unwrap();
        assert_eq!(set.stage(), 2);
        let sym = set.symbol.as_ref().unwrap();
        for (a, b) in set.image.params().iter().zip(sym.params().iter()) {
            assert_eq!(a.data, b.data, "{} differs after transfer", a.name);
        }
        // Detached: nudging the symbol tower leaves the image tower alone.
        let before = set.image.convs[0].weight.data[0];
        set.symbol.as_mut().unwrap().convs[0].weight.data[0] += 1.0;
        assert_eq!(set.image.convs[0].weight.data[0], before);
        assert_ne!(
            set.symbol.as_ref().unwrap().convs[0].weight.data[0],
            set.image.convs[0].weight.data[0]
        );
    }

    #[test]
    fn transfer_rejects_a_set_that_already_split() {
        let set = build_toy_encoders(16, 16, toy_vocab(), 5).unwrap();
        let set = transfer_symbol_encoder(set).unwrap();
        assert!(matches!(
            transfer_symbol_encoder(set),
            Err(Error::StageMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn named_params_cover_both_towers_after_transfer() {
        let set = build_toy_encoders(16, 16, toy_vocab(), 2).unwrap();
        let n1 = set.named_params().len();
        let set = transfer_symbol_encoder(set).unwrap();
        let names: Vec<String> = set.named_params().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), n1 + set.image.params().len());
        assert!(names.iter().any(|n| n == "image.conv0.weight"));
        assert!(names.iter().any(|n| n == "symbol.conv0.weight"));
        assert!(names.iter().any(|n| n == "text.embedding"));
    }
}
