//! Token-averaging text backbone with hand-written backprop.
//!
//! Pipeline: lowercase alphanumeric tokenizer, token embedding lookup, mean
//! pool over tokens, one ReLU mixing layer, linear projection to the shared
//! embedding space.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha12Rng;

use super::param::Param;
use crate::contrastive::{EmbeddingBatch, Modality};
use crate::{Error, Result};

pub const OOV_TOKEN: &str = "<oov>";

/// Token table. Id 0 is reserved for out-of-vocabulary tokens; the rest are
/// sorted, so a vocab built from the same prompts is always identical.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    pub tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(OOV_TOKEN) {
            return Err(Error::InvalidArgument(format!(
                "vocab must start with the {OOV_TOKEN} entry"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocab token {t:?}"
                )));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn from_prompts<S: AsRef<str>>(prompts: &[S]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for p in prompts {
            for t in split_tokens(p.as_ref()) {
                set.insert(t);
            }
        }
        if set.is_empty() {
            return Err(Error::EmptyInput("prompt tokens"));
        }
        let mut tokens = vec![OOV_TOKEN.to_string()];
        tokens.extend(set);
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Maps text to token ids; unknown tokens become id 0.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_tokens(text)
            .into_iter()
            .map(|t| self.index.get(&t).copied().unwrap_or(0))
            .collect()
    }
}

/// Lowercases and splits on anything that is not ASCII alphanumeric.
fn split_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: Vocab,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub embedding: Param,   // [vocab, token_dim]
    pub mix_weight: Param,  // [token_dim, token_dim]
    pub mix_bias: Param,    // [token_dim]
    pub proj_weight: Param, // [embed_dim, token_dim]
    pub proj_bias: Param,   // [embed_dim]
}

pub struct TextCache {
    token_ids: Vec<Vec<usize>>,
    mean: Vec<f64>,    // n x token_dim
    mix_pre: Vec<f64>, // n x token_dim, pre-ReLU
    hidden: Vec<f64>,  // n x token_dim, post-ReLU
}

impl TextEncoder {
    pub fn new(
        vocab: Vocab,
        token_dim: usize,
        embed_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if token_dim == 0 || embed_dim == 0 {
            return Err(Error::ConfigInvalid {
                problems: vec!["text encoder dims must be positive".to_string()],
            });
        }
        let emb_bound = 1.0 / (token_dim as f64).sqrt();
        let mix_bound = 1.0 / (token_dim as f64).sqrt();
        Ok(TextEncoder {
            embedding: Param::uniform(
                "embedding",
                vec![vocab.len(), token_dim],
                emb_bound,
                rng,
            ),
            mix_weight: Param::uniform(
                "mix.weight",
                vec![token_dim, token_dim],
                mix_bound,
                rng,
            ),
            mix_bias: Param::uniform("mix.bias", vec![token_dim], mix_bound, rng),
            proj_weight: Param::orthogonal("proj.weight", embed_dim, token_dim, rng),
            proj_bias: Param::zeros("proj.bias", vec![embed_dim]),
            vocab,
            token_dim,
            embed_dim,
        })
    }

    /// Allocates the topology with all-zero parameters; used when a
    /// checkpoint or weight bundle is about to overwrite them.
    pub fn zeros(vocab: Vocab, token_dim: usize, embed_dim: usize) -> Result<Self> {
        if token_dim == 0 || embed_dim == 0 {
            return Err(Error::ConfigInvalid {
                problems: vec!["text encoder dims must be positive".to_string()],
            });
        }
        Ok(TextEncoder {
            embedding: Param::zeros("embedding", vec![vocab.len(), token_dim]),
            mix_weight: Param::zeros("mix.weight", vec![token_dim, token_dim]),
            mix_bias: Param::zeros("mix.bias", vec![token_dim]),
            proj_weight: Param::zeros("proj.weight", vec![embed_dim, token_dim]),
            proj_bias: Param::zeros("proj.bias", vec![embed_dim]),
            vocab,
            token_dim,
            embed_dim,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.embedding,
            &self.mix_weight,
            &self.mix_bias,
            &self.proj_weight,
            &self.proj_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.embedding,
            &mut self.mix_weight,
            &mut self.mix_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn forward_train<S: AsRef<str>>(&self, texts: &[S]) -> Result<(Vec<f64>, TextCache)> {
        if texts.is_empty() {
            return Err(Error::EmptyInput("text batch"));
        }
        let n = texts.len();
        let td = self.token_dim;
        let mut token_ids = Vec::with_capacity(n);
        let mut mean = vec![0.0; n * td];
        for (i, text) in texts.iter().enumerate() {
            let ids = self.vocab.tokenize(text.as_ref());
            if ids.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "text {i} contains no tokens"
                )));
            }
            let inv = 1.0 / ids.len() as f64;
            for &id in &ids {
                let row = &self.embedding.data[id * td..(id + 1) * td];
                for (m, e) in mean[i * td..(i + 1) * td].iter_mut().zip(row) {
                    *m += e * inv;
                }
            }
            token_ids.push(ids);
        }
        let mut mix_pre = vec![0.0; n * td];
        let mut hidden = vec![0.0; n * td];
        for i in 0..n {
            let m = &mean[i * td..(i + 1) * td];
            for j in 0..td {
                let row = &self.mix_weight.data[j * td..(j + 1) * td];
                let v = self.mix_bias.data[j]
                    + row.iter().zip(m).map(|(w, x)| w * x).sum::<f64>();
                mix_pre[i * td + j] = v;
                hidden[i * td + j] = v.max(0.0);
            }
        }
        let d = self.embed_dim;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let h = &hidden[i * td..(i + 1) * td];
            for j in 0..d {
                let row = &self.proj_weight.data[j * td..(j + 1) * td];
                out[i * d + j] = self.proj_bias.data[j]
                    + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>();
            }
        }
        Ok((
            out,
            TextCache {
                token_ids,
                mean,
                mix_pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &TextCache, d_out: &[f64]) {
        let n = cache.token_ids.len();
        let td = self.token_dim;
        let d = self.embed_dim;
        assert_eq!(d_out.len(), n * d);

        let mut d_hidden = vec![0.0; n * td];
        for i in 0..n {
            let h = &cache.hidden[i * td..(i + 1) * td];
            for j in 0..d {
                let g = d_out[i * d + j];
                if g == 0.0 {
                    continue;
                }
                self.proj_bias.grad[j] += g;
                let wrow = &self.proj_weight.data[j * td..(j + 1) * td];
                let grow = &mut self.proj_weight.grad[j * td..(j + 1) * td];
                for k in 0..td {
                    grow[k] += g * h[k];
                    d_hidden[i * td + k] += g * wrow[k];
                }
            }
        }

        let mut d_mean = vec![0.0; n * td];
        for i in 0..n {
            let m = &cache.mean[i * td..(i + 1) * td];
            for j in 0..td {
                if cache.mix_pre[i * td + j] <= 0.0 {
                    continue;
                }
                let g = d_hidden[i * td + j];
                if g == 0.0 {
                    continue;
                }
                self.mix_bias.grad[j] += g;
                let wrow = &self.mix_weight.data[j * td..(j + 1) * td];
                let grow = &mut self.mix_weight.grad[j * td..(j + 1) * td];
                for k in 0..td {
                    grow[k] += g * m[k];
                    d_mean[i * td + k] += g * wrow[k];
                }
            }
        }

        for (i, ids) in cache.token_ids.iter().enumerate() {
            let inv = 1.0 / ids.len() as f64;
            for &id in ids {
                let grow = &mut self.embedding.grad[id * td..(id + 1) * td];
                for (g, dm) in grow.iter_mut().zip(&d_mean[i * td..(i + 1) * td]) {
                    *g += dm * inv;
                }
            }
        }
    }

    pub fn encode<S: AsRef<str>>(&self, texts: &[S]) -> Result<EmbeddingBatch> {
        let (out, cache) = self.forward_train(texts)?;
        if out.iter().any(|v| !v.is_finite()) {
            let layer = if cache.mean.iter().any(|v| !v.is_finite()) {
                "embedding"
            } else if cache.mix_pre.iter().any(|v| !v.is_finite()) {
                "mix"
            } else {
                "projection"
            };
            return Err(Error::NonFiniteActivations {
                layer: layer.to_string(),
            });
        }
        EmbeddingBatch::new(Modality::Text, texts.len(), self.embed_dim, out)
    }
}
