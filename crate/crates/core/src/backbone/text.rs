use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::vit::{Block, LN_EPS};
use crate::error::{Error, Result};
use crate::nn::LayerNorm;
use crate::params::{Init, ParamBuilder};

pub const DEFAULT_TEMPLATE: &str = "a photo of a {class}";

const SOT: &str = "<sot>";
const EOT: &str = "<eot>";
const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub context_length: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Embedding-table rows; defaults to the tokenizer vocabulary size.
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

/// Lowercase whitespace tokenizer over a closed vocabulary.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Vocabulary: special tokens, template words, then class-name words, first occurrence order.
    pub fn new(classes: &[String], template: &str) -> Self {
        let mut words: Vec<String> = vec![SOT.into(), EOT.into(), UNK.into()];
        let mut index: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let sources = std::iter::once(template.replace("{class}", "")).chain(classes.iter().cloned());
        for text in sources {
            for w in text.to_lowercase().split_whitespace() {
                if !index.contains_key(w) {
                    index.insert(w.to_string(), words.len() as u32);
                    words.push(w.to_string());
                }
            }
        }
        Self { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// `[SOT, words.., EOT]`, truncated to `context_length` with EOT kept last.
    pub fn encode(&self, prompt: &str, template: &str, context_length: usize) -> Result<Vec<u32>> {
        if prompt.trim().is_empty() {
            return Err(Error::input("empty text prompt"));
        }
        let text = if template.contains("{class}") {
            template.replace("{class}", prompt)
        } else {
            format!("{template} {prompt}")
        };
        let unk = self.index[UNK];
        let mut ids = vec![self.index[SOT]];
        ids.extend(
            text.to_lowercase()
                .split_whitespace()
                .map(|w| self.index.get(w).copied().unwrap_or(unk)),
        );
        ids.truncate(context_length.max(2) - 1);
        ids.push(self.index[EOT]);
        Ok(ids)
    }
}

/// Causal transformer over token embeddings; the EOT feature is projected to `C_c`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextConfig,
    token_embedding: Tensor,
    positional_embedding: Tensor,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    text_projection: Tensor,
}

impl TextEncoder {
    pub fn new(b: &ParamBuilder, cfg: &TextConfig, vocab: usize, embed_dim: usize) -> Result<Self> {
        let w = cfg.width;
        let mlp_dim = (w as f64 * cfg.mlp_ratio).round() as usize;
        let rows = cfg.vocab_size.unwrap_or(vocab);
        if rows < vocab {
            return Err(Error::config(
                "text_encoder.vocab_size",
                format!("{rows} is smaller than the tokenizer vocabulary {vocab}"),
            ));
        }
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&b.pp(format!("blocks.{i}")), w, cfg.heads, mlp_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            token_embedding: b.get("token_embedding", vec![rows, w], Init::Normal { std: 0.02 })?,
            positional_embedding: b.get("positional_embedding", vec![cfg.context_length, w], Init::Normal { std: 0.02 })?,
            blocks,
            ln_final: LayerNorm::new(&b.pp("ln_final"), w, LN_EPS)?,
            text_projection: b.get("text_projection", vec![w, embed_dim], Init::fan_in(w))?,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    /// `ids` as produced by [`Tokenizer::encode`]; returns a `(C_c,)` tensor.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let t = ids.len();
        let ids_t = Tensor::new(ids, &Device::Cpu)?;
        let x = self.token_embedding.index_select(&ids_t, 0)?;
        let x = (x + self.positional_embedding.narrow(0, 0, t)?)?.unsqueeze(0)?;
        let mask: Vec<f32> = (0..t)
            .flat_map(|i| (0..t).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (t, t), &Device::Cpu)?;
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask), None, (1, t))?;
        }
        let x = self.ln_final.forward(&x)?;
        let eot = x.narrow(1, t - 1, 1)?.squeeze(1)?;
        Ok(eot.matmul(&self.text_projection)?.squeeze(0)?)
    }
}

/// Class-prompt embeddings computed once and shared; the counter records actual encodes.
#[derive(Debug, Default)]
pub struct TextEmbeddingCache {
    entries: Mutex<HashMap<String, Tensor>>,
    encodes: AtomicUsize,
}

impl TextEmbeddingCache {
    pub fn get_or_encode(&self, key: &str, encode: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        if let Some(t) = self.entries.lock().expect("text cache lock").get(key) {
            return Ok(t.clone());
        }
        let t = encode()?.detach();
        self.encodes.fetch_add(1, Ordering::SeqCst);
        self.entries.lock().expect("text cache lock").insert(key.to_string(), t.clone());
        Ok(t)
    }

    pub fn encode_count(&self) -> usize {
        self.encodes.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("text cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.lock().expect("text cache lock").clear();
    }
}
