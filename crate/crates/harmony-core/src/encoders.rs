//! Frozen-after-pretraining token encoders.
//!
//! The vocabulary is a closed word list covering everything the benchmark
//! can say: count words, class words (singular and plural), background and
//! style names, and the connectives of the caption templates. Index 0 is the
//! reserved null token used for unconditional prediction and the frozen
//! branch of the injected attention.
//!
//! Text tokens are embedding rows plus fixed learned positional offsets.
//! Images are encoded by a patchify convolution, a pointwise nonlinearity
//! stage, and learned positional embeddings, giving `(size / patch)^2`
//! tokens of dimension `d_v`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{HarmonyError, Result};
use crate::nn::{silu_backward, silu_forward, Conv2d, Embedding, Linear, Module, Param};
use crate::require;
use crate::rng::CounterRng;
use crate::scene::{SceneSpec, BACKGROUNDS, CLASSES, COUNT_WORDS, STYLES};
use crate::tensor::{FeatureMap, LatentImage};

pub const NULL_TOKEN: &str = "<null>";

/// Longest caption: "<count> <class> on <bg> background in <style> style".
pub const MAX_TOKENS: usize = 12;

/// Closed, ordered token list. The null token has index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        tokens.push(String::from(NULL_TOKEN));
        for w in COUNT_WORDS {
            tokens.push(String::from(w));
        }
        for c in &CLASSES {
            tokens.push(String::from(c.name));
            tokens.push(String::from(c.plural));
        }
        for (name, _) in BACKGROUNDS {
            tokens.push(String::from(name));
        }
        for s in STYLES {
            tokens.push(String::from(s));
        }
        for kw in ["on", "in", "background", "style"] {
            tokens.push(String::from(kw));
        }
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| HarmonyError::UnknownToken(String::from(token)))
    }

    /// Whitespace tokenization against the closed list; any unknown word is
    /// an error naming the word.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for word in caption.split_whitespace() {
            ids.push(self.id(word)?);
        }
        require!(!ids.is_empty(), "empty caption");
        require!(
            ids.len() <= MAX_TOKENS,
            "caption longer than {MAX_TOKENS} tokens"
        );
        Ok(ids)
    }
}

/// The count-carrying auxiliary caption of a scene: count word plus class
/// word, e.g. "seven circles", "one circle".
pub fn auxiliary_caption(scene: &SceneSpec) -> String {
    alloc::format!(
        "{} {}",
        COUNT_WORDS[scene.count - 1],
        scene.class().word(scene.count)
    )
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub emb: Embedding,
    pub pos: Param,
    pub d_t: usize,
}

impl TextEncoder {
    pub fn new(rng: &mut CounterRng, vocab_len: usize, d_t: usize) -> Self {
        Self {
            emb: Embedding::new(rng, vocab_len, d_t),
            pos: Param::gaussian(rng, MAX_TOKENS * d_t, d_t),
            d_t,
        }
    }

    /// Token ids to `(1, n, d_t)` features: embedding row plus positional
    /// offset. Pure and deterministic.
    pub fn encode(&self, ids: &[usize]) -> FeatureMap {
        let mut data = self.emb.forward(ids);
        for (i, row) in data.chunks_mut(self.d_t).enumerate() {
            for (v, p) in row.iter_mut().zip(&self.pos.data[i * self.d_t..]) {
                *v += p;
            }
        }
        FeatureMap {
            data,
            b: 1,
            n: ids.len(),
            d: self.d_t,
        }
    }

    /// Features of the null prompt `(1, 1, d_t)`.
    pub fn null_features(&self) -> FeatureMap {
        self.encode(&[0])
    }

    pub fn backward(&mut self, ids: &[usize], d_out: &[f64]) {
        self.emb.backward(ids, d_out);
        self.pos.accumulate(|g| {
            for (i, row) in d_out.chunks(self.d_t).enumerate() {
                for (gv, dv) in g[i * self.d_t..(i + 1) * self.d_t].iter_mut().zip(row) {
                    *gv += dv;
                }
            }
        });
    }
}

impl Module for TextEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.emb.visit_params(&alloc::format!("{prefix}.emb"), f);
        f(&alloc::format!("{prefix}.pos"), &mut self.pos);
    }
}

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patchify: Conv2d,
    pub point: Linear,
    pub pos: Param,
    pub d_v: usize,
    pub patch: usize,
    pub tokens: usize,
}

pub struct ImageEncoderCache {
    img: Vec<f64>,
    silu_pre: Vec<f64>,
    point_in: Vec<f64>,
    h: usize,
    w: usize,
}

impl ImageEncoder {
    pub fn new(
        rng: &mut CounterRng,
        channels: usize,
        image_size: usize,
        patch: usize,
        d_v: usize,
    ) -> Self {
        let side = image_size / patch;
        let tokens = side * side;
        Self {
            patchify: Conv2d::new(rng, channels, d_v, patch, patch, 0),
            point: Linear::new(rng, d_v, d_v, true),
            pos: Param::gaussian(rng, tokens * d_v, d_v),
            d_v,
            patch,
            tokens,
        }
    }

    /// `(B, C, H, W)` image to `(B, n_tokens, d_v)` features.
    pub fn encode(&self, img: &LatentImage) -> Result<FeatureMap> {
        Ok(self.encode_cached(img)?.0)
    }

    pub fn encode_cached(&self, img: &LatentImage) -> Result<(FeatureMap, ImageEncoderCache)> {
        let side = img.h / self.patch;
        require!(
            img.h == img.w && side * self.patch == img.h,
            "image ({}, {}) incompatible with patch {}",
            img.h,
            img.w,
            self.patch
        );
        require!(
            side * side == self.tokens,
            "image size {} does not match the configured token grid",
            img.h
        );
        // patchify emits (B, d_v, side, side); transpose planes to tokens
        let raw = self.patchify.forward(&img.data, img.b, img.h, img.w);
        let n = self.tokens;
        let mut tokens = alloc::vec![0.0; img.b * n * self.d_v];
        for b in 0..img.b {
            for d in 0..self.d_v {
                for t in 0..n {
                    tokens[(b * n + t) * self.d_v + d] = raw[(b * self.d_v + d) * n + t];
                }
            }
        }
        let silu_pre = silu_forward(&mut tokens);
        let point_in = tokens.clone();
        let mut data = self.point.forward(&tokens, img.b * n);
        for b in 0..img.b {
            for t in 0..n {
                for d in 0..self.d_v {
                    data[(b * n + t) * self.d_v + d] += self.pos.data[t * self.d_v + d];
                }
            }
        }
        Ok((
            FeatureMap {
                data,
                b: img.b,
                n,
                d: self.d_v,
            },
            ImageEncoderCache {
                img: img.data.clone(),
                silu_pre,
                point_in,
                h: img.h,
                w: img.w,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ImageEncoderCache, d_out: &[f64], bsz: usize) {
        let n = self.tokens;
        self.pos.accumulate(|g| {
            for b in 0..bsz {
                for t in 0..n {
                    for d in 0..self.d_v {
                        g[t * self.d_v + d] += d_out[(b * n + t) * self.d_v + d];
                    }
                }
            }
        });
        let mut dtok = self.point.backward(&cache.point_in, d_out, bsz * n);
        silu_backward(&cache.silu_pre, &mut dtok);
        // transpose token grads back to plane layout for the conv
        let mut draw = alloc::vec![0.0; bsz * self.d_v * n];
        for b in 0..bsz {
            for d in 0..self.d_v {
                for t in 0..n {
                    draw[(b * self.d_v + d) * n + t] = dtok[(b * n + t) * self.d_v + d];
                }
            }
        }
        self.patchify
            .backward(&cache.img, &draw, bsz, cache.h, cache.w);
    }
}

impl Module for ImageEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.patchify
            .visit_params(&alloc::format!("{prefix}.patch"), f);
        self.point.visit_params(&alloc::format!("{prefix}.point"), f);
        f(&alloc::format!("{prefix}.pos"), &mut self.pos);
    }
}
