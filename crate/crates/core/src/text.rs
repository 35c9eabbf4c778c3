//! Word-level vocabulary and a small bidirectional text encoder whose output
//! averages hidden states tapped at three depths.

use crate::nn::{Block, LayerNorm};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, TensorError, TensorResult, Var};
use rand::Rng;
use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased alphanumeric words; punctuation separates and is dropped.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

impl Vocabulary {
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<unk>", "<bos>"].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for text in corpus {
            seen.extend(words(text));
        }
        tokens.extend(seen);
        Self::from_tokens(tokens).expect("corpus words are unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `BOS` followed by word ids, truncated or padded to `max_len`, plus the
    /// validity mask.
    pub fn tokenize(&self, text: &str, max_len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids = vec![BOS];
        ids.extend(words(text).map(|w| self.id(&w)));
        ids.truncate(max_len);
        let valid_len = ids.len();
        ids.resize(max_len, PAD);
        let valid = (0..max_len).map(|i| i < valid_len).collect();
        (ids, valid)
    }

    /// One token per line; the id is the line number.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(s: &str) -> Result<Self, String> {
        let tokens: Vec<String> = s.lines().map(str::to_string).collect();
        if tokens.len() < 3 || tokens[PAD] != "<pad>" || tokens[UNK] != "<unk>" || tokens[BOS] != "<bos>" {
            return Err("vocabulary must start with <pad>, <unk>, <bos>".into());
        }
        Self::from_tokens(tokens)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    /// 1-based block indices whose outputs are averaged. Tapping the last
    /// block reads the final-norm output.
    pub taps: [usize; 3],
    pub trainable_blocks: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            depth: 6,
            dim: 48,
            heads: 4,
            max_len: 32,
            taps: [2, 4, 6],
            trainable_blocks: 1,
        }
    }
}

impl TextConfig {
    /// The 4-of-28 trainable fraction, rounded up.
    pub fn default_trainable_blocks(depth: usize) -> usize {
        (depth * 4).div_ceil(28)
    }
}

/// Tokenised batch: `ids` and `valid` are `B·L` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(vocab: &Vocabulary, texts: &[&str], max_len: usize) -> Self {
        let mut ids = Vec::with_capacity(texts.len() * max_len);
        let mut valid = Vec::with_capacity(texts.len() * max_len);
        for t in texts {
            let (i, v) = vocab.tokenize(t, max_len);
            ids.extend(i);
            valid.extend(v);
        }
        TokenBatch {
            ids,
            valid,
            batch: texts.len(),
            len: max_len,
        }
    }

    pub fn all_valid(batch: usize, len: usize) -> Self {
        TokenBatch {
            ids: vec![PAD; batch * len],
            valid: vec![true; batch * len],
            batch,
            len,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    pub vocab_size: usize,
    pub tok_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    /// Learnable constant features for null-text mode.
    pub null_text: ParamId,
}

impl TextEncoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: TextConfig, vocab_size: usize, rng: &mut R) -> Self {
        assert!(cfg.taps.iter().all(|&t| (1..=cfg.depth).contains(&t)), "taps outside [1, depth]");
        let d = cfg.dim;
        let tok_embed = store.add("text.embed", Tensor::randn(vec![vocab_size, d], 1.0, rng), ParamGroup::Head, false);
        let pos = store.add("text.pos", Tensor::randn(vec![cfg.max_len, d], 0.1, rng), ParamGroup::Head, false);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("text.block{i}"), d, cfg.heads, 4, false, rng))
            .collect();
        let norm = LayerNorm::new(store, "text.norm", d);
        let null_text = store.add("text.null", Tensor::randn(vec![cfg.max_len, d], 0.02, rng), ParamGroup::Head, false);
        TextEncoder {
            cfg,
            vocab_size,
            tok_embed,
            pos,
            blocks,
            norm,
            null_text,
        }
    }

    /// Hidden states at each tap, `[B, L, D_T]` each.
    pub fn taps<'g, S: Scalar>(&self, g: &'g Graph<S>, store: &ParamStore<S>, tokens: &TokenBatch) -> TensorResult<Vec<Var<'g, S>>> {
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(TensorError::IndexOutOfRange {
                op: "encode_text",
                index: bad,
                size: self.vocab_size,
            });
        }
        let (b, l, d) = (tokens.batch, tokens.len, self.cfg.dim);
        if l != self.cfg.max_len {
            return Err(TensorError::Contract(format!("token length {l} != max_len {}", self.cfg.max_len)));
        }
        let mut x = g
            .param(store, self.tok_embed)
            .index_select(0, &tokens.ids)?
            .reshape(vec![b, l, d])?
            .add(&g.param(store, self.pos))?;
        let mut taps = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, store, x, Some(&tokens.valid))?;
            let layer = i + 1;
            let h = if layer == self.cfg.depth {
                self.norm.forward(g, store, x)?
            } else {
                x
            };
            for &t in &self.cfg.taps {
                if t == layer {
                    taps.push(h);
                }
            }
        }
        Ok(taps)
    }

    /// Mean of the tapped hidden states.
    pub fn encode<'g, S: Scalar>(&self, g: &'g Graph<S>, store: &ParamStore<S>, tokens: &TokenBatch) -> TensorResult<Var<'g, S>> {
        let taps = self.taps(g, store, tokens)?;
        Ok(taps[0].add(&taps[1])?.add(&taps[2])?.scale(1.0 / 3.0))
    }

    /// Input-independent learnable features `[B, L, D_T]`.
    pub fn null_features<'g, S: Scalar>(&self, g: &'g Graph<S>, store: &ParamStore<S>, batch: usize) -> TensorResult<Var<'g, S>> {
        let (l, d) = (self.cfg.max_len, self.cfg.dim);
        g.param(store, self.null_text)
            .reshape(vec![1, l, d])?
            .index_select(0, &vec![0; batch])
    }

    /// Embedding table, positions and every block: the frozen part lives
    /// here too.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok_embed, self.pos];
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v.extend(self.norm.ids());
        v
    }

    /// Last `n` blocks plus the final norm.
    pub fn tail_ids(&self, n: usize) -> Vec<ParamId> {
        let start = self.blocks.len().saturating_sub(n);
        let mut v: Vec<ParamId> = self.blocks[start..].iter().flat_map(|b| b.ids()).collect();
        v.extend(self.norm.ids());
        v
    }
}
