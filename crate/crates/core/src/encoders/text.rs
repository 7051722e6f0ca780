use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{additive_mask, Init, LayerNorm, Mlp, MultiHeadAttention, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Separator token closing every class phrase.
pub const SEPARATOR: &str = ".";

/// Fixed word list; a word's id is its line number in the vocabulary file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from words in order, dropping duplicates. The
    /// separator is always present.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Vocabulary {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in std::iter::once(SEPARATOR.to_string()).chain(words.into_iter().map(|w| w.as_ref().to_lowercase())) {
            if !w.is_empty() && !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn parse(text: &str) -> Result<Vocabulary> {
        let words: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            if v.index.insert(w.to_string(), v.words.len()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
            v.words.push(w.to_string());
        }
        if !v.index.contains_key(SEPARATOR) {
            return Err(Error::Config("vocabulary lacks the \".\" separator".into()));
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        Vocabulary::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn separator(&self) -> usize {
        self.index[SEPARATOR]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// A tokenized caption: class phrases separated by `"."`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub raw: String,
    pub tokens: Vec<usize>,
    /// `[start, end)` token range of each class phrase, excluding its separator.
    pub class_spans: Vec<(usize, usize)>,
    /// Token range used for restricted scoring, if any.
    pub keyword_span: Option<(usize, usize)>,
}

impl TextPrompt {
    pub fn empty() -> TextPrompt {
        TextPrompt {
            raw: String::new(),
            tokens: Vec::new(),
            class_spans: Vec::new(),
            keyword_span: None,
        }
    }

    /// Splits `raw` on `"."` into class phrases, lowercases, splits words on
    /// whitespace and closes every phrase with the separator token.
    pub fn parse(raw: &str, vocab: &Vocabulary) -> Result<TextPrompt> {
        let phrases: Vec<Vec<String>> = raw
            .split(SEPARATOR)
            .map(|p| p.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .filter(|p| !p.is_empty())
            .collect();
        let refs: Vec<Vec<&str>> = phrases.iter().map(|p| p.iter().map(String::as_str).collect()).collect();
        let mut prompt = TextPrompt::from_phrases(&refs, vocab)?;
        prompt.raw = raw.to_string();
        Ok(prompt)
    }

    pub fn from_phrases(phrases: &[Vec<&str>], vocab: &Vocabulary) -> Result<TextPrompt> {
        let mut tokens = Vec::new();
        let mut class_spans = Vec::new();
        let mut raw = Vec::new();
        for words in phrases {
            let start = tokens.len();
            for w in words {
                tokens.push(vocab.id(w).ok_or_else(|| Error::UnknownWord(w.to_string()))?);
            }
            class_spans.push((start, tokens.len()));
            tokens.push(vocab.separator());
            raw.push(format!("{} .", words.join(" ")));
        }
        Ok(TextPrompt {
            raw: raw.join(" "),
            tokens,
            class_spans,
            keyword_span: None,
        })
    }

    pub fn with_keyword(mut self, span: (usize, usize)) -> Result<TextPrompt> {
        if span.0 >= span.1 || span.1 > self.tokens.len() {
            return Err(Error::invalid(format!(
                "keyword span {span:?} outside {} tokens",
                self.tokens.len()
            )));
        }
        self.keyword_span = Some(span);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Class index of every token, `None` for separators.
    pub fn token_classes(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.tokens.len()];
        for (c, &(a, b)) in self.class_spans.iter().enumerate() {
            for slot in &mut out[a..b] {
                *slot = Some(c);
            }
        }
        out
    }

    /// Position of every token within its phrase; separators continue the count.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = vec![0; self.tokens.len()];
        for &(a, b) in &self.class_spans {
            for (i, slot) in out[a..=b.min(self.tokens.len() - 1)].iter_mut().enumerate() {
                *slot = i;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
struct TextLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
}

/// Word embeddings plus learned in-phrase positions, refined by a shallow
/// pre-norm transformer whose attention stays inside each class phrase.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextConfig,
    embedding: ParamId,
    position: ParamId,
    layers: Vec<TextLayer>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: TextConfig, d: usize) -> TextEncoder {
        let embedding = store.add("text.embedding", init.normal([cfg.vocab_size, d], 0.5));
        let position = store.add("text.position", init.normal([cfg.max_len, d], 0.1));
        let layers = (0..cfg.layers)
            .map(|i| {
                let name = format!("text.layer{i}");
                TextLayer {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, cfg.heads),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    ffn: Mlp::new(store, init, &format!("{name}.ffn"), &[d, 4 * d, d]),
                }
            })
            .collect();
        TextEncoder {
            config: cfg,
            embedding,
            position,
            layers,
        }
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn encode(&self, s: &mut Session, prompt: &TextPrompt) -> Result<Var> {
        let d = s.params().get(self.embedding).cols();
        if prompt.is_empty() {
            return Ok(s.constant(Tensor::zeros([0, d])));
        }
        if prompt.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "prompt has {} tokens, more than the {} allowed",
                prompt.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = prompt.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        let table = s.p(self.embedding);
        let pos_table = s.p(self.position);
        let words = s.tape.gather_rows(table, &prompt.tokens)?;
        let pos = s.tape.gather_rows(pos_table, &prompt.positions())?;
        let mut x = s.tape.add(words, pos)?;

        let classes = prompt.token_classes();
        let q = prompt.len();
        let mask = additive_mask(q, q, |i, j| i == j || (classes[i].is_some() && classes[i] == classes[j]));
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.norm1.forward(s, x)?;
            let h = layer.attn.forward(s, h, h, Some(&mask), &format!("text{l}"))?;
            x = s.tape.add(x, h)?;
            let h = layer.norm2.forward(s, x)?;
            let h = layer.ffn.forward(s, h)?;
            x = s.tape.add(x, h)?;
        }
        Ok(x)
    }
}
