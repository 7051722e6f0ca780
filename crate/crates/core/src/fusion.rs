//! Prompt token assembly and the feature enhancer that fuses prompt and
//! image tokens.

use serde::{Deserialize, Serialize};

use crate::encoders::TextPrompt;
use crate::error::{Error, Result};
use crate::nn::{additive_mask, Init, LayerNorm, Mlp, MultiHeadAttention, ParamStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Text,
    Separator,
    Exemplar,
}

/// Where a prompt token came from: its index in the text or exemplar stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    Text(usize),
    Exemplar(usize),
}

/// The concatenated exemplar and text tokens. For each class phrase the
/// order is: its text tokens, its exemplars, its separator. Without text the
/// exemplars form anonymous groups keyed by their class id.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub embeddings: Var,
    pub kinds: Vec<TokenKind>,
    pub class_ids: Vec<Option<usize>>,
    pub origins: Vec<TokenOrigin>,
    pub attn_mask: Vec<Vec<bool>>,
}

impl TokenSet {
    /// `text` is `q x d` for `prompt`; `exemplars` is `p x d` with one class
    /// index (into `prompt.class_spans`) per exemplar.
    pub fn assemble(
        s: &mut Session,
        text: Var,
        prompt: &TextPrompt,
        exemplars: Var,
        exemplar_classes: &[usize],
    ) -> Result<TokenSet> {
        let q = s.tape.shape(text)[0];
        let p = s.tape.shape(exemplars)[0];
        if q != prompt.len() || p != exemplar_classes.len() {
            return Err(Error::shape("TokenSet::assemble", &[q, p], &[prompt.len(), exemplar_classes.len()]));
        }
        if p + q == 0 {
            return Err(Error::EmptyPrompt);
        }
        let mut origins = Vec::with_capacity(p + q);
        let mut class_ids = Vec::with_capacity(p + q);
        let mut kinds = Vec::with_capacity(p + q);
        if q == 0 {
            for (j, &c) in exemplar_classes.iter().enumerate() {
                origins.push(TokenOrigin::Exemplar(j));
                class_ids.push(Some(c));
                kinds.push(TokenKind::Exemplar);
            }
        } else {
            for (j, &c) in exemplar_classes.iter().enumerate() {
                if c >= prompt.class_spans.len() {
                    return Err(Error::UnknownExemplarClass { index: j, class: c });
                }
            }
            let mut next = 0;
            for (c, &(a, b)) in prompt.class_spans.iter().enumerate() {
                // stray separators between phrases, if any
                for t in next..a {
                    origins.push(TokenOrigin::Text(t));
                    class_ids.push(None);
                    kinds.push(TokenKind::Separator);
                }
                for t in a..b {
                    origins.push(TokenOrigin::Text(t));
                    class_ids.push(Some(c));
                    kinds.push(TokenKind::Text);
                }
                for (j, _) in exemplar_classes.iter().enumerate().filter(|&(_, &ec)| ec == c) {
                    origins.push(TokenOrigin::Exemplar(j));
                    class_ids.push(Some(c));
                    kinds.push(TokenKind::Exemplar);
                }
                next = b;
            }
            for t in next..q {
                origins.push(TokenOrigin::Text(t));
                class_ids.push(None);
                kinds.push(TokenKind::Separator);
            }
        }
        let rows: Vec<usize> = origins
            .iter()
            .map(|o| match *o {
                TokenOrigin::Text(t) => t,
                TokenOrigin::Exemplar(j) => q + j,
            })
            .collect();
        let all = s.tape.concat_rows(&[text, exemplars])?;
        let embeddings = s.tape.gather_rows(all, &rows)?;
        let attn_mask = build_attention_mask(&kinds, &class_ids)?;
        Ok(TokenSet {
            embeddings,
            kinds,
            class_ids,
            origins,
            attn_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn num_exemplars(&self) -> usize {
        self.kinds.iter().filter(|k| **k == TokenKind::Exemplar).count()
    }

    /// Tokens (text and exemplar) associated with class `c`.
    pub fn class_mask(&self, c: usize) -> Vec<bool> {
        self.class_ids.iter().map(|&id| id == Some(c)).collect()
    }

    /// Set positions of the text tokens `[a, b)`.
    pub fn text_mask(&self, span: (usize, usize)) -> Vec<bool> {
        self.origins
            .iter()
            .map(|o| matches!(*o, TokenOrigin::Text(t) if t >= span.0 && t < span.1))
            .collect()
    }

    pub fn additive_mask(&self) -> Tensor {
        let n = self.len();
        additive_mask(n, n, |i, j| self.attn_mask[i][j])
    }
}

/// Allowed-attention matrix: a token sees itself and every token of its own
/// class. Separators (class `None`) see only themselves.
pub fn build_attention_mask(kinds: &[TokenKind], class_ids: &[Option<usize>]) -> Result<Vec<Vec<bool>>> {
    if kinds.len() != class_ids.len() {
        return Err(Error::shape("build_attention_mask", &[kinds.len()], &[class_ids.len()]));
    }
    let has_text = kinds.iter().any(|k| *k != TokenKind::Exemplar);
    for (i, (k, c)) in kinds.iter().zip(class_ids).enumerate() {
        if *k != TokenKind::Exemplar {
            continue;
        }
        let class = c.ok_or(Error::UnknownExemplarClass { index: i, class: usize::MAX })?;
        let named = (0..kinds.len()).any(|j| kinds[j] == TokenKind::Text && class_ids[j] == Some(class));
        if has_text && !named {
            return Err(Error::UnknownExemplarClass { index: i, class });
        }
    }
    let n = kinds.len();
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| i == j || (class_ids[i].is_some() && class_ids[i] == class_ids[j]))
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancerConfig {
    pub blocks: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
struct EnhancerBlock {
    token_norm: LayerNorm,
    token_attn: MultiHeadAttention,
    image_norm: LayerNorm,
    image_attn: MultiHeadAttention,
    i2t_query_norm: LayerNorm,
    i2t_key_norm: LayerNorm,
    i2t_attn: MultiHeadAttention,
    t2i_query_norm: LayerNorm,
    t2i_key_norm: LayerNorm,
    t2i_attn: MultiHeadAttention,
    token_ffn_norm: LayerNorm,
    token_ffn: Mlp,
    image_ffn_norm: LayerNorm,
    image_ffn: Mlp,
}

impl EnhancerBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        let ln = |store: &mut ParamStore, part: &str| LayerNorm::new(store, &format!("{name}.{part}"), d);
        EnhancerBlock {
            token_norm: ln(store, "token_norm"),
            token_attn: MultiHeadAttention::new(store, init, &format!("{name}.token_attn"), d, heads),
            image_norm: ln(store, "image_norm"),
            image_attn: MultiHeadAttention::new(store, init, &format!("{name}.image_attn"), d, heads),
            i2t_query_norm: ln(store, "i2t_query_norm"),
            i2t_key_norm: ln(store, "i2t_key_norm"),
            i2t_attn: MultiHeadAttention::new(store, init, &format!("{name}.i2t_attn"), d, heads),
            t2i_query_norm: ln(store, "t2i_query_norm"),
            t2i_key_norm: ln(store, "t2i_key_norm"),
            t2i_attn: MultiHeadAttention::new(store, init, &format!("{name}.t2i_attn"), d, heads),
            token_ffn_norm: ln(store, "token_ffn_norm"),
            token_ffn: Mlp::new(store, init, &format!("{name}.token_ffn"), &[d, 4 * d, d]),
            image_ffn_norm: ln(store, "image_ffn_norm"),
            image_ffn: Mlp::new(store, init, &format!("{name}.image_ffn"), &[d, 4 * d, d]),
        }
    }

    fn forward(&self, s: &mut Session, img: Var, tok: Var, mask: &Tensor, b: usize) -> Result<(Var, Var)> {
        let h = self.token_norm.forward(s, tok)?;
        let h = self.token_attn.forward(s, h, h, Some(mask), &format!("enhancer{b}/token"))?;
        let tok = s.tape.add(tok, h)?;

        let h = self.image_norm.forward(s, img)?;
        let h = self.image_attn.forward(s, h, h, None, &format!("enhancer{b}/image"))?;
        let img = s.tape.add(img, h)?;

        // image attends to the prompt, then the prompt to the updated image
        let qn = self.i2t_query_norm.forward(s, img)?;
        let kn = self.i2t_key_norm.forward(s, tok)?;
        let h = self.i2t_attn.forward(s, qn, kn, None, &format!("enhancer{b}/image_to_token"))?;
        let img = s.tape.add(img, h)?;

        let qn = self.t2i_query_norm.forward(s, tok)?;
        let kn = self.t2i_key_norm.forward(s, img)?;
        let h = self.t2i_attn.forward(s, qn, kn, None, &format!("enhancer{b}/token_to_image"))?;
        let tok = s.tape.add(tok, h)?;

        let h = self.token_ffn_norm.forward(s, tok)?;
        let h = self.token_ffn.forward(s, h)?;
        let tok = s.tape.add(tok, h)?;
        let h = self.image_ffn_norm.forward(s, img)?;
        let h = self.image_ffn.forward(s, h)?;
        let img = s.tape.add(img, h)?;
        Ok((img, tok))
    }
}

/// Stack of fusion blocks. Each block runs masked self-attention over the
/// prompt tokens, self-attention over the image tokens, then image-to-prompt
/// and prompt-to-image cross-attention, and a feed-forward per stream.
#[derive(Clone, Debug)]
pub struct FeatureEnhancer {
    blocks: Vec<EnhancerBlock>,
    final_token_norm: LayerNorm,
    final_image_norm: LayerNorm,
}

/// Fused prompt (`z_vt`) and image (`z_img`) tokens.
#[derive(Clone, Copy, Debug)]
pub struct Enhanced {
    pub prompt: Var,
    pub image: Var,
}

impl FeatureEnhancer {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: EnhancerConfig, d: usize) -> Self {
        FeatureEnhancer {
            blocks: (0..cfg.blocks.max(1))
                .map(|b| EnhancerBlock::new(store, init, &format!("enhancer.block{b}"), d, cfg.heads))
                .collect(),
            final_token_norm: LayerNorm::new(store, "enhancer.final_token_norm", d),
            final_image_norm: LayerNorm::new(store, "enhancer.final_image_norm", d),
        }
    }

    pub fn enhance(&self, s: &mut Session, image: Var, tokens: &TokenSet) -> Result<Enhanced> {
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let (di, dt) = (s.tape.shape(image)[1], s.tape.shape(tokens.embeddings)[1]);
        if di != dt {
            return Err(Error::shape("enhance", s.tape.shape(image), s.tape.shape(tokens.embeddings)));
        }
        let mask = tokens.additive_mask();
        let (mut img, mut tok) = (image, tokens.embeddings);
        for (b, block) in self.blocks.iter().enumerate() {
            (img, tok) = block.forward(s, img, tok, &mask, b)?;
        }
        Ok(Enhanced {
            prompt: self.final_token_norm.forward(s, tok)?,
            image: self.final_image_norm.forward(s, img)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use TokenKind::*;

    #[test]
    fn one_class_is_fully_connected() {
        let m = build_attention_mask(&[Text, Text, Exemplar, Exemplar], &[Some(0); 4]).unwrap();
        assert!(m.iter().flatten().all(|&b| b));
    }

    #[test]
    fn two_classes_are_block_diagonal() {
        let kinds = [Text, Exemplar, Separator, Text, Separator];
        let classes = [Some(0), Some(0), None, Some(1), None];
        let m = build_attention_mask(&kinds, &classes).unwrap();
        let expect = |i: usize, j: usize| i == j || (classes[i].is_some() && classes[i] == classes[j]);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m[i][j], expect(i, j), "({i},{j})");
                assert_eq!(m[i][j], m[j][i]);
            }
        }
        assert!(!m[0][3] && !m[2][0] && m[0][1]);
    }

    #[test]
    fn exemplars_without_text_form_their_own_group() {
        let m = build_attention_mask(&[Exemplar, Exemplar, Exemplar], &[Some(0); 3]).unwrap();
        assert!(m.iter().flatten().all(|&b| b));
    }

    #[test]
    fn exemplar_of_unnamed_class_is_rejected() {
        let err = build_attention_mask(&[Text, Separator, Exemplar], &[Some(0), None, Some(3)]).unwrap_err();
        assert!(matches!(err, Error::UnknownExemplarClass { index: 2, class: 3 }));
        assert!(build_attention_mask(&[Exemplar], &[None]).is_err());
    }
}
