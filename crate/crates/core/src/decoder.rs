//! Prompt-guided query selection and the cross-modality decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sine_position, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, Session};
use crate::tensor::{logit, sigmoid, Tensor, Var};

/// The `k` image tokens chosen as decoder queries.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySelection {
    pub k: usize,
    pub indices: Vec<usize>,
    /// Row-max similarity of each selected token, in selection order.
    pub scores: Vec<f64>,
}

/// Picks the `k` rows of `image` (`n x d`) whose best dot product with any
/// row of `prompt` (`m x d`) is largest. Ties go to the lower index; the
/// result is ordered by decreasing score.
pub fn select_queries(image: &Tensor, prompt: &Tensor, k: usize) -> Result<QuerySelection> {
    let (n, d) = (image.rows(), image.cols());
    let m = prompt.rows();
    if m == 0 {
        return Err(Error::EmptyPrompt);
    }
    if prompt.cols() != d {
        return Err(Error::shape("select_queries", image.shape(), prompt.shape()));
    }
    if k > n {
        return Err(Error::QueryBudget { k, n });
    }
    let best: Vec<f64> = (0..n)
        .map(|i| {
            let row = image.row(i);
            (0..m)
                .map(|j| row.iter().zip(prompt.row(j)).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(QuerySelection {
        k,
        scores: order.iter().map(|&i| best[i]).collect(),
        indices: order,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    image_norm: LayerNorm,
    image_attn: MultiHeadAttention,
    prompt_norm: LayerNorm,
    prompt_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: Mlp,
    center: Mlp,
}

/// Query-vs-prompt logits and center predictions for one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `k x (p+q)` pre-sigmoid similarities.
    pub logits: Var,
    /// `k x 2` normalized `(cx, cy)` in `(0, 1)`.
    pub centers: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub selection: QuerySelection,
    /// Outputs of every layer; the last is the prediction.
    pub layers: Vec<LayerOutput>,
    /// Similarity logits of every image token before decoding (`n x (p+q)`).
    /// Their row-maxima order the query selection.
    pub token_logits: Var,
    /// Rows of `token_logits` of the selected tokens.
    pub selection_logits: Var,
    /// Normalized location of every selected token.
    pub reference: Vec<(f64, f64)>,
    /// Normalized location of every image token.
    pub token_centers: Vec<(f64, f64)>,
}

impl DecoderOutput {
    pub fn last(&self) -> LayerOutput {
        *self.layers.last().expect("decoder has at least one layer")
    }

    /// `k x (p+q)` similarity matrix.
    pub fn similarity(&self, s: &Session) -> Tensor {
        let logits = s.value(self.last().logits);
        let data = logits.data().iter().map(|&x| sigmoid(x)).collect();
        Tensor::new(logits.shape().to_vec(), data).expect("same shape")
    }

    pub fn centers(&self, s: &Session) -> Tensor {
        s.value(self.last().centers).clone()
    }
}

/// Refines the selected queries with self-attention, image cross-attention,
/// prompt cross-attention and a feed-forward per layer, then scores every
/// query against every prompt token and regresses its center.
#[derive(Clone, Debug)]
pub struct CrossModalityDecoder {
    d: usize,
    query_offset: ParamId,
    layers: Vec<DecoderLayer>,
    score_norm: LayerNorm,
    score_proj: Linear,
    score_bias: ParamId,
}

/// Center regression head whose output layer starts at zero, so that every
/// query starts at its reference point.
fn zero_center_head(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Mlp {
    let head = Mlp::new(store, init, name, &[d, d, 2]);
    let last = head.layers.last().expect("two layers");
    *store.get_mut(last.weight) = Tensor::zeros([d, 2]);
    head
}

/// Initial score bias: every query starts as background with probability
/// close to 0.99.
const PRIOR: f64 = 0.01;

impl CrossModalityDecoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: DecoderConfig, d: usize) -> Self {
        let layers = (0..cfg.layers.max(1))
            .map(|l| {
                let name = format!("decoder.layer{l}");
                DecoderLayer {
                    self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
                    self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), d, cfg.heads),
                    image_norm: LayerNorm::new(store, &format!("{name}.image_norm"), d),
                    image_attn: MultiHeadAttention::new(store, init, &format!("{name}.image_attn"), d, cfg.heads),
                    prompt_norm: LayerNorm::new(store, &format!("{name}.prompt_norm"), d),
                    prompt_attn: MultiHeadAttention::new(store, init, &format!("{name}.prompt_attn"), d, cfg.heads),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
                    ffn: Mlp::new(store, init, &format!("{name}.ffn"), &[d, 4 * d, d]),
                    center: zero_center_head(store, init, &format!("{name}.center"), d),
                }
            })
            .collect();
        CrossModalityDecoder {
            d,
            query_offset: store.add("decoder.query_offset", Tensor::zeros([d])),
            layers,
            score_norm: LayerNorm::new(store, "decoder.score_norm", d),
            score_proj: Linear::new(store, init, "decoder.score_proj", d, d),
            score_bias: store.add("decoder.score_bias", Tensor::full([1, 1], logit(PRIOR))),
        }
    }

    /// Parameters of the scoring head, which map queries to similarities.
    pub fn score_params(&self) -> [ParamId; 5] {
        [
            self.score_norm.gamma,
            self.score_norm.beta,
            self.score_proj.weight,
            self.score_proj.bias,
            self.score_bias,
        ]
    }

    /// Similarity logits `(LN(x) W + b) z_vtᵀ / sqrt(d) + bias`.
    pub fn score(&self, s: &mut Session, queries: Var, prompt: Var) -> Result<Var> {
        let h = self.score_norm.forward(s, queries)?;
        let h = self.score_proj.forward(s, h)?;
        self.raw_score(s, h, prompt)
    }

    fn raw_score(&self, s: &mut Session, queries: Var, prompt: Var) -> Result<Var> {
        let dots = s.tape.matmul_nt(queries, prompt)?;
        let dots = s.tape.scale(dots, 1.0 / (self.d as f64).sqrt())?;
        let k = s.tape.shape(dots)[0];
        let m = s.tape.shape(dots)[1];
        let b = s.p(self.score_bias);
        let ones = s.constant(Tensor::full([k, 1], 1.0));
        let bias_col = s.tape.matmul(ones, b)?;
        let row = s.constant(Tensor::full([1, m], 1.0));
        let bias = s.tape.matmul(bias_col, row)?;
        s.tape.add(dots, bias)
    }

    /// `image` holds the fused image tokens (`n x d`) located at
    /// `token_centers`; `prompt` the fused prompt tokens.
    pub fn decode(
        &self,
        s: &mut Session,
        image: Var,
        prompt: Var,
        selection: QuerySelection,
        token_centers: &[(f64, f64)],
    ) -> Result<DecoderOutput> {
        let n = s.tape.shape(image)[0];
        if token_centers.len() != n {
            return Err(Error::shape("decode", &[n], &[token_centers.len()]));
        }
        if let Some(&bad) = selection.indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("selected index {bad} outside {n} image tokens")));
        }
        let reference: Vec<(f64, f64)> = selection.indices.iter().map(|&i| token_centers[i]).collect();
        let k = reference.len();
        let gathered = s.tape.gather_rows(image, &selection.indices)?;
        let token_logits = self.raw_score(s, image, prompt)?;
        let selection_logits = s.tape.gather_rows(token_logits, &selection.indices)?;

        let pos = Tensor::new(
            [k, self.d],
            reference.iter().flat_map(|&(x, y)| sine_position(x, y, self.d)).collect(),
        )?;
        let pos = s.constant(pos);
        let offset = s.p(self.query_offset);
        let mut x = s.tape.add_row(gathered, offset)?;
        x = s.tape.add(x, pos)?;

        let ref_logits = Tensor::new(
            [k, 2],
            reference.iter().flat_map(|&(cx, cy)| [logit(cx), logit(cy)]).collect(),
        )?;
        let mut ref_logits = s.constant(ref_logits);

        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.self_norm.forward(s, x)?;
            let h = layer.self_attn.forward(s, h, h, None, &format!("decoder{l}/self"))?;
            x = s.tape.add(x, h)?;
            let h = layer.image_norm.forward(s, x)?;
            let h = layer.image_attn.forward(s, h, image, None, &format!("decoder{l}/image"))?;
            x = s.tape.add(x, h)?;
            let h = layer.prompt_norm.forward(s, x)?;
            let h = layer.prompt_attn.forward(s, h, prompt, None, &format!("decoder{l}/prompt"))?;
            x = s.tape.add(x, h)?;
            let h = layer.ffn_norm.forward(s, x)?;
            let h = layer.ffn.forward(s, h)?;
            x = s.tape.add(x, h)?;

            let logits = self.score(s, x, prompt)?;
            let delta = layer.center.forward(s, x)?;
            let c = s.tape.add(delta, ref_logits)?;
            let centers = s.tape.sigmoid(c)?;
            // the next layer refines these centers without back-propagating
            // into them
            let refined = s.value(centers).data().iter().map(|&p| logit(p.clamp(1e-6, 1.0 - 1e-6))).collect();
            ref_logits = s.constant(Tensor::new([k, 2], refined)?);
            layers.push(LayerOutput { logits, centers });
        }
        Ok(DecoderOutput {
            selection,
            layers,
            token_logits,
            selection_logits,
            reference,
            token_centers: token_centers.to_vec(),
        })
    }
}
