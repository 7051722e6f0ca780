//! The full counting network and its checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{select_queries, CrossModalityDecoder, DecoderConfig, DecoderOutput};
use crate::encoders::{
    BoundingBox, EncoderConfig, ExemplarEncoder, ImageEncoder, ImageInput, MultiScaleFeatures, TextConfig, TextEncoder, TextPrompt,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::fusion::{EnhancerConfig, FeatureEnhancer, TokenKind, TokenOrigin, TokenSet};
use crate::nn::{sine_position, Init, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub text_layers: usize,
    pub max_text_len: usize,
    pub enhancer: EnhancerConfig,
    pub decoder: DecoderConfig,
    pub heads: usize,
    /// Query budget.
    pub k: usize,
    /// RoIAlign output grid per exemplar.
    pub pool: usize,
    /// Shortest image side fed to the network.
    pub image_side: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            text_layers: 1,
            max_text_len: 256,
            enhancer: EnhancerConfig { blocks: 2, heads: 4 },
            decoder: DecoderConfig { layers: 2, heads: 4 },
            heads: 4,
            k: 100,
            pool: 2,
            image_side: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.encoder.d_model;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if d == 0 || d % 2 != 0 {
            return bad("d_model must be even and positive");
        }
        for h in [self.heads, self.enhancer.heads, self.decoder.heads] {
            if h == 0 || d % h != 0 {
                return bad("head count must divide d_model");
            }
        }
        if self.enhancer.blocks == 0 || self.decoder.layers == 0 {
            return bad("enhancer and decoder need at least one block");
        }
        if self.k == 0 || self.pool == 0 || self.encoder.stride == 0 {
            return bad("k, pool and stride must be positive");
        }
        if self.image_side < 4 * self.encoder.stride || self.image_side < crate::encoders::MIN_SIDE {
            return bad("image side is smaller than the coarsest stride");
        }
        Ok(())
    }
}

/// A prompt in model terms: tokenized text plus exemplar boxes (pixel
/// coordinates of the image given to [`CountingModel::forward`]), each tagged
/// with the class phrase it illustrates.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub text: TextPrompt,
    pub boxes: Vec<BoundingBox>,
    pub exemplar_classes: Vec<usize>,
    /// Precomputed exemplar tokens (`p x d`) used instead of pooling the
    /// boxes from the current image, e.g. when running on a tile that does
    /// not contain the exemplars.
    pub exemplar_tokens: Option<Tensor>,
}

impl Prompt {
    /// Boxes all illustrate the first class phrase.
    pub fn new(text: TextPrompt, boxes: Vec<BoundingBox>) -> Prompt {
        let exemplar_classes = vec![0; boxes.len()];
        Prompt {
            text,
            boxes,
            exemplar_classes,
            exemplar_tokens: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty() && self.boxes.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Prompt {
        Prompt {
            boxes: self.boxes.iter().map(|b| b.scaled(s)).collect(),
            ..self.clone()
        }
    }
}

/// Everything produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub tokens: TokenSet,
    pub output: DecoderOutput,
    pub token_centers: Vec<(f64, f64)>,
}

/// Plain-value result of inference on one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `k x (p+q)` scores in `(0, 1)`.
    pub similarity: Tensor,
    /// `k x 2` normalized centers.
    pub centers: Tensor,
    pub kinds: Vec<TokenKind>,
    pub class_ids: Vec<Option<usize>>,
    pub origins: Vec<TokenOrigin>,
    pub image_height: usize,
    pub image_width: usize,
}

impl Prediction {
    /// Token mask selecting the text tokens `[a, b)`.
    pub fn text_mask(&self, span: (usize, usize)) -> Vec<bool> {
        self.origins
            .iter()
            .map(|o| matches!(*o, TokenOrigin::Text(t) if t >= span.0 && t < span.1))
            .collect()
    }

    pub fn class_mask(&self, c: usize) -> Vec<bool> {
        self.class_ids.iter().map(|&id| id == Some(c)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct CountingModel {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    image_encoder: ImageEncoder,
    exemplar_encoder: ExemplarEncoder,
    text_encoder: TextEncoder,
    enhancer: FeatureEnhancer,
    decoder: CrossModalityDecoder,
    level_embedding: ParamId,
    exemplar_embedding: ParamId,
}

const MAGIC: &[u8; 8] = b"CNTGD\x00\x01\n";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocabulary: Vec<String>,
    metadata: serde_json::Value,
}

impl CountingModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<CountingModel> {
        config.validate()?;
        let d = config.d_model();
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed);
        let image_encoder = ImageEncoder::new(&mut params, &mut init, config.encoder);
        let exemplar_encoder = ExemplarEncoder::new(&mut params, &mut init, d);
        let text_encoder = TextEncoder::new(
            &mut params,
            &mut init,
            TextConfig {
                vocab_size: vocab.len(),
                max_len: config.max_text_len,
                layers: config.text_layers,
                heads: config.heads,
            },
            d,
        );
        let enhancer = FeatureEnhancer::new(&mut params, &mut init, config.enhancer, d);
        let decoder = CrossModalityDecoder::new(&mut params, &mut init, config.decoder, d);
        let level_embedding = params.add("model.level_embedding", init.normal([3, d], 0.1));
        let exemplar_embedding = params.add("model.exemplar_embedding", init.normal([1, d], 0.1));
        Ok(CountingModel {
            config,
            vocab,
            params,
            image_encoder,
            exemplar_encoder,
            text_encoder,
            enhancer,
            decoder,
            level_embedding,
            exemplar_embedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the working resolution used by the inference pipeline. No
    /// parameter depends on it.
    pub fn set_image_side(&mut self, side: usize) -> Result<()> {
        let config = ModelConfig {
            image_side: side,
            ..self.config.clone()
        };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn decoder(&self) -> &CrossModalityDecoder {
        &self.decoder
    }

    pub fn parse_text(&self, text: &str) -> Result<TextPrompt> {
        TextPrompt::parse(text, &self.vocab)
    }

    /// Runs the network on a normalized image using the configured budget.
    pub fn forward(&self, s: &mut Session, img: &ImageInput, prompt: &Prompt) -> Result<Forward> {
        self.forward_with_k(s, img, prompt, self.config.k)
    }

    pub fn forward_with_k(&self, s: &mut Session, img: &ImageInput, prompt: &Prompt, k: usize) -> Result<Forward> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if prompt.boxes.len() != prompt.exemplar_classes.len() {
            return Err(Error::invalid("one class index is required per exemplar box"));
        }
        let feats = self.image_encoder.encode(s, img)?;
        let d = feats.d_model;
        let token_centers = feats.token_centers();

        let exemplars = match &prompt.exemplar_tokens {
            Some(t) => {
                if t.rank() != 2 || t.rows() != prompt.boxes.len() || t.cols() != d {
                    return Err(Error::shape("exemplar tokens", t.shape(), &[prompt.boxes.len(), d]));
                }
                s.constant(t.clone())
            }
            None => self.pool_exemplars(s, &feats, &prompt.boxes)?,
        };
        let text = self.text_encoder.encode(s, &prompt.text)?;
        let tokens = TokenSet::assemble(s, text, &prompt.text, exemplars, &prompt.exemplar_classes)?;

        let levels: Vec<_> = feats.levels.iter().map(|l| l.features).collect();
        let image = s.tape.concat_rows(&levels)?;
        let level_table = s.p(self.level_embedding);
        let level_rows = s.tape.gather_rows(level_table, &feats.token_levels())?;
        let pos = Tensor::new(
            [token_centers.len(), d],
            token_centers.iter().flat_map(|&(x, y)| sine_position(x, y, d)).collect(),
        )?;
        let pos = s.constant(pos);
        let image = s.tape.add(image, level_rows)?;
        let image = s.tape.add(image, pos)?;

        let fused = self.enhancer.enhance(s, image, &tokens)?;
        let selection = select_queries(s.value(fused.image), s.value(fused.prompt), k)?;
        let output = self.decoder.decode(s, fused.image, fused.prompt, selection, &token_centers)?;
        Ok(Forward {
            tokens,
            output,
            token_centers,
        })
    }

    fn pool_exemplars(&self, s: &mut Session, feats: &MultiScaleFeatures, boxes: &[BoundingBox]) -> Result<Var> {
        let exemplars = self.exemplar_encoder.tokenize(s, feats, boxes, self.config.pool)?;
        if boxes.is_empty() {
            return Ok(exemplars);
        }
        let e = s.p(self.exemplar_embedding);
        let e = s.tape.reshape(e, &[feats.d_model])?;
        s.tape.add_row(exemplars, e)
    }

    /// Exemplar tokens of `boxes` pooled from a normalized image.
    pub fn exemplar_tokens(&self, img: &ImageInput, boxes: &[BoundingBox]) -> Result<Tensor> {
        let mut s = Session::inference(&self.params);
        let feats = self.image_encoder.encode(&mut s, img)?;
        let v = self.pool_exemplars(&mut s, &feats, boxes)?;
        Ok(s.value(v).clone())
    }

    /// Inference on a normalized image, budget clamped to the token count
    /// when `clamp_k` is set.
    pub fn predict(&self, img: &ImageInput, prompt: &Prompt, clamp_k: bool) -> Result<Prediction> {
        let mut s = Session::inference(&self.params);
        let k = if clamp_k {
            self.config.k.min(self.num_image_tokens(img.height(), img.width()))
        } else {
            self.config.k
        };
        let f = self.forward_with_k(&mut s, img, prompt, k)?;
        Ok(Prediction {
            similarity: f.output.similarity(&s),
            centers: f.output.centers(&s),
            kinds: f.tokens.kinds,
            class_ids: f.tokens.class_ids,
            origins: f.tokens.origins,
            image_height: img.height(),
            image_width: img.width(),
        })
    }

    pub fn num_image_tokens(&self, height: usize, width: usize) -> usize {
        let s = self.config.encoder.stride;
        (0..3).map(|i| height.div_ceil(s << i) * width.div_ceil(s << i)).sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W, metadata: serde_json::Value) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            vocabulary: self.vocab.words().to_vec(),
            metadata,
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        self.params.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(CountingModel, serde_json::Value)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Checkpoint("corrupt header length".into()));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let vocab = Vocabulary::parse(&header.vocabulary.join("\n"))?;
        let mut model = CountingModel::new(header.config, vocab)?;
        model.params.load_from(r)?;
        Ok((model, header.metadata))
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f, metadata)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(CountingModel, serde_json::Value)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        CountingModel::read_from(&mut f)
    }
}
