//! Document encoding: an article in, one embedding per sentence (read at
//! the sentence start marker) and one per sub-word piece out.

mod tokenizer;
mod transformer;

use std::fs;
use std::path::PathBuf;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{Article, TokenAlignment};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub use tokenizer::{build_input, EncodedInput, PieceTokenizer, SentencePieces, MARKER_ID};
pub use transformer::{expected_shapes, forward, init_params, sinusoidal_positions, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Transformer weights loaded from `pretrained_path`.
    PretrainedLongdoc,
    /// Small randomly initialised transformer for desk-scale runs.
    ToyRandom,
}

pub const TOY_MAX_HIDDEN: usize = 32;
pub const TOY_MAX_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub hidden_dim: usize,
    pub max_input_length: usize,
    pub sentence_marker: String,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; 0 means `4 × hidden_dim`.
    pub ffn_dim: usize,
    pub attention_window: usize,
    pub vocab_size: usize,
    pub piece_len: usize,
    pub pretrained_path: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::ToyRandom,
            hidden_dim: 16,
            max_input_length: 4096,
            sentence_marker: "<s>".into(),
            layers: 2,
            heads: 2,
            ffn_dim: 0,
            attention_window: 64,
            vocab_size: 2048,
            piece_len: 4,
            pretrained_path: None,
        }
    }
}

impl EncoderConfig {
    pub fn toy(hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            ..Self::default()
        }
    }

    pub fn ffn_dim(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.hidden_dim
        } else {
            self.ffn_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.max_input_length == 0 || self.heads == 0 || self.vocab_size < 2 {
            return bad("encoder.hidden_dim, max_input_length, heads must be positive and vocab_size ≥ 2".into());
        }
        if self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "encoder.hidden_dim {} is not divisible by encoder.heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.piece_len == 0 {
            return bad("encoder.piece_len must be positive".into());
        }
        match self.backbone {
            Backbone::ToyRandom => {
                if self.hidden_dim > TOY_MAX_HIDDEN || self.layers > TOY_MAX_LAYERS {
                    return bad(format!(
                        "toy_random backbone allows hidden_dim ≤ {TOY_MAX_HIDDEN} and layers ≤ {TOY_MAX_LAYERS}"
                    ));
                }
            }
            Backbone::PretrainedLongdoc => {
                if self.pretrained_path.is_none() {
                    return bad("pretrained_longdoc backbone requires encoder.pretrained_path".into());
                }
            }
        }
        Ok(())
    }
}

/// Embeddings of one article.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentEncoding {
    /// `n × d`, one row per surviving sentence.
    pub sentence_embeddings: Array2<f64>,
    /// Per surviving sentence, one row per surviving sub-word piece.
    pub token_embeddings: Vec<Array2<f64>>,
    /// Per surviving sentence, word token → piece rows.
    pub alignments: Vec<TokenAlignment>,
    pub truncation_flag: bool,
}

impl DocumentEncoding {
    pub fn num_sentences(&self) -> usize {
        self.sentence_embeddings.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.sentence_embeddings.ncols()
    }
}

/// Nodes produced by one encoder pass on a tape.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    /// `n × d` sentence embeddings; `None` when no sentence survived.
    pub sentences: Option<Var>,
    /// Piece embeddings per sentence; `None` for a sentence whose pieces
    /// were all truncated.
    pub pieces: Vec<Option<Var>>,
}

/// The encoder architecture. Parameters are kept separately so the same
/// architecture can serve the student and both teachers.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tokenizer: PieceTokenizer,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let tokenizer = PieceTokenizer {
            vocab_size: config.vocab_size,
            piece_len: config.piece_len,
        };
        Ok(Self { config, tokenizer })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Random weights for the toy backbone; the stored weights for the
    /// pretrained one.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        let params = match self.config.backbone {
            Backbone::ToyRandom => init_params(&self.config, rng),
            Backbone::PretrainedLongdoc => {
                let path = self.config.pretrained_path.as_ref().expect("validated");
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::io(format!("reading pretrained encoder {}", path.display()), e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::json(format!("parsing pretrained encoder {}", path.display()), e))?
            }
        };
        self.check_params(&params)?;
        Ok(params)
    }

    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        for (name, shape) in expected_shapes(&self.config) {
            let p = params.require(&name)?;
            if p.dim() != shape {
                return Err(Error::Config(format!(
                    "encoder parameter `{name}` has shape {:?}, configuration expects {shape:?}",
                    p.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn prepare(&self, article: &Article) -> Result<EncodedInput> {
        let input = build_input(article, &self.tokenizer, self.config.max_input_length)?;
        if input.truncated {
            log::warn!(
                "article {} exceeds {} input positions; {} of {} sentences survive truncation",
                article.article_id,
                self.config.max_input_length,
                input.sentences.len(),
                input.total_sentences
            );
        }
        Ok(input)
    }

    pub fn forward(&self, tape: &mut Tape, scope: Scope<'_>, input: &EncodedInput) -> EncoderOutput {
        if input.is_empty() {
            let hidden = tape.leaf(Array2::zeros((0, self.config.hidden_dim)));
            return EncoderOutput {
                hidden,
                sentences: None,
                pieces: Vec::new(),
            };
        }
        let hidden = forward(tape, scope, &self.config, &input.ids);
        let markers = input.marker_positions();
        let sentences = Some(tape.gather_rows(hidden, &markers));
        let pieces = input
            .sentences
            .iter()
            .map(|s| (!s.positions.is_empty()).then(|| tape.gather_rows(hidden, &s.positions)))
            .collect();
        EncoderOutput {
            hidden,
            sentences,
            pieces,
        }
    }

    /// Encodes `article` with fixed parameters.
    pub fn encode(&self, article: &Article, params: &ParamStore) -> Result<DocumentEncoding> {
        self.check_params(params)?;
        let input = self.prepare(article)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = self.forward(&mut tape, Scope::new(&bound, ""), &input);
        let d = self.config.hidden_dim;
        let sentence_embeddings = out
            .sentences
            .map(|v| tape.value(v).clone())
            .unwrap_or_else(|| Array2::zeros((0, d)));
        let token_embeddings = out
            .pieces
            .iter()
            .map(|p| p.map(|v| tape.value(v).clone()).unwrap_or_else(|| Array2::zeros((0, d))))
            .collect();
        Ok(DocumentEncoding {
            sentence_embeddings,
            token_embeddings,
            alignments: input.sentences.into_iter().map(|s| s.alignment).collect(),
            truncation_flag: input.truncated,
        })
    }
}

/// Encodes one article under `config` with the given encoder parameters.
pub fn encode_document(article: &Article, config: &EncoderConfig, params: &ParamStore) -> Result<DocumentEncoding> {
    Encoder::new(config.clone())?.encode(article, params)
}

/// `s_{i-1} ⊕ s_i`, with the zero vector standing in for the missing
/// predecessor of the first sentence.
pub fn pair_embedding(enc: &DocumentEncoding, i: usize) -> Result<Array1<f64>> {
    let n = enc.num_sentences();
    if i >= n {
        return Err(Error::Validation(format!("sentence index {i} out of range for {n} sentences")));
    }
    let current = enc.sentence_embeddings.row(i);
    let previous = if i == 0 {
        Array1::zeros(enc.hidden_dim())
    } else {
        enc.sentence_embeddings.row(i - 1).to_owned()
    };
    Ok(concatenate(Axis(0), &[previous.view(), current]).expect("equal widths"))
}

/// Tape version of [`pair_embedding`] for all sentences at once: `n × 2d`.
pub fn pair_inputs(tape: &mut Tape, sentences: Var) -> Var {
    let (n, d) = tape.value(sentences).dim();
    let zero = tape.leaf(Array2::zeros((1, d)));
    let previous = if n > 1 {
        let head = tape.slice_rows(sentences, 0, n - 1);
        tape.concat_rows(&[zero, head])
    } else {
        zero
    };
    tape.concat_cols(&[previous, sentences])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(d: usize) -> (Encoder, ParamStore) {
        let enc = Encoder::new(EncoderConfig::toy(d)).unwrap();
        let params = enc.init_params(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        (enc, params)
    }

    #[test]
    fn sentence_embedding_shape() {
        let (enc, params) = toy(16);
        let a = Article::from_text("a", "First claim. Second claim! Third?", Split::Train);
        let out = enc.encode(&a, &params).unwrap();
        assert_eq!(out.sentence_embeddings.dim(), (3, 16));
        assert_eq!(out.token_embeddings.len(), 3);
        assert_eq!(out.token_embeddings[2].nrows(), 3);
        assert!(!out.truncation_flag);
    }

    #[test]
    fn encoding_is_deterministic() {
        let (enc, params) = toy(8);
        let a = Article::from_text("a", "Same input. Same output.", Split::Train);
        assert_eq!(enc.encode(&a, &params).unwrap(), enc.encode(&a, &params).unwrap());
        let (_, again) = toy(8);
        assert_eq!(params, again);
    }

    #[test]
    fn long_article_is_truncated_at_budget() {
        let (enc, params) = toy(8);
        // 500 sentences × (marker + 9 pieces) = 5000 positions
        let sentence = "Alpha beta gamma zeta eta nu.";
        let text = vec![sentence; 500].join(" ");
        let a = Article::from_text("long", text, Split::Train);
        let input = enc.prepare(&a).unwrap();
        assert_eq!(a.sentences.len(), 500);
        let total: usize = a
            .sentences
            .iter()
            .map(|s| 1 + s.tokens.iter().map(|t| t.char_span.len().div_ceil(4)).sum::<usize>())
            .sum();
        assert_eq!(total, 5000);
        assert!(input.truncated);
        assert_eq!(input.len(), 4096);
        // 10 positions per sentence: 409 whole sentences fill 4090, the 410th is cut.
        assert_eq!(input.sentences.len(), 410);
        assert_eq!(input.sentences[409].positions.len(), 5);
        let out = enc.encode(&a, &params).unwrap();
        assert!(out.truncation_flag);
        assert_eq!(out.num_sentences(), 410);
    }

    #[test]
    fn pair_embedding_rules() {
        let enc = DocumentEncoding {
            sentence_embeddings: Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j + 1) as f64),
            token_embeddings: vec![],
            alignments: vec![],
            truncation_flag: false,
        };
        let p = pair_embedding(&enc, 2).unwrap();
        assert_eq!(p.to_vec(), vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let first = pair_embedding(&enc, 0).unwrap();
        assert!(first.slice(ndarray::s![..4]).iter().all(|&v| v == 0.0));
        assert!(pair_embedding(&enc, 3).is_err());

        let mut tape = Tape::new();
        let s = tape.leaf(enc.sentence_embeddings.clone());
        let pairs = pair_inputs(&mut tape, s);
        assert_eq!(tape.value(pairs).row(2).to_vec(), p.to_vec());
        let single = tape.leaf(Array2::ones((1, 4)));
        let pairs = pair_inputs(&mut tape, single);
        assert_eq!(tape.value(pairs).row(0).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn toy_limits_are_enforced() {
        assert!(Encoder::new(EncoderConfig::toy(64)).is_err());
        let cfg = EncoderConfig {
            backbone: Backbone::PretrainedLongdoc,
            hidden_dim: 768,
            ..EncoderConfig::default()
        };
        assert!(matches!(Encoder::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_reaches_encoder_parameters() {
        let (enc, params) = toy(8);
        let a = Article::from_text("g", "Gradients flow here. And there too.", Split::Train);
        let input = enc.prepare(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let weights = crate::params::normal(&mut rng, 2, 8, 1.0);

        let loss = |p: &ParamStore| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let out = enc.forward(&mut tape, Scope::new(&bound, ""), &input);
            (tape.value(out.sentences.unwrap()) * &weights).sum()
        };

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = enc.forward(&mut tape, Scope::new(&bound, ""), &input);
        let mut grads = tape.backward(&[(out.sentences.unwrap(), weights.clone())]);
        let grads = bound.collect(&tape, &mut grads);

        let h = 1e-5;
        let mut checked = 0;
        for name in ["layer0.attn.query.weight", "layer1.ffn.inner.weight", "embed_norm.gamma"] {
            let g = &grads[name];
            assert!(g.iter().any(|v| *v != 0.0), "{name} received no gradient");
            for idx in [0usize, 5, 9] {
                let (r, c) = (idx / g.ncols() % g.nrows(), idx % g.ncols());
                let mut plus = params.clone();
                plus.get_mut(name).unwrap()[[r, c]] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap()[[r, c]] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = g[[r, c]];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{r},{c}]: {analytic} vs {numeric}");
                checked += 1;
            }
        }
        // the embedding rows of used pieces move too
        assert!(grads["embed.weight"].row(MARKER_ID).iter().any(|v| *v != 0.0));
        assert_eq!(checked, 9);
    }
}
