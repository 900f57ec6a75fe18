//! Network definition: configuration, parameter trees and initialization.

mod decoder;
mod encoder;
mod params;

pub use decoder::{
    attend, attention_keys, complete, decode_step, greedy_decode, teacher_forced_logits,
    DecodeResult, StepOutput,
};
pub use encoder::{conv_activation_map, encode, gru_step, run_char_gru, run_cnn, EncoderOutput};
pub use params::{Attention, Ccead, Decoder, Encoder, Gru};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{CharVocab, CodecError, WordVocab};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Training-time state threaded through the forward pass.
pub struct Training<'a> {
    pub dropout: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Width of both the character and the word embeddings.
    pub embed_dim: usize,
    pub filter_widths: Vec<usize>,
    /// Feature maps per filter width.
    pub filters: usize,
    pub char_window: usize,
    pub word_window: usize,
    pub word_vocab: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size network.
    pub fn full() -> Self {
        Self {
            hidden: 256,
            embed_dim: 200,
            filter_widths: vec![2, 3, 4, 5],
            filters: 5,
            char_window: 40,
            word_window: 5,
            word_vocab: WordVocab::DEFAULT_CAPACITY,
            dropout: 0.3,
        }
    }

    /// The 128-unit variant.
    pub fn compact() -> Self {
        Self {
            hidden: 128,
            ..Self::full()
        }
    }

    /// Smallest configuration, used for gradient checking.
    pub fn micro() -> Self {
        Self {
            hidden: 8,
            embed_dim: 4,
            filter_widths: vec![2, 3, 4, 5],
            filters: 5,
            char_window: 12,
            word_window: 3,
            word_vocab: 20,
            dropout: 0.3,
        }
    }

    /// Single-word correction on the synthetic keyboard corpus.
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            embed_dim: 32,
            filter_widths: vec![2, 3, 4, 5],
            filters: 5,
            char_window: 14,
            word_window: 1,
            word_vocab: 304,
            dropout: 0.1,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "compact" => Some(Self::compact()),
            "micro" => Some(Self::micro()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden == 0 || self.embed_dim == 0 || self.filters == 0 {
            return bad("hidden, embed_dim and filters must be positive".into());
        }
        if self.word_window == 0 || self.char_window == 0 {
            return bad("windows must be positive".into());
        }
        if self.filter_widths.is_empty() {
            return bad("at least one filter width is required".into());
        }
        if let Some(w) = self
            .filter_widths
            .iter()
            .find(|&&w| w == 0 || w > self.char_window)
        {
            return bad(format!(
                "filter width {w} must lie in 1..={}",
                self.char_window
            ));
        }
        if self.word_vocab <= WordVocab::RESERVED.len() {
            return bad(format!(
                "word vocabulary of {} leaves no real words",
                self.word_vocab
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Length of the flattened CNN feature vector.
    pub fn conv_features(&self) -> usize {
        self.filter_widths
            .iter()
            .map(|w| (self.char_window + 1 - w) * self.filters)
            .sum()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

fn init_tensor<R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf.starts_with("b") {
        return Tensor::zeros(shape);
    }
    let fan_in = match shape {
        [_, d] if leaf.ends_with("embedding") => *d,
        [k, e, _] => k * e,
        [i, _] => *i,
        s => s.iter().product(),
    };
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Ccead<Tensor> {
    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Ccead::<Vec<usize>>::shapes(cfg);
        Ok(shapes.map(&mut |name, shape| init_tensor(name, shape, &mut rng)))
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Ccead::<Vec<usize>>::shapes(cfg).map(&mut |_, shape| Tensor::zeros(shape))
    }

    /// Registers every tensor as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Ccead<crate::tensor::Var> {
        self.map(&mut |_, t| g.param(t.clone()))
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

impl Ccead<Vec<usize>> {
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let (h, e, f) = (cfg.hidden, cfg.embed_dim, cfg.filters);
        let gru = |input: usize| Gru {
            w_ux: vec![input, h],
            u_uu: vec![h, h],
            b_u: vec![h],
            w_rx: vec![input, h],
            u_rr: vec![h, h],
            b_r: vec![h],
            w_hx: vec![input, h],
            u_hh: vec![h, h],
            b_h: vec![h],
        };
        Ccead {
            encoder: Encoder {
                char_embedding: vec![CharVocab::SIZE, e],
                gru: gru(e),
                filters: cfg.filter_widths.iter().map(|&w| vec![w, e, f]).collect(),
                w_fc: vec![cfg.conv_features(), h],
                b_fc: vec![h],
                w_fusion: vec![2 * h, h],
                b_fusion: vec![h],
            },
            decoder: Decoder {
                word_embedding: vec![cfg.word_vocab, e],
                gru: gru(e + h),
                attention: Attention {
                    w_s: vec![h, h],
                    w_h: vec![h, h],
                    b: vec![h],
                    v: vec![h, 1],
                },
                output: vec![h, cfg.word_vocab],
                b_output: vec![cfg.word_vocab],
            },
        }
    }
}

/// A trained network with the vocabulary it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Ccead<Tensor>,
    pub vocab: WordVocab,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: WordVocab, seed: u64) -> Result<Self> {
        if vocab.len() != config.word_vocab {
            return Err(ModelError::Config(format!(
                "vocabulary has {} entries but the configuration expects {}",
                vocab.len(),
                config.word_vocab
            )));
        }
        let params = Ccead::init(&config, seed)?;
        Ok(Self {
            config,
            params,
            vocab,
        })
    }

    /// Checks every tensor against the shapes implied by the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = Ccead::<Vec<usize>>::shapes(&self.config);
        let mut want = Vec::new();
        expected.visit(&mut |name, s| want.push((name.to_string(), s.clone())));
        let mut got = Vec::new();
        self.params
            .visit(&mut |name, t| got.push((name.to_string(), t.shape().to_vec())));
        if want != got {
            let diff = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{}: expected {:?}, found {:?} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| "parameter count differs".into());
            return Err(ModelError::Config(diff));
        }
        Ok(())
    }

    /// `token<TAB>v1<TAB>v2…` per row of the character or word embedding.
    pub fn export_embeddings(&self, words: bool) -> String {
        let mut out = String::new();
        let (table, label): (&Tensor, Box<dyn Fn(usize) -> String>) = if words {
            (
                &self.params.decoder.word_embedding,
                Box::new(|i| self.vocab.word(i).to_string()),
            )
        } else {
            let chars = CharVocab::default();
            (
                &self.params.encoder.char_embedding,
                Box::new(move |i| match chars.symbol(i).unwrap_or("?") {
                    "\n" => "\\n".to_string(),
                    "\t" => "\\t".to_string(),
                    s => s.to_string(),
                }),
            )
        };
        for i in 0..table.shape()[0] {
            out.push_str(&label(i));
            for v in table.row(i) {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}
