//! End-to-end correction of raw text with a trained model.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CharVocab, UnknownChars};
use crate::model::{complete, greedy_decode, Model, ModelError};

/// Longest accepted input, in characters.
pub const MAX_TEXT_CHARS: usize = 1024;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("text has {len} characters; the limit is {MAX_TEXT_CHARS}")]
    TooLong { len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionRequest {
    pub text: String,
    #[serde(default = "one")]
    pub max_completions: usize,
}

impl CorrectionRequest {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            max_completions: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProbability {
    pub word: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResponse {
    pub corrected: String,
    pub completions: Vec<String>,
    /// One entry per corrected word.
    pub tokens: Vec<TokenProbability>,
    pub latency_ms: f64,
}

/// Owns a model and answers correction requests. Holds no mutable state.
#[derive(Debug, Clone)]
pub struct Corrector {
    model: Model,
    chars: CharVocab,
}

impl Corrector {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            chars: CharVocab::new(UnknownChars::Skip),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn correct(&self, req: &CorrectionRequest) -> Result<CorrectionResponse, InferError> {
        correct_once(&self.model, &self.chars, req)
    }
}

/// Splits `text` into windows of the model's word window, decodes each window
/// for as many words as it holds, then continues the last window for up to
/// `max_completions` further words.
pub fn correct_once(
    model: &Model,
    chars: &CharVocab,
    req: &CorrectionRequest,
) -> Result<CorrectionResponse, InferError> {
    let start = Instant::now();
    let len = req.text.chars().count();
    if len > MAX_TEXT_CHARS {
        return Err(InferError::TooLong { len });
    }
    let cfg = &model.config;
    let words: Vec<&str> = req.text.split_whitespace().collect();
    let windows: Vec<String> = words.chunks(cfg.word_window).map(|w| w.join(" ")).collect();
    let encoded = windows
        .iter()
        .map(|w| chars.encode(w, cfg.char_window))
        .collect::<Result<Vec<_>, _>>()
        .map_err(ModelError::from)?;

    let mut tokens = Vec::new();
    let mut completions = Vec::new();
    for (i, window) in words.chunks(cfg.word_window).enumerate() {
        let decoded = greedy_decode(model, &encoded[i..=i], window.len())?.remove(0);
        for (&id, &p) in decoded.tokens.iter().zip(&decoded.token_probs) {
            tokens.push(TokenProbability {
                word: model.vocab.word(id).to_string(),
                probability: p,
            });
        }
        if i + 1 == windows.len() && req.max_completions > 0 && !decoded.ended {
            let cont = complete(
                model,
                &encoded[i],
                &decoded.tokens,
                decoded.tokens.len() + req.max_completions,
            )?;
            completions = cont
                .iter()
                .map(|&id| model.vocab.word(id).to_string())
                .collect();
        }
    }
    let corrected = tokens
        .iter()
        .map(|t| t.word.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(CorrectionResponse {
        corrected,
        completions,
        tokens,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::WordVocab;
    use crate::model::ModelConfig;

    fn corrector() -> Corrector {
        let vocab = WordVocab::from_words((0..16).map(|i| format!("w{i}")));
        Corrector::new(Model::new(ModelConfig::micro(), vocab, 3).unwrap())
    }

    #[test]
    fn empty_text_gives_empty_response() {
        let r = corrector().correct(&CorrectionRequest::new("  ")).unwrap();
        assert_eq!(r.corrected, "");
        assert!(r.completions.is_empty() && r.tokens.is_empty());
    }

    #[test]
    fn deterministic_and_bounded() {
        let c = corrector();
        let req = CorrectionRequest {
            text: "thanka i will see you tomorow".into(),
            max_completions: 2,
        };
        let a = c.correct(&req).unwrap();
        let b = c.correct(&req).unwrap();
        assert_eq!(
            (&a.corrected, &a.completions, &a.tokens),
            (&b.corrected, &b.completions, &b.tokens)
        );
        assert!(a.tokens.len() <= 6);
        assert!(a.completions.len() <= 2);
        assert!(a
            .tokens
            .iter()
            .all(|t| t.probability > 0.0 && t.probability <= 1.0));
        assert!(a.latency_ms > 0.0);
        assert_eq!(
            a.corrected.split(' ').filter(|w| !w.is_empty()).count(),
            a.tokens.len()
        );
    }

    #[test]
    fn length_cap() {
        let c = corrector();
        assert!(c
            .correct(&CorrectionRequest::new("a".repeat(MAX_TEXT_CHARS)))
            .is_ok());
        assert!(matches!(
            c.correct(&CorrectionRequest::new("a".repeat(MAX_TEXT_CHARS + 1))),
            Err(InferError::TooLong { len: 1025 })
        ));
    }

    #[test]
    fn request_defaults() {
        let r: CorrectionRequest = serde_json::from_str(r#"{"text":"hi"}"#).unwrap();
        assert_eq!(r, CorrectionRequest::new("hi"));
    }
}
