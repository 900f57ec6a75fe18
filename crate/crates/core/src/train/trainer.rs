//! Epoch loop, evaluation and best-model selection.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    adam_step, clip_gradients, sequence_loss, AdamState, Checkpoint, Result, RunConfig,
    TrainConfig, TrainError,
};
use crate::codec::{CharVocab, CorpusPair, TextPair, UnknownChars, WordVocab};
use crate::metrics::accuracy;
use crate::model::{
    greedy_decode, teacher_forced_logits, Ccead, Model, ModelConfig, ModelError, Training,
};
use crate::tensor::{Graph, TensorError, Var};

pub const METRIC_LOG_HEADER: &str = "epoch\ttrain_loss\tdev_word_acc\tdev_seq_acc";

/// One line of the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-window loss over the epoch, measured with dropout active.
    pub train_loss: f64,
    pub dev_word_acc: f64,
    pub dev_seq_acc: f64,
}

impl EpochMetrics {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.dev_word_acc, self.dev_seq_acc
        )
    }

    pub fn log_text(history: &[EpochMetrics]) -> String {
        let mut s = format!("{METRIC_LOG_HEADER}\n");
        for m in history {
            s.push_str(&m.to_tsv());
            s.push('\n');
        }
        s
    }

    pub fn parse_log(text: &str) -> Option<Vec<EpochMetrics>> {
        let mut lines = text.lines();
        if lines.next()? != METRIC_LOG_HEADER {
            return None;
        }
        lines
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                let [e, l, w, s] = f.as_slice() else {
                    return None;
                };
                Some(EpochMetrics {
                    epoch: e.parse().ok()?,
                    train_loss: l.parse().ok()?,
                    dev_word_acc: w.parse().ok()?,
                    dev_seq_acc: s.parse().ok()?,
                })
            })
            .collect()
    }
}

/// Encodes aligned windows for a model configuration. Characters outside the
/// table are dropped.
pub fn encode_pairs(
    pairs: &[TextPair],
    vocab: &WordVocab,
    cfg: &ModelConfig,
) -> Result<Vec<CorpusPair>> {
    let chars = CharVocab::new(UnknownChars::Skip);
    Ok(pairs
        .iter()
        .map(|p| CorpusPair::encode(p, &chars, vocab, cfg.char_window, cfg.word_window))
        .collect::<Result<_, _>>()?)
}

/// Teacher-forced loss of a batch.
pub fn batch_loss(
    g: &mut Graph,
    params: &Ccead<Var>,
    batch: &[&CorpusPair],
    training: Option<&mut Training<'_>>,
) -> Result<Var> {
    let chars: Vec<Vec<usize>> = batch.iter().map(|p| p.noisy_chars.clone()).collect();
    let inputs: Vec<Vec<usize>> = batch.iter().map(|p| p.decoder_input.clone()).collect();
    let targets: Vec<Vec<usize>> = batch.iter().map(|p| p.target.clone()).collect();
    let logits = teacher_forced_logits(g, params, &chars, &inputs, training)?;
    sequence_loss(g, &logits, &targets)
}

/// Loss and greedy accuracy of a model on encoded pairs, dropout off.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean summed cross entropy per window.
    pub loss: f64,
    /// Cross entropy per non-pad target token.
    pub token_ce: f64,
    pub word_acc: f64,
    pub seq_acc: f64,
    pub predictions: Vec<Vec<String>>,
}

fn target_words(vocab: &WordVocab, pair: &CorpusPair) -> Vec<String> {
    pair.target
        .iter()
        .filter(|&&t| t != WordVocab::PAD && t != WordVocab::EOS)
        .map(|&t| vocab.word(t).to_string())
        .collect()
}

fn decode_accuracy(
    model: &Model,
    pairs: &[CorpusPair],
    batch_size: usize,
) -> Result<(f64, f64, Vec<Vec<String>>)> {
    let mut predictions = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let chars: Vec<Vec<usize>> = chunk.iter().map(|p| p.noisy_chars.clone()).collect();
        for r in greedy_decode(model, &chars, model.config.word_window)? {
            predictions.push(
                r.tokens
                    .iter()
                    .map(|&t| model.vocab.word(t).to_string())
                    .collect(),
            );
        }
    }
    let targets: Vec<Vec<String>> = pairs
        .iter()
        .map(|p| target_words(&model.vocab, p))
        .collect();
    let (w, s) = accuracy(&predictions, &targets).map_err(|e| TrainError::Shape(e.to_string()))?;
    Ok((w, s, predictions))
}

pub fn evaluate(model: &Model, pairs: &[CorpusPair], batch_size: usize) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let p = model.params.map(&mut |_, t| g.constant(t.clone()));
        let refs: Vec<&CorpusPair> = chunk.iter().collect();
        let l = batch_loss(&mut g, &p, &refs, None)?;
        total += g.value(l).item() * chunk.len() as f64;
        tokens += chunk
            .iter()
            .flat_map(|p| &p.target)
            .filter(|&&t| t != WordVocab::PAD)
            .count();
    }
    let (word_acc, seq_acc, predictions) = decode_accuracy(model, pairs, batch_size)?;
    Ok(Evaluation {
        loss: total / pairs.len() as f64,
        token_ce: total / tokens.max(1) as f64,
        word_acc,
        seq_acc,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Highest dev word accuracy (the final model when there is no dev set).
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub adam: AdamState,
    pub history: Vec<EpochMetrics>,
}

fn diverged(
    model: &Model,
    cfg: &TrainConfig,
    epoch: usize,
    history: &[EpochMetrics],
    reason: String,
) -> TrainError {
    let run = RunConfig {
        preset: None,
        model: model.config.clone(),
        train: cfg.clone(),
        paths: Default::default(),
    };
    TrainError::Diverged {
        epoch,
        reason,
        last_good: Box::new(Checkpoint::new(
            run,
            model.clone(),
            None,
            epoch.saturating_sub(1),
            history.to_vec(),
        )),
    }
}

/// Salt separating the dropout stream from the shuffle stream.
const DROPOUT_SALT: u64 = 0x6a09_e667_f3bc_c908;

/// Trains end to end. `on_epoch` sees each epoch's metrics and the current
/// model (after the epoch's updates); returning `Break` ends training early.
pub fn train(
    mut model: Model,
    train_set: &[CorpusPair],
    dev_set: &[CorpusPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model, &AdamState) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut adam = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
        drop_rng.set_stream(epoch as u64);

        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&CorpusPair> = idx.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g);
            let mut training = Training {
                dropout: model.config.dropout,
                rng: &mut drop_rng,
            };
            let loss = match batch_loss(&mut g, &vars, &batch, Some(&mut training)) {
                Ok(l) => l,
                Err(TrainError::Tensor(TensorError::NonFinite { op }))
                | Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op }))) => {
                    return Err(diverged(
                        &model,
                        cfg,
                        epoch,
                        &history,
                        format!("non-finite value in {op}"),
                    ));
                }
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(
                    &model,
                    cfg,
                    epoch,
                    &history,
                    format!("loss is {value}"),
                ));
            }
            let mut grads_raw = g.backward(loss)?;
            let mut grads = vars.map(&mut |_, v| grads_raw.take(*v));
            clip_gradients(&mut grads, cfg.clip_norm);
            match adam_step(&mut model.params, &grads, &mut adam, cfg.learning_rate) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient { param, step }) => {
                    return Err(diverged(
                        &model,
                        cfg,
                        epoch,
                        &history,
                        format!("non-finite gradient for {param} at step {step}"),
                    ));
                }
                Err(e) => return Err(e),
            }
            epoch_loss += value * batch.len() as f64;
        }

        let (dev_word_acc, dev_seq_acc) = if dev_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (w, s, _) = decode_accuracy(&model, dev_set, cfg.batch_size)?;
            (w, s)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            dev_word_acc,
            dev_seq_acc,
        };
        log::info!("{}", metrics.to_tsv());
        let improved = match &best {
            None => true,
            Some((acc, _, _)) => dev_set.is_empty() || dev_word_acc > *acc,
        };
        if improved {
            best = Some((dev_word_acc, epoch, model.clone()));
        }
        history.push(metrics);
        if on_epoch(&metrics, &model, &adam).is_break() {
            break;
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        adam,
        history,
    })
}
