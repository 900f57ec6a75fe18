//! Word decoder: GRU language model with additive attention over the
//! character states.

use super::encoder::{dropout, encode, gru_step, EncoderOutput};
use super::{Attention, Ccead, Decoder, Model, Result, Training};
use crate::codec::WordVocab;
#[cfg(test)]
use crate::tensor::Tensor;
use crate::tensor::{dim_err, Graph, Var};

/// Greedy decoding trace for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Emitted word ids, `<EOS>` excluded.
    pub tokens: Vec<usize>,
    /// Probability of each emitted token at its step.
    pub token_probs: Vec<f64>,
    /// Attention weights over the character window at each step.
    pub attention: Vec<Vec<f64>>,
    /// Whether decoding stopped at `<EOS>` rather than the length cap.
    pub ended: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `[B × V]` pre-softmax scores.
    pub logits: Var,
    /// `[B × H]` new decoder state.
    pub state: Var,
    /// `[B × L]` attention weights.
    pub attention: Var,
}

/// `h_seq · W_h`, shared by every decoding step. `[B × L × H]`.
pub fn attention_keys(g: &mut Graph, p: &Attention<Var>, h_seq: Var) -> Result<Var> {
    let s = g.shape(h_seq).to_vec();
    let flat = g.reshape(h_seq, &[s[0] * s[1], s[2]])?;
    let k = g.matmul(flat, p.w_h)?;
    let a = g.shape(p.w_h)[1];
    Ok(g.reshape(k, &[s[0], s[1], a])?)
}

/// `d_j = v · tanh(s_prev W_s + b + h_j W_h)`, `α = softmax(d)`,
/// `c = Σ α_j h_j`. Returns `(c, α)`.
pub fn attend(
    g: &mut Graph,
    p: &Attention<Var>,
    s_prev: Var,
    h_seq: Var,
    keys: Var,
) -> Result<(Var, Var)> {
    let ks = g.shape(keys).to_vec();
    if ks.len() != 3 || ks[1] == 0 {
        return Err(dim_err(
            "attend",
            "encoder states must be a nonempty [B × L × A] sequence",
        )
        .into());
    }
    let q = g.matmul(s_prev, p.w_s)?;
    let q = g.add_row_bias(q, p.b)?;
    let pre = g.add_step_bias(keys, q)?;
    let e = g.tanh(pre)?;
    let flat = g.reshape(e, &[ks[0] * ks[1], ks[2]])?;
    let scores = g.matmul(flat, p.v)?;
    let scores = g.reshape(scores, &[ks[0], ks[1]])?;
    let alpha = g.softmax(scores)?;
    let c = g.weighted_sum(alpha, h_seq)?;
    Ok((c, alpha))
}

/// One decoder step: the GRU consumes `[E_w[w_prev] ; c]`, the output layer
/// maps the new state to vocabulary scores.
pub fn decode_step(
    g: &mut Graph,
    p: &Decoder<Var>,
    w_prev: &[usize],
    s_prev: Var,
    h_seq: Var,
    keys: Var,
    training: Option<&mut Training<'_>>,
) -> Result<StepOutput> {
    let emb = g.gather_rows(p.word_embedding, w_prev)?;
    let emb = dropout(g, emb, training)?;
    let (c, attention) = attend(g, &p.attention, s_prev, h_seq, keys)?;
    let x = g.concat_cols(&[emb, c])?;
    let state = gru_step(g, &p.gru, x, s_prev)?;
    let logits = g.matmul(state, p.output)?;
    let logits = g.add_row_bias(logits, p.b_output)?;
    Ok(StepOutput {
        logits,
        state,
        attention,
    })
}

/// Encodes `chars` and feeds `decoder_inputs` (teacher forcing). Returns the
/// logits of every step.
pub fn teacher_forced_logits(
    g: &mut Graph,
    p: &Ccead<Var>,
    chars: &[Vec<usize>],
    decoder_inputs: &[Vec<usize>],
    mut training: Option<&mut Training<'_>>,
) -> Result<Vec<Var>> {
    if chars.len() != decoder_inputs.len() {
        return Err(dim_err(
            "teacher_forced_logits",
            "encoder and decoder batch sizes differ",
        )
        .into());
    }
    let steps = decoder_inputs.first().map_or(0, Vec::len);
    if decoder_inputs.iter().any(|d| d.len() != steps) {
        return Err(dim_err("teacher_forced_logits", "decoder inputs differ in length").into());
    }
    let enc = encode(g, &p.encoder, chars, training.as_deref_mut())?;
    let keys = attention_keys(g, &p.decoder.attention, enc.h_seq)?;
    let mut state = enc.s0;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let w: Vec<usize> = decoder_inputs.iter().map(|d| d[t]).collect();
        let step = decode_step(
            g,
            &p.decoder,
            &w,
            state,
            enc.h_seq,
            keys,
            training.as_deref_mut(),
        )?;
        state = step.state;
        out.push(step.logits);
    }
    Ok(out)
}

/// Best emittable token: `<PAD>`, `<GO>` and `<UNK>` are never chosen, ties
/// go to the lowest index.
fn pick(probs: &[f64]) -> usize {
    let mut best = WordVocab::EOS;
    for (i, &p) in probs.iter().enumerate() {
        if matches!(i, WordVocab::PAD | WordVocab::GO | WordVocab::UNK) {
            continue;
        }
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding with an optional forced prefix per window. Rows stop at
/// `<EOS>` or after `max_len` tokens.
fn decode_batch(
    model: &Model,
    chars: &[Vec<usize>],
    prefixes: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<DecodeResult>> {
    let mut g = Graph::new();
    let p = model.params.map(&mut |_, t| g.constant(t.clone()));
    let enc: EncoderOutput = encode(&mut g, &p.encoder, chars, None)?;
    let keys = attention_keys(&mut g, &p.decoder.attention, enc.h_seq)?;
    let mut results = vec![
        DecodeResult {
            tokens: Vec::new(),
            token_probs: Vec::new(),
            attention: Vec::new(),
            ended: false,
        };
        chars.len()
    ];
    let mut prev = vec![WordVocab::GO; chars.len()];
    let mut state = enc.s0;
    for t in 0..max_len {
        if results.iter().all(|r| r.ended) {
            break;
        }
        let step = decode_step(&mut g, &p.decoder, &prev, state, enc.h_seq, keys, None)?;
        state = step.state;
        let logits = g.value(step.logits).clone();
        let alpha = g.value(step.attention).clone();
        for (b, r) in results.iter_mut().enumerate() {
            if r.ended {
                continue;
            }
            let probs = crate::tensor::softmax_slice(logits.row(b))?;
            let token = prefixes[b].get(t).copied().unwrap_or_else(|| pick(&probs));
            prev[b] = token;
            if token == WordVocab::EOS {
                r.ended = true;
                continue;
            }
            r.tokens.push(token);
            r.token_probs.push(probs[token]);
            r.attention.push(alpha.row(b).to_vec());
        }
    }
    Ok(results)
}

/// Greedy decoding from `<GO>` and the fused encoder state.
pub fn greedy_decode(
    model: &Model,
    chars: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<DecodeResult>> {
    if max_len == 0 {
        return Err(dim_err("greedy_decode", "max_len must be at least 1").into());
    }
    decode_batch(model, chars, &vec![Vec::new(); chars.len()], max_len)
}

/// Teacher-forces `prefix`, then continues greedily until `<EOS>` or
/// `max_len` tokens in total. Returns only the continuation.
pub fn complete(
    model: &Model,
    chars: &[usize],
    prefix: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    if prefix.contains(&WordVocab::EOS) || prefix.len() >= max_len {
        return Ok(Vec::new());
    }
    let r = decode_batch(model, &[chars.to_vec()], &[prefix.to_vec()], max_len)?;
    Ok(r[0].tokens[prefix.len()..].to_vec())
}

#[cfg(test)]
fn probabilities(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let v = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(v)
        .map(crate::tensor::softmax_slice)
        .collect::<std::result::Result<_, _>>()?)
}
