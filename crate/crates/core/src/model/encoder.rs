//! Character encoder: embedding, GRU, multi-width CNN and state fusion.

use super::{Encoder, Gru, Model, ModelError, Result, Training};
use crate::codec::CharVocab;
use crate::tensor::{dim_err, Graph, Tensor, Var};

/// Encoder activations for a batch of character windows.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[B × L × H]`, every GRU state.
    pub h_seq: Var,
    /// `[B × H]`, final GRU state.
    pub h_last: Var,
    /// `[B × H]`, CNN head output.
    pub cnn: Var,
    /// `[B × H]`, initial decoder state.
    pub s0: Var,
}

/// `u = σ(xW_ux + hU_uu + b_u)`, `r = σ(xW_rx + hU_rr + b_r)`,
/// `h' = u⊙h + (1−u)⊙tanh(xW_hx + (r⊙h)U_hh + b_h)`.
pub fn gru_step(g: &mut Graph, p: &Gru<Var>, x: Var, h: Var) -> Result<Var> {
    let gate = |g: &mut Graph, w: Var, u: Var, b: Var, hh: Var| -> Result<Var> {
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(hh, u)?;
        let s = g.add(xw, hu)?;
        Ok(g.add_row_bias(s, b)?)
    };
    let u_pre = gate(g, p.w_ux, p.u_uu, p.b_u, h)?;
    let u = g.sigmoid(u_pre)?;
    let r_pre = gate(g, p.w_rx, p.u_rr, p.b_r, h)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h)?;
    let c_pre = gate(g, p.w_hx, p.u_hh, p.b_h, rh)?;
    let cand = g.tanh(c_pre)?;
    let keep = g.mul(u, h)?;
    let one_minus_u = g.one_minus(u)?;
    let fresh = g.mul(one_minus_u, cand)?;
    Ok(g.add(keep, fresh)?)
}

fn check_batch(seqs: &[Vec<usize>]) -> Result<(usize, usize)> {
    let len = seqs.first().map(Vec::len).unwrap_or(0);
    if len == 0 {
        return Err(dim_err("encode", "empty batch or empty window").into());
    }
    if seqs.iter().any(|s| s.len() != len) {
        return Err(dim_err("encode", "windows in a batch differ in length").into());
    }
    if let Some(bad) = seqs.iter().flatten().find(|&&c| c >= CharVocab::SIZE) {
        return Err(dim_err("encode", format!("character index {bad} out of range")).into());
    }
    Ok((seqs.len(), len))
}

/// Runs the GRU over each window from `h_0 = 0`. Returns `(h_seq, h_T)`.
pub fn run_char_gru(g: &mut Graph, p: &Encoder<Var>, seqs: &[Vec<usize>]) -> Result<(Var, Var)> {
    let (batch, len) = check_batch(seqs)?;
    let hidden = g.shape(p.gru.u_uu)[0];
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut states = Vec::with_capacity(len);
    for t in 0..len {
        let idx: Vec<usize> = seqs.iter().map(|s| s[t]).collect();
        let x = g.gather_rows(p.char_embedding, &idx)?;
        h = gru_step(g, &p.gru, x, h)?;
        states.push(h);
    }
    Ok((g.stack_steps(&states)?, h))
}

/// Feature maps of every filter width after `tanh`, each `[B × (L−k+1) × F]`.
fn conv_maps(g: &mut Graph, p: &Encoder<Var>, seqs: &[Vec<usize>]) -> Result<Vec<Var>> {
    let (batch, len) = check_batch(seqs)?;
    let embed = g.shape(p.char_embedding)[1];
    let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
    let rows = g.gather_rows(p.char_embedding, &flat)?;
    let x = g.reshape(rows, &[batch, len, embed])?;
    let mut maps = Vec::with_capacity(p.filters.len());
    for &bank in &p.filters {
        let width = g.shape(bank)[0];
        if width > len {
            return Err(ModelError::Tensor(dim_err(
                "run_cnn",
                format!("window {len} shorter than filter width {width}"),
            )));
        }
        let conv = g.conv1d(x, bank, 1)?;
        maps.push(g.tanh(conv)?);
    }
    Ok(maps)
}

/// Flattens and concatenates all feature maps, then applies the
/// fully-connected head. Output `[B × H]`.
pub fn run_cnn(g: &mut Graph, p: &Encoder<Var>, seqs: &[Vec<usize>]) -> Result<Var> {
    let maps = conv_maps(g, p, seqs)?;
    let mut flat = Vec::with_capacity(maps.len());
    for m in maps {
        let s = g.shape(m).to_vec();
        flat.push(g.reshape(m, &[s[0], s[1] * s[2]])?);
    }
    let features = g.concat_cols(&flat)?;
    let fc = g.matmul(features, p.w_fc)?;
    Ok(g.add_row_bias(fc, p.b_fc)?)
}

/// Inverted dropout; identity outside training.
pub(crate) fn dropout(g: &mut Graph, x: Var, training: Option<&mut Training<'_>>) -> Result<Var> {
    let Some(t) = training else { return Ok(x) };
    if t.dropout == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - t.dropout;
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rand::Rng::random::<f64>(t.rng) < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    Ok(g.mul(x, m)?)
}

/// `s0 = [h_T ; cnn] · W_f + b_f`, with dropout on `s0` while training.
pub fn encode(
    g: &mut Graph,
    p: &Encoder<Var>,
    seqs: &[Vec<usize>],
    training: Option<&mut Training<'_>>,
) -> Result<EncoderOutput> {
    let (h_seq, h_last) = run_char_gru(g, p, seqs)?;
    let cnn = run_cnn(g, p, seqs)?;
    let joined = g.concat_cols(&[h_last, cnn])?;
    let fused = g.matmul(joined, p.w_fusion)?;
    let s0 = g.add_row_bias(fused, p.b_fusion)?;
    let s0 = dropout(g, s0, training)?;
    Ok(EncoderOutput {
        h_seq,
        h_last,
        cnn,
        s0,
    })
}

/// Per filter width, the largest absolute activation over feature maps at
/// each output position, for one input text.
pub fn conv_activation_map(model: &Model, text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let seq = CharVocab::default().encode(text, model.config.char_window)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let maps = conv_maps(&mut g, &p.encoder, &[seq])?;
    Ok(model
        .config
        .filter_widths
        .iter()
        .zip(maps)
        .map(|(&w, m)| {
            let t = g.value(m);
            let f = t.shape()[2];
            (
                w,
                t.data()
                    .chunks(f)
                    .map(|c| c.iter().fold(0.0, |a: f64, v| a.max(v.abs())))
                    .collect(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::{Ccead, ModelConfig};
    use super::*;
    use crate::codec::WordVocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar-loop GRU step with `[in × out]` weights.
    fn gru_ref(p: &Gru<Tensor>, x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = h.len();
        let lin = |w: &Tensor, u: &Tensor, b: &Tensor, hh: &[f64], j: usize| {
            let mut s = b.data()[j];
            for (i, xi) in x.iter().enumerate() {
                s += xi * w.data()[i * n + j];
            }
            for (i, hi) in hh.iter().enumerate() {
                s += hi * u.data()[i * n + j];
            }
            s
        };
        let u: Vec<f64> = (0..n)
            .map(|j| sigmoid(lin(&p.w_ux, &p.u_uu, &p.b_u, h, j)))
            .collect();
        let r: Vec<f64> = (0..n)
            .map(|j| sigmoid(lin(&p.w_rx, &p.u_rr, &p.b_r, h, j)))
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        (0..n)
            .map(|j| u[j] * h[j] + (1.0 - u[j]) * lin(&p.w_hx, &p.u_hh, &p.b_h, &rh, j).tanh())
            .collect()
    }

    fn random_params(seed: u64) -> Ccead<Tensor> {
        let mut p = Ccead::init(&ModelConfig::micro(), seed).unwrap();
        // Nonzero biases so they are exercised too.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        p.visit_mut(&mut |_, t| {
            if t.rank() == 1 {
                *t = Tensor::uniform(t.shape(), 0.5, &mut rng);
            }
        });
        p
    }

    #[test]
    fn gru_step_matches_scalar_reference() {
        let p = random_params(3);
        let gru = &p.encoder.gru;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let h = Tensor::uniform(&[1, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
        let out = gru_step(&mut g, &bound.encoder.gru, xv, hv).unwrap();
        let want = gru_ref(gru, x.data(), h.data());
        for (a, b) in g.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gru_halves_state() {
        let p = Ccead::zeros(&ModelConfig::micro());
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::ones(&[1, 4]));
        let h = g.constant(Tensor::full(&[1, 8], 0.6));
        let out = gru_step(&mut g, &b.encoder.gru, x, h).unwrap();
        assert!(g.value(out).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let z = g.constant(Tensor::zeros(&[1, 8]));
        let out = gru_step(&mut g, &b.encoder.gru, x, z).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn char_gru_matches_unrolled_reference() {
        let p = random_params(5);
        let seq = vec![CharVocab::PAD, CharVocab::EOS, 40, 41, 42];
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let (h_seq, h_last) = run_char_gru(&mut g, &b.encoder, &[seq.clone()]).unwrap();
        assert_eq!(g.shape(h_seq), &[1, 5, 8]);
        let mut h = vec![0.0; 8];
        for (t, &c) in seq.iter().enumerate() {
            h = gru_ref(&p.encoder.gru, p.encoder.char_embedding.row(c), &h);
            let got = &g.value(h_seq).data()[t * 8..(t + 1) * 8];
            for (a, b) in got.iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(g.value(h_last).data(), &g.value(h_seq).data()[32..40]);
    }

    #[test]
    fn padded_window_with_zero_params_stays_at_zero() {
        let p = Ccead::zeros(&ModelConfig::micro());
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let (_, h_last) = run_char_gru(&mut g, &b.encoder, &[vec![CharVocab::PAD; 12]]).unwrap();
        assert!(g.value(h_last).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_with_zero_filters_returns_bias() {
        let mut p = random_params(1);
        for f in &mut p.encoder.filters {
            *f = Tensor::zeros(f.shape());
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let seq = CharVocab::default().encode("how are yu", 12).unwrap();
        let out = run_cnn(&mut g, &b.encoder, &[seq.clone(), seq]).unwrap();
        assert_eq!(g.shape(out), &[2, 8]);
        for row in g.value(out).data().chunks(8) {
            assert_eq!(row, p.encoder.b_fc.data());
        }
    }

    #[test]
    fn cnn_rejects_short_window() {
        let p = random_params(1);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        assert!(run_cnn(&mut g, &b.encoder, &[vec![1, 2, 3]]).is_err());
    }

    #[test]
    fn identity_fusion_passes_final_state() {
        let mut p = random_params(2);
        let mut wf = Tensor::zeros(&[16, 8]);
        for i in 0..8 {
            wf.data_mut()[i * 8 + i] = 1.0;
        }
        p.encoder.w_fusion = wf;
        p.encoder.b_fusion = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let seq = CharVocab::default().encode("hello", 12).unwrap();
        let out = encode(&mut g, &b.encoder, &[seq], None).unwrap();
        assert_eq!(g.value(out.s0), g.value(out.h_last));
    }

    #[test]
    fn inference_encode_is_deterministic_and_order_sensitive() {
        let p = random_params(4);
        let run = |text: &str| {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let seq = CharVocab::default().encode(text, 12).unwrap();
            let out = encode(&mut g, &b.encoder, &[seq], None).unwrap();
            (g.value(out.s0).clone(), g.value(out.h_last).clone())
        };
        assert_eq!(run("abcd"), run("abcd"));
        assert_ne!(run("abcd").1, run("bacd").1);
    }

    #[test]
    fn training_dropout_zeroes_some_units() {
        let p = random_params(4);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let seq = CharVocab::default().encode("abcdefgh", 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Training {
            dropout: 0.5,
            rng: &mut rng,
        };
        let out = encode(&mut g, &b.encoder, &vec![seq; 20], Some(&mut t)).unwrap();
        let zeros = g.value(out.s0).data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 30 && zeros < 130, "{zeros}");
    }

    #[test]
    fn activation_map_covers_every_width() {
        let vocab = WordVocab::from_words((0..16).map(|i| i.to_string()));
        let model = Model::new(ModelConfig::micro(), vocab, 1).unwrap();
        let maps = conv_activation_map(&model, "how are yu").unwrap();
        let lens: Vec<(usize, usize)> = maps.iter().map(|(w, v)| (*w, v.len())).collect();
        assert_eq!(lens, vec![(2, 11), (3, 10), (4, 9), (5, 8)]);
    }
}
