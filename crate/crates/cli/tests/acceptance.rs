//! Acceptance suite. Every criterion writes one `PASS <name>: …` or
//! `FAIL <name>: …` line to stderr (bypassing output capture, so the lines
//! show up in a plain `cargo test` log) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use ccead_cli::server::{model_digest, router, AppState};
use ccead_core::codec::{window_sentences, CharVocab, CorpusPair, TextPair, WordVocab};
use ccead_core::metrics::{
    cer, corpus_cer, edit_distance, levenshtein, smooth_cer, EditCosts, SmoothCerInputs,
};
use ccead_core::model::{
    attend, attention_keys, gru_step, Attention, Ccead, Gru, Model, ModelConfig,
};
use ccead_core::noise::{
    classify_edit, gen_synthetic, inject_noise, ErrorDistribution, InjectMode, KeyboardLayout,
    NoiseModel, TypoPair,
};
use ccead_core::tensor::{Graph, Tensor, Var};
use ccead_core::train::{
    batch_loss, encode_pairs, evaluate, train, Checkpoint, RunConfig, TrainConfig,
};
use http_body_util::BodyExt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

const TOP_WORDS: &str = include_str!("../../core/data/top_words.txt");

fn verdict(name: &str, pass: bool, detail: String) {
    let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn top_words() -> Vec<String> {
    TOP_WORDS.split_whitespace().map(str::to_string).collect()
}

fn rand_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, scale, rng)
}

// ---------------------------------------------------------------- gradients

fn loss_at(params: &Ccead<Tensor>, batch: &[&CorpusPair]) -> f64 {
    let mut g = Graph::new();
    let pv = params.map(&mut |_, t| g.constant(t.clone()));
    let l = batch_loss(&mut g, &pv, batch, None).unwrap();
    g.value(l).item()
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let clean = ["how are you", "see you soon", "thanks i will"];
    let noisy = ["hw are yoy", "se you son", "thanka i will"];
    let pairs = window_sentences(noisy, clean, 3).unwrap();
    let mut words: Vec<String> = WordVocab::build(clean, 20).unwrap().words().to_vec();
    while words.len() < 20 {
        words.push(format!("pad{}", words.len()));
    }
    let vocab = WordVocab::from_text(&(words.join("\n") + "\n")).unwrap();
    let cfg = ModelConfig::micro();
    assert_eq!(
        (cfg.hidden, cfg.embed_dim, cfg.char_window, cfg.word_window),
        (8, 4, 12, 3)
    );
    assert_eq!((CharVocab::SIZE, vocab.len()), (69, 20));
    let data = encode_pairs(&pairs, &vocab, &cfg).unwrap();
    let batch: Vec<&CorpusPair> = data.iter().collect();
    let model = Model::new(cfg, vocab, 17).unwrap();

    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let l = batch_loss(&mut g, &vars, &batch, None).unwrap();
    let mut grads = g.backward(l).unwrap();
    let analytic = vars.map(&mut |_, v| grads.take(*v));

    let h = 1e-5;
    let (mut worst, mut worst_name, mut coords) = (0.0f64, String::new(), 0usize);
    for (name, grad) in analytic.leaves() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..grad.numel() {
            let nudge = |delta: f64| {
                let mut p = model.params.clone();
                p.visit_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut()[j] += delta;
                    }
                });
                loss_at(&p, &batch)
            };
            let fd = (nudge(h) - nudge(-h)) / (2.0 * h);
            let a = grad.data()[j];
            diff += (a - fd).powi(2);
            na += a * a;
            nn += fd * fd;
        }
        coords += grad.numel();
        let rel = diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-8);
        if rel > worst {
            worst = rel;
            worst_name = name;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "gradient correctness",
        worst < 1e-3 && secs < 120.0,
        format!("{coords} coordinates, worst tensor {worst_name} rel err {worst:.2e} (< 1e-3), {secs:.1}s (< 120s)"),
    );
}

// ------------------------------------------------------------------ oracles

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `Σ_p a[i][p] · b[p][j]` over flat row-major storage.
fn dot_row(a: &[f64], i: usize, b: &[f64], j: usize, k: usize, n: usize) -> f64 {
    (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn matmul_oracle(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = (
        rng.random_range(1..8),
        rng.random_range(1..8),
        rng.random_range(1..8),
    );
    let a = rand_tensor(&[m, k], 2.0, rng);
    let b = rand_tensor(&[k, n], 2.0, rng);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    let want: Vec<f64> = (0..m * n)
        .map(|ij| dot_row(a.data(), ij / n, b.data(), ij % n, k, n))
        .collect();
    max_diff(g.value(c).data(), &want)
}

/// One-based `h(y) = Σ_x f(x) g(y·d − x + c)`, `c = k − d + 1`.
fn conv_oracle(rng: &mut ChaCha8Rng) -> f64 {
    let (k, d) = (rng.random_range(1..6), rng.random_range(1..4));
    let l = k + d - 1 + rng.random_range(0..10);
    let (e, maps, batch) = (
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..3),
    );
    let input = rand_tensor(&[batch, l, e], 2.0, rng);
    let filters = rand_tensor(&[k, e, maps], 2.0, rng);
    let mut g = Graph::new();
    let (iv, fv) = (g.constant(input.clone()), g.constant(filters.clone()));
    let out = g.conv1d(iv, fv, d).unwrap();
    let out_len = (l - k + 1) / d;
    let c = k as i64 - d as i64 + 1;
    let mut want = vec![0.0; batch * out_len * maps];
    for b in 0..batch {
        for y in 1..=out_len as i64 {
            for x in 1..=k as i64 {
                let src = (y * d as i64 - x + c) as usize;
                for ch in 0..e {
                    let gv = input.data()[(b * l + src - 1) * e + ch];
                    for m in 0..maps {
                        let fv = filters.data()[((x as usize - 1) * e + ch) * maps + m];
                        want[(b * out_len + y as usize - 1) * maps + m] += fv * gv;
                    }
                }
            }
        }
    }
    max_diff(g.value(out).data(), &want)
}

fn softmax_oracle(rng: &mut ChaCha8Rng) -> f64 {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(1..12));
    let x = rand_tensor(&[rows, cols], 20.0, rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = g.softmax(xv).unwrap();
    let mut want = Vec::new();
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want.extend(row.iter().map(|v| v.exp() / z));
    }
    max_diff(g.value(s).data(), &want)
}

/// `u = σ(x W_ux + h U_uu + b_u)`, `r = σ(x W_rx + h U_rr + b_r)`,
/// `h' = u ⊙ h + (1 − u) ⊙ tanh(x W_hx + (r ⊙ h) U_hh + b_h)`.
fn gru_oracle(rng: &mut ChaCha8Rng) -> f64 {
    let (b, i, n) = (
        rng.random_range(1..4),
        rng.random_range(1..6),
        rng.random_range(1..7),
    );
    let t = |s: &[usize], rng: &mut ChaCha8Rng| rand_tensor(s, 1.5, rng);
    let ws: Vec<Tensor> = vec![
        t(&[i, n], rng),
        t(&[n, n], rng),
        t(&[n], rng),
        t(&[i, n], rng),
        t(&[n, n], rng),
        t(&[n], rng),
        t(&[i, n], rng),
        t(&[n, n], rng),
        t(&[n], rng),
    ];
    let x = t(&[b, i], rng);
    let h = t(&[b, n], rng);
    let mut g = Graph::new();
    let v: Vec<Var> = ws.iter().map(|w| g.constant(w.clone())).collect();
    let p = Gru {
        w_ux: v[0],
        u_uu: v[1],
        b_u: v[2],
        w_rx: v[3],
        u_rr: v[4],
        b_r: v[5],
        w_hx: v[6],
        u_hh: v[7],
        b_h: v[8],
    };
    let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
    let out = gru_step(&mut g, &p, xv, hv).unwrap();

    let d = |k: usize| ws[k].data();
    let mut want = vec![0.0; b * n];
    for r in 0..b {
        let hr = &h.data()[r * n..(r + 1) * n];
        let u: Vec<f64> = (0..n)
            .map(|j| {
                sigmoid(
                    dot_row(x.data(), r, d(0), j, i, n) + dot_row(hr, 0, d(1), j, n, n) + d(2)[j],
                )
            })
            .collect();
        let rg: Vec<f64> = (0..n)
            .map(|j| {
                sigmoid(
                    dot_row(x.data(), r, d(3), j, i, n) + dot_row(hr, 0, d(4), j, n, n) + d(5)[j],
                )
            })
            .collect();
        let rh: Vec<f64> = (0..n).map(|j| rg[j] * hr[j]).collect();
        for j in 0..n {
            let cand =
                (dot_row(x.data(), r, d(6), j, i, n) + dot_row(&rh, 0, d(7), j, n, n) + d(8)[j])
                    .tanh();
            want[r * n + j] = u[j] * hr[j] + (1.0 - u[j]) * cand;
        }
    }
    max_diff(g.value(out).data(), &want)
}

/// `d_j = v · tanh(W_s s + W_h h_j + b)`, `α = softmax(d)`, `c = Σ α_j h_j`.
fn attend_oracle(rng: &mut ChaCha8Rng) -> f64 {
    let (b, len, n, a) = (
        rng.random_range(1..4),
        rng.random_range(1..8),
        rng.random_range(1..6),
        rng.random_range(1..6),
    );
    let w_s = rand_tensor(&[n, a], 1.5, rng);
    let w_h = rand_tensor(&[n, a], 1.5, rng);
    let bias = rand_tensor(&[a], 1.5, rng);
    let v = rand_tensor(&[a, 1], 1.5, rng);
    let s = rand_tensor(&[b, n], 1.5, rng);
    let hs = rand_tensor(&[b, len, n], 1.5, rng);
    let mut g = Graph::new();
    let p = Attention {
        w_s: g.constant(w_s.clone()),
        w_h: g.constant(w_h.clone()),
        b: g.constant(bias.clone()),
        v: g.constant(v.clone()),
    };
    let (sv, hv) = (g.constant(s.clone()), g.constant(hs.clone()));
    let keys = attention_keys(&mut g, &p, hv).unwrap();
    let (c, alpha) = attend(&mut g, &p, sv, hv, keys).unwrap();

    let mut want_c = vec![0.0; b * n];
    let mut want_alpha = vec![0.0; b * len];
    for r in 0..b {
        let d: Vec<f64> = (0..len)
            .map(|j| {
                let hj = &hs.data()[(r * len + j) * n..(r * len + j + 1) * n];
                (0..a)
                    .map(|q| {
                        let pre = dot_row(s.data(), r, w_s.data(), q, n, a)
                            + dot_row(hj, 0, w_h.data(), q, n, a);
                        v.data()[q] * (pre + bias.data()[q]).tanh()
                    })
                    .sum()
            })
            .collect();
        let z: f64 = d.iter().map(|x| x.exp()).sum();
        for j in 0..len {
            let al = d[j].exp() / z;
            want_alpha[r * len + j] = al;
            for q in 0..n {
                want_c[r * n + q] += al * hs.data()[(r * len + j) * n + q];
            }
        }
    }
    max_diff(g.value(c).data(), &want_c).max(max_diff(g.value(alpha).data(), &want_alpha))
}

/// Edit distance straight from its recursive definition, memoized.
fn recursive_distance(s: &[u8], t: &[u8], memo: &mut [[Option<usize>; 7]; 7]) -> usize {
    if let Some(d) = memo[s.len()][t.len()] {
        return d;
    }
    let d = match (s.split_last(), t.split_last()) {
        (None, _) => t.len(),
        (_, None) => s.len(),
        (Some((a, sr)), Some((b, tr))) => {
            let sub = recursive_distance(sr, tr, memo) + usize::from(a != b);
            let del = recursive_distance(sr, t, memo) + 1;
            let ins = recursive_distance(s, tr, memo) + 1;
            sub.min(del).min(ins)
        }
    };
    memo[s.len()][t.len()] = Some(d);
    d
}

fn all_strings(max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| ['a', 'b', 'c'].map(|c| format!("{s}{c}")))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

#[test]
fn oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut parts = Vec::new();
    let mut pass = true;
    type Oracle = fn(&mut ChaCha8Rng) -> f64;
    let oracles: [(&str, Oracle); 5] = [
        ("conv1d", conv_oracle),
        ("matmul", matmul_oracle),
        ("softmax", softmax_oracle),
        ("gru_step", gru_oracle),
        ("attend", attend_oracle),
    ];
    for (name, oracle) in oracles {
        let worst = (0..100).map(|_| oracle(&mut rng)).fold(0.0, f64::max);
        pass &= worst <= 1e-10;
        parts.push(format!("{name} {worst:.1e}"));
    }

    let strings = all_strings(6);
    let costs = EditCosts::default();
    let mut mismatches = 0usize;
    let mut pairs = 0usize;
    for s in &strings {
        for t in &strings {
            let mut memo = [[None; 7]; 7];
            let want = recursive_distance(s.as_bytes(), t.as_bytes(), &mut memo);
            if edit_distance(s, t) != want || levenshtein(s, t, &costs) != want as f64 {
                mismatches += 1;
            }
            pairs += 1;
        }
    }
    pass &= mismatches == 0;
    parts.push(format!(
        "levenshtein {mismatches} mismatches in {pairs} pairs"
    ));
    verdict(
        "oracle equivalence",
        pass,
        format!("max |Δ| over 100 cases (≤ 1e-10): {}", parts.join(", ")),
    );
}

// ------------------------------------------------------------------ overfit

fn keyboard_noisy(word: &str, kb: &KeyboardLayout, seed: u64) -> String {
    gen_synthetic(&[word], kb, 0.5, 1, seed)
        .unwrap()
        .remove(0)
        .noisy
}

#[test]
fn overfit_memorization() {
    let start = Instant::now();
    let words = top_words();
    let kb = KeyboardLayout::qwerty();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let pairs: Vec<TextPair> = (0..100)
        .map(|i| {
            let clean: Vec<&str> = (0..3)
                .map(|_| words[rng.random_range(0..words.len())].as_str())
                .collect();
            let noisy: Vec<String> = clean
                .iter()
                .enumerate()
                .map(|(j, w)| keyboard_noisy(w, &kb, i * 3 + j as u64))
                .collect();
            TextPair {
                noisy: noisy.join(" "),
                clean: clean.join(" "),
            }
        })
        .collect();
    let vocab = WordVocab::build(pairs.iter().map(|p| p.clean.as_str()), 1000).unwrap();
    let cfg = ModelConfig {
        hidden: 64,
        embed_dim: 32,
        filter_widths: vec![2, 3, 4, 5],
        filters: 5,
        char_window: 32,
        word_window: 3,
        word_vocab: vocab.len(),
        dropout: 0.0,
    };
    let data = encode_pairs(&pairs, &vocab, &cfg).unwrap();
    let model = Model::new(cfg, vocab, 1).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.005,
        batch_size: 10,
        epochs: 500,
        seed: 1,
        clip_norm: 5.0,
    };
    let mut reached: Option<(usize, f64)> = None;
    let mut last = (f64::NAN, 0.0);
    train(model, &data, &[], &tc, |m, model, _| {
        let ev = evaluate(model, &data, 100).unwrap();
        last = (ev.token_ce, ev.seq_acc);
        if ev.token_ce < 0.1 && ev.seq_acc == 1.0 {
            reached = Some((m.epoch, ev.token_ce));
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let detail = match reached {
        Some((epoch, ce)) => format!("token CE {ce:.4} (< 0.1) and seq acc 1.0 at epoch {epoch} (≤ 500), {secs:.0}s (< 600s)"),
        None => format!("after 500 epochs token CE {:.4}, seq acc {:.3}; {secs:.0}s", last.0, last.1),
    };
    verdict(
        "overfit memorization",
        reached.is_some() && secs < 600.0,
        detail,
    );
}

// --------------------------------------------------------------------- desk

/// `P(nearest key | intended key)` by midpoint quadrature of the Gaussian
/// over a ±6σ box.
fn key_confusion(kb: &KeyboardLayout, key: char, sigma: f64) -> BTreeMap<char, f64> {
    let (cx, cy) = kb.center(key).unwrap();
    let steps = 400;
    let h = 12.0 * sigma / steps as f64;
    let norm = h * h / (2.0 * std::f64::consts::PI * sigma * sigma);
    let mut out = BTreeMap::new();
    for i in 0..steps {
        let dx = -6.0 * sigma + (i as f64 + 0.5) * h;
        for j in 0..steps {
            let dy = -6.0 * sigma + (j as f64 + 0.5) * h;
            let w = norm * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            *out.entry(kb.nearest(cx + dx, cy + dy)).or_insert(0.0) += w;
        }
    }
    out
}

/// Accuracy of the exact posterior-mode classifier (uniform word prior)
/// on the given pairs; ties are split evenly.
fn bayes_accuracy(words: &[String], pairs: &[(String, String)], sigma: f64) -> f64 {
    let kb = KeyboardLayout::qwerty();
    let conf: BTreeMap<char, BTreeMap<char, f64>> = kb
        .keys()
        .iter()
        .map(|&(c, _, _)| (c, key_confusion(&kb, c, sigma)))
        .collect();
    let likelihood = |noisy: &[char], word: &str| -> f64 {
        let w: Vec<char> = word.chars().collect();
        if w.len() != noisy.len() {
            return 0.0;
        }
        w.iter()
            .zip(noisy)
            .map(|(c, n)| match conf.get(c) {
                Some(row) => *row.get(n).unwrap_or(&0.0),
                None => f64::from(u8::from(c == n)),
            })
            .product()
    };
    let mut score = 0.0;
    for (noisy, clean) in pairs {
        let n: Vec<char> = noisy.chars().collect();
        let l: Vec<f64> = words.iter().map(|w| likelihood(&n, w)).collect();
        let best = l.iter().cloned().fold(0.0, f64::max);
        let winners: Vec<&String> = words
            .iter()
            .zip(&l)
            .filter(|(_, &p)| p == best)
            .map(|(w, _)| w)
            .collect();
        if winners.contains(&clean) {
            score += 1.0 / winners.len() as f64;
        }
    }
    score / pairs.len() as f64
}

const DESK_EPOCHS: usize = 30;

#[test]
#[ignore = "desk-scale training run; cargo test --release -p ccead --test acceptance -- --ignored"]
fn desk_scale_synthetic() {
    let start = Instant::now();
    let words = top_words();
    assert_eq!(words.len(), 300);
    let mut pairs = gen_synthetic(&words, &KeyboardLayout::qwerty(), 1.0, 27, 1).unwrap();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    let text: Vec<TextPair> = pairs
        .iter()
        .map(|p| TextPair {
            noisy: p.noisy.split_whitespace().collect::<Vec<_>>().join(" "),
            clean: p.clean.clone(),
        })
        .collect();
    let (n_train, n_dev) = (text.len() * 8 / 10, text.len() / 10);
    let vocab = WordVocab::from_words(&words);
    let cfg = ModelConfig {
        word_vocab: vocab.len(),
        ..ModelConfig::desk()
    };
    let enc = |s: &[TextPair]| encode_pairs(s, &vocab, &cfg).unwrap();
    let (tr, dv, te) = (
        enc(&text[..n_train]),
        enc(&text[n_train..n_train + n_dev]),
        enc(&text[n_train + n_dev..]),
    );
    let model = Model::new(cfg.clone(), vocab.clone(), 1).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.003,
        batch_size: 32,
        epochs: DESK_EPOCHS,
        seed: 1,
        clip_norm: 5.0,
    };
    let outcome = train(model, &tr, &dv, &tc, |_, _, _| ControlFlow::Continue(())).unwrap();
    let test = evaluate(&outcome.best, &te, 256).unwrap();
    let held_out: Vec<(String, String)> = pairs[n_train + n_dev..]
        .iter()
        .map(|p| (p.noisy.clone(), p.clean.clone()))
        .collect();
    let ceiling = bayes_accuracy(&words, &held_out, 1.0);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "desk-scale synthetic",
        test.word_acc >= 0.90 && secs <= 3600.0,
        format!(
            "{} pairs, held-out word acc {:.4} (≥ 0.90 required), Bayes-optimal accuracy on the same pairs {ceiling:.4}, \
             best epoch {}, {secs:.0}s",
            pairs.len(),
            test.word_acc,
            outcome.best_epoch
        ),
    );
}

// ------------------------------------------------------------ substitutes

fn tv(a: &BTreeMap<char, f64>, b: &BTreeMap<char, f64>) -> f64 {
    let keys: std::collections::BTreeSet<&char> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

fn counts(entries: &[(char, usize)]) -> BTreeMap<char, usize> {
    entries.iter().copied().collect()
}

fn letter_corpus(lines: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..lines)
        .map(|_| {
            (0..8)
                .map(|_| {
                    let len = rng.random_range(3..8);
                    (0..len)
                        .map(|_| (b'a' + rng.random_range(0..8u8)) as char)
                        .collect::<String>()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

fn noise_roundtrip_worst_tv() -> (f64, usize) {
    let mut dist = ErrorDistribution::default();
    dist.substitution
        .insert('a', counts(&[('s', 6), ('q', 3), ('z', 1)]));
    dist.substitution.insert('e', counts(&[('r', 5), ('w', 5)]));
    dist.substitution
        .insert('c', counts(&[('v', 7), ('x', 2), ('d', 1)]));
    dist.insertion
        .insert(Some('b'), counts(&[('n', 4), ('v', 1)]));
    dist.insertion
        .insert(Some('d'), counts(&[('s', 1), ('k', 1), ('x', 2)]));
    dist.deletion = counts(&[('a', 3), ('e', 3), ('h', 2), ('g', 2)]);
    dist.edit_counts = [50, 20, 30];
    let model = NoiseModel {
        distribution: dist.clone(),
        dictionary: Default::default(),
    };
    let clean = letter_corpus(40_000, 5);
    let noisy = inject_noise(&clean, &model, InjectMode::Sampled, 0.1, 9).unwrap();
    let mut est = ErrorDistribution::default();
    for (n, c) in noisy.lines.iter().zip(&clean) {
        for (nw, cw) in n.split(' ').zip(c.split(' ')) {
            if nw != cw {
                if let Ok(edit) = classify_edit(&TypoPair::new(nw, cw)) {
                    est.record(&edit);
                }
            }
        }
    }
    let (mut worst, mut rows) = (0.0f64, 0usize);
    for k in dist.substitution.keys() {
        if est
            .substitution
            .get(k)
            .map_or(0, |r| r.values().sum::<usize>())
            >= 10_000
        {
            worst = worst.max(tv(
                &dist.substitution_row(*k).unwrap(),
                &est.substitution_row(*k).unwrap(),
            ));
            rows += 1;
        }
    }
    for k in dist.insertion.keys() {
        if est
            .insertion
            .get(k)
            .map_or(0, |r| r.values().sum::<usize>())
            >= 10_000
        {
            worst = worst.max(tv(
                &dist.insertion_row(*k).unwrap(),
                &est.insertion_row(*k).unwrap(),
            ));
            rows += 1;
        }
    }
    if est.deletion.values().sum::<usize>() >= 10_000 {
        worst = worst.max(tv(&dist.deletion_row(), &est.deletion_row()));
        rows += 1;
    }
    (worst, rows)
}

fn typo_model() -> NoiseModel {
    let pairs: Vec<TypoPair> = [
        ("teh", "the"),
        ("thw", "the"),
        ("yoi", "you"),
        ("tht", "that"),
        ("whta", "what"),
        ("wat", "what"),
        ("jsut", "just"),
        ("kno", "know"),
        ("hav", "have"),
        ("realy", "really"),
        ("goin", "going"),
        ("lik", "like"),
        ("sory", "sorry"),
        ("thanka", "thanks"),
        ("coud", "could"),
        ("wiuld", "would"),
        ("hpe", "hope"),
        ("whn", "when"),
        ("finr", "fine"),
        ("gppd", "good"),
        ("nrw", "new"),
        ("backk", "back"),
        ("dqy", "day"),
        ("wotk", "work"),
        ("tme", "time"),
        ("rigt", "right"),
        ("verry", "very"),
        ("oen", "one"),
        ("abd", "and"),
        ("fpr", "for"),
    ]
    .iter()
    .map(|(t, c)| TypoPair::new(*t, *c))
    .collect();
    NoiseModel::from_pairs(&pairs).unwrap().0
}

#[test]
fn not_reproducible_substitutes() {
    let (worst_tv, rows) = noise_roundtrip_worst_tv();

    let words = top_words();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let clean: Vec<String> = (0..6_000)
        .map(|_| {
            let n = rng.random_range(3..10);
            (0..n)
                .map(|_| words[rng.random_range(0..words.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let chars: usize = clean.iter().map(|l| l.chars().count()).sum();
    let noisy = inject_noise(&clean, &typo_model(), InjectMode::Sampled, 0.10, 3).unwrap();
    let measured = corpus_cer(
        noisy
            .lines
            .iter()
            .map(String::as_str)
            .zip(clean.iter().map(String::as_str)),
    );

    verdict(
        "not reproducible at desk scale (substitutes)",
        worst_tv <= 0.05 && rows >= 3 && (measured - 10.0).abs() <= 2.0 && chars >= 100_000,
        format!(
            "noise round trip worst TV {worst_tv:.4} (≤ 0.05) over {rows} rows with ≥ 1e4 samples; \
             injection CER {measured:.2}% for a 10% target over {chars} chars (±2)"
        ),
    );
}

// ------------------------------------------------------------------ metrics

#[test]
fn metric_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut penalty_ok, mut entropy_ok) = (0, 0);
    for _ in 0..1000 {
        let o_cer = rng.random_range(0.0..100.0);
        let p_cer = rng.random_range(0.0..=o_cer);
        let steps = rng.random_range(0..8);
        let context_probs: Vec<f64> = (0..steps).map(|_| rng.random_range(1e-6..=1.0)).collect();
        let sc = smooth_cer(&SmoothCerInputs {
            p_cer,
            o_cer,
            context_probs,
        });
        penalty_ok += usize::from(sc.r_c == 1.0);
        entropy_ok += usize::from(sc.h_sc <= 0.0);
    }
    // Entropy bound also over the penalized branch.
    for _ in 0..1000 {
        let o_cer = rng.random_range(0.0..50.0);
        let sc = smooth_cer(&SmoothCerInputs {
            p_cer: o_cer + rng.random_range(0.1..50.0),
            o_cer,
            context_probs: (0..rng.random_range(1..8))
                .map(|_| rng.random_range(1e-6..=1.0))
                .collect(),
        });
        entropy_ok += usize::from(sc.h_sc <= 0.0 && sc.s_cer <= 0.0);
    }
    let table = cer("thanka i will", "thanks i will");
    let mut memo = [[None; 7]; 7];
    let tiny = recursive_distance(b"thanka", b"thanks", &mut memo);
    let pass = penalty_ok == 1000
        && entropy_ok == 2000
        && (table - 100.0 / 13.0).abs() < 1e-12
        && tiny == 1;
    verdict(
        "metric formulas",
        pass,
        format!(
            "r_c = 1 in {penalty_ok}/1000 triples with p_cer ≤ o_cer; H_Sc ≤ 0 in {entropy_ok}/2000; \
             cer(\"thanka i will\", \"thanks i will\") = {table:.6} (100/13 = {:.6})",
            100.0 / 13.0
        ),
    );
}

// ------------------------------------------------------------------ serving

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec(),
    )
}

fn correction(text: &str) -> Request<Body> {
    Request::post("/api/v1/correct")
        .header("content-type", "application/json")
        .body(Body::from(serde_json::json!({ "text": text }).to_string()))
        .unwrap()
}

#[tokio::test]
async fn serving() {
    let words: Vec<&str> = TOP_WORDS.split_whitespace().take(16).collect();
    let vocab = WordVocab::from_words(words.iter().copied());
    let cfg = ModelConfig {
        word_vocab: vocab.len(),
        ..ModelConfig::micro()
    };
    let model = Model::new(cfg, vocab, 3).unwrap();
    let bytes = Checkpoint::new(RunConfig::default(), model, None, 0, Vec::new()).to_bytes();
    let file_digest = |b: &[u8]| {
        use sha2::Digest;
        hex::encode(sha2::Sha256::digest(b))
    };
    let bytes_before = file_digest(&bytes);
    let state = AppState::from_checkpoint_bytes(&bytes, Duration::from_secs(10)).unwrap();
    let params_before = model_digest(state.model());

    let (health, body) = call(
        &state,
        Request::get("/healthz").body(Body::empty()).unwrap(),
    )
    .await;
    let health_ok = health == StatusCode::OK && body == b"ok";

    let inputs = ["teh tiem is", "i will", "thanka i will", ""];
    let mut first: Vec<serde_json::Value> = Vec::new();
    let mut identical = true;
    for i in 0..1000 {
        let (status, body) = call(&state, correction(inputs[i % inputs.len()])).await;
        let mut v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        v.as_object_mut().unwrap().remove("latency_ms");
        identical &= status == StatusCode::OK;
        if i < inputs.len() {
            first.push(v);
        } else {
            identical &= v == first[i % inputs.len()];
        }
    }
    let unchanged =
        model_digest(state.model()) == params_before && file_digest(&bytes) == bytes_before;

    // The workspace holds only the primary crates.
    let crates_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("..");
    let mut members: Vec<String> = std::fs::read_dir(&crates_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    members.sort();
    let primary_only = members == ["cli", "core"];

    verdict(
        "serving",
        health_ok && identical && unchanged && primary_only,
        format!(
            "/healthz {health}; 1000 requests identical: {identical}; model checksum unchanged: {unchanged}; \
             workspace crates {members:?}"
        ),
    );
}
