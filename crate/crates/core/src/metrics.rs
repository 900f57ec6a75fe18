//! Edit distance, character error rate, accuracies, per-position error
//! tables and the smooth context-aware CER.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{predictions} predictions for {targets} targets")]
    Pairing { predictions: usize, targets: usize },
}

/// Per-character operation costs for [`levenshtein`]. All costs must be
/// nonnegative.
pub struct EditCosts {
    pub delete: Box<dyn Fn(char) -> f64 + Send + Sync>,
    pub insert: Box<dyn Fn(char) -> f64 + Send + Sync>,
    pub substitute: Box<dyn Fn(char, char) -> f64 + Send + Sync>,
}

impl Default for EditCosts {
    fn default() -> Self {
        Self {
            delete: Box::new(|_| 1.0),
            insert: Box::new(|_| 1.0),
            substitute: Box::new(|_, _| 1.0),
        }
    }
}

impl std::fmt::Debug for EditCosts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("EditCosts { .. }")
    }
}

/// Weighted edit distance turning `source` into `target`.
///
/// Deleting a source character costs `delete(ch)`, inserting a target
/// character `insert(ch)`, and replacing `a` by `b` costs `substitute(a, b)`.
/// Matching characters pass through at no cost.
pub fn levenshtein(source: &str, target: &str, costs: &EditCosts) -> f64 {
    let s: Vec<char> = source.chars().collect();
    let t: Vec<char> = target.chars().collect();
    let mut prev: Vec<f64> = Vec::with_capacity(t.len() + 1);
    prev.push(0.0);
    for &tc in &t {
        let last = *prev.last().unwrap();
        prev.push(last + (costs.insert)(tc));
    }
    let mut cur = vec![0.0; t.len() + 1];
    for &sc in &s {
        cur[0] = prev[0] + (costs.delete)(sc);
        for (j, &tc) in t.iter().enumerate() {
            cur[j + 1] = if sc == tc {
                prev[j]
            } else {
                (prev[j + 1] + (costs.delete)(sc))
                    .min(cur[j] + (costs.insert)(tc))
                    .min(prev[j] + (costs.substitute)(sc, tc))
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[t.len()]
}

/// Unit-cost edit distance.
pub fn edit_distance(source: &str, target: &str) -> usize {
    let s: Vec<char> = source.chars().collect();
    let t: Vec<char> = target.chars().collect();
    let mut prev: Vec<usize> = (0..=t.len()).collect();
    let mut cur = vec![0; t.len() + 1];
    for (i, &sc) in s.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &tc) in t.iter().enumerate() {
            cur[j + 1] = if sc == tc {
                prev[j]
            } else {
                1 + prev[j + 1].min(cur[j]).min(prev[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[t.len()]
}

/// Character error rate in percent: `100 · d(pred, truth) / max(1, |truth|)`.
pub fn cer(pred: &str, truth: &str) -> f64 {
    100.0 * edit_distance(pred, truth) as f64 / truth.chars().count().max(1) as f64
}

/// Pooled CER over many pairs: total distance over total truth characters.
pub fn corpus_cer<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let (mut dist, mut chars) = (0usize, 0usize);
    for (pred, truth) in pairs {
        dist += edit_distance(pred, truth);
        chars += truth.chars().count();
    }
    100.0 * dist as f64 / chars.max(1) as f64
}

/// `(word accuracy, sequence accuracy)` over aligned word sequences.
///
/// Word accuracy counts target word slots whose prediction at the same slot
/// is identical; sequence accuracy counts exact matches of whole sequences.
pub fn accuracy<P, T>(predictions: &[P], targets: &[T]) -> Result<(f64, f64), MetricsError>
where
    P: AsRef<[String]>,
    T: AsRef<[String]>,
{
    if predictions.len() != targets.len() {
        return Err(MetricsError::Pairing {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    let (mut slots, mut hits, mut exact) = (0usize, 0usize, 0usize);
    for (p, t) in predictions.iter().zip(targets) {
        let (p, t) = (p.as_ref(), t.as_ref());
        slots += t.len();
        hits += t.iter().zip(p).filter(|(a, b)| a == b).count();
        exact += usize::from(p == t);
    }
    let n = targets.len().max(1) as f64;
    let word = if slots == 0 {
        1.0
    } else {
        hits as f64 / slots as f64
    };
    Ok((word, exact as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Substitution,
    Insertion,
    Deletion,
}

impl EditKind {
    pub const ALL: [EditKind; 3] = [
        EditKind::Substitution,
        EditKind::Insertion,
        EditKind::Deletion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditKind::Substitution => "substitution",
            EditKind::Insertion => "insertion",
            EditKind::Deletion => "deletion",
        }
    }
}

/// One step of a minimal unit-cost alignment, located at a truth position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedEdit {
    pub kind: EditKind,
    /// Truth position the edit applies to; insertions use the position of the
    /// following truth character (clamped to the last one).
    pub position: usize,
}

/// Minimal edit script turning `truth` into `pred`.
pub fn align(pred: &str, truth: &str) -> Vec<AlignedEdit> {
    let p: Vec<char> = pred.chars().collect();
    let t: Vec<char> = truth.chars().collect();
    let (n, m) = (t.len(), p.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            d[i][j] = if t[i - 1] == p[j - 1] {
                d[i - 1][j - 1]
            } else {
                1 + d[i - 1][j].min(d[i][j - 1]).min(d[i - 1][j - 1])
            };
        }
    }
    let mut edits = Vec::new();
    let (mut i, mut j) = (n, m);
    let last = n.saturating_sub(1);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && t[i - 1] == p[j - 1] && d[i][j] == d[i - 1][j - 1] {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            edits.push(AlignedEdit {
                kind: EditKind::Substitution,
                position: i - 1,
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            edits.push(AlignedEdit {
                kind: EditKind::Deletion,
                position: i - 1,
            });
            i -= 1;
        } else {
            edits.push(AlignedEdit {
                kind: EditKind::Insertion,
                position: i.min(last),
            });
            j -= 1;
        }
    }
    edits.reverse();
    edits
}

/// Character error rates of predicted words, by truth position and edit type.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    pub word_length: usize,
    /// Number of qualifying truth words.
    pub words: usize,
    /// `counts[kind][position]`
    pub counts: [Vec<usize>; 3],
}

impl PositionTable {
    /// Error rate in percent of qualifying words.
    pub fn rate(&self, kind: EditKind, position: usize) -> f64 {
        if self.words == 0 {
            return 0.0;
        }
        100.0 * self.counts[kind as usize][position] as f64 / self.words as f64
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|c| c.iter().all(|&v| v == 0))
    }

    /// Header `kind` then one column per position; one row per edit type.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("kind");
        for p in 0..self.word_length {
            let _ = write!(out, "\tpos{p}");
        }
        out.push('\n');
        for kind in EditKind::ALL {
            out.push_str(kind.name());
            for p in 0..self.word_length {
                let _ = write!(out, "\t{:.4}", self.rate(kind, p));
            }
            out.push('\n');
        }
        out
    }
}

/// Tallies prediction errors on truth words of exactly `word_length`
/// characters. Words are aligned by slot; missing predicted words count as
/// an empty prediction.
pub fn cer_by_position<'a, I>(pairs: I, word_length: usize) -> PositionTable
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut table = PositionTable {
        word_length,
        words: 0,
        counts: [
            vec![0; word_length],
            vec![0; word_length],
            vec![0; word_length],
        ],
    };
    if word_length == 0 {
        return table;
    }
    for (pred, truth) in pairs {
        let pw: Vec<&str> = pred.split_whitespace().collect();
        for (slot, tw) in truth.split_whitespace().enumerate() {
            if tw.chars().count() != word_length {
                continue;
            }
            table.words += 1;
            for e in align(pw.get(slot).copied().unwrap_or(""), tw) {
                table.counts[e.kind as usize][e.position] += 1;
            }
        }
    }
    table
}

/// Scores how well a predicted word fits the context label of a sentence.
pub trait ContextModel {
    /// `p(c_t | w_t, s_{t−1})` in `(0, 1]`.
    fn probability(&self, prefix: &[String], word: &str) -> f64;
}

/// Assigns every word probability `1 / labels`.
#[derive(Debug, Clone, Copy)]
pub struct UniformContext {
    pub labels: usize,
}

impl ContextModel for UniformContext {
    fn probability(&self, _prefix: &[String], _word: &str) -> f64 {
        1.0 / self.labels.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothCerInputs {
    /// CER of the prediction against the truth.
    pub p_cer: f64,
    /// CER of the raw input against the truth.
    pub o_cer: f64,
    /// Context probability at every step.
    pub context_probs: Vec<f64>,
}

impl SmoothCerInputs {
    /// Gathers per-word context probabilities for a predicted sentence.
    pub fn from_prediction(
        pred: &str,
        input: &str,
        truth: &str,
        context: &dyn ContextModel,
    ) -> Self {
        let words: Vec<String> = pred.split_whitespace().map(str::to_string).collect();
        let context_probs = (0..words.len())
            .map(|t| context.probability(&words[..t], &words[t]))
            .collect();
        Self {
            p_cer: cer(pred, truth),
            o_cer: cer(input, truth),
            context_probs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothCer {
    pub r_c: f64,
    pub h_sc: f64,
    /// `r_c × H_Sc`, nonpositive by construction.
    pub s_cer: f64,
    /// `r_c × (−H_Sc)`, the same magnitude as a nonnegative penalty.
    pub s_cer_negated: f64,
    /// Set when `o_cer = 0 < p_cer` and the ratio was replaced by `p_cer`.
    pub zero_input_cer: bool,
}

/// Penalty `r_c`, context cross-entropy `H_Sc = (1/N) Σ log₂ P` and their
/// product. The penalty uses the mean context probability; `N` is the
/// number of steps.
pub fn smooth_cer(inputs: &SmoothCerInputs) -> SmoothCer {
    let n = inputs.context_probs.len();
    let (h_sc, mean_p) = if n == 0 {
        (0.0, 1.0)
    } else {
        (
            inputs.context_probs.iter().map(|p| p.log2()).sum::<f64>() / n as f64,
            inputs.context_probs.iter().sum::<f64>() / n as f64,
        )
    };
    let (r_c, zero_input_cer) = penalty(inputs.p_cer, inputs.o_cer, mean_p);
    SmoothCer {
        r_c,
        h_sc,
        s_cer: r_c * h_sc,
        s_cer_negated: r_c * -h_sc,
        zero_input_cer,
    }
}

/// `r_c = 1` if `p_cer ≤ o_cer`, else `e^(p_cer/o_cer) · e^(1 − e^P)`.
pub fn penalty(p_cer: f64, o_cer: f64, context_prob: f64) -> (f64, bool) {
    if p_cer <= o_cer {
        return (1.0, false);
    }
    let context = (1.0 - context_prob.exp()).exp();
    if o_cer == 0.0 {
        ((p_cer).exp() * context, true)
    } else {
        ((p_cer / o_cer).exp() * context, false)
    }
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cer: f64,
    pub input_cer: f64,
    pub word_accuracy: f64,
    pub sequence_accuracy: f64,
    pub samples: usize,
    pub positions: PositionTable,
    pub smooth: Option<SmoothCer>,
}

impl EvalReport {
    pub const SUMMARY_HEADER: &'static str =
        "samples\tcer\tinput_cer\tword_acc\tseq_acc\tr_c\th_sc\ts_cer\ts_cer_negated";

    /// Header line plus one tab-separated row.
    pub fn summary_tsv(&self) -> String {
        let (r, h, s, sn) = match self.smooth {
            Some(sc) => (sc.r_c, sc.h_sc, sc.s_cer, sc.s_cer_negated),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        format!(
            "{}\n{}\t{:.4}\t{:.4}\t{:.6}\t{:.6}\t{r:.6}\t{h:.6}\t{s:.6}\t{sn:.6}\n",
            Self::SUMMARY_HEADER,
            self.samples,
            self.cer,
            self.input_cer,
            self.word_accuracy,
            self.sequence_accuracy,
        )
    }

    /// Scores predictions against truths, with the raw inputs for `o_cer`.
    pub fn compute(
        predictions: &[String],
        inputs: &[String],
        truths: &[String],
        context: Option<&dyn ContextModel>,
    ) -> Result<Self, MetricsError> {
        if predictions.len() != truths.len() || inputs.len() != truths.len() {
            return Err(MetricsError::Pairing {
                predictions: predictions.len(),
                targets: truths.len(),
            });
        }
        let split = |v: &[String]| -> Vec<Vec<String>> {
            v.iter()
                .map(|s| s.split_whitespace().map(str::to_string).collect())
                .collect()
        };
        let (word_accuracy, sequence_accuracy) = accuracy(&split(predictions), &split(truths))?;
        let pairs = || {
            predictions
                .iter()
                .map(String::as_str)
                .zip(truths.iter().map(String::as_str))
        };
        let cer_value = corpus_cer(pairs());
        let input_cer = corpus_cer(
            inputs
                .iter()
                .map(String::as_str)
                .zip(truths.iter().map(String::as_str)),
        );
        let smooth = context.map(|ctx| {
            let mut probs = Vec::new();
            for p in predictions {
                probs.extend(SmoothCerInputs::from_prediction(p, "", "", ctx).context_probs);
            }
            smooth_cer(&SmoothCerInputs {
                p_cer: cer_value,
                o_cer: input_cer,
                context_probs: probs,
            })
        });
        Ok(Self {
            cer: cer_value,
            input_cer,
            word_accuracy,
            sequence_accuracy,
            samples: truths.len(),
            positions: cer_by_position(pairs(), 5),
            smooth,
        })
    }
}
