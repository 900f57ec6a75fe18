//! Typo statistics, noise injection and synthetic keyboard data.
//!
//! Typo pairs are classified into single-character edits, tallied into
//! conditional tables, and replayed onto clean text either by swapping in
//! observed typos (`dict` mode) or by drawing character edits from the
//! tables (`sampled` mode).

mod keyboard;
mod opentypo;

pub use keyboard::{gen_synthetic, KeyboardLayout, SyntheticPair};
pub use opentypo::{build_opentypo, clean_corpus, OpenTypo, OpenTypoOptions, Splits};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("no typo pair survived classification")]
    NoAcceptedPairs,
    #[error("unknown injection mode {0:?} (expected `dict` or `sampled`)")]
    UnknownMode(String),
    #[error("rate {0} is outside [0, 1]")]
    Rate(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unsupported noise model version {0}")]
    Version(u32),
}

/// A misspelling and its correction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypoPair {
    pub typo: String,
    pub correction: String,
}

impl TypoPair {
    pub fn new(typo: impl Into<String>, correction: impl Into<String>) -> Self {
        Self {
            typo: typo.into(),
            correction: correction.into(),
        }
    }
}

/// A single-character edit that turns a correction into its typo.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    /// `inserted` appears before correction position `position`; `left` is
    /// the character preceding it (`None` at the start of the word).
    Insertion {
        position: usize,
        inserted: char,
        left: Option<char>,
    },
    Deletion {
        position: usize,
        deleted: char,
    },
    Substitution {
        position: usize,
        original: char,
        replacement: char,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditType {
    Substitution,
    Insertion,
    Deletion,
}

impl EditType {
    pub const ALL: [EditType; 3] = [
        EditType::Substitution,
        EditType::Insertion,
        EditType::Deletion,
    ];

    fn name(self) -> &'static str {
        match self {
            EditType::Substitution => "substitution",
            EditType::Insertion => "insertion",
            EditType::Deletion => "deletion",
        }
    }
}

impl Edit {
    pub fn kind(&self) -> EditType {
        match self {
            Edit::Insertion { .. } => EditType::Insertion,
            Edit::Deletion { .. } => EditType::Deletion,
            Edit::Substitution { .. } => EditType::Substitution,
        }
    }
}

/// Why a pair was routed to the rejects log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejected {
    pub pair: TypoPair,
    pub reason: &'static str,
}

/// Locates the single edit separating typo from correction.
///
/// The edit sits right after the longest common prefix, so a doubled letter
/// is read as an insertion after its twin.
pub fn classify_edit(pair: &TypoPair) -> Result<Edit, Rejected> {
    let t: Vec<char> = pair.typo.chars().collect();
    let c: Vec<char> = pair.correction.chars().collect();
    let reject = |reason| Rejected {
        pair: pair.clone(),
        reason,
    };
    let i = t.iter().zip(&c).take_while(|(a, b)| a == b).count();
    if t.len() == c.len() {
        if i == t.len() {
            return Err(reject("typo equals correction"));
        }
        if t[i + 1..] != c[i + 1..] {
            return Err(reject("more than one substitution"));
        }
        Ok(Edit::Substitution {
            position: i,
            original: c[i],
            replacement: t[i],
        })
    } else if t.len() == c.len() + 1 {
        if t[i + 1..] != c[i..] {
            return Err(reject("edit distance above one"));
        }
        Ok(Edit::Insertion {
            position: i,
            inserted: t[i],
            left: i.checked_sub(1).map(|p| t[p]),
        })
    } else if c.len() == t.len() + 1 {
        if t[i..] != c[i + 1..] {
            return Err(reject("edit distance above one"));
        }
        Ok(Edit::Deletion {
            position: i,
            deleted: c[i],
        })
    } else {
        Err(reject("lengths differ by more than one"))
    }
}

type Row<K> = BTreeMap<K, usize>;

/// Maximum-likelihood edit tables with their raw counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ErrorDistribution {
    /// original → replacement
    pub substitution: BTreeMap<char, Row<char>>,
    /// left context → inserted
    pub insertion: BTreeMap<Option<char>, Row<char>>,
    /// deleted character
    pub deletion: Row<char>,
    /// counts by [`EditType`] order
    pub edit_counts: [usize; 3],
}

fn row_total<K>(row: &Row<K>) -> usize {
    row.values().sum()
}

fn sample_row<K: Copy, R: Rng + ?Sized>(row: &Row<K>, rng: &mut R) -> Option<K> {
    let total = row_total(row);
    if total == 0 {
        return None;
    }
    let mut pick = rng.random_range(0..total);
    for (k, &n) in row {
        if pick < n {
            return Some(*k);
        }
        pick -= n;
    }
    None
}

impl ErrorDistribution {
    pub fn record(&mut self, edit: &Edit) {
        self.edit_counts[edit.kind() as usize] += 1;
        match *edit {
            Edit::Substitution {
                original,
                replacement,
                ..
            } => {
                *self
                    .substitution
                    .entry(original)
                    .or_default()
                    .entry(replacement)
                    .or_default() += 1
            }
            Edit::Insertion { inserted, left, .. } => {
                *self
                    .insertion
                    .entry(left)
                    .or_default()
                    .entry(inserted)
                    .or_default() += 1
            }
            Edit::Deletion { deleted, .. } => *self.deletion.entry(deleted).or_default() += 1,
        }
    }

    pub fn total_edits(&self) -> usize {
        self.edit_counts.iter().sum()
    }

    /// `P(edit type)`.
    pub fn prior(&self, kind: EditType) -> f64 {
        let total = self.total_edits();
        if total == 0 {
            0.0
        } else {
            self.edit_counts[kind as usize] as f64 / total as f64
        }
    }

    /// `P(replacement | original)`, `None` when the row is absent.
    pub fn substitution_row(&self, original: char) -> Option<BTreeMap<char, f64>> {
        self.substitution.get(&original).map(normalize)
    }

    /// `P(inserted | left)`.
    pub fn insertion_row(&self, left: Option<char>) -> Option<BTreeMap<char, f64>> {
        self.insertion.get(&left).map(normalize)
    }

    /// `P(deleted)`.
    pub fn deletion_row(&self) -> BTreeMap<char, f64> {
        normalize(&self.deletion)
    }
}

fn normalize<K: Ord + Copy>(row: &Row<K>) -> BTreeMap<K, f64> {
    let total = row_total(row) as f64;
    row.iter().map(|(k, &n)| (*k, n as f64 / total)).collect()
}

/// Classifies every pair and tallies the accepted edits.
pub fn estimate_error_distribution<'a, I>(
    pairs: I,
) -> Result<(ErrorDistribution, Vec<Rejected>), NoiseError>
where
    I: IntoIterator<Item = &'a TypoPair>,
{
    let mut dist = ErrorDistribution::default();
    let mut rejects = Vec::new();
    for pair in pairs {
        match classify_edit(pair) {
            Ok(edit) => dist.record(&edit),
            Err(r) => rejects.push(r),
        }
    }
    if dist.total_edits() == 0 {
        return Err(NoiseError::NoAcceptedPairs);
    }
    Ok((dist, rejects))
}

/// Correct word → observed typos (with repetition, so frequent typos are
/// sampled more often).
pub type TypoDict = BTreeMap<String, Vec<String>>;

/// Edit tables plus the typo dictionary they were estimated from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NoiseModel {
    pub distribution: ErrorDistribution,
    pub dictionary: TypoDict,
}

impl NoiseModel {
    pub const FORMAT_VERSION: u32 = 1;

    /// Builds the model from raw pairs; rejected pairs are returned, not dropped.
    pub fn from_pairs(pairs: &[TypoPair]) -> Result<(Self, Vec<Rejected>), NoiseError> {
        let (distribution, rejects) = estimate_error_distribution(pairs)?;
        let mut dictionary = TypoDict::new();
        for p in pairs {
            if classify_edit(p).is_ok() {
                dictionary
                    .entry(p.correction.to_lowercase())
                    .or_default()
                    .push(p.typo.to_lowercase());
            }
        }
        Ok((
            Self {
                distribution,
                dictionary,
            },
            rejects,
        ))
    }

    /// Versioned tab-separated count tables.
    pub fn to_text(&self) -> String {
        let d = &self.distribution;
        let mut out = format!("ccead-noise\t{}\n", Self::FORMAT_VERSION);
        for kind in EditType::ALL {
            let _ = writeln!(
                out,
                "prior\t{}\t{}",
                kind.name(),
                d.edit_counts[kind as usize]
            );
        }
        for (orig, row) in &d.substitution {
            for (rep, n) in row {
                let _ = writeln!(out, "sub\t{}\t{}\t{n}", esc(*orig), esc(*rep));
            }
        }
        for (left, row) in &d.insertion {
            let left = left.map_or_else(|| "<BOW>".to_string(), esc);
            for (ins, n) in row {
                let _ = writeln!(out, "ins\t{left}\t{}\t{n}", esc(*ins));
            }
        }
        for (ch, n) in &d.deletion {
            let _ = writeln!(out, "del\t{}\t{n}", esc(*ch));
        }
        for (word, typos) in &self.dictionary {
            for t in typos {
                let _ = writeln!(out, "dict\t{}\t{}", esc_str(word), esc_str(t));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NoiseError> {
        let mut lines = text.lines().enumerate();
        let perr = |line: usize, detail: &str| NoiseError::Parse {
            line: line + 1,
            detail: detail.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| perr(0, "empty file"))?;
        let version = header
            .strip_prefix("ccead-noise\t")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| perr(0, "missing ccead-noise header"))?;
        if version != Self::FORMAT_VERSION {
            return Err(NoiseError::Version(version));
        }
        let mut model = Self::default();
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let count = |s: &str| s.parse::<usize>().map_err(|_| perr(no, "bad count"));
            let ch = |s: &str| unesc(s).ok_or_else(|| perr(no, "bad character field"));
            let d = &mut model.distribution;
            match f.as_slice() {
                ["prior", kind, n] => {
                    let idx = EditType::ALL
                        .iter()
                        .position(|k| k.name() == *kind)
                        .ok_or_else(|| perr(no, "unknown edit type"))?;
                    d.edit_counts[idx] = count(n)?;
                }
                ["sub", o, r, n] => {
                    d.substitution
                        .entry(ch(o)?)
                        .or_default()
                        .insert(ch(r)?, count(n)?);
                }
                ["ins", l, i, n] => {
                    let left = if *l == "<BOW>" { None } else { Some(ch(l)?) };
                    d.insertion
                        .entry(left)
                        .or_default()
                        .insert(ch(i)?, count(n)?);
                }
                ["del", c, n] => {
                    d.deletion.insert(ch(c)?, count(n)?);
                }
                ["dict", word, typo] => {
                    let word = unesc_str(word).ok_or_else(|| perr(no, "bad escape"))?;
                    let typo = unesc_str(typo).ok_or_else(|| perr(no, "bad escape"))?;
                    model.dictionary.entry(word).or_default().push(typo);
                }
                _ => return Err(perr(no, "unrecognized record")),
            }
        }
        Ok(model)
    }
}

fn esc(c: char) -> String {
    match c {
        '\t' => "\\t".into(),
        '\n' => "\\n".into(),
        '\r' => "\\r".into(),
        '\\' => "\\\\".into(),
        c => c.to_string(),
    }
}

fn esc_str(s: &str) -> String {
    s.chars().map(esc).collect()
}

fn unesc_str(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            out.push(unesc(&format!("\\{}", it.next()?))?);
        } else {
            out.push(c);
        }
    }
    Some(out)
}

fn unesc(s: &str) -> Option<char> {
    match s {
        "\\t" => Some('\t'),
        "\\n" => Some('\n'),
        "\\r" => Some('\r'),
        "\\\\" => Some('\\'),
        _ => {
            let mut it = s.chars();
            let c = it.next()?;
            it.next().is_none().then_some(c)
        }
    }
}

/// Reads `typo<TAB>correction` lines. Blank lines are skipped.
pub fn parse_typo_pairs(text: &str) -> Result<Vec<TypoPair>, NoiseError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (typo, correction) = line.split_once('\t').ok_or_else(|| NoiseError::Parse {
            line: no + 1,
            detail: "expected typo<TAB>correction".into(),
        })?;
        out.push(TypoPair::new(
            typo.trim().to_lowercase(),
            correction.trim().to_lowercase(),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectMode {
    /// Replace dictionary words with one of their observed typos.
    Dict,
    /// Apply character edits drawn from the edit tables.
    Sampled,
}

impl FromStr for InjectMode {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dict" => Ok(Self::Dict),
            "sampled" => Ok(Self::Sampled),
            other => Err(NoiseError::UnknownMode(other.to_string())),
        }
    }
}

/// A word changed by injection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordChange {
    pub word_index: usize,
    pub clean: String,
    pub noisy: String,
    /// Character edits applied, in application order.
    pub edits: Vec<Edit>,
}

/// Noisy corpus aligned line-for-line with its clean source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub lines: Vec<String>,
    pub changes: Vec<Vec<WordChange>>,
}

/// Deterministic per-line generator: the line index selects the stream.
pub(crate) fn line_rng(seed: u64, line: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(line as u64);
    rng
}

/// Per-character edit plan for sampled mode, calibrated to a corpus.
struct SampledPlan<'a> {
    dist: &'a ErrorDistribution,
    /// Probability that a character position triggers an edit attempt.
    trigger: f64,
    /// Acceptance probability of a deletion for each character.
    delete_accept: BTreeMap<char, f64>,
}

impl<'a> SampledPlan<'a> {
    fn new(dist: &'a ErrorDistribution, lines: &[&str], rate: f64) -> Self {
        let mut freq: BTreeMap<char, usize> = BTreeMap::new();
        let (mut total, mut letters) = (0usize, 0usize);
        for line in lines {
            for c in line.chars() {
                total += 1;
                if !c.is_whitespace() {
                    letters += 1;
                    *freq.entry(c).or_default() += 1;
                }
            }
        }
        // Deleting `c` is accepted ∝ P(del c) / f(c), so the deleted-character
        // mix follows the deletion table rather than corpus frequency.
        let del = dist.deletion_row();
        let ratio =
            |c: &char, p: &f64| freq.get(c).map(|&n| p / (n as f64 / letters.max(1) as f64));
        let max_ratio = del
            .iter()
            .filter_map(|(c, p)| ratio(c, p))
            .fold(0.0, f64::max);
        let delete_accept: BTreeMap<char, f64> = del
            .iter()
            .filter_map(|(c, p)| ratio(c, p).map(|r| (*c, r / max_ratio)))
            .collect();

        let mut plan = Self {
            dist,
            trigger: 0.0,
            delete_accept,
        };
        let expected: f64 = freq
            .iter()
            .map(|(c, &n)| n as f64 / letters.max(1) as f64 * plan.acceptance(*c))
            .sum();
        if expected > 0.0 && letters > 0 {
            plan.trigger = (rate * total as f64 / (expected * letters as f64)).min(1.0);
            if plan.trigger >= 1.0 && rate > 0.0 {
                log::warn!("sampled noise saturated: requested rate {rate} is not reachable");
            }
        }
        plan
    }

    /// Probability that an edit attempt on `c` produces an edit.
    fn acceptance(&self, c: char) -> f64 {
        let d = self.dist;
        d.prior(EditType::Substitution) * f64::from(u8::from(d.substitution.contains_key(&c)))
            + d.prior(EditType::Insertion) * f64::from(u8::from(d.insertion.contains_key(&Some(c))))
            + d.prior(EditType::Deletion) * self.delete_accept.get(&c).copied().unwrap_or(0.0)
    }

    fn apply<R: Rng + ?Sized>(&self, word: &str, rng: &mut R) -> (String, Vec<Edit>) {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::with_capacity(chars.len() + 2);
        let mut edits = Vec::new();
        let mut deleted = 0;
        for (i, &c) in chars.iter().enumerate() {
            if self.trigger == 0.0 || rng.random::<f64>() >= self.trigger {
                out.push(c);
                continue;
            }
            let u: f64 = rng.random();
            let (ps, pi) = (
                self.dist.prior(EditType::Substitution),
                self.dist.prior(EditType::Insertion),
            );
            if u < ps {
                match self
                    .dist
                    .substitution
                    .get(&c)
                    .and_then(|row| sample_row(row, rng))
                {
                    Some(r) => {
                        out.push(r);
                        edits.push(Edit::Substitution {
                            position: i,
                            original: c,
                            replacement: r,
                        });
                    }
                    None => out.push(c),
                }
            } else if u < ps + pi {
                out.push(c);
                if let Some(ins) = self
                    .dist
                    .insertion
                    .get(&Some(c))
                    .and_then(|row| sample_row(row, rng))
                {
                    out.push(ins);
                    edits.push(Edit::Insertion {
                        position: i + 1,
                        inserted: ins,
                        left: Some(c),
                    });
                }
            } else {
                let accept = self.delete_accept.get(&c).copied().unwrap_or(0.0);
                // A word never disappears entirely.
                if deleted + 1 < chars.len() && rng.random::<f64>() < accept {
                    deleted += 1;
                    edits.push(Edit::Deletion {
                        position: i,
                        deleted: c,
                    });
                } else {
                    out.push(c);
                }
            }
        }
        (out.into_iter().collect(), edits)
    }
}

/// Injects noise into every line. Deterministic for a given seed; word
/// boundaries are never created or removed, so noisy and clean lines keep
/// equal word counts.
pub fn inject_noise<S: AsRef<str>>(
    clean: &[S],
    model: &NoiseModel,
    mode: InjectMode,
    rate: f64,
    seed: u64,
) -> Result<Injection, NoiseError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(NoiseError::Rate(rate));
    }
    let lines: Vec<&str> = clean.iter().map(AsRef::as_ref).collect();
    let plan = match mode {
        InjectMode::Sampled => {
            if model.distribution.total_edits() == 0 {
                return Err(NoiseError::Config(
                    "sampled mode needs a non-empty edit distribution".into(),
                ));
            }
            Some(SampledPlan::new(&model.distribution, &lines, rate))
        }
        InjectMode::Dict => None,
    };
    let mut out = Injection {
        lines: Vec::with_capacity(lines.len()),
        changes: Vec::with_capacity(lines.len()),
    };
    for (idx, line) in lines.iter().enumerate() {
        if rate == 0.0 {
            out.lines.push(line.to_string());
            out.changes.push(Vec::new());
            continue;
        }
        let mut rng = line_rng(seed, idx);
        let mut words = Vec::new();
        let mut changes = Vec::new();
        for (wi, word) in line.split_whitespace().enumerate() {
            let (noisy, edits) = match &plan {
                None => match model.dictionary.get(word) {
                    Some(typos) if rng.random::<f64>() < rate => {
                        let typo = typos[rng.random_range(0..typos.len())].clone();
                        let edit = classify_edit(&TypoPair::new(typo.clone(), word)).ok();
                        (typo, edit.into_iter().collect())
                    }
                    _ => (word.to_string(), Vec::new()),
                },
                Some(plan) => plan.apply(word, &mut rng),
            };
            if noisy != word {
                changes.push(WordChange {
                    word_index: wi,
                    clean: word.to_string(),
                    noisy: noisy.clone(),
                    edits,
                });
            }
            words.push(noisy);
        }
        out.lines.push(if changes.is_empty() {
            line.to_string()
        } else {
            words.join(" ")
        });
        out.changes.push(changes);
    }
    Ok(out)
}
