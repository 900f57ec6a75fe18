//! Builds an aligned noisy/clean corpus from clean text and a typo list.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{inject_noise, InjectMode, NoiseError, NoiseModel, Rejected, TypoPair};
use crate::codec::{CharVocab, UnknownChars};

#[derive(Debug, Clone)]
pub struct OpenTypoOptions {
    pub mode: InjectMode,
    pub rate: f64,
    pub seed: u64,
    /// train / dev / test fractions; must sum to 1.
    pub split: [f64; 3],
    /// Lines with any word outside the lexicon are dropped.
    pub lexicon: Option<HashSet<String>>,
}

impl Default for OpenTypoOptions {
    fn default() -> Self {
        Self {
            mode: InjectMode::Dict,
            rate: 1.0,
            seed: 0,
            split: [0.9, 0.05, 0.05],
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct OpenTypo {
    pub noisy: Vec<String>,
    pub clean: Vec<String>,
    pub splits: Splits,
    pub model: NoiseModel,
    pub rejects: Vec<Rejected>,
}

/// Lowercases, drops characters outside the character table, collapses
/// whitespace and removes empty lines.
pub fn clean_corpus<S: AsRef<str>>(lines: &[S], lexicon: Option<&HashSet<String>>) -> Vec<String> {
    let vocab = CharVocab::new(UnknownChars::Skip);
    lines
        .iter()
        .filter_map(|l| {
            let lowered: String = l
                .as_ref()
                .to_lowercase()
                .chars()
                .map(|c| if c.is_whitespace() { ' ' } else { c })
                .filter(|&c| c == ' ' || vocab.contains(c))
                .collect();
            let line = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
            let keep = !line.is_empty()
                && lexicon.is_none_or(|lex| line.split(' ').all(|w| lex.contains(w)));
            keep.then_some(line)
        })
        .collect()
}

pub fn build_opentypo<S: AsRef<str>>(
    clean_lines: &[S],
    typos: &[TypoPair],
    opts: &OpenTypoOptions,
) -> Result<OpenTypo, NoiseError> {
    let total: f64 = opts.split.iter().sum();
    if (total - 1.0).abs() > 1e-9 || opts.split.iter().any(|f| *f < 0.0) {
        return Err(NoiseError::Config(format!(
            "split fractions {:?} must sum to 1",
            opts.split
        )));
    }
    let (model, rejects) = NoiseModel::from_pairs(typos)?;
    let clean = clean_corpus(clean_lines, opts.lexicon.as_ref());
    let noisy = inject_noise(&clean, &model, opts.mode, opts.rate, opts.seed)?.lines;

    let n = clean.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ SPLIT_SALT));
    let train_end = (opts.split[0] * n as f64).floor() as usize;
    let dev_end = train_end + (opts.split[1] * n as f64).floor() as usize;
    let mut splits = Splits {
        train: order[..train_end].to_vec(),
        dev: order[train_end..dev_end.min(n)].to_vec(),
        test: order[dev_end.min(n)..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.dev.sort_unstable();
    splits.test.sort_unstable();
    Ok(OpenTypo {
        noisy,
        clean,
        splits,
        model,
        rejects,
    })
}

/// Keeps the split shuffle independent of the injection streams.
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl OpenTypo {
    /// Writes `noisy.txt`, `clean.txt`, the three `.idx` manifests, the noise
    /// model and the rejects log.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let lines = |v: &[String]| v.iter().map(|l| format!("{l}\n")).collect::<String>();
        let idx = |v: &[usize]| v.iter().map(|i| format!("{i}\n")).collect::<String>();
        fs::write(dir.join("noisy.txt"), lines(&self.noisy))?;
        fs::write(dir.join("clean.txt"), lines(&self.clean))?;
        fs::write(dir.join("train.idx"), idx(&self.splits.train))?;
        fs::write(dir.join("dev.idx"), idx(&self.splits.dev))?;
        fs::write(dir.join("test.idx"), idx(&self.splits.test))?;
        fs::write(dir.join("noise_model.tsv"), self.model.to_text())?;
        let rejects: String = self
            .rejects
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.pair.typo, r.pair.correction, r.reason))
            .collect();
        fs::write(dir.join("rejects.tsv"), rejects)
    }
}
