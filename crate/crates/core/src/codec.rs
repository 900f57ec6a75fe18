//! Character and word vocabularies, fixed-window encoding and sentence windowing.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("character {0:?} is not in the character table")]
    UnknownChar(char),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary capacity {0} leaves no room beyond the reserved tokens")]
    CapacityTooSmall(usize),
    #[error("window length must be at least 1")]
    EmptyWindow,
    #[error("noisy and clean corpora are misaligned: {0}")]
    Pairing(String),
    #[error("malformed vocabulary file: {0}")]
    MalformedVocab(String),
}

/// The 69-entry character table; the position in this array is the index.
const CHAR_TABLE: [&str; 69] = [
    "\t", "\n", "\r", " ", "!", "\"", "#", "$", "%", "&", "'", "(", ")", "*", "+", ",", ".", "/",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ":", ";", "=", ">", "?", "@", "[", "]", "_",
    "`", "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r",
    "s", "t", "u", "v", "w", "x", "y", "z", "{", "|", "}", "<GO>", "<PAD>",
];

/// How characters outside the table are treated when encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownChars {
    #[default]
    Reject,
    Skip,
}

/// Bijective character ↔ index table.
///
/// The table has no dedicated end-of-sequence symbol, so the newline entry
/// (index 1) doubles as `<EOS>` in encoded windows.
#[derive(Debug, Clone)]
pub struct CharVocab {
    index: HashMap<char, usize>,
    unknown: UnknownChars,
}

impl Default for CharVocab {
    fn default() -> Self {
        Self::new(UnknownChars::Reject)
    }
}

impl CharVocab {
    pub const SIZE: usize = 69;
    pub const EOS: usize = 1;
    pub const GO: usize = 67;
    pub const PAD: usize = 68;

    pub fn new(unknown: UnknownChars) -> Self {
        let index = CHAR_TABLE[..Self::GO]
            .iter()
            .enumerate()
            .map(|(i, s)| (s.chars().next().expect("table entry"), i))
            .collect();
        Self { index, unknown }
    }

    pub fn len(&self) -> usize {
        Self::SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn contains(&self, ch: char) -> bool {
        self.index.contains_key(&ch)
    }

    /// Table entry for an index (`"<GO>"`, `"<PAD>"` or a single character).
    pub fn symbol(&self, index: usize) -> Option<&'static str> {
        CHAR_TABLE.get(index).copied()
    }

    /// `[<PAD>…, <EOS>, reversed(text)]`, exactly `window` long. When the text
    /// does not fit, its most recent characters are kept.
    pub fn encode(&self, text: &str, window: usize) -> Result<Vec<usize>, CodecError> {
        if window == 0 {
            return Err(CodecError::EmptyWindow);
        }
        let mut reversed = Vec::with_capacity(text.len());
        for ch in text.chars().rev().flat_map(char::to_lowercase) {
            match (self.index_of(ch), self.unknown) {
                (Some(i), _) => reversed.push(i),
                (None, UnknownChars::Skip) => {}
                (None, UnknownChars::Reject) => return Err(CodecError::UnknownChar(ch)),
            }
        }
        reversed.truncate(window - 1);
        let mut seq = vec![Self::PAD; window - 1 - reversed.len()];
        seq.push(Self::EOS);
        seq.extend(reversed);
        Ok(seq)
    }

    /// Inverse of [`CharVocab::encode`] for text that fit in the window.
    pub fn decode(&self, seq: &[usize]) -> String {
        let body = match seq.iter().position(|&i| i == Self::EOS) {
            Some(p) => &seq[p + 1..],
            None => seq,
        };
        body.iter()
            .rev()
            .filter(|&&i| i != Self::PAD && i != Self::GO)
            .filter_map(|&i| self.symbol(i))
            .collect()
    }
}

/// Word ↔ index map with four reserved tokens at the lowest indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    pub const PAD: usize = 0;
    pub const GO: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    pub const RESERVED: [&'static str; 4] = ["<PAD>", "<GO>", "<EOS>", "<UNK>"];
    pub const DEFAULT_CAPACITY: usize = 50_000;

    /// Vocabulary from an explicit word list (reserved tokens are prepended).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words: all, index }
    }

    /// Top `capacity − 4` words by frequency, ties broken lexicographically.
    pub fn build<I, S>(lines: I, capacity: usize) -> Result<Self, CodecError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if capacity <= Self::RESERVED.len() {
            return Err(CodecError::CapacityTooSmall(capacity));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for w in line.as_ref().split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(CodecError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(capacity - Self::RESERVED.len());
        Ok(Self::from_words(ranked.into_iter().map(|(w, _)| w)))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<UNK>", String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_reserved(id: usize) -> bool {
        id < Self::RESERVED.len()
    }

    /// One token per line; the line number is the index.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for w in &self.words {
            let _ = writeln!(out, "{w}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CodecError> {
        let words: Vec<&str> = text.lines().collect();
        if words.len() < Self::RESERVED.len() || words[..4] != Self::RESERVED {
            return Err(CodecError::MalformedVocab(
                "reserved tokens missing from the first four lines".into(),
            ));
        }
        let vocab = Self::from_words(words[4..].iter().copied());
        if vocab.len() != words.len() {
            return Err(CodecError::MalformedVocab("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    /// `(decoder_input, target)` for one window of words.
    ///
    /// `target = words + <EOS>` and `decoder_input = <GO> + words`, both padded
    /// to `window`. A window filled completely by words has no room for
    /// `<EOS>`: the last word takes its slot. Longer inputs keep their first
    /// `window` words; splitting is [`window_sentences`]' job.
    pub fn encode_words(
        &self,
        sentence: &str,
        window: usize,
    ) -> Result<(Vec<usize>, Vec<usize>), CodecError> {
        if window == 0 {
            return Err(CodecError::EmptyWindow);
        }
        let ids: Vec<usize> = sentence
            .split_whitespace()
            .take(window)
            .map(|w| self.id(&w.to_lowercase()))
            .collect();
        let mut target = ids.clone();
        if target.len() < window {
            target.push(Self::EOS);
        }
        target.resize(window, Self::PAD);
        let mut input = vec![Self::GO];
        input.extend(&ids[..ids.len().min(window - 1)]);
        input.resize(window, Self::PAD);
        Ok((input, target))
    }

    /// Words of a decoded id sequence, stopping at `<EOS>` and skipping `<PAD>`.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != Self::EOS)
            .filter(|&&i| i != Self::PAD)
            .map(|&i| self.word(i).to_string())
            .collect()
    }
}

/// One aligned training window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPair {
    pub noisy: String,
    pub clean: String,
}

/// Splits aligned noisy/clean lines into windows of `word_window` words.
///
/// Sentences longer than the window are split into consecutive windows;
/// the final partial window is kept (it is padded when encoded). Empty
/// lines produce no windows. Only lines spanning several windows need equal
/// noisy and clean word counts.
pub fn window_sentences<N, C>(
    noisy: N,
    clean: C,
    word_window: usize,
) -> Result<Vec<TextPair>, CodecError>
where
    N: IntoIterator,
    N::Item: AsRef<str>,
    C: IntoIterator,
    C::Item: AsRef<str>,
{
    if word_window == 0 {
        return Err(CodecError::EmptyWindow);
    }
    let noisy: Vec<N::Item> = noisy.into_iter().collect();
    let clean: Vec<C::Item> = clean.into_iter().collect();
    if noisy.len() != clean.len() {
        return Err(CodecError::Pairing(format!(
            "{} noisy lines vs {} clean lines",
            noisy.len(),
            clean.len()
        )));
    }
    let mut out = Vec::new();
    for (line_no, (n, c)) in noisy.iter().zip(&clean).enumerate() {
        let nw: Vec<&str> = n.as_ref().split_whitespace().collect();
        let cw: Vec<&str> = c.as_ref().split_whitespace().collect();
        // A line that fits one window needs no word alignment: noise may
        // have split or swallowed a word.
        if !cw.is_empty() && cw.len() <= word_window {
            out.push(TextPair {
                noisy: nw.join(" ").to_lowercase(),
                clean: cw.join(" ").to_lowercase(),
            });
            continue;
        }
        if nw.len() != cw.len() {
            return Err(CodecError::Pairing(format!(
                "line {}: {} noisy words vs {} clean words",
                line_no + 1,
                nw.len(),
                cw.len()
            )));
        }
        for (nc, cc) in nw.chunks(word_window).zip(cw.chunks(word_window)) {
            out.push(TextPair {
                noisy: nc.join(" ").to_lowercase(),
                clean: cc.join(" ").to_lowercase(),
            });
        }
    }
    Ok(out)
}

/// Fully encoded training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPair {
    pub noisy_chars: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub target: Vec<usize>,
}

impl CorpusPair {
    pub fn encode(
        pair: &TextPair,
        chars: &CharVocab,
        words: &WordVocab,
        char_window: usize,
        word_window: usize,
    ) -> Result<Self, CodecError> {
        let noisy_chars = chars.encode(&pair.noisy, char_window)?;
        let (decoder_input, target) = words.encode_words(&pair.clean, word_window)?;
        Ok(Self {
            noisy_chars,
            decoder_input,
            target,
        })
    }
}
