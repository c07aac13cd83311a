//! Character inventory, top-word vocabulary and sentence encoding.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK_CHAR: u32 = 1;
pub const OOV_CHAR: u32 = 2;
pub const MASK_WORD: u32 = 3;
const RESERVED: [&str; 4] = ["<PAD>", "<MASK_C>", "<OOV>", "<MASK_W>"];

/// Rendering of reserved indices when masked text is written out.
pub const MASK_CHAR_GLYPH: char = '\u{25A1}';
pub const MASK_WORD_GLYPH: char = '\u{25A0}';
pub const OOV_GLYPH: char = '\u{FFFD}';

/// NFC-normalise and split on Unicode whitespace.
pub fn tokenize(line: &str) -> Vec<String> {
    let nfc: String = line.nfc().collect();
    nfc.split_whitespace().map(str::to_string).collect()
}

/// Codepoint inventory with four reserved leading indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharInventory {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl CharInventory {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().filter(|c| !c.is_whitespace()).collect();
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + RESERVED.len()) as u32))
            .collect();
        Self { chars, index }
    }

    /// Every codepoint occurring in `lines`, sorted by codepoint.
    pub fn from_corpus<S: AsRef<str>>(lines: impl IntoIterator<Item = S>) -> Self {
        let mut set = BTreeSet::new();
        for l in lines {
            for tok in tokenize(l.as_ref()) {
                set.extend(tok.chars());
            }
        }
        Self::from_chars(set)
    }

    /// `len_C`: reserved entries plus corpus characters.
    pub fn len(&self) -> usize {
        RESERVED.len() + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(OOV_CHAR)
    }

    pub fn char_of(&self, idx: u32) -> Option<char> {
        match idx {
            PAD => None,
            MASK_CHAR => Some(MASK_CHAR_GLYPH),
            OOV_CHAR => Some(OOV_GLYPH),
            MASK_WORD => Some(MASK_WORD_GLYPH),
            i => self.chars.get(i as usize - RESERVED.len()).copied(),
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for r in RESERVED {
            s.push_str(r);
            s.push('\n');
        }
        for c in &self.chars {
            s.push(*c);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("inventory file must start with the 4 reserved entries".into()));
        }
        let mut chars = Vec::new();
        for (n, l) in lines[RESERVED.len()..].iter().enumerate() {
            let mut it = l.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::Data(format!(
                        "inventory line {} is not a single character",
                        n + RESERVED.len() + 1
                    )))
                }
            }
        }
        let index: HashMap<char, u32> = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + RESERVED.len()) as u32))
            .collect();
        if index.len() != chars.len() {
            return Err(Error::Data("duplicate character in inventory".into()));
        }
        Ok(Self { chars, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Frequency-ranked top words; class `len()` is `UNK`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<(String, u64)>,
    index: HashMap<String, u32>,
    coverage: f64,
}

impl Vocab {
    /// Builds a vocabulary from words already in rank order.
    pub fn from_ranked(words: Vec<(String, u64)>, coverage: f64) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, (w, _)) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        if words.windows(2).any(|p| p[0].1 < p[1].1) {
            return Err(Error::Data("vocabulary frequencies must be non-increasing".into()));
        }
        Ok(Self {
            words,
            index,
            coverage,
        })
    }

    /// Number of top words `T`.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        self.words.len() as u32
    }

    /// `len_P = T + 1`.
    pub fn num_classes(&self) -> usize {
        self.words.len() + 1
    }

    pub fn coverage_target(&self) -> f64 {
        self.coverage
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Class id of `word`, `UNK` for rare words.
    pub fn class_of(&self, word: &str) -> u32 {
        self.get(word).unwrap_or_else(|| self.unk_id())
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|(w, _)| w.as_str())
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.words
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("#coverage={}\n", self.coverage);
        for (w, f) in &self.words {
            let _ = writeln!(s, "{w}\t{f}");
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty vocabulary file".into()))?;
        let coverage: f64 = header
            .strip_prefix("#coverage=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Data(format!("bad vocabulary header {header:?}")))?;
        let mut words = Vec::new();
        for (n, l) in lines.enumerate() {
            let (w, f) = l
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("vocabulary line {} lacks a tab", n + 2)))?;
            let f: u64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("vocabulary line {} frequency", n + 2)))?;
            words.push((w.to_string(), f));
        }
        Self::from_ranked(words, coverage)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }
}

/// Token counts sorted by frequency (descending) then word (ascending).
pub fn ranked_counts<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Vec<(String, u64)> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_ref().to_string()).or_default() += 1;
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Smallest frequency-ranked prefix whose token count reaches `coverage` of the corpus.
pub fn build_vocab<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>, coverage: f64) -> Result<Vocab> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid(format!("coverage {coverage} outside (0, 1]")));
    }
    let ranked = ranked_counts(tokens);
    let total: u64 = ranked.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return Err(Error::Empty("corpus has no tokens".into()));
    }
    let need = coverage * total as f64;
    let mut cum = 0u64;
    let mut keep = ranked.len();
    for (i, (_, c)) in ranked.iter().enumerate() {
        cum += c;
        if cum as f64 >= need {
            keep = i + 1;
            break;
        }
    }
    let mut ranked = ranked;
    ranked.truncate(keep);
    Vocab::from_ranked(ranked, coverage)
}

/// Fraction of corpus tokens that are top words.
pub fn coverage_of<S: AsRef<str>>(vocab: &Vocab, tokens: impl IntoIterator<Item = S>) -> Result<f64> {
    let (mut hit, mut total) = (0u64, 0u64);
    for t in tokens {
        total += 1;
        if vocab.contains(t.as_ref()) {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("corpus has no tokens".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Limits {
    pub max_word_len: usize,
    pub max_sent_len: usize,
}

/// Fixed-length character index sequence of one word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedWord {
    pub chars: Vec<u32>,
    pub truncated: bool,
}

impl EncodedWord {
    /// The reserved one-character mask word.
    pub fn mask_word(max_word_len: usize) -> Self {
        let mut chars = vec![PAD; max_word_len.max(1)];
        chars[0] = MASK_WORD;
        Self {
            chars,
            truncated: false,
        }
    }

    /// Number of non-padding characters.
    pub fn len(&self) -> usize {
        self.chars.iter().position(|&c| c == PAD).unwrap_or(self.chars.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The characters without tail padding.
    pub fn real(&self) -> &[u32] {
        &self.chars[..self.len()]
    }

    pub fn render(&self, inv: &CharInventory) -> String {
        self.real().iter().filter_map(|&i| inv.char_of(i)).collect()
    }
}

pub fn encode_word(word: &str, inv: &CharInventory, max_word_len: usize) -> Result<EncodedWord> {
    if word.is_empty() {
        return Err(Error::Empty("cannot encode an empty word".into()));
    }
    if max_word_len == 0 {
        return Err(Error::invalid("max_word_len must be positive"));
    }
    let mut chars = vec![PAD; max_word_len];
    let mut truncated = false;
    for (i, c) in word.chars().enumerate() {
        if i >= max_word_len {
            truncated = true;
            break;
        }
        chars[i] = inv.index_of(c);
    }
    Ok(EncodedWord { chars, truncated })
}

/// Encoded sentence: inputs, target classes and the original input surfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub words: Vec<EncodedWord>,
    pub targets: Vec<u32>,
    pub surfaces: Vec<String>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Encodes `inputs` with targets taken from `targets` (same length), split into
/// chunks of at most `max_sent_len` words.
pub fn encode_tokens(
    inputs: &[String],
    targets: &[String],
    vocab: &Vocab,
    inv: &CharInventory,
    limits: Limits,
) -> Result<Vec<EncodedSentence>> {
    if inputs.is_empty() {
        return Err(Error::Empty("sentence has no words".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Data(format!(
            "input has {} words but target has {}",
            inputs.len(),
            targets.len()
        )));
    }
    if limits.max_sent_len == 0 {
        return Err(Error::invalid("max_sent_len must be positive"));
    }
    let mut out = Vec::new();
    for (ic, tc) in inputs.chunks(limits.max_sent_len).zip(targets.chunks(limits.max_sent_len)) {
        let words = ic
            .iter()
            .map(|w| encode_word(w, inv, limits.max_word_len))
            .collect::<Result<Vec<_>>>()?;
        out.push(EncodedSentence {
            words,
            targets: tc.iter().map(|w| vocab.class_of(w)).collect(),
            surfaces: ic.to_vec(),
        });
    }
    Ok(out)
}

pub fn encode_sentence(
    sentence: &str,
    vocab: &Vocab,
    inv: &CharInventory,
    limits: Limits,
) -> Result<Vec<EncodedSentence>> {
    let toks = tokenize(sentence);
    encode_tokens(&toks, &toks, vocab, inv, limits)
}
