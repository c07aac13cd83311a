//! Synthetic spelling errors with word-aligned output.
//!
//! Sampling procedure for one word, in RNG draw order:
//!
//! 1. `u ~ U[0,1)`; the word is left alone unless `u < p_word_err`.
//! 2. An error family is drawn from the mixture weights
//!    (substitute, insert, delete, compound).
//! 3. A position is drawn uniformly: `0..len` for substitute/delete/compound,
//!    `0..=len` for insert.
//! 4. The replacement is drawn from the family's candidate list.
//!
//! Deleting the only character of a word, or a compound replacement that
//! would empty it, is re-rolled as a substitution at the same position.
//! Every applied error changes the word.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textpipe::tokenize;

/// Weighted replacement strings per source character.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfusionSet {
    map: BTreeMap<char, Vec<(String, f64)>>,
}

impl ConfusionSet {
    pub fn new(map: BTreeMap<char, Vec<(String, f64)>>) -> Result<Self> {
        for (c, alts) in &map {
            if alts.iter().any(|(_, w)| !(*w > 0.0) || !w.is_finite()) {
                return Err(Error::invalid(format!("non-positive confusion weight for {c:?}")));
            }
        }
        Ok(Self { map })
    }

    /// Parses `{ "char": [["replacement", weight], ...] }`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<(String, f64)>> = serde_json::from_str(text)?;
        let mut map = BTreeMap::new();
        for (k, v) in raw {
            let mut it = k.chars();
            let c = match (it.next(), it.next()) {
                (Some(c), None) => c,
                _ => return Err(Error::Data(format!("confusion key {k:?} is not one character"))),
            };
            map.insert(c, v);
        }
        Self::new(map)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<String, &Vec<(String, f64)>> =
            self.map.iter().map(|(c, v)| (c.to_string(), v)).collect();
        serde_json::to_string(&raw).expect("confusion set serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Candidates for `c` whose replacement differs from `c`, filtered by `keep`.
    fn candidates(&self, c: char, keep: impl Fn(&str) -> bool) -> Vec<(&str, f64)> {
        self.map
            .get(&c)
            .map(|alts| {
                alts.iter()
                    .filter(|(r, _)| keep(r) && r.chars().ne(std::iter::once(c)))
                    .map(|(r, w)| (r.as_str(), *w))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn sources(&self) -> impl Iterator<Item = &char> {
        self.map.keys()
    }
}

/// Keyboard adjacency used for insertions and substitution fallback.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyboardMap {
    pub neighbors: BTreeMap<char, Vec<char>>,
}

impl KeyboardMap {
    /// Lower-case QWERTY letter adjacency.
    pub fn qwerty() -> Self {
        let rows = ["qwertyuiop", "asdfghjkl", "zxcvbnm"];
        let grid: Vec<Vec<char>> = rows.iter().map(|r| r.chars().collect()).collect();
        let mut neighbors = BTreeMap::new();
        for (ri, row) in grid.iter().enumerate() {
            for (ci, &c) in row.iter().enumerate() {
                let mut n = Vec::new();
                for dr in [-1isize, 0, 1] {
                    let r = ri as isize + dr;
                    if r < 0 || r as usize >= grid.len() {
                        continue;
                    }
                    for dc in [-1isize, 0, 1] {
                        let cc = ci as isize + dc;
                        if (dr, dc) == (0, 0) || cc < 0 {
                            continue;
                        }
                        if let Some(&k) = grid[r as usize].get(cc as usize) {
                            n.push(k);
                        }
                    }
                }
                neighbors.insert(c, n);
            }
        }
        Self { neighbors }
    }

    fn alphabet(&self) -> Vec<char> {
        let mut a: Vec<char> = self.neighbors.keys().copied().collect();
        for v in self.neighbors.values() {
            a.extend(v.iter().copied());
        }
        a.sort_unstable();
        a.dedup();
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorOp {
    Substitute,
    Insert,
    Delete,
    Compound,
}

impl ErrorOp {
    pub const ALL: [ErrorOp; 4] = [ErrorOp::Substitute, ErrorOp::Insert, ErrorOp::Delete, ErrorOp::Compound];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorConfig {
    pub p_word_err: f64,
    /// Weights for substitute, insert, delete, compound.
    pub mixture: [f64; 4],
    pub keyboard: KeyboardMap,
    pub seed: u64,
}

impl Default for ErrorConfig {
    fn default() -> Self {
        Self {
            p_word_err: 0.3,
            mixture: [0.4, 0.2, 0.2, 0.2],
            keyboard: KeyboardMap::qwerty(),
            seed: 0,
        }
    }
}

impl ErrorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_word_err) {
            return Err(Error::invalid(format!("p_word_err {} outside [0,1]", self.p_word_err)));
        }
        if self.mixture.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::invalid("mixture weights must lie in [0,1]"));
        }
        let s: f64 = self.mixture.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {s}, not 1")));
        }
        Ok(())
    }
}

/// Result of corrupting a word: the new surface and the family applied, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub word: String,
    pub op: Option<ErrorOp>,
}

fn pick_weighted<'a, R: Rng + ?Sized>(cands: &[(&'a str, f64)], rng: &mut R) -> &'a str {
    let dist = WeightedIndex::new(cands.iter().map(|c| c.1)).expect("positive weights");
    cands[dist.sample(rng)].0
}

/// A keyboard neighbour of `c`, or any other keyboard character.
fn keyboard_sub<R: Rng + ?Sized>(c: char, cfg: &ErrorConfig, rng: &mut R) -> Option<char> {
    let near = cfg.keyboard.neighbors.get(&c).filter(|n| !n.is_empty());
    match near {
        Some(n) => {
            let n: Vec<char> = n.iter().copied().filter(|&k| k != c).collect();
            if n.is_empty() {
                None
            } else {
                Some(n[rng.gen_range(0..n.len())])
            }
        }
        None => {
            let a: Vec<char> = cfg.keyboard.alphabet().into_iter().filter(|&k| k != c).collect();
            if a.is_empty() {
                None
            } else {
                Some(a[rng.gen_range(0..a.len())])
            }
        }
    }
}

fn substitute<R: Rng + ?Sized>(
    chars: &[char],
    pos: usize,
    cfg: &ErrorConfig,
    confusion: &ConfusionSet,
    rng: &mut R,
) -> Option<String> {
    let c = chars[pos];
    let cands = confusion.candidates(c, |r| r.chars().count() == 1);
    let rep = if cands.is_empty() {
        keyboard_sub(c, cfg, rng)?.to_string()
    } else {
        pick_weighted(&cands, rng).to_string()
    };
    Some(splice(chars, pos, 1, &rep))
}

fn splice(chars: &[char], pos: usize, remove: usize, insert: &str) -> String {
    let mut s: String = chars[..pos].iter().collect();
    s.push_str(insert);
    s.extend(&chars[pos + remove..]);
    s
}

/// Applies at most one error to `word`.
pub fn corrupt_word<R: Rng + ?Sized>(
    word: &str,
    cfg: &ErrorConfig,
    confusion: &ConfusionSet,
    rng: &mut R,
) -> Result<Corruption> {
    if word.is_empty() {
        return Err(Error::Empty("cannot corrupt an empty word".into()));
    }
    let unchanged = Corruption {
        word: word.to_string(),
        op: None,
    };
    if rng.gen::<f64>() >= cfg.p_word_err {
        return Ok(unchanged);
    }
    let family = WeightedIndex::new(cfg.mixture)
        .map_err(|e| Error::invalid(format!("mixture weights: {e}")))?;
    let op = ErrorOp::ALL[family.sample(rng)];
    let chars: Vec<char> = word.chars().collect();
    let len = chars.len();
    let applied = match op {
        ErrorOp::Insert => {
            let pos = rng.gen_range(0..=len);
            let anchor = chars[pos.min(len - 1)];
            // no neighbour available: a doubled key press
            let ins = keyboard_sub(anchor, cfg, rng).unwrap_or(anchor);
            Some((splice(&chars, pos, 0, &ins.to_string()), ErrorOp::Insert))
        }
        ErrorOp::Delete => {
            let pos = rng.gen_range(0..len);
            if len == 1 {
                substitute(&chars, pos, cfg, confusion, rng).map(|w| (w, ErrorOp::Substitute))
            } else {
                Some((splice(&chars, pos, 1, ""), ErrorOp::Delete))
            }
        }
        ErrorOp::Substitute => {
            let pos = rng.gen_range(0..len);
            substitute(&chars, pos, cfg, confusion, rng).map(|w| (w, ErrorOp::Substitute))
        }
        ErrorOp::Compound => {
            let pos = rng.gen_range(0..len);
            let single = len == 1;
            let cands = confusion.candidates(chars[pos], |r| r.chars().count() != 1 && !(single && r.is_empty()));
            if cands.is_empty() {
                substitute(&chars, pos, cfg, confusion, rng).map(|w| (w, ErrorOp::Substitute))
            } else {
                let rep = pick_weighted(&cands, rng);
                Some((splice(&chars, pos, 1, rep), ErrorOp::Compound))
            }
        }
    };
    Ok(match applied {
        Some((w, op)) if w != word && !w.is_empty() => Corruption { word: w, op: Some(op) },
        _ => unchanged,
    })
}

/// Word-aligned (noisy, correct) token lists plus the ops applied.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSentence {
    pub noisy: Vec<String>,
    pub correct: Vec<String>,
    pub ops: Vec<Option<ErrorOp>>,
}

impl CorruptedSentence {
    pub fn noisy_text(&self) -> String {
        self.noisy.join(" ")
    }

    pub fn correct_text(&self) -> String {
        self.correct.join(" ")
    }
}

pub fn corrupt_sentence<R: Rng + ?Sized>(
    sentence: &str,
    cfg: &ErrorConfig,
    confusion: &ConfusionSet,
    rng: &mut R,
) -> Result<CorruptedSentence> {
    let correct = tokenize(sentence);
    if correct.is_empty() {
        return Err(Error::Empty("sentence has no words".into()));
    }
    let mut noisy = Vec::with_capacity(correct.len());
    let mut ops = Vec::with_capacity(correct.len());
    for w in &correct {
        let c = corrupt_word(w, cfg, confusion, rng)?;
        noisy.push(c.word);
        ops.push(c.op);
    }
    Ok(CorruptedSentence { noisy, correct, ops })
}

/// RNG for line `index` of a corpus, independent of processing order.
pub fn line_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 finaliser over (seed, index)
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub lines: u64,
    pub skipped_lines: u64,
    pub words_seen: u64,
    pub words_corrupted: u64,
    pub per_op: BTreeMap<ErrorOp, u64>,
}

impl CorpusStats {
    pub fn corrupted_fraction(&self) -> f64 {
        if self.words_seen == 0 {
            0.0
        } else {
            self.words_corrupted as f64 / self.words_seen as f64
        }
    }
}

/// Corrupts lines from `reader`, writing `noisy<TAB>correct` rows to `writer`.
pub fn corrupt_lines<B: BufRead, W: Write>(
    reader: B,
    mut writer: W,
    cfg: &ErrorConfig,
    confusion: &ConfusionSet,
) -> Result<CorpusStats> {
    cfg.validate()?;
    let mut stats = CorpusStats::default();
    for (idx, line) in reader.split(b'\n').enumerate() {
        let bytes = line?;
        let Ok(text) = String::from_utf8(bytes) else {
            stats.skipped_lines += 1;
            continue;
        };
        if tokenize(&text).is_empty() {
            stats.skipped_lines += 1;
            continue;
        }
        let mut rng = line_rng(cfg.seed, idx as u64);
        let s = corrupt_sentence(&text, cfg, confusion, &mut rng)?;
        stats.lines += 1;
        stats.words_seen += s.correct.len() as u64;
        for op in s.ops.iter().flatten() {
            stats.words_corrupted += 1;
            *stats.per_op.entry(*op).or_default() += 1;
        }
        writeln!(writer, "{}\t{}", s.noisy_text(), s.correct_text())?;
    }
    writer.flush()?;
    Ok(stats)
}

/// File-to-file [`corrupt_lines`]; the output appears only on success.
pub fn corrupt_corpus(
    input: &Path,
    output: &Path,
    cfg: &ErrorConfig,
    confusion: &ConfusionSet,
) -> Result<CorpusStats> {
    let reader = BufReader::new(std::fs::File::open(input)?);
    crate::cli::write_atomic_with(output, |w| corrupt_lines(reader, w, cfg, confusion))
}

/// Per-op tallies keyed by name, for reporting.
pub fn op_counts(stats: &CorpusStats) -> HashMap<&'static str, u64> {
    ErrorOp::ALL
        .iter()
        .map(|op| {
            let name = match op {
                ErrorOp::Substitute => "substitute",
                ErrorOp::Insert => "insert",
                ErrorOp::Delete => "delete",
                ErrorOp::Compound => "compound",
            };
            (name, stats.per_op.get(op).copied().unwrap_or(0))
        })
        .collect()
}
