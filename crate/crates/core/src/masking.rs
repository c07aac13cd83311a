//! Word, character and hybrid masking for pretraining.
//!
//! Counts use round-half-up followed by clamping, so a five word sentence
//! under the hybrid preset gets one masked word and two character-masked
//! words, and a character-masked word always keeps at least one character.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textpipe::{CharInventory, EncodedSentence, EncodedWord, MASK_CHAR, MASK_WORD_GLYPH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScheme {
    Word,
    Char,
    Hybrid,
}

impl std::str::FromStr for MaskScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Self::Word),
            "char" => Ok(Self::Char),
            "hybrid" => Ok(Self::Hybrid),
            _ => Err(Error::invalid(format!("unknown mask scheme {s:?} (word|char|hybrid)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Fraction of words replaced by the mask word.
    pub p_word: f64,
    /// Fraction of the remaining words chosen for character masking.
    pub p_cword: f64,
    /// Fraction of characters masked inside a chosen word.
    pub p_char: f64,
    pub scheme: MaskScheme,
}

impl MaskConfig {
    pub fn preset(scheme: MaskScheme) -> Self {
        match scheme {
            MaskScheme::Word => Self {
                p_word: 0.15,
                p_cword: 0.0,
                p_char: 0.0,
                scheme,
            },
            MaskScheme::Char => Self {
                p_word: 0.0,
                p_cword: 0.5,
                p_char: 0.3,
                scheme,
            },
            MaskScheme::Hybrid => Self {
                p_word: 0.15,
                p_cword: 0.4,
                p_char: 0.25,
                scheme,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_word", self.p_word), ("p_cword", self.p_cword), ("p_char", self.p_char)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Positions chosen for masking in one sentence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub word_masked: BTreeSet<usize>,
    /// Word position → masked character positions.
    pub char_masked: BTreeMap<usize, BTreeSet<usize>>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.word_masked.is_empty() && self.char_masked.is_empty()
    }

    pub fn n_word(&self) -> usize {
        self.word_masked.len()
    }

    pub fn n_char_words(&self) -> usize {
        self.char_masked.len()
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Number of masked words for a sentence of `n` words; always below `n`.
pub fn word_mask_count(n: usize, p_word: f64) -> usize {
    round_half_up(p_word * n as f64).min(n.saturating_sub(1))
}

/// Characters to mask in a word of length `m ≥ 2`.
pub fn char_mask_count(m: usize, p_char: f64) -> usize {
    ((p_char * m as f64).floor() as usize).max(1).clamp(1, m - 1)
}

pub fn plan_word_masking<R: Rng + ?Sized>(n: usize, p_word: f64, rng: &mut R) -> BTreeSet<usize> {
    let k = word_mask_count(n, p_word);
    sample(rng, n, k).into_iter().collect()
}

/// Hybrid plan over a sentence given its word lengths (in characters).
pub fn plan_hybrid_masking<R: Rng + ?Sized>(
    word_lengths: &[usize],
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    cfg.validate()?;
    let n = word_lengths.len();
    if n == 0 {
        return Ok(MaskPlan::default());
    }
    let word_masked = plan_word_masking(n, cfg.p_word, rng);
    let n_w = word_masked.len();
    let remaining = n - n_w;
    let upper = if n_w > 0 { remaining } else { n - 1 };
    let eligible: Vec<usize> = (0..n)
        .filter(|i| !word_masked.contains(i) && word_lengths[*i] >= 2)
        .collect();
    let n_c = round_half_up(cfg.p_cword * remaining as f64)
        .min(upper)
        .min(eligible.len());
    let mut char_masked = BTreeMap::new();
    for pick in sample(rng, eligible.len(), n_c).into_vec() {
        let w = eligible[pick];
        let m = word_lengths[w];
        let m_c = char_mask_count(m, cfg.p_char);
        char_masked.insert(w, sample(rng, m, m_c).into_iter().collect());
    }
    Ok(MaskPlan {
        word_masked,
        char_masked,
    })
}

/// Character masking: no word masking, half the words at 30% of their characters.
pub fn plan_char_masking<R: Rng + ?Sized>(word_lengths: &[usize], rng: &mut R) -> Result<MaskPlan> {
    plan_hybrid_masking(word_lengths, &MaskConfig::preset(MaskScheme::Char), rng)
}

/// Dispatches on `cfg.scheme`.
pub fn plan<R: Rng + ?Sized>(word_lengths: &[usize], cfg: &MaskConfig, rng: &mut R) -> Result<MaskPlan> {
    match cfg.scheme {
        MaskScheme::Word => Ok(MaskPlan {
            word_masked: plan_word_masking(word_lengths.len(), cfg.p_word, rng),
            char_masked: BTreeMap::new(),
        }),
        MaskScheme::Char | MaskScheme::Hybrid => plan_hybrid_masking(word_lengths, cfg, rng),
    }
}

/// Applies `plan`; targets stay the original classes at every position.
pub fn apply_plan(sentence: &EncodedSentence, plan: &MaskPlan) -> Result<EncodedSentence> {
    let n = sentence.len();
    let mut out = sentence.clone();
    for &w in &plan.word_masked {
        if w >= n {
            return Err(Error::OutOfRange(format!("masked word {w} in a {n}-word sentence")));
        }
        let width = out.words[w].chars.len();
        out.words[w] = EncodedWord::mask_word(width);
    }
    for (&w, chars) in &plan.char_masked {
        if w >= n {
            return Err(Error::OutOfRange(format!("char-masked word {w} in a {n}-word sentence")));
        }
        if plan.word_masked.contains(&w) {
            return Err(Error::invalid(format!("word {w} is both word- and char-masked")));
        }
        let len = out.words[w].len();
        for &c in chars {
            if c >= len {
                return Err(Error::OutOfRange(format!("char {c} of a {len}-char word")));
            }
            out.words[w].chars[c] = MASK_CHAR;
        }
    }
    Ok(out)
}

/// Renders a (possibly masked) sentence as text for the pretraining dataset.
pub fn render_masked(sentence: &EncodedSentence, inv: &CharInventory) -> String {
    sentence
        .words
        .iter()
        .map(|w| w.render(inv))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn is_mask_word(rendered: &str) -> bool {
    rendered.chars().eq(std::iter::once(MASK_WORD_GLYPH))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textpipe::{encode_sentence, Limits, Vocab, MASK_WORD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hybrid() -> MaskConfig {
        MaskConfig::preset(MaskScheme::Hybrid)
    }

    #[test]
    fn word_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(plan_word_masking(20, 0.15, &mut rng).len(), 3);
        assert_eq!(plan_word_masking(5, 0.15, &mut rng).len(), 1);
        assert_eq!(plan_word_masking(1, 0.15, &mut rng).len(), 0);
    }

    #[test]
    fn five_word_hybrid_layout() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = plan_hybrid_masking(&[4, 5, 3, 6, 7], &hybrid(), &mut rng).unwrap();
            assert_eq!(p.n_word(), 1);
            assert_eq!(p.n_char_words(), 2);
        }
    }

    #[test]
    fn char_counts() {
        assert_eq!(char_mask_count(8, 0.25), 2);
        assert_eq!(char_mask_count(2, 0.25), 1);
        assert_eq!(char_mask_count(6, 0.3), 1);
        assert_eq!(char_mask_count(2, 1.0), 1);
    }

    #[test]
    fn char_scheme_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = plan_char_masking(&[6; 10], &mut rng).unwrap();
        assert!(p.word_masked.is_empty());
        assert_eq!(p.n_char_words(), 5);
        assert!(p.char_masked.values().all(|c| c.len() == 1));
        let p = plan_char_masking(&[1], &mut rng).unwrap();
        assert!(p.is_empty());
    }

    fn five_words() -> (EncodedSentence, CharInventory) {
        let text = "abcd bcde cdef defg efgh";
        let inv = CharInventory::from_corpus([text]);
        let vocab = Vocab::from_ranked(vec![("abcd".into(), 3), ("cdef".into(), 2)], 0.95).unwrap();
        let lim = Limits {
            max_word_len: 8,
            max_sent_len: 16,
        };
        (encode_sentence(text, &vocab, &inv, lim).unwrap().remove(0), inv)
    }

    #[test]
    fn empty_plan_is_identity() {
        let (s, _) = five_words();
        assert_eq!(apply_plan(&s, &MaskPlan::default()).unwrap(), s);
    }

    #[test]
    fn figure_layout_changes_only_planned_indices() {
        let (s, inv) = five_words();
        // word 4 masked; word 2 char 2; word 5 chars 1 and 4 (1-based)
        let plan = MaskPlan {
            word_masked: BTreeSet::from([3]),
            char_masked: BTreeMap::from([(1, BTreeSet::from([1])), (4, BTreeSet::from([0, 3]))]),
        };
        let m = apply_plan(&s, &plan).unwrap();
        assert_eq!(m.targets, s.targets);
        assert_eq!(m.words[0], s.words[0]);
        assert_eq!(m.words[2], s.words[2]);
        assert_eq!(m.words[3].real(), &[MASK_WORD]);
        assert_eq!(m.words[1].chars[1], MASK_CHAR);
        assert_eq!(m.words[4].chars[0], MASK_CHAR);
        assert_eq!(m.words[4].chars[3], MASK_CHAR);
        assert_eq!(render_masked(&m, &inv), "abcd b\u{25A1}de cdef \u{25A0} \u{25A1}fg\u{25A1}");
    }

    #[test]
    fn out_of_range_plan_is_rejected() {
        let (s, _) = five_words();
        let plan = MaskPlan {
            word_masked: BTreeSet::from([5]),
            ..Default::default()
        };
        assert!(apply_plan(&s, &plan).is_err());
        let plan = MaskPlan {
            char_masked: BTreeMap::from([(0, BTreeSet::from([4]))]),
            ..Default::default()
        };
        assert!(apply_plan(&s, &plan).is_err());
    }

    /// Recovers the plan by comparing masked and original encodings.
    fn diff_plan(orig: &EncodedSentence, masked: &EncodedSentence) -> MaskPlan {
        let mut p = MaskPlan::default();
        for (i, (a, b)) in orig.words.iter().zip(&masked.words).enumerate() {
            if b.real() == [MASK_WORD] && a.real() != [MASK_WORD] {
                p.word_masked.insert(i);
                continue;
            }
            let changed: BTreeSet<usize> =
                a.chars.iter().zip(&b.chars).enumerate().filter(|(_, (x, y))| x != y).map(|(j, _)| j).collect();
            if !changed.is_empty() {
                p.char_masked.insert(i, changed);
            }
        }
        p
    }

    #[test]
    fn random_plans_invariants_and_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let text: Vec<String> = (0..12).map(|i| "abcdefgh"[..1 + i % 8].to_string()).collect();
        let inv = CharInventory::from_corpus([text.join(" ")]);
        let vocab = Vocab::from_ranked(vec![], 0.95).unwrap();
        let lim = Limits {
            max_word_len: 8,
            max_sent_len: 16,
        };
        for _ in 0..2_000 {
            let n = rng.gen_range(1..=12);
            let words = &text[..n];
            let s = crate::textpipe::encode_tokens(words, words, &vocab, &inv, lim).unwrap().remove(0);
            let lens: Vec<usize> = s.words.iter().map(|w| w.len()).collect();
            let p = plan_hybrid_masking(&lens, &hybrid(), &mut rng).unwrap();
            assert!(p.word_masked.is_empty() || p.n_word() < n);
            for (w, cs) in &p.char_masked {
                assert!(!p.word_masked.contains(w));
                assert!(cs.len() < lens[*w]);
                assert!(!cs.is_empty());
            }
            let m = apply_plan(&s, &p).unwrap();
            assert_eq!(diff_plan(&s, &m), p);
        }
    }

    #[test]
    fn planning_is_deterministic() {
        let lens = [3, 4, 5, 6, 7, 8, 2, 3, 4];
        let a = plan_hybrid_masking(&lens, &hybrid(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = plan_hybrid_masking(&lens, &hybrid(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
