//! A small synthetic language for experiments that need a corpus with both
//! word-shape and context structure: Zipf-ranked words and a sparse
//! first-order Markov chain over them.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::errgen::{corrupt_sentence, line_rng, ConfusionSet, CorruptedSentence, ErrorConfig};
use crate::error::Result;

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "st"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const SUCCESSORS: usize = 6;

#[derive(Debug, Clone)]
pub struct ToyLanguage {
    /// Words by frequency rank (rank 0 most common).
    pub words: Vec<String>,
    start: WeightedIndex<f64>,
    next: Vec<(Vec<usize>, WeightedIndex<f64>)>,
    pub min_len: usize,
    pub max_len: usize,
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (ca != cb) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

impl ToyLanguage {
    /// `vocab_size` distinct pronounceable words, pairwise at least two edits
    /// apart, with Zipf(1) unigram weights and `SUCCESSORS` likely followers each.
    pub fn generate(vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<String> = Vec::with_capacity(vocab_size);
        while words.len() < vocab_size {
            let syllables = rng.gen_range(1..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(&mut rng).expect("non-empty"));
                w.push_str(VOWELS.choose(&mut rng).expect("non-empty"));
            }
            if rng.gen_bool(0.4) {
                w.push_str(["n", "r", "s", "t", "l"].choose(&mut rng).expect("non-empty"));
            }
            if w.len() >= 2 && w.len() <= 8 && words.iter().all(|o| edit_distance(o, &w) >= 2) {
                words.push(w);
            }
        }
        let zipf: Vec<f64> = (0..vocab_size).map(|r| 1.0 / (r + 1) as f64).collect();
        let start = WeightedIndex::new(&zipf).expect("positive weights");
        let next = (0..vocab_size)
            .map(|_| {
                let succ: Vec<usize> = (0..SUCCESSORS).map(|_| start.sample(&mut rng)).collect();
                let w: Vec<f64> = succ.iter().map(|&s| zipf[s]).collect();
                (succ, WeightedIndex::new(&w).expect("positive weights"))
            })
            .collect();
        let min_len = words.iter().map(String::len).min().unwrap_or(0);
        let max_len = words.iter().map(String::len).max().unwrap_or(0);
        Self {
            words,
            start,
            next,
            min_len,
            max_len,
        }
    }

    /// One sentence of 4–10 words.
    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let n = rng.gen_range(4..=10);
        let mut cur = self.start.sample(rng);
        let mut out = vec![self.words[cur].as_str()];
        for _ in 1..n {
            // An occasional restart keeps rarer words reachable.
            cur = if rng.gen_bool(0.1) {
                self.start.sample(rng)
            } else {
                let (succ, w) = &self.next[cur];
                succ[w.sample(rng)]
            };
            out.push(&self.words[cur]);
        }
        out.join(" ")
    }

    pub fn corpus(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sentence(&mut rng)).collect()
    }

    /// Look-alike letter swaps plus a few length-changing replacements.
    pub fn confusion() -> ConfusionSet {
        let pairs: [(char, &[(&str, f64)]); 12] = [
            ('b', &[("d", 2.0), ("p", 1.0)]),
            ('d', &[("b", 2.0), ("t", 1.0)]),
            ('p', &[("b", 1.0), ("q", 1.0)]),
            ('m', &[("n", 2.0), ("rn", 1.0)]),
            ('n', &[("m", 2.0)]),
            ('a', &[("e", 1.0), ("o", 1.0)]),
            ('e', &[("a", 1.0), ("i", 1.0)]),
            ('i', &[("e", 1.0), ("y", 1.0)]),
            ('o', &[("u", 1.0), ("a", 1.0)]),
            ('u', &[("o", 1.0), ("v", 1.0)]),
            ('c', &[("k", 1.0), ("ck", 1.0)]),
            ('s', &[("z", 1.0), ("ss", 1.0)]),
        ];
        let map: BTreeMap<char, Vec<(String, f64)>> = pairs
            .iter()
            .map(|(c, alts)| (*c, alts.iter().map(|(r, w)| (r.to_string(), *w)).collect()))
            .collect();
        ConfusionSet::new(map).expect("static confusion set is valid")
    }

    /// Corrupts each line with its own line-indexed rng stream.
    pub fn corrupt(lines: &[String], cfg: &ErrorConfig, confusion: &ConfusionSet) -> Result<Vec<CorruptedSentence>> {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| corrupt_sentence(l, cfg, confusion, &mut line_rng(cfg.seed, i as u64)))
            .collect()
    }
}
