//! A synthetic paraphrase task whose labels hinge on word relations, plus
//! embeddings that encode those relations (and a shape-matched control that
//! does not).
//!
//! The lexicon comes in groups of four words: two synonym pairs that are
//! each other's opposites, so every lexicon word has one synonym and two
//! antonyms and no single word says anything about the label.
//!
//! Every pair starts from a sentence carrying one lexicon word `a`; the
//! second sentence is built by one edit:
//!
//! | edit                         | label |
//! |------------------------------|-------|
//! | `a` → a synonym of `a`       | 1     |
//! | a stopword inserted          | 1     |
//! | `a` → an antonym of `a`      | 0     |
//! | `a` → an unrelated word      | 0     |
//!
//! Training sentences only use a `1 − holdout_fraction` share of the
//! groups; dev and test use all of them, so relations between held-out words
//! can only come from the embeddings.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{to_tsv, Example};
use crate::embeddings::{EmbeddingStore, PairLexicon, Relation};
use crate::error::{Error, Result};
use crate::tokenize::{pretokenize, WordPieceVocab, CLS, CONTINUATION, PAD, SEP, UNK};

pub const STOPWORDS: [&str; 10] = ["the", "a", "of", "for", "and", "in", "is", "it", "on", "with"];
const CONSONANTS: &str = "bdfgklmnprstvz";
const VOWELS: &str = "aeiou";
/// Letters no vocabulary piece contains.
const RARE_CONSONANTS: &str = "cjqwxy";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Training pairs; dev and test get half as many each.
    pub pairs: usize,
    /// Distinct content words.
    pub vocab_size: usize,
    /// Must be even: pairs `2k` and `2k + 1` are opposites.
    pub synonym_pairs: usize,
    /// Probability of flipping a training label.
    pub noise: f64,
    pub seed: u64,
    pub positive_rate: f64,
    pub ext_dim: usize,
    pub holdout_fraction: f64,
    /// Chance that a non-anchor slot holds a content word rather than a
    /// stopword.
    pub filler_rate: f64,
    /// Share of edits that swap in a lexicon partner (synonym for
    /// positives, antonym for negatives) rather than a stopword insertion or
    /// an unrelated word.
    pub relation_rate: f64,
    /// Chance of also swapping a second lexicon word for its synonym. The
    /// label is unchanged, so negatives can carry synonym pairs too.
    pub extra_synonym_rate: f64,
    /// Spells lexicon words with letters outside the word-piece vocabulary,
    /// so the encoder sees each of them as `[UNK]` and only the embeddings
    /// tell them apart.
    pub rare_lexicon: bool,
    /// Inclusive range of tokens per first sentence (before the period).
    pub sentence_len: (usize, usize),
    /// Share of content words given a whole-word piece; the rest split
    /// into syllables.
    pub whole_word_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            pairs: 1000,
            vocab_size: 1000,
            synonym_pairs: 200,
            noise: 0.05,
            seed: 7,
            positive_rate: 0.5,
            ext_dim: 16,
            holdout_fraction: 0.5,
            filler_rate: 0.0,
            relation_rate: 0.8,
            extra_synonym_rate: 0.5,
            rare_lexicon: true,
            sentence_len: (2, 3),
            whole_word_rate: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let lexicon_words = 2 * self.synonym_pairs;
        if self.pairs < 2 || self.ext_dim == 0 {
            return Err(Error::Config("pairs (≥ 2) and ext_dim must be positive".into()));
        }
        if self.synonym_pairs == 0 || !self.synonym_pairs.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "synonym_pairs must be even and positive, got {}",
                self.synonym_pairs
            )));
        }
        if self.vocab_size < lexicon_words + 10 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves fewer than 10 filler words after {lexicon_words} lexicon words",
                self.vocab_size
            )));
        }
        let syllables = CONSONANTS.len() * VOWELS.len();
        if self.vocab_size > syllables * syllables * syllables / 2 {
            return Err(Error::Config(format!("vocab_size {} is too large", self.vocab_size)));
        }
        let rare = RARE_CONSONANTS.len() * VOWELS.len();
        if self.rare_lexicon && lexicon_words > rare * rare * rare / 2 {
            return Err(Error::Config(format!(
                "{lexicon_words} rare lexicon words are too many"
            )));
        }
        for (name, p) in [
            ("noise", self.noise),
            ("positive_rate", self.positive_rate),
            ("holdout_fraction", self.holdout_fraction),
            ("filler_rate", self.filler_rate),
            ("relation_rate", self.relation_rate),
            ("extra_synonym_rate", self.extra_synonym_rate),
            ("whole_word_rate", self.whole_word_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.sentence_len;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "sentence_len range {lo}..={hi} is empty or starts at 0"
            )));
        }
        if self.holdout_fraction >= 1.0 {
            return Err(Error::Config(
                "holdout_fraction must leave some pairs for training".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab: WordPieceVocab,
    pub lexicon: PairLexicon,
    pub oracle: EmbeddingStore,
    pub random: EmbeddingStore,
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const DEV_FILE: &str = "dev.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const ORACLE_FILE: &str = "embeddings.oracle.txt";
pub const RANDOM_FILE: &str = "embeddings.random.txt";

impl SynthData {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut vocab = self.vocab.pieces().join("\n");
        vocab.push('\n');
        for (name, text) in [
            (TRAIN_FILE, to_tsv(&self.train)),
            (DEV_FILE, to_tsv(&self.dev)),
            (TEST_FILE, to_tsv(&self.test)),
            (VOCAB_FILE, vocab),
            (LEXICON_FILE, self.lexicon.to_tsv()),
            (ORACLE_FILE, self.oracle.to_text()),
            (RANDOM_FILE, self.random.to_text()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn syllables(consonants: &str) -> Vec<String> {
    consonants
        .chars()
        .flat_map(|c| VOWELS.chars().map(move |v| format!("{c}{v}")))
        .collect()
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `normalize(sign·c + δ)` with `|δ| = 0.1`: within asin(0.1) of `±c`, so
/// two such vectors have |cosine| ≥ cos(2·asin(0.1)) = 0.98.
fn near<R: Rng>(rng: &mut R, c: &[f64], sign: f64) -> Vec<f64> {
    let delta = unit_vector(rng, c.len());
    let v: Vec<f64> = c.iter().zip(&delta).map(|(x, d)| sign * x + 0.1 * d).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Two opposite poles of two synonyms each.
type Group = [[String; 2]; 2];

#[derive(Clone, Copy)]
enum Edit {
    Synonym,
    Stopword,
    Antonym,
    Unrelated,
}

struct Generator<'a> {
    rng: ChaCha8Rng,
    spec: &'a SynthSpec,
    fillers: &'a [String],
}

impl Generator<'_> {
    /// A sentence with `anchors` in distinct random slots; returns it with
    /// the anchors' positions.
    fn base(&mut self, anchors: &[&str]) -> (Vec<String>, Vec<usize>) {
        let (lo, hi) = self.spec.sentence_len;
        let len = self.rng.random_range(lo..=hi).max(anchors.len());
        let mut s: Vec<String> = (0..len)
            .map(|_| {
                if self.rng.random_bool(self.spec.filler_rate) {
                    self.fillers.choose(&mut self.rng).unwrap().clone()
                } else {
                    STOPWORDS.choose(&mut self.rng).unwrap().to_string()
                }
            })
            .collect();
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(&mut self.rng);
        slots.truncate(anchors.len());
        for (&slot, a) in slots.iter().zip(anchors) {
            s[slot] = a.to_string();
        }
        (s, slots)
    }

    fn pair(&mut self, groups: &[Group]) -> (Vec<String>, Vec<String>, usize) {
        let positive = self.rng.random_bool(self.spec.positive_rate);
        let edit = match (positive, self.rng.random_bool(self.spec.relation_rate)) {
            (true, true) => Edit::Synonym,
            (true, false) => Edit::Stopword,
            (false, true) => Edit::Antonym,
            (false, false) => Edit::Unrelated,
        };
        let gi = self.rng.random_range(0..groups.len());
        let (pole, i) = (self.rng.random_range(0..2), self.rng.random_range(0..2));
        let a = groups[gi][pole][i].as_str();
        // A second word from another group, swapped for its synonym.
        let extra = (groups.len() > 1 && self.rng.random_bool(self.spec.extra_synonym_rate)).then(|| {
            let gj = (gi + self.rng.random_range(1..groups.len())) % groups.len();
            let (p, j) = (self.rng.random_range(0..2), self.rng.random_range(0..2));
            (groups[gj][p][j].as_str(), groups[gj][p][1 - j].as_str())
        });
        let anchors: Vec<&str> = std::iter::once(a).chain(extra.map(|(c, _)| c)).collect();
        let (first, slots) = self.base(&anchors);
        let mut second = first.clone();
        if let Some((_, c2)) = extra {
            second[slots[1]] = c2.to_string();
        }
        let slot = slots[0];
        match edit {
            Edit::Synonym => second[slot] = groups[gi][pole][1 - i].clone(),
            Edit::Antonym => second[slot] = groups[gi][1 - pole][self.rng.random_range(0..2)].clone(),
            Edit::Unrelated => second[slot] = self.fillers.choose(&mut self.rng).unwrap().clone(),
            Edit::Stopword => {
                let at = self.rng.random_range(0..=second.len());
                second.insert(at, STOPWORDS.choose(&mut self.rng).unwrap().to_string());
            }
        }
        (first, second, usize::from(positive))
    }

    fn split(&mut self, prefix: &str, n: usize, groups: &[Group], noise: f64) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let (a, b, mut label) = self.pair(groups);
                if noise > 0.0 && self.rng.random_bool(noise) {
                    label = 1 - label;
                }
                Example {
                    id: format!("{prefix}-{i:06}"),
                    first: format!("{}.", a.join(" ")),
                    second: format!("{}.", b.join(" ")),
                    label,
                }
            })
            .collect()
    }
}

/// Deterministic in `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let syl = syllables(CONSONANTS);
    let rare = syllables(RARE_CONSONANTS);
    let n_lex = 2 * spec.synonym_pairs;

    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(spec.vocab_size);
    while words.len() < spec.vocab_size {
        let source = if spec.rare_lexicon && words.len() < n_lex {
            &rare
        } else {
            &syl
        };
        let n = rng.random_range(2..=3);
        let w: String = (0..n).map(|_| source.choose(&mut rng).unwrap().as_str()).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }

    let mut pieces: Vec<String> = [PAD, UNK, CLS, SEP, "."].iter().map(|s| s.to_string()).collect();
    pieces.extend(STOPWORDS.iter().map(|s| s.to_string()));
    pieces.extend(syl.iter().cloned());
    pieces.extend(syl.iter().map(|s| format!("{CONTINUATION}{s}")));
    for (i, w) in words.iter().enumerate() {
        if spec.rare_lexicon && i < n_lex {
            continue;
        }
        if rng.random_bool(spec.whole_word_rate) && !pieces.contains(w) {
            pieces.push(w.clone());
        }
    }
    let vocab = WordPieceVocab::from_pieces(pieces)?;

    let (lex_words, fillers) = words.split_at(n_lex);
    let groups: Vec<Group> = lex_words
        .chunks(4)
        .map(|c| [[c[0].clone(), c[1].clone()], [c[2].clone(), c[3].clone()]])
        .collect();
    let mut lexicon = PairLexicon::new();
    let mut oracle_rows: Vec<(String, Vec<f64>)> = Vec::with_capacity(words.len());
    for [x, y] in &groups {
        lexicon.insert(&x[0], &x[1], Relation::Synonym)?;
        lexicon.insert(&y[0], &y[1], Relation::Synonym)?;
        for a in x {
            for b in y {
                lexicon.insert(a, b, Relation::Antonym)?;
            }
        }
        let centre = unit_vector(&mut rng, spec.ext_dim);
        for (pole, sign) in [(x, 1.0), (y, -1.0)] {
            for w in pole {
                oracle_rows.push((w.clone(), near(&mut rng, &centre, sign)));
            }
        }
    }
    for w in fillers {
        oracle_rows.push((w.clone(), unit_vector(&mut rng, spec.ext_dim)));
    }
    let random_rows = oracle_rows
        .iter()
        .map(|(w, _)| (w.clone(), unit_vector(&mut rng, spec.ext_dim)))
        .collect();

    let mut train_groups = groups.clone();
    train_groups.shuffle(&mut rng);
    let keep = ((1.0 - spec.holdout_fraction) * groups.len() as f64).ceil().max(1.0) as usize;
    train_groups.truncate(keep);

    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1)),
        spec,
        fillers,
    };
    let train = g.split("train", spec.pairs, &train_groups, spec.noise);
    let dev = g.split("dev", spec.pairs / 2, &groups, 0.0);
    let test = g.split("test", spec.pairs / 2, &groups, 0.0);

    Ok(SynthData {
        train,
        dev,
        test,
        vocab,
        lexicon,
        oracle: EmbeddingStore::from_rows(oracle_rows)?,
        random: EmbeddingStore::from_rows(random_rows)?,
    })
}

/// Re-derives the label of one pair from the edits that separate the two
/// sentences: positive iff every edit is a synonym swap or a stopword
/// insertion. `None` if the edits are not construction edits.
pub fn derive_label(first: &str, second: &str, lexicon: &PairLexicon) -> Option<usize> {
    let a = pretokenize(first);
    let b = pretokenize(second);
    let swaps = |x: &[String], y: &[String]| -> Option<usize> {
        let mut label = 1;
        for (p, q) in x.iter().zip(y).filter(|(p, q)| p != q) {
            match lexicon.relation(p, q) {
                Some(Relation::Synonym) => {}
                Some(Relation::Antonym) => label = 0,
                None if !lexicon.partners(p).is_empty() && lexicon.partners(q).is_empty() => label = 0,
                None => return None,
            }
        }
        Some(label)
    };
    if b.len() == a.len() + 1 {
        return (0..b.len())
            .filter(|&k| STOPWORDS.contains(&b[k].as_str()))
            .find_map(|k| {
                let rest: Vec<String> = b[..k].iter().chain(&b[k + 1..]).cloned().collect();
                swaps(&a, &rest).filter(|&l| l == 1)
            });
    }
    if a.len() != b.len() || a == b {
        return None;
    }
    swaps(&a, &b)
}

/// Number of examples whose label differs from [`derive_label`].
pub fn audit(examples: &[Example], lexicon: &PairLexicon) -> usize {
    examples
        .iter()
        .filter(|e| derive_label(&e.first, &e.second, lexicon) != Some(e.label))
        .count()
}
