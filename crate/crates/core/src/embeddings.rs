//! External word vectors and synonym/antonym lexicons.
//!
//! Vector files use the plain word2vec/GloVe text layout: one
//! `word v1 … vE` line per word, optionally preceded by a `count dim`
//! header line.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tokenize::pretokenize;

/// What [`EmbeddingStore::lookup`] returns for unknown words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OovPolicy {
    #[default]
    Zero,
    /// Column-wise mean over the whole vocabulary.
    Mean,
}

impl FromStr for OovPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(OovPolicy::Zero),
            "mean" => Ok(OovPolicy::Mean),
            other => Err(Error::Config(format!(
                "unknown OOV policy `{other}` (expected zero|mean)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    words: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Vec<f64>,
    dim: usize,
    policy: OovPolicy,
    oov: Vec<f64>,
    duplicates: usize,
}

impl EmbeddingStore {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses the text format; `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .filter(|(_, l)| !l.is_empty())
            .peekable();

        let mut declared = None;
        if let Some(&(_, first)) = lines.peek() {
            let fields: Vec<&str> = first.split_whitespace().collect();
            if let [count, dim] = fields[..] {
                if let (Ok(c), Ok(d)) = (count.parse::<usize>(), dim.parse::<usize>()) {
                    declared = Some((c, d));
                    lines.next();
                }
            }
        }

        let mut store = EmbeddingStore {
            words: Vec::new(),
            index: HashMap::new(),
            matrix: Vec::new(),
            dim: declared.map_or(0, |(_, d)| d),
            policy: OovPolicy::Zero,
            oov: Vec::new(),
            duplicates: 0,
        };
        for (lineno, line) in lines {
            let mut fields = line.split_whitespace();
            let word = fields.next().expect("non-empty line has a field");
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| err(lineno, format!("bad value `{f}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if store.dim == 0 {
                store.dim = values.len();
            }
            if values.len() != store.dim || values.is_empty() {
                return Err(err(
                    lineno,
                    format!("`{word}` has {} values, expected {}", values.len(), store.dim),
                ));
            }
            if store.index.contains_key(word) {
                store.duplicates += 1;
                continue;
            }
            store.index.insert(word.to_string(), store.words.len());
            store.words.push(word.to_string());
            store.matrix.extend(values);
        }
        if store.words.is_empty() {
            return Err(err(0, "no embeddings found".into()));
        }
        if let Some((count, _)) = declared {
            if count != store.words.len() + store.duplicates {
                log::warn!(
                    "{}: header declares {count} words, found {}",
                    origin.display(),
                    store.words.len() + store.duplicates
                );
            }
        }
        store.oov = vec![0.0; store.dim];
        Ok(store)
    }

    /// Builds a store from in-memory rows.
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = rows.first().map_or(0, |(_, v)| v.len());
        if dim == 0 {
            return Err(Error::Data("embedding store needs at least one non-empty row".into()));
        }
        let mut store = EmbeddingStore {
            words: Vec::new(),
            index: HashMap::new(),
            matrix: Vec::new(),
            dim,
            policy: OovPolicy::Zero,
            oov: vec![0.0; dim],
            duplicates: 0,
        };
        for (word, v) in rows {
            if v.len() != dim {
                return Err(Error::Data(format!("`{word}` has {} values, expected {dim}", v.len())));
            }
            if store.index.contains_key(&word) {
                store.duplicates += 1;
                continue;
            }
            store.index.insert(word.clone(), store.words.len());
            store.words.push(word);
            store.matrix.extend(v);
        }
        Ok(store)
    }

    pub fn with_oov_policy(mut self, policy: OovPolicy) -> Self {
        self.policy = policy;
        self.oov = match policy {
            OovPolicy::Zero => vec![0.0; self.dim],
            OovPolicy::Mean => {
                let mut mean = vec![0.0; self.dim];
                for row in self.matrix.chunks(self.dim) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let n = self.words.len() as f64;
                mean.iter_mut().for_each(|m| *m /= n);
                mean
            }
        };
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn policy(&self) -> OovPolicy {
        self.policy
    }

    /// Lines skipped because their word had already been seen.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word) || self.index.contains_key(word.to_lowercase().as_str())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact lowercase match, else the OOV vector.
    pub fn lookup(&self, word: &str) -> &[f64] {
        let hit = self
            .index
            .get(word)
            .or_else(|| self.index.get(word.to_lowercase().as_str()));
        match hit {
            Some(&i) => self.row(i),
            None => &self.oov,
        }
    }

    /// Writes the text format with a `count dim` header.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.words.len(), self.dim);
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for v in self.row(i) {
                out.push(' ');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Synonym,
    Antonym,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Synonym => "synonym",
            Relation::Antonym => "antonym",
        })
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "synonym" => Ok(Relation::Synonym),
            "antonym" => Ok(Relation::Antonym),
            other => Err(Error::Data(format!("unknown relation `{other}`"))),
        }
    }
}

/// Unordered, lowercased word pairs tagged synonym or antonym.
#[derive(Clone, Debug, Default)]
pub struct PairLexicon {
    pairs: HashMap<(String, String), Relation>,
    partners: HashMap<String, Vec<(String, Relation)>>,
}

fn key(a: &str, b: &str) -> (String, String) {
    let (a, b) = (a.to_lowercase(), b.to_lowercase());
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl PairLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a pair; re-adding with the same tag is a no-op, with the other
    /// tag an error.
    pub fn insert(&mut self, a: &str, b: &str, rel: Relation) -> Result<()> {
        let k = key(a, b);
        match self.pairs.get(&k) {
            Some(&existing) if existing == rel => return Ok(()),
            Some(&existing) => {
                return Err(Error::Data(format!(
                    "pair ({}, {}) tagged both {existing} and {rel}",
                    k.0, k.1
                )))
            }
            None => {}
        }
        self.partners.entry(k.0.clone()).or_default().push((k.1.clone(), rel));
        if k.0 != k.1 {
            self.partners.entry(k.1.clone()).or_default().push((k.0.clone(), rel));
        }
        self.pairs.insert(k, rel);
        Ok(())
    }

    /// TSV `word1<TAB>word2<TAB>relation`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lex = PairLexicon::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            let [a, b, rel] = cols[..] else {
                return Err(err(format!("expected 3 tab-separated columns, got {}", cols.len())));
            };
            let rel: Relation = rel.parse().map_err(|e: Error| err(e.to_string()))?;
            lex.insert(a.trim(), b.trim(), rel).map_err(|e| err(e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn relation(&self, a: &str, b: &str) -> Option<Relation> {
        self.pairs.get(&key(a, b)).copied()
    }

    pub fn partners(&self, word: &str) -> &[(String, Relation)] {
        self.partners.get(word).map_or(&[], Vec::as_slice)
    }

    /// Pairs in a stable order.
    pub fn sorted_pairs(&self) -> Vec<(&str, &str, Relation)> {
        let mut v: Vec<_> = self
            .pairs
            .iter()
            .map(|((a, b), r)| (a.as_str(), b.as_str(), *r))
            .collect();
        v.sort();
        v
    }

    pub fn to_tsv(&self) -> String {
        self.sorted_pairs()
            .into_iter()
            .map(|(a, b, r)| format!("{a}\t{b}\t{r}\n"))
            .collect()
    }
}

/// Which lexicon relations straddle the two sentences of an instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartitionTags {
    pub has_synonym: bool,
    pub has_antonym: bool,
}

impl PartitionTags {
    pub fn neither(&self) -> bool {
        !self.has_synonym && !self.has_antonym
    }
}

/// Tags one instance: a relation is present when one word of a lexicon pair
/// occurs in the first sentence and the other word in the second.
pub fn partition_tags(first: &[String], second: &[String], lexicon: &PairLexicon) -> PartitionTags {
    let second: HashSet<&str> = second.iter().map(String::as_str).collect();
    let mut tags = PartitionTags::default();
    for w in first {
        for (partner, rel) in lexicon.partners(w) {
            if second.contains(partner.as_str()) {
                match rel {
                    Relation::Synonym => tags.has_synonym = true,
                    Relation::Antonym => tags.has_antonym = true,
                }
            }
        }
    }
    tags
}

/// Tags every `(sentence1, sentence2)` pair after pre-tokenizing both.
pub fn partition_instances<S: AsRef<str>>(pairs: &[(S, S)], lexicon: &PairLexicon) -> Vec<PartitionTags> {
    pairs
        .iter()
        .map(|(a, b)| partition_tags(&pretokenize(a.as_ref()), &pretokenize(b.as_ref()), lexicon))
        .collect()
}
