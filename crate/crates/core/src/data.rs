//! Sentence-pair datasets and their conversion to model inputs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenize::{build_injection_sequence, pack_pair, wordpiece_tokenize, WordPieceSequence, WordPieceVocab};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub first: String,
    pub second: String,
    pub label: usize,
}

/// Parses `id<TAB>sentence1<TAB>sentence2<TAB>label` rows. A first row whose
/// label column reads `label` is taken as a header; blank lines are skipped.
pub fn parse_tsv(text: &str, origin: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(
                n + 1,
                format!("expected 4 tab-separated columns, found {}", cols.len()),
            ));
        }
        if n == 0 && cols[3].trim() == "label" {
            continue;
        }
        let label = match cols[3].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(n + 1, format!("label must be 0 or 1, got `{other}`"))),
        };
        let id = cols[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(err(n + 1, format!("duplicate id `{id}`")));
        }
        out.push(Example {
            id,
            first: cols[1].to_string(),
            second: cols[2].to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let examples = parse_tsv(&text, path)?;
    if examples.is_empty() {
        return Err(Error::Data(format!("{}: no examples", path.display())));
    }
    Ok(examples)
}

pub fn to_tsv(examples: &[Example]) -> String {
    let mut s = String::from("id\tsentence1\tsentence2\tlabel\n");
    for e in examples {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.id, e.first, e.second, e.label);
    }
    s
}

/// One example ready for the model; padding already trimmed.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub seq: WordPieceSequence,
    pub injection: Option<Tensor>,
    pub label: usize,
    pub first_tokens: Vec<String>,
    pub second_tokens: Vec<String>,
}

pub struct Featurizer<'a> {
    pub vocab: &'a WordPieceVocab,
    pub embeddings: Option<&'a EmbeddingStore>,
    pub max_seq_len: usize,
}

impl Featurizer<'_> {
    pub fn encode(&self, ex: &Example) -> Result<Encoded> {
        let a = wordpiece_tokenize(&ex.first, self.vocab);
        let b = wordpiece_tokenize(&ex.second, self.vocab);
        let packed = pack_pair(&a, &b, self.max_seq_len, self.vocab)?;
        let n = packed.len_nonpad;
        let injection = match self.embeddings {
            Some(store) => Some(
                build_injection_sequence(&packed, &a.tokens, &b.tokens, store)?
                    .trimmed(n)
                    .matrix,
            ),
            None => None,
        };
        Ok(Encoded {
            seq: packed.trimmed(),
            injection,
            label: ex.label,
            first_tokens: a.tokens,
            second_tokens: b.tokens,
        })
    }

    pub fn encode_all(&self, examples: &[Example]) -> Result<Vec<Encoded>> {
        examples.iter().map(|e| self.encode(e)).collect()
    }
}
