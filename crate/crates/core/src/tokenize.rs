//! WordPiece tokenization, sentence-pair packing and the word-piece aligned
//! injection sequence.
//!
//! Text is pre-tokenized uncased-BERT style (lowercase, split on whitespace,
//! every punctuation character is its own token). Each source token is then
//! split greedily into the longest vocabulary pieces, continuation pieces
//! carrying the `##` prefix. The packed pair keeps, for every position, the
//! source token it came from so external word vectors can be copied onto
//! all of that token's pieces.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const CONTINUATION: &str = "##";

/// Words longer than this are mapped straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug)]
pub struct WordPieceVocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    cls: u32,
    sep: u32,
    unk: u32,
    pad: u32,
}

impl WordPieceVocab {
    /// Builds a vocabulary where a piece's id is its position in `pieces`.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Data(format!("empty word piece at id {i}")));
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate word piece `{p}` at id {i}")));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Data(format!("vocabulary lacks special token {name}")))
        };
        Ok(WordPieceVocab {
            cls: special(CLS)?,
            sep: special(SEP)?,
            unk: special(UNK)?,
            pad: special(PAD)?,
            pieces,
            index,
        })
    }

    /// One piece per line, line number = id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pieces = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect::<Vec<_>>();
        Self::from_pieces(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }
    pub fn sep_id(&self) -> u32 {
        self.sep
    }
    pub fn unk_id(&self) -> u32 {
        self.unk
    }
    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    /// Greedy longest-match-first split of a single pre-tokenized word.
    pub fn split_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        if chars.len() > MAX_WORD_CHARS {
            return vec![self.unk];
        }
        let mut out = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(&chars[start..end]);
                if let Some(&id) = self.index.get(candidate.as_str()) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![self.unk],
            }
        }
        out
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2010}'..='\u{2027}' | '\u{3000}'..='\u{303f}' | '¡' | '¿' | '«' | '»' | '·'
        )
}

/// Lowercases and splits on whitespace and punctuation.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Pieces of one sentence together with their source tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    pub pieces: Vec<u32>,
    /// `spans[t]` is the range of `pieces` covering source token `t`.
    pub spans: Vec<Range<usize>>,
}

impl TokenizedText {
    /// Source token index of every piece.
    fn piece_owners(&self) -> Vec<usize> {
        let mut owners = vec![0; self.pieces.len()];
        for (t, span) in self.spans.iter().enumerate() {
            for owner in &mut owners[span.clone()] {
                *owner = t;
            }
        }
        owners
    }
}

pub fn wordpiece_tokenize(text: &str, vocab: &WordPieceVocab) -> TokenizedText {
    let tokens = pretokenize(text);
    let mut pieces = Vec::new();
    let mut spans = Vec::with_capacity(tokens.len());
    for tok in &tokens {
        let start = pieces.len();
        pieces.extend(vocab.split_word(tok));
        spans.push(start..pieces.len());
    }
    TokenizedText { tokens, pieces, spans }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// `[CLS]`, `[SEP]` or `[PAD]`.
    Special,
    /// Piece of token `token` of sentence `sentence` (1 or 2).
    Source { sentence: u8, token: usize },
}

/// A packed `[CLS] s1 [SEP] s2 [SEP] [PAD]…` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct WordPieceSequence {
    pub piece_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub alignment: Vec<Alignment>,
    /// Number of leading positions that are not `[PAD]`.
    pub len_nonpad: usize,
}

impl WordPieceSequence {
    pub fn len(&self) -> usize {
        self.piece_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.piece_ids.is_empty()
    }

    /// `true` for real positions, `false` for `[PAD]`.
    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|j| j < self.len_nonpad).collect()
    }

    /// Drops trailing `[PAD]` positions. Since padded keys are masked out
    /// this leaves every non-pad output unchanged.
    pub fn trimmed(&self) -> WordPieceSequence {
        let n = self.len_nonpad;
        WordPieceSequence {
            piece_ids: self.piece_ids[..n].to_vec(),
            segment_ids: self.segment_ids[..n].to_vec(),
            alignment: self.alignment[..n].to_vec(),
            len_nonpad: n,
        }
    }
}

/// Packs two piece lists with `[CLS]`/`[SEP]` and pads to `max_seq_len`.
///
/// Pairs that do not fit lose the final piece of whichever sentence is
/// currently longer (the second on ties) until they do.
pub fn pack_pair(
    first: &TokenizedText,
    second: &TokenizedText,
    max_seq_len: usize,
    vocab: &WordPieceVocab,
) -> Result<WordPieceSequence> {
    if max_seq_len < 3 {
        return Err(Error::Config(format!(
            "max_seq_len must be at least 3, got {max_seq_len}"
        )));
    }
    let (mut n1, mut n2) = (first.pieces.len(), second.pieces.len());
    while n1 + n2 + 3 > max_seq_len {
        if n1 > n2 {
            n1 -= 1;
        } else {
            n2 -= 1;
        }
    }

    let mut piece_ids = Vec::with_capacity(max_seq_len);
    let mut segment_ids = Vec::with_capacity(max_seq_len);
    let mut alignment = Vec::with_capacity(max_seq_len);
    let mut push = |id: u32, seg: u8, al: Alignment| {
        piece_ids.push(id);
        segment_ids.push(seg);
        alignment.push(al);
    };

    push(vocab.cls_id(), 0, Alignment::Special);
    for (sentence, text, n, seg) in [(1u8, first, n1, 0u8), (2u8, second, n2, 1u8)] {
        let owners = text.piece_owners();
        for (&piece, &token) in text.pieces[..n].iter().zip(&owners) {
            push(piece, seg, Alignment::Source { sentence, token });
        }
        push(vocab.sep_id(), seg, Alignment::Special);
    }
    let len_nonpad = piece_ids.len();
    while piece_ids.len() < max_seq_len {
        piece_ids.push(vocab.pad_id());
        segment_ids.push(1);
        alignment.push(Alignment::Special);
    }
    Ok(WordPieceSequence {
        piece_ids,
        segment_ids,
        alignment,
        len_nonpad,
    })
}

/// External embeddings aligned one row per word piece.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSequence {
    pub matrix: Tensor,
}

impl InjectionSequence {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn trimmed(&self, n: usize) -> InjectionSequence {
        let e = self.matrix.cols();
        InjectionSequence {
            matrix: Tensor::new([n, e], self.matrix.data()[..n * e].to_vec()).expect("prefix of rows"),
        }
    }
}

/// Copies each source token's external vector onto every piece of that
/// token; special and padding positions get zero rows.
pub fn build_injection_sequence(
    seq: &WordPieceSequence,
    first_tokens: &[String],
    second_tokens: &[String],
    store: &EmbeddingStore,
) -> Result<InjectionSequence> {
    let e = store.dim();
    let mut data = vec![0.0; seq.len() * e];
    for (j, al) in seq.alignment.iter().enumerate() {
        if let Alignment::Source { sentence, token } = *al {
            let tokens = if sentence == 1 { first_tokens } else { second_tokens };
            let word = tokens.get(token).ok_or_else(|| {
                Error::Invalid(format!(
                    "alignment at position {j} points to token {token} of sentence {sentence}, which has {}",
                    tokens.len()
                ))
            })?;
            data[j * e..(j + 1) * e].copy_from_slice(store.lookup(word));
        }
    }
    Ok(InjectionSequence {
        matrix: Tensor::new([seq.len(), e], data)?,
    })
}
