//! Byte- and symbol-level tokenization.
//!
//! The vocabulary is built from the pretraining text. Four special tokens sit
//! ahead of the data range: PAD, UNK, MASK, and a single shared SOS/EOS used
//! at both sequence ends. Out-of-vocabulary data tokens map to UNK rather
//! than erroring so that zero-shot inference on an unseen language never
//! aborts.

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const SOS_EOS: usize = 3;
pub const N_SPECIALS: usize = 4;

const SPECIAL_RENDERINGS: [&str; N_SPECIALS] = ["<pad>", "<unk>", "<mask>", "<s>"];

/// What the data tokens of a vocabulary are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TokenType {
    /// UTF-8 bytes of the text.
    Bytes,
    /// Symbol ids produced by per-language grapheme rules.
    Symbols,
}

/// Grapheme-to-symbol rule table with greedy longest-match parsing.
///
/// A prefix-free rule set parses uniquely; the synthetic orthographies are
/// prefix-free by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolTable {
    /// Sorted by descending grapheme length, then lexicographically.
    rules: Vec<(String, usize)>,
}

impl SymbolTable {
    pub fn new(mut rules: Vec<(String, usize)>) -> Self {
        rules.sort_by(|a, b| {
            b.0.chars()
                .count()
                .cmp(&a.0.chars().count())
                .then_with(|| a.0.cmp(&b.0))
        });
        SymbolTable { rules }
    }

    pub fn rules(&self) -> &[(String, usize)] {
        &self.rules
    }

    /// Longest-match left-to-right parse; errors carry the character offset
    /// of the first undecodable span.
    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut rest = text;
        let mut char_offset = 0;
        while !rest.is_empty() {
            let hit = self
                .rules
                .iter()
                .find(|(grapheme, _)| rest.starts_with(grapheme.as_str()));
            match hit {
                Some((grapheme, symbol)) => {
                    out.push(*symbol);
                    char_offset += grapheme.chars().count();
                    rest = &rest[grapheme.len()..];
                }
                None => {
                    return Err(Error::TokenizeSpan {
                        offset: char_offset,
                        text: text.to_string(),
                    })
                }
            }
        }
        Ok(out)
    }
}

/// Data token as observed in the corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DataToken {
    Byte(u8),
    Symbol(usize),
}

impl DataToken {
    fn rendering(&self) -> String {
        match self {
            DataToken::Byte(b) => format!("B{b}"),
            DataToken::Symbol(s) => format!("P{s}"),
        }
    }

    fn from_rendering(s: &str) -> Option<DataToken> {
        if let Some(rest) = s.strip_prefix('B') {
            rest.parse().ok().map(DataToken::Byte)
        } else if let Some(rest) = s.strip_prefix('P') {
            rest.parse().ok().map(DataToken::Symbol)
        } else {
            None
        }
    }
}

/// Token-to-id map with the four specials ahead of the data range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_type: TokenType,
    data_tokens: Vec<DataToken>,
    token_to_id: BTreeMap<DataToken, usize>,
}

impl Vocabulary {
    fn from_data_tokens(token_type: TokenType, data_tokens: Vec<DataToken>) -> Self {
        let token_to_id = data_tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, N_SPECIALS + i))
            .collect();
        Vocabulary {
            token_type,
            data_tokens,
            token_to_id,
        }
    }

    /// Byte vocabulary: exactly the byte values observed, in byte-value order.
    pub fn build_bytes(corpus: &[Utterance]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Vocabulary("empty corpus".into()));
        }
        let mut seen = [false; 256];
        for utt in corpus {
            for &b in utt.text.as_bytes() {
                seen[b as usize] = true;
            }
        }
        let data_tokens: Vec<DataToken> = (0..=255u8)
            .filter(|&b| seen[b as usize])
            .map(DataToken::Byte)
            .collect();
        Ok(Self::from_data_tokens(TokenType::Bytes, data_tokens))
    }

    /// Symbol vocabulary: symbols observed when parsing each utterance with
    /// its language's rule table, in first-occurrence order.
    pub fn build_symbols(
        corpus: &[Utterance],
        tables: &BTreeMap<usize, SymbolTable>,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Vocabulary("empty corpus".into()));
        }
        let mut data_tokens = Vec::new();
        let mut present = BTreeMap::new();
        for utt in corpus {
            let table = tables.get(&utt.language_id).ok_or_else(|| {
                Error::Vocabulary(format!(
                    "no symbol table for language id {}",
                    utt.language_id
                ))
            })?;
            for symbol in table.parse(&utt.text)? {
                if present.insert(symbol, ()).is_none() {
                    data_tokens.push(DataToken::Symbol(symbol));
                }
            }
        }
        Ok(Self::from_data_tokens(TokenType::Symbols, data_tokens))
    }

    pub fn token_type(&self) -> TokenType {
        self.token_type
    }

    /// Total size including specials.
    pub fn len(&self) -> usize {
        N_SPECIALS + self.data_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_data_tokens(&self) -> usize {
        self.data_tokens.len()
    }

    /// Ids of the data-token range, for drawing random replacements.
    pub fn data_id_range(&self) -> std::ops::Range<usize> {
        N_SPECIALS..self.len()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < N_SPECIALS
    }

    pub fn id_of(&self, token: DataToken) -> Option<usize> {
        self.token_to_id.get(&token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<DataToken> {
        id.checked_sub(N_SPECIALS)
            .and_then(|i| self.data_tokens.get(i))
            .copied()
    }

    pub fn rendering(&self, id: usize) -> String {
        if id < N_SPECIALS {
            SPECIAL_RENDERINGS[id].to_string()
        } else {
            self.token_of(id)
                .map(|t| t.rendering())
                .unwrap_or_else(|| format!("?{id}"))
        }
    }

    /// Persist as `id<TAB>rendering` lines, specials first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for id in 0..self.len() {
            writeln!(out, "{id}\t{}", self.rendering(id)).expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Bit-exact reload of [`Vocabulary::save`] output.
    pub fn load(path: &Path) -> Result<Self> {
        let content =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut data_tokens = Vec::new();
        let mut token_type = None;
        for (idx, line) in content.lines().enumerate() {
            let (id_str, rendering) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: "expected `id<TAB>rendering`".into(),
            })?;
            let id: usize = id_str.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: format!("bad id `{id_str}`"),
            })?;
            if id != idx {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("non-contiguous id {id}"),
                });
            }
            if id < N_SPECIALS {
                if rendering != SPECIAL_RENDERINGS[id] {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("expected special `{}`", SPECIAL_RENDERINGS[id]),
                    });
                }
                continue;
            }
            let token = DataToken::from_rendering(rendering).ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("bad token rendering `{rendering}`"),
            })?;
            let this_type = match token {
                DataToken::Byte(_) => TokenType::Bytes,
                DataToken::Symbol(_) => TokenType::Symbols,
            };
            if *token_type.get_or_insert(this_type) != this_type {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: "mixed byte and symbol tokens".into(),
                });
            }
            data_tokens.push(token);
        }
        let token_type = token_type.ok_or_else(|| Error::Vocabulary("no data tokens".into()))?;
        Ok(Self::from_data_tokens(token_type, data_tokens))
    }

    /// Content hash for checkpoint compatibility checks.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for id in 0..self.len() {
            hasher.update(self.rendering(id).as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// A tokenized utterance wrapped in the shared SOS/EOS token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.ids.len() < 2 || self.ids[0] != SOS_EOS || *self.ids.last().unwrap() != SOS_EOS {
            return Err(Error::Vocabulary(
                "token sequence must start and end with the SOS/EOS token".into(),
            ));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id >= vocab.len()) {
            return Err(Error::Vocabulary(format!(
                "token id {id} exceeds vocabulary size {}",
                vocab.len()
            )));
        }
        Ok(())
    }
}

/// UTF-8 byte tokenization; unseen bytes map to UNK.
pub fn tokenize_bytes(text: &str, vocab: &Vocabulary) -> TokenSequence {
    debug_assert_eq!(vocab.token_type(), TokenType::Bytes);
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(SOS_EOS);
    for &b in text.as_bytes() {
        ids.push(vocab.id_of(DataToken::Byte(b)).unwrap_or(UNK));
    }
    ids.push(SOS_EOS);
    TokenSequence { ids }
}

/// Symbol tokenization via a rule table; unseen symbols map to UNK.
pub fn tokenize_symbols(
    text: &str,
    table: &SymbolTable,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    debug_assert_eq!(vocab.token_type(), TokenType::Symbols);
    let symbols = table.parse(text)?;
    let mut ids = Vec::with_capacity(symbols.len() + 2);
    ids.push(SOS_EOS);
    for s in symbols {
        ids.push(vocab.id_of(DataToken::Symbol(s)).unwrap_or(UNK));
    }
    ids.push(SOS_EOS);
    Ok(TokenSequence { ids })
}

/// Inverse of tokenization on in-vocabulary inputs.
///
/// Bytes are reassembled and decoded as UTF-8 with U+FFFD for invalid
/// sequences. Symbol ids have no text form without a language table, so they
/// render as their vocabulary entries joined by spaces.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    match vocab.token_type() {
        TokenType::Bytes => {
            let bytes: Vec<u8> = seq
                .ids
                .iter()
                .filter_map(|&id| match vocab.token_of(id) {
                    Some(DataToken::Byte(b)) => Some(b),
                    _ => None,
                })
                .collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        TokenType::Symbols => seq
            .ids
            .iter()
            .filter(|&&id| !vocab.is_special(id))
            .map(|&id| vocab.rendering(id))
            .collect::<Vec<_>>()
            .join(" "),
    }
}
