//! Word-level and byte-level BPE tokenizers.
//!
//! Word mode segments whitespace-delimited chunks by greedy longest match
//! against the vocabulary. Word-internal continuation pieces carry a `##`
//! prefix in the vocabulary, punctuation characters are standalone tokens.
//!
//! BPE mode is GPT-2 style byte-level BPE: text is pre-split into
//! word/number/punctuation/whitespace pieces, each piece is mapped through the
//! printable byte alphabet and merged pairwise in rank order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("text piece {piece:?} cannot be encoded with this vocabulary")]
    UnencodableText { piece: String },
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("vocabulary ids are not dense in [0, {size}): missing id {missing}")]
    NonDenseVocab { size: usize, missing: u32 },
    #[error("malformed merges line {line}: {content:?}")]
    BadMerges { line: usize, content: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid vocabulary json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Word,
    Bpe,
}

/// Ids of the special tokens the pipeline relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Specials {
    pub bos: Option<u32>,
    pub eos: Option<u32>,
    pub pad: Option<u32>,
    /// Reserved placeholder token used to mark patch targets.
    pub filler: Option<u32>,
}

const BOS_NAMES: &[&str] = &["<bos>", "<s>", "<|endoftext|>"];
const EOS_NAMES: &[&str] = &["<eos>", "</s>", "<|endoftext|>"];
const PAD_NAMES: &[&str] = &["<pad>"];
const FILLER_NAMES: &[&str] = &["<x>"];

/// Punctuation that attaches to the preceding word when decoding in word mode.
const CLOSING_PUNCT: &[&str] = &[".", ",", "?", "!", ";", ":"];

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
    specials: Specials,
    longest_token_chars: usize,
}

impl Tokenizer {
    /// Word-mode tokenizer over an ordered token list; ids follow list order.
    pub fn word<S: AsRef<str>>(tokens: &[S]) -> Result<Self, TokenizerError> {
        let vocab = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_ref().to_string(), i as u32))
            .collect();
        Self::new(TokenizerMode::Word, vocab, Vec::new())
    }

    pub fn new(
        mode: TokenizerMode,
        vocab: HashMap<String, u32>,
        merges: Vec<(String, String)>,
    ) -> Result<Self, TokenizerError> {
        let size = vocab.len();
        let mut id_to_token = vec![None; size];
        for (tok, &id) in &vocab {
            match id_to_token.get_mut(id as usize) {
                Some(slot) => *slot = Some(tok.clone()),
                None => return Err(TokenizerError::NonDenseVocab { size, missing: id }),
            }
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                t.ok_or(TokenizerError::NonDenseVocab {
                    size,
                    missing: i as u32,
                })
            })
            .collect::<Result<_, _>>()?;

        let find = |names: &[&str]| names.iter().find_map(|n| vocab.get(*n).copied());
        let mut specials = Specials {
            bos: find(BOS_NAMES),
            eos: find(EOS_NAMES),
            pad: find(PAD_NAMES),
            filler: find(FILLER_NAMES),
        };
        let merge_ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        let longest_token_chars = id_to_token
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(0);
        let mut tok = Self {
            mode,
            vocab,
            id_to_token,
            merges,
            merge_ranks,
            specials,
            longest_token_chars,
        };
        if specials.filler.is_none() {
            specials.filler = tok
                .encode_continuation("x")
                .ok()
                .filter(|ids| ids.len() == 1)
                .map(|ids| ids[0]);
            tok.specials = specials;
        }
        Ok(tok)
    }

    /// Loads a vocabulary JSON map and an optional newline-delimited merges file.
    pub fn from_files(
        mode: TokenizerMode,
        vocab_path: &Path,
        merges_path: Option<&Path>,
    ) -> Result<Self, TokenizerError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| TokenizerError::Io { path, source }
        };
        let vocab_text = std::fs::read_to_string(vocab_path).map_err(io(vocab_path))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)?;
        let merges = match merges_path {
            Some(p) => parse_merges(&std::fs::read_to_string(p).map_err(io(p))?)?,
            None => Vec::new(),
        };
        Self::new(mode, vocab, merges)
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn token_str(&self, id: u32) -> Result<&str, TokenizerError> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TokenizerError::UnknownId(id))
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Vocabulary as a JSON object (token → id), keys sorted.
    pub fn vocab_json(&self) -> String {
        let sorted: std::collections::BTreeMap<&str, u32> =
            self.vocab.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        serde_json::to_string_pretty(&sorted).expect("string map serializes")
    }

    pub fn merges_text(&self) -> String {
        let mut out = String::new();
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        out
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        match self.mode {
            TokenizerMode::Word => self.encode_word(text),
            TokenizerMode::Bpe => self.encode_bpe(text),
        }
    }

    /// Encodes `word` as it appears after a space inside running text.
    pub fn encode_continuation(&self, word: &str) -> Result<Vec<u32>, TokenizerError> {
        match self.mode {
            TokenizerMode::Word => self.encode_word(word),
            TokenizerMode::Bpe => self.encode_bpe(&format!(" {word}")),
        }
    }

    /// `encode` with a leading BOS when the vocabulary defines one.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut ids: Vec<u32> = self.specials.bos.into_iter().collect();
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let toks = ids
            .iter()
            .map(|&id| self.token_str(id))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(match self.mode {
            TokenizerMode::Word => decode_word_pieces(&toks),
            TokenizerMode::Bpe => decode_bpe_pieces(&toks),
        })
    }

    /// Decodes, dropping BOS/EOS/PAD ids.
    pub fn decode_text(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let s = self.specials;
        let kept: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|id| Some(*id) != s.bos && Some(*id) != s.eos && Some(*id) != s.pad)
            .collect();
        self.decode(&kept)
    }

    fn encode_word(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut ids = Vec::new();
        for chunk in text.split_whitespace() {
            if let Some(&id) = self.vocab.get(chunk) {
                ids.push(id);
                continue;
            }
            for seg in split_word_chunk(chunk) {
                if seg.chars().all(char::is_alphanumeric) {
                    self.greedy_segment(seg, &mut ids)?;
                } else {
                    let id =
                        self.vocab
                            .get(seg)
                            .ok_or_else(|| TokenizerError::UnencodableText {
                                piece: seg.to_string(),
                            })?;
                    ids.push(*id);
                }
            }
        }
        Ok(ids)
    }

    /// Greedy longest-match segmentation of one alphanumeric run.
    fn greedy_segment(&self, run: &str, out: &mut Vec<u32>) -> Result<(), TokenizerError> {
        let chars: Vec<(usize, char)> = run.char_indices().collect();
        let mut start = 0;
        while start < chars.len() {
            let max_len = (chars.len() - start).min(self.longest_token_chars);
            let byte_start = chars[start].0;
            let mut found = None;
            for len in (1..=max_len).rev() {
                let byte_end = chars.get(start + len).map_or(run.len(), |c| c.0);
                let piece = &run[byte_start..byte_end];
                let key = if start == 0 {
                    self.vocab.get(piece)
                } else {
                    self.vocab.get(&format!("##{piece}"))
                };
                if let Some(&id) = key {
                    found = Some((len, id));
                    break;
                }
            }
            let (len, id) = found.ok_or_else(|| TokenizerError::UnencodableText {
                piece: run.to_string(),
            })?;
            out.push(id);
            start += len;
        }
        Ok(())
    }

    fn encode_bpe(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let table = byte_to_unicode();
        let mut ids = Vec::new();
        for piece in pretokenize_bpe(text) {
            let mapped: Vec<String> = piece
                .bytes()
                .map(|b| table[b as usize].to_string())
                .collect();
            for sym in self.apply_merges(mapped) {
                let id = self
                    .vocab
                    .get(&sym)
                    .ok_or_else(|| TokenizerError::UnencodableText { piece: sym.clone() })?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    /// Repeatedly merges the lowest-ranked adjacent pair (all occurrences, left
    /// to right) until no ranked pair remains.
    pub fn apply_merges(&self, mut symbols: Vec<String>) -> Vec<String> {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w[0].clone(), w[1].clone()))
                })
                .min_by_key(|(r, _, _)| *r);
            let Some((_, a, b)) = best else {
                return symbols;
            };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
    }
}

pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>, TokenizerError> {
    let mut merges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with("#version") || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()))
            }
            _ => {
                return Err(TokenizerError::BadMerges {
                    line: i + 1,
                    content: line.to_string(),
                })
            }
        }
    }
    Ok(merges)
}

/// Splits a whitespace-free chunk into alphanumeric runs and single
/// punctuation characters.
fn split_word_chunk(chunk: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, c) in chunk.char_indices() {
        if c.is_alphanumeric() {
            run_start.get_or_insert(i);
        } else {
            if let Some(s) = run_start.take() {
                out.push(&chunk[s..i]);
            }
            out.push(&chunk[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = run_start {
        out.push(&chunk[s..]);
    }
    out
}

fn decode_word_pieces(toks: &[&str]) -> String {
    let mut out = String::new();
    let mut quote_open = false;
    let mut after_open_quote = false;
    for &tok in toks {
        if let Some(rest) = tok.strip_prefix("##") {
            if !out.is_empty() && !rest.is_empty() {
                out.push_str(rest);
                after_open_quote = false;
                continue;
            }
        }
        let is_quote = tok == "\"";
        let glue = out.is_empty()
            || after_open_quote
            || CLOSING_PUNCT.contains(&tok)
            || (is_quote && quote_open);
        if !glue {
            out.push(' ');
        }
        out.push_str(tok);
        after_open_quote = is_quote && !quote_open;
        if is_quote {
            quote_open = !quote_open;
        }
    }
    out
}

fn decode_bpe_pieces(toks: &[&str]) -> String {
    let inverse: HashMap<char, u8> = byte_to_unicode()
        .iter()
        .enumerate()
        .map(|(b, &c)| (c, b as u8))
        .collect();
    let mut bytes = Vec::new();
    for tok in toks {
        for c in tok.chars() {
            match inverse.get(&c) {
                Some(&b) => bytes.push(b),
                None => {
                    let mut buf = [0u8; 4];
                    bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                }
            }
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

/// GPT-2's reversible byte → printable-char table.
pub fn byte_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (b'!' as u32..=b'~' as u32).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut n = 0;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).expect("latin-1 is valid")
        } else {
            let c = char::from_u32(256 + n).expect("valid codepoint");
            n += 1;
            c
        };
    }
    table
}

#[derive(Clone, Copy, PartialEq)]
enum CharClass {
    Letter,
    Number,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Number
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Hand-rolled equivalent of the GPT-2 split pattern
/// `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`.
fn pretokenize_bpe(text: &str) -> Vec<&str> {
    const CONTRACTIONS: &[&str] = &["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |c| c.0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let rest = &text[chars[i].0..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
            let n = c.chars().count();
            out.push(&text[byte_at(i)..byte_at(i + n)]);
            i += n;
            continue;
        }
        let (c0, _) = (chars[i].1, ());
        let lead_space = c0 == ' '
            && chars
                .get(i + 1)
                .is_some_and(|&(_, c)| class_of(c) != CharClass::Space);
        let body = if lead_space { i + 1 } else { i };
        let cls = class_of(chars[body].1);
        if cls != CharClass::Space {
            let mut j = body + 1;
            while j < chars.len() && class_of(chars[j].1) == cls {
                j += 1;
            }
            out.push(&text[byte_at(i)..byte_at(j)]);
            i = j;
            continue;
        }
        let mut j = i;
        while j < chars.len() && class_of(chars[j].1) == CharClass::Space {
            j += 1;
        }
        let end = if j == chars.len() || j - i == 1 {
            j
        } else {
            j - 1
        };
        out.push(&text[byte_at(i)..byte_at(end)]);
        i = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bpe_toy() -> Tokenizer {
        let vocab: HashMap<String, u32> = ["b", "r", "o", "w", "br", "bro", "ow"]
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), i as u32))
            .collect();
        let merges = parse_merges("#version: 0.2\nb r\nbr o\no w\n").unwrap();
        Tokenizer::new(TokenizerMode::Bpe, vocab, merges).unwrap()
    }

    #[test]
    fn word_mode_direct_lookup() {
        let t = Tokenizer::word(&["the", "purple", "broccoli"]).unwrap();
        assert_eq!(t.encode("the purple broccoli").unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn word_mode_unknown_word_errors() {
        let t = Tokenizer::word(&["the"]).unwrap();
        assert!(matches!(
            t.encode("the cat"),
            Err(TokenizerError::UnencodableText { .. })
        ));
    }

    #[test]
    fn word_mode_greedy_longest_match_with_continuations() {
        let t = Tokenizer::word(&["broccoli", "b", "##roccoli", "##s", "?"]).unwrap();
        assert_eq!(t.encode("broccolis?").unwrap(), vec![0, 3, 4]);
        assert_eq!(t.decode(&[0, 3, 4]).unwrap(), "broccolis?");
    }

    #[test]
    fn word_mode_decodes_running_example() {
        let words = [
            "The", "color", "of", "broccoli", "is", "green", "or", "purple", "?",
        ];
        let t = Tokenizer::word(&words).unwrap();
        let s = "The color of broccoli is green or purple?";
        assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
    }

    #[test]
    fn word_mode_quotes_roundtrip() {
        let t = Tokenizer::word(&["Replace", "with", "\"", "She", "or", "He", "."]).unwrap();
        let s = "Replace with \"She\" or \"He\".";
        assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
    }

    #[test]
    fn bpe_merges_follow_rank_order() {
        // Hand trace for "brow" with ranks (b r)=0, (br o)=1, (o w)=2:
        // [b r o w] -> [br o w] -> [bro w]; (o w) never fires because
        // rank 1 consumes the `o` first.
        let t = bpe_toy();
        let ids = t.encode("bro").unwrap();
        assert_eq!(ids, vec![t.token_id("bro").unwrap()]);
        let ids = t.encode("brow").unwrap();
        assert_eq!(
            ids,
            vec![t.token_id("bro").unwrap(), t.token_id("w").unwrap()]
        );
        let ids = t.encode("row").unwrap();
        assert_eq!(
            ids,
            vec![t.token_id("r").unwrap(), t.token_id("ow").unwrap()]
        );
        assert_eq!(t.decode(&t.encode("brow").unwrap()).unwrap(), "brow");
    }

    #[test]
    fn gpt2_pretokenizer_matches_reference_splits() {
        assert_eq!(
            pretokenize_bpe("Hello world, it's  2024!\n"),
            vec!["Hello", " world", ",", " it", "'s", " ", " 2024", "!", "\n"]
        );
        assert_eq!(pretokenize_bpe("a  b"), vec!["a", " ", " b"]);
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = byte_to_unicode();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
    }

    #[test]
    fn sparse_vocab_rejected() {
        let vocab: HashMap<String, u32> = [("a".to_string(), 0), ("b".to_string(), 2)].into();
        assert!(matches!(
            Tokenizer::new(TokenizerMode::Word, vocab, vec![]),
            Err(TokenizerError::NonDenseVocab { .. })
        ));
    }
}
