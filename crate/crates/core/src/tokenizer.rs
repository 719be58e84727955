//! Byte-level BPE compatible with the GPT-2 tokenizer.
//!
//! Text is split with the GPT-2 pre-tokenization pattern
//! `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`,
//! each piece is mapped byte-by-byte onto printable unicode symbols, and the
//! ranked merges are applied lowest-rank-first. The pattern contains a
//! lookahead, which the `regex` crate does not support, so the alternation is
//! evaluated by a small hand-written scanner instead.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::{MERGES_FILE, VOCAB_FILE};

pub type TokenId = u32;

/// The ids of `)`, `))`, `)))` and `))))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTokenSet {
    pub ids: [TokenId; 4],
}

impl AnswerTokenSet {
    /// Id of the token made of `n` closing parentheses, `n` in 1..=4.
    pub fn closing(&self, n: usize) -> TokenId {
        self.ids[n - 1]
    }

    pub fn position(&self, id: TokenId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

pub struct Tokenizer {
    encoder: HashMap<String, TokenId>,
    decoder: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut chars = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    let mut table = ['\0'; 256];
    for (b, c) in printable.into_iter().zip(chars) {
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

struct Classes {
    letters: Regex,
    numbers: Regex,
    other: Regex,
    space: Regex,
}

fn classes() -> &'static Classes {
    static CLASSES: OnceLock<Classes> = OnceLock::new();
    CLASSES.get_or_init(|| Classes {
        letters: Regex::new(r"^\p{L}+").unwrap(),
        numbers: Regex::new(r"^\p{N}+").unwrap(),
        other: Regex::new(r"^[^\s\p{L}\p{N}]+").unwrap(),
        space: Regex::new(r"^\s+").unwrap(),
    })
}

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

/// Splits text into GPT-2 pre-tokens.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let cls = classes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
            out.push(&rest[..c.len()]);
            i += c.len();
            continue;
        }
        let skip = usize::from(rest.starts_with(' '));
        let body = &rest[skip..];
        let run = [&cls.letters, &cls.numbers, &cls.other]
            .iter()
            .find_map(|re| re.find(body).map(|m| m.end()));
        if let Some(len) = run {
            out.push(&rest[..skip + len]);
            i += skip + len;
            continue;
        }
        // whitespace: `\s+(?!\S)` then `\s+`
        let ws = cls.space.find(rest).map(|m| m.end()).unwrap_or_else(|| {
            // unreachable for valid classes; consume one char to make progress
            rest.chars().next().map(char::len_utf8).unwrap_or(1)
        });
        let end = if ws == rest.len() {
            ws
        } else {
            let last = rest[..ws].chars().next_back().map(char::len_utf8).unwrap_or(0);
            if ws > last {
                ws - last
            } else {
                ws
            }
        };
        out.push(&rest[..end]);
        i += end;
    }
    out
}

impl Tokenizer {
    /// Builds a tokenizer from `vocab.json` contents (token → id) and
    /// `merges.txt` contents (one ranked pair per line).
    pub fn from_strings(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let encoder: HashMap<String, TokenId> = serde_json::from_str(vocab_json)?;
        let n = encoder.values().map(|&v| v as usize + 1).max().unwrap_or(0);
        let mut decoder = vec![String::new(); n];
        for (tok, &id) in &encoder {
            decoder[id as usize] = tok.clone();
        }
        let mut merge_ranks = HashMap::new();
        for line in merges_txt.lines() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => {
                    let rank = merge_ranks.len();
                    merge_ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
                }
                _ => return Err(Error::Config(format!("malformed merge line {line:?}"))),
            }
        }
        let byte_to_char = bytes_to_unicode();
        let char_to_byte = byte_to_char
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        for c in byte_to_char {
            if !encoder.contains_key(&c.to_string()) {
                return Err(Error::Config(format!(
                    "vocabulary lacks byte symbol {c:?}; encoding would not be total"
                )));
            }
        }
        Ok(Self {
            encoder,
            decoder,
            merge_ranks,
            byte_to_char,
            char_to_byte,
        })
    }

    /// Loads `vocab.json` and `merges.txt` from a bundle directory.
    pub fn from_bundle(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::bundle(p, e.to_string()))
        };
        Self::from_strings(&read(VOCAB_FILE)?, &read(MERGES_FILE)?)
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len()
                    && self.merge_ranks.get(&(parts[i].clone(), parts[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", parts[i], parts[i + 1]));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for piece in pre_tokenize(text) {
            let mapped: String = piece.bytes().map(|b| self.byte_to_char[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                match self.encoder.get(&sym) {
                    Some(&id) => ids.push(id),
                    None => {
                        // merged symbol absent from the vocab: fall back to bytes
                        ids.extend(sym.chars().map(|c| self.encoder[&c.to_string()]));
                    }
                }
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .decoder
                .get(id as usize)
                .filter(|t| !t.is_empty())
                .ok_or_else(|| Error::Token(format!("id {id} outside vocabulary")))?;
            for c in tok.chars() {
                let b = self
                    .char_to_byte
                    .get(&c)
                    .ok_or_else(|| Error::Token(format!("symbol {c:?} in token {id}")))?;
                bytes.push(*b);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Id of `text` when it encodes to exactly one token.
    pub fn single_token(&self, text: &str) -> Option<TokenId> {
        match self.encode(text).as_slice() {
            [id] => Some(*id),
            _ => None,
        }
    }

    /// Decoded text of one token.
    pub fn token_text(&self, id: TokenId) -> Result<String> {
        self.decode(&[id])
    }

    pub fn answer_tokens(&self) -> Result<AnswerTokenSet> {
        let mut ids = [0; 4];
        for (n, slot) in ids.iter_mut().enumerate() {
            let s = ")".repeat(n + 1);
            *slot = self
                .single_token(&s)
                .ok_or_else(|| Error::Config(format!("{s:?} is not a single token")))?;
        }
        Ok(AnswerTokenSet { ids })
    }
}
