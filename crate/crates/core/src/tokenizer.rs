//! Text tokenizers.
//!
//! The bundled [`ByteTokenizer`] maps UTF-8 bytes to ids `0..256`. A
//! [`VocabTokenizer`] adds multi-byte pieces from a vocabulary file on top of
//! the byte ids and segments text by greedy longest match.

use std::collections::HashMap;
use std::path::Path;

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn vocab_size(&self) -> u32;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn vocab_size(&self) -> u32 {
        256
    }
}

/// Greedy longest-match tokenizer with byte fallback.
///
/// Piece `i` of the vocabulary file (one piece per line, `\n` and `\\` may be
/// escaped) receives id `256 + i`.
#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    pieces: HashMap<Vec<u8>, u32>,
    max_piece: usize,
    size: u32,
}

impl VocabTokenizer {
    pub fn new<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut map = HashMap::new();
        let mut next = 256u32;
        for piece in pieces {
            let bytes = piece.as_ref().as_bytes().to_vec();
            if bytes.len() < 2 || map.contains_key(&bytes) {
                continue;
            }
            map.insert(bytes, next);
            next += 1;
        }
        let max_piece = map.keys().map(Vec::len).max().unwrap_or(1);
        Self {
            pieces: map,
            max_piece,
            size: next,
        }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(text.lines().filter(|l| !l.is_empty()).map(unescape)))
    }
}

fn unescape(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

impl Tokenizer for VocabTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let longest = (2..=self.max_piece.min(bytes.len() - i))
                .rev()
                .find_map(|len| self.pieces.get(&bytes[i..i + len]).map(|&id| (id, len)));
            match longest {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(bytes[i] as u32);
                    i += 1;
                }
            }
        }
        out
    }

    fn vocab_size(&self) -> u32 {
        self.size
    }
}
