use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> String;
    /// Token inserted between concatenated documents, if the vocabulary has one.
    fn separator(&self) -> Option<u32>;
}

/// Raw UTF-8 bytes plus one document-separator token.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const SEPARATOR: u32 = 256;
    pub const VOCAB_SIZE: usize = 257;
}

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Separator tokens decode to nothing; invalid UTF-8 is replaced.
    fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn separator(&self) -> Option<u32> {
        Some(Self::SEPARATOR)
    }
}

const WORD_START: char = '\u{2581}';

/// Greedy longest-match tokenizer over a SentencePiece-style vocabulary file:
/// one piece per line, optionally followed by a tab and a score. Spaces are
/// written as U+2581, as SentencePiece does.
#[derive(Clone, Debug)]
pub struct VocabTokenizer {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
    unk: Option<u32>,
    separator: Option<u32>,
}

impl VocabTokenizer {
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::Data("empty vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary piece {p:?}")));
            }
        }
        let max_piece_chars = pieces.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        let unk = index.get("<unk>").copied();
        let separator = ["</s>", "<sep>"].iter().find_map(|s| index.get(*s).copied());
        Ok(Self { pieces, index, max_piece_chars, unk, separator })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pieces = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.split('\t').next().unwrap_or(l).to_string())
            .collect();
        Self::from_pieces(pieces).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })
    }
}

impl Tokenizer for VocabTokenizer {
    fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    /// Characters with no covering piece map to `<unk>` (or are skipped when
    /// the vocabulary has none).
    fn encode(&self, text: &str) -> Vec<u32> {
        let norm: Vec<char> = std::iter::once(WORD_START)
            .chain(text.chars().map(|c| if c == ' ' { WORD_START } else { c }))
            .collect();
        let mut out = Vec::new();
        let mut i = 0;
        let mut buf = String::new();
        while i < norm.len() {
            let mut matched = None;
            for len in (1..=self.max_piece_chars.min(norm.len() - i)).rev() {
                buf.clear();
                buf.extend(&norm[i..i + len]);
                if let Some(&id) = self.index.get(&buf) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.extend(self.unk);
                    i += 1;
                }
            }
        }
        out
    }

    fn decode(&self, ids: &[u32]) -> String {
        let s: String = ids
            .iter()
            .filter_map(|&i| self.pieces.get(i as usize))
            .filter(|p| !(p.starts_with('<') && p.ends_with('>')))
            .flat_map(|p| p.chars())
            .map(|c| if c == WORD_START { ' ' } else { c })
            .collect();
        s.strip_prefix(' ').map(str::to_string).unwrap_or(s)
    }

    fn separator(&self) -> Option<u32> {
        self.separator
    }
}
