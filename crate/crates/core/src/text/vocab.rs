use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Number of byte-level base tokens; ids `0..256` are raw bytes.
pub const BYTE_TOKENS: u32 = 256;

/// Reserved control tokens, numbered directly after the byte range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    Image,
    NewlineSep,
    User,
    Assistant,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Bos,
        Special::Eos,
        Special::Pad,
        Special::Image,
        Special::NewlineSep,
        Special::User,
        Special::Assistant,
    ];

    pub fn id(self) -> TokenId {
        BYTE_TOKENS + Self::ALL.iter().position(|&s| s == self).unwrap() as u32
    }

    pub fn from_id(id: TokenId) -> Option<Self> {
        id.checked_sub(BYTE_TOKENS)
            .and_then(|i| Self::ALL.get(i as usize).copied())
    }

    /// Name used in the vocabulary file header.
    pub fn name(self) -> &'static str {
        match self {
            Special::Bos => "BOS",
            Special::Eos => "EOS",
            Special::Pad => "PAD",
            Special::Image => "IMAGE",
            Special::NewlineSep => "NEWLINE_SEP",
            Special::User => "USER",
            Special::Assistant => "ASSISTANT",
        }
    }

    /// How `decode` renders the token.
    pub fn literal(self) -> &'static str {
        match self {
            Special::Bos => "<|bos|>",
            Special::Eos => "<|eos|>",
            Special::Pad => "<|pad|>",
            Special::Image => "<|image|>",
            Special::NewlineSep => "<|sep|>",
            Special::User => "<|user|>",
            Special::Assistant => "<|assistant|>",
        }
    }
}

const FIRST_MERGE_ID: u32 = BYTE_TOKENS + Special::ALL.len() as u32;
const FILE_MAGIC: &str = "# vlchat vocab v1";

/// Byte-level vocabulary with optional learned merges.
///
/// Encoding picks the longest known piece at each position, so every byte
/// string is encodable and decoding is the plain concatenation of pieces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(TokenId, TokenId)>,
    /// Byte content of each non-special id, indexed by id (specials empty).
    pieces: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, TokenId>,
    max_piece: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::bytes_only()
    }
}

impl Vocab {
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges is always valid")
    }

    pub fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend(Special::ALL.iter().map(|_| Vec::new()));
        let mut lookup: HashMap<Vec<u8>, TokenId> =
            (0..=255u8).map(|b| (vec![b], b as TokenId)).collect();
        for (i, &(a, b)) in merges.iter().enumerate() {
            let id = FIRST_MERGE_ID + i as u32;
            let valid = |t: TokenId| t < id && Special::from_id(t).is_none();
            if !valid(a) || !valid(b) {
                return Err(Error::Vocab(format!(
                    "merge {i} ({a} {b}) references an undefined or special token"
                )));
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            lookup.entry(piece.clone()).or_insert(id);
            pieces.push(piece);
        }
        let max_piece = pieces.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Self {
            merges,
            pieces,
            lookup,
            max_piece,
        })
    }

    /// Learns `num_merges` byte-pair merges from a corpus.
    ///
    /// Text is pre-split into words (an optional leading space plus a run of
    /// letters, digits or other symbols) so merges never cross word edges.
    /// Frequency ties resolve to the smallest pair.
    pub fn train<'a, I>(texts: I, num_merges: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words: HashMap<Vec<TokenId>, u64> = HashMap::new();
        for text in texts {
            for w in pre_split(text) {
                *words
                    .entry(w.bytes().map(|b| b as TokenId).collect())
                    .or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<TokenId>, u64)> = words.into_iter().collect();
        words.sort();
        let mut merges = Vec::with_capacity(num_merges);
        for step in 0..num_merges {
            let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
            for (w, f) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += f;
                }
            }
            let Some((&best, _)) = counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            else {
                break;
            };
            let id = FIRST_MERGE_ID + step as u32;
            for (w, _) in &mut words {
                let mut out = Vec::with_capacity(w.len());
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && (w[i], w[i + 1]) == best {
                        out.push(id);
                        i += 2;
                    } else {
                        out.push(w[i]);
                        i += 1;
                    }
                }
                *w = out;
            }
            merges.push(best);
        }
        Self::from_merges(merges).expect("learned merges are well formed")
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_piece.min(bytes.len() - i);
            let (len, id) = (1..=longest)
                .rev()
                .find_map(|l| self.lookup.get(&bytes[i..i + l]).map(|&id| (l, id)))
                .expect("single bytes are always in the vocabulary");
            ids.push(id);
            i += len;
        }
        ids
    }

    /// Raw bytes of a token sequence; special tokens render as their literals.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if let Some(s) = Special::from_id(id) {
                out.extend_from_slice(s.literal().as_bytes());
            } else {
                let piece = self
                    .pieces
                    .get(id as usize)
                    .ok_or(Error::UnknownToken(id))?;
                out.extend_from_slice(piece);
            }
        }
        Ok(out)
    }

    /// Decodes to text; invalid UTF-8 from partial generations is replaced
    /// with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Vocabulary file: fixed special-token header, then one merge per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{FILE_MAGIC}").unwrap();
        out.push_str("[special]\n");
        for s in Special::ALL {
            writeln!(out, "{} {}", s.name(), s.id()).unwrap();
        }
        out.push_str("[merges]\n");
        for (a, b) in &self.merges {
            writeln!(out, "{a} {b}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(FILE_MAGIC) {
            return Err(Error::Vocab("missing vocabulary header line".into()));
        }
        if lines.next().map(str::trim) != Some("[special]") {
            return Err(Error::Vocab("missing [special] block".into()));
        }
        for s in Special::ALL {
            let line = lines
                .next()
                .ok_or_else(|| Error::Vocab("truncated [special] block".into()))?;
            let expected = format!("{} {}", s.name(), s.id());
            if line.trim() != expected {
                return Err(Error::Vocab(format!(
                    "special block line {line:?}, expected {expected:?}"
                )));
            }
        }
        if lines.next().map(str::trim) != Some("[merges]") {
            return Err(Error::Vocab("missing [merges] block".into()));
        }
        let mut merges = Vec::new();
        for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
            let mut parts = line.split_whitespace().map(str::parse::<TokenId>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => merges.push((a, b)),
                _ => return Err(Error::Vocab(format!("malformed merge line {line:?}"))),
            }
        }
        Self::from_merges(merges)
    }
}

fn pre_split(text: &str) -> Vec<&str> {
    #[derive(PartialEq, Clone, Copy)]
    enum Class {
        Alpha,
        Digit,
        Space,
        Other,
    }
    let class = |c: char| {
        if c.is_alphabetic() {
            Class::Alpha
        } else if c.is_numeric() {
            Class::Digit
        } else if c == ' ' {
            Class::Space
        } else {
            Class::Other
        }
    };
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev: Option<Class> = None;
    for (i, c) in text.char_indices() {
        let cls = class(c);
        let boundary = match prev {
            None => false,
            Some(Class::Space) => cls == Class::Space,
            Some(p) => p != cls || cls == Class::Other && c == '\n',
        };
        if boundary {
            out.push(&text[start..i]);
            start = i;
        }
        prev = Some(cls);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}
