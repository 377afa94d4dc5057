//! GPT-2 byte-level BPE.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const END_OF_TEXT: &str = "<|endoftext|>";

const PRETOKENIZE: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

static BUNDLED_VOCAB: &str = include_str!("../../../assets/gpt2/encoder.json");
static BUNDLED_MERGES: &str = include_str!("../../../assets/gpt2/vocab.bpe");

/// Tokens `[start, end)` of a prompt and their decoded text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

impl TokenSpan {
    /// Position of the span's last token.
    pub fn last(&self) -> usize {
        self.end - 1
    }
}

pub struct BpeVocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

/// The reversible byte → printable-char table used by GPT-2.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from(b'!')..=u32::from(b'~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0u32;
    for b in 0..256u32 {
        let c = if printable(b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

impl BpeVocab {
    /// Build from the contents of `encoder.json` and `vocab.bpe`.
    pub fn from_strs(vocab_json: &str, merges: &str) -> Result<Self> {
        let token_to_id: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let mut id_to_token = vec![None; token_to_id.len()];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} for {tok:?} is not dense")))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Tokenizer(format!("duplicate id {id}")));
            }
        }
        let id_to_token = id_to_token
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Tokenizer("ids are not dense".into()))?;

        let mut merge_ranks = HashMap::new();
        for line in merges
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.is_empty())
        {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Tokenizer(format!("bad merge line {line:?}")))?;
            let rank = merge_ranks.len();
            merge_ranks
                .entry((a.to_string(), b.to_string()))
                .or_insert(rank);
        }

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            merge_ranks,
            byte_encoder,
            byte_decoder,
            pattern: Regex::new(PRETOKENIZE).expect("static pattern compiles"),
        })
    }

    pub fn from_files(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::from_strs(&read(vocab.as_ref())?, &read(merges.as_ref())?)
    }

    /// The GPT-2 vocabulary compiled into the crate.
    pub fn gpt2() -> Self {
        Self::from_strs(BUNDLED_VOCAB, BUNDLED_MERGES).expect("bundled vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn end_of_text(&self) -> Option<u32> {
        self.token_id(END_OF_TEXT)
    }

    fn bpe(&self, word: &str, out: &mut Vec<u32>) {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, at)) = best else { break };
            let (a, b) = (parts[at].clone(), parts[at + 1].clone());
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == a && parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
        }
        for p in parts {
            // every single byte-char is in the vocabulary, and merges only
            // produce vocabulary entries
            out.push(self.token_to_id[&p]);
        }
    }

    /// Encode text. Special tokens are not recognised; `<|endoftext|>` in
    /// the input is tokenised as ordinary text.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in self.pattern.find_iter(text) {
            let piece = piece.expect("pre-tokenizer pattern does not backtrack catastrophically");
            let mapped: String = piece
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            self.bpe(&mapped, &mut ids);
        }
        ids
    }

    /// Raw bytes of a token sequence.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .id_to_token
                .get(id as usize)
                .ok_or(Error::TokenOutOfRange {
                    id,
                    vocab: self.len(),
                })?;
            bytes.extend(tok.chars().map(|c| self.byte_decoder[&c]));
        }
        Ok(bytes)
    }

    /// Decode ids to text; byte sequences that are not valid UTF-8 on their
    /// own (a lone fragment of a multi-byte character) decode lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Locate the unique occurrence of `needle` among the tokens in `window`
    /// (defaults to the whole prompt) and return the minimal covering span.
    pub fn find_span(
        &self,
        prompt_ids: &[u32],
        needle: &str,
        window: Option<Range<usize>>,
    ) -> Result<TokenSpan> {
        let window = window.unwrap_or(0..prompt_ids.len());
        if window.end > prompt_ids.len() || window.start > window.end {
            return Err(Error::InvalidNode(format!(
                "search window {window:?} outside prompt of {} tokens",
                prompt_ids.len()
            )));
        }
        let mut starts = Vec::with_capacity(prompt_ids.len() + 1);
        let mut bytes = Vec::new();
        for &id in prompt_ids {
            starts.push(bytes.len());
            bytes.extend(self.decode_bytes(&[id])?);
        }
        starts.push(bytes.len());

        let needle_bytes = needle.as_bytes();
        if needle_bytes.is_empty() {
            return Err(Error::NeedleAbsent(needle.to_string()));
        }
        let (lo, hi) = (starts[window.start], starts[window.end]);
        let hits: Vec<usize> = (lo..hi.saturating_sub(needle_bytes.len() - 1))
            .filter(|&p| bytes[p..].starts_with(needle_bytes))
            .collect();
        let pos = match hits.as_slice() {
            [] => return Err(Error::NeedleAbsent(needle.to_string())),
            [p] => *p,
            _ => return Err(Error::NeedleAmbiguous(needle.to_string())),
        };
        let end_byte = pos + needle_bytes.len();
        let start = starts.partition_point(|&s| s <= pos) - 1;
        let end = starts.partition_point(|&s| s < end_byte);
        Ok(TokenSpan {
            start,
            end,
            surface: self.decode(&prompt_ids[start..end])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn vocab() -> &'static BpeVocab {
        static V: OnceLock<BpeVocab> = OnceLock::new();
        V.get_or_init(BpeVocab::gpt2)
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'A' as usize], 'A');
    }

    #[test]
    fn encodes_known_strings() {
        let v = vocab();
        assert_eq!(v.len(), 50257);
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode(" Paris"), vec![6342]);
        assert_eq!(
            v.encode("The capital of France is"),
            vec![464, 3139, 286, 4881, 318]
        );
        assert_eq!(v.end_of_text(), Some(50256));
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(matches!(
            v.decode(&[50257]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn finds_spans() {
        let v = vocab();
        let ids = v.encode("The capital of France is");
        let span = v.find_span(&ids, "France", None).unwrap();
        assert_eq!((span.start, span.end), (3, 4));
        assert_eq!(span.surface, " France");
        assert!(matches!(
            v.find_span(&ids, "Atlantis", None),
            Err(Error::NeedleAbsent(_))
        ));

        let ids = v.encode("The capital of France is Paris, the capital of France is");
        assert!(matches!(
            v.find_span(&ids, "France", None),
            Err(Error::NeedleAmbiguous(_))
        ));
        let n = ids.len();
        let span = v.find_span(&ids, "France", Some(n - 3..n)).unwrap();
        assert_eq!(span.end, n - 1);
    }

    #[test]
    fn span_covers_multi_token_needles() {
        let v = vocab();
        let ids = v.encode("The capital of Burkina Faso is");
        let span = v.find_span(&ids, "Burkina Faso", None).unwrap();
        assert!(span.end - span.start >= 2);
        assert!(span.surface.contains("Burkina Faso"));
    }
}
