//! Byte-level subword tokenizer.
//!
//! The base alphabet is the 256 byte values; learned merge rules combine
//! adjacent tokens into larger ones. Whitespace bytes (space, tab, newline,
//! carriage return) are always standalone single-byte tokens and merges never
//! cross them, so a word tokenizes the same way wherever it appears. That
//! property is what makes the class-token preflight meaningful: `true` is one
//! token or it is not, independent of context.
//!
//! `decode(encode(s)) == s` holds for every string because tokens partition
//! the input bytes exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

pub const BYTE_TOKENS: usize = 256;

/// Corpus the bundled toy vocabulary is trained on.
const TOY_CORPUS: &str = include_str!("../assets/corpus.txt");
/// Merge budget of the toy vocabulary: 256 byte tokens + 256 merges = 512 ids.
pub const TOY_VOCAB_SIZE: usize = 512;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("decoded bytes are not valid utf-8")]
    InvalidUtf8,
    #[error("vocabulary file parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// An immutable subword vocabulary: merge rules over the byte alphabet.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    /// Merge rules in priority order; rule i produces token id 256 + i.
    merges: Vec<(u32, u32)>,
    /// Byte string for every token id.
    token_bytes: Vec<Vec<u8>>,
    /// (left, right) -> merge rank.
    rank: HashMap<(u32, u32), u32>,
}

#[inline]
fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r')
}

impl Vocabulary {
    /// Vocabulary with no merges: every byte is its own token.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new())
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let mut token_bytes: Vec<Vec<u8>> = (0..BYTE_TOKENS).map(|b| vec![b as u8]).collect();
        let mut rank = HashMap::with_capacity(merges.len());
        for (i, &(l, r)) in merges.iter().enumerate() {
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            token_bytes.push(bytes);
            rank.insert((l, r), i as u32);
        }
        Vocabulary {
            merges,
            token_bytes,
            rank,
        }
    }

    /// Total number of token ids (256 byte tokens + merges).
    pub fn size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// The bytes a token id stands for.
    pub fn token(&self, id: u32) -> Result<&[u8], VocabError> {
        self.token_bytes
            .get(id as usize)
            .map(|v| v.as_slice())
            .ok_or(VocabError::IdOutOfRange {
                id,
                size: self.size(),
            })
    }

    /// Printable form of a token (lossy for non-utf8 byte tokens).
    pub fn token_text(&self, id: u32) -> String {
        match self.token(id) {
            Ok(bytes) => String::from_utf8_lossy(bytes).into_owned(),
            Err(_) => format!("<bad:{id}>"),
        }
    }

    /// Encode text into token ids. Deterministic; `encode("")` is empty.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len() / 2 + 1);
        let mut i = 0;
        while i < bytes.len() {
            if is_ws(bytes[i]) {
                out.push(bytes[i] as u32);
                i += 1;
                continue;
            }
            let start = i;
            while i < bytes.len() && !is_ws(bytes[i]) {
                i += 1;
            }
            self.encode_segment(&bytes[start..i], &mut out);
        }
        out
    }

    /// Apply merges to one whitespace-free segment, lowest rank first.
    fn encode_segment(&self, segment: &[u8], out: &mut Vec<u32>) {
        let mut toks: Vec<u32> = segment.iter().map(|&b| b as u32).collect();
        loop {
            // find the adjacent pair with the lowest merge rank
            let mut best: Option<(u32, usize)> = None;
            for w in 0..toks.len().saturating_sub(1) {
                if let Some(&r) = self.rank.get(&(toks[w], toks[w + 1])) {
                    if best.map_or(true, |(br, _)| r < br) {
                        best = Some((r, w));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (l, r) = self.merges[rank as usize];
            let merged = BYTE_TOKENS as u32 + rank;
            // merge all occurrences of this pair left to right
            let mut next = Vec::with_capacity(toks.len());
            let mut w = 0;
            while w < toks.len() {
                if w + 1 < toks.len() && toks[w] == l && toks[w + 1] == r {
                    next.push(merged);
                    w += 2;
                } else {
                    next.push(toks[w]);
                    w += 1;
                }
            }
            toks = next;
        }
        out.extend_from_slice(&toks);
    }

    /// Decode token ids back to raw bytes.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, VocabError> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token(id)?);
        }
        Ok(out)
    }

    /// Decode token ids back to text.
    pub fn decode(&self, ids: &[u32]) -> Result<String, VocabError> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|_| VocabError::InvalidUtf8)
    }

    /// Learn a vocabulary from a corpus: repeatedly merge the most frequent
    /// adjacent token pair (ties broken by smallest pair) until `vocab_size`
    /// ids exist or no pair occurs at least twice.
    pub fn train(corpus: &str, vocab_size: usize) -> Self {
        assert!(vocab_size >= BYTE_TOKENS);
        // unique whitespace-free segments with occurrence counts
        let mut seg_counts: HashMap<Vec<u8>, usize> = HashMap::new();
        for seg in corpus
            .split(|c: char| c.is_ascii_whitespace())
            .filter(|s| !s.is_empty())
        {
            *seg_counts.entry(seg.as_bytes().to_vec()).or_insert(0) += 1;
        }
        let mut words: Vec<(Vec<u32>, usize)> = seg_counts
            .into_iter()
            .map(|(bytes, count)| (bytes.iter().map(|&b| b as u32).collect(), count))
            .collect();
        words.sort(); // deterministic iteration order

        let mut merges: Vec<(u32, u32)> = Vec::new();
        while BYTE_TOKENS + merges.len() < vocab_size {
            let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (toks, count) in &words {
                for w in toks.windows(2) {
                    *pair_counts.entry((w[0], w[1])).or_insert(0) += count;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some((pair, _)) = best else { break };
            let new_id = (BYTE_TOKENS + merges.len()) as u32;
            merges.push(pair);
            for (toks, _) in words.iter_mut() {
                let mut next = Vec::with_capacity(toks.len());
                let mut w = 0;
                while w < toks.len() {
                    if w + 1 < toks.len() && toks[w] == pair.0 && toks[w + 1] == pair.1 {
                        next.push(new_id);
                        w += 2;
                    } else {
                        next.push(toks[w]);
                        w += 1;
                    }
                }
                *toks = next;
            }
        }
        Self::from_merges(merges)
    }

    /// The bundled toy vocabulary (512 ids), trained once per process.
    pub fn toy() -> &'static Vocabulary {
        static TOY: OnceLock<Vocabulary> = OnceLock::new();
        TOY.get_or_init(|| Vocabulary::train(TOY_CORPUS, TOY_VOCAB_SIZE))
    }

    // -- vocabulary file format -------------------------------------------

    /// Serialize to the line-oriented vocabulary format:
    /// a header line, then one `merge <left> <right>` line per rule.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str("onetok-vocab v1\n");
        out.push_str(&format!("merges {}\n", self.merges.len()));
        for &(l, r) in &self.merges {
            out.push_str(&format!("merge {l} {r}\n"));
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "onetok-vocab v1")) => {}
            Some((n, other)) => {
                return Err(VocabError::Parse {
                    line: n + 1,
                    message: format!("bad header {other:?}"),
                })
            }
            None => {
                return Err(VocabError::Parse {
                    line: 1,
                    message: "empty file".into(),
                })
            }
        }
        let declared: usize = match lines.next() {
            Some((n, line)) => line
                .strip_prefix("merges ")
                .and_then(|v| v.parse().ok())
                .ok_or(VocabError::Parse {
                    line: n + 1,
                    message: format!("expected `merges <count>`, got {line:?}"),
                })?,
            None => {
                return Err(VocabError::Parse {
                    line: 2,
                    message: "missing merge count".into(),
                })
            }
        };
        let mut merges = Vec::with_capacity(declared);
        for (n, line) in lines {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 3 || parts[0] != "merge" {
                return Err(VocabError::Parse {
                    line: n + 1,
                    message: format!("expected `merge <left> <right>`, got {line:?}"),
                });
            }
            let l: u32 = parts[1].parse().map_err(|_| VocabError::Parse {
                line: n + 1,
                message: format!("bad left id {:?}", parts[1]),
            })?;
            let r: u32 = parts[2].parse().map_err(|_| VocabError::Parse {
                line: n + 1,
                message: format!("bad right id {:?}", parts[2]),
            })?;
            let next_id = (BYTE_TOKENS + merges.len()) as u32;
            if l >= next_id || r >= next_id {
                return Err(VocabError::Parse {
                    line: n + 1,
                    message: format!("merge ({l},{r}) references an id not yet defined"),
                });
            }
            merges.push((l, r));
        }
        if merges.len() != declared {
            return Err(VocabError::Parse {
                line: 2,
                message: format!("declared {declared} merges, found {}", merges.len()),
            });
        }
        Ok(Self::from_merges(merges))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_plain_text() {
        let v = Vocabulary::toy();
        let text = "true or false";
        assert_eq!(v.decode(&v.encode(text)).unwrap(), text);
    }

    #[test]
    fn empty_encodes_empty() {
        assert!(Vocabulary::toy().encode("").is_empty());
    }

    #[test]
    fn toy_vocab_has_expected_shape() {
        let v = Vocabulary::toy();
        assert_eq!(v.size(), TOY_VOCAB_SIZE);
        // key class words must be atomic in the toy vocab
        for word in ["true", "false", "positive", "negative", "neutral"] {
            assert_eq!(v.encode(word).len(), 1, "{word} should be a single token");
        }
    }

    #[test]
    fn whitespace_is_never_merged() {
        let v = Vocabulary::toy();
        let ids = v.encode("a b\nc\td");
        // every whitespace byte appears as its own token id
        let texts: Vec<String> = ids.iter().map(|&i| v.token_text(i)).collect();
        assert!(texts.contains(&" ".to_string()));
        assert!(texts.contains(&"\n".to_string()));
        assert!(texts.contains(&"\t".to_string()));
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let v = Vocabulary::toy();
        let bad = v.size() as u32 + 5;
        assert!(matches!(
            v.decode(&[bad]),
            Err(VocabError::IdOutOfRange { .. })
        ));
    }

    /// Brute-force oracle: repeatedly find the lowest-ranked pair by scanning
    /// the merge list in order, merge only the leftmost occurrence, repeat.
    fn oracle_encode(v: &Vocabulary, segment: &[u8]) -> Vec<u32> {
        let mut toks: Vec<u32> = segment.iter().map(|&b| b as u32).collect();
        'outer: loop {
            for (rank, &(l, r)) in v.merges().iter().enumerate() {
                for w in 0..toks.len().saturating_sub(1) {
                    if toks[w] == l && toks[w + 1] == r {
                        // check no lower-ranked pair exists anywhere
                        let lowest = v
                            .merges()
                            .iter()
                            .enumerate()
                            .take(rank)
                            .any(|(_, &(pl, pr))| {
                                toks.windows(2).any(|win| win[0] == pl && win[1] == pr)
                            });
                        if !lowest {
                            toks.splice(w..w + 2, [BYTE_TOKENS as u32 + rank as u32]);
                            continue 'outer;
                        }
                    }
                }
            }
            break;
        }
        toks
    }

    #[test]
    fn greedy_merge_matches_exhaustive_oracle() {
        // 50-merge toy vocab over a tiny corpus
        let corpus = "aa aaa aaaa abab ababab banana bandana cabana cdcd cdcdcd \
                      aa aaa aaaa abab ababab banana bandana cabana cdcd cdcdcd";
        let v = Vocabulary::train(corpus, BYTE_TOKENS + 50);
        let inputs = [
            "banana", "bandanana", "aaaaaaa", "ababab", "abcd", "cdcdab", "a", "", "bana",
            "nanabana", "cabanacd", "dcba",
        ];
        for input in inputs {
            let mut fast = Vec::new();
            v.encode_segment(input.as_bytes(), &mut fast);
            let slow = oracle_encode(&v, input.as_bytes());
            assert_eq!(fast, slow, "merge mismatch on {input:?}");
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::toy();
        let text = v.to_file_string();
        let back = Vocabulary::from_file_string(&text).unwrap();
        assert_eq!(v.merges(), back.merges());
        assert_eq!(text, back.to_file_string());
    }

    #[test]
    fn vocab_file_rejects_forward_reference() {
        let text = "onetok-vocab v1\nmerges 1\nmerge 300 50\n";
        assert!(matches!(
            Vocabulary::from_file_string(text),
            Err(VocabError::Parse { line: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_any_string(s in "\\PC*") {
            let v = Vocabulary::toy();
            prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
        }

        #[test]
        fn encode_is_deterministic(s in "[a-z ]{0,40}") {
            let v = Vocabulary::toy();
            prop_assert_eq!(v.encode(&s), v.encode(&s));
        }
    }
}
