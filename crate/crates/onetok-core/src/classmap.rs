//! Class-token mapping: each metric class must correspond to exactly one
//! vocabulary token, because the evaluator reads a single next-token logit per
//! class. `preflight_classes` verifies that; `apply_fallback` rewrites classes
//! that tokenize into multiple pieces onto single-token symbols ("0"-"9",
//! then "A"-"Z") and records the mapping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Binary,
    Multiclass,
    Multilabel,
}

impl ClassKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassKind::Binary => "binary",
            ClassKind::Multiclass => "multiclass",
            ClassKind::Multilabel => "multilabel",
        }
    }
}

impl std::str::FromStr for ClassKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(ClassKind::Binary),
            "multiclass" => Ok(ClassKind::Multiclass),
            "multilabel" => Ok(ClassKind::Multilabel),
            other => Err(format!("unknown class kind {other:?}")),
        }
    }
}

/// Ordered mapping from class labels to single vocabulary token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub kind: ClassKind,
    entries: Vec<ClassEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub label: String,
    pub token_id: u32,
}

impl ClassSet {
    /// Low-level constructor over explicit token ids. Callers own the
    /// guarantee that each id is a sensible target; `preflight_classes` is
    /// the checked path for class words.
    pub fn from_entries(
        kind: ClassKind,
        entries: Vec<(String, u32)>,
    ) -> Result<ClassSet, ClassMapError> {
        if entries.len() < 2 {
            return Err(ClassMapError::TooFewClasses { got: entries.len() });
        }
        let set = ClassSet {
            kind,
            entries: entries
                .into_iter()
                .map(|(label, token_id)| ClassEntry { label, token_id })
                .collect(),
        };
        assert_token_ids_distinct(&set)?;
        Ok(set)
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.token_id).collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }

    /// Same entries under a different kind tag.
    pub fn with_kind(&self, kind: ClassKind) -> ClassSet {
        ClassSet {
            kind,
            entries: self.entries.clone(),
        }
    }
}

/// Class label -> surface token string used as the actual target.
/// Identity for classes that were already single tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub entries: Vec<(String, String)>,
}

impl ClassMapping {
    pub fn identity(class_words: &[String]) -> Self {
        ClassMapping {
            entries: class_words.iter().map(|w| (w.clone(), w.clone())).collect(),
        }
    }

    pub fn surface_for(&self, label: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| s.as_str())
    }

    pub fn is_identity(&self) -> bool {
        self.entries.iter().all(|(l, s)| l == s)
    }
}

/// Result of the single-token preflight.
#[derive(Debug, Clone, PartialEq)]
pub enum Preflight {
    Ready(ClassSet),
    /// Class words that do not encode to exactly one token, with their piece
    /// counts.
    FallbackNeeded(Vec<(String, usize)>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassMapError {
    #[error("duplicate class word {word:?}")]
    DuplicateClassWord { word: String },
    #[error("need at least 2 class words, got {got}")]
    TooFewClasses { got: usize },
    #[error("class words {a:?} and {b:?} map to the same token id {id}")]
    TokenCollision { a: String, b: String, id: u32 },
    #[error("ran out of single-token fallback symbols after {assigned} of {needed} classes")]
    FallbackCapacity { assigned: usize, needed: usize },
    #[error("mapped surface {surface:?} for class {label:?} is not a single token ({pieces} pieces)")]
    MappedSurfaceNotAtomic {
        label: String,
        surface: String,
        pieces: usize,
    },
}

fn check_distinct(class_words: &[String]) -> Result<(), ClassMapError> {
    for (i, w) in class_words.iter().enumerate() {
        if class_words[..i].contains(w) {
            return Err(ClassMapError::DuplicateClassWord { word: w.clone() });
        }
    }
    Ok(())
}

/// Verify that every class word encodes to exactly one vocabulary token.
pub fn preflight_classes(
    vocab: &Vocabulary,
    class_words: &[String],
    kind: ClassKind,
) -> Result<Preflight, ClassMapError> {
    if class_words.len() < 2 {
        return Err(ClassMapError::TooFewClasses {
            got: class_words.len(),
        });
    }
    check_distinct(class_words)?;
    let mut offenders = Vec::new();
    let mut entries = Vec::with_capacity(class_words.len());
    for word in class_words {
        let ids = vocab.encode(word);
        if ids.len() == 1 {
            entries.push(ClassEntry {
                label: word.clone(),
                token_id: ids[0],
            });
        } else {
            offenders.push((word.clone(), ids.len()));
        }
    }
    if !offenders.is_empty() {
        return Ok(Preflight::FallbackNeeded(offenders));
    }
    let set = ClassSet { kind, entries };
    assert_token_ids_distinct(&set)?;
    Ok(Preflight::Ready(set))
}

fn assert_token_ids_distinct(set: &ClassSet) -> Result<(), ClassMapError> {
    for (i, e) in set.entries.iter().enumerate() {
        for other in &set.entries[..i] {
            if other.token_id == e.token_id {
                return Err(ClassMapError::TokenCollision {
                    a: other.label.clone(),
                    b: e.label.clone(),
                    id: e.token_id,
                });
            }
        }
    }
    Ok(())
}

/// Fallback symbols in assignment order: digits, then capital letters.
fn fallback_symbols() -> impl Iterator<Item = String> {
    ('0'..='9').chain('A'..='Z').map(|c| c.to_string())
}

/// Map class words onto single-token surfaces.
///
/// Binary metrics that need any fallback are remapped wholesale to the
/// conventional pair first -> "1", second -> "0". Multiclass and multilabel
/// metrics remap only the offending words, leaving already-atomic classes on
/// their own tokens.
pub fn apply_fallback(
    vocab: &Vocabulary,
    class_words: &[String],
    kind: ClassKind,
) -> Result<(ClassMapping, ClassSet), ClassMapError> {
    match preflight_classes(vocab, class_words, kind)? {
        Preflight::Ready(set) => Ok((ClassMapping::identity(class_words), set)),
        Preflight::FallbackNeeded(offenders) => {
            let mapping = if kind == ClassKind::Binary {
                ClassMapping {
                    entries: vec![
                        (class_words[0].clone(), "1".to_string()),
                        (class_words[1].clone(), "0".to_string()),
                    ],
                }
            } else {
                let offending: Vec<&str> = offenders.iter().map(|(w, _)| w.as_str()).collect();
                // token ids already taken by classes that stay on their own word
                let mut taken: Vec<u32> = class_words
                    .iter()
                    .filter(|w| !offending.contains(&w.as_str()))
                    .map(|w| vocab.encode(w)[0])
                    .collect();
                let mut symbols = fallback_symbols();
                let mut entries = Vec::with_capacity(class_words.len());
                for word in class_words {
                    if !offending.contains(&word.as_str()) {
                        entries.push((word.clone(), word.clone()));
                        continue;
                    }
                    let mut chosen = None;
                    for sym in symbols.by_ref() {
                        let ids = vocab.encode(&sym);
                        debug_assert_eq!(ids.len(), 1);
                        if !taken.contains(&ids[0]) {
                            taken.push(ids[0]);
                            chosen = Some(sym);
                            break;
                        }
                    }
                    match chosen {
                        Some(sym) => entries.push((word.clone(), sym)),
                        None => {
                            return Err(ClassMapError::FallbackCapacity {
                                assigned: entries.len(),
                                needed: class_words.len(),
                            })
                        }
                    }
                }
                ClassMapping { entries }
            };
            let set = class_set_with_mapping(vocab, class_words, kind, &mapping)?;
            Ok((mapping, set))
        }
    }
}

/// Build a ClassSet where each label's token comes from its mapped surface.
pub fn class_set_with_mapping(
    vocab: &Vocabulary,
    class_words: &[String],
    kind: ClassKind,
    mapping: &ClassMapping,
) -> Result<ClassSet, ClassMapError> {
    if class_words.len() < 2 {
        return Err(ClassMapError::TooFewClasses {
            got: class_words.len(),
        });
    }
    check_distinct(class_words)?;
    let mut entries = Vec::with_capacity(class_words.len());
    for word in class_words {
        let surface = mapping.surface_for(word).unwrap_or(word.as_str());
        let ids = vocab.encode(surface);
        if ids.len() != 1 {
            return Err(ClassMapError::MappedSurfaceNotAtomic {
                label: word.clone(),
                surface: surface.to_string(),
                pieces: ids.len(),
            });
        }
        entries.push(ClassEntry {
            label: word.clone(),
            token_id: ids[0],
        });
    }
    let set = ClassSet { kind, entries };
    assert_token_ids_distinct(&set)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    /// Vocabulary whose merges cover "true" but not "hallucinated".
    fn crafted_vocab() -> Vocabulary {
        let corpus = "true true true true true false false false false false \
                      respond with respond with respond with";
        Vocabulary::train(corpus, crate::tokenizer::BYTE_TOKENS + 40)
    }

    #[test]
    fn atomic_words_pass_preflight() {
        let v = Vocabulary::toy();
        match preflight_classes(v, &words(&["true", "false"]), ClassKind::Binary).unwrap() {
            Preflight::Ready(set) => {
                assert_eq!(set.len(), 2);
                assert_eq!(set.labels(), ["true", "false"]);
                for e in set.entries() {
                    assert_eq!(v.encode(&v.token_text(e.token_id)).len(), 1);
                }
            }
            other => panic!("expected Ready, got {other:?}"),
        }
    }

    #[test]
    fn multi_token_word_reports_fallback() {
        let v = crafted_vocab();
        let pieces = v.encode("hallucinated").len();
        assert!(pieces >= 3, "crafted vocab should split hallucinated, got {pieces}");
        match preflight_classes(&v, &words(&["true", "hallucinated"]), ClassKind::Binary).unwrap() {
            Preflight::FallbackNeeded(offenders) => {
                assert_eq!(offenders, vec![("hallucinated".to_string(), pieces)]);
            }
            other => panic!("expected FallbackNeeded, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_class_word_is_error() {
        let v = Vocabulary::toy();
        assert!(matches!(
            preflight_classes(v, &words(&["true", "true"]), ClassKind::Binary),
            Err(ClassMapError::DuplicateClassWord { .. })
        ));
    }

    #[test]
    fn binary_fallback_maps_to_digit_pair() {
        let v = crafted_vocab();
        let (mapping, set) =
            apply_fallback(&v, &words(&["true", "hallucinated"]), ClassKind::Binary).unwrap();
        assert_eq!(mapping.surface_for("true"), Some("1"));
        assert_eq!(mapping.surface_for("hallucinated"), Some("0"));
        assert_eq!(set.entries()[0].token_id, u32::from(b'1'));
        assert_eq!(set.entries()[1].token_id, u32::from(b'0'));
    }

    #[test]
    fn atomic_words_get_identity_mapping() {
        let v = Vocabulary::toy();
        let (mapping, _) = apply_fallback(v, &words(&["true", "false"]), ClassKind::Binary).unwrap();
        assert!(mapping.is_identity());
    }

    #[test]
    fn multiclass_fallback_touches_only_offenders() {
        let v = crafted_vocab();
        // "true" and "false" atomic in crafted vocab; "hallucinated" is not
        let class_words = words(&["true", "false", "hallucinated"]);
        let (mapping, set) = apply_fallback(&v, &class_words, ClassKind::Multiclass).unwrap();
        assert_eq!(mapping.surface_for("true"), Some("true"));
        assert_eq!(mapping.surface_for("false"), Some("false"));
        assert_eq!(mapping.surface_for("hallucinated"), Some("0"));
        let true_id = v.encode("true")[0];
        let false_id = v.encode("false")[0];
        assert_eq!(set.entries()[0].token_id, true_id);
        assert_eq!(set.entries()[1].token_id, false_id);
        assert_eq!(set.entries()[2].token_id, u32::from(b'0'));
    }

    #[test]
    fn fallback_symbols_skip_collisions() {
        // class word "0" is already the token the first fallback symbol wants
        let v = crafted_vocab();
        let class_words = words(&["0", "x", "hallucinated", "imagination"]);
        let (mapping, set) = apply_fallback(&v, &class_words, ClassKind::Multiclass).unwrap();
        assert_eq!(mapping.surface_for("hallucinated"), Some("1"));
        assert_eq!(mapping.surface_for("imagination"), Some("2"));
        let ids = set.token_ids();
        let mut dedup = ids.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(ids.len(), dedup.len());
    }
}
