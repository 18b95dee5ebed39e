//! Wordpiece vocabulary, greedy tokenizer, and slot-label projection.
//!
//! Pieces follow the usual subword convention: a word's first piece is the
//! bare string, every continuation piece carries the `##` prefix and rejoins
//! without a space. Tokenization is greedy longest-match-first and falls
//! back to `[UNK]` for the whole word when any position cannot be matched.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]"];
const CONT: &str = "##";

pub fn is_special(id: u32) -> bool {
    id < 4
}

/// Token inventory shared by the acoustic output layer and the semantic
/// input embedder. Ids are dense in `[0, len)`, specials occupy 0..4.
#[derive(Debug, Clone)]
pub struct WordpieceVocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl WordpieceVocab {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate piece {p:?}")));
            }
            let body = p.strip_prefix(CONT).unwrap_or(p);
            max_piece_chars = max_piece_chars.max(body.chars().count());
        }
        Ok(WordpieceVocab {
            pieces,
            index,
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    /// Greedy longest-match-first segmentation of one lowercase word.
    /// Any uncovered position collapses the whole word to `[UNK]`.
    pub fn tokenize(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return vec![UNK];
        }
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let limit = (chars.len() - pos).min(self.max_piece_chars);
            let mut matched = None;
            for take in (1..=limit).rev() {
                let body: String = chars[pos..pos + take].iter().collect();
                let candidate = if pos == 0 {
                    body
                } else {
                    format!("{CONT}{body}")
                };
                if let Some(&id) = self.index.get(&candidate) {
                    matched = Some((id, take));
                    break;
                }
            }
            match matched {
                Some((id, take)) => {
                    out.push(id);
                    pos += take;
                }
                None => return vec![UNK],
            }
        }
        out
    }

    /// Tokenizes a word sequence, returning flat piece ids and the piece
    /// count per word (the word-to-piece alignment).
    pub fn tokenize_words(&self, words: &[String]) -> (Vec<u32>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut counts = Vec::with_capacity(words.len());
        for w in words {
            let pieces = self.tokenize(w);
            counts.push(pieces.len());
            ids.extend(pieces);
        }
        (ids, counts)
    }

    /// Inverse of tokenization for in-vocabulary text: drops specials,
    /// strips the continuation prefix, and re-inserts word boundaries.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if is_special(id) {
                continue;
            }
            let piece = match self.piece(id) {
                Some(p) => p,
                None => continue,
            };
            if let Some(body) = piece.strip_prefix(CONT) {
                out.push_str(body);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
        out
    }

    /// One piece per line, line number = id; specials on lines 0-3.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for p in &self.pieces {
            let _ = writeln!(body, "{p}");
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let pieces: Vec<String> = body.lines().map(str::to_owned).collect();
        if pieces.len() < 4 || pieces[..4] != SPECIALS.map(str::to_owned) {
            return Err(Error::format(format!(
                "vocab file {} must start with the four special tokens",
                path.display()
            )));
        }
        Self::from_pieces(pieces)
    }
}

/// Builds a vocabulary from a word corpus: the four specials, every single
/// character (in both initial and continuation form, so tokenization can
/// always fall through to characters), then the most frequent substrings
/// until `max_size`. Ties break lexicographically, so the result is
/// deterministic for a fixed corpus.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], max_size: usize) -> Result<WordpieceVocab> {
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::data("empty corpus for vocab construction"));
    }

    // Count every substring occurrence, keyed by its piece form.
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut charset: BTreeMap<char, ()> = BTreeMap::new();
    for sentence in corpus {
        for word in sentence {
            let chars: Vec<char> = word.as_ref().chars().collect();
            for c in &chars {
                charset.insert(*c, ());
            }
            for start in 0..chars.len() {
                for end in start + 1..=chars.len() {
                    let body: String = chars[start..end].iter().collect();
                    let piece = if start == 0 {
                        body
                    } else {
                        format!("{CONT}{body}")
                    };
                    *counts.entry(piece).or_insert(0) += 1;
                }
            }
        }
    }

    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    for (c, ()) in &charset {
        pieces.push(c.to_string());
        pieces.push(format!("{CONT}{c}"));
    }
    if pieces.len() > max_size {
        return Err(Error::config(format!(
            "max_size {max_size} below the {} specials+characters floor",
            pieces.len()
        )));
    }

    let mut ranked: Vec<(&String, &u64)> = counts.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let existing: std::collections::HashSet<String> = pieces.iter().cloned().collect();
    for (piece, _) in ranked {
        if pieces.len() >= max_size {
            break;
        }
        if existing.contains(piece.as_str()) {
            continue;
        }
        pieces.push(piece.clone());
    }

    WordpieceVocab::from_pieces(pieces)
}

/// Slot label inventory; index 0 is the distinguished null label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotLabelSet {
    labels: Vec<String>,
}

pub const NULL_LABEL: u32 = 0;

impl SlotLabelSet {
    /// Builds from non-null label names; "null" is prepended at index 0.
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut labels = vec!["null".to_string()];
        for n in names {
            let n = n.as_ref();
            if labels.iter().any(|l| l == n) {
                return Err(Error::data(format!("duplicate slot label {n:?}")));
            }
            labels.push(n.to_string());
        }
        Ok(SlotLabelSet { labels })
    }

    pub fn from_full_list(labels: Vec<String>) -> Result<Self> {
        if labels.first().map(String::as_str) != Some("null") {
            return Err(Error::data("slot label list must start with \"null\""));
        }
        Ok(SlotLabelSet { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.labels.iter().position(|l| l == name).map(|i| i as u32)
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }
}

/// Intent inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentSet {
    intents: Vec<String>,
}

impl IntentSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::data("intent set must be non-empty"));
        }
        let mut intents = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            if intents.iter().any(|l| l == n) {
                return Err(Error::data(format!("duplicate intent {n:?}")));
            }
            intents.push(n.to_string());
        }
        Ok(IntentSet { intents })
    }

    pub fn len(&self) -> usize {
        self.intents.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.intents.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.intents
            .iter()
            .position(|l| l == name)
            .map(|i| i as u32)
    }

    pub fn names(&self) -> &[String] {
        &self.intents
    }
}

/// A gold slot over word indices: half-open `[start_word, end_word)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub label: u32,
    pub start_word: usize,
    pub end_word: usize,
}

/// Expands word-level slot spans onto the wordpiece sequence: every piece
/// of a slot's words receives that slot's label, everything else null.
///
/// `pieces_per_word` is the alignment from [`WordpieceVocab::tokenize_words`].
pub fn project_slot_labels(spans: &[WordSpan], pieces_per_word: &[usize]) -> Result<Vec<u32>> {
    let total: usize = pieces_per_word.iter().sum();
    let mut word_claimed = vec![false; pieces_per_word.len()];
    let mut labels = vec![NULL_LABEL; total];

    // Piece offset of each word.
    let mut offsets = Vec::with_capacity(pieces_per_word.len() + 1);
    let mut acc = 0;
    for &c in pieces_per_word {
        offsets.push(acc);
        acc += c;
    }
    offsets.push(acc);

    for span in spans {
        if span.start_word >= span.end_word || span.end_word > pieces_per_word.len() {
            return Err(Error::data(format!(
                "slot span {}..{} out of bounds for {} words",
                span.start_word,
                span.end_word,
                pieces_per_word.len()
            )));
        }
        for w in span.start_word..span.end_word {
            if word_claimed[w] {
                return Err(Error::data(format!("overlapping slot spans at word {w}")));
            }
            word_claimed[w] = true;
            for p in offsets[w]..offsets[w + 1] {
                labels[p] = span.label;
            }
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn single_word_corpus() {
        let v = build_vocab(&[sent(&["a"])], 16).unwrap();
        assert_eq!(v.piece(0), Some("[PAD]"));
        assert_eq!(v.piece(3), Some("[EOS]"));
        assert!(v.id("a").is_some());
        assert!(v.id("##a").is_some());
    }

    #[test]
    fn vocab_respects_max_size_and_determinism() {
        let corpus = vec![sent(&["playing", "played", "plays"]), sent(&["play"])];
        let a = build_vocab(&corpus, 40).unwrap();
        let b = build_vocab(&corpus, 40).unwrap();
        assert!(a.len() <= 40);
        assert_eq!(
            (0..a.len() as u32)
                .map(|i| a.piece(i).unwrap().to_owned())
                .collect::<Vec<_>>(),
            (0..b.len() as u32)
                .map(|i| b.piece(i).unwrap().to_owned())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn vocab_too_small_errors() {
        let corpus = vec![sent(&["abcdefgh"])];
        assert!(build_vocab(&corpus, 8).is_err());
    }

    #[test]
    fn greedy_longest_match() {
        let v = WordpieceVocab::from_pieces(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(
                    ["play", "##ing", "p", "##l", "##a", "##y", "##i", "##n", "##g"]
                        .iter()
                        .map(|s| s.to_string()),
                )
                .collect(),
        )
        .unwrap();
        let ids = v.tokenize("playing");
        let pieces: Vec<&str> = ids.iter().map(|&i| v.piece(i).unwrap()).collect();
        assert_eq!(pieces, vec!["play", "##ing"]);
        // Fully-in-vocab word is a single id.
        assert_eq!(v.tokenize("play").len(), 1);
        // Uncovered character collapses to UNK.
        assert_eq!(v.tokenize("plaz"), vec![UNK]);
    }

    #[test]
    fn tokenize_never_empty() {
        let v = build_vocab(&[sent(&["hi"])], 16).unwrap();
        assert!(!v.tokenize("h").is_empty());
        assert!(!v.tokenize("zzz").is_empty());
    }

    #[test]
    fn detokenize_strips_specials_and_joins() {
        let v = build_vocab(&[sent(&["playing", "songs"])], 64).unwrap();
        let ids = v.tokenize("playing");
        assert_eq!(v.detokenize(&ids), "playing");
        let mut with_specials = vec![BOS];
        with_specials.extend(v.tokenize("hi".trim()));
        with_specials.push(EOS);
        // "hi" has uncovered chars here, so check with a covered word instead.
        let mut covered = vec![BOS];
        covered.extend(v.tokenize("songs"));
        covered.push(EOS);
        assert_eq!(v.detokenize(&covered), "songs");
    }

    #[test]
    fn round_trip_sentences() {
        let corpus = vec![
            sent(&["play", "the", "song", "hello", "now"]),
            sent(&["turn", "off", "kitchen", "lights"]),
        ];
        let v = build_vocab(&corpus, 200).unwrap();
        for sentence in &corpus {
            let (ids, _) = v.tokenize_words(sentence);
            assert_eq!(v.detokenize(&ids), sentence.join(" "));
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(&[sent(&["alpha", "beta"])], 64).unwrap();
        v.save(&path).unwrap();
        let loaded = WordpieceVocab::load(&path).unwrap();
        assert_eq!(v.len(), loaded.len());
        assert_eq!(loaded.tokenize("alpha"), v.tokenize("alpha"));
    }

    #[test]
    fn project_no_slots_all_null() {
        let labels = project_slot_labels(&[], &[2, 1, 3]).unwrap();
        assert_eq!(labels, vec![NULL_LABEL; 6]);
    }

    #[test]
    fn project_expands_multi_piece_words() {
        // word 1 has 2 pieces; a slot over it labels both.
        let spans = [WordSpan {
            label: 3,
            start_word: 1,
            end_word: 2,
        }];
        let labels = project_slot_labels(&spans, &[1, 2, 1]).unwrap();
        assert_eq!(labels, vec![0, 3, 3, 0]);
    }

    #[test]
    fn project_adjacent_distinct_labels() {
        let spans = [
            WordSpan {
                label: 1,
                start_word: 0,
                end_word: 1,
            },
            WordSpan {
                label: 2,
                start_word: 1,
                end_word: 2,
            },
        ];
        let labels = project_slot_labels(&spans, &[1, 1]).unwrap();
        assert_eq!(labels, vec![1, 2]);
    }

    #[test]
    fn project_rejects_overlap() {
        let spans = [
            WordSpan {
                label: 1,
                start_word: 0,
                end_word: 2,
            },
            WordSpan {
                label: 2,
                start_word: 1,
                end_word: 3,
            },
        ];
        assert!(project_slot_labels(&spans, &[1, 1, 1]).is_err());
    }

    #[test]
    fn label_sets() {
        let slots = SlotLabelSet::new(&["song", "artist"]).unwrap();
        assert_eq!(slots.id("null"), Some(0));
        assert_eq!(slots.id("song"), Some(1));
        assert_eq!(slots.len(), 3);
        let intents = IntentSet::new(&["play", "stop"]).unwrap();
        assert_eq!(intents.id("stop"), Some(1));
        assert!(IntentSet::new(&["a", "a"]).is_err());
    }
}
