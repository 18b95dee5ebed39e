//! Grammar-driven corpus generation, dataset splitting, and complexity
//! analysis.
//!
//! Corpora are synthesized from intent templates with slot placeholders.
//! Open slot types carry a second, disjoint "novel" lexicon used to
//! generate the held-out pool from which the hard split is selected: those
//! utterances contain word bigrams (and usually whole slot values) never
//! seen in training or validation data.

mod format;
mod presets;

pub use format::{
    ingest_fsc_csv, load_dataset, read_feat1, read_jsonl, write_dataset, write_feat1, write_jsonl,
    Dataset, DatasetManifest, FscData,
};
pub use presets::{desk_grammar, tiny_grammar};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{SluRng, Tensor};
use crate::text::{IntentSet, SlotLabelSet, WordSpan, WordpieceVocab};

/// FNV-1a 64-bit hash; used for stable per-utterance seeds and config hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One slot type: a closed value lexicon plus an optional novel lexicon
/// (disjoint values only ever used for held-out pool generation).
#[derive(Debug, Clone)]
pub struct SlotType {
    pub name: String,
    pub values: Vec<String>,
    pub novel_values: Vec<String>,
}

impl SlotType {
    pub fn is_open(&self) -> bool {
        !self.novel_values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Word(String),
    /// Index into [`Grammar::slot_types`].
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub parts: Vec<Part>,
}

#[derive(Debug, Clone)]
pub struct IntentSpec {
    pub name: String,
    pub templates: Vec<Template>,
}

/// Utterance grammar: intents with templates, slot types with lexicons,
/// and optional carrier phrases prepended to add contextual variety.
#[derive(Debug, Clone, Default)]
pub struct Grammar {
    pub intents: Vec<IntentSpec>,
    pub slot_types: Vec<SlotType>,
    pub carriers: Vec<Vec<String>>,
}

impl Grammar {
    pub fn new() -> Self {
        Grammar::default()
    }

    pub fn add_slot_type(
        &mut self,
        name: &str,
        values: Vec<String>,
        novel_values: Vec<String>,
    ) -> Result<usize> {
        if self.slot_types.iter().any(|s| s.name == name) {
            return Err(Error::data(format!("duplicate slot type {name:?}")));
        }
        self.slot_types.push(SlotType {
            name: name.to_string(),
            values,
            novel_values,
        });
        Ok(self.slot_types.len() - 1)
    }

    /// Adds an intent with templates written as `"play {song} by {artist}"`.
    /// Placeholders must reference already-declared slot types.
    pub fn add_intent(&mut self, name: &str, templates: &[&str]) -> Result<()> {
        if self.intents.iter().any(|i| i.name == name) {
            return Err(Error::data(format!("duplicate intent {name:?}")));
        }
        if templates.is_empty() {
            return Err(Error::data(format!("intent {name:?} has no templates")));
        }
        let mut parsed = Vec::with_capacity(templates.len());
        for t in templates {
            parsed.push(self.parse_template(t)?);
        }
        self.intents.push(IntentSpec {
            name: name.to_string(),
            templates: parsed,
        });
        Ok(())
    }

    fn parse_template(&self, template: &str) -> Result<Template> {
        let mut parts = Vec::new();
        for token in template.split_whitespace() {
            if let Some(inner) = token.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                let idx = self
                    .slot_types
                    .iter()
                    .position(|s| s.name == inner)
                    .ok_or_else(|| {
                        Error::data(format!("template references unknown slot type {inner:?}"))
                    })?;
                parts.push(Part::Slot(idx));
            } else {
                parts.push(Part::Word(token.to_lowercase()));
            }
        }
        if parts.is_empty() {
            return Err(Error::data("empty template"));
        }
        Ok(Template { parts })
    }

    pub fn validate(&self) -> Result<()> {
        if self.intents.is_empty() {
            return Err(Error::data("grammar has no intents"));
        }
        for intent in &self.intents {
            if intent.templates.is_empty() {
                return Err(Error::data(format!(
                    "intent {:?} has no templates",
                    intent.name
                )));
            }
        }
        Ok(())
    }

    pub fn intent_set(&self) -> Result<IntentSet> {
        IntentSet::new(&self.intents.iter().map(|i| i.name.clone()).collect::<Vec<_>>())
    }

    pub fn slot_label_set(&self) -> Result<SlotLabelSet> {
        SlotLabelSet::new(
            &self
                .slot_types
                .iter()
                .map(|s| s.name.clone())
                .collect::<Vec<_>>(),
        )
    }
}

/// A gold slot over word indices, half-open `[start_word, end_word)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldSlot {
    /// Id in the grammar's [`SlotLabelSet`] (never the null label).
    pub label: u32,
    pub value: String,
    pub start_word: usize,
    pub end_word: usize,
}

/// Generated utterance before tokenization and feature rendering.
#[derive(Debug, Clone)]
pub struct RawUtterance {
    pub id: String,
    pub words: Vec<String>,
    pub intent: u32,
    pub slots: Vec<GoldSlot>,
    /// External feature file, when features are not synthesized.
    pub features_path: Option<String>,
}

/// Fully prepared utterance: tokenized, labeled, with acoustic features.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<String>,
    pub pieces: Vec<u32>,
    pub piece_labels: Vec<u32>,
    pub intent: u32,
    pub slots: Vec<GoldSlot>,
    pub features: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ValueSource {
    Standard,
    /// Prefer the novel lexicon of open slot types.
    Novel,
}

fn generate_with(
    grammar: &Grammar,
    n: usize,
    seed: u64,
    prefix: &str,
    source: ValueSource,
) -> Result<Vec<RawUtterance>> {
    grammar.validate()?;
    if n == 0 {
        return Err(Error::config("corpus size must be at least 1"));
    }
    let labels = grammar.slot_label_set()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = SluRng::derive(seed, i as u64);
        let intent_idx = rng.below(grammar.intents.len());
        let intent = &grammar.intents[intent_idx];
        let template = &intent.templates[rng.below(intent.templates.len())];

        let mut words: Vec<String> = Vec::new();
        if !grammar.carriers.is_empty() && rng.bernoulli(0.4) {
            let carrier = &grammar.carriers[rng.below(grammar.carriers.len())];
            words.extend(carrier.iter().map(|w| w.to_lowercase()));
        }
        let mut slots = Vec::new();
        for part in &template.parts {
            match part {
                Part::Word(w) => words.push(w.clone()),
                Part::Slot(slot_idx) => {
                    let st = &grammar.slot_types[*slot_idx];
                    let pool = match source {
                        ValueSource::Novel if st.is_open() => &st.novel_values,
                        _ => &st.values,
                    };
                    if pool.is_empty() {
                        return Err(Error::data(format!(
                            "slot type {:?} has an empty lexicon",
                            st.name
                        )));
                    }
                    let value = pool[rng.below(pool.len())].to_lowercase();
                    let start_word = words.len();
                    for vw in value.split_whitespace() {
                        words.push(vw.to_string());
                    }
                    slots.push(GoldSlot {
                        label: labels.id(&st.name).expect("slot type registered"),
                        value,
                        start_word,
                        end_word: words.len(),
                    });
                }
            }
        }
        out.push(RawUtterance {
            id: format!("{prefix}-{i:06}"),
            words,
            intent: intent_idx as u32,
            slots,
            features_path: None,
        });
    }
    Ok(out)
}

/// Samples `n` utterances from the grammar's standard lexicons.
/// Deterministic per `(grammar, n, seed)`.
pub fn generate_corpus(grammar: &Grammar, n: usize, seed: u64) -> Result<Vec<RawUtterance>> {
    generate_with(grammar, n, seed, "u", ValueSource::Standard)
}

/// Held-out generation pass: open slot types draw from their novel
/// lexicons, so slot arguments are unseen in any standard corpus.
pub fn generate_pool(grammar: &Grammar, n: usize, seed: u64) -> Result<Vec<RawUtterance>> {
    generate_with(grammar, n, seed, "p", ValueSource::Novel)
}

/// Per-piece prototype feature renderer. Each wordpiece has a fixed random
/// prototype vector; rendering emits 1-3 (configurable) noisy copies per
/// piece, modeling variable speaking rate.
#[derive(Debug, Clone)]
pub struct FeatureRenderer {
    pub feature_dim: usize,
    pub frames_per_piece: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
    prototypes: Tensor<f32>,
}

impl FeatureRenderer {
    pub fn new(
        vocab_size: usize,
        feature_dim: usize,
        frames_per_piece: (usize, usize),
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim == 0 || vocab_size == 0 {
            return Err(Error::config("renderer needs positive dims"));
        }
        let (lo, hi) = frames_per_piece;
        if lo == 0 || hi < lo {
            return Err(Error::config(format!(
                "invalid frames-per-piece range [{lo}, {hi}]"
            )));
        }
        let mut rng = SluRng::derive(seed, 0xF0F0);
        let prototypes = rng.normal_tensor(vec![vocab_size, feature_dim], 1.0);
        Ok(FeatureRenderer {
            feature_dim,
            frames_per_piece,
            noise_sigma,
            seed,
            prototypes,
        })
    }

    pub fn prototype(&self, piece: u32) -> &[f32] {
        let d = self.feature_dim;
        &self.prototypes.data()[piece as usize * d..(piece as usize + 1) * d]
    }

    /// Renders a feature matrix `[T x F]` with `T` in
    /// `[len * lo, len * hi]` for the configured range `[lo, hi]`.
    pub fn render(&self, pieces: &[u32], utt_seed: u64) -> Result<Tensor<f32>> {
        self.render_padded(pieces, utt_seed, 0)
    }

    /// Like [`render`](Self::render), but appends noisy silence frames so
    /// the result has at least `min_frames` rows (the acoustic conv stack
    /// needs its full receptive field).
    pub fn render_padded(
        &self,
        pieces: &[u32],
        utt_seed: u64,
        min_frames: usize,
    ) -> Result<Tensor<f32>> {
        if pieces.is_empty() {
            return Err(Error::data("cannot render features for zero pieces"));
        }
        let d = self.feature_dim;
        let (lo, hi) = self.frames_per_piece;
        let mut rng = SluRng::derive(self.seed ^ utt_seed, 1);
        let mut rows: Vec<f32> = Vec::new();
        for &p in pieces {
            if p as usize * d >= self.prototypes.numel() {
                return Err(Error::Index {
                    op: "render_features",
                    index: p as usize,
                    bound: self.prototypes.shape()[0],
                });
            }
            let copies = lo + rng.below(hi - lo + 1);
            for _ in 0..copies {
                let proto = self.prototype(p);
                for &v in proto {
                    rows.push(v + (rng.normal() * self.noise_sigma) as f32);
                }
            }
        }
        while rows.len() / d < min_frames {
            for _ in 0..d {
                rows.push((rng.normal() * self.noise_sigma) as f32);
            }
        }
        let t = rows.len() / d;
        Tensor::new(vec![t, d], rows)
    }
}

/// Tokenizes, projects slot labels, and renders features for one raw
/// utterance. `min_frames` pads short renders for the conv stack.
pub fn prepare_utterance(
    raw: &RawUtterance,
    vocab: &WordpieceVocab,
    renderer: &FeatureRenderer,
    min_frames: usize,
) -> Result<Utterance> {
    let (pieces, per_word) = vocab.tokenize_words(&raw.words);
    let spans: Vec<WordSpan> = raw
        .slots
        .iter()
        .map(|s| WordSpan {
            label: s.label,
            start_word: s.start_word,
            end_word: s.end_word,
        })
        .collect();
    let piece_labels = crate::text::project_slot_labels(&spans, &per_word)?;
    let features = match &raw.features_path {
        Some(path) => read_feat1(std::path::Path::new(path))?,
        None => renderer.render_padded(&pieces, fnv1a64(raw.id.as_bytes()), min_frames)?,
    };
    Ok(Utterance {
        id: raw.id.clone(),
        words: raw.words.clone(),
        pieces,
        piece_labels,
        intent: raw.intent,
        slots: raw.slots.clone(),
        features,
    })
}

/// Seeded shuffle split into disjoint, exhaustive parts.
pub fn split_dataset<T: Clone>(
    corpus: &[T],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = fractions;
    for f in [a, b, c] {
        if f <= 0.0 {
            return Err(Error::config(format!("split fraction {f} must be > 0")));
        }
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = SluRng::derive(seed, 0x5B17);
    rng.shuffle(&mut idx);
    let n = corpus.len();
    let cut1 = (a * n as f64).floor() as usize;
    let cut2 = ((a + b) * n as f64).floor() as usize;
    let pick = |range: &[usize]| range.iter().map(|&i| corpus[i].clone()).collect::<Vec<T>>();
    Ok((pick(&idx[..cut1]), pick(&idx[cut1..cut2]), pick(&idx[cut2..])))
}

/// Anything carrying a word sequence; used by the bigram machinery.
pub trait HasWords {
    fn word_seq(&self) -> &[String];
}

impl HasWords for RawUtterance {
    fn word_seq(&self) -> &[String] {
        &self.words
    }
}

impl HasWords for Utterance {
    fn word_seq(&self) -> &[String] {
        &self.words
    }
}

impl HasWords for Vec<String> {
    fn word_seq(&self) -> &[String] {
        self
    }
}

/// Sentence-internal adjacent word pairs.
pub fn bigrams(words: &[String]) -> impl Iterator<Item = (&str, &str)> {
    words.windows(2).map(|w| (w[0].as_str(), w[1].as_str()))
}

fn bigram_set<T: HasWords>(corpora: &[&[T]]) -> HashSet<(String, String)> {
    let mut set = HashSet::new();
    for corpus in corpora {
        for utt in *corpus {
            for (a, b) in bigrams(utt.word_seq()) {
                set.insert((a.to_string(), b.to_string()));
            }
        }
    }
    set
}

/// Selects exactly the pool utterances containing at least one word bigram
/// absent from train ∪ dev. Utterances with fewer than two words have no
/// bigrams and are never selected.
pub fn build_hard_split<T: HasWords + Clone>(pool: &[T], train: &[T], dev: &[T]) -> Vec<T> {
    let seen = bigram_set(&[train, dev]);
    pool.iter()
        .filter(|utt| {
            bigrams(utt.word_seq()).any(|(a, b)| !seen.contains(&(a.to_string(), b.to_string())))
        })
        .cloned()
        .collect()
}

/// Shannon entropies (bits) of the empirical word n-gram distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramEntropyReport {
    /// Entropy for n = 1..=n_max, in order.
    pub per_n: Vec<f64>,
    pub average: f64,
    /// Distinct n-gram counts, same order.
    pub distinct: Vec<usize>,
}

/// Entropy of the corpus's n-gram relative-frequency distribution for each
/// `n` in `1..=n_max` (default 3), plus their mean.
pub fn ngram_entropy<T: HasWords>(corpus: &[T], n_max: usize) -> Result<NgramEntropyReport> {
    if corpus.is_empty() {
        return Err(Error::data("entropy of empty corpus"));
    }
    if n_max == 0 {
        return Err(Error::config("n_max must be at least 1"));
    }
    let mut per_n = Vec::with_capacity(n_max);
    let mut distinct = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let mut counts: std::collections::HashMap<Vec<&str>, u64> = std::collections::HashMap::new();
        let mut total = 0u64;
        for utt in corpus {
            let words = utt.word_seq();
            if words.len() < n {
                continue;
            }
            for w in words.windows(n) {
                let key: Vec<&str> = w.iter().map(String::as_str).collect();
                *counts.entry(key).or_insert(0) += 1;
                total += 1;
            }
        }
        distinct.push(counts.len());
        if total == 0 {
            per_n.push(0.0);
            continue;
        }
        let mut h = 0.0;
        for &c in counts.values() {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
        per_n.push(h);
    }
    let average = per_n.iter().sum::<f64>() / per_n.len() as f64;
    Ok(NgramEntropyReport {
        per_n,
        average,
        distinct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_template_grammar() -> Grammar {
        let mut g = Grammar::new();
        g.add_slot_type("thing", vec!["box".into()], vec![]).unwrap();
        g.add_intent("fetch", &["bring me the {thing} now"]).unwrap();
        g
    }

    #[test]
    fn single_template_instantiates() {
        let g = single_template_grammar();
        let corpus = generate_corpus(&g, 1, 3).unwrap();
        assert_eq!(
            corpus[0].words,
            vec!["bring", "me", "the", "box", "now"]
        );
        assert_eq!(corpus[0].slots.len(), 1);
        assert_eq!(corpus[0].slots[0].value, "box");
    }

    #[test]
    fn generation_is_deterministic() {
        let g = desk_grammar();
        let a = generate_corpus(&g, 50, 9).unwrap();
        let b = generate_corpus(&g, 50, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.words, y.words);
            assert_eq!(x.intent, y.intent);
        }
    }

    #[test]
    fn slot_values_appear_verbatim() {
        let g = desk_grammar();
        for utt in generate_corpus(&g, 100, 4).unwrap() {
            for slot in &utt.slots {
                let span = utt.words[slot.start_word..slot.end_word].join(" ");
                assert_eq!(span, slot.value, "utterance {:?}", utt.words);
            }
        }
    }

    #[test]
    fn empty_lexicon_is_rejected() {
        let mut g = Grammar::new();
        g.add_slot_type("void", vec![], vec![]).unwrap();
        g.add_intent("use", &["use the {void} now"]).unwrap();
        assert!(generate_corpus(&g, 1, 0).is_err());
    }

    #[test]
    fn renderer_exact_prototypes_when_noiseless() {
        let r = FeatureRenderer::new(10, 4, (1, 1), 0.0, 7).unwrap();
        let feats = r.render(&[5, 2], 99).unwrap();
        assert_eq!(feats.shape(), &[2, 4]);
        assert_eq!(&feats.data()[..4], r.prototype(5));
        assert_eq!(&feats.data()[4..], r.prototype(2));
    }

    #[test]
    fn renderer_length_bounds() {
        let r = FeatureRenderer::new(10, 4, (1, 3), 0.1, 7).unwrap();
        for seed in 0..20 {
            let feats = r.render(&[1, 2, 3, 4], seed).unwrap();
            let t = feats.shape()[0];
            assert!((4..=12).contains(&t), "T={t}");
        }
    }

    #[test]
    fn nearest_prototype_decoding_recovers_pieces() {
        let r = FeatureRenderer::new(12, 8, (1, 3), 0.0, 21).unwrap();
        let pieces = [7u32, 3, 3, 11, 4];
        let feats = r.render(&pieces, 5).unwrap();
        // Greedy nearest-neighbor per frame, then collapse repeats.
        let mut decoded: Vec<u32> = Vec::new();
        for row in feats.data().chunks(8) {
            let mut best = (f32::INFINITY, 0u32);
            for cand in 0..12u32 {
                let proto = r.prototype(cand);
                let d: f32 = row
                    .iter()
                    .zip(proto)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, cand);
                }
            }
            if decoded.last() != Some(&best.1) {
                decoded.push(best.1);
            }
        }
        // σ=0 makes repeated-frame collapse exact except for genuinely
        // repeated pieces, which this input includes (3, 3 collapses).
        assert_eq!(decoded, vec![7, 3, 11, 4]);
    }

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<u32> = (0..100).collect();
        let (a, b, c) = split_dataset(&items, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut all: Vec<u32> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        let (a2, _, _) = split_dataset(&items, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(a, a2);
        assert!(split_dataset(&items, (1.0, 0.0, 0.0), 3).is_err());
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn hard_split_definition() {
        let train = vec![words("play the song alpha"), words("call bob now")];
        let dev = vec![words("play the song beta")];
        let pool = vec![
            words("play the song alpha"),   // all bigrams seen
            words("play the song gamma"),   // (song, gamma) unseen
            words("call bob now"),          // seen
        ];
        let hard = build_hard_split(&pool, &train, &dev);
        assert_eq!(hard.len(), 1);
        assert_eq!(hard[0], words("play the song gamma"));
    }

    #[test]
    fn entropy_values() {
        let single = vec![words("a a a")];
        let rep = ngram_entropy(&single, 1).unwrap();
        assert_eq!(rep.per_n[0], 0.0);

        // counts {a:2, b:1, c:1} -> H(1/2, 1/4, 1/4) = 1.5 bits
        let corpus = vec![words("a a b c")];
        let rep = ngram_entropy(&corpus, 1).unwrap();
        assert!((rep.per_n[0] - 1.5).abs() < 1e-12);

        assert!(ngram_entropy::<Vec<String>>(&[], 3).is_err());
    }

    #[test]
    fn entropy_bounds() {
        let g = desk_grammar();
        let corpus = generate_corpus(&g, 200, 11).unwrap();
        let rep = ngram_entropy(&corpus, 3).unwrap();
        for (h, &k) in rep.per_n.iter().zip(&rep.distinct) {
            assert!(*h >= 0.0);
            assert!(*h <= (k.max(1) as f64).log2() + 1e-9);
        }
    }

    #[test]
    fn richer_grammar_has_higher_entropy() {
        let rich = generate_corpus(&desk_grammar(), 300, 5).unwrap();
        let plain = generate_corpus(&tiny_grammar(), 300, 5).unwrap();
        let h_rich = ngram_entropy(&rich, 3).unwrap().average;
        let h_plain = ngram_entropy(&plain, 3).unwrap().average;
        assert!(
            h_rich > h_plain,
            "rich {h_rich:.3} bits <= plain {h_plain:.3} bits"
        );
    }

    #[test]
    fn pool_uses_novel_values() {
        let g = desk_grammar();
        let train_values: HashSet<String> = g
            .slot_types
            .iter()
            .flat_map(|s| s.values.iter().cloned())
            .collect();
        let pool = generate_pool(&g, 50, 13).unwrap();
        let mut saw_novel = false;
        for utt in &pool {
            for slot in &utt.slots {
                let st = &g.slot_types[(slot.label - 1) as usize];
                if st.is_open() {
                    assert!(
                        !train_values.contains(&slot.value),
                        "novel pool reused training value {:?}",
                        slot.value
                    );
                    saw_novel = true;
                }
            }
        }
        assert!(saw_novel);
    }
}
