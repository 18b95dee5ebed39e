//! On-disk dataset formats.
//!
//! A dataset directory holds `manifest.json`, `vocab.txt`, and one JSONL
//! file per split. Utterance rows carry words, intent and slots by name;
//! pieces, labels and synthetic features are reproduced deterministically
//! on load from the manifest's renderer parameters. Externally computed
//! features ride in `FEAT1` binary files referenced by `features_path`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{build_vocab, IntentSet, SlotLabelSet, WordpieceVocab};

use super::{
    build_hard_split, generate_corpus, generate_pool, prepare_utterance, split_dataset,
    FeatureRenderer, GoldSlot, Grammar, RawUtterance, Utterance,
};

const FEAT_MAGIC: &[u8; 5] = b"FEAT1";

/// Writes a `[rows x cols]` f32 matrix: magic, u32 rows, u32 cols, then
/// row-major little-endian data.
pub fn write_feat1(path: &Path, features: &Tensor<f32>) -> Result<()> {
    if features.shape().len() != 2 {
        return Err(Error::Contract {
            op: "write_feat1",
            msg: format!("expected rank 2, got {:?}", features.shape()),
        });
    }
    let mut buf = Vec::with_capacity(13 + features.numel() * 4);
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&(features.shape()[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(features.shape()[1] as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_feat1(path: &Path) -> Result<Tensor<f32>> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    if &magic != FEAT_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut dims = [0u8; 8];
    file.read_exact(&mut dims)
        .map_err(|_| Error::format(format!("{}: truncated dims", path.display())))?;
    let rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(format!(
            "{}: zero dimension {rows}x{cols}",
            path.display()
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != rows * cols * 4 {
        return Err(Error::format(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            rows * cols * 4,
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(format!(
                "{}: non-finite feature value",
                path.display()
            )));
        }
        data.push(v);
    }
    Tensor::new(vec![rows, cols], data)
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonSlot {
    label: String,
    value: String,
    start_word: usize,
    end_word: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonUtterance {
    id: String,
    words: Vec<String>,
    intent: String,
    slots: Vec<JsonSlot>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features_path: Option<String>,
}

/// One JSON object per line, in corpus order.
pub fn write_jsonl(
    path: &Path,
    utterances: &[RawUtterance],
    intents: &IntentSet,
    slot_labels: &SlotLabelSet,
) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for utt in utterances {
        let row = JsonUtterance {
            id: utt.id.clone(),
            words: utt.words.clone(),
            intent: intents
                .name(utt.intent)
                .ok_or_else(|| Error::data(format!("unknown intent id {}", utt.intent)))?
                .to_string(),
            slots: utt
                .slots
                .iter()
                .map(|s| {
                    Ok(JsonSlot {
                        label: slot_labels
                            .name(s.label)
                            .ok_or_else(|| Error::data(format!("unknown label id {}", s.label)))?
                            .to_string(),
                        value: s.value.clone(),
                        start_word: s.start_word,
                        end_word: s.end_word,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            features_path: utt.features_path.clone(),
        };
        serde_json::to_writer(&mut file, &row)
            .map_err(|e| Error::format(format!("jsonl encode: {e}")))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(
    path: &Path,
    intents: &IntentSet,
    slot_labels: &SlotLabelSet,
) -> Result<Vec<RawUtterance>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonUtterance = serde_json::from_str(&line).map_err(|e| {
            Error::format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let intent = intents.id(&row.intent).ok_or_else(|| {
            Error::data(format!(
                "{}:{}: unknown intent {:?}",
                path.display(),
                lineno + 1,
                row.intent
            ))
        })?;
        let mut slots = Vec::with_capacity(row.slots.len());
        for s in &row.slots {
            let label = slot_labels.id(&s.label).ok_or_else(|| {
                Error::data(format!(
                    "{}:{}: unknown slot label {:?}",
                    path.display(),
                    lineno + 1,
                    s.label
                ))
            })?;
            if label == crate::text::NULL_LABEL {
                return Err(Error::data(format!(
                    "{}:{}: the null label cannot mark a slot",
                    path.display(),
                    lineno + 1
                )));
            }
            if s.start_word >= s.end_word || s.end_word > row.words.len() {
                return Err(Error::data(format!(
                    "{}:{}: slot span {}..{} outside {} words",
                    path.display(),
                    lineno + 1,
                    s.start_word,
                    s.end_word,
                    row.words.len()
                )));
            }
            slots.push(GoldSlot {
                label,
                value: s.value.clone(),
                start_word: s.start_word,
                end_word: s.end_word,
            });
        }
        out.push(RawUtterance {
            id: row.id,
            words: row.words,
            intent,
            slots,
            features_path: row.features_path,
        });
    }
    Ok(out)
}

/// Dataset directory metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub feature_dim: usize,
    pub frames_per_piece: [usize; 2],
    pub noise_sigma: f64,
    pub renderer_seed: u64,
    pub min_frames: usize,
    pub vocab_file: String,
    pub intents: Vec<String>,
    pub slot_labels: Vec<String>,
    pub splits: BTreeMap<String, String>,
}

/// A loaded (or freshly built) dataset with everything models need.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab: WordpieceVocab,
    pub intents: IntentSet,
    pub slot_labels: SlotLabelSet,
    pub renderer: FeatureRenderer,
    pub splits: BTreeMap<String, Vec<Utterance>>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::data(format!("dataset has no split {name:?}")))
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn num_slot_labels(&self) -> usize {
        self.slot_labels.len()
    }
}

/// Generation parameters for [`build_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub seed: u64,
    /// Total standard utterances, split by `fractions`.
    pub n_utterances: usize,
    pub fractions: (f64, f64, f64),
    /// Held-out pool size for hard-split selection.
    pub n_pool: usize,
    pub vocab_max: usize,
    pub feature_dim: usize,
    pub frames_per_piece: (usize, usize),
    pub noise_sigma: f64,
    /// Renders are padded with noise frames up to this length so the conv
    /// stack always has its receptive field.
    pub min_frames: usize,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            seed: 7,
            n_utterances: 3750,
            fractions: (0.8, 0.1, 0.1),
            n_pool: 700,
            vocab_max: 400,
            feature_dim: 64,
            frames_per_piece: (4, 6),
            noise_sigma: 0.25,
            min_frames: 22,
        }
    }
}

/// Generates, splits, tokenizes and renders a complete dataset in memory.
/// The vocabulary comes from training words only.
pub fn build_dataset(grammar: &Grammar, cfg: &DataGenConfig) -> Result<Dataset> {
    let raws = generate_corpus(grammar, cfg.n_utterances, cfg.seed)?;
    let (train_raw, dev_raw, test_raw) = split_dataset(&raws, cfg.fractions, cfg.seed)?;
    let pool_raw = generate_pool(grammar, cfg.n_pool, cfg.seed ^ 0x9E37_79B9_7F4A_7C15)?;
    let hard_raw = build_hard_split(&pool_raw, &train_raw, &dev_raw);

    let train_words: Vec<Vec<String>> = train_raw.iter().map(|u| u.words.clone()).collect();
    let vocab = build_vocab(&train_words, cfg.vocab_max)?;
    let renderer_seed = cfg.seed ^ 0xFEA7;
    let renderer = FeatureRenderer::new(
        vocab.len(),
        cfg.feature_dim,
        cfg.frames_per_piece,
        cfg.noise_sigma,
        renderer_seed,
    )?;

    let intents = grammar.intent_set()?;
    let slot_labels = grammar.slot_label_set()?;
    let mut splits = BTreeMap::new();
    for (name, raw) in [
        ("train", &train_raw),
        ("dev", &dev_raw),
        ("test", &test_raw),
        ("hard", &hard_raw),
    ] {
        let prepared: Result<Vec<Utterance>> = raw
            .iter()
            .map(|r| prepare_utterance(r, &vocab, &renderer, cfg.min_frames))
            .collect();
        splits.insert(name.to_string(), prepared?);
    }

    let manifest = DatasetManifest {
        version: 1,
        seed: cfg.seed,
        feature_dim: cfg.feature_dim,
        frames_per_piece: [cfg.frames_per_piece.0, cfg.frames_per_piece.1],
        noise_sigma: cfg.noise_sigma,
        renderer_seed,
        min_frames: cfg.min_frames,
        vocab_file: "vocab.txt".to_string(),
        intents: intents.names().to_vec(),
        slot_labels: slot_labels.names().to_vec(),
        splits: [
            ("train", "train.jsonl"),
            ("dev", "dev.jsonl"),
            ("test", "test.jsonl"),
            ("hard", "hard.jsonl"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect(),
    };

    Ok(Dataset {
        manifest,
        vocab,
        intents,
        slot_labels,
        renderer,
        splits,
    })
}

/// Writes manifest, vocab and one JSONL file per split into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest_json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::format(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), manifest_json)?;
    dataset.vocab.save(&dir.join(&dataset.manifest.vocab_file))?;
    for (split, file) in &dataset.manifest.splits {
        let utts = dataset.split(split)?;
        let raws: Vec<RawUtterance> = utts
            .iter()
            .map(|u| RawUtterance {
                id: u.id.clone(),
                words: u.words.clone(),
                intent: u.intent,
                slots: u.slots.clone(),
                features_path: None,
            })
            .collect();
        write_jsonl(&dir.join(file), &raws, &dataset.intents, &dataset.slot_labels)?;
    }
    Ok(())
}

/// Loads a dataset directory, re-rendering synthetic features
/// deterministically from the manifest parameters.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_body = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_body)
        .map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != 1 {
        return Err(Error::format(format!(
            "unsupported dataset version {}",
            manifest.version
        )));
    }
    let vocab = WordpieceVocab::load(&dir.join(&manifest.vocab_file))?;
    let intents = IntentSet::new(&manifest.intents)?;
    let slot_labels = SlotLabelSet::from_full_list(manifest.slot_labels.clone())?;
    let renderer = FeatureRenderer::new(
        vocab.len(),
        manifest.feature_dim,
        (manifest.frames_per_piece[0], manifest.frames_per_piece[1]),
        manifest.noise_sigma,
        manifest.renderer_seed,
    )?;
    let mut splits = BTreeMap::new();
    for (split, file) in &manifest.splits {
        let raws = read_jsonl(&dir.join(file), &intents, &slot_labels)?;
        let prepared: Result<Vec<Utterance>> = raws
            .iter()
            .map(|r| prepare_utterance(r, &vocab, &renderer, manifest.min_frames))
            .collect();
        splits.insert(split.clone(), prepared?);
    }
    Ok(Dataset {
        manifest,
        vocab,
        intents,
        slot_labels,
        renderer,
        splits,
    })
}

/// An ingested intent-classification corpus in the appliance-commands CSV
/// layout: `path, transcription, action, object, location` columns, the
/// action/object/location triple collapsed into one intent label, features
/// supplied externally as FEAT1 files under `features_root`.
pub struct FscData {
    pub utterances: Vec<RawUtterance>,
    pub intents: IntentSet,
}

pub fn ingest_fsc_csv(csv_path: &Path, features_root: &Path) -> Result<FscData> {
    let mut reader = csv::Reader::from_path(csv_path)
        .map_err(|e| Error::format(format!("{}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(format!("{}: {e}", csv_path.display())))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::format(format!(
                "{}: missing required column {name:?}",
                csv_path.display()
            ))
        })
    };
    let (c_path, c_trans) = (col("path")?, col("transcription")?);
    let (c_action, c_object, c_location) = (col("action")?, col("object")?, col("location")?);

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            Error::format(format!("{}:{}: {e}", csv_path.display(), i + 2))
        })?;
        let get = |c: usize| -> Result<String> {
            record
                .get(c)
                .map(str::to_string)
                .ok_or_else(|| Error::format(format!("{}:{}: short row", csv_path.display(), i + 2)))
        };
        let audio = get(c_path)?;
        let transcription = get(c_trans)?;
        if transcription.trim().is_empty() {
            return Err(Error::data(format!(
                "{}:{}: empty transcription",
                csv_path.display(),
                i + 2
            )));
        }
        let tidy = |s: String| s.trim().to_lowercase().replace(char::is_whitespace, "-");
        let intent_name = format!(
            "{}_{}_{}",
            tidy(get(c_action)?),
            tidy(get(c_object)?),
            tidy(get(c_location)?)
        );
        let words: Vec<String> = transcription
            .to_lowercase()
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '\'').to_string())
            .filter(|w| !w.is_empty())
            .collect();
        let feat_path = features_root.join(&audio).with_extension("feat1");
        rows.push((audio, words, intent_name, feat_path));
    }
    if rows.is_empty() {
        return Err(Error::data(format!(
            "{}: no data rows",
            csv_path.display()
        )));
    }

    let mut intent_names: Vec<String> = rows.iter().map(|r| r.2.clone()).collect();
    intent_names.sort();
    intent_names.dedup();
    let intents = IntentSet::new(&intent_names)?;

    let utterances = rows
        .into_iter()
        .map(|(audio, words, intent_name, feat_path)| RawUtterance {
            id: audio,
            words,
            intent: intents.id(&intent_name).expect("intent registered"),
            slots: Vec::new(),
            features_path: Some(feat_path.to_string_lossy().into_owned()),
        })
        .collect();
    Ok(FscData {
        utterances,
        intents,
    })
}
