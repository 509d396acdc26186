//! Datasets: the synthetic needle task, JSONL ingestion and the on-disk
//! dataset directory (`manifest.json`, `train.jsonl`, `test.jsonl`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::special;
use crate::rng::Rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    /// Full sequence: CLS, body, SEP, then PAD up to the dataset's `max_len`.
    pub tokens: Vec<u32>,
    pub label: usize,
    /// Positions of planted signal tokens (generated data only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub signal_positions: Vec<usize>,
}

/// Parameters of the synthetic needle task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleSpec {
    pub train_count: usize,
    pub test_count: usize,
    /// Sequence length including CLS and SEP; also the padded length.
    pub seq_len: usize,
    /// Shortest real length; defaults to `seq_len` (no padding).
    #[serde(default)]
    pub min_len: Option<usize>,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Signal tokens planted per example.
    pub signals_per_example: usize,
    /// Probability that a planted signal is drawn from another class's set
    /// instead of the label's. Above 0 the task has irreducible error.
    #[serde(default)]
    pub distractor_rate: f64,
    /// Distinct signal token ids reserved for each class.
    pub signal_set_size: usize,
    pub seed: u64,
}

impl NeedleSpec {
    pub fn validate(&self) -> Result<()> {
        let min_len = self.min_len.unwrap_or(self.seq_len);
        let reserved = special::COUNT as usize + self.num_classes * self.signal_set_size;
        let checks = [
            (self.num_classes >= 2, "num_classes must be at least 2"),
            (self.train_count > 0, "train_count must be positive"),
            (min_len <= self.seq_len, "min_len exceeds seq_len"),
            (
                min_len >= 2 + self.signals_per_example.max(1),
                "sequences too short for the planted signals",
            ),
            (
                self.signals_per_example == 0 || self.signal_set_size > 0,
                "signal_set_size must be positive when signals are planted",
            ),
            (self.vocab_size > reserved, "vocabulary leaves no noise tokens"),
            (
                (0.0..0.5).contains(&self.distractor_rate),
                "distractor_rate must lie in [0, 0.5)",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    fn signal_ids(&self, class: usize) -> std::ops::Range<u32> {
        let start = special::COUNT + (class * self.signal_set_size) as u32;
        start..start + self.signal_set_size as u32
    }

    fn noise_ids(&self) -> std::ops::Range<u32> {
        let start = special::COUNT + (self.num_classes * self.signal_set_size) as u32;
        start..self.vocab_size as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Needle { spec: NeedleSpec },
    Ingested { vocab: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub max_len: usize,
    pub cls: u32,
    pub sep: u32,
    pub pad: u32,
    pub unk: u32,
    pub source: DataSource,
}

impl DatasetManifest {
    fn new(vocab_size: usize, num_classes: usize, max_len: usize, source: DataSource) -> Self {
        Self {
            version: DATASET_FORMAT_VERSION,
            vocab_size,
            num_classes,
            max_len,
            cls: special::CLS,
            sep: special::SEP,
            pad: special::PAD,
            unk: special::UNK,
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Generates the needle task: noise tokens with `k` planted tokens drawn
/// from the label's signal set. With `k = 0` labels carry no signal.
pub fn gen_data(spec: &NeedleSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let min_len = spec.min_len.unwrap_or(spec.seq_len);
    let noise = spec.noise_ids();
    let noise_span = (noise.end - noise.start) as usize;
    let make = |rng: &mut Rng| -> Example {
        let label = rng.below(spec.num_classes);
        let len = min_len + rng.below(spec.seq_len - min_len + 1);
        let mut tokens = Vec::with_capacity(spec.seq_len);
        tokens.push(special::CLS);
        for _ in 0..len - 2 {
            tokens.push(noise.start + rng.below(noise_span) as u32);
        }
        tokens.push(special::SEP);
        let mut body: Vec<usize> = (1..len - 1).collect();
        rng.shuffle(&mut body);
        let mut signal_positions: Vec<usize> = body[..spec.signals_per_example].to_vec();
        signal_positions.sort_unstable();
        for &p in &signal_positions {
            let class = if spec.distractor_rate > 0.0 && rng.uniform() < spec.distractor_rate {
                (label + 1 + rng.below(spec.num_classes - 1)) % spec.num_classes
            } else {
                label
            };
            tokens[p] = spec.signal_ids(class).start + rng.below(spec.signal_set_size) as u32;
        }
        tokens.resize(spec.seq_len, special::PAD);
        Example {
            tokens,
            label,
            signal_positions,
        }
    };
    let train = (0..spec.train_count).map(|_| make(&mut rng)).collect();
    let test = (0..spec.test_count).map(|_| make(&mut rng)).collect();
    Ok(Dataset {
        manifest: DatasetManifest::new(
            spec.vocab_size,
            spec.num_classes,
            spec.seq_len,
            DataSource::Needle { spec: spec.clone() },
        ),
        train,
        test,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    tokens: Option<Vec<u32>>,
    label: usize,
}

fn parse_jsonl(path: &Path) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if rec.text.is_some() == rec.tokens.is_some() {
            return Err(Error::Data(format!(
                "{}:{}: record needs exactly one of text or tokens",
                path.display(),
                i + 1
            )));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} holds no records", path.display())));
    }
    Ok(out)
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Tokenizes JSONL records (`{"text": ..., "label": ...}` or
/// `{"tokens": [...], "label": ...}`). Text is lowercased and split on
/// whitespace; the vocabulary keeps the most frequent words (ties in
/// lexical order) up to `vocab_cap` ids including the special tokens, and
/// maps the rest to UNK. Bodies longer than `max_len - 2` are truncated
/// before SEP. The test file, if any, reuses the training vocabulary.
pub fn ingest_jsonl(train: &Path, test: Option<&Path>, max_len: usize, vocab_cap: usize) -> Result<Dataset> {
    if max_len < 3 {
        return Err(Error::Config("max_len must leave room for CLS, SEP and a token".into()));
    }
    if vocab_cap <= special::COUNT as usize {
        return Err(Error::Config("vocab_cap must exceed the special-token count".into()));
    }
    let train_raw = parse_jsonl(train)?;
    let test_raw = match test {
        Some(p) => parse_jsonl(p)?,
        None => Vec::new(),
    };
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in &train_raw {
        if let Some(t) = &r.text {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(vocab_cap - special::COUNT as usize);
    let vocab: Vec<String> = ranked.into_iter().map(|(w, _)| w).collect();
    let ids: HashMap<&str, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), special::COUNT + i as u32))
        .collect();
    let max_label = train_raw.iter().chain(&test_raw).map(|r| r.label).max().unwrap_or(0);
    let num_classes = (max_label + 1).max(2);
    let mut vocab_size = special::COUNT as usize + vocab.len();
    let mut convert = |r: &RawRecord| -> Result<Example> {
        let mut body: Vec<u32> = match (&r.text, &r.tokens) {
            (Some(t), _) => words(t)
                .map(|w| *ids.get(w.as_str()).unwrap_or(&special::UNK))
                .collect(),
            (_, Some(t)) => {
                if let Some(&bad) = t.iter().find(|&&id| id < special::COUNT) {
                    return Err(Error::Data(format!("token id {bad} collides with a special id")));
                }
                t.clone()
            }
            _ => unreachable!("validated while parsing"),
        };
        body.truncate(max_len - 2);
        if let Some(&m) = body.iter().max() {
            vocab_size = vocab_size.max(m as usize + 1);
        }
        let mut tokens = Vec::with_capacity(max_len);
        tokens.push(special::CLS);
        tokens.extend(body);
        tokens.push(special::SEP);
        tokens.resize(max_len, special::PAD);
        Ok(Example {
            tokens,
            label: r.label,
            signal_positions: Vec::new(),
        })
    };
    let train_ex = train_raw.iter().map(&mut convert).collect::<Result<Vec<_>>>()?;
    let test_ex = test_raw.iter().map(&mut convert).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest::new(vocab_size, num_classes, max_len, DataSource::Ingested { vocab }),
        train: train_ex,
        test: test_ex,
    })
}

fn to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported dataset version {}", m.version)));
        }
        for (i, e) in self.train.iter().chain(&self.test).enumerate() {
            if e.label >= m.num_classes {
                return Err(Error::Data(format!("example {i}: label {} out of range", e.label)));
            }
            if e.tokens.len() != m.max_len || e.tokens.first() != Some(&special::CLS) {
                return Err(Error::Data(format!("example {i}: malformed token sequence")));
            }
            if e.tokens.iter().any(|&t| t as usize >= m.vocab_size) {
                return Err(Error::Data(format!("example {i}: token id out of range")));
            }
        }
        if self.train.is_empty() {
            return Err(Error::Data("dataset has no training examples".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
        )?;
        write_atomic(&dir.join("train.jsonl"), to_jsonl(&self.train)?.as_bytes())?;
        write_atomic(&dir.join("test.jsonl"), to_jsonl(&self.test)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| Error::Data(format!("manifest: {e}")))?;
        let read = |name: &str| -> Result<Vec<Example>> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(Vec::new());
            }
            fs::read_to_string(&path)?
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{name}:{}: {e}", i + 1))))
                .collect()
        };
        let ds = Self {
            manifest,
            train: read("train.jsonl")?,
            test: read("test.jsonl")?,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// SHA-256 over the canonical serialization of manifest and examples.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest)?);
        h.update(to_jsonl(&self.train)?.as_bytes());
        h.update(to_jsonl(&self.test)?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}
