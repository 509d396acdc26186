//! On-disk artifacts: run configuration, model archives, the teacher ranking
//! cache, run manifests and CSV reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{write_atomic, Dataset, Example};
use crate::distill::{real_length, TeacherRanking};
use crate::error::{Error, Result};
use crate::flops::{expected_tokens_from_probs, full_flops, LagrangeState};
use crate::inference::{build_plan, count_flops_instrumented, infer, PrunePlan};
use crate::masks::MaskSet;
use crate::model::{special, EncoderModel, EncoderParams, ModelConfig};
use crate::scoring::{score_distribution, RankBucket, ScoreDistributionRow};
use crate::trainer::{argmax, teacher_rankings, RunReport, StepLog, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const ARCHIVE_VERSION: u32 = 1;
pub const ARCHIVE_FORMAT: &str = "tokprune-model";
pub const CACHE_VERSION: u32 = 1;

/// Hex SHA-256 of the compact JSON serialization of `value`.
pub fn json_sha256<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("{what} {}: {e}", path.display())))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory used when none is given on the command line.
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Directory for reports and logs; defaults to the archive's directory.
    #[serde(default)]
    pub run_dir: Option<String>,
}

/// A complete run description: teacher training under `train`, pruning
/// under `prune`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prune: TrainConfig,
    pub data: DataSection,
    pub output: OutputSection,
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_VERSION as u64 => {}
            Some(v) => return Err(Error::Config(format!("unsupported config version {v}"))),
            None => return Err(Error::Config("config has no integer version field".into())),
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        self.prune
            .validate_for_pruning()
            .map_err(|e| Error::Config(format!("prune: {e}")))?;
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        json_sha256(self)
    }

    /// Checks that a dataset fits the configured model.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let (m, d) = (&self.model, &ds.manifest);
        if m.vocab_size < d.vocab_size || m.max_len < d.max_len || m.num_classes != d.num_classes {
            return Err(Error::Data(format!(
                "dataset (vocab {}, max_len {}, classes {}) does not fit the model (vocab {}, max_len {}, classes {})",
                d.vocab_size, d.max_len, d.num_classes, m.vocab_size, m.max_len, m.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    Teacher,
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveMetadata {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Parameter checksum of the teacher a pruned model started from.
    #[serde(default)]
    pub teacher_checksum: Option<String>,
    pub steps: usize,
    pub epochs: usize,
    #[serde(default)]
    pub target_sparsity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checksums {
    pub params: String,
    #[serde(default)]
    pub masks: Option<String>,
    #[serde(default)]
    pub lagrange: Option<String>,
}

/// A model with optional masks and multipliers, stored as pretty JSON with
/// shortest round-trip decimal floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArchive {
    pub format: String,
    pub version: u32,
    pub kind: ArchiveKind,
    pub metadata: ArchiveMetadata,
    pub checksums: Checksums,
    pub config: ModelConfig,
    pub params: EncoderParams,
    #[serde(default)]
    pub masks: Option<MaskSet>,
    #[serde(default)]
    pub lagrange: Option<LagrangeState>,
}

impl ModelArchive {
    pub fn new(
        model: EncoderModel,
        masks: Option<MaskSet>,
        lagrange: Option<LagrangeState>,
        metadata: ArchiveMetadata,
    ) -> Result<Self> {
        let kind = if masks.is_some() {
            ArchiveKind::Pruned
        } else {
            ArchiveKind::Teacher
        };
        let checksums = Checksums {
            params: json_sha256(&model.params)?,
            masks: masks.as_ref().map(json_sha256).transpose()?,
            lagrange: lagrange.as_ref().map(json_sha256).transpose()?,
        };
        let archive = Self {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            kind,
            metadata,
            checksums,
            config: model.config,
            params: model.params,
            masks,
            lagrange,
        };
        archive.verify()?;
        Ok(archive)
    }

    fn verify(&self) -> Result<()> {
        if self.format != ARCHIVE_FORMAT || self.version != ARCHIVE_VERSION {
            return Err(Error::Data(format!(
                "unsupported archive {} v{}",
                self.format, self.version
            )));
        }
        self.config
            .validate()
            .map_err(|e| Error::Data(format!("archive config: {e}")))?;
        self.params
            .check_shapes(&self.config)
            .map_err(|e| Error::Data(format!("archive parameters: {e}")))?;
        let mismatch = |what: &str| Err(Error::Data(format!("archive {what} checksum mismatch")));
        if json_sha256(&self.params)? != self.checksums.params {
            return mismatch("parameter");
        }
        if self.masks.as_ref().map(json_sha256).transpose()? != self.checksums.masks {
            return mismatch("mask");
        }
        if self.lagrange.as_ref().map(json_sha256).transpose()? != self.checksums.lagrange {
            return mismatch("multiplier");
        }
        match (&self.masks, self.kind) {
            (Some(m), ArchiveKind::Pruned) => m
                .validate(self.config.num_layers, self.config.max_len)
                .map_err(|e| Error::Data(format!("archive masks: {e}"))),
            (None, ArchiveKind::Teacher) => Ok(()),
            _ => Err(Error::Data("archive kind disagrees with its contents".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let archive: Self = serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("archive: {e}")))?;
        archive.verify()?;
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Input(format!("archive {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn model(&self) -> EncoderModel {
        EncoderModel {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    /// The binarized plan of a pruned archive, or the no-op plan.
    pub fn plan(&self) -> PrunePlan {
        match &self.masks {
            Some(m) => build_plan(m),
            None => PrunePlan::noop(self.config.num_layers, self.config.max_len),
        }
    }
}

/// Teacher rankings of a training set, keyed by dataset and teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingCache {
    pub version: u32,
    pub dataset_hash: String,
    pub teacher_checksum: String,
    pub rankings: Vec<TeacherRanking>,
}

/// Returns cached rankings when the key matches, otherwise computes and
/// stores them. The flag reports a cache hit.
pub fn cached_teacher_rankings(
    path: &Path,
    teacher: &ModelArchive,
    dataset_hash: &str,
    train: &[Example],
) -> Result<(Vec<TeacherRanking>, bool)> {
    if let Ok(bytes) = fs::read(path) {
        if let Ok(c) = serde_json::from_slice::<RankingCache>(&bytes) {
            if c.version == CACHE_VERSION
                && c.dataset_hash == dataset_hash
                && c.teacher_checksum == teacher.checksums.params
                && c.rankings.len() == train.len()
            {
                return Ok((c.rankings, true));
            }
        }
    }
    let rankings = teacher_rankings(&teacher.model(), train)?;
    let cache = RankingCache {
        version: CACHE_VERSION,
        dataset_hash: dataset_hash.into(),
        teacher_checksum: teacher.checksums.params.clone(),
        rankings,
    };
    write_atomic(path, &serde_json::to_vec(&cache)?)?;
    Ok((cache.rankings, false))
}

/// Everything needed to reproduce one CLI invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub dataset_hash: Option<String>,
    /// SHA-256 of every file the run wrote, keyed by path.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, tool_version: &str) -> Self {
        Self {
            command: command.into(),
            args,
            tool_version: tool_version.into(),
            seed: None,
            config_hash: None,
            dataset_hash: None,
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path, "file")?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

/// One training step as a flat CSV record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub downstream: f64,
    pub reg: f64,
    pub distill: f64,
    pub flops_frac: f64,
    pub target_frac: f64,
    pub lambda_distill: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl From<&StepLog> for StepRow {
    fn from(l: &StepLog) -> Self {
        Self {
            step: l.step,
            epoch: l.epoch,
            total: l.parts.total,
            downstream: l.parts.downstream,
            reg: l.parts.reg,
            distill: l.parts.distill,
            flops_frac: l.parts.flops_frac,
            target_frac: l.parts.target_frac,
            lambda_distill: l.lambda_distill,
            lambda1: l.lambda1,
            lambda2: l.lambda2,
        }
    }
}

/// Per-layer bucketed importance scores of an unpruned model.
pub fn model_score_distribution(model: &EncoderModel, examples: &[Example]) -> Result<Vec<ScoreDistributionRow>> {
    let c = &model.config;
    let plan = PrunePlan::noop(c.num_layers, c.max_len);
    let mut per_example = Vec::with_capacity(examples.len());
    for e in examples {
        per_example.push(infer(model, &plan, &e.tokens)?.layer_scores);
    }
    let layers: Vec<usize> = (1..=c.num_layers).collect();
    Ok(score_distribution(&per_example, &layers, &RankBucket::defaults()))
}

/// What `prune` leaves in the run directory for later reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneRecord {
    pub run: String,
    pub report: RunReport,
    pub teacher_scores: Vec<ScoreDistributionRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub run: String,
    pub layer: usize,
    pub bucket: String,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedCsvRow {
    pub run: String,
    pub target_sparsity: f64,
    pub layer: usize,
    pub mean_input: f64,
    pub mean_retained: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub target_sparsity: f64,
    pub lambda_distill: f64,
    pub teacher_accuracy: f64,
    pub accuracy: f64,
    pub expected_sparsity: f64,
    pub achieved_sparsity: f64,
    pub signal_retention: f64,
    pub layer1_ndcg: f64,
}

/// The three plot-ready tables built from a set of pruning records.
pub struct ReportTables {
    pub scores: Vec<ScoreRow>,
    pub retained: Vec<RetainedCsvRow>,
    pub sweep: Vec<SweepRow>,
}

pub fn report_tables(records: &[PruneRecord]) -> ReportTables {
    let mut sorted: Vec<&PruneRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.report
            .target_sparsity
            .total_cmp(&b.report.target_sparsity)
            .then_with(|| a.run.cmp(&b.run))
    });
    let mut t = ReportTables {
        scores: Vec::new(),
        retained: Vec::new(),
        sweep: Vec::new(),
    };
    for rec in sorted {
        let r = &rec.report;
        t.scores.extend(rec.teacher_scores.iter().map(|s| ScoreRow {
            run: rec.run.clone(),
            layer: s.layer,
            bucket: s.bucket.clone(),
            count: s.count,
            mean: s.mean,
            min: s.min,
            q25: s.q25,
            median: s.median,
            q75: s.q75,
            max: s.max,
        }));
        t.retained.extend(r.retained.iter().map(|row| RetainedCsvRow {
            run: rec.run.clone(),
            target_sparsity: r.target_sparsity,
            layer: row.layer,
            mean_input: row.mean_input,
            mean_retained: row.mean_retained,
        }));
        t.sweep.push(SweepRow {
            run: rec.run.clone(),
            target_sparsity: r.target_sparsity,
            lambda_distill: r.lambda_distill_init,
            teacher_accuracy: r.teacher_accuracy,
            accuracy: r.accuracy,
            expected_sparsity: r.expected_sparsity,
            achieved_sparsity: r.achieved_sparsity,
            signal_retention: r.signal_retention,
            layer1_ndcg: r.layer1_ndcg,
        });
    }
    t
}

/// Accuracy and counted FLOPs reduction of an archive's plan on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub examples: usize,
    pub accuracy: f64,
    pub counted_flops: u64,
    pub full_flops: f64,
    pub flops_reduction: f64,
    pub mean_retained: Vec<f64>,
}

pub fn evaluate_archive(archive: &ModelArchive, examples: &[Example]) -> Result<EvalSummary> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let model = archive.model();
    let plan = archive.plan();
    let (mut correct, mut counted, mut full) = (0usize, 0u64, 0.0);
    let mut retained = vec![0.0; model.config.num_layers];
    for e in examples {
        let r = infer(&model, &plan, &e.tokens)?;
        if argmax(&r.logits) == e.label {
            correct += 1;
        }
        counted += r.flops;
        full += full_flops(&model.config, real_length(&e.tokens));
        for (acc, &k) in retained.iter_mut().zip(&r.retained) {
            *acc += k as f64;
        }
    }
    let count = examples.len() as f64;
    Ok(EvalSummary {
        examples: examples.len(),
        accuracy: correct as f64 / count,
        counted_flops: counted,
        full_flops: full,
        flops_reduction: full / counted as f64,
        mean_retained: retained.into_iter().map(|k| k / count).collect(),
    })
}

/// One line of the analytic-versus-counted FLOPs table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub length: usize,
    pub expected: f64,
    pub counted: u64,
    pub full: f64,
    pub matches: bool,
}

/// Compares the analytic count of `plan` with the instrumented runtime at
/// every real length from 2 to `max_len`.
pub fn flops_table(model: &EncoderModel, plan: &PrunePlan) -> Result<Vec<FlopsRow>> {
    let c = &model.config;
    let (gate, rank) = plan.as_probs();
    let mut rows = Vec::new();
    for n in 2..=c.max_len {
        let mut tokens = vec![special::PAD; c.max_len];
        tokens[0] = special::CLS;
        for t in &mut tokens[1..n - 1] {
            *t = special::UNK;
        }
        tokens[n - 1] = special::SEP;
        let expected = expected_tokens_from_probs(&gate, &rank, n)?.flops(c);
        let counted = count_flops_instrumented(model, plan, &tokens)?;
        rows.push(FlopsRow {
            length: n,
            expected,
            counted,
            full: full_flops(c, n),
            matches: expected == counted as f64,
        });
    }
    Ok(rows)
}
