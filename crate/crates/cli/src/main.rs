//! Command-line front end: dataset generation, teacher training, pruning,
//! evaluation, inference, FLOPs cross-checks and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tokprune::data::{gen_data, ingest_jsonl, write_atomic, Dataset, NeedleSpec};
use tokprune::inference::infer;
use tokprune::io::{
    cached_teacher_rankings, csv_bytes, evaluate_archive, flops_table, model_score_distribution, read_json,
    report_tables, write_csv, write_json, ArchiveMetadata, ModelArchive, PruneRecord, RunConfigFile, RunManifest,
    StepRow,
};
use tokprune::model::special;
use tokprune::trainer::{accuracy, argmax, evaluate, train_teacher, PruneRun};
use tokprune::{Error, Result};

const VERSION: &str = env!("TOKPRUNE_VERSION");

#[derive(Parser)]
#[command(name = "tokprune", version = VERSION, about = "Learned token pruning for small transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic needle dataset from a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize JSONL records into a dataset directory.
    Ingest {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        max_len: usize,
        #[arg(long)]
        vocab_cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unpruned teacher.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn token-pruning masks starting from a teacher.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the configured target sparsity.
        #[arg(long, allow_hyphen_values = true)]
        sparsity: Option<f64>,
        /// Overrides the configured initial distillation weight.
        #[arg(long)]
        lambda_distill: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and FLOPs reduction of an archive on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Per-example logits and retained-token trace for a JSONL input.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Cross-check analytic FLOPs against the instrumented runtime.
    Flops {
        #[arg(long)]
        model: PathBuf,
        /// Check the archive's pruning plan instead of the full model.
        #[arg(long)]
        plan: bool,
    },
    /// Build plot-ready CSV tables from the pruning runs in a directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn quiet() -> bool {
    matches!(std::env::var("TOKPRUNE_LOG").as_deref(), Ok("quiet") | Ok("off"))
}

fn note(msg: &str) {
    if !quiet() {
        eprintln!("{msg}");
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Training { .. } | Error::Numeric(_) | Error::DegenerateAttention | Error::DegeneratePlan { .. } => 3,
        Error::Verification(_) => 4,
        Error::Data(_) | Error::Input(_) | Error::Dimension(_) | Error::Io(_) | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn manifest(command: &str) -> RunManifest {
    RunManifest::new(command, std::env::args().skip(1).collect(), VERSION)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfigFile) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Usage("no dataset: pass --data or set data.dir in the config".into()))
}

fn run_dir(cfg: &RunConfigFile, out: &Path) -> PathBuf {
    match &cfg.output.run_dir {
        Some(d) => PathBuf::from(d),
        None => out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf(),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let spec: NeedleSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("spec: {e}")))?;
            let ds = gen_data(&spec)?;
            save_dataset(&ds, &out, manifest("gen-data"), Some(spec.seed))
        }
        Command::Ingest {
            train,
            test,
            max_len,
            vocab_cap,
            out,
        } => {
            let ds = ingest_jsonl(&train, test.as_deref(), max_len, vocab_cap)?;
            save_dataset(&ds, &out, manifest("ingest"), None)
        }
        Command::TrainTeacher { config, data, out } => train_teacher_cmd(&config, data, &out),
        Command::Prune {
            config,
            teacher,
            data,
            sparsity,
            lambda_distill,
            out,
        } => prune_cmd(&config, &teacher, data, sparsity, lambda_distill, &out),
        Command::Eval { model, data, split } => {
            let archive = ModelArchive::load(&model)?;
            let ds = Dataset::load(&data)?;
            let examples = match split {
                Split::Train => &ds.train,
                Split::Test => &ds.test,
            };
            let summary = evaluate_archive(&archive, examples)?;
            print_json(&summary)?;
            let mut m = manifest("eval");
            m.seed = Some(archive.metadata.seed);
            m.config_hash = Some(archive.metadata.config_hash.clone());
            m.dataset_hash = Some(ds.content_hash()?);
            m.save(&sibling(&model, ".eval.manifest.json"))
        }
        Command::Infer { model, input } => infer_cmd(&model, &input),
        Command::Flops { model, plan } => {
            let archive = ModelArchive::load(&model)?;
            if plan && archive.masks.is_none() {
                return Err(Error::Usage("--plan needs a pruned archive".into()));
            }
            let p = if plan {
                archive.plan()
            } else {
                tokprune::inference::PrunePlan::noop(archive.config.num_layers, archive.config.max_len)
            };
            let rows = flops_table(&archive.model(), &p)?;
            print!("{}", String::from_utf8_lossy(&csv_bytes(&rows)?));
            let mut m = manifest("flops");
            m.seed = Some(archive.metadata.seed);
            m.config_hash = Some(archive.metadata.config_hash.clone());
            m.save(&sibling(&model, ".flops.manifest.json"))?;
            match rows.iter().find(|r| !r.matches) {
                Some(r) => Err(Error::Verification(format!(
                    "length {}: analytic {} vs counted {}",
                    r.length, r.expected, r.counted
                ))),
                None => Ok(()),
            }
        }
        Command::Report { run } => report_cmd(&run),
    }
}

fn save_dataset(ds: &Dataset, out: &Path, mut m: RunManifest, seed: Option<u64>) -> Result<()> {
    ds.save(out)?;
    for name in ["manifest.json", "train.jsonl", "test.jsonl"] {
        m.record_output(&out.join(name))?;
    }
    m.seed = seed;
    m.dataset_hash = Some(ds.content_hash()?);
    m.save(&out.join("run-manifest.json"))?;
    note(&format!(
        "wrote {} train / {} test examples to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    ));
    Ok(())
}

#[derive(Serialize)]
struct TeacherSummary {
    epochs: usize,
    steps: usize,
    train_accuracy: f64,
    test_accuracy: Option<f64>,
    final_loss: f64,
}

fn train_teacher_cmd(config: &Path, data: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    let ds = Dataset::load(&data_dir(data, &cfg)?)?;
    cfg.check_dataset(&ds)?;
    let dataset_hash = ds.content_hash()?;
    note(&format!("training teacher on {} examples", ds.train.len()));
    let (model, rep) = train_teacher(&ds.train, &cfg.model, &cfg.train)?;
    let test_accuracy = if ds.test.is_empty() {
        None
    } else {
        let plan = tokprune::inference::PrunePlan::noop(cfg.model.num_layers, cfg.model.max_len);
        Some(accuracy(&model, &plan, &ds.test)?)
    };
    let meta = ArchiveMetadata {
        tool_version: VERSION.into(),
        seed: cfg.train.seed,
        config_hash: cfg.hash()?,
        dataset_hash: dataset_hash.clone(),
        teacher_checksum: None,
        steps: rep.steps,
        epochs: rep.epochs,
        target_sparsity: None,
    };
    ModelArchive::new(model, None, None, meta)?.save(out)?;
    let summary = TeacherSummary {
        epochs: rep.epochs,
        steps: rep.steps,
        train_accuracy: rep.train_accuracy,
        test_accuracy,
        final_loss: rep.final_loss,
    };
    let summary_path = run_dir(&cfg, out).join(format!("{}.teacher.json", stem(out)));
    write_json(&summary_path, &summary)?;
    let mut m = manifest("train-teacher");
    m.seed = Some(cfg.train.seed);
    m.config_hash = Some(cfg.hash()?);
    m.dataset_hash = Some(dataset_hash);
    m.record_output(out)?;
    m.record_output(&summary_path)?;
    m.save(&sibling(out, ".manifest.json"))?;
    print_json(&summary)
}

#[derive(Serialize)]
struct PruneSummary {
    target_sparsity: f64,
    teacher_accuracy: f64,
    accuracy: f64,
    expected_sparsity: f64,
    achieved_sparsity: f64,
    signal_retention: f64,
    layer1_ndcg: f64,
    tokens_per_layer: Vec<f64>,
}

fn prune_cmd(
    config: &Path,
    teacher_path: &Path,
    data: Option<PathBuf>,
    sparsity: Option<f64>,
    lambda_distill: Option<f64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = RunConfigFile::load(config)?;
    if let Some(s) = sparsity {
        cfg.prune.target_sparsity = s;
    }
    if let Some(l) = lambda_distill {
        cfg.prune.lambda_distill_init = l;
    }
    cfg.validate()?;
    let teacher = ModelArchive::load(teacher_path)?;
    if teacher.config != cfg.model {
        return Err(Error::Config("teacher archive and config disagree on the model".into()));
    }
    let ds = Dataset::load(&data_dir(data, &cfg)?)?;
    cfg.check_dataset(&ds)?;
    let dataset_hash = ds.content_hash()?;
    let cache = sibling(teacher_path, ".rankings.json");
    let (ranks, hit) = cached_teacher_rankings(&cache, &teacher, &dataset_hash, &ds.train)?;
    note(&format!(
        "teacher rankings {} ({})",
        if hit { "loaded" } else { "computed" },
        cache.display()
    ));
    let teacher_model = teacher.model();
    let mut run = PruneRun::new(&teacher_model, &ds.train, &ranks, &cfg.prune)?;
    run.run(|r| {
        if let Some(e) = r.state.epochs.last() {
            note(&format!(
                "epoch {}: loss {:.4} task {:.4} flops {:.3} target {:.3}",
                e.epoch + 1,
                e.mean_total,
                e.mean_downstream,
                e.flops_frac,
                e.target_frac
            ));
        }
        Ok(())
    })?;
    let eval_set = if ds.test.is_empty() { &ds.train } else { &ds.test };
    let report = evaluate(&teacher_model, &run.model, &run.masks, &run.state, &cfg.prune, eval_set)?;
    let meta = ArchiveMetadata {
        tool_version: VERSION.into(),
        seed: cfg.prune.seed,
        config_hash: cfg.hash()?,
        dataset_hash: dataset_hash.clone(),
        teacher_checksum: Some(teacher.checksums.params.clone()),
        steps: run.state.step,
        epochs: run.state.epoch,
        target_sparsity: Some(cfg.prune.target_sparsity),
    };
    ModelArchive::new(
        run.model.clone(),
        Some(run.masks.clone()),
        Some(run.state.lagrange),
        meta,
    )?
    .save(out)?;

    let dir = run_dir(&cfg, out);
    let name = stem(out);
    let summary = PruneSummary {
        target_sparsity: report.target_sparsity,
        teacher_accuracy: report.teacher_accuracy,
        accuracy: report.accuracy,
        expected_sparsity: report.expected_sparsity,
        achieved_sparsity: report.achieved_sparsity,
        signal_retention: report.signal_retention,
        layer1_ndcg: report.layer1_ndcg,
        tokens_per_layer: report.retained.iter().map(|r| r.mean_input).collect(),
    };
    let record = PruneRecord {
        run: name.clone(),
        teacher_scores: model_score_distribution(&teacher_model, eval_set)?,
        report,
    };
    let record_path = dir.join(format!("{name}.report.json"));
    write_json(&record_path, &record)?;
    let steps_path = dir.join(format!("{name}.steps.csv"));
    let steps: Vec<StepRow> = run.state.log.iter().map(StepRow::from).collect();
    write_csv(&steps_path, &steps)?;

    let mut m = manifest("prune");
    m.seed = Some(cfg.prune.seed);
    m.config_hash = Some(cfg.hash()?);
    m.dataset_hash = Some(dataset_hash);
    for p in [out, record_path.as_path(), steps_path.as_path()] {
        m.record_output(p)?;
    }
    m.save(&sibling(out, ".manifest.json"))?;
    print_json(&summary)
}

#[derive(Deserialize)]
struct InferRecord {
    tokens: Vec<u32>,
}

#[derive(Serialize)]
struct InferLine {
    index: usize,
    prediction: usize,
    logits: Vec<f64>,
    retained: Vec<usize>,
    layer_positions: Vec<Vec<usize>>,
    flops: u64,
}

fn infer_cmd(model: &Path, input: &Path) -> Result<()> {
    let archive = ModelArchive::load(model)?;
    let text = fs::read_to_string(input).map_err(|e| Error::Input(format!("{}: {e}", input.display())))?;
    let m_cfg = &archive.config;
    let net = archive.model();
    let plan = archive.plan();
    let mut lines = String::new();
    let mut count = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: InferRecord =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("{}:{}: {e}", input.display(), i + 1)))?;
        if rec.tokens.len() > m_cfg.max_len {
            return Err(Error::Data(format!(
                "{}:{}: sequence exceeds max_len",
                input.display(),
                i + 1
            )));
        }
        let mut tokens = rec.tokens;
        tokens.resize(m_cfg.max_len, special::PAD);
        let r = infer(&net, &plan, &tokens).map_err(|e| Error::Data(format!("{}:{}: {e}", input.display(), i + 1)))?;
        let out = InferLine {
            index: count,
            prediction: argmax(&r.logits),
            logits: r.logits,
            retained: r.retained,
            layer_positions: r.layer_positions,
            flops: r.flops,
        };
        lines.push_str(&serde_json::to_string(&out)?);
        lines.push('\n');
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data(format!("{} has no records", input.display())));
    }
    print!("{lines}");
    let mut m = manifest("infer");
    m.seed = Some(archive.metadata.seed);
    m.config_hash = Some(archive.metadata.config_hash.clone());
    m.save(&sibling(model, ".infer.manifest.json"))
}

fn report_cmd(run: &Path) -> Result<()> {
    let entries = fs::read_dir(run).map_err(|e| Error::Input(format!("{}: {e}", run.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".report.json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no pruning reports in {}", run.display())));
    }
    let records = paths
        .iter()
        .map(|p| read_json::<PruneRecord>(p))
        .collect::<Result<Vec<_>>>()?;
    let tables = report_tables(&records);
    let mut m = manifest("report");
    let outputs = [
        ("score_distribution.csv", csv_bytes(&tables.scores)?),
        ("retained_tokens.csv", csv_bytes(&tables.retained)?),
        ("sparsity_accuracy.csv", csv_bytes(&tables.sweep)?),
    ];
    for (name, bytes) in outputs {
        let path = run.join(name);
        write_atomic(&path, &bytes)?;
        m.record_output(&path)?;
        note(&format!("wrote {}", path.display()));
    }
    m.save(&run.join("report-manifest.json"))
}
