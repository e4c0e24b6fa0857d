use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use contamlab::contamination::ContaminationManifest;
use contamlab::evaluation::{expl_score, finetune, mem_probe, write_records, FinetuneConfig};
use contamlab::lab::{self, CellConfig, ExperimentSpec, RunRecord};
use contamlab::model::ModelConfig;
use contamlab::report::{self, Series, SummaryContext, TableFormat};
use contamlab::textdata::{self, LabeledExample, TaskSpec, Vocab};
use contamlab::training::{self, fingerprint, ModelCheckpoint};
use contamlab::{Error, Result};

#[derive(Parser)]
#[command(name = "contamlab", version, about = "Data-contamination experiments on small masked language models")]
struct Cli {
    /// JSON cell configuration; missing fields take toy-reference values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, pretraining and fine-tuning.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record deterministic mode in the configuration.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "contamlab-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clean corpus and labeled task.
    GenData,
    /// Inject the task into the clean corpus.
    BuildCorpus {
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Pretrain an encoder on the built corpus.
    Pretrain,
    /// Cloze-probe the pretrained checkpoint (Mem).
    Probe,
    /// Fine-tune the pretrained checkpoint and score seen vs unseen (Expl).
    Finetune,
    /// Run a preset sweep.
    Sweep {
        preset: String,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Re-emit tables, plot data and the summary of a sweep directory.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

const CLEAN: &str = "clean.txt";
const TRAIN: &str = "train.tsv";
const TEST: &str = "test.tsv";
const CORPUS: &str = "corpus.txt";
const MANIFEST: &str = "manifest.json";
const VOCAB: &str = "vocab.txt";
const CHECKPOINT: &str = "checkpoint.ctlb";
const TRAIN_LOG: &str = "train_log.jsonl";

fn cell_config(cli: &Cli) -> Result<CellConfig> {
    let mut cell = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => CellConfig::toy_reference(),
    };
    if let Some(s) = cli.seed {
        cell.data_seed = s;
        cell.pretrain.seed = s;
        cell.finetune.seed = s;
    }
    if cli.deterministic {
        cell.pretrain.deterministic = true;
    }
    cell.validate()?;
    Ok(cell)
}

fn load_task(out: &Path) -> Result<TaskSpec> {
    textdata::ingest_task("task", &out.join(TRAIN), &out.join(TEST))
}

fn by_ids(task: &TaskSpec, ids: &[usize]) -> Vec<LabeledExample> {
    task.test.iter().filter(|e| ids.contains(&e.id)).cloned().collect()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Invalid(format!("{}: {e}", dir.display())))
}

fn emit_sweep_outputs(dir: &Path, spec: &ExperimentSpec, records: &[RunRecord]) -> Result<()> {
    let completed: Vec<RunRecord> = records.iter().filter(|r| r.completed()).cloned().collect();
    if !completed.is_empty() {
        let rows = lab::aggregate(&completed)?;
        report::emit_table(&rows, TableFormat::Csv, &dir.join(lab::AGGREGATE_FILE))?;
        report::emit_table(&rows, TableFormat::Markdown, &dir.join("aggregate.md"))?;
        report::emit_plot_data(&Series::from_rows(&spec.preset, &rows)?, &dir.join("plot.tsv"))?;
    }
    let fp = fingerprint(spec);
    let ctx = SummaryContext {
        preset: &spec.preset,
        config_fingerprint: &fp,
        base_seed: spec.seed_policy.base_seed,
        reference_notes: &spec.reference_notes,
    };
    report::emit_summary(&ctx, records, &dir.join("summary.md"))
}

fn run(cli: &Cli) -> Result<u8> {
    let out = &cli.out;
    mkdir(out)?;
    let cell = cell_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let data = lab::build_data(&cell)?;
            textdata::write_corpus(&out.join(CLEAN), &data.clean)?;
            textdata::write_labeled_tsv(&out.join(TRAIN), &data.task.train)?;
            textdata::write_labeled_tsv(&out.join(TEST), &data.task.test)?;
            println!("wrote {} clean lines, {} train, {} test", data.clean.len(), data.task.train.len(), data.task.test.len());
        }
        Command::BuildCorpus { clean, train, test } => {
            let clean = textdata::read_corpus(clean.as_deref().unwrap_or(&out.join(CLEAN)))?;
            let task = textdata::ingest_task(
                "task",
                train.as_deref().unwrap_or(&out.join(TRAIN)),
                test.as_deref().unwrap_or(&out.join(TEST)),
            )?;
            let (corpus, manifest) = match cell.ratio {
                Some(r) => contamlab::contamination::ratio_build(&task, &cell.plan, r.ratio, r.target_total, &clean, cell.data_seed)?,
                None => contamlab::contamination::inject(&clean, &task, &cell.plan, cell.data_seed)?,
            };
            let report = contamlab::contamination::verify_manifest(&corpus, &manifest);
            if !report.passed() {
                return Err(Error::Invalid(format!("manifest audit failed: {:?}", report.failure)));
            }
            let mut lines = clean.clone();
            lines.extend(task.all_lines());
            let vocab = Vocab::build(&lines, 1)?;
            textdata::write_corpus(&out.join(CORPUS), &corpus)?;
            manifest.save(&out.join(MANIFEST))?;
            vocab.save(&out.join(VOCAB))?;
            println!("corpus: {} lines ({} injected), vocabulary {}", corpus.len(), manifest.injected.len(), vocab.len());
        }
        Command::Pretrain => {
            let corpus = textdata::read_corpus(&out.join(CORPUS))?;
            let manifest = ContaminationManifest::load(&out.join(MANIFEST))?;
            let vocab = Vocab::load(&out.join(VOCAB))?;
            let model = ModelConfig::by_name(&cell.model, vocab.len())?;
            let outcome = training::pretrain(&corpus, Some(&manifest), &vocab, &model, &cell.pretrain)?;
            outcome.checkpoint.save(&out.join(CHECKPOINT))?;
            training::write_training_log(&out.join(TRAIN_LOG), &outcome.log)?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
            println!("{} steps, final loss {last:.4}", outcome.log.len());
        }
        Command::Probe => {
            let ckpt = ModelCheckpoint::load(&out.join(CHECKPOINT))?;
            let manifest = ContaminationManifest::load(&out.join(MANIFEST))?;
            let vocab = Vocab::load(&out.join(VOCAB))?;
            let task = load_task(out)?;
            let (seen, unseen) = (by_ids(&task, &manifest.seen_ids), by_ids(&task, &manifest.unseen_ids));
            let probe = mem_probe(&ckpt.params, &vocab, &task, &seen, &unseen, manifest.plan.label_format)?;
            write_records(&out.join("probe_records.jsonl"), &probe.records)?;
            write_json(
                &out.join("probe.json"),
                &serde_json::json!({"acc_seen": probe.acc_seen, "acc_unseen": probe.acc_unseen, "mem": probe.mem}),
            )?;
            println!("Mem {:.2} (seen {:.4}, unseen {:.4})", probe.mem, probe.acc_seen, probe.acc_unseen);
        }
        Command::Finetune => {
            let ckpt = ModelCheckpoint::load(&out.join(CHECKPOINT))?;
            let manifest = ContaminationManifest::load(&out.join(MANIFEST))?;
            let vocab = Vocab::load(&out.join(VOCAB))?;
            let task = load_task(out)?;
            let (seen, unseen) = (by_ids(&task, &manifest.seen_ids), by_ids(&task, &manifest.unseen_ids));
            let cfg = FinetuneConfig {
                train_subset_size: cell.finetune.train_subset_size.map(|n| n.min(task.train.len())),
                ..cell.finetune.clone()
            };
            let outcome = finetune(&ckpt, &task, &vocab, &cfg)?;
            let result = expl_score(&outcome, &vocab, &seen, &unseen)?;
            write_records(&out.join("finetune_records.jsonl"), &result.records)?;
            write_json(
                &out.join("finetune.json"),
                &serde_json::json!({
                    "acc_seen": result.acc_seen, "acc_unseen": result.acc_unseen, "expl": result.expl,
                    "seed": result.seed, "final_train_loss": result.final_train_loss,
                }),
            )?;
            println!("Expl {:.2} (seen {:.4}, unseen {:.4})", result.expl, result.acc_seen, result.acc_unseen);
        }
        Command::Sweep { preset, trials } => {
            let mut spec = lab::preset(preset)?;
            if cli.config.is_some() {
                spec.base = cell.clone();
            }
            if let Some(s) = cli.seed {
                spec.base.data_seed = s;
                spec.base.pretrain.seed = s;
                spec.seed_policy.base_seed = s;
            }
            if cli.deterministic {
                spec.base.pretrain.deterministic = true;
            }
            if let Some(t) = trials {
                spec.num_trials = *t;
            }
            let dir = out.join(preset);
            mkdir(&dir)?;
            spec.out_dir = Some(dir.clone());
            write_json(&dir.join("spec.json"), &spec)?;
            let outcome = lab::run_sweep(&spec)?;
            emit_sweep_outputs(&dir, &spec, &outcome.records)?;
            println!(
                "{}: {} records ({} new, {} failed, {} pretraining runs)",
                preset,
                outcome.records.len(),
                outcome.newly_run,
                outcome.failures,
                outcome.pretrain_runs
            );
            if outcome.failures > 0 {
                return Ok(2);
            }
        }
        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or_else(|| out.clone());
            let text = std::fs::read_to_string(dir.join("spec.json"))
                .map_err(|e| Error::Invalid(format!("{}: {e}", dir.join("spec.json").display())))?;
            let spec: ExperimentSpec = serde_json::from_str(&text)?;
            let records = lab::read_run_records(&dir.join(lab::RECORDS_FILE))?;
            emit_sweep_outputs(&dir, &spec, &records)?;
            println!("report written to {}", dir.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } | Error::NonFinite { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
