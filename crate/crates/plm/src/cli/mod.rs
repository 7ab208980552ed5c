//! Command-line front end. Every subcommand resolves its settings from
//! an optional `key = value` config file overlaid with flags (flags
//! win), prints the resolved configuration as `# key = value` lines,
//! and exits 0 on success, 2 on usage or config errors, 3 when training
//! diverges.

mod resolve;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::{
    gen_synthetic, parse_fasta, parse_task_records, serialize_task_records, write_fasta,
    GenParams, Label, ProteinRecord, SyntheticTask, TaskKind, SS3_ALPHABET, SS8_ALPHABET,
};
use crate::error::{Error, Result};
use crate::metrics::{contact_precision, spearman_rho, token_accuracy, top1_accuracy, ContactBand};
use crate::model::{HeadKind, Model, ModelConfig};
use crate::tokenizer;
use crate::trainer::{
    finetune, load_checkpoint, ppl, predict_contact_scores, predict_seq_classes,
    predict_token_classes, predict_values, pretrain, save_checkpoint, Schedule, TrainOptions,
};
use crate::viz::{apply_band, contact_score_pixels, contact_truth_pixels, pgm_bytes};
use resolve::FileConfig;

const DEPTH_GUIDANCE: &str =
    "depth guidance: encoder grids between 8 and 24 layers scale best; \
     desk-scale runs default far smaller";

#[derive(Parser)]
#[command(
    name = "plm",
    about = "Protein language model: MLM pretraining and downstream tasks",
    long_about = format!(
        "Protein language model pipeline: synthetic data generation, masked-language-model \
         pretraining, task-head finetuning, evaluation, and contact-map rendering.\n\n{DEPTH_GUIDANCE}."
    )
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus
    Gen(GenArgs),
    /// Pretrain with the masked-language-model objective
    Pretrain(PretrainArgs),
    /// Train a task head (and the encoder) on labeled records
    Finetune(TaskArgs),
    /// Evaluate a checkpoint on labeled records
    Eval(TaskArgs),
    /// Render a record's contact map (and optional predictions) as PGM
    Visualize(VisualizeArgs),
    /// Print the 30-token vocabulary as `id<TAB>token` lines
    Vocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskName {
    Motif,
    Ss3,
    Ss8,
    Homology,
    Contact,
    Landscape,
}

impl TaskName {
    fn as_str(self) -> &'static str {
        match self {
            TaskName::Motif => "motif",
            TaskName::Ss3 => "ss3",
            TaskName::Ss8 => "ss8",
            TaskName::Homology => "homology",
            TaskName::Contact => "contact",
            TaskName::Landscape => "landscape",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "motif" => Ok(TaskName::Motif),
            "ss3" => Ok(TaskName::Ss3),
            "ss8" => Ok(TaskName::Ss8),
            "homology" => Ok(TaskName::Homology),
            "contact" => Ok(TaskName::Contact),
            "landscape" => Ok(TaskName::Landscape),
            _ => Err(Error::Config(format!(
                "unknown task '{s}' (motif, ss3, ss8, homology, contact, landscape)"
            ))),
        }
    }

    fn synthetic(self) -> SyntheticTask {
        match self {
            TaskName::Motif => SyntheticTask::Motif,
            TaskName::Ss3 => SyntheticTask::Ss3,
            TaskName::Ss8 => SyntheticTask::Ss8,
            TaskName::Homology => SyntheticTask::Homology,
            TaskName::Contact => SyntheticTask::Contact,
            TaskName::Landscape => SyntheticTask::Landscape,
        }
    }

    /// Record format for labeled tasks; the motif corpus is FASTA.
    fn record_kind(self, classes: usize) -> Result<TaskKind> {
        match self {
            TaskName::Ss3 => Ok(TaskKind::Ss3),
            TaskName::Ss8 => Ok(TaskKind::Ss8),
            TaskName::Homology => Ok(TaskKind::Fold { num_classes: classes }),
            TaskName::Contact => Ok(TaskKind::Contact),
            TaskName::Landscape => Ok(TaskKind::Value),
            TaskName::Motif => Err(Error::Config(
                "the motif corpus is unlabeled; pick a labeled task".into(),
            )),
        }
    }

    fn head(self, classes: usize) -> Result<HeadKind> {
        match self {
            TaskName::Ss3 => Ok(HeadKind::TokenClass { classes: 3 }),
            TaskName::Ss8 => Ok(HeadKind::TokenClass { classes: 8 }),
            TaskName::Homology => Ok(HeadKind::SeqClass { classes }),
            TaskName::Contact => Ok(HeadKind::Contact),
            TaskName::Landscape => Ok(HeadKind::Regress),
            TaskName::Motif => Err(Error::Config("the motif corpus has no task head".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BandName {
    All,
    Medium,
    Long,
}

impl BandName {
    fn as_str(self) -> &'static str {
        match self {
            BandName::All => "all",
            BandName::Medium => "medium",
            BandName::Long => "long",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(BandName::All),
            "medium" => Ok(BandName::Medium),
            "long" => Ok(BandName::Long),
            _ => Err(Error::Config(format!("unknown band '{s}' (all, medium, long)"))),
        }
    }

    fn band(self) -> ContactBand {
        match self {
            BandName::All => ContactBand::All,
            BandName::Medium => ContactBand::Medium,
            BandName::Long => ContactBand::Long,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Config file with `key = value` lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which corpus to generate
    #[arg(long, value_enum)]
    task: Option<TaskName>,
    /// Output file (FASTA for motif, task records otherwise)
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Record count (landscape: train variants, parent excluded)
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Planted k-mer for the motif and homology corpora
    #[arg(long)]
    motif: Option<String>,
    /// Family label count in the motif corpus
    #[arg(long)]
    num_families: Option<usize>,
    /// Class count for the homology corpus
    #[arg(long)]
    num_classes: Option<usize>,
    /// Probability an anti-diagonal pair is forced equal (contact)
    #[arg(long)]
    match_prob: Option<f64>,
    /// Held-out far-mutant count (landscape); requires --test-out
    #[arg(long)]
    test_count: Option<usize>,
    /// Where the landscape test block is written
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Config file with `key = value` lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus (FASTA)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation corpus (FASTA); defaults to evaluating on train
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Named size preset, e.g. hidden-512-layer-32-head-8
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    hidden_size: Option<usize>,
    /// Encoder depth
    #[arg(long, help = format!("Encoder depth ({DEPTH_GUIDANCE})"))]
    num_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    ffn_size: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Normalize before each sublayer (true) or after (false)
    #[arg(long)]
    pre_ln: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Fraction of interior positions selected for corruption
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    report_every: Option<usize>,
    /// Stop once the evaluated loss drops below this value
    #[arg(long)]
    stop_below: Option<f64>,
    /// Checkpoint output path
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Report CSV output path
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Shared by finetune and eval: checkpoint + labeled records + task.
#[derive(Args)]
struct TaskArgs {
    /// Config file with `key = value` lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to start from
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Labeled task records
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskName>,
    /// Class count for the homology task
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    report_every: Option<usize>,
    #[arg(long)]
    stop_below: Option<f64>,
    /// Checkpoint output path (finetune only)
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Report CSV output path (finetune only)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Separation band for contact metrics (eval only)
    #[arg(long, value_enum)]
    band: Option<BandName>,
    /// Top-k divisor: score the best ceil(L/divisor) pairs (eval only)
    #[arg(long)]
    divisor: Option<usize>,
    /// Minimum pair separation for contact metrics (eval only)
    #[arg(long)]
    min_sep: Option<usize>,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Config file with `key = value` lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Contact task records
    #[arg(long)]
    data: Option<PathBuf>,
    /// Record id to render; defaults to the first record
    #[arg(long)]
    id: Option<String>,
    /// Checkpoint with a contact head; adds a prediction image
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for `<id>.truth.pgm` / `<id>.pred.pgm`
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Black out pixels outside this separation band
    #[arg(long, value_enum)]
    band: Option<BandName>,
    #[arg(long)]
    max_len: Option<usize>,
}

/// Entry point for the binary: parse, dispatch, map errors to exit
/// codes (clap itself exits 2 on usage errors).
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Visualize(args) => cmd_visualize(args),
        Command::Vocab => cmd_vocab(),
    }
}

fn print_resolved(pairs: &[(&str, String)]) {
    println!("# resolved config");
    for (key, value) in pairs {
        println!("# {key} = {value}");
    }
}

fn require<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required setting '{key}'")))
}

fn display_path(path: &Path) -> String {
    path.display().to_string()
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut file = FileConfig::load(args.config.as_deref())?;
    let task = match args.task {
        Some(t) => t,
        None => require(file.take_with("task", TaskName::parse)?, "task")?,
    };
    let out: PathBuf = require(args.out.or(file.take("out")?), "out")?;
    let defaults = GenParams::default();
    let params = GenParams {
        count: args.count.or(file.take("count")?).unwrap_or(defaults.count),
        min_len: args.min_len.or(file.take("min_len")?).unwrap_or(defaults.min_len),
        max_len: args.max_len.or(file.take("max_len")?).unwrap_or(defaults.max_len),
        motif: args.motif.or(file.take("motif")?).unwrap_or(defaults.motif),
        num_families: args
            .num_families
            .or(file.take("num_families")?)
            .unwrap_or(defaults.num_families),
        num_classes: args
            .num_classes
            .or(file.take("num_classes")?)
            .unwrap_or(defaults.num_classes),
        match_prob: args.match_prob.or(file.take("match_prob")?).unwrap_or(defaults.match_prob),
        landscape_test_count: args.test_count.or(file.take("test_count")?).unwrap_or(0),
    };
    let seed: u64 = args.seed.or(file.take("seed")?).unwrap_or(0);
    let test_out: Option<PathBuf> = args.test_out.or(file.take("test_out")?);
    file.finish()?;

    print_resolved(&[
        ("task", task.as_str().into()),
        ("out", display_path(&out)),
        ("count", params.count.to_string()),
        ("min_len", params.min_len.to_string()),
        ("max_len", params.max_len.to_string()),
        ("seed", seed.to_string()),
        ("motif", params.motif.clone()),
        ("num_families", params.num_families.to_string()),
        ("num_classes", params.num_classes.to_string()),
        ("match_prob", params.match_prob.to_string()),
        ("test_count", params.landscape_test_count.to_string()),
    ]);

    let records = gen_synthetic(task.synthetic(), &params, seed)?;
    let write = |path: &Path, recs: &[ProteinRecord]| -> Result<()> {
        let text = match task {
            TaskName::Motif => write_fasta(recs),
            _ => serialize_task_records(recs, task.record_kind(params.num_classes)?)?,
        };
        std::fs::write(path, text)?;
        println!("wrote {} records to {}", recs.len(), display_path(path));
        Ok(())
    };
    if task == TaskName::Landscape && params.landscape_test_count > 0 {
        let test_out = require(test_out, "test_out")?;
        let split = records.len() - params.landscape_test_count;
        write(&out, &records[..split])?;
        write(&test_out, &records[split..])?;
    } else {
        write(&out, &records)?;
    }
    Ok(())
}

/// Builds the encoder config from an optional preset plus individual
/// overrides, in that order.
#[allow(clippy::too_many_arguments)]
fn resolve_model_config(
    preset: Option<String>,
    hidden_size: Option<usize>,
    num_layers: Option<usize>,
    num_heads: Option<usize>,
    ffn_size: Option<usize>,
    max_positions: Option<usize>,
    dropout: Option<f64>,
    pre_ln: Option<bool>,
) -> Result<ModelConfig> {
    let mut config = match preset {
        Some(name) => ModelConfig::preset(&name)?,
        None => ModelConfig::new(
            hidden_size.unwrap_or(64),
            num_layers.unwrap_or(2),
            num_heads.unwrap_or(4),
        ),
    };
    if let Some(h) = hidden_size {
        config.hidden_size = h;
        config.ffn_size = 4 * h;
    }
    if let Some(l) = num_layers {
        config.num_layers = l;
    }
    if let Some(a) = num_heads {
        config.num_heads = a;
    }
    if let Some(f) = ffn_size {
        config.ffn_size = f;
    }
    if let Some(p) = max_positions {
        config.max_positions = p;
    }
    if let Some(d) = dropout {
        config.dropout = d;
    }
    if let Some(p) = pre_ln {
        config.pre_ln = p;
    }
    config.validate()?;
    Ok(config)
}

fn model_config_pairs(config: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("hidden_size", config.hidden_size.to_string()),
        ("num_layers", config.num_layers.to_string()),
        ("num_heads", config.num_heads.to_string()),
        ("ffn_size", config.ffn_size.to_string()),
        ("max_positions", config.max_positions.to_string()),
        ("vocab_size", config.vocab_size.to_string()),
        ("dropout", config.dropout.to_string()),
        ("pre_ln", config.pre_ln.to_string()),
    ]
}

fn options_pairs(opts: &TrainOptions) -> Vec<(&'static str, String)> {
    vec![
        ("steps", opts.schedule.total_steps.to_string()),
        ("warmup_steps", opts.schedule.warmup_steps.to_string()),
        ("peak_lr", opts.schedule.peak.to_string()),
        ("batch_size", opts.batch_size.to_string()),
        ("max_len", opts.max_len.to_string()),
        ("mask_rate", opts.mask_rate.to_string()),
        ("report_every", opts.report_every.to_string()),
        ("seed", opts.seed.to_string()),
        (
            "stop_below",
            opts.stop_below.map_or_else(|| "none".into(), |v| v.to_string()),
        ),
    ]
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", display_path(path))))
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let mut file = FileConfig::load(args.config.as_deref())?;
    let train_path: PathBuf = require(args.train.or(file.take("train")?), "train")?;
    let valid_path: Option<PathBuf> = args.valid.or(file.take("valid")?);
    let out: PathBuf = require(args.out.or(file.take("out")?), "out")?;
    let report_path: PathBuf =
        args.report.or(file.take("report")?).unwrap_or_else(|| PathBuf::from("report.csv"));
    let config = resolve_model_config(
        args.preset.or(file.take("preset")?),
        args.hidden_size.or(file.take("hidden_size")?),
        args.num_layers.or(file.take("num_layers")?),
        args.num_heads.or(file.take("num_heads")?),
        args.ffn_size.or(file.take("ffn_size")?),
        args.max_positions.or(file.take("max_positions")?),
        args.dropout.or(file.take("dropout")?),
        args.pre_ln.or(file.take("pre_ln")?),
    )?;
    let defaults = TrainOptions::default();
    let opts = TrainOptions {
        schedule: Schedule {
            peak: args.peak_lr.or(file.take("peak_lr")?).unwrap_or(defaults.schedule.peak),
            warmup_steps: args
                .warmup_steps
                .or(file.take("warmup_steps")?)
                .unwrap_or(defaults.schedule.warmup_steps),
            total_steps: args
                .steps
                .or(file.take("steps")?)
                .unwrap_or(defaults.schedule.total_steps),
        },
        batch_size: args.batch_size.or(file.take("batch_size")?).unwrap_or(defaults.batch_size),
        max_len: args.max_len.or(file.take("max_len")?).unwrap_or(defaults.max_len),
        mask_rate: args.mask_rate.or(file.take("mask_rate")?).unwrap_or(defaults.mask_rate),
        report_every: args
            .report_every
            .or(file.take("report_every")?)
            .unwrap_or(defaults.report_every),
        seed: args.seed.or(file.take("seed")?).unwrap_or(defaults.seed),
        stop_below: args.stop_below.or(file.take("stop_below")?),
        ..defaults
    };
    file.finish()?;

    let mut pairs = vec![
        ("train", display_path(&train_path)),
        (
            "valid",
            valid_path.as_deref().map_or_else(|| "none (uses train)".into(), display_path),
        ),
        ("out", display_path(&out)),
        ("report", display_path(&report_path)),
    ];
    pairs.extend(model_config_pairs(&config));
    pairs.extend(options_pairs(&opts));
    print_resolved(&pairs);

    let train = parse_fasta(&read_to_string(&train_path)?)?;
    let valid = match &valid_path {
        Some(p) => parse_fasta(&read_to_string(p)?)?,
        None => Vec::new(),
    };
    let (model, report) = pretrain::<f32>(config, &train, &valid, &opts)?;
    save_checkpoint(&model, None, &out)?;
    std::fs::write(&report_path, report.to_csv())?;
    let loss = report.final_loss().expect("pretrain always reports");
    println!("loss={loss} ppl={}", ppl(loss));
    Ok(())
}

struct TaskSetup {
    model: Model<f32>,
    records: Vec<ProteinRecord>,
    task: TaskName,
    head: HeadKind,
    classes: usize,
    opts: TrainOptions,
    out: Option<PathBuf>,
    report_path: Option<PathBuf>,
    band: BandName,
    divisor: usize,
    min_sep: usize,
    pairs: Vec<(&'static str, String)>,
}

/// Everything finetune and eval share: load checkpoint, parse records,
/// resolve the head and the knobs.
fn resolve_task(args: TaskArgs) -> Result<TaskSetup> {
    let mut file = FileConfig::load(args.config.as_deref())?;
    let checkpoint: PathBuf = require(args.checkpoint.or(file.take("checkpoint")?), "checkpoint")?;
    let data: PathBuf = require(args.data.or(file.take("data")?), "data")?;
    let task = match args.task {
        Some(t) => t,
        None => require(file.take_with("task", TaskName::parse)?, "task")?,
    };
    let classes: usize = args.num_classes.or(file.take("num_classes")?).unwrap_or(8);
    let defaults = TrainOptions::default();
    let opts = TrainOptions {
        schedule: Schedule {
            peak: args.peak_lr.or(file.take("peak_lr")?).unwrap_or(defaults.schedule.peak),
            warmup_steps: args
                .warmup_steps
                .or(file.take("warmup_steps")?)
                .unwrap_or(defaults.schedule.warmup_steps),
            total_steps: args
                .steps
                .or(file.take("steps")?)
                .unwrap_or(defaults.schedule.total_steps),
        },
        batch_size: args.batch_size.or(file.take("batch_size")?).unwrap_or(defaults.batch_size),
        max_len: args.max_len.or(file.take("max_len")?).unwrap_or(defaults.max_len),
        report_every: args
            .report_every
            .or(file.take("report_every")?)
            .unwrap_or(defaults.report_every),
        seed: args.seed.or(file.take("seed")?).unwrap_or(defaults.seed),
        stop_below: args.stop_below.or(file.take("stop_below")?),
        ..defaults
    };
    let out: Option<PathBuf> = args.out.or(file.take("out")?);
    let report_path: Option<PathBuf> = args.report.or(file.take("report")?);
    let band = match args.band {
        Some(b) => b,
        None => file.take_with("band", BandName::parse)?.unwrap_or(BandName::All),
    };
    let divisor: usize = args.divisor.or(file.take("divisor")?).unwrap_or(5);
    let min_sep: usize = args.min_sep.or(file.take("min_sep")?).unwrap_or(6);
    file.finish()?;

    let head = task.head(classes)?;
    let (model, _) = load_checkpoint(&checkpoint)?;
    let records = parse_task_records(&read_to_string(&data)?, task.record_kind(classes)?)?;

    let mut pairs = vec![
        ("checkpoint", display_path(&checkpoint)),
        ("data", display_path(&data)),
        ("task", task.as_str().into()),
        ("num_classes", classes.to_string()),
        ("band", band.as_str().into()),
        ("divisor", divisor.to_string()),
        ("min_sep", min_sep.to_string()),
    ];
    pairs.extend(model_config_pairs(&model.config));
    pairs.extend(options_pairs(&opts));

    Ok(TaskSetup {
        model,
        records,
        task,
        head,
        classes,
        opts,
        out,
        report_path,
        band,
        divisor,
        min_sep,
        pairs,
    })
}

fn cmd_finetune(args: TaskArgs) -> Result<()> {
    let mut setup = resolve_task(args)?;
    let out = require(setup.out.take(), "out")?;
    setup.pairs.insert(0, ("out", display_path(&out)));
    print_resolved(&setup.pairs);

    let report = finetune(&mut setup.model, setup.head, &setup.records, &setup.opts)?;
    save_checkpoint(&setup.model, None, &out)?;
    if let Some(path) = &setup.report_path {
        std::fs::write(path, report.to_csv())?;
    }
    let loss = report.final_loss().expect("finetune always reports");
    println!("loss={loss}");
    Ok(())
}

fn cmd_eval(args: TaskArgs) -> Result<()> {
    let setup = resolve_task(args)?;
    print_resolved(&setup.pairs);
    let model = &setup.model;
    if !model.has_head(setup.head) {
        return Err(Error::Config(format!(
            "checkpoint has no '{}' parameters; finetune it on this task first",
            setup.head.prefix()
        )));
    }
    let opts = &setup.opts;
    match setup.task {
        TaskName::Ss3 | TaskName::Ss8 => {
            let (classes, alphabet, name) = if setup.task == TaskName::Ss3 {
                (3, SS3_ALPHABET, "Q3")
            } else {
                (8, SS8_ALPHABET, "Q8")
            };
            let truth = truncated_token_truth(&setup.records, alphabet, opts.max_len)?;
            let pred = predict_token_classes(model, &setup.records, classes, opts)?;
            println!("{name}={:.4}", token_accuracy(&pred, &truth)?);
        }
        TaskName::Homology => {
            let truth: Vec<usize> = setup
                .records
                .iter()
                .map(|r| match r.label {
                    Some(Label::Class(c)) => Ok(c),
                    _ => Err(label_mismatch(r)),
                })
                .collect::<Result<_>>()?;
            let pred = predict_seq_classes(model, &setup.records, setup.classes, opts)?;
            println!("Top1={:.4}", top1_accuracy(&pred, &truth)?);
        }
        TaskName::Contact => {
            let value = mean_contact_precision(
                model,
                &setup.records,
                setup.divisor,
                setup.min_sep,
                setup.band.band(),
                opts,
            )?;
            let suffix = match setup.band {
                BandName::All => String::new(),
                b => format!("[{}]", b.as_str()),
            };
            println!("P@L/{}{suffix}={value:.4}", setup.divisor);
        }
        TaskName::Landscape => {
            let truth: Vec<f64> = setup
                .records
                .iter()
                .map(|r| match r.label {
                    Some(Label::Value(v)) => Ok(v),
                    _ => Err(label_mismatch(r)),
                })
                .collect::<Result<_>>()?;
            let pred = predict_values(model, &setup.records, opts)?;
            println!("Spearman={:.4}", spearman_rho(&pred, &truth)?);
        }
        TaskName::Motif => unreachable!("rejected while resolving the head"),
    }
    Ok(())
}

fn label_mismatch(rec: &ProteinRecord) -> Error {
    Error::InvalidArgument(format!("record '{}' lacks the expected label", rec.id))
}

/// Truth classes per record, truncated exactly like the model inputs.
fn truncated_token_truth(
    records: &[ProteinRecord],
    alphabet: &str,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut owned = records.to_vec();
    crate::corpus::truncate_records(&mut owned, max_len - 2);
    owned
        .iter()
        .map(|r| match &r.label {
            Some(Label::Tokens(s)) => {
                s.chars().map(|c| crate::corpus::ss_class_index(alphabet, c)).collect()
            }
            _ => Err(label_mismatch(r)),
        })
        .collect()
}

/// Mean per-record precision; records whose map yields no candidate
/// pairs are skipped (they have no ranking to score).
fn mean_contact_precision(
    model: &Model<f32>,
    records: &[ProteinRecord],
    divisor: usize,
    min_sep: usize,
    band: ContactBand,
    opts: &TrainOptions,
) -> Result<f64> {
    let mut owned = records.to_vec();
    crate::corpus::truncate_records(&mut owned, opts.max_len - 2);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for rec in &owned {
        let Some(Label::Contacts(map)) = &rec.label else {
            return Err(label_mismatch(rec));
        };
        let scores = predict_contact_scores(model, rec, opts)?;
        match contact_precision(&scores, map, divisor, min_sep, band) {
            Ok(p) => {
                sum += p;
                counted += 1;
            }
            Err(Error::EmptySelection(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(Error::EmptySelection("no record has candidate pairs in this band"));
    }
    Ok(sum / counted as f64)
}

fn cmd_visualize(args: VisualizeArgs) -> Result<()> {
    let mut file = FileConfig::load(args.config.as_deref())?;
    let data: PathBuf = require(args.data.or(file.take("data")?), "data")?;
    let id: Option<String> = args.id.or(file.take("id")?);
    let checkpoint: Option<PathBuf> = args.checkpoint.or(file.take("checkpoint")?);
    let out_dir: PathBuf = args.out_dir.or(file.take("out_dir")?).unwrap_or_else(|| ".".into());
    let band = match args.band {
        Some(b) => b,
        None => file.take_with("band", BandName::parse)?.unwrap_or(BandName::All),
    };
    let max_len: usize = args.max_len.or(file.take("max_len")?).unwrap_or(512);
    file.finish()?;

    print_resolved(&[
        ("data", display_path(&data)),
        ("id", id.clone().unwrap_or_else(|| "(first record)".into())),
        (
            "checkpoint",
            checkpoint.as_deref().map_or_else(|| "none (truth only)".into(), display_path),
        ),
        ("out_dir", display_path(&out_dir)),
        ("band", band.as_str().into()),
        ("max_len", max_len.to_string()),
    ]);

    let mut records = parse_task_records(&read_to_string(&data)?, TaskKind::Contact)?;
    crate::corpus::truncate_records(&mut records, max_len - 2);
    let record = match &id {
        Some(want) => records
            .iter()
            .find(|r| &r.id == want)
            .ok_or_else(|| Error::Config(format!("no record with id '{want}'")))?,
        None => records
            .first()
            .ok_or_else(|| Error::Config("the data file has no records".into()))?,
    };
    let Some(Label::Contacts(map)) = &record.label else {
        return Err(label_mismatch(record));
    };
    std::fs::create_dir_all(&out_dir)?;

    let size = map.size();
    let mut truth = contact_truth_pixels(map);
    apply_band(&mut truth, size, band.band());
    let truth_path = out_dir.join(format!("{}.truth.pgm", record.id));
    std::fs::write(&truth_path, pgm_bytes(&truth, size, size)?)?;
    println!("wrote {}", display_path(&truth_path));

    if let Some(ckpt) = &checkpoint {
        let (model, _) = load_checkpoint(ckpt)?;
        if !model.has_head(HeadKind::Contact) {
            return Err(Error::Config(
                "checkpoint has no 'head.contact' parameters; finetune it on contacts first"
                    .into(),
            ));
        }
        let opts = TrainOptions { max_len, ..TrainOptions::default() };
        let scores = predict_contact_scores(&model, record, &opts)?;
        let mut pred = contact_score_pixels(&scores)?;
        apply_band(&mut pred, size, band.band());
        let pred_path = out_dir.join(format!("{}.pred.pgm", record.id));
        std::fs::write(&pred_path, pgm_bytes(&pred, size, size)?)?;
        println!("wrote {}", display_path(&pred_path));
    }
    Ok(())
}

fn cmd_vocab() -> Result<()> {
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for id in 0..tokenizer::VOCAB_SIZE as u32 {
        match writeln!(out, "{id}\t{}", tokenizer::token_text(id)?) {
            // A closed pipe (e.g. `plm vocab | head`) is not a failure.
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
            other => other?,
        }
    }
    Ok(())
}
