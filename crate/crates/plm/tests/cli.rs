//! End-to-end tests of the `plm` binary: exit codes, config resolution,
//! artifact formats, and agreement between printed metrics and the
//! library calls they wrap.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plm::corpus::{
    parse_fasta, parse_task_records, serialize_task_records, ss_class_index, truncate_records,
    ContactMap, Label, ProteinRecord, TaskKind, SS3_ALPHABET,
};
use plm::metrics::token_accuracy;
use plm::trainer::{load_checkpoint, predict_token_classes, TrainOptions};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plm")).args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr:\n{}", out.status.code(), stderr_of(out));
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("plm-cli-{name}-{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny FASTA corpus used by the pretraining tests.
fn gen_motif_corpus(dir: &Path, name: &str, count: &str, seed: &str) -> PathBuf {
    let path = dir.join(name);
    let out = run(&[
        "gen", "--task", "motif", "--out", s(&path), "--count", count, "--min-len", "10",
        "--max-len", "14", "--seed", seed,
    ]);
    assert_ok(&out);
    path
}

/// Checkpoint from a few pretraining steps on a tiny encoder.
fn tiny_pretrain(dir: &Path, train: &Path, steps: &str) -> PathBuf {
    let ckpt = dir.join("base.ckpt");
    let out = run(&[
        "pretrain", "--train", s(train), "--out", s(&ckpt), "--report",
        s(&dir.join("base_report.csv")), "--hidden-size", "16", "--num-layers", "1",
        "--num-heads", "2", "--max-positions", "32", "--steps", steps, "--warmup-steps", "5",
        "--peak-lr", "1e-3", "--batch-size", "4", "--max-len", "16", "--report-every", "10",
        "--seed", "1",
    ]);
    assert_ok(&out);
    ckpt
}

#[test]
fn vocab_prints_the_full_token_table() {
    let out = run(&["vocab"]);
    assert_ok(&out);
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 30, "one line per vocabulary entry");
    assert_eq!(lines[0], "0\t[PAD]");
    assert_eq!(lines[5], "5\tA");
    for (id, line) in lines.iter().enumerate() {
        let (num, token) = line.split_once('\t').expect("id<TAB>token");
        assert_eq!(num.parse::<usize>().unwrap(), id);
        assert!(!token.is_empty());
    }
}

#[test]
fn gen_writes_identical_corpora_for_identical_seeds() {
    let dir = scratch_dir("gen-determinism");
    let first = gen_motif_corpus(&dir, "a.fasta", "12", "9");
    let second = gen_motif_corpus(&dir, "b.fasta", "12", "9");
    let bytes = std::fs::read(&first).unwrap();
    assert_eq!(bytes, std::fs::read(&second).unwrap(), "same seed, same bytes");

    let records = parse_fasta(std::str::from_utf8(&bytes).unwrap()).unwrap();
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| (10..=14).contains(&r.sequence.len())));
}

#[test]
fn flags_override_config_file_values() {
    let dir = scratch_dir("config-overlay");
    let out_path = dir.join("motif.fasta");
    let config = dir.join("gen.conf");
    std::fs::write(
        &config,
        format!("task = motif\ncount = 5\nseed = 2\nout = {}\n", out_path.display()),
    )
    .unwrap();

    let out = run(&["gen", "--config", s(&config), "--count", "7"]);
    assert_ok(&out);
    let text = stdout_of(&out);
    assert!(text.contains("# count = 7"), "flag beats file:\n{text}");
    assert!(text.contains("# seed = 2"), "file fills the gaps:\n{text}");

    let records = parse_fasta(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(records.len(), 7);
}

#[test]
fn unknown_config_keys_exit_with_usage_error() {
    let dir = scratch_dir("config-unknown");
    let config = dir.join("gen.conf");
    std::fs::write(&config, "task = motif\ncountt = 5\n").unwrap();
    let out = run(&["gen", "--config", s(&config), "--out", s(&dir.join("x.fasta"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("countt"), "names the offending key");
}

#[test]
fn missing_required_settings_exit_with_usage_error() {
    let dir = scratch_dir("missing-required");
    let out = run(&["pretrain", "--out", s(&dir.join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("missing required setting 'train'"));

    let out = run(&["gen", "--task", "motif"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("missing required setting 'out'"));
}

#[test]
fn pretrain_artifacts_are_consistent_and_reproducible() {
    let dir = scratch_dir("pretrain-artifacts");
    let corpus = gen_motif_corpus(&dir, "train.fasta", "16", "3");

    let ckpt = dir.join("model.ckpt");
    let report = dir.join("report.csv");
    let args = |out: &Path, rep: &Path| {
        vec![
            "pretrain".into(),
            "--train".into(), s(&corpus).to_string(),
            "--out".into(), s(out).to_string(),
            "--report".into(), s(rep).to_string(),
            "--hidden-size".into(), "16".into(),
            "--num-layers".into(), "1".into(),
            "--num-heads".into(), "2".into(),
            "--max-positions".into(), "32".into(),
            "--steps".into(), "30".into(),
            "--warmup-steps".into(), "5".into(),
            "--peak-lr".into(), "1e-3".into(),
            "--batch-size".into(), "4".into(),
            "--max-len".into(), "16".into(),
            "--report-every".into(), "10".into(),
            "--seed".into(), "1".into(),
        ]
    };
    let argv: Vec<String> = args(&ckpt, &report);
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    let out = run(&argv);
    assert_ok(&out);

    let text = stdout_of(&out);
    assert!(text.contains("# hidden_size = 16"), "echoes the model config:\n{text}");
    assert!(text.contains("# steps = 30"), "echoes the schedule:\n{text}");

    let final_line = text.lines().rev().find(|l| l.starts_with("loss=")).expect("summary line");
    let (loss_part, ppl_part) = final_line.split_once(' ').unwrap();
    let loss: f64 = loss_part.strip_prefix("loss=").unwrap().parse().unwrap();
    let ppl: f64 = ppl_part.strip_prefix("ppl=").unwrap().parse().unwrap();
    assert!((ppl - loss.exp()).abs() <= 1e-12 * ppl, "ppl {ppl} vs exp(loss) {}", loss.exp());

    // The report carries the same numbers: header, ascending steps, and
    // a perplexity column that is exactly exp(loss).
    let csv = std::fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,lr,loss,ppl,seconds"));
    let mut prev_step: Option<usize> = None;
    let mut last_loss = f64::NAN;
    let mut rows = 0usize;
    for row in lines {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5, "malformed row {row}");
        let step: usize = fields[0].parse().unwrap();
        let row_loss: f64 = fields[2].parse().unwrap();
        let row_ppl: f64 = fields[3].parse().unwrap();
        // The first row is the fresh-model baseline at step 0.
        match prev_step {
            None => assert_eq!(step, 0, "report starts with the baseline row"),
            Some(prev) => assert!(step > prev, "steps must ascend"),
        }
        prev_step = Some(step);
        assert!((row_ppl - row_loss.exp()).abs() <= 1e-12 * row_ppl);
        last_loss = row_loss;
        rows += 1;
    }
    assert!(rows >= 3, "expected a row per report interval, got {rows}");
    assert_eq!(loss, last_loss, "summary repeats the last report row");

    let (model, state) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(model.config.hidden_size, 16);
    assert_eq!(model.config.num_layers, 1);
    assert!(state.is_none(), "the command stores weights only");

    // Same corpus, same seed, fresh process: byte-identical checkpoint.
    let ckpt2 = dir.join("model2.ckpt");
    let argv2: Vec<String> = args(&ckpt2, &dir.join("report2.csv"));
    let argv2: Vec<&str> = argv2.iter().map(String::as_str).collect();
    assert_ok(&run(&argv2));
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&ckpt2).unwrap());
}

#[test]
fn eval_matches_the_library_metric() {
    let dir = scratch_dir("eval-parity");
    let data = dir.join("ss3.task");
    let out = run(&[
        "gen", "--task", "ss3", "--out", s(&data), "--count", "24", "--min-len", "8",
        "--max-len", "12", "--seed", "5",
    ]);
    assert_ok(&out);
    let corpus = gen_motif_corpus(&dir, "train.fasta", "8", "1");
    let base = tiny_pretrain(&dir, &corpus, "10");

    let ft = dir.join("ss3.ckpt");
    let out = run(&[
        "finetune", "--checkpoint", s(&base), "--data", s(&data), "--task", "ss3", "--steps",
        "40", "--warmup-steps", "5", "--batch-size", "4", "--max-len", "16", "--report-every",
        "20", "--seed", "2", "--out", s(&ft),
    ]);
    assert_ok(&out);
    assert!(stdout_of(&out).lines().any(|l| l.starts_with("loss=")));

    let out = run(&["eval", "--checkpoint", s(&ft), "--data", s(&data), "--task", "ss3",
        "--max-len", "16"]);
    assert_ok(&out);
    let printed = stdout_of(&out);

    // Recompute through the library with the same knobs.
    let (model, _) = load_checkpoint(&ft).unwrap();
    let records =
        parse_task_records(&std::fs::read_to_string(&data).unwrap(), TaskKind::Ss3).unwrap();
    let opts = TrainOptions { max_len: 16, ..TrainOptions::default() };
    let pred = predict_token_classes(&model, &records, 3, &opts).unwrap();
    let mut truncated = records.clone();
    truncate_records(&mut truncated, opts.max_len - 2);
    let truth: Vec<Vec<usize>> = truncated
        .iter()
        .map(|r| match &r.label {
            Some(Label::Tokens(text)) => {
                text.chars().map(|c| ss_class_index(SS3_ALPHABET, c).unwrap()).collect()
            }
            other => panic!("unexpected label {other:?}"),
        })
        .collect();
    let expected = format!("Q3={:.4}", token_accuracy(&pred, &truth).unwrap());
    assert!(
        printed.lines().any(|l| l == expected),
        "eval printed:\n{printed}\nexpected line: {expected}"
    );
}

#[test]
fn eval_rejects_checkpoints_without_the_task_head() {
    let dir = scratch_dir("eval-headless");
    let data = dir.join("ss3.task");
    let out = run(&[
        "gen", "--task", "ss3", "--out", s(&data), "--count", "4", "--min-len", "8",
        "--max-len", "12", "--seed", "5",
    ]);
    assert_ok(&out);
    let corpus = gen_motif_corpus(&dir, "train.fasta", "8", "1");
    let base = tiny_pretrain(&dir, &corpus, "5");

    let out = run(&["eval", "--checkpoint", s(&base), "--data", s(&data), "--task", "ss3",
        "--max-len", "16"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("finetune it on this task first"));
}

#[test]
fn visualize_renders_the_expected_truth_image() {
    let dir = scratch_dir("visualize-golden");
    // Anti-diagonal contacts at separation >= 2: the same map as the
    // golden fixture shared with the determinism acceptance test.
    let mut map = ContactMap::new(8);
    for i in 0..8 {
        let j = 7 - i;
        if j > i + 1 {
            map.set_contact(i, j).unwrap();
        }
    }
    let record = ProteinRecord {
        id: "anti8".into(),
        family: None,
        sequence: "ACDEFGHI".into(),
        label: Some(Label::Contacts(map)),
    };
    let data = dir.join("contacts.task");
    std::fs::write(&data, serialize_task_records(&[record], TaskKind::Contact).unwrap()).unwrap();

    let out = run(&["visualize", "--data", s(&data), "--out-dir", s(&dir)]);
    assert_ok(&out);
    let image = std::fs::read(dir.join("anti8.truth.pgm")).unwrap();
    assert_eq!(image, include_bytes!("fixtures/golden_8x8.pgm"), "truth image drifted");

    let out = run(&["visualize", "--data", s(&data), "--out-dir", s(&dir), "--id", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("no record with id 'nope'"));
}

#[test]
fn diverging_training_exits_with_code_three() {
    let dir = scratch_dir("divergence");
    let corpus = gen_motif_corpus(&dir, "train.fasta", "8", "1");
    let ckpt = dir.join("model.ckpt");
    let out = run(&[
        "pretrain", "--train", s(&corpus), "--out", s(&ckpt), "--report",
        s(&dir.join("report.csv")), "--hidden-size", "16", "--num-layers", "1", "--num-heads",
        "2", "--max-positions", "32", "--steps", "20", "--warmup-steps", "1", "--peak-lr",
        "1e7", "--batch-size", "4", "--max-len", "16", "--report-every", "5", "--seed", "1",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr:\n{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("training diverged at step"));
    assert!(!ckpt.exists(), "no checkpoint should survive a diverged run");
}
