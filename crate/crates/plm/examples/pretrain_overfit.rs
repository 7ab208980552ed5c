//! Pretrains a small encoder until it memorizes a tiny corpus, then
//! round-trips the result through a binary checkpoint.
//!
//!     cargo run --release --example pretrain_overfit

use plm::corpus::{gen_synthetic, GenParams, SyntheticTask};
use plm::model::ModelConfig;
use plm::trainer::{
    load_checkpoint, mlm_eval_loss, ppl, pretrain, save_checkpoint, Schedule, TrainOptions,
};

fn main() -> plm::Result<()> {
    let params = GenParams { count: 16, min_len: 12, max_len: 20, ..GenParams::default() };
    let corpus = gen_synthetic(SyntheticTask::Motif, &params, 5)?;

    let config = ModelConfig { dropout: 0.0, ..ModelConfig::new(32, 1, 2) };
    let opts = TrainOptions {
        schedule: Schedule { peak: 3e-3, warmup_steps: 50, total_steps: 600 },
        batch_size: 8,
        max_len: 24,
        report_every: 100,
        seed: 1,
        ..TrainOptions::default()
    };

    println!("pretraining {} params on {} sequences:", ModelConfig::new(32, 1, 2).closed_form_param_count(), corpus.len());
    println!("{:>6} {:>12} {:>10} {:>8}", "step", "lr", "loss", "ppl");
    let (model, report) = pretrain::<f32>(config, &corpus, &corpus, &opts)?;
    for row in &report.rows {
        println!("{:>6} {:>12.3e} {:>10.4} {:>8.3}", row.step, row.lr, row.loss, ppl(row.loss));
    }

    let first = report.rows.first().unwrap().loss;
    let last = report.final_loss().unwrap();
    println!("\nstep-0 loss {:.4} is near ln(30) = {:.4} (uniform over the vocabulary)", first, 30f64.ln());
    println!("final loss {last:.4}; the corpus is memorized once this is far below ln(30)");
    assert!((first - 30f64.ln()).abs() < 0.2);
    assert!(last < first / 2.0);

    // Checkpoint round-trip: the reloaded model evaluates identically.
    let dir = std::env::temp_dir().join("plm_pretrain_overfit");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("demo.ckpt");
    save_checkpoint(&model, None, &path)?;
    let (reloaded, _) = load_checkpoint(&path)?;
    let before = mlm_eval_loss(&model, &corpus, &opts, 99)?;
    let after = mlm_eval_loss(&reloaded, &corpus, &opts, 99)?;
    println!("\ncheckpoint round-trip at {}: eval {before:.6} -> {after:.6}", path.display());
    assert_eq!(before, after);
    Ok(())
}
