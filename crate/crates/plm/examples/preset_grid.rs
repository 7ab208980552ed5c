//! Walks the model configuration grid: every preset validates, its
//! parameter-spec total matches the closed-form count, and the smallest
//! configuration runs a full training step.
//!
//!     cargo run --release --example preset_grid

use plm::corpus::{gen_synthetic, GenParams, SyntheticTask};
use plm::model::ModelConfig;
use plm::trainer::{pretrain, Schedule, TrainOptions};

fn main() -> plm::Result<()> {
    println!("{:<28} {:>6} {:>6} {:>5} {:>6} {:>14}", "preset", "hidden", "layers", "heads", "ffn", "parameters");
    for name in ModelConfig::preset_names() {
        let cfg = ModelConfig::preset(name)?;
        cfg.validate()?;
        let by_spec: usize =
            cfg.param_spec().iter().map(|(_, d)| d.iter().product::<usize>()).sum();
        let closed = cfg.closed_form_param_count();
        assert_eq!(by_spec, closed, "{name}");
        println!(
            "{:<28} {:>6} {:>6} {:>5} {:>6} {:>14}",
            name, cfg.hidden_size, cfg.num_layers, cfg.num_heads, cfg.ffn_size, closed
        );
    }
    println!("\nevery preset's parameter spec sums to its closed-form count");

    // The grid is exercised at scale by the acceptance tests; here one
    // desk-sized configuration takes a real optimization step.
    let cfg = ModelConfig::new(16, 1, 2);
    let closed = cfg.closed_form_param_count();
    let corpus = gen_synthetic(
        SyntheticTask::Motif,
        &GenParams { count: 8, min_len: 10, max_len: 14, ..GenParams::default() },
        3,
    )?;
    let opts = TrainOptions {
        schedule: Schedule { peak: 1e-3, warmup_steps: 2, total_steps: 5 },
        batch_size: 4,
        max_len: 16,
        report_every: 5,
        seed: 0,
        ..TrainOptions::default()
    };
    let (model, report) = pretrain::<f32>(cfg, &corpus, &corpus, &opts)?;
    assert_eq!(model.param_count(), closed);
    println!(
        "custom 16x1x2 ({} params) trained 5 steps: loss {:.4} -> {:.4}",
        closed,
        report.rows.first().unwrap().loss,
        report.final_loss().unwrap()
    );
    Ok(())
}
