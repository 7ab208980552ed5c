//! Finetunes a per-token classifier, a sequence classifier, and a
//! scalar regressor on synthetic tasks, then scores each with its
//! evaluation metric.
//!
//!     cargo run --release --example downstream_tasks

use plm::corpus::{gen_synthetic, ss_class_index, GenParams, Label, SyntheticTask, SS3_ALPHABET};
use plm::metrics::{spearman_rho, token_accuracy, top1_accuracy};
use plm::model::{HeadKind, Model, ModelConfig};
use plm::trainer::{
    finetune, predict_seq_classes, predict_token_classes, predict_values, Schedule, TrainOptions,
};

fn fresh_model() -> plm::Result<Model<f32>> {
    Model::new(ModelConfig { dropout: 0.0, ..ModelConfig::new(32, 1, 2) }, 7)
}

fn opts(total_steps: usize) -> TrainOptions {
    TrainOptions {
        schedule: Schedule { peak: 1e-3, warmup_steps: 50, total_steps },
        batch_size: 8,
        max_len: 32,
        report_every: total_steps,
        seed: 3,
        ..TrainOptions::default()
    }
}

fn main() -> plm::Result<()> {
    let params = GenParams { count: 64, min_len: 12, max_len: 20, ..GenParams::default() };

    // Per-residue 3-class labels follow a residue-identity rule, so the
    // head can reach perfect accuracy from token embeddings alone.
    let ss3 = gen_synthetic(SyntheticTask::Ss3, &params, 11)?;
    let truth: Vec<Vec<usize>> = ss3
        .iter()
        .map(|r| {
            let Some(Label::Tokens(s)) = &r.label else { unreachable!() };
            s.chars().map(|c| ss_class_index(SS3_ALPHABET, c).unwrap()).collect()
        })
        .collect();
    let mut model = fresh_model()?;
    model.ensure_head(HeadKind::TokenClass { classes: 3 })?;
    let o = opts(300);
    let before = token_accuracy(&predict_token_classes(&model, &ss3, 3, &o)?, &truth)?;
    let report = finetune(&mut model, HeadKind::TokenClass { classes: 3 }, &ss3, &o)?;
    let after = token_accuracy(&predict_token_classes(&model, &ss3, 3, &o)?, &truth)?;
    println!(
        "ss3:       Q3 {before:.4} -> {after:.4} after {} steps (final train loss {:.4})",
        report.rows.last().unwrap().step,
        report.final_loss().unwrap()
    );
    assert!(after > 0.9);

    // Sequence classification: one planted motif per class; score a
    // held-out quarter of the corpus.
    let all = gen_synthetic(
        SyntheticTask::Homology,
        &GenParams { count: 256, motif: "MKVLAGHW".into(), ..params.clone() },
        11,
    )?;
    let (train, held) = all.split_at(192);
    let held_truth: Vec<usize> = held
        .iter()
        .map(|r| {
            let Some(Label::Class(c)) = r.label else { unreachable!() };
            c
        })
        .collect();
    let mut model = fresh_model()?;
    model.ensure_head(HeadKind::SeqClass { classes: 8 })?;
    let o = opts(600);
    let before = top1_accuracy(&predict_seq_classes(&model, held, 8, &o)?, &held_truth)?;
    finetune(&mut model, HeadKind::SeqClass { classes: 8 }, train, &o)?;
    let after = top1_accuracy(&predict_seq_classes(&model, held, 8, &o)?, &held_truth)?;
    println!("homology:  held-out Top1 {before:.4} -> {after:.4} (chance 0.125)");
    assert!(after > 0.5);

    // Mutation landscape: value is a smooth function of mutated
    // positions; rank correlation on held-out variants.
    let all = gen_synthetic(
        SyntheticTask::Landscape,
        &GenParams { count: 256, min_len: 24, max_len: 24, ..params },
        11,
    )?;
    let (train, held) = all.split_at(192);
    let held_truth: Vec<f64> = held
        .iter()
        .map(|r| {
            let Some(Label::Value(v)) = r.label else { unreachable!() };
            v
        })
        .collect();
    let mut model = fresh_model()?;
    model.ensure_head(HeadKind::Regress)?;
    let o = opts(1000);
    let before = spearman_rho(&predict_values(&model, held, &o)?, &held_truth)?;
    finetune(&mut model, HeadKind::Regress, train, &o)?;
    let after = spearman_rho(&predict_values(&model, held, &o)?, &held_truth)?;
    println!("landscape: held-out Spearman {before:.4} -> {after:.4}");
    assert!(after > 0.5);
    Ok(())
}
