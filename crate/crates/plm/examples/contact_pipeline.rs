//! Trains the residue-pair contact head on anti-diagonal synthetic
//! maps, scores ranked precision, and renders truth and prediction as
//! PGM images.
//!
//!     cargo run --release --example contact_pipeline

use plm::corpus::{gen_synthetic, GenParams, Label, SyntheticTask};
use plm::metrics::{contact_precision, ContactBand};
use plm::model::{HeadKind, Model, ModelConfig};
use plm::trainer::{finetune, predict_contact_scores, Schedule, TrainOptions};
use plm::viz::{contact_score_pixels, contact_truth_pixels, pgm_bytes};

fn main() -> plm::Result<()> {
    // Fixed length keeps every record's map the same size for display.
    let params = GenParams { count: 48, min_len: 24, max_len: 24, ..GenParams::default() };
    let records = gen_synthetic(SyntheticTask::Contact, &params, 17)?;

    let mut model =
        Model::<f32>::new(ModelConfig { dropout: 0.0, ..ModelConfig::new(32, 1, 2) }, 7)?;
    let opts = TrainOptions {
        schedule: Schedule { peak: 1e-3, warmup_steps: 50, total_steps: 800 },
        batch_size: 8,
        max_len: 32,
        report_every: 200,
        seed: 3,
        ..TrainOptions::default()
    };
    println!("finetuning the contact head on {} maps:", records.len());
    let report = finetune(&mut model, HeadKind::Contact, &records, &opts)?;
    for row in &report.rows {
        println!("  step {:>4}  balanced bce {:.4}", row.step, row.loss);
    }

    // Ranked precision at L/5, minimum separation 6, per band.
    let sample = &records[0];
    let Some(Label::Contacts(truth)) = &sample.label else { unreachable!() };
    let scores = predict_contact_scores(&model, sample, &opts)?;
    println!("\nrecord {} (L = {}):", sample.id, truth.size());
    for band in [ContactBand::All, ContactBand::Medium, ContactBand::Long] {
        match contact_precision(&scores, truth, 5, 6, band) {
            Ok(p) => println!("  P@L/5 {band:?}: {p:.4}"),
            Err(e) => println!("  P@L/5 {band:?}: skipped ({e})"),
        }
    }

    // Side-by-side terminal sketch: truth on the left, scores >= 0.5 on
    // the right.
    let l = truth.size();
    println!("\n  {:<width$}   prediction", "truth", width = l);
    for i in 0..l {
        let left: String = (0..l).map(|j| if truth.contact(i, j) { '#' } else { '.' }).collect();
        let right: String =
            (0..l).map(|j| if scores[i][j] >= 0.5 { '#' } else { '.' }).collect();
        println!("  {left}   {right}");
    }

    let dir = std::env::temp_dir().join("plm_contact_demo");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let truth_path = dir.join(format!("{}.truth.pgm", sample.id));
    let pred_path = dir.join(format!("{}.pred.pgm", sample.id));
    std::fs::write(&truth_path, pgm_bytes(&contact_truth_pixels(truth), l, l)?).expect("write");
    std::fs::write(&pred_path, pgm_bytes(&contact_score_pixels(&scores)?, l, l)?).expect("write");
    println!("\nwrote {} and {}", truth_path.display(), pred_path.display());
    Ok(())
}
