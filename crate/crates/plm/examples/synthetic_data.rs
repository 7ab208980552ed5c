//! Generates every synthetic corpus, round-trips each through its
//! on-disk format, and splits the pretraining corpus by family.
//!
//!     cargo run --release --example synthetic_data

use plm::corpus::{
    family_split, gen_synthetic, parse_fasta, parse_task_records, serialize_task_records,
    write_fasta, GenParams, SyntheticTask, TaskKind,
};

fn main() -> plm::Result<()> {
    let params = GenParams { count: 12, min_len: 16, max_len: 24, ..GenParams::default() };

    // Pretraining corpus: FASTA with family headers and a planted k-mer.
    let motif = gen_synthetic(SyntheticTask::Motif, &params, 7)?;
    println!("motif corpus, {} records, planted k-mer {}:", motif.len(), params.motif);
    for rec in motif.iter().take(3) {
        println!("  {:<10} family={:<5} {}", rec.id, rec.family.as_deref().unwrap_or("-"), rec.sequence);
    }
    let back = parse_fasta(&write_fasta(&motif))?;
    assert_eq!(back, motif);
    println!("  FASTA round-trip: {} records identical\n", back.len());

    // Labeled tasks: line-delimited key=value records.
    let labeled = [
        (SyntheticTask::Ss3, TaskKind::Ss3),
        (SyntheticTask::Ss8, TaskKind::Ss8),
        (SyntheticTask::Homology, TaskKind::Fold { num_classes: params.num_classes }),
        (SyntheticTask::Contact, TaskKind::Contact),
        (SyntheticTask::Landscape, TaskKind::Value),
    ];
    for (task, kind) in labeled {
        let records = gen_synthetic(task, &params, 7)?;
        let text = serialize_task_records(&records, kind)?;
        let reparsed = parse_task_records(&text, kind)?;
        assert_eq!(reparsed, records);
        let first = text.lines().next().unwrap();
        let shown: String = first.chars().take(96).collect();
        let ellipsis = if first.chars().count() > 96 { "..." } else { "" };
        println!("{} ({} records round-trip):", kind.label_field(), records.len());
        println!("  {shown}{ellipsis}\n");
    }

    // Family-aware split: holdout takes whole families, so no family
    // leaks across the boundary.
    let big = gen_synthetic(
        SyntheticTask::Motif,
        &GenParams { count: 400, ..params },
        7,
    )?;
    let split = family_split(big, 0.20, 0.10, 13)?;
    println!(
        "family split of 400 records: train={} valid={} holdout={}",
        split.train.len(),
        split.valid.len(),
        split.holdout.len()
    );
    let holdout_families: std::collections::HashSet<_> =
        split.holdout.iter().map(|r| r.family.clone().unwrap()).collect();
    let leaked = split
        .train
        .iter()
        .chain(&split.valid)
        .filter(|r| holdout_families.contains(r.family.as_ref().unwrap()))
        .count();
    println!("holdout families: {holdout_families:?}");
    println!("records sharing a family across the boundary: {leaked}");
    assert_eq!(leaked, 0);
    Ok(())
}
