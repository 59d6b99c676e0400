//! GRPO on the grid reaching task from the shipped configuration.
//!
//! `cargo run --release --example train_grpo -- [key=value ...]`

use chunkrl::harness::{train, RunConfig};
use std::path::PathBuf;

fn main() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/grpo_toyreach.yaml");
    let sets: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::load(Some(&path), &sets).unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(2)
    });
    let mut sink = std::io::sink();
    let out = train(&cfg, &mut sink).unwrap();
    for r in &out.records {
        println!(
            "epoch {:>3}  success {:.3}  rollout {:.3}  {}",
            r.epoch,
            r.success_rate,
            r.rollout_success_rate,
            if r.skipped { "skipped" } else { "" }
        );
    }
    println!(
        "reached {:.0}% at epoch {:?}",
        cfg.algorithm.success_threshold * 100.0,
        out.solved_at
    );
}
