//! Trains a few updates, checkpoints to bytes, resumes, and checks that the
//! resumed run lands on exactly the same parameters as an uninterrupted one.
//!
//! `cargo run --release --example train_and_resume`

use rada::checkpoint::Checkpoint;
use rada::train::{TrainConfig, Trainer};

fn main() -> rada::Result<()> {
    let mut cfg = TrainConfig::smoke();
    cfg.model.dim = 32;
    cfg.data.pairs = 4;
    cfg.warmup_steps = 2;
    let corpus = cfg.data.load()?;

    let mut straight = Trainer::new(cfg.clone(), corpus.clone())?;
    let mut log = Vec::new();
    straight.run_until(6, &mut log, None)?;
    print!("{}", String::from_utf8_lossy(&log).lines().filter(|l| l.contains("name=total")).map(|l| format!("{l}\n")).collect::<String>());

    let mut first = Trainer::new(cfg.clone(), corpus.clone())?;
    first.run_until(3, &mut std::io::sink(), None)?;
    let bytes = first.checkpoint().encode();
    println!("checkpoint after step 3: {} bytes", bytes.len());
    let mut resumed = Trainer::resume(cfg, corpus, Checkpoint::decode(&bytes)?, false)?;
    resumed.run_until(6, &mut std::io::sink(), None)?;

    let same = resumed.checkpoint() == straight.checkpoint();
    println!("resumed run identical to straight run: {same}");
    Ok(())
}
