//! Overfits the network on a small synthetic cross-domain corpus and reports
//! training-pair MMA@3 and held-out domain-classifier accuracy.
//!
//! `cargo run --release --example overfit_smoke -- --steps 200`

use clap::Parser;
use rada::train::{Trainer, TrainConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_da: bool,
    #[arg(long)]
    no_booster: bool,
    #[arg(long, default_value_t = 250)]
    report_every: u64,
}

fn main() -> rada::Result<()> {
    env_logger::init();
    let args = Args::parse();
    let mut cfg = TrainConfig::smoke();
    cfg.model.use_domain_adaptation = !args.no_da;
    cfg.model.use_booster = !args.no_booster;
    if let Some(lr) = args.lr {
        cfg.learning_rate_peak = lr;
    }
    let corpus = cfg.data.load()?;
    let heldout = cfg.data.heldout();
    let mut trainer = Trainer::new(cfg, corpus)?;
    let report = |t: &Trainer| -> rada::Result<()> {
        let mma = t.training_mma()?;
        let acc = t.heldout_domain_accuracy(&heldout)?;
        println!(
            "step {:>5}  mma@3 {:.3}  matches {:>4}  held-out domain acc {:.3}  starved {}",
            t.step,
            mma.mma3(),
            mma.num_matches,
            acc,
            t.starved_pairs
        );
        Ok(())
    };
    report(&trainer)?;
    while trainer.step < args.steps {
        let until = (trainer.step + args.report_every).min(args.steps);
        let s = trainer.run_until(until, &mut std::io::sink(), None)?;
        if let Some(last) = s.last() {
            let parts: Vec<String> = last.losses.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            println!("          {}", parts.join(" "));
        }
        report(&trainer)?;
    }
    Ok(())
}
