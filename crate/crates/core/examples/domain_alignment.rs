//! Measures how far apart day and night crops sit in the pooled feature
//! space of a fresh network, then trains only the domain classifier on them
//! and reports how well it separates the two.
//!
//! `cargo run --release --example domain_alignment`

use rada::data::{synth_corpus, SynthConfig};
use rada::domain::{adversarial_var, classifier_accuracy, mmd_loss, DomainBatch};
use rada::model::{ModelConfig, Rada};
use rada::optim::{Adam, AdamConfig};
use rada::Graph;

fn main() -> rada::Result<()> {
    let cfg = SynthConfig { size: 64, ..SynthConfig::default() };
    let corpus = synth_corpus(5, 12, &cfg);
    let model = Rada::new(ModelConfig { dim: 32, ..ModelConfig::default() });
    let mut params = model.init(0);

    let day: Vec<_> = corpus.iter().map(|s| &s.image_a).collect();
    let night: Vec<_> = corpus.iter().map(|s| &s.image_b).collect();
    let batch = DomainBatch::new(model.domain_features(&params, &day), model.domain_features(&params, &night))?;
    println!("pooled features {:?} per domain", batch.source.shape());
    println!("mmd(day, night) = {:.5}", mmd_loss(&batch.source, &batch.target)?);
    println!("mmd(day, day)   = {:.5}", mmd_loss(&batch.source, &batch.source)?);

    let classifier = &model.domain.classifier;
    let (x, labels) = (batch.stacked(), batch.labels());
    let mut adam = Adam::new(AdamConfig::default());
    for step in 0..=300 {
        if step % 50 == 0 {
            let acc = classifier_accuracy(&classifier.classify(&params, &x)?, &labels);
            println!("step {step:>3}: classifier accuracy {acc:.3}");
        }
        let g = Graph::new();
        let loss = adversarial_var(&g, classifier.forward_var(&g, &params, g.constant(x.clone())), &labels);
        let grads = g.backward(loss).params(&g);
        adam.step(&mut params, &grads, 1e-3)?;
    }
    Ok(())
}
