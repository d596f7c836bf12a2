//! Generates a small cross-domain corpus and summarizes each pair: warp
//! kind, overlap, domain labels, and how far the night shift moves pixels.
//!
//! `cargo run --release --example synth_corpus`

use rada::data::{synth_corpus, SynthConfig, WarpKind};

fn mean_intensity(t: &rada::Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.numel() as f64
}

fn main() {
    for warp in [WarpKind::Homography, WarpKind::PoseDepth] {
        let cfg = SynthConfig { size: 64, warp, ..SynthConfig::default() };
        let corpus = synth_corpus(11, 4, &cfg);
        println!("{warp:?}: {} pairs", corpus.len());
        for (i, s) in corpus.iter().enumerate() {
            println!(
                "  pair {i}: overlap {:.2}  domains {:?}  mean intensity {:.3} -> {:.3}",
                s.overlap,
                s.domain_labels,
                mean_intensity(s.image_a.tensor()),
                mean_intensity(s.image_b.tensor())
            );
        }
    }
}
