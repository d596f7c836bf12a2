//! Matches two views of a synthetic pair with each filter, scores the
//! matches against the ground-truth homography, and draws them.
//!
//! `cargo run --release --example match_and_evaluate -- /tmp/matches.png`

use rada::data::{synth_pair, SynthConfig, Texture};
use rada::eval::{mma_curve, mutual_nn, visualize, MatchFilter};
use rada::keypoint::{DetectorConfig, FeatureSet};
use rada::model::{ModelConfig, Rada};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "matches.png".into());
    let cfg = SynthConfig { size: 96, domain_shift: false, ..SynthConfig::default() };
    let texture = Texture::random(cfg.size, cfg.size, &mut ChaCha8Rng::seed_from_u64(3));
    let pair = synth_pair(&texture, 3, &cfg)?;

    // An untrained network still gives usable matches on mild warps, which
    // is enough to exercise the evaluation path.
    let model = Rada::new(ModelConfig { dim: 64, ..ModelConfig::default() });
    let params = model.init(0);
    let det = DetectorConfig { score_threshold: 0.0, top_k: 300, ..DetectorConfig::default() };
    let fa: FeatureSet = model.extract(&params, &pair.image_a, &det)?;
    let fb: FeatureSet = model.extract(&params, &pair.image_b, &det)?;
    println!("features {} / {}", fa.len(), fb.len());

    for (name, filter) in [("mutual", MatchFilter::None), ("ratio 0.9", MatchFilter::Ratio(0.9)), ("distance 0.7", MatchFilter::Distance(0.7))] {
        let m = mutual_nn(&fa.descriptors, &fb.descriptors, filter)?;
        let curve = mma_curve(&fa, &fb, &m, &pair.spec);
        println!("{name:>13}: {:4} matches  mma@1 {:.3}  mma@3 {:.3}  mma@10 {:.3}", m.len(), curve.at(1.0).unwrap_or(0.0), curve.mma3(), curve.at(10.0).unwrap_or(0.0));
    }

    let m = mutual_nn(&fa.descriptors, &fb.descriptors, MatchFilter::None)?;
    let (canvas, counts) = visualize(&pair.image_a, &pair.image_b, &fa, &fb, &m, Some(&pair.spec));
    canvas.save(&out)?;
    println!("wrote {out}: {} green, {} red, {} blue", counts.green, counts.red, counts.blue);
    Ok(())
}
