//! Runs the backbone and detector on a synthetic image and prints what comes
//! out: map shapes, keypoint count, and descriptor norms.
//!
//! `cargo run --release --example extract_features`

use rada::backbone::ImageTensor;
use rada::data::{synth_pair, SynthConfig, Texture};
use rada::keypoint::DetectorConfig;
use rada::model::{ModelConfig, Rada};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> rada::Result<()> {
    let cfg = SynthConfig { size: 96, ..SynthConfig::default() };
    let texture = Texture::random(cfg.size, cfg.size, &mut ChaCha8Rng::seed_from_u64(7));
    let sample = synth_pair(&texture, 7, &cfg)?;
    let image: &ImageTensor = &sample.image_a;

    let model = Rada::new(ModelConfig { dim: 64, ..ModelConfig::default() });
    let params = model.init(0);
    let detector = DetectorConfig { score_threshold: 0.0, top_k: 200, ..DetectorConfig::default() };
    let features = model.extract(&params, image, &detector)?;

    println!("image {}x{}", image.height(), image.width());
    println!("keypoints {} (budget {})", features.len(), detector.top_k);
    println!("descriptor dim {}", features.dim());
    let norms: Vec<f64> = (0..features.len()).map(|i| features.descriptor(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let (lo, hi) = norms.iter().fold((f64::MAX, f64::MIN), |(a, b), &n| (a.min(n), b.max(n)));
    println!("descriptor norms in [{lo:.6}, {hi:.6}]");
    for k in features.keypoints.iter().take(5) {
        println!("  ({:7.2}, {:7.2}) score {:.3}", k.u, k.v, k.score);
    }
    Ok(())
}
