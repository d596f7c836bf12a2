//! Fits only the descriptor booster on one synthetic pair by minimizing the
//! AP surrogate over ground-truth correspondences, printing exact AP of the
//! raw and boosted descriptors as it goes.
//!
//! `cargo run --release --example boost_descriptors`

use std::collections::BTreeMap;

use rada::booster::{ap_loss_var, average_precision, ApSurrogate, BoostInput};
use rada::data::{synth_pair, SynthConfig, Texture};
use rada::geometry::build_correspondences;
use rada::keypoint::{DetectorConfig, FeatureSet};
use rada::model::{ModelConfig, Rada};
use rada::optim::{Adam, AdamConfig};
use rada::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn exact_ap(a: &Tensor, b: &Tensor, pairs: &[(usize, usize)]) -> rada::Result<f64> {
    let mut gt = vec![None; a.dim(0)];
    for &(i, j) in pairs {
        gt[i] = Some(j);
    }
    average_precision(a, b, &gt)
}

fn main() -> rada::Result<()> {
    let cfg = SynthConfig { size: 64, ..SynthConfig::default() };
    let texture = Texture::random(cfg.size, cfg.size, &mut ChaCha8Rng::seed_from_u64(9));
    let pair = synth_pair(&texture, 9, &cfg)?;

    let model = Rada::new(ModelConfig { dim: 32, use_booster: false, ..ModelConfig::default() });
    let mut params = model.init(1);
    let det = DetectorConfig { score_threshold: 0.0, top_k: 150, ..DetectorConfig::default() };
    let fa: FeatureSet = model.extract(&params, &pair.image_a, &det)?;
    let fb: FeatureSet = model.extract(&params, &pair.image_b, &det)?;
    let pairs = build_correspondences(&fa.positions(), &fb.positions(), &pair.spec, 3.0).index_pairs();
    if pairs.is_empty() {
        println!("no correspondences within 3 px; try another seed");
        return Ok(());
    }
    println!("{} + {} keypoints, {} correspondences", fa.len(), fb.len(), pairs.len());
    println!("raw descriptors: AP {:.3}", exact_ap(&fa.descriptors, &fb.descriptors, &pairs)?);

    let (h, w) = (cfg.size, cfg.size);
    let ia = BoostInput::from_keypoints(&fa.keypoints, fa.descriptors.clone(), h, w)?;
    let ib = BoostInput::from_keypoints(&fb.keypoints, fb.descriptors.clone(), h, w)?;
    let mut adam = Adam::new(AdamConfig::default());
    for step in 0..=200 {
        if step % 40 == 0 {
            let (ba, bb) = (model.booster.boost(&params, &ia)?, model.booster.boost(&params, &ib)?);
            println!("step {step:>3}: boosted AP {:.3}", exact_ap(&ba, &bb, &pairs)?);
        }
        let g = Graph::new();
        let a = model.booster.forward_var(&g, &params, g.constant(ia.positions.clone()), g.constant(ia.descriptors.clone()));
        let b = model.booster.forward_var(&g, &params, g.constant(ib.positions.clone()), g.constant(ib.descriptors.clone()));
        let loss = ap_loss_var(&g, a, b, &pairs, ApSurrogate::default());
        let grads: BTreeMap<String, Tensor> = g.backward(loss).params(&g);
        adam.step(&mut params, &grads, 3e-3)?;
    }
    Ok(())
}
