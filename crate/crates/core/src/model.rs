//! The full network: backbone, keypoint detection, domain branch, booster.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ImageTensor, MapsVars, PyramidVars, PYRAMID_CHANNELS};
use crate::booster::{normalized_positions_var, BoostInput, Booster, BoosterConfig};
use crate::domain::{DomainBranch, DomainFeatureSource};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::keypoint::{detect_var, keypoints_from_vars, sample_descriptors_var, DetectionVars, DetectorConfig, FeatureSet};
use crate::params::ParamStore;

pub const DEFAULT_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub booster: BoosterConfig,
    pub use_booster: bool,
    pub use_domain_adaptation: bool,
    /// Train the booster on detached descriptors.
    pub detach_booster: bool,
    pub domain_features: DomainFeatureSource,
    pub reversal_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            booster: BoosterConfig::default(),
            use_booster: true,
            use_domain_adaptation: true,
            detach_booster: false,
            domain_features: DomainFeatureSource::F4,
            reversal_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rada {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub domain: DomainBranch,
    pub booster: Booster,
}

/// Graph handles produced for one image.
#[derive(Clone, Debug)]
pub struct ImageOutputs {
    pub pyramid: PyramidVars,
    pub aggregated: Var,
    pub maps: MapsVars,
    pub detection: DetectionVars,
    /// Raw sampled descriptors `[N, dim]`.
    pub descriptors: Var,
}

impl Rada {
    pub fn new(config: ModelConfig) -> Self {
        let backbone = Backbone::new(config.dim);
        let in_channels = match config.domain_features {
            DomainFeatureSource::F4 => PYRAMID_CHANNELS[3],
            DomainFeatureSource::Aggregated => backbone.aggregated_channels(),
        };
        let mut domain = DomainBranch::new(in_channels, config.dim, config.domain_features);
        domain.classifier.reversal_scale = config.reversal_scale;
        let booster = Booster::new(config.dim, config.booster.layers);
        Self { config, backbone, domain, booster }
    }

    /// Parameters for every branch, drawn from `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        self.backbone.init(&mut ps, &mut rng);
        self.domain.init(&mut ps, &mut rng);
        self.booster.init(&mut ps, &mut rng);
        ps
    }

    pub fn forward_image_var(&self, g: &Graph, ps: &ParamStore, image: &ImageTensor, detector: &DetectorConfig) -> ImageOutputs {
        let x = g.constant(image.tensor().clone());
        let pyramid = self.backbone.encode_var(g, ps, x);
        let aggregated = self.backbone.aggregate_var(g, ps, &pyramid);
        let maps = self.backbone.head_var(g, ps, aggregated);
        let detection = detect_var(g, maps.score, detector);
        let descriptors = sample_descriptors_var(g, maps.descriptors, detection.positions);
        ImageOutputs { pyramid, aggregated, maps, detection, descriptors }
    }

    /// Boosted descriptors `[N, dim]` for detected keypoints.
    pub fn boost_var(&self, g: &Graph, ps: &ParamStore, out: &ImageOutputs, height: usize, width: usize) -> Var {
        let (mut pos, mut scores, mut desc) = (out.detection.positions, out.detection.scores, out.descriptors);
        if self.config.detach_booster {
            pos = g.detach(pos);
            scores = g.detach(scores);
            desc = g.detach(desc);
        }
        let p = normalized_positions_var(g, pos, scores, height, width);
        self.booster.forward_var(g, ps, p, desc)
    }

    /// Pooled `[1, dim]` domain feature of one image.
    pub fn domain_feature_var(&self, g: &Graph, ps: &ParamStore, out: &ImageOutputs) -> Var {
        let map = match self.config.domain_features {
            DomainFeatureSource::F4 => out.pyramid.f4,
            DomainFeatureSource::Aggregated => out.aggregated,
        };
        self.domain.pooled_var(g, ps, map)
    }

    /// Keypoints and descriptors of one image; descriptors are boosted when
    /// the booster is enabled.
    pub fn extract(&self, ps: &ParamStore, image: &ImageTensor, detector: &DetectorConfig) -> Result<FeatureSet> {
        detector.validate()?;
        let g = Graph::inference();
        let out = self.forward_image_var(&g, ps, image, detector);
        let keypoints = keypoints_from_vars(&g, &out.detection);
        let descriptors = if self.config.use_booster && !keypoints.is_empty() {
            self.boost_var(&g, ps, &out, image.height(), image.width())
        } else {
            out.descriptors
        };
        Ok(FeatureSet {
            keypoints,
            descriptors: (*g.value(descriptors)).clone(),
            image_size: (image.height(), image.width()),
        })
    }

    /// Pooled domain features of several images, `[B, dim]`.
    pub fn domain_features(&self, ps: &ParamStore, images: &[&ImageTensor]) -> crate::tensor::Tensor {
        let dim = self.config.dim;
        let mut data = Vec::with_capacity(images.len() * dim);
        for img in images {
            let g = Graph::inference();
            let x = g.constant(img.tensor().clone());
            let pyr = self.backbone.encode_var(&g, ps, x);
            let map = match self.config.domain_features {
                DomainFeatureSource::F4 => pyr.f4,
                DomainFeatureSource::Aggregated => self.backbone.aggregate_var(&g, ps, &pyr),
            };
            data.extend_from_slice(g.value(self.domain.pooled_var(&g, ps, map)).data());
        }
        crate::tensor::Tensor::new([images.len(), dim], data)
    }

    /// Boosts externally supplied keypoints and descriptors.
    pub fn boost(&self, ps: &ParamStore, input: &BoostInput) -> Result<crate::tensor::Tensor> {
        self.booster.boost(ps, input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracted_descriptors_are_unit_rows() {
        let cfg = ModelConfig { dim: 16, ..ModelConfig::default() };
        let model = Rada::new(cfg);
        let ps = model.init(0);
        let img = ImageTensor::new(crate::tensor::Tensor::from_fn([3, 32, 32], |i| ((i * 7919) % 101) as f64 / 100.0)).unwrap();
        let fs = model.extract(&ps, &img, &DetectorConfig { score_threshold: 0.0, ..DetectorConfig::default() }).unwrap();
        assert!(!fs.is_empty());
        for i in 0..fs.len() {
            let n: f64 = fs.descriptor(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
