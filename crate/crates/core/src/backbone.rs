//! Hierarchical encoder, multi-scale aggregation and the score/descriptor head.
//!
//! ```text
//! image [3,H,W]
//!   block1: conv3x3 -> relu -> conv3x3 -> relu           F1 [32,  H,    W   ]
//!   block2: maxpool/2 -> residual                        F2 [64,  H/2,  W/2 ]
//!   block3: maxpool/4 -> residual                        F3 [128, H/8,  W/8 ]
//!   block4: maxpool/4 -> residual                        F4 [128, H/32, W/32]
//! aggregate: per level conv1x1 + bilinear upsample, concat   [352, H, W]
//! head: conv1x1 -> dim+1 channels; L2-normalized descriptors + sigmoid score
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, LINEAR_GAIN, RELU_GAIN};
use crate::ops::BilinearCell;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Channel widths of the four encoder blocks.
pub const PYRAMID_CHANNELS: [usize; 4] = [32, 64, 128, 128];
/// Spatial downsampling of each pyramid level relative to the input.
pub const PYRAMID_STRIDES: [usize; 4] = [1, 2, 8, 32];
/// Side lengths must be multiples of the deepest stride.
pub const SIZE_MULTIPLE: usize = 32;

/// An RGB image in `[0, 1]`, stored channel-first as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 || data.dim(0) != 3 {
            return Err(Error::Dimension(format!("expected a [3, H, W] image, got {:?}", data.shape())));
        }
        let (h, w) = (data.dim(1), data.dim(2));
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Dimension(format!("image size {h}x{w} is not a positive multiple of {SIZE_MULTIPLE}")));
        }
        if let Some(bad) = data.data().iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidArgument(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    /// Interleaved `H × W × 3` values.
    pub fn from_hwc(height: usize, width: usize, hwc: &[f64]) -> Result<Self> {
        if hwc.len() != height * width * 3 {
            return Err(Error::Dimension(format!("{} values for a {height}x{width}x3 image", hwc.len())));
        }
        let plane = height * width;
        let data = Tensor::from_fn([3, height, width], |i| hwc[(i % plane) * 3 + i / plane]);
        Self::new(data)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full([3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Channel `c` at row `y`, column `x`.
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Bilinear sample of all three channels; `None` outside the image.
    pub fn sample(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let (h, w) = (self.height(), self.width());
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return None;
        }
        let taps = BilinearCell::new(u, v, w, h).taps(w);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let plane = &self.data.data()[c * h * w..(c + 1) * h * w];
            *o = taps.iter().map(|&(j, wt)| wt * plane[j]).sum();
        }
        Some(out)
    }
}

/// Plain-tensor pyramid produced by [`Backbone::encode`].
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
}

impl PyramidFeatures {
    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.f1, &self.f2, &self.f3, &self.f4]
    }
}

/// Dense backbone output: score `[H, W]` in (0, 1) and unit-norm descriptors
/// stored channel-first as `[dim, H, W]`.
#[derive(Clone, Debug)]
pub struct ScoreDescriptorMaps {
    pub score: Tensor,
    pub descriptors: Tensor,
}

impl ScoreDescriptorMaps {
    pub fn height(&self) -> usize {
        self.score.dim(0)
    }

    pub fn width(&self) -> usize {
        self.score.dim(1)
    }

    pub fn dim(&self) -> usize {
        self.descriptors.dim(0)
    }

    pub fn score_at(&self, x: usize, y: usize) -> f64 {
        self.score.data()[y * self.width() + x]
    }

    /// Descriptor vector at integer pixel `(x, y)`.
    pub fn descriptor_at(&self, x: usize, y: usize) -> Vec<f64> {
        let hw = self.height() * self.width();
        let p = y * self.width() + x;
        (0..self.dim()).map(|c| self.descriptors.data()[c * hw + p]).collect()
    }
}

/// Graph handles for the pyramid.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
}

/// Graph handles for the head output: score `[1, H, W]`, descriptors `[dim, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct MapsVars {
    pub score: Var,
    pub descriptors: Var,
}

/// 3×3 basic residual block with a 1×1 projection shortcut when widths differ.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv0: Conv2d,
    conv1: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv0: Conv2d::new(&format!("{prefix}.conv0"), cin, cout, 3, true),
            conv1: Conv2d::new(&format!("{prefix}.conv1"), cout, cout, 3, true),
            shortcut: (cin != cout).then(|| Conv2d::new(&format!("{prefix}.shortcut"), cin, cout, 1, false)),
        }
    }

    fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) {
        self.conv0.init(ps, rng, RELU_GAIN);
        // The residual branch starts small so the identity path dominates.
        self.conv1.init(ps, rng, LINEAR_GAIN);
        if let Some(s) = &self.shortcut {
            s.init(ps, rng, LINEAR_GAIN);
        }
    }

    fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let h = g.relu(self.conv0.forward(g, ps, x));
        let h = self.conv1.forward(g, ps, h);
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, ps, x),
            None => x,
        };
        g.relu(g.add(h, skip))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    dim: usize,
    block1: [Conv2d; 2],
    block2: ResidualBlock,
    block3: ResidualBlock,
    block4: ResidualBlock,
    aggregate: [Conv2d; 4],
    head: Conv2d,
}

impl Backbone {
    /// `dim` is the descriptor width.
    pub fn new(dim: usize) -> Self {
        let [c1, c2, c3, c4] = PYRAMID_CHANNELS;
        let total: usize = PYRAMID_CHANNELS.iter().sum();
        Self {
            dim,
            block1: [
                Conv2d::new("backbone.block1.conv0", 3, c1, 3, true),
                Conv2d::new("backbone.block1.conv1", c1, c1, 3, true),
            ],
            block2: ResidualBlock::new("backbone.block2", c1, c2),
            block3: ResidualBlock::new("backbone.block3", c2, c3),
            block4: ResidualBlock::new("backbone.block4", c3, c4),
            aggregate: std::array::from_fn(|i| {
                let c = PYRAMID_CHANNELS[i];
                Conv2d::new(&format!("backbone.aggregate.level{}", i + 1), c, c, 1, true)
            }),
            head: Conv2d::new("backbone.head", total, dim + 1, 1, true),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Channel count of the aggregated map.
    pub fn aggregated_channels(&self) -> usize {
        PYRAMID_CHANNELS.iter().sum()
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) {
        self.block1[0].init(ps, rng, RELU_GAIN);
        self.block1[1].init(ps, rng, RELU_GAIN);
        self.block2.init(ps, rng);
        self.block3.init(ps, rng);
        self.block4.init(ps, rng);
        for conv in &self.aggregate {
            conv.init(ps, rng, LINEAR_GAIN);
        }
        self.head.init(ps, rng, LINEAR_GAIN);
    }

    /// `image: [3, H, W]` on the graph.
    pub fn encode_var(&self, g: &Graph, ps: &ParamStore, image: Var) -> PyramidVars {
        let x = g.relu(self.block1[0].forward(g, ps, image));
        let f1 = g.relu(self.block1[1].forward(g, ps, x));
        let f2 = self.block2.forward(g, ps, g.max_pool(f1, 2));
        let f3 = self.block3.forward(g, ps, g.max_pool(f2, 4));
        let f4 = self.block4.forward(g, ps, g.max_pool(f3, 4));
        PyramidVars { f1, f2, f3, f4 }
    }

    pub fn aggregate_var(&self, g: &Graph, ps: &ParamStore, pyramid: &PyramidVars) -> Var {
        let shape = g.shape(pyramid.f1);
        let (h, w) = (shape[1], shape[2]);
        let levels = [pyramid.f1, pyramid.f2, pyramid.f3, pyramid.f4];
        let aligned: Vec<Var> = levels
            .iter()
            .zip(&self.aggregate)
            .map(|(&f, conv)| g.upsample_bilinear(conv.forward(g, ps, f), h, w))
            .collect();
        g.concat(&aligned, 0)
    }

    /// Raw `[dim + 1, H, W]` head output before normalization.
    pub fn head_raw_var(&self, g: &Graph, ps: &ParamStore, aggregated: Var) -> Var {
        self.head.forward(g, ps, aggregated)
    }

    pub fn split_head_var(&self, g: &Graph, raw: Var) -> MapsVars {
        let descriptors = g.l2_normalize_channels(g.slice(raw, 0, 0..self.dim));
        let score = g.sigmoid(g.slice(raw, 0, self.dim..self.dim + 1));
        MapsVars { score, descriptors }
    }

    pub fn head_var(&self, g: &Graph, ps: &ParamStore, aggregated: Var) -> MapsVars {
        let raw = self.head_raw_var(g, ps, aggregated);
        self.split_head_var(g, raw)
    }

    /// Full image-to-maps pass on the graph; also returns the pyramid.
    pub fn forward_var(&self, g: &Graph, ps: &ParamStore, image: Var) -> (PyramidVars, MapsVars) {
        let pyramid = self.encode_var(g, ps, image);
        let agg = self.aggregate_var(g, ps, &pyramid);
        (pyramid, self.head_var(g, ps, agg))
    }

    pub fn encode(&self, ps: &ParamStore, image: &ImageTensor) -> PyramidFeatures {
        let g = Graph::inference();
        let x = g.constant(image.tensor().clone());
        let p = self.encode_var(&g, ps, x);
        PyramidFeatures {
            f1: (*g.value(p.f1)).clone(),
            f2: (*g.value(p.f2)).clone(),
            f3: (*g.value(p.f3)).clone(),
            f4: (*g.value(p.f4)).clone(),
        }
    }

    pub fn aggregate(&self, ps: &ParamStore, pyramid: &PyramidFeatures) -> Result<Tensor> {
        self.check_pyramid(pyramid)?;
        let g = Graph::inference();
        let p = PyramidVars {
            f1: g.constant(pyramid.f1.clone()),
            f2: g.constant(pyramid.f2.clone()),
            f3: g.constant(pyramid.f3.clone()),
            f4: g.constant(pyramid.f4.clone()),
        };
        let agg = self.aggregate_var(&g, ps, &p);
        Ok((*g.value(agg)).clone())
    }

    pub fn head(&self, ps: &ParamStore, aggregated: &Tensor) -> Result<ScoreDescriptorMaps> {
        let want = self.aggregated_channels();
        if aggregated.rank() != 3 || aggregated.dim(0) != want {
            return Err(Error::Dimension(format!("head expects [{want}, H, W], got {:?}", aggregated.shape())));
        }
        let g = Graph::inference();
        let maps = self.head_var(&g, ps, g.constant(aggregated.clone()));
        Ok(maps_from_vars(&g, &maps))
    }

    /// Image to dense maps.
    pub fn forward(&self, ps: &ParamStore, image: &ImageTensor) -> ScoreDescriptorMaps {
        let g = Graph::inference();
        let x = g.constant(image.tensor().clone());
        let (_, maps) = self.forward_var(&g, ps, x);
        maps_from_vars(&g, &maps)
    }

    fn check_pyramid(&self, p: &PyramidFeatures) -> Result<()> {
        let (h, w) = (p.f1.dim(1), p.f1.dim(2));
        for ((t, &c), &s) in p.levels().iter().zip(&PYRAMID_CHANNELS).zip(&PYRAMID_STRIDES) {
            if t.shape() != [c, h / s, w / s] {
                return Err(Error::Dimension(format!("pyramid level has shape {:?}, expected {:?}", t.shape(), [c, h / s, w / s])));
            }
        }
        Ok(())
    }
}

pub(crate) fn maps_from_vars(g: &Graph, maps: &MapsVars) -> ScoreDescriptorMaps {
    let s = g.value(maps.score);
    let (h, w) = (s.dim(1), s.dim(2));
    ScoreDescriptorMaps { score: (*s).clone().reshape([h, w]), descriptors: (*g.value(maps.descriptors)).clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(dim: usize) -> (Backbone, ParamStore) {
        let b = Backbone::new(dim);
        let mut ps = ParamStore::new();
        b.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0));
        (b, ps)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::from_fn([3, h, w], |_| rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn rejects_sizes_not_divisible_by_32() {
        assert!(matches!(ImageTensor::new(Tensor::zeros([3, 48, 64])), Err(Error::Dimension(_))));
        assert!(matches!(ImageTensor::new(Tensor::zeros([1, 64, 64])), Err(Error::Dimension(_))));
        assert!(ImageTensor::new(Tensor::full([3, 32, 32], 1.5)).is_err());
    }

    #[test]
    fn smallest_input_reduces_to_single_cell() {
        let (b, ps) = model(16);
        let p = b.encode(&ps, &random_image(32, 32, 1));
        assert_eq!(p.f4.shape(), &[128, 1, 1]);
        assert_eq!(p.f3.shape(), &[128, 4, 4]);
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_features() {
        let (b, ps) = model(16);
        let p = b.encode(&ps, &ImageTensor::constant(64, 64, 0.0).unwrap());
        for level in p.levels() {
            assert!(level.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_score_logit_gives_half() {
        let (b, mut ps) = model(8);
        ps.zero_prefix("backbone.head");
        let maps = b.forward(&ps, &random_image(32, 32, 3));
        assert!(maps.score.data().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn head_emits_dim_plus_one_channels() {
        let (b, ps) = model(128);
        let g = Graph::inference();
        let agg = g.constant(Tensor::full([352, 32, 32], 0.1));
        let raw = b.head_raw_var(&g, &ps, agg);
        assert_eq!(g.shape(raw), vec![129, 32, 32]);
    }

    #[test]
    fn constant_top_level_upsamples_to_constant_contribution() {
        let (b, ps) = model(8);
        let g = Graph::inference();
        let p = PyramidVars {
            f1: g.constant(Tensor::zeros([32, 32, 32])),
            f2: g.constant(Tensor::zeros([64, 16, 16])),
            f3: g.constant(Tensor::zeros([128, 4, 4])),
            f4: g.constant(Tensor::full([128, 1, 1], 0.7)),
        };
        let agg = g.value(b.aggregate_var(&g, &ps, &p));
        let hw = 32 * 32;
        for c in 224..352 {
            let plane = &agg.data()[c * hw..(c + 1) * hw];
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
        }
    }
}
