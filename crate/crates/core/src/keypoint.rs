//! Differentiable keypoint detection: NMS on the score map, softargmax
//! refinement inside each candidate's window, and bilinear descriptor
//! sampling.
//!
//! Coordinates are `(u, v)` = (column, row) with pixel centers at integer
//! positions and the origin at the top-left pixel center.

use serde::{Deserialize, Serialize};

use crate::backbone::ScoreDescriptorMaps;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn position(&self) -> [f64; 2] {
        [self.u, self.v]
    }
}

/// Keypoints with unit-norm descriptors (`[N, dim]`) for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Tensor,
    /// `(height, width)`.
    pub image_size: (usize, usize),
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.shape().get(1).copied().unwrap_or(0)
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.keypoints.iter().map(Keypoint::position).collect()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        self.descriptors.row(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// NMS and refinement window half-size in pixels.
    pub radius: usize,
    pub top_k: usize,
    pub score_threshold: f64,
    /// Softargmax temperature.
    pub temperature: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { radius: 2, top_k: 400, score_threshold: 0.2, temperature: 0.1 }
    }
}

impl DetectorConfig {
    /// Keypoint budget used for evaluation runs.
    pub const EVAL_TOP_K: usize = 5000;

    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::InvalidArgument("detection radius must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("softargmax temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Integer NMS candidates `(x, y)` of a `[H, W]` score map: scores above
/// `threshold` that are the strict maximum of their `(2r+1)²` window.
/// Pixels closer than `radius` to the border are skipped so every refinement
/// window lies inside the map.
pub fn nms_candidates(score: &Tensor, radius: usize, threshold: f64) -> Vec<(usize, usize)> {
    let (h, w) = (score.dim(0), score.dim(1));
    let s = score.data();
    let r = radius as isize;
    let mut out = Vec::new();
    if h <= 2 * radius || w <= 2 * radius {
        return out;
    }
    for y in radius..h - radius {
        'px: for x in radius..w - radius {
            let c = s[y * w + x];
            if !(c > threshold) {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = s[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    if n >= c {
                        continue 'px;
                    }
                }
            }
            out.push((x, y));
        }
    }
    out
}

/// Differentiable detection output on a graph.
#[derive(Clone, Debug)]
pub struct DetectionVars {
    /// Refined `(u, v)` positions, `[N, 2]`.
    pub positions: Var,
    /// Score map sampled at the refined positions, `[N]`.
    pub scores: Var,
    /// Integer candidates the positions were refined from.
    pub candidates: Vec<(usize, usize)>,
}

impl DetectionVars {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Detects keypoints on a `[1, H, W]` score map held by the graph. Selection
/// (NMS, thresholding, top-k) is piecewise constant; positions and scores
/// carry gradients back to the score map.
pub fn detect_var(g: &Graph, score_map: Var, cfg: &DetectorConfig) -> DetectionVars {
    let shape = g.shape(score_map);
    let (h, w) = (shape[1], shape[2]);
    let plain = (*g.value(score_map)).clone().reshape([h, w]);
    let candidates = nms_candidates(&plain, cfg.radius, cfg.score_threshold);
    if candidates.is_empty() {
        return DetectionVars { positions: g.constant(Tensor::zeros([0, 2])), scores: g.constant(Tensor::zeros([0])), candidates };
    }
    let (positions, scores) = refine(g, score_map, &candidates, cfg, w);

    let sv = g.value(scores);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| sv.data()[b].total_cmp(&sv.data()[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);
    if order.len() == candidates.len() && order.iter().enumerate().all(|(i, &o)| i == o) {
        return DetectionVars { positions, scores, candidates };
    }
    let kept: Vec<(usize, usize)> = order.iter().map(|&i| candidates[i]).collect();
    DetectionVars { positions: g.index_rows(positions, &order), scores: g.index_rows(scores, &order), candidates: kept }
}

fn refine(g: &Graph, score_map: Var, candidates: &[(usize, usize)], cfg: &DetectorConfig, w: usize) -> (Var, Var) {
    let r = cfg.radius as isize;
    let side = 2 * cfg.radius + 1;
    let window = side * side;
    let mut offsets = Vec::with_capacity(window * 2);
    for dy in -r..=r {
        for dx in -r..=r {
            offsets.push(dx as f64);
            offsets.push(dy as f64);
        }
    }
    let taps: Vec<Vec<(usize, f64)>> = candidates
        .iter()
        .flat_map(|&(x, y)| {
            let (x, y) = (x as isize, y as isize);
            (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| vec![(((y + dy) * w as isize + x + dx) as usize, 1.0)]))
        })
        .collect();
    let n = candidates.len();
    let patches = g.reshape(g.gather_weighted(score_map, taps), &[n, window]);
    let weights = g.softmax(g.scale(patches, 1.0 / cfg.temperature));
    let offset = g.matmul(weights, g.constant(Tensor::new([window, 2], offsets)));
    let base: Vec<f64> = candidates.iter().flat_map(|&(x, y)| [x as f64, y as f64]).collect();
    let positions = g.add(offset, g.constant(Tensor::new([n, 2], base)));
    let scores = g.reshape(g.sample_bilinear(score_map, positions), &[n]);
    (positions, scores)
}

/// Detects keypoints on a dense score map.
pub fn detect(maps: &ScoreDescriptorMaps, cfg: &DetectorConfig) -> Result<Vec<Keypoint>> {
    cfg.validate()?;
    let g = Graph::inference();
    let (h, w) = (maps.height(), maps.width());
    let s = g.constant(maps.score.clone().reshape([1, h, w]));
    let det = detect_var(&g, s, cfg);
    Ok(keypoints_from_vars(&g, &det))
}

pub fn keypoints_from_vars(g: &Graph, det: &DetectionVars) -> Vec<Keypoint> {
    if det.is_empty() {
        return Vec::new();
    }
    let p = g.value(det.positions);
    let s = g.value(det.scores);
    (0..det.len()).map(|i| Keypoint { u: p.data()[2 * i], v: p.data()[2 * i + 1], score: s.data()[i] }).collect()
}

/// Unit-norm descriptors sampled bilinearly from `descriptors [dim, H, W]`
/// at `positions [N, 2]`; returns `[N, dim]`.
pub fn sample_descriptors_var(g: &Graph, descriptors: Var, positions: Var) -> Var {
    let n = g.shape(positions)[0];
    if n == 0 {
        let dim = g.shape(descriptors)[0];
        return g.constant(Tensor::zeros([0, dim]));
    }
    g.l2_normalize(g.sample_bilinear(descriptors, positions))
}

/// Checks that every keypoint lies inside a `height × width` map.
pub fn check_in_bounds(keypoints: &[Keypoint], height: usize, width: usize) -> Result<()> {
    for k in keypoints {
        if !(k.u >= 0.0 && k.v >= 0.0 && k.u <= (width - 1) as f64 && k.v <= (height - 1) as f64) {
            return Err(Error::OutOfBounds { u: k.u, v: k.v, width, height });
        }
    }
    Ok(())
}

pub fn sample_descriptors(maps: &ScoreDescriptorMaps, keypoints: &[Keypoint]) -> Result<Tensor> {
    check_in_bounds(keypoints, maps.height(), maps.width())?;
    let g = Graph::inference();
    let d = g.constant(maps.descriptors.clone());
    let pos: Vec<f64> = keypoints.iter().flat_map(|k| [k.u, k.v]).collect();
    let p = g.constant(Tensor::new([keypoints.len(), 2], pos));
    Ok((*g.value(sample_descriptors_var(&g, d, p))).clone())
}

/// Detection followed by descriptor sampling, without the booster.
pub fn extract_features(maps: &ScoreDescriptorMaps, cfg: &DetectorConfig) -> Result<FeatureSet> {
    let keypoints = detect(maps, cfg)?;
    let descriptors = sample_descriptors(maps, &keypoints)?;
    Ok(FeatureSet { keypoints, descriptors, image_size: (maps.height(), maps.width()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn maps_from_score(score: Tensor, dim: usize) -> ScoreDescriptorMaps {
        let (h, w) = (score.dim(0), score.dim(1));
        let mut d = Tensor::zeros([dim, h, w]);
        d.data_mut()[..h * w].iter_mut().for_each(|v| *v = 1.0);
        ScoreDescriptorMaps { score, descriptors: d }
    }

    fn gaussian_map(h: usize, w: usize, cu: f64, cv: f64, sigma: f64) -> Tensor {
        Tensor::from_fn([h, w], |i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            0.05 + 0.9 * (-((x - cu).powi(2) + (y - cv).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn symmetric_peak_refines_to_its_pixel() {
        let mut s = Tensor::full([21, 21], 0.3);
        for (dx, dy, v) in [(0, 0, 0.9), (1, 0, 0.6), (-1, 0, 0.6), (0, 1, 0.6), (0, -1, 0.6)] {
            s.data_mut()[((10 + dy) * 21 + 10 + dx) as usize] = v;
        }
        let kps = detect(&maps_from_score(s, 4), &DetectorConfig::default()).unwrap();
        assert_eq!(kps.len(), 1);
        assert!((kps[0].u - 10.0).abs() < 1e-12 && (kps[0].v - 10.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_map_below_threshold_is_empty() {
        let kps = detect(&maps_from_score(Tensor::full([16, 16], 0.1), 4), &DetectorConfig::default()).unwrap();
        assert!(kps.is_empty());
    }

    #[test]
    fn equal_neighbours_are_not_maxima() {
        let mut s = Tensor::full([9, 9], 0.3);
        s.data_mut()[4 * 9 + 4] = 0.8;
        s.data_mut()[4 * 9 + 5] = 0.8;
        assert!(nms_candidates(&s, 2, 0.2).is_empty());
    }

    #[test]
    fn score_is_bilinear_sample_at_refined_position() {
        let s = gaussian_map(24, 24, 11.4, 12.2, 1.5);
        let maps = maps_from_score(s.clone(), 4);
        let kps = detect(&maps, &DetectorConfig::default()).unwrap();
        assert_eq!(kps.len(), 1);
        let k = kps[0];
        let (x0, y0) = (k.u.floor() as usize, k.v.floor() as usize);
        let (fx, fy) = (k.u - x0 as f64, k.v - y0 as f64);
        let at = |x: usize, y: usize| s.data()[y * 24 + x];
        let expect = (1.0 - fx) * (1.0 - fy) * at(x0, y0)
            + fx * (1.0 - fy) * at(x0 + 1, y0)
            + (1.0 - fx) * fy * at(x0, y0 + 1)
            + fx * fy * at(x0 + 1, y0 + 1);
        assert!((k.score - expect).abs() < 1e-12);
    }

    #[test]
    fn refined_positions_differentiate_with_respect_to_scores() {
        let s = gaussian_map(12, 12, 5.3, 6.4, 1.2).reshape([1, 12, 12]);
        let report = check_gradients(&[s], |g, v| {
            let det = detect_var(g, v[0], &DetectorConfig::default());
            let probe = g.constant(Tensor::new([1, 2], vec![0.7, -1.3]));
            g.add(g.sum(g.mul(det.positions, probe)), g.sum(det.scores))
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn sampling_at_integer_pixel_returns_that_descriptor() {
        let (h, w, dim) = (6, 7, 3);
        let d = Tensor::from_fn([dim, h, w], |i| ((i * 37 % 11) as f64) - 5.0);
        let g = Graph::inference();
        let dn = g.value(g.l2_normalize_channels(g.constant(d)));
        let maps = ScoreDescriptorMaps { score: Tensor::full([h, w], 0.5), descriptors: (*dn).clone() };
        let out = sample_descriptors(&maps, &[Keypoint { u: 3.0, v: 2.0, score: 0.5 }]).unwrap();
        let expect = maps.descriptor_at(3, 2);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_between_equal_descriptors_returns_them() {
        let (h, w) = (4, 4);
        let mut d = Tensor::zeros([2, h, w]);
        for p in 0..h * w {
            d.data_mut()[p] = 0.6;
            d.data_mut()[h * w + p] = 0.8;
        }
        let maps = ScoreDescriptorMaps { score: Tensor::full([h, w], 0.5), descriptors: d };
        let out = sample_descriptors(&maps, &[Keypoint { u: 1.5, v: 2.0, score: 0.5 }]).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-12 && (out.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_sampling_is_rejected() {
        let maps = maps_from_score(Tensor::full([4, 4], 0.5), 2);
        let err = sample_descriptors(&maps, &[Keypoint { u: 4.5, v: 1.0, score: 0.5 }]);
        assert!(matches!(err, Err(Error::OutOfBounds { .. })));
    }
}
