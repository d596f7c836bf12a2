//! Detector (reprojection), descriptor (NRE), coupling, and total losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reprojection_probability_map, warp_points_var, CorrespondenceSet, Direction, Point, WarpSpec};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_T_DES: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NreForm {
    /// Cross-entropy against the four-pixel bilinear `q_r`.
    #[default]
    Bilinear,
    /// `−ln` of the matching probability bilinearly sampled at `p_AB`.
    Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionConfig {
    pub t_des: f64,
    pub nre_form: NreForm,
    /// Keep the `1 / N_A` factor in front of the normalized coupling sum.
    pub coupling_prefactor: bool,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self { t_des: DEFAULT_T_DES, nre_form: NreForm::Bilinear, coupling_prefactor: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub da: f64,
    pub tr: f64,
    pub det: f64,
    pub des: f64,
    pub cp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { da: 2.0, tr: 1.0, det: 1.0, des: 5.0, cp: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [("da", self.da), ("Tr", self.tr), ("det", self.det), ("des", self.des), ("cp", self.cp)]
    }
}

/// Unweighted loss values in the order of [`LossWeights::named`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub da: f64,
    pub tr: f64,
    pub det: f64,
    pub des: f64,
    pub cp: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [("da", self.da), ("Tr", self.tr), ("det", self.det), ("des", self.des), ("cp", self.cp)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub t_des: f64,
}

impl LossReport {
    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }
}

/// Weighted sum of the five components. A non-finite component is an error
/// naming it.
pub fn total_loss(components: &LossComponents, weights: &LossWeights, t_des: f64) -> Result<LossReport> {
    let mut total = 0.0;
    let mut map = BTreeMap::new();
    for ((name, c), (_, w)) in components.named().into_iter().zip(weights.named()) {
        if !c.is_finite() {
            return Err(Error::NonFiniteLoss(name.into()));
        }
        total += w * c;
        map.insert(name.to_string(), c);
    }
    Ok(LossReport { total, components: map, t_des })
}

/// Mean over pairs of `½(‖p_A − p_BA‖ + ‖p_B − p_AB‖)`, differentiable in
/// the keypoint positions `[N_A, 2]`, `[N_B, 2]` and through the warp.
pub fn detector_loss_var(g: &Graph, pos_a: Var, pos_b: Var, corr: &CorrespondenceSet, spec: &WarpSpec) -> Var {
    assert!(!corr.is_empty(), "detector loss needs correspondences");
    let (ia, ib): (Vec<usize>, Vec<usize>) = corr.index_pairs().into_iter().unzip();
    let pa = g.index_rows(pos_a, &ia);
    let pb = g.index_rows(pos_b, &ib);
    let p_ab = warp_points_var(g, pa, spec, Direction::AtoB);
    let p_ba = warp_points_var(g, pb, spec, Direction::BtoA);
    let da = g.norm_rows(g.sub(pa, p_ba));
    let db = g.norm_rows(g.sub(pb, p_ab));
    g.scale(g.sum(g.add(da, db)), 0.5 / corr.len() as f64)
}

/// Plain detector loss from the stored pair positions; `0` when empty.
pub fn detector_loss(corr: &CorrespondenceSet) -> f64 {
    if corr.is_empty() {
        return 0.0;
    }
    let sum: f64 = corr
        .pairs
        .iter()
        .map(|c| 0.5 * (crate::geometry::distance(c.p_a, c.p_ba) + crate::geometry::distance(c.p_b, c.p_ab)))
        .sum();
    sum / corr.len() as f64
}

/// Cosine similarities `[N, H·W]` of descriptors `[N, dim]` against a dense
/// map `[dim, H, W]`.
pub fn dense_similarity_var(g: &Graph, descriptors: Var, dense: Var) -> Var {
    let s = g.shape(dense);
    let flat = g.reshape(dense, &[s[0], s[1] * s[2]]);
    g.matmul(descriptors, flat)
}

/// `(sims − 1) / t_des`.
fn logits_var(g: &Graph, sims: Var, t_des: f64) -> Var {
    g.affine(sims, 1.0 / t_des, -1.0 / t_des)
}

/// Matching distribution `softmax((D · d − 1) / t_des)` over all pixels.
pub fn matching_probability(descriptor: &[f64], dense: &Tensor, t_des: f64) -> Tensor {
    let g = Graph::inference();
    let d = g.constant(Tensor::new([1, descriptor.len()], descriptor.to_vec()));
    let q = g.softmax(logits_var(&g, dense_similarity_var(&g, d, g.constant(dense.clone())), t_des));
    let hw = dense.dim(1) * dense.dim(2);
    (*g.value(q)).clone().reshape([hw])
}

fn targets_taps(targets: &[Point], height: usize, width: usize) -> Vec<Vec<(usize, f64)>> {
    let hw = height * width;
    targets
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            reprojection_probability_map(p, height, width)
                .unwrap_or_else(|e| panic!("reprojection target: {e}"))
                .into_iter()
                .map(|(j, w)| (i * hw + j, w))
                .collect()
        })
        .collect()
}

/// Per-keypoint NRE `[N]` from similarities `[N, H·W]` and reprojected
/// targets in an `H × W` map.
pub fn nre_from_sims_var(g: &Graph, sims: Var, targets: &[Point], height: usize, width: usize, cfg: &SupervisionConfig) -> Var {
    let taps = targets_taps(targets, height, width);
    let logits = logits_var(g, sims, cfg.t_des);
    match cfg.nre_form {
        NreForm::Bilinear => g.scale(g.gather_weighted(g.log_softmax(logits), taps), -1.0),
        NreForm::Point => g.scale(g.ln(g.gather_weighted(g.softmax(logits), taps)), -1.0),
    }
}

/// NRE of one descriptor against a dense map, for a target `p_AB`.
pub fn nre(descriptor: &[f64], dense: &Tensor, p_ab: Point, cfg: &SupervisionConfig) -> Result<f64> {
    let (h, w) = (dense.dim(1), dense.dim(2));
    reprojection_probability_map(p_ab, h, w)?;
    let g = Graph::inference();
    let d = g.constant(Tensor::new([1, descriptor.len()], descriptor.to_vec()));
    let sims = dense_similarity_var(&g, d, g.constant(dense.clone()));
    Ok(g.item(g.sum(nre_from_sims_var(&g, sims, &[p_ab], h, w, cfg))))
}

/// Ranking term `1 − S(exp((sims − 1)/t), p_AB)` per row, `[N]`.
pub fn ranking_from_sims_var(g: &Graph, sims: Var, targets: &[Point], height: usize, width: usize, t_des: f64) -> Var {
    let taps = targets_taps(targets, height, width);
    let sampled = g.gather_weighted(g.exp(logits_var(g, sims, t_des)), taps);
    g.affine(sampled, -1.0, 1.0)
}

/// Coupling term for one direction: the score-product-weighted average of
/// the ranking term, times `1 / n_keypoints` when the prefactor is enabled.
pub fn coupling_side_var(
    g: &Graph,
    ranking: Var,
    keypoint_scores: Var,
    target_scores: Var,
    n_keypoints: usize,
    prefactor: bool,
) -> Var {
    let w = g.mul(keypoint_scores, target_scores);
    let weighted = g.div(g.sum(g.mul(w, ranking)), g.sum(w));
    if prefactor {
        g.scale(weighted, 1.0 / n_keypoints.max(1) as f64)
    } else {
        weighted
    }
}

/// Graph handles of one image needed by the pair losses.
#[derive(Clone, Copy, Debug)]
pub struct ImageVars {
    /// Keypoint positions `[N, 2]`.
    pub positions: Var,
    /// Keypoint scores `[N]`.
    pub scores: Var,
    /// Sampled (unboosted) descriptors `[N, dim]`.
    pub descriptors: Var,
    /// Dense score map `[1, H, W]`.
    pub score_map: Var,
    /// Dense descriptor map `[dim, H, W]`.
    pub descriptor_map: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PairLossVars {
    pub det: Var,
    pub des: Var,
    pub cp: Var,
}

/// Detector, descriptor, and coupling losses of one pair. `None` when there
/// are no correspondences.
pub fn pair_losses_var(
    g: &Graph,
    a: &ImageVars,
    b: &ImageVars,
    corr: &CorrespondenceSet,
    spec: &WarpSpec,
    cfg: &SupervisionConfig,
) -> Option<PairLossVars> {
    if corr.is_empty() {
        return None;
    }
    let det = detector_loss_var(g, a.positions, b.positions, corr, spec);
    let (nre_ab, cp_a) = directional_var(g, a, b, corr, cfg);
    let rev = corr.reversed();
    let (nre_ba, cp_b) = directional_var(g, b, a, &rev, cfg);
    let des = g.scale(g.add(g.sum(nre_ab), g.sum(nre_ba)), 1.0 / (2 * corr.len()) as f64);
    let cp = g.scale(g.add(cp_a, cp_b), 0.5);
    Some(PairLossVars { det, des, cp })
}

/// Per-pair NRE values and the coupling term for queries from `a` into `b`.
fn directional_var(g: &Graph, a: &ImageVars, b: &ImageVars, corr: &CorrespondenceSet, cfg: &SupervisionConfig) -> (Var, Var) {
    let ia: Vec<usize> = corr.pairs.iter().map(|c| c.index_a).collect();
    let targets: Vec<Point> = corr.pairs.iter().map(|c| c.p_ab).collect();
    let shape = g.shape(b.descriptor_map);
    let (h, w) = (shape[1], shape[2]);
    let d = g.index_rows(a.descriptors, &ia);
    let sims = dense_similarity_var(g, d, b.descriptor_map);
    let nre = nre_from_sims_var(g, sims, &targets, h, w, cfg);
    let ranking = ranking_from_sims_var(g, sims, &targets, h, w, cfg.t_des);
    let s_a = g.index_rows(a.scores, &ia);
    let n = targets.len();
    let target_pos = g.constant(Tensor::new([n, 2], targets.iter().flat_map(|p| *p).collect()));
    let s_ab = g.reshape(g.sample_bilinear(b.score_map, target_pos), &[n]);
    let n_a = g.shape(a.positions)[0];
    (nre, coupling_side_var(g, ranking, s_a, s_ab, n_a, cfg.coupling_prefactor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_correspondences, Correspondence};

    #[test]
    fn total_loss_examples() {
        let c = LossComponents { da: 0.5, tr: 0.2, det: 0.1, des: 0.3, cp: 0.4 };
        let r = total_loss(&c, &LossWeights::default(), 0.1).unwrap();
        let dot: f64 = [2.0, 1.0, 1.0, 5.0, 1.0].iter().zip([0.5, 0.2, 0.1, 0.3, 0.4]).map(|(w, c)| w * c).sum();
        assert!((r.total - dot).abs() < 1e-12);
        assert!((r.total - 3.2).abs() < 1e-12);
        let zero = LossWeights { da: 0.0, tr: 0.0, det: 0.0, des: 0.0, cp: 0.0 };
        assert_eq!(total_loss(&c, &zero, 0.1).unwrap().total, 0.0);
        let bad = LossComponents { cp: f64::NAN, ..c };
        assert!(matches!(total_loss(&bad, &zero, 0.1), Err(Error::NonFiniteLoss(n)) if n == "cp"));
    }

    #[test]
    fn detector_loss_single_pair() {
        let corr = CorrespondenceSet {
            pairs: vec![Correspondence { index_a: 0, index_b: 0, p_a: [0.0, 0.0], p_b: [5.0, 5.0], p_ab: [5.0, 1.0], p_ba: [2.0, 0.0] }],
            th_gt: 5.0,
        };
        assert_eq!(detector_loss(&corr), 3.0);
    }

    #[test]
    fn uniform_map_gives_log_area() {
        let dense = Tensor::from_fn([2, 20, 20], |i| if i < 400 { 1.0 } else { 0.0 });
        let v = nre(&[1.0, 0.0], &dense, [7.0, 3.0], &SupervisionConfig::default()).unwrap();
        assert!((v - 400f64.ln()).abs() < 1e-9);
        let q = matching_probability(&[1.0, 0.0], &dense, 0.1);
        assert!((q.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_concentrates_mass() {
        let mut dense = Tensor::zeros([2, 4, 4]);
        for p in 0..16 {
            dense.data_mut()[p] = 0.6;
            dense.data_mut()[16 + p] = 0.8;
        }
        dense.data_mut()[5] = 1.0;
        dense.data_mut()[16 + 5] = 0.0;
        let q = matching_probability(&[1.0, 0.0], &dense, 1e-4);
        assert!(q.data()[5] > 0.999);
    }

    #[test]
    fn detector_loss_graph_matches_plain() {
        let pts: Vec<Point> = vec![[3.0, 4.0], [10.2, 8.7], [15.5, 2.25]];
        let h = crate::geometry::Mat3::new(1.0, 0.01, 0.7, -0.02, 1.0, -0.4, 0.0, 0.0, 1.0);
        let spec = WarpSpec::homography(h, (20, 20), (20, 20)).unwrap();
        let pts_b: Vec<Point> = pts.iter().map(|&p| spec.warp(p, Direction::AtoB).unwrap()).map(|q| [q[0] + 0.3, q[1] - 0.2]).collect();
        let corr = build_correspondences(&pts, &pts_b, &spec, 5.0);
        assert_eq!(corr.len(), 3);
        let g = Graph::inference();
        let a = g.constant(Tensor::new([3, 2], pts.iter().flat_map(|p| *p).collect()));
        let b = g.constant(Tensor::new([3, 2], pts_b.iter().flat_map(|p| *p).collect()));
        let v = g.item(detector_loss_var(&g, a, b, &corr, &spec));
        assert!((v - detector_loss(&corr)).abs() < 1e-12);
    }
}
