//! Descriptor booster: a wave position encoding (descriptor as amplitude,
//! keypoint position as phase) followed by attention-free transformer
//! layers, trained with a histogram-binned average-precision surrogate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::keypoint::Keypoint;
use crate::nn::{Linear, Mlp2, LINEAR_GAIN};
use crate::ops::sigmoid;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_AP_BINS: usize = 10;
pub const PHASE_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoosterConfig {
    pub layers: usize,
    /// Histogram bins of the AP surrogate.
    pub ap_bins: usize,
    /// Width of the soft bin assignment as a fraction of the bin spacing.
    pub ap_smoothing: f64,
}

impl Default for BoosterConfig {
    fn default() -> Self {
        Self { layers: DEFAULT_LAYERS, ap_bins: DEFAULT_AP_BINS, ap_smoothing: 1.0 }
    }
}

impl BoosterConfig {
    pub fn ap_surrogate(&self) -> ApSurrogate {
        ApSurrogate { bins: self.ap_bins, smoothing: self.ap_smoothing }
    }
}

/// Settings of the histogram AP surrogate. With `smoothing = 1` every
/// similarity is split linearly between its two nearest bin centers; smaller
/// values confine the split to a band of that relative width around the
/// midpoint between centers, approaching hard binning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApSurrogate {
    pub bins: usize,
    pub smoothing: f64,
}

impl Default for ApSurrogate {
    fn default() -> Self {
        Self { bins: DEFAULT_AP_BINS, smoothing: 1.0 }
    }
}

/// Positions `[N, 3]` as `(2u/W − 1, 2v/H − 1, score)` and unit descriptors
/// `[N, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoostInput {
    pub positions: Tensor,
    pub descriptors: Tensor,
}

impl BoostInput {
    pub fn new(positions: Tensor, descriptors: Tensor) -> Result<Self> {
        if positions.rank() != 2 || positions.dim(1) != 3 {
            return Err(Error::Dimension(format!("positions must be [N, 3], got {:?}", positions.shape())));
        }
        if descriptors.rank() != 2 || descriptors.dim(0) != positions.dim(0) {
            return Err(Error::Dimension(format!(
                "descriptors {:?} do not match {} positions",
                descriptors.shape(),
                positions.dim(0)
            )));
        }
        Ok(Self { positions, descriptors })
    }

    pub fn from_keypoints(keypoints: &[Keypoint], descriptors: Tensor, height: usize, width: usize) -> Result<Self> {
        Self::new(normalized_positions(keypoints, height, width), descriptors)
    }

    pub fn len(&self) -> usize {
        self.positions.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn normalized_positions(keypoints: &[Keypoint], height: usize, width: usize) -> Tensor {
    let data = keypoints
        .iter()
        .flat_map(|k| [2.0 * k.u / width as f64 - 1.0, 2.0 * k.v / height as f64 - 1.0, k.score])
        .collect();
    Tensor::new([keypoints.len(), 3], data)
}

/// Graph form of [`normalized_positions`] from `[N, 2]` pixel positions and
/// `[N]` scores.
pub fn normalized_positions_var(g: &Graph, positions: Var, scores: Var, height: usize, width: usize) -> Var {
    let n = g.shape(positions)[0];
    let uv = g.add_row(
        g.mul_row(positions, g.constant(Tensor::new([2], vec![2.0 / width as f64, 2.0 / height as f64]))),
        g.constant(Tensor::full([2], -1.0)),
    );
    g.concat(&[uv, g.reshape(scores, &[n, 1])], 1)
}

/// Amplitude, phase, and the two Euler parts of the wave.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveComponents {
    pub amplitude: Tensor,
    pub phase: Tensor,
    pub real: Tensor,
    pub imag: Tensor,
}

#[derive(Clone, Debug)]
pub struct WavePositionEncoder {
    pub amplitude: Mlp2,
    pub phase: Mlp2,
    pub fuse: Mlp2,
    pub dim: usize,
}

impl WavePositionEncoder {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            amplitude: Mlp2::new(&format!("{prefix}.mlp_a"), dim, 2 * dim, dim),
            phase: Mlp2::new(&format!("{prefix}.mlp_theta"), 3, PHASE_HIDDEN, dim),
            fuse: Mlp2::new(&format!("{prefix}.mlp_f"), 2 * dim, 2 * dim, dim),
            dim,
        }
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) {
        self.amplitude.init(ps, rng);
        self.phase.init(ps, rng);
        self.fuse.init(ps, rng);
    }

    /// Amplitude and phase, each `[N, dim]`.
    pub fn wave_var(&self, g: &Graph, ps: &ParamStore, positions: Var, descriptors: Var) -> (Var, Var) {
        (self.amplitude.forward(g, ps, descriptors), self.phase.forward(g, ps, positions))
    }

    /// `d + MLP_F([A ⊙ cos θ, A ⊙ sin θ])` from given amplitude and phase.
    pub fn fuse_var(&self, g: &Graph, ps: &ParamStore, descriptors: Var, amplitude: Var, phase: Var) -> Var {
        let re = g.mul(amplitude, g.cos(phase));
        let im = g.mul(amplitude, g.sin(phase));
        g.add(descriptors, self.fuse.forward(g, ps, g.concat(&[re, im], 1)))
    }

    pub fn forward_var(&self, g: &Graph, ps: &ParamStore, positions: Var, descriptors: Var) -> Var {
        let (a, theta) = self.wave_var(g, ps, positions, descriptors);
        self.fuse_var(g, ps, descriptors, a, theta)
    }

    pub fn components(&self, ps: &ParamStore, input: &BoostInput) -> WaveComponents {
        let g = Graph::inference();
        let (a, theta) = self.wave_var(&g, ps, g.constant(input.positions.clone()), g.constant(input.descriptors.clone()));
        let amplitude = (*g.value(a)).clone();
        let phase = (*g.value(theta)).clone();
        let real = amplitude.zip_map(&phase, |a, t| a * t.cos());
        let imag = amplitude.zip_map(&phase, |a, t| a * t.sin());
        WaveComponents { amplitude, phase, real, imag }
    }

    pub fn encode(&self, ps: &ParamStore, input: &BoostInput) -> Tensor {
        let g = Graph::inference();
        let v = self.forward_var(&g, ps, g.constant(input.positions.clone()), g.constant(input.descriptors.clone()));
        (*g.value(v)).clone()
    }
}

/// `σ(Q_i) ⊙ Σ_j softmax_j(K) ⊙ V_j` on graph variables `[N, D]`.
pub fn aft_mix_var(g: &Graph, q: Var, k: Var, v: Var) -> Var {
    let context = g.sum_cols(g.mul(g.softmax_cols(k), v));
    g.mul_row(g.sigmoid(q), context)
}

/// Plain evaluation of [`aft_mix_var`]. Working memory beyond the `[N, D]`
/// output is `O(D)`: the token-axis softmax is streamed per channel.
pub fn aft_mix(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    assert!(q.shape() == k.shape() && k.shape() == v.shape() && q.rank() == 2, "aft_mix: Q, K, V must share shape [N, D]");
    let (n, d) = (q.dim(0), q.dim(1));
    let (kd, vd) = (k.data(), v.data());
    let mut max = vec![f64::NEG_INFINITY; d];
    for row in kd.chunks(d) {
        for (m, &x) in max.iter_mut().zip(row) {
            *m = m.max(x);
        }
    }
    let mut num = vec![0.0; d];
    let mut den = vec![0.0; d];
    for j in 0..n {
        for c in 0..d {
            let e = (kd[j * d + c] - max[c]).exp();
            num[c] += e * vd[j * d + c];
            den[c] += e;
        }
    }
    let context: Vec<f64> = num.iter().zip(&den).map(|(a, b)| a / b).collect();
    let mut out = Vec::with_capacity(n * d);
    for row in q.data().chunks(d) {
        out.extend(row.iter().zip(&context).map(|(&x, &c)| sigmoid(x) * c));
    }
    Tensor::new([n, d], out)
}

/// AFT attention with learned Q/K/V projections, a residual connection, and
/// a two-layer feed-forward block with its own residual.
#[derive(Clone, Debug)]
pub struct AftLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub ffn: Mlp2,
}

impl AftLayer {
    pub fn new(prefix: &str, d: usize) -> Self {
        Self {
            query: Linear::new(&format!("{prefix}.q"), d, d),
            key: Linear::new(&format!("{prefix}.k"), d, d),
            value: Linear::new(&format!("{prefix}.v"), d, d),
            ffn: Mlp2::new(&format!("{prefix}.ffn"), d, 2 * d, d),
        }
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) {
        for l in [&self.query, &self.key, &self.value] {
            l.init(ps, rng, LINEAR_GAIN);
        }
        self.ffn.init(ps, rng);
    }

    pub fn attention_var(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let q = self.query.forward(g, ps, x);
        let k = self.key.forward(g, ps, x);
        let v = self.value.forward(g, ps, x);
        aft_mix_var(g, q, k, v)
    }

    /// Plain attention, `x [N, D] -> [N, D]`.
    pub fn attention(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let project = |l: &Linear| {
            let g = Graph::inference();
            let y = l.forward(&g, ps, g.constant(x.clone()));
            (*g.value(y)).clone()
        };
        aft_mix(&project(&self.query), &project(&self.key), &project(&self.value))
    }

    pub fn forward_var(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let h = g.add(x, self.attention_var(g, ps, x));
        g.add(h, self.ffn.forward(g, ps, h))
    }
}

#[derive(Clone, Debug)]
pub struct Booster {
    pub encoder: WavePositionEncoder,
    pub layers: Vec<AftLayer>,
}

impl Booster {
    pub const PREFIX: &'static str = "booster";

    pub fn new(dim: usize, layers: usize) -> Self {
        Self {
            encoder: WavePositionEncoder::new("booster.wave_pe", dim),
            layers: (0..layers).map(|i| AftLayer::new(&format!("booster.aft{i}"), dim)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) {
        self.encoder.init(ps, rng);
        for l in &self.layers {
            l.init(ps, rng);
        }
    }

    /// `positions [N, 3]`, `descriptors [N, dim]` -> unit rows `[N, dim]`.
    pub fn forward_var(&self, g: &Graph, ps: &ParamStore, positions: Var, descriptors: Var) -> Var {
        let mut x = self.encoder.forward_var(g, ps, positions, descriptors);
        for l in &self.layers {
            x = l.forward_var(g, ps, x);
        }
        g.l2_normalize(x)
    }

    pub fn boost(&self, ps: &ParamStore, input: &BoostInput) -> Result<Tensor> {
        if input.descriptors.dim(1) != self.dim() {
            return Err(Error::Dimension(format!(
                "booster expects {}-dim descriptors, got {}",
                self.dim(),
                input.descriptors.dim(1)
            )));
        }
        if input.is_empty() {
            return Ok(Tensor::zeros([0, self.dim()]));
        }
        let g = Graph::inference();
        let v = self.forward_var(&g, ps, g.constant(input.positions.clone()), g.constant(input.descriptors.clone()));
        Ok((*g.value(v)).clone())
    }
}

fn cosine_rows(a: &Tensor, b: &Tensor) -> Tensor {
    crate::tensor::matmul(a, &b.transpose())
}

/// Exact average precision of single-relevant-item retrieval: each query
/// with a ground-truth candidate scores `1 / rank`, where rank counts
/// candidates with strictly greater similarity plus one. Returns the mean
/// over queries that have a match.
pub fn average_precision(queries: &Tensor, candidates: &Tensor, ground_truth: &[Option<usize>]) -> Result<f64> {
    if queries.dim(0) != ground_truth.len() {
        return Err(Error::Dimension(format!("{} queries, {} ground-truth entries", queries.dim(0), ground_truth.len())));
    }
    if queries.dim(1) != candidates.dim(1) {
        return Err(Error::Dimension("query and candidate widths differ".into()));
    }
    let sims = cosine_rows(queries, candidates);
    let m = candidates.dim(0);
    let mut total = 0.0;
    let mut count = 0;
    for (i, gt) in ground_truth.iter().enumerate() {
        let Some(j) = *gt else { continue };
        if j >= m {
            return Err(Error::InvalidArgument(format!("ground-truth index {j} out of {m} candidates")));
        }
        let row = &sims.data()[i * m..(i + 1) * m];
        let rank = 1 + row.iter().filter(|&&s| s > row[j]).count();
        total += 1.0 / rank as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("no query has a ground-truth match".into()));
    }
    Ok(total / count as f64)
}

/// Triangular soft histogram over similarities in `[−1, 1]` with `bins`
/// centers from 1 down to −1.
#[derive(Clone, Copy, Debug)]
struct Histogram {
    bins: usize,
    width: f64,
    smoothing: f64,
}

impl Histogram {
    fn new(cfg: ApSurrogate) -> Self {
        assert!(cfg.bins >= 2, "AP surrogate needs at least two bins");
        assert!(cfg.smoothing > 0.0 && cfg.smoothing <= 1.0, "AP smoothing must lie in (0, 1]");
        Self { bins: cfg.bins, width: 2.0 / (cfg.bins - 1) as f64, smoothing: cfg.smoothing }
    }

    /// `(bin, weight, d weight / d s)` for the two bins around `s`; the
    /// second entry is absent at the lowest center.
    fn memberships(&self, s: f64) -> impl Iterator<Item = (usize, f64, f64)> {
        let pos = ((1.0 - s) / self.width).clamp(0.0, (self.bins - 1) as f64);
        let lo = (pos.floor() as usize).min(self.bins - 1);
        let ramp = (pos - lo as f64 - 0.5) / self.smoothing + 0.5;
        let frac = ramp.clamp(0.0, 1.0);
        let slope = if ramp > 0.0 && ramp < 1.0 { 1.0 / (self.width * self.smoothing) } else { 0.0 };
        let upper = (lo + 1 < self.bins).then_some((lo + 1, frac, -slope));
        std::iter::once((lo, 1.0 - frac, slope)).chain(upper)
    }
}

/// Histogram-binned AP surrogate per query on `sims [Q, M]`, where query `i`
/// has the single relevant candidate `positives[i]`. Returns `[Q]`.
pub fn fast_ap_var(g: &Graph, sims: Var, positives: &[usize], surrogate: ApSurrogate) -> Var {
    let hist = Histogram::new(surrogate);
    let bins = hist.bins;
    let vs = g.value(sims);
    let (q, m) = (vs.dim(0), vs.dim(1));
    assert_eq!(positives.len(), q, "fast_ap: one positive per query");
    let mut ap = vec![0.0; q];
    // Per query: dAP/dh and dAP/dh⁺ per bin.
    let mut d_h = vec![0.0; q * bins];
    let mut d_hp = vec![0.0; q * bins];
    for i in 0..q {
        let row = &vs.data()[i * m..(i + 1) * m];
        let mut h = vec![0.0; bins];
        let mut hp = vec![0.0; bins];
        for (j, &s) in row.iter().enumerate() {
            for (k, w, _) in hist.memberships(s) {
                h[k] += w;
                if j == positives[i] {
                    hp[k] += w;
                }
            }
        }
        let (mut cum_h, mut cum_hp) = (vec![0.0; bins], vec![0.0; bins]);
        let (mut a, mut b) = (0.0, 0.0);
        for k in 0..bins {
            a += h[k];
            b += hp[k];
            cum_h[k] = a;
            cum_hp[k] = b;
        }
        let mut tail_a = 0.0;
        let mut tail_b = 0.0;
        for k in (0..bins).rev() {
            if cum_h[k] > 0.0 {
                ap[i] += hp[k] * cum_hp[k] / cum_h[k];
                tail_a += hp[k] * cum_hp[k] / (cum_h[k] * cum_h[k]);
                tail_b += hp[k] / cum_h[k];
            }
            d_h[i * bins + k] = -tail_a;
            d_hp[i * bins + k] = if cum_h[k] > 0.0 { cum_hp[k] / cum_h[k] } else { 0.0 } + tail_b;
        }
    }
    let positives = positives.to_vec();
    g.push(Tensor::new([q], ap), &[sims], move |grad| {
        let mut gs = Tensor::zeros([q, m]);
        for i in 0..q {
            let gi = grad.data()[i];
            for j in 0..m {
                let s = vs.data()[i * m + j];
                let mut acc = 0.0;
                for (k, _, dw) in hist.memberships(s) {
                    let mut dk = d_h[i * bins + k];
                    if j == positives[i] {
                        dk += d_hp[i * bins + k];
                    }
                    acc += dk * dw;
                }
                gs.data_mut()[i * m + j] = gi * acc;
            }
        }
        vec![(sims, gs)]
    })
}

/// `1 − mean AP` over matched descriptors, queried in both directions:
/// each matched row of `a` retrieves among all rows of `b` and vice versa.
pub fn ap_loss_var(g: &Graph, a: Var, b: Var, pairs: &[(usize, usize)], surrogate: ApSurrogate) -> Var {
    assert!(!pairs.is_empty(), "ap_loss needs at least one correspondence");
    let (ia, ib): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let qa = g.index_rows(a, &ia);
    let qb = g.index_rows(b, &ib);
    let ap_ab = fast_ap_var(g, g.matmul_t(qa, b, false, true), &ib, surrogate);
    let ap_ba = fast_ap_var(g, g.matmul_t(qb, a, false, true), &ia, surrogate);
    let mean = g.scale(g.add(g.sum(ap_ab), g.sum(ap_ba)), 0.5 / pairs.len() as f64);
    g.affine(mean, -1.0, 1.0)
}

pub fn ap_loss(a: &Tensor, b: &Tensor, pairs: &[(usize, usize)], surrogate: ApSurrogate) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("ap_loss needs at least one correspondence".into()));
    }
    let g = Graph::inference();
    Ok(g.item(ap_loss_var(&g, g.constant(a.clone()), g.constant(b.clone()), pairs, surrogate)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let t = Tensor::from_fn([n, d], |_| StandardNormal.sample(rng));
        let g = Graph::inference();
        let v = g.l2_normalize(g.constant(t));
        (*g.value(v)).clone()
    }

    #[test]
    fn single_token_attention_is_gated_value() {
        let q = Tensor::new([1, 3], vec![0.3, -1.0, 2.0]);
        let k = Tensor::new([1, 3], vec![5.0, -2.0, 0.1]);
        let v = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]);
        let out = aft_mix(&q, &k, &v);
        for c in 0..3 {
            assert!((out.data()[c] - sigmoid(q.data()[c]) * v.data()[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_keys_average_values() {
        let q = Tensor::from_fn([4, 2], |i| i as f64 * 0.1);
        let k = Tensor::full([4, 2], 0.7);
        let v = Tensor::from_fn([4, 2], |i| (i * i) as f64);
        let out = aft_mix(&q, &k, &v);
        for i in 0..4 {
            for c in 0..2 {
                let mean: f64 = (0..4).map(|j| v.data()[j * 2 + c]).sum::<f64>() / 4.0;
                assert!((out.data()[i * 2 + c] - sigmoid(q.data()[i * 2 + c]) * mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_and_plain_aft_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::from_fn([5, 4], |_| StandardNormal.sample(&mut rng)));
        let g = Graph::inference();
        let out = aft_mix_var(&g, g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        assert!(g.value(out).max_abs_diff(&aft_mix(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn zero_fuse_network_is_identity() {
        let enc = WavePositionEncoder::new("w", 4);
        let mut ps = ParamStore::new();
        enc.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(4));
        ps.zero_prefix("w.mlp_f.fc1");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = BoostInput::new(Tensor::from_fn([3, 3], |i| i as f64 * 0.2 - 0.5), unit_rows(&mut rng, 3, 4)).unwrap();
        assert_eq!(enc.encode(&ps, &input), input.descriptors);
    }

    #[test]
    fn exact_ap_examples() {
        let id = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(average_precision(&id, &id, &[Some(0), Some(1)]).unwrap(), 1.0);
        let q = Tensor::new([1, 2], vec![1.0, 0.0]);
        let c = Tensor::new([3, 2], vec![0.9, 0.1, 0.8, 0.2, -1.0, 0.0]);
        assert_eq!(average_precision(&q, &c, &[Some(1)]).unwrap(), 0.5);
        assert!(average_precision(&q, &c, &[None]).is_err());
    }

    #[test]
    fn well_separated_matches_have_small_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = unit_rows(&mut rng, 6, 16);
        let pairs: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
        let loss = ap_loss(&a, &a, &pairs, ApSurrogate::default()).unwrap();
        assert!((0.0..=0.05).contains(&loss), "{loss}");
    }

    #[test]
    fn ap_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = unit_rows(&mut rng, 5, 6);
        let b = unit_rows(&mut rng, 7, 6);
        let pairs = [(0, 2), (1, 0), (3, 5), (4, 4)];
        let report = check_gradients(&[a, b], |g, v| {
            ap_loss_var(g, g.l2_normalize(v[0]), g.l2_normalize(v[1]), &pairs, ApSurrogate::default())
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
