//! Domain-adaptation supervision: linear-kernel MMD between pooled source and
//! target features, plus an adversarial domain classifier behind a gradient
//! reversal layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Linear, LINEAR_GAIN, RELU_GAIN};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Probability clamp applied before the logarithms of the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_MMD_WEIGHT: f64 = 0.01;
pub const CLASSIFIER_WIDTHS: [usize; 2] = [512, 128];

/// Label of source-domain items.
pub const SOURCE: f64 = 0.0;
/// Label of target-domain items.
pub const TARGET: f64 = 1.0;

/// Pooled source and target features with their domain labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub source: Tensor,
    pub target: Tensor,
}

impl DomainBatch {
    pub fn new(source: Tensor, target: Tensor) -> Result<Self> {
        if source.rank() != 2 || target.rank() != 2 || source.dim(1) != target.dim(1) {
            return Err(Error::Dimension(format!(
                "domain batch needs [Ns, dim] and [Nt, dim], got {:?} and {:?}",
                source.shape(),
                target.shape()
            )));
        }
        if source.dim(0) == 0 || target.dim(0) == 0 {
            return Err(Error::Empty("both domains need at least one item".into()));
        }
        Ok(Self { source, target })
    }

    /// Source rows followed by target rows.
    pub fn stacked(&self) -> Tensor {
        let mut data = self.source.data().to_vec();
        data.extend_from_slice(self.target.data());
        Tensor::new([self.len(), self.source.dim(1)], data)
    }

    pub fn labels(&self) -> Vec<f64> {
        let mut l = vec![SOURCE; self.source.dim(0)];
        l.extend(std::iter::repeat_n(TARGET, self.target.dim(0)));
        l
    }

    pub fn len(&self) -> usize {
        self.source.dim(0) + self.target.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Global average pooling of a `[C, H, W]` map to a `C`-vector.
pub fn pool_features(map: &Tensor) -> Result<Vec<f64>> {
    if map.rank() != 3 || map.dim(1) * map.dim(2) == 0 {
        return Err(Error::Dimension(format!("pool_features needs a non-empty [C, H, W] map, got {:?}", map.shape())));
    }
    let hw = map.dim(1) * map.dim(2);
    Ok(map.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect())
}

/// `‖mean(xs) − mean(xt)‖₂` for `xs [Ns, D]`, `xt [Nt, D]`.
pub fn mmd_var(g: &Graph, xs: Var, xt: Var) -> Var {
    let ms = g.scale(g.sum_cols(xs), 1.0 / g.shape(xs)[0] as f64);
    let mt = g.scale(g.sum_cols(xt), 1.0 / g.shape(xt)[0] as f64);
    let d = g.sub(ms, mt);
    let dim = g.shape(d)[0];
    g.reshape(g.norm_rows(g.reshape(d, &[1, dim])), &[])
}

pub fn mmd_loss(xs: &Tensor, xt: &Tensor) -> Result<f64> {
    let batch = DomainBatch::new(xs.clone(), xt.clone())?;
    let g = Graph::inference();
    Ok(g.item(mmd_var(&g, g.constant(batch.source), g.constant(batch.target))))
}

/// Mean binary cross-entropy of `scores [N]` (probability of target) against
/// `labels`, with scores clamped to `[ε, 1 − ε]`.
pub fn adversarial_var(g: &Graph, scores: Var, labels: &[f64]) -> Var {
    let n = labels.len();
    assert_eq!(g.shape(scores), vec![n], "adversarial loss: one score per label");
    let s = g.clamp(scores, PROB_EPS, 1.0 - PROB_EPS);
    let l = g.constant(Tensor::new([n], labels.to_vec()));
    let not_l = g.constant(Tensor::new([n], labels.iter().map(|l| 1.0 - l).collect()));
    let pos = g.mul(l, g.ln(s));
    let neg = g.mul(not_l, g.ln(g.affine(s, -1.0, 1.0)));
    g.scale(g.sum(g.add(pos, neg)), -1.0 / n as f64)
}

pub fn adversarial_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let g = Graph::inference();
    Ok(g.item(adversarial_var(&g, g.constant(Tensor::new([scores.len()], scores.to_vec())), labels)))
}

/// `L_adv + λ · L_mmd`; also returns the two components.
pub fn da_var(g: &Graph, xs: Var, xt: Var, scores: Var, labels: &[f64], lambda: f64) -> (Var, Var, Var) {
    let adv = adversarial_var(g, scores, labels);
    let mmd = mmd_var(g, xs, xt);
    (g.add(adv, g.scale(mmd, lambda)), adv, mmd)
}

/// MLP `dim → 512 → 128 → 1` with ReLUs and a sigmoid output, fed through a
/// gradient reversal layer.
#[derive(Clone, Debug)]
pub struct DomainClassifier {
    pub layers: [Linear; 3],
    pub reversal_scale: f64,
}

impl DomainClassifier {
    pub fn new(prefix: &str, dim: usize) -> Self {
        let [h0, h1] = CLASSIFIER_WIDTHS;
        Self {
            layers: [
                Linear::new(&format!("{prefix}.fc0"), dim, h0),
                Linear::new(&format!("{prefix}.fc1"), h0, h1),
                Linear::new(&format!("{prefix}.fc2"), h1, 1),
            ],
            reversal_scale: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_features
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) {
        self.layers[0].init(ps, rng, RELU_GAIN);
        self.layers[1].init(ps, rng, RELU_GAIN);
        self.layers[2].init(ps, rng, LINEAR_GAIN);
    }

    /// `x [B, dim] -> logits [B]`.
    pub fn logits_var(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let b = g.shape(x)[0];
        let mut h = g.gradient_reversal(x, self.reversal_scale);
        h = g.relu(self.layers[0].forward(g, ps, h));
        h = g.relu(self.layers[1].forward(g, ps, h));
        g.reshape(self.layers[2].forward(g, ps, h), &[b])
    }

    /// `x [B, dim] -> scores [B]`.
    pub fn forward_var(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        g.sigmoid(self.logits_var(g, ps, x))
    }

    pub fn classify(&self, ps: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        if x.rank() != 2 || x.dim(1) != self.input_dim() {
            return Err(Error::Dimension(format!(
                "domain classifier expects [B, {}], got {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        let g = Graph::inference();
        let s = self.forward_var(&g, ps, g.constant(x.clone()));
        Ok(g.value(s).data().to_vec())
    }
}

/// Fraction of items whose thresholded score (`> 0.5` means target) agrees
/// with the label.
pub fn classifier_accuracy(scores: &[f64], labels: &[f64]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(s, l)| (**s > 0.5) == (**l > 0.5)).count();
    hits as f64 / scores.len().max(1) as f64
}

/// Feature map the domain branch reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainFeatureSource {
    /// Deepest encoder level.
    #[default]
    F4,
    /// Aggregated multi-scale map.
    Aggregated,
}

/// The full branch: 1×1 projection to `dim`, global average pooling, and the
/// classifier.
#[derive(Clone, Debug)]
pub struct DomainBranch {
    pub projection: Conv2d,
    pub classifier: DomainClassifier,
    pub source: DomainFeatureSource,
}

impl DomainBranch {
    pub const PREFIX: &'static str = "da";

    pub fn new(in_channels: usize, dim: usize, source: DomainFeatureSource) -> Self {
        Self {
            projection: Conv2d::new("da.proj", in_channels, dim, 1, true),
            classifier: DomainClassifier::new("da.classifier", dim),
            source,
        }
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) {
        self.projection.init(ps, rng, LINEAR_GAIN);
        self.classifier.init(ps, rng);
    }

    /// Pooled `[1, dim]` feature of one `[C, h, w]` map.
    pub fn pooled_var(&self, g: &Graph, ps: &ParamStore, map: Var) -> Var {
        let p = self.projection.forward(g, ps, map);
        let dim = self.projection.out_channels;
        g.reshape(g.global_avg_pool(p), &[1, dim])
    }

    pub fn pooled(&self, ps: &ParamStore, map: &Tensor) -> Vec<f64> {
        let g = Graph::inference();
        let v = self.pooled_var(&g, ps, g.constant(map.clone()));
        g.value(v).data().to_vec()
    }
}
