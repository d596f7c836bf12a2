//! Training loop: warmup schedule, gradient accumulation, checkpoints, and
//! bitwise-deterministic resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::booster::ap_loss_var;
use crate::checkpoint::{Checkpoint, PendingGradient};
use crate::data::{load_external_pairs, synth_corpus, SynthConfig, TrainSample};
use crate::domain::{classifier_accuracy, da_var, DEFAULT_MMD_WEIGHT};
use crate::error::{Error, Result};
use crate::eval::{mean_curve, mma_curve, mutual_nn, MatchFilter, MmaCurve};
use crate::geometry::{build_correspondences, Point, DEFAULT_TH_GT};
use crate::graph::{Graph, Var};
use crate::keypoint::{keypoints_from_vars, DetectorConfig};
use crate::model::{ModelConfig, Rada};
use crate::optim::{lr_schedule, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::supervision::{pair_losses_var, total_loss, ImageVars, LossComponents, LossReport, LossWeights, NreForm, SupervisionConfig, DEFAULT_T_DES};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic pairs generated when no manifest is given.
    pub pairs: usize,
    pub seed: u64,
    /// Pose+depth manifest; replaces the synthetic corpus.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Synthetic pairs held out for the domain-classifier check.
    pub heldout_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { pairs: 20, seed: 0, manifest: None, synth: SynthConfig::default(), heldout_pairs: 10 }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Vec<TrainSample>> {
        match &self.manifest {
            Some(m) => {
                let ext = load_external_pairs(m, self.synth.min_overlap)?;
                for s in &ext.skipped {
                    warn!("skipped manifest entry: {s}");
                }
                Ok(ext.samples)
            }
            None => Ok(synth_corpus(self.seed, self.pairs, &self.synth)),
        }
    }

    /// Synthetic pairs disjoint from the training corpus.
    pub fn heldout(&self) -> Vec<TrainSample> {
        synth_corpus(self.seed.wrapping_add(HELDOUT_SEED_OFFSET), self.heldout_pairs, &self.synth)
    }
}

const HELDOUT_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate_peak: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub accumulation_batches: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub t_des: f64,
    pub lambda_mmd: f64,
    pub keypoint_radius: usize,
    pub th_gt: f64,
    pub top_k: usize,
    /// Extraction threshold on the score map.
    pub score_threshold: f64,
    /// Threshold used when picking keypoints for the losses. No term pins the
    /// absolute score level, so a positive value can starve training.
    pub train_score_threshold: f64,
    pub softargmax_temperature: f64,
    pub nre_form: NreForm,
    pub coupling_prefactor: bool,
    /// Write a checkpoint every this many optimizer updates; `0` disables.
    pub checkpoint_every: u64,
    pub optimizer: AdamConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let det = DetectorConfig::default();
        Self {
            learning_rate_peak: 3e-3,
            warmup_steps: 500,
            batch_size: 2,
            accumulation_batches: 16,
            max_steps: 20_000,
            seed: 0,
            loss_weights: LossWeights::default(),
            t_des: DEFAULT_T_DES,
            lambda_mmd: DEFAULT_MMD_WEIGHT,
            keypoint_radius: det.radius,
            th_gt: DEFAULT_TH_GT,
            top_k: det.top_k,
            score_threshold: det.score_threshold,
            train_score_threshold: 0.0,
            softargmax_temperature: det.temperature,
            nre_form: NreForm::default(),
            coupling_prefactor: true,
            checkpoint_every: 0,
            optimizer: AdamConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate_peak", self.learning_rate_peak),
            ("batch_size", self.batch_size as f64),
            ("accumulation_batches", self.accumulation_batches as f64),
            ("t_des", self.t_des),
            ("th_gt", self.th_gt),
            ("model.dim", self.model.dim as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_mmd >= 0.0) {
            return Err(Error::Config(format!("lambda_mmd must be non-negative, got {}", self.lambda_mmd)));
        }
        self.loss_weights.validate()?;
        self.detector().validate()?;
        self.train_detector().validate()
    }

    /// Reduced-resolution setting of the overfitting smoke run: 20 synthetic
    /// 64×64 pairs, 64-dim descriptors, no accumulation, 2000 updates.
    pub fn smoke() -> Self {
        let mut c = Self {
            accumulation_batches: 1,
            warmup_steps: 100,
            max_steps: 2000,
            ..Self::default()
        };
        c.model.dim = 64;
        c.data.pairs = 20;
        c.data.synth.size = 64;
        c
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            radius: self.keypoint_radius,
            top_k: self.top_k,
            score_threshold: self.score_threshold,
            temperature: self.softargmax_temperature,
        }
    }

    /// Detector used inside training and for training-pair MMA.
    pub fn train_detector(&self) -> DetectorConfig {
        DetectorConfig { score_threshold: self.train_score_threshold, ..self.detector() }
    }

    pub fn supervision(&self) -> SupervisionConfig {
        SupervisionConfig { t_des: self.t_des, nre_form: self.nre_form, coupling_prefactor: self.coupling_prefactor }
    }

    /// SHA-256 of the configuration with `max_steps` and `checkpoint_every`
    /// cleared, so a run can be extended or re-chunked without a mismatch.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.max_steps = 0;
        c.checkpoint_every = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Gradients and loss report of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub grads: BTreeMap<String, Tensor>,
    pub report: LossReport,
    /// Pairs without correspondences.
    pub starved: usize,
}

/// Result of feeding one batch to [`Trainer::train_step`].
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Set when this batch closed an accumulation window.
    pub update: Option<UpdateSummary>,
}

/// Mean loss report over one accumulation window.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateSummary {
    pub step: u64,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
}

impl UpdateSummary {
    pub fn total(&self) -> f64 {
        self.losses["total"]
    }

    /// `step=<k> name=<loss> value=<v>` lines.
    pub fn metric_lines(&self) -> Vec<String> {
        self.losses.iter().map(|(n, v)| format!("step={} name={n} value={v}", self.step)).collect()
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Rada,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Optimizer updates applied.
    pub step: u64,
    /// Batches consumed.
    pub batches: u64,
    /// Pairs without correspondences so far.
    pub starved_pairs: u64,
    pending: PendingGradient,
    pending_losses: BTreeMap<String, f64>,
    corpus: Vec<TrainSample>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: Vec<TrainSample>) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::Empty("training corpus".into()));
        }
        let model = Rada::new(config.model);
        let params = model.init(config.seed);
        Ok(Self {
            optimizer: Adam::new(config.optimizer),
            model,
            params,
            step: 0,
            batches: 0,
            starved_pairs: 0,
            pending: PendingGradient::default(),
            pending_losses: BTreeMap::new(),
            corpus,
            config,
        })
    }

    /// Continues from `ckpt`. Refuses a checkpoint written under a different
    /// configuration unless `allow_mismatch` is set.
    pub fn resume(config: TrainConfig, corpus: Vec<TrainSample>, ckpt: Checkpoint, allow_mismatch: bool) -> Result<Self> {
        ckpt.check_fingerprint(&config.fingerprint(), allow_mismatch)?;
        let mut t = Self::new(config, corpus)?;
        t.params.load_from(&ckpt.params)?;
        t.optimizer = ckpt.optimizer;
        t.optimizer.config = t.config.optimizer;
        t.step = ckpt.step;
        t.batches = ckpt.batches;
        t.pending = ckpt.pending;
        t.pending_losses = ckpt.pending_losses;
        t.starved_pairs = ckpt.starved_pairs;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            batches: self.batches,
            fingerprint: self.config.fingerprint(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            pending: self.pending.clone(),
            pending_losses: self.pending_losses.clone(),
            starved_pairs: self.starved_pairs,
        }
    }

    pub fn corpus(&self) -> &[TrainSample] {
        &self.corpus
    }

    /// Corpus indices of batch `k`. The corpus is reshuffled every epoch
    /// from `(seed, epoch)`, so the order depends only on the batch index.
    pub fn batch_indices(&self, k: u64) -> Vec<usize> {
        let n = self.corpus.len() as u64;
        let bs = self.config.batch_size as u64;
        let mut perm_epoch = u64::MAX;
        let mut perm: Vec<usize> = Vec::new();
        (k * bs..(k + 1) * bs)
            .map(|pos| {
                let epoch = pos / n;
                if epoch != perm_epoch {
                    perm = (0..n as usize).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    perm.shuffle(&mut rng);
                    perm_epoch = epoch;
                }
                perm[(pos % n) as usize]
            })
            .collect()
    }

    /// Forward and backward pass over one batch at the current parameters.
    pub fn batch_gradients(&self, batch: &[&TrainSample]) -> Result<BatchGradients> {
        compute_batch(&self.model, &self.params, &self.config, batch)
    }

    /// Consumes one batch; applies an optimizer update when the
    /// accumulation window is full.
    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<StepOutcome> {
        let bg = self.batch_gradients(batch)?;
        for (name, g) in &bg.grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteLoss(format!("gradient of {name}")));
            }
        }
        self.batches += 1;
        self.starved_pairs += bg.starved as u64;
        if bg.starved > 0 {
            warn!("batch {}: {} pair(s) without correspondences ({} so far)", self.batches, bg.starved, self.starved_pairs);
        }
        for (name, g) in bg.grads {
            match self.pending.sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.pending.sum.insert(name, g);
                }
            }
        }
        self.pending.batches += 1;
        for (name, v) in report_entries(&bg.report) {
            *self.pending_losses.entry(name).or_insert(0.0) += v;
        }
        let update = if self.pending.batches as usize >= self.config.accumulation_batches {
            Some(self.apply_update()?)
        } else {
            None
        };
        Ok(StepOutcome { report: bg.report, update })
    }

    fn apply_update(&mut self) -> Result<UpdateSummary> {
        let pending = std::mem::take(&mut self.pending);
        let k = pending.batches as f64;
        let grads: BTreeMap<String, Tensor> = pending.sum.into_iter().map(|(n, g)| (n, g.scale(1.0 / k))).collect();
        let lr = lr_schedule(self.step, self.config.learning_rate_peak, self.config.warmup_steps);
        self.optimizer.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        let losses = std::mem::take(&mut self.pending_losses).into_iter().map(|(n, v)| (n, v / k)).collect();
        Ok(UpdateSummary { step: self.step, lr, losses })
    }

    /// Trains until `max_steps` updates, writing metric lines to `metrics`
    /// and checkpoints to `checkpoint_dir` when configured. Returns the
    /// summary of every update made.
    pub fn run(&mut self, metrics: &mut dyn Write, checkpoint_dir: Option<&Path>) -> Result<Vec<UpdateSummary>> {
        self.run_until(self.config.max_steps, metrics, checkpoint_dir)
    }

    pub fn run_until(&mut self, max_steps: u64, metrics: &mut dyn Write, checkpoint_dir: Option<&Path>) -> Result<Vec<UpdateSummary>> {
        let mut summaries = Vec::new();
        while self.step < max_steps {
            let idx = self.batch_indices(self.batches);
            let corpus = std::mem::take(&mut self.corpus);
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &corpus[i]).collect();
            let out = self.train_step(&batch);
            self.corpus = corpus;
            let Some(u) = out?.update else { continue };
            for line in u.metric_lines() {
                writeln!(metrics, "{line}").map_err(|e| Error::io(Path::new("<metrics>"), e))?;
            }
            if u.step % 50 == 0 || u.step == max_steps {
                info!("step {} lr {:.2e} total {:.4}", u.step, u.lr, u.total());
            }
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if (every > 0 && u.step % every == 0) || u.step == max_steps {
                    self.checkpoint().save(&dir.join(format!("step_{:06}.ckpt", u.step)))?;
                }
            }
            summaries.push(u);
        }
        Ok(summaries)
    }

    /// Training-pair quality: mean MMA curve with mutual-NN matching.
    pub fn training_mma(&self) -> Result<MmaCurve> {
        evaluate_pairs(&self.model, &self.params, &self.config.train_detector(), &self.corpus)
    }

    /// Domain-classifier accuracy on held-out pairs, image A labelled
    /// source and image B target.
    pub fn heldout_domain_accuracy(&self, heldout: &[TrainSample]) -> Result<f64> {
        domain_accuracy(&self.model, &self.params, heldout)
    }
}

fn report_entries(r: &LossReport) -> impl Iterator<Item = (String, f64)> + '_ {
    r.components.iter().map(|(n, v)| (n.clone(), *v)).chain(std::iter::once(("total".to_string(), r.total)))
}

fn image_vars(out: &crate::model::ImageOutputs) -> ImageVars {
    ImageVars {
        positions: out.detection.positions,
        scores: out.detection.scores,
        descriptors: out.descriptors,
        score_map: out.maps.score,
        descriptor_map: out.maps.descriptors,
    }
}

fn positions(g: &Graph, out: &crate::model::ImageOutputs) -> Vec<Point> {
    keypoints_from_vars(g, &out.detection).iter().map(|k| k.position()).collect()
}

/// Mean-reduced losses and gradients of one batch. Pairs without
/// correspondences add zero to the detector, descriptor, coupling, and
/// booster terms and are counted as starved.
pub fn compute_batch(model: &Rada, params: &ParamStore, cfg: &TrainConfig, batch: &[&TrainSample]) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let g = Graph::new();
    let det_cfg = cfg.train_detector();
    let sup = cfg.supervision();
    let mut sums: [Vec<Var>; 4] = Default::default();
    let (mut source, mut target) = (Vec::new(), Vec::new());
    let mut starved = 0;
    for s in batch {
        let (ha, wa) = (s.image_a.height(), s.image_a.width());
        let (hb, wb) = (s.image_b.height(), s.image_b.width());
        let oa = model.forward_image_var(&g, params, &s.image_a, &det_cfg);
        let ob = model.forward_image_var(&g, params, &s.image_b, &det_cfg);
        if model.config.use_domain_adaptation {
            for (o, label) in [(&oa, s.domain_labels.0), (&ob, s.domain_labels.1)] {
                let f = model.domain_feature_var(&g, params, o);
                if label == 0 { source.push(f) } else { target.push(f) }
            }
        }
        let corr = build_correspondences(&positions(&g, &oa), &positions(&g, &ob), &s.spec, cfg.th_gt);
        let (va, vb) = (image_vars(&oa), image_vars(&ob));
        let Some(pair) = pair_losses_var(&g, &va, &vb, &corr, &s.spec, &sup) else {
            starved += 1;
            continue;
        };
        sums[0].push(pair.det);
        sums[1].push(pair.des);
        sums[2].push(pair.cp);
        if model.config.use_booster {
            let ba = model.boost_var(&g, params, &oa, ha, wa);
            let bb = model.boost_var(&g, params, &ob, hb, wb);
            sums[3].push(ap_loss_var(&g, ba, bb, &corr.index_pairs(), model.config.booster.ap_surrogate()));
        }
    }
    let n = batch.len() as f64;
    let mean = |vs: &[Var]| -> Option<Var> {
        let first = *vs.first()?;
        let s = vs[1..].iter().fold(first, |acc, &v| g.add(acc, v));
        Some(g.scale(g.reshape(s, &[]), 1.0 / n))
    };
    let [det, des, cp, tr] = sums.each_ref().map(|v| mean(v));
    let da = if !source.is_empty() && !target.is_empty() {
        let xs = g.concat(&source, 0);
        let xt = g.concat(&target, 0);
        let labels: Vec<f64> = std::iter::repeat(crate::domain::SOURCE)
            .take(source.len())
            .chain(std::iter::repeat(crate::domain::TARGET).take(target.len()))
            .collect();
        let scores = model.domain.classifier.forward_var(&g, params, g.concat(&[xs, xt], 0));
        Some(da_var(&g, xs, xt, scores, &labels, cfg.lambda_mmd).0)
    } else {
        None
    };
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.item(v));
    let components = LossComponents { da: value(da), tr: value(tr), det: value(det), des: value(des), cp: value(cp) };
    let report = total_loss(&components, &cfg.loss_weights, cfg.t_des)?;
    let w = cfg.loss_weights;
    let terms: Vec<Var> = [(da, w.da), (tr, w.tr), (det, w.det), (des, w.des), (cp, w.cp)]
        .into_iter()
        .filter_map(|(v, w)| v.map(|v| g.scale(v, w)))
        .collect();
    let grads = match terms.split_first() {
        Some((&first, rest)) => {
            let total = rest.iter().fold(first, |acc, &v| g.add(acc, v));
            g.backward(total).params(&g)
        }
        None => BTreeMap::new(),
    };
    Ok(BatchGradients { grads, report, starved })
}

/// Mean MMA curve over `pairs` with plain mutual-NN matching.
pub fn evaluate_pairs(model: &Rada, params: &ParamStore, detector: &DetectorConfig, pairs: &[TrainSample]) -> Result<MmaCurve> {
    let mut curves = Vec::with_capacity(pairs.len());
    for s in pairs {
        let fa = model.extract(params, &s.image_a, detector)?;
        let fb = model.extract(params, &s.image_b, detector)?;
        let m = mutual_nn(&fa.descriptors, &fb.descriptors, MatchFilter::None)?;
        curves.push(mma_curve(&fa, &fb, &m, &s.spec));
    }
    mean_curve(&curves).ok_or_else(|| Error::Empty("evaluation pairs".into()))
}

/// Domain-classifier accuracy over both images of every pair.
pub fn domain_accuracy(model: &Rada, params: &ParamStore, pairs: &[TrainSample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("held-out pairs".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for s in pairs {
        images.push(&s.image_a);
        images.push(&s.image_b);
        labels.push(s.domain_labels.0 as f64);
        labels.push(s.domain_labels.1 as f64);
    }
    let feats = model.domain_features(params, &images);
    let scores = model.domain.classifier.classify(params, &feats)?;
    Ok(classifier_accuracy(&scores, &labels))
}

#[derive(Clone, Debug)]
pub struct SmokeReport {
    /// Mean total loss over the update windows, by update index.
    pub loss_curve: Vec<f64>,
    pub final_report: Option<UpdateSummary>,
    pub mma: MmaCurve,
    pub heldout_domain_accuracy: f64,
    pub starved_pairs: u64,
}

impl SmokeReport {
    pub fn mma3(&self) -> f64 {
        self.mma.mma3()
    }

    /// Total loss after update `step` (1-based).
    pub fn loss_at(&self, step: usize) -> Option<f64> {
        self.loss_curve.get(step.checked_sub(1)?).copied()
    }
}

/// Trains on `corpus` for `budget` optimizer updates and reports the
/// training-pair MMA and the held-out domain accuracy. A zero budget
/// reports the untrained network.
pub fn overfit_smoke(config: TrainConfig, corpus: Vec<TrainSample>, heldout: &[TrainSample], budget: u64) -> Result<SmokeReport> {
    let mut trainer = Trainer::new(config, corpus)?;
    let summaries = trainer.run_until(budget, &mut std::io::sink(), None)?;
    Ok(SmokeReport {
        loss_curve: summaries.iter().map(UpdateSummary::total).collect(),
        final_report: summaries.last().cloned(),
        mma: trainer.training_mma()?,
        heldout_domain_accuracy: trainer.heldout_domain_accuracy(heldout)?,
        starved_pairs: trainer.starved_pairs,
    })
}
