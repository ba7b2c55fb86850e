//! Supervised pretraining, the two-step consistency loop and the curriculum
//! driver.
//!
//! Each consistency step first solves the threshold `gamma` so that the
//! certain fraction of target pixels equals their consistent fraction, then
//! takes one gradient step that increases consistency on the certain pixels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, ColorParams, ViewPlan};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossWeights};
use crate::metrics::{pixel_records, PixelRecord};
use crate::model::{
    self, downsample_labels, one_hot, prototypes_from_rows, Bound, ModelConfig, ModelState,
    Params, DOWNSAMPLE,
};
use crate::resample::Region;
use crate::rng::{self, ChaCha8Rng};
use crate::synth::{stack, Dataset};
use crate::tensor::Tensor;
use crate::uncertainty::{self, best_classes, Mask, MaskPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// No consistency training at all.
    NoSsl,
    /// Source images stand in for the unlabelled stream.
    NoTarget,
    /// Every pixel counts as certain.
    GammaNegInf,
    /// Head branch for both views.
    SymParam,
    /// Prototype branch for both views.
    SymNonparam,
    /// Uniformity and prototype losses switched off.
    NoRegLosses,
    /// Two dropout forwards of the same crop replace the augmented views.
    McdSsl,
    /// Continuous certainty weights replace the binary mask.
    SoftMask,
    /// One threshold per class.
    PerClassGamma,
}

impl Ablation {
    pub const ALL: [Ablation; 10] = [
        Self::None,
        Self::NoSsl,
        Self::NoTarget,
        Self::GammaNegInf,
        Self::SymParam,
        Self::SymNonparam,
        Self::NoRegLosses,
        Self::McdSsl,
        Self::SoftMask,
        Self::PerClassGamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::NoSsl => "no_ssl",
            Self::NoTarget => "no_target",
            Self::GammaNegInf => "gamma_neg_inf",
            Self::SymParam => "sym_param",
            Self::SymNonparam => "sym_nonparam",
            Self::NoRegLosses => "no_reg_losses",
            Self::McdSsl => "mcd_ssl",
            Self::SoftMask => "soft_mask",
            Self::PerClassGamma => "per_class_gamma",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub steps_pretrain: usize,
    /// Consistency steps per curriculum stage.
    pub steps_ssl: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Labelled images that define the prototypes at each step.
    pub prototype_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate of the consistency phase; `None` reuses `lr`.
    pub lr_ssl: Option<f64>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub dropout_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            steps_pretrain: 500,
            steps_ssl: 500,
            batch_source: 4,
            batch_target: 4,
            prototype_batch: 4,
            lr: 0.01,
            momentum: 0.9,
            lr_ssl: None,
            grad_clip: Some(5.0),
            weights: LossWeights::default(),
            ablation: Ablation::None,
            dropout_p: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if self.augment.crop.iter().any(|c| c % DOWNSAMPLE != 0) {
            return Err(Error::InvalidArgument(format!(
                "crop {:?} must be a multiple of {DOWNSAMPLE}",
                self.augment.crop
            )));
        }
        if self.batch_source == 0 || self.batch_target == 0 || self.prototype_batch == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        let lrs = [Some(self.lr), self.lr_ssl];
        if lrs.iter().flatten().any(|lr| !(*lr >= 0.0 && lr.is_finite()))
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::InvalidArgument(format!(
                "bad optimiser settings lr={} momentum={}",
                self.lr, self.momentum
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!("bad dropout {}", self.dropout_p)));
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &Params, lr: f64, momentum: f64) -> Self {
        let velocity = params
            .named()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            lr,
            momentum,
            velocity,
        }
    }

    /// `v <- mu v + g; p <- p - lr v`.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) {
        for ((p, v), g) in params.tensors_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

fn collect_grads(g: &Graph, bound: &Bound, state: &ModelState, clip: Option<f64>) -> Vec<Tensor> {
    let mut grads: Vec<Tensor> = bound
        .vars()
        .iter()
        .zip(state.params.named())
        .map(|(&v, (_, t))| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    if let Some(max_norm) = clip {
        let norm = libm::sqrt(grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum());
        if norm > max_norm {
            let s = max_norm / norm;
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    grads
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// `0` for pretraining, `s` for curriculum stage `s`.
    pub stage: usize,
    /// Global step counter across all phases.
    pub step: u64,
    pub l_c: f64,
    pub l_u: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub total: f64,
    pub n_certain: usize,
    pub gamma: Option<f64>,
    pub p_consistent: Option<f64>,
    /// Largest fraction of target pixels assigned to one class.
    pub dominant_fraction: Option<f64>,
    /// Set when the step was skipped for lack of prototypes.
    pub skipped: bool,
}

impl LogEntry {
    fn from_report(stage: usize, step: u64, r: &LossReport) -> Self {
        Self {
            stage,
            step,
            l_c: r.l_c,
            l_u: r.l_u,
            l_p: r.l_p,
            l_s: r.l_s,
            total: r.total,
            n_certain: r.n_certain,
            gamma: None,
            p_consistent: None,
            dominant_fraction: None,
            skipped: false,
        }
    }
}

/// An augmented labelled batch.
struct SourceBatch {
    images: Tensor,
    labels: Vec<i32>,
}

fn sample_source(
    rng: &mut ChaCha8Rng,
    source: &Dataset,
    n: usize,
    cfg: &AugmentConfig,
) -> Result<SourceBatch> {
    let [h, w] = source.spec.extent;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n * cfg.crop[0] * cfg.crop[1]);
    for _ in 0..n {
        let i = rng.random_range(0..source.len());
        let plan = augment::sample_view_plan(rng.random(), h, w, cfg)?;
        let map = &source.labels.as_ref().ok_or(Error::Empty("source labels"))?[i];
        let (img, lab) = augment::render_source(&source.images[i], map, &plan)?;
        images.push(img);
        labels.extend(lab);
    }
    Ok(SourceBatch {
        images: stack(images.iter())?,
        labels,
    })
}

/// `[F, M]` embedding rows of `[N, F, h, w]` in `N, h, w` order.
fn embedding_columns(g: &mut Graph, z: Var) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let cols = g.permute(z, &[1, 0, 2, 3])?;
    g.reshape(cols, &[s[1], s[0] * s[2] * s[3]])
}

/// Labels of an augmented batch at embedding resolution.
fn low_res_labels(labels: &[i32], n: usize, h: usize, w: usize) -> Vec<i32> {
    labels
        .chunks(h * w)
        .take(n)
        .flat_map(|m| downsample_labels(m, h, w, h / DOWNSAMPLE, w / DOWNSAMPLE))
        .collect()
}

fn check_finite(stage: usize, step: u64, report: [f64; 4]) -> Result<()> {
    for (name, v) in ["l_c", "l_u", "l_p", "l_s"].into_iter().zip(report) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "stage {stage} step {step}: {name} = {v}"
            )));
        }
    }
    Ok(())
}

/// One supervised step on `lambda_s L_s + lambda_u L_u`, with the
/// uniformity loss on source embeddings. Also refreshes the prototype bank.
pub fn pretrain_step(
    state: &mut ModelState,
    source: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    opt: &mut Sgd,
) -> Result<LossReport> {
    let batch = sample_source(rng, source, cfg.batch_source, &cfg.augment)?;
    let [ch, cw] = cfg.augment.crop;
    let mut g = Graph::new();
    let b = state.bind(&mut g, true);
    let x = g.constant(batch.images);
    let features = state.encode(&mut g, &b, x, None)?;
    let logits = state.head(&mut g, &b, features, false)?;
    let probs = model::segment_probs_graph(&mut g, logits, state.config.head_tau, ch, cw)?;
    let sup = losses::supervised(&mut g, probs, &batch.labels)?;
    let z = state.project(&mut g, &b, features)?;
    let l_u = losses::uniformity(&mut g, z)?;
    let ls_w = g.scale(sup.loss, cfg.weights.supervised);
    let lu_w = g.scale(l_u, cfg.weights.uniformity);
    let total = g.add(ls_w, lu_w)?;
    let values = [0.0, g.value(l_u).data()[0], 0.0, g.value(sup.loss).data()[0]];
    check_finite(0, state.step, values)?;
    g.backward(total)?;

    let n = cfg.batch_source.min(cfg.prototype_batch);
    let cols = embedding_columns(&mut g, z)?;
    let rows = g.transpose(cols)?;
    let rows_value = g.value(rows).clone();
    let f = state.config.feature_dim;
    let m = n * (ch / DOWNSAMPLE) * (cw / DOWNSAMPLE);
    let rows_value = Tensor::new([m, f], rows_value.data()[..m * f].to_vec())?;
    let y = one_hot(&low_res_labels(&batch.labels, n, ch, cw), state.config.num_classes);
    state.bank = state.bank.compute(&rows_value, &y)?;

    let grads = collect_grads(&g, &b, state, cfg.grad_clip);
    opt.step(&mut state.params, &grads);
    state.step += 1;
    losses::total_loss(values, cfg.weights, 0)
}

/// Result of a consistency step.
#[derive(Debug, Clone, PartialEq)]
pub struct SslOutcome {
    pub report: LossReport,
    /// `None` when the step was skipped.
    pub masks: Option<MaskPair>,
    pub gamma: Option<f64>,
    pub dominant_fraction: Option<f64>,
}

/// Which branch scores a view.
#[derive(Clone, Copy, PartialEq)]
enum Branch {
    Head,
    Prototype,
}

fn branches(ablation: Ablation) -> (Branch, Branch) {
    match ablation {
        Ablation::SymParam => (Branch::Head, Branch::Head),
        Ablation::SymNonparam => (Branch::Prototype, Branch::Prototype),
        _ => (Branch::Head, Branch::Prototype),
    }
}

/// Per-image plans and the two stacked views of a target batch.
fn target_views(
    rng: &mut ChaCha8Rng,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Vec<ViewPlan>, Tensor, Tensor)> {
    let [h, w] = target.spec.extent;
    let (mut plans, mut first, mut second) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch_target {
        let i = rng.random_range(0..target.len());
        let mut plan = augment::sample_view_plan(rng.random(), h, w, &cfg.augment)?;
        if cfg.ablation == Ablation::McdSsl {
            plan.local = Region::full(plan.global.height, plan.global.width);
            plan.colors = [ColorParams::IDENTITY; 2];
        }
        let (a, b) = augment::render_views(&target.images[i], &plan)?;
        plans.push(plan);
        first.push(a);
        second.push(b);
    }
    Ok((plans, stack(first.iter())?, stack(second.iter())?))
}

/// Raw low-resolution scores of one branch.
fn branch_scores(
    g: &mut Graph,
    state: &ModelState,
    b: &Bound,
    branch: Branch,
    features: Var,
    protos: Var,
) -> Result<(Var, Option<Var>)> {
    match branch {
        Branch::Head => Ok((state.head(g, b, features, true)?, None)),
        Branch::Prototype => {
            let z = state.project(g, b, features)?;
            Ok((model::prototype_scores_graph(g, z, protos)?, Some(z)))
        }
    }
}

/// Upsamples both maps to the crop and aligns them image by image.
fn aligned(
    g: &mut Graph,
    first: Var,
    second: Var,
    plans: &[ViewPlan],
    crop: [usize; 2],
) -> Result<(Var, Var)> {
    let up1 = g.upsample_bilinear(first, crop[0], crop[1])?;
    let up2 = g.upsample_bilinear(second, crop[0], crop[1])?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, plan) in plans.iter().enumerate() {
        let s1 = g.slice(up1, 0, i, 1)?;
        let s2 = g.slice(up2, 0, i, 1)?;
        let (x, y) = augment::align_scores_graph(g, s1, s2, plan)?;
        a.push(x);
        b.push(y);
    }
    Ok((g.concat(&a, 0)?, g.concat(&b, 0)?))
}

fn dominant_fraction(scores: &Tensor) -> Result<f64> {
    let k = scores.shape()[1];
    let mut counts = vec![0usize; k];
    let best = best_classes(scores)?;
    best.iter().for_each(|&(c, _)| counts[c] += 1);
    Ok(*counts.iter().max().unwrap_or(&0) as f64 / best.len().max(1) as f64)
}

/// One consistency step: solve `gamma` from the current masks, then update
/// on the weighted sum of all four losses.
pub fn ssl_step(
    state: &mut ModelState,
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    opt: &mut Sgd,
    stage: usize,
) -> Result<SslOutcome> {
    let crop = cfg.augment.crop;
    let [ch, cw] = crop;
    let ns = cfg.batch_source.max(cfg.prototype_batch);
    let src = sample_source(rng, source, ns, &cfg.augment)?;
    let target = if cfg.ablation == Ablation::NoTarget { source } else { target };
    let (plans, view1, view2) = target_views(rng, target, cfg)?;
    let dropout_seeds: [u64; 2] = [rng.random(), rng.random()];
    let nt = plans.len();

    let mut g = Graph::new();
    let b = state.bind(&mut g, true);
    let x = g.constant(concat_batches(&[&src.images, &view1, &view2])?);
    let features = state.encode(&mut g, &b, x, None)?;
    let f_src = g.slice(features, 0, 0, ns)?;
    let mut f1 = g.slice(features, 0, ns, nt)?;
    let mut f2 = g.slice(features, 0, ns + nt, nt)?;
    if cfg.ablation == Ablation::McdSsl && cfg.dropout_p > 0.0 {
        f1 = g.dropout(f1, cfg.dropout_p, dropout_seeds[0])?;
        f2 = g.dropout(f2, cfg.dropout_p, dropout_seeds[1])?;
    }

    // supervised loss and prototypes from the labelled batch
    let nls = cfg.batch_source;
    let f_sup = g.slice(f_src, 0, 0, nls)?;
    let logits = state.head(&mut g, &b, f_sup, false)?;
    let probs = model::segment_probs_graph(&mut g, logits, state.config.head_tau, ch, cw)?;
    let sup = losses::supervised(&mut g, probs, &src.labels[..nls * ch * cw])?;

    let np = cfg.prototype_batch;
    let f_proto = g.slice(f_src, 0, 0, np)?;
    let z_src = state.project(&mut g, &b, f_proto)?;
    let cols = embedding_columns(&mut g, z_src)?;
    let y = one_hot(&low_res_labels(&src.labels, np, ch, cw), state.config.num_classes);
    let (protos, bank) = prototypes_from_rows(&mut g, cols, &y, &state.bank)?;
    if !bank.all_available() {
        // some class has never been seen: nothing to score against yet
        state.bank = bank;
        state.step += 1;
        let report = losses::total_loss([0.0; 4], cfg.weights, 0)?;
        return Ok(SslOutcome {
            report,
            masks: None,
            gamma: None,
            dominant_fraction: None,
        });
    }
    let frozen = g.detach(protos);

    // both branches on the target views
    let (b1, b2) = branches(cfg.ablation);
    let (raw1, z1) = branch_scores(&mut g, state, &b, b1, f1, frozen)?;
    let (raw2, z2) = branch_scores(&mut g, state, &b, b2, f2, frozen)?;
    // cosine scores of the prototype branch drive gamma; under the
    // head-only ablation they come from an extra projection of view 2
    let z_gamma = match (z2, z1) {
        (Some(z), _) => z,
        (None, Some(z)) => z,
        (None, None) => state.project(&mut g, &b, f2)?,
    };
    let cos_low = match b2 {
        Branch::Prototype => raw2,
        Branch::Head => model::prototype_scores_graph(&mut g, z_gamma, frozen)?,
    };
    let (s1, s2) = aligned(&mut g, raw1, raw2, &plans, crop)?;
    let cos = if b2 == Branch::Prototype {
        s2
    } else {
        let up = g.upsample_bilinear(cos_low, ch, cw)?;
        let mut parts = Vec::new();
        for (i, plan) in plans.iter().enumerate() {
            let s = g.slice(up, 0, i, 1)?;
            let (_, y) = augment::align_scores_graph(&mut g, s, s, plan)?;
            parts.push(y);
        }
        g.concat(&parts, 0)?
    };
    let tau = |branch| match branch {
        Branch::Head => state.config.head_tau,
        Branch::Prototype => state.config.tau,
    };
    let p1 = g.softmax(s1, 1, tau(b1))?;
    let p2 = g.softmax(s2, 1, tau(b2))?;

    // step 1: masks and threshold
    let cos_value = g.value(cos).clone();
    let consistency = uncertainty::consistency_mask(g.value(s1), g.value(s2))?;
    let gamma = uncertainty::calculate_gamma(&consistency, &cos_value)?;
    let mut masks = match cfg.ablation {
        Ablation::GammaNegInf => {
            let shape = consistency.shape;
            MaskPair::new(consistency, Mask::filled(shape, true), f64::NEG_INFINITY)
        }
        Ablation::PerClassGamma => {
            let k = state.config.num_classes;
            let previous = state.class_gammas.clone().unwrap_or_else(|| vec![gamma; k]);
            let gammas = uncertainty::calculate_gamma_per_class(&consistency, &cos_value, &previous)?;
            let certain = uncertainty::certainty_mask_per_class(&cos_value, &gammas)?;
            state.class_gammas = Some(gammas);
            MaskPair::new(consistency, certain, gamma)
        }
        _ => {
            let certain = uncertainty::certainty_mask(&cos_value, gamma)?;
            MaskPair::new(consistency, certain, gamma)
        }
    };
    if cfg.ablation == Ablation::SoftMask {
        masks.soft_certainty = Some(uncertainty::soft_certainty_mask(&cos_value, state.config.tau)?);
    }
    let weights = masks.loss_weights();
    let n_certain = masks.certainty.count();

    // step 2: gradient step on the combined loss
    let l_c = losses::consistency(&mut g, p1, p2, &weights)?;
    let regularise = cfg.ablation != Ablation::NoRegLosses;
    let (l_u, l_p) = if regularise {
        let z_t = match z2.or(z1) {
            Some(z) => z,
            None => z_gamma,
        };
        (
            Some(losses::uniformity(&mut g, z_t)?),
            Some(losses::prototype(&mut g, protos)?),
        )
    } else {
        (None, None)
    };
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let values = [
        g.value(l_c).data()[0],
        value(&g, l_u),
        value(&g, l_p),
        g.value(sup.loss).data()[0],
    ];
    check_finite(stage, state.step, values)?;
    let w = cfg.weights;
    let mut terms = vec![g.scale(l_c, w.consistency), g.scale(sup.loss, w.supervised)];
    if let Some(l) = l_u {
        terms.push(g.scale(l, w.uniformity));
    }
    if let Some(l) = l_p {
        terms.push(g.scale(l, w.prototype));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.backward(total)?;
    let grads = collect_grads(&g, &b, state, cfg.grad_clip);
    let dominant = dominant_fraction(&cos_value)?;
    opt.step(&mut state.params, &grads);
    state.bank = bank;
    state.gamma = Some(gamma);
    state.step += 1;
    Ok(SslOutcome {
        report: losses::total_loss(values, w, n_certain)?,
        masks: Some(masks),
        gamma: Some(gamma),
        dominant_fraction: Some(dominant),
    })
}

fn concat_batches(parts: &[&Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = parts.iter().map(|t| g.constant((*t).clone())).collect();
    let c = g.concat(&vars, 0)?;
    Ok(g.value(c).clone())
}

/// Final state, log and the state after every phase (pretraining first).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub state: ModelState,
    pub log: Vec<LogEntry>,
    pub phase_states: Vec<ModelState>,
}

fn pretrain_rng(seed: u64, step: usize) -> ChaCha8Rng {
    rng::stream(rng::derive_seed(seed, 0x5052), step as u64)
}

fn stage_rng(seed: u64, stage: usize, step: usize) -> ChaCha8Rng {
    rng::stream(rng::derive_seed(seed, 0x5353_0000 + stage as u64), step as u64)
}

/// Supervised pretraining from a fresh initialisation.
pub fn pretrain(cfg: &TrainConfig, source: &Dataset) -> Result<(ModelState, Vec<LogEntry>)> {
    cfg.validate()?;
    check_source(source, cfg)?;
    let mut state = ModelState::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Sgd::new(&state.params, cfg.lr, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.steps_pretrain);
    for step in 0..cfg.steps_pretrain {
        let mut rng = pretrain_rng(cfg.seed, step);
        let r = pretrain_step(&mut state, source, cfg, &mut rng, &mut opt)?;
        log.push(LogEntry::from_report(0, state.step, &r));
    }
    Ok((state, log))
}

fn check_source(source: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if source.labels.is_none() || source.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "source dataset {} must be labelled and non-empty",
            source.spec.name
        )));
    }
    if source.spec.k_known != cfg.model.num_classes {
        return Err(Error::InvalidArgument(format!(
            "source has {} classes, model {}",
            source.spec.k_known, cfg.model.num_classes
        )));
    }
    Ok(())
}

/// Consistency training through the curriculum `stages`, starting from a
/// pretrained state. Each stage restarts the optimiser; everything else
/// carries over.
pub fn train_from(
    pretrained: ModelState,
    cfg: &TrainConfig,
    source: &Dataset,
    stages: &[&Dataset],
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_source(source, cfg)?;
    if cfg.ablation != Ablation::NoSsl && cfg.steps_ssl > 0 && stages.is_empty() {
        return Err(Error::InvalidArgument("the curriculum needs at least one stage".into()));
    }
    if let Some(d) = stages.iter().find(|d| d.is_empty()) {
        return Err(Error::InvalidArgument(format!("stage dataset {} is empty", d.spec.name)));
    }
    let mut state = pretrained;
    let mut log = Vec::new();
    let mut phase_states = Vec::new();
    if cfg.ablation == Ablation::NoSsl {
        return Ok(TrainOutput {
            state,
            log,
            phase_states,
        });
    }
    let lr = cfg.lr_ssl.unwrap_or(cfg.lr);
    for (si, target) in stages.iter().enumerate() {
        let stage = si + 1;
        let mut opt = Sgd::new(&state.params, lr, cfg.momentum);
        for step in 0..cfg.steps_ssl {
            let mut rng = stage_rng(cfg.seed, stage, step);
            let out = ssl_step(&mut state, source, target, cfg, &mut rng, &mut opt, stage)?;
            let mut entry = LogEntry::from_report(stage, state.step, &out.report);
            entry.gamma = out.gamma;
            entry.p_consistent = out.masks.as_ref().map(|m| m.p_consistent);
            entry.dominant_fraction = out.dominant_fraction;
            entry.skipped = out.masks.is_none();
            log.push(entry);
        }
        phase_states.push(state.clone());
    }
    Ok(TrainOutput {
        state,
        log,
        phase_states,
    })
}

/// Pretraining followed by the curriculum.
pub fn train(cfg: &TrainConfig, source: &Dataset, stages: &[&Dataset]) -> Result<TrainOutput> {
    let (pretrained, mut log) = pretrain(cfg, source)?;
    let mut out = train_from(pretrained.clone(), cfg, source, stages)?;
    log.append(&mut out.log);
    out.log = log;
    out.phase_states.insert(0, pretrained);
    Ok(out)
}

/// Per-image misclassification records of a labelled dataset under the
/// prototype branch, evaluated on full images in chunks of `chunk`.
pub fn evaluate_records(state: &ModelState, data: &Dataset, chunk: usize) -> Result<Vec<Vec<PixelRecord>>> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("dataset {} has no labels", data.spec.name)))?;
    if let Some(k) = state.bank.first_unavailable() {
        return Err(Error::UnavailableClass(k));
    }
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for part in indices.chunks(chunk.max(1)) {
        let images = data.batch(part)?;
        let scores = state.prototype_score_map(&images)?;
        let flat: Vec<i32> = part.iter().flat_map(|&i| labels[i].iter().copied()).collect();
        out.extend(pixel_records(&scores, &flat, state.config.num_classes)?);
    }
    Ok(out)
}
