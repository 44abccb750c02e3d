//! Two-branch model over precomputed frame features.
//!
//! Both branches share one frame encoder and one whitening layer. The sequence branch
//! pools the whitened frames with SeqGeM and normalizes the result; the image branch
//! feeds the whitened frame to the CosFace head. All learnable values live in a single
//! flat `Vec<f64>` addressed through [`Layout`], so both branches read the same storage
//! and optimizer moments mirror the parameters one-to-one.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::aggregate::{
    baseline_aggregate, seqgem_backward, seqgem_forward, Aggregator, BaselineKind, FrameStack, InputMode,
    SeqGemParams, DEFAULT_CLAMP_EPS, DEFAULT_P,
};
use crate::diffcore::{l2_normalize, l2_normalize_backward, Rng};
use crate::error::{Error, Result};
use crate::geo::{GroupSchedule, PlaceClass};
use crate::loss::{cosface_loss, multitask_loss, triplet_loss, CosfaceParams, LossTerm, LossWeights, Triplet};

/// Lower bound applied to the SeqGeM exponent after each optimizer step.
pub const MIN_P: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Identity,
    Affine,
    /// Two affine layers with a tanh in between.
    Mlp2,
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "affine" => Ok(Self::Affine),
            "mlp2" => Ok(Self::Mlp2),
            other => Err(Error::invalid(format!("unknown encoder kind '{other}'"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Affine => "affine",
            Self::Mlp2 => "mlp2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub raw_dim: usize,
    pub dim: usize,
    /// Hidden width, used by `Mlp2` only.
    pub hidden: usize,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    /// Descriptor dimension produced by the whitening layer.
    pub out_dim: usize,
    pub input_mode: InputMode,
    pub clamp_eps: f64,
    /// L2-normalize every whitened frame before pooling.
    pub prenorm_frames: bool,
}

impl ModelConfig {
    pub fn new(kind: EncoderKind, raw_dim: usize, enc_dim: usize, out_dim: usize) -> Self {
        Self {
            encoder: EncoderSpec { kind, raw_dim, dim: enc_dim, hidden: enc_dim },
            out_dim,
            input_mode: InputMode::Clamp,
            clamp_eps: DEFAULT_CLAMP_EPS,
            prenorm_frames: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.raw_dim == 0 || e.dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid("model dimensions must be >= 1"));
        }
        if e.kind == EncoderKind::Identity && e.dim != e.raw_dim {
            return Err(Error::invalid("identity encoder requires encoder dim == raw dim"));
        }
        if e.kind == EncoderKind::Mlp2 && e.hidden == 0 {
            return Err(Error::invalid("mlp2 encoder requires a hidden width >= 1"));
        }
        if !(self.clamp_eps > 0.0) {
            return Err(Error::invalid("clamp_eps must be positive"));
        }
        Ok(())
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// Affine encoder weight / first MLP layer weight.
    pub enc_w1: Range<usize>,
    pub enc_b1: Range<usize>,
    pub enc_w2: Range<usize>,
    pub enc_b2: Range<usize>,
    pub whiten_w: Range<usize>,
    pub whiten_b: Range<usize>,
    pub p: usize,
    pub class_weights: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig, n_classes: usize) -> Self {
        let e = &cfg.encoder;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (w1, b1, w2, b2) = match e.kind {
            EncoderKind::Identity => (take(0), take(0), take(0), take(0)),
            EncoderKind::Affine => (take(e.dim * e.raw_dim), take(e.dim), take(0), take(0)),
            EncoderKind::Mlp2 => (take(e.hidden * e.raw_dim), take(e.hidden), take(e.dim * e.hidden), take(e.dim)),
        };
        let whiten_w = take(cfg.out_dim * e.dim);
        let whiten_b = take(cfg.out_dim);
        let p = take(1).start;
        let class_weights = take(n_classes * cfg.out_dim);
        Self { enc_w1: w1, enc_b1: b1, enc_w2: w2, enc_b2: b2, whiten_w, whiten_b, p, class_weights, total: at }
    }

    /// Parameters shared by both branches (encoder and whitening).
    pub fn shared(&self) -> Range<usize> {
        0..self.p
    }
}

/// Model parameters plus the class table of the CosFace head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub classes: Vec<PlaceClass>,
    class_index: BTreeMap<PlaceClass, usize>,
    /// Bumped on every parameter update.
    pub version: u64,
}

/// `out = W x + b` with `W` row-major `out.len() x x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Accumulates the gradients of `W x + b` into `gw`, `gb` and returns the input gradient.
fn affine_backward(w: &[f64], x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let cols = x.len();
    let mut dx = vec![0.0; cols];
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[r] += d;
        let row = r * cols..(r + 1) * cols;
        for ((g, wv), (xv, dxv)) in gw[row.clone()].iter_mut().zip(&w[row]).zip(x.iter().zip(dx.iter_mut())) {
            *g += d * xv;
            *dxv += d * wv;
        }
    }
    dx
}

/// Intermediates of one frame through encoder and whitening.
#[derive(Debug, Clone)]
pub struct FrameCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
    h: Vec<f64>,
    /// Whitened frame descriptor.
    pub y: Vec<f64>,
}

/// Intermediates of one sequence through the sequence branch.
#[derive(Debug, Clone)]
pub struct SeqCache {
    frames: Vec<FrameCache>,
    pooled_in: FrameStack,
    pooled: Vec<f64>,
    /// Final normalized descriptor.
    pub descriptor: Vec<f64>,
}

impl Model {
    /// Seeded initialization: affine encoders start at the identity when square, other
    /// weights are Gaussian with variance `1/fan_in`, class weights are random unit rows,
    /// and the SeqGeM exponent starts at 3.
    pub fn init(config: ModelConfig, classes: Vec<PlaceClass>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, classes.len());
        let mut params = vec![0.0; layout.total];
        let e = config.encoder;
        let gaussian = |slice: &mut [f64], fan_in: usize, rng: &mut Rng| {
            let std = 1.0 / (fan_in as f64).sqrt();
            for v in slice {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        match e.kind {
            EncoderKind::Identity => {}
            EncoderKind::Affine => {
                if e.dim == e.raw_dim {
                    for i in 0..e.dim {
                        params[layout.enc_w1.start + i * e.raw_dim + i] = 1.0;
                    }
                } else {
                    gaussian(&mut params[layout.enc_w1.clone()], e.raw_dim, rng);
                }
            }
            EncoderKind::Mlp2 => {
                gaussian(&mut params[layout.enc_w1.clone()], e.raw_dim, rng);
                gaussian(&mut params[layout.enc_w2.clone()], e.hidden, rng);
            }
        }
        gaussian(&mut params[layout.whiten_w.clone()], e.dim, rng);
        params[layout.p] = DEFAULT_P;
        gaussian(&mut params[layout.class_weights.clone()], 1, rng);
        let mut model = Self::from_parts(config, params, classes)?;
        model.normalize_class_rows(None)?;
        Ok(model)
    }

    pub fn from_parts(config: ModelConfig, params: Vec<f64>, classes: Vec<PlaceClass>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, classes.len());
        if params.len() != layout.total {
            return Err(Error::invalid(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        let class_index = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect::<BTreeMap<_, _>>();
        if class_index.len() != classes.len() {
            return Err(Error::invalid("duplicate class in class table"));
        }
        Ok(Self { config, layout, params, classes, class_index, version: 0 })
    }

    /// Copy of the model with a different parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.layout.total {
            return Err(Error::invalid("parameter vector length mismatch"));
        }
        let mut m = self.clone();
        m.params = params;
        Ok(m)
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn raw_dim(&self) -> usize {
        self.config.encoder.raw_dim
    }

    pub fn p(&self) -> f64 {
        self.params[self.layout.p]
    }

    pub fn seqgem_params(&self) -> SeqGemParams {
        SeqGemParams { p: self.p(), input_mode: self.config.input_mode, clamp_eps: self.config.clamp_eps }
    }

    pub fn class_id(&self, class: &PlaceClass) -> Option<usize> {
        self.class_index.get(class).copied()
    }

    pub fn class_row(&self, id: usize) -> &[f64] {
        let d = self.config.out_dim;
        let start = self.layout.class_weights.start + id * d;
        &self.params[start..start + d]
    }

    /// Re-normalizes class rows to unit norm; all rows when `rows` is `None`.
    pub fn normalize_class_rows(&mut self, rows: Option<&[usize]>) -> Result<()> {
        let d = self.config.out_dim;
        let all: Vec<usize> = (0..self.classes.len()).collect();
        for &id in rows.unwrap_or(&all) {
            let start = self.layout.class_weights.start + id * d;
            let unit = l2_normalize(&self.params[start..start + d])?;
            self.params[start..start + d].copy_from_slice(&unit);
        }
        Ok(())
    }

    pub fn encode_frame(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.frame_forward(x)?.h)
    }

    pub fn frame_forward(&self, x: &[f64]) -> Result<FrameCache> {
        let e = &self.config.encoder;
        if x.len() != e.raw_dim {
            return Err(Error::invalid(format!("frame has {} features, model expects {}", x.len(), e.raw_dim)));
        }
        let p = &self.params;
        let l = &self.layout;
        let (hidden, h) = match e.kind {
            EncoderKind::Identity => (Vec::new(), x.to_vec()),
            EncoderKind::Affine => (Vec::new(), affine(&p[l.enc_w1.clone()], &p[l.enc_b1.clone()], x)),
            EncoderKind::Mlp2 => {
                let t: Vec<f64> =
                    affine(&p[l.enc_w1.clone()], &p[l.enc_b1.clone()], x).into_iter().map(f64::tanh).collect();
                let h = affine(&p[l.enc_w2.clone()], &p[l.enc_b2.clone()], &t);
                (t, h)
            }
        };
        let y = affine(&p[l.whiten_w.clone()], &p[l.whiten_b.clone()], &h);
        Ok(FrameCache { x: x.to_vec(), hidden, h, y })
    }

    /// Accumulates encoder and whitening gradients for upstream `dy` on the whitened frame.
    pub fn frame_backward(&self, cache: &FrameCache, dy: &[f64], grads: &mut [f64]) {
        let p = &self.params;
        let l = &self.layout;
        let (gw, rest) = grads.split_at_mut(l.whiten_b.start);
        let dh = affine_backward(
            &p[l.whiten_w.clone()],
            &cache.h,
            dy,
            &mut gw[l.whiten_w.clone()],
            &mut rest[..l.whiten_b.len()],
        );
        match self.config.encoder.kind {
            EncoderKind::Identity => {}
            EncoderKind::Affine => {
                let (gw1, gb1) = grads.split_at_mut(l.enc_b1.start);
                affine_backward(&p[l.enc_w1.clone()], &cache.x, &dh, &mut gw1[l.enc_w1.clone()], &mut gb1[..l.enc_b1.len()]);
            }
            EncoderKind::Mlp2 => {
                let dt = {
                    let (gw2, gb2) = grads.split_at_mut(l.enc_b2.start);
                    affine_backward(&p[l.enc_w2.clone()], &cache.hidden, &dh, &mut gw2[l.enc_w2.clone()], &mut gb2[..l.enc_b2.len()])
                };
                let da: Vec<f64> = dt.iter().zip(&cache.hidden).map(|(d, t)| d * (1.0 - t * t)).collect();
                let (gw1, gb1) = grads.split_at_mut(l.enc_b1.start);
                affine_backward(&p[l.enc_w1.clone()], &cache.x, &da, &mut gw1[l.enc_w1.clone()], &mut gb1[..l.enc_b1.len()]);
            }
        }
    }

    pub fn seq_forward(&self, seq: &FrameStack) -> Result<SeqCache> {
        let frames = (0..seq.len()).map(|i| self.frame_forward(seq.frame(i))).collect::<Result<Vec<_>>>()?;
        let rows = frames
            .iter()
            .map(|f| if self.config.prenorm_frames { l2_normalize(&f.y) } else { Ok(f.y.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let pooled_in = FrameStack::new(&rows)?;
        let pooled = seqgem_forward(&pooled_in, &self.seqgem_params())?;
        let descriptor = l2_normalize(&pooled)?;
        Ok(SeqCache { frames, pooled_in, pooled, descriptor })
    }

    /// Backpropagates `d_descriptor` through the sequence branch into `grads`.
    pub fn seq_backward(&self, cache: &SeqCache, d_descriptor: &[f64], grads: &mut [f64]) -> Result<()> {
        let d_pooled = l2_normalize_backward(&cache.pooled, d_descriptor)?;
        let g = seqgem_backward(&cache.pooled_in, &self.seqgem_params(), &d_pooled)?;
        grads[self.layout.p] += g.p;
        let d = self.config.out_dim;
        for (i, frame) in cache.frames.iter().enumerate() {
            let d_in = &g.frames[i * d..(i + 1) * d];
            let dy = if self.config.prenorm_frames { l2_normalize_backward(&frame.y, d_in)? } else { d_in.to_vec() };
            self.frame_backward(frame, &dy, grads);
        }
        Ok(())
    }

    /// Sequence descriptor: encode and whiten every frame, pool with SeqGeM, normalize.
    pub fn seq_descriptor(&self, seq: &FrameStack) -> Result<Vec<f64>> {
        Ok(self.seq_forward(seq)?.descriptor)
    }

    /// Normalized single-image descriptor (no pooling, no clamping).
    pub fn im_descriptor(&self, x: &[f64]) -> Result<Vec<f64>> {
        l2_normalize(&self.frame_forward(x)?.y)
    }

    /// Sequence descriptor with an arbitrary aggregator over the whitened frames.
    pub fn describe(&self, seq: &FrameStack, aggregator: Aggregator) -> Result<Vec<f64>> {
        if aggregator == Aggregator::SeqGem {
            return self.seq_descriptor(seq);
        }
        let rows = (0..seq.len()).map(|i| Ok(self.frame_forward(seq.frame(i))?.y)).collect::<Result<Vec<_>>>()?;
        let stack = FrameStack::new(&rows)?;
        l2_normalize(&baseline_aggregate(baseline_kind(aggregator), &stack)?)
    }
}

fn baseline_kind(a: Aggregator) -> BaselineKind {
    match a {
        Aggregator::Avg => BaselineKind::Avg,
        Aggregator::Max => BaselineKind::Max,
        _ => BaselineKind::Concat,
    }
}

/// Descriptor for raw features with no learned layers (the untrained baseline).
pub fn raw_descriptor(seq: &FrameStack, aggregator: Aggregator) -> Result<Vec<f64>> {
    let pooled = match aggregator {
        Aggregator::SeqGem => seqgem_forward(seq, &SeqGemParams::default())?,
        other => baseline_aggregate(baseline_kind(other), seq)?,
    };
    l2_normalize(&pooled)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments with bias-correction step counts. Class rows keep their own
/// step count because a row is only updated while its group is active.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub dense_steps: u64,
    pub class_steps: Vec<u64>,
}

impl AdamState {
    pub fn new(layout: &Layout, n_classes: usize) -> Self {
        Self { m: vec![0.0; layout.total], v: vec![0.0; layout.total], dense_steps: 0, class_steps: vec![0; n_classes] }
    }
}

/// One Adam update of `params[range]` with bias correction for step `t` (1-based).
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Hyperparameters of the two losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub triplet_margin: f64,
    pub cosface: CosfaceParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            triplet_margin: crate::loss::DEFAULT_TRIPLET_MARGIN,
            cosface: CosfaceParams::default(),
        }
    }
}

/// Raw-feature sequences forming one training triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletInput {
    pub query: FrameStack,
    pub positive: FrameStack,
    pub negative: FrameStack,
}

/// One single-image training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub features: Vec<f64>,
    pub class: PlaceClass,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub adam_config: AdamConfig,
    pub losses: LossConfig,
    pub schedule: GroupSchedule,
    pub iteration: u64,
}

/// Per-branch losses and gradients over the full parameter vector, before weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGradients {
    pub seq: LossTerm,
    pub im: LossTerm,
    pub active_triplets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub seq_loss: f64,
    pub im_loss: f64,
    pub active_triplets: usize,
}

impl TrainState {
    pub fn new(model: Model, schedule: GroupSchedule, adam_config: AdamConfig, losses: LossConfig) -> Result<Self> {
        for group in &schedule.groups {
            for class in group {
                if model.class_id(class).is_none() {
                    return Err(Error::invalid("schedule references a class missing from the model"));
                }
            }
        }
        losses.weights.validate()?;
        let adam = AdamState::new(&model.layout, model.classes.len());
        let mut s = Self { model, adam, adam_config, losses, schedule, iteration: 0 };
        s.schedule.sync(0);
        Ok(s)
    }

    /// Class ids of the active group, in schedule order.
    pub fn active_class_ids(&self) -> Vec<usize> {
        self.schedule.active().iter().filter_map(|c| self.model.class_id(c)).collect()
    }

    /// Triplet loss of the sequence branch and its gradient over all parameters.
    pub fn seq_branch(&self, batch: &[TripletInput]) -> Result<(LossTerm, usize)> {
        let model = &self.model;
        let mut grads = vec![0.0; model.layout.total];
        if batch.is_empty() {
            return Ok((LossTerm { value: 0.0, grads }, 0));
        }
        let caches = batch
            .iter()
            .map(|t| Ok([model.seq_forward(&t.query)?, model.seq_forward(&t.positive)?, model.seq_forward(&t.negative)?]))
            .collect::<Result<Vec<_>>>()?;
        let triplets: Vec<Triplet> = caches
            .iter()
            .map(|[q, p, n]| Triplet {
                query: q.descriptor.clone(),
                positive: p.descriptor.clone(),
                negative: n.descriptor.clone(),
            })
            .collect();
        let out = triplet_loss(&triplets, self.losses.triplet_margin)?;
        for ([q, p, n], g) in caches.iter().zip(&out.grads) {
            if g.query.iter().chain(&g.positive).chain(&g.negative).all(|v| *v == 0.0) {
                continue;
            }
            model.seq_backward(q, &g.query, &mut grads)?;
            model.seq_backward(p, &g.positive, &mut grads)?;
            model.seq_backward(n, &g.negative, &mut grads)?;
        }
        Ok((LossTerm { value: out.loss, grads }, out.active))
    }

    /// Mean CosFace loss over the batch against the active class group.
    pub fn im_branch(&self, batch: &[LabeledImage]) -> Result<LossTerm> {
        let model = &self.model;
        let mut grads = vec![0.0; model.layout.total];
        if batch.is_empty() {
            return Ok(LossTerm { value: 0.0, grads });
        }
        let active = self.active_class_ids();
        let local: BTreeMap<usize, usize> = active.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let table: Vec<f64> = active.iter().flat_map(|&id| model.class_row(id).iter().copied()).collect();
        let d = model.out_dim();
        let scale = 1.0 / batch.len() as f64;
        let mut value = 0.0;
        for img in batch {
            let label = model
                .class_id(&img.class)
                .and_then(|id| local.get(&id).copied())
                .ok_or_else(|| Error::invalid(format!("label {:?} is not in the active class group", img.class)))?;
            let cache = model.frame_forward(&img.features)?;
            let out = cosface_loss(&cache.y, label, &table, &self.losses.cosface)?;
            value += scale * out.loss;
            let dy: Vec<f64> = out.grad_feature.iter().map(|g| g * scale).collect();
            model.frame_backward(&cache, &dy, &mut grads);
            for (k, &id) in active.iter().enumerate() {
                let start = model.layout.class_weights.start + id * d;
                for (g, gw) in grads[start..start + d].iter_mut().zip(&out.grad_weights[k * d..(k + 1) * d]) {
                    *g += scale * gw;
                }
            }
        }
        Ok(LossTerm { value, grads })
    }

    pub fn branch_gradients(&self, seq_batch: &[TripletInput], im_batch: &[LabeledImage]) -> Result<BranchGradients> {
        let (seq, active_triplets) = self.seq_branch(seq_batch)?;
        let im = self.im_branch(im_batch)?;
        Ok(BranchGradients { seq, im, active_triplets })
    }

    /// Applies one Adam step. Dense parameters are always updated; class rows only when
    /// they belong to the active group. Updated class rows are re-normalized and `p` is
    /// kept above [`MIN_P`].
    pub fn adam_update(&mut self, grads: &[f64]) -> Result<()> {
        let layout = self.model.layout.clone();
        if grads.len() != layout.total {
            return Err(Error::invalid("gradient length does not match the parameter vector"));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged {
                iteration: self.iteration,
                reason: format!("non-finite gradient at parameter {i}"),
            });
        }
        let cfg = self.adam_config;
        let dense = 0..layout.class_weights.start;
        self.adam.dense_steps += 1;
        adam_step(
            &mut self.model.params[dense.clone()],
            &grads[dense.clone()],
            &mut self.adam.m[dense.clone()],
            &mut self.adam.v[dense],
            self.adam.dense_steps,
            &cfg,
        );
        let d = self.model.out_dim();
        let mut touched = Vec::new();
        for id in self.active_class_ids() {
            let r = layout.class_weights.start + id * d..layout.class_weights.start + (id + 1) * d;
            self.adam.class_steps[id] += 1;
            adam_step(
                &mut self.model.params[r.clone()],
                &grads[r.clone()],
                &mut self.adam.m[r.clone()],
                &mut self.adam.v[r.clone()],
                self.adam.class_steps[id],
                &cfg,
            );
            if grads[r].iter().any(|g| *g != 0.0) {
                touched.push(id);
            }
        }
        self.model.normalize_class_rows(Some(&touched))?;
        let p = &mut self.model.params[layout.p];
        *p = p.max(MIN_P);
        self.model.version += 1;
        Ok(())
    }

    /// One joint iteration: both branch losses, weighted sum, one Adam step, then the
    /// class-group schedule advances.
    pub fn train_step(&mut self, seq_batch: &[TripletInput], im_batch: &[LabeledImage]) -> Result<StepStats> {
        let branches = self.branch_gradients(seq_batch, im_batch)?;
        let combined = multitask_loss(&branches.seq, &branches.im, &self.losses.weights)?;
        if !combined.value.is_finite() {
            return Err(Error::TrainingDiverged { iteration: self.iteration, reason: "non-finite loss".into() });
        }
        self.adam_update(&combined.grads)?;
        self.iteration += 1;
        self.schedule.sync(self.iteration);
        Ok(StepStats {
            total: combined.value,
            seq_loss: branches.seq.value,
            im_loss: branches.im.value,
            active_triplets: branches.active_triplets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{fd_check, seeded_rng, DiffOp};
    use crate::geo::{build_groups, PartitionParams};
    use crate::loss::triplet_hinge_margin;

    fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_stack(rng: &mut Rng, len: usize, dim: usize) -> FrameStack {
        FrameStack::from_flat(rand_vec(rng, len * dim), len, dim).unwrap()
    }

    fn classes() -> Vec<PlaceClass> {
        vec![PlaceClass::new(0, 0, 0), PlaceClass::new(1, 0, 0), PlaceClass::new(2, 0, 0), PlaceClass::new(4, 2, 0)]
    }

    fn state(kind: EncoderKind, seed: u64) -> TrainState {
        let mut rng = seeded_rng(seed);
        let cfg = ModelConfig { encoder: EncoderSpec { kind, raw_dim: 4, dim: 4, hidden: 3 }, ..ModelConfig::new(kind, 4, 4, 3) };
        let model = Model::init(cfg, classes(), &mut rng).unwrap();
        // Shift whitening so few entries sit at the clamp.
        let mut model = model;
        for b in model.layout.whiten_b.clone() {
            model.params[b] = 2.0;
        }
        let schedule = build_groups(classes(), &PartitionParams::default(), 1).unwrap();
        TrainState::new(model, schedule, AdamConfig { lr: 1e-2, ..Default::default() }, LossConfig::default()).unwrap()
    }

    #[test]
    fn layout_sizes() {
        let cfg = ModelConfig::new(EncoderKind::Mlp2, 5, 4, 3);
        let l = Layout::new(&ModelConfig { encoder: EncoderSpec { hidden: 6, ..cfg.encoder }, ..cfg }, 2);
        assert_eq!(l.total, 6 * 5 + 6 + 4 * 6 + 4 + 3 * 4 + 3 + 1 + 2 * 3);
        assert!(ModelConfig::new(EncoderKind::Identity, 5, 4, 3).validate().is_err());
    }

    #[test]
    fn encoder_examples() {
        let mut rng = seeded_rng(1);
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let id = Model::init(ModelConfig::new(EncoderKind::Identity, 4, 4, 2), classes(), &mut rng).unwrap();
        assert_eq!(id.encode_frame(&x).unwrap(), x);
        let aff = Model::init(ModelConfig::new(EncoderKind::Affine, 4, 4, 2), classes(), &mut rng).unwrap();
        assert_eq!(aff.encode_frame(&x).unwrap(), x);
        assert!(aff.encode_frame(&[1.0]).is_err());
    }

    /// Encoder output contracted with a fixed vector, as a function of the parameters.
    struct EncoderOp {
        model: Model,
        x: Vec<f64>,
        up: Vec<f64>,
    }

    impl DiffOp for EncoderOp {
        fn forward(&self, params: &[f64]) -> Result<Vec<f64>> {
            let m = self.model.with_params(params.to_vec())?;
            Ok(vec![m.frame_forward(&self.x)?.y.iter().zip(&self.up).map(|(a, b)| a * b).sum()])
        }
        fn backward(&self, params: &[f64], up: &[f64]) -> Result<Vec<f64>> {
            let m = self.model.with_params(params.to_vec())?;
            let cache = m.frame_forward(&self.x)?;
            let mut g = vec![0.0; params.len()];
            let dy: Vec<f64> = self.up.iter().map(|u| u * up[0]).collect();
            m.frame_backward(&cache, &dy, &mut g);
            Ok(g)
        }
    }

    #[test]
    fn frame_path_gradients() {
        let mut rng = seeded_rng(2);
        for kind in [EncoderKind::Affine, EncoderKind::Mlp2] {
            for _ in 0..5 {
                let s = state(kind, rng.gen());
                let op = EncoderOp { model: s.model.clone(), x: rand_vec(&mut rng, 4), up: rand_vec(&mut rng, 3) };
                let r = fd_check(&op, &s.model.params, 1e-5, 1e-4).unwrap();
                assert!(r.passed, "{kind}: {r:?}");
            }
        }
    }

    struct SeqLossOp {
        state: TrainState,
        batch: Vec<TripletInput>,
    }

    impl SeqLossOp {
        fn at(&self, params: &[f64]) -> TrainState {
            let mut s = self.state.clone();
            s.model = s.model.with_params(params.to_vec()).unwrap();
            s
        }
    }

    impl DiffOp for SeqLossOp {
        fn forward(&self, params: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![self.at(params).seq_branch(&self.batch)?.0.value])
        }
        fn backward(&self, params: &[f64], up: &[f64]) -> Result<Vec<f64>> {
            Ok(self.at(params).seq_branch(&self.batch)?.0.grads.iter().map(|g| g * up[0]).collect())
        }
        fn smoothness_margin(&self, params: &[f64]) -> f64 {
            let s = self.at(params);
            let mut margin = f64::INFINITY;
            let mut triplets = Vec::new();
            for t in &self.batch {
                let ds: Vec<Vec<f64>> = [&t.query, &t.positive, &t.negative]
                    .iter()
                    .map(|seq| {
                        let c = s.model.seq_forward(seq).unwrap();
                        for v in c.pooled_in.as_flat() {
                            margin = margin.min((v - s.model.config.clamp_eps).abs());
                        }
                        c.descriptor
                    })
                    .collect();
                triplets.push(Triplet { query: ds[0].clone(), positive: ds[1].clone(), negative: ds[2].clone() });
            }
            margin.min(triplet_hinge_margin(&triplets, s.losses.triplet_margin))
        }
    }

    #[test]
    fn seq_branch_gradients() {
        let mut rng = seeded_rng(3);
        let mut checked = 0;
        while checked < 6 {
            let mut s = state(if checked % 2 == 0 { EncoderKind::Affine } else { EncoderKind::Mlp2 }, rng.gen());
            s.losses.triplet_margin = 1.0;
            let batch = vec![TripletInput {
                query: rand_stack(&mut rng, 3, 4),
                positive: rand_stack(&mut rng, 3, 4),
                negative: rand_stack(&mut rng, 2, 4),
            }];
            let op = SeqLossOp { state: s.clone(), batch };
            let r = fd_check(&op, &s.model.params, 1e-5, 1e-4).unwrap();
            if r.skipped || op.forward(&s.model.params).unwrap()[0] == 0.0 {
                continue;
            }
            assert!(r.passed, "{r:?}");
            checked += 1;
        }
    }

    #[test]
    fn seq_descriptor_properties() {
        let mut rng = seeded_rng(4);
        let s = state(EncoderKind::Mlp2, 9);
        let m = &s.model;
        let seq = rand_stack(&mut rng, 5, 4);
        let d = m.seq_descriptor(&seq).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(m.seq_descriptor(&seq.reversed()).unwrap(), d);

        // L = 1: normalized clamped whitened frame.
        let one = rand_stack(&mut rng, 1, 4);
        let y = m.frame_forward(one.frame(0)).unwrap().y;
        let expect = l2_normalize(&y.iter().map(|v| v.max(m.config.clamp_eps)).collect::<Vec<_>>()).unwrap();
        let got = m.seq_descriptor(&one).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }

        // The image branch sees the same whitened frame before clamping.
        let im = m.im_descriptor(one.frame(0)).unwrap();
        assert_eq!(im, l2_normalize(&y).unwrap());
    }

    #[test]
    fn tiny_fixture_matches_hand_evaluation() {
        // Identity encoder, 2x2 whitening W = [[1, 0.5], [-0.5, 1]], b = [0.1, 0.2], p = 2.
        let cfg = ModelConfig::new(EncoderKind::Identity, 2, 2, 2);
        let c = vec![PlaceClass::new(0, 0, 0)];
        let params = vec![1.0, 0.5, -0.5, 1.0, 0.1, 0.2, 2.0, 1.0, 0.0];
        let m = Model::from_parts(cfg, params, c).unwrap();
        let seq = FrameStack::new(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        // y1 = [1 + 1 + 0.1, -0.5 + 2 + 0.2] = [2.1, 1.7]
        // y2 = [3 + 0.5 + 0.1, -1.5 + 1 + 0.2] = [3.6, -0.3] -> clamped to [3.6, 1e-6]
        // g = [sqrt((2.1^2 + 3.6^2) / 2), sqrt((1.7^2 + 1e-12) / 2)]
        let g0 = ((2.1f64 * 2.1 + 3.6 * 3.6) / 2.0).sqrt();
        let g1 = ((1.7f64 * 1.7 + 1e-12) / 2.0).sqrt();
        let n = (g0 * g0 + g1 * g1).sqrt();
        let d = m.seq_descriptor(&seq).unwrap();
        assert!((d[0] - g0 / n).abs() < 1e-12 && (d[1] - g1 / n).abs() < 1e-12, "{d:?}");
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut p = vec![1.0, 1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[3.0, -0.5], &mut m, &mut v, 1, &cfg);
        assert!((p[0] - 0.9).abs() < 1e-8 && (p[1] - 1.1).abs() < 1e-8, "{p:?}");

        let before = p.clone();
        let (m0, v0) = (m.clone(), v.clone());
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 2, &cfg);
        assert!(m[0].abs() < m0[0].abs() && v[0] < v0[0]);
        let mut p2 = before.clone();
        let (mut mz, mut vz) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p2, &[0.0, 0.0], &mut mz, &mut vz, 1, &cfg);
        assert_eq!(p2, before);
    }

    #[test]
    fn adam_descends_quadratic() {
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut w = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let mut prev = 1.0f64;
        for t in 1..=10 {
            let g = [2.0 * w[0]];
            adam_step(&mut w, &g, &mut m, &mut v, t, &cfg);
            assert!(w[0].abs() < prev);
            prev = w[0].abs();
        }
    }

    fn batches(rng: &mut Rng, s: &TrainState) -> (Vec<TripletInput>, Vec<LabeledImage>) {
        let seq = (0..2)
            .map(|_| TripletInput { query: rand_stack(rng, 3, 4), positive: rand_stack(rng, 3, 4), negative: rand_stack(rng, 3, 4) })
            .collect();
        let active = s.schedule.active().to_vec();
        let im = (0..4).map(|i| LabeledImage { features: rand_vec(rng, 4), class: active[i % active.len()] }).collect();
        (seq, im)
    }

    #[test]
    fn branch_isolation() {
        let mut rng = seeded_rng(5);
        let mut s = state(EncoderKind::Affine, 1);
        s.losses.triplet_margin = 2.0;
        s.losses.weights = LossWeights { seq2seq: 1.0, im2im: 0.0 };
        let (seq, im) = batches(&mut rng, &s);
        let before = s.model.params.clone();
        s.train_step(&seq, &im).unwrap();
        let cw = s.model.layout.class_weights.clone();
        assert_eq!(&s.model.params[cw.clone()], &before[cw.clone()]);
        assert_ne!(s.model.p(), before[s.model.layout.p]);

        let mut s = state(EncoderKind::Affine, 1);
        s.losses.weights = LossWeights { seq2seq: 0.0, im2im: 1.0 };
        let (seq, im) = batches(&mut rng, &s);
        let p_before = s.model.p();
        s.train_step(&seq, &im).unwrap();
        assert_eq!(s.model.p(), p_before);
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn im_labels_must_be_active() {
        let mut rng = seeded_rng(6);
        let mut s = state(EncoderKind::Affine, 2);
        let inactive = s.schedule.groups[1][0];
        let im = vec![LabeledImage { features: rand_vec(&mut rng, 4), class: inactive }];
        assert!(s.train_step(&[], &im).is_err());
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut s = state(EncoderKind::Affine, 3);
        let mut g = vec![0.0; s.model.layout.total];
        g[0] = f64::NAN;
        assert!(matches!(s.adam_update(&g), Err(Error::TrainingDiverged { .. })));
    }
}
