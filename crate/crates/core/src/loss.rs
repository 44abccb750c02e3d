//! Training losses: margin triplet loss over sequence descriptors with hard negative
//! mining, the large-margin cosine (CosFace) classification loss for single images,
//! and their weighted sum.

use crate::diffcore::{euclidean, euclidean_backward, l2_normalize, l2_normalize_backward, norm};
use crate::error::{Error, Result};
use crate::geo::{min_frame_distance, UtmPoint};

pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.1;
pub const DEFAULT_COSFACE_SCALE: f64 = 30.0;
pub const DEFAULT_COSFACE_MARGIN: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grads: Vec<TripletGrads>,
    pub active: usize,
}

/// `sum_i max(0, d(q_i, p_i) - d(q_i, n_i) + margin)` with Euclidean `d`.
pub fn triplet_loss(batch: &[Triplet], margin: f64) -> Result<TripletLoss> {
    if !(margin > 0.0) {
        return Err(Error::invalid("triplet margin must be positive"));
    }
    let mut loss = 0.0;
    let mut active = 0;
    let mut grads = Vec::with_capacity(batch.len());
    for t in batch {
        let dim = t.query.len();
        if t.positive.len() != dim || t.negative.len() != dim {
            return Err(Error::invalid("triplet descriptors differ in dimension"));
        }
        let dp = euclidean(&t.query, &t.positive)?;
        let dn = euclidean(&t.query, &t.negative)?;
        let slack = dp - dn + margin;
        if slack > 0.0 {
            loss += slack;
            active += 1;
            let (gq_p, gp) = euclidean_backward(&t.query, &t.positive, 1.0)?;
            let (gq_n, gn) = euclidean_backward(&t.query, &t.negative, -1.0)?;
            let query = gq_p.iter().zip(&gq_n).map(|(a, b)| a + b).collect();
            grads.push(TripletGrads { query, positive: gp, negative: gn });
        } else {
            grads.push(TripletGrads { query: vec![0.0; dim], positive: vec![0.0; dim], negative: vec![0.0; dim] });
        }
    }
    Ok(TripletLoss { loss, grads, active })
}

/// Smallest `|d(q,p) - d(q,n) + margin|` over the batch.
pub fn triplet_hinge_margin(batch: &[Triplet], margin: f64) -> f64 {
    batch
        .iter()
        .filter_map(|t| {
            let dp = euclidean(&t.query, &t.positive).ok()?;
            let dn = euclidean(&t.query, &t.negative).ok()?;
            Some((dp - dn + margin).abs())
        })
        .fold(f64::INFINITY, f64::min)
}

/// Database descriptors and frame positions sampled for negative mining.
#[derive(Debug, Clone, Default)]
pub struct MiningCache {
    /// Database ids of the cached items.
    pub ids: Vec<usize>,
    pub descriptors: Vec<Vec<f64>>,
    pub positions: Vec<Vec<UtmPoint>>,
}

impl MiningCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// For each query, the `k` cached items nearest in descriptor space whose frames all
/// lie farther than `exclusion` meters from every query frame. Returns database ids;
/// ties in distance resolve to the smaller id.
pub fn mine_negatives(
    queries: &[Vec<f64>],
    query_positions: &[Vec<UtmPoint>],
    cache: &MiningCache,
    exclusion: f64,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if cache.is_empty() {
        return Err(Error::invalid("empty mining cache"));
    }
    if queries.len() != query_positions.len() {
        return Err(Error::invalid("query descriptor and position counts differ"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let mut out = Vec::with_capacity(queries.len());
    for (qi, (q, qpos)) in queries.iter().zip(query_positions).enumerate() {
        let mut eligible: Vec<(f64, usize)> = Vec::new();
        for (c, &id) in cache.ids.iter().enumerate() {
            if min_frame_distance(qpos, &cache.positions[c])? > exclusion {
                eligible.push((euclidean(q, &cache.descriptors[c])?, id));
            }
        }
        if eligible.is_empty() {
            return Err(Error::MiningExhausted(format!("no cached item is farther than {exclusion} m from query {qi}")));
        }
        eligible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(eligible.into_iter().take(k).map(|(_, id)| id).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosfaceParams {
    pub scale: f64,
    pub margin: f64,
}

impl Default for CosfaceParams {
    fn default() -> Self {
        Self { scale: DEFAULT_COSFACE_SCALE, margin: DEFAULT_COSFACE_MARGIN }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosfaceLoss {
    pub loss: f64,
    pub grad_feature: Vec<f64>,
    /// Gradient w.r.t. the raw (unnormalized) class weight rows, row-major.
    pub grad_weights: Vec<f64>,
}

/// CosFace loss for one feature. `class_weights` holds one row of length `feature.len()`
/// per class; rows and feature are normalized internally, so gradients are taken w.r.t.
/// the raw values.
pub fn cosface_loss(feature: &[f64], label: usize, class_weights: &[f64], params: &CosfaceParams) -> Result<CosfaceLoss> {
    let dim = feature.len();
    if dim == 0 || class_weights.len() % dim != 0 {
        return Err(Error::invalid("class weight table does not match the feature dimension"));
    }
    let n_classes = class_weights.len() / dim;
    if label >= n_classes {
        return Err(Error::invalid(format!("label {label} outside {n_classes} active classes")));
    }
    if !(params.scale > 0.0) || !(0.0..1.0).contains(&params.margin) {
        return Err(Error::invalid("CosFace requires scale > 0 and 0 <= margin < 1"));
    }
    let f = l2_normalize(feature)?;
    let rows: Vec<&[f64]> = class_weights.chunks(dim).collect();
    let unit_rows = rows.iter().map(|w| l2_normalize(w)).collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = unit_rows
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let cos: f64 = f.iter().zip(w).map(|(a, b)| a * b).sum();
            params.scale * (cos - if j == label { params.margin } else { 0.0 })
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let loss = max + z.ln() - logits[label];

    let mut grad_f = vec![0.0; dim];
    let mut grad_weights = Vec::with_capacity(class_weights.len());
    for (j, (row, unit)) in rows.iter().zip(&unit_rows).enumerate() {
        let softmax = (logits[j] - max).exp() / z;
        let dcos = params.scale * (softmax - if j == label { 1.0 } else { 0.0 });
        for (g, w) in grad_f.iter_mut().zip(unit.iter()) {
            *g += dcos * w;
        }
        let d_unit: Vec<f64> = f.iter().map(|x| dcos * x).collect();
        grad_weights.extend(l2_normalize_backward(row, &d_unit)?);
    }
    let grad_feature = l2_normalize_backward(feature, &grad_f)?;
    Ok(CosfaceLoss { loss, grad_feature, grad_weights })
}

/// Cosine similarity between two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub seq2seq: f64,
    pub im2im: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { seq2seq: 10_000.0, im2im: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.seq2seq >= 0.0) || !(self.im2im >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.seq2seq == 0.0 && self.im2im == 0.0 {
            return Err(Error::invalid("at least one loss weight must be non-zero"));
        }
        Ok(())
    }
}

/// A scalar loss with its gradient over the shared flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grads: Vec<f64>,
}

/// `w_seq * L_seq + w_im * L_im`, with gradients combined the same way.
pub fn multitask_loss(seq: &LossTerm, im: &LossTerm, weights: &LossWeights) -> Result<LossTerm> {
    weights.validate()?;
    if seq.grads.len() != im.grads.len() {
        return Err(Error::invalid("branch gradients cover different parameter sets"));
    }
    let grads = seq
        .grads
        .iter()
        .zip(&im.grads)
        .map(|(gs, gi)| weights.seq2seq * gs + weights.im2im * gi)
        .collect();
    Ok(LossTerm { value: weights.seq2seq * seq.value + weights.im2im * im.value, grads })
}
