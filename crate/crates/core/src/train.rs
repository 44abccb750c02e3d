//! The joint training loop: triplet batches with mined negatives on the sequence
//! branch, class batches from the active group on the image branch, periodic
//! validation, and best-snapshot tracking.

use std::fmt::Write as _;

use rand::seq::index::sample;

use crate::aggregate::{Aggregator, InputMode};
use crate::data::{sample_class_batch, sample_triplet_inputs, ClassPool, Dataset, PositiveMode, Role, Split, TripletSampler};
use crate::diffcore::{euclidean, seeded_rng, Rng};
use crate::error::{Error, Result};
use crate::geo::{build_groups, PartitionParams, MATCH_THRESHOLD_M};
use crate::loss::{mine_negatives, MiningCache};
use crate::model::{AdamConfig, EncoderKind, LossConfig, Model, ModelConfig, TrainState};
use crate::retrieval::{eval_sequences, EvalOptions, EvalReport, Extractor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seq_batch: usize,
    pub im_batch: usize,
    pub adam: AdamConfig,
    pub losses: LossConfig,
    pub encoder: EncoderKind,
    /// Encoder output dimension; 0 means the raw feature dimension.
    pub enc_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub input_mode: InputMode,
    pub prenorm_frames: bool,
    pub partition: PartitionParams,
    pub rotation_period: u64,
    pub cache_size: usize,
    pub cache_refresh: u64,
    pub positive_mode: PositiveMode,
    pub log_every: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            seq_batch: 4,
            im_batch: 32,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            losses: LossConfig::default(),
            encoder: EncoderKind::Affine,
            enc_dim: 0,
            hidden: 64,
            out_dim: 256,
            input_mode: InputMode::Clamp,
            prenorm_frames: false,
            partition: PartitionParams::default(),
            rotation_period: 25,
            cache_size: 1000,
            cache_refresh: 250,
            positive_mode: PositiveMode::Nearest,
            log_every: 50,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_batch == 0 && self.im_batch == 0 {
            return Err(Error::invalid("at least one branch needs a non-empty batch"));
        }
        if self.cache_size == 0 || self.cache_refresh == 0 || self.rotation_period == 0 {
            return Err(Error::invalid("cache_size, cache_refresh and rotation_period must be >= 1"));
        }
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.losses.weights.validate()?;
        self.partition.validate()
    }

    pub fn model_config(&self, raw_dim: usize) -> ModelConfig {
        let enc_dim = if self.enc_dim == 0 { raw_dim } else { self.enc_dim };
        let mut cfg = ModelConfig::new(self.encoder, raw_dim, enc_dim, self.out_dim);
        cfg.encoder.hidden = self.hidden;
        cfg.input_mode = self.input_mode;
        cfg.prenorm_frames = self.prenorm_frames;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub total: f64,
    pub seq_loss: f64,
    pub im_loss: f64,
    pub active_triplets: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: u64,
    pub val_r1: f64,
    pub model: Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    /// `(iteration, validation R@1)`, starting with iteration 0.
    pub evals: Vec<(u64, f64)>,
    pub best: Option<Snapshot>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("iteration,total,seq2seq,im2im,active_triplets,p\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.iteration, r.total, r.seq_loss, r.im_loss, r.active_triplets, r.p);
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from("iteration,val_recall@1\n");
        for (it, r) in &self.evals {
            let _ = writeln!(s, "{it},{r:.4}");
        }
        s
    }

    pub fn final_val_r1(&self) -> Option<f64> {
        self.evals.last().map(|e| e.1)
    }
}

/// Database and query stacks of one split.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub database: Vec<crate::aggregate::FrameStack>,
    pub db_positions: Vec<Vec<crate::geo::UtmPoint>>,
    pub queries: Vec<crate::aggregate::FrameStack>,
    pub query_positions: Vec<Vec<crate::geo::UtmPoint>>,
}

impl SplitData {
    pub fn new(ds: &Dataset, split: Split) -> Self {
        let db = ds.sequences(split, Role::Database);
        let q = ds.sequences(split, Role::Query);
        Self {
            database: db.iter().map(|s| ds.stack(s)).collect(),
            db_positions: db.iter().map(|s| ds.positions(s)).collect(),
            queries: q.iter().map(|s| ds.stack(s)).collect(),
            query_positions: q.iter().map(|s| ds.positions(s)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.database.is_empty() || self.queries.is_empty()
    }

    pub fn evaluate(&self, extractor: &Extractor<'_>, opts: &EvalOptions) -> Result<EvalReport> {
        eval_sequences(&self.database, self.db_positions.clone(), &self.queries, &self.query_positions, extractor, opts)
    }
}

fn refresh_cache(model: &Model, sampler: &TripletSampler, ds: &Dataset, size: usize, rng: &mut Rng) -> Result<MiningCache> {
    let n = sampler.database.len();
    let mut ids = sample(rng, n, size.min(n)).into_vec();
    ids.sort_unstable();
    let descriptors = ids.iter().map(|&i| model.seq_descriptor(&ds.stack(&sampler.database[i]))).collect::<Result<_>>()?;
    let positions = ids.iter().map(|&i| sampler.db_positions[i].clone()).collect();
    Ok(MiningCache { ids, descriptors, positions })
}

/// Runs the configured number of joint iterations on the train split, validating on the
/// val split at iteration 0, every `eval_every` iterations and at the end.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let pool = ClassPool::new(ds, &cfg.partition)?;
    let model = Model::init(cfg.model_config(ds.raw_dim()), pool.classes.clone(), &mut rng)?;
    let schedule = build_groups(pool.classes.clone(), &cfg.partition, cfg.rotation_period)?;
    let mut state = TrainState::new(model, schedule, cfg.adam, cfg.losses)?;
    let sampler = TripletSampler::new(ds, Split::Train)?;
    let val = SplitData::new(ds, Split::Val);

    let use_seq = cfg.seq_batch > 0 && cfg.losses.weights.seq2seq > 0.0;
    let use_im = cfg.im_batch > 0 && cfg.losses.weights.im2im > 0.0;

    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<Snapshot> = None;
    let validate = |state: &TrainState, evals: &mut Vec<(u64, f64)>, best: &mut Option<Snapshot>| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let report = val.evaluate(&Extractor::Model(&state.model, Aggregator::SeqGem), &EvalOptions::default())?;
        let r1 = report.recall(1).unwrap_or(0.0);
        evals.push((state.iteration, r1));
        if best.as_ref().map_or(true, |b| r1 > b.val_r1) {
            *best = Some(Snapshot { iteration: state.iteration, val_r1: r1, model: state.model.clone() });
        }
        Ok(())
    };
    validate(&state, &mut evals, &mut best)?;

    let mut cache = MiningCache::default();
    for it in 0..cfg.iterations {
        let seq_batch = if use_seq {
            if it % cfg.cache_refresh == 0 {
                cache = refresh_cache(&state.model, &sampler, ds, cfg.cache_size, &mut rng)?;
            }
            let model = &state.model;
            let mine = |qs: &[usize]| -> Result<Vec<usize>> {
                let descs = qs.iter().map(|&q| model.seq_descriptor(&ds.stack(&sampler.queries[q]))).collect::<Result<Vec<_>>>()?;
                let pos: Vec<_> = qs.iter().map(|&q| sampler.query_positions[q].clone()).collect();
                Ok(mine_negatives(&descs, &pos, &cache, MATCH_THRESHOLD_M, 1)?.into_iter().map(|v| v[0]).collect())
            };
            let choose = |q: usize, candidates: &[usize]| -> Result<usize> {
                let qd = model.seq_descriptor(&ds.stack(&sampler.queries[q]))?;
                let mut best = (f64::INFINITY, candidates[0]);
                for &c in candidates {
                    let d = euclidean(&qd, &model.seq_descriptor(&ds.stack(&sampler.database[c]))?)?;
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                Ok(best.1)
            };
            sample_triplet_inputs(ds, &sampler, &mut rng, cfg.seq_batch, choose, mine, cfg.positive_mode)?
        } else {
            Vec::new()
        };
        let im_batch = if use_im {
            sample_class_batch(ds, &pool, &mut state.schedule, cfg.im_batch, &mut rng)?
        } else {
            Vec::new()
        };
        let stats = state.train_step(&seq_batch, &im_batch)?;
        if state.iteration % cfg.log_every.max(1) == 0 {
            log.push(LogRow {
                iteration: state.iteration,
                total: stats.total,
                seq_loss: stats.seq_loss,
                im_loss: stats.im_loss,
                active_triplets: stats.active_triplets,
                p: state.model.p(),
            });
        }
        if cfg.eval_every > 0 && state.iteration % cfg.eval_every == 0 && state.iteration != cfg.iterations {
            validate(&state, &mut evals, &mut best)?;
        }
    }
    if cfg.iterations > 0 {
        validate(&state, &mut evals, &mut best)?;
    }
    Ok(TrainOutcome { state, log, evals, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_world, WorldParams};
    use crate::loss::LossWeights;

    fn tiny_world() -> Dataset {
        let p = WorldParams { n_trajectories: 5, places_per_trajectory: 20, im2im_trajectories: 2, ..Default::default() };
        gen_world(&p, 11).unwrap()
    }

    fn quick(iterations: u64) -> TrainConfig {
        TrainConfig { iterations, out_dim: 32, cache_size: 50, eval_every: 10, log_every: 5, ..Default::default() }
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let ds = tiny_world();
        let cfg = quick(0);
        let out = train(&cfg, &ds).unwrap();
        let mut rng = seeded_rng(cfg.seed);
        let pool = ClassPool::new(&ds, &cfg.partition).unwrap();
        let init = Model::init(cfg.model_config(ds.raw_dim()), pool.classes, &mut rng).unwrap();
        assert_eq!(out.state.model, init);
        assert_eq!(out.state.iteration, 0);
        assert_eq!(out.evals.len(), 1);
        assert!(out.log.is_empty());
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let ds = tiny_world();
        let a = train(&quick(30), &ds).unwrap();
        let b = train(&quick(30), &ds).unwrap();
        assert_eq!(a.state.model.params, b.state.model.params);
        assert_eq!(a.log_csv(), b.log_csv());
        assert_eq!(a.evals, b.evals);
        assert_eq!(a.log.len(), 6);
        assert_eq!(a.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 10, 20, 30]);
        let c = train(&TrainConfig { seed: 1, ..quick(30) }, &ds).unwrap();
        assert_ne!(a.state.model.params, c.state.model.params);
    }

    #[test]
    fn branch_weights_gate_parameter_groups() {
        let ds = tiny_world();
        let seq_only = TrainConfig { losses: LossConfig { weights: LossWeights { seq2seq: 10000.0, im2im: 0.0 }, ..Default::default() }, ..quick(5) };
        let out = train(&seq_only, &ds).unwrap();
        let init = train(&TrainConfig { iterations: 0, ..seq_only }, &ds).unwrap();
        let cw = out.state.model.layout.class_weights.clone();
        assert_eq!(out.state.model.params[cw.clone()], init.state.model.params[cw]);

        let im_only = TrainConfig { losses: LossConfig { weights: LossWeights { seq2seq: 0.0, im2im: 100.0 }, ..Default::default() }, ..quick(5) };
        let out = train(&im_only, &ds).unwrap();
        assert_eq!(out.state.model.p(), crate::aggregate::DEFAULT_P);
    }

    #[test]
    fn best_of_positive_mode_runs() {
        let ds = tiny_world();
        let out = train(&TrainConfig { positive_mode: PositiveMode::BestOf, ..quick(5) }, &ds).unwrap();
        assert_eq!(out.state.iteration, 5);
    }
}
