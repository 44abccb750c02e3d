//! Binary checkpoints of the full training state.
//!
//! Little-endian layout:
//!
//! ```text
//! magic            4 bytes "SPCK"
//! version          u32 (1)
//! body_len         u64
//! body             body_len bytes (fields below, in order)
//! checksum         u64, FNV-1a over body
//! ```
//!
//! Body: model config, classes, partition params, rotation period, iteration,
//! parameter version, loss config, Adam config, parameters, first and second moments,
//! dense step count, per-class step counts. Vectors are a u64 length followed by their elements.

use std::fs;
use std::path::Path;

use crate::aggregate::InputMode;
use crate::error::{Error, Result};
use crate::geo::{build_groups, PartitionParams, PlaceClass};
use crate::loss::{CosfaceParams, LossWeights};
use crate::model::{AdamConfig, AdamState, EncoderKind, EncoderSpec, LossConfig, Model, ModelConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u32 = 1;

/// A training state together with the partition it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub partition: PartitionParams,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).map_or(true, |b| b > self.bytes.len() - self.pos) {
            return Err(Error::Format("checkpoint vector length exceeds the file".into()));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn encoder_tag(k: EncoderKind) -> u8 {
    match k {
        EncoderKind::Identity => 0,
        EncoderKind::Affine => 1,
        EncoderKind::Mlp2 => 2,
    }
}

fn encoder_from_tag(t: u8) -> Result<EncoderKind> {
    match t {
        0 => Ok(EncoderKind::Identity),
        1 => Ok(EncoderKind::Affine),
        2 => Ok(EncoderKind::Mlp2),
        _ => Err(Error::Format(format!("unknown encoder tag {t}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let cfg = &s.model.config;
        let mut w = Writer::default();
        w.u8(encoder_tag(cfg.encoder.kind));
        w.u64(cfg.encoder.raw_dim as u64);
        w.u64(cfg.encoder.dim as u64);
        w.u64(cfg.encoder.hidden as u64);
        w.u64(cfg.out_dim as u64);
        w.u8(match cfg.input_mode {
            InputMode::Clamp => 0,
            InputMode::Signed => 1,
        });
        w.f64(cfg.clamp_eps);
        w.u8(cfg.prenorm_frames as u8);

        w.u64(s.model.classes.len() as u64);
        for c in &s.model.classes {
            w.i64(c.cell_u);
            w.i64(c.cell_v);
            w.u32(c.heading_bucket);
        }
        let p = &self.partition;
        w.f64(p.cell_size);
        w.u32(p.heading_buckets);
        w.u32(p.group_stride_space);
        w.u32(p.group_stride_heading);
        w.u64(s.schedule.rotation_period);
        w.u64(s.iteration);
        w.u64(s.model.version);

        let l = &s.losses;
        for v in [l.weights.seq2seq, l.weights.im2im, l.triplet_margin, l.cosface.scale, l.cosface.margin] {
            w.f64(v);
        }
        let a = &s.adam_config;
        for v in [a.lr, a.beta1, a.beta2, a.eps] {
            w.f64(v);
        }
        w.f64s(&s.model.params);
        w.f64s(&s.adam.m);
        w.f64s(&s.adam.v);
        w.u64(s.adam.dense_steps);
        w.u64(s.adam.class_steps.len() as u64);
        for t in &s.adam.class_steps {
            w.u64(*t);
        }

        let body = w.0;
        let mut out = Vec::with_capacity(body.len() + 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&fnv1a(&body).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if body_len.checked_add(24) != Some(bytes.len() as u64) {
            return Err(Error::Integrity("checkpoint length does not match its header".into()));
        }
        let body = &bytes[16..16 + body_len as usize];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }

        let mut r = Reader { bytes: body, pos: 0 };
        let kind = encoder_from_tag(r.u8()?)?;
        let encoder = EncoderSpec {
            kind,
            raw_dim: r.u64()? as usize,
            dim: r.u64()? as usize,
            hidden: r.u64()? as usize,
        };
        let out_dim = r.u64()? as usize;
        let input_mode = match r.u8()? {
            0 => InputMode::Clamp,
            1 => InputMode::Signed,
            t => return Err(Error::Format(format!("unknown input mode tag {t}"))),
        };
        let config = ModelConfig { encoder, out_dim, input_mode, clamp_eps: r.f64()?, prenorm_frames: r.u8()? != 0 };

        let n_classes = r.len(20)?;
        let classes = (0..n_classes)
            .map(|_| Ok(PlaceClass::new(r.i64()?, r.i64()?, r.u32()?)))
            .collect::<Result<Vec<_>>>()?;
        let partition = PartitionParams {
            cell_size: r.f64()?,
            heading_buckets: r.u32()?,
            group_stride_space: r.u32()?,
            group_stride_heading: r.u32()?,
        };
        let rotation_period = r.u64()?;
        let iteration = r.u64()?;
        let version = r.u64()?;
        let losses = LossConfig {
            weights: LossWeights { seq2seq: r.f64()?, im2im: r.f64()? },
            triplet_margin: r.f64()?,
            cosface: CosfaceParams { scale: r.f64()?, margin: r.f64()? },
        };
        let adam_config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let params = r.f64s()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        let dense_steps = r.u64()?;
        let n_steps = r.len(8)?;
        let class_steps = (0..n_steps).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint body".into()));
        }

        let mut model = Model::from_parts(config, params, classes.clone()).map_err(|e| Error::Format(e.to_string()))?;
        model.version = version;
        if m.len() != model.params.len() || v.len() != model.params.len() || class_steps.len() != classes.len() {
            return Err(Error::Format("optimizer state shapes do not match the parameters".into()));
        }
        let schedule = build_groups(classes, &partition, rotation_period).map_err(|e| Error::Format(e.to_string()))?;
        let mut state = TrainState::new(model, schedule, adam_config, losses)?;
        state.adam = AdamState { m, v, dense_steps, class_steps };
        state.iteration = iteration;
        state.schedule.sync(iteration);
        Ok(Self { state, partition })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_world, WorldParams};
    use crate::train::{train, TrainConfig};

    fn trained() -> Checkpoint {
        let p = WorldParams { n_trajectories: 5, places_per_trajectory: 20, im2im_trajectories: 2, ..Default::default() };
        let ds = gen_world(&p, 2).unwrap();
        let cfg = TrainConfig { iterations: 7, out_dim: 16, cache_size: 40, ..Default::default() };
        Checkpoint { state: train(&cfg, &ds).unwrap().state, partition: cfg.partition }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = trained();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = trained().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Integrity(_))));
    }
}
