//! Datasets of geo-tagged frame features: on-disk formats, the synthetic world
//! generator used for desk-scale experiments, and batch sampling for both training
//! branches.
//!
//! A dataset directory holds `manifest.csv` (one row per frame record) and
//! `features.spfb` (the feature blob). Several frame records may point at the same
//! blob row; overlapping database windows share their frames this way.
//!
//! Blob layout, all little-endian:
//!
//! ```text
//! magic    4 bytes  "SPFB"
//! version  u32      1
//! count    u64      number of rows
//! dim      u32      values per row
//! values   f32 x count*dim, row-major
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::aggregate::FrameStack;
use crate::diffcore::{seeded_rng, Rng};
use crate::error::{Error, Result};
use crate::geo::{assign_class, is_match, min_frame_distance, PartitionParams, PlaceClass, UtmPoint, MATCH_THRESHOLD_M};
use crate::model::{LabeledImage, TripletInput};

pub const BLOB_MAGIC: &[u8; 4] = b"SPFB";
pub const BLOB_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str =
    "frame_id,seq_id,frame_idx,utm_east,utm_north,heading_deg,condition_id,split,role,feature_offset";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const BLOB_FILE: &str = "features.spfb";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Database,
    Query,
    Im2im,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),* })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)*
                    other => Err(Error::Format(format!("unknown {} '{other}'", stringify!($ty).to_lowercase()))),
                }
            }
        }
    };
}

text_enum!(Split { Train => "train", Val => "val", Test => "test" });
text_enum!(Role { Database => "database", Query => "query", Im2im => "im2im" });

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub seq_id: u64,
    pub frame_idx: u32,
    pub utm: UtmPoint,
    pub heading_deg: f64,
    pub condition_id: u32,
    pub split: Split,
    pub role: Role,
    pub feature_offset: u64,
}

/// Row-major 4-byte feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlob {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureBlob {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(format!("{} values do not form rows of dim {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|v| *v as f64).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&BLOB_VERSION.to_le_bytes())?;
        w.write_all(&(self.count() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Format("feature blob shorter than its header".into()));
        }
        if &bytes[0..4] != BLOB_MAGIC {
            return Err(Error::Format("bad feature blob magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BLOB_VERSION {
            return Err(Error::Format(format!("unsupported feature blob version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as u64;
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Integrity("feature blob header overflows".into()))?;
        let body = &bytes[20..];
        if body.len() as u64 != expected {
            return Err(Error::Integrity(format!(
                "feature blob declares {count}x{dim} values but carries {} bytes",
                body.len()
            )));
        }
        if dim == 0 {
            return Err(Error::Format("feature blob with zero dimension".into()));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { dim: dim as usize, data })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// An ordered run of frame records forming one query or database item.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub seq_id: u64,
    pub split: Split,
    pub role: Role,
    /// Indices into [`Dataset::frames`], in frame order.
    pub frames: Vec<usize>,
}

/// Manifest records plus their feature blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<FrameRecord>,
    pub blob: FeatureBlob,
}

impl Dataset {
    pub fn new(frames: Vec<FrameRecord>, blob: FeatureBlob) -> Result<Self> {
        let ds = Self { frames, blob };
        ds.validate()?;
        Ok(ds)
    }

    pub fn raw_dim(&self) -> usize {
        self.blob.dim
    }

    fn validate(&self) -> Result<()> {
        let count = self.blob.count() as u64;
        let mut ids = std::collections::BTreeSet::new();
        for f in &self.frames {
            if f.feature_offset >= count {
                return Err(Error::Integrity(format!("frame {} points past the feature blob", f.frame_id)));
            }
            if !ids.insert(f.frame_id) {
                return Err(Error::Format(format!("duplicate frame_id {}", f.frame_id)));
            }
        }
        let mut lengths: BTreeMap<Split, usize> = BTreeMap::new();
        for seq in self.all_sequences()? {
            if seq.role == Role::Im2im {
                continue;
            }
            let len = *lengths.entry(seq.split).or_insert(seq.frames.len());
            if len != seq.frames.len() {
                return Err(Error::Format(format!("sequence {} length differs within split {}", seq.seq_id, seq.split)));
            }
        }
        Ok(())
    }

    /// Every sequence, ordered by first appearance. Frames of a sequence must be
    /// contiguous with `frame_idx` running 0, 1, 2, ...
    pub fn all_sequences(&self) -> Result<Vec<SequenceSample>> {
        let mut out: Vec<SequenceSample> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, f) in self.frames.iter().enumerate() {
            match out.last_mut() {
                Some(last) if last.seq_id == f.seq_id => {
                    if f.frame_idx as usize != last.frames.len() {
                        return Err(Error::Format(format!("sequence {} frames out of order", f.seq_id)));
                    }
                    if f.split != last.split || f.role != last.role {
                        return Err(Error::Format(format!("sequence {} mixes splits or roles", f.seq_id)));
                    }
                    last.frames.push(i);
                }
                _ => {
                    if !seen.insert(f.seq_id) {
                        return Err(Error::Format(format!("sequence {} is not contiguous", f.seq_id)));
                    }
                    if f.frame_idx != 0 {
                        return Err(Error::Format(format!("sequence {} does not start at frame_idx 0", f.seq_id)));
                    }
                    out.push(SequenceSample { seq_id: f.seq_id, split: f.split, role: f.role, frames: vec![i] });
                }
            }
        }
        Ok(out)
    }

    pub fn sequences(&self, split: Split, role: Role) -> Vec<SequenceSample> {
        self.all_sequences()
            .unwrap_or_default()
            .into_iter()
            .filter(|s| s.split == split && s.role == role)
            .collect()
    }

    pub fn positions(&self, seq: &SequenceSample) -> Vec<UtmPoint> {
        seq.frames.iter().map(|&i| self.frames[i].utm).collect()
    }

    pub fn features(&self, frame: usize) -> Vec<f64> {
        self.blob.row_f64(self.frames[frame].feature_offset as usize)
    }

    pub fn stack(&self, seq: &SequenceSample) -> FrameStack {
        let data = seq.frames.iter().flat_map(|&i| self.features(i)).collect();
        FrameStack::from_flat(data, seq.frames.len(), self.blob.dim).expect("validated sequence")
    }

    /// Frame indices of the single-image training pool.
    pub fn im2im_frames(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].role == Role::Im2im).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_manifest(&self.frames, &dir.join(MANIFEST_FILE))?;
        self.blob.write_file(&dir.join(BLOB_FILE))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let frames = read_manifest(&dir.join(MANIFEST_FILE))?;
        let blob = FeatureBlob::read_file(&dir.join(BLOB_FILE))?;
        Self::new(frames, blob)
    }
}

pub fn write_manifest(frames: &[FrameRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{MANIFEST_HEADER}")?;
    for f in frames {
        // `{}` on f64 prints the shortest representation that parses back exactly.
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            f.frame_id,
            f.seq_id,
            f.frame_idx,
            f.utm.easting,
            f.utm.northing,
            f.heading_deg,
            f.condition_id,
            f.split,
            f.role,
            f.feature_offset
        )?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Format(format!("manifest line {line}: bad {name} '{s}'")))
}

pub fn read_manifest(path: &Path) -> Result<Vec<FrameRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != MANIFEST_HEADER {
        return Err(Error::Format(format!("unexpected manifest header '{}'", header.trim())));
    }
    let mut frames = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let ln = n + 2;
        if cols.len() != 10 {
            return Err(Error::Format(format!("manifest line {ln}: expected 10 columns, got {}", cols.len())));
        }
        let utm = UtmPoint::new(field(cols[3], "utm_east", ln)?, field(cols[4], "utm_north", ln)?);
        let heading_deg: f64 = field(cols[5], "heading_deg", ln)?;
        if !utm.easting.is_finite() || !utm.northing.is_finite() || !heading_deg.is_finite() {
            return Err(Error::Format(format!("manifest line {ln}: non-finite coordinate")));
        }
        frames.push(FrameRecord {
            frame_id: field(cols[0], "frame_id", ln)?,
            seq_id: field(cols[1], "seq_id", ln)?,
            frame_idx: field(cols[2], "frame_idx", ln)?,
            utm,
            heading_deg,
            condition_id: field(cols[6], "condition_id", ln)?,
            split: cols[7].trim().parse()?,
            role: cols[8].trim().parse()?,
            feature_offset: field(cols[9], "feature_offset", ln)?,
        });
    }
    Ok(frames)
}

/// Synthetic world parameters.
///
/// Every place has a latent signature `z`. An observation of a place under condition `c`
/// is `A_c z + b_c + N_c a + sigma * noise`, where `A_c` is a shared projection plus a
/// small per-condition distortion, `b_c` a per-condition offset, and `N_c a` an
/// appearance component in a low-rank subspace (with `a` fixed per place and
/// condition). `N_c` mixes a subspace shared by all conditions with one specific to
/// `c`, weighted by `nuisance_sharing`. Database sequences use condition 0. Training
/// queries use the middle conditions; validation and test queries use the last
/// condition, which the sequence branch never sees. The single-image pool lies in a
/// separate region and observes every place under every condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub n_trajectories: usize,
    pub places_per_trajectory: usize,
    pub place_spacing: f64,
    pub raw_dim: usize,
    pub n_conditions: usize,
    /// Per-observation noise standard deviation.
    pub condition_noise: f64,
    pub seq_length: usize,
    pub im2im_region_offset: f64,
    pub im2im_trajectories: usize,
    pub im2im_views_per_condition: usize,
    /// Dimension of the latent place signature.
    pub signal_dim: usize,
    /// Correlation of consecutive place signatures along a trajectory.
    pub place_correlation: f64,
    pub nuisance_rank: usize,
    pub nuisance_scale: f64,
    /// Fraction of the appearance subspace shared across conditions, in `[0, 1]`.
    pub nuisance_sharing: f64,
    pub offset_scale: f64,
    pub distortion: f64,
    /// Start offset between consecutive query windows.
    pub query_stride: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_trajectories: 15,
            places_per_trajectory: 100,
            place_spacing: 10.0,
            raw_dim: 32,
            n_conditions: 4,
            condition_noise: 0.3,
            seq_length: 5,
            im2im_region_offset: 100_000.0,
            im2im_trajectories: 6,
            im2im_views_per_condition: 1,
            signal_dim: 16,
            place_correlation: 0.5,
            nuisance_rank: 6,
            nuisance_scale: 1.5,
            nuisance_sharing: 0.7,
            offset_scale: 0.5,
            distortion: 0.3,
            query_stride: 2,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_trajectories", self.n_trajectories),
            ("places_per_trajectory", self.places_per_trajectory),
            ("raw_dim", self.raw_dim),
            ("n_conditions", self.n_conditions),
            ("seq_length", self.seq_length),
            ("signal_dim", self.signal_dim),
            ("query_stride", self.query_stride),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.places_per_trajectory < self.seq_length {
            return Err(Error::invalid("places_per_trajectory must be >= seq_length"));
        }
        for (name, v) in [
            ("condition_noise", self.condition_noise),
            ("nuisance_scale", self.nuisance_scale),
            ("offset_scale", self.offset_scale),
            ("distortion", self.distortion),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.nuisance_sharing) {
            return Err(Error::invalid("nuisance_sharing must lie in [0, 1]"));
        }
        if !(self.place_spacing > 0.0) || !(self.place_correlation.abs() < 1.0) {
            return Err(Error::invalid("place_spacing must be > 0 and |place_correlation| < 1"));
        }
        let track = self.place_spacing * self.places_per_trajectory as f64;
        if self.im2im_trajectories > 0 && self.im2im_region_offset < track + 2.0 * MATCH_THRESHOLD_M {
            return Err(Error::invalid("im2im_region_offset too small to keep the image pool disjoint"));
        }
        Ok(())
    }

    /// Split of the `t`-th sequence trajectory: 3 of every 5 train, then val, then test.
    pub fn split_of(&self, t: usize) -> Split {
        match t % 5 {
            3 => Split::Val,
            4 => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn held_out_condition(&self) -> u32 {
        (self.n_conditions - 1) as u32
    }

    /// Conditions used by training queries.
    pub fn train_query_conditions(&self) -> Vec<u32> {
        match self.n_conditions {
            1 => vec![0],
            2 => vec![1],
            n => (1..n as u32 - 1).collect(),
        }
    }
}

struct ConditionModel {
    projection: Vec<f64>,
    offset: Vec<f64>,
    nuisance: Vec<f64>,
}

fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

struct WorldBuilder<'a> {
    params: &'a WorldParams,
    rng: Rng,
    conditions: Vec<ConditionModel>,
    frames: Vec<FrameRecord>,
    blob: Vec<f32>,
    next_seq: u64,
}

/// Trajectory through a region: evenly spaced places along a straight line.
struct Trajectory {
    places: Vec<UtmPoint>,
    heading_deg: f64,
    signatures: Vec<Vec<f64>>,
}

impl<'a> WorldBuilder<'a> {
    fn new(params: &'a WorldParams, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let (d, k, r) = (params.raw_dim, params.signal_dim, params.nuisance_rank);
        let shared = gaussian_vec(&mut rng, d * k, 1.0 / (k as f64).sqrt());
        let nuisance_std = params.nuisance_scale / (r.max(1) as f64).sqrt();
        let shared_nuisance = gaussian_vec(&mut rng, d * r, nuisance_std);
        let (ws, wo) = (params.nuisance_sharing.sqrt(), (1.0 - params.nuisance_sharing).sqrt());
        let conditions = (0..params.n_conditions)
            .map(|_| {
                let distortion = gaussian_vec(&mut rng, d * k, params.distortion / (k as f64).sqrt());
                let offset = gaussian_vec(&mut rng, d, params.offset_scale);
                let own = gaussian_vec(&mut rng, d * r, nuisance_std);
                ConditionModel {
                    projection: shared.iter().zip(&distortion).map(|(a, b)| a + b).collect(),
                    offset,
                    nuisance: shared_nuisance.iter().zip(&own).map(|(a, b)| ws * a + wo * b).collect(),
                }
            })
            .collect();
        Self { params, rng, conditions, frames: Vec::new(), blob: Vec::new(), next_seq: 0 }
    }

    fn trajectory(&mut self, origin: UtmPoint) -> Trajectory {
        let p = self.params;
        let heading_deg: f64 = self.rng.gen_range(0.0..360.0);
        let (de, dn) = (heading_deg.to_radians().sin(), heading_deg.to_radians().cos());
        let places = (0..p.places_per_trajectory)
            .map(|i| {
                let s = i as f64 * p.place_spacing;
                UtmPoint::new(origin.easting + s * de, origin.northing + s * dn)
            })
            .collect();
        let rho = p.place_correlation;
        let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(p.places_per_trajectory);
        for i in 0..p.places_per_trajectory {
            let fresh = gaussian_vec(&mut self.rng, p.signal_dim, 1.0);
            let z = if i == 0 {
                fresh
            } else {
                let prev = &signatures[i - 1];
                prev.iter().zip(&fresh).map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b).collect()
            };
            signatures.push(z);
        }
        Trajectory { places, heading_deg, signatures }
    }

    /// Condition-specific appearance coefficients, one draw per place.
    fn appearance(&mut self, n_places: usize) -> Vec<Vec<f64>> {
        (0..n_places).map(|_| gaussian_vec(&mut self.rng, self.params.nuisance_rank, 1.0)).collect()
    }

    /// Appends one observation to the blob and returns its row.
    fn observe(&mut self, signature: &[f64], appearance: &[f64], condition: usize) -> u64 {
        let p = self.params;
        let c = &self.conditions[condition];
        let (k, r) = (p.signal_dim, p.nuisance_rank);
        let row = (self.blob.len() / p.raw_dim) as u64;
        for j in 0..p.raw_dim {
            let signal: f64 = c.projection[j * k..(j + 1) * k].iter().zip(signature).map(|(a, b)| a * b).sum();
            let nuisance: f64 = c.nuisance[j * r..(j + 1) * r].iter().zip(appearance).map(|(a, b)| a * b).sum();
            let noise = p.condition_noise * self.rng.sample::<f64, _>(StandardNormal);
            self.blob.push((signal + c.offset[j] + nuisance + noise) as f32);
        }
        row
    }

    fn push_sequence(&mut self, traj: &Trajectory, rows: &[u64], start: usize, cond: u32, split: Split, role: Role) {
        let seq_id = self.next_seq;
        self.next_seq += 1;
        for i in 0..self.params.seq_length {
            let place = start + i;
            self.frames.push(FrameRecord {
                frame_id: self.frames.len() as u64,
                seq_id,
                frame_idx: i as u32,
                utm: traj.places[place],
                heading_deg: traj.heading_deg,
                condition_id: cond,
                split,
                role,
                feature_offset: rows[place],
            });
        }
    }

    fn build(mut self) -> Result<Dataset> {
        let p = *self.params;
        let base = UtmPoint::new(500_000.0, 4_000_000.0);
        // Sequence trajectories sit on a grid far enough apart never to match each other.
        let gap = p.place_spacing * p.places_per_trajectory as f64 * 2.0 + 10.0 * MATCH_THRESHOLD_M;
        for t in 0..p.n_trajectories {
            let origin = UtmPoint::new(base.easting + (t % 8) as f64 * gap, base.northing + (t / 8) as f64 * gap);
            let traj = self.trajectory(origin);
            let split = p.split_of(t);
            let n = p.places_per_trajectory;

            let appearance0 = self.appearance(n);
            let db_rows: Vec<u64> = (0..n).map(|i| self.observe(&traj.signatures[i], &appearance0[i], 0)).collect();
            for start in 0..=n - p.seq_length {
                self.push_sequence(&traj, &db_rows, start, 0, split, Role::Database);
            }

            let conditions = if split == Split::Train { p.train_query_conditions() } else { vec![p.held_out_condition()] };
            for cond in conditions {
                let appearance = if cond == 0 { appearance0.clone() } else { self.appearance(n) };
                let rows: Vec<u64> =
                    (0..n).map(|i| self.observe(&traj.signatures[i], &appearance[i], cond as usize)).collect();
                for start in (0..=n - p.seq_length).step_by(p.query_stride) {
                    self.push_sequence(&traj, &rows, start, cond, split, Role::Query);
                }
            }
        }

        for t in 0..p.im2im_trajectories {
            let origin = UtmPoint::new(base.easting + p.im2im_region_offset, base.northing + t as f64 * gap);
            let traj = self.trajectory(origin);
            for cond in 0..p.n_conditions {
                let appearance = self.appearance(p.places_per_trajectory);
                for place in 0..p.places_per_trajectory {
                    for _ in 0..p.im2im_views_per_condition {
                        let row = self.observe(&traj.signatures[place], &appearance[place], cond);
                        let seq_id = self.next_seq;
                        self.next_seq += 1;
                        self.frames.push(FrameRecord {
                            frame_id: self.frames.len() as u64,
                            seq_id,
                            frame_idx: 0,
                            utm: traj.places[place],
                            heading_deg: traj.heading_deg,
                            condition_id: cond as u32,
                            split: Split::Train,
                            role: Role::Im2im,
                            feature_offset: row,
                        });
                    }
                }
            }
        }
        Dataset::new(self.frames, FeatureBlob::new(p.raw_dim, self.blob)?)
    }
}

/// Generates a synthetic world; identical seeds give identical datasets.
pub fn gen_world(params: &WorldParams, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let ds = WorldBuilder::new(params, seed).build()?;
    check_world(&ds)?;
    Ok(ds)
}

/// Generation-time checks: every query has a ground-truth database match and the image
/// pool stays clear of the sequence region.
fn check_world(ds: &Dataset) -> Result<()> {
    for split in [Split::Train, Split::Val, Split::Test] {
        let db: Vec<Vec<UtmPoint>> = ds.sequences(split, Role::Database).iter().map(|s| ds.positions(s)).collect();
        for q in ds.sequences(split, Role::Query) {
            let qp = ds.positions(&q);
            let mut found = false;
            for d in &db {
                if is_match(&qp, d, MATCH_THRESHOLD_M)? {
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::invalid(format!("query {} has no ground-truth match", q.seq_id)));
            }
        }
    }
    let im: Vec<UtmPoint> = ds.im2im_frames().iter().map(|&i| ds.frames[i].utm).collect();
    let seq: Vec<UtmPoint> = ds.frames.iter().filter(|f| f.role != Role::Im2im).map(|f| f.utm).collect();
    if !im.is_empty() && !seq.is_empty() {
        // Regions are separated along easting; compare bounding extents first.
        let max_seq_e = seq.iter().map(|p| p.easting).fold(f64::NEG_INFINITY, f64::max);
        let min_im_e = im.iter().map(|p| p.easting).fold(f64::INFINITY, f64::min);
        if min_im_e - max_seq_e <= MATCH_THRESHOLD_M && min_frame_distance(&im, &seq)? <= MATCH_THRESHOLD_M {
            return Err(Error::invalid("image pool overlaps the sequence region"));
        }
    }
    Ok(())
}

/// How the positive of a training query is chosen among database sequences matching it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveMode {
    /// Geographically nearest (mean distance between aligned frames).
    Nearest,
    /// Among all matching database sequences, the one nearest in descriptor space.
    BestOf,
}

/// Training queries with their geographic positives.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    pub queries: Vec<SequenceSample>,
    pub database: Vec<SequenceSample>,
    pub query_positions: Vec<Vec<UtmPoint>>,
    pub db_positions: Vec<Vec<UtmPoint>>,
    /// Nearest positive per query (database index).
    pub nearest_positive: Vec<usize>,
    /// All matching database indices per query.
    pub potential_positives: Vec<Vec<usize>>,
    /// Queries dropped for lacking any positive.
    pub skipped: usize,
}

fn aligned_distance(a: &[UtmPoint], b: &[UtmPoint]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    a.iter()
        .zip(b)
        .map(|(p, q)| (p.easting - q.easting).hypot(p.northing - q.northing))
        .sum::<f64>()
        / n as f64
}

impl TripletSampler {
    pub fn new(ds: &Dataset, split: Split) -> Result<Self> {
        let database = ds.sequences(split, Role::Database);
        if database.is_empty() {
            return Err(Error::invalid(format!("split {split} has no database sequences")));
        }
        let db_positions: Vec<Vec<UtmPoint>> = database.iter().map(|s| ds.positions(s)).collect();
        let mut queries = Vec::new();
        let mut query_positions = Vec::new();
        let mut nearest_positive = Vec::new();
        let mut potential_positives = Vec::new();
        let mut skipped = 0;
        for q in ds.sequences(split, Role::Query) {
            let qp = ds.positions(&q);
            let mut matches = Vec::new();
            for (i, d) in db_positions.iter().enumerate() {
                if is_match(&qp, d, MATCH_THRESHOLD_M)? {
                    matches.push(i);
                }
            }
            let Some(&best) = matches.iter().min_by(|&&a, &&b| {
                aligned_distance(&qp, &db_positions[a]).total_cmp(&aligned_distance(&qp, &db_positions[b])).then(a.cmp(&b))
            }) else {
                skipped += 1;
                continue;
            };
            queries.push(q);
            query_positions.push(qp);
            nearest_positive.push(best);
            potential_positives.push(matches);
        }
        if queries.is_empty() {
            return Err(Error::invalid(format!("no query in split {split} has a positive within {MATCH_THRESHOLD_M} m")));
        }
        Ok(Self { queries, database, query_positions, db_positions, nearest_positive, potential_positives, skipped })
    }

    /// Query indices for one batch, drawn uniformly with replacement.
    pub fn sample_queries(&self, rng: &mut Rng, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| rng.gen_range(0..self.queries.len())).collect()
    }
}

/// Assembles raw-feature triplets for a batch of training queries. `choose_positive`
/// picks among the candidate positives of a query (ignored for [`PositiveMode::Nearest`]);
/// `mine` returns one negative database index per query.
pub fn sample_triplet_inputs(
    ds: &Dataset,
    sampler: &TripletSampler,
    rng: &mut Rng,
    batch_size: usize,
    mut choose_positive: impl FnMut(usize, &[usize]) -> Result<usize>,
    mine: impl FnOnce(&[usize]) -> Result<Vec<usize>>,
    mode: PositiveMode,
) -> Result<Vec<TripletInput>> {
    let queries = sampler.sample_queries(rng, batch_size);
    let negatives = mine(&queries)?;
    if negatives.len() != queries.len() {
        return Err(Error::invalid("miner returned a different number of negatives"));
    }
    queries
        .iter()
        .zip(&negatives)
        .map(|(&q, &n)| {
            let positive = match mode {
                PositiveMode::Nearest => sampler.nearest_positive[q],
                PositiveMode::BestOf => choose_positive(q, &sampler.potential_positives[q])?,
            };
            if is_match(&sampler.query_positions[q], &sampler.db_positions[n], MATCH_THRESHOLD_M)? {
                return Err(Error::invalid("mined negative lies within the match radius of its query"));
            }
            Ok(TripletInput {
                query: ds.stack(&sampler.queries[q]),
                positive: ds.stack(&sampler.database[positive]),
                negative: ds.stack(&sampler.database[n]),
            })
        })
        .collect()
}

/// Class-labeled single-image pool.
#[derive(Debug, Clone)]
pub struct ClassPool {
    pub classes: Vec<PlaceClass>,
    /// Frame indices per class, parallel to `classes`.
    pub members: Vec<Vec<usize>>,
    index: BTreeMap<PlaceClass, usize>,
}

impl ClassPool {
    pub fn new(ds: &Dataset, params: &PartitionParams) -> Result<Self> {
        let mut by_class: BTreeMap<PlaceClass, Vec<usize>> = BTreeMap::new();
        for i in ds.im2im_frames() {
            let f = &ds.frames[i];
            by_class.entry(assign_class(f.utm, f.heading_deg, params)?).or_default().push(i);
        }
        if by_class.is_empty() {
            return Err(Error::invalid("dataset has no im2im frames"));
        }
        let classes: Vec<PlaceClass> = by_class.keys().copied().collect();
        let index = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Ok(Self { classes, members: by_class.into_values().collect(), index })
    }

    pub fn members_of(&self, class: &PlaceClass) -> Option<&[usize]> {
        self.index.get(class).map(|&i| self.members[i].as_slice())
    }
}

/// One single-image batch from the active class group: a class is drawn uniformly, then
/// one of its images. An empty active group advances the schedule to the next group
/// that has images.
pub fn sample_class_batch(
    ds: &Dataset,
    pool: &ClassPool,
    schedule: &mut crate::geo::GroupSchedule,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<LabeledImage>> {
    let populated = |g: &[PlaceClass]| g.iter().any(|c| pool.members_of(c).is_some_and(|m| !m.is_empty()));
    let mut tries = 0;
    while !populated(schedule.active()) {
        schedule.advance();
        tries += 1;
        if tries > schedule.len() {
            return Err(Error::invalid("no class group has images"));
        }
    }
    let active: Vec<PlaceClass> =
        schedule.active().iter().copied().filter(|c| pool.members_of(c).is_some_and(|m| !m.is_empty())).collect();
    Ok((0..batch_size)
        .map(|_| {
            let class = *active.choose(rng).expect("non-empty group");
            let members = pool.members_of(&class).expect("populated class");
            let frame = *members.choose(rng).expect("non-empty class");
            LabeledImage { features: ds.features(frame), class }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::build_groups;

    fn small() -> WorldParams {
        WorldParams { n_trajectories: 5, places_per_trajectory: 20, im2im_trajectories: 2, ..Default::default() }
    }

    #[test]
    fn noiseless_single_condition_queries_equal_database() {
        let p = WorldParams { n_conditions: 1, condition_noise: 0.0, ..small() };
        let ds = gen_world(&p, 3).unwrap();
        for split in [Split::Train, Split::Test] {
            let db = ds.sequences(split, Role::Database);
            for q in ds.sequences(split, Role::Query) {
                let qp = ds.positions(&q);
                let twin = db.iter().find(|d| ds.positions(d) == qp).expect("aligned window");
                assert_eq!(ds.stack(&q), ds.stack(twin));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let a = gen_world(&small(), 42).unwrap();
        let b = gen_world(&small(), 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.blob, gen_world(&small(), 43).unwrap().blob);

        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, a);
        let bytes1 = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        back.write(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), bytes1);
    }

    #[test]
    fn blob_format_errors() {
        let blob = FeatureBlob::new(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut bytes = Vec::new();
        blob.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SPFB");
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(FeatureBlob::from_bytes(&bytes).unwrap(), blob);

        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(FeatureBlob::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(FeatureBlob::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(FeatureBlob::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Integrity(_))));
        let mut bad = bytes.clone();
        bad[8] = 3;
        assert!(matches!(FeatureBlob::from_bytes(&bad), Err(Error::Integrity(_))));
    }

    #[test]
    fn manifest_rejects_bad_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "frame_id,seq_id\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Format(_))));
        fs::write(&path, format!("{MANIFEST_HEADER}\n0,0,0,1.5,2.5,90,0,train,bogus,0\n")).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_rejects_non_contiguous_sequences() {
        let rec = |frame_id, seq_id, frame_idx| FrameRecord {
            frame_id,
            seq_id,
            frame_idx,
            utm: UtmPoint::new(0.0, 0.0),
            heading_deg: 0.0,
            condition_id: 0,
            split: Split::Test,
            role: Role::Database,
            feature_offset: 0,
        };
        let blob = FeatureBlob::new(1, vec![0.0]).unwrap();
        assert!(Dataset::new(vec![rec(0, 0, 0), rec(1, 1, 0), rec(2, 0, 1)], blob.clone()).is_err());
        assert!(Dataset::new(vec![rec(0, 0, 0), rec(1, 0, 2)], blob.clone()).is_err());
        assert!(Dataset::new(vec![rec(0, 0, 0), rec(1, 0, 1), rec(2, 1, 0)], blob).is_err());
    }

    #[test]
    fn world_structure_invariants() {
        let p = small();
        let ds = gen_world(&p, 1).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            for s in ds.sequences(split, Role::Query).iter().chain(&ds.sequences(split, Role::Database)) {
                assert_eq!(s.frames.len(), p.seq_length);
            }
        }
        for q in ds.sequences(Split::Test, Role::Query) {
            assert_eq!(ds.frames[q.frames[0]].condition_id, p.held_out_condition());
        }
        let im: Vec<UtmPoint> = ds.im2im_frames().iter().map(|&i| ds.frames[i].utm).collect();
        let seq: Vec<UtmPoint> = ds.frames.iter().filter(|f| f.role != Role::Im2im).map(|f| f.utm).collect();
        assert!(min_frame_distance(&im, &seq).unwrap() > MATCH_THRESHOLD_M);
        let conds: std::collections::BTreeSet<u32> =
            ds.im2im_frames().iter().map(|&i| ds.frames[i].condition_id).collect();
        assert_eq!(conds.len(), p.n_conditions);
    }

    fn far_miner<'a>(s: &'a TripletSampler) -> impl FnOnce(&[usize]) -> Result<Vec<usize>> + 'a {
        move |qs: &[usize]| {
            qs.iter()
                .map(|&q| {
                    (0..s.database.len())
                        .find(|&d| !is_match(&s.query_positions[q], &s.db_positions[d], MATCH_THRESHOLD_M).unwrap())
                        .ok_or_else(|| Error::MiningExhausted("none".into()))
                })
                .collect()
        }
    }

    #[test]
    fn triplet_sampling_constraints_and_determinism() {
        let ds = gen_world(&small(), 5).unwrap();
        let sampler = TripletSampler::new(&ds, Split::Train).unwrap();
        assert_eq!(sampler.skipped, 0);
        let mut rng = seeded_rng(9);
        for _ in 0..1000 {
            let qs = sampler.sample_queries(&mut rng, 1);
            let q = qs[0];
            let p = sampler.nearest_positive[q];
            assert!(is_match(&sampler.query_positions[q], &sampler.db_positions[p], MATCH_THRESHOLD_M).unwrap());
        }
        let run = |seed| {
            let mut rng = seeded_rng(seed);
            sample_triplet_inputs(&ds, &sampler, &mut rng, 4, |_, c| Ok(c[0]), far_miner(&sampler), PositiveMode::Nearest)
                .unwrap()
        };
        assert_eq!(run(1), run(1));
    }

    #[test]
    fn unique_triplet_on_tiny_world() {
        // Two co-located sequences (database + query) and one far database sequence.
        let mut frames = Vec::new();
        let mut add = |seq_id: u64, e: f64, role: Role, offset: u64| {
            frames.push(FrameRecord {
                frame_id: frames.len() as u64,
                seq_id,
                frame_idx: 0,
                utm: UtmPoint::new(e, 0.0),
                heading_deg: 0.0,
                condition_id: 0,
                split: Split::Train,
                role,
                feature_offset: offset,
            })
        };
        add(0, 0.0, Role::Database, 0);
        add(1, 0.0, Role::Query, 1);
        add(2, 1000.0, Role::Database, 2);
        let ds = Dataset::new(frames, FeatureBlob::new(2, vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0]).unwrap()).unwrap();
        let sampler = TripletSampler::new(&ds, Split::Train).unwrap();
        let mut rng = seeded_rng(0);
        let t = sample_triplet_inputs(&ds, &sampler, &mut rng, 1, |_, c| Ok(c[0]), far_miner(&sampler), PositiveMode::Nearest)
            .unwrap();
        assert_eq!(t[0].query.as_flat(), &[0.8999999761581421, 0.10000000149011612]);
        assert_eq!(t[0].positive.as_flat(), &[1.0, 0.0]);
        assert_eq!(t[0].negative.as_flat(), &[0.0, 1.0]);
    }

    #[test]
    fn class_batches_stay_in_active_group() {
        let ds = gen_world(&small(), 7).unwrap();
        let params = PartitionParams::default();
        let pool = ClassPool::new(&ds, &params).unwrap();
        let mut schedule = build_groups(pool.classes.clone(), &params, 1).unwrap();
        let mut rng = seeded_rng(2);
        for it in 0..1000 {
            schedule.sync(it);
            let batch = sample_class_batch(&ds, &pool, &mut schedule, 8, &mut rng).unwrap();
            assert!(batch.iter().all(|b| schedule.active().contains(&b.class)));
        }
        let a = sample_class_batch(&ds, &pool, &mut schedule.clone(), 8, &mut seeded_rng(3)).unwrap();
        let b = sample_class_batch(&ds, &pool, &mut schedule.clone(), 8, &mut seeded_rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_world_has_one_label() {
        let p = WorldParams { n_trajectories: 1, places_per_trajectory: 5, im2im_trajectories: 1, place_spacing: 0.5, ..small() };
        let ds = gen_world(&p, 1).unwrap();
        let params = PartitionParams { cell_size: 1.0e7, ..Default::default() };
        let pool = ClassPool::new(&ds, &params).unwrap();
        assert_eq!(pool.classes.len(), 1);
        let mut schedule = build_groups(pool.classes.clone(), &params, 1).unwrap();
        let batch = sample_class_batch(&ds, &pool, &mut schedule, 16, &mut seeded_rng(1)).unwrap();
        assert!(batch.iter().all(|b| b.class == pool.classes[0]));
    }
}
