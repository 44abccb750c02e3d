//! UTM-plane geometry, ground-truth matching and geographic class partitioning.
//!
//! Classes are formed by square UTM cells crossed with heading buckets. Training on
//! classes whose views overlap heavily destabilises a classification loss, so the
//! classes are split into groups in which no two members are adjacent, and the
//! training loop visits one group at a time.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Default correctness radius for a retrieved sequence, in meters.
pub const MATCH_THRESHOLD_M: f64 = 25.0;

/// Position on the UTM plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtmPoint {
    pub easting: f64,
    pub northing: f64,
}

impl UtmPoint {
    pub fn new(easting: f64, northing: f64) -> Self {
        Self { easting, northing }
    }

    fn is_finite(&self) -> bool {
        self.easting.is_finite() && self.northing.is_finite()
    }
}

/// Euclidean distance on the UTM plane.
pub fn geodist(a: UtmPoint, b: UtmPoint) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid("non-finite UTM coordinate"));
    }
    Ok((a.easting - b.easting).hypot(a.northing - b.northing))
}

/// Smallest distance between any frame of `query` and any frame of `candidate`.
pub fn min_frame_distance(query: &[UtmPoint], candidate: &[UtmPoint]) -> Result<f64> {
    if query.is_empty() || candidate.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    let mut best = f64::INFINITY;
    for &q in query {
        for &c in candidate {
            best = best.min(geodist(q, c)?);
        }
    }
    Ok(best)
}

/// A candidate sequence is correct when at least one of its frames lies strictly
/// closer than `threshold` to at least one query frame.
pub fn is_match(query: &[UtmPoint], candidate: &[UtmPoint], threshold: f64) -> Result<bool> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("match threshold must be > 0, got {threshold}")));
    }
    Ok(min_frame_distance(query, candidate)? < threshold)
}

/// Class label: UTM cell indices plus heading bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PlaceClass {
    pub cell_u: i64,
    pub cell_v: i64,
    pub heading_bucket: u32,
}

impl PlaceClass {
    pub fn new(cell_u: i64, cell_v: i64, heading_bucket: u32) -> Self {
        Self { cell_u, cell_v, heading_bucket }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionParams {
    /// Cell side in meters.
    pub cell_size: f64,
    pub heading_buckets: u32,
    pub group_stride_space: u32,
    pub group_stride_heading: u32,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self { cell_size: 10.0, heading_buckets: 12, group_stride_space: 2, group_stride_heading: 2 }
    }
}

impl PartitionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::invalid("cell_size must be a positive finite number"));
        }
        if self.heading_buckets == 0 {
            return Err(Error::invalid("heading_buckets must be >= 1"));
        }
        if self.group_stride_space < 2 {
            return Err(Error::invalid("group_stride_space must be >= 2 to separate neighbouring cells"));
        }
        if self.heading_buckets > 1 {
            if self.group_stride_heading < 2 {
                return Err(Error::invalid("group_stride_heading must be >= 2"));
            }
            // Otherwise the wrap-around pair (H-1, 0) can land in the same group.
            if self.heading_buckets % self.group_stride_heading != 0 {
                return Err(Error::invalid("heading_buckets must be a multiple of group_stride_heading"));
            }
        }
        Ok(())
    }

    pub fn bucket_width_deg(&self) -> f64 {
        360.0 / self.heading_buckets as f64
    }

    pub fn n_groups(&self) -> usize {
        let s = self.group_stride_space as usize;
        s * s * self.group_stride_heading.max(1) as usize
    }
}

/// Wraps a heading into `[0, 360)`.
pub fn wrap_heading(heading_deg: f64) -> f64 {
    let h = heading_deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

pub fn assign_class(p: UtmPoint, heading_deg: f64, params: &PartitionParams) -> Result<PlaceClass> {
    if !heading_deg.is_finite() {
        return Err(Error::invalid("non-finite heading"));
    }
    if !p.is_finite() {
        return Err(Error::invalid("non-finite UTM coordinate"));
    }
    params.validate()?;
    let cell_u = (p.easting / params.cell_size).floor() as i64;
    let cell_v = (p.northing / params.cell_size).floor() as i64;
    let h = wrap_heading(heading_deg);
    let bucket = ((h / params.bucket_width_deg()).floor() as u32).min(params.heading_buckets - 1);
    Ok(PlaceClass { cell_u, cell_v, heading_bucket: bucket })
}

/// Adjacent classes: Chebyshev-1 neighbouring cells at the same heading bucket, or the
/// same cell with heading buckets one apart (cyclically).
pub fn classes_adjacent(a: &PlaceClass, b: &PlaceClass, heading_buckets: u32) -> bool {
    let du = (a.cell_u - b.cell_u).abs();
    let dv = (a.cell_v - b.cell_v).abs();
    if a.heading_bucket == b.heading_bucket {
        return du.max(dv) == 1;
    }
    if du == 0 && dv == 0 && heading_buckets > 1 {
        let h = heading_buckets as i64;
        let dh = (a.heading_bucket as i64 - b.heading_bucket as i64).rem_euclid(h);
        return dh == 1 || dh == h - 1;
    }
    false
}

/// Flattened group index of a class under modular striding.
pub fn group_index(class: &PlaceClass, params: &PartitionParams) -> usize {
    let s = params.group_stride_space as i64;
    let sh = params.group_stride_heading.max(1) as i64;
    let gu = class.cell_u.rem_euclid(s);
    let gv = class.cell_v.rem_euclid(s);
    let gh = (class.heading_bucket as i64).rem_euclid(sh);
    ((gu * s + gv) * sh + gh) as usize
}

/// Partition of the class set into mutually non-adjacent groups, visited round-robin.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSchedule {
    /// Non-empty groups in ascending flattened-index order; members sorted.
    pub groups: Vec<Vec<PlaceClass>>,
    pub current_group: usize,
    pub rotation_period: u64,
}

impl GroupSchedule {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn active(&self) -> &[PlaceClass] {
        &self.groups[self.current_group]
    }

    /// Group scheduled for a given training iteration.
    pub fn group_for_iteration(&self, iteration: u64) -> usize {
        ((iteration / self.rotation_period.max(1)) % self.groups.len() as u64) as usize
    }

    /// Moves the schedule to the group for `iteration`.
    pub fn sync(&mut self, iteration: u64) {
        self.current_group = self.group_for_iteration(iteration);
    }

    pub fn advance(&mut self) {
        self.current_group = (self.current_group + 1) % self.groups.len();
    }
}

pub fn build_groups(
    classes: impl IntoIterator<Item = PlaceClass>,
    params: &PartitionParams,
    rotation_period: u64,
) -> Result<GroupSchedule> {
    params.validate()?;
    if rotation_period == 0 {
        return Err(Error::invalid("rotation_period must be >= 1"));
    }
    let mut by_group: BTreeMap<usize, Vec<PlaceClass>> = BTreeMap::new();
    for class in classes {
        by_group.entry(group_index(&class, params)).or_default().push(class);
    }
    if by_group.is_empty() {
        return Err(Error::invalid("empty class set"));
    }
    let groups = by_group
        .into_values()
        .map(|mut g| {
            g.sort();
            g.dedup();
            g
        })
        .collect();
    Ok(GroupSchedule { groups, current_group: 0, rotation_period })
}
