//! Frame-by-frame sequence matching over a similarity matrix, scoring
//! constant-velocity lines.
//!
//! A line with start `s` and velocity `v` visits cells `(i, round(s + v*i))`. The line
//! family also contains every line's time mirror, so a matrix and its row+column
//! reversal score identically.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::aggregate::FrameStack;
use crate::diffcore::{dot, norm};
use crate::error::{Error, Result};

/// Dense `rows x cols` similarity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::invalid(format!("{} values do not form a non-empty {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Both axes reversed.
    pub fn reversed(&self) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().rev().copied().collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityParams {
    pub v_min: f64,
    pub v_max: f64,
    pub v_steps: usize,
}

impl Default for VelocityParams {
    fn default() -> Self {
        Self { v_min: 0.8, v_max: 1.2, v_steps: 5 }
    }
}

impl VelocityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min > 0.0 && self.v_min <= self.v_max && self.v_max.is_finite()) || self.v_steps == 0 {
            return Err(Error::invalid("velocities need 0 < v_min <= v_max and v_steps >= 1"));
        }
        Ok(())
    }

    pub fn velocities(&self) -> Vec<f64> {
        if self.v_steps == 1 {
            return vec![(self.v_min + self.v_max) / 2.0];
        }
        let step = (self.v_max - self.v_min) / (self.v_steps - 1) as f64;
        (0..self.v_steps).map(|k| self.v_min + step * k as f64).collect()
    }
}

/// Cosine similarity of every query frame against every database frame.
pub fn sim_matrix(query: &FrameStack, db: &FrameStack) -> Result<SimMatrix> {
    if query.dim() != db.dim() {
        return Err(Error::invalid(format!("frame dims differ: {} vs {}", query.dim(), db.dim())));
    }
    let qn: Vec<f64> = (0..query.len()).map(|i| norm(query.frame(i))).collect();
    let dn: Vec<f64> = (0..db.len()).map(|j| norm(db.frame(j))).collect();
    if qn.iter().chain(&dn).any(|n| *n == 0.0) {
        return Err(Error::Degenerate("zero frame descriptor".into()));
    }
    let mut data = Vec::with_capacity(query.len() * db.len());
    for i in 0..query.len() {
        for j in 0..db.len() {
            data.push(dot(query.frame(i), db.frame(j)) / (qn[i] * dn[j]));
        }
    }
    SimMatrix::new(query.len(), db.len(), data)
}

/// Best mean similarity over the forward lines of `m`. Values along a line are summed
/// in sorted order so the result does not depend on traversal direction.
fn forward_lines(m: &SimMatrix, velocities: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut cells = Vec::with_capacity(m.rows);
    for &v in velocities {
        let reach = (v * (m.rows - 1) as f64).ceil() as i64 + 1;
        for s in -reach..=m.cols as i64 {
            cells.clear();
            for i in 0..m.rows {
                let j = (s as f64 + v * i as f64).round();
                if j >= 0.0 && (j as usize) < m.cols {
                    cells.push(m.get(i, j as usize));
                }
            }
            if cells.is_empty() {
                continue;
            }
            cells.sort_by(f64::total_cmp);
            let score = cells.iter().sum::<f64>() / cells.len() as f64;
            if score > best {
                best = score;
            }
        }
    }
    best
}

pub fn seq_score(m: &SimMatrix, v: &VelocityParams) -> Result<f64> {
    v.validate()?;
    if m.data.is_empty() {
        return Err(Error::invalid("empty similarity matrix"));
    }
    let vs = v.velocities();
    Ok(forward_lines(m, &vs).max(forward_lines(&m.reversed(), &vs)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqMatchResult {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Frame-pair similarity evaluations performed.
    pub frame_comparisons: u64,
}

/// Ranks database sequences by line score, best first, ties by index.
pub fn seqmatch_rank(
    query: &FrameStack,
    db: &[FrameStack],
    n: usize,
    v: &VelocityParams,
    threads: usize,
) -> Result<SeqMatchResult> {
    if db.is_empty() {
        return Err(Error::invalid("empty database"));
    }
    v.validate()?;
    let counter = AtomicU64::new(0);
    let score_one = |d: &FrameStack| -> Result<f64> {
        let m = sim_matrix(query, d)?;
        counter.fetch_add((m.rows * m.cols) as u64, Ordering::Relaxed);
        seq_score(&m, v)
    };
    let scores: Vec<f64> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| db.par_iter().map(score_one).collect::<Result<_>>())?
    } else {
        db.iter().map(score_one).collect::<Result<_>>()?
    };
    let mut order: Vec<usize> = (0..db.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n.min(db.len()));
    Ok(SeqMatchResult {
        scores: order.iter().map(|&i| scores[i]).collect(),
        indices: order,
        frame_comparisons: counter.into_inner(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{l2_normalize, seeded_rng};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> SimMatrix {
        let mut rng = seeded_rng(seed);
        SimMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn unit_stack(len: usize, dim: usize, rng: &mut crate::diffcore::Rng) -> FrameStack {
        let frames: Vec<Vec<f64>> =
            (0..len).map(|_| l2_normalize(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()).collect();
        FrameStack::new(&frames).unwrap()
    }

    /// Lines enumerated from an explicit cell walk over a generous offset window, in both
    /// time directions.
    fn oracle_score(m: &SimMatrix, v: &VelocityParams) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for vel in v.velocities() {
            for s in -200i64..200 {
                for mirrored in [false, true] {
                    let mut sum = 0.0;
                    let mut vals = Vec::new();
                    for i in 0..m.rows as i64 {
                        let j = (s as f64 + vel * i as f64).round() as i64;
                        if j < 0 || j >= m.cols as i64 {
                            continue;
                        }
                        let (r, c) = if mirrored {
                            ((m.rows as i64 - 1 - i) as usize, (m.cols as i64 - 1 - j) as usize)
                        } else {
                            (i as usize, j as usize)
                        };
                        vals.push(m.get(r, c));
                    }
                    if vals.is_empty() {
                        continue;
                    }
                    vals.sort_by(f64::total_cmp);
                    for x in &vals {
                        sum += x;
                    }
                    best = best.max(sum / vals.len() as f64);
                }
            }
        }
        best
    }

    #[test]
    fn identical_and_orthogonal_frames() {
        let mut rng = seeded_rng(1);
        let q = unit_stack(5, 8, &mut rng);
        let m = sim_matrix(&q, &q).unwrap();
        for i in 0..5 {
            assert!((m.get(i, i) - 1.0).abs() < 1e-12);
        }
        let a = FrameStack::new(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let b = FrameStack::new(&[vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(sim_matrix(&a, &b).unwrap().data, vec![0.0, 0.0]);
        assert!(sim_matrix(&a, &FrameStack::new(&[vec![1.0]]).unwrap()).is_err());
    }

    #[test]
    fn sim_matrix_matches_dot_oracle() {
        let mut rng = seeded_rng(2);
        let q = unit_stack(3, 6, &mut rng);
        let d = unit_stack(3, 6, &mut rng);
        let m = sim_matrix(&q, &d).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let direct: f64 = q.frame(i).iter().zip(d.frame(j)).map(|(a, b)| a * b).sum();
                assert!((m.get(i, j) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_examples() {
        let v = VelocityParams::default();
        let mut eye = vec![0.0; 25];
        for i in 0..5 {
            eye[i * 5 + i] = 1.0;
        }
        assert_eq!(seq_score(&SimMatrix::new(5, 5, eye).unwrap(), &v).unwrap(), 1.0);
        assert_eq!(seq_score(&SimMatrix::new(3, 4, vec![0.0; 12]).unwrap(), &v).unwrap(), 0.0);
        assert!(SimMatrix::new(0, 3, vec![]).is_err());
        assert_eq!(v.velocities(), vec![0.8, 0.9, 1.0, 1.1, 1.2]);
    }

    #[test]
    fn score_matches_line_enumeration() {
        let v = VelocityParams::default();
        for seed in 0..20 {
            let m = random_matrix(4, 6, seed);
            assert_eq!(seq_score(&m, &v).unwrap(), oracle_score(&m, &v));
        }
    }

    #[test]
    fn rank_puts_exact_copy_first_and_counts_ops() {
        let mut rng = seeded_rng(3);
        let db: Vec<FrameStack> = (0..100).map(|_| unit_stack(5, 16, &mut rng)).collect();
        let r = seqmatch_rank(&db[37], &db, 10, &VelocityParams::default(), 1).unwrap();
        assert_eq!(r.indices[0], 37);
        assert_eq!(r.frame_comparisons, 2500);
        assert!(seqmatch_rank(&db[0], &[], 1, &VelocityParams::default(), 1).is_err());
    }

    #[test]
    fn rank_matches_oracle_and_threads_agree() {
        let mut rng = seeded_rng(4);
        let db: Vec<FrameStack> = (0..50).map(|_| unit_stack(5, 8, &mut rng)).collect();
        let q = unit_stack(5, 8, &mut rng);
        let v = VelocityParams::default();
        let r = seqmatch_rank(&q, &db, 50, &v, 1).unwrap();
        let mut oracle: Vec<(f64, usize)> =
            db.iter().enumerate().map(|(i, d)| (oracle_score(&sim_matrix(&q, d).unwrap(), &v), i)).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        assert_eq!(r.indices, oracle.iter().map(|o| o.1).collect::<Vec<_>>());
        assert_eq!(seqmatch_rank(&q, &db, 50, &v, 4).unwrap(), r);
    }

    proptest! {
        #[test]
        fn reversal_invariant(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>()) {
            let m = random_matrix(rows, cols, seed);
            let v = VelocityParams::default();
            prop_assert_eq!(seq_score(&m, &v).unwrap(), seq_score(&m.reversed(), &v).unwrap());
        }
    }
}
