//! Exact nearest-neighbour retrieval over sequence descriptors, recall@N and
//! precision-recall evaluation, and the matching-cost benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::aggregate::{Aggregator, FrameStack};
use crate::diffcore::{l2_normalize, seeded_rng};
use crate::error::{Error, Result};
use crate::geo::{is_match, UtmPoint};
use crate::model::{raw_descriptor, Model};

pub const DEFAULT_RECALL_NS: [usize; 4] = [1, 5, 10, 20];
pub const PR_POINTS: usize = 100;

/// Rounds a descriptor through the 4-byte on-disk representation.
pub fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| *x as f32 as f64).collect()
}

/// Frozen database of unit-norm descriptors with the frame positions of each item.
#[derive(Debug, Clone)]
pub struct DescriptorStore {
    dim: usize,
    rows: Vec<f32>,
    positions: Vec<Vec<UtmPoint>>,
}

impl DescriptorStore {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[Vec<UtmPoint>] {
        &self.positions
    }
}

/// Normalizes and freezes database descriptors. Rows are stored as 4-byte floats.
pub fn build_store(descriptors: &[Vec<f64>], positions: Vec<Vec<UtmPoint>>) -> Result<DescriptorStore> {
    if descriptors.is_empty() {
        return Err(Error::invalid("empty descriptor set"));
    }
    if descriptors.len() != positions.len() {
        return Err(Error::invalid(format!(
            "{} descriptors but {} metadata entries",
            descriptors.len(),
            positions.len()
        )));
    }
    let dim = descriptors[0].len();
    if dim == 0 || descriptors.iter().any(|d| d.len() != dim) {
        return Err(Error::invalid("descriptors differ in dimension"));
    }
    let mut rows = Vec::with_capacity(dim * descriptors.len());
    for d in descriptors {
        rows.extend(l2_normalize(d)?.into_iter().map(|x| x as f32));
    }
    Ok(DescriptorStore { dim, rows, positions })
}

/// Ranked neighbours of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// Fewer than the requested number of neighbours exist.
    pub truncated: bool,
    /// Descriptor distance evaluations performed.
    pub distance_evals: u64,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| {
        let d = *x as f64 - *y as f64;
        d * d
    }).sum()
}

/// Exact top-`n` by Euclidean distance; equal distances rank the lower index first.
pub fn knn(store: &DescriptorStore, query: &[f64], n: usize) -> Result<RetrievalResult> {
    if query.len() != store.dim {
        return Err(Error::invalid(format!("query dim {} but store dim {}", query.len(), store.dim)));
    }
    if n == 0 {
        return Err(Error::invalid("N must be >= 1"));
    }
    let q: Vec<f32> = query.iter().map(|x| *x as f32).collect();
    let mut scored: Vec<(f64, usize)> = (0..store.len()).map(|i| (sq_dist(&q, store.row(i)), i)).collect();
    let keep = n.min(scored.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if keep < scored.len() {
        scored.select_nth_unstable_by(keep - 1, cmp);
        scored.truncate(keep);
    }
    scored.sort_by(cmp);
    Ok(RetrievalResult {
        indices: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0.sqrt()).collect(),
        truncated: n > store.len(),
        distance_evals: store.len() as u64,
    })
}

/// Percentage of queries with a correct database item among the first `n` results, for
/// each `n` in `ns`.
pub fn recall_at_n(
    results: &[RetrievalResult],
    query_positions: &[Vec<UtmPoint>],
    db_positions: &[Vec<UtmPoint>],
    ns: &[usize],
    threshold: f64,
) -> Result<Vec<(usize, f64)>> {
    if results.len() != query_positions.len() {
        return Err(Error::invalid("results do not cover all queries"));
    }
    if results.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    // Rank of the first correct prediction per query.
    let first_hit = results
        .iter()
        .zip(query_positions)
        .map(|(r, q)| {
            for (rank, &idx) in r.indices.iter().enumerate() {
                if is_match(q, &db_positions[idx], threshold)? {
                    return Ok(Some(rank));
                }
            }
            Ok(None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ns
        .iter()
        .map(|&n| {
            let hits = first_hit.iter().filter(|h| matches!(h, Some(r) if *r < n)).count();
            (n, 100.0 * hits as f64 / results.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall points from thresholding the top-1 distance at `n_points` evenly
/// spaced values spanning the observed range. A threshold accepting no query has
/// precision 1.
pub fn pr_curve(
    results: &[RetrievalResult],
    query_positions: &[Vec<UtmPoint>],
    db_positions: &[Vec<UtmPoint>],
    threshold_m: f64,
    n_points: usize,
) -> Result<Vec<PrPoint>> {
    if results.len() != query_positions.len() || results.is_empty() {
        return Err(Error::invalid("results do not cover all queries"));
    }
    let mut top1 = Vec::with_capacity(results.len());
    for (r, q) in results.iter().zip(query_positions) {
        let (&idx, &dist) = r
            .indices
            .first()
            .zip(r.distances.first())
            .ok_or_else(|| Error::invalid("query without a top-1 prediction"))?;
        top1.push((dist, is_match(q, &db_positions[idx], threshold_m)?));
    }
    let lo = top1.iter().map(|t| t.0).fold(f64::INFINITY, f64::min);
    let hi = top1.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let total = top1.len() as f64;
    Ok((0..n_points)
        .map(|k| {
            let t = if n_points == 1 { hi } else { lo + (hi - lo) * k as f64 / (n_points - 1) as f64 };
            let t = if k + 1 == n_points { hi } else { t };
            let accepted = top1.iter().filter(|x| x.0 <= t).count();
            let correct = top1.iter().filter(|x| x.0 <= t && x.1).count();
            let precision = if accepted == 0 { 1.0 } else { correct as f64 / accepted as f64 };
            PrPoint { threshold: t, precision, recall: correct as f64 / total }
        })
        .collect())
}

/// How sequence descriptors are computed from raw frame features.
#[derive(Debug, Clone, Copy)]
pub enum Extractor<'a> {
    /// Raw features pooled without any learned layer.
    Raw(Aggregator),
    Model(&'a Model, Aggregator),
}

impl Extractor<'_> {
    pub fn describe(&self, seq: &FrameStack) -> Result<Vec<f64>> {
        match self {
            Extractor::Raw(a) => raw_descriptor(seq, *a),
            Extractor::Model(m, a) => m.describe(seq, *a),
        }
    }

    pub fn aggregator(&self) -> Aggregator {
        match self {
            Extractor::Raw(a) | Extractor::Model(_, a) => *a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    Forward,
    /// Query frame order reversed before extraction; the database is untouched.
    Reversed,
}

/// Descriptors for a list of sequences, quantized to the on-disk precision. Output order
/// follows input order for any thread count.
pub fn extract_descriptors(
    seqs: &[FrameStack],
    extractor: &Extractor<'_>,
    mode: QueryMode,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let one = |s: &FrameStack| -> Result<Vec<f64>> {
        let d = match mode {
            QueryMode::Forward => extractor.describe(s)?,
            QueryMode::Reversed => extractor.describe(&s.reversed())?,
        };
        Ok(quantize(&d))
    };
    if threads <= 1 {
        return seqs.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| seqs.par_iter().map(one).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub aggregator: String,
    pub mode: QueryMode,
    pub dim: usize,
    pub n_queries: usize,
    pub n_database: usize,
    pub recalls: Vec<(usize, f64)>,
    pub pr: Vec<PrPoint>,
    pub distance_evals: u64,
    pub extraction_ms: f64,
    pub matching_ms: f64,
}

impl EvalReport {
    pub fn recall(&self, n: usize) -> Option<f64> {
        self.recalls.iter().find(|r| r.0 == n).map(|r| r.1)
    }

    /// `key=value` lines. Timing keys are included only on request so that the default
    /// report is reproducible byte for byte.
    pub fn to_kv(&self, with_timing: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "aggregator={}", self.aggregator);
        let _ = writeln!(s, "query_mode={}", match self.mode {
            QueryMode::Forward => "forward",
            QueryMode::Reversed => "reversed",
        });
        let _ = writeln!(s, "descriptor_dim={}", self.dim);
        let _ = writeln!(s, "queries={}", self.n_queries);
        let _ = writeln!(s, "database={}", self.n_database);
        for (n, r) in &self.recalls {
            let _ = writeln!(s, "recall@{n}={r:.4}");
        }
        let _ = writeln!(s, "distance_evals={}", self.distance_evals);
        if with_timing {
            let _ = writeln!(s, "extraction_ms={:.3}", self.extraction_ms);
            let _ = writeln!(s, "matching_ms={:.3}", self.matching_ms);
        }
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for p in &self.pr {
            let _ = writeln!(s, "{:.8},{:.8},{:.8}", p.threshold, p.precision, p.recall);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub mode: QueryMode,
    pub threshold_m: f64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { mode: QueryMode::Forward, threshold_m: crate::geo::MATCH_THRESHOLD_M, threads: 1 }
    }
}

/// Matches precomputed query descriptors against the store and scores them.
pub fn eval_descriptors(
    store: &DescriptorStore,
    queries: &[Vec<f64>],
    query_positions: &[Vec<UtmPoint>],
    aggregator: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let max_n = *DEFAULT_RECALL_NS.iter().max().unwrap_or(&1);
    let t0 = Instant::now();
    let results = queries.iter().map(|q| knn(store, q, max_n)).collect::<Result<Vec<_>>>()?;
    let matching_ms = t0.elapsed().as_secs_f64() * 1e3;
    let recalls = recall_at_n(&results, query_positions, store.positions(), &DEFAULT_RECALL_NS, opts.threshold_m)?;
    let pr = pr_curve(&results, query_positions, store.positions(), opts.threshold_m, PR_POINTS)?;
    Ok(EvalReport {
        aggregator: aggregator.to_string(),
        mode: opts.mode,
        dim: store.dim(),
        n_queries: queries.len(),
        n_database: store.len(),
        recalls,
        pr,
        distance_evals: results.iter().map(|r| r.distance_evals).sum(),
        extraction_ms: 0.0,
        matching_ms,
    })
}

/// Full evaluation: extracts query descriptors (reversing frames in `Reversed` mode)
/// and matches them against `store`.
pub fn eval(
    store: &DescriptorStore,
    queries: &[FrameStack],
    query_positions: &[Vec<UtmPoint>],
    extractor: &Extractor<'_>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let descriptors = extract_descriptors(queries, extractor, opts.mode, opts.threads)?;
    let extraction_ms = t0.elapsed().as_secs_f64() * 1e3;
    let mut report = eval_descriptors(store, &descriptors, query_positions, &extractor.aggregator().to_string(), opts)?;
    report.extraction_ms = extraction_ms;
    Ok(report)
}

/// Builds the store from database sequences and evaluates the queries against it.
pub fn eval_sequences(
    database: &[FrameStack],
    db_positions: Vec<Vec<UtmPoint>>,
    queries: &[FrameStack],
    query_positions: &[Vec<UtmPoint>],
    extractor: &Extractor<'_>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let db = extract_descriptors(database, extractor, QueryMode::Forward, opts.threads)?;
    let db_ms = t0.elapsed().as_secs_f64() * 1e3;
    let store = build_store(&db, db_positions)?;
    let mut report = eval(&store, queries, query_positions, extractor, opts)?;
    report.extraction_ms += db_ms;
    Ok(report)
}

/// `n_sequences * dim * bytes_per_value`, overflow-checked.
pub fn storage_estimate(n_sequences: u64, dim: u64, bytes_per_value: u64) -> Result<u64> {
    if n_sequences == 0 || dim == 0 || bytes_per_value == 0 {
        return Err(Error::invalid("storage estimate inputs must be positive"));
    }
    n_sequences
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(bytes_per_value))
        .ok_or_else(|| Error::NumericOverflow("storage estimate overflows u64".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    pub db_size: usize,
    /// Median per-query brute-force matching time.
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub distance_evals_per_query: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub db_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Queries timed per repetition; the per-query time is their mean.
    pub queries_per_rep: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { db_size: 13_584, repetitions: 21, warmup: 3, queries_per_rep: 4, seed: 0 }
    }
}

fn random_unit(rng: &mut crate::diffcore::Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&v).unwrap_or_else(|_| {
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        e
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock time of single-threaded exact kNN per query, for each dimension.
pub fn bench_matching(dims: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repetitions == 0 || cfg.queries_per_rep == 0 || cfg.db_size == 0 {
        return Err(Error::invalid("benchmark sizes must be >= 1"));
    }
    let mut rows = Vec::with_capacity(dims.len());
    for &dim in dims {
        let mut rng = seeded_rng(cfg.seed ^ dim as u64);
        let db: Vec<Vec<f64>> = (0..cfg.db_size).map(|_| random_unit(&mut rng, dim)).collect();
        let store = build_store(&db, vec![Vec::new(); cfg.db_size])?;
        let queries: Vec<Vec<f64>> = (0..cfg.queries_per_rep).map(|_| random_unit(&mut rng, dim)).collect();
        let mut times = Vec::with_capacity(cfg.repetitions);
        let mut evals = 0;
        for rep in 0..cfg.warmup + cfg.repetitions {
            let t0 = Instant::now();
            for q in &queries {
                let r = knn(&store, q, 1)?;
                evals = r.distance_evals;
                std::hint::black_box(&r);
            }
            let ms = t0.elapsed().as_secs_f64() * 1e3 / cfg.queries_per_rep as f64;
            if rep >= cfg.warmup {
                times.push(ms);
            }
        }
        let min_ms = times.iter().copied().fold(f64::INFINITY, f64::min);
        let max_ms = times.iter().copied().fold(0.0, f64::max);
        rows.push(BenchRow { dim, db_size: cfg.db_size, median_ms: median(&mut times), min_ms, max_ms, distance_evals_per_query: evals });
    }
    Ok(rows)
}

/// Least-squares line `y = a + b x`; returns `(intercept, slope, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("linear fit needs at least two paired samples"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all x values equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((intercept, slope, r2))
}

/// Benchmark table plus storage arithmetic as `key=value` text.
pub fn bench_report(rows: &[BenchRow], storage: &[(u64, u64, u64)]) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "# dim,db_size,median_ms_per_query,min_ms,max_ms,distance_evals_per_query");
    for r in rows {
        let _ = writeln!(
            s,
            "bench={},{},{:.6},{:.6},{:.6},{}",
            r.dim, r.db_size, r.median_ms, r.min_ms, r.max_ms, r.distance_evals_per_query
        );
    }
    if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.dim as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.median_ms).collect();
        let (a, b, r2) = linear_fit(&xs, &ys)?;
        let _ = writeln!(s, "fit_intercept_ms={a:.6}");
        let _ = writeln!(s, "fit_ms_per_dim={b:.9}");
        let _ = writeln!(s, "fit_r2={r2:.6}");
        let monotone = ys.windows(2).all(|w| w[1] >= w[0]);
        let _ = writeln!(s, "non_decreasing_in_dim={monotone}");
    }
    for r in rows {
        // Approximate indexes are reported to reach up to a 64x kNN speed-up; shown as
        // arithmetic only.
        let _ = writeln!(s, "approx_knn_64x_ms[{}]={:.6}", r.dim, r.median_ms / 64.0);
    }
    for &(n, dim, bytes) in storage {
        let total = storage_estimate(n, dim, bytes)?;
        let _ = writeln!(
            s,
            "storage[{n}x{dim}x{bytes}B]={total} bytes ({:.3} GB, {:.3} GiB)",
            total as f64 / 1e9,
            total as f64 / (1u64 << 30) as f64
        );
    }
    let _ = writeln!(
        s,
        "storage_note=the widely quoted 0.75GB (800000x512, 4-byte values) and 36GB (800000x24576, 4-byte values) figures do not follow from sequences*dim*bytes, which gives 1.638 GB and 78.643 GB; 36GB is close to the 2-byte result 39.322 GB"
    );
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(e: f64) -> Vec<UtmPoint> {
        vec![UtmPoint::new(e, 0.0)]
    }

    #[test]
    fn build_store_examples() {
        assert!(build_store(&[], vec![]).is_err());
        let s = build_store(&[vec![2.0, 0.0]], vec![pos(0.0)]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.row(0), &[1.0f32, 0.0]);
        assert!(build_store(&[vec![1.0], vec![1.0, 0.0]], vec![pos(0.0), pos(1.0)]).is_err());
        assert!(build_store(&[vec![1.0]], vec![]).is_err());
    }

    #[test]
    fn knn_examples() {
        let s = build_store(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]], vec![pos(0.0); 3]).unwrap();
        let r = knn(&s, &[0.0, 1.0], 1).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert_eq!(r.distances, vec![0.0]);
        // rows 1 and 2 are equidistant from (1, 0)
        let r = knn(&s, &[1.0, 0.0], 3).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
        let r = knn(&s, &[1.0, 0.0], 5).unwrap();
        assert!(r.truncated && r.indices.len() == 3);
        assert_eq!(r.distance_evals, 3);
        assert!(knn(&s, &[1.0], 1).is_err());
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let mut rng = seeded_rng(1);
        let db: Vec<Vec<f64>> = (0..1000).map(|_| random_unit(&mut rng, 16)).collect();
        let store = build_store(&db, vec![Vec::new(); 1000]).unwrap();
        for _ in 0..20 {
            let q = quantize(&random_unit(&mut rng, 16));
            let r = knn(&store, &q, 20).unwrap();
            let mut all: Vec<(f64, usize)> = (0..1000)
                .map(|i| {
                    let d: f64 = store.row(i).iter().zip(&q).map(|(a, b)| (*a as f64 - b).powi(2)).sum();
                    (d, i)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(r.indices, all.iter().take(20).map(|x| x.1).collect::<Vec<_>>());
            // Same order under descending cosine similarity.
            let mut by_cos: Vec<(f64, usize)> = (0..1000)
                .map(|i| (-store.row(i).iter().zip(&q).map(|(a, b)| *a as f64 * b).sum::<f64>(), i))
                .collect();
            by_cos.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(r.indices, by_cos.iter().take(20).map(|x| x.1).collect::<Vec<_>>());
        }
    }

    fn result(indices: Vec<usize>, distances: Vec<f64>) -> RetrievalResult {
        RetrievalResult { indices, distances, truncated: false, distance_evals: 0 }
    }

    #[test]
    fn recall_examples() {
        let db = vec![pos(0.0), pos(100.0)];
        let queries = vec![pos(1.0), pos(99.0)];
        let results = vec![result(vec![0, 1], vec![0.1, 0.5]), result(vec![1, 0], vec![0.2, 0.4])];
        let r = recall_at_n(&results, &queries, &db, &[1, 5], 25.0).unwrap();
        assert_eq!(r, vec![(1, 100.0), (5, 100.0)]);

        let far = vec![pos(1000.0), pos(2000.0)];
        let r = recall_at_n(&results, &queries, &far, &[1, 5], 25.0).unwrap();
        assert_eq!(r, vec![(1, 0.0), (5, 0.0)]);

        let swapped = vec![result(vec![1, 0], vec![0.1, 0.5]), result(vec![1, 0], vec![0.2, 0.4])];
        let r = recall_at_n(&swapped, &queries, &db, &[1, 2], 25.0).unwrap();
        assert_eq!(r, vec![(1, 50.0), (2, 100.0)]);
    }

    #[test]
    fn recall_hand_placed_oracle() {
        // Five queries along the x axis, database items at fixed offsets.
        let db: Vec<Vec<UtmPoint>> = [0.0, 30.0, 60.0, 90.0, 500.0].iter().map(|&e| pos(e)).collect();
        let queries: Vec<Vec<UtmPoint>> = [5.0, 31.0, 70.0, 200.0, 480.0].iter().map(|&e| pos(e)).collect();
        let results = vec![
            result(vec![0, 1, 2], vec![0.1, 0.2, 0.3]),
            result(vec![3, 1, 0], vec![0.1, 0.2, 0.3]),
            result(vec![0, 1, 2], vec![0.1, 0.2, 0.3]),
            result(vec![4, 3, 2], vec![0.1, 0.2, 0.3]),
            result(vec![2, 3, 4], vec![0.1, 0.2, 0.3]),
        ];
        // Double-loop oracle.
        let mut expect = Vec::new();
        for n in [1, 2, 3] {
            let mut hits = 0;
            for (qi, r) in results.iter().enumerate() {
                let mut ok = false;
                for &idx in r.indices.iter().take(n) {
                    for a in &queries[qi] {
                        for b in &db[idx] {
                            if (a.easting - b.easting).abs() < 25.0 {
                                ok = true;
                            }
                        }
                    }
                }
                hits += ok as usize;
            }
            expect.push((n, 100.0 * hits as f64 / 5.0));
        }
        assert_eq!(recall_at_n(&results, &queries, &db, &[1, 2, 3], 25.0).unwrap(), expect);
        assert_eq!(expect, vec![(1, 20.0), (2, 40.0), (3, 80.0)]);
    }

    #[test]
    fn pr_examples() {
        let db = vec![pos(0.0), pos(1000.0)];
        let queries = vec![pos(0.0), pos(5.0)];
        let good = vec![result(vec![0], vec![0.2]), result(vec![0], vec![0.6])];
        let pts = pr_curve(&good, &queries, &db, 25.0, 100).unwrap();
        assert_eq!(pts.len(), 100);
        assert!(pts.iter().all(|p| p.precision == 1.0));
        assert_eq!(pts.last().unwrap().recall, 1.0);

        let bad = vec![result(vec![1], vec![0.2]), result(vec![1], vec![0.6])];
        let pts = pr_curve(&bad, &queries, &db, 25.0, 100).unwrap();
        assert!(pts.iter().all(|p| p.precision == 0.0 && p.recall == 0.0));
    }

    #[test]
    fn pr_mixed_matches_enumeration() {
        let db = vec![pos(0.0), pos(1000.0)];
        let queries: Vec<Vec<UtmPoint>> = (0..4).map(|_| pos(0.0)).collect();
        let results = vec![
            result(vec![0], vec![0.1]),
            result(vec![1], vec![0.2]),
            result(vec![0], vec![0.3]),
            result(vec![1], vec![0.4]),
        ];
        let pts = pr_curve(&results, &queries, &db, 25.0, 4).unwrap();
        let expect = [(0.1, 1.0, 0.25), (0.2, 0.5, 0.25), (0.3, 2.0 / 3.0, 0.5), (0.4, 0.5, 0.5)];
        for (p, e) in pts.iter().zip(expect) {
            assert!((p.threshold - e.0).abs() < 1e-12);
            assert!((p.precision - e.1).abs() < 1e-12 && (p.recall - e.2).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn storage_examples() {
        assert_eq!(storage_estimate(1, 1, 4).unwrap(), 4);
        assert_eq!(storage_estimate(800_000, 512, 4).unwrap(), 1_638_400_000);
        assert_eq!(storage_estimate(800_000, 24_576, 4).unwrap(), 78_643_200_000);
        assert!(storage_estimate(0, 1, 4).is_err());
        assert!(matches!(storage_estimate(u64::MAX, 2, 1), Err(Error::NumericOverflow(_))));
    }

    #[test]
    fn linear_fit_exact_line() {
        let (a, b, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bench_reports_evals() {
        let rows = bench_matching(&[8, 16], &BenchConfig { db_size: 50, repetitions: 3, warmup: 1, queries_per_rep: 2, seed: 1 }).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.distance_evals_per_query == 50));
        let text = bench_report(&rows, &[(800_000, 512, 4)]).unwrap();
        assert!(text.contains("storage[800000x512x4B]=1638400000 bytes"));
        assert!(text.contains("storage_note="));
    }
}
