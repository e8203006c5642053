//! Proposal ↔ ground-truth matching.
//!
//! The pairwise cost is `−λ·p(class) + BCE + Dice` over segment masks. Two
//! matchers are provided: an exact Hungarian solver over the full cost matrix,
//! and the disentangled matcher, which uses the fact that every instance query
//! comes from one segment and every segment belongs to at most one object.
//! Restricting each proposal to that object leaves at most one finite cost per
//! row, so a per-column minimum is globally optimal.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside costs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean BCE over segments plus the Laplace-smoothed Dice term.
pub fn mask_cost(probs: &[f64], gt: &[bool]) -> Result<f64> {
    if probs.len() != gt.len() {
        return Err(Error::shape("mask_cost", &[probs.len()], &[gt.len()]));
    }
    if probs.is_empty() {
        return Err(Error::Contract("mask_cost on empty masks".into()));
    }
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&p, &t) in probs.iter().zip(gt) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        psum += p;
        if t {
            bce -= p.ln();
            inter += p;
            tsum += 1.0;
        } else {
            bce -= (1.0 - p).ln();
        }
    }
    let bce = bce / probs.len() as f64;
    let dice = 1.0 - 2.0 * (inter + 1.0) / (psum + tsum + 1.0);
    Ok(bce + dice)
}

/// Dense `K_ins × K_gt` cost matrix. Entries are finite or `+∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub lambda: f64,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, lambda: f64) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("cost_matrix", &[rows, cols], &[data.len()]));
        }
        if data.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::Contract("cost entries must be finite or +inf".into()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            lambda,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged cost rows".into()));
        }
        Self::new(r, c, rows.concat(), DEFAULT_LAMBDA)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.cols + k]
    }
}

/// `C[i][k] = −λ·class_probs[i][c_k] + mask_cost(mask_probs[:, i], m_k)`.
///
/// `gt_class_cols[k]` is the class-head column of ground truth `k`;
/// `gt_masks[k]` its segment mask.
pub fn cost_matrix(
    class_probs: &Tensor,
    mask_probs: &Tensor,
    gt_masks: &[Vec<bool>],
    gt_class_cols: &[usize],
    lambda: f64,
) -> Result<CostMatrix> {
    let (k_ins, width) = class_probs.dims2()?;
    let (m, k2) = mask_probs.dims2()?;
    if k2 != k_ins {
        return Err(Error::shape("cost_matrix", class_probs.shape(), mask_probs.shape()));
    }
    if gt_masks.len() != gt_class_cols.len() {
        return Err(Error::shape("cost_matrix", &[gt_masks.len()], &[gt_class_cols.len()]));
    }
    if let Some(&bad) = gt_class_cols.iter().find(|&&c| c + 1 >= width) {
        return Err(Error::Contract(format!(
            "ground-truth class column {bad} out of range for {} thing classes",
            width - 1
        )));
    }
    let columns = mask_columns(mask_probs, m, k_ins);
    let mut data = Vec::with_capacity(k_ins * gt_masks.len());
    for (i, col) in columns.iter().enumerate() {
        for (mask, &c) in gt_masks.iter().zip(gt_class_cols) {
            data.push(-lambda * class_probs.at(i, c) + mask_cost(col, mask)?);
        }
    }
    CostMatrix::new(k_ins, gt_masks.len(), data, lambda)
}

fn mask_columns(mask_probs: &Tensor, m: usize, k: usize) -> Vec<Vec<f64>> {
    let d = mask_probs.data();
    (0..k).map(|i| (0..m).map(|s| d[s * k + i]).collect()).collect()
}

/// `Ĉ`: at most one finite entry per proposal row; every other entry is `+∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedCost {
    rows: usize,
    cols: usize,
    /// `(ground truth, cost)` of the single finite entry of each row.
    entries: Vec<Option<(usize, f64)>>,
}

impl ConstrainedCost {
    pub fn new(cols: usize, entries: Vec<Option<(usize, f64)>>) -> Result<Self> {
        for e in entries.iter().flatten() {
            if e.0 >= cols || !e.1.is_finite() {
                return Err(Error::Contract(format!("invalid constrained entry {e:?}")));
            }
        }
        Ok(Self {
            rows: entries.len(),
            cols,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, i: usize) -> Option<(usize, f64)> {
        self.entries[i]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        match self.entries[i] {
            Some((kk, c)) if kk == k => c,
            _ => f64::INFINITY,
        }
    }

    pub fn to_dense(&self, lambda: f64) -> CostMatrix {
        let mut data = vec![f64::INFINITY; self.rows * self.cols];
        for (i, e) in self.entries.iter().enumerate() {
            if let Some((k, c)) = e {
                data[i * self.cols + k] = *c;
            }
        }
        CostMatrix::new(self.rows, self.cols, data, lambda).expect("consistent dims")
    }
}

/// Keeps `C[i][k]` only where proposal `i`'s source segment belongs to object `k`.
pub fn constrain(c: &CostMatrix, query_segment: &[usize], segment_gt: &[Option<usize>]) -> Result<ConstrainedCost> {
    if query_segment.len() != c.rows {
        return Err(Error::shape("constrain", &[c.rows], &[query_segment.len()]));
    }
    let entries = query_segment
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let gt = *segment_gt
                .get(s)
                .ok_or_else(|| Error::Contract(format!("segment {s} out of range")))?;
            Ok(match gt {
                Some(k) if k < c.cols => Some((k, c.get(i, k))),
                Some(k) => return Err(Error::Contract(format!("ground truth {k} out of range"))),
                None => None,
            })
        })
        .collect::<Result<_>>()?;
    ConstrainedCost::new(c.cols, entries)
}

/// Builds `Ĉ` directly, evaluating only the finite entries (O(K_ins·M)).
pub fn constrained_cost_matrix(
    class_probs: &Tensor,
    mask_probs: &Tensor,
    gt_masks: &[Vec<bool>],
    gt_class_cols: &[usize],
    query_segment: &[usize],
    segment_gt: &[Option<usize>],
    lambda: f64,
) -> Result<ConstrainedCost> {
    let (k_ins, width) = class_probs.dims2()?;
    let (m, k2) = mask_probs.dims2()?;
    if k2 != k_ins || query_segment.len() != k_ins {
        return Err(Error::shape("constrained_cost_matrix", class_probs.shape(), mask_probs.shape()));
    }
    if let Some(&bad) = gt_class_cols.iter().find(|&&c| c + 1 >= width) {
        return Err(Error::Contract(format!("ground-truth class column {bad} out of range")));
    }
    let d = mask_probs.data();
    let mut col = vec![0.0; m];
    let mut entries = Vec::with_capacity(k_ins);
    for (i, &s) in query_segment.iter().enumerate() {
        let gt = *segment_gt
            .get(s)
            .ok_or_else(|| Error::Contract(format!("segment {s} out of range")))?;
        entries.push(match gt {
            Some(k) => {
                for (r, v) in col.iter_mut().enumerate() {
                    *v = d[r * k_ins + i];
                }
                let c = -lambda * class_probs.at(i, gt_class_cols[k]) + mask_cost(&col, &gt_masks[k])?;
                Some((k, c))
            }
            None => None,
        });
    }
    ConstrainedCost::new(gt_masks.len(), entries)
}

/// Injective proposal ↔ ground-truth pairing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(proposal, ground truth)`, ascending by ground truth.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_proposals: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl Assignment {
    fn build(num_proposals: usize, num_gt: usize, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_by_key(|&(_, k)| k);
        let mut used_p = vec![false; num_proposals];
        let mut used_g = vec![false; num_gt];
        for &(i, k) in &pairs {
            assert!(!used_p[i] && !used_g[k], "assignment must be injective");
            used_p[i] = true;
            used_g[k] = true;
        }
        Self {
            pairs,
            unmatched_proposals: (0..num_proposals).filter(|&i| !used_p[i]).collect(),
            unmatched_gt: (0..num_gt).filter(|&k| !used_g[k]).collect(),
        }
    }

    /// Matched ground truth of each proposal.
    pub fn target_of(&self, num_proposals: usize) -> Vec<Option<usize>> {
        let mut t = vec![None; num_proposals];
        for &(i, k) in &self.pairs {
            t[i] = Some(k);
        }
        t
    }

    /// Sum of matched costs, accumulated in ground-truth order.
    pub fn total_cost(&self, cost: impl Fn(usize, usize) -> f64) -> f64 {
        self.pairs.iter().map(|&(i, k)| cost(i, k)).sum()
    }
}

/// Exact minimum-cost assignment of every ground truth (column) to a distinct
/// proposal (row) by shortest augmenting paths with potentials. `+∞` entries
/// are forbidden pairs. With fewer proposals than ground truths the transposed
/// problem is solved, so every proposal is matched instead.
pub fn hungarian(c: &CostMatrix) -> Result<Assignment> {
    let n = c.cols;
    let m = c.rows;
    if n > m {
        let data = (0..n * m).map(|idx| c.get(idx % m, idx / m)).collect();
        let t = CostMatrix::new(n, m, data, c.lambda)?;
        let pairs = hungarian(&t)?.pairs.iter().map(|&(k, i)| (i, k)).collect();
        return Ok(Assignment::build(m, n, pairs));
    }
    // Rows of the working problem are ground truths, columns are proposals.
    let a = |gt: usize, prop: usize| c.data[prop * n + gt];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![f64::INFINITY; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if !delta.is_finite() {
                return Err(Error::Infeasible { column: i - 1 });
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=m).filter(|&j| p[j] > 0).map(|j| (j - 1, p[j] - 1)).collect();
    Ok(Assignment::build(m, n, pairs))
}

/// Hungarian over `Ĉ`, skipping ground truths without any finite entry.
/// Rows carry at most one finite entry, so the remaining problem is feasible.
pub fn hungarian_constrained(c: &ConstrainedCost) -> Result<Assignment> {
    let mut has = vec![false; c.cols];
    for (k, _) in c.entries.iter().flatten() {
        has[*k] = true;
    }
    let keep: Vec<usize> = (0..c.cols).filter(|&k| has[k]).collect();
    let mut data = Vec::with_capacity(c.rows * keep.len());
    for i in 0..c.rows {
        data.extend(keep.iter().map(|&k| c.get(i, k)));
    }
    let sub = CostMatrix::new(c.rows, keep.len(), data, DEFAULT_LAMBDA)?;
    let pairs = hungarian(&sub)?.pairs.iter().map(|&(i, j)| (i, keep[j])).collect();
    Ok(Assignment::build(c.rows, c.cols, pairs))
}

/// Per ground truth, the cheapest finite proposal (ties → lowest index).
/// One pass over the rows: O(K_ins + K_gt).
pub fn disentangled_match(c: &ConstrainedCost) -> Assignment {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; c.cols];
    for (i, e) in c.entries.iter().enumerate() {
        if let Some((k, cost)) = *e {
            if best[k].map_or(true, |(_, b)| cost < b) {
                best[k] = Some((i, cost));
            }
        }
    }
    let pairs = best
        .iter()
        .enumerate()
        .filter_map(|(k, b)| b.map(|(i, _)| (i, k)))
        .collect();
    Assignment::build(c.rows, c.cols, pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Matcher {
    /// Column minima over `Ĉ`.
    Disentangled,
    /// Exact Hungarian over `Ĉ`; same optimum as `Disentangled`.
    Hungarian,
    /// Exact Hungarian over the unconstrained `C` (the classic bipartite baseline).
    HungarianFull,
}

impl Matcher {
    pub fn name(self) -> &'static str {
        match self {
            Self::Disentangled => "disentangled",
            Self::Hungarian => "hungarian",
            Self::HungarianFull => "hungarian-full",
        }
    }
}

impl std::str::FromStr for Matcher {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disentangled" => Ok(Self::Disentangled),
            "hungarian" => Ok(Self::Hungarian),
            "hungarian-full" => Ok(Self::HungarianFull),
            _ => Err(Error::Config(format!("unknown matcher `{s}`"))),
        }
    }
}

/// Random `Ĉ` where each ground truth owns at least one proposal and the
/// remaining proposals are spread over objects and background.
pub fn random_constrained(rng: &mut ChaCha8Rng, k_ins: usize, k_gt: usize, background: f64) -> ConstrainedCost {
    assert!(k_ins >= k_gt);
    let entries = (0..k_ins)
        .map(|i| {
            let owner = if i < k_gt {
                Some(i)
            } else if rng.random::<f64>() < background {
                None
            } else {
                Some(rng.random_range(0..k_gt.max(1)))
            };
            owner.filter(|_| k_gt > 0).map(|k| (k, rng.random_range(-1.5..2.5)))
        })
        .collect::<Vec<_>>();
    // shuffle rows so owners are not in index order
    let mut order: Vec<usize> = (0..k_ins).collect();
    for i in (1..k_ins).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    ConstrainedCost::new(k_gt, order.into_iter().map(|i| entries[i]).collect()).expect("valid entries")
}

/// Timing results of the matcher benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    /// `(matcher, K_ins, median nanoseconds per call)`.
    pub rows: Vec<(Matcher, usize, f64)>,
    pub slope_disentangled: f64,
    pub slope_hungarian: f64,
    /// Hungarian / disentangled median at the largest size.
    pub speedup_at_largest: f64,
}

pub const BENCH_HEADER: &str = "OF3D-BENCH v1";

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{BENCH_HEADER}").unwrap();
        for (m, k, ns) in &self.rows {
            writeln!(s, "{} {} {:.0}", m.name(), k, ns).unwrap();
        }
        writeln!(s, "slope disentangled {:.4}", self.slope_disentangled).unwrap();
        writeln!(s, "slope hungarian-full {:.4}", self.slope_hungarian).unwrap();
        writeln!(s, "speedup {:.1}", self.speedup_at_largest).unwrap();
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Square `K × K` problem in which every proposal receives a target: the
/// ground-truth columns of `c` followed by `K - K_gt` no-object columns, each
/// costing `no_object[i]` for proposal `i`.
pub fn pad_no_object(c: &CostMatrix, no_object: &[f64]) -> Result<CostMatrix> {
    let (k, g) = (c.rows(), c.cols());
    if no_object.len() != k || g > k {
        return Err(Error::shape("pad_no_object", &[k, g], &[no_object.len()]));
    }
    let mut data = Vec::with_capacity(k * k);
    for (i, &z) in no_object.iter().enumerate() {
        data.extend((0..g).map(|j| c.get(i, j)));
        data.extend(std::iter::repeat(z).take(k - g));
    }
    CostMatrix::new(k, k, data, c.lambda)
}

/// Times Hungarian on the padded `K × K` set-prediction problem (random
/// costs, `K/4` ground-truth columns) against the disentangled matcher on a
/// constrained matrix with the same `K` and `K_gt`, for each `K` in `sizes`.
pub fn bench_matchers(sizes: &[usize], trials: usize, seed: u64) -> Result<BenchReport> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("benchmark sizes must be ascending".into()));
    }
    let trials = trials.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut d_pts = Vec::new();
    let mut h_pts = Vec::new();
    for &k in sizes {
        let k_gt = (k / 4).max(1);
        let mut d_times = Vec::with_capacity(trials);
        let mut h_times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let dense: Vec<f64> = (0..k * k_gt).map(|_| rng.random::<f64>()).collect();
            let no_object: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let dense = pad_no_object(&CostMatrix::new(k, k_gt, dense, DEFAULT_LAMBDA)?, &no_object)?;
            let t0 = Instant::now();
            let a = hungarian(&dense)?;
            h_times.push(t0.elapsed().as_nanos() as f64);
            std::hint::black_box(a);

            let c = random_constrained(&mut rng, k, k_gt, 0.3);
            let reps = (200_000 / k).max(1);
            let t0 = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(disentangled_match(std::hint::black_box(&c)));
            }
            d_times.push(t0.elapsed().as_nanos() as f64 / reps as f64);
        }
        let (d, h) = (median(d_times), median(h_times));
        rows.push((Matcher::Disentangled, k, d));
        rows.push((Matcher::HungarianFull, k, h));
        d_pts.push((k as f64, d));
        h_pts.push((k as f64, h));
    }
    let last = sizes.len() - 1;
    Ok(BenchReport {
        slope_disentangled: if sizes.len() > 1 { loglog_slope(&d_pts) } else { f64::NAN },
        slope_hungarian: if sizes.len() > 1 { loglog_slope(&h_pts) } else { f64::NAN },
        speedup_at_largest: h_pts[last].1 / d_pts[last].1,
        rows,
    })
}
