//! Friedman test, Nemenyi critical differences and ordering strings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{HrcbError, Result};

/// Two-tailed Nemenyi critical values at alpha = 0.05 for k = 2..=20,
/// already divided by sqrt(2).
pub const NEMENYI_Q05: [f64; 19] = [
    1.960, 2.344, 2.569, 2.728, 2.850, 2.948, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354, 3.391, 3.426,
    3.458, 3.489, 3.517, 3.544,
];

/// Enumerate the permutation distribution when it has at most this many outcomes.
pub const EXACT_LIMIT: f64 = 1e6;

/// Blocks (rows) by methods (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub methods: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub higher_is_better: bool,
    /// Blocks discarded for missing cells.
    pub dropped: usize,
}

impl ResultMatrix {
    pub fn new(methods: Vec<String>, rows: Vec<Vec<f64>>, higher_is_better: bool) -> Result<Self> {
        Self::from_partial(methods, rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(), higher_is_better)
    }

    /// Drops every block with a missing or non-finite cell.
    pub fn from_partial(methods: Vec<String>, rows: Vec<Vec<Option<f64>>>, higher_is_better: bool) -> Result<Self> {
        let k = methods.len();
        let mut kept = Vec::new();
        let mut dropped = 0;
        for r in rows {
            if r.len() != k {
                return Err(HrcbError::DimensionMismatch { expected: k, got: r.len() });
            }
            if r.iter().all(|c| c.is_some_and(f64::is_finite)) {
                kept.push(r.into_iter().map(|c| c.expect("checked")).collect());
            } else {
                dropped += 1;
            }
        }
        Ok(ResultMatrix { methods, rows: kept, higher_is_better, dropped })
    }

    pub fn n_blocks(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.methods.len()
    }

    /// Repeats every block `times` times.
    pub fn duplicated(&self, times: usize) -> Self {
        let rows = self.rows.iter().flat_map(|r| std::iter::repeat_n(r.clone(), times)).collect();
        ResultMatrix { rows, ..self.clone() }
    }

    pub fn flipped(&self) -> Self {
        ResultMatrix { higher_is_better: !self.higher_is_better, ..self.clone() }
    }
}

/// Ranks of one block, best = 1, ties averaged.
pub fn block_ranks(row: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let better = |a: f64, b: f64| if higher_is_better { b.total_cmp(&a) } else { a.total_cmp(&b) };
    idx.sort_by(|&i, &j| better(row[i], row[j]));
    let mut ranks = vec![0.0; row.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && row[idx[e]] == row[idx[s]] {
            e += 1;
        }
        let r = (s + 1 + e) as f64 / 2.0;
        for &i in &idx[s..e] {
            ranks[i] = r;
        }
        s = e;
    }
    ranks
}

fn check_shape(m: &ResultMatrix) -> Result<()> {
    if m.k() < 2 {
        return Err(HrcbError::invalid("need at least two methods"));
    }
    if m.n_blocks() < 2 {
        return Err(HrcbError::invalid("need at least two complete blocks"));
    }
    Ok(())
}

pub fn rank_matrix(m: &ResultMatrix) -> Vec<Vec<f64>> {
    m.rows.iter().map(|r| block_ranks(r, m.higher_is_better)).collect()
}

pub fn average_ranks(m: &ResultMatrix) -> Result<Vec<f64>> {
    if m.k() < 2 {
        return Err(HrcbError::invalid("need at least two methods"));
    }
    if m.n_blocks() == 0 {
        return Err(HrcbError::invalid("no complete blocks"));
    }
    Ok(column_means(&rank_matrix(m), m.k()))
}

fn column_means(ranks: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = ranks.len() as f64;
    (0..k).map(|j| ranks.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Tie-corrected Friedman statistic from a rank matrix; `None` when every
/// block is fully tied.
fn friedman_statistic(ranks: &[Vec<f64>], k: usize) -> Option<f64> {
    let n = ranks.len() as f64;
    let kf = k as f64;
    let rbar = column_means(ranks, k);
    let ss: f64 = rbar.iter().map(|r| r * r).sum();
    let raw = 12.0 * n / (kf * (kf + 1.0)) * (ss - kf * (kf + 1.0).powi(2) / 4.0);
    let mut ties = 0.0;
    for r in ranks {
        let mut sorted = r.clone();
        sorted.sort_by(f64::total_cmp);
        for g in sorted.chunk_by(|a, b| a == b) {
            let t = g.len() as f64;
            ties += t * t * t - t;
        }
    }
    let c = 1.0 - ties / (n * (kf * kf * kf - kf));
    (c > 1e-12).then(|| (raw / c).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    /// Exact permutation p-value when enumerable, else the chi-square tail.
    pub p_value: f64,
    pub p_chi2: f64,
    pub exact: bool,
}

fn permutations(v: &[f64]) -> Vec<Vec<f64>> {
    if v.len() <= 1 {
        return vec![v.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut rest = v.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Share of within-block rank permutations whose column rank sums are at
/// least as spread as observed.
fn exact_p(ranks: &[Vec<f64>], k: usize) -> f64 {
    let per_block: Vec<Vec<Vec<f64>>> = ranks.iter().map(|r| permutations(r)).collect();
    // sum of squared column sums is equivalent to the statistic within a fixed tie pattern
    let spread = |sums: &[f64]| sums.iter().map(|s| s * s).sum::<f64>();
    let mut obs = vec![0.0; k];
    for r in ranks {
        for j in 0..k {
            obs[j] += r[j];
        }
    }
    let target = spread(&obs) - 1e-9;
    let (mut hits, mut total) = (0u64, 0u64);
    let mut sums = vec![0.0; k];
    fn walk(b: usize, blocks: &[Vec<Vec<f64>>], sums: &mut [f64], target: f64, hits: &mut u64, total: &mut u64, spread: &dyn Fn(&[f64]) -> f64) {
        if b == blocks.len() {
            *total += 1;
            *hits += u64::from(spread(sums) >= target);
            return;
        }
        for p in &blocks[b] {
            for (s, x) in sums.iter_mut().zip(p) {
                *s += x;
            }
            walk(b + 1, blocks, sums, target, hits, total, spread);
            for (s, x) in sums.iter_mut().zip(p) {
                *s -= x;
            }
        }
    }
    walk(0, &per_block, &mut sums, target, &mut hits, &mut total, &spread);
    hits as f64 / total as f64
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

pub fn friedman_test(m: &ResultMatrix) -> Result<FriedmanResult> {
    check_shape(m)?;
    let k = m.k();
    let ranks = rank_matrix(m);
    let Some(stat) = friedman_statistic(&ranks, k) else {
        return Ok(FriedmanResult { statistic: 0.0, p_value: 1.0, p_chi2: 1.0, exact: true });
    };
    let chi = ChiSquared::new((k - 1) as f64).map_err(|e| HrcbError::invalid(e.to_string()))?;
    let p_chi2 = chi.sf(stat);
    let exact = factorial(k).powi(m.n_blocks() as i32) <= EXACT_LIMIT;
    let p_value = if exact { exact_p(&ranks, k) } else { p_chi2 };
    Ok(FriedmanResult { statistic: stat, p_value, p_chi2, exact })
}

/// Nemenyi critical difference at alpha = 0.05.
pub fn critical_difference(k: usize, n: usize) -> Result<f64> {
    if !(2..=20).contains(&k) {
        return Err(HrcbError::invalid(format!("Nemenyi table covers 2..=20 methods, got {k}")));
    }
    let kf = k as f64;
    Ok(NEMENYI_Q05[k - 2] * (kf * (kf + 1.0) / (6.0 * n as f64)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub methods: Vec<String>,
    pub avg_ranks: Vec<f64>,
    pub friedman: FriedmanResult,
    pub cd: f64,
    pub alpha: f64,
    /// `significant[i][j]`: methods i and j differ by more than CD.
    pub significant: Vec<Vec<bool>>,
    /// Method indices from best to worst average rank.
    pub order: Vec<usize>,
    pub ordering: String,
    pub n_blocks: usize,
    pub dropped: usize,
}

/// Sorted by average rank, adjacent methods joined with `>` when their gap
/// exceeds CD and `=` otherwise.
pub fn ordering_string(methods: &[String], avg_ranks: &[f64], significant: &[Vec<bool>]) -> (Vec<usize>, String) {
    let mut order: Vec<usize> = (0..methods.len()).collect();
    order.sort_by(|&a, &b| avg_ranks[a].total_cmp(&avg_ranks[b]));
    let mut s = methods[order[0]].clone();
    for w in order.windows(2) {
        s.push_str(if significant[w[0]][w[1]] { ">" } else { "=" });
        s.push_str(&methods[w[1]]);
    }
    (order, s)
}

/// Friedman test then Nemenyi post-hoc comparison; only significance at
/// `alpha = 0.05` is tabulated.
pub fn nemenyi(m: &ResultMatrix) -> Result<RankReport> {
    let alpha = 0.05;
    let friedman = friedman_test(m)?;
    let avg = average_ranks(m)?;
    let k = m.k();
    let cd = critical_difference(k, m.n_blocks())?;
    let gate = friedman.p_value < alpha;
    let significant: Vec<Vec<bool>> =
        (0..k).map(|i| (0..k).map(|j| gate && (avg[i] - avg[j]).abs() > cd).collect()).collect();
    let (order, ordering) = ordering_string(&m.methods, &avg, &significant);
    Ok(RankReport {
        methods: m.methods.clone(),
        avg_ranks: avg,
        friedman,
        cd,
        alpha,
        significant,
        order,
        ordering,
        n_blocks: m.n_blocks(),
        dropped: m.dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdRow {
    pub method: String,
    pub avg_rank: f64,
    pub group: usize,
}

/// One row per method in rank order; a new group starts after every `>`.
pub fn cd_diagram_data(r: &RankReport) -> Vec<CdRow> {
    let mut group = 0;
    let mut rows = Vec::with_capacity(r.order.len());
    for (pos, &i) in r.order.iter().enumerate() {
        if pos > 0 && r.significant[r.order[pos - 1]][i] {
            group += 1;
        }
        rows.push(CdRow { method: r.methods[i].clone(), avg_rank: r.avg_ranks[i], group });
    }
    rows
}

pub fn write_cd_data(rows: &[CdRow]) -> String {
    let mut s = String::from("method\tavg_rank\tgroup\n");
    for r in rows {
        // `{:?}` on f64 prints the shortest round-tripping form
        let _ = writeln!(s, "{}\t{:?}\t{}", r.method, r.avg_rank, r.group);
    }
    s
}

pub fn parse_cd_data(text: &str) -> Result<Vec<CdRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| HrcbError::Parse { line: n + 1, msg: msg.into() };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad("expected 3 tab-separated fields"));
        }
        rows.push(CdRow {
            method: f[0].to_string(),
            avg_rank: f[1].parse().map_err(|_| bad("bad rank"))?,
            group: f[2].parse().map_err(|_| bad("bad group"))?,
        });
    }
    Ok(rows)
}

impl RankReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "blocks {} (dropped {}), methods {}", self.n_blocks, self.dropped, self.methods.len());
        let _ = writeln!(
            s,
            "friedman chi2 {:.4}, p {:.4e}{}, chi2 tail p {:.4e}",
            self.friedman.statistic,
            self.friedman.p_value,
            if self.friedman.exact { " (exact)" } else { "" },
            self.friedman.p_chi2
        );
        let _ = writeln!(s, "nemenyi CD {:.4} at alpha {}", self.cd, self.alpha);
        for &i in &self.order {
            let _ = writeln!(s, "  {:<24} {:.4}", self.methods[i], self.avg_ranks[i]);
        }
        let _ = writeln!(s, "{}", self.ordering);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn tied_columns_share_middle_rank() {
        let m = ResultMatrix::new(names(3), vec![vec![1.0; 3]; 4], true).unwrap();
        assert_eq!(average_ranks(&m).unwrap(), vec![2.0; 3]);
        let f = friedman_test(&m).unwrap();
        assert_eq!((f.statistic, f.p_value), (0.0, 1.0));
        assert_eq!(nemenyi(&m).unwrap().ordering, "m0=m1=m2");
    }

    #[test]
    fn dominating_method_ranks_first() {
        let rows = (0..6).map(|i| vec![i as f64 + 1.0, i as f64]).collect();
        let m = ResultMatrix::new(names(2), rows, true).unwrap();
        assert_eq!(average_ranks(&m).unwrap(), vec![1.0, 2.0]);
        assert_eq!(average_ranks(&m.flipped()).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn perfectly_ordered_statistic() {
        let m = ResultMatrix::new(names(3), vec![vec![3.0, 2.0, 1.0]; 10], true).unwrap();
        let f = friedman_test(&m).unwrap();
        assert!((f.statistic - 20.0).abs() < 1e-12);
        assert!(f.p_value < 0.001);
        assert!(!f.exact);
    }

    #[test]
    fn critical_difference_two_methods() {
        let cd = critical_difference(2, 192).unwrap();
        assert!((cd - 0.141450).abs() < 1e-5, "{cd}");
        assert!(critical_difference(21, 10).is_err());
        let avg = [1.2f64, 1.8];
        let sig = vec![vec![false, (avg[0] - avg[1]).abs() > cd], vec![(avg[0] - avg[1]).abs() > cd, false]];
        assert_eq!(ordering_string(&names(2), &avg, &sig).1, "m0>m1");
    }

    #[test]
    fn incomplete_blocks_dropped() {
        let m = ResultMatrix::from_partial(names(2), vec![vec![Some(1.0), None], vec![Some(1.0), Some(2.0)]], true).unwrap();
        assert_eq!((m.n_blocks(), m.dropped), (1, 1));
    }

    #[test]
    fn cd_rows_round_trip() {
        let rows = vec![
            CdRow { method: "Comb".into(), avg_rank: 1.0 / 3.0, group: 0 },
            CdRow { method: "GCN".into(), avg_rank: 2.5, group: 1 },
        ];
        assert_eq!(parse_cd_data(&write_cd_data(&rows)).unwrap(), rows);
    }
}
