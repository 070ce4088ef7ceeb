//! Per-record detection metrics and nonparametric group comparisons.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::events::{match_evaluation, Interval, ScoredEvent};

/// Largest `n_a * n_b` for which Mann-Whitney p-values are enumerated exactly.
pub const MWU_EXACT_LIMIT: usize = 400;
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub record_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `None` for records without any true event.
    pub scores: Option<Scores>,
}

impl RecordMetrics {
    /// Scores from raw counts. A record with true events but no detections
    /// gets precision 0; an F1 with `P + R = 0` is 0.
    pub fn from_counts(record_id: &str, tp: usize, fp: usize, fn_: usize) -> Self {
        let scores = (tp + fn_ > 0).then(|| {
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let recall = tp as f64 / (tp + fn_) as f64;
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            Scores { precision, recall, f1 }
        });
        Self {
            record_id: record_id.to_string(),
            tp,
            fp,
            fn_,
            scores,
        }
    }
}

pub fn record_metrics(record_id: &str, detected: &[ScoredEvent], truth: &[Interval], iou_threshold: f64) -> RecordMetrics {
    let m = match_evaluation(detected, truth, iou_threshold);
    RecordMetrics::from_counts(record_id, m.tp, m.fp, m.fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Precision, Metric::Recall, Metric::F1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }

    pub fn of(self, s: &Scores) -> f64 {
        match self {
            Metric::Precision => s.precision,
            Metric::Recall => s.recall,
            Metric::F1 => s.f1,
        }
    }
}

/// Values of `metric` over records with defined scores, in input order.
pub fn metric_values(records: &[RecordMetrics], metric: Metric) -> Vec<f64> {
    records.iter().filter_map(|r| r.scores.as_ref().map(|s| metric.of(s))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (divisor `n - 1`); 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_records: usize,
    /// Records without true events, left out of every statistic.
    pub n_excluded: usize,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub f1: Option<MeanStd>,
}

pub fn summarize(records: &[RecordMetrics]) -> Summary {
    let n_excluded = records.iter().filter(|r| r.scores.is_none()).count();
    Summary {
        n_records: records.len(),
        n_excluded,
        precision: mean_std(&metric_values(records, Metric::Precision)),
        recall: mean_std(&metric_values(records, Metric::Recall)),
        f1: mean_std(&metric_values(records, Metric::F1)),
    }
}

/// Mid-ranks (1-based) of `values`, and the tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
}

/// Tie-corrected Kruskal-Wallis H with a chi-squared(k - 1) p-value.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    if groups.len() < 2 {
        return Err(Error::Validation("Kruskal-Wallis needs at least two groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Validation("Kruskal-Wallis groups must be non-empty".into()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len();
    if n < 3 {
        return Err(Error::Validation("Kruskal-Wallis needs at least 3 observations".into()));
    }
    let (ranks, ties) = midranks(&pooled);
    let nf = n as f64;
    let correction = 1.0 - tie_sum(&ties) / (nf.powi(3) - nf);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, p: 1.0 });
    }
    let mut offset = 0;
    let mut s = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        s += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = ((12.0 / (nf * (nf + 1.0)) * s - 3.0 * (nf + 1.0)) / correction).max(0.0);
    let df = (groups.len() - 1) as f64;
    let p = ChiSquared::new(df).expect("df >= 1").sf(h);
    Ok(KruskalWallis { h, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `min(U_a, U_b)`
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// `U_a = #{a_i > b_j} + 0.5 #{a_i = b_j}`.
pub fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Exact two-sided p-value of the rank-sum of `n_a` items drawn from the
/// pooled (doubled, hence integral) mid-ranks, conditional on ties.
fn exact_rank_sum_p(doubled: &[u64], n_a: usize, observed: u64) -> f64 {
    let n = doubled.len();
    let max_sum: u64 = doubled.iter().sum();
    let width = max_sum as usize + 1;
    // ways[k][s]: subsets of size k with doubled-rank sum s.
    let mut ways = vec![vec![0u128; width]; n_a + 1];
    ways[0][0] = 1;
    for &r in doubled {
        let r = r as usize;
        for k in (1..=n_a).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            let (prev, cur) = (&lo[k - 1], &mut hi[0]);
            for s in (r..width).rev() {
                if prev[s - r] != 0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    // Centre of the doubled rank sum is n_a (n + 1).
    let centre = (n_a * (n + 1)) as i128;
    let dev = |s: usize| (s as i128 - centre).abs();
    let obs = dev(observed as usize);
    let total: u128 = ways[n_a].iter().sum();
    let extreme: u128 = ways[n_a]
        .iter()
        .enumerate()
        .filter(|(s, _)| dev(*s) >= obs)
        .map(|(_, c)| *c)
        .sum();
    (extreme as f64 / total as f64).min(1.0)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("Mann-Whitney samples must be non-empty".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let ua = u_statistic(a, b);
    let u = ua.min((na * nb) as f64 - ua);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    if na * nb <= MWU_EXACT_LIMIT {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        // The two-sided test is symmetric in the samples; enumerate the smaller.
        let (k, observed) = if na <= nb {
            (na, doubled[..na].iter().sum())
        } else {
            (nb, doubled[na..].iter().sum())
        };
        let p = exact_rank_sum_p(&doubled, k, observed);
        return Ok(MannWhitney { u, p, exact: true });
    }
    let n = (na + nb) as f64;
    let mu = (na * nb) as f64 / 2.0;
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_sum(&ties) / (n * (n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((ua - mu).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * Normal::new(0.0, 1.0).expect("standard normal").sf(z)).min(1.0)
    };
    Ok(MannWhitney { u, p, exact: false })
}

/// Each p multiplied by the number of comparisons, clamped at 1.
pub fn bonferroni(raw: &[f64]) -> Vec<f64> {
    let m = raw.len() as f64;
    raw.iter().map(|p| (p * m).min(1.0)).collect()
}

pub fn significance_marker(p: f64) -> &'static str {
    if p < 1e-4 {
        "****"
    } else if p < 1e-3 {
        "***"
    } else if p < 1e-2 {
        "**"
    } else if p < ALPHA {
        "*"
    } else {
        "ns"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    pub u: f64,
    pub p_raw: f64,
    pub p_adj: f64,
    pub exact: bool,
    pub marker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: Metric,
    pub kruskal_wallis: KruskalWallis,
    /// Whether the omnibus test reached significance, licensing post-hoc
    /// interpretation of the pairs.
    pub omnibus_significant: bool,
    pub pairs: Vec<PairComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub groups: Vec<String>,
    pub n_records: usize,
    pub n_excluded: usize,
    pub metrics: Vec<MetricComparison>,
}

/// Omnibus Kruskal-Wallis per metric plus Bonferroni-adjusted pairwise
/// Mann-Whitney tests over every pair of groups, in input order.
pub fn compare_experiments(groups: &[(String, Vec<RecordMetrics>)]) -> Result<GroupComparison> {
    if groups.len() < 2 {
        return Err(Error::Validation("comparison needs at least two experiments".into()));
    }
    fn ids(rs: &[RecordMetrics]) -> Vec<&str> {
        let mut v: Vec<&str> = rs.iter().map(|r| r.record_id.as_str()).collect();
        v.sort_unstable();
        v
    }
    let reference = ids(&groups[0].1);
    for (name, rs) in &groups[1..] {
        if ids(rs) != reference {
            return Err(Error::Alignment(format!(
                "experiment {name} was evaluated on a different record set than {}",
                groups[0].0
            )));
        }
    }
    let sorted: Vec<Vec<&RecordMetrics>> = groups
        .iter()
        .map(|(_, rs)| {
            let mut v: Vec<&RecordMetrics> = rs.iter().collect();
            v.sort_by(|a, b| a.record_id.cmp(&b.record_id));
            v
        })
        .collect();
    let mut metrics = Vec::new();
    for metric in Metric::ALL {
        let values: Vec<Vec<f64>> = sorted
            .iter()
            .map(|rs| rs.iter().filter_map(|r| r.scores.as_ref().map(|s| metric.of(s))).collect())
            .collect();
        let kw = kruskal_wallis(&values)?;
        let mut raw = Vec::new();
        let mut tests = Vec::new();
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                let t = mann_whitney_u(&values[i], &values[j])?;
                raw.push(t.p);
                tests.push((i, j, t));
            }
        }
        let adj = bonferroni(&raw);
        let pairs = tests
            .into_iter()
            .zip(adj)
            .map(|((i, j, t), p_adj)| PairComparison {
                a: groups[i].0.clone(),
                b: groups[j].0.clone(),
                u: t.u,
                p_raw: t.p,
                p_adj,
                exact: t.exact,
                marker: significance_marker(p_adj).to_string(),
            })
            .collect();
        metrics.push(MetricComparison {
            metric,
            kruskal_wallis: kw,
            omnibus_significant: kw.p < ALPHA,
            pairs,
        });
    }
    let n_excluded = groups[0].1.iter().filter(|r| r.scores.is_none()).count();
    Ok(GroupComparison {
        groups: groups.iter().map(|(n, _)| n.clone()).collect(),
        n_records: reference.len(),
        n_excluded,
        metrics,
    })
}
