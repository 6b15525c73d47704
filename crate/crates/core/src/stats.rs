//! Ransom-amount comparisons across groups and breach-password matching.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("group {group} has {n} observations, need {needed}")]
    GroupTooSmall { group: String, n: usize, needed: usize },
    #[error("groups {a} and {b} both have zero variance and equal means")]
    DegenerateVariance { a: String, b: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmountGroup {
    pub key: String,
    pub amounts_usd: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for n < 2.
    pub std: f64,
    pub sem: f64,
}

impl AmountGroup {
    pub fn new(key: impl Into<String>, amounts_usd: Vec<f64>) -> Self {
        let n = amounts_usd.len();
        let mean = if n == 0 { 0.0 } else { amounts_usd.iter().sum::<f64>() / n as f64 };
        let var = if n < 2 {
            0.0
        } else {
            amounts_usd.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        };
        let std = var.sqrt();
        let sem = if n == 0 { 0.0 } else { std / (n as f64).sqrt() };
        Self {
            key: key.into(),
            amounts_usd,
            n,
            mean,
            std,
            sem,
        }
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

/// Groups `(key, amount)` pairs, keys sorted.
pub fn group_amounts<K: Into<String>>(items: impl IntoIterator<Item = (K, f64)>) -> Vec<AmountGroup> {
    let mut by_key: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for (k, v) in items {
        by_key.entry(k.into()).or_default().push(v);
    }
    by_key.into_iter().map(|(k, v)| AmountGroup::new(k, v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityOptions {
    pub resamples: usize,
    pub sample_size: usize,
    pub alpha: f64,
}

impl Default for NormalityOptions {
    fn default() -> Self {
        Self {
            resamples: 100,
            sample_size: 30,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityOutcome {
    pub passed: bool,
    /// Jarque–Bera statistic of the resampled means; `None` when degenerate.
    pub statistic: Option<f64>,
    pub critical: f64,
    pub reason: Option<String>,
}

/// Jarque–Bera statistic with moment (biased) skewness and kurtosis.
/// `None` for zero variance.
pub fn jarque_bera(xs: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if m2 <= f64::EPSILON * mean.abs().max(1.0) * f64::EPSILON {
        return None;
    }
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    Some(n / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0))
}

/// Draws `resamples` subsamples of `sample_size` without replacement,
/// takes each mean, and passes the group when Jarque–Bera on those means
/// stays below the χ²(2) critical value `-2 ln α`.
pub fn normality_screen(group: &AmountGroup, opts: &NormalityOptions, seed: u64) -> Result<NormalityOutcome, StatsError> {
    if !(0.0 < opts.alpha && opts.alpha < 1.0) || opts.resamples < 2 || opts.sample_size == 0 {
        return Err(StatsError::Parameter(format!("bad normality options {opts:?}")));
    }
    if group.n < opts.sample_size {
        return Err(StatsError::GroupTooSmall {
            group: group.key.clone(),
            n: group.n,
            needed: opts.sample_size,
        });
    }
    let critical = -2.0 * opts.alpha.ln();
    if group.amounts_usd.iter().all(|&x| x == group.amounts_usd[0]) {
        return Ok(NormalityOutcome {
            passed: false,
            statistic: None,
            critical,
            reason: Some("zero variance".into()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..opts.resamples)
        .map(|_| {
            let idx = rand::seq::index::sample(&mut rng, group.n, opts.sample_size);
            idx.iter().map(|i| group.amounts_usd[i]).sum::<f64>() / opts.sample_size as f64
        })
        .collect();
    Ok(match jarque_bera(&means) {
        Some(jb) => NormalityOutcome {
            passed: jb < critical,
            statistic: Some(jb),
            critical,
            reason: None,
        },
        None => NormalityOutcome {
            passed: false,
            statistic: None,
            critical,
            reason: Some("resampled means have zero variance".into()),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub a: String,
    pub b: String,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub p_adjusted: f64,
    pub reject: bool,
}

/// Two-sided tail probability of Student's t.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Welch–Satterthwaite t-test. `p_adjusted` equals `p` and `reject` uses
/// `alpha` unadjusted; [`pairwise_analysis`] applies the correction.
pub fn welch_t_test(a: &AmountGroup, b: &AmountGroup, alpha: f64) -> Result<TestResult, StatsError> {
    for g in [a, b] {
        if g.n < 2 {
            return Err(StatsError::GroupTooSmall {
                group: g.key.clone(),
                n: g.n,
                needed: 2,
            });
        }
    }
    let (va, vb) = (a.variance() / a.n as f64, b.variance() / b.n as f64);
    let se2 = va + vb;
    let diff = a.mean - b.mean;
    let (t, df) = if se2 == 0.0 {
        if diff == 0.0 {
            return Err(StatsError::DegenerateVariance {
                a: a.key.clone(),
                b: b.key.clone(),
            });
        }
        (diff.signum() * f64::INFINITY, (a.n + b.n - 2) as f64)
    } else {
        let df = se2 * se2 / (va * va / (a.n - 1) as f64 + vb * vb / (b.n - 1) as f64);
        (diff / se2.sqrt(), df)
    };
    let p = student_t_two_sided(t, df);
    Ok(TestResult {
        a: a.key.clone(),
        b: b.key.clone(),
        t,
        df,
        p,
        p_adjusted: p,
        reject: p < alpha,
    })
}

pub fn bonferroni(p: f64, comparisons: usize) -> f64 {
    (p * comparisons.max(1) as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummaryRow {
    pub group: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub sem: f64,
    pub ci95_half_width: f64,
}

impl From<&AmountGroup> for GroupSummaryRow {
    fn from(g: &AmountGroup) -> Self {
        Self {
            group: g.key.clone(),
            n: g.n,
            mean: g.mean,
            std: g.std,
            sem: g.sem,
            ci95_half_width: 1.96 * g.sem,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseAnalysis {
    pub screened: Vec<(String, Result<NormalityOutcome, String>)>,
    pub summary: Vec<GroupSummaryRow>,
    pub tests: Vec<TestResult>,
    pub alpha: f64,
}

/// All unordered pairs of `groups` with Bonferroni factor = number of
/// pairs. Pairs whose variances and means all coincide get `t = 0, p = 1`.
pub fn pairwise_analysis(groups: &[AmountGroup], alpha: f64) -> Vec<TestResult> {
    let m = groups.len() * groups.len().saturating_sub(1) / 2;
    let mut out = Vec::with_capacity(m);
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (a, b) = (&groups[i], &groups[j]);
            let mut r = match welch_t_test(a, b, alpha) {
                Ok(r) => r,
                Err(_) => TestResult {
                    a: a.key.clone(),
                    b: b.key.clone(),
                    t: 0.0,
                    df: (a.n + b.n).saturating_sub(2) as f64,
                    p: 1.0,
                    p_adjusted: 1.0,
                    reject: false,
                },
            };
            r.p_adjusted = bonferroni(r.p, m);
            r.reject = r.p_adjusted < alpha;
            out.push(r);
        }
    }
    out
}

/// Screens every group (each with its own derived seed) and compares the
/// ones that pass. Groups too small to screen are reported, not compared.
pub fn screen_and_compare(groups: &[AmountGroup], opts: &NormalityOptions, alpha: f64, seed: u64) -> PairwiseAnalysis {
    let mut screened = Vec::new();
    let mut passing = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let outcome = normality_screen(g, opts, seed.wrapping_add(i as u64)).map_err(|e| e.to_string());
        if matches!(&outcome, Ok(o) if o.passed) {
            passing.push(g.clone());
        }
        screened.push((g.key.clone(), outcome));
    }
    let tests = if passing.len() >= 2 {
        pairwise_analysis(&passing, alpha)
    } else {
        Vec::new()
    };
    PairwiseAnalysis {
        screened,
        summary: groups.iter().map(GroupSummaryRow::from).collect(),
        tests,
        alpha,
    }
}

/// CSV `group,n,mean,std,sem`.
pub fn write_group_summary<W: Write>(w: W, rows: &[GroupSummaryRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["group", "n", "mean", "std", "sem"])?;
    for r in rows {
        out.write_record([
            r.group.clone(),
            r.n.to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.std),
            format!("{:.6}", r.sem),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// CSV `a,b,t,df,p,p_adj,reject`.
pub fn write_tests<W: Write>(w: W, tests: &[TestResult]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["a", "b", "t", "df", "p", "p_adj", "reject"])?;
    for r in tests {
        out.write_record([
            r.a.clone(),
            r.b.clone(),
            format!("{:.6}", r.t),
            format!("{:.6}", r.df),
            format!("{:.6e}", r.p),
            format!("{:.6e}", r.p_adjusted),
            r.reject.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean ± 1.96 sem per group.
pub fn group_summary_svg(rows: &[GroupSummaryRow]) -> String {
    let series: Vec<crate::plot::Series> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| crate::plot::Series {
            name: r.group.clone(),
            points: vec![
                (i as f64, r.mean - r.ci95_half_width),
                (i as f64, r.mean),
                (i as f64, r.mean + r.ci95_half_width),
            ],
        })
        .collect();
    crate::plot::line_chart(
        &crate::plot::Axes::new("Mean ransom by group (±1.96 sem)", "group index", "USD"),
        &series,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreachMatch {
    pub candidates: usize,
    pub sampled: usize,
    pub matched: usize,
    pub rate: f64,
}

/// Passwords seen exactly once and at least four characters long, sorted.
pub fn breach_candidates<'a>(passwords: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for p in passwords {
        *counts.entry(p).or_default() += 1;
    }
    let mut out: Vec<String> = counts
        .into_iter()
        .filter(|&(p, c)| c == 1 && p.chars().count() >= 4)
        .map(|(p, _)| p.to_string())
        .collect();
    out.sort();
    out
}

/// Samples `fraction` of the candidates with `seed` and counts those
/// present, as whole lines, in any wordlist.
pub fn breach_match<'a>(
    passwords: impl IntoIterator<Item = &'a str>,
    wordlists: &[&Path],
    fraction: f64,
    seed: u64,
) -> Result<BreachMatch, StatsError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(StatsError::Parameter(format!("sample fraction {fraction} outside [0, 1]")));
    }
    let candidates = breach_candidates(passwords);
    let k = (fraction * candidates.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pending: HashSet<&str> = candidates
        .choose_multiple(&mut rng, k)
        .map(String::as_str)
        .collect();
    let mut matched = 0;
    for path in wordlists {
        if pending.is_empty() {
            break;
        }
        let io = |source| StatsError::Io {
            path: path.display().to_string(),
            source,
        };
        let f = std::fs::File::open(path).map_err(io)?;
        for (i, line) in std::io::BufReader::new(f).split(b'\n').enumerate() {
            let bytes = line.map_err(io)?;
            let mut s = String::from_utf8_lossy(&bytes);
            if i == 0 {
                if let Some(rest) = s.strip_prefix('\u{feff}') {
                    s = rest.to_string().into();
                }
            }
            let word = s.strip_suffix('\r').unwrap_or(&s);
            if pending.remove(word) {
                matched += 1;
            }
        }
    }
    Ok(BreachMatch {
        candidates: candidates.len(),
        sampled: k,
        matched,
        rate: if k == 0 { 0.0 } else { matched as f64 / k as f64 },
    })
}
