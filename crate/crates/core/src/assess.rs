//! Verification of scenario ensembles against realized actuals.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AssetRecord, HOURS};
use crate::rng::substream;
use crate::simulate::{aggregate, Grouping, ScenarioSet};
use crate::stats::ks_uniform;

pub const REPORT_HEADER: [&str; 3] = ["unit", "metric", "value"];

/// Randomized PIT with a supplied uniform `v`:
/// `(#{x < g} + v·(1 + #{x = g})) / (N + 1)`.
pub fn pit_with(sample: &[f64], actual: f64, v: f64) -> f64 {
    let below = sample.iter().filter(|x| **x < actual).count() as f64;
    let ties = sample.iter().filter(|x| **x == actual).count() as f64;
    (below + v * (1.0 + ties)) / (sample.len() as f64 + 1.0)
}

pub fn pit(sample: &[f64], actual: f64, rng: &mut impl Rng) -> f64 {
    pit_with(sample, actual, rng.random::<f64>())
}

/// Quantile with plotting position `i/(N+1)` for the `i`-th order
/// statistic, linear in between, clamped to the sample range.
pub fn plotting_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * (n as f64 + 1.0);
    if pos <= 1.0 {
        return sorted[0];
    }
    if pos >= n as f64 {
        return sorted[n - 1];
    }
    let i = pos.floor() as usize;
    let w = pos - i as f64;
    (1.0 - w) * sorted[i - 1] + w * sorted[i]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Coverage {
    pub instants: usize,
    pub below: usize,
    pub above: usize,
}

impl Coverage {
    pub fn add(&mut self, sample: &[f64], actual: f64, q_lo: f64, q_hi: f64) {
        let mut s = sample.to_vec();
        s.sort_by(f64::total_cmp);
        self.instants += 1;
        if actual < plotting_quantile(&s, q_lo) {
            self.below += 1;
        }
        if actual > plotting_quantile(&s, q_hi) {
            self.above += 1;
        }
    }

    pub fn frequencies(&self) -> (f64, f64) {
        let n = self.instants.max(1) as f64;
        (self.below as f64 / n, self.above as f64 / n)
    }
}

/// Tail exceedance counts over a set of `(sample, actual)` instants.
pub fn coverage<'a>(instants: impl IntoIterator<Item = (&'a [f64], f64)>, q_lo: f64, q_hi: f64) -> Coverage {
    let mut c = Coverage::default();
    for (s, g) in instants {
        c.add(s, g, q_lo, q_hi);
    }
    c
}

/// `Σ_{i,j} |x_i − x_j|` in `O(N log N)`.
fn pair_abs_sum(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    2.0 * s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum::<f64>()
}

/// The common value of a non-empty constant ensemble. Summing `N` copies
/// and dividing is not exact in floating point.
fn constant(sample: &[f64]) -> Option<f64> {
    let c = *sample.first()?;
    sample.iter().all(|x| *x == c).then_some(c)
}

/// CRPS of the empirical ensemble distribution:
/// `mean|x − g| − Σ_{i,j}|x_i − x_j| / (2N²)`. Equals the integral of
/// `(F(y) − 1{y ≥ g})²` for the ensemble CDF.
pub fn crps(sample: &[f64], actual: f64) -> f64 {
    if let Some(c) = constant(sample) {
        return (c - actual).abs();
    }
    let n = sample.len() as f64;
    let a = sample.iter().map(|x| (x - actual).abs()).sum::<f64>() / n;
    (a - pair_abs_sum(sample) / (2.0 * n * n)).max(0.0)
}

/// Unbiased ensemble estimator with `N(N−1)` spread normalization.
pub fn crps_unbiased(sample: &[f64], actual: f64) -> f64 {
    if let Some(c) = constant(sample) {
        return (c - actual).abs();
    }
    let n = sample.len() as f64;
    let a = sample.iter().map(|x| (x - actual).abs()).sum::<f64>() / n;
    a - pair_abs_sum(sample) / (2.0 * n * (n - 1.0))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn energy_parts(sample: &[Vec<f64>], actual: &[f64]) -> Result<(f64, f64)> {
    if let Some(x) = sample.iter().find(|x| x.len() != actual.len()) {
        return Err(Error::Dimension {
            expected: actual.len(),
            actual: x.len(),
        });
    }
    let n = sample.len() as f64;
    let a = sample.iter().map(|x| dist(x, actual)).sum::<f64>() / n;
    let mut pairs = 0.0;
    for i in 0..sample.len() {
        for j in 0..i {
            pairs += 2.0 * dist(&sample[i], &sample[j]);
        }
    }
    Ok((a, pairs))
}

/// Energy score with the same empirical-distribution normalization as
/// [`crps`]; for `m = 1` the two agree.
pub fn energy_score(sample: &[Vec<f64>], actual: &[f64]) -> Result<f64> {
    let n = sample.len() as f64;
    let (a, pairs) = energy_parts(sample, actual)?;
    Ok((a - pairs / (2.0 * n * n)).max(0.0))
}

pub fn energy_score_unbiased(sample: &[Vec<f64>], actual: &[f64]) -> Result<f64> {
    let n = sample.len() as f64;
    let (a, pairs) = energy_parts(sample, actual)?;
    Ok(a - pairs / (2.0 * n * (n - 1.0)))
}

/// Bin counts of PIT values on `[0, 1]`.
pub fn pit_histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for v in values {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// One evaluation day: scenarios plus realized MWh per asset.
#[derive(Debug, Clone)]
pub struct EvaluationDay {
    pub scenarios: ScenarioSet,
    pub actuals: BTreeMap<String, [f64; HOURS]>,
}

/// Scores for one unit at one granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScores {
    pub unit: String,
    /// PIT values pooled over days, per hour.
    pub pit: Vec<Vec<f64>>,
    pub coverage: Coverage,
    pub crps_mean: f64,
    pub energy_mean: f64,
    pub days: usize,
}

impl UnitScores {
    pub fn pooled_pit(&self) -> Vec<f64> {
        self.pit.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub granularity: Grouping,
    pub first: NaiveDate,
    pub last: NaiveDate,
    pub units: Vec<UnitScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssessOptions {
    pub q_lo: f64,
    pub q_hi: f64,
    pub pit_bins: usize,
}

impl Default for AssessOptions {
    fn default() -> Self {
        AssessOptions {
            q_lo: 0.1,
            q_hi: 0.9,
            pit_bins: 10,
        }
    }
}

/// Scores every unit of a grouping over the evaluation days. Unit-hours
/// where every scenario and the actual are zero (night for solar) carry
/// no information and are skipped, as are missing actuals.
pub fn assess(
    days: &[EvaluationDay],
    records: &[AssetRecord],
    grouping: Grouping,
    opts: &AssessOptions,
    seed: u64,
) -> Result<ScoreReport> {
    let first = days.first().ok_or_else(|| Error::Degenerate("no evaluation days".into()))?;
    let mut rng = substream(seed, &format!("pit-{grouping:?}"));
    let mut acc: BTreeMap<String, UnitScores> = BTreeMap::new();
    let mut crps_n: BTreeMap<String, usize> = BTreeMap::new();
    for day in days {
        let set = &day.scenarios;
        if set.n_scenarios < 2 {
            return Err(Error::InvalidParameter("at least 2 scenarios are needed".into()));
        }
        let agg = aggregate(set, grouping, records)?;
        let by_id: BTreeMap<&str, &AssetRecord> = records.iter().map(|r| (r.asset_id.as_str(), r)).collect();
        let mut actual: BTreeMap<String, [f64; HOURS]> = BTreeMap::new();
        for id in &set.asset_ids {
            let g = day
                .actuals
                .get(id)
                .ok_or_else(|| Error::Degenerate(format!("no actuals for {id} on {}", set.target_date)))?;
            let unit = crate::simulate::unit_of(by_id[id.as_str()], grouping);
            let slot = actual.entry(unit).or_insert([0.0; HOURS]);
            for h in 0..HOURS {
                slot[h] += g[h];
            }
        }
        for (u, name) in agg.units.iter().enumerate() {
            let g = actual[name];
            let entry = acc.entry(name.clone()).or_insert_with(|| UnitScores {
                unit: name.clone(),
                pit: vec![Vec::new(); HOURS],
                coverage: Coverage::default(),
                crps_mean: 0.0,
                energy_mean: 0.0,
                days: 0,
            });
            let mut active = Vec::new();
            for h in 0..HOURS {
                let sample = agg.sample(u, h);
                if !g[h].is_finite() || (g[h] == 0.0 && sample.iter().all(|x| *x == 0.0)) {
                    continue;
                }
                active.push(h);
                entry.pit[h].push(pit(&sample, g[h], &mut rng));
                entry.coverage.add(&sample, g[h], opts.q_lo, opts.q_hi);
                entry.crps_mean += crps(&sample, g[h]);
                *crps_n.entry(name.clone()).or_default() += 1;
            }
            if !active.is_empty() {
                let vecs: Vec<Vec<f64>> = (0..agg.n_scenarios)
                    .map(|s| active.iter().map(|&h| agg.get(s, u, h)).collect())
                    .collect();
                let obs: Vec<f64> = active.iter().map(|&h| g[h]).collect();
                entry.energy_mean += energy_score(&vecs, &obs)?;
                entry.days += 1;
            }
        }
    }
    let units = acc
        .into_values()
        .map(|mut u| {
            u.crps_mean /= crps_n.get(&u.unit).copied().unwrap_or(0).max(1) as f64;
            u.energy_mean /= u.days.max(1) as f64;
            u
        })
        .collect();
    Ok(ScoreReport {
        granularity: grouping,
        first: first.scenarios.target_date,
        last: days.last().unwrap().scenarios.target_date,
        units,
    })
}

impl ScoreReport {
    pub fn rows(&self, opts: &AssessOptions) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        for u in &self.units {
            let pooled = u.pooled_pit();
            let (below, above) = u.coverage.frequencies();
            let mut push = |m: &str, v: f64| rows.push((u.unit.clone(), m.to_string(), v));
            push("instants", u.coverage.instants as f64);
            push("tail_low_count", u.coverage.below as f64);
            push("tail_high_count", u.coverage.above as f64);
            push("tail_low_freq", below);
            push("tail_high_freq", above);
            push("crps_mean", u.crps_mean);
            push("energy_score_mean", u.energy_mean);
            if !pooled.is_empty() {
                let (d, p) = ks_uniform(&pooled);
                push("pit_ks_stat", d);
                push("pit_ks_pvalue", p);
            }
            for (b, c) in pit_histogram(&pooled, opts.pit_bins).into_iter().enumerate() {
                push(&format!("pit_bin_{b:02}"), c as f64);
            }
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, writer: W, opts: &AssessOptions) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(REPORT_HEADER)?;
        for (u, m, v) in self.rows(opts) {
            w.write_record([u, m, v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("report csv", e))?;
        Ok(())
    }

    /// `unit,bin_lo,bin_hi,count` for external plotting.
    pub fn write_histogram_csv<W: Write>(&self, writer: W, bins: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "bin_lo", "bin_hi", "count"])?;
        for u in &self.units {
            for (b, c) in pit_histogram(&u.pooled_pit(), bins).into_iter().enumerate() {
                w.write_record([
                    u.unit.clone(),
                    (b as f64 / bins as f64).to_string(),
                    ((b + 1) as f64 / bins as f64).to_string(),
                    c.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("histogram csv", e))?;
        Ok(())
    }
}
