//! Moves window-day data onto the target day's seasonal footing and turns
//! it into production ratios.
//!
//! Solar days are dilated between their diurnal boundaries and scaled by the
//! envelope ratio; wind days are scaled per hour by the seasonal mean
//! surface. Both are then normalized by the window's hourly maxima.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AssetKind, DailyPanel, DayWindow, HOURS};
use crate::meta::MetaModel;

/// Cells within this relative distance of the capacity level count as
/// sitting on it.
const CAPACITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPanel {
    pub asset_id: String,
    pub kind: AssetKind,
    pub target_date: NaiveDate,
    /// Zero-based hour indices, ascending.
    pub active_hours: Vec<usize>,
    pub days: Vec<NaiveDate>,
    /// `days × active_hours`; NaN marks missing cells.
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    /// Window hourly maximum `g^max_{d,h}` per active hour.
    pub hourly_max: Vec<f64>,
    /// Target-day boundaries `[ŝ_d, t̂_d]` (wind: `[0, 1]`).
    pub boundaries: (f64, f64),
}

impl RatioPanel {
    pub fn n_hours(&self) -> usize {
        self.active_hours.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    /// Debug dump with columns `date,hour,alpha,beta,hourly_max`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["date", "hour", "alpha", "beta", "hourly_max"])?;
        for (i, d) in self.days.iter().enumerate() {
            for (j, h) in self.active_hours.iter().enumerate() {
                let fmt = |v: f64| if v.is_finite() { format!("{v}") } else { String::new() };
                w.write_record([
                    d.to_string(),
                    (h + 1).to_string(),
                    fmt(self.alpha[i][j]),
                    fmt(self.beta[i][j]),
                    format!("{}", self.hourly_max[j]),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<ratio panel>", e))?;
        Ok(())
    }
}

/// Hour midpoint as a day fraction.
fn midpoint(h: usize) -> f64 {
    (h as f64 + 0.5) / HOURS as f64
}

/// Linear interpolation of an hourly profile sampled at hour midpoints,
/// held constant beyond the first and last midpoint.
fn interpolate(profile: &[f64; HOURS], tau: f64) -> f64 {
    let pos = tau * HOURS as f64 - 0.5;
    if pos <= 0.0 {
        return profile[0];
    }
    if pos >= (HOURS - 1) as f64 {
        return profile[HOURS - 1];
    }
    let nearest = pos.round();
    if (pos - nearest).abs() < 1e-9 {
        return profile[nearest as usize];
    }
    let lo = pos.floor() as usize;
    let w = pos - lo as f64;
    let (a, b) = (profile[lo], profile[lo + 1]);
    // Exact endpoints keep missing cells from leaking into neighbours.
    if w == 0.0 {
        a
    } else {
        (1.0 - w) * a + w * b
    }
}

/// Dilates a solar profile from source boundaries onto the target hour grid.
pub fn dilate(
    source: &[f64; HOURS],
    source_bounds: (f64, f64),
    target_bounds: (f64, f64),
    scale: f64,
) -> [f64; HOURS] {
    let (s_src, t_src) = source_bounds;
    let (s_tgt, t_tgt) = target_bounds;
    let mut out = [0.0; HOURS];
    for (h, o) in out.iter_mut().enumerate() {
        let u = (midpoint(h) - s_tgt) / (t_tgt - s_tgt);
        if !(0.0..=1.0).contains(&u) {
            continue;
        }
        let tau = s_src + u * (t_src - s_src);
        *o = scale * interpolate(source, tau);
    }
    out
}

/// Rescaled `(g̃, f̃)` of a source day for a target day.
pub fn rescale_day(
    source: NaiveDate,
    target: NaiveDate,
    meta: &MetaModel,
    panel: &DailyPanel,
) -> Result<([f64; HOURS], [f64; HOURS])> {
    let i = panel.day_index(source).ok_or_else(|| {
        Error::Infeasible(format!("{}: no data on {source}", panel.asset_id))
    })?;
    let (g, f) = (&panel.actual[i], &panel.forecast[i]);
    match meta.kind {
        AssetKind::Solar => {
            if source == target {
                return Ok((*g, *f));
            }
            let ratio = meta.max_envelope_at(target) / meta.max_envelope_at(source);
            let sb = meta.boundaries_at(source);
            let tb = meta.boundaries_at(target);
            Ok((dilate(g, sb, tb, ratio), dilate(f, sb, tb, ratio)))
        }
        AssetKind::Wind => {
            let cap = meta.observed_max;
            let mut gt = [0.0; HOURS];
            let mut ft = [0.0; HOURS];
            for h in 0..HOURS {
                let r = meta.wind_mean_at(target, h) / meta.wind_mean_at(source, h);
                gt[h] = scale_wind(g[h], r, cap);
                ft[h] = scale_wind(f[h], r, cap);
            }
            Ok((gt, ft))
        }
    }
}

/// Volumetric wind scaling capped at the capacity level; values already at
/// capacity stay there so the upper point mass survives rescaling.
fn scale_wind(v: f64, ratio: f64, cap: f64) -> f64 {
    if !v.is_finite() || cap <= 0.0 {
        return v;
    }
    if v >= (1.0 - CAPACITY_TOL) * cap {
        return cap;
    }
    (v * ratio).min(cap)
}

/// Per-hour maximum over rescaled window actuals, ignoring missing cells.
pub fn hourly_max(rescaled: &[[f64; HOURS]]) -> [f64; HOURS] {
    let mut m = [0.0f64; HOURS];
    for day in rescaled {
        for (mh, v) in m.iter_mut().zip(day) {
            if v.is_finite() {
                *mh = mh.max(*v);
            }
        }
    }
    m
}

/// Active hours for the target date before trimming.
pub fn candidate_active_hours(meta: &MetaModel, target: NaiveDate) -> Vec<usize> {
    match meta.kind {
        AssetKind::Wind => (0..HOURS).collect(),
        AssetKind::Solar => {
            let (s, t) = meta.boundaries_at(target);
            let first = (s * HOURS as f64).floor().max(0.0) as usize;
            let last = ((t * HOURS as f64).ceil() as usize).clamp(1, HOURS);
            (first.min(HOURS - 1)..last).collect()
        }
    }
}

/// Production ratios of the window days, normalized by the hourly maxima.
pub fn make_ratios(window: &DayWindow, meta: &MetaModel, panel: &DailyPanel) -> Result<RatioPanel> {
    let target = window.target_date;
    let mut days = Vec::with_capacity(window.len());
    let mut g_rs = Vec::with_capacity(window.len());
    let mut f_rs = Vec::with_capacity(window.len());
    for &d in &window.members {
        if panel.day_index(d).is_none() {
            continue;
        }
        let (g, f) = rescale_day(d, target, meta, panel)?;
        days.push(d);
        g_rs.push(g);
        f_rs.push(f);
    }
    if days.is_empty() {
        return Err(Error::Infeasible(format!(
            "{}: no window data around {target}",
            panel.asset_id
        )));
    }
    let gmax = hourly_max(&g_rs);
    let mut active = candidate_active_hours(meta, target);
    if meta.kind == AssetKind::Solar {
        // Partially lit edge hours can carry no rescaled production.
        while active.first().is_some_and(|&h| gmax[h] <= 0.0) {
            active.remove(0);
        }
        while active.last().is_some_and(|&h| gmax[h] <= 0.0) {
            active.pop();
        }
    }
    if active.is_empty() {
        return Err(Error::Infeasible(format!(
            "{}: no active hours on {target}",
            panel.asset_id
        )));
    }
    if let Some(&h) = active.iter().find(|&&h| gmax[h] <= 0.0) {
        return Err(Error::Infeasible(format!(
            "{}: hourly maximum is zero at active hour {} on {target}",
            panel.asset_id,
            h + 1
        )));
    }
    let hourly: Vec<f64> = active.iter().map(|&h| gmax[h]).collect();
    let ratio = |rows: &[[f64; HOURS]], clip: bool| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                active
                    .iter()
                    .zip(&hourly)
                    .map(|(&h, m)| {
                        let v = r[h] / m;
                        if clip && v.is_finite() {
                            v.clamp(0.0, 1.0)
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect()
    };
    Ok(RatioPanel {
        asset_id: panel.asset_id.clone(),
        kind: meta.kind,
        target_date: target,
        alpha: ratio(&g_rs, false),
        beta: ratio(&f_rs, true),
        active_hours: active,
        days,
        hourly_max: hourly,
        boundaries: meta.boundaries_at(target),
    })
}

/// Target-day forecast ratios `β_h = f_h / g^max_{d,h}` on the active hours,
/// clipped into `[0, 1]`.
pub fn target_beta(ratios: &RatioPanel, forecast: &[f64; HOURS]) -> Vec<f64> {
    ratios
        .active_hours
        .iter()
        .zip(&ratios.hourly_max)
        .map(|(&h, m)| {
            let b = forecast[h] / m;
            if b > 1.0 {
                log::warn!(
                    "{}: forecast {} exceeds hourly max {m} at hour {}; clipped",
                    ratios.asset_id,
                    forecast[h],
                    h + 1
                );
            }
            b.clamp(0.0, 1.0)
        })
        .collect()
}
