//! Synthetic portfolios drawn exactly from the censored ratio model, with a
//! known generating law kept for recovery checks.
//!
//! Forecast ratios are `β = logistic(X)`, `X ~ N(m, s²)` built from a daily
//! level plus an hourly wiggle. Actual ratios are
//! `α = clamp(β + μ + σ·Z)` with `Z` Gaussian, AR(1) across hours and
//! block-correlated across assets. Constants `μ`, `σ` are solved per kind
//! so that the expected point-mass frequencies match the request.

use chrono::{Duration, NaiveDate};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AssetKind, AssetRecord, DailyPanel, HOURS};
use crate::rng::substream;
use crate::stats::{logistic, norm_cdf, norm_pdf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_assets: usize,
    /// Leading assets that are solar.
    pub n_solar: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub n_blocks: usize,
    pub n_zones: usize,
    pub intra_rho: f64,
    pub inter_rho: f64,
    /// Lag-1 correlation of the deviates across hours.
    pub hour_phi: f64,
    pub p_zero: f64,
    pub p_max: f64,
    /// Overrides the solved constants when set.
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub capacity: f64,
    /// Keep the generating deviates in the truth record.
    pub keep_deviates: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_assets: 6,
            n_solar: 3,
            n_days: 730,
            start_date: NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(),
            n_blocks: 2,
            n_zones: 2,
            intra_rho: 0.7,
            inter_rho: 0.2,
            hour_phi: 0.8,
            p_zero: 0.05,
            p_max: 0.05,
            mu: None,
            sigma: None,
            capacity: 100.0,
            keep_deviates: false,
        }
    }
}

/// Standard deviations of the forecast-ratio logit.
const LEVEL_SD: f64 = 0.8;
const WIGGLE_SD: f64 = 0.3;

fn logit_mean(kind: AssetKind) -> f64 {
    match kind {
        AssetKind::Wind => 0.0,
        AssetKind::Solar => 0.8,
    }
}

/// `(P(α = 0), P(α = 1))` under the synthetic forecast-ratio law.
pub fn point_mass_probabilities(kind: AssetKind, mu: f64, sigma: f64) -> (f64, f64) {
    let s = (LEVEL_SD * LEVEL_SD + WIGGLE_SD * WIGGLE_SD).sqrt();
    let m = logit_mean(kind);
    let n = 2001;
    let (mut p0, mut p1, mut w) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x = -8.0 + 16.0 * i as f64 / (n - 1) as f64;
        let pdf = norm_pdf(x);
        let b = logistic(m + s * x);
        if sigma > 0.0 {
            p0 += pdf * norm_cdf(-(b + mu) / sigma);
            p1 += pdf * norm_cdf((b + mu - 1.0) / sigma);
        } else {
            p0 += pdf * f64::from(b + mu <= 0.0);
            p1 += pdf * f64::from(b + mu >= 1.0);
        }
        w += pdf;
    }
    (p0 / w, p1 / w)
}

/// Constants `(μ, σ)` reproducing the requested point masses.
pub fn solve_mu_sigma(kind: AssetKind, p_zero: f64, p_max: f64) -> Result<(f64, f64)> {
    if !(p_zero > 0.0 && p_max > 0.0 && p_zero + p_max < 0.9) {
        return Err(Error::InvalidParameter(format!(
            "point masses ({p_zero}, {p_max}) need μ, σ given explicitly"
        )));
    }
    let mu_for = |sigma: f64| {
        let (mut lo, mut hi) = (-1.0, 1.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let (a, b) = point_mass_probabilities(kind, mid, sigma);
            if a - b > p_zero - p_max {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (mut lo, mut hi) = (1e-3_f64, 3.0_f64);
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        let (a, b) = point_mass_probabilities(kind, mu_for(mid), mid);
        if a + b < p_zero + p_max {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = (lo * hi).sqrt();
    Ok((mu_for(sigma), sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetTruth {
    pub asset_id: String,
    pub kind: AssetKind,
    pub block: usize,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub config: SynthConfig,
    pub assets: Vec<AssetTruth>,
    /// `[asset][day][hour]` when requested.
    #[serde(skip)]
    pub deviates: Vec<Vec<[f64; HOURS]>>,
}

/// Diurnal boundaries `(sunrise, sunset)` as day fractions.
pub fn solar_boundaries(date: NaiveDate) -> (f64, f64) {
    let phi = crate::ingest::year_fraction(date);
    let c = (2.0 * std::f64::consts::PI * (phi - 0.47)).cos();
    (0.27 - 0.03 * c, 0.77 + 0.03 * c)
}

/// Seasonal clear-sky maximum for an hour, as a fraction of capacity.
pub fn solar_profile(date: NaiveDate, hour: usize) -> f64 {
    let (s, t) = solar_boundaries(date);
    let phi = crate::ingest::year_fraction(date);
    let env = 0.8 + 0.15 * (2.0 * std::f64::consts::PI * (phi - 0.47)).cos();
    let u = ((hour as f64 + 0.5) / HOURS as f64 - s) / (t - s);
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        env * (std::f64::consts::PI * u).sin()
    }
}

fn ar1(rng: &mut impl Rng, phi: f64) -> [f64; HOURS] {
    let mut out = [0.0; HOURS];
    let innov = (1.0 - phi * phi).sqrt();
    out[0] = rng.sample(StandardNormal);
    for h in 1..HOURS {
        out[h] = phi * out[h - 1] + innov * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidParameter(format!("synth: {m}")));
    if cfg.n_assets == 0 || cfg.n_days == 0 {
        return bad("need at least one asset and one day");
    }
    if cfg.n_solar > cfg.n_assets {
        return bad("more solar assets than assets");
    }
    if cfg.n_blocks == 0 || cfg.n_blocks > cfg.n_assets || cfg.n_zones == 0 {
        return bad("block and zone counts must lie in 1..=assets");
    }
    if !(0.0..=1.0).contains(&cfg.inter_rho) || !(cfg.inter_rho..=1.0).contains(&cfg.intra_rho) {
        return bad("need 0 ≤ inter_rho ≤ intra_rho ≤ 1");
    }
    if !(0.0..1.0).contains(&cfg.hour_phi.abs()) {
        return bad("hour_phi must lie in (−1, 1)");
    }
    if cfg.capacity <= 0.0 || !cfg.capacity.is_finite() {
        return bad("capacity must be positive");
    }
    if cfg.sigma.is_some_and(|s| s < 0.0) {
        return bad("sigma must be non-negative");
    }
    if cfg.mu.is_some() != cfg.sigma.is_some() {
        return bad("mu and sigma are overridden together");
    }
    Ok(())
}

/// Draws the portfolio. Deterministic in `seed`.
pub fn synthesize_truth(cfg: &SynthConfig, seed: u64) -> Result<(Vec<AssetRecord>, Vec<DailyPanel>, TruthRecord)> {
    validate(cfg)?;
    let params = |kind| match (cfg.mu, cfg.sigma) {
        (Some(m), Some(s)) => Ok((m, s)),
        _ => solve_mu_sigma(kind, cfg.p_zero, cfg.p_max),
    };
    let wind = params(AssetKind::Wind)?;
    let solar = if cfg.n_solar > 0 { params(AssetKind::Solar)? } else { wind };
    let j = cfg.n_assets;
    let block_of = |a: usize| a * cfg.n_blocks / j;
    let mut records = Vec::with_capacity(j);
    let mut truth = Vec::with_capacity(j);
    for a in 0..j {
        let kind = if a < cfg.n_solar { AssetKind::Solar } else { AssetKind::Wind };
        let (mu, sigma) = if kind == AssetKind::Solar { solar } else { wind };
        let id = format!("{}{:03}", if kind == AssetKind::Solar { "S" } else { "W" }, a);
        records.push(AssetRecord {
            asset_id: id.clone(),
            kind,
            nominal_capacity: cfg.capacity,
            latitude: 30.0 + a as f64 * 0.1,
            longitude: -97.0 - a as f64 * 0.1,
            zone: format!("Z{}", block_of(a) % cfg.n_zones),
        });
        truth.push(AssetTruth {
            asset_id: id,
            kind,
            block: block_of(a),
            mu,
            sigma,
        });
    }
    let mut rng = substream(seed, "synth");
    let mut panels: Vec<DailyPanel> = records.iter().map(|r| DailyPanel::new(r.asset_id.clone())).collect();
    let mut deviates = vec![Vec::new(); if cfg.keep_deviates { j } else { 0 }];
    let (wg, wb, wi) = (
        cfg.inter_rho.sqrt(),
        (cfg.intra_rho - cfg.inter_rho).sqrt(),
        (1.0 - cfg.intra_rho).sqrt(),
    );
    for d in 0..cfg.n_days {
        let date = cfg.start_date + Duration::days(d as i64);
        let global = ar1(&mut rng, cfg.hour_phi);
        let blocks: Vec<[f64; HOURS]> = (0..cfg.n_blocks).map(|_| ar1(&mut rng, cfg.hour_phi)).collect();
        for a in 0..j {
            let t = &truth[a];
            let own = ar1(&mut rng, cfg.hour_phi);
            let level: f64 = logit_mean(t.kind) + LEVEL_SD * rng.sample::<f64, _>(StandardNormal);
            let mut f = [0.0; HOURS];
            let mut g = [0.0; HOURS];
            let mut zs = [0.0; HOURS];
            for h in 0..HOURS {
                let z = wg * global[h] + wb * blocks[t.block][h] + wi * own[h];
                zs[h] = z;
                let wiggle: f64 = WIGGLE_SD * rng.sample::<f64, _>(StandardNormal);
                let m = match t.kind {
                    AssetKind::Wind => cfg.capacity,
                    AssetKind::Solar => cfg.capacity * solar_profile(date, h),
                };
                if m <= 0.0 {
                    continue;
                }
                let beta = logistic(level + wiggle);
                let alpha = (beta + t.mu + t.sigma * z).clamp(0.0, 1.0);
                f[h] = beta * m;
                g[h] = alpha * m;
            }
            panels[a].push_day(date, f, g);
            if cfg.keep_deviates {
                deviates[a].push(zs);
            }
        }
    }
    Ok((
        records,
        panels,
        TruthRecord {
            config: cfg.clone(),
            assets: truth,
            deviates,
        },
    ))
}
