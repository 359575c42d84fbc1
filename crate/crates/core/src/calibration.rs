//! Forecast-conditional censored-Gaussian model of production ratios and the
//! Gaussianized deviate panels derived from it.
//!
//! Per active hour, `α = 0 ∨ 1 ∧ (β + μ(β̃) + σ(β̃) Z)` with `μ` and `log σ`
//! quadratic in the stabilized forecast `β̃`. Point masses at zero and at the
//! hourly maximum enter the likelihood as censored observations.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::AssetKind;
use crate::linalg::ConditionalSampler;
use crate::optimize::{bfgs, BfgsOptions};
use crate::rescale::RatioPanel;
use crate::rng;
use crate::stats::{
    ln_norm_cdf, logistic, mills_lower, mills_upper, norm_cdf, norm_quantile, norm_sf,
};

pub use crate::linalg::psd_repair;

/// Ratios at or above this are treated as sitting on the hourly maximum.
pub const UPPER_TOL: f64 = 1e-9;
/// Censoring probabilities below this make imputation fall back to the
/// threshold itself.
pub const MIN_CENSOR_PROB: f64 = 1e-8;

/// Number of free coefficients `ϑ = (m₀, m₁, m₂, s₀, s₁, s₂)`.
pub const N_PARAMS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Censoring {
    Interior,
    Lower,
    Upper,
}

impl Censoring {
    pub fn classify(alpha: f64) -> Censoring {
        if alpha <= 0.0 {
            Censoring::Lower
        } else if alpha >= 1.0 - UPPER_TOL {
            Censoring::Upper
        } else {
            Censoring::Interior
        }
    }
}

/// One ratio cell prepared for the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub beta: f64,
    pub beta_tilde: f64,
    /// Forecast error `ε = α − β`.
    pub eps: f64,
    pub censoring: Censoring,
}

impl Observation {
    pub fn new(alpha: f64, beta: f64, beta_tilde: f64) -> Self {
        Observation {
            beta,
            beta_tilde,
            eps: alpha - beta,
            censoring: Censoring::classify(alpha),
        }
    }
}

/// `β̃ = ψ((β − μ_β)/σ_β)` with the logistic `ψ`.
pub fn stabilize_forecast(beta: f64, mu_beta: f64, sigma_beta: f64) -> f64 {
    logistic((beta - mu_beta) / sigma_beta)
}

fn quad(c: &[f64], x: f64) -> f64 {
    c[0] + c[1] * x + c[2] * x * x
}

/// Mean and standard deviation at `β̃` for coefficients `ϑ`.
pub fn mu_sigma_at(theta: &[f64], beta_tilde: f64, floor: f64) -> (f64, f64) {
    (
        quad(&theta[0..3], beta_tilde),
        floor + quad(&theta[3..6], beta_tilde).exp(),
    )
}

/// Censored negative log-likelihood (constants dropped). Writes the
/// analytic gradient when `grad` is given.
pub fn neg_log_likelihood(
    obs: &[Observation],
    theta: &[f64],
    floor: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let mut total = 0.0;
    for o in obs {
        let b = o.beta_tilde;
        let mu = quad(&theta[0..3], b);
        let e = quad(&theta[3..6], b).exp();
        let sigma = floor + e;
        let (value, d_mu, d_sigma) = match o.censoring {
            Censoring::Interior => {
                let z = (o.eps - mu) / sigma;
                (sigma.ln() + 0.5 * z * z, -z / sigma, (1.0 - z * z) / sigma)
            }
            Censoring::Lower => {
                let c = (-o.beta - mu) / sigma;
                let lam = mills_lower(c);
                (-ln_norm_cdf(c), lam / sigma, lam * c / sigma)
            }
            Censoring::Upper => {
                let c = (1.0 - o.beta - mu) / sigma;
                let lam = mills_upper(c);
                (-ln_norm_cdf(-c), -lam / sigma, -lam * c / sigma)
            }
        };
        total += value;
        if let Some(g) = grad.as_deref_mut() {
            let powers = [1.0, b, b * b];
            for k in 0..3 {
                g[k] += d_mu * powers[k];
                g[3 + k] += d_sigma * e * powers[k];
            }
        }
    }
    total
}

/// Mean and variance of `N(m, s²)` truncated to `(−∞, c]` (`upper = false`)
/// or `[c, ∞)` (`upper = true`).
pub fn truncated_moments(m: f64, s: f64, c: f64, upper: bool) -> (f64, f64) {
    let a = (c - m) / s;
    if upper {
        let lam = mills_upper(a);
        (m + s * lam, s * s * (1.0 + a * lam - lam * lam).max(0.0))
    } else {
        let lam = mills_lower(a);
        (m - s * lam, s * s * (1.0 - a * lam - lam * lam).max(0.0))
    }
}

/// Three-term objective: the Gaussian negative log-likelihood on interior
/// cells plus, for censored cells, its expectation conditioned on the
/// censoring event under the `reference` parameters. At the censored MLE
/// `ϑ̂`, `ϑ̂` also minimizes this objective with `reference = ϑ̂`.
pub fn expected_objective(obs: &[Observation], theta: &[f64], reference: &[f64], floor: f64) -> f64 {
    obs.iter()
        .map(|o| {
            let (mu, sigma) = mu_sigma_at(theta, o.beta_tilde, floor);
            match o.censoring {
                Censoring::Interior => {
                    let z = (o.eps - mu) / sigma;
                    sigma.ln() + 0.5 * z * z
                }
                side => {
                    let (rm, rs) = mu_sigma_at(reference, o.beta_tilde, floor);
                    let (mean, var) = match side {
                        Censoring::Lower => truncated_moments(rm, rs, -o.beta, false),
                        _ => truncated_moments(rm, rs, 1.0 - o.beta, true),
                    };
                    sigma.ln() + (var + (mean - mu).powi(2)) / (2.0 * sigma * sigma)
                }
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub restarts: usize,
    pub sigma_floor: f64,
    /// Hours with fewer interior cells borrow data from neighbouring hours.
    pub min_interior: usize,
    /// Gibbs sweeps when a day has several censored cells.
    pub imputation_sweeps: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            restarts: 5,
            sigma_floor: 1e-3,
            min_interior: 30,
            imputation_sweeps: 2000,
        }
    }
}

/// Fitted coefficients for one active hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourModel {
    pub hour: usize,
    /// `ϑ = (m₀, m₁, m₂, s₀, s₁, s₂)`.
    pub theta: Vec<f64>,
    /// Neighbouring hours whose data were pooled in (empty when none).
    pub pooled_with: Vec<usize>,
    pub interior: usize,
    pub lower: usize,
    pub upper: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSigmaModel {
    pub mu_beta: f64,
    pub sigma_beta: f64,
    pub sigma_floor: f64,
    pub hours: Vec<HourModel>,
}

impl MuSigmaModel {
    pub fn beta_tilde(&self, beta: f64) -> f64 {
        stabilize_forecast(beta, self.mu_beta, self.sigma_beta)
    }

    /// `(μ_h, σ_h)` at forecast ratio `β` for active-hour position `j`.
    pub fn mu_sigma(&self, j: usize, beta: f64) -> (f64, f64) {
        mu_sigma_at(&self.hours[j].theta, self.beta_tilde(beta), self.sigma_floor)
    }
}

/// Least squares start for `μ`, constant `log σ`.
fn initial_theta(obs: &[Observation], floor: f64) -> Vec<f64> {
    let interior: Vec<&Observation> =
        obs.iter().filter(|o| o.censoring == Censoring::Interior).collect();
    let mut theta = vec![0.0; N_PARAMS];
    let pts: Vec<&Observation> = if interior.len() >= 3 { interior } else { obs.iter().collect() };
    let n = pts.len();
    let x = DMatrix::from_fn(n, 3, |i, k| pts[i].beta_tilde.powi(k as i32));
    let y = nalgebra::DVector::from_iterator(n, pts.iter().map(|o| o.eps));
    let coef = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-10)
        .map(|c| c.as_slice().to_vec())
        .unwrap_or_else(|_| vec![crate::stats::mean(y.as_slice()), 0.0, 0.0]);
    theta[..3].copy_from_slice(&coef);
    let resid = &y - &x * nalgebra::DVector::from_column_slice(&coef);
    let sd = (resid.norm_squared() / n.max(1) as f64).sqrt();
    theta[3] = (sd - floor).max(1e-3).ln();
    theta
}

/// Censored maximum likelihood for one hour with seeded restarts.
pub fn fit_hour(obs: &[Observation], opts: &CalibrationOptions, seed: u64) -> Result<Vec<f64>> {
    if !obs.iter().any(|o| o.censoring == Censoring::Interior) {
        return Err(Error::fit("mu/sigma", "all cells censored"));
    }
    let floor = opts.sigma_floor;
    let init = initial_theta(obs, floor);
    let mut rng = rng::substream(seed, "mu-sigma-restarts");
    let bfgs_opts = BfgsOptions {
        max_iter: 500,
        ..Default::default()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..opts.restarts.max(1) {
        let mut x0 = init.clone();
        if r > 0 {
            for (k, v) in x0.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v += if k < 3 { 0.05 } else { 0.3 } * z;
            }
        }
        let m = bfgs(|x, g| neg_log_likelihood(obs, x, floor, Some(g)), &x0, &bfgs_opts);
        if m.f.is_finite() && m.x.iter().all(|v| v.is_finite()) && best.as_ref().is_none_or(|b| m.f < b.0) {
            best = Some((m.f, m.x));
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| Error::fit("mu/sigma", "no restart reached a finite optimum"))
}

fn observations(ratios: &RatioPanel, j: usize, mu_beta: f64, sigma_beta: f64) -> Vec<Observation> {
    ratios
        .alpha
        .iter()
        .zip(&ratios.beta)
        .filter(|(a, b)| a[j].is_finite() && b[j].is_finite())
        .map(|(a, b)| Observation::new(a[j], b[j], stabilize_forecast(b[j], mu_beta, sigma_beta)))
        .collect()
}

/// Empirical mean and standard deviation of all forecast ratios in the panel.
pub fn forecast_standardizers(ratios: &RatioPanel) -> (f64, f64) {
    let all: Vec<f64> = ratios
        .beta
        .iter()
        .zip(&ratios.alpha)
        .flat_map(|(b, a)| b.iter().zip(a).filter(|(_, a)| a.is_finite()).map(|(b, _)| *b))
        .filter(|v| v.is_finite())
        .collect();
    let m = crate::stats::mean(&all);
    let s = if all.len() > 1 { crate::stats::std_dev(&all) } else { 0.0 };
    (m, s.max(1e-3))
}

pub fn fit_mu_sigma(ratios: &RatioPanel, opts: &CalibrationOptions, seed: u64) -> Result<MuSigmaModel> {
    let (mu_beta, sigma_beta) = forecast_standardizers(ratios);
    let h = ratios.n_hours();
    let per_hour: Vec<Vec<Observation>> =
        (0..h).map(|j| observations(ratios, j, mu_beta, sigma_beta)).collect();
    let interior = |j: usize| per_hour[j].iter().filter(|o| o.censoring == Censoring::Interior).count();
    let mut hours = Vec::with_capacity(h);
    for j in 0..h {
        let mut pooled = Vec::new();
        let mut obs = per_hour[j].clone();
        let mut count = interior(j);
        let mut radius = 1;
        while count < opts.min_interior && radius < h {
            for k in [j.checked_sub(radius), Some(j + radius)].into_iter().flatten() {
                if k < h {
                    obs.extend_from_slice(&per_hour[k]);
                    count += interior(k);
                    pooled.push(ratios.active_hours[k]);
                }
            }
            radius += 1;
        }
        let theta = fit_hour(&obs, opts, rng::substream_seed(seed, &format!("hour-{j}"))).map_err(|e| {
            Error::fit(
                format!("{} hour {}", ratios.asset_id, ratios.active_hours[j] + 1),
                e.to_string(),
            )
        })?;
        let own = &per_hour[j];
        hours.push(HourModel {
            hour: ratios.active_hours[j],
            theta,
            pooled_with: pooled,
            interior: own.iter().filter(|o| o.censoring == Censoring::Interior).count(),
            lower: own.iter().filter(|o| o.censoring == Censoring::Lower).count(),
            upper: own.iter().filter(|o| o.censoring == Censoring::Upper).count(),
        });
    }
    Ok(MuSigmaModel {
        mu_beta,
        sigma_beta,
        sigma_floor: opts.sigma_floor,
        hours,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Interior,
    /// Deviate known only to lie at or below the stored threshold.
    Lower,
    /// Deviate known only to lie at or above the stored threshold.
    Upper,
    Missing,
}

/// Deviates before imputation. Censored cells hold their threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialDeviates {
    pub days: Vec<NaiveDate>,
    pub z: Vec<Vec<f64>>,
    pub kind: Vec<Vec<CellKind>>,
}

impl PartialDeviates {
    pub fn n_hours(&self) -> usize {
        self.z.first().map_or(0, |r| r.len())
    }
}

pub fn compute_deviates(ratios: &RatioPanel, model: &MuSigmaModel) -> PartialDeviates {
    let mut z = Vec::with_capacity(ratios.n_days());
    let mut kind = Vec::with_capacity(ratios.n_days());
    for (a_row, b_row) in ratios.alpha.iter().zip(&ratios.beta) {
        let mut zr = Vec::with_capacity(a_row.len());
        let mut kr = Vec::with_capacity(a_row.len());
        for (j, (&a, &b)) in a_row.iter().zip(b_row).enumerate() {
            if !(a.is_finite() && b.is_finite()) {
                zr.push(f64::NAN);
                kr.push(CellKind::Missing);
                continue;
            }
            let (mu, sigma) = model.mu_sigma(j, b);
            match Censoring::classify(a) {
                Censoring::Interior => {
                    zr.push((a - b - mu) / sigma);
                    kr.push(CellKind::Interior);
                }
                Censoring::Lower => {
                    zr.push((-b - mu) / sigma);
                    kr.push(CellKind::Lower);
                }
                Censoring::Upper => {
                    zr.push((1.0 - b - mu) / sigma);
                    kr.push(CellKind::Upper);
                }
            }
        }
        z.push(zr);
        kind.push(kr);
    }
    PartialDeviates {
        days: ratios.days.clone(),
        z,
        kind,
    }
}

/// Lag correlation function of the deviates and its Toeplitz hour matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InterHour {
    /// `ρ(k)` for `k = 0..H`.
    pub rho: Vec<f64>,
    /// Pairs that entered each lag estimate.
    pub pairs: Vec<usize>,
    pub matrix: DMatrix<f64>,
}

/// Minimum pairs for a lag to be estimated rather than interpolated.
pub const MIN_LAG_PAIRS: usize = 10;

pub fn interhour_correlation(partial: &PartialDeviates) -> Result<InterHour> {
    let h = partial.n_hours();
    if h == 0 {
        return Err(Error::Degenerate("no active hours".into()));
    }
    let mut rho = vec![f64::NAN; h];
    let mut pairs = vec![0; h];
    rho[0] = 1.0;
    for k in 1..h {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (zr, kr) in partial.z.iter().zip(&partial.kind) {
            for a in 0..h - k {
                if kr[a] == CellKind::Interior && kr[a + k] == CellKind::Interior {
                    xs.push(zr[a]);
                    ys.push(zr[a + k]);
                }
            }
        }
        pairs[k] = xs.len();
        if xs.len() >= MIN_LAG_PAIRS {
            if let Some(r) = crate::stats::pearson(&xs, &ys) {
                rho[k] = r.clamp(-1.0, 1.0);
            }
        }
    }
    fill_lags(&mut rho);
    let matrix = DMatrix::from_fn(h, h, |i, j| rho[i.abs_diff(j)]);
    let matrix = psd_repair(&matrix)?;
    Ok(InterHour { rho, pairs, matrix })
}

/// Linear interpolation over lags lacking data; beyond the last estimated
/// lag the function decays linearly to zero at lag `H`.
fn fill_lags(rho: &mut [f64]) {
    let h = rho.len();
    let known: Vec<usize> = (0..h).filter(|&k| rho[k].is_finite()).collect();
    let last = *known.last().unwrap_or(&0);
    for k in 0..h {
        if rho[k].is_finite() {
            continue;
        }
        let (lo, lo_v) = known.iter().rev().find(|&&i| i < k).map(|&i| (i, rho[i])).unwrap_or((0, 1.0));
        let (hi, hi_v) = if k > last {
            (h, 0.0)
        } else {
            known.iter().find(|&&i| i > k).map(|&i| (i, rho[i])).unwrap_or((h, 0.0))
        };
        let w = (k - lo) as f64 / (hi - lo) as f64;
        rho[k] = (1.0 - w) * lo_v + w * hi_v;
    }
}

/// Draw from `N(m, s²)` restricted to one side of `c` by inversion.
fn truncated_draw<R: Rng>(rng: &mut R, m: f64, s: f64, c: f64, upper: bool) -> f64 {
    if s <= 0.0 {
        return if upper { m.max(c) } else { m.min(c) };
    }
    let a = (c - m) / s;
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let x = if upper {
        -norm_quantile(u * norm_cdf(-a))
    } else {
        norm_quantile(u * norm_cdf(a))
    };
    let x = if x.is_finite() { x } else { a };
    let v = m + s * x;
    if upper { v.max(c) } else { v.min(c) }
}

/// Replace censored and missing cells by their conditional expectations
/// given the day's interior deviates and the censoring events.
pub fn impute_censored(
    partial: &PartialDeviates,
    hour_corr: &DMatrix<f64>,
    opts: &CalibrationOptions,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let h = partial.n_hours();
    if hour_corr.nrows() != h {
        return Err(Error::Dimension {
            expected: h,
            actual: hour_corr.nrows(),
        });
    }
    let mut out = Vec::with_capacity(partial.z.len());
    for (day, (zr, kr)) in partial.z.iter().zip(&partial.kind).enumerate() {
        let mut rng = rng::indexed(seed, "impute", day as u64);
        out.push(impute_day(zr, kr, hour_corr, opts.imputation_sweeps, &mut rng)?);
    }
    Ok(out)
}

fn impute_day<R: Rng>(
    z: &[f64],
    kind: &[CellKind],
    corr: &DMatrix<f64>,
    sweeps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut out = z.to_vec();
    let mut known: Vec<usize> = (0..z.len()).filter(|&i| kind[i] == CellKind::Interior).collect();
    if known.len() == z.len() {
        return Ok(out);
    }
    let mut values: Vec<f64> = known.iter().map(|&i| z[i]).collect();

    // Censored cells whose event is numerically impossible are pinned at
    // their threshold and treated as observed.
    loop {
        let s = ConditionalSampler::new(corr, &known)?;
        let mean = s.mean(&values);
        let mut pinned = false;
        for (u, &i) in s.unknown.iter().enumerate() {
            let upper = match kind[i] {
                CellKind::Lower => false,
                CellKind::Upper => true,
                _ => continue,
            };
            let sd = s.cov[(u, u)].max(0.0).sqrt();
            let a = (z[i] - mean[u]) / sd.max(1e-300);
            let p = if upper { norm_sf(a) } else { norm_cdf(a) };
            if sd < 1e-12 || p < MIN_CENSOR_PROB {
                known.push(i);
                values.push(z[i]);
                pinned = true;
            }
        }
        if !pinned {
            break;
        }
    }
    for (&i, &v) in known.iter().zip(&values) {
        out[i] = v;
    }
    let sampler = ConditionalSampler::new(corr, &known)?;
    let mean = sampler.mean(&values);
    let cens: Vec<usize> = (0..sampler.unknown.len())
        .filter(|&u| matches!(kind[sampler.unknown[u]], CellKind::Lower | CellKind::Upper))
        .collect();

    // Conditional expectation of the censored block.
    let cens_mean: Vec<f64> = match cens.len() {
        0 => Vec::new(),
        1 => {
            let u = cens[0];
            let i = sampler.unknown[u];
            let sd = sampler.cov[(u, u)].sqrt();
            vec![truncated_moments(mean[u], sd, z[i], kind[i] == CellKind::Upper).0]
        }
        _ => gibbs_mean(&sampler, &mean, &cens, z, kind, sweeps, rng),
    };

    // Remaining unknowns (missing cells) regress linearly on the censored block.
    let m = cens.len();
    let cc = DMatrix::from_fn(m, m, |a, b| sampler.cov[(cens[a], cens[b])]);
    let cc_inv = crate::linalg::pinv_sym(&cc);
    let shift = nalgebra::DVector::from_iterator(m, (0..m).map(|a| cens_mean[a] - mean[cens[a]]));
    let weights = &cc_inv * shift;
    for (u, &i) in sampler.unknown.iter().enumerate() {
        if let Some(a) = cens.iter().position(|&c| c == u) {
            out[i] = cens_mean[a];
        } else {
            let adj: f64 = (0..m).map(|b| sampler.cov[(u, cens[b])] * weights[b]).sum();
            out[i] = mean[u] + adj;
        }
    }
    Ok(out)
}

/// Gibbs sampler over the censored coordinates of the conditional Gaussian;
/// returns the running mean of the draws.
fn gibbs_mean<R: Rng>(
    sampler: &ConditionalSampler,
    mean: &nalgebra::DVector<f64>,
    cens: &[usize],
    z: &[f64],
    kind: &[CellKind],
    sweeps: usize,
    rng: &mut R,
) -> Vec<f64> {
    let m = cens.len();
    let mut cov = DMatrix::from_fn(m, m, |a, b| sampler.cov[(cens[a], cens[b])]);
    for a in 0..m {
        cov[(a, a)] += 1e-8;
    }
    let prec = crate::linalg::pinv_sym(&cov);
    let mu: Vec<f64> = cens.iter().map(|&u| mean[u]).collect();
    let idx: Vec<usize> = cens.iter().map(|&u| sampler.unknown[u]).collect();
    let upper: Vec<bool> = idx.iter().map(|&i| kind[i] == CellKind::Upper).collect();
    // Start at the univariate truncated means.
    let mut x: Vec<f64> = (0..m)
        .map(|a| truncated_moments(mu[a], cov[(a, a)].sqrt(), z[idx[a]], upper[a]).0)
        .collect();
    let burn = sweeps / 10;
    let mut acc = vec![0.0; m];
    for sweep in 0..burn + sweeps {
        for a in 0..m {
            let q = prec[(a, a)];
            let mut dot = 0.0;
            for b in 0..m {
                if b != a {
                    dot += prec[(a, b)] * (x[b] - mu[b]);
                }
            }
            let cm = mu[a] - dot / q;
            let cs = (1.0 / q).sqrt();
            x[a] = truncated_draw(rng, cm, cs, z[idx[a]], upper[a]);
        }
        if sweep >= burn {
            for a in 0..m {
                acc[a] += x[a];
            }
        }
    }
    acc.iter().map(|v| v / sweeps.max(1) as f64).collect()
}

/// Per-hour normal-score transform `Φ⁻¹(rank/(n+1))`, ties broken by
/// original order.
pub fn gaussianize(complete: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = complete.len();
    let h = complete.first().map_or(0, |r| r.len());
    let mut out = vec![vec![0.0; h]; n];
    for j in 0..h {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| complete[a][j].total_cmp(&complete[b][j]));
        for (rank, &i) in order.iter().enumerate() {
            out[i][j] = norm_quantile((rank + 1) as f64 / (n + 1) as f64);
        }
    }
    out
}

/// Empirical copula marginal of one hour: the sorted deviates, matched to
/// the normal scores `Φ⁻¹(i/(n+1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaMarginal {
    pub sorted: Vec<f64>,
}

impl CopulaMarginal {
    pub fn new(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        CopulaMarginal { sorted }
    }

    fn score(&self, i: usize) -> f64 {
        norm_quantile((i + 1) as f64 / (self.sorted.len() + 1) as f64)
    }

    /// Maps a normal score back to the deviate scale by linear
    /// interpolation between knots, unit slope beyond them.
    pub fn inverse(&self, zt: f64) -> f64 {
        let n = self.sorted.len();
        if n == 0 {
            return zt;
        }
        let first = self.score(0);
        if zt <= first {
            return self.sorted[0] + (zt - first);
        }
        let last = self.score(n - 1);
        if zt >= last {
            return self.sorted[n - 1] + (zt - last);
        }
        let pos = norm_cdf(zt) * (n + 1) as f64 - 1.0;
        let mut i = (pos.floor().max(0.0) as usize).min(n - 2);
        // Guard against rounding in Φ at the knot boundaries.
        while i > 0 && self.score(i) > zt {
            i -= 1;
        }
        while i + 2 < n && self.score(i + 1) < zt {
            i += 1;
        }
        let (a, b) = (self.score(i), self.score(i + 1));
        let w = ((zt - a) / (b - a)).clamp(0.0, 1.0);
        (1.0 - w) * self.sorted[i] + w * self.sorted[i + 1]
    }
}

/// Everything simulation needs about one asset on one target date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetCalibration {
    pub asset_id: String,
    pub kind: AssetKind,
    pub target_date: NaiveDate,
    pub active_hours: Vec<usize>,
    pub hourly_max: Vec<f64>,
    pub boundaries: (f64, f64),
    pub model: MuSigmaModel,
    /// Lag correlation function of the deviates.
    pub rho: Vec<f64>,
    pub copula: Vec<CopulaMarginal>,
    /// Window days behind the deviate panel.
    pub days: Vec<NaiveDate>,
    /// Gaussianized deviates `z̃`, `days × active hours`.
    pub z_tilde: Vec<Vec<f64>>,
    /// Target-day forecast ratios on the active hours.
    pub target_beta: Vec<f64>,
    pub censored_fraction: (f64, f64),
}

impl AssetCalibration {
    pub fn n_hours(&self) -> usize {
        self.active_hours.len()
    }

    /// Ratio-space value for deviate `z` (after copula inversion) at
    /// active-hour position `j`, clamped into `[0, 1]`.
    pub fn ratio(&self, j: usize, z: f64) -> f64 {
        let b = self.target_beta[j];
        let (mu, sigma) = self.model.mu_sigma(j, b);
        (b + mu + sigma * z).clamp(0.0, 1.0)
    }

    /// MWh for a Gaussianized deviate at active-hour position `j`.
    pub fn mwh(&self, j: usize, z_tilde: f64) -> f64 {
        let z = self.copula[j].inverse(z_tilde);
        self.ratio(j, z) * self.hourly_max[j]
    }
}

/// Full calibration of one asset from its ratio panel.
pub fn calibrate(
    ratios: &RatioPanel,
    target_beta: Vec<f64>,
    opts: &CalibrationOptions,
    seed: u64,
) -> Result<AssetCalibration> {
    let model = fit_mu_sigma(ratios, opts, seed)?;
    let partial = compute_deviates(ratios, &model);
    let inter = interhour_correlation(&partial)?;
    let complete = impute_censored(&partial, &inter.matrix, opts, seed)?;
    let z_tilde = gaussianize(&complete);
    let h = ratios.n_hours();
    let copula = (0..h)
        .map(|j| CopulaMarginal::new(&complete.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect();
    let (mut lo, mut hi, mut tot) = (0usize, 0usize, 0usize);
    for kr in &partial.kind {
        for k in kr {
            match k {
                CellKind::Lower => lo += 1,
                CellKind::Upper => hi += 1,
                _ => {}
            }
            if *k != CellKind::Missing {
                tot += 1;
            }
        }
    }
    let tot = tot.max(1) as f64;
    Ok(AssetCalibration {
        asset_id: ratios.asset_id.clone(),
        kind: ratios.kind,
        target_date: ratios.target_date,
        active_hours: ratios.active_hours.clone(),
        hourly_max: ratios.hourly_max.clone(),
        boundaries: ratios.boundaries,
        model,
        rho: inter.rho,
        copula,
        days: ratios.days.clone(),
        z_tilde,
        target_beta,
        censored_fraction: (lo as f64 / tot, hi as f64 / tot),
    })
}
