//! Per-asset seasonal structure: the solar daily max-production envelope,
//! solar diurnal start/stop boundaries and the wind hourly mean surface.
//!
//! Envelope and boundaries are low-order Fourier series in the year
//! fraction, fitted under asymmetric piecewise-linear losses so that the
//! curves sit above (or, for sunrise, below) nearly all observations.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{year_fraction, AssetKind, AssetRecord, DailyPanel, HOURS};
use crate::optimize::{bfgs, golden_min, BfgsOptions};
use crate::rng;

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Envelope never exceeds nameplate by more than this fraction.
pub const CAPACITY_SLACK: f64 = 0.05;
/// Envelope floor as a fraction of nameplate.
pub const ENVELOPE_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierCurve {
    pub constant: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl FourierCurve {
    pub fn constant(c: f64, modes: usize) -> Self {
        FourierCurve {
            constant: c,
            cos: vec![0.0; modes],
            sin: vec![0.0; modes],
        }
    }

    pub fn modes(&self) -> usize {
        self.cos.len()
    }

    pub fn eval(&self, phi: f64) -> f64 {
        let mut v = self.constant;
        for k in 0..self.modes() {
            let w = TAU * (k + 1) as f64 * phi;
            v += self.cos[k] * w.cos() + self.sin[k] * w.sin();
        }
        v
    }

    pub fn eval_date(&self, date: NaiveDate) -> f64 {
        self.eval(year_fraction(date))
    }

    fn from_coefficients(c: &[f64]) -> Self {
        let k = (c.len() - 1) / 2;
        FourierCurve {
            constant: c[0],
            cos: (0..k).map(|i| c[1 + 2 * i]).collect(),
            sin: (0..k).map(|i| c[2 + 2 * i]).collect(),
        }
    }

    fn coefficients(&self) -> Vec<f64> {
        let mut c = vec![self.constant];
        for k in 0..self.modes() {
            c.push(self.cos[k]);
            c.push(self.sin[k]);
        }
        c
    }

    fn is_finite(&self) -> bool {
        self.coefficients().iter().all(|c| c.is_finite())
    }
}

/// Basis row `[1, cos 2πφ, sin 2πφ, …, cos 2πKφ, sin 2πKφ]`.
pub fn fourier_basis(phi: f64, modes: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 * modes + 1);
    row.push(1.0);
    for k in 1..=modes {
        let w = TAU * k as f64 * phi;
        row.push(w.cos());
        row.push(w.sin());
    }
    row
}

/// Asymmetric piecewise-linear loss
/// `Σ_d [over·(c_d − y_d)⁺ + under·(y_d − c_d)⁺] + max_weight · max_d (c_d − y_d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymmetricLoss {
    pub over: f64,
    pub under: f64,
    pub max_weight: f64,
}

impl AsymmetricLoss {
    pub fn value(&self, fitted: &[f64], y: &[f64]) -> f64 {
        let mut sum = 0.0;
        let mut worst = f64::NEG_INFINITY;
        for (c, t) in fitted.iter().zip(y) {
            let r = c - t;
            sum += if r > 0.0 { self.over * r } else { -self.under * r };
            worst = worst.max(r);
        }
        if self.max_weight != 0.0 {
            sum += self.max_weight * worst;
        }
        sum
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AsymmetricFitOptions {
    pub iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AsymmetricFitOptions {
    fn default() -> Self {
        AsymmetricFitOptions {
            iterations: 5000,
            restarts: 10,
            seed: 0,
        }
    }
}

struct Design {
    /// Column-major basis, one `Vec` per coefficient.
    columns: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl Design {
    fn new(phis: &[f64], y: &[f64], modes: usize) -> Self {
        let p = 2 * modes + 1;
        let mut columns = vec![Vec::with_capacity(phis.len()); p];
        for &phi in phis {
            for (j, v) in fourier_basis(phi, modes).into_iter().enumerate() {
                columns[j].push(v);
            }
        }
        Design {
            columns,
            y: y.to_vec(),
        }
    }

    fn fitted(&self, c: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (col, cj) in self.columns.iter().zip(c) {
            for (o, b) in out.iter_mut().zip(col) {
                *o += cj * b;
            }
        }
    }

    fn least_squares(&self) -> Result<Vec<f64>> {
        let n = self.y.len();
        let p = self.columns.len();
        let b = DMatrix::from_fn(n, p, |i, j| self.columns[j][i]);
        let y = DVector::from_column_slice(&self.y);
        let svd = b.svd(true, true);
        let sol = svd
            .solve(&y, 1e-12)
            .map_err(|e| Error::fit("least squares", e.to_string()))?;
        Ok(sol.as_slice().to_vec())
    }
}

fn weighted_quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() as f64 - 1.0) * q).round() as usize;
    v[idx.min(v.len() - 1)]
}

/// Fits a Fourier curve minimizing an asymmetric loss by normalized
/// subgradient descent with restarts, followed by exact coordinate
/// line-search polishing.
pub fn fit_asymmetric(
    phis: &[f64],
    y: &[f64],
    modes: usize,
    loss: AsymmetricLoss,
    opts: &AsymmetricFitOptions,
) -> Result<FourierCurve> {
    let p = 2 * modes + 1;
    if modes == 0 || phis.len() != y.len() {
        return Err(Error::InvalidParameter("fourier fit needs modes ≥ 1 and matching data".into()));
    }
    if y.len() < 4 * modes + 2 {
        return Err(Error::Infeasible(format!(
            "{} observations, need at least {} for {modes} modes",
            y.len(),
            4 * modes + 2
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite observations".into()));
    }
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::Degenerate("all-zero observations".into()));
    }
    let design = Design::new(phis, y, modes);
    let n = y.len();

    // Least squares shifted to the loss quantile is already close.
    let mut init = design.least_squares()?;
    let mut fitted = vec![0.0; n];
    design.fitted(&init, &mut fitted);
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    init[0] += weighted_quantile(resid, loss.under / (loss.over + loss.under));

    let mut rng = rng::substream(opts.seed, "asymmetric-fit");
    let mut best_c = init.clone();
    design.fitted(&best_c, &mut fitted);
    let mut best_f = loss.value(&fitted, y);
    let mut previous: Option<f64> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut c = init.clone();
        if restart > 0 {
            for v in c.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += 0.05 * scale * z;
            }
        }
        let (c, f) = descend(&design, &loss, c, scale, opts.iterations);
        let (c, f) = smooth_refine(&design, &loss, c, f, scale);
        let (c, f) = polish(&design, &loss, c, f, scale);
        if f < best_f {
            best_f = f;
            best_c = c;
        }
        // Convex objective: two restarts agreeing means we are done.
        if let Some(prev) = previous {
            if (prev - f).abs() <= 1e-9 * f.abs().max(1.0) {
                break;
            }
        }
        previous = Some(f);
    }
    let curve = FourierCurve::from_coefficients(&best_c);
    if !curve.is_finite() {
        return Err(Error::fit("fourier envelope", "non-finite coefficients"));
    }
    debug_assert_eq!(curve.coefficients().len(), p);
    Ok(curve)
}

fn descend(
    design: &Design,
    loss: &AsymmetricLoss,
    mut c: Vec<f64>,
    scale: f64,
    iterations: usize,
) -> (Vec<f64>, f64) {
    let n = design.y.len();
    let p = c.len();
    let mut fitted = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut grad = vec![0.0; p];
    design.fitted(&c, &mut fitted);
    let mut best_f = loss.value(&fitted, &design.y);
    let mut best_c = c.clone();
    let mut since_best = 0usize;
    let step0 = 0.02 * scale;
    for t in 0..iterations {
        let mut worst = (f64::NEG_INFINITY, 0usize);
        for i in 0..n {
            let r = fitted[i] - design.y[i];
            weights[i] = if r > 0.0 { loss.over } else if r < 0.0 { -loss.under } else { 0.0 };
            if r > worst.0 {
                worst = (r, i);
            }
        }
        if loss.max_weight != 0.0 {
            weights[worst.1] += loss.max_weight;
        }
        for (g, col) in grad.iter_mut().zip(&design.columns) {
            *g = col.iter().zip(&weights).map(|(b, w)| b * w).sum();
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let step = step0 / ((t + 1) as f64).sqrt();
        for (cj, g) in c.iter_mut().zip(&grad) {
            *cj -= step * g / norm;
        }
        design.fitted(&c, &mut fitted);
        let f = loss.value(&fitted, &design.y);
        if f < best_f - 1e-13 * best_f.abs() {
            best_f = f;
            best_c.copy_from_slice(&c);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 800 {
                break;
            }
        }
    }
    (best_c, best_f)
}

/// Continuation on a softplus / log-sum-exp smoothing of the loss, solved
/// by BFGS. Kinks are where subgradient steps stall; the smoothed problem
/// converges to within `O(μ)` of the exact optimum.
fn smooth_refine(
    design: &Design,
    loss: &AsymmetricLoss,
    mut c: Vec<f64>,
    mut f: f64,
    scale: f64,
) -> (Vec<f64>, f64) {
    let n = design.y.len();
    let mut fitted = vec![0.0; n];
    let mut wts = vec![0.0; n];
    let mut soft = vec![0.0; n];
    let opts = BfgsOptions {
        max_iter: 300,
        grad_tol: 1e-12,
        f_tol: 1e-15,
    };
    let mut mu = 1e-2 * scale;
    while mu > 1e-9 * scale {
        let m = bfgs(
            |x, g| {
                design.fitted(x, &mut fitted);
                let mut v = 0.0;
                let mut top = f64::NEG_INFINITY;
                for i in 0..n {
                    let r = fitted[i] - design.y[i];
                    top = top.max(r);
                    let t = r / mu;
                    // over·r⁺ + under·(−r)⁺ = −under·r + (over+under)·r⁺
                    let sp = if t > 30.0 { t } else { t.exp().ln_1p() };
                    let sig = crate::stats::logistic(t);
                    v += -loss.under * r + (loss.over + loss.under) * mu * sp;
                    wts[i] = -loss.under + (loss.over + loss.under) * sig;
                }
                if loss.max_weight != 0.0 {
                    let mut z = 0.0;
                    for i in 0..n {
                        soft[i] = ((fitted[i] - design.y[i] - top) / mu).exp();
                        z += soft[i];
                    }
                    v += loss.max_weight * (top + mu * z.ln());
                    for i in 0..n {
                        wts[i] += loss.max_weight * soft[i] / z;
                    }
                }
                for (gj, col) in g.iter_mut().zip(&design.columns) {
                    *gj = col.iter().zip(&wts).map(|(b, w)| b * w).sum();
                }
                v
            },
            &c,
            &opts,
        );
        design.fitted(&m.x, &mut fitted);
        let exact = loss.value(&fitted, &design.y);
        if exact < f {
            f = exact;
            c = m.x;
        }
        mu *= 0.1;
    }
    (c, f)
}

fn polish(
    design: &Design,
    loss: &AsymmetricLoss,
    mut c: Vec<f64>,
    mut f: f64,
    scale: f64,
) -> (Vec<f64>, f64) {
    let n = design.y.len();
    let mut base = vec![0.0; n];
    let mut trial = vec![0.0; n];
    for _sweep in 0..40 {
        let f_start = f;
        for j in 0..c.len() {
            design.fitted(&c, &mut base);
            let col = &design.columns[j];
            let mut obj = |t: f64| {
                for i in 0..n {
                    trial[i] = base[i] + t * col[i];
                }
                loss.value(&trial, &design.y)
            };
            let mut radius = 0.01 * scale;
            let (mut t, mut ft) = golden_min(&mut obj, -radius, radius, 1e-12 * scale);
            while (t.abs() > 0.9 * radius) && radius < 10.0 * scale {
                radius *= 4.0;
                (t, ft) = golden_min(&mut obj, -radius, radius, 1e-12 * scale);
            }
            if ft < f {
                c[j] += t;
                f = ft;
            }
        }
        if f_start - f <= 1e-13 * f.abs().max(1.0) {
            break;
        }
    }
    (c, f)
}

/// Observed boundary side for [`fit_boundary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySide {
    Start,
    Stop,
}

pub fn fit_max_envelope(
    daily_maxima: &[(NaiveDate, f64)],
    modes: usize,
    kappa_under: f64,
    kappa_max: f64,
    opts: &AsymmetricFitOptions,
) -> Result<FourierCurve> {
    if kappa_under <= 1.0 || kappa_max < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "envelope penalties need κ_M1 > 1 and κ_M2 ≥ 0 (got {kappa_under}, {kappa_max})"
        )));
    }
    let phis: Vec<f64> = daily_maxima.iter().map(|(d, _)| year_fraction(*d)).collect();
    let y: Vec<f64> = daily_maxima.iter().map(|(_, v)| *v).collect();
    let loss = AsymmetricLoss {
        over: 1.0,
        under: kappa_under,
        max_weight: kappa_max,
    };
    fit_asymmetric(&phis, &y, modes, loss, opts)
}

/// Fits a diurnal boundary curve. Stop boundaries are pushed at-or-after the
/// observed last production; start boundaries mirror that, at-or-before the
/// observed first production.
pub fn fit_boundary(
    observed: &[(NaiveDate, f64)],
    modes: usize,
    kappa: f64,
    side: BoundarySide,
    opts: &AsymmetricFitOptions,
) -> Result<FourierCurve> {
    if observed.iter().any(|(_, v)| !(*v > 0.0 && *v < 1.0) && *v != 1.0 && *v != 0.0) {
        return Err(Error::InvalidParameter("boundaries must be day fractions".into()));
    }
    let phis: Vec<f64> = observed.iter().map(|(d, _)| year_fraction(*d)).collect();
    let y: Vec<f64> = observed.iter().map(|(_, v)| *v).collect();
    let loss = match side {
        BoundarySide::Stop => AsymmetricLoss {
            over: 1.0,
            under: kappa,
            max_weight: 0.0,
        },
        BoundarySide::Start => AsymmetricLoss {
            over: kappa,
            under: 1.0,
            max_weight: 0.0,
        },
    };
    fit_asymmetric(&phis, &y, modes, loss, opts)
}

/// Per-hour Fourier fits of the mean wind generation by season.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindSurface {
    pub hours: Vec<FourierCurve>,
    /// Positivity floor per hour (1% of the hour's empirical mean).
    pub floors: Vec<f64>,
}

impl WindSurface {
    pub fn eval(&self, date: NaiveDate, hour: usize) -> f64 {
        self.hours[hour].eval_date(date).max(self.floors[hour])
    }
}

pub fn fit_wind_surface(panel: &DailyPanel, modes: usize) -> Result<WindSurface> {
    let mut hours = Vec::with_capacity(HOURS);
    let mut floors = Vec::with_capacity(HOURS);
    for h in 0..HOURS {
        let (phis, y): (Vec<f64>, Vec<f64>) = panel
            .days
            .iter()
            .zip(&panel.actual)
            .filter(|(_, g)| g[h].is_finite())
            .map(|(d, g)| (year_fraction(*d), g[h]))
            .unzip();
        if y.is_empty() {
            return Err(Error::Infeasible(format!(
                "{}: hour {} has no data for the wind surface",
                panel.asset_id,
                h + 1
            )));
        }
        let m = y.iter().sum::<f64>() / y.len() as f64;
        if y.len() < 2 * modes + 1 {
            hours.push(FourierCurve::constant(m, modes));
        } else {
            let c = Design::new(&phis, &y, modes).least_squares()?;
            hours.push(FourierCurve::from_coefficients(&c));
        }
        floors.push(if m > 0.0 { 0.01 * m } else { 1e-9 });
    }
    Ok(WindSurface { hours, floors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub envelope_modes: usize,
    pub boundary_modes: usize,
    pub wind_modes: usize,
    pub kappa_m1: f64,
    pub kappa_m2: f64,
    pub kappa_d: f64,
    pub fit: AsymmetricFitOptions,
}

impl Default for MetaParams {
    fn default() -> Self {
        MetaParams {
            envelope_modes: 6,
            boundary_modes: 3,
            wind_modes: 3,
            kappa_m1: 20.0,
            kappa_m2: 0.5,
            kappa_d: 20.0,
            fit: AsymmetricFitOptions::default(),
        }
    }
}

/// Global seasonal structure of one asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub asset_id: String,
    pub kind: AssetKind,
    pub nominal_capacity: f64,
    pub max_envelope: Option<FourierCurve>,
    pub start_boundary: Option<FourierCurve>,
    pub stop_boundary: Option<FourierCurve>,
    pub wind_surface: Option<WindSurface>,
    /// Largest actual observed in the history (wind point-mass level).
    pub observed_max: f64,
}

impl MetaModel {
    /// Daily max-production envelope clipped to `[1%, 105%]` of nameplate.
    pub fn max_envelope_at(&self, date: NaiveDate) -> f64 {
        let cap = self.nominal_capacity;
        match &self.max_envelope {
            Some(c) => c
                .eval_date(date)
                .clamp(ENVELOPE_FLOOR * cap, (1.0 + CAPACITY_SLACK) * cap),
            None => cap,
        }
    }

    /// Estimated diurnal window `[ŝ, t̂]` as day fractions; wind is `[0, 1]`.
    pub fn boundaries_at(&self, date: NaiveDate) -> (f64, f64) {
        match (&self.start_boundary, &self.stop_boundary) {
            (Some(s), Some(t)) => (s.eval_date(date).max(0.0), t.eval_date(date).min(1.0)),
            _ => (0.0, 1.0),
        }
    }

    pub fn wind_mean_at(&self, date: NaiveDate, hour: usize) -> f64 {
        self.wind_surface.as_ref().map_or(1.0, |s| s.eval(date, hour))
    }
}

/// Maximum hourly actual per day, skipping days with no data.
pub fn observed_daily_maxima(panel: &DailyPanel) -> Vec<(NaiveDate, f64)> {
    panel
        .days
        .iter()
        .zip(&panel.actual)
        .filter_map(|(d, g)| {
            let m = g.iter().copied().filter(|v| v.is_finite()).fold(f64::NAN, f64::max);
            m.is_finite().then_some((*d, m))
        })
        .collect()
}

/// Observed diurnal boundaries from hourly data: the start of the first
/// producing hour and the end of the last, as day fractions.
pub fn observed_boundaries(panel: &DailyPanel) -> (Vec<(NaiveDate, f64)>, Vec<(NaiveDate, f64)>) {
    let mut starts = Vec::new();
    let mut stops = Vec::new();
    for (d, g) in panel.days.iter().zip(&panel.actual) {
        let first = (0..HOURS).find(|&h| g[h].is_finite() && g[h] > 0.0);
        let last = (0..HOURS).rev().find(|&h| g[h].is_finite() && g[h] > 0.0);
        if let (Some(a), Some(b)) = (first, last) {
            starts.push((*d, a as f64 / HOURS as f64));
            stops.push((*d, (b + 1) as f64 / HOURS as f64));
        }
    }
    (starts, stops)
}

pub fn fit_meta(asset: &AssetRecord, panel: &DailyPanel, params: &MetaParams) -> Result<MetaModel> {
    let observed_max = panel
        .actual
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let mut model = MetaModel {
        asset_id: asset.asset_id.clone(),
        kind: asset.kind,
        nominal_capacity: asset.nominal_capacity,
        max_envelope: None,
        start_boundary: None,
        stop_boundary: None,
        wind_surface: None,
        observed_max,
    };
    let tag = |e: Error| match e {
        Error::Fit { what, msg } => Error::fit(format!("{} {what}", asset.asset_id), msg),
        Error::Infeasible(m) => Error::Infeasible(format!("{}: {m}", asset.asset_id)),
        Error::Degenerate(m) => Error::Degenerate(format!("{}: {m}", asset.asset_id)),
        other => other,
    };
    match asset.kind {
        AssetKind::Solar => {
            let maxima = observed_daily_maxima(panel);
            let env = fit_max_envelope(
                &maxima,
                params.envelope_modes,
                params.kappa_m1,
                params.kappa_m2,
                &params.fit,
            )
            .map_err(tag)?;
            let (starts, stops) = observed_boundaries(panel);
            let s = fit_boundary(
                &starts,
                params.boundary_modes,
                params.kappa_d,
                BoundarySide::Start,
                &params.fit,
            )
            .map_err(tag)?;
            let t = fit_boundary(
                &stops,
                params.boundary_modes,
                params.kappa_d,
                BoundarySide::Stop,
                &params.fit,
            )
            .map_err(tag)?;
            model.max_envelope = Some(env);
            model.start_boundary = Some(s);
            model.stop_boundary = Some(t);
            check_boundary_order(&model)?;
        }
        AssetKind::Wind => {
            model.wind_surface = Some(fit_wind_surface(panel, params.wind_modes).map_err(tag)?);
        }
    }
    Ok(model)
}

/// Clamped boundaries must satisfy `ŝ < t̂` on every day of a leap year.
pub fn check_boundary_order(model: &MetaModel) -> Result<()> {
    let (Some(s), Some(t)) = (&model.start_boundary, &model.stop_boundary) else {
        return Ok(());
    };
    for i in 0..366 {
        let phi = i as f64 / 366.0;
        let (a, b) = (s.eval(phi).max(0.0), t.eval(phi).min(1.0));
        if a >= b {
            return Err(Error::fit(
                format!("{} diurnal boundaries", model.asset_id),
                format!("start {a:.4} ≥ stop {b:.4} at year fraction {phi:.4}"),
            ));
        }
    }
    Ok(())
}
