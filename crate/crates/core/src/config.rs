//! Flat key-value run configuration.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationOptions;
use crate::clustering::{AnnealParams, ClusterParams};
use crate::error::{Error, Result};
use crate::meta::{AsymmetricFitOptions, MetaParams};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusteringMode {
    PerDate,
    Frozen,
}

/// Every tunable of a run. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub assets_file: String,
    pub series_files: Vec<String>,
    pub out_dir: String,

    pub theta: f64,
    /// Leave the target day out of its own calibration window.
    pub exclude_target: bool,

    pub envelope_modes: usize,
    pub boundary_modes: usize,
    pub wind_modes: usize,
    pub kappa_m1: f64,
    pub kappa_m2: f64,
    pub kappa_d: f64,
    pub fit_iterations: usize,
    pub fit_restarts: usize,

    pub calib_restarts: usize,
    pub sigma_floor: f64,
    pub min_interior: usize,
    pub imputation_sweeps: usize,

    pub sa_temp0: f64,
    pub sa_eta: f64,
    /// Proposals per anneal run; 0 means `50·J²`.
    pub sa_steps: usize,
    pub sa_restarts: usize,
    pub target_reduction: f64,
    pub top_cardinality: usize,
    pub max_cluster_size: usize,
    pub squash_power: f64,
    pub clustering_mode: ClusteringMode,

    pub k_keep: usize,
    pub propagate: usize,

    pub n_scenarios: usize,
    pub binary_output: bool,
    pub seed: u64,

    pub q_lo: f64,
    pub q_hi: f64,
    pub pit_bins: usize,

    pub synth_assets: usize,
    pub synth_solar: usize,
    pub synth_days: usize,
    pub synth_start: NaiveDate,
    pub synth_blocks: usize,
    pub synth_zones: usize,
    pub synth_intra_rho: f64,
    pub synth_inter_rho: f64,
    pub synth_hour_phi: f64,
    pub synth_p_zero: f64,
    pub synth_p_max: f64,
    pub synth_capacity: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let meta = MetaParams::default();
        let cal = CalibrationOptions::default();
        let cl = ClusterParams::default();
        let sy = SynthConfig::default();
        RunConfig {
            assets_file: "assets.csv".into(),
            series_files: vec!["series.csv".into()],
            out_dir: "out".into(),
            theta: 0.15,
            exclude_target: true,
            envelope_modes: meta.envelope_modes,
            boundary_modes: meta.boundary_modes,
            wind_modes: meta.wind_modes,
            kappa_m1: meta.kappa_m1,
            kappa_m2: meta.kappa_m2,
            kappa_d: meta.kappa_d,
            fit_iterations: meta.fit.iterations,
            fit_restarts: meta.fit.restarts,
            calib_restarts: cal.restarts,
            sigma_floor: cal.sigma_floor,
            min_interior: cal.min_interior,
            imputation_sweeps: cal.imputation_sweeps,
            sa_temp0: cl.anneal.temp0,
            sa_eta: cl.anneal.eta,
            sa_steps: 0,
            sa_restarts: cl.anneal.restarts,
            target_reduction: cl.target_reduction,
            top_cardinality: cl.top_cardinality,
            max_cluster_size: cl.anneal.max_cluster_size,
            squash_power: cl.squash_power,
            clustering_mode: ClusteringMode::PerDate,
            k_keep: 2,
            propagate: 2,
            n_scenarios: 1000,
            binary_output: false,
            seed: 1,
            q_lo: 0.1,
            q_hi: 0.9,
            pit_bins: 10,
            synth_assets: sy.n_assets,
            synth_solar: sy.n_solar,
            synth_days: sy.n_days,
            synth_start: sy.start_date,
            synth_blocks: sy.n_blocks,
            synth_zones: sy.n_zones,
            synth_intra_rho: sy.intra_rho,
            synth_inter_rho: sy.inter_rho,
            synth_hour_phi: sy.hour_phi,
            synth_p_zero: sy.p_zero,
            synth_p_max: sy.p_max,
            synth_capacity: sy.capacity,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.theta > 0.0 && self.theta <= 0.5) {
            return bad(format!("theta {} outside (0, 0.5]", self.theta));
        }
        if self.envelope_modes == 0 || self.boundary_modes == 0 || self.wind_modes == 0 {
            return bad("Fourier mode counts must be positive".into());
        }
        if self.kappa_m1 <= 1.0 || self.kappa_m2 < 0.0 || self.kappa_d <= 0.0 {
            return bad("need kappa_m1 > 1, kappa_m2 >= 0, kappa_d > 0".into());
        }
        if self.fit_iterations == 0 || self.fit_restarts == 0 || self.calib_restarts == 0 {
            return bad("iteration and restart counts must be positive".into());
        }
        if self.sigma_floor <= 0.0 || self.imputation_sweeps == 0 {
            return bad("sigma_floor and imputation_sweeps must be positive".into());
        }
        if self.sa_temp0 <= 0.0 || !(self.sa_eta > 0.0 && self.sa_eta < 1.0) || self.sa_restarts == 0 {
            return bad("need sa_temp0 > 0, 0 < sa_eta < 1, sa_restarts >= 1".into());
        }
        if !(self.target_reduction > 0.0 && self.target_reduction < 1.0) {
            return bad("target_reduction outside (0, 1)".into());
        }
        if self.top_cardinality == 0 || self.max_cluster_size < 2 || self.squash_power <= 0.0 {
            return bad("need top_cardinality >= 1, max_cluster_size >= 2, squash_power > 0".into());
        }
        if self.k_keep == 0 || self.propagate == 0 || self.n_scenarios < 2 {
            return bad("need k_keep >= 1, propagate >= 1, n_scenarios >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.q_lo) || !(self.q_lo..=1.0).contains(&self.q_hi) || self.pit_bins == 0 {
            return bad("need 0 <= q_lo <= q_hi <= 1 and pit_bins >= 1".into());
        }
        if self.series_files.is_empty() {
            return bad("series_files is empty".into());
        }
        Ok(())
    }

    pub fn meta_params(&self) -> MetaParams {
        MetaParams {
            envelope_modes: self.envelope_modes,
            boundary_modes: self.boundary_modes,
            wind_modes: self.wind_modes,
            kappa_m1: self.kappa_m1,
            kappa_m2: self.kappa_m2,
            kappa_d: self.kappa_d,
            fit: AsymmetricFitOptions {
                iterations: self.fit_iterations,
                restarts: self.fit_restarts,
                seed: crate::rng::substream_seed(self.seed, "meta"),
            },
        }
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions {
            restarts: self.calib_restarts,
            sigma_floor: self.sigma_floor,
            min_interior: self.min_interior,
            imputation_sweeps: self.imputation_sweeps,
        }
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            anneal: AnnealParams {
                temp0: self.sa_temp0,
                eta: self.sa_eta,
                steps: (self.sa_steps > 0).then_some(self.sa_steps),
                max_cluster_size: self.max_cluster_size,
                restarts: self.sa_restarts,
            },
            target_reduction: self.target_reduction,
            top_cardinality: self.top_cardinality,
            squash_power: self.squash_power,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_assets: self.synth_assets,
            n_solar: self.synth_solar,
            n_days: self.synth_days,
            start_date: self.synth_start,
            n_blocks: self.synth_blocks,
            n_zones: self.synth_zones,
            intra_rho: self.synth_intra_rho,
            inter_rho: self.synth_inter_rho,
            hour_phi: self.synth_hour_phi,
            p_zero: self.synth_p_zero,
            p_max: self.synth_p_max,
            mu: None,
            sigma: None,
            capacity: self.synth_capacity,
            keep_deviates: false,
        }
    }
}
