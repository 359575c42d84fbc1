//! Joint scenario simulation: top-level amplitudes, conditional propagation
//! down each hierarchy, hourly deviates and inversion to MWh.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::AssetCalibration;
use crate::correlation::CorrelationBundle;
use crate::error::{Error, Result};
use crate::factors::AssetFactors;
use crate::ingest::{AssetRecord, HOURS};
use crate::linalg::{psd_sqrt, ConditionalSampler};
use crate::rng::indexed;

pub use crate::linalg::conditional_gaussian;

pub const SCENARIO_HEADER: [&str; 4] = ["scenario", "asset_id", "hour", "mwh"];

struct NodeStep {
    known: Vec<usize>,
    unknown: Vec<usize>,
    samplers: Vec<ConditionalSampler>,
}

/// Precomputed sampling plan for one correlation bundle.
pub struct Simulator<'a> {
    bundle: &'a CorrelationBundle,
    factors: Vec<&'a AssetFactors>,
    top_root: DMatrix<f64>,
    steps: Vec<NodeStep>,
}

/// Per-asset simulated amplitudes and hourly Gaussianized deviates.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviatePanels {
    pub asset_ids: Vec<String>,
    pub n_scenarios: usize,
    /// `[asset]`, `N × H_a` row-major.
    pub amplitudes: Vec<Vec<f64>>,
    /// `[asset]`, `N × H_a` row-major.
    pub z_tilde: Vec<Vec<f64>>,
    pub hours: Vec<usize>,
}

impl DeviatePanels {
    pub fn amplitude(&self, asset: usize, scenario: usize, k: usize) -> f64 {
        self.amplitudes[asset][scenario * self.hours[asset] + k]
    }

    pub fn deviate(&self, asset: usize, scenario: usize, j: usize) -> f64 {
        self.z_tilde[asset][scenario * self.hours[asset] + j]
    }

    pub fn amplitude_series(&self, asset: usize, k: usize) -> Vec<f64> {
        (0..self.n_scenarios).map(|s| self.amplitude(asset, s, k)).collect()
    }
}

impl<'a> Simulator<'a> {
    /// `factors` may be in any order; every bundle asset must be present.
    pub fn new(bundle: &'a CorrelationBundle, factors: &'a [AssetFactors]) -> Result<Self> {
        let by_id: BTreeMap<&str, &AssetFactors> = factors.iter().map(|f| (f.asset_id.as_str(), f)).collect();
        let factors = bundle
            .asset_ids
            .iter()
            .map(|a| {
                by_id
                    .get(a.as_str())
                    .copied()
                    .ok_or_else(|| Error::Infeasible(format!("no factor model for {a}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let kk = bundle.k_keep;
        if let Some(f) = factors.iter().find(|f| f.n_hours() < kk) {
            return Err(Error::Infeasible(format!("{} has fewer than {kk} factors", f.asset_id)));
        }
        let mut covered = vec![false; factors.len()];
        for &(a, _) in &bundle.top.entries {
            covered[a] = true;
        }
        let mut steps = Vec::new();
        for kind in &bundle.kinds {
            for level in kind.nodes.iter().skip(1).rev() {
                for node in level {
                    let assets = &node.corr.assets;
                    if node.corr.matrices.len() != kk {
                        return Err(Error::Infeasible(format!(
                            "missing correlation block for the cluster of {}",
                            bundle.asset_ids[node.delegate]
                        )));
                    }
                    let mut known_pos: Vec<usize> = node
                        .subset
                        .iter()
                        .map(|s| assets.iter().position(|a| a == s))
                        .collect::<Option<_>>()
                        .ok_or_else(|| Error::Infeasible("propagation subset outside its cluster".into()))?;
                    known_pos.sort_unstable();
                    let samplers = node
                        .corr
                        .matrices
                        .iter()
                        .map(|m| ConditionalSampler::new(m, &known_pos))
                        .collect::<Result<Vec<_>>>()?;
                    let unknown: Vec<usize> = samplers[0].unknown.iter().map(|&i| assets[i]).collect();
                    for &u in &unknown {
                        covered[u] = true;
                    }
                    steps.push(NodeStep {
                        known: known_pos.iter().map(|&i| assets[i]).collect(),
                        unknown,
                        samplers,
                    });
                }
            }
        }
        if let Some(a) = covered.iter().position(|c| !c) {
            return Err(Error::Infeasible(format!(
                "missing correlation block for {}",
                bundle.asset_ids[a]
            )));
        }
        Ok(Simulator {
            bundle,
            top_root: psd_sqrt(&bundle.top.correlation()),
            factors,
            steps,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.factors.len()
    }

    /// Standardized propagated amplitudes `[asset][k]` for one scenario.
    fn draw_propagated(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let kk = self.bundle.k_keep;
        let mut out = vec![vec![f64::NAN; kk]; self.n_assets()];
        let noise: Vec<f64> = (0..self.top_root.ncols()).map(|_| rng.sample(StandardNormal)).collect();
        let top = &self.top_root * DVector::from_vec(noise);
        for (i, &(a, k)) in self.bundle.top.entries.iter().enumerate() {
            out[a][k] = top[i];
        }
        for step in &self.steps {
            for (k, sampler) in step.samplers.iter().enumerate() {
                let values: Vec<f64> = step.known.iter().map(|&a| out[a][k]).collect();
                let noise: Vec<f64> = (0..step.unknown.len()).map(|_| rng.sample(StandardNormal)).collect();
                let d = sampler.draw(&values, &noise);
                for (i, &a) in step.unknown.iter().enumerate() {
                    out[a][k] = d[i];
                }
            }
        }
        out
    }

    /// Amplitudes and hourly deviates of one scenario, per asset.
    pub fn scenario(&self, seed: u64, index: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = indexed(seed, "simulate", index);
        let kk = self.bundle.k_keep;
        let propagated = self.draw_propagated(&mut rng);
        self.factors
            .iter()
            .zip(propagated)
            .map(|(f, std)| {
                let gamma: Vec<f64> = (0..f.n_hours())
                    .map(|k| {
                        let s = f.eigenvalues[k].sqrt();
                        if k < kk {
                            s * std[k]
                        } else {
                            s * rng.sample::<f64, _>(StandardNormal)
                        }
                    })
                    .collect();
                let z = f.reconstruct(&gamma);
                (gamma, z)
            })
            .collect()
    }
}

/// `N` joint draws of every asset's hourly deviates.
pub fn simulate_deviates(sim: &Simulator<'_>, n: usize, seed: u64) -> DeviatePanels {
    let draws: Vec<Vec<(Vec<f64>, Vec<f64>)>> =
        (0..n as u64).into_par_iter().map(|i| sim.scenario(seed, i)).collect();
    let hours: Vec<usize> = sim.factors.iter().map(|f| f.n_hours()).collect();
    let mut amplitudes: Vec<Vec<f64>> = hours.iter().map(|h| Vec::with_capacity(n * h)).collect();
    let mut z_tilde = amplitudes.clone();
    for scenario in draws {
        for (a, (g, z)) in scenario.into_iter().enumerate() {
            amplitudes[a].extend(g);
            z_tilde[a].extend(z);
        }
    }
    DeviatePanels {
        asset_ids: sim.bundle.asset_ids.clone(),
        n_scenarios: n,
        amplitudes,
        z_tilde,
        hours,
    }
}

/// `N × J × 24` MWh scenarios for one target date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub target_date: NaiveDate,
    pub asset_ids: Vec<String>,
    pub n_scenarios: usize,
    /// Row-major scenario, asset, hour.
    pub values: Vec<f64>,
    pub seed: u64,
    pub provenance: BTreeMap<String, String>,
}

impl ScenarioSet {
    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn get(&self, scenario: usize, asset: usize, hour: usize) -> f64 {
        self.values[(scenario * self.n_assets() + asset) * HOURS + hour]
    }

    /// All scenarios of one asset-hour.
    pub fn sample(&self, asset: usize, hour: usize) -> Vec<f64> {
        (0..self.n_scenarios).map(|s| self.get(s, asset, hour)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SCENARIO_HEADER)?;
        for s in 0..self.n_scenarios {
            for (a, id) in self.asset_ids.iter().enumerate() {
                for h in 0..HOURS {
                    w.write_record([
                        s.to_string(),
                        id.clone(),
                        (h + 1).to_string(),
                        self.get(s, a, h).to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("scenario csv", e))?;
        Ok(())
    }

    /// Reads the CSV layout back; assets keep their first-seen order.
    pub fn read_csv<R: std::io::Read>(reader: R, target_date: NaiveDate, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != SCENARIO_HEADER {
            return Err(Error::Schema {
                file: "scenarios".into(),
                msg: format!("header {header:?}"),
            });
        }
        let mut ids: Vec<String> = Vec::new();
        let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |msg: String| Error::BadRow {
                file: "scenarios".into(),
                row: row + 2,
                msg,
            };
            let s: usize = rec[0].parse().map_err(|_| bad(format!("scenario {:?}", &rec[0])))?;
            let a = match ids.iter().position(|x| x == &rec[1]) {
                Some(a) => a,
                None => {
                    ids.push(rec[1].to_string());
                    ids.len() - 1
                }
            };
            let h: usize = rec[2]
                .parse()
                .ok()
                .filter(|h| (1..=HOURS).contains(h))
                .ok_or_else(|| bad(format!("hour {:?}", &rec[2])))?;
            let v: f64 = rec[3].parse().map_err(|_| bad(format!("mwh {:?}", &rec[3])))?;
            cells.push((s, a, h - 1, v));
        }
        let n = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let j = ids.len();
        if cells.len() != n * j * HOURS {
            return Err(Error::Dimension {
                expected: n * j * HOURS,
                actual: cells.len(),
            });
        }
        let mut values = vec![f64::NAN; n * j * HOURS];
        for (s, a, h, v) in cells {
            values[(s * j + a) * HOURS + h] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Schema {
                file: "scenarios".into(),
                msg: "duplicate or missing cells".into(),
            });
        }
        Ok(ScenarioSet {
            target_date,
            asset_ids: ids,
            n_scenarios: n,
            values,
            seed,
            provenance: BTreeMap::new(),
        })
    }

    /// Little-endian `f32` values plus a JSON sidecar `<path>.json`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = BinaryLayout {
            dtype: "f32le".into(),
            order: vec!["scenario".into(), "asset".into(), "hour".into()],
            shape: vec![self.n_scenarios, self.n_assets(), HOURS],
            asset_ids: self.asset_ids.clone(),
            target_date: self.target_date,
            seed: self.seed,
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(&side, text).map_err(|e| Error::io(side, e))
    }

    pub fn read_binary(path: &Path) -> Result<(BinaryLayout, Vec<f32>)> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let layout: BinaryLayout = serde_json::from_str(&text)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let want: usize = layout.shape.iter().product();
        if bytes.len() != want * 4 {
            return Err(Error::Dimension {
                expected: want * 4,
                actual: bytes.len(),
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((layout, values))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryLayout {
    pub dtype: String,
    pub order: Vec<String>,
    pub shape: Vec<usize>,
    pub asset_ids: Vec<String>,
    pub target_date: NaiveDate,
    pub seed: u64,
}

/// Maps deviates through each asset's copula and censored model, then
/// scales by the hourly maximum. Inactive hours are exactly 0.
pub fn invert_to_mwh(deviates: &DeviatePanels, calibrations: &[AssetCalibration], seed: u64) -> Result<ScenarioSet> {
    let by_id: BTreeMap<&str, &AssetCalibration> =
        calibrations.iter().map(|c| (c.asset_id.as_str(), c)).collect();
    let cals = deviates
        .asset_ids
        .iter()
        .map(|a| by_id.get(a.as_str()).copied().ok_or_else(|| Error::UnknownAsset(a.clone())))
        .collect::<Result<Vec<_>>>()?;
    let target_date = cals.first().map(|c| c.target_date).ok_or_else(|| Error::Degenerate("no assets".into()))?;
    for (a, c) in cals.iter().enumerate() {
        if c.n_hours() != deviates.hours[a] {
            return Err(Error::Dimension {
                expected: c.n_hours(),
                actual: deviates.hours[a],
            });
        }
    }
    let j = cals.len();
    let n = deviates.n_scenarios;
    let mut values = vec![0.0; n * j * HOURS];
    values.par_chunks_mut(j * HOURS).enumerate().for_each(|(s, row)| {
        for (a, c) in cals.iter().enumerate() {
            for (pos, &h) in c.active_hours.iter().enumerate() {
                row[a * HOURS + h] = c.mwh(pos, deviates.deviate(a, s, pos));
            }
        }
    });
    Ok(ScenarioSet {
        target_date,
        asset_ids: deviates.asset_ids.clone(),
        n_scenarios: n,
        values,
        seed,
        provenance: BTreeMap::new(),
    })
}

/// Deviates then MWh in one call.
pub fn simulate_scenarios(
    bundle: &CorrelationBundle,
    factors: &[AssetFactors],
    calibrations: &[AssetCalibration],
    n: usize,
    seed: u64,
) -> Result<ScenarioSet> {
    let sim = Simulator::new(bundle, factors)?;
    let dev = simulate_deviates(&sim, n, seed);
    invert_to_mwh(&dev, calibrations, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Asset,
    Zone,
    System,
    Kind,
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asset" => Ok(Grouping::Asset),
            "zone" => Ok(Grouping::Zone),
            "system" => Ok(Grouping::System),
            "kind" => Ok(Grouping::Kind),
            _ => Err(Error::InvalidParameter(format!("unknown grouping {s}"))),
        }
    }
}

/// Per-scenario group totals, `N × units × 24`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub units: Vec<String>,
    pub n_scenarios: usize,
    pub values: Vec<f64>,
}

impl Aggregated {
    pub fn get(&self, scenario: usize, unit: usize, hour: usize) -> f64 {
        self.values[(scenario * self.units.len() + unit) * HOURS + hour]
    }

    pub fn unit_index(&self, name: &str) -> Result<usize> {
        self.units
            .iter()
            .position(|u| u == name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown unit {name}")))
    }

    pub fn sample(&self, unit: usize, hour: usize) -> Vec<f64> {
        (0..self.n_scenarios).map(|s| self.get(s, unit, hour)).collect()
    }

    /// Daily totals, `N × units`.
    pub fn daily(&self) -> Vec<Vec<f64>> {
        (0..self.n_scenarios)
            .map(|s| {
                (0..self.units.len())
                    .map(|u| (0..HOURS).map(|h| self.get(s, u, h)).sum())
                    .collect()
            })
            .collect()
    }
}

/// Unit label of an asset under a grouping.
pub fn unit_of(record: &AssetRecord, grouping: Grouping) -> String {
    match grouping {
        Grouping::Asset => record.asset_id.clone(),
        Grouping::Zone => record.zone.clone(),
        Grouping::System => "system".into(),
        Grouping::Kind => record.kind.to_string(),
    }
}

pub fn aggregate(set: &ScenarioSet, grouping: Grouping, records: &[AssetRecord]) -> Result<Aggregated> {
    let by_id: BTreeMap<&str, &AssetRecord> = records.iter().map(|r| (r.asset_id.as_str(), r)).collect();
    let labels = set
        .asset_ids
        .iter()
        .map(|a| {
            by_id
                .get(a.as_str())
                .map(|r| unit_of(r, grouping))
                .ok_or_else(|| Error::UnknownAsset(a.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut units: Vec<String> = labels.clone();
    if grouping != Grouping::Asset {
        units.sort();
        units.dedup();
    }
    let slot: Vec<usize> = labels.iter().map(|l| units.iter().position(|u| u == l).unwrap()).collect();
    let u = units.len();
    let mut values = vec![0.0; set.n_scenarios * u * HOURS];
    for s in 0..set.n_scenarios {
        for (a, &k) in slot.iter().enumerate() {
            for h in 0..HOURS {
                values[(s * u + k) * HOURS + h] += set.get(s, a, h);
            }
        }
    }
    Ok(Aggregated {
        units,
        n_scenarios: set.n_scenarios,
        values,
    })
}
