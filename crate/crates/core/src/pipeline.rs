//! Stage orchestration over files.
//!
//! Every stage writes JSON artifacts that carry the digests of their inputs
//! and a checksum of their own payload. Downstream stages verify both: a
//! checksum mismatch is always an error, a changed upstream input is
//! refused unless forced.
//!
//! Layout under `out_dir`:
//! `meta/<asset>.json`, `calib/<date>/<asset>.json`, `clusters/<date>.json`
//! (hierarchies), `clusters/<date>.corr.json` (correlation bundle),
//! `scenarios/scenarios_<date>.csv` with a `.json` manifest, and
//! `reports/report_<from>_<to>_<grouping>.csv`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assess::{assess, AssessOptions, EvaluationDay};
use crate::calibration::{calibrate, AssetCalibration};
use crate::clustering::{build_hierarchy, Hierarchy};
use crate::config::{ClusteringMode, RunConfig};
use crate::correlation::{build_bundle, AmplitudeSet, CorrelationBundle};
use crate::error::{Error, Result};
use crate::factors::{fit_factors, AssetFactors};
use crate::ingest::{build_window, load_panels, AssetKind, AssetRecord, DailyPanel, LoadSummary, HOURS};
use crate::meta::{fit_meta, MetaModel};
use crate::rescale::{make_ratios, target_beta};
use crate::rng::substream_seed;
use crate::simulate::{simulate_scenarios, Grouping, ScenarioSet};
use crate::synth::synthesize_truth;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(sha256_hex(&bytes))
}

fn json_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// A stage output with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub stage: String,
    /// Input name → sha256 at the time the artifact was produced.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of the compact JSON of `payload`.
    pub checksum: String,
    pub payload: T,
}

pub fn write_artifact<T: Serialize>(
    path: &Path,
    stage: &str,
    inputs: BTreeMap<String, String>,
    payload: &T,
) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a, T> {
        stage: &'a str,
        inputs: BTreeMap<String, String>,
        checksum: String,
        payload: &'a T,
    }
    let out = Out {
        stage,
        checksum: json_digest(payload)?,
        inputs,
        payload,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(&out)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and checksum-verifies an artifact.
pub fn read_artifact<T: Serialize + DeserializeOwned>(path: &Path) -> Result<Artifact<T>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingArtifact(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    let art: Artifact<T> = serde_json::from_slice(&bytes).map_err(|_| Error::Checksum(path.to_path_buf()))?;
    if json_digest(&art.payload)? != art.checksum {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    Ok(art)
}

/// Per-asset failures of a stage that keeps going.
#[derive(Debug, Default)]
pub struct StageOutcome {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(String, Error)>,
}

/// Calibration output stored per asset and date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedAsset {
    pub calibration: AssetCalibration,
    pub factors: AssetFactors,
}

/// Window, ratios, censored fit, copula and factors for one asset-date.
pub fn calibrate_asset(
    meta: &MetaModel,
    panel: &DailyPanel,
    date: NaiveDate,
    theta: f64,
    cfg: &RunConfig,
    seed: u64,
) -> Result<CalibratedAsset> {
    let mut available = panel.usable_days();
    if cfg.exclude_target {
        available.retain(|d| *d != date);
    }
    let window = build_window(date, theta, &available)?;
    let ratios = make_ratios(&window, meta, panel)?;
    let forecast = panel.forecast_for(date)?;
    let tb = target_beta(&ratios, &forecast);
    let calibration = calibrate(&ratios, tb, &cfg.calibration_options(), seed)?;
    let factors = fit_factors(&calibration.asset_id, &calibration.days, &calibration.z_tilde)?;
    Ok(CalibratedAsset { calibration, factors })
}

/// One hierarchy per asset kind, on first-factor amplitudes.
pub fn cluster_kinds(
    records: &[AssetRecord],
    factors: &[&AssetFactors],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<(AssetKind, Hierarchy)>> {
    let amps = AmplitudeSet::from_factors(factors, 1)?;
    let kind_of: BTreeMap<&str, AssetKind> = records.iter().map(|r| (r.asset_id.as_str(), r.kind)).collect();
    let mut out = Vec::new();
    for kind in [AssetKind::Solar, AssetKind::Wind] {
        let mut members: Vec<(String, Vec<f64>)> = amps
            .asset_ids
            .iter()
            .zip(&amps.series)
            .filter(|(id, _)| kind_of.get(id.as_str()) == Some(&kind))
            .map(|(id, s)| (id.clone(), s[0].clone()))
            .collect();
        if members.is_empty() {
            continue;
        }
        members.sort_by(|a, b| a.0.cmp(&b.0));
        let (ids, series): (Vec<String>, Vec<Vec<f64>>) = members.into_iter().unzip();
        let h = build_hierarchy(&ids, &series, &cfg.cluster_params(), substream_seed(seed, &kind.to_string()))?;
        out.push((kind, h));
    }
    Ok(out)
}

/// Correlation bundle for a date given its hierarchies.
pub fn correlate(hierarchies: Vec<(AssetKind, Hierarchy)>, factors: &[&AssetFactors], cfg: &RunConfig) -> Result<CorrelationBundle> {
    let amps = AmplitudeSet::from_factors(factors, cfg.k_keep)?;
    build_bundle(hierarchies, &amps, cfg.propagate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub target_date: NaiveDate,
    pub n_scenarios: usize,
    pub seed: u64,
    pub csv: String,
    pub csv_sha256: String,
    pub binary: Option<String>,
}

/// A configured run rooted at the config file's directory.
pub struct Workspace {
    pub cfg: RunConfig,
    pub base: PathBuf,
    pub force: bool,
}

fn seed_for(seed: u64, parts: &[&str]) -> u64 {
    substream_seed(seed, &parts.join("/"))
}

impl Workspace {
    pub fn new(cfg: RunConfig, base: impl Into<PathBuf>, force: bool) -> Self {
        Workspace {
            cfg,
            base: base.into(),
            force,
        }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.base.join(p)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path(&self.cfg.out_dir)
    }

    pub fn meta_path(&self, id: &str) -> PathBuf {
        self.out_dir().join("meta").join(format!("{id}.json"))
    }

    pub fn calib_path(&self, date: NaiveDate, id: &str) -> PathBuf {
        self.out_dir().join("calib").join(date.to_string()).join(format!("{id}.json"))
    }

    pub fn hierarchy_path(&self, date: NaiveDate) -> PathBuf {
        self.out_dir().join("clusters").join(format!("{date}.json"))
    }

    pub fn bundle_path(&self, date: NaiveDate) -> PathBuf {
        self.out_dir().join("clusters").join(format!("{date}.corr.json"))
    }

    pub fn scenario_csv_path(&self, date: NaiveDate) -> PathBuf {
        self.out_dir().join("scenarios").join(format!("scenarios_{date}.csv"))
    }

    pub fn manifest_path(&self, date: NaiveDate) -> PathBuf {
        self.out_dir().join("scenarios").join(format!("scenarios_{date}.json"))
    }

    fn frozen_path(&self) -> PathBuf {
        self.out_dir().join("clusters").join("frozen.json")
    }

    /// Digest of the config fields a stage depends on.
    pub fn config_digest(&self, stage: &str) -> Result<String> {
        let c = &self.cfg;
        match stage {
            "meta" => json_digest(&(c.meta_params(), c.seed)),
            "calib" => json_digest(&(c.theta, c.exclude_target, c.calibration_options(), c.seed)),
            "cluster" => json_digest(&(c.cluster_params(), c.k_keep, c.propagate, c.clustering_mode, c.seed)),
            "simulate" => json_digest(&(c.n_scenarios, c.binary_output, c.seed)),
            _ => Err(Error::InvalidParameter(format!("unknown stage {stage}"))),
        }
    }

    fn data_inputs(&self) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        m.insert(format!("file:{}", self.cfg.assets_file), file_digest(&self.path(&self.cfg.assets_file))?);
        for s in &self.cfg.series_files {
            m.insert(format!("file:{s}"), file_digest(&self.path(s))?);
        }
        Ok(m)
    }

    fn artifact_key(&self, path: &Path) -> String {
        let rel = path.strip_prefix(self.out_dir()).unwrap_or(path);
        format!("artifact:{}", rel.display())
    }

    fn current_digest(&self, key: &str) -> Result<String> {
        if let Some(stage) = key.strip_prefix("config:") {
            self.config_digest(stage)
        } else if let Some(f) = key.strip_prefix("file:") {
            file_digest(&self.path(f))
        } else if let Some(a) = key.strip_prefix("artifact:") {
            file_digest(&self.out_dir().join(a))
        } else {
            Err(Error::InvalidParameter(format!("unknown input key {key}")))
        }
    }

    /// Refuses an artifact whose recorded inputs changed since it was made.
    fn check_fresh<T>(&self, path: &Path, art: &Artifact<T>) -> Result<()> {
        for (key, digest) in &art.inputs {
            let now = self.current_digest(key);
            let stale = match now {
                Ok(d) => d != *digest,
                Err(Error::MissingArtifact(_)) => true,
                Err(e) => return Err(e),
            };
            if stale {
                if self.force {
                    warn!("using stale {} ({key} changed)", path.display());
                } else {
                    return Err(Error::Stale {
                        artifact: path.to_path_buf(),
                        input: PathBuf::from(key),
                    });
                }
            }
        }
        Ok(())
    }

    fn load<T: Serialize + DeserializeOwned>(&self, path: &Path) -> Result<(Artifact<T>, String)> {
        let art = read_artifact::<T>(path)?;
        self.check_fresh(path, &art)?;
        Ok((art, file_digest(path)?))
    }

    pub fn load_data(&self) -> Result<(Vec<AssetRecord>, Vec<DailyPanel>, LoadSummary)> {
        let series: Vec<PathBuf> = self.cfg.series_files.iter().map(|s| self.path(s)).collect();
        let refs: Vec<&Path> = series.iter().map(PathBuf::as_path).collect();
        let (records, panels, summary) = load_panels(&self.path(&self.cfg.assets_file), &refs)?;
        info!(
            "loaded {} assets, {} rows, {} missing cells",
            summary.assets, summary.rows, summary.missing_cells
        );
        Ok((records, panels, summary))
    }

    /// Writes the synthetic testbed to the configured data paths.
    pub fn synth(&self) -> Result<Vec<PathBuf>> {
        let (records, panels, truth) = synthesize_truth(&self.cfg.synth_config(), self.cfg.seed)?;
        let assets = self.path(&self.cfg.assets_file);
        let series = self.path(&self.cfg.series_files[0]);
        for p in [&assets, &series] {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let f = std::fs::File::create(&assets).map_err(|e| Error::io(&assets, e))?;
        crate::ingest::write_assets(f, &records)?;
        let f = std::fs::File::create(&series).map_err(|e| Error::io(&series, e))?;
        crate::ingest::write_series(f, &panels)?;
        let truth_path = self.out_dir().join("truth.json");
        write_artifact(&truth_path, "synth", self.data_inputs()?, &truth)?;
        Ok(vec![assets, series, truth_path])
    }

    pub fn metacalibrate(&self) -> Result<Vec<PathBuf>> {
        let (records, panels, _) = self.load_data()?;
        let params = self.cfg.meta_params();
        let mut inputs = self.data_inputs()?;
        inputs.insert("config:meta".into(), self.config_digest("meta")?);
        let fitted: Vec<Result<MetaModel>> = records
            .par_iter()
            .zip(&panels)
            .map(|(r, p)| {
                if p.is_empty() {
                    return Err(Error::fit(&r.asset_id, "no series rows"));
                }
                fit_meta(r, p, &params).map_err(|e| Error::fit(&r.asset_id, e.to_string()))
            })
            .collect();
        let mut written = Vec::new();
        for (r, m) in records.iter().zip(fitted) {
            let path = self.meta_path(&r.asset_id);
            write_artifact(&path, "metacalibrate", inputs.clone(), &m?)?;
            written.push(path);
        }
        Ok(written)
    }

    pub fn calibrate(&self, date: NaiveDate) -> Result<StageOutcome> {
        let (records, panels, _) = self.load_data()?;
        let data = self.data_inputs()?;
        let calib_cfg = self.config_digest("calib")?;
        let results: Vec<Result<PathBuf>> = records
            .par_iter()
            .zip(&panels)
            .map(|(r, p)| {
                let mpath = self.meta_path(&r.asset_id);
                let (meta, digest) = self.load::<MetaModel>(&mpath)?;
                let seed = seed_for(self.cfg.seed, &["calibrate", &date.to_string(), &r.asset_id]);
                let out = calibrate_asset(&meta.payload, p, date, self.cfg.theta, &self.cfg, seed)?;
                let mut inputs = data.clone();
                inputs.insert(self.artifact_key(&mpath), digest);
                inputs.insert("config:calib".into(), calib_cfg.clone());
                let path = self.calib_path(date, &r.asset_id);
                write_artifact(&path, "calibrate", inputs, &out)?;
                Ok(path)
            })
            .collect();
        let mut outcome = StageOutcome::default();
        for (r, res) in records.iter().zip(results) {
            match res {
                Ok(p) => outcome.written.push(p),
                Err(e) => outcome.failures.push((r.asset_id.clone(), e)),
            }
        }
        Ok(outcome)
    }

    fn load_calibrations(
        &self,
        records: &[AssetRecord],
        date: NaiveDate,
    ) -> Result<(Vec<CalibratedAsset>, BTreeMap<String, String>)> {
        let mut inputs = BTreeMap::new();
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let path = self.calib_path(date, &r.asset_id);
            let (art, digest) = self.load::<CalibratedAsset>(&path)?;
            inputs.insert(self.artifact_key(&path), digest);
            out.push(art.payload);
        }
        Ok((out, inputs))
    }

    /// Hierarchy computed once on full-year windows and reused per date.
    fn frozen_hierarchies(&self, records: &[AssetRecord], date: NaiveDate) -> Result<Vec<(AssetKind, Hierarchy)>> {
        let path = self.frozen_path();
        let mut inputs = self.data_inputs()?;
        inputs.insert("config:cluster".into(), self.config_digest("cluster")?);
        inputs.insert("config:calib".into(), self.config_digest("calib")?);
        if let Ok(art) = read_artifact::<Vec<(AssetKind, Hierarchy)>>(&path) {
            if art.inputs == inputs {
                return Ok(art.payload);
            }
        }
        let (_, panels, _) = self.load_data()?;
        let full: Vec<Result<AssetFactors>> = records
            .par_iter()
            .zip(&panels)
            .map(|(r, p)| {
                let (meta, _) = self.load::<MetaModel>(&self.meta_path(&r.asset_id))?;
                let seed = seed_for(self.cfg.seed, &["frozen", &r.asset_id]);
                Ok(calibrate_asset(&meta.payload, p, date, 0.5, &self.cfg, seed)?.factors)
            })
            .collect();
        let full = full.into_iter().collect::<Result<Vec<_>>>()?;
        let refs: Vec<&AssetFactors> = full.iter().collect();
        let h = cluster_kinds(records, &refs, &self.cfg, seed_for(self.cfg.seed, &["frozen-cluster"]))?;
        write_artifact(&path, "cluster-frozen", inputs, &h)?;
        Ok(h)
    }

    pub fn cluster(&self, date: NaiveDate) -> Result<Vec<PathBuf>> {
        let (records, _, _) = self.load_data()?;
        let (cals, mut inputs) = self.load_calibrations(&records, date)?;
        let refs: Vec<&AssetFactors> = cals.iter().map(|c| &c.factors).collect();
        let hierarchies = match self.cfg.clustering_mode {
            ClusteringMode::PerDate => {
                cluster_kinds(&records, &refs, &self.cfg, seed_for(self.cfg.seed, &["cluster", &date.to_string()]))?
            }
            ClusteringMode::Frozen => self.frozen_hierarchies(&records, date)?,
        };
        inputs.insert("config:cluster".into(), self.config_digest("cluster")?);
        let hpath = self.hierarchy_path(date);
        write_artifact(&hpath, "cluster", inputs.clone(), &hierarchies)?;
        let bundle = correlate(hierarchies, &refs, &self.cfg)?;
        let bpath = self.bundle_path(date);
        write_artifact(&bpath, "correlate", inputs, &bundle)?;
        let npath = self.out_dir().join("clusters").join(format!("{date}_nodes.csv"));
        write_nodes_csv(&npath, &bundle)?;
        Ok(vec![hpath, bpath, npath])
    }

    pub fn simulate(&self, date: NaiveDate, n: Option<usize>) -> Result<Vec<PathBuf>> {
        let (records, _, _) = self.load_data()?;
        let bpath = self.bundle_path(date);
        let (bundle, bdigest) = self.load::<CorrelationBundle>(&bpath)?;
        let (cals, mut inputs) = self.load_calibrations(&records, date)?;
        inputs.insert(self.artifact_key(&bpath), bdigest);
        inputs.insert("config:simulate".into(), self.config_digest("simulate")?);
        let n = n.unwrap_or(self.cfg.n_scenarios);
        if n < 2 {
            return Err(Error::InvalidParameter("at least 2 scenarios".into()));
        }
        let factors: Vec<AssetFactors> = cals.iter().map(|c| c.factors.clone()).collect();
        let calibrations: Vec<AssetCalibration> = cals.into_iter().map(|c| c.calibration).collect();
        let seed = seed_for(self.cfg.seed, &["simulate", &date.to_string()]);
        let mut set = simulate_scenarios(&bundle.payload, &factors, &calibrations, n, seed)?;
        set.provenance = inputs.clone();
        let csv_path = self.scenario_csv_path(date);
        if let Some(dir) = csv_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        set.write_csv(std::io::BufWriter::new(f))?;
        let mut written = vec![csv_path.clone()];
        let binary = if self.cfg.binary_output {
            let bin = csv_path.with_extension("bin");
            set.write_binary(&bin)?;
            written.push(bin.clone());
            Some(bin.file_name().unwrap().to_string_lossy().into_owned())
        } else {
            None
        };
        let manifest = ScenarioManifest {
            target_date: date,
            n_scenarios: n,
            seed,
            csv: csv_path.file_name().unwrap().to_string_lossy().into_owned(),
            csv_sha256: file_digest(&csv_path)?,
            binary,
        };
        let mpath = self.manifest_path(date);
        write_artifact(&mpath, "simulate", inputs, &manifest)?;
        written.push(mpath);
        Ok(written)
    }

    pub fn load_scenarios(&self, date: NaiveDate) -> Result<ScenarioSet> {
        let mpath = self.manifest_path(date);
        let (m, _) = self.load::<ScenarioManifest>(&mpath)?;
        let csv_path = self.scenario_csv_path(date);
        if file_digest(&csv_path)? != m.payload.csv_sha256 {
            return Err(Error::Checksum(csv_path));
        }
        let f = std::fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        ScenarioSet::read_csv(std::io::BufReader::new(f), date, m.payload.seed)
    }

    pub fn assess(&self, from: NaiveDate, to: NaiveDate) -> Result<Vec<PathBuf>> {
        if to < from {
            return Err(Error::InvalidParameter(format!("empty date range {from}..{to}")));
        }
        let (records, panels, _) = self.load_data()?;
        let mut days = Vec::new();
        for date in from.iter_days().take_while(|d| *d <= to) {
            let scenarios = self.load_scenarios(date)?;
            let mut actuals = BTreeMap::new();
            for p in &panels {
                if !scenarios.asset_ids.contains(&p.asset_id) {
                    continue;
                }
                let g = p
                    .day_index(date)
                    .map(|i| p.actual[i])
                    .unwrap_or([f64::NAN; HOURS]);
                actuals.insert(p.asset_id.clone(), g);
            }
            days.push(EvaluationDay { scenarios, actuals });
        }
        let opts = AssessOptions {
            q_lo: self.cfg.q_lo,
            q_hi: self.cfg.q_hi,
            pit_bins: self.cfg.pit_bins,
        };
        let dir = self.out_dir().join("reports");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut written = Vec::new();
        for (g, name) in [(Grouping::Asset, "asset"), (Grouping::Zone, "zone"), (Grouping::System, "system")] {
            let report = assess(&days, &records, g, &opts, seed_for(self.cfg.seed, &["assess", name]))?;
            let rpath = dir.join(format!("report_{from}_{to}_{name}.csv"));
            let f = std::fs::File::create(&rpath).map_err(|e| Error::io(&rpath, e))?;
            report.write_csv(f, &opts)?;
            let hpath = dir.join(format!("pit_hist_{from}_{to}_{name}.csv"));
            let f = std::fs::File::create(&hpath).map_err(|e| Error::io(&hpath, e))?;
            report.write_histogram_csv(f, opts.pit_bins)?;
            written.push(rpath);
            written.push(hpath);
        }
        Ok(written)
    }
}

/// `kind,level,cluster,asset_id,is_delegate,propagated` rows.
fn write_nodes_csv(path: &Path, bundle: &CorrelationBundle) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["kind", "level", "cluster", "asset_id", "is_delegate", "propagated"])?;
    for k in &bundle.kinds {
        for (li, level) in k.nodes.iter().enumerate() {
            for (ci, node) in level.iter().enumerate() {
                for &a in &node.corr.assets {
                    w.write_record([
                        k.kind.to_string(),
                        (li + 1).to_string(),
                        ci.to_string(),
                        bundle.asset_ids[a].clone(),
                        (a == node.delegate).to_string(),
                        node.subset.contains(&a).to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
