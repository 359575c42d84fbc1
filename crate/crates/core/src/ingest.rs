//! Asset metadata and hourly forecast/actual series: CSV loading, calendar
//! arithmetic and seasonal day windows.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HOURS: usize = 24;

pub const ASSETS_HEADER: [&str; 6] = [
    "asset_id",
    "kind",
    "nominal_capacity_mw",
    "latitude",
    "longitude",
    "zone",
];
pub const SERIES_HEADER: [&str; 5] = ["asset_id", "date", "hour", "forecast_mwh", "actual_mwh"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetKind {
    Solar,
    Wind,
}

impl fmt::Display for AssetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssetKind::Solar => "solar",
            AssetKind::Wind => "wind",
        })
    }
}

impl FromStr for AssetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "solar" => Ok(AssetKind::Solar),
            "wind" => Ok(AssetKind::Wind),
            other => Err(format!("unknown asset kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub asset_id: String,
    pub kind: AssetKind,
    /// Nameplate capacity in MW.
    pub nominal_capacity: f64,
    pub latitude: f64,
    pub longitude: f64,
    pub zone: String,
}

/// Hourly forecast and actual MWh for one asset, one row per calendar day.
///
/// Missing values are stored as NaN and flagged in `missing`; a cell is
/// missing when either its forecast or its actual is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyPanel {
    pub asset_id: String,
    pub days: Vec<NaiveDate>,
    pub forecast: Vec<[f64; HOURS]>,
    pub actual: Vec<[f64; HOURS]>,
    pub missing: Vec<[bool; HOURS]>,
}

impl DailyPanel {
    pub fn new(asset_id: impl Into<String>) -> Self {
        DailyPanel {
            asset_id: asset_id.into(),
            days: Vec::new(),
            forecast: Vec::new(),
            actual: Vec::new(),
            missing: Vec::new(),
        }
    }

    /// Appends a complete day. Days must be pushed in increasing order.
    pub fn push_day(&mut self, date: NaiveDate, forecast: [f64; HOURS], actual: [f64; HOURS]) {
        debug_assert!(self.days.last().is_none_or(|d| *d < date));
        let mut missing = [false; HOURS];
        for h in 0..HOURS {
            missing[h] = !forecast[h].is_finite() || !actual[h].is_finite();
        }
        self.days.push(date);
        self.forecast.push(forecast);
        self.actual.push(actual);
        self.missing.push(missing);
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        self.days.binary_search(&date).ok()
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().flatten().filter(|m| **m).count()
    }

    /// Days with at most half their hours missing; only these may enter
    /// estimation windows.
    pub fn usable_days(&self) -> Vec<NaiveDate> {
        self.days
            .iter()
            .zip(&self.missing)
            .filter(|(_, m)| m.iter().filter(|x| **x).count() * 2 <= HOURS)
            .map(|(d, _)| *d)
            .collect()
    }

    /// Target-day forecast; every hour must be present.
    pub fn forecast_for(&self, date: NaiveDate) -> Result<[f64; HOURS]> {
        let i = self.day_index(date).ok_or_else(|| {
            Error::Infeasible(format!("no forecast for {} on {date}", self.asset_id))
        })?;
        let f = self.forecast[i];
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Infeasible(format!(
                "incomplete forecast for {} on {date}",
                self.asset_id
            )));
        }
        Ok(f)
    }
}

/// Calendar days within a circular year-fraction distance of a target date.
#[derive(Debug, Clone, PartialEq)]
pub struct DayWindow {
    pub target_date: NaiveDate,
    pub theta: f64,
    pub members: Vec<NaiveDate>,
}

impl DayWindow {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn days_in_year(year: i32) -> u32 {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

/// `(day_of_year − 1) / days_in_year`, leap years honored.
pub fn year_fraction(date: NaiveDate) -> f64 {
    date.ordinal0() as f64 / days_in_year(date.year()) as f64
}

/// Year-fraction distance wrapping December into January.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(1.0);
    d.min(1.0 - d)
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| Error::InvalidDate(s.to_string()))
}

pub fn build_window(
    target_date: NaiveDate,
    theta: f64,
    available: &[NaiveDate],
) -> Result<DayWindow> {
    if !(theta > 0.0 && theta <= 0.5) {
        return Err(Error::InvalidParameter(format!(
            "window width {theta} outside (0, 0.5]"
        )));
    }
    if available.is_empty() {
        return Err(Error::Infeasible("no available dates".into()));
    }
    let phi = year_fraction(target_date);
    // Tolerance absorbs rounding in distances that sit exactly on theta.
    let mut members: Vec<NaiveDate> = available
        .iter()
        .copied()
        .filter(|d| circular_distance(year_fraction(*d), phi) <= theta + 1e-12)
        .collect();
    members.sort();
    members.dedup();
    if members.is_empty() {
        return Err(Error::Infeasible(format!(
            "empty window around {target_date} (theta {theta})"
        )));
    }
    Ok(DayWindow {
        target_date,
        theta,
        members,
    })
}

/// Counts reported after loading series files.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadSummary {
    pub assets: usize,
    pub rows: usize,
    pub blank_cells: usize,
    pub unparseable_cells: usize,
    pub missing_cells: usize,
}

fn check_header(file: &str, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got: Vec<&str> = got.iter().map(str::trim).collect();
    if got != want {
        return Err(Error::Schema {
            file: file.to_string(),
            msg: format!("expected header {}, found {}", want.join(","), got.join(",")),
        });
    }
    Ok(())
}

pub fn read_assets<R: std::io::Read>(reader: R, file: &str) -> Result<Vec<AssetRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(file, rdr.headers()?, &ASSETS_HEADER)?;
    let mut out: Vec<AssetRecord> = Vec::new();
    let mut seen = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let bad = |msg: String| Error::BadRow {
            file: file.to_string(),
            row,
            msg,
        };
        if rec.len() != ASSETS_HEADER.len() {
            return Err(bad(format!("expected 6 fields, found {}", rec.len())));
        }
        let asset_id = rec[0].to_string();
        if asset_id.is_empty() {
            return Err(bad("empty asset_id".into()));
        }
        let kind: AssetKind = rec[1].parse().map_err(bad)?;
        let num = |idx: usize, name: &str| -> Result<f64> {
            rec[idx]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("unparseable {name} {:?}", &rec[idx])))
        };
        let nominal_capacity = num(2, "nominal_capacity_mw")?;
        if nominal_capacity <= 0.0 {
            return Err(bad(format!("nominal capacity {nominal_capacity} must be positive")));
        }
        let latitude = num(3, "latitude")?;
        let longitude = num(4, "longitude")?;
        if seen.insert(asset_id.clone(), row).is_some() {
            return Err(bad(format!("duplicate asset_id {asset_id}")));
        }
        out.push(AssetRecord {
            asset_id,
            kind,
            nominal_capacity,
            latitude,
            longitude,
            zone: rec[5].to_string(),
        });
    }
    Ok(out)
}

enum Cell {
    Value(f64),
    Blank,
    Unparseable,
}

fn parse_cell(s: &str) -> Cell {
    if s.is_empty() {
        return Cell::Blank;
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Cell::Value(v),
        _ => Cell::Unparseable,
    }
}

/// Reads series rows into per-asset panels keyed by asset id.
pub fn read_series<R: std::io::Read>(
    reader: R,
    file: &str,
    assets: &[AssetRecord],
    panels: &mut BTreeMap<String, BTreeMap<NaiveDate, ([f64; HOURS], [f64; HOURS], [bool; HOURS])>>,
    summary: &mut LoadSummary,
) -> Result<()> {
    let known: HashMap<&str, ()> = assets.iter().map(|a| (a.asset_id.as_str(), ())).collect();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(file, rdr.headers()?, &SERIES_HEADER)?;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let bad = |msg: String| Error::BadRow {
            file: file.to_string(),
            row,
            msg,
        };
        if rec.len() != SERIES_HEADER.len() {
            return Err(bad(format!("expected 5 fields, found {}", rec.len())));
        }
        let asset_id = &rec[0];
        if !known.contains_key(asset_id) {
            return Err(Error::UnknownAsset(asset_id.to_string()));
        }
        let date = parse_date(&rec[1]).map_err(|e| bad(e.to_string()))?;
        let hour: u32 = rec[2]
            .parse()
            .ok()
            .filter(|h| (1..=HOURS as u32).contains(h))
            .ok_or_else(|| bad(format!("hour {:?} outside 1..=24", &rec[2])))?;
        let mut vals = [f64::NAN; 2];
        for (k, idx) in [3usize, 4].into_iter().enumerate() {
            match parse_cell(&rec[idx]) {
                Cell::Value(v) if v < 0.0 => {
                    return Err(bad(format!("negative MWh {v} in {}", SERIES_HEADER[idx])));
                }
                Cell::Value(v) => vals[k] = v,
                Cell::Blank => summary.blank_cells += 1,
                Cell::Unparseable => summary.unparseable_cells += 1,
            }
        }
        let day = panels
            .entry(asset_id.to_string())
            .or_default()
            .entry(date)
            .or_insert(([f64::NAN; HOURS], [f64::NAN; HOURS], [false; HOURS]));
        let h = hour as usize - 1;
        if day.2[h] {
            return Err(Error::DuplicateRow {
                asset_id: asset_id.to_string(),
                date: date.to_string(),
                hour,
            });
        }
        day.2[h] = true;
        day.0[h] = vals[0];
        day.1[h] = vals[1];
        summary.rows += 1;
    }
    Ok(())
}

/// Loads the asset table and one or more series files into panels, one per
/// asset in metadata order.
pub fn load_panels(
    metadata_file: &Path,
    series_files: &[&Path],
) -> Result<(Vec<AssetRecord>, Vec<DailyPanel>, LoadSummary)> {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| Error::io(p, e));
    let assets = read_assets(open(metadata_file)?, &metadata_file.display().to_string())?;
    let mut raw = BTreeMap::new();
    let mut summary = LoadSummary::default();
    for f in series_files {
        read_series(open(f)?, &f.display().to_string(), &assets, &mut raw, &mut summary)?;
    }
    let panels = assemble_panels(&assets, raw);
    summary.assets = panels.len();
    summary.missing_cells = panels.iter().map(DailyPanel::missing_count).sum();
    Ok((assets, panels, summary))
}

#[allow(clippy::type_complexity)]
fn assemble_panels(
    assets: &[AssetRecord],
    mut raw: BTreeMap<String, BTreeMap<NaiveDate, ([f64; HOURS], [f64; HOURS], [bool; HOURS])>>,
) -> Vec<DailyPanel> {
    assets
        .iter()
        .map(|a| {
            let mut panel = DailyPanel::new(a.asset_id.clone());
            if let Some(days) = raw.remove(&a.asset_id) {
                for (date, (f, g, _)) in days {
                    panel.push_day(date, f, g);
                }
            }
            panel
        })
        .collect()
}

fn fmt_cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn write_assets<W: Write>(writer: W, assets: &[AssetRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ASSETS_HEADER)?;
    for a in assets {
        w.write_record([
            a.asset_id.clone(),
            a.kind.to_string(),
            format!("{}", a.nominal_capacity),
            format!("{}", a.latitude),
            format!("{}", a.longitude),
            a.zone.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<assets>", e))?;
    Ok(())
}

pub fn write_series<W: Write>(writer: W, panels: &[DailyPanel]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SERIES_HEADER)?;
    for p in panels {
        for (i, date) in p.days.iter().enumerate() {
            let ds = date.format("%Y-%m-%d").to_string();
            for h in 0..HOURS {
                w.write_record([
                    p.asset_id.as_str(),
                    ds.as_str(),
                    &(h + 1).to_string(),
                    &fmt_cell(p.forecast[i][h]),
                    &fmt_cell(p.actual[i][h]),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<series>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn year(y: i32) -> Vec<NaiveDate> {
        d(y, 1, 1).iter_days().take_while(|x| x.year() == y).collect()
    }

    #[test]
    fn year_fraction_grid() {
        assert_eq!(year_fraction(d(2018, 1, 1)), 0.0);
        assert!((year_fraction(d(2018, 7, 2)) - 182.0 / 365.0).abs() < 1e-15);
        assert!((year_fraction(d(2018, 12, 31)) - 364.0 / 365.0).abs() < 1e-15);
        assert!((year_fraction(d(2020, 12, 31)) - 365.0 / 366.0).abs() < 1e-15);
    }

    #[test]
    fn year_fraction_monotone_and_onto_grid() {
        for y in [2018, 2020] {
            let days = year(y);
            let n = days.len() as f64;
            for (i, pair) in days.windows(2).enumerate() {
                assert!(year_fraction(pair[0]) < year_fraction(pair[1]));
                assert_eq!(year_fraction(pair[0]), i as f64 / n);
            }
        }
    }

    #[test]
    fn window_around_april_first() {
        // 0.15 × 365 = 54.75 days either side, so ±54 days: 109 dates. The
        // rounded "0.3 × 365 ≈ 110" figure is recovered within one day.
        let w = build_window(d(2018, 4, 1), 0.15, &year(2018)).unwrap();
        let brute = year(2018)
            .into_iter()
            .filter(|x| {
                let gap = (x.ordinal0() as i64 - d(2018, 4, 1).ordinal0() as i64).abs();
                gap.min(365 - gap) as f64 <= 0.15 * 365.0
            })
            .count();
        assert_eq!(w.len(), brute);
        assert_eq!(w.len(), 109);
        assert!((w.len() as i64 - 110).abs() <= 1);
        assert!(w.members.contains(&d(2018, 4, 1)));
    }

    #[test]
    fn full_circle_window() {
        let w = build_window(d(2018, 9, 13), 0.5, &year(2018)).unwrap();
        assert_eq!(w.len(), 365);
    }

    #[test]
    fn narrow_window_wraps_year_end() {
        let w = build_window(d(2018, 1, 1), 0.02, &year(2018)).unwrap();
        let mut expect: Vec<NaiveDate> = (1..=8).map(|k| d(2018, 1, k)).collect();
        expect.extend((25..=31).map(|k| d(2018, 12, k)));
        expect.sort();
        assert_eq!(w.members, expect);
        assert_eq!(w.len(), 15);
    }

    #[test]
    fn isolated_target_is_infeasible() {
        let avail = vec![d(2018, 7, 1)];
        assert!(matches!(
            build_window(d(2018, 1, 1), 0.05, &avail),
            Err(Error::Infeasible(_))
        ));
        assert!(build_window(d(2018, 1, 1), 0.6, &avail).is_err());
    }

    #[test]
    fn window_is_symmetric() {
        let avail = year(2018);
        for (a, b) in [(d(2018, 1, 3), d(2018, 12, 20)), (d(2018, 3, 1), d(2018, 5, 20))] {
            let ab = build_window(a, 0.15, &avail).unwrap().members.contains(&b);
            let ba = build_window(b, 0.15, &avail).unwrap().members.contains(&a);
            assert_eq!(ab, ba);
        }
    }

    const ASSETS: &str = "asset_id,kind,nominal_capacity_mw,latitude,longitude,zone\n\
                          s1,solar,100,30.1,-97.5,West\n\
                          w1,wind,250.5,32.25,-101.2,North\n";

    fn series_for(rows: &[(&str, &str, u32, &str, &str)]) -> String {
        let mut s = String::from("asset_id,date,hour,forecast_mwh,actual_mwh\n");
        for r in rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.0, r.1, r.2, r.3, r.4));
        }
        s
    }

    fn load(series: &str) -> Result<(Vec<DailyPanel>, LoadSummary)> {
        let assets = read_assets(ASSETS.as_bytes(), "assets.csv")?;
        let mut raw = BTreeMap::new();
        let mut summary = LoadSummary::default();
        read_series(series.as_bytes(), "series.csv", &assets, &mut raw, &mut summary)?;
        let panels = assemble_panels(&assets, raw);
        summary.missing_cells = panels.iter().map(DailyPanel::missing_count).sum();
        Ok((panels, summary))
    }

    fn full_day(asset: &'static str, date: &'static str) -> Vec<(&'static str, &'static str, u32, String, String)> {
        (1..=24)
            .map(|h| (asset, date, h, format!("{}", h as f64 * 1.5), format!("{}", h as f64)))
            .collect()
    }

    type Row<'a> = (&'static str, &'static str, u32, &'a str, &'a str);

    fn rows_ref<'a>(v: &'a [(&'static str, &'static str, u32, String, String)]) -> Vec<Row<'a>> {
        v.iter().map(|r| (r.0, r.1, r.2, r.3.as_str(), r.4.as_str())).collect()
    }

    #[test]
    fn well_formed_fixture() {
        let mut rows = full_day("s1", "2018-01-01");
        rows.extend(full_day("w1", "2018-01-01"));
        let (panels, summary) = load(&series_for(&rows_ref(&rows))).unwrap();
        assert_eq!(panels.len(), 2);
        assert_eq!(summary.missing_cells, 0);
        assert_eq!(summary.rows, 48);
        assert_eq!(panels[1].actual[0][23], 24.0);
    }

    #[test]
    fn blank_actual_is_flagged_missing() {
        let mut rows = full_day("s1", "2018-01-01");
        rows[5].4 = String::new();
        let (panels, summary) = load(&series_for(&rows_ref(&rows))).unwrap();
        assert!(panels[0].missing[0][5]);
        assert!(panels[0].actual[0][5].is_nan());
        assert_eq!(panels[0].forecast[0][5], 9.0);
        assert_eq!(summary.missing_cells, 1);
        assert_eq!(summary.blank_cells, 1);
    }

    #[test]
    fn unparseable_cell_is_flagged_not_dropped() {
        let mut rows = full_day("s1", "2018-01-01");
        rows[2].3 = "n/a".into();
        let (panels, summary) = load(&series_for(&rows_ref(&rows))).unwrap();
        assert!(panels[0].missing[0][2]);
        assert_eq!(summary.unparseable_cells, 1);
    }

    #[test]
    fn negative_mwh_names_row() {
        let mut rows = full_day("s1", "2018-01-01");
        rows[3].4 = "-1.5".into();
        match load(&series_for(&rows_ref(&rows))) {
            Err(Error::BadRow { row, .. }) => assert_eq!(row, 5),
            other => panic!("expected BadRow, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_unknown_rows_rejected() {
        let mut rows = full_day("s1", "2018-01-01");
        rows.push(rows[0].clone());
        assert!(matches!(
            load(&series_for(&rows_ref(&rows))),
            Err(Error::DuplicateRow { .. })
        ));
        let rows = full_day("zz", "2018-01-01");
        assert!(matches!(
            load(&series_for(&rows_ref(&rows))),
            Err(Error::UnknownAsset(_))
        ));
    }

    #[test]
    fn schema_violations() {
        let bad_header = "asset,date,hour,forecast_mwh,actual_mwh\n";
        assert!(matches!(load(bad_header), Err(Error::Schema { .. })));
        let bad_kind = "asset_id,kind,nominal_capacity_mw,latitude,longitude,zone\nx,hydro,1,0,0,z\n";
        assert!(read_assets(bad_kind.as_bytes(), "a").is_err());
        let zero_cap = "asset_id,kind,nominal_capacity_mw,latitude,longitude,zone\nx,wind,0,0,0,z\n";
        assert!(read_assets(zero_cap.as_bytes(), "a").is_err());
        let rows = [("s1", "2018-01-01", 25u32, "1", "1")];
        assert!(matches!(load(&series_for(&rows)), Err(Error::BadRow { .. })));
    }

    #[test]
    fn usable_days_excludes_mostly_missing() {
        let mut p = DailyPanel::new("a");
        let mut g = [1.0; HOURS];
        p.push_day(d(2018, 1, 1), [1.0; HOURS], g);
        for v in g.iter_mut().take(13) {
            *v = f64::NAN;
        }
        p.push_day(d(2018, 1, 2), [1.0; HOURS], g);
        assert_eq!(p.usable_days(), vec![d(2018, 1, 1)]);
    }

    #[test]
    fn assets_round_trip() {
        let assets = read_assets(ASSETS.as_bytes(), "a").unwrap();
        let mut buf = Vec::new();
        write_assets(&mut buf, &assets).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), ASSETS);
    }
}
