//! Per-cluster factor-amplitude correlations, propagation subsets and the
//! top-level covariance that ties asset kinds together.
//!
//! Every hierarchy node carries the set of assets whose amplitudes it
//! models: a level-1 node is its asset; a higher node covers the union of
//! its members' propagation subsets. Each node propagates a subset of its
//! assets (delegate included) upward.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::Hierarchy;
use crate::error::{Error, Result};
use crate::factors::AssetFactors;
use crate::ingest::AssetKind;
use crate::linalg::{pinv_sym, psd_repair};

/// Minimum common days for any correlation estimate.
pub const MIN_COMMON_DAYS: usize = 20;
/// Exhaustive subset search up to this cluster size.
pub const EXHAUSTIVE_LIMIT: usize = 12;
const RIDGE: f64 = 1e-8;

/// First `k_keep` amplitude series of every asset on a shared day index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeSet {
    pub asset_ids: Vec<String>,
    pub days: Vec<NaiveDate>,
    /// `[asset][factor][day]`.
    pub series: Vec<Vec<Vec<f64>>>,
}

impl AmplitudeSet {
    /// Aligns assets on the intersection of their days.
    pub fn from_factors(factors: &[&AssetFactors], k_keep: usize) -> Result<Self> {
        let mut common: Option<BTreeSet<NaiveDate>> = None;
        for f in factors {
            let days: BTreeSet<NaiveDate> = f.days.iter().copied().collect();
            common = Some(match common {
                None => days,
                Some(c) => c.intersection(&days).copied().collect(),
            });
        }
        let days: Vec<NaiveDate> = common.unwrap_or_default().into_iter().collect();
        if days.len() < MIN_COMMON_DAYS {
            return Err(Error::Infeasible(format!(
                "{} common amplitude days, need {MIN_COMMON_DAYS}",
                days.len()
            )));
        }
        let mut series = Vec::with_capacity(factors.len());
        for f in factors {
            if f.n_hours() < k_keep {
                return Err(Error::Infeasible(format!(
                    "{} has {} factors, fewer than the {k_keep} propagated",
                    f.asset_id,
                    f.n_hours()
                )));
            }
            let pos: BTreeMap<NaiveDate, usize> = f.days.iter().enumerate().map(|(i, d)| (*d, i)).collect();
            series.push(
                (0..k_keep)
                    .map(|k| days.iter().map(|d| f.amplitudes[(pos[d], k)]).collect())
                    .collect(),
            );
        }
        Ok(AmplitudeSet {
            asset_ids: factors.iter().map(|f| f.asset_id.clone()).collect(),
            days,
            series,
        })
    }

    pub fn k_keep(&self) -> usize {
        self.series.first().map_or(0, |s| s.len())
    }
}

/// Correlation matrices of one node's assets, one per propagated factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCorr {
    /// Global asset indices, in matrix order.
    pub assets: Vec<usize>,
    /// `A^(k)` for `k = 1..K_keep`.
    pub matrices: Vec<DMatrix<f64>>,
}

fn uncentred_cov(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (a.len() as f64 - 1.0)
}

/// Same-factor Pearson correlations over the node's assets, PSD-repaired.
pub fn cluster_correlations(assets: &[usize], amps: &AmplitudeSet) -> Result<ClusterCorr> {
    if amps.days.len() < MIN_COMMON_DAYS {
        return Err(Error::Infeasible(format!(
            "{} common days, need {MIN_COMMON_DAYS}",
            amps.days.len()
        )));
    }
    let n = assets.len();
    let mut matrices = Vec::with_capacity(amps.k_keep());
    for k in 0..amps.k_keep() {
        for &a in assets {
            if crate::stats::std_dev(&amps.series[a][k]) <= 1e-12 {
                return Err(Error::Degenerate(format!(
                    "constant factor-{} amplitude for {}",
                    k + 1,
                    amps.asset_ids[a]
                )));
            }
        }
        let mut m = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..i {
                let r = crate::stats::pearson(&amps.series[assets[i]][k], &amps.series[assets[j]][k])
                    .unwrap_or(0.0)
                    .clamp(-1.0, 1.0);
                m[(i, j)] = r;
                m[(j, i)] = r;
            }
        }
        matrices.push(psd_repair(&m)?);
    }
    Ok(ClusterCorr {
        assets: assets.to_vec(),
        matrices,
    })
}

/// `trace(Σ − Σ_{·S} Σ_SS⁻¹ Σ_{S·})`, with a ridge on `Σ_SS`.
pub fn conditional_trace(cov: &DMatrix<f64>, subset: &[usize]) -> f64 {
    let n = cov.nrows();
    if subset.is_empty() {
        return cov.trace();
    }
    let p = subset.len();
    let mut sss = DMatrix::from_fn(p, p, |i, j| cov[(subset[i], subset[j])]);
    for i in 0..p {
        sss[(i, i)] += RIDGE;
    }
    let inv = sss
        .clone()
        .try_inverse()
        .unwrap_or_else(|| pinv_sym(&sss));
    let sas = DMatrix::from_fn(n, p, |i, j| cov[(i, subset[j])]);
    let explained = &sas * inv * sas.transpose();
    (cov - explained).trace()
}

fn combinations(n: usize, p: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, p: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == p {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < p - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, p, cur, f);
            cur.pop();
        }
    }
    rec(0, n, p, &mut Vec::new(), f);
}

/// Size-`p` subset (positions into `cov`) minimizing the conditional trace.
/// `forced` must be included. Exhaustive for small clusters, greedy forward
/// selection otherwise. Ties keep the lexicographically first subset.
pub fn select_propagation_subset(cov: &DMatrix<f64>, p: usize, forced: Option<usize>) -> Result<Vec<usize>> {
    let n = cov.nrows();
    if p == 0 || p > n {
        return Err(Error::InvalidParameter(format!("subset size {p} for a cluster of {n}")));
    }
    if forced.is_some_and(|f| f >= n) {
        return Err(Error::InvalidParameter("forced member outside the cluster".into()));
    }
    if n <= EXHAUSTIVE_LIMIT {
        let mut best = (f64::INFINITY, Vec::new());
        combinations(n, p, &mut |s| {
            if forced.is_some_and(|f| !s.contains(&f)) {
                return;
            }
            let t = conditional_trace(cov, s);
            if t < best.0 - 1e-12 {
                best = (t, s.to_vec());
            }
        });
        return Ok(best.1);
    }
    let mut chosen: Vec<usize> = forced.into_iter().collect();
    while chosen.len() < p {
        let mut best = (f64::INFINITY, 0);
        for c in (0..n).filter(|c| !chosen.contains(c)) {
            let mut trial = chosen.clone();
            trial.push(c);
            let t = conditional_trace(cov, &trial);
            if t < best.0 - 1e-12 {
                best = (t, c);
            }
        }
        chosen.push(best.1);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Covariance of the top-level amplitudes, one entry per (asset, factor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopCovariance {
    /// `(global asset index, factor index)` in matrix order.
    pub entries: Vec<(usize, usize)>,
    pub cov: DMatrix<f64>,
}

impl TopCovariance {
    /// Correlation form used for simulation in standardized amplitudes.
    pub fn correlation(&self) -> DMatrix<f64> {
        let n = self.cov.nrows();
        let d: Vec<f64> = (0..n).map(|i| self.cov[(i, i)].max(1e-300).sqrt()).collect();
        DMatrix::from_fn(n, n, |i, j| self.cov[(i, j)] / (d[i] * d[j]))
    }
}

/// Uncentred `(n−1)` covariance over the contributed amplitude series, with
/// different-factor entries set to zero, then PSD-repaired.
pub fn top_covariance(assets: &[usize], amps: &AmplitudeSet) -> Result<TopCovariance> {
    if amps.days.len() < MIN_COMMON_DAYS {
        return Err(Error::Infeasible(format!(
            "{} common days for the top covariance, need {MIN_COMMON_DAYS}",
            amps.days.len()
        )));
    }
    let mut entries = Vec::with_capacity(assets.len() * amps.k_keep());
    for &a in assets {
        for k in 0..amps.k_keep() {
            entries.push((a, k));
        }
    }
    let n = entries.len();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let ((a, k), (b, l)) = (entries[i], entries[j]);
            if k != l {
                continue;
            }
            let v = uncentred_cov(&amps.series[a][k], &amps.series[b][l]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let sd: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    if let Some(i) = sd.iter().position(|s| *s <= 1e-12) {
        return Err(Error::Degenerate(format!(
            "zero-variance amplitude for {}",
            amps.asset_ids[entries[i].0]
        )));
    }
    let corr = DMatrix::from_fn(n, n, |i, j| cov[(i, j)] / (sd[i] * sd[j]));
    let repaired = psd_repair(&corr)?;
    let mut cov = DMatrix::from_fn(n, n, |i, j| repaired[(i, j)] * sd[i] * sd[j]);
    // Keep the block structure exact after repair.
    for i in 0..n {
        for j in 0..n {
            if entries[i].1 != entries[j].1 {
                cov[(i, j)] = 0.0;
            }
        }
    }
    Ok(TopCovariance { entries, cov })
}

/// A hierarchy node with its modelled assets and propagation subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCorr {
    pub corr: ClusterCorr,
    /// Global asset indices propagated upward (delegate included).
    pub subset: Vec<usize>,
    pub delegate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindCorrelation {
    pub kind: AssetKind,
    pub hierarchy: Hierarchy,
    /// Hierarchy-local asset index → global index.
    pub global: Vec<usize>,
    /// `[level][cluster]`.
    pub nodes: Vec<Vec<NodeCorr>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBundle {
    pub asset_ids: Vec<String>,
    pub k_keep: usize,
    pub propagate: usize,
    pub kinds: Vec<KindCorrelation>,
    pub top: TopCovariance,
}

/// Builds node correlations bottom-up for every kind and the joint top
/// covariance.
pub fn build_bundle(
    hierarchies: Vec<(AssetKind, Hierarchy)>,
    amps: &AmplitudeSet,
    propagate: usize,
) -> Result<CorrelationBundle> {
    let index: BTreeMap<&str, usize> = amps.asset_ids.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let mut kinds = Vec::with_capacity(hierarchies.len());
    let mut top_assets = Vec::new();
    for (kind, hierarchy) in hierarchies {
        let global: Vec<usize> = hierarchy
            .assets
            .iter()
            .map(|a| {
                index
                    .get(a.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownAsset(a.clone()))
            })
            .collect::<Result<_>>()?;
        let mut nodes: Vec<Vec<NodeCorr>> = Vec::with_capacity(hierarchy.levels.len());
        for (li, level) in hierarchy.levels.iter().enumerate() {
            let mut row = Vec::with_capacity(level.clusters.len());
            for cluster in &level.clusters {
                let assets: Vec<usize> = if li == 0 {
                    cluster.members.iter().map(|&m| global[m]).collect()
                } else {
                    let mut s: Vec<usize> = cluster
                        .members
                        .iter()
                        .flat_map(|&m| nodes[li - 1][m].subset.clone())
                        .collect();
                    s.sort_unstable();
                    s.dedup();
                    s
                };
                let corr = cluster_correlations(&assets, amps)?;
                let delegate = global[cluster.delegate];
                let p = propagate.clamp(1, assets.len());
                let forced = assets.iter().position(|&a| a == delegate);
                let cov1 = &corr.matrices[0];
                let pos = select_propagation_subset(cov1, p, forced)?;
                let subset = pos.iter().map(|&i| assets[i]).collect();
                row.push(NodeCorr {
                    corr,
                    subset,
                    delegate,
                });
            }
            nodes.push(row);
        }
        for node in nodes.last().expect("hierarchy has levels") {
            top_assets.extend(node.subset.iter().copied());
        }
        kinds.push(KindCorrelation {
            kind,
            hierarchy,
            global,
            nodes,
        });
    }
    top_assets.sort_unstable();
    let top = top_covariance(&top_assets, amps)?;
    Ok(CorrelationBundle {
        asset_ids: amps.asset_ids.clone(),
        k_keep: amps.k_keep(),
        propagate,
        kinds,
        top,
    })
}

/// Checks the numeric invariants every emitted matrix must satisfy.
pub fn validate_matrix(m: &DMatrix<f64>, unit_diagonal: bool) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        if unit_diagonal && (m[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::Degenerate(format!("diagonal entry {i} is {}", m[(i, i)])));
        }
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                return Err(Error::Degenerate(format!("asymmetry at ({i}, {j})")));
            }
        }
    }
    let scale = m.diagonal().amax().max(1.0);
    if crate::linalg::min_eigenvalue(m) < -1e-10 * scale {
        return Err(Error::Degenerate("matrix is not positive semidefinite".into()));
    }
    Ok(())
}
