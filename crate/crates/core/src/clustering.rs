//! Simulated-annealing correlation clustering and the multi-level cluster
//! hierarchy built from first-factor amplitudes.
//!
//! Node indices at every level follow the order of the asset ids, so the
//! "smallest id" tie rule is the smallest index.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Attempts to find a feasible move before a step passes.
const MAX_RESAMPLE: usize = 20;

/// Singleton-safe cluster term of the energy.
fn term(size: usize, pair_sum: f64, kappa: f64) -> f64 {
    match size {
        0 => 0.0,
        1 => 1.0,
        n => 1.0 + kappa * pair_sum / (n - 1) as f64,
    }
}

/// `E(𝒞) = Σ_𝔠 [1 + κ/(|𝔠|−1) Σ_{i<j∈𝔠} (1 − ρ²_ij)]`, singletons count 1.
pub fn energy(clusters: &[Vec<usize>], rho: &DMatrix<f64>, kappa: f64) -> f64 {
    clusters
        .iter()
        .map(|c| {
            let mut s = 0.0;
            for (a, &i) in c.iter().enumerate() {
                for &j in &c[a + 1..] {
                    s += 1.0 - rho[(i, j)] * rho[(i, j)];
                }
            }
            term(c.len(), s, kappa)
        })
        .sum()
}

/// Member with the highest mean `|ρ|` to the other members; ties go to the
/// smallest index.
pub fn select_delegate(cluster: &[usize], rho: &DMatrix<f64>) -> usize {
    if cluster.len() == 1 {
        return cluster[0];
    }
    let mut sorted = cluster.to_vec();
    sorted.sort_unstable();
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &i in &sorted {
        let m = sorted
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| rho[(i, j)].abs())
            .sum::<f64>()
            / (sorted.len() - 1) as f64;
        if m > best.0 + 1e-12 {
            best = (m, i);
        }
    }
    best.1
}

/// Two-way split: seed with the least correlated pair, then attach each
/// remaining member to the seed it is more correlated with.
pub fn split_cluster(cluster: &[usize], rho: &DMatrix<f64>) -> (Vec<usize>, Vec<usize>) {
    let mut sorted = cluster.to_vec();
    sorted.sort_unstable();
    let mut seeds = (sorted[0], sorted[1]);
    let mut weakest = f64::INFINITY;
    for (a, &i) in sorted.iter().enumerate() {
        for &j in &sorted[a + 1..] {
            let r = rho[(i, j)].abs();
            if r < weakest {
                weakest = r;
                seeds = (i, j);
            }
        }
    }
    let (mut left, mut right) = (vec![seeds.0], vec![seeds.1]);
    for &k in &sorted {
        if k == seeds.0 || k == seeds.1 {
            continue;
        }
        if rho[(k, seeds.0)].abs() >= rho[(k, seeds.1)].abs() {
            left.push(k);
        } else {
            right.push(k);
        }
    }
    (left, right)
}

/// Metropolis acceptance at temperature `temp`.
pub fn accept<R: Rng>(delta: f64, temp: f64, rng: &mut R) -> bool {
    if delta < 0.0 {
        return true;
    }
    if temp <= 0.0 {
        return false;
    }
    rng.random::<f64>() < (-delta / temp).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Move {
    /// Move `node` into cluster slot `to`.
    Merge { node: usize, to: usize },
    /// Replace cluster slot `slot` by the two parts.
    Split { slot: usize, left: Vec<usize>, right: Vec<usize> },
}

/// Incrementally tracked annealing state.
#[derive(Debug, Clone)]
pub struct AnnealState<'a> {
    rho: &'a DMatrix<f64>,
    kappa: f64,
    max_size: usize,
    assign: Vec<usize>,
    slots: Vec<Vec<usize>>,
    pair_sums: Vec<f64>,
    energy: f64,
}

impl<'a> AnnealState<'a> {
    /// All-singleton start.
    pub fn new(rho: &'a DMatrix<f64>, kappa: f64, max_size: usize) -> Self {
        let n = rho.nrows();
        AnnealState {
            rho,
            kappa,
            max_size: max_size.max(1),
            assign: (0..n).collect(),
            slots: (0..n).map(|i| vec![i]).collect(),
            pair_sums: vec![0.0; n],
            energy: n as f64,
        }
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut c: Vec<Vec<usize>> = self
            .slots
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                let mut s = s.clone();
                s.sort_unstable();
                s
            })
            .collect();
        c.sort();
        c
    }

    pub fn n_clusters(&self) -> usize {
        self.slots.iter().filter(|s| !s.is_empty()).count()
    }

    fn cost(&self, i: usize, j: usize) -> f64 {
        1.0 - self.rho[(i, j)] * self.rho[(i, j)]
    }

    fn link(&self, node: usize, members: &[usize]) -> f64 {
        members.iter().filter(|&&k| k != node).map(|&k| self.cost(node, k)).sum()
    }

    fn pair_sum(&self, members: &[usize]) -> f64 {
        let mut s = 0.0;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                s += self.cost(i, j);
            }
        }
        s
    }

    /// Random merge (move) or split with probability ½ each, resampled when
    /// infeasible.
    pub fn propose<R: Rng>(&self, rng: &mut R) -> Option<Move> {
        let n = self.assign.len();
        if n < 2 {
            return None;
        }
        for _ in 0..MAX_RESAMPLE {
            if rng.random::<bool>() {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                let (ci, cj) = (self.assign[i], self.assign[j]);
                if ci == cj || self.slots[cj].len() >= self.max_size {
                    continue;
                }
                return Some(Move::Merge { node: i, to: cj });
            } else {
                let i = rng.random_range(0..n);
                let slot = self.assign[i];
                if self.slots[slot].len() < 2 {
                    continue;
                }
                let (left, right) = split_cluster(&self.slots[slot], self.rho);
                return Some(Move::Split { slot, left, right });
            }
        }
        None
    }

    pub fn delta(&self, mv: &Move) -> f64 {
        match mv {
            Move::Merge { node, to } => {
                let from = self.assign[*node];
                let (nf, nt) = (self.slots[from].len(), self.slots[*to].len());
                let sf = self.pair_sums[from] - self.link(*node, &self.slots[from]);
                let st = self.pair_sums[*to] + self.link(*node, &self.slots[*to]);
                term(nf - 1, sf, self.kappa) + term(nt + 1, st, self.kappa)
                    - term(nf, self.pair_sums[from], self.kappa)
                    - term(nt, self.pair_sums[*to], self.kappa)
            }
            Move::Split { slot, left, right } => {
                term(left.len(), self.pair_sum(left), self.kappa)
                    + term(right.len(), self.pair_sum(right), self.kappa)
                    - term(self.slots[*slot].len(), self.pair_sums[*slot], self.kappa)
            }
        }
    }

    pub fn apply(&mut self, mv: Move, delta: f64) {
        match mv {
            Move::Merge { node, to } => {
                let from = self.assign[node];
                self.pair_sums[from] -= self.link(node, &self.slots[from]);
                self.pair_sums[to] += self.link(node, &self.slots[to]);
                self.slots[from].retain(|&k| k != node);
                self.slots[to].push(node);
                self.assign[node] = to;
                if self.slots[from].len() < 2 {
                    self.pair_sums[from] = 0.0;
                }
            }
            Move::Split { slot, left, right } => {
                let free = self
                    .slots
                    .iter()
                    .position(|s| s.is_empty())
                    .expect("n nodes never fill more than n slots");
                self.pair_sums[slot] = self.pair_sum(&left);
                self.pair_sums[free] = self.pair_sum(&right);
                for &k in &right {
                    self.assign[k] = free;
                }
                self.slots[slot] = left;
                self.slots[free] = right;
            }
        }
        self.energy += delta;
    }

    /// Energy recomputed from scratch.
    pub fn recompute(&self) -> f64 {
        energy(&self.clusters(), self.rho, self.kappa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealParams {
    pub temp0: f64,
    pub eta: f64,
    /// Proposals per run; `None` means `50·J²`.
    pub steps: Option<usize>,
    pub max_cluster_size: usize,
    pub restarts: usize,
}

impl Default for AnnealParams {
    fn default() -> Self {
        AnnealParams {
            temp0: 1.0,
            eta: 0.999,
            steps: None,
            max_cluster_size: 8,
            restarts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealOutcome {
    pub clusters: Vec<Vec<usize>>,
    pub energy: f64,
}

/// One annealing run from the all-singleton partition; returns the best
/// partition seen.
pub fn anneal_once<R: Rng>(
    rho: &DMatrix<f64>,
    kappa: f64,
    params: &AnnealParams,
    rng: &mut R,
) -> AnnealOutcome {
    let n = rho.nrows();
    let steps = params.steps.unwrap_or(50 * n * n).max(1);
    let mut state = AnnealState::new(rho, kappa, params.max_cluster_size);
    let mut best = AnnealOutcome {
        clusters: state.clusters(),
        energy: state.energy(),
    };
    let mut temp = params.temp0;
    for _ in 0..steps {
        if let Some(mv) = state.propose(rng) {
            let d = state.delta(&mv);
            if accept(d, temp, rng) {
                state.apply(mv, d);
                if state.energy() < best.energy - 1e-12 {
                    best = AnnealOutcome {
                        clusters: state.clusters(),
                        energy: state.energy(),
                    };
                }
            }
        }
        temp *= params.eta;
    }
    best
}

/// Best of `restarts` independent runs by final energy.
pub fn anneal(rho: &DMatrix<f64>, kappa: f64, params: &AnnealParams, seed: u64) -> AnnealOutcome {
    (0..params.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut g = rng::indexed(seed, "anneal", r as u64);
            anneal_once(rho, kappa, params, &mut g)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(None, |best: Option<AnnealOutcome>, o| match best {
            Some(b) if b.energy <= o.energy => Some(b),
            _ => Some(o),
        })
        .expect("at least one restart")
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaChoice {
    pub kappa: f64,
    pub outcome: AnnealOutcome,
    pub ratio: f64,
    pub within_tolerance: bool,
}

pub const KAPPA_RANGE: (f64, f64) = (1e-3, 1e3);
pub const KAPPA_STEPS: usize = 12;
pub const KAPPA_TOLERANCE: f64 = 0.1;

/// Log-space bisection on `κ` for a target cluster-count ratio.
pub fn tune_kappa(rho: &DMatrix<f64>, target: f64, params: &AnnealParams, seed: u64) -> Result<KappaChoice> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidParameter(format!("target reduction {target} outside (0, 1]")));
    }
    let n = rho.nrows() as f64;
    let (mut lo, mut hi) = (KAPPA_RANGE.0.ln(), KAPPA_RANGE.1.ln());
    let mut best: Option<KappaChoice> = None;
    for _ in 0..KAPPA_STEPS {
        let mid = 0.5 * (lo + hi);
        let kappa = mid.exp();
        let outcome = anneal(rho, kappa, params, seed);
        let ratio = outcome.clusters.len() as f64 / n;
        let err = (ratio - target).abs();
        let choice = KappaChoice {
            kappa,
            ratio,
            within_tolerance: err <= KAPPA_TOLERANCE + 1e-12,
            outcome,
        };
        if best.as_ref().is_none_or(|b| err < (b.ratio - target).abs()) {
            best = Some(choice.clone());
        }
        if choice.within_tolerance {
            return Ok(choice);
        }
        // Larger κ penalizes decorrelation more, so more clusters.
        if ratio < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = best.expect("at least one bisection step");
    log::warn!(
        "cluster-count ratio {:.3} misses target {target} (κ = {:.4})",
        best.ratio,
        best.kappa
    );
    Ok(best)
}

/// Pearson correlations of equally long series; constant series correlate 0.
pub fn correlation_matrix(series: &[Vec<f64>], squash_power: f64) -> DMatrix<f64> {
    let n = series.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let r = crate::stats::pearson(&series[i], &series[j]).unwrap_or(0.0).clamp(-1.0, 1.0);
            let r = r.signum() * r.abs().powf(squash_power);
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub anneal: AnnealParams,
    pub target_reduction: f64,
    pub top_cardinality: usize,
    /// `ρ ↦ sign(ρ)|ρ|^p` before the energy; 1 is the identity.
    pub squash_power: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            anneal: AnnealParams::default(),
            target_reduction: 0.3,
            top_cardinality: 3,
            squash_power: 1.0,
        }
    }
}

/// A node of the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    /// Indices of the previous level's clusters (assets at level 1).
    pub members: Vec<usize>,
    /// Representative asset (index into the asset list).
    pub delegate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub level: usize,
    pub clusters: Vec<Cluster>,
    /// `κ` used to form this level (absent at level 1).
    pub kappa: Option<f64>,
}

impl Partition {
    pub fn delegates(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.delegate).collect()
    }
}

/// Hierarchy for one asset kind; `assets` is sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub assets: Vec<String>,
    pub levels: Vec<Partition>,
}

impl Hierarchy {
    pub fn top(&self) -> &Partition {
        self.levels.last().expect("hierarchy has at least one level")
    }

    /// Assets (indices) covered by a cluster at a level.
    pub fn leaves(&self, level: usize, cluster: usize) -> Vec<usize> {
        if level == 0 {
            return self.levels[0].clusters[cluster].members.clone();
        }
        let mut out: Vec<usize> = self.levels[level].clusters[cluster]
            .members
            .iter()
            .flat_map(|&m| self.leaves(level - 1, m))
            .collect();
        out.sort_unstable();
        out
    }

    /// Asset-level partition induced by a level.
    pub fn asset_partition(&self, level: usize) -> Vec<Vec<usize>> {
        (0..self.levels[level].clusters.len()).map(|c| self.leaves(level, c)).collect()
    }
}

/// Builds levels bottom-up by clustering the previous level's delegates on
/// the correlation of their first-factor amplitudes.
pub fn build_hierarchy(
    asset_ids: &[String],
    gamma1: &[Vec<f64>],
    params: &ClusterParams,
    seed: u64,
) -> Result<Hierarchy> {
    if asset_ids.len() != gamma1.len() {
        return Err(Error::Dimension {
            expected: asset_ids.len(),
            actual: gamma1.len(),
        });
    }
    if asset_ids.is_empty() {
        return Err(Error::Degenerate("no assets to cluster".into()));
    }
    if asset_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("asset ids must be sorted and unique".into()));
    }
    let mut levels = vec![Partition {
        level: 1,
        clusters: (0..asset_ids.len())
            .map(|i| Cluster {
                members: vec![i],
                delegate: i,
            })
            .collect(),
        kappa: None,
    }];
    loop {
        let prev = levels.last().expect("level 1 exists");
        let nodes = prev.delegates();
        if nodes.len() <= params.top_cardinality.max(1) {
            break;
        }
        let series: Vec<Vec<f64>> = nodes.iter().map(|&a| gamma1[a].clone()).collect();
        let rho = correlation_matrix(&series, params.squash_power);
        let level_seed = rng::substream_seed(seed, &format!("level-{}", prev.level + 1));
        let choice = tune_kappa(&rho, params.target_reduction, &params.anneal, level_seed)?;
        if choice.outcome.clusters.len() >= nodes.len() {
            break;
        }
        let mut clusters: Vec<Cluster> = choice
            .outcome
            .clusters
            .iter()
            .map(|c| Cluster {
                members: c.clone(),
                delegate: nodes[select_delegate(c, &rho)],
            })
            .collect();
        clusters.sort_by_key(|c| c.delegate);
        levels.push(Partition {
            level: prev.level + 1,
            clusters,
            kappa: Some(choice.kappa),
        });
    }
    Ok(Hierarchy {
        assets: asset_ids.to_vec(),
        levels,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::HashMap;
    let n = a.len();
    let c2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ra: HashMap<usize, usize> = HashMap::new();
    let mut rb: HashMap<usize, usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((*x, *y)).or_default() += 1;
        *ra.entry(*x).or_default() += 1;
        *rb.entry(*y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-15 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Labels per item from a list of clusters.
pub fn labels(clusters: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut l = vec![usize::MAX; n];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            l[m] = c;
        }
    }
    l
}
